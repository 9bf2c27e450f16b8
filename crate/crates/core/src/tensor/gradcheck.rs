//! Finite-difference gradient verification.
//!
//! Runs in `f64`: central differences with step 1e-5 against the tape
//! gradient, compared by relative error with an absolute floor so near-zero
//! coordinates do not dominate.

use super::tape::{Parameter, Tape, Var};
use super::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// How many coordinates to probe (spread evenly; all if the tensor is
    /// smaller).
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            max_coords: 24,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub coords_checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<(usize, f64, f64)>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

impl GradCheck {
    /// Check `d loss / d input` at `x0` for a scalar-valued tape program.
    pub fn run(
        &self,
        x0: &Tensor<f64>,
        f: &dyn Fn(&mut Tape<f64>, Var) -> Var,
    ) -> GradReport {
        let p = Parameter::new(x0.clone());
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let loss = f(&mut tape, x);
        assert_eq!(tape.value(loss).len(), 1, "gradcheck needs a scalar loss");
        let grads = tape.backward(loss);
        let analytic = grads
            .of_param(p.id())
            .unwrap_or_else(|| Tensor::zeros(x0.shape()));

        let n = x0.len();
        let step = (n / self.max_coords).max(1);
        let mut report = GradReport {
            coords_checked: 0,
            worst_rel: 0.0,
            failures: Vec::new(),
        };
        let shape = x0.shape().to_vec();
        let eval = |v: Vec<f64>| {
            let mut t = Tape::new();
            let xv = t.input(Tensor::new(&shape, v));
            let l = f(&mut t, xv);
            t.value(l).item()
        };
        for i in (0..n).step_by(step) {
            let mut up = x0.to_vec();
            up[i] += self.eps;
            let mut dn = x0.to_vec();
            dn[i] -= self.eps;
            let fd = (eval(up) - eval(dn)) / (2.0 * self.eps);
            let got = analytic.data()[i];
            let rel = (got - fd).abs() / fd.abs().max(self.abs_floor);
            report.coords_checked += 1;
            report.worst_rel = report.worst_rel.max(rel);
            if rel > self.rel_tol {
                report.failures.push((i, got, fd));
            }
        }
        report
    }
}

/// A smooth random tensor suitable as a gradcheck probe point (values bounded
/// away from op kinks like clamp edges).
pub fn probe(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-0.45..0.45)).collect(),
    )
}
