//! Per-channel learned cumulative distribution over latent values, used both
//! for differentiable rate estimates and for deriving coder frequency
//! tables.
//!
//! Each channel owns a monotone scalar map built from four affine stages of
//! filter width three. Positivity of the mixing weights comes from a
//! softplus, intermediate stages apply the gated nonlinearity
//! `u + tanh(a)*tanh(u)` (slope >= 1-|tanh(a)| > 0), and a final sigmoid pins
//! the limits at 0 and 1, so the map is a valid CDF by construction.

use rand::Rng;

use super::{P_MIN, SUPPORT};
use crate::scalar::Scalar;
use crate::tensor::tape::{join, Parameter, Params, Tape, Var};
use crate::tensor::Tensor;

const WIDTH: usize = 3;

/// Bits for one symbol with model probability `p` (floored).
pub fn bits_for_prob(p: f64) -> f64 {
    -p.max(P_MIN).log2()
}

struct Stage<T> {
    /// Mixing weights `[channels, w_out, w_in]`, softplus-activated.
    h: Parameter<T>,
    /// Bias `[channels, w_out]`.
    b: Parameter<T>,
    /// Gate pre-activation `[channels, w_out]`; absent on the final stage.
    a: Option<Parameter<T>>,
}

impl<T: Scalar> Params<T> for Stage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        f(join(prefix, "h"), &self.h);
        f(join(prefix, "b"), &self.b);
        if let Some(a) = &self.a {
            f(join(prefix, "a"), a);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        f(join(prefix, "h"), &mut self.h);
        f(join(prefix, "b"), &mut self.b);
        if let Some(a) = &mut self.a {
            f(join(prefix, "a"), a);
        }
    }
}

/// The factorized likelihood model: independent channels, shared structure.
pub struct FactorizedDensity<T> {
    stages: Vec<Stage<T>>,
    channels: usize,
}

impl<T: Scalar> FactorizedDensity<T> {
    /// Initialized so every channel starts near a logistic CDF with scale
    /// ~10: wide enough to put mass on all plausible early-training latents.
    pub fn new<R: Rng>(rng: &mut R, channels: usize) -> Self {
        // Pre-sigmoid slope at 0 is (w_in-sum) ~ 27*s^4 across the four
        // stages; solve 27 s^4 = 1/10 and invert the softplus.
        let s = (1.0 / 270.0f64).powf(0.25);
        let h0 = T::from_f64((s.exp() - 1.0).ln());
        let widths = [(WIDTH, 1), (WIDTH, WIDTH), (WIDTH, WIDTH), (1, WIDTH)];
        let stages = widths
            .iter()
            .enumerate()
            .map(|(k, &(wo, wi))| {
                let b0: Vec<T> = (0..channels * wo)
                    .map(|_| T::from_f64(rng.gen_range(-0.5..0.5)))
                    .collect();
                Stage {
                    h: Parameter::new(Tensor::full(&[channels, wo, wi], h0)),
                    b: Parameter::new(Tensor::new(&[channels, wo], b0)),
                    a: (k + 1 < widths.len())
                        .then(|| Parameter::new(Tensor::zeros(&[channels, wo]))),
                }
            })
            .collect();
        FactorizedDensity { stages, channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Evaluate the per-channel cumulative at `x` of shape
    /// `[channels, 1, points]`.
    pub fn cumulative(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let shape = tape.shape_of(x);
        assert_eq!(
            (shape[0], shape[1]),
            (self.channels, 1),
            "cumulative input must be [channels, 1, points]"
        );
        let mut v = x;
        for stage in &self.stages {
            let hraw = tape.param(&stage.h);
            let h = tape.softplus(hraw);
            let b = tape.param(&stage.b);
            let mixed = tape.lane_matmul(h, v);
            let u = tape.lane_bias_add(mixed, b);
            v = match &stage.a {
                Some(a) => {
                    let araw = tape.param(a);
                    let gate = tape.tanh(araw);
                    let tu = tape.tanh(u);
                    let scaled = tape.lane_scale(tu, gate);
                    tape.add(u, scaled)
                }
                None => tape.sigmoid(u),
            };
        }
        v
    }

    /// Total estimated bits for a `[1, channels, h, w]` latent grid:
    /// `sum -log2(max(c(q+1/2) - c(q-1/2), p_min))`. Differentiable with
    /// respect to the density parameters and (for noise-mode latents) `q`.
    pub fn rate(&self, tape: &mut Tape<T>, q: Var) -> Var {
        let shape = tape.shape_of(q);
        assert_eq!(shape.len(), 4, "rate input must be [1, c, h, w]");
        assert_eq!(shape[0], 1, "rate codes one grid at a time");
        assert_eq!(shape[1], self.channels, "rate channels");
        let m = shape[2] * shape[3];
        let lanes = tape.reshape(q, &[self.channels, 1, m]);
        let up = tape.add_const(lanes, 0.5);
        let dn = tape.add_const(lanes, -0.5);
        let cu = self.cumulative(tape, up);
        let cd = self.cumulative(tape, dn);
        let p = tape.sub(cu, cd);
        let pf = tape.max_const(p, P_MIN);
        let lg = tape.log2(pf);
        let total = tape.sum_all(lg);
        tape.mul_const(total, -1.0)
    }

    /// Plain-value rate estimate.
    pub fn estimate_bits(&self, q: &Tensor<T>) -> f64 {
        let mut tape = Tape::inference();
        let v = tape.input(q.clone());
        let bits = self.rate(&mut tape, v);
        tape.value(bits).item().to_f64_lossy()
    }

    /// Interval probabilities of every integer in [-SUPPORT, SUPPORT] per
    /// channel, evaluated at the current parameters. Pure function of the
    /// parameters, so coder tables derived from it are reproducible.
    pub fn interval_probs(&self) -> Vec<Vec<f64>> {
        let n = (2 * SUPPORT + 2) as usize; // half-integer grid edges
        let mut pts = Vec::with_capacity(self.channels * n);
        for _ in 0..self.channels {
            for i in 0..n {
                pts.push(T::from_f64(-(SUPPORT as f64) - 0.5 + i as f64));
            }
        }
        let mut tape = Tape::inference();
        let x = tape.input(Tensor::new(&[self.channels, 1, n], pts));
        let c = self.cumulative(&mut tape, x);
        let cv = tape.value(c);
        (0..self.channels)
            .map(|ch| {
                (0..n - 1)
                    .map(|i| {
                        let lo = cv.data()[ch * n + i].to_f64_lossy();
                        let hi = cv.data()[ch * n + i + 1].to_f64_lossy();
                        (hi - lo).max(0.0)
                    })
                    .collect()
            })
            .collect()
    }
}

impl<T: Scalar> Params<T> for FactorizedDensity<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        for (k, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("s{k}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        for (k, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("s{k}")), f);
        }
    }
}
