//! Quantization, the learned likelihood model, differentiable rate
//! estimation, and bit-exact range coding.

pub mod coder;
pub mod density;

pub use coder::{build_symbol_table, range_decode, range_encode, SymbolTable};
pub use density::FactorizedDensity;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Latent support bound: quantized values live in [-SUPPORT, SUPPORT].
pub const SUPPORT: i32 = 64;

/// Probability floor coupling rate estimates to 16-bit table precision.
pub const P_MIN: f64 = 1.0 / 65536.0;

/// What a quantized latent grid encodes, carried through payload records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentKind {
    Motion,
    Residual,
    Intra,
}

/// An integer latent grid with its provenance. Values are clamped into
/// support at construction, so coder and tables always agree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedLatent {
    kind: LatentKind,
    channels: usize,
    h: usize,
    w: usize,
    values: Vec<i32>,
}

impl QuantizedLatent {
    /// Convert a hard-quantized `[1, c, h, w]` tensor. Rejects non-integer
    /// grids; clamps into [-SUPPORT, SUPPORT] (matching `quantize_hard`).
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, kind: LatentKind) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if n != 1 {
            return Err(Error::shape(
                "quantized latent",
                format!("expected a single grid, got batch of {n}"),
            ));
        }
        let mut values = Vec::with_capacity(c * h * w);
        for &v in t.data() {
            let f = v.to_f64_lossy();
            if f.fract() != 0.0 || !f.is_finite() {
                return Err(Error::invalid(
                    "quantized latent",
                    format!("non-integer value {f}"),
                ));
            }
            values.push((f as i32).clamp(-SUPPORT, SUPPORT));
        }
        Ok(QuantizedLatent {
            kind,
            channels: c,
            h,
            w,
            values,
        })
    }

    pub fn kind(&self) -> LatentKind {
        self.kind
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        (self.channels, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, self.channels, self.h, self.w],
            self.values.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }

    pub(crate) fn from_parts(
        kind: LatentKind,
        channels: usize,
        h: usize,
        w: usize,
        values: Vec<i32>,
    ) -> Self {
        debug_assert_eq!(values.len(), channels * h * w);
        debug_assert!(values
            .iter()
            .all(|&v| (-SUPPORT..=SUPPORT).contains(&v)));
        QuantizedLatent {
            kind,
            channels,
            h,
            w,
            values,
        }
    }
}

/// Round half away from zero, clamp to [-SUPPORT, SUPPORT].
pub fn quantize_hard<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let lo = T::from_f64(-(SUPPORT as f64));
    let hi = T::from_f64(SUPPORT as f64);
    x.map(|v| {
        let r = v.round();
        if r < lo {
            lo
        } else if r > hi {
            hi
        } else {
            r
        }
    })
}

/// Add uniform noise in (-0.5, 0.5): the training surrogate. No clamp.
pub fn quantize_noise<T: Scalar, R: Rng>(x: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    x.map(|v| v + T::from_f64(rng.gen::<f64>() - 0.5))
}

/// Tape node with the hard-quantized value and a pass-through gradient.
pub fn quantize_hard_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let v = quantize_hard(&tape.value(x));
    tape.push(
        v,
        Some(Box::new(move |g: &Tensor<T>, sink: &mut crate::tensor::tape::GradSink<T>| {
            sink.add(x, g.clone());
        })),
    )
}

/// Tape node adding fresh uniform noise; the gradient of the noisy value
/// with respect to the input is exactly the identity.
pub fn quantize_noise_on_tape<T: Scalar, R: Rng>(tape: &mut Tape<T>, x: Var, rng: &mut R) -> Var {
    let v = quantize_noise(&tape.value(x), rng);
    tape.push(
        v,
        Some(Box::new(move |g: &Tensor<T>, sink: &mut crate::tensor::tape::GradSink<T>| {
            sink.add(x, g.clone());
        })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn hard_quantization_rounds_half_away_and_clamps() {
        let x = Tensor::new(
            &[1, 1, 1, 6],
            vec![0.4f32, -1.5, 2.5, -0.5, 900.0, -900.0],
        );
        let q = quantize_hard(&x);
        assert_eq!(q.data(), &[0.0, -2.0, 3.0, -1.0, 64.0, -64.0]);
    }

    #[test]
    fn hard_quantization_fixes_integers() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![-3.0f64, 0.0, 7.0, -64.0]);
        assert!(quantize_hard(&x).bit_eq(&x));
    }

    #[test]
    fn noise_mode_stays_within_half() {
        let mut rng = StdRng::seed_from_u64(1);
        let x = crate::tensor::gradcheck::probe(&[1, 4, 8, 8], 2).map(|v| v * 20.0);
        let q = quantize_noise(&x, &mut rng);
        assert!(q.max_abs_diff(&x) <= 0.5);
        // And not clamped: push a value far outside support.
        let big = Tensor::new(&[1, 1, 1, 1], vec![500.0f64]);
        let qb = quantize_noise(&big, &mut rng);
        assert!(qb.data()[0] > 499.0);
    }

    #[test]
    fn tape_quantizers_pass_gradients_through() {
        let mut tape = Tape::new();
        let p = crate::tensor::tape::Parameter::new(Tensor::new(&[1, 1, 1, 3], vec![0.2f64, 1.7, -0.6]));
        let x = tape.param(&p);
        let q = quantize_hard_on_tape(&mut tape, x);
        let s = tape.sum_all(q);
        let grads = tape.backward(s);
        let g = grads.of_param(p.id()).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
        assert_eq!(tape.value(q).data(), &[0.0, 2.0, -1.0]);
    }

    #[test]
    fn latent_conversion_round_trips_and_validates() {
        let t = Tensor::new(&[1, 2, 1, 2], vec![1.0f32, -64.0, 0.0, 7.0]);
        let q = QuantizedLatent::from_tensor(&t, LatentKind::Motion).unwrap();
        assert_eq!(q.kind(), LatentKind::Motion);
        assert_eq!(q.extents(), (2, 1, 2));
        assert!(q.to_tensor::<f32>().bit_eq(&t));

        let bad = Tensor::new(&[1, 1, 1, 1], vec![0.5f32]);
        assert!(QuantizedLatent::from_tensor(&bad, LatentKind::Intra).is_err());
    }
}
