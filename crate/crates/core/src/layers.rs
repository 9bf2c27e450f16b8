//! Reusable network layers: convolutions, transposed convolutions, divisive
//! normalization, and dense maps. Each layer owns its `Parameter`s and knows
//! how to record its forward pass on a tape.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::tape::{join, Parameter, Params, Tape, Var};
use crate::tensor::Tensor;

/// Uniform init in `[-limit, limit]` with `limit = sqrt(6 / fan_in)`.
pub fn fan_in_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
            .collect(),
    )
}

/// Strided same-padded convolution layer.
pub struct Conv2d<T> {
    w: Parameter<T>,
    b: Parameter<T>,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(rng: &mut R, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            w: Parameter::new(fan_in_uniform(rng, &[out_c, fan_in], fan_in)),
            b: Parameter::new(Tensor::zeros(&[out_c])),
            in_c,
            out_c,
            k,
            stride,
        }
    }

    /// All-zero weights and bias: the output layer of residual heads, so the
    /// whole network starts as the identity map.
    pub fn zeroed(in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            w: Parameter::new(Tensor::zeros(&[out_c, in_c * k * k])),
            b: Parameter::new(Tensor::zeros(&[out_c])),
            in_c,
            out_c,
            k,
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let shape = tape.shape_of(x);
        assert_eq!(shape[1], self.in_c, "conv input channels");
        let g = ConvGeom::same(self.in_c, self.out_c, self.k, self.stride, shape[2], shape[3])
            .expect("conv geometry");
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.conv2d(x, w, Some(b), g)
    }
}

impl<T: Scalar> Params<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

/// Transposed convolution: doubles (stride 2) or keeps (stride 1) the
/// spatial extent, as the exact adjoint of the matching forward convolution.
pub struct ConvTranspose2d<T> {
    w: Parameter<T>,
    b: Parameter<T>,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng>(rng: &mut R, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        let fan_in = in_c * k * k / (stride * stride);
        ConvTranspose2d {
            w: Parameter::new(fan_in_uniform(
                rng,
                &[in_c, out_c * k * k],
                fan_in.max(1),
            )),
            b: Parameter::new(Tensor::zeros(&[out_c])),
            in_c,
            out_c,
            k,
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let shape = tape.shape_of(x);
        assert_eq!(shape[1], self.in_c, "transposed conv input channels");
        let (oh, ow) = (shape[2] * self.stride, shape[3] * self.stride);
        let g = ConvGeom::same(self.out_c, self.in_c, self.k, self.stride, oh, ow)
            .expect("transposed conv geometry");
        assert_eq!(
            (g.out_h, g.out_w),
            (shape[2], shape[3]),
            "transposed conv geometry must invert the forward extents"
        );
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.conv2d_transpose(x, w, Some(b), g)
    }
}

impl<T: Scalar> Params<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

/// Iterations of the fixed-point solve behind the exact normalization
/// inverse. The per-pixel system `u = beta + Gamma (y^2 u)` is a positive
/// linear map; training keeps it contractive (gamma starts at 0.1 on the
/// diagonal and gradients are clipped), and 24 iterations converge far below
/// f32 resolution at contraction factors up to ~0.5.
pub const GDN_INVERSE_STEPS: usize = 24;

/// Generalized divisive normalization with positivity by squaring:
/// `beta = beta_raw^2 + 1e-6`, `gamma = gamma_raw^2 + 1e-6`.
///
/// `forward` divides; `inverse` solves the forward map exactly (fixed-point
/// on the squared denominator), so `inverse(forward(x)) = x` up to float
/// resolution with shared parameters.
pub struct Gdn<T> {
    beta_raw: Parameter<T>,
    gamma_raw: Parameter<T>,
    channels: usize,
}

const POSITIVITY_FLOOR: f64 = 1e-6;

impl<T: Scalar> Gdn<T> {
    pub fn new(channels: usize) -> Self {
        // beta starts at 1, gamma at 0.1 on the diagonal.
        let mut gamma = vec![T::zero(); channels * channels];
        let diag = T::from_f64(0.1f64.sqrt());
        for c in 0..channels {
            gamma[c * channels + c] = diag;
        }
        Gdn {
            beta_raw: Parameter::new(Tensor::full(&[channels], T::one())),
            gamma_raw: Parameter::new(Tensor::new(&[channels, channels], gamma)),
            channels,
        }
    }

    fn positive_params(&self, tape: &mut Tape<T>) -> (Var, Var) {
        let braw = tape.param(&self.beta_raw);
        let graw = tape.param(&self.gamma_raw);
        let bsq = tape.square(braw);
        let beta = tape.add_const(bsq, POSITIVITY_FLOOR);
        let gsq = tape.square(graw);
        let gamma = tape.add_const(gsq, POSITIVITY_FLOOR);
        (beta, gamma)
    }

    /// `y_c = x_c / sqrt(beta_c + sum_j gamma_cj x_j^2)`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let shape = tape.shape_of(x);
        assert_eq!(shape[1], self.channels, "gdn channels");
        let (beta, gamma) = self.positive_params(tape);
        let x2 = tape.square(x);
        let mixed = tape.chan_mix(x2, gamma);
        let denom_sq = tape.add_channel_bias(mixed, beta);
        let denom = tape.sqrt(denom_sq);
        tape.div(x, denom)
    }

    /// Exact inverse of `forward` with the same parameters: recovers `x` from
    /// `y` by solving `u = beta + Gamma (y^2 u)` for the squared multiplier
    /// and returning `y * sqrt(u)`.
    pub fn inverse(&self, tape: &mut Tape<T>, y: Var) -> Var {
        let shape = tape.shape_of(y);
        assert_eq!(shape[1], self.channels, "igdn channels");
        let (beta, gamma) = self.positive_params(tape);
        let y2 = tape.square(y);
        let zeros = tape.constant(Tensor::zeros(&shape));
        let mut u = tape.add_channel_bias(zeros, beta);
        for _ in 0..GDN_INVERSE_STEPS {
            let prod = tape.mul(y2, u);
            let mixed = tape.chan_mix(prod, gamma);
            u = tape.add_channel_bias(mixed, beta);
        }
        let s = tape.sqrt(u);
        tape.mul(y, s)
    }
}

impl<T: Scalar> Params<T> for Gdn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        f(join(prefix, "beta"), &self.beta_raw);
        f(join(prefix, "gamma"), &self.gamma_raw);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        f(join(prefix, "beta"), &mut self.beta_raw);
        f(join(prefix, "gamma"), &mut self.gamma_raw);
    }
}

/// Fully connected layer `x W^T + b`.
pub struct Dense<T> {
    w: Parameter<T>,
    b: Parameter<T>,
    in_dim: usize,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        Dense {
            w: Parameter::new(fan_in_uniform(rng, &[out_dim, in_dim], in_dim)),
            b: Parameter::new(Tensor::zeros(&[out_dim])),
            in_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Var {
        assert_eq!(tape.shape_of(x)[1], self.in_dim, "dense input width");
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.linear(x, w, Some(b))
    }
}

impl<T: Scalar> Params<T> for Dense<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}
