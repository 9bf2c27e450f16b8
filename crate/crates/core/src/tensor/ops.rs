//! Differentiable operations recorded on a [`Tape`].
//!
//! Each op computes its value eagerly through the kernels in `kernels.rs` and
//! registers a closure that routes the output gradient to its parents. Shape
//! mismatches are programming errors and panic; fallible configuration lives
//! behind `Result` at the layer that builds geometry.

use super::gemm::{gemm_acc, transpose};
use super::kernels::{
    avg_pool2_backward, avg_pool2_forward, conv_backward, conv_forward, conv_transpose_backward,
    conv_transpose_forward, depthwise_valid_backward, depthwise_valid_forward, upsample2_backward,
    upsample2_forward, warp_backward, warp_forward, ConvGeom,
};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::scalar::Scalar;

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<T: Scalar> Tape<T> {
    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", &va, &vb);
        let out = va.zip_map(&vb, |x, y| x + y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", &va, &vb);
        let out = va.zip_map(&vb, |x, y| x - y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.map(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", &va, &vb);
        let out = va.zip_map(&vb, |x, y| x * y);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&vb, |gi, y| gi * y));
                sink.add(b, g.zip_map(&va, |gi, x| gi * x));
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("div", &va, &vb);
        let out = va.zip_map(&vb, |x, y| x / y);
        let out_c = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&vb, |gi, y| gi / y));
                let got = g.zip_map(&out_c, |gi, o| gi * o);
                sink.add(b, got.zip_map(&vb, |x, y| -(x / y)));
            })),
        )
    }

    // ---- scalar-constant variants ----

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let out = self.value(a).map(|x| x + cv);
        self.push(
            out,
            Some(Box::new(move |g, sink| sink.add(a, g.clone()))),
        )
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let out = self.value(a).map(|x| x * cv);
        self.push(
            out,
            Some(Box::new(move |g, sink| sink.add(a, g.map(|gi| gi * cv)))),
        )
    }

    /// Elementwise `max(x, c)`; the gradient passes where `x > c`.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let va = self.value(a);
        let out = va.map(|x| x.max(cv));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a,
                    g.zip_map(&va, |gi, x| if x > cv { gi } else { T::zero() }),
                );
            })),
        )
    }

    /// Elementwise `min(x, c)`; the gradient passes where `x < c`.
    pub fn min_const(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let va = self.value(a);
        let out = va.map(|x| x.min(cv));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a,
                    g.zip_map(&va, |gi, x| if x < cv { gi } else { T::zero() }),
                );
            })),
        )
    }

    /// `x^p` for a fixed exponent; inputs must stay positive.
    pub fn powf_const(&mut self, a: Var, p: f64) -> Var {
        let pv = T::from_f64(p);
        let va = self.value(a);
        let out = va.map(|x| x.powf(pv));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a,
                    g.zip_map(&va, |gi, x| gi * pv * x.powf(pv - T::one())),
                );
            })),
        )
    }

    // ---- elementwise unary ----

    pub fn relu(&mut self, a: Var) -> Var {
        self.max_const(a, 0.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let two = T::from_f64(2.0);
        let out = va.map(|x| x * x);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&va, |gi, x| gi * two * x));
            })),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sqrt());
        let out_c = out.clone();
        let half = T::from_f64(0.5);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&out_c, |gi, s| gi * half / s));
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let out_c = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&out_c, |gi, t| gi * (T::one() - t * t)));
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let half = T::from_f64(0.5);
        let out = self.value(a).map(|x| half * ((x * half).tanh() + T::one()));
        let out_c = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&out_c, |gi, s| gi * s * (T::one() - s)));
            })),
        )
    }

    /// Numerically stable `ln(1 + e^x)`; derivative is the sigmoid.
    pub fn softplus(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p());
        let half = T::from_f64(0.5);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a,
                    g.zip_map(&va, |gi, x| gi * half * ((x * half).tanh() + T::one())),
                );
            })),
        )
    }

    pub fn log2(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let inv_ln2 = T::from_f64(std::f64::consts::LOG2_E);
        let out = va.map(|x| x.log2());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.zip_map(&va, |gi, x| gi * inv_ln2 / x));
            })),
        )
    }

    /// Clamp to `[0, 1]` with subgradient 1 inside the interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(T::zero()).min(T::one()));
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(
                    a,
                    g.zip_map(&va, |gi, x| {
                        if x >= T::zero() && x <= T::one() {
                            gi
                        } else {
                            T::zero()
                        }
                    }),
                );
            })),
        )
    }

    // ---- reductions ----

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::new(&[1], vec![va.sum()]);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, Tensor::full(&shape, g.item()));
            })),
        )
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.mul_const(s, 1.0 / n as f64)
    }

    /// Mean squared error between two same-shape tensors, as `[1]`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = va.reshape(shape).expect("reshape: element count mismatch");
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.reshape(&old).expect("reshape backward"));
            })),
        )
    }

    /// Channels `[start, start+len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (n, c, h, w) = va.dims4();
        assert!(start + len <= c, "slice_channels: {start}+{len} > {c}");
        let hw = h * w;
        let mut out = vec![T::zero(); n * len * hw];
        for i in 0..n {
            let src = &va.data()[(i * c + start) * hw..(i * c + start + len) * hw];
            out[i * len * hw..(i + 1) * len * hw].copy_from_slice(src);
        }
        let full_shape = [n, c, h, w];
        self.push(
            Tensor::new(&[n, len, h, w], out),
            Some(Box::new(move |g, sink| {
                let mut dx = vec![T::zero(); n * c * hw];
                for i in 0..n {
                    dx[(i * c + start) * hw..(i * c + start + len) * hw]
                        .copy_from_slice(&g.data()[i * len * hw..(i + 1) * len * hw]);
                }
                sink.add(a, Tensor::new(&full_shape, dx));
            })),
        )
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_channels: no inputs");
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let (n, _, h, w) = vals[0].dims4();
        let chans: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat_channels: extent mismatch");
                vc
            })
            .collect();
        let c_total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = vec![T::zero(); n * c_total * hw];
        for i in 0..n {
            let mut at = 0;
            for (v, &vc) in vals.iter().zip(&chans) {
                out[(i * c_total + at) * hw..(i * c_total + at + vc) * hw]
                    .copy_from_slice(&v.data()[i * vc * hw..(i + 1) * vc * hw]);
                at += vc;
            }
        }
        let parts_c: Vec<Var> = parts.to_vec();
        self.push(
            Tensor::new(&[n, c_total, h, w], out),
            Some(Box::new(move |g, sink| {
                let mut at = 0;
                for (&p, &vc) in parts_c.iter().zip(&chans) {
                    let mut dp = vec![T::zero(); n * vc * hw];
                    for i in 0..n {
                        dp[i * vc * hw..(i + 1) * vc * hw].copy_from_slice(
                            &g.data()[(i * c_total + at) * hw..(i * c_total + at + vc) * hw],
                        );
                    }
                    sink.add(p, Tensor::new(&[n, vc, h, w], dp));
                    at += vc;
                }
            })),
        )
    }

    // ---- channel-parameterised ops ----

    /// Add a per-channel bias `[c]` to an NCHW tensor.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(bias);
        let (n, c, h, w) = va.dims4();
        assert_eq!(vb.len(), c, "add_channel_bias: bias length");
        let hw = h * w;
        let mut out = va.to_vec();
        for i in 0..n {
            for ch in 0..c {
                let b = vb.data()[ch];
                for v in &mut out[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    *v += b;
                }
            }
        }
        self.push(
            Tensor::new(va.shape(), out),
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                let mut db = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        for &gv in &g.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            db[ch] += gv;
                        }
                    }
                }
                sink.add(bias, Tensor::new(&[c], db));
            })),
        )
    }

    /// Per-pixel channel mixing: `out[n,i,p] = sum_j m[i,j] * x[n,j,p]` with
    /// `m` a `[co, ci]` matrix (the channel-coupling map of a normalisation
    /// layer).
    pub fn chan_mix(&mut self, a: Var, m: Var) -> Var {
        let va = self.value(a);
        let vm = self.value(m);
        let (n, ci, h, w) = va.dims4();
        assert_eq!(vm.rank(), 2, "chan_mix: matrix rank");
        let (co, mc) = (vm.shape()[0], vm.shape()[1]);
        assert_eq!(mc, ci, "chan_mix: channel mismatch");
        let hw = h * w;
        let mut out = vec![T::zero(); n * co * hw];
        for i in 0..n {
            gemm_acc(
                co,
                ci,
                hw,
                vm.data(),
                &va.data()[i * ci * hw..(i + 1) * ci * hw],
                &mut out[i * co * hw..(i + 1) * co * hw],
            );
        }
        self.push(
            Tensor::new(&[n, co, h, w], out),
            Some(Box::new(move |g, sink| {
                let m_t = transpose(co, ci, vm.data());
                let mut dx = vec![T::zero(); n * ci * hw];
                let mut dm = vec![T::zero(); co * ci];
                for i in 0..n {
                    gemm_acc(
                        ci,
                        co,
                        hw,
                        &m_t,
                        &g.data()[i * co * hw..(i + 1) * co * hw],
                        &mut dx[i * ci * hw..(i + 1) * ci * hw],
                    );
                    let x_t = transpose(ci, hw, &va.data()[i * ci * hw..(i + 1) * ci * hw]);
                    gemm_acc(
                        co,
                        hw,
                        ci,
                        &g.data()[i * co * hw..(i + 1) * co * hw],
                        &x_t,
                        &mut dm,
                    );
                }
                sink.add(a, Tensor::new(&[n, ci, h, w], dx));
                sink.add(m, Tensor::new(&[co, ci], dm));
            })),
        )
    }

    /// Multiply a whole tensor by a `[1]` scalar node.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let va = self.value(a);
        let vs = self.value(s);
        assert_eq!(vs.len(), 1, "mul_scalar_var: scalar operand");
        let sv = vs.item();
        let out = va.map(|x| x * sv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.map(|gi| gi * sv));
                let ds = g
                    .data()
                    .iter()
                    .zip(va.data().iter())
                    .fold(T::zero(), |acc, (&gi, &x)| acc + gi * x);
                sink.add(s, Tensor::new(&[1], vec![ds]));
            })),
        )
    }

    // ---- dense algebra ----

    /// Affine map `x w^T + b` with `x` `[m, k]`, `w` `[n_out, k]`, `b` `[n_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.rank(), 2, "linear: input rank");
        assert_eq!(vw.rank(), 2, "linear: weight rank");
        let (m, k) = (vx.shape()[0], vx.shape()[1]);
        let (n_out, wk) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(k, wk, "linear: inner dimension");
        let w_t = transpose(n_out, k, vw.data());
        let mut out = vec![T::zero(); m * n_out];
        if let Some(bv) = b {
            let vb = self.value(bv);
            assert_eq!(vb.len(), n_out, "linear: bias length");
            for row in out.chunks_exact_mut(n_out) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm_acc(m, k, n_out, vx.data(), &w_t, &mut out);
        self.push(
            Tensor::new(&[m, n_out], out),
            Some(Box::new(move |g, sink| {
                let mut dx = vec![T::zero(); m * k];
                gemm_acc(m, n_out, k, g.data(), vw.data(), &mut dx);
                sink.add(x, Tensor::new(&[m, k], dx));
                let g_t = transpose(m, n_out, g.data());
                let mut dw = vec![T::zero(); n_out * k];
                gemm_acc(n_out, m, k, &g_t, vx.data(), &mut dw);
                sink.add(w, Tensor::new(&[n_out, k], dw));
                if let Some(bv) = b {
                    let mut db = vec![T::zero(); n_out];
                    for row in g.data().chunks_exact(n_out) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    sink.add(bv, Tensor::new(&[n_out], db));
                }
            })),
        )
    }

    /// Concatenate two `[m, *]` matrices along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.rank(), 2, "concat_cols: rank");
        assert_eq!(va.shape()[0], vb.shape()[0], "concat_cols: row count");
        let (m, p, q) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![T::zero(); m * (p + q)];
        for i in 0..m {
            out[i * (p + q)..i * (p + q) + p].copy_from_slice(&va.data()[i * p..(i + 1) * p]);
            out[i * (p + q) + p..(i + 1) * (p + q)].copy_from_slice(&vb.data()[i * q..(i + 1) * q]);
        }
        self.push(
            Tensor::new(&[m, p + q], out),
            Some(Box::new(move |g, sink| {
                let mut da = vec![T::zero(); m * p];
                let mut db = vec![T::zero(); m * q];
                for i in 0..m {
                    da[i * p..(i + 1) * p].copy_from_slice(&g.data()[i * (p + q)..i * (p + q) + p]);
                    db[i * q..(i + 1) * q]
                        .copy_from_slice(&g.data()[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                sink.add(a, Tensor::new(&[m, p], da));
                sink.add(b, Tensor::new(&[m, q], db));
            })),
        )
    }

    // ---- convolution ----

    /// Strided same-padded convolution; `w` is `[out_c, in_c*k*k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeom) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(
            vw.len(),
            g.out_c * g.patch_len(),
            "conv2d: weight size for geometry"
        );
        let vb = b.map(|bv| self.value(bv));
        let out = conv_forward(&vx, vw.data(), vb.as_ref().map(|t| t.data()), &g);
        self.push(
            out,
            Some(Box::new(move |gout, sink| {
                let (dx, dw, db) = conv_backward(&vx, vw.data(), &g, gout);
                sink.add(x, dx);
                sink.add(w, Tensor::new(vw.shape(), dw));
                if let Some(bv) = b {
                    sink.add(bv, Tensor::new(&[g.out_c], db));
                }
            })),
        )
    }

    /// Transposed convolution: exact adjoint of the correlation in `g`, plus
    /// a bias on its `g.in_c` output channels.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeom) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(
            vw.len(),
            g.out_c * g.patch_len(),
            "conv2d_transpose: weight size for geometry"
        );
        let vb = b.map(|bv| self.value(bv));
        let out = conv_transpose_forward(&vx, vw.data(), vb.as_ref().map(|t| t.data()), &g);
        self.push(
            out,
            Some(Box::new(move |gout, sink| {
                let (dx, dw, db) = conv_transpose_backward(&vx, vw.data(), &g, gout);
                sink.add(x, dx);
                sink.add(w, Tensor::new(vw.shape(), dw));
                if let Some(bv) = b {
                    sink.add(bv, Tensor::new(&[g.in_c], db));
                }
            })),
        )
    }

    // ---- motion and resampling ----

    /// Bilinear backward warp of `reference` by `flow` (`[n,2,h,w]`, row then
    /// column displacement).
    pub fn warp(&mut self, reference: Var, flow: Var) -> Var {
        let vr = self.value(reference);
        let vf = self.value(flow);
        assert_eq!(vf.shape()[1], 2, "warp: flow needs 2 channels");
        assert_eq!(vr.shape()[0], vf.shape()[0], "warp: batch mismatch");
        assert_eq!(&vr.shape()[2..], &vf.shape()[2..], "warp: extent mismatch");
        let out = warp_forward(&vr, &vf);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let (dr, df) = warp_backward(&vr, &vf, g);
                sink.add(reference, dr);
                sink.add(flow, df);
            })),
        )
    }

    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = avg_pool2_forward(&va);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, avg_pool2_backward(&shape, g));
            })),
        )
    }

    pub fn upsample2(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = upsample2_forward(&va);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, upsample2_backward(&shape, g));
            })),
        )
    }

    /// Keep the top-left `oh x ow` corner of an NCHW tensor (used to trim a
    /// 2x up-sampled field back to an odd parent extent).
    pub fn crop_spatial(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let va = self.value(a);
        let (n, c, h, w) = va.dims4();
        assert!(oh <= h && ow <= w, "crop_spatial: {oh}x{ow} from {h}x{w}");
        let mut out = vec![T::zero(); n * c * oh * ow];
        for pc in 0..n * c {
            for y in 0..oh {
                out[pc * oh * ow + y * ow..pc * oh * ow + y * ow + ow]
                    .copy_from_slice(&va.data()[pc * h * w + y * w..pc * h * w + y * w + ow]);
            }
        }
        self.push(
            Tensor::new(&[n, c, oh, ow], out),
            Some(Box::new(move |g, sink| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for pc in 0..n * c {
                    for y in 0..oh {
                        dx[pc * h * w + y * w..pc * h * w + y * w + ow]
                            .copy_from_slice(&g.data()[pc * oh * ow + y * ow..pc * oh * ow + y * ow + ow]);
                    }
                }
                sink.add(a, Tensor::new(&[n, c, h, w], dx));
            })),
        )
    }

    /// Per-channel valid correlation with a fixed (non-trained) window.
    pub fn depthwise_valid(&mut self, a: Var, kernel: &Tensor<T>) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        assert_eq!(kernel.rank(), 2, "depthwise_valid: 2-d window");
        let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
        let out = depthwise_valid_forward(&va, kernel.data(), kh, kw);
        let k = kernel.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, depthwise_valid_backward(&shape, k.data(), kh, kw, g));
            })),
        )
    }

    // ---- per-channel small-matrix lanes (density model) ----

    /// Batched per-lane matmul: `h` `[c, wo, wi]`, `x` `[c, wi, m]`, out
    /// `[c, wo, m]`.
    pub fn lane_matmul(&mut self, h: Var, x: Var) -> Var {
        let vh = self.value(h);
        let vx = self.value(x);
        assert_eq!(vh.rank(), 3, "lane_matmul: lane weights rank");
        assert_eq!(vx.rank(), 3, "lane_matmul: lane input rank");
        let (c, wo, wi) = (vh.shape()[0], vh.shape()[1], vh.shape()[2]);
        assert_eq!(vx.shape()[0], c, "lane_matmul: lane count");
        assert_eq!(vx.shape()[1], wi, "lane_matmul: inner width");
        let m = vx.shape()[2];
        let mut out = vec![T::zero(); c * wo * m];
        for l in 0..c {
            gemm_acc(
                wo,
                wi,
                m,
                &vh.data()[l * wo * wi..(l + 1) * wo * wi],
                &vx.data()[l * wi * m..(l + 1) * wi * m],
                &mut out[l * wo * m..(l + 1) * wo * m],
            );
        }
        self.push(
            Tensor::new(&[c, wo, m], out),
            Some(Box::new(move |g, sink| {
                let mut dh = vec![T::zero(); c * wo * wi];
                let mut dx = vec![T::zero(); c * wi * m];
                for l in 0..c {
                    let gl = &g.data()[l * wo * m..(l + 1) * wo * m];
                    let xl = &vx.data()[l * wi * m..(l + 1) * wi * m];
                    let hl = &vh.data()[l * wo * wi..(l + 1) * wo * wi];
                    let x_t = transpose(wi, m, xl);
                    gemm_acc(wo, m, wi, gl, &x_t, &mut dh[l * wo * wi..(l + 1) * wo * wi]);
                    let h_t = transpose(wo, wi, hl);
                    gemm_acc(wi, wo, m, &h_t, gl, &mut dx[l * wi * m..(l + 1) * wi * m]);
                }
                sink.add(h, Tensor::new(&[c, wo, wi], dh));
                sink.add(x, Tensor::new(&[c, wi, m], dx));
            })),
        )
    }

    /// Add a per-(lane, row) bias `[c, w]` to `[c, w, m]`, broadcast over `m`.
    pub fn lane_bias_add(&mut self, a: Var, bias: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(bias);
        let (c, w, m) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert_eq!(vb.shape(), &[c, w], "lane_bias_add: bias shape");
        let mut out = va.to_vec();
        for l in 0..c {
            for r in 0..w {
                let b = vb.data()[l * w + r];
                for v in &mut out[(l * w + r) * m..(l * w + r + 1) * m] {
                    *v += b;
                }
            }
        }
        self.push(
            Tensor::new(va.shape(), out),
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                let mut db = vec![T::zero(); c * w];
                for (i, d) in db.iter_mut().enumerate() {
                    for &gv in &g.data()[i * m..(i + 1) * m] {
                        *d += gv;
                    }
                }
                sink.add(bias, Tensor::new(&[c, w], db));
            })),
        )
    }

    /// Multiply `[c, w, m]` by a per-(lane, row) scale `[c, w]`, broadcast
    /// over `m`.
    pub fn lane_scale(&mut self, a: Var, scale: Var) -> Var {
        let va = self.value(a);
        let vs = self.value(scale);
        let (c, w, m) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert_eq!(vs.shape(), &[c, w], "lane_scale: scale shape");
        let mut out = va.to_vec();
        for (i, chunk) in out.chunks_exact_mut(m).enumerate() {
            let s = vs.data()[i];
            for v in chunk {
                *v *= s;
            }
        }
        self.push(
            Tensor::new(va.shape(), out),
            Some(Box::new(move |g, sink| {
                let mut dx = g.to_vec();
                for (i, chunk) in dx.chunks_exact_mut(m).enumerate() {
                    let s = vs.data()[i];
                    for v in chunk {
                        *v *= s;
                    }
                }
                sink.add(a, Tensor::new(&[c, w, m], dx));
                let mut ds = vec![T::zero(); c * w];
                for (i, d) in ds.iter_mut().enumerate() {
                    let gr = &g.data()[i * m..(i + 1) * m];
                    let xr = &va.data()[i * m..(i + 1) * m];
                    for (&gv, &xv) in gr.iter().zip(xr) {
                        *d += gv * xv;
                    }
                }
                sink.add(scale, Tensor::new(&[c, w], ds));
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Parameter;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rt(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    // Finite-difference check of a scalar-valued tape program w.r.t. one input.
    fn fd_check(
        shape: &[usize],
        seed: u64,
        f: impl Fn(&mut Tape<f64>, Var) -> Var,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x0 = rt(&mut rng, shape);
        let mut tape = Tape::new();
        let p = Parameter::new(x0.clone());
        let x = tape.param(&p);
        let loss = f(&mut tape, x);
        assert_eq!(tape.value(loss).len(), 1, "fd_check needs a scalar loss");
        let grads = tape.backward(loss);
        let g = grads.of_param(p.id()).unwrap();
        let eps = 1e-5;
        for i in (0..x0.len()).step_by(1 + x0.len() / 7) {
            let mut up = x0.to_vec();
            up[i] += eps;
            let mut dn = x0.to_vec();
            dn[i] -= eps;
            let eval = |v: Vec<f64>| {
                let mut t = Tape::new();
                let xv = t.input(Tensor::new(shape, v));
                let l = f(&mut t, xv);
                t.value(l).item()
            };
            let fd = (eval(up) - eval(dn)) / (2.0 * eps);
            let got = g.data()[i];
            let denom = fd.abs().max(1e-6);
            assert!(
                ((got - fd) / denom).abs() < 1e-4,
                "coord {i}: analytic {got} vs fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        fd_check(&[2, 3], 1, |t, x| {
            let y = t.tanh(x);
            let z = t.mul(y, x);
            t.sum_all(z)
        });
        fd_check(&[4], 2, |t, x| {
            let y = t.sigmoid(x);
            let s = t.softplus(y);
            t.mean_all(s)
        });
        fd_check(&[5], 3, |t, x| {
            let sq = t.square(x);
            let y = t.add_const(sq, 1.5);
            let r = t.sqrt(y);
            let l = t.log2(r);
            t.sum_all(l)
        });
        fd_check(&[6], 4, |t, x| {
            let a = t.mul_const(x, 0.3);
            let b = t.add_const(a, 0.9);
            let p = t.powf_const(b, 0.7);
            t.sum_all(p)
        });
    }

    #[test]
    fn div_grad_matches_finite_differences() {
        fd_check(&[3, 2], 5, |t, x| {
            let sq = t.square(x);
            let denom = t.add_const(sq, 2.0);
            let q = t.div(x, denom);
            t.sum_all(q)
        });
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let g = ConvGeom::same(2, 3, 3, 2, 6, 6).unwrap();
        let mut rng = StdRng::seed_from_u64(6);
        let w0 = rt(&mut rng, &[3 * 18]);
        let b0 = rt(&mut rng, &[3]);
        fd_check(&[1, 2, 6, 6], 7, move |t, x| {
            let w = t.input(w0.clone());
            let b = t.input(b0.clone());
            let y = t.conv2d(x, w, Some(b), g);
            let sq = t.square(y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn conv_transpose_grads_match_finite_differences() {
        let g = ConvGeom::same(2, 3, 3, 2, 6, 6).unwrap();
        let mut rng = StdRng::seed_from_u64(8);
        let w0 = rt(&mut rng, &[3 * 18]);
        fd_check(&[1, 3, 3, 3], 9, move |t, x| {
            let w = t.input(w0.clone());
            let y = t.conv2d_transpose(x, w, None, g);
            let sq = t.square(y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn warp_flow_grad_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(10);
        let r0 = rt(&mut rng, &[1, 2, 5, 5]);
        // Keep samples interior so the clamp never kicks in near the fd probe.
        fd_check(&[1, 2, 5, 5], 11, move |t, x| {
            let flow = t.mul_const(x, 0.45);
            let reference = t.input(r0.clone());
            let y = t.warp(reference, flow);
            let sq = t.square(y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn structural_ops_grads_match_finite_differences() {
        fd_check(&[2, 4, 4, 4], 12, |t, x| {
            let lo = t.slice_channels(x, 0, 2);
            let hi = t.slice_channels(x, 2, 2);
            let prod = t.mul(lo, hi);
            let cc = t.concat_channels(&[prod, lo]);
            let pooled = t.avg_pool2(cc);
            let up = t.upsample2(pooled);
            let cropped = t.crop_spatial(up, 3, 3);
            let sq = t.square(cropped);
            t.sum_all(sq)
        });
    }

    #[test]
    fn chan_mix_and_bias_grads_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        let m0 = rt(&mut rng, &[3, 3]);
        let b0 = rt(&mut rng, &[3]);
        fd_check(&[2, 3, 2, 2], 14, move |t, x| {
            let m = t.input(m0.clone());
            let b = t.input(b0.clone());
            let mixed = t.chan_mix(x, m);
            let biased = t.add_channel_bias(mixed, b);
            let sq = t.square(biased);
            t.sum_all(sq)
        });
    }

    #[test]
    fn linear_and_concat_cols_grads_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(15);
        let w0 = rt(&mut rng, &[4, 6]);
        let b0 = rt(&mut rng, &[4]);
        fd_check(&[2, 3], 16, move |t, x| {
            let both = t.concat_cols(x, x);
            let w = t.input(w0.clone());
            let b = t.input(b0.clone());
            let y = t.linear(both, w, Some(b));
            let sq = t.square(y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn lane_ops_grads_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        let h0 = rt(&mut rng, &[2, 3, 3]);
        let s0 = rt(&mut rng, &[2, 3]);
        fd_check(&[2, 3, 4], 18, move |t, x| {
            let h = t.input(h0.clone());
            let s = t.input(s0.clone());
            let y = t.lane_matmul(h, x);
            let yb = t.lane_bias_add(y, s);
            let ys = t.lane_scale(yb, s);
            let sq = t.square(ys);
            t.sum_all(sq)
        });
    }

    #[test]
    fn weight_gradients_flow_to_parameters() {
        let g = ConvGeom::same(1, 2, 3, 1, 4, 4).unwrap();
        let mut rng = StdRng::seed_from_u64(19);
        let w = Parameter::new(rt(&mut rng, &[2 * 9]));
        let x0 = rt(&mut rng, &[1, 1, 4, 4]);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let x = tape.input(x0);
        let y = tape.conv2d(x, wv, None, g);
        let sq = tape.square(y);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let gw = grads.of_param(w.id()).unwrap();
        assert_eq!(gw.shape(), &[2 * 9]);
        assert!(gw.data().iter().any(|v| v.abs() > 1e-9));
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut t = Tape::<f32>::new();
        let a = t.input(Tensor::new(&[2, 2], vec![0.2, 0.4, 0.6, 0.8]));
        let m = t.mse(a, a);
        assert_eq!(t.value(m).item(), 0.0);
    }
}
