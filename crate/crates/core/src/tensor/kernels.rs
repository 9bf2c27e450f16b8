//! Pure forward kernels and their adjoints.
//!
//! Everything here is deterministic: fixed loop order, fixed summation order.
//! The tape ops in `ops.rs` wrap these; the adjoints are verified both by
//! inner-product identities (unit tests here) and by finite differences
//! (gradcheck suite).

use super::gemm::{gemm_acc, transpose};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a strided same-padded correlation. A transposed convolution
/// uses the same record, interpreted as the adjoint map (`out` side feeds in).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn same(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel size {k} must be odd and positive"),
            ));
        }
        if stride == 0 || stride > 2 {
            return Err(Error::shape(
                "conv2d",
                format!("stride {stride} unsupported (expected 1 or 2)"),
            ));
        }
        let pad = (k - 1) / 2;
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("input {in_h}x{in_w} too small for {k}x{k} kernel"),
            ));
        }
        let out_h = (in_h + 2 * pad - k) / stride + 1;
        let out_w = (in_w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            in_c,
            out_c,
            kh: k,
            kw: k,
            stride,
            pad,
            in_h,
            in_w,
            out_h,
            out_w,
        })
    }

    /// Patch-vector length: one GEMM column per output pixel.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Patch matrix `[patch_len x out_pixels]` of one image `[in_c, in_h, in_w]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let npix = g.out_pixels();
    let mut cols = vec![T::zero(); g.patch_len() * npix];
    fill_cols(x, g, |row, pix| row * npix + pix, &mut cols);
    cols
}

/// Same patches laid out `[out_pixels x patch_len]` (for weight gradients).
pub fn im2col_t<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); plen * g.out_pixels()];
    fill_cols(x, g, |row, pix| pix * plen + row, &mut cols);
    cols
}

fn fill_cols<T: Scalar>(x: &[T], g: &ConvGeom, at: impl Fn(usize, usize) -> usize, cols: &mut [T]) {
    let (s, pad) = (g.stride as isize, g.pad as isize);
    for ic in 0..g.in_c {
        let plane = &x[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (ic * g.kh + u) * g.kw + v;
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + u as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let in_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let base = oy * g.out_w;
                    for ox in 0..g.out_w {
                        let ix = ox as isize * s + v as isize - pad;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        cols[at(row, base + ox)] = in_row[ix as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add patch columns back into an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let mut x = vec![T::zero(); g.in_c * g.in_h * g.in_w];
    let npix = g.out_pixels();
    let (s, pad) = (g.stride as isize, g.pad as isize);
    for ic in 0..g.in_c {
        let plane = &mut x[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (ic * g.kh + u) * g.kw + v;
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + u as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let out_row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let base = oy * g.out_w;
                    for ox in 0..g.out_w {
                        let ix = ox as isize * s + v as isize - pad;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        out_row[ix as usize] += cols[row * npix + base + ox];
                    }
                }
            }
        }
    }
    x
}

/// Strided same-padded correlation. `w` is `[out_c, in_c*kh*kw]` row-major,
/// `x` is `[n, in_c, in_h, in_w]`, output `[n, out_c, out_h, out_w]`.
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = x.shape()[0];
    let in_len = g.in_c * g.in_h * g.in_w;
    let npix = g.out_pixels();
    let mut out = vec![T::zero(); n * g.out_c * npix];
    for i in 0..n {
        let cols = im2col(&x.data()[i * in_len..(i + 1) * in_len], g);
        let out_img = &mut out[i * g.out_c * npix..(i + 1) * g.out_c * npix];
        if let Some(b) = bias {
            for oc in 0..g.out_c {
                out_img[oc * npix..(oc + 1) * npix].fill(b[oc]);
            }
        }
        gemm_acc(g.out_c, g.patch_len(), npix, w, &cols, out_img);
    }
    Tensor::new(&[n, g.out_c, g.out_h, g.out_w], out)
}

/// Gradients of `conv_forward` w.r.t. input, weights, and bias.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    g: &ConvGeom,
    gout: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let n = x.shape()[0];
    let plen = g.patch_len();
    let npix = g.out_pixels();
    let in_len = g.in_c * g.in_h * g.in_w;
    let w_t = transpose(g.out_c, plen, w);
    let mut dx = vec![T::zero(); n * in_len];
    let mut dw = vec![T::zero(); g.out_c * plen];
    let mut db = vec![T::zero(); g.out_c];
    for i in 0..n {
        let go = &gout.data()[i * g.out_c * npix..(i + 1) * g.out_c * npix];
        let mut dcols = vec![T::zero(); plen * npix];
        gemm_acc(plen, g.out_c, npix, &w_t, go, &mut dcols);
        let di = col2im(&dcols, g);
        dx[i * in_len..(i + 1) * in_len].copy_from_slice(&di);

        let cols_t = im2col_t(&x.data()[i * in_len..(i + 1) * in_len], g);
        gemm_acc(g.out_c, npix, plen, go, &cols_t, &mut dw);
        for oc in 0..g.out_c {
            for &v in &go[oc * npix..(oc + 1) * npix] {
                db[oc] += v;
            }
        }
    }
    (
        Tensor::new(&[n, g.in_c, g.in_h, g.in_w], dx),
        dw,
        db,
    )
}

/// Transposed (up-sampling) convolution: the exact adjoint of the strided
/// correlation described by `g`, plus an output-channel bias. Input has
/// `g.out_c` channels at `g.out_h x g.out_w`; output has `g.in_c` channels at
/// `g.in_h x g.in_w`.
pub fn conv_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = x.shape()[0];
    let plen = g.patch_len();
    let npix = g.out_pixels();
    let out_len = g.in_c * g.in_h * g.in_w;
    let w_t = transpose(g.out_c, plen, w);
    let mut out = vec![T::zero(); n * out_len];
    for i in 0..n {
        let xi = &x.data()[i * g.out_c * npix..(i + 1) * g.out_c * npix];
        let mut cols = vec![T::zero(); plen * npix];
        gemm_acc(plen, g.out_c, npix, &w_t, xi, &mut cols);
        let img = col2im(&cols, g);
        let out_img = &mut out[i * out_len..(i + 1) * out_len];
        out_img.copy_from_slice(&img);
        if let Some(b) = bias {
            let hw = g.in_h * g.in_w;
            for c in 0..g.in_c {
                for v in &mut out_img[c * hw..(c + 1) * hw] {
                    *v += b[c];
                }
            }
        }
    }
    Tensor::new(&[n, g.in_c, g.in_h, g.in_w], out)
}

/// Gradients of `conv_transpose_forward` w.r.t. input, weights, and bias.
pub fn conv_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    g: &ConvGeom,
    gout: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let n = x.shape()[0];
    let plen = g.patch_len();
    let npix = g.out_pixels();
    let out_len = g.in_c * g.in_h * g.in_w;
    let mut dx = vec![T::zero(); n * g.out_c * npix];
    let mut dw = vec![T::zero(); g.out_c * plen];
    let mut db = vec![T::zero(); g.in_c];
    let hw = g.in_h * g.in_w;
    for i in 0..n {
        let go = &gout.data()[i * out_len..(i + 1) * out_len];
        let go_cols = im2col(go, g);
        let dxi = &mut dx[i * g.out_c * npix..(i + 1) * g.out_c * npix];
        gemm_acc(g.out_c, plen, npix, w, &go_cols, dxi);

        let go_cols_t = im2col_t(go, g);
        let xi = &x.data()[i * g.out_c * npix..(i + 1) * g.out_c * npix];
        gemm_acc(g.out_c, npix, plen, xi, &go_cols_t, &mut dw);
        for c in 0..g.in_c {
            for &v in &go[c * hw..(c + 1) * hw] {
                db[c] += v;
            }
        }
    }
    (
        Tensor::new(&[n, g.out_c, g.out_h, g.out_w], dx),
        dw,
        db,
    )
}

/// Bilinear backward warp. `reference` is `[n, c, h, w]`, `flow` is
/// `[n, 2, h, w]` with channel 0 the row displacement and channel 1 the
/// column displacement: `out(a, b) = reference(a + da, b + db)`, sample
/// coordinates clamped to the border (border replication).
pub fn warp_forward<T: Scalar>(reference: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (
        reference.shape()[0],
        reference.shape()[1],
        reference.shape()[2],
        reference.shape()[3],
    );
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    let rd = reference.data();
    let fd = flow.data();
    for i in 0..n {
        let da = &fd[i * 2 * hw..i * 2 * hw + hw];
        let db = &fd[i * 2 * hw + hw..(i + 1) * 2 * hw];
        for a in 0..h {
            for b in 0..w {
                let p = a * w + b;
                let s = sample_coords::<T>(a, b, da[p], db[p], h, w);
                for ch in 0..c {
                    let plane = &rd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    out[(i * c + ch) * hw + p] = s.w00 * plane[s.y0 * w + s.x0]
                        + s.w01 * plane[s.y0 * w + s.x1]
                        + s.w10 * plane[s.y1 * w + s.x0]
                        + s.w11 * plane[s.y1 * w + s.x1];
                }
            }
        }
    }
    Tensor::new(reference.shape(), out)
}

/// Gradients of `warp_forward` w.r.t. reference and flow.
pub fn warp_backward<T: Scalar>(
    reference: &Tensor<T>,
    flow: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (
        reference.shape()[0],
        reference.shape()[1],
        reference.shape()[2],
        reference.shape()[3],
    );
    let hw = h * w;
    let rd = reference.data();
    let fd = flow.data();
    let gd = gout.data();
    let mut dref = vec![T::zero(); n * c * hw];
    let mut dflow = vec![T::zero(); n * 2 * hw];
    for i in 0..n {
        let da = &fd[i * 2 * hw..i * 2 * hw + hw];
        let db = &fd[i * 2 * hw + hw..(i + 1) * 2 * hw];
        for a in 0..h {
            for b in 0..w {
                let p = a * w + b;
                let s = sample_coords::<T>(a, b, da[p], db[p], h, w);
                let mut g_ya = T::zero();
                let mut g_xb = T::zero();
                for ch in 0..c {
                    let plane = &rd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    let g = gd[(i * c + ch) * hw + p];
                    let dpl = &mut dref[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    dpl[s.y0 * w + s.x0] += g * s.w00;
                    dpl[s.y0 * w + s.x1] += g * s.w01;
                    dpl[s.y1 * w + s.x0] += g * s.w10;
                    dpl[s.y1 * w + s.x1] += g * s.w11;
                    let one = T::one();
                    // d(sample)/d(ya) and d(sample)/d(xb) of the bilinear form.
                    g_ya += g
                        * ((one - s.wx) * (plane[s.y1 * w + s.x0] - plane[s.y0 * w + s.x0])
                            + s.wx * (plane[s.y1 * w + s.x1] - plane[s.y0 * w + s.x1]));
                    g_xb += g
                        * ((one - s.wy) * (plane[s.y0 * w + s.x1] - plane[s.y0 * w + s.x0])
                            + s.wy * (plane[s.y1 * w + s.x1] - plane[s.y1 * w + s.x0]));
                }
                // Clamped coordinates stop depending on the flow.
                if s.clamped_y {
                    g_ya = T::zero();
                }
                if s.clamped_x {
                    g_xb = T::zero();
                }
                dflow[i * 2 * hw + p] += g_ya;
                dflow[i * 2 * hw + hw + p] += g_xb;
            }
        }
    }
    (
        Tensor::new(reference.shape(), dref),
        Tensor::new(flow.shape(), dflow),
    )
}

struct SampleCoords<T> {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    wy: T,
    wx: T,
    w00: T,
    w01: T,
    w10: T,
    w11: T,
    clamped_y: bool,
    clamped_x: bool,
}

#[inline]
fn sample_coords<T: Scalar>(
    a: usize,
    b: usize,
    da: T,
    db: T,
    h: usize,
    w: usize,
) -> SampleCoords<T> {
    let one = T::one();
    let max_y = T::from_usize(h - 1);
    let max_x = T::from_usize(w - 1);
    let ya_raw = T::from_usize(a) + da;
    let xb_raw = T::from_usize(b) + db;
    let ya = ya_raw.max(T::zero()).min(max_y);
    let xb = xb_raw.max(T::zero()).min(max_x);
    let y0f = ya.floor();
    let x0f = xb.floor();
    let y0 = y0f.to_f64_lossy() as usize;
    let x0 = x0f.to_f64_lossy() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = ya - y0f;
    let wx = xb - x0f;
    SampleCoords {
        y0,
        y1,
        x0,
        x1,
        wy,
        wx,
        w00: (one - wy) * (one - wx),
        w01: (one - wy) * wx,
        w10: wy * (one - wx),
        w11: wy * wx,
        clamped_y: ya_raw < T::zero() || ya_raw > max_y,
        clamped_x: xb_raw < T::zero() || xb_raw > max_x,
    }
}

/// 2x2 mean pooling; extents must be even.
pub fn avg_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 requires even extents, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let xd = x.data();
    for pc in 0..n * c {
        let plane = &xd[pc * h * w..(pc + 1) * h * w];
        let dst = &mut out[pc * oh * ow..(pc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x_) = (oy * 2, ox * 2);
                dst[oy * ow + ox] = (plane[y * w + x_]
                    + plane[y * w + x_ + 1]
                    + plane[(y + 1) * w + x_]
                    + plane[(y + 1) * w + x_ + 1])
                    * quarter;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Scalar>(in_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    let gd = gout.data();
    for pc in 0..n * c {
        let gpl = &gd[pc * oh * ow..(pc + 1) * oh * ow];
        let dst = &mut dx[pc * h * w..(pc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gpl[oy * ow + ox] * quarter;
                let (y, x_) = (oy * 2, ox * 2);
                dst[y * w + x_] += g;
                dst[y * w + x_ + 1] += g;
                dst[(y + 1) * w + x_] += g;
                dst[(y + 1) * w + x_ + 1] += g;
            }
        }
    }
    Tensor::new(in_shape, dx)
}

/// Bilinear 2x up-sampling (half-pixel-centered sampling grid).
pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h * 2, w * 2);
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let xd = x.data();
    for pc in 0..n * c {
        let plane = &xd[pc * h * w..(pc + 1) * h * w];
        let dst = &mut out[pc * oh * ow..(pc + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, wy) = ty[oy];
            let one_wy = T::one() - wy;
            for ox in 0..ow {
                let (x0, x1, wx) = tx[ox];
                dst[oy * ow + ox] = one_wy
                    * ((T::one() - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1])
                    + wy * ((T::one() - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn upsample2_backward<T: Scalar>(in_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h * 2, w * 2);
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); n * c * h * w];
    let gd = gout.data();
    for pc in 0..n * c {
        let gpl = &gd[pc * oh * ow..(pc + 1) * oh * ow];
        let dst = &mut dx[pc * h * w..(pc + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, wy) = ty[oy];
            let one_wy = T::one() - wy;
            for ox in 0..ow {
                let (x0, x1, wx) = tx[ox];
                let g = gpl[oy * ow + ox];
                dst[y0 * w + x0] += g * one_wy * (T::one() - wx);
                dst[y0 * w + x1] += g * one_wy * wx;
                dst[y1 * w + x0] += g * wy * (T::one() - wx);
                dst[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    Tensor::new(in_shape, dx)
}

fn axis_taps<T: Scalar>(in_n: usize, out_n: usize) -> Vec<(usize, usize, T)> {
    (0..out_n)
        .map(|o| {
            let pos = (T::from_usize(o) + T::from_f64(0.5)) * T::from_f64(0.5) - T::from_f64(0.5);
            let pos = pos.max(T::zero()).min(T::from_usize(in_n - 1));
            let p0 = pos.floor();
            let i0 = p0.to_f64_lossy() as usize;
            let i1 = (i0 + 1).min(in_n - 1);
            (i0, i1, pos - p0)
        })
        .collect()
}

/// Per-channel valid-region correlation with one fixed `kh x kw` window
/// (used for the Gaussian statistics inside MS-SSIM).
pub fn depthwise_valid_forward<T: Scalar>(x: &Tensor<T>, k: &[T], kh: usize, kw: usize) -> Tensor<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h >= kh && w >= kw, "depthwise window {kh}x{kw} exceeds input {h}x{w}");
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let xd = x.data();
    for pc in 0..n * c {
        let plane = &xd[pc * h * w..(pc + 1) * h * w];
        let dst = &mut out[pc * oh * ow..(pc + 1) * oh * ow];
        for u in 0..kh {
            for v in 0..kw {
                let kv = k[u * kw + v];
                for oy in 0..oh {
                    let src = &plane[(oy + u) * w + v..(oy + u) * w + v + ow];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (d, &s) in drow.iter_mut().zip(src.iter()) {
                        *d = *d + kv * s;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn depthwise_valid_backward<T: Scalar>(
    in_shape: &[usize],
    k: &[T],
    kh: usize,
    kw: usize,
    gout: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut dx = vec![T::zero(); n * c * h * w];
    let gd = gout.data();
    for pc in 0..n * c {
        let gpl = &gd[pc * oh * ow..(pc + 1) * oh * ow];
        let dst = &mut dx[pc * h * w..(pc + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let kv = k[u * kw + v];
                for oy in 0..oh {
                    let grow = &gpl[oy * ow..(oy + 1) * ow];
                    let drow = &mut dst[(oy + u) * w + v..(oy + u) * w + v + ow];
                    for (d, &g) in drow.iter_mut().zip(grow.iter()) {
                        *d = *d + kv * g;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, dx)
}
