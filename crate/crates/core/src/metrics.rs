//! Quality metrics and rate-distortion comparison: PSNR, multi-scale
//! structural similarity, and Bjontegaard delta bit-rate between RD curves.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// PSNR values are capped here so lossless frames serialize cleanly.
pub const PSNR_CAP_DB: f64 = 100.0;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const C1: f64 = K1 * K1; // dynamic range is [0,1]
const C2: f64 = K2 * K2;
const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Floor applied before fractional powers; per-scale means sit well above it.
const POW_GUARD: f64 = 1e-6;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}

/// Peak signal-to-noise ratio in dB between two equal-shape tensors in [0,1].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64_lossy() - y.to_f64_lossy();
        acc += d * d;
    }
    Ok(psnr_from_mse(acc / a.len() as f64))
}

/// Multi-scale similarity score with the scale bookkeeping that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsSsim {
    pub value: f64,
    /// Scales actually used (5 needs min(H,W) >= 176).
    pub scales: usize,
    /// True when fewer than five scales forced a weight renormalization.
    pub renormalized: bool,
}

fn gaussian_window<T: Scalar>() -> Tensor<T> {
    let mut g = [0.0f64; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let mut data = vec![0.0f64; WINDOW * WINDOW];
    let mut total = 0.0;
    for y in 0..WINDOW {
        for x in 0..WINDOW {
            let v = g[y] * g[x];
            data[y * WINDOW + x] = v;
            total += v;
        }
    }
    Tensor::new(
        &[WINDOW, WINDOW],
        data.iter().map(|&v| T::from_f64(v / total)).collect(),
    )
}

/// How many dyadic scales fit, and the (possibly renormalized) weights.
fn scale_plan(h: usize, w: usize) -> Result<(usize, Vec<f64>, bool)> {
    let side = h.min(w);
    if side < WINDOW {
        return Err(Error::invalid(
            "ms_ssim",
            format!("{h}x{w} frame is smaller than the {WINDOW}x{WINDOW} analysis window"),
        ));
    }
    let mut scales = 1;
    while scales < SCALE_WEIGHTS.len()
        && side as f64 / 2f64.powi(scales as i32) >= WINDOW as f64
    {
        scales += 1;
    }
    if scales == SCALE_WEIGHTS.len() {
        Ok((scales, SCALE_WEIGHTS.to_vec(), false))
    } else {
        let sum: f64 = SCALE_WEIGHTS[..scales].iter().sum();
        let weights = SCALE_WEIGHTS[..scales].iter().map(|w| w / sum).collect();
        Ok((scales, weights, true))
    }
}

/// Windowed mean of the contrast-structure map at one scale; the coarsest
/// scale folds the luminance term in as well.
fn scale_score<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    window: &Tensor<T>,
    luminance: bool,
) -> Var {
    let mu_a = tape.depthwise_valid(a, window);
    let mu_b = tape.depthwise_valid(b, window);
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let e_aa = tape.depthwise_valid(aa, window);
    let e_bb = tape.depthwise_valid(bb, window);
    let e_ab = tape.depthwise_valid(ab, window);
    let mu_aa = tape.mul(mu_a, mu_a);
    let mu_bb = tape.mul(mu_b, mu_b);
    let mu_ab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(e_aa, mu_aa);
    let var_b = tape.sub(e_bb, mu_bb);
    let cov = tape.sub(e_ab, mu_ab);

    let cov2 = tape.mul_const(cov, 2.0);
    let cs_num = tape.add_const(cov2, C2);
    let var_sum = tape.add(var_a, var_b);
    let cs_den = tape.add_const(var_sum, C2);
    let cs = tape.div(cs_num, cs_den);

    let map = if luminance {
        let mu_ab2 = tape.mul_const(mu_ab, 2.0);
        let l_num = tape.add_const(mu_ab2, C1);
        let mu_sq = tape.add(mu_aa, mu_bb);
        let l_den = tape.add_const(mu_sq, C1);
        let l = tape.div(l_num, l_den);
        tape.mul(l, cs)
    } else {
        cs
    };
    tape.mean_all(map)
}

/// Differentiable multi-scale similarity; returns a scalar variable so
/// `1 - ms_ssim` can serve as a training distortion.
pub fn ms_ssim_on_tape<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let sa = tape.value(a).shape().to_vec();
    let sb = tape.value(b).shape().to_vec();
    if sa != sb {
        return Err(Error::shape("ms_ssim", format!("{sa:?} vs {sb:?}")));
    }
    if sa.len() != 4 {
        return Err(Error::shape("ms_ssim", format!("rank {} input", sa.len())));
    }
    let (scales, weights, _) = scale_plan(sa[2], sa[3])?;
    let window = gaussian_window::<T>();
    let (mut xa, mut xb) = (a, b);
    let mut score: Option<Var> = None;
    for (j, &wt) in weights.iter().enumerate() {
        let last = j + 1 == scales;
        let mean = scale_score(tape, xa, xb, &window, last);
        let guarded = tape.max_const(mean, POW_GUARD);
        let powed = tape.powf_const(guarded, wt);
        score = Some(match score {
            None => powed,
            Some(s) => tape.mul(s, powed),
        });
        if !last {
            // Halve for the next scale; drop an odd trailing row/column first.
            let (_, _, ch, cw) = tape.value(xa).dims4();
            let (eh, ew) = (ch & !1, cw & !1);
            if (eh, ew) != (ch, cw) {
                xa = tape.crop_spatial(xa, eh, ew);
                xb = tape.crop_spatial(xb, eh, ew);
            }
            xa = tape.avg_pool2(xa);
            xb = tape.avg_pool2(xb);
        }
    }
    Ok(score.expect("at least one scale"))
}

/// Multi-scale structural similarity between two equal-shape frames in [0,1].
pub fn ms_ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<MsSsim> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ms_ssim",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.rank() != 4 {
        return Err(Error::shape("ms_ssim", format!("rank {} input", a.rank())));
    }
    let (scales, _, renormalized) = scale_plan(a.shape()[2], a.shape()[3])?;
    let mut tape = Tape::inference();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let score = ms_ssim_on_tape(&mut tape, va, vb)?;
    Ok(MsSsim {
        value: tape.value(score).item().to_f64_lossy(),
        scales,
        renormalized,
    })
}

// ---- rate-distortion curves ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

/// A labeled rate-quality curve, sorted by bit-rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    label: String,
    points: Vec<RdPoint>,
}

impl RdCurve {
    /// Needs at least four points with positive, pairwise distinct bit-rates.
    /// Quality dipping as rate grows is legal but worth flagging.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        let label = label.into();
        if points.len() < 4 {
            return Err(Error::invalid(
                "rd curve",
                format!("'{label}' has {} points, need at least 4", points.len()),
            ));
        }
        for p in &points {
            if !(p.bpp.is_finite() && p.bpp > 0.0) || !p.quality.is_finite() {
                return Err(Error::invalid(
                    "rd curve",
                    format!("'{label}' has a bad point ({}, {})", p.bpp, p.quality),
                ));
            }
        }
        points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).expect("finite bpp"));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::invalid(
                "rd curve",
                format!("'{label}' repeats a bit-rate"),
            ));
        }
        Ok(Self { label, points })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn quality_is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].quality >= w[0].quality)
    }

    fn quality_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in &self.points {
            lo = lo.min(p.quality);
            hi = hi.max(p.quality);
        }
        (lo, hi)
    }
}

/// Least-squares cubic of log10(bpp) against conditioned quality
/// t = (q - mid) / half. Both curves of a comparison share one conditioning
/// map, so the fitted difference is unchanged by it.
fn fit_log_rate(curve: &RdCurve, mid: f64, half: f64) -> Result<[f64; 4]> {
    let mut xtx = [[0.0f64; 4]; 4];
    let mut xty = [0.0f64; 4];
    for p in curve.points() {
        let t = (p.quality - mid) / half;
        let y = p.bpp.log10();
        let row = [1.0, t, t * t, t * t * t];
        for i in 0..4 {
            for j in 0..4 {
                xtx[i][j] += row[i] * row[j];
            }
            xty[i] += row[i] * y;
        }
    }
    solve4(&mut xtx, &mut xty).ok_or_else(|| {
        Error::invalid(
            "bdbr",
            format!("'{}' has degenerate quality values", curve.label()),
        )
    })?;
    Ok(xty)
}

/// Gaussian elimination with partial pivoting; overwrites its inputs and
/// leaves the solution in `b`.
fn solve4(a: &mut [[f64; 4]; 4], b: &mut [f64; 4]) -> Option<()> {
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite"))
            .expect("nonempty");
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..4).rev() {
        b[col] /= a[col][col];
        for row in 0..col {
            b[row] -= a[row][col] * b[col];
            a[row][col] = 0.0;
        }
    }
    Some(())
}

fn poly_eval(c: &[f64; 4], t: f64) -> f64 {
    ((c[3] * t + c[2]) * t + c[1]) * t + c[0]
}

/// Mean of the cubic over [lo, hi] via the antiderivative.
fn poly_mean(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |t: f64| ((c[3] / 4.0 * t + c[2] / 3.0) * t + c[1] / 2.0) * t * t + c[0] * t;
    (anti(hi) - anti(lo)) / (hi - lo)
}

struct BdFit {
    test: [f64; 4],
    anchor: [f64; 4],
    t_lo: f64,
    t_hi: f64,
}

fn bd_fit(test: &RdCurve, anchor: &RdCurve) -> Result<BdFit> {
    let (t_lo, t_hi) = test.quality_range();
    let (a_lo, a_hi) = anchor.quality_range();
    let lo = t_lo.max(a_lo);
    let hi = t_hi.min(a_hi);
    if !(hi > lo) {
        return Err(Error::invalid(
            "bdbr",
            format!(
                "'{}' and '{}' do not overlap in quality ({t_lo:.4}..{t_hi:.4} vs {a_lo:.4}..{a_hi:.4})",
                test.label(),
                anchor.label()
            ),
        ));
    }
    let mid = (t_lo.min(a_lo) + t_hi.max(a_hi)) / 2.0;
    let half = ((t_hi.max(a_hi) - t_lo.min(a_lo)) / 2.0).max(f64::MIN_POSITIVE);
    Ok(BdFit {
        test: fit_log_rate(test, mid, half)?,
        anchor: fit_log_rate(anchor, mid, half)?,
        t_lo: (lo - mid) / half,
        t_hi: (hi - mid) / half,
    })
}

/// Average bit-rate change of `test` against `anchor` in percent; negative
/// means the tested curve spends fewer bits for the same quality.
pub fn bdbr(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    let f = bd_fit(test, anchor)?;
    let delta = poly_mean(&f.test, f.t_lo, f.t_hi) - poly_mean(&f.anchor, f.t_lo, f.t_hi);
    Ok((10f64.powf(delta) - 1.0) * 100.0)
}

/// Same comparison with the fitted curves integrated by the trapezoid rule,
/// kept as an independent cross-check of the analytic path.
pub fn bdbr_trapezoid(test: &RdCurve, anchor: &RdCurve, panels: usize) -> Result<f64> {
    if panels == 0 {
        return Err(Error::invalid("bdbr", "trapezoid rule needs panels"));
    }
    let f = bd_fit(test, anchor)?;
    let h = (f.t_hi - f.t_lo) / panels as f64;
    let mut acc = 0.0;
    for i in 0..=panels {
        let t = f.t_lo + h * i as f64;
        let d = poly_eval(&f.test, t) - poly_eval(&f.anchor, t);
        acc += if i == 0 || i == panels { d / 2.0 } else { d };
    }
    let delta = acc * h / (f.t_hi - f.t_lo);
    Ok((10f64.powf(delta) - 1.0) * 100.0)
}

// ---- plain-text curve files ----

/// Label on the first line, then one `bpp quality` pair per line.
pub fn write_rd_curve(path: &Path, curve: &RdCurve) -> Result<()> {
    let mut text = String::new();
    text.push_str(curve.label());
    text.push('\n');
    for p in curve.points() {
        text.push_str(&format!("{} {}\n", p.bpp, p.quality));
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_rd_curve(path: &Path) -> Result<RdCurve> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut label: Option<&str> = None;
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some(label) = label else {
            label = Some(line);
            continue;
        };
        let _ = label;
        let mut fields = line.split_whitespace();
        let parse = |field: Option<&str>| -> Result<f64> {
            field
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    Error::invalid(
                        "rd curve file",
                        format!("{} line {}: expected 'bpp quality'", path.display(), idx + 1),
                    )
                })
        };
        let bpp = parse(fields.next())?;
        let quality = parse(fields.next())?;
        if fields.next().is_some() {
            return Err(Error::invalid(
                "rd curve file",
                format!("{} line {}: trailing fields", path.display(), idx + 1),
            ));
        }
        points.push(RdPoint { bpp, quality });
    }
    let Some(label) = label else {
        return Err(Error::invalid(
            "rd curve file",
            format!("{} is empty", path.display()),
        ));
    };
    RdCurve::new(label, points)
}
