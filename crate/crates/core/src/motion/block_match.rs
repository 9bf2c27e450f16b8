//! Deterministic pyramidal diamond-search block matching. This is the
//! training-free motion backend: the learned estimator is validated against
//! it, and tests use it wherever a known-good flow is needed.
//!
//! Five pyramid levels; each level refines the 2x-upsampled coarser flow by
//! diamond search (large pattern to convergence, then one small-pattern
//! step) on integer displacements, scoring candidates by SAD over a 5x5
//! window across all channels with border clamping. Ties keep the earliest
//! candidate in the fixed pattern order, so the result is reproducible
//! bit for bit.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LEVELS: usize = 5;
const WINDOW_RADIUS: i64 = 2;
const MAX_LARGE_STEPS: usize = 32;

// Large diamond: center, four at distance 2, four diagonals. Small diamond:
// center plus 4-neighborhood. Order matters for tie-breaking.
const LARGE: [(i64, i64); 9] = [
    (0, 0),
    (-2, 0),
    (0, 2),
    (2, 0),
    (0, -2),
    (-1, 1),
    (1, 1),
    (1, -1),
    (-1, -1),
];
const SMALL: [(i64, i64); 5] = [(0, 0), (-1, 0), (0, 1), (1, 0), (0, -1)];

/// Mean-pool by 2 with edge replication when an extent is odd.
pub(crate) fn downsample2_mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let data = x.data();
    for i in 0..n * c {
        let src = &data[i * h * w..(i + 1) * h * w];
        let dst = &mut out[i * oh * ow..(i + 1) * oh * ow];
        for a in 0..oh {
            let a0 = 2 * a;
            let a1 = (2 * a + 1).min(h - 1);
            for b in 0..ow {
                let b0 = 2 * b;
                let b1 = (2 * b + 1).min(w - 1);
                dst[a * ow + b] = (src[a0 * w + b0]
                    + src[a0 * w + b1]
                    + src[a1 * w + b0]
                    + src[a1 * w + b1])
                    * quarter;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

#[inline]
fn clamp_i(v: i64, hi: usize) -> usize {
    v.clamp(0, hi as i64 - 1) as usize
}

// SAD between the window around (a,b) in `target` and the window around
// (a+da, b+db) in `reference`, all channels, coordinates clamped.
fn window_sad<T: Scalar>(
    reference: &[T],
    target: &[T],
    c: usize,
    h: usize,
    w: usize,
    a: i64,
    b: i64,
    da: i64,
    db: i64,
) -> T {
    let mut acc = T::zero();
    for ch in 0..c {
        let rp = &reference[ch * h * w..(ch + 1) * h * w];
        let tp = &target[ch * h * w..(ch + 1) * h * w];
        for oa in -WINDOW_RADIUS..=WINDOW_RADIUS {
            let ta = clamp_i(a + oa, h);
            let ra = clamp_i(a + da + oa, h);
            for ob in -WINDOW_RADIUS..=WINDOW_RADIUS {
                let tb = clamp_i(b + ob, w);
                let rb = clamp_i(b + db + ob, w);
                acc += (tp[ta * w + tb] - rp[ra * w + rb]).abs();
            }
        }
    }
    acc
}

// One level of diamond search seeded with `init` (integer flow in level
// units). Both frames are single-item [c*h*w] slices here.
#[allow(clippy::too_many_arguments)]
fn search_level<T: Scalar>(
    reference: &[T],
    target: &[T],
    c: usize,
    h: usize,
    w: usize,
    init_a: &[i64],
    init_b: &[i64],
    out_a: &mut [i64],
    out_b: &mut [i64],
) {
    for a in 0..h as i64 {
        for b in 0..w as i64 {
            let q = a as usize * w + b as usize;
            let (mut da, mut db) = (init_a[q], init_b[q]);
            let mut best = window_sad(reference, target, c, h, w, a, b, da, db);
            for _ in 0..MAX_LARGE_STEPS {
                let (mut step_a, mut step_b) = (0, 0);
                for &(oa, ob) in &LARGE[1..] {
                    let cost = window_sad(reference, target, c, h, w, a, b, da + oa, db + ob);
                    if cost < best {
                        best = cost;
                        step_a = oa;
                        step_b = ob;
                    }
                }
                if step_a == 0 && step_b == 0 {
                    break;
                }
                da += step_a;
                db += step_b;
            }
            for &(oa, ob) in &SMALL[1..] {
                let cost = window_sad(reference, target, c, h, w, a, b, da + oa, db + ob);
                if cost < best {
                    best = cost;
                    da += oa;
                    db += ob;
                    // Single refinement step; re-centering would re-run the
                    // pattern, which the large stage already converged.
                    break;
                }
            }
            out_a[q] = da;
            out_b[q] = db;
        }
    }
}

// Map a coarse integer flow up one level: positions map by index halving,
// displacements double.
fn upsample_flow(
    coarse_a: &[i64],
    coarse_b: &[i64],
    ch: usize,
    cw: usize,
    h: usize,
    w: usize,
    fine_a: &mut [i64],
    fine_b: &mut [i64],
) {
    for a in 0..h {
        let ca = (a / 2).min(ch - 1);
        for b in 0..w {
            let cb = (b / 2).min(cw - 1);
            fine_a[a * w + b] = 2 * coarse_a[ca * cw + cb];
            fine_b[a * w + b] = 2 * coarse_b[ca * cw + cb];
        }
    }
}

/// Estimate the backward flow from `target` to `reference` (both
/// `[n, c, h, w]`, extents already validated by the caller).
pub fn estimate<T: Scalar>(reference: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let (n, _, h, w) = reference.dims4();
    let mut out = vec![T::zero(); n * 2 * h * w];

    // Shared pyramids for the whole batch.
    let mut ref_pyr = vec![reference.clone()];
    let mut tgt_pyr = vec![target.clone()];
    for _ in 1..LEVELS {
        ref_pyr.push(downsample2_mean(ref_pyr.last().unwrap()));
        tgt_pyr.push(downsample2_mean(tgt_pyr.last().unwrap()));
    }

    for i in 0..n {
        let mut flow_a: Vec<i64> = Vec::new();
        let mut flow_b: Vec<i64> = Vec::new();
        for level in (0..LEVELS).rev() {
            let (_, c, lh, lw) = ref_pyr[level].dims4();
            let rp = &ref_pyr[level].data()[i * c * lh * lw..(i + 1) * c * lh * lw];
            let tp = &tgt_pyr[level].data()[i * c * lh * lw..(i + 1) * c * lh * lw];
            let (init_a, init_b) = if level == LEVELS - 1 {
                (vec![0i64; lh * lw], vec![0i64; lh * lw])
            } else {
                let (_, _, ch, cw) = ref_pyr[level + 1].dims4();
                let mut ia = vec![0i64; lh * lw];
                let mut ib = vec![0i64; lh * lw];
                upsample_flow(&flow_a, &flow_b, ch, cw, lh, lw, &mut ia, &mut ib);
                (ia, ib)
            };
            let mut oa = vec![0i64; lh * lw];
            let mut ob = vec![0i64; lh * lw];
            search_level(rp, tp, c, lh, lw, &init_a, &init_b, &mut oa, &mut ob);
            flow_a = oa;
            flow_b = ob;
        }
        let base = i * 2 * h * w;
        for q in 0..h * w {
            out[base + q] = T::from_f64(flow_a[q] as f64);
            out[base + h * w + q] = T::from_f64(flow_b[q] as f64);
        }
    }
    Tensor::new(&[n, 2, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn textured(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        // Smoothed noise: greedy search needs a SAD basin wider than one
        // pixel, like real content has. Three box blurs of iid noise give
        // locally unique structure with gradients a diamond step can follow.
        let mut rng = StdRng::seed_from_u64(seed);
        let mut data: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        for _ in 0..3 {
            let prev = data.clone();
            for ch in 0..3 {
                for a in 0..h {
                    for b in 0..w {
                        let mut acc = 0.0;
                        for oa in -1i64..=1 {
                            for ob in -1i64..=1 {
                                let sa = clamp_i(a as i64 + oa, h);
                                let sb = clamp_i(b as i64 + ob, w);
                                acc += prev[ch * h * w + sa * w + sb];
                            }
                        }
                        data[ch * h * w + a * w + b] = acc / 9.0;
                    }
                }
            }
        }
        Tensor::new(&[1, 3, h, w], data)
    }

    fn shift(frame: &Tensor<f32>, dy: i64, dx: i64) -> Tensor<f32> {
        // target(a,b) = reference(a+dy, b+dx) clamped, so the backward flow
        // from target to reference is exactly (dy, dx).
        let (_, c, h, w) = frame.dims4();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for a in 0..h {
                for b in 0..w {
                    let sa = clamp_i(a as i64 + dy, h);
                    let sb = clamp_i(b as i64 + dx, w);
                    out[ch * h * w + a * w + b] = frame.data()[ch * h * w + sa * w + sb];
                }
            }
        }
        Tensor::new(frame.shape(), out)
    }

    #[test]
    fn downsampling_halves_and_replicates_odd_edges() {
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect::<Vec<_>>());
        let d = downsample2_mean(&x);
        assert_eq!(d.shape(), &[1, 1, 2, 2]);
        // Top-left block=(1+2+4+5)/4, right column replicates col 2.
        assert_eq!(d.data()[0], 3.0);
        assert_eq!(d.data()[1], (3.0 + 3.0 + 6.0 + 6.0) / 4.0);
        assert_eq!(d.data()[3], 9.0);
    }

    #[test]
    fn identical_frames_give_near_zero_flow() {
        let f = textured(32, 48, 1);
        let flow = estimate(&f, &f);
        let mean_mag: f32 = flow
            .data()
            .iter()
            .map(|v| v.abs())
            .sum::<f32>()
            / (flow.len() as f32 / 2.0);
        assert!(mean_mag < 0.25, "mean magnitude {mean_mag}");
    }

    #[test]
    fn integer_shifts_are_recovered_on_interior_pixels() {
        let reference = textured(48, 48, 2);
        for &(dy, dx) in &[(3i64, -4i64), (-2, 1), (4, 4), (0, -3)] {
            let target = shift(&reference, dy, dx);
            let flow = estimate(&reference, &target);
            let (_, _, h, w) = flow.dims4();
            let margin = 6;
            let mut hits = 0;
            let mut total = 0;
            for a in margin..h - margin {
                for b in margin..w - margin {
                    total += 1;
                    let fa = flow.data()[a * w + b];
                    let fb = flow.data()[h * w + a * w + b];
                    if fa == dy as f32 && fb == dx as f32 {
                        hits += 1;
                    }
                }
            }
            let frac = hits as f64 / total as f64;
            assert!(frac >= 0.95, "({dy},{dx}): only {frac:.3} recovered");
        }
    }

    #[test]
    fn estimation_is_deterministic() {
        let r = textured(32, 32, 3);
        let t = shift(&r, 2, -1);
        assert!(estimate(&r, &t).bit_eq(&estimate(&r, &t)));
    }
}
