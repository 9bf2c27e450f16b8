//! The inverse-motion operator.
//!
//! A backward flow defines, for each target pixel, where it came from in the
//! reference. Inverting it scatters the negated displacement to the rounded
//! landing position; the policy below completes the partial definition:
//!
//! * landing positions outside the grid are dropped,
//! * collisions keep the source with the smallest displacement magnitude
//!   (first in row-major order on exact ties),
//! * holes are filled by three passes of 4-neighbor averaging, anything
//!   still unassigned becomes zero.
//!
//! The operator is differentiable along the value path: scatter targets and
//! fill stencils are treated as constants of the backward pass, so the
//! gradient of an output cell flows to the flow vector (negated) that
//! produced it, through the averaging passes where applicable.

use crate::scalar::Scalar;
use crate::tensor::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Marks which positions received a scattered value before hole filling.
#[derive(Clone, Debug)]
pub struct CoverageMask {
    h: usize,
    w: usize,
    covered: Vec<bool>,
}

impl CoverageMask {
    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn is_covered(&self, a: usize, b: usize) -> bool {
        self.covered[a * self.w + b]
    }

    pub fn covered_fraction(&self) -> f64 {
        self.covered.iter().filter(|&&c| c).count() as f64 / self.covered.len() as f64
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.covered.iter().copied()
    }
}

/// Round half away from zero (the `round` of the quantizer, reused for
/// scatter landing positions).
#[inline]
pub fn round_half_away<T: Scalar>(v: T) -> T {
    v.round()
}

// Linear record of how one field's outputs were produced, enough to replay
// the exact value path backwards.
struct Provenance {
    // winner source pixel per output cell, usize::MAX = none
    direct: Vec<usize>,
    // per fill pass, in application order: (cell, neighbors averaged)
    fills: Vec<Vec<(usize, Vec<usize>)>>,
}

fn invert_field<T: Scalar>(
    da: &[T],
    db: &[T],
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>, CoverageMask, Provenance) {
    let hw = h * w;
    const NONE: usize = usize::MAX;
    let mut winner = vec![NONE; hw];
    let mut win_mag = vec![T::infinity(); hw];
    for a in 0..h {
        for b in 0..w {
            let p = a * w + b;
            let ta = round_half_away(T::from_usize(a) + da[p]).to_f64_lossy() as i64;
            let tb = round_half_away(T::from_usize(b) + db[p]).to_f64_lossy() as i64;
            if ta < 0 || tb < 0 || ta >= h as i64 || tb >= w as i64 {
                continue;
            }
            let q = ta as usize * w + tb as usize;
            let mag = da[p] * da[p] + db[p] * db[p];
            // Strict < keeps the first row-major source on ties.
            if mag < win_mag[q] {
                win_mag[q] = mag;
                winner[q] = p;
            }
        }
    }
    let mut out_a = vec![T::zero(); hw];
    let mut out_b = vec![T::zero(); hw];
    let mut filled = vec![false; hw];
    for q in 0..hw {
        if winner[q] != NONE {
            out_a[q] = -da[winner[q]];
            out_b[q] = -db[winner[q]];
            filled[q] = true;
        }
    }
    let mask = CoverageMask {
        h,
        w,
        covered: filled.clone(),
    };

    let mut fills = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut pass = Vec::new();
        let mut new_a = Vec::new();
        let mut new_b = Vec::new();
        for a in 0..h {
            for b in 0..w {
                let q = a * w + b;
                if filled[q] {
                    continue;
                }
                let mut neighbors = Vec::with_capacity(4);
                if a > 0 && filled[q - w] {
                    neighbors.push(q - w);
                }
                if a + 1 < h && filled[q + w] {
                    neighbors.push(q + w);
                }
                if b > 0 && filled[q - 1] {
                    neighbors.push(q - 1);
                }
                if b + 1 < w && filled[q + 1] {
                    neighbors.push(q + 1);
                }
                if neighbors.is_empty() {
                    continue;
                }
                let inv_n = T::one() / T::from_usize(neighbors.len());
                let sa = neighbors.iter().fold(T::zero(), |acc, &n| acc + out_a[n]);
                let sb = neighbors.iter().fold(T::zero(), |acc, &n| acc + out_b[n]);
                new_a.push((q, sa * inv_n));
                new_b.push((q, sb * inv_n));
                pass.push((q, neighbors));
            }
        }
        for &(q, v) in &new_a {
            out_a[q] = v;
            filled[q] = true;
        }
        for &(q, v) in &new_b {
            out_b[q] = v;
        }
        if pass.is_empty() {
            fills.push(pass);
            break;
        }
        fills.push(pass);
    }

    (out_a, out_b, mask, Provenance { direct: winner, fills })
}

fn invert_backward_field<T: Scalar>(
    prov: &Provenance,
    g_a: &mut [T],
    g_b: &mut [T],
    df_a: &mut [T],
    df_b: &mut [T],
) {
    // Undo fill passes newest-first; each filled cell distributes its
    // gradient evenly to the neighbors it averaged.
    for pass in prov.fills.iter().rev() {
        for (q, neighbors) in pass.iter().rev() {
            let inv_n = T::one() / T::from_usize(neighbors.len());
            let ga = g_a[*q] * inv_n;
            let gb = g_b[*q] * inv_n;
            for &n in neighbors {
                g_a[n] += ga;
                g_b[n] += gb;
            }
            g_a[*q] = T::zero();
            g_b[*q] = T::zero();
        }
    }
    for (q, &src) in prov.direct.iter().enumerate() {
        if src != usize::MAX {
            df_a[src] -= g_a[q];
            df_b[src] -= g_b[q];
        }
    }
}

/// Invert a batch of backward flows `[n, 2, h, w]`. Returns the inverted
/// fields and one coverage mask per batch item.
pub fn inverse<T: Scalar>(flow: &Tensor<T>) -> (Tensor<T>, Vec<CoverageMask>) {
    let (inv, masks, _) = inverse_with_provenance(flow);
    (inv, masks)
}

fn inverse_with_provenance<T: Scalar>(
    flow: &Tensor<T>,
) -> (Tensor<T>, Vec<CoverageMask>, Vec<Provenance>) {
    let (n, c, h, w) = flow.dims4();
    assert_eq!(c, 2, "inverse: flow needs 2 channels, got {c}");
    let hw = h * w;
    let mut out = vec![T::zero(); n * 2 * hw];
    let mut masks = Vec::with_capacity(n);
    let mut provs = Vec::with_capacity(n);
    for i in 0..n {
        let da = &flow.data()[i * 2 * hw..i * 2 * hw + hw];
        let db = &flow.data()[i * 2 * hw + hw..(i + 1) * 2 * hw];
        let (oa, ob, mask, prov) = invert_field(da, db, h, w);
        out[i * 2 * hw..i * 2 * hw + hw].copy_from_slice(&oa);
        out[i * 2 * hw + hw..(i + 1) * 2 * hw].copy_from_slice(&ob);
        masks.push(mask);
        provs.push(prov);
    }
    (Tensor::new(flow.shape(), out), masks, provs)
}

/// Tape node for the inverse-motion operator (value-path gradient).
pub fn inverse_on_tape<T: Scalar>(tape: &mut Tape<T>, flow: Var) -> (Var, Vec<CoverageMask>) {
    let vf = tape.value(flow);
    let (n, _, h, w) = vf.dims4();
    let hw = h * w;
    let (out, masks, provs) = inverse_with_provenance(&vf);
    let shape = vf.shape().to_vec();
    let v = tape.push(
        out,
        Some(Box::new(move |g: &Tensor<T>, sink: &mut GradSink<T>| {
            let mut df = vec![T::zero(); n * 2 * hw];
            for (i, prov) in provs.iter().enumerate() {
                let mut ga = g.data()[i * 2 * hw..i * 2 * hw + hw].to_vec();
                let mut gb = g.data()[i * 2 * hw + hw..(i + 1) * 2 * hw].to_vec();
                let (dfa, dfb) = df[i * 2 * hw..(i + 1) * 2 * hw].split_at_mut(hw);
                invert_backward_field(prov, &mut ga, &mut gb, dfa, dfb);
            }
            sink.add(flow, Tensor::new(&shape, df));
        })),
    );
    (v, masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradCheck;
    use rand::rngs::StdRng;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    // Independent oracle: apply the scatter definition literally, pixel by
    // pixel, with the declared collision and fill policy, using a separate
    // data layout (per-pixel structs) from the implementation.
    fn oracle_invert(f: &[(f64, f64)], h: usize, w: usize) -> (Vec<(f64, f64)>, Vec<bool>) {
        #[derive(Clone)]
        struct Cell {
            val: Option<(f64, f64)>,
            mag: f64,
        }
        let mut grid = vec![
            Cell {
                val: None,
                mag: f64::INFINITY
            };
            h * w
        ];
        for a in 0..h {
            for b in 0..w {
                let (da, db) = f[a * w + b];
                let ta = (a as f64 + da).round();
                let tb = (b as f64 + db).round();
                if ta < 0.0 || tb < 0.0 || ta >= h as f64 || tb >= w as f64 {
                    continue;
                }
                let q = ta as usize * w + tb as usize;
                let mag = da * da + db * db;
                if mag < grid[q].mag {
                    grid[q] = Cell {
                        val: Some((-da, -db)),
                        mag,
                    };
                }
            }
        }
        let covered: Vec<bool> = grid.iter().map(|c| c.val.is_some()).collect();
        let mut vals: Vec<Option<(f64, f64)>> = grid.into_iter().map(|c| c.val).collect();
        for _ in 0..3 {
            let snapshot = vals.clone();
            for a in 0..h {
                for b in 0..w {
                    let q = a * w + b;
                    if snapshot[q].is_some() {
                        continue;
                    }
                    let mut acc = (0.0, 0.0);
                    let mut cnt = 0.0;
                    let mut push = |qq: usize| {
                        if let Some((x, y)) = snapshot[qq] {
                            acc.0 += x;
                            acc.1 += y;
                            cnt += 1.0;
                        }
                    };
                    if a > 0 {
                        push(q - w);
                    }
                    if a + 1 < h {
                        push(q + w);
                    }
                    if b > 0 {
                        push(q - 1);
                    }
                    if b + 1 < w {
                        push(q + 1);
                    }
                    if cnt > 0.0 {
                        vals[q] = Some((acc.0 / cnt, acc.1 / cnt));
                    }
                }
            }
        }
        let out = vals
            .into_iter()
            .map(|v| v.unwrap_or((0.0, 0.0)))
            .collect();
        (out, covered)
    }

    fn to_tensor(f: &[(f64, f64)], h: usize, w: usize) -> Tensor<f64> {
        let mut data = vec![0.0; 2 * h * w];
        for (i, &(da, db)) in f.iter().enumerate() {
            data[i] = da;
            data[h * w + i] = db;
        }
        Tensor::new(&[1, 2, h, w], data)
    }

    fn from_tensor(t: &Tensor<f64>) -> Vec<(f64, f64)> {
        let (_, _, h, w) = t.dims4();
        (0..h * w)
            .map(|i| (t.data()[i], t.data()[h * w + i]))
            .collect()
    }

    #[test]
    fn zero_flow_inverts_to_zero_with_full_coverage() {
        let flow = Tensor::<f32>::zeros(&[1, 2, 9, 7]);
        let (inv, masks) = inverse(&flow);
        assert!(inv.data().iter().all(|&v| v == 0.0));
        assert_eq!(masks[0].covered_fraction(), 1.0);
    }

    #[test]
    fn constant_translation_inverts_to_negation_on_covered_region() {
        let (h, w) = (12, 10);
        let f: Vec<(f64, f64)> = vec![(-2.0, 0.0); h * w];
        let (inv, masks) = inverse(&to_tensor(&f, h, w));
        let got = from_tensor(&inv);
        let mask = &masks[0];
        let mut covered_cells = 0;
        for a in 0..h {
            for b in 0..w {
                if mask.is_covered(a, b) {
                    assert_eq!(got[a * w + b], (2.0, 0.0), "at ({a},{b})");
                    covered_cells += 1;
                }
            }
        }
        // Sources a=2..h land on rows 0..h-2; the last two rows are holes.
        assert_eq!(covered_cells, (h - 2) * w);
        for b in 0..w {
            assert!(!mask.is_covered(h - 1, b));
            assert!(!mask.is_covered(h - 2, b));
        }
    }

    #[test]
    fn matches_literal_scatter_oracle_on_random_flows() {
        let mut rng = StdRng::seed_from_u64(42);
        for trial in 0..20 {
            let (h, w) = (rng.gen_range(4..12), rng.gen_range(4..12));
            let f: Vec<(f64, f64)> = (0..h * w)
                .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
                .collect();
            let (inv, masks) = inverse(&to_tensor(&f, h, w));
            let got = from_tensor(&inv);
            let (want, want_cov) = oracle_invert(&f, h, w);
            for q in 0..h * w {
                assert_eq!(
                    masks[0].covered[q], want_cov[q],
                    "coverage mismatch, trial {trial}, cell {q}"
                );
                let (ga, gb) = got[q];
                let (wa, wb) = want[q];
                assert!(
                    (ga - wa).abs() < 1e-12 && (gb - wb).abs() < 1e-12,
                    "trial {trial}, cell {q}: got ({ga},{gb}) want ({wa},{wb})"
                );
            }
        }
    }

    #[test]
    fn double_inverse_is_identity_on_permutation_flows() {
        let mut rng = StdRng::seed_from_u64(7);
        let (h, w) = (16, 16);
        for _ in 0..10 {
            // Random bijection of the pixel grid; displacement = image - site.
            let mut targets: Vec<usize> = (0..h * w).collect();
            targets.shuffle(&mut rng);
            let f: Vec<(f64, f64)> = (0..h * w)
                .map(|p| {
                    let (a, b) = (p / w, p % w);
                    let (ta, tb) = (targets[p] / w, targets[p] % w);
                    (ta as f64 - a as f64, tb as f64 - b as f64)
                })
                .collect();
            let ft = to_tensor(&f, h, w);
            let (inv1, masks1) = inverse(&ft);
            assert_eq!(masks1[0].covered_fraction(), 1.0);
            let (inv2, masks2) = inverse(&inv1);
            assert_eq!(masks2[0].covered_fraction(), 1.0);
            assert!(inv2.bit_eq(&ft), "double inverse diverged from input");
        }
    }

    #[test]
    fn ties_keep_the_first_row_major_source() {
        // Two sources with equal magnitude land on the same cell: (0,0) with
        // flow (1,1) and (2,2) with flow (-1,-1) both target (1,1).
        let (h, w) = (4, 4);
        let mut f = vec![(0.0f64, 0.0); h * w];
        f[0] = (1.0, 1.0);
        f[2 * w + 2] = (-1.0, -1.0);
        // Give every other pixel a large out-of-grid flow so only the two
        // contenders scatter.
        for (i, v) in f.iter_mut().enumerate() {
            if i != 0 && i != 2 * w + 2 {
                *v = (100.0, 100.0);
            }
        }
        let (inv, masks) = inverse(&to_tensor(&f, h, w));
        assert!(masks[0].is_covered(1, 1));
        let got = from_tensor(&inv)[w + 1];
        assert_eq!(got, (-1.0, -1.0), "first source (0,0) must win the tie");
    }

    #[test]
    fn value_path_gradient_matches_finite_differences() {
        // Keep flows away from half-integer landing boundaries so the FD
        // probe does not change any scatter target.
        let mut rng = StdRng::seed_from_u64(11);
        let (h, w) = (6, 6);
        let f: Vec<f64> = (0..2 * h * w)
            .map(|_| {
                let mut v: f64 = rng.gen_range(-1.8..1.8);
                let frac = (v - v.floor()).abs();
                if (frac - 0.5).abs() < 1e-3 {
                    v += 0.01;
                }
                v
            })
            .collect();
        let x0 = Tensor::new(&[1, 2, h, w], f);
        let report = GradCheck {
            max_coords: 2 * h * w,
            ..GradCheck::default()
        }
        .run(&x0, &|t, x| {
            let (inv, _) = inverse_on_tape(t, x);
            let sq = t.square(inv);
            t.sum_all(sq)
        });
        assert!(report.ok(), "failures: {:?}", report.failures);
    }

    #[test]
    fn double_inverse_gradient_matches_finite_differences() {
        // The composition used by middle-frame motion prediction.
        let mut rng = StdRng::seed_from_u64(13);
        let (h, w) = (5, 5);
        let f: Vec<f64> = (0..2 * h * w)
            .map(|_| {
                let mut v: f64 = rng.gen_range(-1.2..1.2);
                let frac = (v - v.floor()).abs();
                if (frac - 0.5).abs() < 2e-3 {
                    v += 0.02;
                }
                v
            })
            .collect();
        let x0 = Tensor::new(&[1, 2, h, w], f);
        let report = GradCheck::default().run(&x0, &|t, x| {
            let (inv, _) = inverse_on_tape(t, x);
            let half = t.mul_const(inv, 0.5);
            let (inv2, _) = inverse_on_tape(t, half);
            let sq = t.square(inv2);
            t.sum_all(sq)
        });
        assert!(report.ok(), "failures: {:?}", report.failures);
    }
}
