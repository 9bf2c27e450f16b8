//! Learned 5-level coarse-to-fine motion estimator.
//!
//! Each level refines the doubled, upsampled coarser flow with a small conv
//! stack applied to [warped reference, target, upsampled flow]. The final
//! conv of every level starts at zero, so an untrained network estimates
//! exactly zero motion and training only ever adds residual corrections.

use rand::Rng;

use crate::layers::Conv2d;
use crate::scalar::Scalar;
use crate::tensor::tape::{join, Parameter, Params, Tape, Var};
use crate::tensor::Tensor;

use super::block_match::downsample2_mean;

pub const LEVELS: usize = 5;

// Per-level stack: 3x3 convs over 8 input channels (3 warped + 3 target + 2
// flow), widths tapering to the 2-channel flow residual.
const WIDTHS: [usize; 5] = [24, 24, 16, 8, 2];

struct LevelNet<T> {
    convs: Vec<Conv2d<T>>,
}

impl<T: Scalar> LevelNet<T> {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let mut convs = Vec::with_capacity(WIDTHS.len());
        let mut in_c = 8;
        for (i, &out_c) in WIDTHS.iter().enumerate() {
            if i + 1 == WIDTHS.len() {
                convs.push(Conv2d::zeroed(in_c, out_c, 3, 1));
            } else {
                convs.push(Conv2d::new(rng, in_c, out_c, 3, 1));
            }
            in_c = out_c;
        }
        LevelNet { convs }
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let mut v = x;
        for (i, conv) in self.convs.iter().enumerate() {
            v = conv.forward(tape, v);
            if i + 1 < self.convs.len() {
                v = tape.relu(v);
            }
        }
        v
    }
}

impl<T: Scalar> Params<T> for LevelNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("c{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("c{i}")), f);
        }
    }
}

/// The trainable pyramid estimator. `levels[0]` works at full resolution.
pub struct PyramidMotionNet<T> {
    levels: Vec<LevelNet<T>>,
}

impl<T: Scalar> PyramidMotionNet<T> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        PyramidMotionNet {
            levels: (0..LEVELS).map(|_| LevelNet::new(rng)).collect(),
        }
    }

    /// Estimate the backward flow from `target` to `reference` on the tape.
    /// Gradients reach the level networks and the flow path; the frame
    /// pyramids are treated as constants.
    pub fn forward(&self, tape: &mut Tape<T>, reference: Var, target: Var) -> Var {
        let vref = tape.value(reference);
        let vtgt = tape.value(target);
        let (n, _, _, _) = vref.dims4();
        let mut refs = vec![vref];
        let mut tgts = vec![vtgt];
        for _ in 1..LEVELS {
            refs.push(downsample2_mean(refs.last().unwrap()));
            tgts.push(downsample2_mean(tgts.last().unwrap()));
        }

        let mut flow: Option<Var> = None;
        for level in (0..LEVELS).rev() {
            let (_, _, lh, lw) = refs[level].dims4();
            let up = match flow {
                None => tape.constant(Tensor::zeros(&[n, 2, lh, lw])),
                Some(f) => {
                    let u = tape.upsample2(f);
                    let doubled = tape.mul_const(u, 2.0);
                    let us = tape.shape_of(doubled);
                    if us[2] == lh && us[3] == lw {
                        doubled
                    } else {
                        tape.crop_spatial(doubled, lh, lw)
                    }
                }
            };
            let r = tape.input(refs[level].clone());
            let t = tape.input(tgts[level].clone());
            let warped = tape.warp(r, up);
            let stacked = tape.concat_channels(&[warped, t, up]);
            let delta = self.levels[level].forward(tape, stacked);
            flow = Some(tape.add(up, delta));
        }
        flow.expect("at least one pyramid level")
    }
}

impl<T: Scalar> Params<T> for PyramidMotionNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        for (i, l) in self.levels.iter().enumerate() {
            l.visit(&join(prefix, &format!("level{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        for (i, l) in self.levels.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("level{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::probe;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn untrained_network_estimates_zero_flow() {
        let mut rng = StdRng::seed_from_u64(1);
        let net = PyramidMotionNet::<f32>::new(&mut rng);
        let mut tape = Tape::inference();
        let r = tape.input(probe(&[1, 3, 20, 18], 2).cast());
        let t = tape.input(probe(&[1, 3, 20, 18], 3).cast());
        let flow = net.forward(&mut tape, r, t);
        let v = tape.value(flow);
        assert_eq!(v.shape(), &[1, 2, 20, 18]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_extents_follow_odd_inputs() {
        let mut rng = StdRng::seed_from_u64(4);
        let net = PyramidMotionNet::<f32>::new(&mut rng);
        let mut tape = Tape::inference();
        let r = tape.input(Tensor::zeros(&[2, 3, 17, 23]));
        let t = tape.input(Tensor::zeros(&[2, 3, 17, 23]));
        let flow = net.forward(&mut tape, r, t);
        assert_eq!(tape.shape_of(flow), vec![2, 2, 17, 23]);
    }

    #[test]
    fn warping_loss_reaches_the_level_heads() {
        // With zero-initialized heads the gradient lands on every level's
        // final conv, which is what the first optimizer step moves.
        let mut rng = StdRng::seed_from_u64(5);
        let net = PyramidMotionNet::<f64>::new(&mut rng);
        let mut tape = Tape::new();
        let reference = probe(&[1, 3, 16, 16], 6);
        let shifted = {
            // target = reference shifted one column so zero flow is wrong
            let (_, c, h, w) = reference.dims4();
            let mut d = vec![0.0; c * h * w];
            for ch in 0..c {
                for a in 0..h {
                    for b in 0..w {
                        let sb = (b + 1).min(w - 1);
                        d[ch * h * w + a * w + b] = reference.data()[ch * h * w + a * w + sb];
                    }
                }
            }
            Tensor::new(reference.shape(), d)
        };
        let r = tape.input(reference.clone());
        let t = tape.input(shifted);
        let flow = net.forward(&mut tape, r, t);
        let rr = tape.input(reference);
        let warped = tape.warp(rr, flow);
        let loss = tape.mse(warped, t);
        let grads = tape.backward(loss);
        let mut heads = Vec::new();
        net.visit("me", &mut |name, p| {
            if name.ends_with("c4/w") {
                heads.push((name, p.id()));
            }
        });
        assert_eq!(heads.len(), LEVELS);
        for (name, id) in heads {
            let g = grads.of_param(id).expect("head gradient");
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "no gradient reached {name}"
            );
        }
    }

    #[test]
    fn parameter_names_cover_all_levels() {
        let mut rng = StdRng::seed_from_u64(7);
        let net = PyramidMotionNet::<f32>::new(&mut rng);
        let names: Vec<String> = net.named("me").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), LEVELS * WIDTHS.len() * 2);
        assert!(names.contains(&"me/level0/c0/w".to_string()));
        assert!(names.contains(&"me/level4/c4/b".to_string()));
    }
}
