//! Motion compensation network: merges warped references and decoded flows
//! into a prediction of the target frame. U-shaped, two pooling levels deep,
//! eight 3x3 convolutions with additive skips across each level.

use rand::Rng;

use crate::scalar::Scalar;
use crate::layers::Conv2d;
use crate::tensor::tape::{join, Parameter, Params, Tape, Var};

/// Two warped frames plus two flow fields.
pub const MP_IN_CHANNELS: usize = 10;
const FILTERS: usize = 64;

pub struct MpNet<T> {
    convs: Vec<Conv2d<T>>,
}

impl<T: Scalar> MpNet<T> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let c = |rng: &mut R, i, o, s| Conv2d::new(rng, i, o, 3, s);
        MpNet {
            convs: vec![
                c(rng, MP_IN_CHANNELS, FILTERS, 1),
                c(rng, FILTERS, FILTERS, 2),
                c(rng, FILTERS, FILTERS, 2),
                c(rng, FILTERS, FILTERS, 1),
                c(rng, FILTERS, FILTERS, 1),
                c(rng, FILTERS, FILTERS, 1),
                c(rng, FILTERS, FILTERS, 1),
                c(rng, FILTERS, 3, 1),
            ],
        }
    }

    /// Extents must be divisible by 4 so the two pooled levels re-align with
    /// their skip sources after up-sampling.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let shape = tape.shape_of(x);
        assert!(
            shape[2] % 4 == 0 && shape[3] % 4 == 0,
            "compensation input extents must be divisible by 4, got {}x{}",
            shape[2],
            shape[3]
        );
        let t = self.convs[0].forward(tape, x);
        let a0 = tape.relu(t);
        let t = self.convs[1].forward(tape, a0);
        let a1 = tape.relu(t);
        let t = self.convs[2].forward(tape, a1);
        let a2 = tape.relu(t);
        let t = self.convs[3].forward(tape, a2);
        let a3 = tape.relu(t);

        let up = tape.upsample2(a3);
        let t = self.convs[4].forward(tape, up);
        let t = tape.add(t, a1);
        let a4 = tape.relu(t);

        let up = tape.upsample2(a4);
        let t = self.convs[5].forward(tape, up);
        let t = tape.add(t, a0);
        let a5 = tape.relu(t);

        let t = self.convs[6].forward(tape, a5);
        let a6 = tape.relu(t);
        self.convs[7].forward(tape, a6)
    }
}

impl<T: Scalar> Params<T> for MpNet<T> {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn output_matches_frame_extents() {
        let mut rng = StdRng::seed_from_u64(21);
        let mp = MpNet::<f32>::new(&mut rng);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, MP_IN_CHANNELS, 32, 48]));
        let y = mp.forward(&mut tape, x);
        assert_eq!(tape.value(y).shape(), &[1, 3, 32, 48]);
    }

    #[test]
    fn eight_layers_two_parameters_each() {
        let mut rng = StdRng::seed_from_u64(22);
        let mp = MpNet::<f32>::new(&mut rng);
        assert_eq!(mp.param_count(), 16);
    }
}
