//! The strided auto-encoder shared by motion, residual, and intra coding:
//! four stride-2 5x5 convolutions with divisive normalization after the
//! first three, mirrored by transposed convolutions on the way back up.

use rand::Rng;

use crate::layers::{Conv2d, ConvTranspose2d, Gdn};
use crate::scalar::Scalar;
use crate::tensor::tape::{join, Parameter, Params, Tape, Var};

pub const LATENT_CHANNELS: usize = 128;
/// Four stride-2 stages each way.
pub const SPATIAL_FACTOR: usize = 16;
const FILTERS: usize = 128;
const KERNEL: usize = 5;
const STAGES: usize = 4;

/// Frame (or flow stack) to latent grid; spatial extent divides by 16.
pub struct AnalysisNet<T> {
    convs: Vec<Conv2d<T>>,
    norms: Vec<Gdn<T>>,
}

impl<T: Scalar> AnalysisNet<T> {
    pub fn new<R: Rng>(rng: &mut R, in_c: usize) -> Self {
        let mut convs = Vec::with_capacity(STAGES);
        let mut norms = Vec::with_capacity(STAGES - 1);
        let mut c = in_c;
        for i in 0..STAGES {
            let out = if i + 1 == STAGES { LATENT_CHANNELS } else { FILTERS };
            convs.push(Conv2d::new(rng, c, out, KERNEL, 2));
            if i + 1 < STAGES {
                norms.push(Gdn::new(out));
            }
            c = out;
        }
        AnalysisNet { convs, norms }
    }

    pub fn forward(&self, tape: &mut Tape<T>, mut x: Var) -> Var {
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, x);
            if let Some(norm) = self.norms.get(i) {
                x = norm.forward(tape, x);
            }
        }
        x
    }
}

impl<T: Scalar> Params<T> for AnalysisNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("c{i}")), f);
        }
        for (i, n) in self.norms.iter().enumerate() {
            n.visit(&join(prefix, &format!("n{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("c{i}")), f);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            n.visit_mut(&join(prefix, &format!("n{i}")), f);
        }
    }
}

/// Latent grid back to pixel (or flow) space; spatial extent multiplies
/// by 16. The first three stages undo the encoder's normalization exactly.
pub struct SynthesisNet<T> {
    deconvs: Vec<ConvTranspose2d<T>>,
    norms: Vec<Gdn<T>>,
}

impl<T: Scalar> SynthesisNet<T> {
    pub fn new<R: Rng>(rng: &mut R, out_c: usize) -> Self {
        let mut deconvs = Vec::with_capacity(STAGES);
        let mut norms = Vec::with_capacity(STAGES - 1);
        let mut c = LATENT_CHANNELS;
        for i in 0..STAGES {
            let out = if i + 1 == STAGES { out_c } else { FILTERS };
            deconvs.push(ConvTranspose2d::new(rng, c, out, KERNEL, 2));
            if i + 1 < STAGES {
                norms.push(Gdn::new(out));
            }
            c = out;
        }
        SynthesisNet { deconvs, norms }
    }

    pub fn forward(&self, tape: &mut Tape<T>, mut x: Var) -> Var {
        for (i, deconv) in self.deconvs.iter().enumerate() {
            x = deconv.forward(tape, x);
            if let Some(norm) = self.norms.get(i) {
                x = norm.inverse(tape, x);
            }
        }
        x
    }
}

impl<T: Scalar> Params<T> for SynthesisNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        for (i, c) in self.deconvs.iter().enumerate() {
            c.visit(&join(prefix, &format!("c{i}")), f);
        }
        for (i, n) in self.norms.iter().enumerate() {
            n.visit(&join(prefix, &format!("n{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        for (i, c) in self.deconvs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("c{i}")), f);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            n.visit_mut(&join(prefix, &format!("n{i}")), f);
        }
    }
}

pub struct Autoencoder<T> {
    pub enc: AnalysisNet<T>,
    pub dec: SynthesisNet<T>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new<R: Rng>(rng: &mut R, in_c: usize, out_c: usize) -> Self {
        Autoencoder {
            enc: AnalysisNet::new(rng, in_c),
            dec: SynthesisNet::new(rng, out_c),
        }
    }
}

impl<T: Scalar> Params<T> for Autoencoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>)) {
        self.enc.visit(&join(prefix, "enc"), f);
        self.dec.visit(&join(prefix, "dec"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>)) {
        self.enc.visit_mut(&join(prefix, "enc"), f);
        self.dec.visit_mut(&join(prefix, "dec"), f);
    }
}
