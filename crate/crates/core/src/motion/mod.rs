//! Motion fields and the operations the codec builds on: backward warping,
//! field inversion, middle-frame motion prediction, estimation backends, and
//! a debug dump format.
//!
//! A motion field is a plain `[n, 2, h, w]` tensor of backward flows:
//! channel 0 holds the row displacement Δa, channel 1 the column
//! displacement Δb, so warping samples the reference at `(a+Δa, b+Δb)`.

pub mod block_match;
pub mod invert;
pub mod pyramid;

use std::fs::File;
use std::io::{Read as _, Write as _};
use std::path::Path;

pub use invert::{inverse, inverse_on_tape, CoverageMask};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{kernels, Tensor};

/// Smallest frame side the 5-level estimation pyramids accept.
pub const MIN_FRAME_SIDE: usize = 16;

/// How a motion field gets produced.
pub enum MotionBackend<'a, T> {
    /// Deterministic pyramidal diamond search; needs no training.
    BlockMatching,
    /// Coarse-to-fine residual-flow network.
    LearnedPyramid(&'a pyramid::PyramidMotionNet<T>),
}

fn check_field_pair<T: Scalar>(reference: &Tensor<T>, flow: &Tensor<T>) -> Result<()> {
    if reference.rank() != 4 || flow.rank() != 4 {
        return Err(Error::shape(
            "backward_warp",
            format!(
                "need rank-4 inputs, got {:?} and {:?}",
                reference.shape(),
                flow.shape()
            ),
        ));
    }
    let (n, _, h, w) = reference.dims4();
    let (fn_, fc, fh, fw) = flow.dims4();
    if fc != 2 || fn_ != n || fh != h || fw != w {
        return Err(Error::shape(
            "backward_warp",
            format!(
                "flow {:?} does not match frames {:?}",
                flow.shape(),
                reference.shape()
            ),
        ));
    }
    Ok(())
}

/// Sample `reference` at `(a+Δa, b+Δb)` bilinearly, clamping coordinates to
/// the border.
pub fn backward_warp<T: Scalar>(reference: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    check_field_pair(reference, flow)?;
    Ok(kernels::warp_forward(reference, flow))
}

/// Multiply both flow components by `s`.
pub fn scale<T: Scalar>(flow: &Tensor<T>, s: T) -> Tensor<T> {
    flow.map(|v| v * s)
}

/// Both predicted backward flows for a middle frame, with the coverage of the
/// final inversion that produced each.
pub struct MiddleMotions<T> {
    pub to_ref: Tensor<T>,
    pub to_far: Tensor<T>,
    pub to_ref_coverage: Vec<CoverageMask>,
    pub to_far_coverage: Vec<CoverageMask>,
}

/// Predict the middle frame's motion from the compressed far-frame flow:
/// halve the far motion on both sides of the middle frame.
///
/// `to_ref = inverse(0.5 * inverse(far_to_ref))`,
/// `to_far = inverse(0.5 * far_to_ref)`.
pub fn predict_middle_motions<T: Scalar>(far_to_ref: &Tensor<T>) -> MiddleMotions<T> {
    let (ref_to_far, _) = inverse(far_to_ref);
    let half_back = scale(&ref_to_far, T::from_f64(0.5));
    let (to_ref, to_ref_coverage) = inverse(&half_back);
    let half_fwd = scale(far_to_ref, T::from_f64(0.5));
    let (to_far, to_far_coverage) = inverse(&half_fwd);
    MiddleMotions {
        to_ref,
        to_far,
        to_ref_coverage,
        to_far_coverage,
    }
}

/// Tape version of [`predict_middle_motions`] for training through the
/// prediction (value-path gradients of the inversions).
pub fn predict_middle_on_tape<T: Scalar>(tape: &mut Tape<T>, far_to_ref: Var) -> (Var, Var) {
    let (ref_to_far, _) = inverse_on_tape(tape, far_to_ref);
    let half_back = tape.mul_const(ref_to_far, 0.5);
    let (to_ref, _) = inverse_on_tape(tape, half_back);
    let half_fwd = tape.mul_const(far_to_ref, 0.5);
    let (to_far, _) = inverse_on_tape(tape, half_fwd);
    (to_ref, to_far)
}

/// Estimate the backward flow from `target` to `reference`.
pub fn estimate_motion<T: Scalar>(
    reference: &Tensor<T>,
    target: &Tensor<T>,
    backend: MotionBackend<'_, T>,
) -> Result<Tensor<T>> {
    if reference.shape() != target.shape() {
        return Err(Error::shape(
            "estimate_motion",
            format!(
                "reference {:?} vs target {:?}",
                reference.shape(),
                target.shape()
            ),
        ));
    }
    if reference.rank() != 4 {
        return Err(Error::shape(
            "estimate_motion",
            format!("need rank-4 frames, got {:?}", reference.shape()),
        ));
    }
    let (_, _, h, w) = reference.dims4();
    if h < MIN_FRAME_SIDE || w < MIN_FRAME_SIDE {
        return Err(Error::invalid(
            "estimate_motion",
            format!("frames {h}x{w} are too small for a 5-level pyramid (need at least {MIN_FRAME_SIDE} per side)"),
        ));
    }
    match backend {
        MotionBackend::BlockMatching => Ok(block_match::estimate(reference, target)),
        MotionBackend::LearnedPyramid(net) => {
            let mut tape = Tape::inference();
            let r = tape.input(reference.clone());
            let t = tape.input(target.clone());
            let flow = net.forward(&mut tape, r, t);
            Ok(tape.value(flow))
        }
    }
}

const FLOW_MAGIC: &[u8; 4] = b"HLVF";

/// Dump a single `[1, 2, h, w]` flow for debugging: magic, u32 extents, then
/// row-major interleaved single-precision (Δa, Δb) pairs. Little-endian.
pub fn write_flow<T: Scalar>(path: &Path, flow: &Tensor<T>) -> Result<()> {
    if flow.rank() != 4 || flow.shape()[0] != 1 || flow.shape()[1] != 2 {
        return Err(Error::shape(
            "write_flow",
            format!("need a single [1,2,h,w] field, got {:?}", flow.shape()),
        ));
    }
    let (_, _, h, w) = flow.dims4();
    let mut buf = Vec::with_capacity(12 + 8 * h * w);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    let data = flow.data();
    for i in 0..h * w {
        buf.extend_from_slice(&data[i].to_f32_lossy().to_le_bytes());
        buf.extend_from_slice(&data[h * w + i].to_f32_lossy().to_le_bytes());
    }
    let mut f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a flow dump written by [`write_flow`].
pub fn read_flow(path: &Path) -> Result<Tensor<f32>> {
    let ctx = || path.display().to_string();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(ctx(), e))?;
    if bytes.len() < 12 || &bytes[0..4] != FLOW_MAGIC {
        return Err(Error::Format {
            context: ctx(),
            what: "flow dump magic".into(),
            found: format!("{:?}", &bytes.get(0..4).unwrap_or(&[])),
        });
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + 8 * h * w;
    if bytes.len() != need {
        return Err(Error::Format {
            context: ctx(),
            what: format!("{need} bytes for a {h}x{w} flow"),
            found: format!("{} bytes", bytes.len()),
        });
    }
    let mut data = vec![0.0f32; 2 * h * w];
    for i in 0..h * w {
        let o = 12 + 8 * i;
        data[i] = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        data[h * w + i] = f32::from_le_bytes(bytes[o + 4..o + 8].try_into().unwrap());
    }
    Ok(Tensor::new(&[1, 2, h, w], data))
}
