//! The Ref recurrent cell.
//!
//! Each step aligns the propagated Ref state to the current frame (flow
//! warp refined by a deformable kernel), aligns the current Ref frame by
//! patch matching, and fuses both with the current LR feature under the
//! guidance of the matching confidence. In residual mode the state carried
//! to the next step is the fused feature minus the LR feature, so only
//! the reference detail travels through time.

use crate::alignment::{backward_warp, index_warp, match_confidence, patch_match, DeformAlign, IndexMap};
use crate::autograd::Var;
use crate::data::Frame;
use crate::error::{arg_err, Result};
use crate::flow::{FlowField, FlowProvider};
use crate::nn::{Conv2d, Ctx, ParamStore, ResStack, LRELU_SLOPE};
use crate::resample::resample_tensor;
use crate::tensor::Tensor;

/// Initial gain of the fusion output conv.
pub const FUSE_OUT_GAIN: f64 = 0.3;

/// Propagated Ref state.
#[derive(Clone, Debug)]
pub struct RefState {
    pub h_ref: Var,
    /// The state holds `h_ref_full - f_lr` rather than the full feature.
    pub is_residual: bool,
}

impl RefState {
    pub fn zeros(c: usize, h: usize, w: usize) -> RefState {
        RefState {
            h_ref: Var::constant(Tensor::zeros(&[c, h, w])),
            is_residual: false,
        }
    }
}

/// The two fusion branches: `f_a` from the propagated state, `f_b` from
/// the matched reference.
#[derive(Clone, Debug)]
pub struct FusionIntermediates {
    pub f_a: Var,
    pub f_b: Var,
}

/// Reference features rearranged onto the LR grid, with the confidence of
/// each match.
#[derive(Clone, Debug)]
pub struct MatchedRef {
    /// `[c, h, w]`, same grid as the LR feature.
    pub aligned: Var,
    /// `[1, h, w]` cosine similarity of the chosen match.
    pub confidence: Var,
    pub index: IndexMap,
}

/// Small dedicated embedder for patch matching, shared by the LR frame and
/// the Ref frame. The Ref frame is first shrunk by the magnification so
/// both sides show content at the same scale.
#[derive(Clone, Debug)]
pub struct MatchEmbedder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub patch: usize,
    pub magnification: usize,
}

impl MatchEmbedder {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, patch: usize, magnification: usize) -> Self {
        MatchEmbedder {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), 3, channels, 3, 1.0),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1.0),
            patch,
            magnification,
        }
    }

    pub fn embed(&self, ctx: &Ctx, image: &Var) -> Var {
        let h = self.conv1.forward(ctx, image).leaky_relu(LRELU_SLOPE);
        self.conv2.forward(ctx, &h)
    }

    /// Match every LR patch against the (shrunk) Ref frame and gather
    /// `f_ref` at the matched positions.
    pub fn match_frames(&self, ctx: &Ctx, lr: &Frame, reference: &Frame, f_ref: &Var) -> Result<MatchedRef> {
        if lr.dims() != reference.dims() {
            arg_err!("lr {:?} and ref {:?} frames differ in size", lr.dims(), reference.dims());
        }
        let (h, w) = reference.dims();
        let m = self.magnification.max(1);
        let shrunk = resample_tensor(reference.tensor(), (h / m).max(1), (w / m).max(1));
        let e_lr = self.embed(ctx, &Var::constant(lr.tensor().clone()));
        let e_ref = self.embed(ctx, &Var::constant(shrunk));
        let (index, _) = patch_match(e_lr.value(), e_ref.value(), self.patch, 1)?;
        Ok(MatchedRef {
            confidence: match_confidence(&e_lr, &e_ref, &index, self.patch),
            aligned: index_warp(f_ref, &index),
            index,
        })
    }
}

/// `conv(conf) ⊙ feat`: the gate lifts the one-channel confidence to the
/// feature width before the elementwise product.
pub fn confidence_gate(ctx: &Ctx, conf: &Var, feat: &Var, gate: &Conv2d) -> Result<Var> {
    let (cc, h, w) = conf.dims3();
    let (c, fh, fw) = feat.dims3();
    if cc != 1 || (h, w) != (fh, fw) || gate.cin != 1 || gate.cout != c {
        arg_err!(
            "confidence {:?}, feature {:?} and gate {}->{} are incompatible",
            conf.shape(),
            feat.shape(),
            gate.cin,
            gate.cout
        );
    }
    Ok(gate.forward(ctx, conf).mul(feat))
}

/// Parameters of one Ref cell (one per direction).
#[derive(Clone, Debug)]
pub struct RefCellParams {
    /// Deformable alignment of the propagated state; absent when the Ref
    /// stream is disabled.
    pub align: Option<DeformAlign>,
    pub fuse_a: Conv2d,
    pub fuse_b: Conv2d,
    pub gate: Conv2d,
    pub fuse: ResStack,
}

impl RefCellParams {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, blocks: usize, ref_stream: bool, bound: f64) -> Self {
        RefCellParams {
            align: ref_stream.then(|| DeformAlign::new(store, &format!("{name}.align"), 2 * c, c, bound)),
            fuse_a: Conv2d::new(store, &format!("{name}.fuse_a"), 2 * c, c, 3, 1.0),
            fuse_b: Conv2d::new(store, &format!("{name}.fuse_b"), 2 * c, c, 3, 1.0),
            gate: Conv2d::new(store, &format!("{name}.gate"), 1, c, 3, 1.0),
            fuse: ResStack::with_out_gain(store, &format!("{name}.fuse"), 3 * c, c, c, blocks, FUSE_OUT_GAIN),
        }
    }

    /// One step with flow and matching already computed.
    ///
    /// Returns the full fused feature (consumed by the SR cell), the state
    /// to propagate, and the fusion branches.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        ctx: &Ctx,
        prev: &RefState,
        f_lr: &Var,
        matched: &Var,
        confidence: &Var,
        flow: &FlowField,
        residual: bool,
    ) -> Result<(Var, RefState, FusionIntermediates)> {
        let shape = f_lr.shape();
        if prev.h_ref.shape() != shape || matched.shape() != shape {
            arg_err!(
                "ref state {:?}, matched {:?} and lr feature {:?} differ",
                prev.h_ref.shape(),
                matched.shape(),
                shape
            );
        }
        let (_, h, w) = f_lr.dims3();
        if flow.dims() != (h, w) {
            arg_err!("flow {:?} does not match feature grid {h}x{w}", flow.dims());
        }
        let aligned = match &self.align {
            Some(align) => {
                let warped = backward_warp(&prev.h_ref, &Var::constant(flow.tensor().clone()))?;
                align.forward(ctx, &prev.h_ref, f_lr, &warped, flow.tensor())?
            }
            None => Var::constant(Tensor::zeros(shape)),
        };
        let f_a = self.fuse_a.forward(ctx, &Var::concat(&[f_lr, &aligned]));
        let f_b = confidence_gate(ctx, confidence, &self.fuse_b.forward(ctx, &Var::concat(&[f_lr, matched])), &self.gate)?;
        let full = self.fuse.forward(ctx, &Var::concat(&[&f_a, &f_b, f_lr]));
        let propagated = RefState {
            h_ref: if residual { full.sub(f_lr) } else { full.clone() },
            is_residual: residual,
        };
        Ok((full, propagated, FusionIntermediates { f_a, f_b }))
    }
}

/// A complete Ref cell step from frames: estimate the flow from `lr_prev`
/// to `lr_cur`, match `lr_cur` against `ref_cur`, then fuse.
#[allow(clippy::too_many_arguments)]
pub fn ref_cell_step(
    ctx: &Ctx,
    params: &RefCellParams,
    embedder: &MatchEmbedder,
    provider: &FlowProvider,
    prev: &RefState,
    f_ref: &Var,
    f_lr: &Var,
    lr_prev: &Frame,
    lr_cur: &Frame,
    ref_cur: &Frame,
    residual: bool,
) -> Result<(Var, RefState)> {
    if f_ref.shape() != f_lr.shape() {
        arg_err!("ref feature {:?} and lr feature {:?} differ", f_ref.shape(), f_lr.shape());
    }
    let flow = provider.estimate(lr_prev, lr_cur)?;
    let m = embedder.match_frames(ctx, lr_cur, ref_cur, f_ref)?;
    let (full, state, _) = params.step(ctx, prev, f_lr, &m.aligned, &m.confidence, &flow, residual)?;
    Ok((full, state))
}
