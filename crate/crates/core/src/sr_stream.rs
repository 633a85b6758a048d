//! The SR recurrent cell.
//!
//! The propagated SR state is aligned to the current frame by flow warping
//! plus a deformable kernel steered by the fused Ref feature, then fused
//! with that feature through a residual stack.

use crate::alignment::{backward_warp, DeformAlign};
use crate::autograd::Var;
use crate::error::{arg_err, Result};
use crate::flow::FlowField;
use crate::nn::{Ctx, ParamStore, ResStack};
use crate::tensor::Tensor;


/// Initial gain of the fusion output conv.
pub const FUSE_OUT_GAIN: f64 = 0.3;
#[derive(Clone, Debug)]
pub struct SrState {
    pub h_sr: Var,
}

impl SrState {
    pub fn zeros(c: usize, h: usize, w: usize) -> SrState {
        SrState {
            h_sr: Var::constant(Tensor::zeros(&[c, h, w])),
        }
    }
}

/// Parameters of one SR cell (one per direction).
#[derive(Clone, Debug)]
pub struct SrCellParams {
    /// Deformable refinement; without it the cell uses the flow-warped
    /// state directly.
    pub align: Option<DeformAlign>,
    pub fuse: ResStack,
}

impl SrCellParams {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, blocks: usize, use_dcn: bool, bound: f64) -> Self {
        SrCellParams {
            align: use_dcn.then(|| DeformAlign::new(store, &format!("{name}.align"), 2 * c, c, bound)),
            fuse: ResStack::with_out_gain(store, &format!("{name}.fuse"), 2 * c, c, c, blocks, FUSE_OUT_GAIN),
        }
    }

    /// The aligned previous state (before fusion).
    pub fn align_state(&self, ctx: &Ctx, prev: &SrState, h_ref_full: &Var, flow: &FlowField) -> Result<Var> {
        let (_, h, w) = h_ref_full.dims3();
        if prev.h_sr.shape() != h_ref_full.shape() || flow.dims() != (h, w) {
            arg_err!(
                "sr state {:?}, ref feature {:?} and flow {:?} differ",
                prev.h_sr.shape(),
                h_ref_full.shape(),
                flow.dims()
            );
        }
        let warped = backward_warp(&prev.h_sr, &Var::constant(flow.tensor().clone()))?;
        match &self.align {
            Some(align) => align.forward(ctx, &prev.h_sr, h_ref_full, &warped, flow.tensor()),
            None => Ok(warped),
        }
    }
}

/// `h_sr = R(concat(h_ref_full, h̄)) + h̄` where `h̄` is the aligned
/// previous state.
pub fn sr_cell_step(ctx: &Ctx, params: &SrCellParams, prev: &SrState, h_ref_full: &Var, flow: &FlowField) -> Result<SrState> {
    let aligned = params.align_state(ctx, prev, h_ref_full, flow)?;
    let fused = params.fuse.forward(ctx, &Var::concat(&[h_ref_full, &aligned]));
    Ok(SrState {
        h_sr: fused.add(&aligned),
    })
}
