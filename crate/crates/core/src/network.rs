//! The end-to-end model: encoders, bidirectional dual-stream propagation,
//! per-frame fusion of the two directions and the pixel-shuffle upsampler.

use serde::{Deserialize, Serialize};

use crate::alignment::{backward_warp, OFFSET_BOUND};
use crate::autograd::Var;
use crate::data::{Clip, Frame};
use crate::error::{Error, Result};
use crate::flow::{FlowField, FlowProvider};
use crate::nn::{Conv2d, Ctx, ParamStore, ResBlock, LRELU_SLOPE};
use crate::ref_stream::{MatchEmbedder, RefCellParams, RefState};
use crate::resample::resample_tensor;
use crate::sr_stream::{sr_cell_step, SrCellParams, SrState};
use crate::tensor::Tensor;

macro_rules! config_err {
    ($($arg:tt)*) => {
        return Err(Error::Config(format!($($arg)*)))
    };
}

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub encoder_blocks: usize,
    pub ref_fusion_blocks: usize,
    pub sr_fusion_blocks: usize,
    pub upsampler_blocks: usize,
    /// Super-resolution factor, 2 or 4.
    pub scale: usize,
    /// How much more the Ref camera magnifies than the LR camera.
    pub ref_magnification: usize,
    /// Width of the patch-matching embedder.
    pub embed_channels: usize,
    /// Side of the square patches used for matching.
    pub match_patch: usize,
    /// Clamp on deformable tap offsets, in feature pixels.
    pub offset_bound: f64,
    pub use_ref: bool,
    pub use_ref_stream: bool,
    pub use_sr_dcn: bool,
    pub use_residual_prop: bool,
    pub use_conf_prop: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            encoder_blocks: 2,
            ref_fusion_blocks: 3,
            sr_fusion_blocks: 5,
            upsampler_blocks: 2,
            scale: 4,
            ref_magnification: 2,
            embed_channels: 8,
            match_patch: 3,
            offset_bound: OFFSET_BOUND,
            use_ref: true,
            use_ref_stream: true,
            use_sr_dcn: true,
            use_residual_prop: true,
            use_conf_prop: false,
            seed: 0,
        }
    }
}

/// The five ablation switches as one value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_ref: bool,
    pub use_conf_prop: bool,
    pub use_sr_dcn: bool,
    pub use_ref_stream: bool,
    pub use_residual_prop: bool,
}

/// Number of rows in the ablation table.
pub const ABLATION_ROWS: usize = 7;

/// Flags of ablation row `row` (1-based):
///
/// | row | Ref | Conf. | SR DCN | Ref stream | Res |
/// |-----|-----|-------|--------|------------|-----|
/// | 1   |     |       |        |            |     |
/// | 2   | x   |       |        |            |     |
/// | 3   | x   | x     |        |            |     |
/// | 4   | x   |       | x      |            |     |
/// | 5   | x   |       |        | x          |     |
/// | 6   | x   |       |        | x          | x   |
/// | 7   | x   |       | x      | x          | x   |
pub fn ablation_row(row: usize) -> Result<AblationFlags> {
    let f = |use_ref, use_conf_prop, use_sr_dcn, use_ref_stream, use_residual_prop| AblationFlags {
        use_ref,
        use_conf_prop,
        use_sr_dcn,
        use_ref_stream,
        use_residual_prop,
    };
    Ok(match row {
        1 => f(false, false, false, false, false),
        2 => f(true, false, false, false, false),
        3 => f(true, true, false, false, false),
        4 => f(true, false, true, false, false),
        5 => f(true, false, false, true, false),
        6 => f(true, false, false, true, true),
        7 => f(true, false, true, true, true),
        _ => config_err!("ablation row must be 1..={ABLATION_ROWS}, got {row}"),
    })
}

impl ModelConfig {
    /// The 32-channel variant.
    pub fn small() -> Self {
        ModelConfig {
            channels: 32,
            ..Default::default()
        }
    }

    /// A toy-scale model for tests and desk experiments.
    pub fn tiny(channels: usize) -> Self {
        ModelConfig {
            channels,
            encoder_blocks: 1,
            ref_fusion_blocks: 1,
            sr_fusion_blocks: 2,
            upsampler_blocks: 1,
            ..Default::default()
        }
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            use_ref: self.use_ref,
            use_conf_prop: self.use_conf_prop,
            use_sr_dcn: self.use_sr_dcn,
            use_ref_stream: self.use_ref_stream,
            use_residual_prop: self.use_residual_prop,
        }
    }

    pub fn with_flags(mut self, f: AblationFlags) -> Self {
        self.use_ref = f.use_ref;
        self.use_conf_prop = f.use_conf_prop;
        self.use_sr_dcn = f.use_sr_dcn;
        self.use_ref_stream = f.use_ref_stream;
        self.use_residual_prop = f.use_residual_prop;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.embed_channels == 0 {
            config_err!("model.channels and model.embed_channels must be positive");
        }
        if !matches!(self.scale, 2 | 4) {
            config_err!("model.scale must be 2 or 4, got {}", self.scale);
        }
        if self.ref_magnification == 0 || self.ref_magnification > self.scale {
            config_err!(
                "model.ref_magnification must be in 1..={}, got {}",
                self.scale,
                self.ref_magnification
            );
        }
        if self.match_patch == 0 || self.match_patch.is_multiple_of(2) {
            config_err!("model.match_patch must be odd, got {}", self.match_patch);
        }
        if !(self.offset_bound > 0.0) {
            config_err!("model.offset_bound must be positive");
        }
        if self.use_ref_stream && !self.use_ref {
            config_err!("model.use_ref_stream requires model.use_ref");
        }
        if self.use_residual_prop && !self.use_ref_stream {
            config_err!("model.use_residual_prop requires model.use_ref_stream");
        }
        if self.use_conf_prop && !self.use_ref {
            config_err!("model.use_conf_prop requires model.use_ref");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }

    fn order(self, len: usize) -> Vec<usize> {
        match self {
            Direction::Forward => (0..len).collect(),
            Direction::Backward => (0..len).rev().collect(),
        }
    }
}

/// Inter-frame flows for both directions. `forward[t]` aligns frame
/// `t - 1` to `t` and `backward[t]` aligns frame `t + 1` to `t`; the first
/// step of each direction gets a zero field.
#[derive(Clone, Debug)]
pub struct ClipFlows {
    pub forward: Vec<FlowField>,
    pub backward: Vec<FlowField>,
}

impl ClipFlows {
    pub fn estimate(provider: &FlowProvider, lr: &Clip) -> Result<ClipFlows> {
        let f = lr.frames();
        let (h, w) = lr.dims();
        let n = f.len();
        let mut forward = vec![FlowField::zeros(h, w)];
        for t in 1..n {
            forward.push(provider.estimate(&f[t - 1], &f[t])?);
        }
        let mut backward = Vec::with_capacity(n);
        for t in 0..n {
            backward.push(if t + 1 < n {
                provider.estimate(&f[t + 1], &f[t])?
            } else {
                FlowField::zeros(h, w)
            });
        }
        Ok(ClipFlows { forward, backward })
    }

    fn for_direction(&self, d: Direction) -> &[FlowField] {
        match d {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }
}

/// States produced at one time step of one direction.
#[derive(Clone, Debug)]
pub struct RecurrentStateBundle {
    pub direction: Direction,
    /// Fused Ref feature fed to the SR cell (`f_lr` when Ref is unused).
    pub ref_full: Var,
    /// Propagated Ref state; `None` when Ref is unused.
    pub ref_state: Option<RefState>,
    pub sr: SrState,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub head: Conv2d,
    pub blocks: Vec<ResBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, blocks: usize) -> Self {
        Encoder {
            head: Conv2d::new(store, &format!("{name}.head"), 3, c, 3, 1.0),
            blocks: (0..blocks).map(|i| ResBlock::new(store, &format!("{name}.block{i}"), c)).collect(),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let mut h = self.head.forward(ctx, x).leaky_relu(LRELU_SLOPE);
        for b in &self.blocks {
            h = b.forward(ctx, &h);
        }
        h
    }
}

/// Residual blocks, then `log2(scale)` stages of conv + pixel shuffle x2,
/// then a projection to RGB.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub blocks: Vec<ResBlock>,
    pub stages: Vec<Conv2d>,
    pub last: Conv2d,
}

impl Upsampler {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, blocks: usize, scale: usize) -> Self {
        let n_stages = scale.trailing_zeros() as usize;
        Upsampler {
            blocks: (0..blocks).map(|i| ResBlock::new(store, &format!("{name}.block{i}"), c)).collect(),
            stages: (0..n_stages)
                .map(|i| Conv2d::new(store, &format!("{name}.shuffle{i}"), c, 4 * c, 3, 1.0))
                .collect(),
            // Zero, so a fresh model reproduces the bicubic skip exactly.
            last: Conv2d::zeros(store, &format!("{name}.last"), c, 3, 3),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Var {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(ctx, &h);
        }
        for s in &self.stages {
            h = s.forward(ctx, &h).pixel_shuffle(2).leaky_relu(LRELU_SLOPE);
        }
        self.last.forward(ctx, &h)
    }
}

/// Per-clip quantities shared by both directions.
struct Prepared {
    f_lr: Vec<Var>,
    /// Matched Ref feature and confidence per frame.
    matched: Vec<Option<(Var, Var)>>,
}

#[derive(Clone, Debug)]
pub struct RefVsrModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    lr_encoder: Encoder,
    ref_encoder: Option<Encoder>,
    matcher: Option<MatchEmbedder>,
    /// Indexed by direction: `[forward, backward]`.
    ref_cells: Option<[RefCellParams; 2]>,
    sr_cells: [SrCellParams; 2],
    fusion: Conv2d,
    upsampler: Upsampler,
}

fn dir_index(d: Direction) -> usize {
    match d {
        Direction::Forward => 0,
        Direction::Backward => 1,
    }
}

impl RefVsrModel {
    /// Build a freshly initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let c = config.channels;
        let bound = config.offset_bound;
        let lr_encoder = Encoder::new(&mut store, "enc_lr", c, config.encoder_blocks);
        let (ref_encoder, matcher, ref_cells) = if config.use_ref {
            let enc = Encoder::new(&mut store, "enc_ref", c, config.encoder_blocks);
            let m = MatchEmbedder::new(
                &mut store,
                "match",
                config.embed_channels,
                config.match_patch,
                config.ref_magnification,
            );
            let mut cell = |d: Direction| {
                let name = format!("ref_{}", d.tag());
                RefCellParams::new(&mut store, &name, c, config.ref_fusion_blocks, config.use_ref_stream, bound)
            };
            let cells = [cell(Direction::Forward), cell(Direction::Backward)];
            (Some(enc), Some(m), Some(cells))
        } else {
            (None, None, None)
        };
        let mut sr_cell = |d: Direction| {
            let name = format!("sr_{}", d.tag());
            SrCellParams::new(&mut store, &name, c, config.sr_fusion_blocks, config.use_sr_dcn, bound)
        };
        let sr_cells = [sr_cell(Direction::Forward), sr_cell(Direction::Backward)];
        let fusion = Conv2d::new(&mut store, "fusion", 2 * c, c, 3, 1.0);
        let upsampler = Upsampler::new(&mut store, "up", c, config.upsampler_blocks, config.scale);
        Ok(RefVsrModel {
            config,
            params: store,
            lr_encoder,
            ref_encoder,
            matcher,
            ref_cells,
            sr_cells,
            fusion,
            upsampler,
        })
    }

    /// Rebuild a model from a configuration and stored parameters. The
    /// parameter names and shapes must match the configuration exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = RefVsrModel::new(config)?;
        let fresh = &model.params;
        if fresh.len() != params.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} tensors, configuration expects {}",
                params.len(),
                fresh.len()
            )));
        }
        for ((a, ta), (b, tb)) in fresh.iter().zip(params.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Version(format!(
                    "parameter `{b}` {:?} does not match expected `{a}` {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    fn check_clips(&self, lr: &Clip, reference: &Clip) -> Result<()> {
        if lr.len() != reference.len() {
            return Err(Error::Argument(format!(
                "lr clip has {} frames, ref clip {}",
                lr.len(),
                reference.len()
            )));
        }
        if lr.dims() != reference.dims() {
            return Err(Error::Argument(format!(
                "lr frames {:?} and ref frames {:?} differ in size",
                lr.dims(),
                reference.dims()
            )));
        }
        Ok(())
    }

    /// LR and Ref features at the LR pixel grid. The Ref feature is `None`
    /// when the model does not use the Ref camera.
    pub fn encode_features(&self, ctx: &Ctx, lr: &Frame, reference: &Frame) -> Result<(Var, Option<Var>)> {
        if lr.dims() != reference.dims() {
            return Err(Error::Argument(format!(
                "lr {:?} and ref {:?} frames differ in size",
                lr.dims(),
                reference.dims()
            )));
        }
        let f_lr = self.lr_encoder.forward(ctx, &Var::constant(lr.tensor().clone()));
        let f_ref = self
            .ref_encoder
            .as_ref()
            .map(|e| e.forward(ctx, &Var::constant(reference.tensor().clone())));
        Ok((f_lr, f_ref))
    }

    fn prepare(&self, ctx: &Ctx, lr: &Clip, reference: &Clip) -> Result<Prepared> {
        self.check_clips(lr, reference)?;
        let mut f_lr = Vec::with_capacity(lr.len());
        let mut matched = Vec::with_capacity(lr.len());
        for (l, r) in lr.frames().iter().zip(reference.frames()) {
            let (fl, fr) = self.encode_features(ctx, l, r)?;
            matched.push(match (&self.matcher, fr) {
                (Some(m), Some(fr)) => {
                    let mr = m.match_frames(ctx, l, r, &fr)?;
                    Some((mr.aligned, mr.confidence))
                }
                _ => None,
            });
            f_lr.push(fl);
        }
        Ok(Prepared { f_lr, matched })
    }

    fn propagate(&self, ctx: &Ctx, prep: &Prepared, direction: Direction, flows: &ClipFlows) -> Result<Vec<RecurrentStateBundle>> {
        let n = prep.f_lr.len();
        let flows = flows.for_direction(direction);
        if flows.len() != n {
            return Err(Error::Argument(format!("{} flows for {n} frames", flows.len())));
        }
        let (c, h, w) = prep.f_lr[0].dims3();
        let di = dir_index(direction);
        let mut sr = SrState::zeros(c, h, w);
        let mut ref_state = self.ref_cells.as_ref().map(|_| RefState::zeros(c, h, w));
        let mut prop_match: Option<(Var, Var)> = None;
        let mut out: Vec<Option<RecurrentStateBundle>> = vec![None; n];
        for (step, t) in direction.order(n).into_iter().enumerate() {
            let flow = &flows[t];
            let f_lr = &prep.f_lr[t];
            let (ref_full, next_ref) = match (&self.ref_cells, &prep.matched[t]) {
                (Some(cells), Some((aligned, conf))) => {
                    let (aligned, conf) = if self.config.use_conf_prop {
                        let chosen = match (&prop_match, step) {
                            (Some((pa, pc)), s) if s > 0 => propagate_confidence(aligned, conf, pa, pc, flow)?,
                            _ => (aligned.clone(), conf.clone()),
                        };
                        prop_match = Some(chosen.clone());
                        chosen
                    } else {
                        (aligned.clone(), conf.clone())
                    };
                    let prev = ref_state.as_ref().expect("ref state exists with ref cells");
                    let (full, next, _) =
                        cells[di].step(ctx, prev, f_lr, &aligned, &conf, flow, self.config.use_residual_prop)?;
                    (full, Some(next))
                }
                _ => (f_lr.clone(), None),
            };
            sr = sr_cell_step(ctx, &self.sr_cells[di], &sr, &ref_full, flow)?;
            ref_state = next_ref.clone();
            out[t] = Some(RecurrentStateBundle {
                direction,
                ref_full,
                ref_state: next_ref,
                sr: sr.clone(),
            });
        }
        Ok(out.into_iter().map(|s| s.expect("every step visited")).collect())
    }

    /// Run one direction over the clip and return the states of every
    /// time step, indexed by frame.
    pub fn propagate_direction(
        &self,
        ctx: &Ctx,
        lr: &Clip,
        reference: &Clip,
        direction: Direction,
        flows: &ClipFlows,
    ) -> Result<Vec<RecurrentStateBundle>> {
        let prep = self.prepare(ctx, lr, reference)?;
        self.propagate(ctx, &prep, direction, flows)
    }

    /// Fuse the two directions at one frame and reconstruct the SR frame,
    /// unclamped.
    pub fn fuse_and_upsample(&self, ctx: &Ctx, h_fwd: &SrState, h_bwd: &SrState, lr: &Frame) -> Result<Var> {
        let (_, h, w) = h_fwd.h_sr.dims3();
        if h_fwd.h_sr.shape() != h_bwd.h_sr.shape() || lr.dims() != (h, w) {
            return Err(Error::Argument(format!(
                "states {:?}/{:?} and lr frame {:?} disagree",
                h_fwd.h_sr.shape(),
                h_bwd.h_sr.shape(),
                lr.dims()
            )));
        }
        let fused = self
            .fusion
            .forward(ctx, &Var::concat(&[&h_fwd.h_sr, &h_bwd.h_sr]))
            .leaky_relu(LRELU_SLOPE);
        let s = self.config.scale;
        let skip = resample_tensor(lr.tensor(), h * s, w * s);
        Ok(self.upsampler.forward(ctx, &fused).add_const(&skip))
    }

    /// Full differentiable pipeline: one unclamped SR frame per LR frame.
    pub fn forward(&self, ctx: &Ctx, lr: &Clip, reference: &Clip, flows: &ClipFlows) -> Result<Vec<Var>> {
        let prep = self.prepare(ctx, lr, reference)?;
        let bwd = self.propagate(ctx, &prep, Direction::Backward, flows)?;
        let fwd = self.propagate(ctx, &prep, Direction::Forward, flows)?;
        fwd.iter()
            .zip(&bwd)
            .zip(lr.frames())
            .map(|((f, b), l)| self.fuse_and_upsample(ctx, &f.sr, &b.sr, l))
            .collect()
    }

    /// Inference: super-resolve a clip, clamping the output to `[0, 1]`.
    pub fn super_resolve(&self, lr: &Clip, reference: &Clip, provider: &FlowProvider) -> Result<Clip> {
        self.check_clips(lr, reference)?;
        let flows = ClipFlows::estimate(provider, lr)?;
        let ctx = Ctx::inference(&self.params);
        let out = self.forward(&ctx, lr, reference, &flows)?;
        let frames = out
            .into_iter()
            .enumerate()
            .map(|(t, v)| {
                if !v.value().is_finite() {
                    return Err(Error::Numeric(format!("non-finite output at frame {t}")));
                }
                Frame::from_clamped(v.value().clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Clip::new(frames)
    }

    /// The patch matcher, when the model uses the Ref camera.
    pub fn matcher(&self) -> Option<&MatchEmbedder> {
        self.matcher.as_ref()
    }
}

/// Keep, per pixel, whichever of the current match and the propagated one
/// (warped by `flow`) has the higher confidence.
fn propagate_confidence(aligned: &Var, conf: &Var, prev_aligned: &Var, prev_conf: &Var, flow: &FlowField) -> Result<(Var, Var)> {
    let flow = Var::constant(flow.tensor().clone());
    let wa = backward_warp(prev_aligned, &flow)?;
    let wc = backward_warp(prev_conf, &flow)?;
    let (c, h, w) = aligned.dims3();
    let hw = h * w;
    let keep: Vec<f64> = conf
        .value()
        .data()
        .iter()
        .zip(wc.value().data())
        .map(|(a, b)| if a >= b { 1.0 } else { 0.0 })
        .collect();
    let tile = |n: usize, v: &dyn Fn(f64) -> f64| {
        Var::constant(Tensor::from_fn(&[n, h, w], |i| v(keep[i[1] * w + i[2]])))
    };
    debug_assert_eq!(keep.len(), hw);
    let (mk, mo) = (tile(c, &|k| k), tile(c, &|k| 1.0 - k));
    let (ck, co) = (tile(1, &|k| k), tile(1, &|k| 1.0 - k));
    Ok((
        aligned.mul(&mk).add(&wa.mul(&mo)),
        conf.mul(&ck).add(&wc.mul(&co)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::procedural_clip;
    use crate::data::{stable_hash, synthesize_triplet};

    fn toy(seed: u64, t: usize, side: usize) -> (Clip, Clip) {
        let gt = procedural_clip(seed, t, side * 4, side * 4, 0.5).unwrap();
        let tr = synthesize_triplet(&gt, 4, 2).unwrap();
        (tr.lr, tr.reference)
    }

    /// Weighted sum of the SR frames, as a scalar objective.
    fn objective(model: &RefVsrModel, ctx: &Ctx, lr: &Clip, r: &Clip, flows: &ClipFlows) -> Var {
        let out = model.forward(ctx, lr, r, flows).unwrap();
        let terms: Vec<Var> = out
            .iter()
            .enumerate()
            .map(|(t, v)| {
                let w = Tensor::from_fn(v.shape(), |i| ((i[0] * 7 + i[1] * 3 + i[2] + t) % 5) as f64 - 2.0);
                v.mul(&Var::constant(w)).sum()
            })
            .collect();
        let parts: Vec<(f64, &Var)> = terms.iter().map(|v| (1.0, v)).collect();
        Var::weighted_sum(&parts)
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (lr, r) = toy(21, 2, 8);
        for config in [ModelConfig::tiny(4), ModelConfig::tiny(4).with_flags(ablation_row(1).unwrap())] {
            let mut model = RefVsrModel::new(config).unwrap();
            // The output conv starts at zero, which would hide every
            // upstream gradient.
            for (name, t) in model.params.iter_mut().filter(|(n, _)| n.starts_with("up.last")) {
                let k = stable_hash(name);
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = (((k >> (i % 48)) & 0xff) as f64 / 255.0 - 0.5) * 0.2;
                }
            }
            let flows = ClipFlows::estimate(&FlowProvider::SyntheticTruth { dx: 0.3, dy: -0.2 }, &lr).unwrap();
            let ctx = Ctx::training(&model.params);
            let grads = ctx.collect_grads(&crate::autograd::backward(&objective(&model, &ctx, &lr, &r, &flows)));
            // Small enough that no leaky-ReLU kink is crossed; a bias step
            // moves every pixel of its channel at once.
            let h = 1e-7;
            let mut worst: f64 = 0.0;
            for (name, t) in model.params.iter() {
                // A few entries of every tensor.
                for j in [0, t.len() / 2, t.len() - 1] {
                    let eval = |d: f64| {
                        let mut m = model.clone();
                        m.params.get_mut(name).unwrap().data_mut()[j] += d;
                        objective(&m, &Ctx::inference(&m.params), &lr, &r, &flows).item()
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = grads[name].data()[j];
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                    assert!(err < 1e-2, "{name}[{j}]: analytic {a}, numeric {numeric}");
                    worst = worst.max(err);
                }
            }
            assert!(worst < 1e-2);
        }
    }

    #[test]
    fn rows_are_consistent_configs() {
        for row in 1..=ABLATION_ROWS {
            let cfg = ModelConfig::tiny(4).with_flags(ablation_row(row).unwrap());
            cfg.validate().unwrap();
            RefVsrModel::new(cfg).unwrap();
        }
        assert!(ablation_row(0).is_err());
        assert!(ablation_row(8).is_err());
    }

    #[test]
    fn inconsistent_flags_are_config_errors() {
        let mut cfg = ModelConfig::tiny(4);
        cfg.use_ref = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::tiny(4);
        cfg.use_ref_stream = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn output_shapes_for_short_and_single_frame_clips() {
        let model = RefVsrModel::new(ModelConfig::tiny(4)).unwrap();
        for t in [1, 3] {
            let (lr, r) = toy(1, t, 8);
            let out = model.super_resolve(&lr, &r, &FlowProvider::default()).unwrap();
            assert_eq!(out.len(), t);
            assert_eq!(out.dims(), (32, 32));
        }
    }

    #[test]
    fn zeroed_last_layer_gives_bicubic() {
        let mut model = RefVsrModel::new(ModelConfig::tiny(4)).unwrap();
        model.params.zero_prefix("up.last");
        let (lr, r) = toy(2, 2, 8);
        let out = model.super_resolve(&lr, &r, &FlowProvider::Zero).unwrap();
        for (o, l) in out.frames().iter().zip(lr.frames()) {
            let bic = crate::data::resample_bicubic(l, 32, 32).unwrap();
            assert_eq!(o, &bic);
        }
    }

    #[test]
    fn states_are_indexed_by_frame() {
        let model = RefVsrModel::new(ModelConfig::tiny(4)).unwrap();
        let (lr, r) = toy(3, 3, 8);
        let ctx = Ctx::inference(&model.params);
        let flows = ClipFlows::estimate(&FlowProvider::Zero, &lr).unwrap();
        let states = model.propagate_direction(&ctx, &lr, &r, Direction::Backward, &flows).unwrap();
        assert_eq!(states.len(), 3);
        assert!(states.iter().all(|s| s.sr.h_sr.shape() == [4, 8, 8] && s.direction == Direction::Backward));
    }

    #[test]
    fn conf_prop_variant_runs() {
        let cfg = ModelConfig::tiny(4).with_flags(ablation_row(3).unwrap());
        let model = RefVsrModel::new(cfg).unwrap();
        let (lr, r) = toy(4, 3, 8);
        let out = model.super_resolve(&lr, &r, &FlowProvider::default()).unwrap();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn parameter_mismatch_is_a_version_error() {
        let a = RefVsrModel::new(ModelConfig::tiny(4)).unwrap();
        let err = RefVsrModel::from_params(ModelConfig::tiny(8), a.params.clone()).unwrap_err();
        assert!(matches!(err, Error::Version(_)));
        RefVsrModel::from_params(ModelConfig::tiny(4), a.params).unwrap();
    }
}
