//! Two-stage optimization, validation and the ablation harness.
//!
//! Stage 1 is supervised on random spatio-temporal crops of (LR, Ref, GT)
//! triplets. Stage 2 fine-tunes a stage-1 model on whole native frames
//! against the LR frames themselves and the telephoto stream. Both stages
//! use Adam with a cosine learning-rate schedule and global-norm gradient
//! clipping, and draw every random number from one seeded ChaCha stream,
//! so a run is reproducible bit for bit on one platform.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, Var};
use crate::checkpoint::{AdamState, Checkpoint, RngState};
use crate::config::{Config, LossMode, TrainConfig};
use crate::data::{load_tele, load_triplet, Clip, DatasetManifest, Frame, Split, TripletSample};
use crate::error::{Error, Result};
use crate::flow::FlowProvider;
use crate::losses::{charbonnier, frame_var, stage1_loss, stage2_loss, LossWeights, PerceptualEmbedder};
use crate::metrics::psnr;
use crate::network::{ablation_row, AblationFlags, ClipFlows, ModelConfig, RefVsrModel};
use crate::nn::{Ctx, ParamStore};
use crate::resample::resample_tensor;
use crate::tensor::Tensor;

/// Seed of the fixed perceptual embedder used by the full losses.
pub const EMBEDDER_SEED: u64 = 0xc0ffee;

/// One clip of a training corpus.
#[derive(Clone, Debug)]
pub struct ClipData {
    pub id: String,
    pub sample: TripletSample,
    /// Native-resolution telephoto stream, needed by stage 2.
    pub tele: Option<Clip>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub train: Vec<ClipData>,
    pub val: Vec<ClipData>,
}

impl TrainSet {
    /// Load the train and val splits of `manifest`.
    pub fn load(manifest: &DatasetManifest, model: &ModelConfig) -> Result<TrainSet> {
        let load = |split| {
            manifest
                .split(split)
                .map(|e| {
                    Ok(ClipData {
                        id: e.clip_id.clone(),
                        sample: load_triplet(&e.path, model.scale, model.ref_magnification)?,
                        tele: load_tele(&e.path)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(TrainSet {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub psnr_val: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Optional side effects of a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Receives one JSON line per step.
    pub log: Option<&'a mut dyn Write>,
    /// Intermediate checkpoints go here as `step_NNNNNN.ckpt`.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(&self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, lr: f64) {
        state.t += 1;
        let t = state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Learning rate at `step` (0-based) of `total`: cosine from `lr` down to
/// `lr_min` at the last step.
pub fn cosine_lr(step: usize, total: usize, lr: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let progress = step as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// A training window: `len` frames of one clip from `start`, cropped at
/// `(y0, x0)` in LR pixels with side `side` (the whole frame when `None`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub clip: usize,
    pub start: usize,
    pub len: usize,
    pub crop: Option<(usize, usize, usize)>,
}

/// Top-left corner of the Ref crop for an LR crop at `(y0, x0)` of side
/// `p`: the Ref window is centred on the image of the LR window's centre
/// under the central `m`-times magnification, clamped into the frame.
pub fn ref_crop_origin(y0: usize, x0: usize, p: usize, h: usize, w: usize, m: usize) -> (usize, usize) {
    let map = |c0: usize, len: usize| {
        let centre = c0 as f64 + p as f64 / 2.0;
        let mapped = (centre - len as f64 / 2.0) * m as f64 + len as f64 / 2.0;
        (mapped - p as f64 / 2.0).round().clamp(0.0, (len - p) as f64) as usize
    };
    (map(y0, h), map(x0, w))
}

struct Batch {
    lr: Clip,
    reference: Clip,
    gt: Clip,
    tele: Option<Clip>,
    label: String,
}

fn crop_clip(clip: &Clip, y0: usize, x0: usize, h: usize, w: usize) -> Result<Clip> {
    clip.map_frames(|f| f.crop(y0, x0, h, w))
}

fn draw_window(rng: &mut ChaCha8Rng, clips: &[ClipData], cfg: &TrainConfig, whole_frames: bool) -> Window {
    let clip = rng.gen_range(0..clips.len());
    let n = clips[clip].sample.len();
    let len = cfg.clip_len.min(n);
    let start = rng.gen_range(0..=n - len);
    let (h, w) = clips[clip].sample.lr.dims();
    let p = cfg.patch_crop;
    let crop = if whole_frames || p == 0 || p >= h.min(w) {
        None
    } else {
        Some((rng.gen_range(0..=h - p), rng.gen_range(0..=w - p), p))
    };
    Window { clip, start, len, crop }
}

fn materialize(clips: &[ClipData], win: Window) -> Result<Batch> {
    let d = &clips[win.clip];
    let s = &d.sample;
    let lr = s.lr.window(win.start, win.len)?;
    let reference = s.reference.window(win.start, win.len)?;
    let gt = s.gt.window(win.start, win.len)?;
    let tele = d.tele.as_ref().map(|t| t.window(win.start, win.len)).transpose()?;
    let end = win.start + win.len;
    let Some((y0, x0, p)) = win.crop else {
        return Ok(Batch {
            lr,
            reference,
            gt,
            tele,
            label: format!("clip `{}` frames {}..{end} (whole frames)", d.id, win.start),
        });
    };
    let (h, w) = lr.dims();
    let (ry, rx) = ref_crop_origin(y0, x0, p, h, w, s.ref_magnification);
    let k = s.scale;
    Ok(Batch {
        lr: crop_clip(&lr, y0, x0, p, p)?,
        reference: crop_clip(&reference, ry, rx, p, p)?,
        gt: crop_clip(&gt, y0 * k, x0 * k, p * k, p * k)?,
        tele: None,
        label: format!("clip `{}` frames {}..{end} crop y={y0} x={x0} side={p}", d.id, win.start),
    })
}

/// Mean per-frame PSNR of the model's output against GT, averaged over
/// `clips`; `None` when `clips` is empty.
pub fn evaluate_psnr(model: &RefVsrModel, clips: &[ClipData], provider: &FlowProvider) -> Result<Option<f64>> {
    if clips.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for c in clips {
        let sr = model.super_resolve(&c.sample.lr, &c.sample.reference, provider)?;
        total += clip_psnr(&sr, &c.sample.gt)?;
    }
    Ok(Some(total / clips.len() as f64))
}

/// Mean per-frame PSNR of two aligned clips.
pub fn clip_psnr(a: &Clip, b: &Clip) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("clips have {} and {} frames", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (x, y) in a.frames().iter().zip(b.frames()) {
        total += psnr(x, y, None)?;
    }
    Ok(total / a.len() as f64)
}

/// Bicubic upsampling of every LR frame to the GT size.
pub fn bicubic_clip(lr: &Clip, scale: usize) -> Result<Clip> {
    let (h, w) = lr.dims();
    lr.map_frames(|f| crate::data::resample_bicubic(f, h * scale, w * scale))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    Supervised,
    FineTune,
}

#[allow(clippy::too_many_arguments)]
fn batch_loss(
    model: &RefVsrModel,
    ctx: &Ctx,
    batch: &Batch,
    stage: Stage,
    mode: LossMode,
    weights: &LossWeights,
    embedder: &PerceptualEmbedder,
    provider: &FlowProvider,
) -> Result<Var> {
    let flows = ClipFlows::estimate(provider, &batch.lr)?;
    let out = model.forward(ctx, &batch.lr, &batch.reference, &flows)?;
    let mut terms = Vec::with_capacity(out.len());
    for (t, sr) in out.iter().enumerate() {
        let loss = match stage {
            Stage::Supervised => {
                let gt = frame_var(&batch.gt.frames()[t]);
                match mode {
                    LossMode::Pix => charbonnier(sr, &gt, weights.charbonnier_eps)?,
                    LossMode::Full => {
                        let (_, gh, gw) = gt.dims3();
                        let wide = resample_tensor(batch.reference.frames()[t].tensor(), gh, gw);
                        stage1_loss(sr, &gt, &Var::constant(wide), weights, embedder)?
                    }
                }
            }
            Stage::FineTune => {
                let tele = batch.tele.as_ref().expect("stage-2 batches carry tele");
                let lr = frame_var(&batch.lr.frames()[t]);
                stage2_loss(sr, &lr, &frame_var(&tele.frames()[t]), weights, embedder)?
            }
        };
        terms.push(loss);
    }
    let k = 1.0 / terms.len() as f64;
    let weighted: Vec<(f64, &Var)> = terms.iter().map(|v| (k, v)).collect();
    Ok(Var::weighted_sum(&weighted))
}

fn run(
    mut model: RefVsrModel,
    set: &TrainSet,
    config: &Config,
    stage: Stage,
    hooks: &mut TrainHooks,
) -> Result<TrainOutcome> {
    let cfg = &config.train;
    cfg.validate()?;
    config.loss.weights().validate()?;
    if set.train.is_empty() {
        return Err(Error::Config("the train split is empty".into()));
    }
    if stage == Stage::FineTune {
        if let Some(c) = set.train.iter().find(|c| c.tele.is_none()) {
            return Err(Error::Config(format!("clip `{}` has no tele stream, which stage 2 needs", c.id)));
        }
    }
    let weights = config.loss.weights();
    let embedder = PerceptualEmbedder::new(EMBEDDER_SEED);
    let adam = Adam::default();
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val = &set.val[..cfg.val_clips.min(set.val.len())];
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut accum: Option<BTreeMap<String, Tensor>> = None;
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch {
            let win = draw_window(&mut rng, &set.train, cfg, stage == Stage::FineTune);
            let batch = materialize(&set.train, win)?;
            let ctx = Ctx::training(&model.params);
            let loss = batch_loss(&model, &ctx, &batch, stage, config.loss.mode, &weights, &embedder, &config.flow)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at step {} on {}", step + 1, batch.label)));
            }
            let grads = ctx.collect_grads(&backward(&loss));
            if grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at step {} on {}", step + 1, batch.label)));
            }
            loss_sum += value;
            match &mut accum {
                None => accum = Some(grads),
                Some(acc) => {
                    for (name, g) in grads {
                        acc.get_mut(&name).expect("same parameter set").add_assign(&g);
                    }
                }
            }
        }
        let mut grads = accum.expect("batch is positive");
        if cfg.batch > 1 {
            let k = 1.0 / cfg.batch as f64;
            for g in grads.values_mut() {
                *g = g.scale(k);
            }
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min);
        adam.step(&mut model.params, &grads, &mut state, lr);

        let done = step + 1;
        let validate = done == cfg.steps || (cfg.val_every > 0 && done % cfg.val_every == 0);
        let psnr_val = if validate { evaluate_psnr(&model, val, &config.flow)? } else { None };
        let record = LogRecord {
            step: done,
            loss: loss_sum / cfg.batch as f64,
            psnr_val,
        };
        if let Some(w) = hooks.log.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
        }
        log.push(record);
        if let Some(dir) = hooks.checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                let ck = snapshot(&model, &state, stage, done, cfg.seed, &rng);
                ck.save(&dir.join(format!("step_{done:06}.ckpt")))?;
            }
        }
    }
    let checkpoint = snapshot(&model, &state, stage, cfg.steps, cfg.seed, &rng);
    Ok(TrainOutcome { checkpoint, log })
}

fn snapshot(model: &RefVsrModel, state: &AdamState, stage: Stage, step: usize, seed: u64, rng: &ChaCha8Rng) -> Checkpoint {
    Checkpoint {
        model: model.config.clone(),
        params: model.params.clone(),
        optimizer: state.clone(),
        stage: match stage {
            Stage::Supervised => 1,
            Stage::FineTune => 2,
        },
        step: step as u64,
        rng: RngState {
            seed,
            word_pos: rng.get_word_pos(),
        },
    }
}

/// Supervised training of a fresh model built from `config.model`.
pub fn train_stage1(set: &TrainSet, config: &Config, hooks: &mut TrainHooks) -> Result<TrainOutcome> {
    let model = RefVsrModel::new(config.model.clone())?;
    run(model, set, config, Stage::Supervised, hooks)
}

/// Fine-tune a stage-1 checkpoint with the downsampling-consistency and
/// telephoto fidelity terms. The architecture comes from the checkpoint.
pub fn train_stage2(checkpoint: &Checkpoint, set: &TrainSet, config: &Config, hooks: &mut TrainHooks) -> Result<TrainOutcome> {
    if checkpoint.stage < 1 {
        return Err(Error::Config(format!(
            "stage 2 needs a stage-1 checkpoint, got stage {}",
            checkpoint.stage
        )));
    }
    run(checkpoint.build_model()?, set, config, Stage::FineTune, hooks)
}

/// One trained ablation variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub flags: AblationFlags,
    /// Mean PSNR over the val split.
    pub psnr: f64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub steps: usize,
    pub val_clips: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "" };
        let mut out = format!("# {} steps per row, PSNR on {} val clips\n", self.steps, self.val_clips);
        out.push_str("No. | w/ Ref | Conf. | SR stream | Ref stream | Res | PSNR\n");
        for r in &self.rows {
            let f = &r.flags;
            out.push_str(&format!(
                "{:>3} | {:^6} | {:^5} | {:^9} | {:^10} | {:^3} | {:.2}\n",
                r.row,
                mark(f.use_ref),
                mark(f.use_conf_prop),
                mark(f.use_sr_dcn),
                mark(f.use_ref_stream),
                mark(f.use_residual_prop),
                r.psnr
            ));
        }
        out
    }
}

/// Train every requested row with the same seed, budget and data order and
/// score it on the whole val split.
pub fn run_ablation(set: &TrainSet, base: &Config, rows: &[usize], budget: usize) -> Result<AblationTable> {
    if rows.is_empty() {
        return Err(Error::Argument("no ablation rows requested".into()));
    }
    if set.val.is_empty() {
        return Err(Error::Config("ablation needs a non-empty val split".into()));
    }
    let flags = rows.iter().map(|&r| ablation_row(r)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(rows.len());
    for (&row, f) in rows.iter().zip(flags) {
        let mut config = base.clone();
        config.model = config.model.with_flags(f);
        config.train.steps = budget;
        config.train.stage = 1;
        config.train.val_every = 0;
        config.train.val_clips = 0;
        let trained = train_stage1(set, &config, &mut TrainHooks::default())?;
        let model = trained.checkpoint.build_model()?;
        let psnr = evaluate_psnr(&model, &set.val, &config.flow)?.expect("val split is non-empty");
        out.push(AblationRow {
            row,
            flags: f,
            psnr,
            params: model.params.num_scalars(),
        });
    }
    Ok(AblationTable {
        steps: budget,
        val_clips: set.val.len(),
        rows: out,
    })
}

/// Frames of `clip` as constants, for callers that need raw tensors.
pub fn frames_as_vars(clip: &Clip) -> Vec<Var> {
    clip.frames().iter().map(Frame::tensor).map(|t| Var::constant(t.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_triplet, synthetic::procedural_clip, tele_stream};

    fn toy_set(n_train: usize, n_val: usize) -> TrainSet {
        let make = |seed: u64| {
            let gt = procedural_clip(seed, 3, 64, 64, 1.0).unwrap();
            ClipData {
                id: format!("c{seed}"),
                tele: Some(tele_stream(&gt, 4).unwrap()),
                sample: synthesize_triplet(&gt, 4, 2).unwrap(),
            }
        };
        TrainSet {
            train: (0..n_train as u64).map(make).collect(),
            val: (100..100 + n_val as u64).map(make).collect(),
        }
    }

    fn toy_config(steps: usize) -> Config {
        let mut c = Config::default();
        c.model = ModelConfig::tiny(4);
        c.flow = FlowProvider::Zero;
        c.train.steps = steps;
        c.train.patch_crop = 8;
        c.train.clip_len = 2;
        c.train.lr = 1e-3;
        c.train.val_every = 2;
        c
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new(0);
        p.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_vec(&[2], vec![0.5, -3.0]));
        let mut st = AdamState::default();
        Adam::default().step(&mut p, &g, &mut st, 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
        assert_eq!(st.t, 1);
    }

    #[test]
    fn cosine_endpoints_and_clipping() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(9, 10, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(2, 5, 1.0, 0.0) - 0.5).abs() < 1e-12);
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::from_vec(&[2], vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
    }

    #[test]
    fn ref_crop_follows_the_magnified_centre() {
        // The LR crop at the frame centre maps onto the Ref frame centre.
        assert_eq!(ref_crop_origin(24, 24, 16, 64, 64, 2), (24, 24));
        // A crop just off-centre moves twice as far in the Ref frame.
        assert_eq!(ref_crop_origin(28, 20, 16, 64, 64, 2), (32, 16));
        // Peripheral crops are clamped into the frame.
        assert_eq!(ref_crop_origin(0, 48, 16, 64, 64, 2), (0, 48));
    }

    #[test]
    fn zero_steps_keep_the_initialization() {
        let set = toy_set(1, 0);
        let out = train_stage1(&set, &toy_config(0), &mut TrainHooks::default()).unwrap();
        let fresh = RefVsrModel::new(ModelConfig::tiny(4)).unwrap();
        assert_eq!(out.checkpoint.params, fresh.params);
        assert!(out.log.is_empty());
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let set = toy_set(2, 1);
        let cfg = toy_config(3);
        let mut buf = Vec::new();
        let a = train_stage1(&set, &cfg, &mut TrainHooks { log: Some(&mut buf), ..Default::default() }).unwrap();
        let b = train_stage1(&set, &cfg, &mut TrainHooks::default()).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log, b.log);
        let lines: Vec<LogRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, a.log);
        assert!(lines[0].psnr_val.is_none() && lines[1].psnr_val.is_some() && lines[2].psnr_val.is_some());
        assert_eq!(a.checkpoint.stage, 1);
        assert_eq!(a.checkpoint.optimizer.t, 3);
    }

    #[test]
    fn empty_split_and_stage_preconditions_are_config_errors() {
        let cfg = toy_config(1);
        let err = train_stage1(&TrainSet::default(), &cfg, &mut TrainHooks::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let set = toy_set(1, 0);
        let fresh = Checkpoint::initial(&RefVsrModel::new(ModelConfig::tiny(4)).unwrap());
        let err = train_stage2(&fresh, &set, &cfg, &mut TrainHooks::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let mut stage1 = fresh.clone();
        stage1.stage = 1;
        let mut no_tele = set.clone();
        no_tele.train[0].tele = None;
        let err = train_stage2(&stage1, &no_tele, &cfg, &mut TrainHooks::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let out = train_stage2(&stage1, &set, &cfg, &mut TrainHooks::default()).unwrap();
        assert_eq!(out.checkpoint.stage, 2);
    }

    #[test]
    fn nan_loss_names_the_batch() {
        let set = toy_set(1, 0);
        let mut cfg = toy_config(1);
        cfg.model.seed = 5;
        let mut model = RefVsrModel::new(cfg.model.clone()).unwrap();
        for (_, t) in model.params.iter_mut().filter(|(n, _)| n.starts_with("up.last")) {
            t.data_mut()[0] = f64::NAN;
        }
        let err = run(model, &set, &cfg, Stage::Supervised, &mut TrainHooks::default()).unwrap_err();
        match err {
            Error::Numeric(m) => assert!(m.contains("clip `c0`") && m.contains("step 1"), "{m}"),
            other => panic!("expected a numeric error, got {other}"),
        }
    }

    #[test]
    fn ablation_table_has_one_row_per_request() {
        let set = toy_set(1, 1);
        let t = run_ablation(&set, &toy_config(1), &[2], 1).unwrap();
        assert_eq!(t.rows.len(), 1);
        let text = t.to_text();
        assert!(text.contains("No. | w/ Ref | Conf. | SR stream | Ref stream | Res | PSNR"));
        assert!(matches!(run_ablation(&set, &toy_config(1), &[8], 1), Err(Error::Config(_))));
        assert!(run_ablation(&set, &toy_config(1), &[], 1).is_err());
    }
}
