//! Training objectives.
//!
//! Everything here takes [`Var`]s so the losses stay differentiable with
//! respect to the prediction. Frames enter as constants via
//! [`frame_var`].

use serde::{Deserialize, Serialize};

use crate::alignment::{match_confidence, patch_match};
use crate::autograd::Var;
use crate::data::Frame;
use crate::error::{arg_err, Result};
use crate::nn::{Conv2d, Ctx, ParamStore, LRELU_SLOPE};
use crate::resample::{gaussian_blur3_var, resample_var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Contextual term of the reconstruction loss.
    pub alpha: f64,
    /// Fidelity term of the first-stage loss.
    pub beta: f64,
    /// Fidelity term of the second-stage loss.
    pub gamma: f64,
    pub charbonnier_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.01,
            beta: 0.05,
            gamma: 0.1,
            charbonnier_eps: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.charbonnier_eps];
        if !all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(crate::Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

pub fn frame_var(frame: &Frame) -> Var {
    Var::constant(frame.tensor().clone())
}

/// Largest side of the embedding grid.
pub const MAX_EMBED_GRID: usize = 32;
const PERCEPTUAL_SEED: u64 = 0x00c0_ffee;

/// Fixed random three-layer convolutional feature extractor used as the
/// perceptual space of the contextual and fidelity losses. Inputs larger
/// than [`MAX_EMBED_GRID`] are average-pooled between layers and at the end.
#[derive(Clone, Debug)]
pub struct PerceptualEmbedder {
    store: ParamStore,
    convs: [Conv2d; 3],
}

impl Default for PerceptualEmbedder {
    fn default() -> Self {
        PerceptualEmbedder::new(PERCEPTUAL_SEED)
    }
}

impl PerceptualEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new(seed);
        let convs = [
            Conv2d::new(&mut store, "p1", 3, 8, 3, 1.0),
            Conv2d::new(&mut store, "p2", 8, 16, 3, 1.0),
            Conv2d::new(&mut store, "p3", 16, 16, 3, 1.0),
        ];
        PerceptualEmbedder { store, convs }
    }

    pub fn embed(&self, x: &Var) -> Var {
        let ctx = Ctx::inference(&self.store);
        let too_big = |v: &Var| {
            let (_, h, w) = v.dims3();
            h.max(w) > MAX_EMBED_GRID
        };
        let mut h = self.convs[0].forward(&ctx, x).leaky_relu(LRELU_SLOPE);
        if too_big(&h) {
            h = h.avg_pool(2);
        }
        h = self.convs[1].forward(&ctx, &h).leaky_relu(LRELU_SLOPE);
        if too_big(&h) {
            h = h.avg_pool(2);
        }
        h = self.convs[2].forward(&ctx, &h);
        let (_, gh, gw) = h.dims3();
        let mut k = 1;
        while gh.max(gw) / k > MAX_EMBED_GRID {
            k *= 2;
        }
        if k > 1 {
            h = h.avg_pool(k);
        }
        h
    }
}

fn check_same(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        arg_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

/// Mean of `sqrt((pred - target)^2 + eps^2)`.
pub fn charbonnier(pred: &Var, target: &Var, eps: f64) -> Result<Var> {
    check_same(pred, target, "charbonnier")?;
    Ok(pred.charbonnier_mean(target, eps))
}

/// The blurred frame used by the pixel terms.
pub fn gaussian_blur3(frame: &Frame) -> Frame {
    Frame::from_clamped(gaussian_blur3_var(&frame_var(frame)).value().clone()).expect("blur keeps frame size")
}

/// Per-position contextual distance between two embeddings:
/// `δ_i = min_j (1 - cos(x_i, y_j))`, as a `[1, h, w]` map over the
/// positions of `ex`. Differentiable through the minimizing pair.
pub fn contextual_from_embeddings(ex: &Var, ey: &Var) -> Result<Var> {
    if ex.dims3().0 != ey.dims3().0 {
        arg_err!("embedding widths differ: {:?} vs {:?}", ex.shape(), ey.shape());
    }
    let (index, _) = patch_match(ex.value(), ey.value(), 1, 1)?;
    let sim = match_confidence(ex, ey, &index, 1);
    Ok(sim.scale(-1.0).add_const(&Tensor::full(sim.shape(), 1.0)))
}

/// Embed both frames and return `(δ map, mean δ)`.
pub fn contextual_distance(x: &Var, y: &Var, embedder: &PerceptualEmbedder) -> Result<(Var, Var)> {
    check_same(x, y, "contextual distance")?;
    let delta = contextual_from_embeddings(&embedder.embed(x), &embedder.embed(y))?;
    let mean = delta.mean();
    Ok((delta, mean))
}

/// `mean|blur(sr) - blur(gt)| + alpha * contextual(sr, gt)`.
pub fn reconstruction_loss(sr: &Var, gt: &Var, weights: &LossWeights, embedder: &PerceptualEmbedder) -> Result<Var> {
    check_same(sr, gt, "reconstruction loss")?;
    let pixel = gaussian_blur3_var(sr).l1_mean(&gaussian_blur3_var(gt));
    if weights.alpha == 0.0 {
        return Ok(pixel);
    }
    let (_, ctx) = contextual_distance(sr, gt, embedder)?;
    Ok(Var::weighted_sum(&[(1.0, &pixel), (weights.alpha, &ctx)]))
}

/// `Σ δ_i c_i / Σ c_i`, or zero with the flag set when `Σ c_i` is zero.
pub fn confidence_weighted_mean(delta: &Var, weights: &Var) -> Result<(Var, bool)> {
    check_same(delta, weights, "weighted mean")?;
    let total = weights.sum();
    if total.item() <= 0.0 {
        return Ok((Var::constant(Tensor::scalar(0.0)), true));
    }
    Ok((delta.mul(weights).sum().div_scalar(&total), false))
}

#[derive(Clone, Debug)]
pub struct Fidelity {
    pub loss: Var,
    /// The confidence sum was zero, so the loss was defined as 0.
    pub degenerate: bool,
}

/// Patch size used for the fidelity confidence.
const FIDELITY_PATCH: usize = 3;

/// Contextual distance of `sr` to `reference` weighted by how confidently
/// each position of `sr` matches the reference, with the cosine
/// confidence shifted to `[0, 1]`.
pub fn fidelity_loss(sr: &Var, reference: &Var, embedder: &PerceptualEmbedder) -> Result<Fidelity> {
    check_same(sr, reference, "fidelity loss")?;
    let (es, er) = (embedder.embed(sr), embedder.embed(reference));
    let delta = contextual_from_embeddings(&es, &er)?;
    let (_, gh, gw) = es.dims3();
    let patch = if gh.min(gw) >= FIDELITY_PATCH { FIDELITY_PATCH } else { 1 };
    let (index, _) = patch_match(es.value(), er.value(), patch, 1)?;
    let conf = match_confidence(&es, &er, &index, patch);
    let c = conf.add_const(&Tensor::full(conf.shape(), 1.0)).scale(0.5);
    let (loss, degenerate) = confidence_weighted_mean(&delta, &c)?;
    Ok(Fidelity { loss, degenerate })
}

/// `reconstruction(sr, gt) + beta * fidelity(sr, ref_wide)`.
pub fn stage1_loss(sr: &Var, gt: &Var, ref_wide: &Var, weights: &LossWeights, embedder: &PerceptualEmbedder) -> Result<Var> {
    let rec = reconstruction_loss(sr, gt, weights, embedder)?;
    if weights.beta == 0.0 {
        check_same(sr, ref_wide, "stage-1 loss")?;
        return Ok(rec);
    }
    let fid = fidelity_loss(sr, ref_wide, embedder)?;
    Ok(Var::weighted_sum(&[(1.0, &rec), (weights.beta, &fid.loss)]))
}

/// `mean|blur(down(sr)) - blur(lr_uw)| + gamma * fidelity(centre(sr), tele)`.
///
/// `sr` is the super-resolved native frame; the tele frame has the native
/// size and shows the central `1/s` of the field of view, which is the
/// centre crop of `sr` with the native size.
pub fn stage2_loss(sr: &Var, lr_uw: &Var, tele: &Var, weights: &LossWeights, embedder: &PerceptualEmbedder) -> Result<Var> {
    let (sc, sh, sw) = sr.dims3();
    let (lc, lh, lw) = lr_uw.dims3();
    if sc != lc || sh % lh != 0 || sw % lw != 0 || sh / lh != sw / lw || sh < lh {
        arg_err!("sr {:?} is not an integer upscale of {:?}", sr.shape(), lr_uw.shape());
    }
    if tele.shape() != lr_uw.shape() {
        arg_err!("tele {:?} must match the native frame {:?}", tele.shape(), lr_uw.shape());
    }
    let down = resample_var(sr, lh, lw);
    let consistency = gaussian_blur3_var(&down).l1_mean(&gaussian_blur3_var(lr_uw));
    if weights.gamma == 0.0 {
        return Ok(consistency);
    }
    let centre = sr.crop((sh - lh) / 2, (sw - lw) / 2, lh, lw);
    let fid = fidelity_loss(&centre, tele, embedder)?;
    Ok(Var::weighted_sum(&[(1.0, &consistency), (weights.gamma, &fid.loss)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    fn cos_dist(a: &Tensor, i: usize, b: &Tensor, j: usize) -> f64 {
        let (c, ah, aw) = a.dims3();
        let (_, bh, bw) = b.dims3();
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for ch in 0..c {
            let x = a.data()[ch * ah * aw + i];
            let y = b.data()[ch * bh * bw + j];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        1.0 - dot / (na.sqrt() * nb.sqrt())
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma, w.charbonnier_eps), (0.01, 0.05, 0.1, 1e-3));
    }

    #[test]
    fn charbonnier_floor_and_limit() {
        let a = Var::constant(random(&[3, 8, 8], 1));
        assert!((charbonnier(&a, &a, 1e-3).unwrap().item() - 1e-3).abs() < 1e-15);
        let b = Var::constant(a.value().map(|v| v + 0.3));
        assert!((charbonnier(&a, &b, 1e-9).unwrap().item() - 0.3).abs() < 1e-9);
        let c = Var::constant(random(&[3, 8, 9], 1));
        assert!(charbonnier(&a, &c, 1e-3).is_err());
    }

    #[test]
    fn contextual_matches_double_loop() {
        let ex = random(&[5, 6, 7], 2).map(|v| v - 0.5);
        let ey = random(&[5, 4, 9], 3).map(|v| v - 0.5);
        let d = contextual_from_embeddings(&Var::constant(ex.clone()), &Var::constant(ey.clone())).unwrap();
        for i in 0..42 {
            let want = (0..36).map(|j| cos_dist(&ex, i, &ey, j)).fold(f64::INFINITY, f64::min);
            assert!((d.value().data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn contextual_ignores_positions() {
        let ex = random(&[4, 5, 5], 4);
        // Reverse the positions of every channel.
        let ey = Tensor::from_fn(&[4, 5, 5], |i| ex.at3(i[0], 4 - i[1], 4 - i[2]));
        let d = contextual_from_embeddings(&Var::constant(ex), &Var::constant(ey)).unwrap();
        assert!(d.value().max_abs() < 1e-12);
    }

    #[test]
    fn embedder_grid_is_bounded() {
        let e = PerceptualEmbedder::default();
        for (h, w) in [(8, 8), (64, 64), (256, 128), (40, 12)] {
            let (_, gh, gw) = e.embed(&Var::constant(random(&[3, h, w], 5))).dims3();
            assert!(gh <= MAX_EMBED_GRID && gw <= MAX_EMBED_GRID && gh > 0 && gw > 0, "{h}x{w}");
        }
    }

    #[test]
    fn self_losses_vanish() {
        let e = PerceptualEmbedder::default();
        let x = Var::constant(random(&[3, 16, 16], 6));
        let w = LossWeights::default();
        assert!(reconstruction_loss(&x, &x, &w, &e).unwrap().item().abs() < 1e-12);
        let f = fidelity_loss(&x, &x, &e).unwrap();
        assert!(f.loss.item().abs() < 1e-12 && !f.degenerate);
        assert!(stage1_loss(&x, &x, &x, &w, &e).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn weighted_mean_is_scale_free_and_flags_zero_weight() {
        let d = Var::constant(random(&[1, 4, 4], 7));
        let c = Var::constant(random(&[1, 4, 4], 8));
        let (a, _) = confidence_weighted_mean(&d, &c).unwrap();
        let (b, _) = confidence_weighted_mean(&d, &c.scale(3.5)).unwrap();
        assert!((a.item() - b.item()).abs() < 1e-12);
        let (u, _) = confidence_weighted_mean(&d, &Var::constant(Tensor::full(&[1, 4, 4], 0.2))).unwrap();
        assert!((u.item() - d.value().mean()).abs() < 1e-12);
        let (z, flag) = confidence_weighted_mean(&d, &Var::constant(Tensor::zeros(&[1, 4, 4]))).unwrap();
        assert!(flag && z.item() == 0.0);
    }

    #[test]
    fn stage2_consistency_of_bicubic_upsample() {
        let e = PerceptualEmbedder::default();
        let lr = crate::data::synthetic::procedural_clip(3, 1, 16, 16, 0.0).unwrap().frames()[0].clone();
        let sr = crate::data::resample_bicubic(&lr, 64, 64).unwrap();
        let w = LossWeights { gamma: 0.0, ..Default::default() };
        let l = stage2_loss(&frame_var(&sr), &frame_var(&lr), &frame_var(&lr), &w, &e).unwrap();
        assert!(l.item() < 0.02, "{}", l.item());
    }

    #[test]
    fn losses_are_differentiable_in_sr() {
        let e = PerceptualEmbedder::default();
        let gt = Var::constant(random(&[3, 8, 8], 9));
        let r = Var::constant(random(&[3, 8, 8], 10));
        let w = LossWeights { alpha: 0.5, beta: 0.5, ..Default::default() };
        let err = gradcheck::check(&[random(&[3, 8, 8], 11)], 1e-6, |v| stage1_loss(&v[0], &gt, &r, &w, &e).unwrap());
        assert!(err < 1e-2, "{err}");
        let lr = Var::constant(random(&[3, 4, 4], 12));
        let w2 = LossWeights { gamma: 0.5, ..Default::default() };
        let tele = Var::constant(random(&[3, 4, 4], 13));
        let err = gradcheck::check(&[random(&[3, 16, 16], 14)], 1e-6, |v| stage2_loss(&v[0], &lr, &tele, &w2, &e).unwrap());
        assert!(err < 1e-2, "{err}");
    }
}
