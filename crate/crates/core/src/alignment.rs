//! Spatial alignment primitives: flow warping, cosine patch matching,
//! index-map warping and modulated deformable sampling.
//!
//! Every sampler uses bilinear interpolation with coordinates clamped to
//! the valid rectangle (border replication).

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{arg_err, Result};
use crate::linalg::gemm;
use crate::nn::{Conv2d, Ctx, ParamStore, LRELU_SLOPE};
use crate::tensor::Tensor;

/// Taps of the 3x3 deformable kernel.
pub const KERNEL_TAPS: usize = 9;
/// Default bound on offset magnitude, in feature pixels.
pub const OFFSET_BOUND: f64 = 10.0;
/// Norm floor for patch normalization; all-zero patches get this norm.
pub const NORM_EPS: f64 = 1e-8;

/// Bilinear sample position with precomputed corner indices and weights.
#[derive(Clone, Copy)]
struct Tap {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fx: f64,
    fy: f64,
    /// Whether the coordinate was inside the valid range before clamping
    /// (gradient w.r.t. the coordinate is zero otherwise).
    x_free: bool,
    y_free: bool,
}

impl Tap {
    fn new(h: usize, w: usize, y: f64, x: f64) -> Tap {
        let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
        let x_free = (0.0..=xmax).contains(&x);
        let y_free = (0.0..=ymax).contains(&y);
        let xc = x.clamp(0.0, xmax);
        let yc = y.clamp(0.0, ymax);
        let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        Tap {
            i00: y0 * w + x0,
            i01: y0 * w + x1,
            i10: y1 * w + x0,
            i11: y1 * w + x1,
            fx: xc - x0 as f64,
            fy: yc - y0 as f64,
            x_free,
            y_free,
        }
    }

    #[inline]
    fn sample(&self, p: &[f64]) -> f64 {
        let top = p[self.i00] * (1.0 - self.fx) + p[self.i01] * self.fx;
        let bot = p[self.i10] * (1.0 - self.fx) + p[self.i11] * self.fx;
        top * (1.0 - self.fy) + bot * self.fy
    }

    /// Partial derivatives of [`Tap::sample`] w.r.t. `(x, y)`.
    #[inline]
    fn grad_xy(&self, p: &[f64]) -> (f64, f64) {
        let gx = if self.x_free {
            (1.0 - self.fy) * (p[self.i01] - p[self.i00]) + self.fy * (p[self.i11] - p[self.i10])
        } else {
            0.0
        };
        let gy = if self.y_free {
            (1.0 - self.fx) * (p[self.i10] - p[self.i00]) + self.fx * (p[self.i11] - p[self.i01])
        } else {
            0.0
        };
        (gx, gy)
    }

    #[inline]
    fn scatter(&self, p: &mut [f64], g: f64) {
        p[self.i00] += g * (1.0 - self.fx) * (1.0 - self.fy);
        p[self.i01] += g * self.fx * (1.0 - self.fy);
        p[self.i10] += g * (1.0 - self.fx) * self.fy;
        p[self.i11] += g * self.fx * self.fy;
    }
}

/// Sample `feature` at `p + flow(p)` for every pixel `p`.
///
/// `flow` is `[2, h, w]` (dx, dy); both inputs are differentiable.
pub fn backward_warp(feature: &Var, flow: &Var) -> Result<Var> {
    let (c, h, w) = feature.dims3();
    if flow.shape() != [2, h, w] {
        arg_err!("flow {:?} does not match feature {:?}", flow.shape(), feature.shape());
    }
    let hw = h * w;
    let taps: Rc<Vec<Tap>> = Rc::new({
        let f = flow.value().data();
        (0..hw)
            .map(|i| Tap::new(h, w, (i / w) as f64 + f[hw + i], (i % w) as f64 + f[i]))
            .collect()
    });
    let x = feature.value().data();
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for (o, tap) in out[ci * hw..(ci + 1) * hw].iter_mut().zip(taps.iter()) {
            *o = tap.sample(plane);
        }
    }
    let feat = feature.clone();
    Ok(Var::from_op(Tensor::from_vec(&[c, h, w], out), &[feature, flow], move |g| {
        let gd = g.data();
        let x = feat.value().data();
        let mut gx = vec![0.0; c * hw];
        let mut gf = vec![0.0; 2 * hw];
        for ci in 0..c {
            let plane = &x[ci * hw..(ci + 1) * hw];
            let gplane = &mut gx[ci * hw..(ci + 1) * hw];
            for (i, tap) in taps.iter().enumerate() {
                let go = gd[ci * hw + i];
                tap.scatter(gplane, go);
                let (dx, dy) = tap.grad_xy(plane);
                gf[i] += go * dx;
                gf[hw + i] += go * dy;
            }
        }
        vec![
            Some(Tensor::from_vec(&[c, h, w], gx)),
            Some(Tensor::from_vec(&[2, h, w], gf)),
        ]
    }))
}

/// Result of matching: for each query patch, the flattened index of the
/// best key patch.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexMap {
    pub query_h: usize,
    pub query_w: usize,
    pub key_h: usize,
    pub key_w: usize,
    /// Key patch grid spacing in key-feature pixels.
    pub stride: usize,
    pub indices: Vec<usize>,
}

impl IndexMap {
    /// Every query maps to the key at the same grid position.
    pub fn identity(h: usize, w: usize) -> IndexMap {
        IndexMap {
            query_h: h,
            query_w: w,
            key_h: h,
            key_w: w,
            stride: 1,
            indices: (0..h * w).collect(),
        }
    }
}

/// Maximum cosine similarity per query patch, in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl ConfidenceMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.h, self.w], self.values.clone())
    }
}

/// Dense query-by-key cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

/// Patch grid of a `[c, h, w]` map: patches centred on every `stride`-th
/// pixel, zero-padded at the border ("same" padding).
struct Patches {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    /// Row-major `[grid_h * grid_w, dim]`, each row divided by its norm.
    rows: Vec<f64>,
    norms: Vec<f64>,
}

fn grid_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

fn extract_patches(x: &Tensor, patch: usize, stride: usize) -> Patches {
    let (c, h, w) = x.dims3();
    let (gh, gw) = (grid_len(h, stride), grid_len(w, stride));
    let dim = c * patch * patch;
    let pad = (patch / 2) as isize;
    let data = x.data();
    let mut rows = vec![0.0; gh * gw * dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut rows[(gy * gw + gx) * dim..][..dim];
            let (cy, cx) = ((gy * stride) as isize, (gx * stride) as isize);
            for ci in 0..c {
                for ky in 0..patch {
                    let y = cy + ky as isize - pad;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..patch {
                        let xx = cx + kx as isize - pad;
                        if xx >= 0 && xx < w as isize {
                            row[(ci * patch + ky) * patch + kx] = data[(ci * h + y as usize) * w + xx as usize];
                        }
                    }
                }
            }
        }
    }
    let mut norms = Vec::with_capacity(gh * gw);
    for row in rows.chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n = if n < NORM_EPS { NORM_EPS } else { n };
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Patches {
        grid_h: gh,
        grid_w: gw,
        dim,
        rows,
        norms,
    }
}

/// Adjoint of [`extract_patches`] (before normalization): accumulate
/// per-patch gradients back onto the map.
fn fold_patch_grad(grad_rows: &[f64], c: usize, h: usize, w: usize, patch: usize, stride: usize) -> Tensor {
    let (gh, gw) = (grid_len(h, stride), grid_len(w, stride));
    let dim = c * patch * patch;
    let pad = (patch / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &grad_rows[(gy * gw + gx) * dim..][..dim];
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            let (cy, cx) = ((gy * stride) as isize, (gx * stride) as isize);
            for ci in 0..c {
                for ky in 0..patch {
                    let y = cy + ky as isize - pad;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..patch {
                        let xx = cx + kx as isize - pad;
                        if xx >= 0 && xx < w as isize {
                            out[(ci * h + y as usize) * w + xx as usize] += row[(ci * patch + ky) * patch + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn check_match_args(lr: &Tensor, reference: &Tensor, patch: usize, stride: usize) -> Result<()> {
    let (lc, lh, lw) = lr.dims3();
    let (rc, rh, rw) = reference.dims3();
    if lc != rc {
        arg_err!("patch match channel mismatch: {lc} vs {rc}");
    }
    if patch == 0 || patch.is_multiple_of(2) {
        arg_err!("patch size must be odd, got {patch}");
    }
    if stride == 0 {
        arg_err!("stride must be positive");
    }
    if patch > lh.min(lw) || patch > rh.min(rw) {
        arg_err!("patch {patch} larger than a feature map ({lh}x{lw}, {rh}x{rw})");
    }
    Ok(())
}

/// Queries per similarity block; bounds the scratch matrix.
const MATCH_BLOCK: usize = 256;

/// Exhaustive cosine patch matching of `lr` query patches against
/// `reference` key patches.
///
/// Queries use stride 1; keys are taken every `stride` pixels. Ties go to
/// the lowest key index and all-zero key patches only win when every key
/// is all-zero.
pub fn patch_match(lr: &Tensor, reference: &Tensor, patch: usize, stride: usize) -> Result<(IndexMap, ConfidenceMap)> {
    check_match_args(lr, reference, patch, stride)?;
    let q = extract_patches(lr, patch, 1);
    let k = extract_patches(reference, patch, stride);
    let nq = q.grid_h * q.grid_w;
    let nk = k.grid_h * k.grid_w;
    let key_valid: Vec<bool> = k.norms.iter().map(|&n| n > NORM_EPS).collect();
    let any_valid = key_valid.iter().any(|&v| v);

    let mut indices = vec![0usize; nq];
    let mut conf = vec![0.0; nq];
    let mut sim = vec![0.0; MATCH_BLOCK * nk];
    for start in (0..nq).step_by(MATCH_BLOCK) {
        let b = MATCH_BLOCK.min(nq - start);
        gemm(b, q.dim, nk, &q.rows[start * q.dim..], false, &k.rows, true, 0.0, &mut sim);
        for r in 0..b {
            let row = &sim[r * nk..(r + 1) * nk];
            let mut best = usize::MAX;
            let mut best_val = f64::NEG_INFINITY;
            for (j, &s) in row.iter().enumerate() {
                if any_valid && !key_valid[j] {
                    continue;
                }
                if s > best_val {
                    best_val = s;
                    best = j;
                }
            }
            indices[start + r] = best;
            conf[start + r] = best_val.clamp(-1.0, 1.0);
        }
    }
    Ok((
        IndexMap {
            query_h: q.grid_h,
            query_w: q.grid_w,
            key_h: k.grid_h,
            key_w: k.grid_w,
            stride,
            indices,
        },
        ConfidenceMap {
            h: q.grid_h,
            w: q.grid_w,
            values: conf,
        },
    ))
}

/// Full similarity matrix for the same patch geometry as [`patch_match`].
pub fn similarity_matrix(lr: &Tensor, reference: &Tensor, patch: usize, stride: usize) -> Result<SimilarityMatrix> {
    check_match_args(lr, reference, patch, stride)?;
    let q = extract_patches(lr, patch, 1);
    let k = extract_patches(reference, patch, stride);
    let (rows, cols) = (q.grid_h * q.grid_w, k.grid_h * k.grid_w);
    let mut values = vec![0.0; rows * cols];
    gemm(rows, q.dim, cols, &q.rows, false, &k.rows, true, 0.0, &mut values);
    Ok(SimilarityMatrix { rows, cols, values })
}

/// Differentiable confidence of a fixed matching: the cosine similarity
/// between each query patch of `lr` and its matched key patch of
/// `reference`, as a `[1, query_h, query_w]` map.
pub fn match_confidence(lr: &Var, reference: &Var, index: &IndexMap, patch: usize) -> Var {
    let stride = index.stride;
    let q = extract_patches(lr.value(), patch, 1);
    let k = extract_patches(reference.value(), patch, stride);
    assert_eq!((q.grid_h, q.grid_w), (index.query_h, index.query_w), "index map query grid");
    assert_eq!((k.grid_h, k.grid_w), (index.key_h, index.key_w), "index map key grid");
    let dim = q.dim;
    let values: Vec<f64> = index
        .indices
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let (a, b) = (&q.rows[i * dim..][..dim], &k.rows[j * dim..][..dim]);
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
        })
        .collect();
    let out = Tensor::from_vec(&[1, index.query_h, index.query_w], values.clone());
    let (lshape, rshape) = (lr.dims3(), reference.dims3());
    let indices = index.indices.clone();
    Var::from_op(out, &[lr, reference], move |g| {
        let gd = g.data();
        let mut gq = vec![0.0; q.rows.len()];
        let mut gk = vec![0.0; k.rows.len()];
        for (i, &j) in indices.iter().enumerate() {
            let (qn, kn) = (q.norms[i], k.norms[j]);
            if qn <= NORM_EPS || kn <= NORM_EPS {
                continue;
            }
            let c = values[i];
            let (a, b) = (&q.rows[i * dim..][..dim], &k.rows[j * dim..][..dim]);
            for d in 0..dim {
                gq[i * dim + d] += gd[i] * (b[d] - c * a[d]) / qn;
                gk[j * dim + d] += gd[i] * (a[d] - c * b[d]) / kn;
            }
        }
        vec![
            Some(fold_patch_grad(&gq, lshape.0, lshape.1, lshape.2, patch, 1)),
            Some(fold_patch_grad(&gk, rshape.0, rshape.1, rshape.2, patch, stride)),
        ]
    })
}

/// Pixel of `ref_feat` at the centre of key patch `j`.
///
/// The key grid may live at a coarser resolution than `ref_feat` (when
/// matching against a downscaled reference); positions are mapped through
/// the size ratio.
fn key_center(index: &IndexMap, j: usize, rh: usize, rw: usize) -> usize {
    let (ky, kx) = (j / index.key_w, j % index.key_w);
    let sy = rh as f64 / (index.key_h * index.stride) as f64;
    let sx = rw as f64 / (index.key_w * index.stride) as f64;
    let y = if sy == 1.0 { ky * index.stride } else { (((ky * index.stride) as f64 + 0.5) * sy).floor() as usize };
    let x = if sx == 1.0 { kx * index.stride } else { (((kx * index.stride) as f64 + 0.5) * sx).floor() as usize };
    y.min(rh - 1) * rw + x.min(rw - 1)
}

/// Rearrange `ref_feat` so query position `i` holds the feature at the
/// centre of its matched key patch.
pub fn index_warp(ref_feat: &Var, index: &IndexMap) -> Var {
    let (c, rh, rw) = ref_feat.dims3();
    let nk = index.key_h * index.key_w;
    let src: Rc<Vec<usize>> = Rc::new(
        index
            .indices
            .iter()
            .map(|&j| {
                assert!(j < nk, "index {j} outside key grid of {nk}");
                key_center(index, j, rh, rw)
            })
            .collect(),
    );
    let (qh, qw) = (index.query_h, index.query_w);
    let nq = qh * qw;
    let x = ref_feat.value().data();
    let mut out = vec![0.0; c * nq];
    for ci in 0..c {
        for (i, &s) in src.iter().enumerate() {
            out[ci * nq + i] = x[ci * rh * rw + s];
        }
    }
    Var::from_op(Tensor::from_vec(&[c, qh, qw], out), &[ref_feat], move |g| {
        let gd = g.data();
        let mut gx = vec![0.0; c * rh * rw];
        for ci in 0..c {
            for (i, &s) in src.iter().enumerate() {
                gx[ci * rh * rw + s] += gd[ci * nq + i];
            }
        }
        vec![Some(Tensor::from_vec(&[c, rh, rw], gx))]
    })
}

/// Two-layer convolutional head predicting offset corrections and mask
/// logits from a pair of guide features.
#[derive(Clone, Debug)]
pub struct OffsetHead {
    pub conv1: Conv2d,
    /// Outputs `3 * KERNEL_TAPS` channels: `(dx, dy)` per tap, then one
    /// mask logit per tap. Zero-initialized.
    pub conv2: Conv2d,
}

impl OffsetHead {
    pub fn new(store: &mut ParamStore, name: &str, guide_channels: usize, hidden: usize) -> Self {
        OffsetHead {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), guide_channels, hidden, 3, 1.0),
            conv2: Conv2d::zeros(store, &format!("{name}.conv2"), hidden, 3 * KERNEL_TAPS, 3),
        }
    }

    /// Raw head output, `[3K, h, w]`.
    pub fn forward(&self, ctx: &Ctx, a: &Var, b: &Var) -> Var {
        let x = Var::concat(&[a, b]);
        let h = self.conv1.forward(ctx, &x).leaky_relu(LRELU_SLOPE);
        self.conv2.forward(ctx, &h)
    }
}

/// Offsets `[2K, h, w]` (`dx, dy` per tap) and mask `[K, h, w]`:
/// offsets are the head's corrections plus `flow` on every tap, clamped
/// to `bound`; the mask is the sigmoid of the head's mask logits.
pub fn compute_offsets_and_mask(
    ctx: &Ctx,
    guide_a: &Var,
    guide_b: &Var,
    flow: &Tensor,
    head: &OffsetHead,
    bound: f64,
) -> Result<(Var, Var)> {
    let (_, h, w) = guide_a.dims3();
    let (_, bh, bw) = guide_b.dims3();
    if (bh, bw) != (h, w) || flow.shape() != [2, h, w] {
        arg_err!(
            "guides {:?}/{:?} and flow {:?} must share spatial dims",
            guide_a.shape(),
            guide_b.shape(),
            flow.shape()
        );
    }
    let raw = head.forward(ctx, guide_a, guide_b);
    Ok(offsets_and_mask_from_raw(&raw, flow, bound))
}

pub(crate) fn offsets_and_mask_from_raw(raw: &Var, flow: &Tensor, bound: f64) -> (Var, Var) {
    let (_, h, w) = raw.dims3();
    let hw = h * w;
    let mut tiled = Tensor::zeros(&[2 * KERNEL_TAPS, h, w]);
    for k in 0..KERNEL_TAPS {
        tiled.data_mut()[2 * k * hw..(2 * k + 1) * hw].copy_from_slice(flow.channel(0));
        tiled.data_mut()[(2 * k + 1) * hw..(2 * k + 2) * hw].copy_from_slice(flow.channel(1));
    }
    let offsets = raw
        .narrow_channels(0, 2 * KERNEL_TAPS)
        .add_const(&tiled)
        .clamp(-bound, bound);
    let mask = raw.narrow_channels(2 * KERNEL_TAPS, KERNEL_TAPS).sigmoid();
    (offsets, mask)
}

/// Modulated deformable 3x3 convolution (one deformable group).
///
/// Tap `k = ky * 3 + kx` of output pixel `p` reads `feature` bilinearly at
/// `p + (kx - 1, ky - 1) + offset_k(p)`, scaled by `mask_k(p)`; `weights`
/// is `[c_out, c_in, 3, 3]`. All four inputs are differentiable.
pub fn deformable_sample(feature: &Var, offsets: &Var, mask: &Var, weights: &Var, bias: Option<&Var>) -> Result<Var> {
    let (c, h, w) = feature.dims3();
    if offsets.shape() != [2 * KERNEL_TAPS, h, w] || mask.shape() != [KERNEL_TAPS, h, w] {
        arg_err!(
            "offsets {:?} / mask {:?} do not match feature {:?}",
            offsets.shape(),
            mask.shape(),
            feature.shape()
        );
    }
    let ws = weights.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != 3 || ws[3] != 3 {
        arg_err!("deformable weights {ws:?} incompatible with {c} input channels");
    }
    let cout = ws[0];
    let hw = h * w;
    let kk = c * KERNEL_TAPS;

    let taps: Rc<Vec<Tap>> = Rc::new({
        let o = offsets.value().data();
        let mut taps = Vec::with_capacity(KERNEL_TAPS * hw);
        for k in 0..KERNEL_TAPS {
            let (ky, kx) = ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0);
            for i in 0..hw {
                let y = (i / w) as f64 + ky + o[(2 * k + 1) * hw + i];
                let x = (i % w) as f64 + kx + o[2 * k * hw + i];
                taps.push(Tap::new(h, w, y, x));
            }
        }
        taps
    });
    let build_cols = move |x: &[f64], m: &[f64], taps: &[Tap]| {
        let mut cols = vec![0.0; kk * hw];
        for ci in 0..c {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for k in 0..KERNEL_TAPS {
                let row = &mut cols[(ci * KERNEL_TAPS + k) * hw..][..hw];
                let tk = &taps[k * hw..(k + 1) * hw];
                let mk = &m[k * hw..(k + 1) * hw];
                for i in 0..hw {
                    row[i] = mk[i] * tk[i].sample(plane);
                }
            }
        }
        cols
    };

    let cols = build_cols(feature.value().data(), mask.value().data(), &taps);
    let mut out = vec![0.0; cout * hw];
    if let Some(b) = bias {
        for (co, &bv) in b.value().data().iter().enumerate() {
            out[co * hw..(co + 1) * hw].fill(bv);
        }
    }
    gemm(cout, kk, hw, weights.value().data(), false, &cols, false, 1.0, &mut out);
    drop(cols);

    let (fv, mv, wv) = (feature.clone(), mask.clone(), weights.clone());
    let has_bias = bias.is_some();
    let mut parents = vec![feature, offsets, mask, weights];
    if let Some(b) = bias {
        parents.push(b);
    }
    Ok(Var::from_op(Tensor::from_vec(&[cout, h, w], out), &parents, move |g| {
        let gd = g.data();
        let x = fv.value().data();
        let m = mv.value().data();
        let gw = if wv.requires_grad() {
            let cols = build_cols(x, m, &taps);
            let mut gw = vec![0.0; cout * kk];
            gemm(cout, hw, kk, gd, false, &cols, true, 0.0, &mut gw);
            Some(Tensor::from_vec(&[cout, c, 3, 3], gw))
        } else {
            None
        };
        let mut gcols = vec![0.0; kk * hw];
        gemm(kk, cout, hw, wv.value().data(), true, gd, false, 0.0, &mut gcols);
        let mut gx = vec![0.0; c * hw];
        let mut go = vec![0.0; 2 * KERNEL_TAPS * hw];
        let mut gm = vec![0.0; KERNEL_TAPS * hw];
        for ci in 0..c {
            let plane = &x[ci * hw..(ci + 1) * hw];
            let gplane = &mut gx[ci * hw..(ci + 1) * hw];
            for k in 0..KERNEL_TAPS {
                let grow = &gcols[(ci * KERNEL_TAPS + k) * hw..][..hw];
                for i in 0..hw {
                    let gc = grow[i];
                    if gc == 0.0 {
                        continue;
                    }
                    let tap = &taps[k * hw + i];
                    let mk = m[k * hw + i];
                    tap.scatter(gplane, gc * mk);
                    gm[k * hw + i] += gc * tap.sample(plane);
                    let (dx, dy) = tap.grad_xy(plane);
                    go[2 * k * hw + i] += gc * mk * dx;
                    go[(2 * k + 1) * hw + i] += gc * mk * dy;
                }
            }
        }
        let mut grads = vec![
            Some(Tensor::from_vec(&[c, h, w], gx)),
            Some(Tensor::from_vec(&[2 * KERNEL_TAPS, h, w], go)),
            Some(Tensor::from_vec(&[KERNEL_TAPS, h, w], gm)),
            gw,
        ];
        if has_bias {
            let gb = (0..cout).map(|co| gd[co * hw..(co + 1) * hw].iter().sum()).collect();
            grads.push(Some(Tensor::from_vec(&[cout], gb)));
        }
        grads
    }))
}

/// Learned flow-guided deformable alignment: an [`OffsetHead`] plus the
/// deformable kernel it steers.
///
/// The kernel samples the unwarped previous state; the flow is already
/// part of every tap offset, so sampling the flow-warped state instead
/// would apply the motion twice.
#[derive(Clone, Debug)]
pub struct DeformAlign {
    pub head: OffsetHead,
    pub weight: String,
    pub bias: String,
    pub bound: f64,
}

impl DeformAlign {
    /// `guide_channels` is the combined width of the two guides, `c` the
    /// width of the aligned feature. The kernel starts as a (noisy)
    /// identity on the centre tap, doubled to cancel the initial 0.5 mask,
    /// so a fresh module behaves like plain flow warping.
    pub fn new(store: &mut ParamStore, name: &str, guide_channels: usize, c: usize, bound: f64) -> Self {
        let head = OffsetHead::new(store, &format!("{name}.offset"), guide_channels, c);
        let weight = format!("{name}.dcn.weight");
        let bias = format!("{name}.dcn.bias");
        store.insert_uniform(&weight, &[c, c, 3, 3], c * KERNEL_TAPS, 0.1);
        let w = store.get_mut(&weight).expect("just inserted");
        for o in 0..c {
            let i = ((o * c + o) * 3 + 1) * 3 + 1;
            w.data_mut()[i] += 2.0;
        }
        store.insert(&bias, Tensor::zeros(&[c]));
        DeformAlign { head, weight, bias, bound }
    }

    /// Align `prev` to the current frame. `warped` is `prev` already
    /// warped by `flow`; together with `guide` it steers the offsets.
    pub fn forward(&self, ctx: &Ctx, prev: &Var, guide: &Var, warped: &Var, flow: &Tensor) -> Result<Var> {
        let (offsets, mask) = compute_offsets_and_mask(ctx, guide, warped, flow, &self.head, self.bound)?;
        let (w, b) = (ctx.param(&self.weight), ctx.param(&self.bias));
        deformable_sample(prev, &offsets, &mask, &w, Some(&b))
    }
}
