//! Inter-frame optical flow between consecutive LR frames.
//!
//! Flow vectors `(dx, dy)` map a pixel of the current frame to its
//! position in the previous frame, so that sampling the previous frame at
//! `p + flow(p)` reproduces the current frame.

use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{arg_err, Result};
use crate::resample::resample_tensor;
use crate::tensor::Tensor;

/// Per-pixel displacement, stored as a `[2, h, w]` tensor (channel 0 is
/// `dx`, channel 1 is `dy`).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    /// Wrap a `[2, h, w]` tensor, replacing non-finite values by zero and
    /// clamping magnitudes to the frame extent.
    pub fn new(t: Tensor) -> Result<FlowField> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 2 {
            arg_err!("flow must be [2, h, w], got {s:?}");
        }
        let (h, w) = (s[1] as f64, s[2] as f64);
        let hw = s[1] * s[2];
        let mut t = t;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let bound = if i < hw { w } else { h };
            *v = if v.is_finite() { v.clamp(-bound, bound) } else { 0.0 };
        }
        Ok(FlowField(t))
    }

    pub fn zeros(h: usize, w: usize) -> FlowField {
        FlowField(Tensor::zeros(&[2, h, w]))
    }

    pub fn constant(h: usize, w: usize, dx: f64, dy: f64) -> FlowField {
        let mut t = Tensor::zeros(&[2, h, w]);
        t.data_mut()[..h * w].fill(dx);
        t.data_mut()[h * w..].fill(dy);
        FlowField::new(t).expect("well-formed")
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dims3();
        (h, w)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dx(&self) -> &[f64] {
        self.0.channel(0)
    }

    pub fn dy(&self) -> &[f64] {
        self.0.channel(1)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.dx().len() as f64;
        self.dx().iter().zip(self.dy()).map(|(x, y)| x.hypot(*y)).sum::<f64>() / n
    }
}

/// Resample a flow field by `factor` and scale its vectors accordingly.
pub fn scale_flow(flow: &FlowField, factor: f64) -> Result<FlowField> {
    if !(factor > 0.0 && factor.is_finite()) {
        arg_err!("flow scale factor must be positive, got {factor}");
    }
    let (h, w) = flow.dims();
    let oh = ((h as f64 * factor).round() as usize).max(1);
    let ow = ((w as f64 * factor).round() as usize).max(1);
    let resized = resample_tensor(flow.tensor(), oh, ow);
    FlowField::new(resized.scale(factor))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "kebab-case")]
pub enum FlowProvider {
    /// Coarse-to-fine dense Lucas-Kanade.
    Pyramid {
        #[serde(default = "default_levels")]
        levels: usize,
        #[serde(default = "default_iters")]
        iters: usize,
    },
    /// Returns a known global translation.
    SyntheticTruth { dx: f64, dy: f64 },
    Zero,
}

fn default_levels() -> usize {
    3
}

fn default_iters() -> usize {
    5
}

impl Default for FlowProvider {
    fn default() -> Self {
        FlowProvider::Pyramid {
            levels: default_levels(),
            iters: default_iters(),
        }
    }
}

/// Half-width of the least-squares window.
const WINDOW_RADIUS: usize = 3;
/// Tikhonov damping of the 2x2 normal equations.
const DAMPING: f64 = 1e-4;

impl FlowProvider {
    pub fn estimate(&self, prev: &Frame, cur: &Frame) -> Result<FlowField> {
        if prev.dims() != cur.dims() {
            arg_err!("flow frames differ in size: {:?} vs {:?}", prev.dims(), cur.dims());
        }
        let (h, w) = cur.dims();
        match *self {
            FlowProvider::Zero => Ok(FlowField::zeros(h, w)),
            FlowProvider::SyntheticTruth { dx, dy } => Ok(FlowField::constant(h, w, dx, dy)),
            FlowProvider::Pyramid { levels, iters } => {
                if levels == 0 {
                    arg_err!("pyramid provider needs at least one level");
                }
                Ok(pyramid_flow(&prev.luma(), &cur.luma(), levels, iters))
            }
        }
    }
}

/// Free-function form of [`FlowProvider::estimate`].
pub fn estimate_flow(provider: &FlowProvider, prev: &Frame, cur: &Frame) -> Result<FlowField> {
    provider.estimate(prev, cur)
}

/// Bilinear sample of a single plane with border clamping.
pub(crate) fn sample_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Box sum over a `(2r+1)^2` window with clamped borders.
fn box_sum(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            tmp[y * w + x] = src[y * w + lo..=y * w + hi].iter().sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| tmp[yy * w + x]).sum();
        }
    }
    out
}

fn pyramid_flow(prev: &Tensor, cur: &Tensor, levels: usize, iters: usize) -> FlowField {
    let mut pyr_prev = vec![prev.clone()];
    let mut pyr_cur = vec![cur.clone()];
    for _ in 1..levels {
        let (_, h, w) = pyr_prev.last().unwrap().dims3();
        if h / 2 < 8 || w / 2 < 8 {
            break;
        }
        let p = resample_tensor(pyr_prev.last().unwrap(), h / 2, w / 2);
        let c = resample_tensor(pyr_cur.last().unwrap(), h / 2, w / 2);
        pyr_prev.push(p);
        pyr_cur.push(c);
    }

    let mut flow: Option<Tensor> = None;
    for (p, c) in pyr_prev.iter().zip(&pyr_cur).rev() {
        let (_, h, w) = p.dims3();
        let mut f = match flow {
            None => Tensor::zeros(&[2, h, w]),
            Some(coarse) => {
                let (_, ch, cw) = coarse.dims3();
                let mut up = resample_tensor(&coarse, h, w);
                let (sx, sy) = (w as f64 / cw as f64, h as f64 / ch as f64);
                let d = up.data_mut();
                d[..h * w].iter_mut().for_each(|v| *v *= sx);
                d[h * w..].iter_mut().for_each(|v| *v *= sy);
                up
            }
        };
        for _ in 0..iters {
            lk_refine(p.data(), c.data(), h, w, &mut f);
            smooth_flow(&mut f, h, w);
        }
        flow = Some(f);
    }
    FlowField::new(flow.expect("at least one level")).expect("well-formed")
}

/// Box-average each flow channel over a 3x3 neighbourhood; keeps the
/// per-pixel solutions from drifting apart between iterations.
fn smooth_flow(flow: &mut Tensor, h: usize, w: usize) {
    let hw = h * w;
    let d = flow.data_mut();
    for ch in 0..2 {
        let plane = &mut d[ch * hw..(ch + 1) * hw];
        let sums = box_sum(plane, h, w, 1);
        let counts = box_sum(&vec![1.0; hw], h, w, 1);
        for i in 0..hw {
            plane[i] = sums[i] / counts[i];
        }
    }
}

/// One Gauss-Newton update of the dense flow at a single pyramid level.
fn lk_refine(prev: &[f64], cur: &[f64], h: usize, w: usize, flow: &mut Tensor) {
    let hw = h * w;
    let (fx, fy) = flow.data().split_at(hw);
    // Gradients of the previous frame, sampled at the displaced positions.
    let mut px = vec![0.0; hw];
    let mut py = vec![0.0; hw];
    for y in 0..h {
        for x in 0..w {
            px[y * w + x] = (prev[y * w + (x + 1).min(w - 1)] - prev[y * w + x.saturating_sub(1)]) * 0.5;
            py[y * w + x] = (prev[(y + 1).min(h - 1) * w + x] - prev[y.saturating_sub(1) * w + x]) * 0.5;
        }
    }
    let mut ixx = vec![0.0; hw];
    let mut ixy = vec![0.0; hw];
    let mut iyy = vec![0.0; hw];
    let mut ixt = vec![0.0; hw];
    let mut iyt = vec![0.0; hw];
    for i in 0..hw {
        let (y, x) = ((i / w) as f64 + fy[i], (i % w) as f64 + fx[i]);
        let gx = sample_plane(&px, h, w, y, x);
        let gy = sample_plane(&py, h, w, y, x);
        let it = sample_plane(prev, h, w, y, x) - cur[i];
        ixx[i] = gx * gx;
        ixy[i] = gx * gy;
        iyy[i] = gy * gy;
        ixt[i] = gx * it;
        iyt[i] = gy * it;
    }
    let r = WINDOW_RADIUS;
    let (sxx, sxy, syy) = (box_sum(&ixx, h, w, r), box_sum(&ixy, h, w, r), box_sum(&iyy, h, w, r));
    let (sxt, syt) = (box_sum(&ixt, h, w, r), box_sum(&iyt, h, w, r));
    let d = flow.data_mut();
    for i in 0..hw {
        let a = sxx[i] + DAMPING;
        let c = syy[i] + DAMPING;
        let b = sxy[i];
        let det = a * c - b * b;
        if det <= 1e-12 {
            continue;
        }
        let du = -(c * sxt[i] - b * syt[i]) / det;
        let dv = -(a * syt[i] - b * sxt[i]) / det;
        d[i] += du.clamp(-2.0, 2.0);
        d[hw + i] += dv.clamp(-2.0, 2.0);
    }
}
