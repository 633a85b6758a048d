//! Bicubic resampling and the small fixed blur used by the losses.
//!
//! Both are separable linear maps built as [`Linear1d`] tap lists, so the
//! same weights serve plain image processing and differentiable use inside
//! the losses.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{arg_err, Result};
use crate::ops::{separable, separable_apply, Linear1d};
use crate::tensor::Tensor;

/// Cubic convolution coefficient.
pub const BICUBIC_A: f64 = -0.5;

/// Keys' cubic convolution kernel.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic weights mapping `in_len` samples to `out_len` samples with
/// pixel-center alignment. When shrinking, the kernel is stretched by the
/// inverse scale (anti-aliasing). Out-of-range taps replicate the border
/// sample and every row of weights is normalized to sum to one.
pub fn bicubic_weights(in_len: usize, out_len: usize) -> Linear1d {
    let scale = out_len as f64 / in_len as f64;
    let kscale = scale.min(1.0);
    let support = 2.0 / kscale;
    let last = in_len as isize - 1;
    let taps = (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut row: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let wgt = cubic_kernel((center - j as f64) * kscale, BICUBIC_A);
                if wgt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, last) as usize;
                match row.iter_mut().find(|(k, _)| *k == idx) {
                    Some(entry) => entry.1 += wgt,
                    None => row.push((idx, wgt)),
                }
            }
            let total: f64 = row.iter().map(|t| t.1).sum();
            row.iter_mut().for_each(|t| t.1 /= total);
            row
        })
        .collect();
    Linear1d { in_len, taps }
}

/// Resample every channel of a `[c, h, w]` tensor. No clamping.
pub fn resample_tensor(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (_, h, w) = x.dims3();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    separable_apply(x, &bicubic_weights(h, out_h), &bicubic_weights(w, out_w))
}

/// Differentiable counterpart of [`resample_tensor`].
pub fn resample_var(x: &Var, out_h: usize, out_w: usize) -> Var {
    let (_, h, w) = x.dims3();
    separable(
        x,
        Rc::new(bicubic_weights(h, out_h)),
        Rc::new(bicubic_weights(w, out_w)),
    )
}

pub(crate) fn check_target(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        arg_err!("resample target must be positive, got {out_h}x{out_w}");
    }
    Ok(())
}

/// Standard deviation of the 3x3 blur applied before pixel losses.
pub const BLUR_SIGMA: f64 = 0.5;

/// Normalized 3-tap Gaussian `[g(-1), g(0), g(1)]` for `sigma`.
pub fn gaussian3_taps(sigma: f64) -> [f64; 3] {
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let total = 1.0 + 2.0 * side;
    [side / total, 1.0 / total, side / total]
}

/// 3-tap Gaussian along one axis with replicated borders.
pub fn gaussian3_weights(len: usize) -> Linear1d {
    let [a, b, c] = gaussian3_taps(BLUR_SIGMA);
    let last = len.saturating_sub(1);
    let taps = (0..len)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(3);
            for (off, wgt) in [(-1isize, a), (0, b), (1, c)] {
                let idx = (i as isize + off).clamp(0, last as isize) as usize;
                match row.iter_mut().find(|(k, _)| *k == idx) {
                    Some(entry) => entry.1 += wgt,
                    None => row.push((idx, wgt)),
                }
            }
            row
        })
        .collect();
    Linear1d { in_len: len, taps }
}

/// Separable 3x3 Gaussian blur (sigma 0.5), differentiable.
pub fn gaussian_blur3_var(x: &Var) -> Var {
    let (_, h, w) = x.dims3();
    separable(x, Rc::new(gaussian3_weights(h)), Rc::new(gaussian3_weights(w)))
}
