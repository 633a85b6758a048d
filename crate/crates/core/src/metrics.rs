//! PSNR, SSIM and region-wise evaluation over centred field-of-view rings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Clip, Frame};
use crate::error::{arg_err, Result};

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;

/// Boolean pixel mask, row-major `h * w`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn full(h: usize, w: usize) -> Mask {
        Mask {
            h,
            w,
            bits: vec![true; h * w],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }
}

fn check_pair(a: &Frame, b: &Frame, mask: Option<&Mask>) -> Result<()> {
    if a.dims() != b.dims() {
        arg_err!("frames differ in size: {:?} vs {:?}", a.dims(), b.dims());
    }
    if let Some(m) = mask {
        if (m.h, m.w) != a.dims() {
            arg_err!("mask {}x{} does not match frame {:?}", m.h, m.w, a.dims());
        }
        if m.count() == 0 {
            arg_err!("mask selects no pixels");
        }
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over the masked pixels of all channels, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &Frame, b: &Frame, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (h, w) = a.dims();
    let hw = h * w;
    let (mut sum, mut n) = (0.0, 0usize);
    for c in 0..3 {
        let (pa, pb) = (a.tensor().channel(c), b.tensor().channel(c));
        for i in 0..hw {
            if mask.is_none_or(|m| m.bits[i]) {
                let d = pa[i] - pb[i];
                sum += d * d;
                n += 1;
            }
        }
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of a plane with the SSIM window.
fn window_filter(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|j| g[j] * p[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| g[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// SSIM map on Rec.601 luma over all valid window centres, as
/// `(map, out_h, out_w)`; centre `(y, x)` sits at pixel `(y + 5, x + 5)`.
pub fn ssim_map(a: &Frame, b: &Frame) -> Result<(Vec<f64>, usize, usize)> {
    check_pair(a, b, None)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        arg_err!("frames {h}x{w} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window");
    }
    let (la, lb) = (a.luma(), b.luma());
    let (x, y) = (la.data(), lb.data());
    let g = gaussian_window();
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let mx = window_filter(x, h, w, &g);
    let my = window_filter(y, h, w, &g);
    let sxx = window_filter(&prod(&|i| x[i] * x[i]), h, w, &g);
    let syy = window_filter(&prod(&|i| y[i] * y[i]), h, w, &g);
    let sxy = window_filter(&prod(&|i| x[i] * y[i]), h, w, &g);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let map = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect();
    Ok((map, h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1))
}

/// Mean SSIM over the window centres that fall inside `mask`.
pub fn ssim(a: &Frame, b: &Frame, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (map, oh, ow) = ssim_map(a, b)?;
    let r = SSIM_WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..oh {
        for x in 0..ow {
            if mask.is_none_or(|m| m.get(y + r, x + r)) {
                sum += map[y * ow + x];
                n += 1;
            }
        }
    }
    if n == 0 {
        arg_err!("mask contains no SSIM window centre");
    }
    Ok(sum / n as f64)
}

/// Centred rectangle holding `pct` percent of an `h x w` frame with the
/// frame's aspect ratio, as `(y0, x0, rh, rw)`. Extents are floored to the
/// parity of the frame size so the rectangle is exactly centred.
pub fn fov_region(h: usize, w: usize, pct: f64) -> (usize, usize, usize, usize) {
    let f = (pct / 100.0).clamp(0.0, 1.0).sqrt();
    let fit = |n: usize| {
        let mut e = (n as f64 * f).floor() as usize;
        if (n - e) % 2 == 1 {
            e = e.saturating_sub(1);
        }
        e
    };
    let (rh, rw) = (fit(h), fit(w));
    ((h - rh) / 2, (w - rw) / 2, rh, rw)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FovRing {
    pub inner_area_pct: f64,
    pub outer_area_pct: f64,
}

impl FovRing {
    pub fn new(inner: f64, outer: f64) -> Result<FovRing> {
        if !(0.0..=100.0).contains(&inner) || !(0.0..=100.0).contains(&outer) || inner >= outer {
            arg_err!("ring needs 0 <= inner < outer <= 100, got {inner}-{outer}");
        }
        Ok(FovRing {
            inner_area_pct: inner,
            outer_area_pct: outer,
        })
    }

    /// Consecutive rings over a sorted list of boundaries, e.g.
    /// `[0, 50, 100]` gives `0-50` and `50-100`.
    pub fn chain(bounds: &[f64]) -> Result<Vec<FovRing>> {
        if bounds.len() < 2 {
            arg_err!("need at least two ring boundaries");
        }
        bounds.windows(2).map(|p| FovRing::new(p[0], p[1])).collect()
    }

    pub fn label(&self) -> String {
        format!("{}-{}%", self.inner_area_pct, self.outer_area_pct)
    }

    pub fn mask(&self, h: usize, w: usize) -> Mask {
        let inside = |pct: f64, y: usize, x: usize| {
            if pct <= 0.0 {
                return false;
            }
            let (y0, x0, rh, rw) = fov_region(h, w, pct);
            y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw
        };
        let bits = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                inside(self.outer_area_pct, y, x) && !inside(self.inner_area_pct, y, x)
            })
            .collect();
        Mask { h, w, bits }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingScore {
    pub ring: String,
    pub psnr: f64,
    /// `None` when no SSIM window centre lies in the ring.
    pub ssim: Option<f64>,
    pub pixels: usize,
    /// Pixels the ring should hold by its nominal area minus the pixels it
    /// holds after rounding the rectangles.
    pub area_error: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip: String,
    pub frames: usize,
    pub rings: Vec<RingScore>,
}

/// Per-clip and aggregate scores per ring. Scores are averaged per frame,
/// then over frames, then over clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub averaging: String,
    pub clips: Vec<ClipScore>,
    pub aggregate: Vec<RingScore>,
}

const AVERAGING: &str = "per-frame, then per-clip mean";

/// Score one clip on every ring.
pub fn fov_ring_metrics(name: &str, sr: &Clip, gt: &Clip, rings: &[FovRing]) -> Result<ClipScore> {
    if sr.len() != gt.len() || sr.dims() != gt.dims() {
        arg_err!(
            "sr clip {}x{:?} and gt clip {}x{:?} are not aligned",
            sr.len(),
            sr.dims(),
            gt.len(),
            gt.dims()
        );
    }
    if rings.is_empty() {
        arg_err!("no rings requested");
    }
    let (h, w) = gt.dims();
    let mut out = Vec::with_capacity(rings.len());
    for ring in rings {
        let ring = FovRing::new(ring.inner_area_pct, ring.outer_area_pct)?;
        let mask = ring.mask(h, w);
        let pixels = mask.count();
        if pixels == 0 {
            arg_err!("ring {} holds no pixels on a {h}x{w} frame", ring.label());
        }
        let nominal = (ring.outer_area_pct - ring.inner_area_pct) / 100.0 * (h * w) as f64;
        let (mut p, mut s, mut s_ok) = (0.0, 0.0, true);
        for (a, b) in sr.frames().iter().zip(gt.frames()) {
            p += psnr(a, b, Some(&mask))?;
            match ssim(a, b, Some(&mask)) {
                Ok(v) => s += v,
                Err(_) => s_ok = false,
            }
        }
        let n = sr.len() as f64;
        out.push(RingScore {
            ring: ring.label(),
            psnr: p / n,
            ssim: s_ok.then_some(s / n),
            pixels,
            area_error: nominal.round() as i64 - pixels as i64,
        });
    }
    Ok(ClipScore {
        clip: name.to_string(),
        frames: sr.len(),
        rings: out,
    })
}

impl MetricReport {
    pub fn new(clips: Vec<ClipScore>) -> Result<MetricReport> {
        let Some(first) = clips.first() else {
            arg_err!("report needs at least one clip");
        };
        let n = clips.len() as f64;
        let aggregate = first
            .rings
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let ssims: Option<Vec<f64>> = clips.iter().map(|c| c.rings[i].ssim).collect();
                RingScore {
                    ring: r.ring.clone(),
                    psnr: clips.iter().map(|c| c.rings[i].psnr).sum::<f64>() / n,
                    ssim: ssims.map(|v| v.iter().sum::<f64>() / n),
                    pixels: r.pixels,
                    area_error: r.area_error,
                }
            })
            .collect();
        Ok(MetricReport {
            averaging: AVERAGING.to_string(),
            clips,
            aggregate,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column table: one row per clip plus a mean row, two columns
    /// (PSNR, SSIM) per ring.
    pub fn to_text(&self) -> String {
        let mut cols = vec!["clip".to_string()];
        for r in &self.aggregate {
            cols.push(format!("PSNR {}", r.ring));
            cols.push(format!("SSIM {}", r.ring));
        }
        let fmt_row = |name: &str, rings: &[RingScore]| {
            let mut row = vec![name.to_string()];
            for r in rings {
                row.push(format!("{:.2}", r.psnr));
                row.push(r.ssim.map_or("-".to_string(), |s| format!("{s:.4}")));
            }
            row
        };
        let mut rows = vec![cols];
        for c in &self.clips {
            rows.push(fmt_row(&c.clip, &c.rings));
        }
        rows.push(fmt_row("mean", &self.aggregate));
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("# averaging: {}\n", self.averaging);
        for r in rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(seed: u64, h: usize, w: usize) -> Frame {
        crate::data::synthetic::procedural_clip(seed, 1, h, w, 0.0).unwrap().frames()[0].clone()
    }

    #[test]
    fn psnr_cap_and_offset() {
        let a = Frame::constant(16, 16, 0.4).unwrap();
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP);
        let b = Frame::constant(16, 16, 0.5).unwrap();
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-6);
        let empty = Mask {
            h: 16,
            w: 16,
            bits: vec![false; 256],
        };
        assert!(psnr(&a, &b, Some(&empty)).is_err());
    }

    #[test]
    fn full_mask_matches_unmasked() {
        let (a, b) = (textured(1, 20, 24), textured(2, 20, 24));
        let m = Mask::full(20, 24);
        assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&a, &b, Some(&m)).unwrap());
        assert_eq!(ssim(&a, &b, None).unwrap(), ssim(&a, &b, Some(&m)).unwrap());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = textured(3, 24, 24);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let c = Frame::constant(16, 16, 0.3).unwrap();
        let d = Frame::constant(16, 16, 0.4).unwrap();
        let (c1, c2) = (1e-4, 9e-4);
        let (x, y): (f64, f64) = (0.3, 0.4);
        let want = (2.0 * x * y + c1) * c2 / ((x * x + y * y + c1) * c2);
        assert!((ssim(&c, &d, None).unwrap() - want).abs() < 1e-9);
        let small = Frame::constant(10, 16, 0.3).unwrap();
        assert!(ssim(&small, &small, None).is_err());
    }

    #[test]
    fn ssim_of_inverted_texture_is_negative() {
        let a = textured(4, 32, 32);
        let b = Frame::new(a.tensor().map(|v| 1.0 - v)).unwrap();
        assert!(ssim(&a, &b, None).unwrap() < 0.0);
    }

    #[test]
    fn region_geometry() {
        let (y0, x0, rh, rw) = fov_region(100, 200, 50.0);
        assert_eq!((rh, rw), (70, 140));
        assert_eq!((y0, x0), (15, 30));
        assert_eq!(fov_region(100, 200, 100.0), (0, 0, 100, 200));
        assert_eq!(fov_region(99, 61, 100.0), (0, 0, 99, 61));
    }

    #[test]
    fn ring_chain_partitions_the_frame() {
        let rings = FovRing::chain(&[0.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0]).unwrap();
        let masks: Vec<Mask> = rings.iter().map(|r| r.mask(90, 160)).collect();
        for i in 0..90 * 160 {
            assert_eq!(masks.iter().filter(|m| m.bits[i]).count(), 1);
        }
        assert!(FovRing::new(50.0, 50.0).is_err());
    }

    #[test]
    fn report_renders_ring_columns() {
        let clip = crate::data::synthetic::procedural_clip(5, 2, 32, 32, 0.5).unwrap();
        let rings = FovRing::chain(&[0.0, 50.0, 100.0]).unwrap();
        let score = fov_ring_metrics("c0", &clip, &clip, &rings).unwrap();
        assert_eq!(score.rings[1].psnr, PSNR_CAP);
        assert_eq!(score.rings.iter().map(|r| r.pixels).sum::<usize>(), 32 * 32);
        let report = MetricReport::new(vec![score]).unwrap();
        let text = report.to_text();
        assert!(text.contains("PSNR 0-50%") && text.contains("SSIM 50-100%"));
        let back: MetricReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
