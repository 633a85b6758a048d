//! Frames, clips, multi-FoV triplets and dataset manifests.
//!
//! On disk a dataset is `<root>/<clip_id>/{gt,lr,ref,tele}/%06d.png` plus a
//! tab-separated manifest `clip_id<TAB>split<TAB>path`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Rgb};

use crate::error::{arg_err, Error, Result};
use crate::resample::{check_target, resample_tensor};
use crate::tensor::Tensor;

pub const MIN_FRAME_SIDE: usize = 8;
pub const FRAME_PATTERN: &str = "%06d.png";

/// An RGB image with values in `[0, 1]`, stored as a `[3, h, w]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pixels: Tensor,
}

impl Frame {
    pub fn new(pixels: Tensor) -> Result<Frame> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[0] != 3 {
            arg_err!("frame must be [3, h, w], got {shape:?}");
        }
        if shape[1] < MIN_FRAME_SIDE || shape[2] < MIN_FRAME_SIDE {
            arg_err!("frame must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}, got {}x{}", shape[1], shape[2]);
        }
        if !pixels.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            arg_err!("frame values must be finite and in [0, 1]");
        }
        Ok(Frame { pixels })
    }

    /// Clamp into `[0, 1]` (NaN maps to 0) and wrap.
    pub fn from_clamped(pixels: Tensor) -> Result<Frame> {
        Frame::new(pixels.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Result<Frame> {
        Frame::new(Tensor::full(&[3, h, w], value))
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    /// Axis-centered `h x w` window.
    pub fn center_crop(&self, h: usize, w: usize) -> Result<Frame> {
        let (fh, fw) = self.dims();
        if h > fh || w > fw {
            arg_err!("center crop {h}x{w} larger than frame {fh}x{fw}");
        }
        Frame::new(self.pixels.crop((fh - h) / 2, (fw - w) / 2, h, w))
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Frame> {
        let (fh, fw) = self.dims();
        if y0 + h > fh || x0 + w > fw {
            arg_err!("crop window out of bounds");
        }
        Frame::new(self.pixels.crop(y0, x0, h, w))
    }

    /// Rec.601 luma plane `[1, h, w]`.
    pub fn luma(&self) -> Tensor {
        let (h, w) = self.dims();
        let (r, g, b) = (self.pixels.channel(0), self.pixels.channel(1), self.pixels.channel(2));
        let data = (0..h * w)
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect();
        Tensor::from_vec(&[1, h, w], data)
    }
}

/// Bicubic resampling (a = -0.5, anti-aliased when shrinking), clamped.
pub fn resample_bicubic(frame: &Frame, out_h: usize, out_w: usize) -> Result<Frame> {
    check_target(out_h, out_w)?;
    let t = resample_tensor(frame.tensor(), out_h, out_w);
    Frame::from_clamped(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    frames: Vec<Frame>,
    pub frame_rate: Option<f64>,
}

impl Clip {
    pub fn new(frames: Vec<Frame>) -> Result<Clip> {
        let Some(first) = frames.first() else {
            arg_err!("clip needs at least one frame");
        };
        let dims = first.dims();
        if let Some(bad) = frames.iter().position(|f| f.dims() != dims) {
            return Err(Error::Format(format!(
                "frame {bad} is {:?}, expected {dims:?}",
                frames[bad].dims()
            )));
        }
        Ok(Clip {
            frames,
            frame_rate: None,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn map_frames(&self, f: impl Fn(&Frame) -> Result<Frame>) -> Result<Clip> {
        let mut clip = Clip::new(self.frames.iter().map(f).collect::<Result<_>>()?)?;
        clip.frame_rate = self.frame_rate;
        Ok(clip)
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Clip> {
        if len == 0 || start + len > self.len() {
            arg_err!("window {start}+{len} outside clip of length {}", self.len());
        }
        Clip::new(self.frames[start..start + len].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub lr: Clip,
    pub reference: Clip,
    pub gt: Clip,
    pub scale: usize,
    pub ref_magnification: usize,
}

impl TripletSample {
    pub fn new(lr: Clip, reference: Clip, gt: Clip, scale: usize, ref_magnification: usize) -> Result<Self> {
        if !matches!(scale, 2 | 4) {
            arg_err!("scale must be 2 or 4, got {scale}");
        }
        if lr.dims() != reference.dims() || lr.len() != reference.len() {
            arg_err!("lr and ref must share size and length");
        }
        let (h, w) = lr.dims();
        if gt.dims() != (h * scale, w * scale) || gt.len() != lr.len() {
            arg_err!("gt must be {scale}x the lr size with the same length");
        }
        Ok(TripletSample {
            lr,
            reference,
            gt,
            scale,
            ref_magnification,
        })
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }
}

/// Build an aligned (LR, Ref, GT) triplet from a high-resolution clip.
///
/// LR is the whole frame shrunk by `scale`; Ref is the central `1/m` (per
/// axis) of the frame shrunk to the LR size, i.e. the central field of view
/// at `m` times the LR magnification.
pub fn synthesize_triplet(gt: &Clip, scale: usize, magnification: usize) -> Result<TripletSample> {
    if magnification < 2 || scale < magnification {
        arg_err!("need scale >= magnification >= 2, got s={scale}, m={magnification}");
    }
    let (h, w) = gt.dims();
    let unit = scale * magnification;
    if h % unit != 0 || w % unit != 0 {
        arg_err!("gt size {h}x{w} not divisible by s*m = {unit}");
    }
    let (lh, lw) = (h / scale, w / scale);
    let lr = gt.map_frames(|f| resample_bicubic(f, lh, lw))?;
    let reference = gt.map_frames(|f| {
        let crop = f.center_crop(h / magnification, w / magnification)?;
        resample_bicubic(&crop, lh, lw)
    })?;
    TripletSample::new(lr, reference, gt.clone(), scale, magnification)
}

/// The narrow-FoV "telephoto" stream: the central `1/m` of each frame,
/// resampled back to the frame's own size.
pub fn center_fov_stream(clip: &Clip, magnification: usize) -> Result<Clip> {
    let (h, w) = clip.dims();
    clip.map_frames(|f| {
        let crop = f.center_crop(h / magnification, w / magnification)?;
        resample_bicubic(&crop, h, w)
    })
}

struct FramePattern {
    prefix: String,
    suffix: String,
}

impl FramePattern {
    /// Accepts `prefix%0Nd suffix` or `prefix%dsuffix`.
    fn parse(pattern: &str) -> Result<FramePattern> {
        let start = pattern
            .find('%')
            .ok_or_else(|| Error::Argument(format!("frame pattern `{pattern}` lacks a %d field")))?;
        let rest = &pattern[start + 1..];
        let end = rest
            .find('d')
            .ok_or_else(|| Error::Argument(format!("frame pattern `{pattern}` lacks a %d field")))?;
        if !rest[..end].chars().all(|c| c.is_ascii_digit()) {
            arg_err!("unsupported frame pattern `{pattern}`");
        }
        Ok(FramePattern {
            prefix: pattern[..start].to_string(),
            suffix: rest[end + 1..].to_string(),
        })
    }

    fn index_of(&self, name: &str) -> Option<u64> {
        let mid = name.strip_prefix(&self.prefix)?.strip_suffix(&self.suffix)?;
        if mid.is_empty() || !mid.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        mid.parse().ok()
    }
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Frame::new(Tensor::from_vec(&[3, h, w], data)).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = frame.dims();
    let t = frame.tensor();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (t.at3(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Load every file in `dir` whose name matches `pattern` (e.g. `%06d.png`),
/// ordered by frame index.
pub fn load_clip(dir: &Path, pattern: &str) -> Result<Clip> {
    let pat = FramePattern::parse(pattern)?;
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indexed = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(idx) = name.to_str().and_then(|n| pat.index_of(n)) {
            indexed.push((idx, entry.path()));
        }
    }
    if indexed.is_empty() {
        return Err(Error::EmptyClip {
            dir: dir.to_path_buf(),
            pattern: pattern.to_string(),
        });
    }
    indexed.sort();
    let frames = indexed
        .iter()
        .map(|(_, p)| load_frame(p))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(frames)
}

/// Write frames as `%06d.png` starting at index 0.
pub fn save_clip(clip: &Clip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip.frames().iter().enumerate() {
        save_frame(f, &dir.join(format!("{i:06}.png")))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

/// Fractions of clips assigned to train/val/test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.85,
            val: 0.05,
            test: 0.10,
        }
    }
}

/// 64-bit FNV-1a, stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::Format(format!("clip id `{}` appears twice", e.clip_id)));
            }
            if e.clip_id.contains(['\t', '\n']) {
                return Err(Error::Format(format!("clip id `{}` contains a tab or newline", e.clip_id)));
            }
        }
        Ok(DatasetManifest { entries })
    }

    /// Assign splits deterministically: clips are ordered by the hash of
    /// their id, then the first `round(n * val)` go to val, the next
    /// `round(n * test)` to test, and the rest to train.
    pub fn assign(clips: &[(String, PathBuf)], ratios: SplitRatios) -> Result<Self> {
        let total = ratios.train + ratios.val + ratios.test;
        if [ratios.train, ratios.val, ratios.test].iter().any(|r| *r < 0.0) || total <= 0.0 {
            arg_err!("split ratios must be nonnegative with a positive sum");
        }
        let n = clips.len();
        let n_val = ((n as f64) * ratios.val / total).round() as usize;
        let n_test = (((n as f64) * ratios.test / total).round() as usize).min(n - n_val.min(n));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (stable_hash(&clips[i].0), clips[i].0.clone()));
        let mut split_of = vec![Split::Train; n];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < n_val {
                Split::Val
            } else if rank < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
        let entries = clips
            .iter()
            .zip(split_of)
            .map(|((id, path), split)| ManifestEntry {
                clip_id: id.clone(),
                split,
                path: path.clone(),
            })
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.clip_id, e.split, e.path.display()))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, split, path] = fields[..] else {
                return Err(Error::Format(format!("manifest line {}: expected 3 tab-separated fields", n + 1)));
            };
            entries.push(ManifestEntry {
                clip_id: id.to_string(),
                split: split.parse()?,
                path: PathBuf::from(path),
            });
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        // Relative clip paths are resolved against the manifest's directory.
        if let Some(base) = path.parent() {
            for e in &mut m.entries {
                if e.path.is_relative() {
                    e.path = base.join(&e.path);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Load the `{lr, ref, gt}` streams stored under a clip directory.
pub fn load_triplet(clip_dir: &Path, scale: usize, magnification: usize) -> Result<TripletSample> {
    let lr = load_clip(&clip_dir.join("lr"), FRAME_PATTERN)?;
    let reference = load_clip(&clip_dir.join("ref"), FRAME_PATTERN)?;
    let gt = load_clip(&clip_dir.join("gt"), FRAME_PATTERN)?;
    TripletSample::new(lr, reference, gt, scale, magnification)
}

pub fn save_triplet(sample: &TripletSample, clip_dir: &Path) -> Result<()> {
    save_clip(&sample.lr, &clip_dir.join("lr"))?;
    save_clip(&sample.reference, &clip_dir.join("ref"))?;
    save_clip(&sample.gt, &clip_dir.join("gt"))
}

/// The telephoto stream of a synthetic clip: the central `1/scale` (per
/// axis) of each HR frame at native resolution, i.e. a frame with the LR
/// size showing the centre of the LR field of view `scale` times larger.
pub fn tele_stream(gt: &Clip, scale: usize) -> Result<Clip> {
    let (h, w) = gt.dims();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        arg_err!("gt size {h}x{w} not divisible by scale {scale}");
    }
    gt.map_frames(|f| f.center_crop(h / scale, w / scale))
}

/// Load the `tele` stream of a clip directory, if present.
pub fn load_tele(clip_dir: &Path) -> Result<Option<Clip>> {
    let dir = clip_dir.join("tele");
    if !dir.is_dir() {
        return Ok(None);
    }
    load_clip(&dir, FRAME_PATTERN).map(Some)
}

pub mod synthetic {
    //! Procedural high-resolution videos for the toy corpora.
    //!
    //! A scene is a continuous texture (oriented gratings plus soft-edged
    //! blobs) translated by a constant velocity per frame; frames are
    //! rendered by 2x2 supersampling.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{Clip, Frame};
    use crate::error::Result;
    use crate::tensor::Tensor;

    struct Grating {
        kx: f64,
        ky: f64,
        phase: f64,
        amp: [f64; 3],
    }

    struct Blob {
        cx: f64,
        cy: f64,
        radius: f64,
        color: [f64; 3],
    }

    pub struct Scene {
        base: [f64; 3],
        gratings: Vec<Grating>,
        blobs: Vec<Blob>,
        velocity: (f64, f64),
    }

    impl Scene {
        /// Random scene sized for `h x w` frames. `speed` is in pixels per
        /// frame at the rendered resolution.
        pub fn random(seed: u64, h: usize, w: usize, speed: f64) -> Scene {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
            let gratings = (0..6)
                .map(|i| {
                    // Fine periods (4.5 to 8 pixels) are lost by a 4x
                    // reduction but survive a 2x one; coarse ones survive both.
                    let period = if i < 3 { rng.gen_range(4.5..8.0) } else { rng.gen_range(8.0..24.0) };
                    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                    let k = 2.0 * std::f64::consts::PI / period;
                    let a = rng.gen_range(0.03..0.08);
                    Grating {
                        kx: k * theta.cos(),
                        ky: k * theta.sin(),
                        phase: rng.gen_range(0.0..6.3),
                        amp: [a * rng.gen_range(0.5..1.0), a * rng.gen_range(0.5..1.0), a * rng.gen_range(0.5..1.0)],
                    }
                })
                .collect();
            // Blobs cover the frame plus a margin for motion.
            let extent = (h.max(w) as f64) * 0.7;
            let blobs = (0..24)
                .map(|_| Blob {
                    cx: rng.gen_range(-extent..extent),
                    cy: rng.gen_range(-extent..extent),
                    radius: rng.gen_range(3.0..(h.min(w) as f64 / 4.0).max(4.0)),
                    color: [rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25)],
                })
                .collect();
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            Scene {
                base,
                gratings,
                blobs,
                velocity: (speed * angle.cos(), speed * angle.sin()),
            }
        }

        fn sample(&self, x: f64, y: f64) -> [f64; 3] {
            let mut v = self.base;
            for g in &self.gratings {
                let s = (g.kx * x + g.ky * y + g.phase).sin();
                for (vc, a) in v.iter_mut().zip(g.amp) {
                    *vc += a * s;
                }
            }
            for b in &self.blobs {
                let d = ((x - b.cx).powi(2) + (y - b.cy).powi(2)).sqrt();
                // Soft edge about one pixel wide.
                let inside = 1.0 / (1.0 + ((d - b.radius) * 2.0).exp());
                for (vc, col) in v.iter_mut().zip(b.color) {
                    *vc += col * inside;
                }
            }
            v.map(|c| c.clamp(0.0, 1.0))
        }

        pub fn render(&self, t: usize, h: usize, w: usize) -> Result<Frame> {
            let (ox, oy) = (self.velocity.0 * t as f64, self.velocity.1 * t as f64);
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let mut data = vec![0.0; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = [0.0; 3];
                    for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                        let s = self.sample(x as f64 + sx - cx + ox, y as f64 + sy - cy + oy);
                        for c in 0..3 {
                            acc[c] += s[c] * 0.25;
                        }
                    }
                    for c in 0..3 {
                        data[(c * h + y) * w + x] = acc[c];
                    }
                }
            }
            Frame::new(Tensor::from_vec(&[3, h, w], data))
        }
    }

    /// A procedural clip of `frames` frames at `h x w`.
    pub fn procedural_clip(seed: u64, frames: usize, h: usize, w: usize, speed: f64) -> Result<Clip> {
        let scene = Scene::random(seed, h, w, speed);
        Clip::new((0..frames).map(|t| scene.render(t, h, w)).collect::<Result<_>>()?)
    }
}
