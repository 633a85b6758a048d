//! `refvsrpp` command-line front end.
//!
//! Every path is resolved against `--workdir`, and outputs must stay inside
//! it. Errors print as one line `CODE: message` on stderr; the exit status
//! is 0 on success, 2 for usage errors, 3 for configuration or version
//! mismatches, 4 for I/O and malformed files, and 5 for numeric failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use refvsr::checkpoint::Checkpoint;
use refvsr::config::{parse_override, Config};
use refvsr::data::{
    load_clip, resample_bicubic, save_clip, save_frame, synthesize_triplet, synthetic::procedural_clip, tele_stream,
    Clip, DatasetManifest, Frame, Split, FRAME_PATTERN,
};
use refvsr::metrics::{fov_ring_metrics, ClipScore, FovRing, MetricReport};
use refvsr::network::RefVsrModel;
use refvsr::tensor::Tensor;
use refvsr::training::{bicubic_clip, run_ablation, train_stage1, train_stage2, TrainHooks, TrainSet};

/// Ring boundaries of the paper's per-FoV evaluation, in percent of area.
pub const DEFAULT_RINGS: &str = "0,50,60,70,80,90,100";

#[derive(Debug, Parser)]
#[command(name = "refvsrpp", version, about = "Reference-based video super-resolution with dual-stream propagation")]
pub struct Cli {
    /// Directory every relative path is resolved against; nothing is
    /// written outside it.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Seed for model initialization, data order and synthetic data.
    /// Overrides `train.seed` and `model.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Config files, applied in order over the defaults.
    #[arg(long = "config", global = true)]
    pub configs: Vec<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an (LR, Ref, GT, tele) corpus and its manifest.
    GenerateData(GenerateArgs),
    /// Train stage 1 or fine-tune with stage 2.
    Train(TrainArgs),
    /// Score a checkpoint on one split, per field-of-view ring.
    Eval(EvalArgs),
    /// Super-resolve one clip and write comparison grids.
    Infer(InferArgs),
    /// Train and score rows of the ablation table.
    Ablate(AblateArgs),
}

/// Trailing `section.key=value` overrides.
#[derive(Debug, Args)]
pub struct Overrides {
    /// Config overrides such as `train.steps=200` or `--model.channels=16`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Directory of HR clips, one subdirectory of `%06d.png` frames each.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub src: Option<PathBuf>,
    /// Generate this many procedural clips instead of reading `--src`.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side of the procedural HR frames.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Frames per procedural clip.
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    /// Procedural motion in HR pixels per frame.
    #[arg(long, default_value_t = 2.0)]
    pub speed: f64,
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long, default_value_t = 2)]
    pub magnification: usize,
    /// Train/val/test fractions, e.g. `0.8,0.1,0.1`; defaults to the
    /// config's `data.*_ratio`.
    #[arg(long, value_delimiter = ',')]
    pub splits: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training stage; overrides `train.stage`.
    #[arg(long)]
    pub stage: Option<u8>,
    /// Stage-1 checkpoint to fine-tune (stage 2 only); defaults to
    /// `runs/<name>/stage1.ckpt`.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Run name; outputs go to `runs/<name>/`.
    #[arg(long, default_value = "default")]
    pub name: String,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Ring boundaries in percent of frame area.
    #[arg(long, default_value = DEFAULT_RINGS, value_delimiter = ',')]
    pub rings: Vec<f64>,
    /// Also score bicubic upsampling on the same clips.
    #[arg(long)]
    pub baseline: bool,
    /// Output directory for `report.json` and `report.txt`.
    #[arg(long, default_value = "reports/eval")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of LR `%06d.png` frames.
    #[arg(long)]
    pub lr: PathBuf,
    /// Directory of Ref `%06d.png` frames.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, default_value = "sr")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated ablation rows, 1 to 7.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub rows: Vec<usize>,
    /// Training steps per row.
    #[arg(long, default_value_t = 200)]
    pub budget: usize,
    #[arg(long, default_value = "reports/ablation")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(refvsr::Error),
}

impl From<refvsr::Error> for CliError {
    fn from(e: refvsr::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "E_USAGE",
            CliError::Core(e) => e.code(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use refvsr::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Argument(_)) => 2,
            CliError::Core(E::Config(_) | E::Version(_)) => 3,
            CliError::Core(E::Io { .. } | E::Image { .. } | E::Format(_) | E::EmptyClip { .. }) => 4,
            CliError::Core(E::Numeric(_)) => 5,
        }
    }

    /// `CODE: message` on a single line.
    pub fn render(&self) -> String {
        let msg = match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        };
        format!("{}: {}", self.code(), msg.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `args` and run the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).render());
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.render());
            e.exit_code()
        }
    }
}

/// Resolve an input path against the workdir.
fn input_path(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

/// Resolve an output path, refusing anything that could leave the workdir.
fn output_path(workdir: &Path, p: &Path) -> CliResult<PathBuf> {
    if p.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(CliError::Usage(format!(
            "output path `{}` must be relative to the workdir without `..`",
            p.display()
        )));
    }
    Ok(workdir.join(p))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| refvsr::Error::io(dir, e).into())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| refvsr::Error::io(path, e).into())
}

fn load_config(cli: &Cli, overrides: &[String], extra: &[(String, String)]) -> CliResult<Config> {
    let files: Vec<PathBuf> = cli.configs.iter().map(|p| input_path(&cli.workdir, p)).collect();
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let mut pairs = Vec::new();
    if let Some(seed) = cli.seed {
        pairs.push(("train.seed".to_string(), seed.to_string()));
        pairs.push(("model.seed".to_string(), seed.to_string()));
    }
    pairs.extend(extra.iter().cloned());
    for o in overrides {
        pairs.push(parse_override(o).map_err(|e| CliError::Usage(e.to_string()))?);
    }
    Ok(Config::load(&refs, &pairs)?)
}

fn load_manifest(cli: &Cli, config: &Config) -> CliResult<DatasetManifest> {
    Ok(DatasetManifest::load(&input_path(&cli.workdir, &config.data.manifest))?)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match &cli.command {
        Command::GenerateData(a) => cmd_generate_data(cli, a).map(|_| ()),
        Command::Train(a) => cmd_train(cli, a).map(|_| ()),
        Command::Eval(a) => cmd_eval(cli, a).map(|_| ()),
        Command::Infer(a) => cmd_infer(cli, a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(cli, a).map(|_| ()),
    }
}

/// Seed of procedural clip `i` for run seed `seed`.
fn clip_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64).wrapping_add(1)
}

pub fn cmd_generate_data(cli: &Cli, a: &GenerateArgs) -> CliResult<PathBuf> {
    let config = load_config(cli, &[], &[])?;
    let ratios = match &a.splits {
        Some(v) if v.len() != 3 => return Err(CliError::Usage(format!("--splits needs 3 fractions, got {}", v.len()))),
        Some(v) => refvsr::data::SplitRatios {
            train: v[0],
            val: v[1],
            test: v[2],
        },
        None => config.data.ratios(),
    };
    let out = output_path(&cli.workdir, &a.out)?;
    let mut sources: Vec<(String, Clip)> = Vec::new();
    if let Some(n) = a.synthetic {
        let seed = cli.seed.unwrap_or(0);
        for i in 0..n {
            sources.push((format!("clip{i:03}"), procedural_clip(clip_seed(seed, i), a.frames, a.size, a.size, a.speed)?));
        }
    } else if let Some(src) = &a.src {
        let src = input_path(&cli.workdir, src);
        let entries = fs::read_dir(&src).map_err(|e| refvsr::Error::io(&src, e))?;
        let mut dirs = Vec::new();
        for e in entries {
            let e = e.map_err(|err| refvsr::Error::io(&src, err))?;
            if e.path().is_dir() {
                dirs.push(e.path());
            }
        }
        dirs.sort();
        for d in dirs {
            let id = d.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            sources.push((id, load_clip(&d, FRAME_PATTERN)?));
        }
    }
    if sources.is_empty() {
        return Err(CliError::Usage("no source clips found".into()));
    }
    let mut listed = Vec::with_capacity(sources.len());
    for (id, hr) in &sources {
        let sample = synthesize_triplet(hr, a.scale, a.magnification)?;
        let dir = out.join(id);
        refvsr::data::save_triplet(&sample, &dir)?;
        save_clip(&tele_stream(&sample.gt, a.scale)?, &dir.join("tele"))?;
        listed.push((id.clone(), PathBuf::from(id)));
    }
    let manifest = DatasetManifest::assign(&listed, ratios)?;
    let path = out.join("manifest.tsv");
    manifest.save(&path)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split}\t{}", manifest.count(split));
    }
    println!("manifest\t{}", path.display());
    Ok(path)
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> CliResult<PathBuf> {
    let extra: Vec<(String, String)> = a.stage.map(|s| ("train.stage".to_string(), s.to_string())).into_iter().collect();
    let config = load_config(cli, &a.overrides.overrides, &extra)?;
    if a.name.is_empty() || a.name.contains(['/', '\\']) || a.name == ".." {
        return Err(CliError::Usage(format!("invalid run name `{}`", a.name)));
    }
    let run_dir = output_path(&cli.workdir, &Path::new("runs").join(&a.name))?;
    let manifest = load_manifest(cli, &config)?;
    let stage = config.train.stage;
    let (init, model_config) = if stage == 2 {
        let path = match &a.init {
            Some(p) => input_path(&cli.workdir, p),
            None => run_dir.join("stage1.ckpt"),
        };
        let ck = Checkpoint::load(&path)?;
        let m = ck.model.clone();
        (Some(ck), m)
    } else {
        (None, config.model.clone())
    };
    let set = TrainSet::load(&manifest, &model_config)?;
    create_dir(&run_dir)?;
    write_file(&run_dir.join(format!("config_stage{stage}.toml")), &config.to_toml())?;
    let log_path = run_dir.join(format!("metrics_stage{stage}.jsonl"));
    let mut log = fs::File::create(&log_path).map_err(|e| refvsr::Error::io(&log_path, e))?;
    let ckpt_dir = run_dir.join(format!("checkpoints_stage{stage}"));
    let mut hooks = TrainHooks {
        log: Some(&mut log),
        checkpoint_dir: Some(&ckpt_dir),
    };
    let outcome = match &init {
        Some(ck) => train_stage2(ck, &set, &config, &mut hooks)?,
        None => train_stage1(&set, &config, &mut hooks)?,
    };
    let path = run_dir.join(format!("stage{stage}.ckpt"));
    outcome.checkpoint.save(&path)?;
    if let Some(last) = outcome.log.last() {
        let val = last.psnr_val.map_or("-".to_string(), |p| format!("{p:.3}"));
        println!("step {}\tloss {:.6}\tpsnr_val {val}", last.step, last.loss);
    }
    println!("checkpoint\t{}", path.display());
    Ok(path)
}

/// Run `f` over `items` on up to `jobs` threads, keeping the input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> CliResult<R> + Sync) -> CliResult<Vec<R>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

pub fn cmd_eval(cli: &Cli, a: &EvalArgs) -> CliResult<(PathBuf, PathBuf)> {
    let config = load_config(cli, &a.overrides.overrides, &[])?;
    let rings = FovRing::chain(&a.rings).map_err(|e| CliError::Usage(e.to_string()))?;
    let out = output_path(&cli.workdir, &a.out)?;
    let ck = Checkpoint::load(&input_path(&cli.workdir, &a.checkpoint))?;
    let model = ck.build_model()?;
    let manifest = load_manifest(cli, &config)?;
    let entries: Vec<_> = manifest.split(a.split).cloned().collect();
    if entries.is_empty() {
        return Err(CliError::Core(refvsr::Error::Config(format!("the {} split is empty", a.split))));
    }
    if let Some(e) = entries.iter().find(|e| !e.path.join("gt").is_dir()) {
        return Err(CliError::Core(refvsr::Error::Config(format!(
            "clip `{}` has no gt stream to evaluate against",
            e.clip_id
        ))));
    }
    let (s, m) = (model.config.scale, model.config.ref_magnification);
    let scores: Vec<(ClipScore, Option<ClipScore>)> = par_map(&entries, cli.jobs, |e| {
        let sample = refvsr::data::load_triplet(&e.path, s, m)?;
        let sr = model.super_resolve(&sample.lr, &sample.reference, &config.flow)?;
        let score = fov_ring_metrics(&e.clip_id, &sr, &sample.gt, &rings)?;
        let base = if a.baseline {
            Some(fov_ring_metrics(&e.clip_id, &bicubic_clip(&sample.lr, s)?, &sample.gt, &rings)?)
        } else {
            None
        };
        Ok((score, base))
    })?;
    let (model_scores, base_scores): (Vec<_>, Vec<_>) = scores.into_iter().unzip();
    let report = MetricReport::new(model_scores)?;
    let json = out.join("report.json");
    let text = out.join("report.txt");
    write_file(&json, &report.to_json())?;
    write_file(&text, &report.to_text())?;
    print!("{}", report.to_text());
    if a.baseline {
        let base = MetricReport::new(base_scores.into_iter().flatten().collect())?;
        write_file(&out.join("bicubic.json"), &base.to_json())?;
        write_file(&out.join("bicubic.txt"), &base.to_text())?;
        println!("# bicubic");
        print!("{}", base.to_text());
    }
    Ok((json, text))
}

/// Gray canvas of the SR size with the Ref frame resized into the central
/// region it depicts.
fn ref_panel(reference: &Frame, sh: usize, sw: usize, m: usize) -> refvsr::Result<Frame> {
    let (rh, rw) = (sh / m, sw / m);
    let placed = resample_bicubic(reference, rh, rw)?;
    let (y0, x0) = ((sh - rh) / 2, (sw - rw) / 2);
    let mut canvas = Tensor::full(&[3, sh, sw], 0.5);
    for c in 0..3 {
        for y in 0..rh {
            for x in 0..rw {
                canvas.set3(c, y0 + y, x0 + x, placed.tensor().at3(c, y, x));
            }
        }
    }
    Frame::new(canvas)
}

/// Panels side by side with a 4-pixel white gutter.
fn hstack(panels: &[Frame]) -> refvsr::Result<Frame> {
    const GUTTER: usize = 4;
    let h = panels[0].height();
    let w: usize = panels.iter().map(Frame::width).sum::<usize>() + GUTTER * (panels.len() - 1);
    let mut out = Tensor::full(&[3, h, w], 1.0);
    let mut x0 = 0;
    for p in panels {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..p.width() {
                    out.set3(c, y, x0 + x, p.tensor().at3(c, y, x));
                }
            }
        }
        x0 += p.width() + GUTTER;
    }
    Frame::new(out)
}

pub fn cmd_infer(cli: &Cli, a: &InferArgs) -> CliResult<PathBuf> {
    let config = load_config(cli, &a.overrides.overrides, &[])?;
    let out = output_path(&cli.workdir, &a.out)?;
    let ck = Checkpoint::load(&input_path(&cli.workdir, &a.checkpoint))?;
    let model: RefVsrModel = ck.build_model()?;
    let lr = load_clip(&input_path(&cli.workdir, &a.lr), FRAME_PATTERN)?;
    let reference = load_clip(&input_path(&cli.workdir, &a.reference), FRAME_PATTERN)?;
    let sr = model.super_resolve(&lr, &reference, &config.flow)?;
    let (s, m) = (model.config.scale, model.config.ref_magnification);
    let bicubic = bicubic_clip(&lr, s)?;
    save_clip(&sr, &out)?;
    let grid_dir = out.join("grid");
    create_dir(&grid_dir)?;
    let (sh, sw) = sr.dims();
    for (t, ((f, b), r)) in sr.frames().iter().zip(bicubic.frames()).zip(reference.frames()).enumerate() {
        let grid = hstack(&[f.clone(), b.clone(), ref_panel(r, sh, sw, m)?])?;
        save_frame(&grid, &grid_dir.join(format!("{t:06}.png")))?;
    }
    println!("frames\t{}\t{}", sr.len(), out.display());
    Ok(out)
}

pub fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> CliResult<PathBuf> {
    if a.rows.is_empty() {
        return Err(CliError::Usage("--rows needs at least one row".into()));
    }
    let config = load_config(cli, &a.overrides.overrides, &[])?;
    let out = output_path(&cli.workdir, &a.out)?;
    let manifest = load_manifest(cli, &config)?;
    let set = TrainSet::load(&manifest, &config.model)?;
    let table = run_ablation(&set, &config, &a.rows, a.budget)?;
    let text = out.join("ablation.txt");
    write_file(&text, &table.to_text())?;
    write_file(&out.join("ablation.json"), &table.to_json())?;
    print!("{}", table.to_text());
    Ok(text)
}

