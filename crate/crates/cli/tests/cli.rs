//! End-to-end runs of the `refvsrpp` binary in scratch working directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use refvsr::checkpoint::Checkpoint;
use refvsr::data::{load_clip, load_frame};
use refvsr::network::{ModelConfig, RefVsrModel};

const TINY: &str = r#"
[model]
channels = 4
encoder_blocks = 1
ref_fusion_blocks = 1
sr_fusion_blocks = 1
upsampler_blocks = 1

[train]
steps = 3
patch_crop = 8
clip_len = 2
val_every = 0
val_clips = 1

[flow]
provider = "zero"
"#;

fn refvsrpp(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refvsrpp"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(out: Output, code: i32, prefix: &str) -> String {
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(out.status.code(), Some(code), "stderr: {stderr}");
    assert!(stderr.starts_with(prefix), "stderr: {stderr}");
    assert_eq!(stderr.trim_end().lines().count(), 1, "stderr: {stderr}");
    stderr
}

/// A scratch directory holding `work/` with the tiny config, so writes
/// next to the working directory can be detected.
fn scratch() -> (tempfile::TempDir, PathBuf) {
    let root = tempfile::tempdir().unwrap();
    let work = root.path().join("work");
    fs::create_dir(&work).unwrap();
    fs::write(work.join("tiny.toml"), TINY).unwrap();
    (root, work)
}

fn generate(work: &Path, clips: &str, size: &str, frames: &str) -> String {
    ok(refvsrpp(
        work,
        &["--seed", "3", "generate-data", "--synthetic", clips, "--size", size, "--frames", frames, "--splits", "0.8,0.1,0.1"],
    ))
}

fn train(work: &Path) -> PathBuf {
    ok(refvsrpp(work, &["--seed", "5", "--config", "tiny.toml", "train", "--stage", "1"]));
    work.join("runs/default/stage1.ckpt")
}

#[test]
fn generate_data_splits_and_writes_the_layout() {
    let (_root, work) = scratch();
    let out = generate(&work, "10", "64", "2");
    assert!(out.contains("train\t8") && out.contains("val\t1") && out.contains("test\t1"), "{out}");
    let first = fs::read(work.join("data/manifest.tsv")).unwrap();
    generate(&work, "10", "64", "2");
    assert_eq!(fs::read(work.join("data/manifest.tsv")).unwrap(), first);
    let clip = work.join("data/clip000");
    for (stream, side) in [("lr", 16), ("ref", 16), ("gt", 64), ("tele", 16)] {
        let c = load_clip(&clip.join(stream), "%06d.png").unwrap();
        assert_eq!((c.len(), c.dims()), (2, (side, side)), "{stream}");
    }
}

#[test]
fn scale_four_on_256_frames_gives_64_pixel_inputs() {
    let (_root, work) = scratch();
    generate(&work, "1", "256", "1");
    let clip = work.join("data/clip000");
    assert_eq!(load_frame(&clip.join("lr/000000.png")).unwrap().dims(), (64, 64));
    assert_eq!(load_frame(&clip.join("ref/000000.png")).unwrap().dims(), (64, 64));
    assert_eq!(load_frame(&clip.join("gt/000000.png")).unwrap().dims(), (256, 256));
}

#[test]
fn seeded_pipeline_is_reproducible_and_stays_in_the_workdir() {
    let (root_a, a) = scratch();
    let (_root_b, b) = scratch();
    for work in [&a, &b] {
        generate(work, "10", "32", "3");
        train(work);
        ok(refvsrpp(
            work,
            &["--config", "tiny.toml", "eval", "--checkpoint", "runs/default/stage1.ckpt", "--rings", "0,50,100", "--baseline"],
        ));
    }
    for file in ["runs/default/stage1.ckpt", "reports/eval/report.json", "reports/eval/report.txt", "data/manifest.tsv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let report = fs::read_to_string(a.join("reports/eval/report.txt")).unwrap();
    assert!(report.contains("0-50%") && report.contains("50-100%"), "{report}");
    assert!(!report.contains("50-60%"));
    assert!(a.join("reports/eval/bicubic.json").is_file());
    assert!(a.join("runs/default/metrics_stage1.jsonl").is_file());
    assert!(a.join("runs/default/config_stage1.toml").is_file());
    let siblings: Vec<_> = fs::read_dir(root_a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(siblings, vec!["work"]);
}

#[test]
fn infer_writes_frames_and_grids() {
    let (_root, work) = scratch();
    generate(&work, "1", "256", "5");
    let ck = Checkpoint::initial(&RefVsrModel::new(ModelConfig::tiny(4)).unwrap());
    ck.save(&work.join("init.ckpt")).unwrap();
    let out = ok(refvsrpp(
        &work,
        &["--config", "tiny.toml", "infer", "--checkpoint", "init.ckpt", "--lr", "data/clip000/lr", "--ref", "data/clip000/ref"],
    ));
    assert!(out.starts_with("frames\t5"), "{out}");
    let sr = load_clip(&work.join("sr"), "%06d.png").unwrap();
    assert_eq!((sr.len(), sr.dims()), (5, (256, 256)));
    let grid = load_clip(&work.join("sr/grid"), "%06d.png").unwrap();
    assert_eq!(grid.len(), 5);
    assert_eq!(grid.dims().0, 256);
    assert!(grid.dims().1 > 3 * 256);
}

#[test]
fn usage_errors_exit_with_code_2() {
    let (_root, work) = scratch();
    fails_with(refvsrpp(&work, &["ablate", "--rows"]), 2, "E_USAGE");
    fails_with(refvsrpp(&work, &["frobnicate"]), 2, "E_USAGE");
    fails_with(refvsrpp(&work, &["generate-data", "--synthetic", "2", "--out", "../escape"]), 2, "E_USAGE");
    fails_with(refvsrpp(&work, &["generate-data", "--synthetic", "2", "--out", "/tmp/escape"]), 2, "E_USAGE");
    fails_with(refvsrpp(&work, &["generate-data", "--synthetic", "2", "--splits", "0.5,0.5"]), 2, "E_USAGE");
    fails_with(refvsrpp(&work, &["train", "--name", "../other"]), 2, "E_USAGE");
    assert!(!work.parent().unwrap().join("escape").exists());
    assert!(refvsrpp(&work, &["--help"]).status.success());
}

#[test]
fn config_and_version_errors_exit_with_code_3() {
    let (_root, work) = scratch();
    generate(&work, "4", "32", "2");
    fs::write(work.join("bogus.ckpt"), "not a checkpoint\n").unwrap();
    fails_with(
        refvsrpp(&work, &["--config", "tiny.toml", "eval", "--checkpoint", "bogus.ckpt", "--split", "train"]),
        3,
        "E_VERSION",
    );
    Checkpoint::initial(&RefVsrModel::new(ModelConfig::tiny(4)).unwrap()).save(&work.join("fresh.ckpt")).unwrap();
    fails_with(
        refvsrpp(&work, &["--config", "tiny.toml", "train", "--stage", "2", "--init", "fresh.ckpt"]),
        3,
        "E_CONFIG",
    );
    fails_with(refvsrpp(&work, &["--config", "tiny.toml", "train", "model.channels=0"]), 3, "E_CONFIG");
}

#[test]
fn missing_inputs_exit_with_code_4() {
    let (_root, work) = scratch();
    fails_with(refvsrpp(&work, &["--config", "tiny.toml", "train"]), 4, "E_IO");
    fails_with(refvsrpp(&work, &["--config", "missing.toml", "train"]), 4, "E_IO");
}
