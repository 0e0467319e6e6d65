use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sketchanim::pipeline::{cmd_eval, Layout, OutputLock};
use sketchanim::{CliError, RunConfig};
use sketchanim_core::metrics::scores_from_csv;

const SMALL: &[&str] = &["--resolution", "32", "--frames", "6", "--set", "d_model=16", "--set", "eval_draws=8"];

fn bin(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sketchanim"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = bin(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

/// synth → pretrain → stage1 → stage2 → stage3 at a tiny size.
fn run_all(out: &Path) {
    let sketch = out.join("demo_sketch.svg");
    let video = out.join("video");
    let (s, v) = (sketch.to_str().unwrap(), video.to_str().unwrap());
    ok(out, &["synth"]);
    ok(out, &["pretrain", "--steps", "20"]);
    ok(out, &["stage1", "--sketch", s, "--steps", "15"]);
    ok(out, &["stage2", "--video-dir", v, "--steps", "10"]);
    ok(out, &["stage3", "--sketch", s, "--steps", "20", "--snapshot-every", "10"]);
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn reruns_with_the_same_seed_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path());
    run_all(b.path());
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.contains_key(Path::new("a_lora.skad")));
    assert!(fa.contains_key(Path::new("m_lora.skad")));
    assert!(fa.contains_key(Path::new("archive/a_prime_lora.skad")));
    assert!(fa.contains_key(Path::new("snapshots/iter_00020.svg")));
    assert!(!fa.keys().any(|k| k.to_string_lossy().contains("lock")));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(fb[k] == *v, "{} differs between runs", k.display());
    }

    // A different seed changes the adapters.
    let c = tempfile::tempdir().unwrap();
    fs::copy(a.path().join("base.skdw"), c.path().join("base.skdw")).unwrap();
    let s = a.path().join("demo_sketch.svg");
    ok(c.path(), &["stage1", "--sketch", s.to_str().unwrap(), "--steps", "15", "--seed", "7"]);
    assert_ne!(fs::read(c.path().join("a_lora.skad")).unwrap(), fa[Path::new("a_lora.skad")]);
}

#[test]
fn stage3_without_motion_adapters_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    run_all(dir.path());
    fs::remove_file(dir.path().join("m_lora.skad")).unwrap();
    let s = dir.path().join("demo_sketch.svg");
    let o = bin(dir.path(), &["stage3", "--sketch", s.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("m_lora.skad"), "{err}");
    assert!(!err.contains("a_lora.skad"), "{err}");
}

#[test]
fn eval_scores_parse_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    run_all(dir.path());
    let mut cfg = RunConfig::default();
    for a in SMALL.chunks(2) {
        match a[0] {
            "--set" => {
                let (k, v) = a[1].split_once('=').unwrap();
                cfg.set(k, v).unwrap();
            }
            flag => cfg.set(&flag[2..], a[1]).unwrap(),
        }
    }
    cfg.out = dir.path().to_path_buf();
    cfg.sketch = Some(dir.path().join("demo_sketch.svg"));
    cfg.iterations = 10;
    let rows = cmd_eval(&cfg, true).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(names, ["full", "w/o-M-LoRA", "w/o-A-LoRA"]);
    let layout = Layout::new(dir.path());
    let back = scores_from_csv(&fs::read_to_string(layout.scores_csv()).unwrap()).unwrap();
    assert_eq!(back.len(), rows.len());
    for ((name, r), (n, a, m, t)) in rows.iter().zip(&back) {
        assert_eq!(name, n);
        assert_eq!((r.appearance, r.motion, r.temporal), (*a, *m, *t));
    }
    let text = fs::read_to_string(layout.scores_txt()).unwrap();
    for col in ["appearance", "motion", "temporal"] {
        assert!(text.contains(col));
    }
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "rank = 4\nlamda_a = 0.5\n").unwrap();
    let o = bin(dir.path(), &["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda_a"));

    let o = bin(dir.path(), &["synth", "--set", "resolution=30"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(dir.path(), &["stage3", "--prompt", "a house"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# synthetic clip\nframes = 3\nkind = bounce\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sketchanim"))
        .args(["synth", "--resolution", "32", "--frames", "5", "--out"])
        .arg(dir.path())
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read_dir(dir.path().join("video")).unwrap().count(), 5);
}

#[test]
fn a_locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let lock = OutputLock::acquire(dir.path()).unwrap();
    let o = bin(dir.path(), &["synth"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
    assert!(matches!(OutputLock::acquire(dir.path()), Err(CliError::Locked(_))));
    drop(lock);
    ok(dir.path(), &["synth"]);
}

#[test]
fn render_writes_one_frame_per_animation_frame() {
    let dir = tempfile::tempdir().unwrap();
    run_all(dir.path());
    let svg = dir.path().join("animation.svg");
    ok(dir.path(), &["render", "--sketch", svg.to_str().unwrap()]);
    assert_eq!(fs::read_dir(dir.path().join("render")).unwrap().count(), 6);
    assert_eq!(fs::read(dir.path().join("render/frame_003.pgm")).unwrap(), fs::read(dir.path().join("frames/frame_003.pgm")).unwrap());
}
