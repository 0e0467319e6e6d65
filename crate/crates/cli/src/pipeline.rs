//! Stage commands. Every artifact lives in the output directory under a
//! fixed name, so later stages find what earlier ones wrote.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchanim_core::denoiser::{load_prompts, load_weights, save_prompts, save_weights, Attached, DenoiserConfig, DenoiserWeights};
use sketchanim_core::lora::{load_adapters, save_adapters, AdapterSet};
use sketchanim_core::metrics::{evaluate, ink_track, reference_from_csv, reference_to_csv, scores_to_csv, scores_to_text, tracks_to_csv, EvalReport};
use sketchanim_core::pgm::{read_video_dir, write_video};
use sketchanim_core::raster::{render, render_video, RasterVideo};
use sketchanim_core::sds::{composite_embedding, diagnostics_to_csv, distill, prompt_subject, DenoiserPredictor, DistillResult};
use sketchanim_core::sketch::{parse_animated_svg, parse_svg, write_animated_svg, write_svg, AnimatedSketch, SketchFrame};
use sketchanim_core::synthetic::{demo_sketch, make_synthetic_video, GeometryParams};
use sketchanim_core::trainer::{pretrain, pretrain_heldout_loss, pretrain_vocabulary, train_appearance, train_motion, write_trace, AppearanceResult, MotionResult};

use crate::config::{derive_seed, DEFAULT_FRAMES};
use crate::{CliError, RunConfig};

pub const LOCK_NAME: &str = ".sketchanim.lock";

/// Held-out examples used for the pretraining summary.
const PRETRAIN_HELDOUT: usize = 64;

/// Artifact names inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn base(&self) -> PathBuf {
        self.p("base.skdw")
    }
    pub fn pretrain_trace(&self) -> PathBuf {
        self.p("pretrain_trace.csv")
    }
    pub fn pretrain_summary(&self) -> PathBuf {
        self.p("pretrain_summary.txt")
    }
    pub fn a_lora(&self) -> PathBuf {
        self.p("a_lora.skad")
    }
    pub fn stage1_trace(&self) -> PathBuf {
        self.p("stage1_trace.csv")
    }
    pub fn sketch_prompt(&self) -> PathBuf {
        self.p("sketch_prompt.txt")
    }
    /// Reference-appearance adapters, kept for inspection only.
    pub fn a_prime_lora(&self) -> PathBuf {
        self.p("archive/a_prime_lora.skad")
    }
    pub fn m_lora(&self) -> PathBuf {
        self.p("m_lora.skad")
    }
    pub fn stage2_trace(&self) -> PathBuf {
        self.p("stage2_trace.csv")
    }
    pub fn motion_prompt(&self) -> PathBuf {
        self.p("motion_prompt.txt")
    }
    pub fn reference_track(&self) -> PathBuf {
        self.p("reference_track.csv")
    }
    pub fn animation(&self) -> PathBuf {
        self.p("animation.svg")
    }
    pub fn frames_dir(&self) -> PathBuf {
        self.p("frames")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.p("diagnostics.csv")
    }
    pub fn snapshots_dir(&self) -> PathBuf {
        self.p("snapshots")
    }
    pub fn scores_csv(&self) -> PathBuf {
        self.p("scores.csv")
    }
    pub fn scores_txt(&self) -> PathBuf {
        self.p("scores.txt")
    }
    pub fn tracks_csv(&self) -> PathBuf {
        self.p("tracks.csv")
    }
    pub fn ablation_dir(&self) -> PathBuf {
        self.p("ablation")
    }
    pub fn synth_video_dir(&self) -> PathBuf {
        self.p("video")
    }
    pub fn synth_track(&self) -> PathBuf {
        self.p("track.csv")
    }
    pub fn demo_sketch(&self) -> PathBuf {
        self.p("demo_sketch.svg")
    }
    pub fn render_dir(&self) -> PathBuf {
        self.p("render")
    }
}

/// Exclusive use of an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(format!("cannot create {}", dir.display()), e))?;
        let path = dir.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(format!("cannot create {}", path.display()), e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn io_err(context: String, source: std::io::Error) -> CliError {
    CliError::Io { context, source }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(parent) => fs::create_dir_all(parent).map_err(|e| io_err(format!("cannot create {}", parent.display()), e)),
        None => Ok(()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| io_err(format!("cannot write {}", path.display()), e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(format!("cannot read {}", path.display()), e))
}

/// Fail with every absent path listed.
pub fn require(paths: &[PathBuf]) -> Result<(), CliError> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Missing(missing))
    }
}

fn sketch_path(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.sketch.clone().ok_or_else(|| CliError::Config("no sketch given (set `sketch` or pass --sketch)".into()))
}

fn video_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.video_dir.clone().ok_or_else(|| CliError::Config("no reference video given (set `video_dir` or pass --video-dir)".into()))
}

fn load_sketch(path: &Path) -> Result<SketchFrame, CliError> {
    Ok(parse_svg(&read_text(path)?)?)
}

fn load_base(cfg: &RunConfig, layout: &Layout) -> Result<DenoiserWeights, CliError> {
    let w = load_weights(&layout.base())?;
    let c = w.config();
    let lat = cfg.latent_size();
    if (c.latent_height, c.latent_width) != (lat, lat) {
        return Err(CliError::Config(format!(
            "base weights expect a {}x{} latent but resolution {} with pool {} gives {lat}x{lat}",
            c.latent_height, c.latent_width, cfg.resolution, cfg.pool
        )));
    }
    Ok(w)
}

fn single_prompt(path: &Path) -> Result<(String, Vec<f64>), CliError> {
    let mut v = load_prompts(path)?;
    if v.len() != 1 {
        return Err(CliError::Core(sketchanim_core::Error::Format(format!("{} should hold exactly one prompt", path.display()))));
    }
    Ok(v.remove(0))
}

fn log_trace_ends(stage: &str, losses: impl Iterator<Item = f64> + Clone) {
    let n = losses.clone().count();
    let k = (n / 10).max(1);
    let head: f64 = losses.clone().take(k).sum::<f64>() / k as f64;
    let tail: f64 = losses.skip(n - k).sum::<f64>() / k as f64;
    info!("{stage}: mean loss over first {k} steps {head:.4}, last {k} steps {tail:.4}");
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainSummary {
    pub heldout_before: f64,
    pub heldout_after: f64,
}

/// Full-parameter training of the base denoiser on the synthetic mixture.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainSummary, CliError> {
    let layout = Layout::new(&cfg.out);
    let _lock = OutputLock::acquire(&cfg.out)?;
    let frames = cfg.frames.unwrap_or(DEFAULT_FRAMES);
    let lat = cfg.latent_size();
    let dcfg = DenoiserConfig::new(cfg.d_model, cfg.patch, lat, lat, frames)?;
    let vocab = pretrain_vocabulary();
    let names: Vec<&str> = vocab.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 100));
    let mut w = DenoiserWeights::init(dcfg, &names, &mut rng)?;
    let sched = cfg.schedule()?;
    let enc = cfg.encoder()?;
    let pcfg = cfg.pretrain_config(frames);
    let eval_seed = derive_seed(cfg.eval_seed, 100);
    let before = pretrain_heldout_loss(&w, &sched, &enc, &pcfg, PRETRAIN_HELDOUT, eval_seed)?;
    info!("pretraining {} parameters for {} steps", w.num_parameters(), pcfg.steps);
    let trace = pretrain(&mut w, &sched, &enc, &pcfg)?;
    let after = pretrain_heldout_loss(&w, &sched, &enc, &pcfg, PRETRAIN_HELDOUT, eval_seed)?;
    log_trace_ends("pretrain", trace.iter().map(|r| r.loss));
    info!("pretrain held-out loss {before:.4} -> {after:.4}");
    save_weights(&w, &layout.base())?;
    write_trace(&trace, &layout.pretrain_trace())?;
    write(&layout.pretrain_summary(), format!("heldout_before = {before:?}\nheldout_after = {after:?}\n"))?;
    Ok(PretrainSummary {
        heldout_before: before,
        heldout_after: after,
    })
}

/// Appearance adapters for the sketch.
pub fn cmd_stage1(cfg: &RunConfig) -> Result<AppearanceResult, CliError> {
    let layout = Layout::new(&cfg.out);
    let sketch = sketch_path(cfg)?;
    require(&[layout.base(), sketch.clone()])?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let w = load_base(cfg, &layout)?;
    let frame = load_sketch(&sketch)?;
    let res = train_appearance(
        &w,
        &cfg.schedule()?,
        &cfg.encoder()?,
        &frame,
        &cfg.softness()?,
        (cfg.resolution, cfg.resolution),
        &cfg.sketch_prompt,
        &cfg.stage_config(1),
    )?;
    log_trace_ends("stage 1", res.trace.iter().map(|r| r.loss));
    if res.prompt_learned {
        info!("prompt `{}` is new to the base model; its embedding was learned", res.prompt.0);
    }
    save_adapters(&res.adapters, &layout.a_lora())?;
    write_trace(&res.trace, &layout.stage1_trace())?;
    save_prompts(std::slice::from_ref(&res.prompt), &layout.sketch_prompt())?;
    Ok(res)
}

/// Reference clip, cut to the configured frame count.
pub fn load_reference_video(cfg: &RunConfig, max_frames: usize) -> Result<RasterVideo, CliError> {
    let dir = video_dir(cfg)?;
    require(std::slice::from_ref(&dir))?;
    let video = read_video_dir(&dir)?;
    let f0 = &video.frames()[0];
    if (f0.height, f0.width) != (cfg.resolution, cfg.resolution) {
        return Err(CliError::Config(format!(
            "reference frames are {}x{} but resolution is {}",
            f0.height, f0.width, cfg.resolution
        )));
    }
    let frames = cfg.frames.unwrap_or(video.num_frames());
    if frames > video.num_frames() {
        return Err(CliError::Config(format!("frames = {frames} but the reference video has {}", video.num_frames())));
    }
    if frames > max_frames {
        return Err(CliError::Config(format!("{frames} frames exceed the base model's limit of {max_frames}")));
    }
    Ok(RasterVideo::new(video.frames()[..frames].to_vec())?)
}

/// Reference-appearance and motion adapters for the reference clip.
pub fn cmd_stage2(cfg: &RunConfig) -> Result<MotionResult, CliError> {
    let layout = Layout::new(&cfg.out);
    let dir = video_dir(cfg)?;
    require(&[layout.base(), dir])?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let w = load_base(cfg, &layout)?;
    let video = load_reference_video(cfg, w.config().max_frames)?;
    let res = train_motion(&w, &cfg.schedule()?, &cfg.encoder()?, &video, &cfg.motion_prompt, &cfg.stage_config(2))?;
    log_trace_ends("stage 2", res.trace.iter().map(|r| r.loss));
    info!("motion adapter |ΔW| = {:.4}", res.motion.delta_norm());
    ensure_parent(&layout.a_prime_lora())?;
    save_adapters(&res.spatial, &layout.a_prime_lora())?;
    save_adapters(&res.motion, &layout.m_lora())?;
    write_trace(&res.trace, &layout.stage2_trace())?;
    save_prompts(std::slice::from_ref(&res.prompt), &layout.motion_prompt())?;
    write(&layout.reference_track(), reference_to_csv(&ink_track(&video)))?;
    Ok(res)
}

/// Everything distillation needs, loaded from a finished stage 1 and 2.
pub struct DistillInputs {
    pub weights: DenoiserWeights,
    pub appearance: AdapterSet,
    pub motion: AdapterSet,
    pub prompt: Vec<f64>,
    pub sketch: SketchFrame,
    pub frames: usize,
}

pub fn load_distill_inputs(cfg: &RunConfig) -> Result<DistillInputs, CliError> {
    let layout = Layout::new(&cfg.out);
    let sketch = sketch_path(cfg)?;
    require(&[layout.base(), layout.a_lora(), layout.m_lora(), layout.sketch_prompt(), layout.motion_prompt(), sketch.clone()])?;
    let weights = load_base(cfg, &layout)?;
    let appearance = load_adapters(&layout.a_lora())?;
    let motion = load_adapters(&layout.m_lora())?;
    let (_, sketch_emb) = single_prompt(&layout.sketch_prompt())?;
    let (motion_name, motion_emb) = single_prompt(&layout.motion_prompt())?;
    // Swap the reference subject for the sketch subject when the base knows it.
    let reference = prompt_subject(&motion_name).and_then(|s| weights.prompts.embedding(s).ok());
    let prompt = composite_embedding(&motion_emb, &sketch_emb, reference.as_deref());
    let frames = match cfg.frames {
        Some(f) => f,
        None if layout.reference_track().exists() => reference_from_csv(&read_text(&layout.reference_track())?)?.len(),
        None => weights.config().max_frames,
    };
    if frames > weights.config().max_frames {
        return Err(CliError::Config(format!("{frames} frames exceed the base model's limit of {}", weights.config().max_frames)));
    }
    Ok(DistillInputs {
        weights,
        appearance,
        motion,
        prompt,
        sketch: load_sketch(&sketch)?,
        frames,
    })
}

/// Distill the prior merged at scales `(lambda_a, lambda_m)`.
pub fn distill_with(cfg: &RunConfig, inputs: &DistillInputs, lambda_a: f64, lambda_m: f64) -> Result<DistillResult, CliError> {
    let sched = cfg.schedule()?;
    let mut scfg = cfg.sds_config(&sched)?;
    scfg.lambda_a = lambda_a;
    scfg.lambda_m = lambda_m;
    let mut adapters = Attached::all(inputs.appearance.adapters(), lambda_a, false);
    adapters.extend(Attached::all(inputs.motion.adapters(), lambda_m, false));
    let predictor = DenoiserPredictor {
        weights: &inputs.weights,
        adapters,
        prompt: inputs.prompt.clone(),
    };
    Ok(distill(&inputs.sketch, inputs.frames, &predictor, &sched, &cfg.encoder()?, &scfg)?)
}

fn write_animation(cfg: &RunConfig, anim: &AnimatedSketch, svg: &Path, frames_dir: &Path) -> Result<RasterVideo, CliError> {
    write(svg, write_animated_svg(anim, cfg.fps)?)?;
    let video = render_video(anim, cfg.resolution, cfg.resolution, &cfg.softness()?)?;
    write_video(frames_dir, "frame_", &video)?;
    Ok(video)
}

/// Score distillation into per-frame control points.
pub fn cmd_stage3(cfg: &RunConfig) -> Result<DistillResult, CliError> {
    let layout = Layout::new(&cfg.out);
    let inputs = load_distill_inputs(cfg)?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    info!("distilling {} frames for {} iterations", inputs.frames, cfg.iterations);
    let res = distill_with(cfg, &inputs, cfg.lambda_a, cfg.lambda_m)?;
    if let Some(last) = res.diagnostics.last() {
        info!("final mean displacement {:.4}", last.mean_displacement);
    }
    write_animation(cfg, &res.animation, &layout.animation(), &layout.frames_dir())?;
    write(&layout.diagnostics(), diagnostics_to_csv(&res.diagnostics))?;
    for (it, snap) in &res.snapshots {
        let name = format!("iter_{it:05}");
        let dir = layout.snapshots_dir();
        write_animation(cfg, snap, &dir.join(format!("{name}.svg")), &dir.join(name))?;
    }
    Ok(res)
}

pub const FULL: &str = "full";
pub const WITHOUT_M: &str = "w/o-M-LoRA";
pub const WITHOUT_A: &str = "w/o-A-LoRA";

/// Score the stage 3 animation; with `ablation`, also distill and score the
/// prior without motion adapters (λ₂ = 0) and without appearance adapters
/// (λ₁ = 0).
pub fn cmd_eval(cfg: &RunConfig, ablation: bool) -> Result<Vec<(String, EvalReport)>, CliError> {
    let layout = Layout::new(&cfg.out);
    let sketch = sketch_path(cfg)?;
    require(&[layout.animation(), layout.reference_track(), sketch.clone()])?;
    let inputs = if ablation { Some(load_distill_inputs(cfg)?) } else { None };
    let _lock = OutputLock::acquire(&cfg.out)?;
    let soft = cfg.softness()?;
    let sketch_raster = render(&load_sketch(&sketch)?, cfg.resolution, cfg.resolution, &soft)?;
    let reference = reference_from_csv(&read_text(&layout.reference_track())?)?;
    let anim = parse_animated_svg(&read_text(&layout.animation())?)?;
    let video = render_video(&anim, cfg.resolution, cfg.resolution, &soft)?;
    let mut rows = vec![(FULL.to_string(), evaluate(&video, &sketch_raster, &reference)?)];
    if let Some(inputs) = &inputs {
        for (name, la, lm, file) in [(WITHOUT_M, cfg.lambda_a, 0.0, "no_m"), (WITHOUT_A, 0.0, cfg.lambda_m, "no_a")] {
            info!("ablation {name}: distilling with λ₁={la}, λ₂={lm}");
            let res = distill_with(cfg, inputs, la, lm)?;
            let dir = layout.ablation_dir();
            let v = write_animation(cfg, &res.animation, &dir.join(format!("{file}.svg")), &dir.join(file))?;
            rows.push((name.to_string(), evaluate(&v, &sketch_raster, &reference)?));
        }
    }
    write(&layout.scores_csv(), scores_to_csv(&rows))?;
    write(&layout.scores_txt(), scores_to_text(&rows))?;
    write(&layout.tracks_csv(), tracks_to_csv(&rows[0].1))?;
    Ok(rows)
}

/// Synthetic reference clip with its ground-truth track, plus the demo sketch.
pub fn cmd_synth(cfg: &RunConfig) -> Result<RasterVideo, CliError> {
    let layout = Layout::new(&cfg.out);
    let _lock = OutputLock::acquire(&cfg.out)?;
    let geom = GeometryParams {
        shape: cfg.shape,
        ..Default::default()
    };
    let frames = cfg.frames.unwrap_or(DEFAULT_FRAMES);
    let clip = make_synthetic_video(cfg.kind, frames, cfg.resolution, cfg.resolution, &geom)?;
    write_video(&layout.synth_video_dir(), "frame_", &clip.video)?;
    write(&layout.synth_track(), reference_to_csv(&clip.track))?;
    write(&layout.demo_sketch(), write_svg(&demo_sketch()))?;
    Ok(clip.video)
}

/// Rasterize a static or animated SVG to PGM frames.
pub fn cmd_render(cfg: &RunConfig) -> Result<RasterVideo, CliError> {
    let layout = Layout::new(&cfg.out);
    let sketch = sketch_path(cfg)?;
    require(std::slice::from_ref(&sketch))?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    let anim = parse_animated_svg(&read_text(&sketch)?)?;
    let video = render_video(&anim, cfg.resolution, cfg.resolution, &cfg.softness()?)?;
    write_video(&layout.render_dir(), "frame_", &video)?;
    Ok(video)
}
