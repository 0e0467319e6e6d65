//! Optimization loops: base pretraining on synthetic clips, appearance
//! adapters from a single sketch, and motion adapters from a reference clip.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{eval_loss, loss_and_grads, Attached, DenoiserWeights, FrameFilter, Gradients, Sample, Trainable};
use crate::diffusion::{LatentEncoder, LatentVideo, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lora::{AdapterRole, AdapterSet, LoraAdapter};
use crate::optim::Adam;
use crate::raster::{render, RasterVideo, SoftnessConfig};
use crate::sketch::SketchFrame;
use crate::synthetic::{make_synthetic_video, motion_prompt, GeometryParams, MotionKind, ShapeKind};

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub rank: usize,
    pub alpha_lora: f64,
    /// Number of fixed `(t, ε)` draws in the held-out set.
    pub eval_draws: usize,
    pub eval_seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 1,
            lr: 1e-3,
            seed: 0,
            rank: 4,
            alpha_lora: 1.0,
            eval_draws: 256,
            eval_seed: 0x5eed,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Argument("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One row of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub spatial: f64,
    pub temporal: f64,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,loss,spatial,temporal\n");
    for r in trace {
        writeln!(s, "{},{:?},{:?},{:?}", r.step, r.loss, r.spatial, r.temporal).unwrap();
    }
    s
}

pub fn write_trace(trace: &[TraceRow], path: &Path) -> Result<()> {
    fs::write(path, trace_to_csv(trace))?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("step,loss,spatial,temporal") {
        return Err(Error::Format(format!("{} is not a loss trace", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad trace row `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(TraceRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: num(f[1])?,
                spatial: num(f[2])?,
                temporal: num(f[3])?,
            })
        })
        .collect()
}

/// Fixed `(t, ε)` draws for measuring training progress.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub draws: Vec<(usize, LatentVideo)>,
}

impl HeldOut {
    pub fn new(sched: &NoiseSchedule, frames: usize, height: usize, width: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = (0..count)
            .map(|_| {
                let t = sched.sample_timestep(&mut rng);
                (t, LatentVideo::randn(frames, height, width, &mut rng))
            })
            .collect();
        Self { draws }
    }

    /// Mean ε-prediction loss of `z0` over the draws.
    pub fn loss(&self, weights: &DenoiserWeights, sched: &NoiseSchedule, z0: &LatentVideo, prompt: &[f64], adapters: &[Attached]) -> Result<f64> {
        let mut total = 0.0;
        for (t, eps) in &self.draws {
            let s = Sample { z0, eps, t: *t, prompt };
            total += eval_loss(weights, sched, &s, adapters, FrameFilter::AllFrames)?;
        }
        Ok(total / self.draws.len() as f64)
    }
}

/// Prompt embedding used by a stage: the table entry if registered,
/// otherwise a fresh trainable embedding started at the table mean.
fn stage_prompt(weights: &DenoiserWeights, prompt: &str) -> (Vec<f64>, bool) {
    match weights.prompts.embedding(prompt) {
        Ok(e) => (e, false),
        Err(_) => (weights.prompts.mean_embedding(), true),
    }
}

fn adapter_params(set: &mut AdapterSet) -> Vec<&mut [f64]> {
    set.adapters_mut()
        .iter_mut()
        .flat_map(|a| {
            let LoraAdapter { b, a, .. } = a;
            [b.as_slice_mut().unwrap(), a.as_slice_mut().unwrap()]
        })
        .collect()
}

fn adapter_grads(g: &[Option<(Array2<f64>, Array2<f64>)>]) -> Vec<&[f64]> {
    g.iter()
        .flatten()
        .flat_map(|(gb, ga)| [gb.as_slice().unwrap(), ga.as_slice().unwrap()])
        .collect()
}

/// Adam step on an adapter set and, optionally, a prompt embedding.
fn apply(opt: &mut Adam, set: &mut AdapterSet, prompt: Option<&mut Vec<f64>>, grads: &Gradients) {
    let mut params = adapter_params(set);
    let mut gs = adapter_grads(&grads.adapters);
    if let Some(p) = prompt {
        params.push(p.as_mut_slice());
        gs.push(grads.prompt.as_deref().expect("prompt gradient requested"));
    }
    opt.step(params, gs);
}

fn check_finite(loss: f64, what: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss at step {step}")))
    }
}

/// Batch-averaged loss and gradients.
#[allow(clippy::too_many_arguments)]
fn batch_step<R: Rng>(
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    z0: &LatentVideo,
    prompt: &[f64],
    adapters: &[Attached],
    trainable: Trainable,
    filter: FrameFilter,
    batch: usize,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let mut total: Option<(f64, Gradients)> = None;
    for _ in 0..batch {
        let t = sched.sample_timestep(rng);
        let eps = LatentVideo::randn(z0.frames, z0.height, z0.width, rng);
        let s = Sample { z0, eps: &eps, t, prompt };
        let (l, g) = loss_and_grads(weights, sched, &s, adapters, trainable, filter)?;
        match &mut total {
            None => total = Some((l, g)),
            Some((tl, tg)) => {
                *tl += l;
                tg.add_scaled(&g, 1.0);
            }
        }
    }
    let (l, mut g) = total.expect("batch is non-empty");
    let k = 1.0 / batch as f64;
    g.scale(k);
    Ok((l * k, g))
}

/// Output of the appearance stage.
#[derive(Debug, Clone)]
pub struct AppearanceResult {
    pub adapters: AdapterSet,
    pub trace: Vec<TraceRow>,
    /// Prompt name and the embedding used (learned if it was new).
    pub prompt: (String, Vec<f64>),
    pub prompt_learned: bool,
}

/// Spatial adapters fitted to a single rendered sketch.
#[allow(clippy::too_many_arguments)]
pub fn train_appearance(
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    encoder: &LatentEncoder,
    sketch: &SketchFrame,
    softness: &SoftnessConfig,
    resolution: (usize, usize),
    prompt: &str,
    cfg: &StageConfig,
) -> Result<AppearanceResult> {
    cfg.validate()?;
    let raster = render(sketch, resolution.0, resolution.1, softness)?;
    if raster.mean() <= 0.0 {
        return Err(Error::Argument("sketch renders empty".into()));
    }
    let z0 = encoder.encode(&RasterVideo::new(vec![raster])?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = weights.config().d_model;
    let mut set = AdapterSet::fresh(AdapterRole::Appearance, d, cfg.rank, cfg.alpha_lora, &mut rng)?;
    let (mut emb, learn) = stage_prompt(weights, prompt);
    let mut opt = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let snapshot = set.clone();
        let att = Attached::all(snapshot.adapters(), 1.0, true);
        let trainable = Trainable { base: false, prompt: learn };
        let (loss, g) = batch_step(weights, sched, &z0, &emb, &att, trainable, FrameFilter::SingleFrame(0), cfg.batch_size, &mut rng)?;
        check_finite(loss, "appearance", step)?;
        apply(&mut opt, &mut set, learn.then_some(&mut emb), &g);
        trace.push(TraceRow {
            step,
            loss,
            spatial: loss,
            temporal: 0.0,
        });
    }
    set.round_to_f32();
    Ok(AppearanceResult {
        adapters: set,
        trace,
        prompt: (prompt.to_string(), emb),
        prompt_learned: learn,
    })
}

/// Output of the motion stage.
#[derive(Debug, Clone)]
pub struct MotionResult {
    /// Reference-appearance adapters (A′), kept only for archiving.
    pub spatial: AdapterSet,
    pub motion: AdapterSet,
    pub trace: Vec<TraceRow>,
    pub prompt: (String, Vec<f64>),
    pub prompt_learned: bool,
}

/// Alternating spatial (single random frame, A′ only) and temporal (full
/// clip, M only) updates on a reference clip.
pub fn train_motion(
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    encoder: &LatentEncoder,
    video: &RasterVideo,
    prompt: &str,
    cfg: &StageConfig,
) -> Result<MotionResult> {
    cfg.validate()?;
    if video.num_frames() < 2 {
        return Err(Error::Argument(format!("motion learning needs at least 2 frames, got {}", video.num_frames())));
    }
    let z0 = encoder.encode(video)?;
    let frames = z0.frames;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = weights.config().d_model;
    let mut spatial = AdapterSet::fresh(AdapterRole::ReferenceAppearance, d, cfg.rank, cfg.alpha_lora, &mut rng)?;
    let mut motion = AdapterSet::fresh(AdapterRole::Motion, d, cfg.rank, cfg.alpha_lora, &mut rng)?;
    let (mut emb, learn) = stage_prompt(weights, prompt);
    let mut opt_s = Adam::new(cfg.lr);
    let mut opt_m = Adam::new(cfg.lr);
    let mut opt_p = Adam::new(cfg.lr);
    let trainable = Trainable { base: false, prompt: learn };
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let i = rng.random_range(0..frames);
        // Spatial step: A′ on frame i, temporal block bypassed.
        let s_snap = spatial.clone();
        let att = Attached::all(s_snap.adapters(), 1.0, true);
        let (ls, gs) = batch_step(weights, sched, &z0, &emb, &att, trainable, FrameFilter::SingleFrame(i), cfg.batch_size, &mut rng)?;
        check_finite(ls, "spatial", step)?;
        apply(&mut opt_s, &mut spatial, None, &gs);
        // Temporal step: M on the full clip through the current A′.
        let s_snap = spatial.clone();
        let m_snap = motion.clone();
        let mut att = Attached::all(s_snap.adapters(), 1.0, false);
        att.extend(Attached::all(m_snap.adapters(), 1.0, true));
        let (lt, gt) = batch_step(weights, sched, &z0, &emb, &att, trainable, FrameFilter::AllFrames, cfg.batch_size, &mut rng)?;
        check_finite(lt, "temporal", step)?;
        // `gt.adapters` holds None for the frozen A′ slots, so only M moves.
        apply(&mut opt_m, &mut motion, None, &gt);
        if learn {
            let gp: Vec<f64> = gs
                .prompt
                .as_ref()
                .unwrap()
                .iter()
                .zip(gt.prompt.as_ref().unwrap())
                .map(|(a, b)| a + b)
                .collect();
            opt_p.step_flat(&mut emb, &gp);
        }
        trace.push(TraceRow {
            step,
            loss: ls + lt,
            spatial: ls,
            temporal: lt,
        });
    }
    spatial.round_to_f32();
    motion.round_to_f32();
    Ok(MotionResult {
        spatial,
        motion,
        trace,
        prompt: (prompt.to_string(), emb),
        prompt_learned: learn,
    })
}

/// Subject and motion prompts covered by pretraining.
pub fn pretrain_vocabulary() -> Vec<String> {
    let mut v = Vec::new();
    for shape in ShapeKind::ALL {
        v.push(shape.subject());
        for kind in MotionKind::ALL {
            v.push(motion_prompt(&shape.subject(), kind));
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub frames: usize,
    pub resolution: (usize, usize),
    /// Probability that an example is a single still frame with the subject prompt.
    pub still_fraction: f64,
    /// Probability that an example is a motionless clip (one frame repeated)
    /// with the subject prompt.
    pub static_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            lr: 1e-3,
            seed: 0,
            frames: 16,
            resolution: (64, 64),
            still_fraction: 0.3,
            static_fraction: 0.2,
        }
    }
}

/// One randomly drawn pretraining example: latent clip and its prompt.
pub fn pretrain_example<R: Rng>(cfg: &PretrainConfig, encoder: &LatentEncoder, rng: &mut R) -> Result<(LatentVideo, String)> {
    let geom = GeometryParams::sample(rng);
    let kind = MotionKind::ALL[rng.random_range(0..MotionKind::ALL.len())];
    let clip = make_synthetic_video(kind, cfg.frames, cfg.resolution.0, cfg.resolution.1, &geom)?;
    let z = encoder.encode(&clip.video)?;
    let subject = geom.shape.subject();
    let u: f64 = rng.random();
    if u < cfg.still_fraction {
        let k = rng.random_range(0..cfg.frames);
        Ok((z.single_frame(k), subject))
    } else if u < cfg.still_fraction + cfg.static_fraction {
        let k = rng.random_range(0..cfg.frames);
        let one = z.frame(k).to_vec();
        let data = (0..z.frames).flat_map(|_| one.iter().copied()).collect();
        Ok((z.with_data(data), subject))
    } else {
        Ok((z, motion_prompt(&subject, kind)))
    }
}

/// Full-parameter training of the base model. Returns the loss trace.
pub fn pretrain(weights: &mut DenoiserWeights, sched: &NoiseSchedule, encoder: &LatentEncoder, cfg: &PretrainConfig) -> Result<Vec<TraceRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    let trainable = Trainable { base: true, prompt: true };
    for step in 0..cfg.steps {
        let mut total = 0.0;
        let mut acc: Option<DenoiserWeights> = None;
        for _ in 0..cfg.batch_size {
            let (z0, prompt) = pretrain_example(cfg, encoder, &mut rng)?;
            let id = weights.prompts.id(&prompt)?;
            let emb = weights.prompts.embedding(&prompt)?;
            let t = sched.sample_timestep(&mut rng);
            let eps = LatentVideo::randn(z0.frames, z0.height, z0.width, &mut rng);
            let s = Sample { z0: &z0, eps: &eps, t, prompt: &emb };
            let (l, g) = loss_and_grads(weights, sched, &s, &[], trainable, FrameFilter::AllFrames)?;
            total += l;
            let mut gb = g.base.expect("base gradients requested");
            // Route the prompt gradient into its table row.
            gb.prompt_row_add(id, g.prompt.as_deref().expect("prompt gradient requested"));
            match &mut acc {
                None => acc = Some(gb),
                Some(a) => {
                    for (x, y) in a.tensors_mut().into_iter().zip(gb.tensors()) {
                        x.iter_mut().zip(y.1).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let loss = total / cfg.batch_size as f64;
        check_finite(loss, "pretraining", step)?;
        let mut acc = acc.expect("batch is non-empty");
        let k = 1.0 / cfg.batch_size as f64;
        for t in acc.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
        let grads: Vec<Vec<f64>> = acc.tensors().into_iter().map(|t| t.1.to_vec()).collect();
        opt.step(weights.tensors_mut(), grads.iter().map(Vec::as_slice).collect());
        trace.push(TraceRow {
            step,
            loss,
            spatial: loss,
            temporal: 0.0,
        });
    }
    Ok(trace)
}

/// Fixed held-out pretraining examples with their own draws.
pub fn pretrain_heldout_loss(weights: &DenoiserWeights, sched: &NoiseSchedule, encoder: &LatentEncoder, cfg: &PretrainConfig, count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..count {
        let (z0, prompt) = pretrain_example(cfg, encoder, &mut rng)?;
        let emb = weights.prompts.embedding(&prompt)?;
        let t = sched.sample_timestep(&mut rng);
        let eps = LatentVideo::randn(z0.frames, z0.height, z0.width, &mut rng);
        let s = Sample { z0: &z0, eps: &eps, t, prompt: &emb };
        total += eval_loss(weights, sched, &s, &[], FrameFilter::AllFrames)?;
    }
    Ok(total / count as f64)
}

/// Moving average with window `w` (length `n − w + 1`).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || values.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - w + 1);
    let mut sum: f64 = values[..w].iter().sum();
    out.push(sum / w as f64);
    for i in w..values.len() {
        sum += values[i] - values[i - w];
        out.push(sum / w as f64);
    }
    out
}
