//! Score distillation: update the control points of an animated sketch with
//! the noise-prediction residual of a video denoiser, pulled back through the
//! encoder and the soft rasterizer. The denoiser itself is never
//! differentiated.

use std::fmt::Write as _;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{predict_noise, Attached, Conditioning, DenoiserWeights};
use crate::diffusion::{add_noise, LatentEncoder, LatentVideo, NoiseSchedule, TimestepRange};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::raster::{render_video, render_vjp, RasterVideo, SoftnessConfig};
use crate::sketch::{replicate_frames, AnimatedSketch, SketchFrame};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    Constant(f64),
    SigmaSquared,
}

impl Weighting {
    pub fn weight(self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self {
            Self::Constant(w) => w,
            Self::SigmaSquared => sched.sigma(t).powi(2),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("unknown weighting `{s}` (expected constant, constant:<w> or sigma-squared)"));
        match s {
            "constant" => Ok(Self::Constant(1.0)),
            "sigma-squared" => Ok(Self::SigmaSquared),
            _ => {
                let w = s.strip_prefix("constant:").ok_or_else(bad)?.parse::<f64>().map_err(|_| bad())?;
                if w.is_finite() && w >= 0.0 {
                    Ok(Self::Constant(w))
                } else {
                    Err(bad())
                }
            }
        }
    }

    pub fn name(self) -> String {
        match self {
            Self::Constant(w) if w == 1.0 => "constant".into(),
            Self::Constant(w) => format!("constant:{w}"),
            Self::SigmaSquared => "sigma-squared".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdsConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lambda_a: f64,
    pub lambda_m: f64,
    /// Sampling range of `t`; `None` uses the schedule's default range.
    pub t_range: Option<TimestepRange>,
    pub weighting: Weighting,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub softness: SoftnessConfig,
    /// Keep a copy of the animation every this many iterations.
    pub snapshot_every: Option<usize>,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 2e-3,
            lambda_a: 0.5,
            lambda_m: 1.0,
            t_range: None,
            weighting: Weighting::Constant(1.0),
            seed: 0,
            height: 64,
            width: 64,
            softness: SoftnessConfig::default(),
            snapshot_every: None,
        }
    }
}

impl SdsConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Argument("iterations must be at least 1".into()));
        }
        if !(self.lambda_a >= 0.0 && self.lambda_m >= 0.0) {
            return Err(Error::Argument("adapter scales must be non-negative".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(r) = self.t_range {
            if r.min > r.max || r.max >= sched.steps() {
                return Err(Error::Argument(format!("timestep range {}..={} invalid for {} steps", r.min, r.max, sched.steps())));
            }
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::Argument("snapshot interval must be positive".into()));
        }
        self.softness.validate()
    }

    fn range(&self, sched: &NoiseSchedule) -> TimestepRange {
        self.t_range.unwrap_or_else(|| sched.default_range())
    }
}

/// Anything that predicts the noise in `z_t`. The drawn `eps` is passed so
/// oracles can be expressed; real models ignore it.
pub trait NoisePredictor {
    fn predict(&self, z_t: &LatentVideo, t: usize, eps: &LatentVideo) -> Result<LatentVideo>;
}

/// The denoiser with adapters injected on the fly.
pub struct DenoiserPredictor<'a> {
    pub weights: &'a DenoiserWeights,
    pub adapters: Vec<Attached<'a>>,
    pub prompt: Vec<f64>,
}

impl NoisePredictor for DenoiserPredictor<'_> {
    fn predict(&self, z_t: &LatentVideo, t: usize, _eps: &LatentVideo) -> Result<LatentVideo> {
        let cond = Conditioning { prompt: self.prompt.clone(), t };
        predict_noise(self.weights, z_t, &cond, &self.adapters)
    }
}

/// Shared pieces of one gradient evaluation.
pub struct SdsContext<'a> {
    pub sched: &'a NoiseSchedule,
    pub encoder: &'a LatentEncoder,
    pub cfg: &'a SdsConfig,
}

/// One SDS evaluation at a given `(t, ε)`.
#[derive(Debug, Clone)]
pub struct SdsStep {
    /// Gradient laid out like [`AnimatedSketch::params`].
    pub grad: Vec<f64>,
    pub t: usize,
    pub residual: LatentVideo,
    pub video: RasterVideo,
}

/// Pull a latent-space residual back to control points: encoder transpose,
/// then the rasterizer's vector-Jacobian product per frame.
pub fn pull_back(anim: &AnimatedSketch, residual: &LatentVideo, ctx: &SdsContext) -> Result<Vec<f64>> {
    let upstream = ctx.encoder.encode_transpose(residual);
    let mut grad = Vec::with_capacity(anim.params().len());
    for (frame, up) in anim.frames().iter().zip(&upstream) {
        grad.extend(render_vjp(frame, ctx.cfg.height, ctx.cfg.width, &ctx.cfg.softness, up)?);
    }
    Ok(grad)
}

pub fn sds_gradient_at(anim: &AnimatedSketch, predictor: &dyn NoisePredictor, ctx: &SdsContext, t: usize, eps: &LatentVideo) -> Result<SdsStep> {
    let video = render_video(anim, ctx.cfg.height, ctx.cfg.width, &ctx.cfg.softness)?;
    let z0 = ctx.encoder.encode(&video)?;
    let z_t = add_noise(&z0, t, eps, ctx.sched)?;
    let eps_hat = predictor.predict(&z_t, t, eps)?;
    if !eps_hat.same_shape(eps) {
        return Err(Error::Shape("noise prediction shape differs from the latent".into()));
    }
    let w = ctx.cfg.weighting.weight(ctx.sched, t);
    let data = eps_hat.data.iter().zip(&eps.data).map(|(a, b)| w * (a - b)).collect();
    let residual = eps.with_data(data);
    let grad = pull_back(anim, &residual, ctx)?;
    Ok(SdsStep { grad, t, residual, video })
}

/// Draw `(t, ε)` and evaluate the SDS gradient.
pub fn sds_gradient<R: Rng + ?Sized>(anim: &AnimatedSketch, predictor: &dyn NoisePredictor, ctx: &SdsContext, rng: &mut R) -> Result<SdsStep> {
    let t = ctx.cfg.range(ctx.sched).sample(rng);
    let (h, w) = ctx.encoder.latent_size(ctx.cfg.height, ctx.cfg.width)?;
    let eps = LatentVideo::randn(anim.num_frames(), h, w, rng);
    sds_gradient_at(anim, predictor, ctx, t, &eps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRow {
    pub iteration: usize,
    pub t: usize,
    pub grad_norm: f64,
    /// Mean distance of every control point from its starting position.
    pub mean_displacement: f64,
}

pub fn diagnostics_to_csv(rows: &[DiagnosticRow]) -> String {
    let mut s = String::from("iteration,t,grad_norm,mean_displacement\n");
    for r in rows {
        writeln!(s, "{},{},{:?},{:?}", r.iteration, r.t, r.grad_norm, r.mean_displacement).unwrap();
    }
    s
}

pub fn diagnostics_from_csv(text: &str) -> Result<Vec<DiagnosticRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("iteration,t,grad_norm,mean_displacement") {
        return Err(Error::Format("not an SDS diagnostics file".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Format(format!("bad diagnostics row `{l}`"));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(DiagnosticRow {
                iteration: f[0].parse().map_err(|_| bad())?,
                t: f[1].parse().map_err(|_| bad())?,
                grad_norm: f[2].parse().map_err(|_| bad())?,
                mean_displacement: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DistillResult {
    pub animation: AnimatedSketch,
    pub diagnostics: Vec<DiagnosticRow>,
    /// `(iteration, animation after that iteration)`.
    pub snapshots: Vec<(usize, AnimatedSketch)>,
}

/// Mean control-point distance between two animations of the same layout.
pub fn mean_displacement(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() / 2;
    a.chunks_exact(2)
        .zip(b.chunks_exact(2))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
}

/// Replicate the sketch over `frames` frames and run Adam on the control
/// points with SDS gradients.
pub fn distill(
    sketch: &SketchFrame,
    frames: usize,
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    encoder: &LatentEncoder,
    cfg: &SdsConfig,
) -> Result<DistillResult> {
    let anim = replicate_frames(sketch, frames)?;
    distill_from(anim, predictor, sched, encoder, cfg)
}

pub fn distill_from(mut anim: AnimatedSketch, predictor: &dyn NoisePredictor, sched: &NoiseSchedule, encoder: &LatentEncoder, cfg: &SdsConfig) -> Result<DistillResult> {
    cfg.validate(sched)?;
    let ctx = SdsContext { sched, encoder, cfg };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = anim.params();
    let mut params = start.clone();
    let mut opt = Adam::new(cfg.lr);
    let mut diagnostics = Vec::with_capacity(cfg.iterations);
    let mut snapshots = Vec::new();
    for it in 0..cfg.iterations {
        let step = sds_gradient(&anim, predictor, &ctx, &mut rng)?;
        let norm = step.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("SDS gradient at iteration {it}")));
        }
        opt.step_flat(&mut params, &step.grad);
        anim.set_params(&params)?;
        let disp = mean_displacement(&params, &start);
        if it % 100 == 0 {
            debug!("sds iteration {it}: t={} |g|={norm:.4e} displacement={disp:.4e}", step.t);
        }
        diagnostics.push(DiagnosticRow {
            iteration: it,
            t: step.t,
            grad_norm: norm,
            mean_displacement: disp,
        });
        if let Some(k) = cfg.snapshot_every {
            if (it + 1) % k == 0 {
                snapshots.push((it + 1, anim.clone()));
            }
        }
    }
    Ok(DistillResult {
        animation: anim,
        diagnostics,
        snapshots,
    })
}

/// Inference prompt for distillation: the motion prompt with its subject
/// replaced by the sketch's subject ("a square is moving" + "a house" gives
/// "a house is moving").
pub fn composite_prompt(sketch_subject: &str, motion_prompt: &str) -> String {
    match motion_prompt.split_once(" is ") {
        Some((_, rest)) => format!("{sketch_subject} is {rest}"),
        None => format!("{sketch_subject} {motion_prompt}"),
    }
}

/// Subject part of a motion prompt, if it has the "<subject> is <verb>" form.
pub fn prompt_subject(motion_prompt: &str) -> Option<&str> {
    motion_prompt.split_once(" is ").map(|(s, _)| s)
}

/// Embedding of the composite prompt: the motion embedding with the
/// reference subject's embedding swapped for the sketch subject's.
pub fn composite_embedding(motion: &[f64], sketch_subject: &[f64], reference_subject: Option<&[f64]>) -> Vec<f64> {
    match reference_subject {
        Some(r) => motion.iter().zip(sketch_subject).zip(r).map(|((m, s), r)| m + s - r).collect(),
        None => motion.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::{ControlPoint, CubicStroke};

    struct Echo;
    impl NoisePredictor for Echo {
        fn predict(&self, _z: &LatentVideo, _t: usize, eps: &LatentVideo) -> Result<LatentVideo> {
            Ok(eps.clone())
        }
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(&self, z: &LatentVideo, _t: usize, _eps: &LatentVideo) -> Result<LatentVideo> {
            Ok(z.with_data(vec![0.0; z.data.len()]))
        }
    }

    fn sketch() -> SketchFrame {
        SketchFrame::new(vec![CubicStroke::new(
            [ControlPoint::new(0.3, 0.5), ControlPoint::new(0.4, 0.3), ControlPoint::new(0.6, 0.7), ControlPoint::new(0.7, 0.5)],
            0.05,
        )
        .unwrap()])
        .unwrap()
    }

    fn cfg() -> SdsConfig {
        SdsConfig {
            iterations: 5,
            height: 16,
            width: 16,
            softness: SoftnessConfig::new(0.02, 16).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn echo_predictor_gives_exactly_zero_gradient() {
        let sched = NoiseSchedule::cosine(100).unwrap();
        let enc = LatentEncoder::new(2).unwrap();
        let c = cfg();
        let ctx = SdsContext { sched: &sched, encoder: &enc, cfg: &c };
        let anim = replicate_frames(&sketch(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let s = sds_gradient(&anim, &Echo, &ctx, &mut rng).unwrap();
            assert!(s.grad.iter().all(|&g| g == 0.0));
        }
        let zero = sds_gradient(&anim, &Zero, &ctx, &mut rng).unwrap();
        assert!(zero.grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn zero_weight_gives_zero_gradient() {
        let sched = NoiseSchedule::cosine(100).unwrap();
        let enc = LatentEncoder::new(2).unwrap();
        let c = SdsConfig { weighting: Weighting::Constant(0.0), ..cfg() };
        let ctx = SdsContext { sched: &sched, encoder: &enc, cfg: &c };
        let anim = replicate_frames(&sketch(), 2).unwrap();
        let s = sds_gradient(&anim, &Zero, &ctx, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(s.grad.iter().all(|&g| g == 0.0));
        assert!((Weighting::SigmaSquared.weight(&sched, 50) - sched.sigma(50).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn zeroed_frame_residual_leaves_frame_untouched() {
        let sched = NoiseSchedule::cosine(100).unwrap();
        let enc = LatentEncoder::new(2).unwrap();
        let c = cfg();
        let ctx = SdsContext { sched: &sched, encoder: &enc, cfg: &c };
        let anim = replicate_frames(&sketch(), 3).unwrap();
        let mut res = LatentVideo::randn(3, 8, 8, &mut ChaCha8Rng::seed_from_u64(3));
        let n = res.frame_len();
        res.data[n..2 * n].iter_mut().for_each(|v| *v = 0.0);
        let g = pull_back(&anim, &res, &ctx).unwrap();
        assert!(g[8..16].iter().all(|&v| v == 0.0));
        assert!(g[..8].iter().any(|&v| v != 0.0) && g[16..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn distill_is_deterministic_and_snapshots() {
        let sched = NoiseSchedule::cosine(100).unwrap();
        let enc = LatentEncoder::new(2).unwrap();
        let c = SdsConfig { snapshot_every: Some(2), ..cfg() };
        let a = distill(&sketch(), 2, &Zero, &sched, &enc, &c).unwrap();
        let b = distill(&sketch(), 2, &Zero, &sched, &enc, &c).unwrap();
        assert_eq!(a.animation, b.animation);
        assert_eq!(a.diagnostics, b.diagnostics);
        assert_eq!(a.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(a.diagnostics.len(), 5);
        assert!(a.diagnostics[4].mean_displacement > 0.0);
        let csv = diagnostics_to_csv(&a.diagnostics);
        assert_eq!(diagnostics_from_csv(&csv).unwrap(), a.diagnostics);
    }

    #[test]
    fn config_validation() {
        let sched = NoiseSchedule::cosine(100).unwrap();
        assert!(SdsConfig { iterations: 0, ..cfg() }.validate(&sched).is_err());
        assert!(SdsConfig { lambda_m: -1.0, ..cfg() }.validate(&sched).is_err());
        assert!(SdsConfig { t_range: Some(TimestepRange { min: 5, max: 100 }), ..cfg() }.validate(&sched).is_err());
        assert!(cfg().validate(&sched).is_ok());
    }

    #[test]
    fn prompt_composition() {
        assert_eq!(composite_prompt("a house", "a square is moving"), "a house is moving");
        assert_eq!(prompt_subject("a disk is bouncing"), Some("a disk"));
        assert_eq!(composite_embedding(&[1.0, 2.0], &[0.5, 0.5], Some(&[0.25, 1.0])), vec![1.25, 1.5]);
        assert_eq!(Weighting::parse("sigma-squared").unwrap(), Weighting::SigmaSquared);
        assert_eq!(Weighting::parse("constant:0").unwrap(), Weighting::Constant(0.0));
        assert!(Weighting::parse("constant:-1").is_err());
        for w in [Weighting::Constant(1.0), Weighting::Constant(0.5), Weighting::SigmaSquared] {
            assert_eq!(Weighting::parse(&w.name()).unwrap(), w);
        }
    }
}
