//! Flat `key = value` run configuration.
//!
//! Sources are applied in order (defaults, config file, command-line
//! overrides), so a later assignment of a key wins. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sketchanim_core::diffusion::{LatentEncoder, NoiseSchedule, TimestepRange};
use sketchanim_core::raster::SoftnessConfig;
use sketchanim_core::sds::{SdsConfig, Weighting};
use sketchanim_core::synthetic::{motion_prompt, MotionKind, ShapeKind};
use sketchanim_core::trainer::{PretrainConfig, StageConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub sketch: Option<PathBuf>,
    pub video_dir: Option<PathBuf>,
    pub sketch_prompt: String,
    pub motion_prompt: String,

    pub resolution: usize,
    pub pool: usize,
    pub patch: usize,
    pub d_model: usize,
    /// Clip length; `None` follows the reference video.
    pub frames: Option<usize>,
    pub timesteps: usize,

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub still_fraction: f64,
    pub static_fraction: f64,

    pub steps: usize,
    pub batch_size: usize,
    pub stage_lr: f64,
    pub rank: usize,
    pub alpha_lora: f64,
    pub eval_draws: usize,
    pub eval_seed: u64,

    pub iterations: usize,
    pub lr: f64,
    pub lambda_a: f64,
    pub lambda_m: f64,
    /// Fractions of the schedule bounding the sampled timesteps.
    pub t_range: Option<(f64, f64)>,
    pub weighting: Weighting,
    pub temperature: f64,
    pub samples_per_curve: usize,
    pub snapshot_every: Option<usize>,
    pub fps: u32,

    pub kind: MotionKind,
    pub shape: ShapeKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = StageConfig::default();
        let sds = SdsConfig::default();
        let pre = PretrainConfig::default();
        let soft = SoftnessConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            sketch: None,
            video_dir: None,
            sketch_prompt: "a house".into(),
            motion_prompt: motion_prompt("a square", MotionKind::Translate),
            resolution: 64,
            pool: 2,
            patch: 4,
            d_model: 32,
            frames: None,
            timesteps: 1000,
            pretrain_steps: pre.steps,
            pretrain_batch: pre.batch_size,
            pretrain_lr: pre.lr,
            still_fraction: pre.still_fraction,
            static_fraction: pre.static_fraction,
            steps: stage.steps,
            batch_size: stage.batch_size,
            stage_lr: stage.lr,
            rank: stage.rank,
            alpha_lora: stage.alpha_lora,
            eval_draws: stage.eval_draws,
            eval_seed: stage.eval_seed,
            iterations: sds.iterations,
            lr: sds.lr,
            lambda_a: sds.lambda_a,
            lambda_m: sds.lambda_m,
            t_range: None,
            weighting: sds.weighting,
            temperature: soft.temperature,
            samples_per_curve: soft.samples_per_curve,
            snapshot_every: None,
            fps: 8,
            kind: MotionKind::Translate,
            shape: ShapeKind::Square,
        }
    }
}

/// Frame count used when neither the config nor a reference video fixes it.
pub const DEFAULT_FRAMES: usize = 16;

fn bad(key: &str, value: &str, what: &str) -> CliError {
    CliError::Config(format!("`{key}`: cannot parse `{value}` as {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn opt_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<Option<T>, CliError> {
    match value {
        "" | "none" | "auto" => Ok(None),
        v => num(key, v, what).map(Some),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

/// Split config text into `(line, key, value)` triples. `#` starts a comment.
pub fn parse_entries(text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CliError::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Assign one key. Later calls overwrite earlier ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = num(key, value, "an integer")?,
            "out" => self.out = PathBuf::from(value),
            "sketch" => self.sketch = opt_path(value),
            "video_dir" => self.video_dir = opt_path(value),
            "sketch_prompt" => self.sketch_prompt = value.to_string(),
            "motion_prompt" => self.motion_prompt = value.to_string(),
            "resolution" => self.resolution = num(key, value, "an integer")?,
            "pool" => self.pool = num(key, value, "an integer")?,
            "patch" => self.patch = num(key, value, "an integer")?,
            "d_model" => self.d_model = num(key, value, "an integer")?,
            "frames" => self.frames = opt_num(key, value, "an integer")?,
            "timesteps" => self.timesteps = num(key, value, "an integer")?,
            "pretrain_steps" => self.pretrain_steps = num(key, value, "an integer")?,
            "pretrain_batch" => self.pretrain_batch = num(key, value, "an integer")?,
            "pretrain_lr" => self.pretrain_lr = num(key, value, "a number")?,
            "still_fraction" => self.still_fraction = num(key, value, "a number")?,
            "static_fraction" => self.static_fraction = num(key, value, "a number")?,
            "steps" => self.steps = num(key, value, "an integer")?,
            "batch_size" => self.batch_size = num(key, value, "an integer")?,
            "stage_lr" => self.stage_lr = num(key, value, "a number")?,
            "rank" => self.rank = num(key, value, "an integer")?,
            "alpha_lora" => self.alpha_lora = num(key, value, "a number")?,
            "eval_draws" => self.eval_draws = num(key, value, "an integer")?,
            "eval_seed" => self.eval_seed = num(key, value, "an integer")?,
            "iterations" => self.iterations = num(key, value, "an integer")?,
            "lr" => self.lr = num(key, value, "a number")?,
            "lambda_a" => self.lambda_a = num(key, value, "a number")?,
            "lambda_m" => self.lambda_m = num(key, value, "a number")?,
            "t_range" => {
                self.t_range = match value {
                    "" | "none" | "auto" => None,
                    v => {
                        let (lo, hi) = v.split_once(',').ok_or_else(|| bad(key, v, "`lo,hi` fractions"))?;
                        Some((num(key, lo.trim(), "a fraction")?, num(key, hi.trim(), "a fraction")?))
                    }
                }
            }
            "weighting" => self.weighting = Weighting::parse(value).map_err(|e| CliError::Config(e.to_string()))?,
            "temperature" => self.temperature = num(key, value, "a number")?,
            "samples_per_curve" => self.samples_per_curve = num(key, value, "an integer")?,
            "snapshot_every" => self.snapshot_every = opt_num(key, value, "an integer")?.filter(|&k: &usize| k > 0),
            "fps" => self.fps = num(key, value, "an integer")?,
            "kind" => self.kind = MotionKind::parse(value).map_err(|e| CliError::Config(e.to_string()))?,
            "shape" => self.shape = ShapeKind::parse(value).map_err(|e| CliError::Config(e.to_string()))?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (line, k, v) in parse_entries(text)? {
            self.set(&k, &v).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{origin}:{line}: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Shape and range checks that do not depend on files.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| Err(CliError::Config(m));
        if self.pool == 0 || self.patch == 0 || self.resolution == 0 {
            return cfg("resolution, pool and patch must be positive".into());
        }
        if self.resolution % (self.pool * self.patch) != 0 {
            return cfg(format!(
                "resolution {} is not divisible by pool × patch = {}",
                self.resolution,
                self.pool * self.patch
            ));
        }
        if self.frames == Some(0) {
            return cfg("frames must be at least 1".into());
        }
        if self.pretrain_steps == 0 || self.pretrain_batch == 0 {
            return cfg("pretrain_steps and pretrain_batch must be positive".into());
        }
        if !(0.0..=1.0).contains(&(self.still_fraction + self.static_fraction)) || self.still_fraction < 0.0 || self.static_fraction < 0.0 {
            return cfg("still_fraction and static_fraction must be non-negative and sum to at most 1".into());
        }
        if let Some((lo, hi)) = self.t_range {
            if !(0.0 <= lo && lo <= hi && hi < 1.0) {
                return cfg(format!("t_range {lo},{hi} must satisfy 0 ≤ lo ≤ hi < 1"));
            }
        }
        if self.fps == 0 {
            return cfg("fps must be positive".into());
        }
        let core = |r: sketchanim_core::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        core(self.stage_config(0).validate())?;
        let sched = self.schedule().map_err(|e| CliError::Config(e.to_string()))?;
        core(self.sds_config(&sched).and_then(|c| c.validate(&sched)))?;
        Ok(())
    }

    pub fn schedule(&self) -> sketchanim_core::Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.timesteps)
    }

    pub fn encoder(&self) -> sketchanim_core::Result<LatentEncoder> {
        LatentEncoder::new(self.pool)
    }

    pub fn latent_size(&self) -> usize {
        self.resolution / self.pool
    }

    pub fn softness(&self) -> sketchanim_core::Result<SoftnessConfig> {
        SoftnessConfig::new(self.temperature, self.samples_per_curve)
    }

    pub fn pretrain_config(&self, frames: usize) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            seed: derive_seed(self.seed, 0),
            frames,
            resolution: (self.resolution, self.resolution),
            still_fraction: self.still_fraction,
            static_fraction: self.static_fraction,
        }
    }

    /// Stage `k` (1 or 2) settings with its own derived seed.
    pub fn stage_config(&self, k: u64) -> StageConfig {
        StageConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.stage_lr,
            seed: derive_seed(self.seed, k),
            rank: self.rank,
            alpha_lora: self.alpha_lora,
            eval_draws: self.eval_draws,
            eval_seed: self.eval_seed,
        }
    }

    pub fn sds_config(&self, sched: &NoiseSchedule) -> sketchanim_core::Result<SdsConfig> {
        let t_range = match self.t_range {
            Some((lo, hi)) => Some(TimestepRange::from_fractions(sched, lo, hi)?),
            None => None,
        };
        Ok(SdsConfig {
            iterations: self.iterations,
            lr: self.lr,
            lambda_a: self.lambda_a,
            lambda_m: self.lambda_m,
            t_range,
            weighting: self.weighting,
            seed: derive_seed(self.seed, 3),
            height: self.resolution,
            width: self.resolution,
            softness: self.softness()?,
            snapshot_every: self.snapshot_every,
        })
    }

    /// The resolved configuration in the same `key = value` form it is read from.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = |o: &Option<PathBuf>| o.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let o = |o: Option<usize>| o.map_or("auto".to_string(), |v| v.to_string());
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("sketch", p(&self.sketch));
        kv("video_dir", p(&self.video_dir));
        kv("sketch_prompt", self.sketch_prompt.clone());
        kv("motion_prompt", self.motion_prompt.clone());
        kv("resolution", self.resolution.to_string());
        kv("pool", self.pool.to_string());
        kv("patch", self.patch.to_string());
        kv("d_model", self.d_model.to_string());
        kv("frames", o(self.frames));
        kv("timesteps", self.timesteps.to_string());
        kv("pretrain_steps", self.pretrain_steps.to_string());
        kv("pretrain_batch", self.pretrain_batch.to_string());
        kv("pretrain_lr", format!("{:?}", self.pretrain_lr));
        kv("still_fraction", format!("{:?}", self.still_fraction));
        kv("static_fraction", format!("{:?}", self.static_fraction));
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("stage_lr", format!("{:?}", self.stage_lr));
        kv("rank", self.rank.to_string());
        kv("alpha_lora", format!("{:?}", self.alpha_lora));
        kv("eval_draws", self.eval_draws.to_string());
        kv("eval_seed", self.eval_seed.to_string());
        kv("iterations", self.iterations.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("lambda_a", format!("{:?}", self.lambda_a));
        kv("lambda_m", format!("{:?}", self.lambda_m));
        kv("t_range", self.t_range.map_or("auto".to_string(), |(a, b)| format!("{a:?},{b:?}")));
        kv("weighting", self.weighting.name());
        kv("temperature", format!("{:?}", self.temperature));
        kv("samples_per_curve", self.samples_per_curve.to_string());
        kv("snapshot_every", o(self.snapshot_every));
        kv("fps", self.fps.to_string());
        kv("kind", self.kind.as_str().to_string());
        kv("shape", self.shape.as_str().to_string());
        s
    }
}

/// Per-stage seed from the global one (SplitMix64 finalizer).
pub fn derive_seed(global: u64, stage: u64) -> u64 {
    let mut z = global.wrapping_add(stage.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
