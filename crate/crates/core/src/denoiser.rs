//! Toy video noise predictor: patch tokens, one spatial attention block per
//! frame, one temporal attention block across frames, additive prompt and
//! timestep conditioning. The eight attention projections are the adapter
//! attachment points.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{add_noise, timestep_features, LatentVideo, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lora::{self, LoraAdapter};
use crate::nn::{
    block_bwd, block_fwd, layer_norm_bwd, layer_norm_fwd, linear_bwd, linear_fwd, spatial_groups, temporal_groups, BlockCache, BlockLoras,
    BlockWeights, LinearCache, LnCache, LoraGrads, LoraRef,
};

static BACKWARD_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of reverse passes run through the denoiser by this process.
pub fn backward_calls() -> usize {
    BACKWARD_CALLS.load(Ordering::SeqCst)
}

/// Attachment keys in canonical order.
pub const ATTACHMENT_KEYS: [&str; 8] = [
    "spatial.q",
    "spatial.k",
    "spatial.v",
    "spatial.o",
    "temporal.q",
    "temporal.k",
    "temporal.v",
    "temporal.o",
];

const WEIGHTS_MAGIC: &str = "SKDW1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub patch: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub max_frames: usize,
}

impl DenoiserConfig {
    pub fn new(d_model: usize, patch: usize, latent_height: usize, latent_width: usize, max_frames: usize) -> Result<Self> {
        let cfg = Self {
            d_model,
            heads: 4,
            ff_mult: 4,
            patch,
            latent_height,
            latent_width,
            max_frames,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model < 16 {
            return Err(Error::Argument(format!("d_model must be at least 16, got {}", self.d_model)));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 || self.d_model % 2 != 0 {
            return Err(Error::Argument(format!("d_model {} not divisible into {} heads", self.d_model, self.heads)));
        }
        if self.patch == 0 || self.latent_height % self.patch != 0 || self.latent_width % self.patch != 0 {
            return Err(Error::Shape(format!(
                "patch {} does not divide latent {}x{}",
                self.patch, self.latent_height, self.latent_width
            )));
        }
        if self.ff_mult == 0 || self.max_frames == 0 {
            return Err(Error::Argument("ff_mult and max_frames must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.latent_height / self.patch) * (self.latent_width / self.patch)
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch
    }

    fn hidden(&self) -> usize {
        self.ff_mult * self.d_model
    }
}

/// Prompt vocabulary: one learned embedding row per distinct string.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    names: Vec<String>,
    embeddings: Array2<f64>,
}

impl PromptTable {
    fn empty(d_model: usize) -> Self {
        Self {
            names: Vec::new(),
            embeddings: Array2::zeros((0, d_model)),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownPrompt(name.to_string()))
    }

    pub fn embedding(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.embeddings.row(self.id(name)?).to_vec())
    }

    /// Add or overwrite the embedding of `name`; returns its id.
    pub fn register(&mut self, name: &str, embedding: &[f64]) -> Result<usize> {
        if name.is_empty() || name.contains('\n') || name.trim() != name {
            return Err(Error::Argument(format!("invalid prompt name {name:?}")));
        }
        if embedding.len() != self.embeddings.ncols() {
            return Err(Error::Shape(format!(
                "prompt embedding has {} values, expected {}",
                embedding.len(),
                self.embeddings.ncols()
            )));
        }
        if let Ok(id) = self.id(name) {
            self.embeddings.row_mut(id).assign(&Array1::from(embedding.to_vec()));
            return Ok(id);
        }
        self.names.push(name.to_string());
        self.embeddings
            .push_row(Array1::from(embedding.to_vec()).view())
            .expect("row width checked above");
        Ok(self.names.len() - 1)
    }

    /// Mean of all registered embeddings; zero for an empty table.
    pub fn mean_embedding(&self) -> Vec<f64> {
        if self.is_empty() {
            return vec![0.0; self.embeddings.ncols()];
        }
        self.embeddings.mean_axis(Axis(0)).unwrap().to_vec()
    }
}

/// Prompt embedding plus timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub prompt: Vec<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    config: DenoiserConfig,
    pub(crate) embed: Array2<f64>,
    pub(crate) embed_b: Array1<f64>,
    pub(crate) pos_spatial: Array2<f64>,
    pub(crate) pos_frame: Array2<f64>,
    pub(crate) time_w: Array2<f64>,
    pub(crate) time_b: Array1<f64>,
    pub prompts: PromptTable,
    pub(crate) spatial: BlockWeights,
    pub(crate) temporal: BlockWeights,
    pub(crate) out_ln_g: Array1<f64>,
    pub(crate) out_ln_b: Array1<f64>,
    pub(crate) unembed: Array2<f64>,
    pub(crate) unembed_b: Array1<f64>,
}

fn gaussian<R: Rng + ?Sized>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal))
}

impl DenoiserWeights {
    /// All-zero weights of the right shapes, with `prompts` registered.
    pub fn zeros(config: DenoiserConfig, prompts: &[&str]) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut table = PromptTable::empty(d);
        for p in prompts {
            table.register(p, &vec![0.0; d])?;
        }
        Ok(Self {
            config,
            embed: Array2::zeros((d, config.patch_len())),
            embed_b: Array1::zeros(d),
            pos_spatial: Array2::zeros((config.tokens_per_frame(), d)),
            pos_frame: Array2::zeros((config.max_frames, d)),
            time_w: Array2::zeros((d, d)),
            time_b: Array1::zeros(d),
            prompts: table,
            spatial: BlockWeights::zeros(d, config.hidden()),
            temporal: BlockWeights::zeros(d, config.hidden()),
            out_ln_g: Array1::zeros(d),
            out_ln_b: Array1::zeros(d),
            unembed: Array2::zeros((config.patch_len(), d)),
            unembed_b: Array1::zeros(config.patch_len()),
        })
    }

    /// Scaled Gaussian initialization with a zero output head, so the fresh
    /// model predicts zero noise everywhere.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, prompts: &[&str], rng: &mut R) -> Result<Self> {
        let mut w = Self::zeros(config, prompts)?;
        let d = config.d_model;
        let h = config.hidden();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        w.embed = gaussian((d, config.patch_len()), inv(config.patch_len()), rng);
        w.pos_spatial = gaussian((config.tokens_per_frame(), d), 0.5, rng);
        w.pos_frame = gaussian((config.max_frames, d), 0.5, rng);
        w.time_w = gaussian((d, d), inv(d), rng);
        w.prompts.embeddings = gaussian((prompts.len(), d), 0.5, rng);
        for block in [&mut w.spatial, &mut w.temporal] {
            block.ln1_g.fill(1.0);
            block.ln2_g.fill(1.0);
            block.q = gaussian((d, d), inv(d), rng);
            block.k = gaussian((d, d), inv(d), rng);
            block.v = gaussian((d, d), inv(d), rng);
            block.o = gaussian((d, d), inv(d), rng);
            block.ff1 = gaussian((h, d), inv(d), rng);
            block.ff2 = gaussian((d, h), inv(h), rng);
        }
        w.out_ln_g.fill(1.0);
        Ok(w)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Same shapes, every value zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn conditioning(&self, prompt: &str, t: usize) -> Result<Conditioning> {
        Ok(Conditioning {
            prompt: self.prompts.embedding(prompt)?,
            t,
        })
    }

    /// Base projection matrix behind an attachment key.
    pub fn projection(&self, key: &str) -> Result<&Array2<f64>> {
        let (block, proj) = split_key(key)?;
        let b = if block == "spatial" { &self.spatial } else { &self.temporal };
        Ok(match proj {
            "q" => &b.q,
            "k" => &b.k,
            "v" => &b.v,
            _ => &b.o,
        })
    }

    fn projection_mut(&mut self, key: &str) -> Result<&mut Array2<f64>> {
        let (block, proj) = split_key(key)?;
        let b = if block == "spatial" { &mut self.spatial } else { &mut self.temporal };
        Ok(match proj {
            "q" => &mut b.q,
            "k" => &mut b.k,
            "v" => &mut b.v,
            _ => &mut b.o,
        })
    }

    /// Copy with every attached adapter folded into its base matrix.
    pub fn merged(&self, adapters: &[Attached]) -> Result<Self> {
        let mut out = self.clone();
        for key in ATTACHMENT_KEYS {
            let contribs: Vec<(&LoraAdapter, f64)> = adapters
                .iter()
                .filter(|a| a.adapter.target == key)
                .map(|a| (a.adapter, a.lambda))
                .collect();
            if !contribs.is_empty() {
                let m = lora::merge(self.projection(key)?, &contribs)?;
                *out.projection_mut(key)? = m;
            }
        }
        for a in adapters {
            split_key(&a.adapter.target)?;
        }
        Ok(out)
    }

    /// Named tensors with their `(rows, cols)` shapes, in file order.
    pub fn tensors(&self) -> Vec<(String, &[f64], (usize, usize))> {
        fn m(a: &Array2<f64>) -> (&[f64], (usize, usize)) {
            (a.as_slice().unwrap(), a.dim())
        }
        fn v(a: &Array1<f64>) -> (&[f64], (usize, usize)) {
            (a.as_slice().unwrap(), (1, a.len()))
        }
        let mut list: Vec<(String, &[f64], (usize, usize))> = Vec::new();
        for (name, t) in [
            ("embed.w", m(&self.embed)),
            ("embed.b", v(&self.embed_b)),
            ("pos.spatial", m(&self.pos_spatial)),
            ("pos.frame", m(&self.pos_frame)),
            ("time.w", m(&self.time_w)),
            ("time.b", v(&self.time_b)),
            ("prompt.table", m(&self.prompts.embeddings)),
        ] {
            list.push((name.to_string(), t.0, t.1));
        }
        for (prefix, b) in [("spatial", &self.spatial), ("temporal", &self.temporal)] {
            for (name, s, d) in b.tensors() {
                list.push((format!("{prefix}.{name}"), s, d));
            }
        }
        for (name, t) in [
            ("out.ln.g", v(&self.out_ln_g)),
            ("out.ln.b", v(&self.out_ln_b)),
            ("unembed.w", m(&self.unembed)),
            ("unembed.b", v(&self.unembed_b)),
        ] {
            list.push((name.to_string(), t.0, t.1));
        }
        list
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.embed.as_slice_mut().unwrap(),
            self.embed_b.as_slice_mut().unwrap(),
            self.pos_spatial.as_slice_mut().unwrap(),
            self.pos_frame.as_slice_mut().unwrap(),
            self.time_w.as_slice_mut().unwrap(),
            self.time_b.as_slice_mut().unwrap(),
            self.prompts.embeddings.as_slice_mut().unwrap(),
        ];
        out.extend(self.spatial.tensors_mut());
        out.extend(self.temporal.tensors_mut());
        out.extend([
            self.out_ln_g.as_slice_mut().unwrap(),
            self.out_ln_b.as_slice_mut().unwrap(),
            self.unembed.as_slice_mut().unwrap(),
            self.unembed_b.as_slice_mut().unwrap(),
        ]);
        out
    }

    /// Add `g` to row `id` of the prompt table.
    pub(crate) fn prompt_row_add(&mut self, id: usize, g: &[f64]) {
        let mut row = self.prompts.embeddings.row_mut(id);
        row.iter_mut().zip(g).for_each(|(x, y)| *x += y);
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.1.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.1.iter().all(|v| v.is_finite()))
    }
}

fn split_key(key: &str) -> Result<(&str, &str)> {
    if !ATTACHMENT_KEYS.contains(&key) {
        return Err(Error::UnknownAttachment(key.to_string()));
    }
    Ok(key.split_once('.').unwrap())
}

/// An adapter applied on the fly as `W0 + λ·α·B·A`.
#[derive(Debug, Clone, Copy)]
pub struct Attached<'a> {
    pub adapter: &'a LoraAdapter,
    pub lambda: f64,
    pub trainable: bool,
}

impl<'a> Attached<'a> {
    pub fn frozen(adapter: &'a LoraAdapter, lambda: f64) -> Self {
        Self {
            adapter,
            lambda,
            trainable: false,
        }
    }

    pub fn trainable(adapter: &'a LoraAdapter) -> Self {
        Self {
            adapter,
            lambda: 1.0,
            trainable: true,
        }
    }

    /// All adapters of a set at one scale.
    pub fn all(adapters: &'a [LoraAdapter], lambda: f64, trainable: bool) -> Vec<Self> {
        adapters
            .iter()
            .map(|adapter| Self {
                adapter,
                lambda,
                trainable,
            })
            .collect()
    }
}

fn build_loras<'a>(adapters: &'a [Attached], d: usize) -> Result<(BlockLoras<'a>, BlockLoras<'a>)> {
    let mut spatial = BlockLoras::default();
    let mut temporal = BlockLoras::default();
    for (slot, at) in adapters.iter().enumerate() {
        let (block, proj) = split_key(&at.adapter.target)?;
        if at.adapter.target_shape() != (d, d) {
            return Err(Error::Shape(format!(
                "adapter on {} has shape {:?}, projection is {d}x{d}",
                at.adapter.target,
                at.adapter.target_shape()
            )));
        }
        let r = LoraRef {
            a: &at.adapter.a,
            b: &at.adapter.b,
            scale: at.lambda * at.adapter.alpha,
            slot,
        };
        let target = if block == "spatial" { &mut spatial } else { &mut temporal };
        target.slot_mut(proj).expect("key validated").push(r);
    }
    Ok((spatial, temporal))
}

struct ForwardCache {
    frames: usize,
    patches: Array2<f64>,
    feat: Vec<f64>,
    spatial: BlockCache,
    temporal: Option<BlockCache>,
    ln_out: LnCache,
    unembed: LinearCache,
}

fn patchify(z: &LatentVideo, p: usize) -> Array2<f64> {
    let (gh, gw) = (z.height / p, z.width / p);
    let l = gh * gw;
    let mut out = Array2::zeros((z.frames * l, p * p));
    for f in 0..z.frames {
        let frame = z.frame(f);
        for pr in 0..gh {
            for pc in 0..gw {
                let mut row = out.row_mut(f * l + pr * gw + pc);
                for dr in 0..p {
                    for dc in 0..p {
                        row[dr * p + dc] = frame[(pr * p + dr) * z.width + pc * p + dc];
                    }
                }
            }
        }
    }
    out
}

fn unpatchify(tokens: &Array2<f64>, frames: usize, height: usize, width: usize, p: usize) -> LatentVideo {
    let (gh, gw) = (height / p, width / p);
    let l = gh * gw;
    let mut z = LatentVideo::zeros(frames, height, width);
    let n = height * width;
    for f in 0..frames {
        for pr in 0..gh {
            for pc in 0..gw {
                let row = tokens.row(f * l + pr * gw + pc);
                for dr in 0..p {
                    for dc in 0..p {
                        z.data[f * n + (pr * p + dr) * width + pc * p + dc] = row[dr * p + dc];
                    }
                }
            }
        }
    }
    z
}

/// Options that change the computation graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Skip the temporal block regardless of frame count.
    pub spatial_only: bool,
}

impl DenoiserWeights {
    fn check_input(&self, z: &LatentVideo, cond: &Conditioning) -> Result<()> {
        let c = &self.config;
        if z.height != c.latent_height || z.width != c.latent_width {
            return Err(Error::Shape(format!(
                "latent {}x{} does not match model {}x{}",
                z.height, z.width, c.latent_height, c.latent_width
            )));
        }
        if z.frames == 0 || z.frames > c.max_frames {
            return Err(Error::Shape(format!("{} frames, model supports 1..={}", z.frames, c.max_frames)));
        }
        if cond.prompt.len() != c.d_model {
            return Err(Error::Shape(format!("prompt embedding has {} values, expected {}", cond.prompt.len(), c.d_model)));
        }
        Ok(())
    }

    fn forward(&self, z: &LatentVideo, cond: &Conditioning, loras: &(BlockLoras, BlockLoras), opts: ForwardOptions) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(z, cond)?;
        let c = &self.config;
        let l = c.tokens_per_frame();
        let frames = z.frames;
        let patches = patchify(z, c.patch);
        let feat = timestep_features(cond.t, c.d_model);
        let temb = self.time_w.dot(&Array1::from(feat.clone())) + &self.time_b;
        let shared = temb + &Array1::from(cond.prompt.clone());
        let (mut x, _) = linear_fwd(patches.clone(), &self.embed, Some(&self.embed_b), &[]);
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            row += &self.pos_spatial.row(i % l);
            row += &shared;
        }
        let (mut x, spatial) = block_fwd(&x, &self.spatial, &spatial_groups(frames, l), c.heads, &loras.0);
        let temporal = if frames >= 2 && !opts.spatial_only {
            for (i, mut row) in x.rows_mut().into_iter().enumerate() {
                row += &self.pos_frame.row(i / l);
            }
            let (y, cache) = block_fwd(&x, &self.temporal, &temporal_groups(frames, l), c.heads, &loras.1);
            x = y;
            Some(cache)
        } else {
            None
        };
        let (h, ln_out) = layer_norm_fwd(&x, &self.out_ln_g, &self.out_ln_b);
        let (out, unembed) = linear_fwd(h, &self.unembed, Some(&self.unembed_b), &[]);
        Ok((
            out,
            ForwardCache {
                frames,
                patches,
                feat,
                spatial,
                temporal,
                ln_out,
                unembed,
            },
        ))
    }

    /// Reverse pass from output-token gradients. Returns the gradient with
    /// respect to the prompt embedding.
    fn backward(
        &self,
        dout: &Array2<f64>,
        cache: &ForwardCache,
        loras: &(BlockLoras, BlockLoras),
        mut base: Option<&mut DenoiserWeights>,
        lora_grads: &mut LoraGrads,
    ) -> Vec<f64> {
        BACKWARD_CALLS.fetch_add(1, Ordering::SeqCst);
        let c = &self.config;
        let l = c.tokens_per_frame();
        let mut none = LoraGrads::new();
        let dh = match base.as_deref_mut() {
            Some(g) => linear_bwd(dout, &self.unembed, &cache.unembed, &[], Some(&mut g.unembed), Some(&mut g.unembed_b), &mut none),
            None => linear_bwd(dout, &self.unembed, &cache.unembed, &[], None, None, &mut none),
        };
        let mut dx = match base.as_deref_mut() {
            Some(g) => layer_norm_bwd(&dh, &self.out_ln_g, &cache.ln_out, Some(&mut g.out_ln_g), Some(&mut g.out_ln_b)),
            None => layer_norm_bwd(&dh, &self.out_ln_g, &cache.ln_out, None, None),
        };
        if let Some(tc) = &cache.temporal {
            let groups = temporal_groups(cache.frames, l);
            dx = block_bwd(&dx, &self.temporal, tc, &groups, c.heads, &loras.1, base.as_deref_mut().map(|g| &mut g.temporal), lora_grads);
            if let Some(g) = base.as_deref_mut() {
                for (i, row) in dx.rows().into_iter().enumerate() {
                    let mut target = g.pos_frame.row_mut(i / l);
                    target += &row;
                }
            }
        }
        let groups = spatial_groups(cache.frames, l);
        let dx = block_bwd(&dx, &self.spatial, &cache.spatial, &groups, c.heads, &loras.0, base.as_deref_mut().map(|g| &mut g.spatial), lora_grads);
        let dshared = dx.sum_axis(Axis(0));
        if let Some(g) = base {
            g.embed += &dx.t().dot(&cache.patches);
            g.embed_b += &dshared;
            for (i, row) in dx.rows().into_iter().enumerate() {
                let mut target = g.pos_spatial.row_mut(i % l);
                target += &row;
            }
            for (r, &ds) in dshared.iter().enumerate() {
                for (k, &f) in cache.feat.iter().enumerate() {
                    g.time_w[[r, k]] += ds * f;
                }
            }
            g.time_b += &dshared;
        }
        dshared.to_vec()
    }
}

/// Noise prediction with adapters applied on the fly.
pub fn predict_noise(weights: &DenoiserWeights, z_t: &LatentVideo, cond: &Conditioning, adapters: &[Attached]) -> Result<LatentVideo> {
    predict_noise_with(weights, z_t, cond, adapters, ForwardOptions::default())
}

pub fn predict_noise_with(weights: &DenoiserWeights, z_t: &LatentVideo, cond: &Conditioning, adapters: &[Attached], opts: ForwardOptions) -> Result<LatentVideo> {
    let loras = build_loras(adapters, weights.config.d_model)?;
    let (out, _) = weights.forward(z_t, cond, &loras, opts)?;
    let c = &weights.config;
    Ok(unpatchify(&out, z_t.frames, c.latent_height, c.latent_width, c.patch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFilter {
    AllFrames,
    /// Train on one frame as an isolated clip; the temporal block is bypassed.
    SingleFrame(usize),
}

/// Which non-adapter parameters receive gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Trainable {
    pub base: bool,
    pub prompt: bool,
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub z0: &'a LatentVideo,
    pub eps: &'a LatentVideo,
    pub t: usize,
    pub prompt: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub base: Option<DenoiserWeights>,
    /// `(dB, dA)` per attached adapter, `None` for frozen ones.
    pub adapters: Vec<Option<(Array2<f64>, Array2<f64>)>>,
    pub prompt: Option<Vec<f64>>,
}

impl Gradients {
    /// `self += k · other` for matching layouts.
    pub fn add_scaled(&mut self, other: &Gradients, k: f64) {
        if let (Some(a), Some(b)) = (&mut self.base, &other.base) {
            for (x, y) in a.tensors_mut().into_iter().zip(b.tensors()) {
                x.iter_mut().zip(y.1).for_each(|(x, y)| *x += k * y);
            }
        }
        for (a, b) in self.adapters.iter_mut().zip(&other.adapters) {
            if let (Some((ab, aa)), Some((bb, ba))) = (a, b) {
                ab.scaled_add(k, bb);
                aa.scaled_add(k, ba);
            }
        }
        if let (Some(a), Some(b)) = (&mut self.prompt, &other.prompt) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += k * y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        let other = self.clone();
        self.add_scaled(&other, k - 1.0);
    }
}

/// Mean squared ε-prediction error and its gradients with respect to the
/// trainable parameters.
pub fn loss_and_grads(
    weights: &DenoiserWeights,
    sched: &NoiseSchedule,
    sample: &Sample,
    adapters: &[Attached],
    trainable: Trainable,
    filter: FrameFilter,
) -> Result<(f64, Gradients)> {
    if !trainable.base && !trainable.prompt && !adapters.iter().any(|a| a.trainable) {
        return Err(Error::Argument("empty trainable set".into()));
    }
    let (z0, eps);
    let (z0, eps) = match filter {
        FrameFilter::AllFrames => (sample.z0, sample.eps),
        FrameFilter::SingleFrame(i) => {
            if i >= sample.z0.frames {
                return Err(Error::Argument(format!("frame {i} out of range 0..{}", sample.z0.frames)));
            }
            z0 = sample.z0.single_frame(i);
            eps = sample.eps.single_frame(i);
            (&z0, &eps)
        }
    };
    let z_t = add_noise(z0, sample.t, eps, sched)?;
    let cond = Conditioning {
        prompt: sample.prompt.to_vec(),
        t: sample.t,
    };
    let loras = build_loras(adapters, weights.config.d_model)?;
    let (out, cache) = weights.forward(&z_t, &cond, &loras, ForwardOptions::default())?;
    let target = patchify(eps, weights.config.patch);
    let diff = &out - &target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at t={}", sample.t)));
    }
    let dout = diff * (2.0 / n);
    let mut base = trainable.base.then(|| weights.zeros_like());
    let mut lora_grads: LoraGrads = adapters
        .iter()
        .map(|a| {
            a.trainable
                .then(|| (Array2::zeros(a.adapter.b.dim()), Array2::zeros(a.adapter.a.dim())))
        })
        .collect();
    let dprompt = weights.backward(&dout, &cache, &loras, base.as_mut(), &mut lora_grads);
    Ok((
        loss,
        Gradients {
            base,
            adapters: lora_grads,
            prompt: trainable.prompt.then_some(dprompt),
        },
    ))
}

/// Loss only, for evaluation.
pub fn eval_loss(weights: &DenoiserWeights, sched: &NoiseSchedule, sample: &Sample, adapters: &[Attached], filter: FrameFilter) -> Result<f64> {
    let (z0, eps) = match filter {
        FrameFilter::AllFrames => (sample.z0.clone(), sample.eps.clone()),
        FrameFilter::SingleFrame(i) => {
            if i >= sample.z0.frames {
                return Err(Error::Argument(format!("frame {i} out of range 0..{}", sample.z0.frames)));
            }
            (sample.z0.single_frame(i), sample.eps.single_frame(i))
        }
    };
    let z_t = add_noise(&z0, sample.t, &eps, sched)?;
    let cond = Conditioning {
        prompt: sample.prompt.to_vec(),
        t: sample.t,
    };
    let pred = predict_noise(weights, &z_t, &cond, adapters)?;
    Ok(pred.data.iter().zip(&eps.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / eps.data.len() as f64)
}

pub fn weights_to_bytes(w: &DenoiserWeights) -> Vec<u8> {
    let c = &w.config;
    let mut head = String::new();
    writeln!(head, "{WEIGHTS_MAGIC}").unwrap();
    writeln!(
        head,
        "config d_model={} heads={} ff_mult={} patch={} latent={}x{} max_frames={}",
        c.d_model, c.heads, c.ff_mult, c.patch, c.latent_height, c.latent_width, c.max_frames
    )
    .unwrap();
    writeln!(head, "prompts {}", w.prompts.len()).unwrap();
    for n in w.prompts.names() {
        writeln!(head, "{n}").unwrap();
    }
    let tensors = w.tensors();
    writeln!(head, "tensors {}", tensors.len()).unwrap();
    for (name, _, (r, c)) in &tensors {
        writeln!(head, "{name} {r} {c}").unwrap();
    }
    let mut out = head.into_bytes();
    for (_, data, _) in &tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<DenoiserWeights> {
    let mut pos = 0;
    let mut line = || -> Result<String> {
        let rest = &bytes[pos.min(bytes.len())..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated weights header".into()))?;
        pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| Error::Format("weights header is not UTF-8".into()))
    };
    let magic = line()?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("weights magic/version mismatch: expected {WEIGHTS_MAGIC}, found {magic:?}")));
    }
    let bad = |what: &str| Error::Format(format!("malformed weights header: {what}"));
    let cfg_line = line()?;
    let mut fields = std::collections::HashMap::new();
    for kv in cfg_line.strip_prefix("config ").ok_or_else(|| bad("config"))?.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(kv))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let num = |k: &str| -> Result<usize> { fields.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(k)) };
    let (lh, lw) = fields
        .get("latent")
        .and_then(|v| v.split_once('x'))
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| bad("latent"))?;
    let config = DenoiserConfig {
        d_model: num("d_model")?,
        heads: num("heads")?,
        ff_mult: num("ff_mult")?,
        patch: num("patch")?,
        latent_height: lh,
        latent_width: lw,
        max_frames: num("max_frames")?,
    };
    config.validate()?;
    let np: usize = line()?
        .strip_prefix("prompts ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("prompts"))?;
    let names: Vec<String> = (0..np).map(|_| line()).collect::<Result<_>>()?;
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut w = DenoiserWeights::zeros(config, &name_refs)?;
    let nt: usize = line()?
        .strip_prefix("tensors ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("tensors"))?;
    let expected: Vec<(String, (usize, usize))> = w.tensors().into_iter().map(|(n, _, d)| (n, d)).collect();
    if nt != expected.len() {
        return Err(bad("tensor count"));
    }
    for (name, (r, c)) in &expected {
        let l = line()?;
        if l != format!("{name} {r} {c}") {
            return Err(Error::Format(format!("weights tensor mismatch: expected `{name} {r} {c}`, found `{l}`")));
        }
    }
    let mut payload = &bytes[pos..];
    for t in w.tensors_mut() {
        let need = t.len() * 8;
        if payload.len() < need {
            return Err(Error::Format("truncated weights payload".into()));
        }
        for (v, chunk) in t.iter_mut().zip(payload[..need].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        payload = &payload[need..];
    }
    if !payload.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after weights payload", payload.len())));
    }
    Ok(w)
}

pub fn save_weights(w: &DenoiserWeights, path: &Path) -> Result<()> {
    fs::write(path, weights_to_bytes(w))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<DenoiserWeights> {
    weights_from_bytes(&fs::read(path)?)
}

/// Learned prompt embeddings as text: one `name<TAB>values` line each.
pub fn save_prompts(prompts: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (name, v) in prompts {
        let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        writeln!(s, "{name}\t{}", vals.join(" ")).unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_prompts(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (name, vals) = l
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("bad prompt line in {}", path.display())))?;
            let v = vals
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{x}`"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((name.to_string(), v))
        })
        .collect()
}
