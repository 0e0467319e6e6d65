//! Low-rank adapters: `ΔW = α·B·A` attached to named projection matrices.
//!
//! Adapters are grouped into role-tagged [`AdapterSet`]s. Appearance adapters
//! (sketch `A`, reference-video `A′`) may only target spatial projections;
//! motion adapters may only target temporal ones.
//!
//! The on-disk format is a sequence of text header lines followed by a
//! little-endian `f32` payload (B then A, row-major) for every adapter.
//! Parameters are therefore kept f32-representable whenever a set is meant
//! to round-trip exactly; see [`AdapterSet::round_to_f32`].

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const ADAPTER_MAGIC: &str = "SKAD1";

/// Attachment keys for the spatial block.
pub const SPATIAL_KEYS: [&str; 4] = ["spatial.q", "spatial.k", "spatial.v", "spatial.o"];
/// Attachment keys for the temporal block.
pub const TEMPORAL_KEYS: [&str; 4] = ["temporal.q", "temporal.k", "temporal.v", "temporal.o"];

pub fn is_spatial_key(key: &str) -> bool {
    SPATIAL_KEYS.contains(&key)
}

pub fn is_temporal_key(key: &str) -> bool {
    TEMPORAL_KEYS.contains(&key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// `d × r`
    pub b: Array2<f64>,
    /// `r × k`
    pub a: Array2<f64>,
    pub alpha: f64,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

impl LoraAdapter {
    /// Fresh adapter with `B = 0` and Gaussian `A` (std `1/√k`), so `ΔW = 0`.
    pub fn new<R: Rng + ?Sized>(target: &str, d: usize, k: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        check_rank(d, k, rank)?;
        let std = 1.0 / (k as f64).sqrt();
        let a = Array2::from_shape_simple_fn((rank, k), || f32_round(std * rng.sample::<f64, _>(StandardNormal)));
        Ok(Self {
            target: target.to_string(),
            b: Array2::zeros((d, rank)),
            a,
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// `(d, k)` of the matrix this adapter modifies.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.nrows(), self.a.ncols())
    }

    /// `α·B·A`
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.alpha
    }

    pub fn round_to_f32(&mut self) {
        self.b.mapv_inplace(f32_round);
        self.a.mapv_inplace(f32_round);
    }

    pub fn num_parameters(&self) -> usize {
        self.b.len() + self.a.len()
    }
}

fn check_rank(d: usize, k: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank * 4 > d.min(k) {
        return Err(Error::Argument(format!(
            "rank {rank} violates 1 <= r <= min(d, k)/4 for a {d}x{k} target"
        )));
    }
    Ok(())
}

/// `W0 + Σ λ_j·α_j·B_j·A_j`.
pub fn merge(w0: &Array2<f64>, contributions: &[(&LoraAdapter, f64)]) -> Result<Array2<f64>> {
    let mut w = w0.clone();
    for (adapter, lambda) in contributions {
        if adapter.target_shape() != w0.dim() {
            return Err(Error::Shape(format!(
                "adapter on `{}` is {:?}, base matrix is {:?}",
                adapter.target,
                adapter.target_shape(),
                w0.dim()
            )));
        }
        w.scaled_add(lambda * adapter.alpha, &adapter.b.dot(&adapter.a));
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterRole {
    /// A-LoRAs: sketch appearance, spatial keys.
    Appearance,
    /// A′-LoRAs: reference-video appearance, spatial keys, discarded after motion learning.
    ReferenceAppearance,
    /// M-LoRAs: reference-video motion, temporal keys.
    Motion,
}

impl AdapterRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterRole::Appearance => "appearance",
            AdapterRole::ReferenceAppearance => "reference-appearance",
            AdapterRole::Motion => "motion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(AdapterRole::Appearance),
            "reference-appearance" => Ok(AdapterRole::ReferenceAppearance),
            "motion" => Ok(AdapterRole::Motion),
            other => Err(Error::Format(format!("unknown adapter role `{other}`"))),
        }
    }

    pub fn allows(self, key: &str) -> bool {
        match self {
            AdapterRole::Appearance | AdapterRole::ReferenceAppearance => is_spatial_key(key),
            AdapterRole::Motion => is_temporal_key(key),
        }
    }

    /// Keys a freshly created set of this role attaches to.
    pub fn default_keys(self) -> &'static [&'static str; 4] {
        match self {
            AdapterRole::Appearance | AdapterRole::ReferenceAppearance => &SPATIAL_KEYS,
            AdapterRole::Motion => &TEMPORAL_KEYS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    role: AdapterRole,
    adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn new(role: AdapterRole, adapters: Vec<LoraAdapter>) -> Result<Self> {
        for a in &adapters {
            if !role.allows(&a.target) {
                return Err(Error::Role(format!(
                    "{} adapters may not target `{}`",
                    role.as_str(),
                    a.target
                )));
            }
        }
        Ok(Self { role, adapters })
    }

    /// One fresh `d × d` adapter per default key of `role`.
    pub fn fresh<R: Rng + ?Sized>(role: AdapterRole, d_model: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        let adapters = role
            .default_keys()
            .iter()
            .map(|key| LoraAdapter::new(key, d_model, d_model, rank, alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(role, adapters)
    }

    pub fn role(&self) -> AdapterRole {
        self.role
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn round_to_f32(&mut self) {
        self.adapters.iter_mut().for_each(LoraAdapter::round_to_f32);
    }

    /// Frobenius norm of the stacked `ΔW`s.
    pub fn delta_norm(&self) -> f64 {
        self.adapters
            .iter()
            .map(|a| a.delta().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn adapters_to_bytes(set: &AdapterSet) -> Vec<u8> {
    let mut out = Vec::new();
    let _ = writeln!(out, "{ADAPTER_MAGIC}");
    let _ = writeln!(out, "role {}", set.role.as_str());
    let _ = writeln!(out, "count {}", set.adapters.len());
    for a in &set.adapters {
        let (d, k) = a.target_shape();
        let _ = writeln!(out, "target {}", a.target);
        let _ = writeln!(out, "d {d}");
        let _ = writeln!(out, "k {k}");
        let _ = writeln!(out, "r {}", a.rank());
        let _ = writeln!(out, "alpha {:?}", a.alpha);
        for v in a.b.iter().chain(a.a.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated adapter header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("adapter header is not UTF-8".into()))
    }

    fn field(&mut self, name: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::Format(format!("expected `{name}` header line, found `{line}`")))
    }

    fn number<T: std::str::FromStr>(&mut self, name: &str) -> Result<T> {
        let v = self.field(name)?;
        v.parse()
            .map_err(|_| Error::Format(format!("bad value `{v}` for `{name}`")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n * 4;
        let chunk = self
            .bytes
            .get(self.pos..self.pos + len)
            .ok_or_else(|| Error::Format("truncated adapter payload".into()))?;
        self.pos += len;
        Ok(chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

pub fn adapters_from_bytes(bytes: &[u8]) -> Result<AdapterSet> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.line()?;
    if magic != ADAPTER_MAGIC {
        return Err(Error::Format(format!(
            "unsupported adapter file version `{magic}` (expected {ADAPTER_MAGIC})"
        )));
    }
    let role = AdapterRole::parse(r.field("role")?)?;
    let count: usize = r.number("count")?;
    let mut adapters = Vec::with_capacity(count);
    for _ in 0..count {
        let target = r.field("target")?.to_string();
        let d: usize = r.number("d")?;
        let k: usize = r.number("k")?;
        let rank: usize = r.number("r")?;
        let alpha: f64 = r.number("alpha")?;
        check_rank(d, k, rank).map_err(|e| Error::Format(e.to_string()))?;
        let b = Array2::from_shape_vec((d, rank), r.f32s(d * rank)?).expect("shape checked");
        let a = Array2::from_shape_vec((rank, k), r.f32s(rank * k)?).expect("shape checked");
        adapters.push(LoraAdapter { target, b, a, alpha });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after adapter payload".into()));
    }
    AdapterSet::new(role, adapters)
}

pub fn save_adapters(set: &AdapterSet, path: &Path) -> Result<()> {
    fs::write(path, adapters_to_bytes(set))?;
    Ok(())
}

pub fn load_adapters(path: &Path) -> Result<AdapterSet> {
    adapters_from_bytes(&fs::read(path)?)
}
