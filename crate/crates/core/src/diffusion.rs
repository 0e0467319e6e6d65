//! Noise schedule, forward process, timestep sampling and the fixed latent encoder.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::raster::{RasterFrame, RasterVideo};

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MIN_ALPHA: f64 = 1e-4;

/// Variance-preserving schedule: `alpha[t]² + sigma[t]² = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule over `steps` discrete steps.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 10 {
            return Err(Error::Argument(format!("schedule needs at least 10 steps, got {steps}")));
        }
        let s = COSINE_OFFSET;
        let norm = (s * std::f64::consts::PI / (2.0 * (1.0 + s))).cos();
        let alpha: Vec<f64> = (0..steps)
            .map(|t| {
                let u = (t as f64 / steps as f64 + s) / (1.0 + s);
                ((u * std::f64::consts::FRAC_PI_2).cos() / norm).clamp(MIN_ALPHA, 1.0)
            })
            .collect();
        let sigma = alpha.iter().map(|a| (1.0 - a * a).sqrt()).collect();
        Ok(Self { alpha, sigma })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Default trimmed sampling range `[⌊0.02T⌋, ⌊0.98T⌋]`.
    pub fn default_range(&self) -> TimestepRange {
        let t = self.steps() as f64;
        TimestepRange {
            min: (0.02 * t).floor() as usize,
            max: (0.98 * t).floor() as usize,
        }
    }

    /// Uniform draw over the default range.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.default_range().sample(rng)
    }
}

/// Inclusive range of timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestepRange {
    pub min: usize,
    pub max: usize,
}

impl TimestepRange {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }

    /// Range given as fractions of the schedule length.
    pub fn from_fractions(sched: &NoiseSchedule, lo: f64, hi: f64) -> Result<Self> {
        let t = sched.steps() as f64;
        let min = (lo * t).floor() as usize;
        let max = ((hi * t).floor() as usize).min(sched.steps() - 1);
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || min > max {
            return Err(Error::Argument(format!("bad timestep fractions [{lo}, {hi}]")));
        }
        Ok(Self { min, max })
    }
}

/// `F × h × w` latent grid with a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LatentVideo {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width],
        }
    }

    pub fn from_data(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::Shape(format!(
                "latent data has {} values, expected {frames}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    /// Standard normal draws of the given shape.
    pub fn randn<R: Rng + ?Sized>(frames: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let data = (0..frames * height * width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            frames,
            height,
            width,
            data,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[k * n..(k + 1) * n]
    }

    /// Single-frame latent holding a copy of frame `k`.
    pub fn single_frame(&self, k: usize) -> Self {
        Self {
            frames: 1,
            height: self.height,
            width: self.width,
            data: self.frame(k).to_vec(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.height == other.height && self.width == other.width
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "latent {}x{}x{} vs {}x{}x{}",
                self.frames, self.height, self.width, other.frames, other.height, other.width
            )))
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(self.with_data(data))
    }

    /// Same shape, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            frames: self.frames,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn mean_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }
}

/// `z_t = α_t·z0 + σ_t·ε`.
pub fn add_noise(z0: &LatentVideo, t: usize, eps: &LatentVideo, sched: &NoiseSchedule) -> Result<LatentVideo> {
    z0.check_same_shape(eps)?;
    if t >= sched.steps() {
        return Err(Error::Argument(format!("timestep {t} out of range 0..{}", sched.steps())));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let data = z0.data.iter().zip(&eps.data).map(|(z, e)| a * z + s * e).collect();
    Ok(z0.with_data(data))
}

/// Fixed encoder: `pool × pool` average pooling then `v ↦ 2v − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentEncoder {
    pub pool: usize,
}

impl Default for LatentEncoder {
    fn default() -> Self {
        Self { pool: 2 }
    }
}

impl LatentEncoder {
    pub fn new(pool: usize) -> Result<Self> {
        if pool == 0 {
            return Err(Error::Argument("pooling factor must be positive".into()));
        }
        Ok(Self { pool })
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if height % self.pool != 0 || width % self.pool != 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} is not divisible by the pooling factor {}",
                self.pool
            )));
        }
        Ok(())
    }

    pub fn latent_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.check(height, width)?;
        Ok((height / self.pool, width / self.pool))
    }

    pub fn encode_frame(&self, frame: &RasterFrame) -> Result<Vec<f64>> {
        let (h, w) = self.latent_size(frame.height, frame.width)?;
        let p = self.pool;
        let norm = 1.0 / (p * p) as f64;
        let mut out = vec![0.0; h * w];
        for (i, o) in out.iter_mut().enumerate() {
            let (r, c) = (i / w, i % w);
            let mut acc = 0.0;
            for dr in 0..p {
                for dc in 0..p {
                    acc += frame.get(r * p + dr, c * p + dc);
                }
            }
            *o = 2.0 * acc * norm - 1.0;
        }
        Ok(out)
    }

    pub fn encode(&self, video: &RasterVideo) -> Result<LatentVideo> {
        let (h, w) = self.latent_size(video.height(), video.width())?;
        let mut data = Vec::with_capacity(video.num_frames() * h * w);
        for f in video.frames() {
            data.extend(self.encode_frame(f)?);
        }
        LatentVideo::from_data(video.num_frames(), h, w, data)
    }

    /// Nearest-neighbor upsample and inverse affine; exact right-inverse of
    /// [`encode`](Self::encode) on block-constant inputs.
    pub fn decode(&self, latent: &LatentVideo) -> Result<RasterVideo> {
        let p = self.pool;
        let (hh, ww) = (latent.height * p, latent.width * p);
        let frames = (0..latent.frames)
            .map(|k| {
                let src = latent.frame(k);
                let data = (0..hh * ww)
                    .map(|i| (src[(i / ww / p) * latent.width + (i % ww) / p] + 1.0) / 2.0)
                    .collect();
                RasterFrame::from_data(hh, ww, data)
            })
            .collect::<Result<Vec<_>>>()?;
        RasterVideo::new(frames)
    }

    /// Transpose of the linear part of `encode` applied to a latent gradient:
    /// every pixel of a block receives `2/pool²` of the block's gradient.
    pub fn encode_transpose(&self, grad: &LatentVideo) -> Vec<RasterFrame> {
        let p = self.pool;
        let k = 2.0 / (p * p) as f64;
        let (hh, ww) = (grad.height * p, grad.width * p);
        (0..grad.frames)
            .map(|f| {
                let src = grad.frame(f);
                let data = (0..hh * ww)
                    .map(|i| k * src[(i / ww / p) * grad.width + (i % ww) / p])
                    .collect();
                RasterFrame {
                    height: hh,
                    width: ww,
                    data,
                }
            })
            .collect()
    }
}

/// Sinusoidal features of a timestep, `dim` values (`dim` even).
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints_and_invariants() {
        assert!(NoiseSchedule::cosine(9).is_err());
        for steps in [16, 100, 1000] {
            let s = NoiseSchedule::cosine(steps).unwrap();
            assert!(s.alpha(0) >= 0.999);
            assert!(s.sigma(0) < 0.05);
            assert!(s.sigma(steps - 1) >= 0.995, "T={steps}");
            for t in 0..steps {
                assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() <= 1e-6);
                if t > 0 {
                    assert!(s.alpha(t) <= s.alpha(t - 1));
                }
            }
        }
    }

    #[test]
    fn closed_form_oracle_at_midpoint() {
        // Independent transcription of the cosine formula in degrees.
        let s = 0.008f64;
        let deg = |u: f64| (u * 90.0).to_radians().cos();
        let expected = deg((500.0 / 1000.0 + s) / (1.0 + s)) / deg(s / (1.0 + s));
        let sched = NoiseSchedule::cosine(1000).unwrap();
        assert!((sched.alpha(500) - expected).abs() < 1e-9);
    }

    #[test]
    fn add_noise_endpoints() {
        let sched = NoiseSchedule::cosine(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = LatentVideo::from_data(1, 4, 4, (0..16).map(|i| (i as f64 / 8.0) - 1.0).collect()).unwrap();
        let eps = LatentVideo::randn(1, 4, 4, &mut rng);
        let zt = add_noise(&z0, 0, &eps, &sched).unwrap();
        let emax = eps.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dev = zt.data.iter().zip(&z0.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dev <= sched.sigma(0) * emax + 1e-12);

        let big_eps = LatentVideo::randn(1, 32, 32, &mut rng);
        let z0 = LatentVideo::from_data(1, 32, 32, vec![0.7; 1024]).unwrap();
        let zt = add_noise(&z0, 999, &big_eps, &sched).unwrap();
        assert!(pearson(&zt.data, &big_eps.data) > 0.99);

        assert!(add_noise(&z0, 1000, &big_eps, &sched).is_err());
        assert!(add_noise(&z0, 5, &eps, &sched).is_err());
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn timestep_sampling_range_and_reproducibility() {
        let sched = NoiseSchedule::cosine(1000).unwrap();
        let r = sched.default_range();
        assert_eq!((r.min, r.max), (20, 980));
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| sched.sample_timestep(&mut rng)).collect::<Vec<_>>()
        };
        let a = draw(11);
        assert_eq!(a, draw(11));
        assert!(a.iter().all(|&t| (20..=980).contains(&t)));
    }

    #[test]
    fn encoder_shapes_and_inverse() {
        let enc = LatentEncoder::default();
        let blank = RasterVideo::new(vec![RasterFrame::zeros(32, 32)]).unwrap();
        let z = enc.encode(&blank).unwrap();
        assert_eq!((z.frames, z.height, z.width), (1, 16, 16));
        assert!(z.data.iter().all(|&v| v == -1.0));

        // Block-constant input is reproduced exactly.
        let data: Vec<f64> = (0..64).map(|i| ((i / 8 / 2) * 4 + (i % 8) / 2) as f64 / 16.0).collect();
        let v = RasterVideo::new(vec![RasterFrame::from_data(8, 8, data).unwrap()]).unwrap();
        assert_eq!(enc.decode(&enc.encode(&v).unwrap()).unwrap(), v);

        assert!(enc.encode(&RasterVideo::new(vec![RasterFrame::zeros(7, 8)]).unwrap()).is_err());
    }

    #[test]
    fn encode_transpose_matches_finite_differences() {
        let enc = LatentEncoder::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = LatentVideo::randn(1, 3, 3, &mut rng);
        let base: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let f = |d: &[f64]| -> f64 {
            let v = RasterVideo::new(vec![RasterFrame::from_data(6, 6, d.to_vec()).unwrap()]).unwrap();
            let z = enc.encode(&v).unwrap();
            z.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let analytic = enc.encode_transpose(&g);
        let h = 1e-3;
        for i in 0..36 {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic[0].data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn timestep_features_are_bounded() {
        let f = timestep_features(500, 16);
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(timestep_features(0, 8)[4], 1.0);
    }
}
