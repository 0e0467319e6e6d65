//! Differentiable soft rasterization of stroke frames.
//!
//! Each stroke is flattened to a polyline of `K` uniformly spaced Bézier
//! parameter samples. A pixel's coverage by stroke `i` is
//! `σ((w_i/2 − d_i)/τ)` where `d_i` is the distance from the pixel center to
//! the nearest polyline segment, and strokes combine by soft-OR:
//! `c = 1 − ∏(1 − s_i)`. Intensity 1 means ink; export inverts to dark-on-white.
//!
//! [`render_vjp`] pulls an upstream pixel gradient back to the control points
//! analytically: soft-OR, sigmoid, point-to-segment distance, and the linear
//! map from control points to polyline samples.

use crate::error::{Error, Result};
use crate::sketch::{bernstein, AnimatedSketch, CubicStroke, SketchFrame, PARAMS_PER_STROKE};

/// Pixels farther than `w/2 + CULL_TEMPERATURES·τ` from a stroke's bounding box
/// are skipped; the sigmoid there is below 3e-16.
const CULL_TEMPERATURES: f64 = 36.0;

pub const MIN_RASTER_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftnessConfig {
    /// Sigmoid temperature in canvas units.
    pub temperature: f64,
    /// Bézier parameter samples per stroke.
    pub samples_per_curve: usize,
}

impl Default for SoftnessConfig {
    fn default() -> Self {
        Self {
            temperature: 0.006,
            samples_per_curve: 32,
        }
    }
}

impl SoftnessConfig {
    pub fn new(temperature: f64, samples_per_curve: usize) -> Result<Self> {
        let cfg = Self {
            temperature,
            samples_per_curve,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Argument(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.samples_per_curve < 8 {
            return Err(Error::Argument(format!(
                "samples_per_curve must be >= 8, got {}",
                self.samples_per_curve
            )));
        }
        Ok(())
    }
}

/// Row-major grid of ink intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RasterFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RasterFrame {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "raster data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Intensity-weighted center in canvas units, or `None` for an empty frame.
    pub fn ink_centroid(&self) -> Option<(f64, f64)> {
        let mut total = 0.0;
        let (mut cx, mut cy) = (0.0, 0.0);
        for r in 0..self.height {
            let y = (r as f64 + 0.5) / self.height as f64;
            for c in 0..self.width {
                let v = self.get(r, c);
                total += v;
                cx += v * (c as f64 + 0.5) / self.width as f64;
                cy += v * y;
            }
        }
        (total > 1e-12).then(|| (cx / total, cy / total))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterVideo {
    frames: Vec<RasterFrame>,
}

impl RasterVideo {
    pub fn new(frames: Vec<RasterFrame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Argument("a video needs at least one frame".into()))?;
        if frames
            .iter()
            .any(|f| f.height != first.height || f.width != first.width)
        {
            return Err(Error::Shape("video frames differ in size".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[RasterFrame] {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn into_frames(self) -> Vec<RasterFrame> {
        self.frames
    }
}

fn check_size(height: usize, width: usize) -> Result<()> {
    if height < MIN_RASTER_SIZE || width < MIN_RASTER_SIZE {
        return Err(Error::Argument(format!(
            "raster must be at least {MIN_RASTER_SIZE}x{MIN_RASTER_SIZE}, got {height}x{width}"
        )));
    }
    Ok(())
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Polyline flattening of one stroke.
struct Polyline {
    /// Sample positions.
    pts: Vec<(f64, f64)>,
}

impl Polyline {
    fn new(stroke: &CubicStroke, basis: &[[f64; 4]]) -> Self {
        let pts = basis
            .iter()
            .map(|b| {
                let mut x = 0.0;
                let mut y = 0.0;
                for (w, p) in b.iter().zip(&stroke.points) {
                    x += w * p.x;
                    y += w * p.y;
                }
                (x, y)
            })
            .collect();
        Self { pts }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        self.pts.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        )
    }

    /// Nearest segment to `(px, py)`: `(segment index, t*, nearest x, nearest y, distance)`.
    /// Ties keep the first segment attaining the minimum.
    #[inline]
    fn nearest(&self, px: f64, py: f64) -> (usize, f64, f64, f64, f64) {
        let mut best = (0, 0.0, 0.0, 0.0, f64::INFINITY);
        for (k, seg) in self.pts.windows(2).enumerate() {
            let (ax, ay) = seg[0];
            let (bx, by) = seg[1];
            let (ex, ey) = (bx - ax, by - ay);
            let len2 = ex * ex + ey * ey;
            let t = if len2 > 0.0 {
                (((px - ax) * ex + (py - ay) * ey) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let qx = ax + t * ex;
            let qy = ay + t * ey;
            let d2 = (px - qx) * (px - qx) + (py - qy) * (py - qy);
            if d2 < best.4 {
                best = (k, t, qx, qy, d2);
            }
        }
        best.4 = best.4.sqrt();
        best
    }
}

fn sample_basis(k: usize) -> Vec<[f64; 4]> {
    (0..k).map(|i| bernstein(i as f64 / (k - 1) as f64)).collect()
}

/// Pixel window `[r0, r1) × [c0, c1)` that can receive non-negligible coverage.
fn window(line: &Polyline, width: f64, cfg: &SoftnessConfig, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (x0, y0, x1, y1) = line.bbox();
    let m = width / 2.0 + CULL_TEMPERATURES * cfg.temperature;
    let lo = |v: f64, n: usize| ((v * n as f64 - 0.5).floor().max(0.0) as usize).min(n);
    let hi = |v: f64, n: usize| ((v * n as f64 - 0.5).ceil() + 1.0).clamp(0.0, n as f64) as usize;
    if !(x0 - m).is_finite() || !(x1 + m).is_finite() || !(y0 - m).is_finite() || !(y1 + m).is_finite() {
        return (0, 0, 0, 0);
    }
    (lo(y0 - m, h), hi(y1 + m, h), lo(x0 - m, w), hi(x1 + m, w))
}

/// Per-stroke coverage over the full canvas (zero outside the stroke window).
fn coverage_maps(frame: &SketchFrame, h: usize, w: usize, cfg: &SoftnessConfig) -> Vec<Vec<f64>> {
    let basis = sample_basis(cfg.samples_per_curve);
    frame
        .strokes()
        .iter()
        .map(|stroke| {
            let line = Polyline::new(stroke, &basis);
            let mut cov = vec![0.0; h * w];
            let (r0, r1, c0, c1) = window(&line, stroke.width, cfg, h, w);
            for r in r0..r1 {
                let py = (r as f64 + 0.5) / h as f64;
                for c in c0..c1 {
                    let px = (c as f64 + 0.5) / w as f64;
                    let d = line.nearest(px, py).4;
                    cov[r * w + c] = sigmoid((stroke.width / 2.0 - d) / cfg.temperature);
                }
            }
            cov
        })
        .collect()
}

/// Soft-OR rasterization of one frame.
pub fn render(frame: &SketchFrame, height: usize, width: usize, cfg: &SoftnessConfig) -> Result<RasterFrame> {
    check_size(height, width)?;
    cfg.validate()?;
    let maps = coverage_maps(frame, height, width, cfg);
    let mut keep = vec![1.0; height * width];
    for cov in &maps {
        for (k, s) in keep.iter_mut().zip(cov) {
            *k *= 1.0 - s;
        }
    }
    let data = keep.into_iter().map(|k| (1.0 - k).clamp(0.0, 1.0)).collect();
    RasterFrame::from_data(height, width, data)
}

/// Frame-wise [`render`].
pub fn render_video(anim: &AnimatedSketch, height: usize, width: usize, cfg: &SoftnessConfig) -> Result<RasterVideo> {
    let frames = anim
        .frames()
        .iter()
        .map(|f| render(f, height, width, cfg))
        .collect::<Result<Vec<_>>>()?;
    RasterVideo::new(frames)
}

/// Gradient of `⟨upstream, render(frame)⟩` with respect to the frame's control
/// points, laid out like [`SketchFrame::params`].
pub fn render_vjp(frame: &SketchFrame, height: usize, width: usize, cfg: &SoftnessConfig, upstream: &RasterFrame) -> Result<Vec<f64>> {
    check_size(height, width)?;
    cfg.validate()?;
    if upstream.height != height || upstream.width != width {
        return Err(Error::Shape(format!(
            "upstream is {}x{}, raster is {height}x{width}",
            upstream.height, upstream.width
        )));
    }
    let n = frame.len();
    let mut grad = vec![0.0; n * PARAMS_PER_STROKE];
    if upstream.data.iter().all(|&u| u == 0.0) {
        return Ok(grad);
    }
    let hw = height * width;
    let maps = coverage_maps(frame, height, width, cfg);

    // excl[i][p] = ∏_{j≠i} (1 − s_j(p)), via prefix/suffix products.
    let mut excl = vec![vec![1.0; hw]; n];
    for p in 0..hw {
        let mut prefix = 1.0;
        for i in 0..n {
            excl[i][p] = prefix;
            prefix *= 1.0 - maps[i][p];
        }
        let mut suffix = 1.0;
        for i in (0..n).rev() {
            excl[i][p] *= suffix;
            suffix *= 1.0 - maps[i][p];
        }
    }

    let basis = sample_basis(cfg.samples_per_curve);
    let tau = cfg.temperature;
    for (i, stroke) in frame.strokes().iter().enumerate() {
        let line = Polyline::new(stroke, &basis);
        let mut sample_grad = vec![(0.0, 0.0); line.pts.len()];
        let (r0, r1, c0, c1) = window(&line, stroke.width, cfg, height, width);
        for r in r0..r1 {
            let py = (r as f64 + 0.5) / height as f64;
            for c in c0..c1 {
                let p = r * width + c;
                let up = upstream.data[p];
                if up == 0.0 {
                    continue;
                }
                let s = maps[i][p];
                // dc/ds_i = excl, ds/dd = −s(1−s)/τ
                let g_d = -up * excl[i][p] * s * (1.0 - s) / tau;
                if g_d == 0.0 {
                    continue;
                }
                let px = (c as f64 + 0.5) / width as f64;
                let (k, t, qx, qy, d) = line.nearest(px, py);
                if d <= 0.0 {
                    continue;
                }
                let nx = (qx - px) / d;
                let ny = (qy - py) / d;
                sample_grad[k].0 += g_d * (1.0 - t) * nx;
                sample_grad[k].1 += g_d * (1.0 - t) * ny;
                sample_grad[k + 1].0 += g_d * t * nx;
                sample_grad[k + 1].1 += g_d * t * ny;
            }
        }
        let out = &mut grad[i * PARAMS_PER_STROKE..(i + 1) * PARAMS_PER_STROKE];
        for (b, &(gx, gy)) in basis.iter().zip(&sample_grad) {
            for j in 0..4 {
                out[2 * j] += b[j] * gx;
                out[2 * j + 1] += b[j] * gy;
            }
        }
    }
    Ok(grad)
}
