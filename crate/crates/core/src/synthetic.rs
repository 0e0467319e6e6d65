//! Analytic motion clips of simple shapes, with their ground-truth centroid
//! tracks, and a small built-in sketch.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{RasterFrame, RasterVideo};
use crate::sketch::{ControlPoint, CubicStroke, SketchFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Translate,
    Bounce,
    Jump,
    ScalePulse,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [Self::Translate, Self::Bounce, Self::Jump, Self::ScalePulse];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Translate => "translate",
            Self::Bounce => "bounce",
            Self::Jump => "jump",
            Self::ScalePulse => "scale-pulse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown motion kind `{s}` (expected translate, bounce, jump or scale-pulse)")))
    }

    /// Verb used in motion prompts.
    pub fn verb(self) -> &'static str {
        match self {
            Self::Translate => "moving",
            Self::Bounce => "bouncing",
            Self::Jump => "jumping",
            Self::ScalePulse => "pulsing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [Self::Square, Self::Disk, Self::Triangle];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Disk => "disk",
            Self::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown shape `{s}` (expected square, disk or triangle)")))
    }

    /// Bare subject prompt, e.g. "a square".
    pub fn subject(self) -> String {
        format!("a {}", self.as_str())
    }

    /// Area of the filled shape with half-extent `r`.
    pub fn area(self, r: f64) -> f64 {
        match self {
            Self::Square => 4.0 * r * r,
            Self::Disk => PI * r * r,
            Self::Triangle => 2.0 * r * r,
        }
    }
}

/// Motion prompt, e.g. "a square is moving".
pub fn motion_prompt(subject: &str, kind: MotionKind) -> String {
    format!("{subject} is {}", kind.verb())
}

/// Everything that fixes a clip, in normalized canvas units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryParams {
    pub shape: ShapeKind,
    /// Stroke thickness for an outlined shape; `None` fills it.
    pub outline: Option<f64>,
    /// Half-extent of the shape.
    pub size: f64,
    /// Centre at the first frame.
    pub start: (f64, f64),
    /// Total displacement over the clip (translate and bounce).
    pub travel: (f64, f64),
    /// Peak height of bounce and jump arcs.
    pub height: f64,
    /// Relative size change of the pulse.
    pub pulse: f64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            shape: ShapeKind::Square,
            outline: None,
            size: 0.12,
            start: (0.3, 0.3),
            travel: (0.4, 0.4),
            height: 0.3,
            pulse: 0.35,
        }
    }
}

impl GeometryParams {
    /// Random shape, style, size, start and direction that keep the shape
    /// on canvas for every motion kind over 16 frames.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let size: f64 = rng.random_range(0.08..0.15);
            let outline = rng.random_bool(0.5).then(|| rng.random_range(0.02..0.04));
            let reach: f64 = rng.random_range(0.2..0.4);
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            let g = Self {
                shape: ShapeKind::ALL[rng.random_range(0..3)],
                outline,
                size,
                start: (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)),
                travel: (reach * angle.cos(), reach * angle.sin()),
                height: rng.random_range(0.15..0.3),
                pulse: rng.random_range(0.2..0.4),
            };
            if g.stays_on_canvas(16) {
                return g;
            }
        }
    }

    /// Whether the bounding box stays inside the canvas for every kind.
    pub fn stays_on_canvas(&self, frames: usize) -> bool {
        MotionKind::ALL.into_iter().all(|kind| {
            (0..frames).all(|k| {
                let ((x, y), r) = pose(kind, self, k, frames);
                x - r >= 0.0 && x + r <= 1.0 && y - r >= 0.0 && y + r <= 1.0
            })
        })
    }
}

/// Rendered clip plus the analytic ink centroid of every frame.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub video: RasterVideo,
    pub track: Vec<(f64, f64)>,
    /// Half-extent per frame.
    pub sizes: Vec<f64>,
}

fn arc(u: f64) -> f64 {
    4.0 * u * (1.0 - u)
}

/// Centre and half-extent at frame `k` of `frames`.
pub fn pose(kind: MotionKind, geom: &GeometryParams, k: usize, frames: usize) -> ((f64, f64), f64) {
    let u = k as f64 / (frames - 1) as f64;
    let (x0, y0) = geom.start;
    match kind {
        MotionKind::Translate => ((x0 + u * geom.travel.0, y0 + u * geom.travel.1), geom.size),
        MotionKind::Bounce => ((x0 + u * geom.travel.0, y0 + u * geom.travel.1 - geom.height * arc(u)), geom.size),
        MotionKind::Jump => {
            // Rest for the first and last third, one hop in between.
            let v = ((u - 1.0 / 3.0) * 3.0).clamp(0.0, 1.0);
            ((x0, y0 - geom.height * arc(v)), geom.size)
        }
        MotionKind::ScalePulse => ((x0, y0), geom.size * (1.0 + geom.pulse * (2.0 * PI * u).sin())),
    }
}

fn inside(shape: ShapeKind, x: f64, y: f64, r: f64) -> bool {
    match shape {
        ShapeKind::Square => x.abs() <= r && y.abs() <= r,
        ShapeKind::Disk => x * x + y * y <= r * r,
        // Apex up, base at y = +r, base width 2r.
        ShapeKind::Triangle => y <= r && y >= -r && x.abs() <= (y + r) / 2.0,
    }
}

/// Point test in coordinates centred on the shape's centroid.
fn inside_centred(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    // The triangle's centroid sits r/3 below its bounding-box centre.
    let dy = if shape == ShapeKind::Triangle { dy + r / 3.0 } else { dy };
    inside(shape, dx, dy, r)
}

fn covered(geom: &GeometryParams, dx: f64, dy: f64, r: f64) -> bool {
    let outer = inside_centred(geom.shape, dx, dy, r);
    match geom.outline {
        None => outer,
        Some(th) => outer && !inside_centred(geom.shape, dx, dy, r - th),
    }
}

const SUPERSAMPLE: usize = 4;

fn render_shape(geom: &GeometryParams, centre: (f64, f64), r: f64, height: usize, width: usize) -> RasterFrame {
    let mut f = RasterFrame::zeros(height, width);
    let s = SUPERSAMPLE as f64;
    for row in 0..height {
        for col in 0..width {
            let mut hits = 0;
            for sr in 0..SUPERSAMPLE {
                for sc in 0..SUPERSAMPLE {
                    let x = (col as f64 + (sc as f64 + 0.5) / s) / width as f64;
                    let y = (row as f64 + (sr as f64 + 0.5) / s) / height as f64;
                    if covered(geom, x - centre.0, y - centre.1, r) {
                        hits += 1;
                    }
                }
            }
            f.data[row * width + col] = hits as f64 / (s * s);
        }
    }
    f
}

/// Render `frames` frames of the analytic motion.
pub fn make_synthetic_video(kind: MotionKind, frames: usize, height: usize, width: usize, geom: &GeometryParams) -> Result<SyntheticClip> {
    if frames < 2 {
        return Err(Error::Argument(format!("synthetic clips need at least 2 frames, got {frames}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Argument("empty raster".into()));
    }
    let mut out = Vec::with_capacity(frames);
    let mut track = Vec::with_capacity(frames);
    let mut sizes = Vec::with_capacity(frames);
    for k in 0..frames {
        let (c, r) = pose(kind, geom, k, frames);
        out.push(render_shape(geom, c, r, height, width));
        track.push(c);
        sizes.push(r);
    }
    Ok(SyntheticClip {
        video: RasterVideo::new(out)?,
        track,
        sizes,
    })
}

/// A small house drawn with seven strokes, centred on the canvas.
pub fn demo_sketch() -> SketchFrame {
    let p = ControlPoint::new;
    let w = 0.03;
    let line = |a: ControlPoint, b: ControlPoint| CubicStroke::line(a, b, w).expect("valid stroke");
    let strokes = vec![
        line(p(0.36, 0.46), p(0.36, 0.66)),
        line(p(0.36, 0.66), p(0.64, 0.66)),
        line(p(0.64, 0.66), p(0.64, 0.46)),
        line(p(0.33, 0.48), p(0.5, 0.33)),
        line(p(0.5, 0.33), p(0.67, 0.48)),
        line(p(0.46, 0.66), p(0.46, 0.55)),
        CubicStroke::new([p(0.46, 0.55), p(0.47, 0.52), p(0.53, 0.52), p(0.54, 0.55)], w).expect("valid stroke"),
    ];
    SketchFrame::new(strokes).expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn translate_track_is_arithmetic() {
        let clip = make_synthetic_video(MotionKind::Translate, 16, 64, 64, &GeometryParams::default()).unwrap();
        let xs: Vec<f64> = clip.track.iter().map(|c| c.0).collect();
        let step = xs[1] - xs[0];
        assert!(step > 0.0);
        for w in xs.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-12);
        }
    }

    #[test]
    fn bounce_is_symmetric_parabola() {
        let g = GeometryParams {
            travel: (0.4, 0.0),
            start: (0.3, 0.7),
            ..Default::default()
        };
        let clip = make_synthetic_video(MotionKind::Bounce, 16, 64, 64, &g).unwrap();
        let ys: Vec<f64> = clip.track.iter().map(|c| c.1).collect();
        for k in 0..16 {
            assert!((ys[k] - ys[15 - k]).abs() < 1e-12);
        }
        // Constant second difference.
        let d2: Vec<f64> = ys.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
        for d in &d2 {
            assert!((d - d2[0]).abs() < 1e-12 && *d > 0.0);
        }
    }

    #[test]
    fn jump_rests_then_hops() {
        let clip = make_synthetic_video(MotionKind::Jump, 16, 32, 32, &GeometryParams { start: (0.5, 0.7), ..Default::default() }).unwrap();
        let ys: Vec<f64> = clip.track.iter().map(|c| c.1).collect();
        assert_eq!(ys[0], 0.7);
        assert_eq!(ys[15], 0.7);
        assert!(ys[7] < 0.5);
        assert!(clip.track.iter().all(|c| c.0 == 0.5));
    }

    #[test]
    fn pulse_keeps_centre() {
        let clip = make_synthetic_video(MotionKind::ScalePulse, 8, 32, 32, &GeometryParams { start: (0.5, 0.5), ..Default::default() }).unwrap();
        assert!(clip.track.iter().all(|&c| c == (0.5, 0.5)));
        assert!(clip.sizes[2] > clip.sizes[0] && clip.sizes[6] < clip.sizes[0]);
    }

    #[test]
    fn occupancy_matches_area() {
        for shape in ShapeKind::ALL {
            for kind in MotionKind::ALL {
                let g = GeometryParams {
                    shape,
                    start: (0.35, 0.6),
                    travel: (0.3, -0.1),
                    height: 0.2,
                    ..Default::default()
                };
                let clip = make_synthetic_video(kind, 16, 64, 64, &g).unwrap();
                for (f, &r) in clip.video.frames().iter().zip(&clip.sizes) {
                    let area = shape.area(r);
                    assert!((f.mean() - area).abs() <= 0.05 * area, "{shape:?} {kind:?}: {} vs {area}", f.mean());
                }
            }
        }
    }

    #[test]
    fn ink_centroid_matches_track() {
        for shape in ShapeKind::ALL {
            for outline in [None, Some(0.03)] {
                let g = GeometryParams {
                    shape,
                    outline,
                    ..Default::default()
                };
                let clip = make_synthetic_video(MotionKind::Translate, 6, 64, 64, &g).unwrap();
                for (f, &(x, y)) in clip.video.frames().iter().zip(&clip.track) {
                    let (cx, cy) = f.ink_centroid().unwrap();
                    assert!((cx - x).abs() < 0.005 && (cy - y).abs() < 0.005, "{shape:?} {outline:?}: ({cx},{cy}) vs ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn sampled_geometry_stays_on_canvas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = GeometryParams::sample(&mut rng);
            for kind in MotionKind::ALL {
                for k in 0..16 {
                    let ((x, y), r) = pose(kind, &g, k, 16);
                    assert!(x - r >= 0.0 && x + r <= 1.0 && y - r >= 0.0 && y + r <= 1.0, "{g:?} {kind:?} {k}");
                }
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for k in MotionKind::ALL {
            assert_eq!(MotionKind::parse(k.as_str()).unwrap(), k);
        }
        assert!(MotionKind::parse("spin").is_err());
        assert_eq!(motion_prompt("a disk", MotionKind::Bounce), "a disk is bouncing");
        assert_eq!(demo_sketch().len(), 7);
    }
}
