//! Pixel-space proxies for appearance, motion and temporal quality of an
//! animation, and the report formats used by the ablation table.

use std::fmt::Write as _;

use log::warn;

use crate::error::{Error, Result};
use crate::raster::{RasterFrame, RasterVideo};

/// Side of the pooled grid compared by the cosine scores.
pub const POOL_GRID: usize = 8;

/// Tracks whose standard deviation is below this count as constant.
pub const DEGENERATE_TRACK_STD: f64 = 1e-6;

/// Average-pool a frame onto an 8×8 grid and subtract the mean.
pub fn pooled_centered(frame: &RasterFrame) -> Vec<f64> {
    let g = POOL_GRID;
    let mut sums = vec![0.0; g * g];
    let mut counts = vec![0usize; g * g];
    for r in 0..frame.height {
        let br = r * g / frame.height;
        for c in 0..frame.width {
            let bc = c * g / frame.width;
            sums[br * g + bc] += frame.get(r, c);
            counts[br * g + bc] += 1;
        }
    }
    let mut v: Vec<f64> = sums.iter().zip(&counts).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    v
}

/// Cosine similarity, defined as 0 (with a warning) if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        warn!("cosine of an all-zero pooled vector; scoring 0");
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine between each pooled frame and the pooled sketch.
pub fn appearance_alignment(video: &RasterVideo, sketch: &RasterFrame) -> Result<f64> {
    if video.height() != sketch.height || video.width() != sketch.width {
        return Err(Error::Shape(format!(
            "animation is {}x{}, sketch is {}x{}",
            video.height(),
            video.width(),
            sketch.height,
            sketch.width
        )));
    }
    let s = pooled_centered(sketch);
    let total: f64 = video.frames().iter().map(|f| cosine(&pooled_centered(f), &s)).sum();
    Ok(total / video.num_frames() as f64)
}

/// Mean cosine between consecutive pooled frames.
pub fn temporal_consistency(video: &RasterVideo) -> Result<f64> {
    if video.num_frames() < 2 {
        return Err(Error::Argument("temporal consistency needs at least 2 frames".into()));
    }
    let pooled: Vec<Vec<f64>> = video.frames().iter().map(pooled_centered).collect();
    let total: f64 = pooled.windows(2).map(|w| cosine(&w[0], &w[1])).sum();
    Ok(total / (pooled.len() - 1) as f64)
}

/// Pearson correlation; 0 if either series is (numerically) constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
    let sb = (b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n).sqrt();
    if sa < DEGENERATE_TRACK_STD || sb < DEGENERATE_TRACK_STD {
        return 0.0;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    (cov / (sa * sb)).clamp(-1.0, 1.0)
}

/// Ink centroid of every frame; blank frames take the canvas centre.
pub fn ink_track(video: &RasterVideo) -> Vec<(f64, f64)> {
    video.frames().iter().map(|f| f.ink_centroid().unwrap_or((0.5, 0.5))).collect()
}

/// Mean of the x and y Pearson correlations between two tracks.
pub fn track_correlation(track: &[(f64, f64)], reference: &[(f64, f64)]) -> Result<f64> {
    if track.len() != reference.len() {
        return Err(Error::Shape(format!("track has {} frames, reference has {}", track.len(), reference.len())));
    }
    let xs = |t: &[(f64, f64)]| t.iter().map(|p| p.0).collect::<Vec<_>>();
    let ys = |t: &[(f64, f64)]| t.iter().map(|p| p.1).collect::<Vec<_>>();
    Ok((pearson(&xs(track), &xs(reference)) + pearson(&ys(track), &ys(reference))) / 2.0)
}

pub fn motion_alignment(video: &RasterVideo, reference: &[(f64, f64)]) -> Result<f64> {
    track_correlation(&ink_track(video), reference)
}

/// Variance of the x track plus variance of the y track.
pub fn track_variance(track: &[(f64, f64)]) -> f64 {
    let n = track.len() as f64;
    let mx = track.iter().map(|p| p.0).sum::<f64>() / n;
    let my = track.iter().map(|p| p.1).sum::<f64>() / n;
    track.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub appearance: f64,
    pub motion: f64,
    pub temporal: f64,
    pub track: Vec<(f64, f64)>,
    pub reference: Vec<(f64, f64)>,
}

pub fn evaluate(video: &RasterVideo, sketch: &RasterFrame, reference: &[(f64, f64)]) -> Result<EvalReport> {
    let track = ink_track(video);
    Ok(EvalReport {
        appearance: appearance_alignment(video, sketch)?,
        motion: track_correlation(&track, reference)?,
        temporal: temporal_consistency(video)?,
        track,
        reference: reference.to_vec(),
    })
}

const SCORES_HEADER: &str = "variant,appearance,motion,temporal";

/// Score table, one row per variant.
pub fn scores_to_csv(rows: &[(String, EvalReport)]) -> String {
    let mut s = format!("{SCORES_HEADER}\n");
    for (name, r) in rows {
        writeln!(s, "{name},{:?},{:?},{:?}", r.appearance, r.motion, r.temporal).unwrap();
    }
    s
}

/// Parse a score table back into `(variant, appearance, motion, temporal)`.
pub fn scores_from_csv(text: &str) -> Result<Vec<(String, f64, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(SCORES_HEADER) {
        return Err(Error::Format("not an evaluation score table".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Format(format!("bad score row `{l}`"));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok((f[0].to_string(), num(f[1])?, num(f[2])?, num(f[3])?))
        })
        .collect()
}

pub fn tracks_to_csv(report: &EvalReport) -> String {
    let mut s = String::from("frame,x,y,ref_x,ref_y\n");
    for (k, (p, q)) in report.track.iter().zip(&report.reference).enumerate() {
        writeln!(s, "{k},{:?},{:?},{:?},{:?}", p.0, p.1, q.0, q.1).unwrap();
    }
    s
}

/// Parse `(track, reference)` back from [`tracks_to_csv`] output.
pub fn tracks_from_csv(text: &str) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let mut lines = text.lines();
    if lines.next() != Some("frame,x,y,ref_x,ref_y") {
        return Err(Error::Format("not a track table".into()));
    }
    let mut track = Vec::new();
    let mut reference = Vec::new();
    for l in lines.filter(|l| !l.is_empty()) {
        let bad = || Error::Format(format!("bad track row `{l}`"));
        let f: Vec<f64> = l.split(',').skip(1).map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        if f.len() != 4 {
            return Err(bad());
        }
        track.push((f[0], f[1]));
        reference.push((f[2], f[3]));
    }
    Ok((track, reference))
}

/// Reference track as `x,y` lines with a header.
pub fn reference_to_csv(track: &[(f64, f64)]) -> String {
    let mut s = String::from("x,y\n");
    for p in track {
        writeln!(s, "{:?},{:?}", p.0, p.1).unwrap();
    }
    s
}

pub fn reference_from_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("x,y") {
        return Err(Error::Format("not a reference track".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Format(format!("bad reference row `{l}`"));
            let (x, y) = l.split_once(',').ok_or_else(bad)?;
            Ok((x.parse().map_err(|_| bad())?, y.parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Human-readable table; later rows show deltas against the first.
pub fn scores_to_text(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(7);
    let mut s = format!("{:<width$}  {:>10}  {:>10}  {:>10}\n", "variant", "appearance", "motion", "temporal");
    let first = rows.first().map(|r| &r.1);
    for (i, (name, r)) in rows.iter().enumerate() {
        write!(s, "{name:<width$}  {:>10.4}  {:>10.4}  {:>10.4}", r.appearance, r.motion, r.temporal).unwrap();
        if let (true, Some(f)) = (i > 0, first) {
            write!(
                s,
                "   (Δ {:+.4} / {:+.4} / {:+.4})",
                r.appearance - f.appearance,
                r.motion - f.motion,
                r.temporal - f.temporal
            )
            .unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(h: usize, w: usize, cx: f64, cy: f64) -> RasterFrame {
        let data = (0..h * w)
            .map(|i| {
                let x = ((i % w) as f64 + 0.5) / w as f64;
                let y = ((i / w) as f64 + 0.5) / h as f64;
                if (x - cx).powi(2) + (y - cy).powi(2) < 0.02 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        RasterFrame::from_data(h, w, data).unwrap()
    }

    fn negated(f: &RasterFrame) -> RasterFrame {
        RasterFrame::from_data(f.height, f.width, f.data.iter().map(|v| 1.0 - v).collect()).unwrap()
    }

    #[test]
    fn identical_and_negated_frames() {
        let s = blob(32, 32, 0.4, 0.6);
        let same = RasterVideo::new(vec![s.clone(); 4]).unwrap();
        assert!((appearance_alignment(&same, &s).unwrap() - 1.0).abs() < 1e-12);
        assert!((temporal_consistency(&same).unwrap() - 1.0).abs() < 1e-12);
        let neg = RasterVideo::new(vec![negated(&s); 3]).unwrap();
        assert!((appearance_alignment(&neg, &s).unwrap() + 1.0).abs() < 1e-12);
        let alt = RasterVideo::new(vec![s.clone(), negated(&s), s.clone(), negated(&s)]).unwrap();
        assert!((temporal_consistency(&alt).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_invariance() {
        let s = blob(32, 32, 0.4, 0.6);
        let frames: Vec<RasterFrame> = (0..4).map(|k| blob(32, 32, 0.3 + 0.05 * k as f64, 0.5)).collect();
        let v = RasterVideo::new(frames.clone()).unwrap();
        let scaled = RasterVideo::new(
            frames
                .iter()
                .map(|f| RasterFrame::from_data(32, 32, f.data.iter().map(|x| 0.5 * x).collect()).unwrap())
                .collect(),
        )
        .unwrap();
        assert!((appearance_alignment(&v, &s).unwrap() - appearance_alignment(&scaled, &s).unwrap()).abs() < 1e-12);
        assert!((temporal_consistency(&v).unwrap() - temporal_consistency(&scaled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn random_frames_are_unaligned() {
        let s = blob(32, 32, 0.5, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut total = 0.0;
        for _ in 0..100 {
            let f = RasterFrame::from_data(32, 32, (0..1024).map(|_| rng.random::<f64>()).collect()).unwrap();
            total += appearance_alignment(&RasterVideo::new(vec![f]).unwrap(), &s).unwrap();
        }
        assert!((total / 100.0).abs() < 0.2);
    }

    #[test]
    fn tracks() {
        // Whole-pixel steps so every frame is an exact translate of the first.
        let reference: Vec<(f64, f64)> = (0..8).map(|k| (0.2 + 3.0 * k as f64 / 64.0, 0.3 + k as f64 / 64.0)).collect();
        let follow = RasterVideo::new(reference.iter().map(|&(x, y)| blob(64, 64, x, y)).collect()).unwrap();
        assert!((motion_alignment(&follow, &reference).unwrap() - 1.0).abs() < 1e-9);
        let shifted: Vec<(f64, f64)> = reference.iter().map(|p| (p.0 + 0.1, p.1 - 0.05)).collect();
        assert!((motion_alignment(&follow, &shifted).unwrap() - 1.0).abs() < 1e-9);
        let still = RasterVideo::new(vec![blob(64, 64, 0.5, 0.5); 8]).unwrap();
        assert_eq!(motion_alignment(&still, &reference).unwrap(), 0.0);
        let reversed = RasterVideo::new(reference.iter().rev().map(|&(x, y)| blob(64, 64, x, y)).collect()).unwrap();
        assert!((motion_alignment(&reversed, &reference).unwrap() + 1.0).abs() < 1e-9);
        assert!(motion_alignment(&still, &reference[..4]).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let r = EvalReport {
            appearance: 0.1 + 0.2,
            motion: -1.0 / 3.0,
            temporal: 0.999,
            track: vec![(0.25, 0.5), (1.0 / 7.0, 0.0)],
            reference: vec![(0.1, 0.2), (0.3, 0.4)],
        };
        let rows = vec![("full".to_string(), r.clone()), ("w/o M-LoRA".to_string(), r.clone())];
        let parsed = scores_from_csv(&scores_to_csv(&rows)).unwrap();
        assert_eq!(parsed[1], ("w/o M-LoRA".to_string(), r.appearance, r.motion, r.temporal));
        assert_eq!(tracks_from_csv(&tracks_to_csv(&r)).unwrap(), (r.track.clone(), r.reference.clone()));
        assert_eq!(reference_from_csv(&reference_to_csv(&r.track)).unwrap(), r.track);
        assert!(scores_to_text(&rows).contains("appearance"));
    }

    #[test]
    fn track_variance_of_line() {
        let t = vec![(0.0, 0.0), (1.0, 0.0)];
        assert!((track_variance(&t) - 0.25).abs() < 1e-15);
    }
}
