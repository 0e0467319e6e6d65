//! Binary PGM (P5) export and import of raster frames.
//!
//! Ink is stored dark on white: byte = round(255 · (1 − intensity)).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::{RasterFrame, RasterVideo};

pub fn encode_pgm(frame: &RasterFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(
        frame
            .data
            .iter()
            .map(|&v| (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8),
    );
    out
}

/// Decode P5 (8-bit) or P2 data into ink intensities.
pub fn decode_pgm(bytes: &[u8]) -> Result<RasterFrame> {
    let mut pos = 0;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token(bytes)?;
    let num = |s: String| -> Result<usize> { s.parse().map_err(|_| Error::Format(format!("bad PGM header field `{s}`"))) };
    let width = num(next_token(bytes)?)?;
    let height = num(next_token(bytes)?)?;
    let maxval = num(next_token(bytes)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let scale = maxval as f64;
    let data: Vec<f64> = match magic.as_str() {
        "P5" => {
            // Exactly one whitespace byte separates the header from the raster.
            let body = bytes
                .get(pos + 1..pos + 1 + width * height)
                .ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
            body.iter().map(|&b| 1.0 - b as f64 / scale).collect()
        }
        "P2" => (0..width * height)
            .map(|_| next_token(bytes).and_then(num).map(|v| 1.0 - v as f64 / scale))
            .collect::<Result<_>>()?,
        other => return Err(Error::Format(format!("unsupported PGM magic `{other}`"))),
    };
    RasterFrame::from_data(height, width, data)
}

pub fn frame_file_name(prefix: &str, index: usize, total: usize) -> String {
    let digits = total.max(1).saturating_sub(1).to_string().len().max(3);
    format!("{prefix}{index:0digits$}.pgm")
}

/// Write every frame as `<prefix><zero-padded index>.pgm` and return the paths.
pub fn write_video(dir: &Path, prefix: &str, video: &RasterVideo) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let n = video.num_frames();
    video
        .frames()
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let path = dir.join(frame_file_name(prefix, k, n));
            fs::write(&path, encode_pgm(f))?;
            Ok(path)
        })
        .collect()
}

/// Read every `.pgm` in `dir`, sorted lexicographically by file name.
pub fn read_video_dir(dir: &Path) -> Result<RasterVideo> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("no .pgm frames in {}", dir.display())));
    }
    let frames = paths
        .iter()
        .map(|p| decode_pgm(&fs::read(p)?))
        .collect::<Result<Vec<_>>>()?;
    RasterVideo::new(frames)
}
