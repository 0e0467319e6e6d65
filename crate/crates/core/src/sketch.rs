//! Cubic Bézier stroke sketches: data model, SVG subset parsing and writing.
//!
//! All geometry lives on the unit square. Parsing normalizes by the document
//! `viewBox`; writing always emits `viewBox="0 0 1 1"` with coordinates
//! rounded to six decimal places.
//!
//! The accepted SVG subset is deliberately small: `path` elements inside
//! `svg`/`g` containers, path commands `M m C c L l`, and the presentation
//! attributes `stroke`, `stroke-width` and `fill="none"`. Lines are promoted
//! to cubics with interior control points at 1/3 and 2/3.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Stroke width used when a path carries no `stroke-width`.
pub const DEFAULT_STROKE_WIDTH: f64 = 0.012;

/// Serialized coordinates are clamped to this range.
pub const SERIALIZE_RANGE: (f64, f64) = (-0.5, 1.5);

/// Nominal pixel size written into the `width`/`height` attributes.
const SVG_DISPLAY_SIZE: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlPoint {
    pub x: f64,
    pub y: f64,
}

impl ControlPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn lerp(self, other: Self, t: f64) -> Self {
        Self::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }
}

/// A single cubic Bézier stroke. Opacity is always 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicStroke {
    pub points: [ControlPoint; 4],
    pub width: f64,
}

impl CubicStroke {
    pub fn new(points: [ControlPoint; 4], width: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::Argument(format!("stroke width must be > 0, got {width}")));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::NonFinite("stroke control point".into()));
        }
        Ok(Self { points, width })
    }

    /// Straight segment promoted to a cubic with interior points at 1/3 and 2/3.
    pub fn line(from: ControlPoint, to: ControlPoint, width: f64) -> Result<Self> {
        Self::new(
            [from, from.lerp(to, 1.0 / 3.0), from.lerp(to, 2.0 / 3.0), to],
            width,
        )
    }

    /// Point on the curve at parameter `u` in [0, 1].
    pub fn eval(&self, u: f64) -> ControlPoint {
        let b = bernstein(u);
        let mut out = ControlPoint::default();
        for (w, p) in b.iter().zip(&self.points) {
            out.x += w * p.x;
            out.y += w * p.y;
        }
        out
    }
}

/// Cubic Bernstein basis at `u`.
pub fn bernstein(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [v * v * v, 3.0 * u * v * v, 3.0 * u * u * v, u * u * u]
}

/// One frame of a sketch: an ordered, non-empty list of strokes.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchFrame {
    strokes: Vec<CubicStroke>,
}

/// Number of scalar parameters per stroke (4 points × 2 coordinates).
pub const PARAMS_PER_STROKE: usize = 8;

impl SketchFrame {
    pub fn new(strokes: Vec<CubicStroke>) -> Result<Self> {
        if strokes.is_empty() {
            return Err(Error::Argument("a sketch frame needs at least one stroke".into()));
        }
        Ok(Self { strokes })
    }

    pub fn strokes(&self) -> &[CubicStroke] {
        &self.strokes
    }

    pub fn strokes_mut(&mut self) -> &mut [CubicStroke] {
        &mut self.strokes
    }

    pub fn len(&self) -> usize {
        self.strokes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    /// Flattened control points, stroke-major: `[x0, y0, x1, y1, x2, y2, x3, y3, ...]`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.strokes.len() * PARAMS_PER_STROKE);
        for s in &self.strokes {
            for p in &s.points {
                out.push(p.x);
                out.push(p.y);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.strokes.len() * PARAMS_PER_STROKE {
            return Err(Error::Shape(format!(
                "expected {} control-point values, got {}",
                self.strokes.len() * PARAMS_PER_STROKE,
                params.len()
            )));
        }
        for (s, chunk) in self.strokes.iter_mut().zip(params.chunks_exact(PARAMS_PER_STROKE)) {
            for (p, xy) in s.points.iter_mut().zip(chunk.chunks_exact(2)) {
                p.x = xy[0];
                p.y = xy[1];
            }
        }
        Ok(())
    }

    /// Mean of all control points.
    pub fn control_centroid(&self) -> ControlPoint {
        let n = (self.strokes.len() * 4) as f64;
        let mut c = ControlPoint::default();
        for p in self.strokes.iter().flat_map(|s| s.points.iter()) {
            c.x += p.x / n;
            c.y += p.y / n;
        }
        c
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut out = self.clone();
        for p in out.strokes.iter_mut().flat_map(|s| s.points.iter_mut()) {
            p.x += dx;
            p.y += dy;
        }
        out
    }
}

/// F frames of identical stroke structure.
#[derive(Debug, Clone, PartialEq)]
pub struct AnimatedSketch {
    frames: Vec<SketchFrame>,
}

impl AnimatedSketch {
    pub fn new(frames: Vec<SketchFrame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Argument("an animation needs at least one frame".into()))?;
        for (k, f) in frames.iter().enumerate() {
            if f.len() != first.len() {
                return Err(Error::Shape(format!(
                    "frame {k} has {} strokes, frame 0 has {}",
                    f.len(),
                    first.len()
                )));
            }
            for (a, b) in f.strokes.iter().zip(&first.strokes) {
                if a.width != b.width {
                    return Err(Error::Shape(format!("frame {k} changes a stroke width")));
                }
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[SketchFrame] {
        &self.frames
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut SketchFrame {
        &mut self.frames[k]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn strokes_per_frame(&self) -> usize {
        self.frames[0].len()
    }

    pub fn params(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.params()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let per = self.strokes_per_frame() * PARAMS_PER_STROKE;
        if params.len() != per * self.frames.len() {
            return Err(Error::Shape(format!(
                "expected {} animation parameters, got {}",
                per * self.frames.len(),
                params.len()
            )));
        }
        for (f, chunk) in self.frames.iter_mut().zip(params.chunks_exact(per)) {
            f.set_params(chunk)?;
        }
        Ok(())
    }
}

/// `F` independent copies of `frame`.
pub fn replicate_frames(frame: &SketchFrame, frames: usize) -> Result<AnimatedSketch> {
    if frames == 0 {
        return Err(Error::Argument("frame count must be at least 1".into()));
    }
    AnimatedSketch::new(vec![frame.clone(); frames])
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Affine map from document units to the unit canvas.
#[derive(Debug, Clone, Copy)]
struct ViewBox {
    min_x: f64,
    min_y: f64,
    width: f64,
    height: f64,
}

impl ViewBox {
    fn map(&self, x: f64, y: f64) -> ControlPoint {
        ControlPoint::new((x - self.min_x) / self.width, (y - self.min_y) / self.height)
    }

    fn map_width(&self, w: f64) -> f64 {
        w / (self.width * self.height).sqrt()
    }
}

fn line_of(doc: &roxmltree::Document, node: roxmltree::Node) -> usize {
    doc.text_pos_at(node.range().start).row as usize
}

fn parse_view_box(doc: &roxmltree::Document, root: roxmltree::Node) -> Result<ViewBox> {
    let line = line_of(doc, root);
    let raw = root
        .attribute("viewBox")
        .ok_or_else(|| Error::svg(line, "missing viewBox"))?;
    let nums: Vec<f64> = raw
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::svg(line, format!("malformed viewBox `{raw}`")))?;
    if nums.len() != 4 || !(nums[2] > 0.0) || !(nums[3] > 0.0) {
        return Err(Error::svg(line, format!("malformed viewBox `{raw}`")));
    }
    Ok(ViewBox {
        min_x: nums[0],
        min_y: nums[1],
        width: nums[2],
        height: nums[3],
    })
}

fn parse_document(text: &str) -> Result<roxmltree::Document<'_>> {
    roxmltree::Document::parse(text).map_err(|e| Error::svg(e.pos().row as usize, e.to_string()))
}

/// Elements that may appear without contributing geometry.
const PASSIVE_ELEMENTS: &[&str] = &["title", "desc", "metadata", "animate", "set"];

/// Parse an SVG document into a single frame. Strokes come out in document order.
pub fn parse_svg(text: &str) -> Result<SketchFrame> {
    let doc = parse_document(text)?;
    let root = doc.root_element();
    if root.tag_name().name() != "svg" {
        return Err(Error::svg(line_of(&doc, root), "root element is not <svg>"));
    }
    let vb = parse_view_box(&doc, root)?;
    let mut strokes = Vec::new();
    collect_strokes(&doc, root, &vb, &mut strokes)?;
    if strokes.is_empty() {
        return Err(Error::svg(line_of(&doc, root), "document contains no strokes"));
    }
    SketchFrame::new(strokes)
}

fn collect_strokes(
    doc: &roxmltree::Document,
    node: roxmltree::Node,
    vb: &ViewBox,
    out: &mut Vec<CubicStroke>,
) -> Result<()> {
    for child in node.children().filter(|n| n.is_element()) {
        let line = line_of(doc, child);
        if child.attribute("transform").is_some() {
            return Err(Error::svg(line, "unsupported attribute transform"));
        }
        match child.tag_name().name() {
            "g" => collect_strokes(doc, child, vb, out)?,
            "path" => parse_path_element(child, line, vb, out)?,
            name if PASSIVE_ELEMENTS.contains(&name) => {}
            name => return Err(Error::svg(line, format!("unsupported element <{name}>"))),
        }
    }
    Ok(())
}

fn parse_path_element(
    node: roxmltree::Node,
    line: usize,
    vb: &ViewBox,
    out: &mut Vec<CubicStroke>,
) -> Result<()> {
    if let Some(fill) = node.attribute("fill") {
        if fill != "none" {
            return Err(Error::svg(line, format!("unsupported fill `{fill}`")));
        }
    }
    let width = match node.attribute("stroke-width") {
        Some(w) => {
            let w: f64 = w
                .trim()
                .trim_end_matches("px")
                .parse()
                .map_err(|_| Error::svg(line, format!("malformed stroke-width `{w}`")))?;
            if !(w > 0.0) {
                return Err(Error::svg(line, "stroke-width must be positive"));
            }
            vb.map_width(w)
        }
        None => DEFAULT_STROKE_WIDTH,
    };
    let d = node
        .attribute("d")
        .ok_or_else(|| Error::svg(line, "path without d attribute"))?;
    for seg in parse_path_data(d).map_err(|m| Error::svg(line, m))? {
        let pts = seg.map(|(x, y)| vb.map(x, y));
        out.push(CubicStroke::new(pts, width).map_err(|e| Error::svg(line, e.to_string()))?);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Token {
    Command(char),
    Number(f64),
}

fn tokenize_path(d: &str) -> std::result::Result<Vec<Token>, String> {
    let bytes = d.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() || c == ',' {
            i += 1;
        } else if c.is_ascii_alphabetic() && c != 'e' && c != 'E' {
            out.push(Token::Command(c));
            i += 1;
        } else if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' {
            let start = i;
            i += 1;
            let mut seen_dot = c == '.';
            let mut seen_exp = false;
            while i < bytes.len() {
                let ch = bytes[i] as char;
                if ch.is_ascii_digit() {
                    i += 1;
                } else if ch == '.' && !seen_dot && !seen_exp {
                    seen_dot = true;
                    i += 1;
                } else if (ch == 'e' || ch == 'E') && !seen_exp {
                    seen_exp = true;
                    i += 1;
                    if i < bytes.len() && (bytes[i] == b'-' || bytes[i] == b'+') {
                        i += 1;
                    }
                } else {
                    break;
                }
            }
            let s = &d[start..i];
            let v: f64 = s.parse().map_err(|_| format!("malformed number `{s}`"))?;
            out.push(Token::Number(v));
        } else {
            return Err(format!("unexpected character `{c}` in path data"));
        }
    }
    Ok(out)
}

/// Parse path data into cubic segments in document coordinates.
fn parse_path_data(d: &str) -> std::result::Result<Vec<[(f64, f64); 4]>, String> {
    let tokens = tokenize_path(d)?;
    let mut segs = Vec::new();
    let mut pos = 0;
    let mut cur = (0.0, 0.0);
    let mut cmd: Option<char> = None;
    let mut started = false;

    let take = |pos: &mut usize, n: usize, cmd: char| -> std::result::Result<Vec<f64>, String> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            match tokens.get(*pos) {
                Some(Token::Number(x)) => {
                    v.push(*x);
                    *pos += 1;
                }
                _ => return Err(format!("command {cmd} expects {n} numbers")),
            }
        }
        Ok(v)
    };

    while pos < tokens.len() {
        let c = match tokens[pos] {
            Token::Command(c) => {
                pos += 1;
                c
            }
            Token::Number(_) => match cmd {
                // Implicit repetition; after a moveto the repeats are linetos.
                Some('M') => 'L',
                Some('m') => 'l',
                Some(c) => c,
                None => return Err("path data must start with a command".into()),
            },
        };
        if !matches!(c, 'M' | 'm' | 'C' | 'c' | 'L' | 'l') {
            return Err(format!("unsupported command {c}"));
        }
        if !started && !matches!(c, 'M' | 'm') {
            return Err(format!("path must start with M, found {c}"));
        }
        let rel = c.is_ascii_lowercase();
        let off = |p: (f64, f64), cur: (f64, f64)| if rel { (p.0 + cur.0, p.1 + cur.1) } else { p };
        match c.to_ascii_uppercase() {
            'M' => {
                let v = take(&mut pos, 2, c)?;
                cur = off((v[0], v[1]), cur);
                started = true;
            }
            'L' => {
                let v = take(&mut pos, 2, c)?;
                let to = off((v[0], v[1]), cur);
                let a = (cur.0 + (to.0 - cur.0) / 3.0, cur.1 + (to.1 - cur.1) / 3.0);
                let b = (cur.0 + 2.0 * (to.0 - cur.0) / 3.0, cur.1 + 2.0 * (to.1 - cur.1) / 3.0);
                segs.push([cur, a, b, to]);
                cur = to;
            }
            'C' => {
                let v = take(&mut pos, 6, c)?;
                let p1 = off((v[0], v[1]), cur);
                let p2 = off((v[2], v[3]), cur);
                let p3 = off((v[4], v[5]), cur);
                segs.push([cur, p1, p2, p3]);
                cur = p3;
            }
            _ => unreachable!(),
        }
        cmd = Some(c);
    }
    Ok(segs)
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

/// Six-decimal fixed formatting with clamping and no negative zero.
fn fmt_coord(v: f64) -> String {
    let v = v.clamp(SERIALIZE_RANGE.0, SERIALIZE_RANGE.1);
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

fn svg_open(out: &mut String) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\" width=\"{SVG_DISPLAY_SIZE}\" height=\"{SVG_DISPLAY_SIZE}\">"
    );
}

fn write_path(out: &mut String, indent: &str, s: &CubicStroke) {
    let [p0, p1, p2, p3] = s.points;
    let _ = writeln!(
        out,
        "{indent}<path d=\"M {} {} C {} {}, {} {}, {} {}\" stroke=\"black\" stroke-width=\"{:.6}\" fill=\"none\"/>",
        fmt_coord(p0.x),
        fmt_coord(p0.y),
        fmt_coord(p1.x),
        fmt_coord(p1.y),
        fmt_coord(p2.x),
        fmt_coord(p2.y),
        fmt_coord(p3.x),
        fmt_coord(p3.y),
        s.width
    );
}

/// Serialize one frame; output bytes depend only on the frame.
pub fn write_svg(frame: &SketchFrame) -> String {
    let mut out = String::new();
    svg_open(&mut out);
    for s in &frame.strokes {
        write_path(&mut out, "  ", s);
    }
    out.push_str("</svg>\n");
    out
}

/// Serialize an animation as one `<g id="frame-k">` per frame with discrete
/// visibility switching; a full cycle lasts `F / fps` seconds.
pub fn write_animated_svg(anim: &AnimatedSketch, fps: u32) -> Result<String> {
    if fps == 0 {
        return Err(Error::Argument("fps must be positive".into()));
    }
    let f = anim.num_frames();
    let dur = f as f64 / fps as f64;
    let mut out = String::new();
    svg_open(&mut out);
    for (k, frame) in anim.frames.iter().enumerate() {
        if f == 1 {
            let _ = writeln!(out, "  <g id=\"frame-{k}\">");
        } else {
            let mut values = Vec::new();
            let mut times = Vec::new();
            if k > 0 {
                values.push("hidden");
                times.push(0.0);
            }
            values.push("visible");
            times.push(k as f64 / f as f64);
            if k + 1 < f {
                values.push("hidden");
                times.push((k + 1) as f64 / f as f64);
            }
            let times: Vec<String> = times.iter().map(|t| format!("{t:.6}")).collect();
            let _ = writeln!(
                out,
                "  <g id=\"frame-{k}\" visibility=\"{}\">",
                if k == 0 { "visible" } else { "hidden" }
            );
            let _ = writeln!(
                out,
                "    <animate attributeName=\"visibility\" values=\"{}\" keyTimes=\"{}\" dur=\"{dur:.6}s\" calcMode=\"discrete\" repeatCount=\"indefinite\"/>",
                values.join(";"),
                times.join(";")
            );
        }
        for s in &frame.strokes {
            write_path(&mut out, "    ", s);
        }
        out.push_str("  </g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Inverse of [`write_animated_svg`]. A document without `frame-<k>` groups
/// parses as a single-frame animation.
pub fn parse_animated_svg(text: &str) -> Result<AnimatedSketch> {
    let doc = parse_document(text)?;
    let root = doc.root_element();
    let vb = parse_view_box(&doc, root)?;
    let mut groups: Vec<(usize, roxmltree::Node)> = root
        .children()
        .filter(|n| n.is_element() && n.tag_name().name() == "g")
        .filter_map(|n| {
            n.attribute("id")
                .and_then(|id| id.strip_prefix("frame-"))
                .and_then(|k| k.parse().ok())
                .map(|k| (k, n))
        })
        .collect();
    if groups.is_empty() {
        return AnimatedSketch::new(vec![parse_svg(text)?]);
    }
    groups.sort_by_key(|(k, _)| *k);
    let mut frames = Vec::with_capacity(groups.len());
    for (i, (k, g)) in groups.into_iter().enumerate() {
        if k != i {
            return Err(Error::svg(line_of(&doc, g), format!("frame index gap at frame-{k}")));
        }
        let mut strokes = Vec::new();
        collect_strokes(&doc, g, &vb, &mut strokes)?;
        frames.push(SketchFrame::new(strokes).map_err(|e| Error::svg(line_of(&doc, g), e.to_string()))?);
    }
    AnimatedSketch::new(frames)
}
