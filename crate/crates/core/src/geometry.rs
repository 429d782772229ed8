//! Shared geometric and annotation domain types.
//!
//! Coordinates are continuous reals in grid units even though scenes are
//! discrete grids: regression offsets are sub-grid. `x` is the column
//! coordinate and `y` the row coordinate, so `intensity` is indexed
//! `[y][x]`. All types here are immutable after construction and safe to
//! share across threads.
//!
//! Scenes and annotation sets serialize to a plain-text format with a fixed
//! field order so fixtures are diffable; floats are written with Rust's
//! shortest round-trip representation and read back bit-identically.

use std::io::{BufRead, Write};

use crate::{Error, Result};

/// A head point (or predicted point) in grid units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite());
        Point { x, y }
    }
}

/// Euclidean distance between two points.
pub fn euclidean_distance(a: Point, b: Point) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    (dx * dx + dy * dy).sqrt()
}

/// A synthetic crowd instance: an intensity grid plus the ground-truth head
/// points that generated it.
#[derive(Debug, Clone)]
pub struct Scene {
    height: usize,
    width: usize,
    intensity: Vec<f64>, // row-major, height * width
    ground_truth: Vec<Point>,
    seed: u64,
}

impl Scene {
    /// Validates invariants: grid dimensions match, intensities are
    /// non-negative finite, every ground-truth point lies inside
    /// `[0,width) x [0,height)`.
    pub fn new(
        height: usize,
        width: usize,
        intensity: Vec<f64>,
        ground_truth: Vec<Point>,
        seed: u64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config("scene dimensions must be positive"));
        }
        if intensity.len() != height * width {
            return Err(Error::dimension(format!(
                "intensity grid has {} cells, expected {}",
                intensity.len(),
                height * width
            )));
        }
        if let Some(v) = intensity.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::config(format!("intensity value {v} is invalid")));
        }
        for (i, p) in ground_truth.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::config(format!("ground-truth point {i} is not finite")));
            }
            if p.x < 0.0 || p.x >= width as f64 || p.y < 0.0 || p.y >= height as f64 {
                return Err(Error::config(format!(
                    "ground-truth point {i} ({}, {}) lies outside the {width}x{height} grid",
                    p.x, p.y
                )));
            }
        }
        Ok(Scene {
            height,
            width,
            intensity,
            ground_truth,
            seed,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major intensity grid, `height * width` cells.
    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn intensity_at(&self, y: usize, x: usize) -> f64 {
        self.intensity[y * self.width + x]
    }

    /// Ground-truth head points in stable insertion order.
    pub fn ground_truth(&self) -> &[Point] {
        &self.ground_truth
    }

    /// Number of people in the scene.
    pub fn count(&self) -> usize {
        self.ground_truth.len()
    }

    /// Writes the fixed-order text form: header, one point per line as
    /// `x y`, then the intensity grid one row per line.
    pub fn write_text(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "scene v1")?;
        writeln!(w, "height {}", self.height)?;
        writeln!(w, "width {}", self.width)?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "points {}", self.ground_truth.len())?;
        for p in &self.ground_truth {
            writeln!(w, "{} {}", p.x, p.y)?;
        }
        writeln!(w, "intensity")?;
        for row in self.intensity.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text(r: &mut impl BufRead) -> Result<Self> {
        let mut lines = LineReader::new(r);
        lines.expect_tag("scene v1")?;
        let height: usize = lines.field("height")?;
        let width: usize = lines.field("width")?;
        let seed: u64 = lines.field("seed")?;
        let npoints: usize = lines.field("points")?;
        let mut ground_truth = Vec::with_capacity(npoints);
        for _ in 0..npoints {
            ground_truth.push(lines.point()?);
        }
        lines.expect_tag("intensity")?;
        let mut intensity = Vec::with_capacity(height * width);
        for _ in 0..height {
            lines.floats_into(width, &mut intensity)?;
        }
        Scene::new(height, width, intensity, ground_truth, seed)
    }
}

/// How an annotation subset was drawn from a scene's ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Random fraction of head points across the whole scene.
    Sparse,
    /// All head points inside one rectangular patch.
    Partial,
    /// At most K head points, uniformly sampled.
    KCap,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Sparse => "sparse",
            Protocol::Partial => "partial",
            Protocol::KCap => "kcap",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sparse" => Some(Protocol::Sparse),
            "partial" => Some(Protocol::Partial),
            "kcap" => Some(Protocol::KCap),
            _ => None,
        }
    }
}

/// The labeled subset of a scene's ground truth, with provenance.
#[derive(Debug, Clone)]
pub struct AnnotationSet {
    points: Vec<Point>,
    target_ratio: f64,
    realized_ratio: f64,
    protocol: Protocol,
}

impl AnnotationSet {
    /// Validates that `points` is a non-empty sub-multiset of the scene's
    /// ground truth: each coordinate may appear at most as often as it does
    /// among the ground-truth points, so coincident heads count separately
    /// but no head is annotated twice.
    pub fn new(
        scene: &Scene,
        points: Vec<Point>,
        target_ratio: f64,
        protocol: Protocol,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::config("annotation set must contain at least one point"));
        }
        if !(target_ratio > 0.0 && target_ratio <= 1.0) {
            return Err(Error::config(format!(
                "target ratio {target_ratio} outside (0, 1]"
            )));
        }
        let gt = scene.ground_truth();
        let mut gt_used = vec![false; gt.len()];
        for (i, p) in points.iter().enumerate() {
            let slot = gt
                .iter()
                .enumerate()
                .position(|(gi, g)| !gt_used[gi] && g.x == p.x && g.y == p.y);
            match slot {
                Some(gi) => gt_used[gi] = true,
                None => {
                    return Err(Error::config(format!(
                        "annotated point {i} ({}, {}) is not an unused ground-truth point",
                        p.x, p.y
                    )))
                }
            }
        }
        let realized_ratio = points.len() as f64 / scene.count() as f64;
        Ok(AnnotationSet {
            points,
            target_ratio,
            realized_ratio,
            protocol,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Realized annotation count.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn target_ratio(&self) -> f64 {
        self.target_ratio
    }

    pub fn realized_ratio(&self) -> f64 {
        self.realized_ratio
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    /// Header records protocol and realized ratio for experiment provenance.
    pub fn write_text(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "annotation v1")?;
        writeln!(w, "protocol {}", self.protocol.name())?;
        writeln!(w, "target_ratio {}", self.target_ratio)?;
        writeln!(w, "realized_ratio {}", self.realized_ratio)?;
        writeln!(w, "points {}", self.points.len())?;
        for p in &self.points {
            writeln!(w, "{} {}", p.x, p.y)?;
        }
        Ok(())
    }

    /// Reads a previously written annotation file. Membership in the source
    /// scene was checked when the set was built; the file is trusted.
    pub fn read_text(r: &mut impl BufRead) -> Result<Self> {
        let mut lines = LineReader::new(r);
        lines.expect_tag("annotation v1")?;
        let proto_str: String = lines.field("protocol")?;
        let protocol = Protocol::from_name(&proto_str)
            .ok_or_else(|| Error::parse(lines.line, format!("unknown protocol {proto_str:?}")))?;
        let target_ratio: f64 = lines.field("target_ratio")?;
        let realized_ratio: f64 = lines.field("realized_ratio")?;
        let npoints: usize = lines.field("points")?;
        if npoints == 0 {
            return Err(Error::parse(lines.line, "annotation set has zero points"));
        }
        let mut points = Vec::with_capacity(npoints);
        for _ in 0..npoints {
            points.push(lines.point()?);
        }
        Ok(AnnotationSet {
            points,
            target_ratio,
            realized_ratio,
            protocol,
        })
    }
}

/// Line-oriented reader with positional error reporting for the text formats.
struct LineReader<'a, R: BufRead> {
    inner: &'a mut R,
    line: usize,
}

impl<'a, R: BufRead> LineReader<'a, R> {
    fn new(inner: &'a mut R) -> Self {
        LineReader { inner, line: 0 }
    }

    fn next_line(&mut self) -> Result<String> {
        let mut buf = String::new();
        let n = self.inner.read_line(&mut buf)?;
        self.line += 1;
        if n == 0 {
            return Err(Error::parse(self.line, "unexpected end of file"));
        }
        Ok(buf.trim_end_matches(['\n', '\r']).to_string())
    }

    fn expect_tag(&mut self, tag: &str) -> Result<()> {
        let line = self.next_line()?;
        if line != tag {
            return Err(Error::parse(
                self.line,
                format!("expected {tag:?}, found {line:?}"),
            ));
        }
        Ok(())
    }

    fn field<T: std::str::FromStr>(&mut self, name: &str) -> Result<T> {
        let line = self.next_line()?;
        let value = line
            .strip_prefix(name)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| Error::parse(self.line, format!("expected field {name:?}")))?;
        value
            .parse()
            .map_err(|_| Error::parse(self.line, format!("invalid value for {name:?}: {value:?}")))
    }

    fn point(&mut self) -> Result<Point> {
        let line = self.next_line()?;
        let mut it = line.split(' ');
        let x = self.parse_float(it.next())?;
        let y = self.parse_float(it.next())?;
        if it.next().is_some() {
            return Err(Error::parse(self.line, "trailing data on point line"));
        }
        Ok(Point::new(x, y))
    }

    fn floats_into(&mut self, count: usize, out: &mut Vec<f64>) -> Result<()> {
        let line = self.next_line()?;
        let mut seen = 0;
        for tok in line.split(' ') {
            out.push(
                tok.parse()
                    .map_err(|_| Error::parse(self.line, format!("invalid float {tok:?}")))?,
            );
            seen += 1;
        }
        if seen != count {
            return Err(Error::parse(
                self.line,
                format!("expected {count} values, found {seen}"),
            ));
        }
        Ok(())
    }

    fn parse_float(&self, tok: Option<&str>) -> Result<f64> {
        let tok = tok.ok_or_else(|| Error::parse(self.line, "missing coordinate"))?;
        tok.parse()
            .map_err(|_| Error::parse(self.line, format!("invalid float {tok:?}")))
    }
}
