//! Closed-circuit track geometry.
//!
//! A [`TrackModel`] is built from a closed loop of centerline [`Waypoint`]s, each
//! carrying the free lateral space to the right and left boundaries. Boundaries are
//! obtained by offsetting the centerline along the local normal, and the model keeps
//! a cumulative arc-length table for progress bookkeeping.
//!
//! Tracks are read from CSV with the columns `x_m, y_m, w_tr_right_m, w_tr_left_m`.
//! Lines starting with `#` are comments; a commented header line (`# x_m,y_m,...`)
//! is accepted as the header.

mod raceline;
pub mod shapes;

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{is_simple_polygon, signed_area2, Segment, Vec2};

pub use raceline::{
    Raceline, RacelineConfig, RacelineError, RacelineFrame, RacelineId, RacelinePoint,
};

const COLUMNS: [&str; 4] = ["x_m", "y_m", "w_tr_right_m", "w_tr_left_m"];

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("missing header row naming x_m, y_m, w_tr_right_m, w_tr_left_m")]
    MissingHeader,
    #[error("line {line}: widths must be positive")]
    NonPositiveWidth { line: usize },
    #[error("track needs at least 3 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoints {index} and {next} coincide")]
    DuplicateWaypoint { index: usize, next: usize },
    #[error("track is not closed: endpoint gap {gap:.3} m exceeds twice the mean spacing {mean_spacing:.3} m")]
    OpenLoop { gap: f64, mean_spacing: f64 },
    #[error("{side} boundary intersects itself")]
    SelfIntersectingBoundary { side: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub w_right: f64,
    pub w_left: f64,
}

impl Waypoint {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParseOptions {
    /// Endpoint gap allowed, as a multiple of the mean waypoint spacing.
    pub closure_factor: f64,
    pub min_spacing: f64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { closure_factor: 2.0, min_spacing: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct TrackModel {
    waypoints: Vec<Waypoint>,
    /// Unit left normal of the centerline at each waypoint.
    normals: Vec<Vec2>,
    left_boundary: Vec<Vec2>,
    right_boundary: Vec<Vec2>,
    /// `arc_table[i]` is the arc length at waypoint `i`; the extra last entry closes the loop.
    arc_table: Vec<f64>,
    total_length: f64,
    boundary_segments: Vec<Segment>,
}

/// Reads and validates a track CSV.
pub fn load_track<R: Read>(source: R, opts: &ParseOptions) -> Result<TrackModel, TrackError> {
    let reader = BufReader::new(source);
    let mut columns: Option<[usize; 4]> = None;
    let mut waypoints = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if columns.is_none() {
                columns = header_indices(comment);
            }
            continue;
        }
        let Some(cols) = columns else {
            match header_indices(trimmed) {
                Some(c) => {
                    columns = Some(c);
                    continue;
                }
                None => return Err(TrackError::MissingHeader),
            }
        };
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let get = |k: usize| -> Result<f64, TrackError> {
            let raw = fields.get(cols[k]).ok_or_else(|| TrackError::MalformedRow {
                line: line_no,
                reason: format!("expected {} fields, found {}", cols.iter().max().unwrap() + 1, fields.len()),
            })?;
            let v: f64 = raw.parse().map_err(|_| TrackError::MalformedRow {
                line: line_no,
                reason: format!("column {} is not a number: {raw:?}", COLUMNS[k]),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(TrackError::MalformedRow { line: line_no, reason: format!("column {} is not finite", COLUMNS[k]) })
            }
        };
        let wp = Waypoint { x: get(0)?, y: get(1)?, w_right: get(2)?, w_left: get(3)? };
        if wp.w_right <= 0.0 || wp.w_left <= 0.0 {
            return Err(TrackError::NonPositiveWidth { line: line_no });
        }
        waypoints.push(wp);
    }
    if columns.is_none() {
        return Err(TrackError::MissingHeader);
    }
    TrackModel::from_waypoints(waypoints, opts)
}

fn header_indices(line: &str) -> Option<[usize; 4]> {
    let names: Vec<&str> = line.split(',').map(str::trim).collect();
    let mut out = [0usize; 4];
    for (k, col) in COLUMNS.iter().enumerate() {
        out[k] = names.iter().position(|n| n == col)?;
    }
    Some(out)
}

impl TrackModel {
    pub fn from_waypoints(mut waypoints: Vec<Waypoint>, opts: &ParseOptions) -> Result<Self, TrackError> {
        if waypoints.len() < 3 {
            return Err(TrackError::TooFewWaypoints(waypoints.len()));
        }
        // A repeated first point at the end is an explicit closure, not a waypoint.
        let n = waypoints.len();
        if waypoints[0].pos().dist(waypoints[n - 1].pos()) <= opts.min_spacing {
            waypoints.pop();
        }
        let n = waypoints.len();
        if n < 3 {
            return Err(TrackError::TooFewWaypoints(n));
        }
        for i in 0..n - 1 {
            if waypoints[i].pos().dist(waypoints[i + 1].pos()) <= opts.min_spacing {
                return Err(TrackError::DuplicateWaypoint { index: i, next: i + 1 });
            }
        }
        let open_spacing: f64 = (0..n - 1)
            .map(|i| waypoints[i].pos().dist(waypoints[i + 1].pos()))
            .sum::<f64>()
            / (n - 1) as f64;
        let gap = waypoints[n - 1].pos().dist(waypoints[0].pos());
        if gap > opts.closure_factor * open_spacing {
            return Err(TrackError::OpenLoop { gap, mean_spacing: open_spacing });
        }

        let mut arc_table = Vec::with_capacity(n + 1);
        let mut s = 0.0;
        arc_table.push(0.0);
        for i in 0..n {
            s += waypoints[i].pos().dist(waypoints[(i + 1) % n].pos());
            arc_table.push(s);
        }

        let normals: Vec<Vec2> = (0..n)
            .map(|i| {
                let prev = waypoints[(i + n - 1) % n].pos();
                let next = waypoints[(i + 1) % n].pos();
                (next - prev).normalized().perp()
            })
            .collect();
        let left_boundary: Vec<Vec2> =
            (0..n).map(|i| waypoints[i].pos() + normals[i] * waypoints[i].w_left).collect();
        let right_boundary: Vec<Vec2> =
            (0..n).map(|i| waypoints[i].pos() - normals[i] * waypoints[i].w_right).collect();
        if !is_simple_polygon(&left_boundary) {
            return Err(TrackError::SelfIntersectingBoundary { side: "left" });
        }
        if !is_simple_polygon(&right_boundary) {
            return Err(TrackError::SelfIntersectingBoundary { side: "right" });
        }
        let boundary_segments = [&left_boundary, &right_boundary]
            .iter()
            .flat_map(|b| (0..n).map(move |i| Segment::new(b[i], b[(i + 1) % n])))
            .collect();

        Ok(Self {
            waypoints,
            normals,
            left_boundary,
            right_boundary,
            total_length: s,
            arc_table,
            boundary_segments,
        })
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn normals(&self) -> &[Vec2] {
        &self.normals
    }

    pub fn arc_table(&self) -> &[f64] {
        &self.arc_table
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn mean_spacing(&self) -> f64 {
        self.total_length / self.waypoints.len() as f64
    }

    pub fn left_boundary(&self) -> &[Vec2] {
        &self.left_boundary
    }

    pub fn right_boundary(&self) -> &[Vec2] {
        &self.right_boundary
    }

    /// The boundary enclosing less area.
    pub fn inner_boundary(&self) -> &[Vec2] {
        if signed_area2(&self.left_boundary).abs() < signed_area2(&self.right_boundary).abs() {
            &self.left_boundary
        } else {
            &self.right_boundary
        }
    }

    pub fn outer_boundary(&self) -> &[Vec2] {
        if signed_area2(&self.left_boundary).abs() < signed_area2(&self.right_boundary).abs() {
            &self.right_boundary
        } else {
            &self.left_boundary
        }
    }

    /// Both boundary polylines as closed segment lists (left first).
    pub fn boundary_segments(&self) -> &[Segment] {
        &self.boundary_segments
    }

    /// Wraps an arc length into `[0, total_length)`.
    pub fn wrap_s(&self, s: f64) -> f64 {
        s.rem_euclid(self.total_length)
    }

    /// Signed shortest arc difference `b - a` on the loop.
    pub fn arc_delta(&self, a: f64, b: f64) -> f64 {
        let l = self.total_length;
        let mut d = (b - a).rem_euclid(l);
        if d > l / 2.0 {
            d -= l;
        }
        d
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = self.wrap_s(s);
        let i = self.arc_table.partition_point(|&a| a <= s).saturating_sub(1).min(self.len() - 1);
        let seg_len = self.arc_table[i + 1] - self.arc_table[i];
        (i, (s - self.arc_table[i]) / seg_len)
    }

    /// Centerline point and unit tangent at arc length `s`.
    pub fn position_at(&self, s: f64) -> (Vec2, Vec2) {
        let (i, t) = self.segment_at(s);
        let a = self.waypoints[i].pos();
        let b = self.waypoints[(i + 1) % self.len()].pos();
        (a.lerp(b, t), (b - a).normalized())
    }

    /// Interpolated (left, right) free widths at `s`.
    pub fn widths_at(&self, s: f64) -> (f64, f64) {
        let (i, t) = self.segment_at(s);
        let a = &self.waypoints[i];
        let b = &self.waypoints[(i + 1) % self.len()];
        (a.w_left + (b.w_left - a.w_left) * t, a.w_right + (b.w_right - a.w_right) * t)
    }

    /// Projects onto the centerline: arc length and signed lateral offset (positive left).
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let n = self.len();
        let mut best = (f64::INFINITY, 0usize, 0.0);
        for i in 0..n {
            let seg = Segment::new(self.waypoints[i].pos(), self.waypoints[(i + 1) % n].pos());
            let (t, d) = seg.closest(p);
            if d < best.0 {
                best = (d, i, t);
            }
        }
        let (d, i, t) = best;
        let a = self.waypoints[i].pos();
        let b = self.waypoints[(i + 1) % n].pos();
        let side = (b - a).cross(p - a);
        let s = self.arc_table[i] + t * (self.arc_table[i + 1] - self.arc_table[i]);
        (self.wrap_s(s), if side < 0.0 { -d } else { d })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# x_m,y_m,w_tr_right_m,w_tr_left_m")?;
        for w in &self.waypoints {
            writeln!(out, "{},{},{},{}", w.x, w.y, w.w_right, w.w_left)?;
        }
        Ok(())
    }

    /// Boundaries as CSV rows `side,x_m,y_m`.
    pub fn write_boundaries_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "side,x_m,y_m")?;
        for (side, pts) in [("left", &self.left_boundary), ("right", &self.right_boundary)] {
            for p in pts.iter() {
                writeln!(out, "{side},{},{}", p.x, p.y)?;
            }
        }
        Ok(())
    }
}
