use std::fmt;
use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::TrackModel;
use crate::geom::{three_point_curvature, wrap_angle, Segment, Vec2};

#[derive(Debug, Error, PartialEq)]
pub enum RacelineError {
    #[error("raceline offset {offset} outside ±{max}")]
    OffsetOutOfRange { offset: f64, max: f64 },
    #[error("degenerate raceline geometry at point {index}")]
    DegenerateGeometry { index: usize },
    #[error("raceline point {index} leaves only {margin:.3} m to the boundary (need {required:.3} m)")]
    InsufficientMargin { index: usize, margin: f64, required: f64 },
    #[error("point is {distance:.2} m from the raceline")]
    FarFromRaceline { distance: f64 },
}

/// Lateral placement of a raceline as a signed fraction of the free width on that
/// side: negative toward the left boundary, positive toward the right.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RacelineId(pub f64);

impl RacelineId {
    pub const LEFT: RacelineId = RacelineId(-0.5);
    pub const CENTER: RacelineId = RacelineId(0.0);
    pub const RIGHT: RacelineId = RacelineId(0.5);

    pub fn name(&self) -> Option<&'static str> {
        match self.0 {
            x if x == -0.5 => Some("left"),
            x if x == 0.0 => Some("center"),
            x if x == 0.5 => Some("right"),
            _ => None,
        }
    }
}

impl fmt::Display for RacelineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(f, "{}", self.0),
        }
    }
}

impl std::str::FromStr for RacelineId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" => Ok(Self::LEFT),
            "center" | "centre" => Ok(Self::CENTER),
            "right" => Ok(Self::RIGHT),
            other => other.parse::<f64>().map(RacelineId).map_err(|_| format!("invalid raceline {other:?}")),
        }
    }
}

impl Serialize for RacelineId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.name() {
            Some(n) => s.serialize_str(n),
            None => s.serialize_f64(self.0),
        }
    }
}

impl<'de> Deserialize<'de> for RacelineId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Fraction(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Name(n) => n.parse().map_err(serde::de::Error::custom),
            Raw::Fraction(f) => Ok(RacelineId(f)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RacelineConfig {
    pub v_max: f64,
    pub a_lat_max: f64,
    pub max_offset_fraction: f64,
    /// Minimum free space kept between a raceline point and either boundary.
    pub min_margin: f64,
    pub kappa_eps: f64,
}

impl Default for RacelineConfig {
    fn default() -> Self {
        Self { v_max: 8.0, a_lat_max: 6.0, max_offset_fraction: 0.7, min_margin: 0.155, kappa_eps: 1e-6 }
    }
}

impl RacelineConfig {
    /// Reference speed under the lateral-acceleration cap.
    pub fn speed_for_curvature(&self, kappa: f64) -> f64 {
        self.v_max.min((self.a_lat_max / kappa.abs().max(self.kappa_eps)).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RacelinePoint {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub kappa: f64,
    pub v_ref: f64,
}

impl RacelinePoint {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Interpolated raceline state at some arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RacelineFrame {
    pub s: f64,
    pub pos: Vec2,
    pub heading: f64,
    /// Left normal of the underlying centerline.
    pub normal: Vec2,
    pub kappa: f64,
    pub v_ref: f64,
    /// Offset of this raceline from the centerline, positive left.
    pub lateral: f64,
    pub w_left: f64,
    pub w_right: f64,
}

impl RacelineFrame {
    /// Room for a lateral displacement `d` (positive left) before reaching `margin`
    /// from either boundary.
    pub fn fits(&self, d: f64, margin: f64) -> bool {
        let lat = self.lateral + d;
        lat <= self.w_left - margin && -lat <= self.w_right - margin
    }
}

#[derive(Debug, Clone)]
pub struct Raceline {
    id: RacelineId,
    points: Vec<RacelinePoint>,
    normals: Vec<Vec2>,
    lateral: Vec<f64>,
    widths: Vec<(f64, f64)>,
    length: f64,
}

impl Raceline {
    pub fn generate(track: &TrackModel, id: RacelineId, cfg: &RacelineConfig) -> Result<Self, RacelineError> {
        let f = id.0;
        if !(f.abs() <= cfg.max_offset_fraction) {
            return Err(RacelineError::OffsetOutOfRange { offset: f, max: cfg.max_offset_fraction });
        }
        let wps = track.waypoints();
        let normals = track.normals().to_vec();
        let n = wps.len();
        let mut lateral = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        for (i, w) in wps.iter().enumerate() {
            let lat = if f > 0.0 { -f * w.w_right } else { -f * w.w_left };
            let margin = (w.w_left - lat).min(w.w_right + lat);
            if margin < cfg.min_margin {
                return Err(RacelineError::InsufficientMargin { index: i, margin, required: cfg.min_margin });
            }
            lateral.push(lat);
            pos.push(w.pos() + normals[i] * lat);
        }
        for i in 0..n {
            if pos[i].dist(pos[(i + 1) % n]) <= 1e-6 {
                return Err(RacelineError::DegenerateGeometry { index: i });
            }
        }
        let mut points = Vec::with_capacity(n);
        let mut s = 0.0;
        for i in 0..n {
            let prev = pos[(i + n - 1) % n];
            let next = pos[(i + 1) % n];
            let kappa = three_point_curvature(prev, pos[i], next).ok_or(RacelineError::DegenerateGeometry { index: i })?;
            points.push(RacelinePoint {
                s,
                x: pos[i].x,
                y: pos[i].y,
                heading: (next - prev).angle(),
                kappa,
                v_ref: cfg.speed_for_curvature(kappa),
            });
            s += pos[i].dist(next);
        }
        let widths = wps.iter().map(|w| (w.w_left, w.w_right)).collect();
        Ok(Self { id, points, normals, lateral, widths, length: s })
    }

    pub fn id(&self) -> RacelineId {
        self.id
    }

    pub fn points(&self) -> &[RacelinePoint] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn wrap_s(&self, s: f64) -> f64 {
        s.rem_euclid(self.length)
    }

    fn bracket(&self, s: f64) -> (usize, usize, f64) {
        let s = self.wrap_s(s);
        let n = self.points.len();
        let i = self.points.partition_point(|p| p.s <= s).saturating_sub(1);
        let j = (i + 1) % n;
        let end = if j == 0 { self.length } else { self.points[j].s };
        (i, j, (s - self.points[i].s) / (end - self.points[i].s))
    }

    pub fn frame_at(&self, s: f64) -> RacelineFrame {
        let (i, j, t) = self.bracket(s);
        let (a, b) = (&self.points[i], &self.points[j]);
        let lerp = |x: f64, y: f64| x + (y - x) * t;
        RacelineFrame {
            s: self.wrap_s(s),
            pos: a.pos().lerp(b.pos(), t),
            heading: wrap_angle(a.heading + wrap_angle(b.heading - a.heading) * t),
            normal: self.normals[i].lerp(self.normals[j], t).normalized(),
            kappa: lerp(a.kappa, b.kappa),
            v_ref: lerp(a.v_ref, b.v_ref),
            lateral: lerp(self.lateral[i], self.lateral[j]),
            w_left: lerp(self.widths[i].0, self.widths[j].0),
            w_right: lerp(self.widths[i].1, self.widths[j].1),
        }
    }

    /// Curvature by linear interpolation between the bracketing points; wraps.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let (i, j, t) = self.bracket(s);
        self.points[i].kappa + (self.points[j].kappa - self.points[i].kappa) * t
    }

    pub fn speed_at(&self, s: f64) -> f64 {
        let (i, j, t) = self.bracket(s);
        self.points[i].v_ref + (self.points[j].v_ref - self.points[i].v_ref) * t
    }

    pub fn position_at(&self, s: f64) -> Vec2 {
        let (i, j, t) = self.bracket(s);
        self.points[i].pos().lerp(self.points[j].pos(), t)
    }

    /// Arc length of the nearest projection and the signed lateral deviation
    /// (positive left of travel). Ties go to the smaller arc length.
    pub fn project(&self, p: Vec2) -> Result<(f64, f64), RacelineError> {
        const MAX_DIST: f64 = 10.0;
        let n = self.points.len();
        let mut best = (f64::INFINITY, 0usize, 0.0);
        for i in 0..n {
            let seg = Segment::new(self.points[i].pos(), self.points[(i + 1) % n].pos());
            let (t, d) = seg.closest(p);
            if d < best.0 - 1e-12 {
                best = (d, i, t);
            }
        }
        let (d, i, t) = best;
        if d > MAX_DIST {
            return Err(RacelineError::FarFromRaceline { distance: d });
        }
        let a = self.points[i].pos();
        let b = self.points[(i + 1) % n].pos();
        let end = if i + 1 == n { self.length } else { self.points[i + 1].s };
        let s = self.points[i].s + t * (end - self.points[i].s);
        let side = (b - a).cross(p - a);
        Ok((self.wrap_s(s), if side < 0.0 { -d } else { d }))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "s_m,x_m,y_m,psi_rad,kappa_radpm,vx_mps")?;
        for p in &self.points {
            writeln!(out, "{},{},{},{},{},{}", p.s, p.x, p.y, p.heading, p.kappa, p.v_ref)?;
        }
        Ok(())
    }
}
