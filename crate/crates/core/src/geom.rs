//! Planar geometry shared by the track, simulator and expert.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    #[inline]
    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Counter-clockwise perpendicular.
    #[inline]
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        Vec2::new(self.x / n, self.y / n)
    }

    #[inline]
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    #[inline]
    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub const fn new(a: Vec2, b: Vec2) -> Self {
        Self { a, b }
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }

    /// Closest point parameter `t ∈ [0, 1]` and the distance to `p`.
    pub fn closest(&self, p: Vec2) -> (f64, f64) {
        let ab = self.b - self.a;
        let len2 = ab.norm_sq();
        let t = if len2 > 0.0 {
            ((p - self.a).dot(ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (t, p.dist(self.a + ab * t))
    }
}

/// Distance along the ray `origin + t·dir` (|dir| = 1) to the segment, if hit.
/// Endpoints count as hits.
pub fn ray_segment(origin: Vec2, dir: Vec2, seg: &Segment) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let e = seg.b - seg.a;
    let denom = dir.cross(e);
    if denom.abs() < EPS {
        return None;
    }
    let w = seg.a - origin;
    let t = w.cross(e) / denom;
    let u = w.cross(dir) / denom;
    if t >= 0.0 && (-EPS..=1.0 + EPS).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// Closed segment–segment intersection test (touching counts).
pub fn segments_intersect(p: &Segment, q: &Segment) -> bool {
    fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
        (b - a).cross(c - a)
    }
    fn on_segment(a: Vec2, b: Vec2, c: Vec2) -> bool {
        c.x >= a.x.min(b.x) && c.x <= a.x.max(b.x) && c.y >= a.y.min(b.y) && c.y <= a.y.max(b.y)
    }
    let d1 = orient(q.a, q.b, p.a);
    let d2 = orient(q.a, q.b, p.b);
    let d3 = orient(p.a, p.b, q.a);
    let d4 = orient(p.a, p.b, q.b);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q.a, q.b, p.a))
        || (d2 == 0.0 && on_segment(q.a, q.b, p.b))
        || (d3 == 0.0 && on_segment(p.a, p.b, q.a))
        || (d4 == 0.0 && on_segment(p.a, p.b, q.b))
}

/// Oriented rectangle given by its center, heading and full extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::from_angle(self.heading) * (self.length / 2.0);
        let l = Vec2::from_angle(self.heading).perp() * (self.width / 2.0);
        let c = self.center;
        [c + f + l, c - f + l, c - f - l, c + f - l]
    }

    pub fn edges(&self) -> [Segment; 4] {
        let k = self.corners();
        [
            Segment::new(k[0], k[1]),
            Segment::new(k[1], k[2]),
            Segment::new(k[2], k[3]),
            Segment::new(k[3], k[0]),
        ]
    }

    pub fn circumradius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    fn axes(&self) -> [Vec2; 2] {
        let f = Vec2::from_angle(self.heading);
        [f, f.perp()]
    }

    /// Separating-axis test; touching shapes intersect.
    pub fn intersects_rect(&self, other: &OrientedRect) -> bool {
        if self.center.dist(other.center) > self.circumradius() + other.circumradius() {
            return false;
        }
        let a = self.corners();
        let b = other.corners();
        self.axes()
            .iter()
            .chain(other.axes().iter())
            .all(|&axis| overlaps(project(&a, axis), project(&b, axis)))
    }

    /// Separating-axis test against a segment; touching counts.
    pub fn intersects_segment(&self, seg: &Segment) -> bool {
        let (_, d) = seg.closest(self.center);
        if d > self.circumradius() {
            return false;
        }
        let corners = self.corners();
        let pts = [seg.a, seg.b];
        let dir = seg.b - seg.a;
        let mut axes = self.axes().to_vec();
        if dir.norm_sq() > 0.0 {
            axes.push(dir.perp().normalized());
        }
        axes.iter()
            .all(|&axis| overlaps(project(&corners, axis), project(&pts, axis)))
    }
}

fn project(pts: &[Vec2], axis: Vec2) -> (f64, f64) {
    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let v = p.dot(axis);
        (lo.min(v), hi.max(v))
    })
}

#[inline]
fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Signed curvature of the circle through three points (positive for a left turn).
/// `None` when two points coincide.
pub fn three_point_curvature(a: Vec2, b: Vec2, c: Vec2) -> Option<f64> {
    let ab = a.dist(b);
    let bc = b.dist(c);
    let ca = c.dist(a);
    let denom = ab * bc * ca;
    if ab < 1e-9 || bc < 1e-9 || ca < 1e-9 {
        return None;
    }
    Some(2.0 * (b - a).cross(c - b) / denom)
}

/// Twice the signed area of a closed polygon (positive when counter-clockwise).
pub fn signed_area2(pts: &[Vec2]) -> f64 {
    let n = pts.len();
    (0..n).map(|i| pts[i].cross(pts[(i + 1) % n])).sum()
}

/// True when no two non-adjacent edges of the closed polyline intersect.
pub fn is_simple_polygon(pts: &[Vec2]) -> bool {
    let n = pts.len();
    if n < 3 {
        return false;
    }
    let segs: Vec<Segment> = (0..n).map(|i| Segment::new(pts[i], pts[(i + 1) % n])).collect();
    let bbox: Vec<(f64, f64, f64, f64)> = segs
        .iter()
        .map(|s| (s.a.x.min(s.b.x), s.a.x.max(s.b.x), s.a.y.min(s.b.y), s.a.y.max(s.b.y)))
        .collect();
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (a, b) = (bbox[i], bbox[j]);
            if a.1 < b.0 || b.1 < a.0 || a.3 < b.2 || b.3 < a.2 {
                continue;
            }
            if segments_intersect(&segs[i], &segs[j]) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_hits_segment_endpoint() {
        let seg = Segment::new(Vec2::new(4.0, -4.0), Vec2::new(4.0, 4.0));
        let d = ray_segment(Vec2::ZERO, Vec2::from_angle(PI / 4.0), &seg).unwrap();
        assert!((d - 4.0 * 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn ray_behind_origin_misses() {
        let seg = Segment::new(Vec2::new(-1.0, -1.0), Vec2::new(-1.0, 1.0));
        assert!(ray_segment(Vec2::ZERO, Vec2::new(1.0, 0.0), &seg).is_none());
    }

    #[test]
    fn rect_touching_segment_intersects() {
        let r = OrientedRect { center: Vec2::ZERO, heading: 0.0, length: 2.0, width: 1.0 };
        let touch = Segment::new(Vec2::new(1.0, -3.0), Vec2::new(1.0, 3.0));
        let miss = Segment::new(Vec2::new(1.0 + 1e-9, -3.0), Vec2::new(1.0 + 1e-9, 3.0));
        assert!(r.intersects_segment(&touch));
        assert!(!r.intersects_segment(&miss));
    }

    #[test]
    fn rotated_rects_separate_on_own_axis() {
        let a = OrientedRect { center: Vec2::ZERO, heading: 0.0, length: 2.0, width: 2.0 };
        let b = OrientedRect { center: Vec2::new(2.3, 0.0), heading: PI / 4.0, length: 1.0, width: 1.0 };
        // b's nearest corner sits at x = 2.3 - 0.707 > 1
        assert!(!a.intersects_rect(&b));
        let c = OrientedRect { center: Vec2::new(1.6, 0.0), ..b };
        assert!(a.intersects_rect(&c));
    }

    #[test]
    fn curvature_of_points_on_circle() {
        let r = 7.0;
        let p = |t: f64| Vec2::new(r * t.cos(), r * t.sin());
        let k = three_point_curvature(p(0.0), p(0.1), p(0.2)).unwrap();
        assert!((k - 1.0 / r).abs() < 1e-12);
        let k = three_point_curvature(p(0.2), p(0.1), p(0.0)).unwrap();
        assert!((k + 1.0 / r).abs() < 1e-12);
    }

    #[test]
    fn figure_eight_is_not_simple() {
        let pts = [
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
        ];
        assert!(!is_simple_polygon(&pts));
        let sq = [
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(0.0, 1.0),
        ];
        assert!(is_simple_polygon(&sq));
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI / 2.0 - TAU) + PI / 2.0).abs() < 1e-12);
    }
}
