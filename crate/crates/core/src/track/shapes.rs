//! Built-in synthetic circuits. All run counter-clockwise with constant width.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ParseOptions, TrackError, TrackModel, Waypoint};
use crate::geom::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackShape {
    Circle,
    Oval,
    Stadium,
    Serpentine,
}

impl FromStr for TrackShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "circle" => Ok(Self::Circle),
            "oval" => Ok(Self::Oval),
            "stadium" => Ok(Self::Stadium),
            "serpentine" => Ok(Self::Serpentine),
            other => Err(format!("unknown track shape {other:?} (expected circle, oval, stadium or serpentine)")),
        }
    }
}

/// Builds a shape with the given centerline length, total width and waypoint spacing.
pub fn generate(shape: TrackShape, length: f64, width: f64, spacing: f64) -> Result<TrackModel, TrackError> {
    match shape {
        TrackShape::Circle => {
            let n = (length / spacing).round().max(8.0) as usize;
            circle(length / TAU, n, width)
        }
        TrackShape::Oval => oval(length, width, spacing),
        TrackShape::Stadium => stadium(length, width, spacing),
        TrackShape::Serpentine => serpentine(length, width, spacing),
    }
}

pub fn circle_waypoints(radius: f64, n: usize, w_right: f64, w_left: f64) -> Vec<Waypoint> {
    (0..n)
        .map(|i| {
            let t = TAU * i as f64 / n as f64;
            Waypoint { x: radius * t.cos(), y: radius * t.sin(), w_right, w_left }
        })
        .collect()
}

pub fn circle(radius: f64, n: usize, width: f64) -> Result<TrackModel, TrackError> {
    TrackModel::from_waypoints(circle_waypoints(radius, n, width / 2.0, width / 2.0), &ParseOptions::default())
}

/// Two straights joined by semicircles; straights are twice the turn radius.
/// Arc length zero is the middle of the bottom straight, heading +x.
pub fn stadium_waypoints(length: f64, width: f64, spacing: f64) -> Vec<Waypoint> {
    let r = length / (TAU + 4.0);
    let straight = 2.0 * r;
    let half = straight / 2.0;
    let n = (length / spacing).round().max(8.0) as usize;
    let at = |u: f64| -> Vec2 {
        // piecewise: half straight, arc, straight, arc, half straight
        let arc = PI * r;
        let mut u = u;
        if u < half {
            return Vec2::new(u, -r);
        }
        u -= half;
        if u < arc {
            let a = -PI / 2.0 + u / r;
            return Vec2::new(half + r * a.cos(), r * a.sin());
        }
        u -= arc;
        if u < straight {
            return Vec2::new(half - u, r);
        }
        u -= straight;
        if u < arc {
            let a = PI / 2.0 + u / r;
            return Vec2::new(-half + r * a.cos(), r * a.sin());
        }
        u -= arc;
        Vec2::new(-half + u, -r)
    };
    (0..n)
        .map(|i| {
            let p = at(length * i as f64 / n as f64);
            Waypoint { x: p.x, y: p.y, w_right: width / 2.0, w_left: width / 2.0 }
        })
        .collect()
}

pub fn stadium(length: f64, width: f64, spacing: f64) -> Result<TrackModel, TrackError> {
    TrackModel::from_waypoints(stadium_waypoints(length, width, spacing), &ParseOptions::default())
}

/// Ellipse with a 2:1 aspect ratio.
pub fn oval(length: f64, width: f64, spacing: f64) -> Result<TrackModel, TrackError> {
    let wps = resample_closed(|t| Vec2::new(2.0 * (TAU * t).cos(), (TAU * t).sin()), length, width, spacing);
    TrackModel::from_waypoints(wps, &ParseOptions::default())
}

/// Closed loop whose radius oscillates, giving alternating sweeping and tight arcs.
pub fn serpentine(length: f64, width: f64, spacing: f64) -> Result<TrackModel, TrackError> {
    let wps = resample_closed(
        |t| {
            let a = TAU * t;
            let r = 1.0 + 0.18 * (4.0 * a).sin();
            Vec2::new(1.3 * r * a.cos(), r * a.sin())
        },
        length,
        width,
        spacing,
    );
    TrackModel::from_waypoints(wps, &ParseOptions::default())
}

/// Samples a closed unit-period curve, scales it to `length` and resamples at
/// (nearly) uniform arc spacing.
fn resample_closed(f: impl Fn(f64) -> Vec2, length: f64, width: f64, spacing: f64) -> Vec<Waypoint> {
    const DENSE: usize = 20_000;
    let dense: Vec<Vec2> = (0..=DENSE).map(|i| f(i as f64 / DENSE as f64)).collect();
    let mut cum = vec![0.0; DENSE + 1];
    for i in 1..=DENSE {
        cum[i] = cum[i - 1] + dense[i].dist(dense[i - 1]);
    }
    let scale = length / cum[DENSE];
    let n = (length / spacing).round().max(8.0) as usize;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let target = cum[DENSE] * i as f64 / n as f64;
        while cum[j + 1] < target {
            j += 1;
        }
        let t = (target - cum[j]) / (cum[j + 1] - cum[j]);
        let p = dense[j].lerp(dense[j + 1], t) * scale;
        out.push(Waypoint { x: p.x, y: p.y, w_right: width / 2.0, w_left: width / 2.0 });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_circumference() {
        let t = circle(10.0, 360, 3.0).unwrap();
        let exact = TAU * 10.0;
        assert!((t.total_length() - exact).abs() / exact < 1e-3);
    }

    #[test]
    fn generated_shapes_have_requested_length() {
        for shape in [TrackShape::Oval, TrackShape::Stadium, TrackShape::Serpentine, TrackShape::Circle] {
            let t = generate(shape, 80.0, 3.0, 0.25).unwrap();
            assert!((t.total_length() - 80.0).abs() / 80.0 < 5e-3, "{shape:?}: {}", t.total_length());
        }
    }

    #[test]
    fn stadium_runs_counter_clockwise() {
        let t = stadium(60.0, 3.0, 0.25).unwrap();
        let pts: Vec<Vec2> = t.waypoints().iter().map(|w| w.pos()).collect();
        assert!(crate::geom::signed_area2(&pts) > 0.0);
        // left boundary is the inner one
        assert_eq!(t.inner_boundary().as_ptr(), t.left_boundary().as_ptr());
    }

    #[test]
    fn shape_names_parse() {
        assert_eq!("Stadium".parse::<TrackShape>().unwrap(), TrackShape::Stadium);
        assert!("hairpin".parse::<TrackShape>().is_err());
    }
}
