//! Two-agent kinematic racing simulator with LiDAR and collision checks.
//!
//! Each agent is a kinematic single-track vehicle whose reference point is the rear
//! axle center. Steering slews toward the commanded angle at a bounded rate and
//! speed follows the command through a saturated proportional loop. The footprint
//! is a `veh_length × veh_width` rectangle centered half a wheelbase ahead of the
//! rear axle.

use std::f64::consts::TAU;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{ray_segment, OrientedRect, Segment, Vec2};
use crate::track::TrackModel;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("non-finite state for agent {agent} at t = {t:.2} s")]
    NonFiniteState { agent: usize, t: f64 },
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub wheelbase: f64,
    pub veh_length: f64,
    pub veh_width: f64,
    pub delta_max: f64,
    pub steer_rate_max: f64,
    pub a_max: f64,
    pub a_min: f64,
    pub v_hard_max: f64,
    pub speed_gain: f64,
    pub lidar_range_max: f64,
    pub n_beams: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            wheelbase: 0.33,
            veh_length: 0.58,
            veh_width: 0.31,
            delta_max: 0.4189,
            steer_rate_max: 3.2,
            a_max: 9.51,
            a_min: -9.51,
            v_hard_max: 10.0,
            speed_gain: 2.0,
            lidar_range_max: 30.0,
            n_beams: 360,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("dt", self.dt),
            ("wheelbase", self.wheelbase),
            ("veh_length", self.veh_length),
            ("veh_width", self.veh_width),
            ("delta_max", self.delta_max),
            ("steer_rate_max", self.steer_rate_max),
            ("a_max", self.a_max),
            ("v_hard_max", self.v_hard_max),
            ("speed_gain", self.speed_gain),
            ("lidar_range_max", self.lidar_range_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.a_min < 0.0) {
            return Err(SimError::InvalidConfig(format!("a_min must be negative, got {}", self.a_min)));
        }
        if self.n_beams == 0 {
            return Err(SimError::InvalidConfig("n_beams must be positive".into()));
        }
        Ok(())
    }

    /// Simulation steps per control period of `hz`.
    pub fn steps_per(&self, hz: f64) -> usize {
        (1.0 / (hz * self.dt)).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub delta: f64,
}

impl VehicleState {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn footprint(&self, cfg: &SimConfig) -> OrientedRect {
        OrientedRect {
            center: self.pos() + Vec2::from_angle(self.theta) * (cfg.wheelbase / 2.0),
            heading: self.theta,
            length: cfg.veh_length,
            width: cfg.veh_width,
        }
    }

    fn is_finite(&self) -> bool {
        [self.x, self.y, self.theta, self.v, self.delta].iter().all(|v| v.is_finite())
    }

    /// Advances one step of the kinematic bicycle under `cmd`.
    pub fn advance(&mut self, cmd: VehicleCommand, cfg: &SimConfig) {
        let target = cmd.delta_cmd.clamp(-cfg.delta_max, cfg.delta_max);
        let max_slew = cfg.steer_rate_max * cfg.dt;
        self.delta += (target - self.delta).clamp(-max_slew, max_slew);

        // A non-positive speed command is a stop request and brakes at full rate.
        let accel = if cmd.v_cmd <= 0.0 {
            cfg.a_min
        } else {
            (cfg.speed_gain * (cmd.v_cmd - self.v)).clamp(cfg.a_min, cfg.a_max)
        };

        let v = self.v;
        self.x += v * self.theta.cos() * cfg.dt;
        self.y += v * self.theta.sin() * cfg.dt;
        self.theta += v / cfg.wheelbase * self.delta.tan() * cfg.dt;
        self.v = (v + accel * cfg.dt).clamp(0.0, cfg.v_hard_max);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleCommand {
    pub v_cmd: f64,
    pub delta_cmd: f64,
}

impl VehicleCommand {
    pub const BRAKE: VehicleCommand = VehicleCommand { v_cmd: 0.0, delta_cmd: 0.0 };

    pub fn new(v_cmd: f64, delta_cmd: f64) -> Self {
        Self { v_cmd, delta_cmd }
    }
}

pub const EGO: usize = 0;
pub const OPPONENT: usize = 1;

/// One or two agents on a track. Agent 0 is the ego vehicle.
#[derive(Debug, Clone)]
pub struct WorldState<'t> {
    pub track: &'t TrackModel,
    pub agents: Vec<VehicleState>,
    pub collided: Vec<bool>,
    steps: u64,
    dt: f64,
}

impl<'t> WorldState<'t> {
    pub fn new(track: &'t TrackModel, agents: Vec<VehicleState>, cfg: &SimConfig) -> Self {
        assert!(!agents.is_empty() && agents.len() <= 2, "one or two agents supported");
        let n = agents.len();
        Self { track, agents, collided: vec![false; n], steps: 0, dt: cfg.dt }
    }

    pub fn t(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn any_collision(&self) -> bool {
        self.collided.iter().any(|&c| c)
    }

    pub fn opponent_of(&self, agent: usize) -> Option<&VehicleState> {
        if self.agents.len() == 2 {
            Some(&self.agents[1 - agent])
        } else {
            None
        }
    }

    /// Advances every agent by one `dt` and latches collision flags.
    pub fn step(&mut self, commands: &[VehicleCommand], cfg: &SimConfig) -> Result<(), SimError> {
        debug_assert_eq!(commands.len(), self.agents.len());
        for (agent, (state, cmd)) in self.agents.iter_mut().zip(commands).enumerate() {
            state.advance(*cmd, cfg);
            if !state.is_finite() {
                return Err(SimError::NonFiniteState { agent, t: (self.steps + 1) as f64 * self.dt });
            }
        }
        self.steps += 1;
        let hits = check_collision(self, cfg);
        for (flag, hit) in self.collided.iter_mut().zip(hits) {
            *flag |= hit;
        }
        Ok(())
    }
}

/// Instantaneous collision status per agent: footprint touching a boundary or the
/// other agent.
pub fn check_collision(world: &WorldState<'_>, cfg: &SimConfig) -> Vec<bool> {
    let rects: Vec<OrientedRect> = world.agents.iter().map(|a| a.footprint(cfg)).collect();
    let mut hits: Vec<bool> = rects
        .iter()
        .map(|r| world.track.boundary_segments().iter().any(|s| r.intersects_segment(s)))
        .collect();
    if rects.len() == 2 && rects[0].intersects_rect(&rects[1]) {
        hits[0] = true;
        hits[1] = true;
    }
    hits
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    /// Beam `i` points at `theta + i · 360°/n`.
    pub ranges: Vec<f64>,
}

impl LidarScan {
    pub fn to_f32(&self) -> Vec<f32> {
        self.ranges.iter().map(|&r| r as f32).collect()
    }
}

/// Casts `n_beams` evenly spaced rays from `origin` against `segments`.
///
/// Each segment only tests the beams inside the angular interval it subtends, so the
/// cost is proportional to the number of segments plus the number of hits.
pub fn cast_rays<'a>(
    origin: Vec2,
    heading: f64,
    segments: impl IntoIterator<Item = &'a Segment>,
    n_beams: usize,
    range_max: f64,
) -> Vec<f64> {
    const TOL: f64 = 1e-9;
    let step = TAU / n_beams as f64;
    let mut ranges = vec![range_max; n_beams];
    for seg in segments {
        let va = seg.a - origin;
        let vb = seg.b - origin;
        let cr = va.cross(vb);
        if cr.abs() < 1e-15 {
            continue;
        }
        let (start, span) = if cr > 0.0 {
            (va.angle() - heading, cr.atan2(va.dot(vb)))
        } else {
            (vb.angle() - heading, (-cr).atan2(va.dot(vb)))
        };
        let start = start.rem_euclid(TAU);
        let k0 = ((start - TOL) / step).ceil() as i64;
        let k1 = ((start + span + TOL) / step).floor() as i64;
        for k in k0..=k1 {
            let beam = k.rem_euclid(n_beams as i64) as usize;
            let dir = Vec2::from_angle(heading + beam as f64 * step);
            if let Some(d) = ray_segment(origin, dir, seg) {
                if d < ranges[beam] {
                    ranges[beam] = d;
                }
            }
        }
    }
    ranges
}

/// LiDAR scan of `agent` against the track boundaries and the other agent's footprint.
pub fn scan_lidar(world: &WorldState<'_>, agent: usize, cfg: &SimConfig) -> LidarScan {
    let me = &world.agents[agent];
    let opp_edges = world.opponent_of(agent).map(|o| o.footprint(cfg).edges());
    let segments = world.track.boundary_segments().iter().chain(opp_edges.iter().flatten());
    LidarScan { ranges: cast_rays(me.pos(), me.theta, segments, cfg.n_beams, cfg.lidar_range_max) }
}

/// Zeroes exactly `floor(eta · n)` distinct beams chosen uniformly without replacement.
pub fn apply_noise<R: Rng + ?Sized>(scan: &mut LidarScan, eta: f64, rng: &mut R) {
    let n = scan.ranges.len();
    let k = ((eta.clamp(0.0, 1.0) * n as f64) + 1e-9).floor() as usize;
    if k == 0 {
        return;
    }
    for i in rand::seq::index::sample(rng, n, k.min(n)) {
        scan.ranges[i] = 0.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub agent: usize,
    pub state: VehicleState,
    pub collided: bool,
}

/// Per-step record of every agent, for rendering and debugging.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    pub rows: Vec<TraceRow>,
}

impl EpisodeTrace {
    pub fn record(&mut self, world: &WorldState<'_>) {
        let t = world.t();
        for (agent, state) in world.agents.iter().enumerate() {
            self.rows.push(TraceRow { t, agent, state: *state, collided: world.collided[agent] });
        }
    }

    pub fn agent(&self, agent: usize) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.agent == agent)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t_s,agent,x_m,y_m,theta_rad,v_mps,delta_rad,collided")?;
        for r in &self.rows {
            let s = &r.state;
            writeln!(
                out,
                "{:.2},{},{},{},{},{},{},{}",
                r.t, r.agent, s.x, s.y, s.theta, s.v, s.delta, r.collided as u8
            )?;
        }
        Ok(())
    }
}
