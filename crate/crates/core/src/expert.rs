//! Rule-based demonstrator: lattice planner with a composite reward and a
//! pure-pursuit tracker, plus the non-reactive leading vehicle.
//!
//! The ego expert samples a grid of candidates around its raceline (lateral target
//! offsets × speed scalings), each a cubic lateral blend from the current offset to
//! the target, held for the rest of the horizon. Every candidate is scored by averaging, over its
//! samples,
//!
//! ```text
//! λv·ln(v) − λp·|d_r| − λd·φ(d_l) − λκ·|κ|·v,     φ(d) = exp(−d / d_scale)
//! ```
//!
//! where `d_r` is the lateral deviation from the raceline, `κ` the raceline
//! curvature and `d_l` the distance to the opponent's constant-velocity prediction
//! at the same instant. The best candidate is tracked with pure pursuit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Vec2};
use crate::sim::{VehicleCommand, VehicleState, WorldState};
use crate::track::{Raceline, RacelineError};

#[derive(Debug, Error, PartialEq)]
pub enum ExpertError {
    #[error("every lattice candidate leaves the track")]
    NoFeasibleCandidate,
    #[error("candidate sample has non-positive speed {0}")]
    NonPositiveSpeed(f64),
    #[error("no candidates to select from")]
    EmptyCandidateSet,
    #[error("invalid expert config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raceline(#[from] RacelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub lambda_v: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub lambda_kappa: f64,
    /// Length scale of the proximity cost `exp(−d_l / d_scale)`.
    pub d_scale: f64,
    pub horizon_t: f64,
    /// Duration of the lateral transition; candidates hold their target offset afterwards.
    pub blend_t: f64,
    pub sample_dt: f64,
    pub n_lateral: usize,
    pub n_speed: usize,
    /// Smallest speed scaling; scalings are spread evenly over `[s_min, 1]`.
    pub s_min: f64,
    /// Target offsets are spread evenly over `[−lateral_span, +lateral_span]` meters.
    pub lateral_span: f64,
    /// Clearance kept between a candidate's reference line and the boundaries.
    pub track_margin: f64,
    /// Opponent predictions further than this behind a candidate sample are ignored.
    pub rear_gate: f64,
    /// Candidates passing closer than this to the opponent prediction are discarded.
    pub min_clearance: f64,
    /// Minimum pure-pursuit lookahead ℓ; the lookahead grows as `lookahead_gain · v`.
    pub lookahead_ell: f64,
    pub lookahead_gain: f64,
    pub wheelbase_l: f64,
    pub delta_max: f64,
    /// Speed-loop gain and acceleration bound used to predict each candidate's
    /// speed profile; should mirror the simulator.
    pub speed_gain: f64,
    pub accel_max: f64,
    pub leader_speed_discount: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_p: 0.6,
            lambda_d: 2.5,
            lambda_kappa: 0.05,
            d_scale: 0.8,
            horizon_t: 2.0,
            blend_t: 1.0,
            sample_dt: 0.01,
            n_lateral: 7,
            n_speed: 3,
            s_min: 0.5,
            lateral_span: 1.0,
            track_margin: 0.3,
            rear_gate: f64::INFINITY,
            min_clearance: 0.65,
            lookahead_ell: 0.8,
            lookahead_gain: 0.3,
            wheelbase_l: 0.33,
            delta_max: 0.4189,
            speed_gain: 2.0,
            accel_max: 9.51,
            leader_speed_discount: 0.6,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<(), ExpertError> {
        let bad = |m: &str| Err(ExpertError::InvalidConfig(m.into()));
        if [self.lambda_v, self.lambda_p, self.lambda_d, self.lambda_kappa].iter().any(|&l| !(l >= 0.0)) {
            return bad("weights must be non-negative");
        }
        if !(self.horizon_t > 0.0) || !(self.sample_dt > 0.0) || !(self.blend_t > 0.0) {
            return bad("horizon_t, blend_t and sample_dt must be positive");
        }
        if self.n_lateral == 0 || self.n_speed == 0 {
            return bad("n_lateral and n_speed must be at least 1");
        }
        if [self.lookahead_ell, self.d_scale, self.wheelbase_l, self.speed_gain, self.accel_max].iter().any(|&x| !(x > 0.0)) {
            return bad("lookahead_ell, d_scale, wheelbase_l, speed_gain and accel_max must be positive");
        }
        if !(self.s_min > 0.0 && self.s_min <= 1.0) {
            return bad("s_min must lie in (0, 1]");
        }
        if !(self.leader_speed_discount > 0.0 && self.leader_speed_discount <= 1.0) {
            return bad("leader_speed_discount must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn lookahead(&self, v: f64) -> f64 {
        self.lookahead_ell.max(self.lookahead_gain * v)
    }

    fn horizon_samples(&self) -> usize {
        (self.horizon_t / self.sample_dt).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateSample {
    pub pos: Vec2,
    pub heading: f64,
    /// Predicted speed, relaxing from the current speed toward `v_target`.
    pub v: f64,
    pub v_target: f64,
    /// Lateral deviation from the raceline, positive left.
    pub d_r: f64,
    /// Raceline curvature at this sample.
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTrajectory {
    pub samples: Vec<CandidateSample>,
    pub lateral_offset: f64,
    pub speed_scale: f64,
    pub reward: f64,
}

fn evenly(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![if lo == -hi { 0.0 } else { hi }];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn smoothstep(tau: f64) -> f64 {
    tau * tau * (3.0 - 2.0 * tau)
}

/// Builds the candidate grid from the vehicle's pose; candidates leaving the track
/// are dropped. Rewards are left at zero.
pub fn sample_lattice(
    state: &VehicleState,
    raceline: &Raceline,
    cfg: &ExpertConfig,
) -> Result<Vec<CandidateTrajectory>, ExpertError> {
    let (s0, d0) = raceline.project(state.pos())?;
    let n = cfg.horizon_samples();
    let offsets = evenly(cfg.n_lateral, -cfg.lateral_span, cfg.lateral_span);
    let scales = evenly(cfg.n_speed, cfg.s_min, 1.0);
    let mut out = Vec::with_capacity(offsets.len() * scales.len());
    for &target in &offsets {
        'speed: for &scale in &scales {
            let mut samples = Vec::with_capacity(n);
            let mut s = s0;
            let mut v = state.v;
            let mut v_target = scale * raceline.speed_at(s0);
            let mut prev = state.pos();
            for k in 1..=n {
                v += (cfg.speed_gain * (v_target - v)).clamp(-cfg.accel_max, cfg.accel_max) * cfg.sample_dt;
                s += v * cfg.sample_dt;
                let frame = raceline.frame_at(s);
                let tau = (k as f64 * cfg.sample_dt / cfg.blend_t).min(1.0);
                let d = d0 + (target - d0) * smoothstep(tau);
                if !frame.fits(d, cfg.track_margin) {
                    continue 'speed;
                }
                v_target = scale * frame.v_ref;
                let pos = frame.pos + frame.normal * d;
                let step = pos - prev;
                let heading = if step.norm_sq() > 0.0 { step.angle() } else { frame.heading };
                samples.push(CandidateSample { pos, heading, v, v_target, d_r: d, kappa: frame.kappa });
                prev = pos;
            }
            out.push(CandidateTrajectory { samples, lateral_offset: target, speed_scale: scale, reward: 0.0 });
        }
    }
    if out.is_empty() {
        Err(ExpertError::NoFeasibleCandidate)
    } else {
        Ok(out)
    }
}

/// Constant-velocity prediction of a vehicle, one point per candidate sample.
pub fn predict_constant_velocity(state: &VehicleState, n: usize, dt: f64) -> Vec<Vec2> {
    let vel = Vec2::from_angle(state.theta) * state.v;
    (1..=n).map(|k| state.pos() + vel * (k as f64 * dt)).collect()
}

/// Proximity cost on the distance to the leading vehicle.
pub fn proximity_cost(d_l: f64, d_scale: f64) -> f64 {
    (-d_l / d_scale).exp()
}

/// Per-sample composite reward.
pub fn sample_reward(v: f64, d_r: f64, phi: f64, kappa: f64, cfg: &ExpertConfig) -> f64 {
    cfg.lambda_v * v.ln() - cfg.lambda_p * d_r.abs() - cfg.lambda_d * phi - cfg.lambda_kappa * kappa.abs() * v
}

/// Distance from a sample to the opponent, or `None` when the opponent lies behind
/// the rear gate.
fn gated_distance(smp: &CandidateSample, opp: Vec2, cfg: &ExpertConfig) -> Option<f64> {
    let rel = opp - smp.pos;
    (rel.dot(Vec2::from_angle(smp.heading)) >= -cfg.rear_gate).then(|| rel.norm())
}

/// Smallest gated distance between the candidate and the time-aligned prediction.
pub fn min_separation(cand: &CandidateTrajectory, opponent_pred: &[Vec2], cfg: &ExpertConfig) -> f64 {
    cand.samples
        .iter()
        .zip(opponent_pred)
        .filter_map(|(smp, &o)| gated_distance(smp, o, cfg))
        .fold(f64::INFINITY, f64::min)
}

/// True when no sample comes within `min_clearance` of the time-aligned prediction.
pub fn clears_opponent(cand: &CandidateTrajectory, opponent_pred: &[Vec2], cfg: &ExpertConfig) -> bool {
    min_separation(cand, opponent_pred, cfg) >= cfg.min_clearance
}

/// Mean composite reward over the candidate's samples. `opponent_pred` is aligned
/// sample-by-sample with the candidate; an empty prediction means no opponent.
pub fn score_candidate(
    cand: &CandidateTrajectory,
    opponent_pred: &[Vec2],
    cfg: &ExpertConfig,
) -> Result<f64, ExpertError> {
    if cand.samples.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let mut total = 0.0;
    for (k, smp) in cand.samples.iter().enumerate() {
        if !(smp.v > 0.0) {
            return Err(ExpertError::NonPositiveSpeed(smp.v));
        }
        let phi = match opponent_pred.get(k).and_then(|&o| gated_distance(smp, o, cfg)) {
            Some(d_l) => proximity_cost(d_l, cfg.d_scale),
            None => 0.0,
        };
        total += sample_reward(smp.v, smp.d_r, phi, smp.kappa, cfg);
    }
    Ok(total / cand.samples.len() as f64)
}

/// Index of the best candidate: highest reward, then smallest |offset|, then lowest index.
pub fn select_trajectory(cands: &[CandidateTrajectory]) -> Result<usize, ExpertError> {
    let mut best: Option<usize> = None;
    for (i, c) in cands.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &cands[b];
                if c.reward > cur.reward
                    || (c.reward == cur.reward && c.lateral_offset.abs() < cur.lateral_offset.abs())
                {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.ok_or(ExpertError::EmptyCandidateSet)
}

/// Steering angle toward a lookahead point at heading error `alpha`.
pub fn pure_pursuit_steer(alpha: f64, wheelbase: f64, lookahead: f64) -> f64 {
    (2.0 * wheelbase * alpha.sin() / lookahead).atan()
}

/// Pure pursuit toward a target point, clamped to the steering limit.
pub fn pursue_point(state: &VehicleState, target: Vec2, lookahead: f64, cfg: &ExpertConfig) -> f64 {
    let alpha = wrap_angle((target - state.pos()).angle() - state.theta);
    pure_pursuit_steer(alpha, cfg.wheelbase_l, lookahead).clamp(-cfg.delta_max, cfg.delta_max)
}

/// Pure pursuit on a candidate: aims at the first sample at least ℓ away, or the
/// farthest sample if none is.
pub fn pure_pursuit(state: &VehicleState, traj: &CandidateTrajectory, cfg: &ExpertConfig) -> f64 {
    let ell = cfg.lookahead(state.v);
    let target = traj
        .samples
        .iter()
        .find(|s| s.pos.dist(state.pos()) >= ell)
        .or(traj.samples.last())
        .map(|s| s.pos);
    match target {
        Some(p) => pursue_point(state, p, ell, cfg),
        None => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Ego,
    Leader,
}

/// The full planning pipeline for the ego role: sample, drop candidates that would
/// run into the predicted opponent, score, select. Returns the chosen index into the
/// surviving, scored candidates.
pub fn plan_ego(
    world: &WorldState<'_>,
    agent: usize,
    raceline: &Raceline,
    cfg: &ExpertConfig,
) -> Result<(usize, Vec<CandidateTrajectory>), ExpertError> {
    let state = &world.agents[agent];
    let mut cands = sample_lattice(state, raceline, cfg)?;
    let pred = world
        .opponent_of(agent)
        .map(|o| predict_constant_velocity(o, cfg.horizon_samples(), cfg.sample_dt))
        .unwrap_or_default();
    let sep: Vec<f64> = cands.iter().map(|c| min_separation(c, &pred, cfg)).collect();
    let widest = sep.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Without a clear candidate, keep only the ones that stay furthest away.
    let keep = if widest >= cfg.min_clearance { cfg.min_clearance } else { widest - 0.05 };
    let mut it = sep.iter();
    cands.retain(|_| *it.next().unwrap() >= keep);
    for c in cands.iter_mut() {
        c.reward = score_candidate(c, &pred, cfg)?;
    }
    let best = select_trajectory(&cands)?;
    Ok((best, cands))
}

/// Command for `agent` under `role`. The ego falls back to braking straight when no
/// candidate is feasible.
pub fn expert_action(
    world: &WorldState<'_>,
    agent: usize,
    role: Role,
    raceline: &Raceline,
    cfg: &ExpertConfig,
) -> VehicleCommand {
    let state = &world.agents[agent];
    match role {
        Role::Ego => match plan_ego(world, agent, raceline, cfg) {
            Ok((best, cands)) => {
                let traj = &cands[best];
                VehicleCommand::new(traj.samples[0].v_target, pure_pursuit(state, traj, cfg))
            }
            Err(_) => VehicleCommand::BRAKE,
        },
        Role::Leader => leader_command(state, raceline, cfg),
    }
}

/// Leader: pure pursuit along its own raceline at the discounted reference speed.
/// Depends only on the leader's own state.
pub fn leader_command(state: &VehicleState, raceline: &Raceline, cfg: &ExpertConfig) -> VehicleCommand {
    let Ok((s, _)) = raceline.project(state.pos()) else {
        return VehicleCommand::BRAKE;
    };
    let ell = cfg.lookahead(state.v);
    let target = raceline.position_at(s + ell);
    VehicleCommand::new(raceline.speed_at(s) * cfg.leader_speed_discount, pursue_point(state, target, ell, cfg))
}
