//! Closed-loop evaluation suites, latency benchmark, reports and SVG rendering.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Vec2;
use crate::policy::fast::FastPolicy;
use crate::policy::{forward_step, HiddenState, PolicyConfig, PolicyParameters};
use crate::scenario::{
    run_scenarios, Driver, Observation, Outcome, OutcomeCounts, RacelineSet, RolloutConfig, RolloutResult, Scenario,
    ScenarioError, Spawn,
};
use crate::sim::{EpisodeTrace, SimConfig, VehicleCommand};
use crate::track::{RacelineId, TrackModel};

/// The learned policy as an ego driver; hidden state resets per episode.
pub struct PolicyDriver<'a> {
    params: &'a PolicyParameters,
    cfg: PolicyConfig,
    h: HiddenState,
    ranges: Vec<f64>,
}

impl<'a> PolicyDriver<'a> {
    pub fn new(params: &'a PolicyParameters, cfg: PolicyConfig) -> Self {
        Self { params, cfg, h: HiddenState::zeros(&cfg), ranges: vec![0.0; cfg.n_beams] }
    }
}

impl Driver for PolicyDriver<'_> {
    fn reset(&mut self, _scenario: &Scenario) -> Result<(), ScenarioError> {
        self.h = HiddenState::zeros(&self.cfg);
        Ok(())
    }

    fn act(&mut self, obs: &Observation<'_>) -> VehicleCommand {
        self.ranges.clear();
        self.ranges.extend_from_slice(&obs.scan.ranges);
        match forward_step(&self.ranges, obs.ego_v, &self.h, self.params, &self.cfg, false) {
            Ok((a, h)) => {
                self.h = h;
                VehicleCommand::new(a.v, a.delta)
            }
            Err(e) => {
                log::error!("policy step failed: {e}");
                VehicleCommand::BRAKE
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleAgentReport {
    pub track_id: String,
    pub mean_speed: f64,
    /// Population variance of the speed, in (m/s)².
    pub speed_variance: f64,
    pub mean_laptime: Option<f64>,
    pub laptime_variance: Option<f64>,
    pub laps_completed: f64,
    pub lap_times: Vec<f64>,
    pub collided: bool,
}

fn mean_var(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    Some((m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n))
}

impl SingleAgentReport {
    pub fn from_rollout(track_id: &str, track: &TrackModel, laps_target: usize, r: &RolloutResult) -> Self {
        let laps: Vec<f64> = r.lap_times.iter().scan(0.0, |prev, &t| {
            let d = t - *prev;
            *prev = t;
            Some(d)
        })
        .collect();
        let stats = mean_var(&laps);
        Self {
            track_id: track_id.to_string(),
            mean_speed: r.ego_mean_speed,
            speed_variance: r.ego_speed_var,
            mean_laptime: stats.map(|s| s.0),
            laptime_variance: stats.map(|s| s.1),
            laps_completed: (r.ego_progress / track.total_length()).clamp(0.0, laps_target as f64),
            lap_times: laps,
            collided: r.record.outcome == Outcome::Collision,
        }
    }
}

/// Settings shared by the closed-loop suites.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub sim: SimConfig,
    pub leader: crate::expert::ExpertConfig,
    pub workers: usize,
    pub seed: u64,
    /// Single-agent runs stop after `laps_target · L / min_mean_speed` seconds.
    pub min_mean_speed: f64,
}

/// Ego alone from the start of `raceline`, driving until `laps_target` laps,
/// a collision, or the time limit.
pub fn run_single_agent<D: Driver>(
    driver: &mut D,
    track_id: &str,
    track: &TrackModel,
    set: &RacelineSet,
    raceline: RacelineId,
    laps_target: usize,
    eta: f64,
    settings: &EvalSettings,
) -> Result<(SingleAgentReport, RolloutResult), ScenarioError> {
    let sc = Scenario {
        id: 0,
        ego: Spawn { raceline, s: 0.0 },
        leader: None,
        leader_discount: 1.0,
        seed: crate::seed::derive_seed(settings.seed, "single", 0),
    };
    let limit = laps_target as f64 * track.total_length() / settings.min_mean_speed;
    let mut cfg = RolloutConfig::new(settings.sim, settings.leader, limit);
    cfg.noise_eta = eta;
    cfg.max_laps = Some(laps_target as f64);
    let r = crate::scenario::rollout(&sc, track, set, driver, &cfg)?;
    Ok((SingleAgentReport::from_rollout(track_id, track, laps_target, &r), r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H2HReport {
    pub track_id: String,
    pub n: usize,
    pub car_following: usize,
    pub overtaking: usize,
    pub collision: usize,
    pub overtake_rate: f64,
    pub safety_rate: f64,
}

impl H2HReport {
    pub fn from_counts(track_id: &str, c: OutcomeCounts) -> Self {
        let n = c.total();
        let pct = |k: usize| if n == 0 { 0.0 } else { (k * 100) as f64 / n as f64 };
        Self {
            track_id: track_id.to_string(),
            n,
            car_following: c.car_following,
            overtaking: c.overtaking,
            collision: c.collision,
            overtake_rate: pct(c.overtaking),
            safety_rate: pct(n - c.collision),
        }
    }
}

pub fn run_h2h<D, F>(
    make_driver: F,
    track_id: &str,
    track: &TrackModel,
    set: &RacelineSet,
    scenarios: &[Scenario],
    duration: f64,
    eta: f64,
    settings: &EvalSettings,
) -> Result<(H2HReport, Vec<RolloutResult>), ScenarioError>
where
    D: Driver,
    F: Fn() -> D + Sync,
{
    let mut cfg = RolloutConfig::new(settings.sim, settings.leader, duration);
    cfg.noise_eta = eta;
    let results = run_scenarios(scenarios, track, set, &cfg, settings.workers, make_driver)?;
    let mut counts = OutcomeCounts::default();
    for r in &results {
        counts.add(r.record.outcome);
    }
    Ok((H2HReport::from_counts(track_id, counts), results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevelReport {
    pub eta: f64,
    pub single: Option<SingleAgentReport>,
    pub h2h: Option<H2HReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub levels: Vec<NoiseLevelReport>,
}

/// What a noise sweep should run at each level.
pub struct SweepPlan<'a> {
    pub track_id: &'a str,
    pub track: &'a TrackModel,
    pub set: &'a RacelineSet,
    pub single: Option<(RacelineId, usize)>,
    pub h2h: Option<(&'a [Scenario], f64)>,
}

pub fn run_noise_sweep<D, F>(
    make_driver: F,
    plan: &SweepPlan<'_>,
    eta_levels: &[f64],
    settings: &EvalSettings,
) -> Result<NoiseSweepReport, ScenarioError>
where
    D: Driver,
    F: Fn() -> D + Sync,
{
    if eta_levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ScenarioError::InvalidConfig("noise levels must be strictly increasing".into()));
    }
    let mut levels = Vec::with_capacity(eta_levels.len());
    for &eta in eta_levels {
        let single = match plan.single {
            Some((line, laps)) => {
                let mut d = make_driver();
                Some(run_single_agent(&mut d, plan.track_id, plan.track, plan.set, line, laps, eta, settings)?.0)
            }
            None => None,
        };
        let h2h = match plan.h2h {
            Some((scs, duration)) => {
                Some(run_h2h(&make_driver, plan.track_id, plan.track, plan.set, scs, duration, eta, settings)?.0)
            }
            None => None,
        };
        levels.push(NoiseLevelReport { eta, single, h2h });
    }
    Ok(NoiseSweepReport { levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision {s:?} (expected f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub precision: Precision,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub samples: usize,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
}

pub const LATENCY_WARMUP: usize = 100;

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times single forward steps on random scans, discarding the first
/// [`LATENCY_WARMUP`] calls.
pub fn bench_latency(
    params: &PolicyParameters,
    cfg: &PolicyConfig,
    n_samples: usize,
    precision: Precision,
    seed: u64,
) -> LatencyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scans: Vec<Vec<f64>> = (0..32).map(|_| (0..cfg.n_beams).map(|_| rng.gen_range(0.0..30.0)).collect()).collect();
    let speeds: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..8.0)).collect();
    let mut times = Vec::with_capacity(n_samples);
    match precision {
        Precision::F64 => {
            let mut h = HiddenState::zeros(cfg);
            for i in 0..LATENCY_WARMUP + n_samples {
                let t0 = Instant::now();
                let (a, h2) = forward_step(&scans[i % 32], speeds[i % 32], &h, params, cfg, false).expect("shapes checked");
                let dt = t0.elapsed();
                std::hint::black_box(a);
                h = h2;
                if i >= LATENCY_WARMUP {
                    times.push(dt.as_secs_f64() * 1e3);
                }
            }
        }
        Precision::F32 => {
            let mut fast = FastPolicy::new(params, cfg);
            let scans32: Vec<Vec<f32>> = scans.iter().map(|s| s.iter().map(|&x| x as f32).collect()).collect();
            let mut h = vec![0f32; cfg.hidden_dim()];
            for i in 0..LATENCY_WARMUP + n_samples {
                let t0 = Instant::now();
                let a = fast.step(&scans32[i % 32], speeds[i % 32] as f32, &mut h);
                let dt = t0.elapsed();
                std::hint::black_box(a);
                if i >= LATENCY_WARMUP {
                    times.push(dt.as_secs_f64() * 1e3);
                }
            }
        }
    }
    let mean_ms = times.iter().sum::<f64>() / times.len().max(1) as f64;
    times.sort_by(f64::total_cmp);
    LatencyReport {
        precision,
        input_dim: cfg.input_dim(),
        hidden_dim: cfg.hidden_dim(),
        samples: times.len(),
        median_ms: percentile(&times, 0.5),
        p99_ms: percentile(&times, 0.99),
        max_ms: *times.last().unwrap_or(&0.0),
        mean_ms,
    }
}

pub fn write_json<T: Serialize, W: Write>(value: &T, mut out: W) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")
}

fn opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

pub const SINGLE_CSV_HEADER: &str = "Track,Mean Speed (m/s),Speed Variance ((m/s)^2),Mean Laptime (s),Laptime Variance (s^2),Laps Completed";
pub const H2H_CSV_HEADER: &str = "Track,Car Following,Overtaking,Collision,Overtake Rate (%),Safety Rate (%)";

fn single_row(r: &SingleAgentReport) -> String {
    format!(
        "{},{:.4},{:.4},{},{},{:.2}",
        r.track_id,
        r.mean_speed,
        r.speed_variance,
        opt(r.mean_laptime),
        opt(r.laptime_variance),
        r.laps_completed
    )
}

fn h2h_row(r: &H2HReport) -> String {
    format!(
        "{},{},{},{},{:.1},{:.1}",
        r.track_id, r.car_following, r.overtaking, r.collision, r.overtake_rate, r.safety_rate
    )
}

pub fn write_single_csv<W: Write>(reports: &[SingleAgentReport], mut out: W) -> io::Result<()> {
    writeln!(out, "{SINGLE_CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", single_row(r))?;
    }
    Ok(())
}

pub fn write_h2h_csv<W: Write>(reports: &[H2HReport], mut out: W) -> io::Result<()> {
    writeln!(out, "{H2H_CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", h2h_row(r))?;
    }
    Ok(())
}

/// One CSV per suite; levels without that suite are skipped.
pub fn write_noise_csv<W: Write>(report: &NoiseSweepReport, single: bool, mut out: W) -> io::Result<()> {
    let header = if single { SINGLE_CSV_HEADER } else { H2H_CSV_HEADER };
    writeln!(out, "Noise (%),{header}")?;
    for l in &report.levels {
        let row = if single { l.single.as_ref().map(single_row) } else { l.h2h.as_ref().map(h2h_row) };
        if let Some(row) = row {
            writeln!(out, "{:.0},{row}", l.eta * 100.0)?;
        }
    }
    Ok(())
}

pub fn write_latency_csv<W: Write>(reports: &[LatencyReport], mut out: W) -> io::Result<()> {
    writeln!(out, "precision,input_dim,hidden_dim,samples,median_ms,p99_ms,max_ms,mean_ms")?;
    for r in reports {
        let p = match r.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        writeln!(
            out,
            "{p},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.input_dim, r.hidden_dim, r.samples, r.median_ms, r.p99_ms, r.max_ms, r.mean_ms
        )?;
    }
    Ok(())
}

const EGO_COLOR: &str = "#1f5fd6";
const LEADER_COLOR: &str = "#d62728";

struct Canvas {
    min: Vec2,
    max: Vec2,
}

impl Canvas {
    fn around(track: &TrackModel) -> Self {
        let pts = track.left_boundary().iter().chain(track.right_boundary());
        let (mut min, mut max) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in pts {
            min = Vec2::new(min.x.min(p.x), min.y.min(p.y));
            max = Vec2::new(max.x.max(p.x), max.y.max(p.y));
        }
        let pad = 1.0;
        Self { min: min - Vec2::new(pad, pad), max: max + Vec2::new(pad, pad) }
    }

    /// World to SVG coordinates (y flipped).
    fn map(&self, p: Vec2) -> (f64, f64) {
        (p.x - self.min.x, self.max.y - p.y)
    }

    fn points(&self, pts: impl IntoIterator<Item = Vec2>) -> String {
        let mut s = String::new();
        for p in pts {
            let (x, y) = self.map(p);
            let _ = write!(s, "{x:.3},{y:.3} ");
        }
        s.trim_end().to_string()
    }

    fn open(&self, doc: &mut String) {
        let (w, h) = (self.max.x - self.min.x, self.max.y - self.min.y);
        let _ = writeln!(
            doc,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.3} {h:.3}" width="{:.0}" height="{:.0}">"#,
            w * 20.0,
            h * 20.0
        );
        let _ = writeln!(doc, r#"<rect x="0" y="0" width="{w:.3}" height="{h:.3}" fill="white"/>"#);
    }

    fn track(&self, doc: &mut String, track: &TrackModel) {
        for b in [track.left_boundary(), track.right_boundary()] {
            let _ = writeln!(
                doc,
                r#"<polygon points="{}" fill="none" stroke="black" stroke-width="0.06"/>"#,
                self.points(b.iter().copied())
            );
        }
    }
}

/// Track outline with optional racelines.
pub fn render_track(track: &TrackModel, set: Option<&RacelineSet>) -> String {
    let c = Canvas::around(track);
    let mut doc = String::new();
    c.open(&mut doc);
    c.track(&mut doc, track);
    if let Some(set) = set {
        for line in set.iter() {
            let _ = writeln!(
                doc,
                r##"<polygon points="{}" fill="none" stroke="#888888" stroke-width="0.04" stroke-dasharray="0.2 0.15"/>"##,
                c.points(line.points().iter().map(|p| p.pos()))
            );
        }
    }
    doc.push_str("</svg>\n");
    doc
}

/// Boundaries, ego (blue) and leader (red) paths, footprints once per second and
/// a marker at the final pose of a collided agent.
pub fn render_episode(trace: &EpisodeTrace, track: &TrackModel, sim: &SimConfig, label: &str) -> String {
    let c = Canvas::around(track);
    let mut doc = String::new();
    c.open(&mut doc);
    c.track(&mut doc, track);
    for (agent, color) in [(0usize, EGO_COLOR), (1, LEADER_COLOR)] {
        let rows: Vec<_> = trace.agent(agent).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(
            doc,
            r#"<polyline class="agent{agent}" points="{}" fill="none" stroke="{color}" stroke-width="0.08"/>"#,
            c.points(rows.iter().map(|r| r.state.pos()))
        );
        let mut next_t = 0.0;
        for r in &rows {
            if r.t + 1e-9 >= next_t {
                let fp = r.state.footprint(sim);
                let _ = writeln!(
                    doc,
                    r#"<polygon points="{}" fill="{color}" fill-opacity="0.25" stroke="{color}" stroke-width="0.02"/>"#,
                    c.points(fp.corners())
                );
                next_t += 1.0;
            }
        }
        let last = rows[rows.len() - 1];
        if last.collided {
            let (x, y) = c.map(last.state.pos());
            let _ = writeln!(
                doc,
                r#"<circle class="collision" cx="{x:.3}" cy="{y:.3}" r="0.5" fill="none" stroke="{color}" stroke-width="0.1"/>"#
            );
        }
    }
    let label = label.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let _ = writeln!(doc, r#"<text x="0.5" y="1.2" font-size="0.9" font-family="sans-serif">{label}</text>"#);
    doc.push_str("</svg>\n");
    doc
}
