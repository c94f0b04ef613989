//! Overtaking scenarios: spawn enumeration, closed-loop rollouts, outcome
//! classification, and dataset assembly.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{expert_action, leader_command, ExpertConfig, Role};
use crate::seed::derive_seed;
use crate::sim::{apply_noise, check_collision, scan_lidar, EpisodeTrace, LidarScan, SimConfig, SimError, VehicleCommand, VehicleState, WorldState, EGO, OPPONENT};
use crate::track::{Raceline, RacelineConfig, RacelineError, RacelineId, TrackModel};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("every spawn pose collides with the track")]
    NoValidSpawn,
    #[error("raceline {0} was not generated for this track")]
    UnknownRaceline(RacelineId),
    #[error("every episode in the pool ended in a collision")]
    EmptyDataset,
    #[error("malformed episode file: {0}")]
    Format(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Raceline(#[from] RacelineError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Rate at which the ego is queried and frames are recorded.
pub const CONTROL_HZ: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Raceline ids; scenarios use every (ego, leader) pair.
    pub racelines: Vec<RacelineId>,
    pub k_positions: usize,
    /// Spawn points sit at `(i + spawn_phase) · L / k`.
    pub spawn_phase: f64,
    pub d_gap: f64,
    pub v_ell_discount: f64,
    pub duration: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            racelines: vec![RacelineId::LEFT, RacelineId::CENTER, RacelineId::RIGHT],
            k_positions: 12,
            spawn_phase: 0.0,
            d_gap: 3.0,
            v_ell_discount: 0.6,
            duration: 8.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, sim: &SimConfig) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidConfig(m));
        if self.k_positions == 0 {
            return bad("k_positions must be at least 1".into());
        }
        if self.racelines.is_empty() {
            return bad("at least one raceline is required".into());
        }
        if !(self.d_gap > sim.veh_length) {
            return bad(format!("d_gap {} must exceed the vehicle length {}", self.d_gap, sim.veh_length));
        }
        if !(self.v_ell_discount > 0.0 && self.v_ell_discount <= 1.0) {
            return bad("v_ell_discount must lie in (0, 1]".into());
        }
        if !(self.duration > 0.0) {
            return bad("duration must be positive".into());
        }
        if !(0.0..1.0).contains(&self.spawn_phase) {
            return bad("spawn_phase must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Racelines generated for one track, looked up by id.
#[derive(Debug, Clone)]
pub struct RacelineSet {
    lines: Vec<Raceline>,
}

impl RacelineSet {
    pub fn generate(track: &TrackModel, ids: &[RacelineId], cfg: &RacelineConfig) -> Result<Self, RacelineError> {
        let mut lines: Vec<Raceline> = Vec::new();
        for &id in ids {
            if !lines.iter().any(|l| l.id() == id) {
                lines.push(Raceline::generate(track, id, cfg)?);
            }
        }
        Ok(Self { lines })
    }

    pub fn get(&self, id: RacelineId) -> Result<&Raceline, ScenarioError> {
        self.lines.iter().find(|l| l.id() == id).ok_or(ScenarioError::UnknownRaceline(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Raceline> {
        self.lines.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spawn {
    pub raceline: RacelineId,
    /// Arc length along the spawn raceline.
    pub s: f64,
}

impl Spawn {
    pub fn pose(&self, set: &RacelineSet) -> Result<VehicleState, ScenarioError> {
        let f = set.get(self.raceline)?.frame_at(self.s);
        Ok(VehicleState { x: f.pos.x, y: f.pos.y, theta: f.heading, v: 0.0, delta: 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u64,
    pub ego: Spawn,
    /// Absent for single-agent runs.
    pub leader: Option<Spawn>,
    pub leader_discount: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn initial_world<'t>(
        &self,
        track: &'t TrackModel,
        set: &RacelineSet,
        sim: &SimConfig,
    ) -> Result<WorldState<'t>, ScenarioError> {
        let mut agents = vec![self.ego.pose(set)?];
        if let Some(l) = &self.leader {
            agents.push(l.pose(set)?);
        }
        Ok(WorldState::new(track, agents, sim))
    }
}

/// Every (spawn point, ego raceline, leader raceline) combination; spawns that
/// collide at t = 0 are skipped and counted.
pub fn enumerate_scenarios(
    cfg: &ScenarioConfig,
    track: &TrackModel,
    set: &RacelineSet,
    sim: &SimConfig,
) -> Result<(Vec<Scenario>, usize), ScenarioError> {
    cfg.validate(sim)?;
    if cfg.d_gap >= track.total_length() {
        return Err(ScenarioError::InvalidConfig(format!(
            "d_gap {} exceeds the track length {:.3}",
            cfg.d_gap,
            track.total_length()
        )));
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for i in 0..cfg.k_positions {
        for &ego_id in &cfg.racelines {
            let ego_line = set.get(ego_id)?;
            let s = (i as f64 + cfg.spawn_phase) * ego_line.length() / cfg.k_positions as f64;
            for &leader_id in &cfg.racelines {
                let leader_line = set.get(leader_id)?;
                let (ls, _) = leader_line.project(ego_line.position_at(s))?;
                let id = out.len() as u64 + skipped as u64;
                let sc = Scenario {
                    id,
                    ego: Spawn { raceline: ego_id, s },
                    leader: Some(Spawn { raceline: leader_id, s: leader_line.wrap_s(ls + cfg.d_gap) }),
                    leader_discount: cfg.v_ell_discount,
                    seed: derive_seed(cfg.seed, "scenario", id),
                };
                let world = sc.initial_world(track, set, sim)?;
                if check_collision(&world, sim).iter().any(|&c| c) {
                    skipped += 1;
                } else {
                    out.push(sc);
                }
            }
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} scenarios whose spawn poses collide");
    }
    if out.is_empty() {
        return Err(ScenarioError::NoValidSpawn);
    }
    Ok((out, skipped))
}

/// What the ego sees at a query instant.
pub struct Observation<'a> {
    pub world: &'a WorldState<'a>,
    /// Scan after any dropout has been applied.
    pub scan: &'a LidarScan,
    pub ego_v: f64,
}

/// Source of ego commands, queried at [`CONTROL_HZ`].
pub trait Driver {
    fn reset(&mut self, scenario: &Scenario) -> Result<(), ScenarioError>;
    fn act(&mut self, obs: &Observation<'_>) -> VehicleCommand;
}

/// The lattice expert following the scenario's ego raceline.
pub struct ExpertDriver<'a> {
    set: &'a RacelineSet,
    cfg: ExpertConfig,
    line: Option<&'a Raceline>,
}

impl<'a> ExpertDriver<'a> {
    pub fn new(set: &'a RacelineSet, cfg: ExpertConfig) -> Self {
        Self { set, cfg, line: None }
    }
}

impl Driver for ExpertDriver<'_> {
    fn reset(&mut self, scenario: &Scenario) -> Result<(), ScenarioError> {
        self.line = Some(self.set.get(scenario.ego.raceline)?);
        Ok(())
    }

    fn act(&mut self, obs: &Observation<'_>) -> VehicleCommand {
        let line = self.line.expect("driver used before reset");
        expert_action(obs.world, EGO, Role::Ego, line, &self.cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    CarFollowing,
    Overtaking,
    Collision,
}

impl Outcome {
    fn code(self) -> u8 {
        match self {
            Outcome::CarFollowing => 0,
            Outcome::Overtaking => 1,
            Outcome::Collision => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Outcome::CarFollowing, Outcome::Overtaking, Outcome::Collision].get(c as usize).copied()
    }
}

/// Collision takes precedence; otherwise the ego must be strictly ahead in
/// unwrapped centerline progress.
pub fn classify_outcome(collided: &[bool], ego_progress: f64, leader_progress: f64) -> Outcome {
    if collided.iter().any(|&c| c) {
        Outcome::Collision
    } else if ego_progress > leader_progress {
        Outcome::Overtaking
    } else {
        Outcome::CarFollowing
    }
}

/// One 10 Hz sample: raw ranges, ego speed and the command issued.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub scan: Vec<f32>,
    pub ego_v: f32,
    pub v_cmd: f32,
    pub delta_cmd: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub scenario_id: u64,
    pub seed: u64,
    pub frames: Vec<Frame>,
    pub outcome: Outcome,
    pub duration_actual: f64,
}

/// Per-rollout knobs beyond the scenario itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub sim: SimConfig,
    pub leader: ExpertConfig,
    pub duration: f64,
    /// Fraction of beams zeroed at every query.
    pub noise_eta: f64,
    /// Stop once the ego has covered this many laps.
    pub max_laps: Option<f64>,
    pub record_trace: bool,
}

impl RolloutConfig {
    pub fn new(sim: SimConfig, leader: ExpertConfig, duration: f64) -> Self {
        Self { sim, leader, duration, noise_eta: 0.0, max_laps: None, record_trace: false }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub record: EpisodeRecord,
    pub trace: Option<EpisodeTrace>,
    pub ego_progress: f64,
    pub leader_progress: f64,
    /// Mean and population variance of the ego speed over all simulation steps.
    pub ego_mean_speed: f64,
    pub ego_speed_var: f64,
    /// Times at which the ego completed each lap from its spawn point.
    pub lap_times: Vec<f64>,
}

/// Centerline progress accumulated step by step so laps are unwrapped.
struct ProgressTracker {
    s: f64,
    total: f64,
}

impl ProgressTracker {
    fn new(track: &TrackModel, p: crate::geom::Vec2) -> Self {
        Self { s: track.project(p).0, total: 0.0 }
    }

    fn update(&mut self, track: &TrackModel, p: crate::geom::Vec2) {
        let s = track.project(p).0;
        self.total += track.arc_delta(self.s, s);
        self.s = s;
    }
}

pub fn rollout(
    scenario: &Scenario,
    track: &TrackModel,
    set: &RacelineSet,
    driver: &mut dyn Driver,
    cfg: &RolloutConfig,
) -> Result<RolloutResult, ScenarioError> {
    let sim = &cfg.sim;
    let mut world = scenario.initial_world(track, set, sim)?;
    let leader_line = match &scenario.leader {
        Some(l) => Some(set.get(l.raceline)?),
        None => None,
    };
    let leader_cfg = ExpertConfig { leader_speed_discount: scenario.leader_discount, ..cfg.leader };
    driver.reset(scenario)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.seed, "noise", 0));

    let n_steps = (cfg.duration / sim.dt).round() as u64;
    let every = sim.steps_per(CONTROL_HZ) as u64;
    let mut progress: Vec<ProgressTracker> = world.agents.iter().map(|a| ProgressTracker::new(track, a.pos())).collect();
    let mut trace = cfg.record_trace.then(EpisodeTrace::default);
    if let Some(tr) = trace.as_mut() {
        tr.record(&world);
    }
    let mut frames = Vec::new();
    let mut ego_cmd = VehicleCommand::BRAKE;
    let mut speed_sum = 0.0;
    let mut speed_sq = 0.0;
    let mut lap_times = Vec::new();
    for step in 0..n_steps {
        if step % every == 0 {
            let mut scan = scan_lidar(&world, EGO, sim);
            if cfg.noise_eta > 0.0 {
                apply_noise(&mut scan, cfg.noise_eta, &mut rng);
            }
            let ego_v = world.agents[EGO].v;
            ego_cmd = driver.act(&Observation { world: &world, scan: &scan, ego_v });
            frames.push(Frame {
                scan: scan.to_f32(),
                ego_v: ego_v as f32,
                v_cmd: ego_cmd.v_cmd as f32,
                delta_cmd: ego_cmd.delta_cmd as f32,
            });
        }
        let mut cmds = vec![ego_cmd];
        if let Some(line) = leader_line {
            cmds.push(leader_command(&world.agents[OPPONENT], line, &leader_cfg));
        }
        world.step(&cmds, sim)?;
        let v = world.agents[EGO].v;
        speed_sum += v;
        speed_sq += v * v;
        for (p, a) in progress.iter_mut().zip(&world.agents) {
            p.update(track, a.pos());
        }
        if progress[EGO].total >= (lap_times.len() + 1) as f64 * track.total_length() {
            lap_times.push(world.t());
        }
        if let Some(tr) = trace.as_mut() {
            tr.record(&world);
        }
        if world.any_collision() {
            break;
        }
        if cfg.max_laps.is_some_and(|laps| progress[EGO].total >= laps * track.total_length()) {
            break;
        }
    }
    let ego_progress = progress[EGO].total;
    let leader_progress = progress.get(OPPONENT).map_or(f64::NEG_INFINITY, |p| p.total);
    let outcome = classify_outcome(&world.collided, ego_progress, leader_progress);
    let steps = world.steps().max(1) as f64;
    let mean = speed_sum / steps;
    Ok(RolloutResult {
        record: EpisodeRecord {
            scenario_id: scenario.id,
            seed: scenario.seed,
            frames,
            outcome,
            duration_actual: world.t(),
        },
        trace,
        ego_progress,
        leader_progress,
        ego_mean_speed: mean,
        ego_speed_var: (speed_sq / steps - mean * mean).max(0.0),
        lap_times,
    })
}

/// Rolls out every scenario on up to `workers` threads, each with a fresh driver.
/// Results come back in scenario order regardless of scheduling.
pub fn run_scenarios<D, F>(
    scenarios: &[Scenario],
    track: &TrackModel,
    set: &RacelineSet,
    cfg: &RolloutConfig,
    workers: usize,
    make_driver: F,
) -> Result<Vec<RolloutResult>, ScenarioError>
where
    D: Driver,
    F: Fn() -> D + Sync,
{
    use rayon::prelude::*;
    let run = |sc: &Scenario| rollout(sc, track, set, &mut make_driver(), cfg);
    if workers <= 1 {
        return scenarios.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ScenarioError::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| scenarios.par_iter().map(run).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub car_following: usize,
    pub overtaking: usize,
    pub collision: usize,
}

impl OutcomeCounts {
    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::CarFollowing => self.car_following += 1,
            Outcome::Overtaking => self.overtaking += 1,
            Outcome::Collision => self.collision += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.car_following + self.overtaking + self.collision
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<EpisodeRecord>,
    pub pool_counts: OutcomeCounts,
    pub total_samples: usize,
}

/// Keeps the collision-free episodes.
pub fn build_dataset(pool: Vec<EpisodeRecord>) -> Result<Dataset, ScenarioError> {
    let mut pool_counts = OutcomeCounts::default();
    for e in &pool {
        pool_counts.add(e.outcome);
    }
    let episodes: Vec<EpisodeRecord> = pool.into_iter().filter(|e| e.outcome != Outcome::Collision).collect();
    if episodes.is_empty() {
        return Err(ScenarioError::EmptyDataset);
    }
    let total_samples = episodes.iter().map(|e| e.frames.len()).sum();
    Ok(Dataset { episodes, pool_counts, total_samples })
}

const EPISODE_MAGIC: &[u8; 4] = b"E2RE";
const EPISODE_VERSION: u32 = 1;

/// Writes the header (magic, version, scenario id, seed, outcome, beam count,
/// frame count, duration) followed by little-endian f32 frames.
pub fn write_episode<W: Write>(ep: &EpisodeRecord, mut out: W) -> io::Result<()> {
    let n_beams = ep.frames.first().map_or(0, |f| f.scan.len()) as u32;
    out.write_all(EPISODE_MAGIC)?;
    out.write_all(&EPISODE_VERSION.to_le_bytes())?;
    out.write_all(&ep.scenario_id.to_le_bytes())?;
    out.write_all(&ep.seed.to_le_bytes())?;
    out.write_all(&[ep.outcome.code()])?;
    out.write_all(&n_beams.to_le_bytes())?;
    out.write_all(&(ep.frames.len() as u32).to_le_bytes())?;
    out.write_all(&ep.duration_actual.to_le_bytes())?;
    for f in &ep.frames {
        for &r in &f.scan {
            out.write_all(&r.to_le_bytes())?;
        }
        for x in [f.ego_v, f.v_cmd, f.delta_cmd] {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], ScenarioError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ScenarioError::Format("truncated episode".into()),
        _ => ScenarioError::Io(e),
    })?;
    Ok(b)
}

pub fn read_episode<R: Read>(mut r: R) -> Result<EpisodeRecord, ScenarioError> {
    if &read_array::<4, _>(&mut r)? != EPISODE_MAGIC {
        return Err(ScenarioError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != EPISODE_VERSION {
        return Err(ScenarioError::Format(format!("unsupported version {version}")));
    }
    let scenario_id = u64::from_le_bytes(read_array(&mut r)?);
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    let [code] = read_array::<1, _>(&mut r)?;
    let outcome = Outcome::from_code(code).ok_or_else(|| ScenarioError::Format(format!("bad outcome code {code}")))?;
    let n_beams = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let n_frames = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let duration_actual = f64::from_le_bytes(read_array(&mut r)?);
    let mut buf = vec![0u8; (n_beams + 3) * 4];
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        r.read_exact(&mut buf).map_err(|_| ScenarioError::Format("truncated episode".into()))?;
        let vals: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        frames.push(Frame {
            scan: vals[..n_beams].to_vec(),
            ego_v: vals[n_beams],
            v_cmd: vals[n_beams + 1],
            delta_cmd: vals[n_beams + 2],
        });
    }
    Ok(EpisodeRecord { scenario_id, seed, frames, outcome, duration_actual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub scenario_id: u64,
    pub outcome: Outcome,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episodes: Vec<ManifestEntry>,
    pub pool_counts: OutcomeCounts,
    pub total_samples: usize,
}

pub const MANIFEST_FILE: &str = "dataset.json";

/// Writes one `.bin` file per episode plus the JSON manifest into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf, ScenarioError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.episodes.len());
    for ep in &ds.episodes {
        let file = format!("episode_{:06}.bin", ep.scenario_id);
        write_episode(ep, BufWriter::new(File::create(dir.join(&file))?))?;
        entries.push(ManifestEntry { file, scenario_id: ep.scenario_id, outcome: ep.outcome, frames: ep.frames.len() });
    }
    let manifest = DatasetManifest { episodes: entries, pool_counts: ds.pool_counts, total_samples: ds.total_samples };
    let path = dir.join(MANIFEST_FILE);
    let mut f = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(path)
}

/// Loads a dataset from its manifest path or the directory holding it.
pub fn load_dataset(path: &Path) -> Result<Dataset, ScenarioError> {
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(&manifest_path)?))?;
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for e in &manifest.episodes {
        let ep = read_episode(BufReader::new(File::open(dir.join(&e.file))?))?;
        if ep.frames.len() != e.frames {
            return Err(ScenarioError::Format(format!("{}: manifest lists {} frames, file has {}", e.file, e.frames, ep.frames.len())));
        }
        episodes.push(ep);
    }
    let total_samples = episodes.iter().map(|e| e.frames.len()).sum();
    if total_samples != manifest.total_samples {
        return Err(ScenarioError::Format("manifest total_samples disagrees with episode files".into()));
    }
    Ok(Dataset { episodes, pool_counts: manifest.pool_counts, total_samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::shapes;

    fn setup() -> (TrackModel, RacelineSet) {
        let t = shapes::stadium(70.0, 3.5, 0.25).unwrap();
        let set = RacelineSet::generate(&t, &[RacelineId::CENTER, RacelineId::LEFT, RacelineId::RIGHT], &RacelineConfig::default()).unwrap();
        (t, set)
    }

    #[test]
    fn even_spawn_spacing() {
        let (t, set) = setup();
        let cfg = ScenarioConfig { racelines: vec![RacelineId::CENTER], k_positions: 4, ..Default::default() };
        let (sc, skipped) = enumerate_scenarios(&cfg, &t, &set, &SimConfig::default()).unwrap();
        assert_eq!((sc.len(), skipped), (4, 0));
        let len = set.get(RacelineId::CENTER).unwrap().length();
        for (i, s) in sc.iter().enumerate() {
            assert!((s.ego.s - i as f64 * len / 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_product_of_racelines() {
        let (t, set) = setup();
        let cfg = ScenarioConfig { k_positions: 2, ..Default::default() };
        let (sc, _) = enumerate_scenarios(&cfg, &t, &set, &SimConfig::default()).unwrap();
        assert_eq!(sc.len(), 18);
    }

    #[test]
    fn gap_longer_than_track_rejected() {
        let (t, set) = setup();
        let cfg = ScenarioConfig { d_gap: 500.0, ..Default::default() };
        assert!(matches!(enumerate_scenarios(&cfg, &t, &set, &SimConfig::default()), Err(ScenarioError::InvalidConfig(_))));
    }

    #[test]
    fn outcome_rules() {
        assert_eq!(classify_outcome(&[false, false], 52.1, 49.3), Outcome::Overtaking);
        assert_eq!(classify_outcome(&[true, false], 52.1, 49.3), Outcome::Collision);
        assert_eq!(classify_outcome(&[false, true], 10.0, 49.3), Outcome::Collision);
        assert_eq!(classify_outcome(&[false, false], 49.3, 49.3), Outcome::CarFollowing);
        assert_eq!(classify_outcome(&[false, false], 40.0, 49.3), Outcome::CarFollowing);
    }

    fn record(outcome: Outcome, n: usize) -> EpisodeRecord {
        let frames = (0..n)
            .map(|i| Frame { scan: vec![i as f32; 4], ego_v: 1.5, v_cmd: 2.0, delta_cmd: -0.1 })
            .collect();
        EpisodeRecord { scenario_id: n as u64, seed: 9, frames, outcome, duration_actual: n as f64 / 10.0 }
    }

    #[test]
    fn dataset_filters_collisions() {
        let pool = vec![record(Outcome::CarFollowing, 5), record(Outcome::Collision, 3), record(Outcome::Overtaking, 7)];
        let ds = build_dataset(pool).unwrap();
        assert_eq!(ds.episodes.len(), 2);
        assert_eq!(ds.total_samples, 12);
        assert_eq!(ds.pool_counts, OutcomeCounts { car_following: 1, overtaking: 1, collision: 1 });
        assert!(matches!(build_dataset(vec![record(Outcome::Collision, 2)]), Err(ScenarioError::EmptyDataset)));
    }

    #[test]
    fn episode_round_trip() {
        let ep = record(Outcome::Overtaking, 6);
        let mut buf = Vec::new();
        write_episode(&ep, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 1 + 4 + 4 + 8 + 6 * 7 * 4);
        assert_eq!(read_episode(&buf[..]).unwrap(), ep);
        assert!(matches!(read_episode(&buf[..buf.len() - 3]), Err(ScenarioError::Format(_))));
    }
}
