//! The `e2r` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 track error,
//! 3 scenario or collection error, 4 training error, 5 evaluation error.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{KitConfig, RunManifest};
use crate::eval::{self, EvalSettings, Precision, SweepPlan};
use crate::policy::{init_params, load_checkpoint, save_checkpoint, PolicyConfig, PolicyParameters};
use crate::scenario::{self, ExpertDriver, RacelineSet, RolloutConfig, Scenario, ScenarioConfig};
use crate::seed::derive_seed;
use crate::track::shapes::{self, TrackShape};
use crate::track::{load_track, TrackModel};
use crate::trainer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_TRACK: i32 = 2;
pub const EXIT_SCENARIO: i32 = 3;
pub const EXIT_TRAIN: i32 = 4;
pub const EXIT_EVAL: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "e2r", version, about = "Head-to-head racing kit: tracks, expert data, training and evaluation")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for all artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Parallel episode rollouts.
    #[arg(long, global = true, env = "E2R_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or inspect tracks.
    #[command(subcommand)]
    Track(TrackCmd),
    /// Roll out the expert over the scenario grid and store the filtered dataset.
    Collect(CollectArgs),
    /// Train a policy on a collected dataset.
    Train(TrainArgs),
    /// Run an evaluation suite.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Re-run one scenario with tracing and draw it.
    Render(RenderArgs),
}

#[derive(Debug, Subcommand)]
pub enum TrackCmd {
    /// Write a built-in track with its racelines and a preview.
    Gen(TrackGenArgs),
    /// Print geometry of a track CSV or the configured track.
    Info(TrackInfoArgs),
}

#[derive(Debug, Args)]
pub struct TrackGenArgs {
    #[arg(long)]
    pub shape: Option<TrackShape>,
    #[arg(long)]
    pub length: Option<f64>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub spacing: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrackInfoArgs {
    /// Track CSV; defaults to the configured track.
    #[arg(long)]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    /// Spawn positions per raceline pair.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub track: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Drop the ego-speed input.
    LidarOnly,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest; defaults to the configured path under --out.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub multiplier: Option<usize>,
    #[arg(long, value_enum)]
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Args, Clone)]
pub struct PolicyArgs {
    /// Checkpoint; defaults to the configured path under --out.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub track: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Ego alone for a number of laps.
    Single {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        laps: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        /// Also draw the run.
        #[arg(long)]
        svg: bool,
    },
    /// Held-out head-to-head scenarios against the expert leader.
    H2h {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        scenarios: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long)]
        svg: bool,
    },
    /// Single-agent and head-to-head suites at several LiDAR dropout levels.
    Noise {
        #[command(flatten)]
        policy: PolicyArgs,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[arg(long)]
        scenarios: Option<usize>,
        #[arg(long)]
        laps: Option<usize>,
    },
    /// Time single forward steps.
    Latency {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Randomly initialised network at the configured policy size instead of a checkpoint.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DriverKind {
    Expert,
    Policy,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Scenario id from the training grid.
    #[arg(long, default_value_t = 0)]
    pub scenario: u64,
    #[arg(long, value_enum, default_value = "expert")]
    pub driver: DriverKind,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

/// A failure tagged with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

trait Tag<T> {
    fn code(self, code: i32) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn code(self, code: i32) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

/// Parses `args` and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

struct Run<'a> {
    cli: &'a Cli,
    cfg: KitConfig,
    started: String,
}

impl Run<'_> {
    fn out(&self) -> &Path {
        &self.cli.out
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.resolve(self.out(), p)
    }

    fn write(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.out().join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn settings(&self) -> EvalSettings {
        EvalSettings {
            sim: self.cfg.sim,
            leader: self.cfg.expert,
            workers: self.cli.workers,
            seed: derive_seed(self.cfg.seed, "eval", 0),
            min_mean_speed: self.cfg.eval.min_mean_speed,
        }
    }

    fn track(&self, file: Option<&Path>) -> anyhow::Result<TrackModel> {
        let t = &self.cfg.track;
        match file.or(t.file.as_deref()) {
            Some(path) => {
                let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                load_track(f, &t.parse).with_context(|| format!("loading {}", path.display()))
            }
            None => Ok(shapes::generate(t.shape, t.length, t.width, t.spacing)?),
        }
    }

    fn racelines(&self, track: &TrackModel) -> anyhow::Result<RacelineSet> {
        let mut ids = self.cfg.scenario.racelines.clone();
        if !ids.contains(&self.cfg.eval.single_raceline) {
            ids.push(self.cfg.eval.single_raceline);
        }
        Ok(RacelineSet::generate(track, &ids, &self.cfg.raceline)?)
    }

    fn checkpoint(&self, p: Option<&Path>) -> anyhow::Result<(PolicyParameters, PolicyConfig)> {
        let path = p.map_or_else(|| self.path(&self.cfg.paths.checkpoint), Path::to_path_buf);
        let f = fs::File::open(&path).with_context(|| format!("opening checkpoint {}", path.display()))?;
        let (params, pcfg) = load_checkpoint(f).with_context(|| format!("loading checkpoint {}", path.display()))?;
        if pcfg.n_beams != self.cfg.sim.n_beams {
            anyhow::bail!("checkpoint expects {} beams but the simulator produces {}", pcfg.n_beams, self.cfg.sim.n_beams);
        }
        Ok((params, pcfg))
    }

    fn heldout(&self, track: &TrackModel, set: &RacelineSet, count: usize) -> anyhow::Result<Vec<Scenario>> {
        let e = &self.cfg.eval;
        let scfg = ScenarioConfig {
            k_positions: e.heldout_k,
            spawn_phase: e.heldout_phase,
            seed: derive_seed(self.cfg.seed, "heldout", 0),
            ..self.cfg.scenario.clone()
        };
        let (mut scs, _) = scenario::enumerate_scenarios(&scfg, track, set, &self.cfg.sim)?;
        if scs.len() < count {
            anyhow::bail!("held-out grid has {} scenarios, fewer than the {count} requested; raise eval.heldout_k", scs.len());
        }
        scs.truncate(count);
        Ok(scs)
    }

    fn json<T: serde::Serialize>(&self, rel: impl AsRef<Path>, value: &T) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        eval::write_json(value, &mut buf)?;
        self.write(rel, &buf)?;
        Ok(())
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<KitConfig> {
    let mut cfg = match &cli.config {
        Some(p) => KitConfig::load(p)?,
        None => KitConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.derive_seeds();
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Track(TrackCmd::Gen(_)) => "track gen",
        Command::Track(TrackCmd::Info(_)) => "track info",
        Command::Collect(_) => "collect",
        Command::Train(_) => "train",
        Command::Eval(EvalCmd::Single { .. }) => "eval single",
        Command::Eval(EvalCmd::H2h { .. }) => "eval h2h",
        Command::Eval(EvalCmd::Noise { .. }) => "eval noise",
        Command::Eval(EvalCmd::Latency { .. }) => "eval latency",
        Command::Render(_) => "render",
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    let started = now();
    let mut cfg = load_config(cli).code(EXIT_USAGE)?;
    apply_overrides(&mut cfg, &cli.command);
    cfg.validate().code(EXIT_USAGE)?;
    if cli.workers == 0 {
        return Err(Failure { code: EXIT_USAGE, error: anyhow::anyhow!("--workers must be at least 1") });
    }
    let run = Run { cli, cfg, started };
    if let Command::Track(TrackCmd::Info(a)) = &cli.command {
        return track_info(&run, a).code(EXIT_TRACK);
    }
    fs::create_dir_all(&cli.out).code(EXIT_USAGE)?;
    match &cli.command {
        Command::Track(TrackCmd::Gen(_)) => track_gen(&run).code(EXIT_TRACK)?,
        Command::Track(TrackCmd::Info(_)) => unreachable!(),
        Command::Collect(a) => collect(&run, a)?,
        Command::Train(a) => train(&run, a)?,
        Command::Eval(e) => evaluate(&run, e)?,
        Command::Render(a) => render(&run, a)?,
    }
    finish(&run).code(EXIT_USAGE)
}

fn apply_overrides(cfg: &mut KitConfig, cmd: &Command) {
    match cmd {
        Command::Track(TrackCmd::Gen(a)) => {
            let t = &mut cfg.track;
            t.file = None;
            t.shape = a.shape.unwrap_or(t.shape);
            t.length = a.length.unwrap_or(t.length);
            t.width = a.width.unwrap_or(t.width);
            t.spacing = a.spacing.unwrap_or(t.spacing);
        }
        Command::Collect(a) => {
            if let Some(k) = a.k {
                cfg.scenario.k_positions = k;
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.trainer.epochs = e;
            }
            if let Some(m) = a.multiplier {
                cfg.policy.hidden_multiplier = m;
            }
            if a.ablation == Some(Ablation::LidarOnly) {
                cfg.policy.use_speed_input = false;
            }
        }
        Command::Eval(EvalCmd::Noise { levels: Some(l), .. }) => cfg.eval.noise_levels = l.clone(),
        Command::Eval(EvalCmd::Latency { samples: Some(n), .. }) => cfg.eval.latency_samples = *n,
        _ => {}
    }
}

fn finish(run: &Run<'_>) -> anyhow::Result<()> {
    let mut outputs = Vec::new();
    list_files(run.out(), run.out(), &mut outputs)?;
    outputs.retain(|p| p != crate::config::RUN_MANIFEST_FILE);
    outputs.sort();
    let manifest = RunManifest {
        command: command_name(&run.cli.command).to_string(),
        config_hash: run.cfg.hash(),
        seed: run.cfg.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started: run.started.clone(),
        finished: now(),
        outputs,
    };
    manifest.write_atomic(run.out())?;
    Ok(())
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn track_gen(run: &Run<'_>) -> anyhow::Result<()> {
    let track = run.track(None)?;
    let set = run.racelines(&track)?;
    let mut buf = Vec::new();
    track.write_csv(&mut buf)?;
    run.write("track.csv", &buf)?;
    buf.clear();
    track.write_boundaries_csv(&mut buf)?;
    run.write("boundaries.csv", &buf)?;
    for line in set.iter() {
        buf.clear();
        line.write_csv(&mut buf)?;
        run.write(format!("raceline_{}.csv", line.id()).to_lowercase(), &buf)?;
    }
    run.write("track.svg", eval::render_track(&track, Some(&set)).as_bytes())?;
    println!("track: {:.3} m, {} waypoints", track.total_length(), track.len());
    Ok(())
}

fn track_info(run: &Run<'_>, a: &TrackInfoArgs) -> anyhow::Result<()> {
    let track = run.track(a.file.as_deref())?;
    let widths = track.waypoints().iter().map(|w| w.w_left + w.w_right);
    let (wmin, wmax) = widths.fold((f64::INFINITY, 0.0f64), |(lo, hi), w| (lo.min(w), hi.max(w)));
    println!("total_length_m: {:.6}", track.total_length());
    println!("waypoints: {}", track.len());
    println!("mean_spacing_m: {:.6}", track.mean_spacing());
    println!("width_m: {wmin:.3}..{wmax:.3}");
    Ok(())
}

fn expert_rollout_cfg(run: &Run<'_>, duration: f64) -> RolloutConfig {
    RolloutConfig::new(run.cfg.sim, run.cfg.expert, duration)
}

fn collect(run: &Run<'_>, a: &CollectArgs) -> Result<(), Failure> {
    let track = run.track(a.track.as_deref()).code(EXIT_TRACK)?;
    let set = run.racelines(&track).code(EXIT_TRACK)?;
    let cfg = &run.cfg;
    let (scs, skipped) = scenario::enumerate_scenarios(&cfg.scenario, &track, &set, &cfg.sim).code(EXIT_SCENARIO)?;
    let rc = expert_rollout_cfg(run, cfg.scenario.duration);
    let results = scenario::run_scenarios(&scs, &track, &set, &rc, run.cli.workers, || ExpertDriver::new(&set, cfg.expert))
        .code(EXIT_SCENARIO)?;
    let ds = scenario::build_dataset(results.into_iter().map(|r| r.record).collect()).code(EXIT_SCENARIO)?;
    scenario::save_dataset(&ds, &run.path(&cfg.paths.dataset)).code(EXIT_SCENARIO)?;
    let c = ds.pool_counts;
    println!(
        "collected {} scenarios ({skipped} spawns skipped): {}/{}/{} following/overtaking/collision, {} samples kept",
        c.total(),
        c.car_following,
        c.overtaking,
        c.collision,
        ds.total_samples
    );
    Ok(())
}

fn train(run: &Run<'_>, a: &TrainArgs) -> Result<(), Failure> {
    let cfg = &run.cfg;
    let path = a.dataset.clone().unwrap_or_else(|| run.path(&cfg.paths.dataset));
    let ds = scenario::load_dataset(&path).with_context(|| format!("loading dataset {}", path.display())).code(EXIT_TRAIN)?;
    let out = trainer::train(&ds, &cfg.policy, &cfg.trainer, |r| {
        log::info!("epoch {} loss {:.6e} lr {:.3e}", r.epoch, r.mean_loss, r.lr);
    })
    .code(EXIT_TRAIN)?;
    let mut buf = Vec::new();
    save_checkpoint(&out.best_params, &cfg.policy, &mut buf).code(EXIT_TRAIN)?;
    let ckpt = run.path(&cfg.paths.checkpoint);
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir).code(EXIT_TRAIN)?;
    }
    fs::write(&ckpt, &buf).code(EXIT_TRAIN)?;
    buf.clear();
    trainer::write_loss_curve(&out.curve, &mut buf).code(EXIT_TRAIN)?;
    run.write("loss_curve.csv", &buf).code(EXIT_TRAIN)?;
    let best = out.curve.get(out.best_epoch.saturating_sub(1)).map_or(f64::NAN, |r| r.mean_loss);
    println!("trained {} epochs; best epoch {} with mean loss {best:.6e}", out.curve.len(), out.best_epoch);
    Ok(())
}

fn evaluate(run: &Run<'_>, cmd: &EvalCmd) -> Result<(), Failure> {
    let cfg = &run.cfg;
    let reports = run.path(&cfg.paths.reports);
    let rel = |name: &str| reports.strip_prefix(run.out()).unwrap_or(&reports).join(name);
    let track_id = match &cfg.track.file {
        Some(p) => p.file_stem().map_or("track".into(), |s| s.to_string_lossy().into_owned()),
        None => format!("{:?}", cfg.track.shape).to_lowercase(),
    };
    let settings = run.settings();
    if let EvalCmd::Latency { checkpoint, full, precision, .. } = cmd {
        let (params, pcfg) = if *full {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(cfg.seed, "init", 0));
            (init_params(&cfg.policy, &mut rng), cfg.policy)
        } else {
            run.checkpoint(checkpoint.as_deref()).code(EXIT_EVAL)?
        };
        let r = eval::bench_latency(&params, &pcfg, cfg.eval.latency_samples, *precision, derive_seed(cfg.seed, "latency", 0));
        println!(
            "latency I={} H={} ({} samples, {:?}): median {:.4} ms, p99 {:.4} ms, max {:.4} ms",
            r.input_dim, r.hidden_dim, r.samples, r.precision, r.median_ms, r.p99_ms, r.max_ms
        );
        run.json(rel("latency.json"), &r).code(EXIT_EVAL)?;
        let mut buf = Vec::new();
        eval::write_latency_csv(&[r], &mut buf).code(EXIT_EVAL)?;
        run.write(rel("latency.csv"), &buf).code(EXIT_EVAL)?;
        return Ok(());
    }
    let policy = match cmd {
        EvalCmd::Single { policy, .. } | EvalCmd::H2h { policy, .. } | EvalCmd::Noise { policy, .. } => policy,
        EvalCmd::Latency { .. } => unreachable!(),
    };
    let (params, pcfg) = run.checkpoint(policy.checkpoint.as_deref()).code(EXIT_EVAL)?;
    let track = run.track(policy.track.as_deref()).code(EXIT_TRACK)?;
    let set = run.racelines(&track).code(EXIT_TRACK)?;
    let driver = || eval::PolicyDriver::new(&params, pcfg);
    let mut buf = Vec::new();
    match cmd {
        EvalCmd::Single { laps, eta, svg, .. } => {
            let laps = laps.unwrap_or(cfg.eval.laps_target);
            let mut d = driver();
            let mut s = settings;
            let (rep, res) = single_with_trace(&mut d, &track_id, &track, &set, laps, *eta, &mut s, cfg, *svg).code(EXIT_EVAL)?;
            println!(
                "single: {:.2} laps, mean speed {:.3} m/s, collided {}",
                rep.laps_completed, rep.mean_speed, rep.collided
            );
            run.json(rel("single.json"), &rep).code(EXIT_EVAL)?;
            eval::write_single_csv(std::slice::from_ref(&rep), &mut buf).code(EXIT_EVAL)?;
            run.write(rel("single.csv"), &buf).code(EXIT_EVAL)?;
            if let Some(trace) = res.trace.as_ref().filter(|_| *svg) {
                let label = format!("single agent: {:.2} laps", rep.laps_completed);
                run.write(rel("single.svg"), eval::render_episode(trace, &track, &cfg.sim, &label).as_bytes()).code(EXIT_EVAL)?;
            }
        }
        EvalCmd::H2h { scenarios, eta, svg, .. } => {
            let n = scenarios.unwrap_or(cfg.eval.heldout_count);
            let scs = run.heldout(&track, &set, n).code(EXIT_SCENARIO)?;
            let mut rc = RolloutConfig::new(cfg.sim, cfg.expert, cfg.scenario.duration);
            rc.noise_eta = *eta;
            rc.record_trace = *svg;
            let results = scenario::run_scenarios(&scs, &track, &set, &rc, settings.workers, driver).code(EXIT_EVAL)?;
            let mut counts = scenario::OutcomeCounts::default();
            for r in &results {
                counts.add(r.record.outcome);
            }
            let rep = eval::H2HReport::from_counts(&track_id, counts);
            println!(
                "h2h: {}/{}/{} following/overtaking/collision, overtake {:.1}%, safety {:.1}%",
                rep.car_following, rep.overtaking, rep.collision, rep.overtake_rate, rep.safety_rate
            );
            run.json(rel("h2h.json"), &rep).code(EXIT_EVAL)?;
            eval::write_h2h_csv(std::slice::from_ref(&rep), &mut buf).code(EXIT_EVAL)?;
            run.write(rel("h2h.csv"), &buf).code(EXIT_EVAL)?;
            if *svg {
                for (sc, r) in scs.iter().zip(&results) {
                    if let Some(trace) = &r.trace {
                        let label = format!("scenario {}: {:?}", sc.id, r.record.outcome);
                        let svg = eval::render_episode(trace, &track, &cfg.sim, &label);
                        run.write(rel(&format!("h2h_{:04}.svg", sc.id)), svg.as_bytes()).code(EXIT_EVAL)?;
                    }
                }
            }
        }
        EvalCmd::Noise { scenarios, laps, .. } => {
            let n = scenarios.unwrap_or(cfg.eval.heldout_count);
            let scs = run.heldout(&track, &set, n).code(EXIT_SCENARIO)?;
            let plan = SweepPlan {
                track_id: &track_id,
                track: &track,
                set: &set,
                single: Some((cfg.eval.single_raceline, laps.unwrap_or(cfg.eval.laps_target))),
                h2h: Some((&scs, cfg.scenario.duration)),
            };
            let rep = eval::run_noise_sweep(driver, &plan, &cfg.eval.noise_levels, &settings).code(EXIT_EVAL)?;
            for l in &rep.levels {
                let s = l.single.as_ref().map_or(f64::NAN, |s| s.mean_speed);
                let h = l.h2h.as_ref().map_or(f64::NAN, |h| h.overtake_rate);
                println!("noise {:.0}%: mean speed {s:.3} m/s, overtake rate {h:.1}%", l.eta * 100.0);
            }
            run.json(rel("noise.json"), &rep).code(EXIT_EVAL)?;
            eval::write_noise_csv(&rep, true, &mut buf).code(EXIT_EVAL)?;
            run.write(rel("noise_single.csv"), &buf).code(EXIT_EVAL)?;
            buf.clear();
            eval::write_noise_csv(&rep, false, &mut buf).code(EXIT_EVAL)?;
            run.write(rel("noise_h2h.csv"), &buf).code(EXIT_EVAL)?;
        }
        EvalCmd::Latency { .. } => unreachable!(),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn single_with_trace(
    d: &mut eval::PolicyDriver<'_>,
    track_id: &str,
    track: &TrackModel,
    set: &RacelineSet,
    laps: usize,
    eta: f64,
    settings: &mut EvalSettings,
    cfg: &KitConfig,
    trace: bool,
) -> anyhow::Result<(eval::SingleAgentReport, scenario::RolloutResult)> {
    if !trace {
        return Ok(eval::run_single_agent(d, track_id, track, set, cfg.eval.single_raceline, laps, eta, settings)?);
    }
    let sc = Scenario {
        id: 0,
        ego: scenario::Spawn { raceline: cfg.eval.single_raceline, s: 0.0 },
        leader: None,
        leader_discount: 1.0,
        seed: derive_seed(settings.seed, "single", 0),
    };
    let mut rc = RolloutConfig::new(settings.sim, settings.leader, laps as f64 * track.total_length() / settings.min_mean_speed);
    rc.noise_eta = eta;
    rc.max_laps = Some(laps as f64);
    rc.record_trace = true;
    let r = scenario::rollout(&sc, track, set, d, &rc)?;
    Ok((eval::SingleAgentReport::from_rollout(track_id, track, laps, &r), r))
}

fn render(run: &Run<'_>, a: &RenderArgs) -> Result<(), Failure> {
    let cfg = &run.cfg;
    let track = run.track(a.policy.track.as_deref()).code(EXIT_TRACK)?;
    let set = run.racelines(&track).code(EXIT_TRACK)?;
    let (scs, _) = scenario::enumerate_scenarios(&cfg.scenario, &track, &set, &cfg.sim).code(EXIT_SCENARIO)?;
    let sc = scs
        .iter()
        .find(|s| s.id == a.scenario)
        .ok_or_else(|| anyhow::anyhow!("no scenario with id {} (grid has {})", a.scenario, scs.len()))
        .code(EXIT_SCENARIO)?;
    let mut rc = expert_rollout_cfg(run, cfg.scenario.duration);
    rc.record_trace = true;
    let r = match a.driver {
        DriverKind::Expert => scenario::rollout(sc, &track, &set, &mut ExpertDriver::new(&set, cfg.expert), &rc),
        DriverKind::Policy => {
            let (params, pcfg) = run.checkpoint(a.policy.checkpoint.as_deref()).code(EXIT_EVAL)?;
            scenario::rollout(sc, &track, &set, &mut eval::PolicyDriver::new(&params, pcfg), &rc)
        }
    }
    .code(EXIT_EVAL)?;
    let trace = r.trace.as_ref().expect("trace recorded");
    let label = format!("scenario {}: {:?}", sc.id, r.record.outcome);
    run.write(format!("scenario_{:04}.svg", sc.id), eval::render_episode(trace, &track, &cfg.sim, &label).as_bytes())
        .code(EXIT_EVAL)?;
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).code(EXIT_EVAL)?;
    run.write(format!("scenario_{:04}_trace.csv", sc.id), &buf).code(EXIT_EVAL)?;
    println!("scenario {}: {:?}", sc.id, r.record.outcome);
    Ok(())
}
