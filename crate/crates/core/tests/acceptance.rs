//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use e2r_core::eval::{bench_latency, run_h2h, run_single_agent, EvalSettings, LatencyReport, PolicyDriver, Precision};
use e2r_core::expert::{pure_pursuit_steer, select_trajectory, proximity_cost, sample_reward, CandidateTrajectory, ExpertConfig};
use e2r_core::geom::{Segment, Vec2};
use e2r_core::policy::{build_input, forward_step, init_params, pressure, HiddenState, PolicyConfig, PolicyParameters};
use e2r_core::scenario::{
    build_dataset, enumerate_scenarios, run_scenarios, Dataset, EpisodeRecord, ExpertDriver, Frame, Outcome,
    RacelineSet, RolloutConfig, Scenario, ScenarioConfig,
};
use e2r_core::sim::{apply_noise, cast_rays, LidarScan, SimConfig, VehicleCommand, VehicleState};
use e2r_core::track::{shapes, RacelineConfig, RacelineId, TrackModel};
use e2r_core::trainer::{batch_loss_and_grad, combine_loss, finite_difference_grad, max_relative_error, train, TrainEpisode, TrainerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(n: u8, title: &str, started: Instant, o: &Verdict) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n:>2} [{status}] {title}: {} ({:.1} s)", o.detail, started.elapsed().as_secs_f64());
}

fn check(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// 1. Equation fidelity.
fn equations() -> Verdict {
    let s0 = pressure(0.0, 0.5);
    let s_half = pressure(2.0 * 3f64.ln(), 0.5);
    // Oracle: atan(2 L sin(alpha) / l) evaluated by hand for alpha = 30 degrees.
    let pp = pure_pursuit_steer(std::f64::consts::FRAC_PI_6, 0.33, 1.0);
    let pp_oracle = (2.0f64 * 0.33 * 0.5).atan();
    let l = combine_loss(0.84, 0.031, 0.05);
    let cfg = ExpertConfig { lambda_v: 1.0, lambda_p: 0.5, lambda_d: 1.0, lambda_kappa: 0.1, d_scale: 1.0, ..Default::default() };
    let r = sample_reward(5.0, 0.2, proximity_cost(1.0, 1.0), 0.1, &cfg);
    let r_oracle = 5f64.ln() - 0.5 * 0.2 - (-1f64).exp() - 0.1 * 0.1 * 5.0;
    let checks = [
        s0 == 1.0,
        (s_half - 0.5).abs() < 1e-12,
        (pp - pp_oracle).abs() < 1e-9 && (pp - 0.3187).abs() < 1e-4,
        (l.loss - (0.05 * 0.84 + 0.031)).abs() < 1e-12,
        (r - r_oracle).abs() < 1e-9 && (r - 1.0915).abs() < 1e-4,
    ];
    check(
        checks.iter().all(|&c| c),
        format!("sigma(0)={s0}, sigma(2 ln 3)={s_half:.15}, delta={pp:.10}, loss={:.15}, reward={r:.10}", l.loss),
    )
}

// 2. Gradient correctness.
fn gradients() -> Verdict {
    let cfg = PolicyConfig { n_beams: 8, embed_dim: 2, hidden_multiplier: 2, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = init_params(&cfg, &mut rng);
    let frames: Vec<Frame> = (0..5)
        .map(|_| Frame {
            scan: (0..8).map(|_| rng.gen_range(0.2..12.0)).collect(),
            ego_v: rng.gen_range(0.0..6.0),
            v_cmd: rng.gen_range(0.0..7.0),
            delta_cmd: rng.gen_range(-0.4..0.4),
        })
        .collect();
    let ep = EpisodeRecord { scenario_id: 0, seed: 0, frames, outcome: Outcome::Overtaking, duration_actual: 0.5 };
    let masks = vec![vec![false, true, false, true, false]];
    let te = TrainEpisode::from_record(&ep, &cfg).unwrap();
    let analytic = batch_loss_and_grad(&params, &cfg, &[&te], &[&masks[0]], 0.05).unwrap().grads;
    let numeric = finite_difference_grad(&params, &cfg, &[ep], &masks, 0.05, 1e-6).unwrap();
    let errs = max_relative_error(&analytic, &numeric);
    let worst = errs.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    check(errs.iter().all(|(_, e)| *e < 1e-4), format!("{} tensors, worst {} at {:.2e}", errs.len(), worst.0, worst.1))
}

// 3. Simulator oracles.
fn simulator() -> Verdict {
    let half = 2.0;
    let c = [Vec2::new(-half, -half), Vec2::new(half, -half), Vec2::new(half, half), Vec2::new(-half, half)];
    let walls: Vec<Segment> = (0..4).map(|i| Segment::new(c[i], c[(i + 1) % 4])).collect();
    let origin = Vec2::new(0.3, 0.7);
    let heading = 0.4;
    let ranges = cast_rays(origin, heading, &walls, 360, 30.0);
    let mut lidar_err: f64 = 0.0;
    for (i, r) in ranges.iter().enumerate() {
        let a = heading + (i as f64).to_radians();
        let (dx, dy) = (a.cos(), a.sin());
        let tx = if dx.abs() < 1e-15 { f64::INFINITY } else { ((if dx > 0.0 { half } else { -half }) - origin.x) / dx };
        let ty = if dy.abs() < 1e-15 { f64::INFINITY } else { ((if dy > 0.0 { half } else { -half }) - origin.y) / dy };
        lidar_err = lidar_err.max((r - tx.min(ty)).abs());
    }

    let sim = SimConfig::default();
    let mut radius_err: f64 = 0.0;
    for delta in [0.05, 0.1, 0.2] {
        let mut car = VehicleState { v: 1.5, delta, ..Default::default() };
        let mut pts = Vec::new();
        for step in 0..6000 {
            car.advance(VehicleCommand::new(1.5, delta), &sim);
            if step % 25 == 0 {
                pts.push(car.pos());
            }
        }
        let r_expected = sim.wheelbase / delta.tan();
        let centre = Vec2::new(0.0, r_expected);
        let mean = pts.iter().map(|p| p.dist(centre)).sum::<f64>() / pts.len() as f64;
        radius_err = radius_err.max((mean - r_expected).abs() / r_expected);
    }

    let mut scan = LidarScan { ranges: vec![7.5; 360] };
    apply_noise(&mut scan, 0.3, &mut ChaCha8Rng::seed_from_u64(3));
    let zeroed = scan.ranges.iter().filter(|&&r| r == 0.0).count();
    check(
        lidar_err < 1e-6 && radius_err < 0.005 && zeroed == 108,
        format!("lidar max error {lidar_err:.1e} m, turning radius error {:.3}%, zeroed beams {zeroed}", radius_err * 100.0),
    )
}

fn stadium() -> (TrackModel, RacelineSet) {
    let track = shapes::stadium(70.0, 3.5, 0.25).unwrap();
    let set = RacelineSet::generate(&track, &[RacelineId::LEFT, RacelineId::CENTER, RacelineId::RIGHT], &RacelineConfig::default())
        .unwrap();
    (track, set)
}

fn settings(seed: u64) -> EvalSettings {
    EvalSettings { sim: SimConfig::default(), leader: ExpertConfig::default(), workers: 1, seed, min_mean_speed: 1.0 }
}

// 4. Expert competence.
fn expert(track: &TrackModel, set: &RacelineSet) -> Verdict {
    let mut laps = Vec::new();
    for id in [RacelineId::LEFT, RacelineId::CENTER, RacelineId::RIGHT] {
        let mut d = ExpertDriver::new(set, ExpertConfig::default());
        let (rep, _) = run_single_agent(&mut d, "stadium", track, set, id, 3, 0.0, &settings(1)).unwrap();
        laps.push((id, rep.laps_completed, rep.collided));
    }
    let laps_ok = laps.iter().all(|&(_, l, c)| l >= 3.0 && !c);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let cands: Vec<CandidateTrajectory> = (0..n)
            .map(|_| CandidateTrajectory {
                samples: vec![],
                lateral_offset: rng.gen_range(-4..=4) as f64 * 0.25,
                speed_scale: 1.0,
                reward: rng.gen_range(-5..=5) as f64 * 0.5,
            })
            .collect();
        // Independent max scan: best reward, then smallest |offset|, then first index.
        let best_reward = cands.iter().map(|c| c.reward).fold(f64::NEG_INFINITY, f64::max);
        let best_offset = cands.iter().filter(|c| c.reward == best_reward).map(|c| c.lateral_offset.abs()).fold(f64::INFINITY, f64::min);
        let want = cands.iter().position(|c| c.reward == best_reward && c.lateral_offset.abs() == best_offset).unwrap();
        if select_trajectory(&cands).unwrap() != want {
            mismatches += 1;
        }
    }
    let lap_text: Vec<String> = laps.iter().map(|(id, l, c)| format!("{id} {l:.2} laps{}", if *c { " collided" } else { "" })).collect();
    check(laps_ok && mismatches == 0, format!("{}; selection mismatches {mismatches}/1000", lap_text.join(", ")))
}

// 5. Overfit sanity.
fn overfit() -> Verdict {
    let cfg = PolicyConfig { n_beams: 8, embed_dim: 4, hidden_multiplier: 8, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = (0..10)
        .map(|_| Frame {
            scan: (0..8).map(|_| rng.gen_range(0.3..10.0)).collect(),
            ego_v: rng.gen_range(1.0..5.0),
            v_cmd: rng.gen_range(1.0..6.0),
            delta_cmd: rng.gen_range(-0.3..0.3),
        })
        .collect();
    let ds = build_dataset(vec![EpisodeRecord { scenario_id: 0, seed: 0, frames, outcome: Outcome::Overtaking, duration_actual: 1.0 }])
        .unwrap();
    let tcfg = TrainerConfig { epochs: 500, batch_size: 1, mask_p: 0.0, lr0: 1e-2, seed: 5, ..Default::default() };
    let out = train(&ds, &cfg, &tcfg, |_| {}).unwrap();
    let first = out.curve[0].mean_loss;
    let best = out.curve.iter().map(|r| r.mean_loss).fold(f64::INFINITY, f64::min);
    let reached = out.curve.iter().position(|r| r.mean_loss < 1e-4).map(|i| i + 1);
    check(
        best < 1e-4,
        format!("epoch-1 loss {first:.3e}, best {best:.3e} at epoch {}, first below 1e-4 at {reached:?}", out.best_epoch),
    )
}

struct Fixture {
    dataset: Dataset,
    heldout: Vec<Scenario>,
    policy: PolicyConfig,
    params: PolicyParameters,
}

const FIXTURE_K: usize = 16;
const FIXTURE_SEED: u64 = 7;

fn fixture(track: &TrackModel, set: &RacelineSet) -> Fixture {
    let sim = SimConfig::default();
    let expert = ExpertConfig::default();
    let ids = vec![RacelineId::LEFT, RacelineId::CENTER, RacelineId::RIGHT];
    let cfg = ScenarioConfig { racelines: ids.clone(), k_positions: FIXTURE_K, v_ell_discount: 0.6, duration: 8.0, seed: FIXTURE_SEED, ..Default::default() };
    let (scs, _) = enumerate_scenarios(&cfg, track, set, &sim).unwrap();
    let rc = RolloutConfig::new(sim, expert, cfg.duration);
    let results = run_scenarios(&scs, track, set, &rc, 1, || ExpertDriver::new(set, expert)).unwrap();
    let dataset = build_dataset(results.into_iter().map(|r| r.record).collect()).unwrap();
    let c = dataset.pool_counts;
    eprintln!(
        "  fixture: {} expert scenarios, {}/{}/{} following/overtaking/collision, {} samples kept",
        c.total(),
        c.car_following,
        c.overtaking,
        c.collision,
        dataset.total_samples
    );
    let policy = PolicyConfig { n_beams: 360, embed_dim: 16, hidden_multiplier: 2, ..Default::default() };
    let tcfg = TrainerConfig { epochs: 100, seed: FIXTURE_SEED, ..Default::default() };
    let t0 = Instant::now();
    let out = train(&dataset, &policy, &tcfg, |r| {
        if r.epoch % 10 == 0 {
            eprintln!("  epoch {:>3} loss {:.5} lr {:.1e} ({:.0} s)", r.epoch, r.mean_loss, r.lr, t0.elapsed().as_secs_f64());
        }
    })
    .unwrap();
    let held_cfg = ScenarioConfig { k_positions: 6, spawn_phase: 0.5, seed: FIXTURE_SEED + 1, ..cfg };
    let (mut heldout, _) = enumerate_scenarios(&held_cfg, track, set, &sim).unwrap();
    heldout.truncate(50);
    Fixture { dataset, heldout, policy, params: out.best_params }
}

// 6. End-to-end imitation at reduced width.
fn end_to_end(track: &TrackModel, set: &RacelineSet, fx: &Fixture) -> Verdict {
    let c = fx.dataset.pool_counts;
    let mut d = PolicyDriver::new(&fx.params, fx.policy);
    let (single, _) = run_single_agent(&mut d, "stadium", track, set, RacelineId::CENTER, 10, 0.0, &settings(FIXTURE_SEED)).unwrap();
    let clean_laps = single.lap_times.len();
    let (h2h, _) = run_h2h(|| PolicyDriver::new(&fx.params, fx.policy), "stadium", track, set, &fx.heldout, 8.0, 0.0, &settings(FIXTURE_SEED))
        .unwrap();
    check(
        c.total() >= 100 && fx.heldout.len() == 50 && clean_laps >= 1 && h2h.safety_rate >= 80.0 && h2h.overtake_rate >= 20.0,
        format!(
            "{} scenarios collected; single agent {clean_laps} full laps before {} ({:.2} laps, {:.2} m/s); h2h on {}: {}/{}/{}, safety {:.1}%, overtake {:.1}%",
            c.total(),
            if single.collided { "a collision" } else { "the lap target" },
            single.laps_completed,
            single.mean_speed,
            h2h.n,
            h2h.car_following,
            h2h.overtaking,
            h2h.collision,
            h2h.safety_rate,
            h2h.overtake_rate
        ),
    )
}

// 7. Noise trend and the dropout token.
fn noise(track: &TrackModel, set: &RacelineSet, fx: &Fixture) -> Verdict {
    let seeds = [11u64, 12, 13];
    let mean = |eta: f64| {
        let mut total = 0.0;
        for &s in &seeds {
            let mut d = PolicyDriver::new(&fx.params, fx.policy);
            total += run_single_agent(&mut d, "stadium", track, set, RacelineId::CENTER, 10, eta, &settings(s)).unwrap().0.mean_speed;
        }
        total / seeds.len() as f64
    };
    let (v0, v3) = (mean(0.0), mean(0.3));

    let mut scan = LidarScan { ranges: (0..360).map(|i| 1.0 + (i % 40) as f64 * 0.5).collect() };
    apply_noise(&mut scan, 0.3, &mut ChaCha8Rng::seed_from_u64(17));
    let x = build_input(&scan.ranges, 3.0, &fx.params, &fx.policy, false);
    let zeroed: Vec<usize> = (0..360).filter(|&i| scan.ranges[i] == 0.0).collect();
    let tokens_ok = !zeroed.is_empty() && zeroed.iter().all(|&i| x[i] == 1.0);
    check(
        v3 < v0 && tokens_ok,
        format!("mean speed {v0:.3} m/s at eta 0 vs {v3:.3} m/s at eta 0.3 over {} seeds; {} zeroed beams all read 1.0: {tokens_ok}", seeds.len(), zeroed.len()),
    )
}

// 8. Latency at full width.
fn latency() -> Verdict {
    let cfg = PolicyConfig::default();
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(8));
    let f32r: LatencyReport = bench_latency(&params, &cfg, 10_000, Precision::F32, 8);
    let f64r = bench_latency(&params, &cfg, 2_000, Precision::F64, 8);
    check(
        f32r.median_ms < 0.5,
        format!(
            "I={} H={}: f32 median {:.3} ms, p99 {:.3} ms, max {:.3} ms over {} samples; f64 median {:.3} ms, p99 {:.3} ms",
            f32r.input_dim, f32r.hidden_dim, f32r.median_ms, f32r.p99_ms, f32r.max_ms, f32r.samples, f64r.median_ms, f64r.p99_ms
        ),
    )
}

// 9. Determinism of the command line.
const DET_CONFIG: &str = r#"
seed = 9

[track]
length = 50.0

[scenario]
k_positions = 2
duration = 3.0

[policy]
hidden_multiplier = 1
embed_dim = 4

[trainer]
epochs = 3

[eval]
laps_target = 1
heldout_k = 2
heldout_count = 6
noise_levels = [0.1, 0.3]
latency_samples = 1000
min_mean_speed = 3.0
"#;

fn determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("kit.toml");
    fs::write(&cfg, DET_CONFIG).unwrap();
    let commands: [&[&str]; 5] = [&["collect"], &["train"], &["eval", "single"], &["eval", "h2h"], &["eval", "noise"]];
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = root.path().join(run);
        let mut files = Vec::new();
        for cmd in commands {
            let mut args = vec!["e2r", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", "1"];
            args.extend_from_slice(cmd);
            assert_eq!(e2r_core::cli::run(args), 0, "{cmd:?} failed");
        }
        collect_files(&out, &out, &mut files);
        runs.push(files);
    }
    let (a, b) = (&runs[0], &runs[1]);
    let compared = a.iter().filter(|(n, _)| n != "run_manifest.json").count();
    let differing: Vec<&str> = a
        .iter()
        .zip(b)
        .filter(|((na, ba), (nb, bb))| na != "run_manifest.json" && (na != nb || ba != bb))
        .map(|((n, _), _)| n.as_str())
        .collect();

    // Latency timings are physical measurements; everything else must match.
    let lat = |dir: &str| -> serde_json::Value {
        let out = root.path().join(dir);
        let args = ["e2r", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "eval", "latency"];
        assert_eq!(e2r_core::cli::run(args), 0);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("reports/latency.json")).unwrap()).unwrap();
        for k in ["median_ms", "p99_ms", "max_ms", "mean_ms"] {
            v.as_object_mut().unwrap().remove(k);
        }
        v
    };
    let lat_same = lat("a") == lat("b");
    check(
        a.len() == b.len() && differing.is_empty() && lat_same,
        format!("{compared} output files byte-identical across two runs; differing: {differing:?}; latency metadata equal: {lat_same}"),
    )
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
}

// 10. Ablation plumbing.
fn ablations(track: &TrackModel, set: &RacelineSet, fx: &Fixture) -> Verdict {
    let subset = Dataset {
        episodes: fx.dataset.episodes.iter().step_by(fx.dataset.episodes.len() / 4).take(4).cloned().collect(),
        ..fx.dataset.clone()
    };
    let variants = [
        ("x2", PolicyConfig { hidden_multiplier: 2, ..fx.policy }),
        ("x4", PolicyConfig { hidden_multiplier: 4, ..fx.policy }),
        ("x8", PolicyConfig { hidden_multiplier: 8, ..fx.policy }),
        ("lidar-only", PolicyConfig { use_speed_input: false, ..fx.policy }),
    ];
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, pcfg) in variants {
        let tcfg = TrainerConfig { epochs: 2, batch_size: 4, seed: 10, ..Default::default() };
        let result = train(&subset, &pcfg, &tcfg, |_| {}).map_err(|e| e.to_string()).and_then(|out| {
            let p = out.best_params;
            let (h2h, _) = run_h2h(|| PolicyDriver::new(&p, pcfg), "stadium", track, set, &fx.heldout[..3], 2.0, 0.0, &settings(10))
                .map_err(|e| e.to_string())?;
            let mut d = PolicyDriver::new(&p, pcfg);
            let (single, _) = run_single_agent(&mut d, "stadium", track, set, RacelineId::CENTER, 1, 0.0, &EvalSettings { min_mean_speed: 7.0, ..settings(10) })
                .map_err(|e| e.to_string())?;
            Ok((p, h2h.n, single.laps_completed))
        });
        match result {
            Ok((p, n, laps)) => {
                notes.push(format!("{name} H={} ok ({n} h2h, {laps:.2} laps)", pcfg.hidden_dim()));
                if !pcfg.use_speed_input {
                    let scan = vec![3.0; pcfg.n_beams];
                    let h = HiddenState::zeros(&pcfg);
                    let (a, _) = forward_step(&scan, 0.0, &h, &p, &pcfg, false).unwrap();
                    let (b, _) = forward_step(&scan, 8.0, &h, &p, &pcfg, false).unwrap();
                    let invariant = a == b;
                    notes.push(format!("speed-invariant {invariant}"));
                    ok &= invariant;
                }
            }
            Err(e) => {
                ok = false;
                notes.push(format!("{name} failed: {e}"));
            }
        }
    }
    check(ok, notes.join(", "))
}

fn main() {
    // Optional criterion numbers on the command line restrict the run, e.g. `-- 1 5`.
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u8| only.is_empty() || only.contains(&n);
    let mut failures = Vec::new();
    let mut run = |n: u8, title: &str, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let o = f();
        report(n, title, t, &o);
        if !o.pass {
            failures.push(n);
        }
    };
    run(1, "equation fidelity", &mut equations);
    run(2, "gradient correctness", &mut gradients);
    run(3, "simulator oracles", &mut simulator);
    let (track, set) = stadium();
    run(4, "expert competence", &mut || expert(&track, &set));
    run(5, "overfit sanity", &mut overfit);
    if [6, 7, 10].iter().any(|&n| wanted(n)) {
        let t = Instant::now();
        let fx = fixture(&track, &set);
        eprintln!("  fixture built in {:.0} s", t.elapsed().as_secs_f64());
        run(6, "end-to-end imitation", &mut || end_to_end(&track, &set, &fx));
        run(7, "noise trend", &mut || noise(&track, &set, &fx));
        run(10, "ablation plumbing", &mut || ablations(&track, &set, &fx));
    }
    run(8, "inference latency", &mut latency);
    run(9, "determinism", &mut determinism);
    if failures.is_empty() {
        eprintln!("acceptance: all criteria passed");
    } else {
        eprintln!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}
