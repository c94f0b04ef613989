use std::fs;
use std::path::Path;

use e2r_core::cli::{run, EXIT_EVAL, EXIT_OK, EXIT_SCENARIO, EXIT_TRACK, EXIT_TRAIN, EXIT_USAGE};
use e2r_core::config::{RunManifest, RUN_MANIFEST_FILE};

const SMALL: &str = r#"
seed = 5

[track]
shape = "stadium"
length = 40.0
width = 3.5

[sim]
n_beams = 36

[scenario]
racelines = ["center"]
k_positions = 4
duration = 2.0

[policy]
n_beams = 36
embed_dim = 2
hidden_multiplier = 1

[trainer]
epochs = 3
batch_size = 2

[eval]
laps_target = 1
heldout_k = 3
heldout_count = 3
noise_levels = [0.0, 0.3]
latency_samples = 1000
min_mean_speed = 4.0
"#;

fn e2r(dir: &Path, args: &[&str]) -> i32 {
    let cfg = dir.join("kit.toml");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    let mut full = vec!["e2r", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    full.extend_from_slice(args);
    run(full)
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(dir.join(RUN_MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn track_gen_and_info() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(["e2r", "--out", dir.path().to_str().unwrap(), "track", "gen", "--shape", "stadium", "--length", "60", "--width", "3"]), EXIT_OK);
    for f in ["track.csv", "boundaries.csv", "raceline_left.csv", "raceline_center.csv", "raceline_right.csv", "track.svg"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let m = manifest(dir.path());
    assert_eq!(m.command, "track gen");
    assert!(m.outputs.contains(&"track.csv".to_string()));

    let circle = dir.path().join("circle.csv");
    let mut csv = String::from("x_m,y_m,w_tr_right_m,w_tr_left_m\n");
    for i in 0..400 {
        let a = i as f64 / 400.0 * std::f64::consts::TAU;
        csv += &format!("{},{},1,1\n", 8.0 * a.cos(), 8.0 * a.sin());
    }
    fs::write(&circle, csv).unwrap();
    assert_eq!(run(["e2r", "track", "info", "--file", circle.to_str().unwrap()]), EXIT_OK);
}

#[test]
fn failures_map_to_documented_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.csv");
    fs::write(&bad, "x_m,y_m,w_tr_right_m,w_tr_left_m\n0,0,1,1\n1,x,1,1\n").unwrap();
    assert_eq!(run(["e2r", "track", "info", "--file", bad.to_str().unwrap()]), EXIT_TRACK);
    assert_eq!(e2r(d, &["train", "--dataset", d.join("missing").to_str().unwrap()]), EXIT_TRAIN);
    assert_eq!(e2r(d, &["eval", "h2h"]), EXIT_EVAL);
    assert_eq!(e2r(d, &["collect", "--track", bad.to_str().unwrap()]), EXIT_TRACK);
    assert_eq!(run(["e2r", "--frobnicate"]), EXIT_USAGE);
    let unknown = d.join("unknown.toml");
    fs::write(&unknown, "[policy]\nhiden = 3\n").unwrap();
    assert_eq!(run(["e2r", "--config", unknown.to_str().unwrap(), "--out", d.to_str().unwrap(), "collect"]), EXIT_USAGE);
    // A gap longer than the track leaves no valid spawn.
    let gap = d.join("gap.toml");
    fs::write(&gap, SMALL.replace("k_positions = 4", "k_positions = 4\nd_gap = 500.0")).unwrap();
    assert_eq!(run(["e2r", "--config", gap.to_str().unwrap(), "--out", d.join("gap").to_str().unwrap(), "collect"]), EXIT_SCENARIO);
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let m = manifest(dir);
    m.outputs.iter().map(|f| (f.clone(), fs::read(dir.join(f)).unwrap())).collect()
}

#[test]
fn pipeline_runs_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        assert_eq!(e2r(dir, &["collect"]), EXIT_OK);
        assert_eq!(e2r(dir, &["train"]), EXIT_OK);
        assert_eq!(e2r(dir, &["eval", "single"]), EXIT_OK);
        assert_eq!(e2r(dir, &["eval", "h2h", "--scenarios", "3"]), EXIT_OK);
        assert_eq!(e2r(dir, &["eval", "noise", "--levels", "0.1,0.3,0.5"]), EXIT_OK);
        assert_eq!(e2r(dir, &["render", "--scenario", "1", "--driver", "policy"]), EXIT_OK);
    }
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), tb.len());
    for ((fa, ba), (fb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(fa, fb);
        assert!(ba == bb, "{fa} differs between runs");
    }
    let h2h: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("reports/h2h.json")).unwrap()).unwrap();
    assert_eq!(h2h["n"], 3);
    let noise: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("reports/noise.json")).unwrap()).unwrap();
    assert_eq!(noise["levels"].as_array().unwrap().len(), 3);
    assert!(a.path().join("loss_curve.csv").exists());
    assert_eq!(fs::read_to_string(a.path().join("loss_curve.csv")).unwrap().lines().next(), Some("epoch,mean_loss,lr"));
}

#[test]
fn lidar_only_ablation_drops_speed_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(e2r(d, &["collect"]), EXIT_OK);
    assert_eq!(e2r(d, &["train", "--ablation", "lidar-only", "--multiplier", "2"]), EXIT_OK);
    let (_, cfg) = e2r_core::policy::load_checkpoint(fs::File::open(d.join("policy.ckpt")).unwrap()).unwrap();
    assert!(!cfg.use_speed_input);
    assert_eq!(cfg.hidden_multiplier, 2);
    assert_eq!(e2r(d, &["eval", "latency", "--samples", "1000"]), EXIT_OK);
    assert!(d.join("reports/latency.csv").exists());
}

#[test]
fn train_overfits_a_single_episode() {
    use e2r_core::scenario::{build_dataset, save_dataset, EpisodeRecord, Frame, Outcome};
    use rand::{Rng, SeedableRng};

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("kit.toml"),
        "seed = 1\n[sim]\nn_beams = 8\n[policy]\nn_beams = 8\nembed_dim = 4\nhidden_multiplier = 8\n\
         [trainer]\nepochs = 500\nbatch_size = 1\nmask_p = 0.0\nlr0 = 1e-2\n",
    )
    .unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let frames = (0..10)
        .map(|_| Frame {
            scan: (0..8).map(|_| rng.gen_range(0.3..10.0)).collect(),
            ego_v: rng.gen_range(1.0..5.0),
            v_cmd: rng.gen_range(1.0..6.0),
            delta_cmd: rng.gen_range(-0.3..0.3),
        })
        .collect();
    let ep = EpisodeRecord { scenario_id: 0, seed: 0, frames, outcome: Outcome::Overtaking, duration_actual: 1.0 };
    save_dataset(&build_dataset(vec![ep]).unwrap(), &d.join("dataset")).unwrap();

    assert_eq!(e2r(d, &["train"]), EXIT_OK);
    let curve = fs::read_to_string(d.join("loss_curve.csv")).unwrap();
    let best = curve.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).fold(f64::INFINITY, f64::min);
    assert!(best < 1e-4, "best loss {best:e}");
}
