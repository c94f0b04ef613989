use e2r_core::policy::{init_params, PolicyConfig};
use e2r_core::scenario::{build_dataset, Dataset, EpisodeRecord, Frame, Outcome};
use e2r_core::trainer::{sequence_loss, train, TrainerConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> PolicyConfig {
    PolicyConfig { n_beams: 8, embed_dim: 2, hidden_multiplier: 2, ..Default::default() }
}

fn random_episode(rng: &mut ChaCha8Rng, id: u64, len: usize) -> EpisodeRecord {
    let frames = (0..len)
        .map(|_| Frame {
            scan: (0..8).map(|_| rng.gen_range(0.0..10.0)).collect(),
            ego_v: rng.gen_range(0.0..6.0),
            v_cmd: rng.gen_range(0.0..7.0),
            delta_cmd: rng.gen_range(-0.4..0.4),
        })
        .collect();
    EpisodeRecord { scenario_id: id, seed: id, frames, outcome: Outcome::Overtaking, duration_actual: len as f64 * 0.1 }
}

fn dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_dataset((0..5).map(|i| random_episode(&mut rng, i, 3 + i as usize)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_composed_and_non_negative(seed in 0u64..10_000, w in 0.0f64..1.0, len in 1usize..12) {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng);
        let ep = random_episode(&mut rng, 0, len);
        let masks: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.3)).collect();
        let l = sequence_loss(&params, &cfg, &ep, &masks, w).unwrap();
        prop_assert!(l.l_speed >= 0.0 && l.l_steer >= 0.0 && l.loss >= 0.0);
        prop_assert!((l.loss - (w * l.l_speed + l.l_steer)).abs() < 1e-12);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let ds = dataset(1);
    let tcfg = TrainerConfig { epochs: 6, batch_size: 2, seed: 4, ..Default::default() };
    let a = train(&ds, &tiny(), &tcfg, |_| {}).unwrap();
    let b = train(&ds, &tiny(), &tcfg, |_| {}).unwrap();
    assert_eq!(a.best_params, b.best_params);
    assert_eq!(a.curve, b.curve);
}

#[test]
fn full_masking_hides_recorded_speeds() {
    let ds = dataset(2);
    let mut other = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for ep in &mut other.episodes {
        for f in &mut ep.frames {
            f.ego_v = rng.gen_range(0.0..9.0);
        }
    }
    let tcfg = TrainerConfig { epochs: 4, batch_size: 2, mask_p: 1.0, seed: 4, ..Default::default() };
    let a = train(&ds, &tiny(), &tcfg, |_| {}).unwrap();
    let b = train(&other, &tiny(), &tcfg, |_| {}).unwrap();
    assert_eq!(a.curve, b.curve);
}
