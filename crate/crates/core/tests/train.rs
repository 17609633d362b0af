use atlasforge::data::{glyph_templates, split, synth_oracle_dataset, Dataset, DEFAULT_FRACTIONS};
use atlasforge::train::{
    load_checkpoint, log_csv, optimizer_step, save_checkpoint, train, OptimizerConfig, OptimizerKind, OptimizerState,
    TrainConfig, Trainer, LOG_HEADER,
};
use atlasforge::{Error, ParamStore, Tensor};
use proptest::prelude::*;

fn oracle(n: usize, size: usize, seed: u64) -> Dataset {
    let t = glyph_templates(4, size, size).unwrap().remove(3);
    let (ds, _) = synth_oracle_dataset(&t, n, 0.02, 3.0, seed).unwrap();
    split(&ds, DEFAULT_FRACTIONS, seed).unwrap()
}

fn config(ds: &Dataset, iterations: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        seed,
        ..TrainConfig::default()
    }
    .fit_to(ds)
    .unwrap()
}

fn scalar_store(name: &str, v: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert(name, Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
    p
}

#[test]
fn data_term_drops_fivefold_on_oracle_data() {
    let ds = oracle(200, 16, 1);
    let (_, rows) = train(&config(&ds, 2000, 1), &ds).unwrap();
    assert!(rows.iter().all(|r| r.diagnostics.is_finite()));
    let head = rows[..20].iter().map(|r| r.diagnostics.data).sum::<f64>() / 20.0;
    let tail = rows[rows.len() - 100..].iter().map(|r| r.diagnostics.data).sum::<f64>() / 100.0;
    assert!(head >= 5.0 * tail, "initial {head}, final {tail}");
}

#[test]
fn repeated_runs_log_identically() {
    let ds = oracle(40, 16, 2);
    let cfg = config(&ds, 30, 2);
    let (ck_a, log_a) = train(&cfg, &ds).unwrap();
    let (ck_b, log_b) = train(&cfg, &ds).unwrap();
    let text = log_csv(&log_a);
    assert!(text.starts_with(LOG_HEADER));
    assert_eq!(text, log_csv(&log_b));
    assert_eq!(ck_a, ck_b);
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let ds = oracle(40, 16, 3);
    let cfg = config(&ds, 200, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.dtc");

    let mut straight = Trainer::new(cfg.clone(), &ds, None).unwrap();
    let full_log = straight.run_until(200, None).unwrap();

    let mut first = Trainer::new(cfg, &ds, None).unwrap();
    let mut log = first.run_until(100, None).unwrap();
    save_checkpoint(&path, first.checkpoint()).unwrap();
    assert!(dir.path().join("mid.dtc.json").exists());
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(&loaded, first.checkpoint());
    let mut second = Trainer::from_checkpoint(loaded, &ds).unwrap();
    log.extend(second.run_until(200, None).unwrap());

    assert_eq!(log_csv(&log), log_csv(&full_log));
    assert_eq!(second.checkpoint(), straight.checkpoint());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ds = oracle(20, 16, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dtc");
    let (ck, _) = train(&config(&ds, 2, 4), &ds).unwrap();
    save_checkpoint(&path, &ck).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut flipped = good.clone();
    flipped[good.len() / 3] ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checksum { .. })));

    std::fs::write(&path, &good[..good.len() - 9]).unwrap();
    assert!(load_checkpoint(&path).unwrap_err().is_validation());

    let mut magic = good.clone();
    magic[0] = b'X';
    std::fs::write(&path, &magic).unwrap();
    assert!(load_checkpoint(&path).unwrap_err().is_validation());
}

#[test]
fn incompatible_configs_fail_before_training() {
    let ds = oracle(20, 16, 5);
    let mut cfg = config(&ds, 10, 5);
    cfg.arch.height = 32;
    assert!(Trainer::new(cfg, &ds, None).is_err());
    let bad = TrainConfig {
        batch_size: 0,
        ..config(&ds, 10, 5)
    };
    assert!(bad.validate().unwrap_err().is_validation());
}

#[test]
fn sgd_step_is_exact() {
    let mut p = scalar_store("w", 1.25);
    let g = scalar_store("w", 0.5);
    let cfg = OptimizerConfig {
        kind: OptimizerKind::Sgd,
        learning_rate: 0.1,
        ..OptimizerConfig::default()
    };
    optimizer_step(&mut p, &g, &mut OptimizerState::default(), &cfg).unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 1.25 - 0.1 * 0.5);
}

#[test]
fn adam_follows_the_bias_corrected_recursion() {
    let cfg = OptimizerConfig::default();
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon);
    let mut p = scalar_store("w", 0.3);
    let mut state = OptimizerState::default();
    let grads = [0.7, -0.2, 1.5, 0.0];
    let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.3f64);
    for (t, &g) in grads.iter().enumerate() {
        optimizer_step(&mut p, &scalar_store("w", g), &mut state, &cfg).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let k = (t + 1) as i32;
        w -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
        assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-15);
    }
    assert_eq!(state.step, 4);
}

#[test]
fn zero_gradients_leave_parameters_alone() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let mut p = scalar_store("w", -2.0);
        let cfg = OptimizerConfig {
            kind,
            ..OptimizerConfig::default()
        };
        optimizer_step(&mut p, &scalar_store("w", 0.0), &mut OptimizerState::default(), &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], -2.0);
    }
}

#[test]
fn optimizer_rejects_shape_mismatch() {
    let mut p = scalar_store("w", 1.0);
    let mut g = ParamStore::new();
    g.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let err = optimizer_step(&mut p, &g, &mut OptimizerState::default(), &OptimizerConfig::default()).unwrap_err();
    assert!(err.is_validation());
}

proptest! {
    #[test]
    fn first_adam_step_moves_by_about_the_learning_rate(g in prop::sample::select(vec![-3.0, -0.5, 0.01, 0.2, 4.0])) {
        let cfg = OptimizerConfig::default();
        let mut p = scalar_store("w", 0.0);
        optimizer_step(&mut p, &scalar_store("w", g), &mut OptimizerState::default(), &cfg).unwrap();
        let moved = p.get("w").unwrap().data()[0];
        prop_assert!((moved + cfg.learning_rate * g.signum()).abs() < 1e-6);
    }

    #[test]
    fn config_round_trips_through_json(seed in 0u64..1000, iters in 1u64..100_000, lr in 1e-5f64..1e-1) {
        let mut cfg = TrainConfig { seed, iterations: iters, ..TrainConfig::default() };
        cfg.optimizer.learning_rate = lr;
        let text = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
    }
}
