//! Acceptance criteria, one pass/fail line each.
//!
//! Run all with `cargo test --test acceptance`, or a subset by number:
//! `cargo test --test acceptance -- 2 3`. The process fails when any
//! criterion fails, except those listed in `KNOWN_FAILURES`, which are still
//! reported as FAIL with their measurements.

use std::cell::OnceCell;
use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use atlasforge::analyze::{self, JacobianStats, MetricsReport};
use atlasforge::data::{
    band_limited_field, build_simulated, encode_attributes, glyph_templates, holdout_filter, split,
    synth_class_dataset, synth_oracle_dataset, synth_transform, Dataset, HoldoutSpec, Regime, Split, DEFAULT_FRACTIONS,
};
use atlasforge::diffeo::{
    compose, integrate_euler, integrate_ss, interior_max_abs_diff, invert, DeformationField, INTERIOR_MARGIN,
};
use atlasforge::gradsuite;
use atlasforge::nets::Mode;
use atlasforge::train::{load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, Trainer};
use atlasforge::{Error, ImageGrid, VectorField};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_SEED: u64 = 7;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const FIELD_COUNT: usize = 20;
const FIELD_SIZE: usize = 32;
const FIELD_MAX_PX: f64 = 3.0;
const FIELD_SEED: u64 = 2024;
const EULER_STEPS: usize = 1024;
const INTEGRATION_TOLERANCE_PX: f64 = 1e-2;
const INTEGRATION_BUDGET: Duration = Duration::from_secs(60);
const INVERSE_TOLERANCE_PX: f64 = 0.05;

const ORACLE_N: usize = 500;
const ORACLE_NOISE: f64 = 0.05;
const ORACLE_AMPLITUDE: f64 = 3.0;
const ORACLE_GLYPH: usize = 3;
const ORACLE_SEED: u64 = 4;
const ORACLE_ITERATIONS: u64 = 5000;
const TEMPLATE_MSE_TOLERANCE: f64 = 0.02;
const MEAN_DISPLACEMENT_TOLERANCE_PX: f64 = 0.5;
const ORACLE_BUDGET: Duration = Duration::from_secs(45 * 60);
const FOLDING_TOLERANCE: f64 = 0.001;

const CLASS_COUNT: usize = 3;
const CENTRALITY_PER_CLASS: usize = 150;
const CENTRALITY_SEED: u64 = 6;
const CENTRALITY_ITERATIONS: u64 = 1500;

const SCALE_PER_CLASS: usize = 200;
const SCALE_AMPLITUDE: f64 = 2.0;
const SCALE_SEED: u64 = 8;
const SCALE_ITERATIONS: u64 = 2500;
const MONOTONE_SCALES: [f64; 5] = [0.7, 0.85, 1.0, 1.15, 1.3];
const FOREGROUND_THRESHOLD: f64 = 0.5;
const HELD_OUT_CLASS: usize = 1;
const HELD_OUT_SCALES: [f64; 5] = [0.9, 0.95, 1.0, 1.05, 1.1];
const HOLDOUT_RATIO_TOLERANCE: f64 = 2.0;

const PCA_FIELDS: usize = 20;
const PCA_SIZE: usize = 16;
const PCA_COMPONENTS: usize = 5;
const PCA_TOLERANCE: f64 = 1e-6;
const RANK_ONE_COSINE: f64 = 0.99;
const RANK_ONE_EXPLAINED: f64 = 0.999;

const LABELLED_IMAGES: usize = 100;
const DICE_TOLERANCE: f64 = 0.9;

/// Criteria that are implemented as stated but cannot be met by the
/// prescribed method; see the project's decision notes for the analysis.
const KNOWN_FAILURES: [u32; 1] = [2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn field_family() -> Vec<VectorField> {
    (0..FIELD_COUNT as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(FIELD_SEED + i);
            band_limited_field(FIELD_SIZE, FIELD_SIZE, FIELD_MAX_PX, &mut rng)
        })
        .collect()
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let cases = gradsuite::run_suite(GRAD_SEED).expect("suite runs");
    let elapsed = start.elapsed();
    let failing: Vec<&str> = cases
        .iter()
        .filter(|c| !c.report.passes(GRAD_TOLERANCE))
        .map(|c| c.name.as_str())
        .collect();
    let worst = gradsuite::max_rel_error(&cases);
    let unresolved: usize = cases.iter().map(|c| c.report.unresolved()).sum();
    let entries: usize = cases.iter().map(|c| c.report.entries()).sum();
    let pass = failing.is_empty() && elapsed < GRAD_BUDGET;
    outcome(
        pass,
        format!(
            "{} cases, max rel error {worst:.2e} < {GRAD_TOLERANCE:e}, {unresolved}/{entries} entries unresolved, failing {failing:?}, {} (budget {})",
            cases.len(),
            fmt_secs(elapsed),
            fmt_secs(GRAD_BUDGET)
        ),
    )
}

fn criterion_integration() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut per_field = Vec::new();
    for v in field_family() {
        let ss = integrate_ss(&v, 7).expect("integrates");
        let euler = integrate_euler(&v, EULER_STEPS).expect("integrates");
        let e = interior_max_abs_diff(ss.displacement(), euler.displacement(), INTERIOR_MARGIN).expect("same dims");
        per_field.push(e);
        worst = worst.max(e);
    }
    let elapsed = start.elapsed();
    let mean = per_field.iter().sum::<f64>() / per_field.len() as f64;
    outcome(
        worst < INTEGRATION_TOLERANCE_PX && elapsed < INTEGRATION_BUDGET,
        format!(
            "max interior error {worst:.4} px (mean over fields {mean:.4}) vs {INTEGRATION_TOLERANCE_PX} px, {}",
            fmt_secs(elapsed)
        ),
    )
}

fn criterion_inverse() -> Outcome {
    let mut means = Vec::new();
    for v in field_family() {
        let fwd = integrate_ss(&v, 7).expect("integrates");
        let back = invert(&v, 7).expect("integrates");
        let id = compose(&fwd, &back).expect("composes");
        means.push(atlasforge::diffeo::interior_mean_norm(
            id.displacement(),
            INTERIOR_MARGIN,
        ));
    }
    let pooled = means.iter().sum::<f64>() / means.len() as f64;
    let worst = means.iter().cloned().fold(0.0, f64::max);
    outcome(
        pooled < INVERSE_TOLERANCE_PX,
        format!("interior mean |phi_v o phi_-v - Id| = {pooled:.4} px over the family (worst field {worst:.4}) vs {INVERSE_TOLERANCE_PX} px"),
    )
}

struct OracleRun {
    truth: ImageGrid,
    fields: Vec<VectorField>,
    dataset: Dataset,
    checkpoint: Checkpoint,
    elapsed: Duration,
}

fn train_oracle() -> OracleRun {
    let truth = glyph_templates(10, FIELD_SIZE, FIELD_SIZE)
        .expect("glyphs")
        .remove(ORACLE_GLYPH);
    let (ds, fields) =
        synth_oracle_dataset(&truth, ORACLE_N, ORACLE_NOISE, ORACLE_AMPLITUDE, ORACLE_SEED).expect("oracle data");
    let ds = split(&ds, DEFAULT_FRACTIONS, ORACLE_SEED).expect("split");
    let config = TrainConfig {
        iterations: ORACLE_ITERATIONS,
        seed: ORACLE_SEED,
        log_interval: 500,
        ..TrainConfig::default()
    }
    .fit_to(&ds)
    .expect("config");
    let start = Instant::now();
    let mut trainer = Trainer::new(config, &ds, None).expect("trainer");
    trainer.run_until(ORACLE_ITERATIONS, None).expect("training");
    let elapsed = start.elapsed();
    OracleRun {
        truth,
        fields,
        checkpoint: trainer.into_checkpoint(),
        dataset: ds,
        elapsed,
    }
}

fn criterion_recovery(run: &OracleRun) -> Outcome {
    let learned = analyze::template_image(&run.checkpoint, None, None).expect("template");
    let mse = learned.mse(&run.truth).expect("same dims");
    let report = analyze::evaluate_split(&run.checkpoint, &run.dataset, Split::Test).expect("evaluation");
    let mean_px = report.overall.mean_field_norm_per_pixel;
    outcome(
        mse < TEMPLATE_MSE_TOLERANCE && mean_px < MEAN_DISPLACEMENT_TOLERANCE_PX && run.elapsed < ORACLE_BUDGET,
        format!(
            "template MSE {mse:.5} vs {TEMPLATE_MSE_TOLERANCE}, mean test displacement {mean_px:.4} px/pixel vs {MEAN_DISPLACEMENT_TOLERANCE_PX}, training {} (budget {})",
            fmt_secs(run.elapsed),
            fmt_secs(ORACLE_BUDGET)
        ),
    )
}

fn criterion_folding(run: &OracleRun) -> Outcome {
    let regs = analyze::register_split(&run.checkpoint, &run.dataset, Split::Test).expect("registration");
    let fields: Vec<_> = regs.into_iter().map(|r| r.displacement).collect();
    let stats = JacobianStats::from_deformations(&fields).expect("determinants");
    let frac = stats.fraction_nonpositive();
    outcome(
        frac <= FOLDING_TOLERANCE,
        format!(
            "{} of {} determinants non-positive ({frac:.5}) vs {FOLDING_TOLERANCE}; min det {:.3}",
            stats.nonpositive, stats.count, stats.min
        ),
    )
}

fn criterion_labels(run: &OracleRun) -> Outcome {
    let (h, w) = run.truth.dims();
    let truth_labels: Vec<u32> = (0..h * w)
        .map(|p| {
            if run.truth.data()[p] <= FOREGROUND_THRESHOLD {
                0
            } else if p % w < w / 2 {
                1
            } else {
                2
            }
        })
        .collect();
    let idx: Vec<usize> = run
        .dataset
        .indices(Split::Train)
        .into_iter()
        .take(LABELLED_IMAGES)
        .collect();
    let maps: Vec<Vec<u32>> = idx
        .iter()
        .map(|&i| {
            let phi = integrate_ss(&run.fields[i], 7).expect("integrates");
            atlasforge::diffeo::warp_nearest(&truth_labels, (h, w), &phi).expect("warps")
        })
        .collect();
    let propagated = analyze::propagate_labels(&run.checkpoint, &run.dataset, &idx, &maps).expect("propagation");
    let scores = analyze::dice(&propagated, &truth_labels, &[0, 1, 2]).expect("dice");

    // Diagnostics only. A vote with no registration shows how much the check
    // depends on registering; carrying the propagated labels to each test
    // subject through its predicted deformation gives per-subject overlap.
    let steps = run.checkpoint.config.loss.integration_steps;
    let zero = vec![VectorField::zeros(h, w); maps.len()];
    let unregistered = analyze::propagate_labels_with_fields(&maps, &zero, (h, w), steps).expect("propagation");
    let control = analyze::dice(&unregistered, &truth_labels, &[1, 2]).expect("dice");
    let test = run.dataset.indices(Split::Test);
    let regs = analyze::register(&run.checkpoint, &run.dataset, &test).expect("registration");
    let mut per_subject = [0.0; 3];
    for (&i, r) in test.iter().zip(&regs) {
        let truth = integrate_ss(&run.fields[i], 7).expect("integrates");
        let expected = atlasforge::diffeo::warp_nearest(&truth_labels, (h, w), &truth).expect("warps");
        let phi = DeformationField::from_displacement(r.displacement.clone());
        let carried = atlasforge::diffeo::warp_nearest(&propagated, (h, w), &phi).expect("warps");
        let d = analyze::dice(&carried, &expected, &[0, 1, 2]).expect("dice");
        per_subject
            .iter_mut()
            .zip(d)
            .for_each(|(acc, v)| *acc += v / test.len() as f64);
    }
    outcome(
        scores.iter().all(|&d| d > DICE_TOLERANCE),
        format!(
            "Dice per label (background, left stroke, right stroke) = {:.4?} vs > {DICE_TOLERANCE}, {} labelled images; \
             unregistered vote stroke Dice {:.4?}; mean Dice on {} test subjects {:.4?}",
            scores,
            idx.len(),
            control,
            test.len(),
            per_subject
        ),
    )
}

fn class_average_centrality(report: &MetricsReport) -> f64 {
    report.per_class.values().map(|m| m.mean_field_sq_norm).sum::<f64>() / report.per_class.len() as f64
}

fn criterion_centrality() -> Outcome {
    let protos = glyph_templates(CLASS_COUNT, FIELD_SIZE, FIELD_SIZE).expect("glyphs");
    let (ds, _) = synth_class_dataset(
        &protos,
        CENTRALITY_PER_CLASS,
        ORACLE_NOISE,
        ORACLE_AMPLITUDE,
        CENTRALITY_SEED,
    )
    .expect("class data");
    let ds = split(&ds, DEFAULT_FRACTIONS, CENTRALITY_SEED).expect("split");
    let base = TrainConfig {
        iterations: CENTRALITY_ITERATIONS,
        seed: CENTRALITY_SEED,
        log_interval: 500,
        ..TrainConfig::default()
    };
    let learned_cfg = TrainConfig {
        mode: Mode::Conditional,
        ..base.clone()
    }
    .fit_to(&ds)
    .expect("config");
    let exemplar_cfg = TrainConfig {
        mode: Mode::Exemplar,
        ..base
    }
    .fit_to(&ds)
    .expect("config");
    let run = |cfg: TrainConfig, init| {
        let mut t = Trainer::new(cfg, &ds, init).expect("trainer");
        t.run_until(CENTRALITY_ITERATIONS, None).expect("training");
        let ck = t.into_checkpoint();
        analyze::evaluate_split(&ck, &ds, Split::Test).expect("evaluation")
    };
    let learned = run(learned_cfg, None);
    let init = analyze::exemplar_init(&exemplar_cfg, &ds).expect("exemplars");
    let exemplar = run(exemplar_cfg, Some(&init));
    let (l, e) = (class_average_centrality(&learned), class_average_centrality(&exemplar));
    outcome(
        l < e,
        format!(
            "class-averaged |mean u|^2: learned {l:.4} px^2 < exemplar {e:.4} px^2 (mean |u|^2 {:.2} vs {:.2})",
            learned.overall.mean_sq_displacement, exemplar.overall.mean_sq_displacement
        ),
    )
}

fn scale_dataset(protos: &[ImageGrid]) -> Dataset {
    let (ds, _) =
        synth_class_dataset(protos, SCALE_PER_CLASS, ORACLE_NOISE, SCALE_AMPLITUDE, SCALE_SEED).expect("class data");
    let ds = build_simulated(&ds, Regime::ClassScale, SCALE_SEED).expect("scaled");
    split(&ds, DEFAULT_FRACTIONS, SCALE_SEED).expect("split")
}

fn train_conditional(ds: &Dataset) -> Checkpoint {
    let cfg = TrainConfig {
        mode: Mode::Conditional,
        iterations: SCALE_ITERATIONS,
        seed: SCALE_SEED,
        log_interval: 500,
        ..TrainConfig::default()
    }
    .fit_to(ds)
    .expect("config");
    let mut t = Trainer::new(cfg, ds, None).expect("trainer");
    t.run_until(SCALE_ITERATIONS, None).expect("training");
    t.into_checkpoint()
}

fn conditional_template(ck: &Checkpoint, class: usize, scale: f64) -> ImageGrid {
    let a = encode_attributes(Some(class), CLASS_COUNT, Some(scale), None).expect("attributes");
    analyze::template_image(ck, Some(&a), None).expect("template")
}

fn criterion_scale_monotone() -> Outcome {
    let protos = glyph_templates(CLASS_COUNT, FIELD_SIZE, FIELD_SIZE).expect("glyphs");
    let ds = scale_dataset(&protos);
    let ck = train_conditional(&ds);
    let mut all = true;
    let mut detail = Vec::new();
    for k in 0..CLASS_COUNT {
        let areas: Vec<usize> = MONOTONE_SCALES
            .iter()
            .map(|&s| conditional_template(&ck, k, s).area_above(FOREGROUND_THRESHOLD))
            .collect();
        all &= areas.windows(2).all(|w| w[0] <= w[1]);
        detail.push(format!("class {k}: {areas:?}"));
    }
    outcome(
        all,
        format!(
            "foreground areas over scales {MONOTONE_SCALES:?}: {}",
            detail.join("; ")
        ),
    )
}

fn criterion_holdout() -> Outcome {
    let protos = glyph_templates(CLASS_COUNT, FIELD_SIZE, FIELD_SIZE).expect("glyphs");
    let ds = scale_dataset(&protos);
    let spec: HoldoutSpec = format!(
        "classes={HELD_OUT_CLASS};scale={}:{}",
        HELD_OUT_SCALES[0],
        HELD_OUT_SCALES[HELD_OUT_SCALES.len() - 1]
    )
    .parse()
    .expect("holdout spec parses");
    let ds = holdout_filter(&ds, &spec).expect("holdout");
    let ck = train_conditional(&ds);
    let mse_at = |k: usize| -> f64 {
        HELD_OUT_SCALES
            .iter()
            .map(|&s| {
                let truth = synth_transform(&protos[k], s, 0.0).expect("transform");
                conditional_template(&ck, k, s).mse(&truth).expect("same dims")
            })
            .sum::<f64>()
            / HELD_OUT_SCALES.len() as f64
    };
    let held = mse_at(HELD_OUT_CLASS);
    let others: Vec<f64> = (0..CLASS_COUNT).filter(|&k| k != HELD_OUT_CLASS).map(mse_at).collect();
    let reference = others.iter().sum::<f64>() / others.len() as f64;
    let ratio = held / reference;
    outcome(
        ratio <= HOLDOUT_RATIO_TOLERANCE,
        format!(
            "held-out class MSE {held:.5}, other classes {reference:.5} ({others:.5?}), ratio {ratio:.3} vs <= {HOLDOUT_RATIO_TOLERANCE}"
        ),
    )
}

fn criterion_pca() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let fields: Vec<VectorField> = (0..PCA_FIELDS)
        .map(|_| band_limited_field(PCA_SIZE, PCA_SIZE, 2.0, &mut rng))
        .collect();
    let pca = analyze::pca_fields(&fields, PCA_COMPONENTS).expect("pca");

    let d = 2 * PCA_SIZE * PCA_SIZE;
    let n = fields.len();
    let mean: Vec<f64> = (0..d)
        .map(|j| fields.iter().map(|f| f.data()[j]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, d, |i, j| fields[i].data()[j] - mean[j]);
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut comp_err: f64 = 0.0;
    let mut var_err: f64 = 0.0;
    for k in 0..PCA_COMPONENTS {
        let col = eig.eigenvectors.column(order[k]);
        let ours = pca.components[k].data();
        let dot: f64 = ours.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
        let sign = dot.signum();
        let e = ours
            .iter()
            .zip(col.iter())
            .map(|(a, b)| (a - sign * b).abs())
            .fold(0.0, f64::max);
        comp_err = comp_err.max(e);
        var_err = var_err.max((pca.variances[k] - eig.eigenvalues[order[k]]).abs());
    }

    let basis = band_limited_field(PCA_SIZE, PCA_SIZE, 1.0, &mut rng);
    let rank_one: Vec<VectorField> = (0..PCA_FIELDS).map(|i| basis.scaled(i as f64 - 7.5)).collect();
    let r1 = analyze::pca_fields(&rank_one, 1).expect("pca");
    let norm = basis.sq_norm().sqrt();
    let cos = r1.components[0]
        .data()
        .iter()
        .zip(basis.data())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        .abs()
        / norm;
    let explained = r1.explained_ratio(0);
    outcome(
        comp_err < PCA_TOLERANCE && var_err < PCA_TOLERANCE && cos > RANK_ONE_COSINE && explained > RANK_ONE_EXPLAINED,
        format!(
            "top-{PCA_COMPONENTS} components max deviation {comp_err:.2e}, variances {var_err:.2e} vs {PCA_TOLERANCE:e}; rank-1 |cos| {cos:.6}, explained {explained:.6}"
        ),
    )
}

fn criterion_determinism() -> Outcome {
    let truth = glyph_templates(10, 16, 16).expect("glyphs").remove(ORACLE_GLYPH);
    let (ds, _) = synth_oracle_dataset(&truth, 64, ORACLE_NOISE, 2.0, 11).expect("oracle data");
    let ds = split(&ds, DEFAULT_FRACTIONS, 11).expect("split");
    let cfg = TrainConfig {
        iterations: 40,
        seed: 11,
        ..TrainConfig::default()
    }
    .fit_to(&ds)
    .expect("config");
    let straight = || {
        let mut t = Trainer::new(cfg.clone(), &ds, None).expect("trainer");
        let rows = t.run_until(40, None).expect("training");
        (atlasforge::train::log_csv(&rows), t.into_checkpoint())
    };
    let (log_a, ck_a) = straight();
    let (log_b, ck_b) = straight();
    let identical_runs = log_a == log_b && ck_a.params == ck_b.params;

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("half.dtc");
    let mut first = Trainer::new(cfg.clone(), &ds, None).expect("trainer");
    let mut rows = first.run_until(20, None).expect("training");
    save_checkpoint(&path, first.checkpoint()).expect("save");
    let loaded = load_checkpoint(&path).expect("load");
    let round_trip = &loaded == first.checkpoint();
    let mut second = Trainer::from_checkpoint(loaded, &ds).expect("resume");
    rows.extend(second.run_until(40, None).expect("training"));
    let resumed = atlasforge::train::log_csv(&rows) == log_a && second.params() == &ck_a.params;

    let mut bytes = std::fs::read(&path).expect("read");
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).expect("write");
    let rejected = matches!(load_checkpoint(&path), Err(Error::Checksum { .. }));
    outcome(
        identical_runs && round_trip && resumed && rejected,
        format!(
            "repeat runs identical: {identical_runs}; save/load exact: {round_trip}; resume matches: {resumed}; corrupted file rejected by CRC: {rejected}"
        ),
    )
}

fn main() {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| selected.is_empty() || selected.contains(&id);
    let oracle: OnceCell<OracleRun> = OnceCell::new();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "gradient correctness", Box::new(criterion_gradients)),
        (2, "integration oracle", Box::new(criterion_integration)),
        (3, "inverse consistency", Box::new(criterion_inverse)),
        (
            4,
            "template recovery",
            Box::new(|| criterion_recovery(oracle.get_or_init(train_oracle))),
        ),
        (
            5,
            "deformation regularity",
            Box::new(|| criterion_folding(oracle.get_or_init(train_oracle))),
        ),
        (6, "centrality ordering", Box::new(criterion_centrality)),
        (7, "conditional scale effect", Box::new(criterion_scale_monotone)),
        (8, "missing-attribute generalization", Box::new(criterion_holdout)),
        (9, "velocity PCA", Box::new(criterion_pca)),
        (
            10,
            "label propagation",
            Box::new(|| criterion_labels(oracle.get_or_init(train_oracle))),
        ),
        (11, "determinism and persistence", Box::new(criterion_determinism)),
    ];
    let mut unexpected = Vec::new();
    let mut ran = 0;
    for (id, name, run) in &criteria {
        if !wanted(*id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = run();
        let known = KNOWN_FAILURES.contains(id);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known limitation)",
            (false, false) => "FAIL",
        };
        println!(
            "[{tag}] criterion {id:>2} {name}: {} [{}]",
            o.detail,
            fmt_secs(start.elapsed())
        );
        if !o.pass && !known {
            unexpected.push(*id);
        }
    }
    println!(
        "acceptance: {ran} criteria run, unexpected failures: {unexpected:?}, known failures: {:?}",
        KNOWN_FAILURES.iter().filter(|id| wanted(**id)).collect::<Vec<_>>()
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
