//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use atlasforge::analyze::{self, MetricsReport};
use atlasforge::data::{
    build_simulated, glyph_templates, holdout_filter, load_idx, load_image_dir, read_image, split, synth_class_dataset,
    synth_oracle_dataset, write_image, write_image_dir, AttributeLayout, AttributeVector, Dataset, HoldoutSpec,
    ImageFormat, ItemMeta, Regime, Split, DEFAULT_FRACTIONS,
};
use atlasforge::diffeo::{integrate_ss, invert};
use atlasforge::gradsuite;
use atlasforge::nets::Mode;
use atlasforge::train::{load_checkpoint, log_csv, write_tensor_file, Checkpoint, StoredTensor, TrainConfig, Trainer};
use atlasforge::{ImageGrid, Tensor, VectorField};

use crate::{
    AttrArgs, Common, EvaluateArgs, GradCheckArgs, ModeArg, PcaArgs, RegisterArgs, SplitArg, SynthArgs, SynthKind,
    TemplateArgs, TrainArgs,
};

/// Invalid command-line usage (exit status 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

/// A verification that ran but did not pass (exit status 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

const CHECKPOINT_FILE: &str = "checkpoint.dtc";
const SNAPSHOT_FILE: &str = "resolved_config.json";
const GRAD_CHECK_SEED: u64 = 7;
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Serialize)]
struct Snapshot<'a, A: Serialize> {
    command: &'a str,
    args: &'a A,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a TrainConfig>,
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_snapshot<A: Serialize>(dir: &Path, command: &str, args: &A, config: Option<&TrainConfig>) -> Result<()> {
    prepare_dir(dir)?;
    let snap = Snapshot { command, args, config };
    let path = dir.join(SNAPSHOT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&snap)?).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn base_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn idx_labels_path(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    for (a, b) in [
        ("images-idx3-ubyte", "labels-idx1-ubyte"),
        ("images.idx3-ubyte", "labels.idx1-ubyte"),
    ] {
        if name.contains(a) {
            return Some(images.with_file_name(name.replace(a, b)));
        }
    }
    None
}

/// Loads an image directory (with `attributes.csv`) or an IDX image file
/// and its label file, then assigns the default split.
pub fn load_dataset(path: &Path, seed: u64) -> Result<Dataset> {
    let ds = if path.is_dir() {
        load_image_dir(path, path.join("attributes.csv"))?
    } else {
        let labels = idx_labels_path(path).ok_or_else(|| {
            Usage(format!(
                "{}: expected a directory or an *images-idx3-ubyte file",
                path.display()
            ))
        })?;
        load_idx(path, labels)?
    };
    Ok(split(&ds, DEFAULT_FRACTIONS, seed)?)
}

fn apply_holdout(ds: Dataset, spec: &Option<String>) -> Result<Dataset> {
    match spec {
        Some(s) => {
            let spec: HoldoutSpec = s.parse()?;
            Ok(holdout_filter(&ds, &spec)?)
        }
        None => Ok(ds),
    }
}

fn mode_of(m: ModeArg) -> Mode {
    match m {
        ModeArg::Unconditional => Mode::Unconditional,
        ModeArg::Conditional => Mode::Conditional,
        ModeArg::Latent => Mode::Latent,
    }
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let dir = out_dir(&args.common);
    let mut cfg = base_config(&args.common)?;
    if let Some(m) = args.mode {
        cfg.mode = mode_of(m);
    }
    if let Some(n) = args.iters {
        cfg.iterations = n;
    }
    let ds = load_dataset(&args.dataset, cfg.seed)?;
    let ds = apply_holdout(ds, &args.holdout)?;
    let resume = match &args.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    if let Some(ck) = &resume {
        let iterations = cfg.iterations;
        cfg = ck.config.clone();
        cfg.iterations = iterations;
    } else {
        cfg = cfg.fit_to(&ds)?;
    }
    cfg.validate()?;
    write_snapshot(&dir, "train", args, Some(&cfg))?;
    let mut trainer = match resume {
        Some(mut ck) => {
            ck.config.iterations = cfg.iterations;
            Trainer::from_checkpoint(ck, &ds)?
        }
        None => Trainer::new(cfg.clone(), &ds, None)?,
    };
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let rows = trainer.run_until(cfg.iterations, Some(&ckpt_path))?;
    write_text(&dir.join("log.csv"), &log_csv(&rows))?;
    if let Some(last) = rows.last() {
        println!(
            "iteration {}: total {:.6} data {:.6} mean |u| {:.4} px",
            last.iter, last.diagnostics.total, last.diagnostics.data, last.diagnostics.mean_abs_u
        );
    }
    if cfg.mode == Mode::Unconditional {
        let t = analyze::template_image(trainer.checkpoint(), None, None)?;
        write_image(dir.join("template.pgm"), &t)?;
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn encode_attrs(ckpt: &Checkpoint, attrs: &AttrArgs) -> Result<Option<AttributeVector>> {
    let cfg = &ckpt.config;
    if !cfg.mode.uses_attributes() || cfg.arch.attr_len == 0 {
        return Ok(None);
    }
    let meta = ItemMeta {
        class: attrs.class,
        scale: attrs.scale,
        rotation: attrs.rotation,
    };
    let layout = cfg.attributes;
    if layout.len() != cfg.arch.attr_len {
        bail!(Usage(format!(
            "checkpoint records attribute layout {layout:?} but expects {} values",
            cfg.arch.attr_len
        )));
    }
    Ok(Some(
        layout.encode(&meta).map_err(|e| Usage(format!("attributes: {e}")))?,
    ))
}

pub fn template(args: &TemplateArgs) -> Result<()> {
    let out = args.common.out.clone().unwrap_or_else(|| PathBuf::from("template.pgm"));
    let (dir, file) = if out.is_dir() || out.as_os_str().to_string_lossy().ends_with('/') {
        (out.clone(), out.join("template.pgm"))
    } else {
        let parent = out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        (parent.to_path_buf(), out.clone())
    };
    let ckpt = load_checkpoint(&args.checkpoint)?;
    write_snapshot(&dir, "template", args, Some(&ckpt.config))?;
    let a = encode_attrs(&ckpt, &args.attrs)?;
    let image = match &args.image {
        Some(p) => Some(read_image(p)?),
        None => None,
    };
    let t = analyze::template_image(&ckpt, a.as_ref(), image.as_ref())?;
    write_image(&file, &t)?;
    println!("template written to {}", file.display());
    Ok(())
}

fn field_tensor(f: &VectorField) -> StoredTensor {
    StoredTensor::F64(VectorField::stack::<f64>(&[f]).expect("one field"))
}

fn single_item(ckpt: &Checkpoint, image: ImageGrid, attrs: &AttrArgs) -> Result<Dataset> {
    let (meta, layout) = if ckpt.config.mode.uses_attributes() {
        (
            ItemMeta {
                class: attrs.class,
                scale: attrs.scale,
                rotation: attrs.rotation,
            },
            ckpt.config.attributes,
        )
    } else {
        (ItemMeta::default(), AttributeLayout::default())
    };
    Dataset::new(vec![image], vec![meta], layout).map_err(|e| Usage(format!("attributes: {e}")).into())
}

pub fn register(args: &RegisterArgs, inverse_only: bool) -> Result<()> {
    let dir = out_dir(&args.common);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    write_snapshot(
        &dir,
        if inverse_only { "invert" } else { "register" },
        args,
        Some(&ckpt.config),
    )?;
    let image = read_image(&args.image)?;
    let ds = single_item(&ckpt, image, &args.attrs)?;
    let reg = analyze::register(&ckpt, &ds, &[0])?.remove(0);
    let steps = ckpt.config.loss.integration_steps;
    let inv = invert(&reg.velocity, steps)?.into_displacement();
    write_text(&dir.join("phi_inv.csv"), &inv.to_csv())?;
    if inverse_only {
        write_tensor_file(dir.join("phi_inv.dtc"), &[("phi_inv".into(), field_tensor(&inv))])?;
        println!("inverse deformation written to {}", dir.display());
        return Ok(());
    }
    let phi = integrate_ss(&reg.velocity, steps)?.into_displacement();
    write_text(&dir.join("velocity.csv"), &reg.velocity.to_csv())?;
    write_text(&dir.join("phi.csv"), &phi.to_csv())?;
    write_tensor_file(
        dir.join("fields.dtc"),
        &[
            ("velocity".into(), field_tensor(&reg.velocity)),
            ("phi".into(), field_tensor(&phi)),
            ("phi_inv".into(), field_tensor(&inv)),
        ],
    )?;
    write_image(dir.join("template.pgm"), &reg.template)?;
    write_image(dir.join("warped.pgm"), &reg.warped)?;
    println!("registration written to {}", dir.display());
    Ok(())
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
    write_text(&dir.join(format!("{stem}.txt")), &report.summary())
}

fn train_baseline(cfg: TrainConfig, ds: &Dataset, init: Option<&atlasforge::ParamStore<f32>>) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg.clone(), ds, init)?;
    t.run_until(cfg.iterations, None)?;
    Ok(t.into_checkpoint())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let dir = out_dir(&args.common);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let seed = args.common.seed.unwrap_or(ckpt.config.seed);
    write_snapshot(&dir, "evaluate", args, Some(&ckpt.config))?;
    let ds = apply_holdout(load_dataset(&args.dataset, seed)?, &args.holdout)?;
    let split = split_of(args.split);
    let regs = analyze::register_split(&ckpt, &ds, split)?;
    let report = MetricsReport::from_registrations(&regs, &ds)?;
    write_report(&dir, "metrics", &report)?;
    let fields: Vec<_> = regs.iter().map(|r| r.displacement.clone()).collect();
    let jac = analyze::JacobianStats::from_deformations(&fields)?;
    let mut jtext = String::from("bin_lower_edge,count\n");
    for (edge, count) in analyze::JACOBIAN_BIN_EDGES.iter().zip(&jac.histogram) {
        let _ = writeln!(jtext, "{edge},{count}");
    }
    write_text(&dir.join("jacobian.csv"), &jtext)?;
    print!("{}", report.summary());
    if !args.baselines {
        return Ok(());
    }
    if ds.num_classes() == 0 {
        bail!(Usage("baselines need a dataset with class labels".into()));
    }
    let mut base = ckpt.config.clone();
    base.seed = seed;
    if let Some(n) = args.iters {
        base.iterations = n;
    }
    let mut ex_cfg = base.clone();
    ex_cfg.mode = Mode::Exemplar;
    ex_cfg.attributes = AttributeLayout::classes_only(ds.num_classes());
    ex_cfg.arch.attr_len = ds.num_classes();
    let ex_ds = ds.clone().with_layout(ex_cfg.attributes)?;
    let init = analyze::exemplar_init(&ex_cfg, &ex_ds)?;
    let ex = train_baseline(ex_cfg, &ex_ds, Some(&init))?;
    let ex_report = analyze::evaluate_split(&ex, &ex_ds, split)?;
    write_report(&dir, "metrics_exemplar", &ex_report)?;
    println!("exemplar baseline:\n{}", ex_report.summary());

    let mut dec_cfg = base.clone();
    dec_cfg.mode = Mode::Conditional;
    dec_cfg = dec_cfg.fit_to(&ds)?;
    dec_cfg.frozen.push("decoder/".into());
    let decoder = analyze::train_decoder_only(&dec_cfg, &ds, base.iterations)?;
    let dec = train_baseline(dec_cfg, &ds, Some(&decoder))?;
    let dec_report = analyze::evaluate_split(&dec, &ds, split)?;
    write_report(&dir, "metrics_decoder", &dec_report)?;
    println!("decoder-only baseline:\n{}", dec_report.summary());
    Ok(())
}

pub fn pca(args: &PcaArgs) -> Result<()> {
    let dir = out_dir(&args.common);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let seed = args.common.seed.unwrap_or(ckpt.config.seed);
    write_snapshot(&dir, "pca", args, Some(&ckpt.config))?;
    let ds = load_dataset(&args.dataset, seed)?;
    let p = analyze::pca_velocity(&ckpt, &ds, split_of(args.split), args.components)?;
    let mut entries = vec![("mean".to_string(), field_tensor(&p.mean))];
    let mut csv = String::from("component,variance,explained_ratio,defined\n");
    for (k, c) in p.components.iter().enumerate() {
        entries.push((format!("component/{k}"), field_tensor(c)));
        let _ = writeln!(csv, "{k},{},{},{}", p.variances[k], p.explained_ratio(k), p.defined[k]);
    }
    entries.push((
        "variances".into(),
        StoredTensor::F64(Tensor::new(vec![p.variances.len()], p.variances.clone())?),
    ));
    write_tensor_file(dir.join("pca.dtc"), &entries)?;
    write_text(&dir.join("variances.csv"), &csv)?;
    let a = encode_attrs(&ckpt, &args.attrs)?;
    for (k, c) in p.components.iter().enumerate() {
        if !p.defined[k] {
            continue;
        }
        let sd = p.variances[k].sqrt();
        let coeffs: Vec<f64> = [-2.0, -1.0, 0.0, 1.0, 2.0].iter().map(|m| m * sd).collect();
        let images = analyze::synth_along_component(&ckpt, a.as_ref(), c, &coeffs)?;
        write_image(dir.join(format!("pc{k}.pgm")), &analyze::image_strip(&images)?)?;
    }
    print!("{csv}");
    Ok(())
}

pub fn synth_data(args: &SynthArgs) -> Result<()> {
    let dir = out_dir(&args.common);
    let seed = args.common.seed.unwrap_or(0);
    write_snapshot(&dir, "synth-data", args, None)?;
    if args.n == 0 {
        bail!(Usage("--n must be positive".into()));
    }
    let regime = match args.kind {
        SynthKind::Oracle => None,
        SynthKind::Class => Some(Regime::Class),
        SynthKind::ClassScale => Some(Regime::ClassScale),
        SynthKind::ClassScaleRot => Some(Regime::ClassScaleRot),
    };
    let ds = match (regime, &args.dataset) {
        (Some(r), Some(src)) => {
            let src = load_dataset(src, seed)?;
            build_simulated(&src, r, seed)?
        }
        (Some(r), None) => {
            let protos = glyph_templates(args.classes, args.size, args.size)?;
            for (k, p) in protos.iter().enumerate() {
                write_image(dir.join(format!("prototype_{k}.pgm")), p)?;
            }
            let (ds, _) = synth_class_dataset(&protos, args.n, args.noise, args.amplitude, seed)?;
            build_simulated(&ds, r, seed)?
        }
        (None, _) => {
            if args.class >= 10 {
                bail!(Usage(format!("--class {} has no glyph prototype", args.class)));
            }
            let template = glyph_templates(args.class + 1, args.size, args.size)?.remove(args.class);
            let (ds, fields) = synth_oracle_dataset(&template, args.n, args.noise, args.amplitude, seed)?;
            write_image(dir.join("template.pgm"), &template)?;
            let entries: Vec<_> = fields
                .iter()
                .enumerate()
                .map(|(i, f)| (format!("velocity/{i:05}"), field_tensor(f)))
                .collect();
            write_tensor_file(dir.join("fields.dtc"), &entries)?;
            ds
        }
    };
    let images = dir.join("images");
    write_image_dir(&ds, &images, ImageFormat::Pgm)?;
    println!("{} images written to {}", ds.len(), images.display());
    Ok(())
}

/// Runs the gradient suite and writes `gradcheck.csv`.
pub fn grad_check(args: &GradCheckArgs) -> Result<()> {
    let dir = out_dir(&args.common);
    let seed = args.common.seed.unwrap_or(GRAD_CHECK_SEED);
    write_snapshot(&dir, "grad-check", args, None)?;
    let cases = gradsuite::run_suite(seed)?;
    let mut text = String::new();
    let _ = writeln!(text, "case,max_rel_error,strict_max_rel_error,unresolved,entries,pass");
    for c in &cases {
        let r = &c.report;
        let _ = writeln!(
            text,
            "{},{:.3e},{:.3e},{},{},{}",
            c.name,
            r.max_rel_error(),
            r.strict_max_rel_error(),
            r.unresolved(),
            r.entries(),
            r.passes(GRAD_CHECK_TOLERANCE)
        );
    }
    let worst = gradsuite::max_rel_error(&cases);
    let _ = writeln!(
        text,
        "max relative error {worst:.3e} (tolerance {GRAD_CHECK_TOLERANCE:e})"
    );
    write_text(&dir.join("gradcheck.csv"), &text)?;
    print!("{text}");
    if cases.iter().all(|c| c.report.passes(GRAD_CHECK_TOLERANCE)) {
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed: max relative error {worst:.3e}")).into())
    }
}
