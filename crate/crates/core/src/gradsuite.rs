//! Finite-difference verification of every graph primitive and of the full
//! training objective on small `f64` instances.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{check_gradients, Axis, GradCheckReport, Graph, NodeId, DEFAULT_EPSILON};
use crate::data::{band_limited_field, AttributeVector};
use crate::diffeo::{integrate_ss_graph, warp_graph};
use crate::error::Result;
use crate::grid::{ImageGrid, VectorField};
use crate::nets::{ArchConfig, Mode, Model};
use crate::objective::{Likelihood, LossConfig, LossGraph, RunningMeanField};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Side length of the end-to-end instances.
pub const SUITE_SIZE: usize = 16;

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn random_params(g: &Graph, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Result<ParamStore<f64>> {
    let mut p = ParamStore::new();
    for (name, shape) in g.param_specs() {
        p.insert(name, Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)))?;
    }
    Ok(p)
}

fn primitive(
    name: &str,
    seed: u64,
    lo: f64,
    hi: f64,
    build: impl Fn(&mut Graph) -> Result<NodeId>,
) -> Result<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let out = build(&mut g)?;
    let shape = g.shape(out).to_vec();
    let weights = g.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let m = g.mul(out, weights)?;
    let loss = g.sum(m);
    let params = random_params(&g, &mut rng, lo, hi)?;
    let report = check_gradients(&g, loss, &HashMap::new(), &params, DEFAULT_EPSILON)?;
    Ok(SuiteCase {
        name: name.to_string(),
        report,
    })
}

fn primitives(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut out = vec![
        primitive("dense", seed, -1.0, 1.0, |g| {
            let x = g.param("x", &[3, 5])?;
            let w = g.param("w", &[4, 5])?;
            let b = g.param("b", &[4])?;
            g.dense(x, w, b)
        })?,
        primitive("upsample_concat_reshape", seed, -1.0, 1.0, |g| {
            let x = g.param("x", &[2, 2, 3, 2])?;
            let u = g.upsample2(x)?;
            let y = g.param("y", &[2, 1, 6, 4])?;
            let c = g.concat(&[u, y])?;
            g.reshape(c, &[2, 72])
        })?,
        primitive("relu", seed, -1.0, 1.0, |g| {
            let x = g.param("x", &[20])?;
            Ok(g.relu(x))
        })?,
        primitive("leaky_relu", seed, -1.0, 1.0, |g| {
            let x = g.param("x", &[20])?;
            Ok(g.leaky_relu(x, 0.2))
        })?,
        primitive("sigmoid", seed, -3.0, 3.0, |g| {
            let x = g.param("x", &[20])?;
            Ok(g.sigmoid(x))
        })?,
        primitive("elementwise", seed, -1.0, 1.0, |g| {
            let a = g.param("a", &[3, 4])?;
            let b = g.param("b", &[3, 4])?;
            let s = g.add(a, b)?;
            let d = g.sub(a, b)?;
            let m = g.mul(s, d)?;
            let sq = g.square(m);
            let k = g.scale(sq, -1.5);
            Ok(g.add_scalar(k, 0.25))
        })?,
        primitive("div", seed, -1.0, 1.0, |g| {
            let a = g.param("a", &[6])?;
            let b = g.param("b", &[6])?;
            let bb = g.square(b);
            let den = g.add_scalar(bb, 0.5);
            g.div(a, den)
        })?,
        primitive("reductions", seed, -1.0, 1.0, |g| {
            let x = g.param("x", &[3, 2, 2, 2])?;
            let bm = g.batch_mean(x);
            let t = g.tile_batch(bm, 3)?;
            let sq = g.square(t);
            let m = g.mean(sq);
            let s = g.sum(x);
            let s2 = g.square(s);
            g.add(m, s2)
        })?,
        primitive("grid_sample", seed, -2.5, 2.5, |g| {
            let src = g.param("src", &[2, 3, 6, 7])?;
            let disp = g.param("disp", &[2, 2, 6, 7])?;
            g.grid_sample(src, disp)
        })?,
        primitive("box_mean", seed, -1.0, 1.0, |g| {
            let x = g.param("x", &[1, 2, 7, 6])?;
            g.box_mean(x, 5)
        })?,
    ];
    for stride in [1, 2] {
        out.push(primitive(&format!("conv2d_stride{stride}"), seed, -1.0, 1.0, |g| {
            let x = g.param("x", &[2, 3, 6, 4])?;
            let w = g.param("w", &[2, 3, 3, 3])?;
            let b = g.param("b", &[2])?;
            g.conv2d(x, w, b, stride)
        })?);
    }
    for (axis, name) in [(Axis::X, "forward_diff_x"), (Axis::Y, "forward_diff_y")] {
        out.push(primitive(name, seed, -1.0, 1.0, |g| {
            let x = g.param("x", &[2, 2, 4, 5])?;
            g.forward_diff(x, axis)
        })?);
    }
    Ok(out)
}

fn integration_case(seed: u64) -> Result<SuiteCase> {
    let n = SUITE_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let img = g.param("image", &[1, 1, n, n])?;
    let v = g.param("velocity", &[1, 2, n, n])?;
    let u = integrate_ss_graph(&mut g, v, 7)?;
    let warped = warp_graph(&mut g, img, u)?;
    let target = g.constant(Tensor::from_fn(&[1, 1, n, n], |_| rng.gen()));
    let diff = g.sub(warped, target)?;
    let sq = g.square(diff);
    let loss = g.sum(sq);
    let mut p = ParamStore::new();
    p.insert("image", Tensor::from_fn(&[1, 1, n, n], |_| rng.gen()))?;
    let vf = band_limited_field(n, n, 2.0, &mut rng);
    p.insert("velocity", VectorField::stack::<f64>(&[&vf])?)?;
    Ok(SuiteCase {
        name: "scaling_squaring_warp".into(),
        report: check_gradients(&g, loss, &HashMap::new(), &p, DEFAULT_EPSILON)?,
    })
}

/// A narrow architecture so that every parameter can be perturbed.
pub fn suite_arch(attr_len: usize) -> ArchConfig {
    ArchConfig {
        height: SUITE_SIZE,
        width: SUITE_SIZE,
        attr_len,
        decoder_k: 2,
        decoder_features: 3,
        decoder_levels: 3,
        unet_features: 3,
        unet_depth: 4,
        latent_size: 1,
    }
}

/// Parameters for gradient checks: the usual initialization, except that
/// the velocity head is large enough for non-trivial deformations.
pub fn suite_params(model: &Model, seed: u64) -> Result<ParamStore<f64>> {
    let mut p: ParamStore<f64> = model.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let head = Normal::new(0.0, 0.3).expect("valid std");
    for (name, t) in p.iter_mut() {
        if name.starts_with("unet/final/") {
            t.data_mut().iter_mut().for_each(|v| *v = head.sample(&mut rng));
        } else if name.starts_with("template/") || name.ends_with("/b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.1..0.9));
        }
    }
    Ok(p)
}

fn loss_case(name: &str, mode: Mode, likelihood: Likelihood, seed: u64) -> Result<SuiteCase> {
    let n = SUITE_SIZE;
    let attr_len = if mode.uses_attributes() { 3 } else { 0 };
    let model = Model::new(suite_arch(attr_len), mode)?;
    let cfg = LossConfig {
        likelihood,
        ncc_window: 5,
        ..LossConfig::default()
    };
    let batch = 2;
    let lg = LossGraph::build(&model, &cfg, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<ImageGrid> = (0..batch).map(|_| ImageGrid::from_fn(n, n, |_, _| rng.gen())).collect();
    let attrs: Vec<AttributeVector> = (0..batch)
        .map(|_| AttributeVector((0..attr_len).map(|_| rng.gen()).collect()))
        .collect();
    let mut state = RunningMeanField::new(n, n, cfg.ema_window)?;
    state.mean = band_limited_field(n, n, 0.5, &mut rng);
    let inputs = lg.inputs::<f64>(
        &images.iter().collect::<Vec<_>>(),
        &attrs.iter().collect::<Vec<_>>(),
        &state,
    )?;
    let params = suite_params(&model, seed)?;
    Ok(SuiteCase {
        name: name.to_string(),
        report: check_gradients(&lg.graph, lg.total, &inputs, &params, DEFAULT_EPSILON)?,
    })
}

/// Every case of the suite for one seed.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut cases = primitives(seed)?;
    cases.push(integration_case(seed)?);
    cases.push(loss_case(
        "objective_unconditional",
        Mode::Unconditional,
        Likelihood::Gaussian,
        seed,
    )?);
    cases.push(loss_case(
        "objective_unconditional_ncc",
        Mode::Unconditional,
        Likelihood::LocalNcc,
        seed,
    )?);
    cases.push(loss_case(
        "objective_conditional",
        Mode::Conditional,
        Likelihood::Gaussian,
        seed,
    )?);
    cases.push(loss_case("objective_latent", Mode::Latent, Likelihood::Gaussian, seed)?);
    Ok(cases)
}

/// Largest relative error over all cases.
pub fn max_rel_error(cases: &[SuiteCase]) -> f64 {
    cases
        .iter()
        .map(|c| {
            if c.report.all_finite() {
                c.report.max_rel_error()
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}
