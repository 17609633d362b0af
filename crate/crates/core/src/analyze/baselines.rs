//! Reference templates the learned models are compared against.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, forward, Graph};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::nets::{Mode, Model, ATTRIBUTE_INPUT, IMAGE_INPUT};
use crate::objective::mse_data_graph;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{clip_global_norm, epoch_permutation, optimizer_step, OptimizerState, TrainConfig};

/// Number of random references an exemplar candidate is scored against.
pub const EXEMPLAR_REFERENCE_COUNT: usize = 200;

/// The item of `pool` with the smallest summed MSE to a seeded random
/// sample of at most [`EXEMPLAR_REFERENCE_COUNT`] items of `pool`.
pub fn select_exemplar(dataset: &Dataset, pool: &[usize], seed: u64) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::invalid("no candidates for an exemplar"));
    }
    let mut refs = pool.to_vec();
    refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    refs.truncate(EXEMPLAR_REFERENCE_COUNT);
    let mut best = (f64::INFINITY, pool[0]);
    for &c in pool {
        let mut total = 0.0;
        for &r in &refs {
            total += dataset.image(c).mse(dataset.image(r))?;
        }
        if total < best.0 {
            best = (total, c);
        }
    }
    Ok(best.1)
}

/// Exemplar lookup tensors holding one selected training image per class,
/// for use as `init` of an exemplar-mode trainer.
pub fn exemplar_init(config: &TrainConfig, dataset: &Dataset) -> Result<ParamStore<f32>> {
    if config.mode != Mode::Exemplar {
        return Err(Error::invalid("exemplar templates need exemplar mode"));
    }
    let model = Model::new(config.arch, config.mode)?;
    let train = dataset.indices(Split::Train);
    let mut exemplars = Vec::new();
    for k in 0..dataset.num_classes() {
        let pool: Vec<usize> = train
            .iter()
            .copied()
            .filter(|&i| dataset.meta()[i].class == Some(k))
            .collect();
        if pool.is_empty() {
            return Err(Error::invalid(format!("class {k} has no training items")));
        }
        let pick = select_exemplar(dataset, &pool, config.seed.wrapping_add(k as u64))?;
        exemplars.push(dataset.image(pick).clone());
    }
    let mut store = ParamStore::new();
    model.set_exemplars(&mut store, &exemplars)?;
    Ok(store)
}

/// Trains only the attribute decoder to reproduce images directly (no
/// warping) and returns its parameters. Uses the config's batch size,
/// optimizer, seed and clipping.
pub fn train_decoder_only(config: &TrainConfig, dataset: &Dataset, iterations: u64) -> Result<ParamStore<f32>> {
    let mut cfg = config.clone();
    cfg.mode = Mode::Conditional;
    cfg.validate()?;
    let model = Model::new(cfg.arch, cfg.mode)?;
    let b = cfg.batch_size;
    let mut g = Graph::new();
    let x = model.image_input(&mut g, b)?;
    let t = model.template(&mut g, b, None)?;
    let loss = mse_data_graph(&mut g, x, t, cfg.loss.sigma)?;
    let loss = g.scale(loss, 1.0 / b as f64);
    let mut params: ParamStore<f32> = ParamStore::new();
    for (name, tensor) in model.init_params::<f32>(cfg.seed)?.iter() {
        if name.starts_with("decoder/") {
            params.insert(name, tensor.clone())?;
        }
    }
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("dataset has no training items"));
    }
    let len = cfg.arch.attr_len;
    let mut opt = OptimizerState::default();
    let (mut epoch, mut cursor) = (0u64, 0usize);
    let mut perm = epoch_permutation(cfg.seed, epoch, train.len());
    for _ in 0..iterations {
        let mut batch = Vec::with_capacity(b);
        while batch.len() < b {
            if cursor >= train.len() {
                epoch += 1;
                cursor = 0;
                perm = epoch_permutation(cfg.seed, epoch, train.len());
            }
            batch.push(train[perm[cursor]]);
            cursor += 1;
        }
        let images: Vec<&ImageGrid> = batch.iter().map(|&i| dataset.image(i)).collect();
        let mut attrs = Vec::with_capacity(b * len);
        for &i in &batch {
            let a = dataset.attribute(i);
            if a.len() != len {
                return Err(Error::DimMismatch(format!("attribute length {} vs {len}", a.len())));
            }
            attrs.extend(a.values().iter().map(|&v| v as f32));
        }
        let inputs = HashMap::from([
            (IMAGE_INPUT.to_string(), ImageGrid::stack::<f32>(&images)?),
            (ATTRIBUTE_INPUT.to_string(), Tensor::new(vec![b, len], attrs)?),
        ]);
        let acts = forward(&g, &inputs, &params)?;
        let grads = backward(&g, &acts, loss)?;
        let mut grads = grads.params();
        clip_global_norm(&mut grads, cfg.clip_norm);
        optimizer_step(&mut params, &grads, &mut opt, &cfg.optimizer)?;
    }
    Ok(params)
}
