//! Optimization loop, optimizers and checkpoint persistence.
//!
//! A run is fully determined by its [`TrainConfig`] and dataset: batches
//! come from seeded per-epoch permutations, every reduction has a fixed
//! order, and the sampler position is part of the checkpoint, so resuming
//! reproduces an uninterrupted run bit for bit.

mod checkpoint;
mod optim;

pub use checkpoint::{
    decode_tensors, encode_tensors, load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file, Checkpoint,
    StoredTensor, MAGIC, VERSION,
};
pub use optim::{clip_global_norm, optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AttributeLayout, Dataset, Split};
use crate::error::{Error, Result};
use crate::nets::{ArchConfig, Mode, Model};
use crate::objective::{update_running_mean, LossConfig, LossDiagnostics, LossGraph, RunningMeanField};
use crate::params::ParamStore;

pub const LOG_HEADER: &str = "iter,total,data,magnitude,smoothness,centrality,mean_abs_u";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub arch: ArchConfig,
    pub mode: Mode,
    /// How item metadata maps to the attribute vector.
    pub attributes: AttributeLayout,
    pub batch_size: usize,
    pub iterations: u64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Save the checkpoint every this many iterations (0: only at the end).
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Parameter-name prefixes excluded from updates.
    pub frozen: Vec<String>,
    /// Number of training images averaged into the initial template.
    pub template_init_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            arch: ArchConfig::default(),
            mode: Mode::Unconditional,
            attributes: AttributeLayout::default(),
            batch_size: 16,
            iterations: 5000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            checkpoint_interval: 0,
            log_interval: 1,
            clip_norm: 10.0,
            frozen: Vec::new(),
            template_init_images: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.arch.validate(self.mode)?;
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::invalid("batch size and log interval must be positive"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::invalid("clip norm must be non-negative"));
        }
        Ok(())
    }

    /// Copies image dims and attribute length from `dataset`.
    pub fn fit_to(mut self, dataset: &Dataset) -> Result<Self> {
        let (h, w) = dataset.dims().ok_or_else(|| Error::invalid("empty dataset"))?;
        self.arch.height = h;
        self.arch.width = w;
        self.attributes = dataset.layout();
        self.arch.attr_len = if self.mode.uses_attributes() {
            dataset.layout().len()
        } else {
            0
        };
        Ok(self)
    }

    fn is_trainable(&self, name: &str) -> bool {
        if self.mode == Mode::Exemplar && name.starts_with("template/") {
            return false;
        }
        !self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Position in the stream of shuffled epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub cursor: u64,
}

pub(crate) fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    #[serde(flatten)]
    pub diagnostics: LossDiagnostics,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        let d = &self.diagnostics;
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, d.total, d.data, d.magnitude, d.smoothness, d.centrality, d.mean_abs_u
        )
    }
}

/// Header plus one line per row.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Owns the evolving training state for one dataset.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    train_idx: Vec<usize>,
    graph: LossGraph,
    state: Checkpoint,
    perm: Vec<usize>,
    perm_epoch: Option<u64>,
}

impl<'a> Trainer<'a> {
    /// Fresh state: seeded initialization, then the unconditional template
    /// set to the mean training image, then any tensors from `init`.
    pub fn new(config: TrainConfig, dataset: &'a Dataset, init: Option<&ParamStore<f32>>) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.arch, config.mode)?;
        let mut params: ParamStore<f32> = model.init_params(config.seed)?;
        let train_idx = dataset.indices(Split::Train);
        if config.mode == Mode::Unconditional && !train_idx.is_empty() {
            let mean = dataset.mean_image(&train_idx, config.template_init_images.max(1))?;
            model.set_template_image(&mut params, &mean)?;
        }
        if let Some(init) = init {
            for (name, t) in init.iter() {
                if params.contains(name) {
                    params.insert(name, t.clone())?;
                }
            }
        }
        let running_mean = RunningMeanField::new(config.arch.height, config.arch.width, config.loss.ema_window)?;
        let state = Checkpoint {
            config,
            params,
            running_mean,
            optimizer: OptimizerState::default(),
            iteration: 0,
            sampler: SamplerState::default(),
        };
        Self::from_checkpoint(state, dataset)
    }

    pub fn from_checkpoint(state: Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        let config = &state.config;
        config.validate()?;
        let train_idx = dataset.indices(Split::Train);
        if train_idx.is_empty() {
            return Err(Error::invalid("dataset has no training items"));
        }
        let dims = dataset.dims().expect("non-empty");
        if dims != (config.arch.height, config.arch.width) {
            return Err(Error::DimMismatch(format!(
                "dataset images are {}x{}, model expects {}x{}",
                dims.0, dims.1, config.arch.height, config.arch.width
            )));
        }
        if config.mode.uses_attributes() && dataset.layout().len() != config.arch.attr_len {
            return Err(Error::DimMismatch(format!(
                "dataset attributes have length {}, model expects {}",
                dataset.layout().len(),
                config.arch.attr_len
            )));
        }
        let model = Model::new(config.arch, config.mode)?;
        let graph = LossGraph::build(&model, &config.loss, config.batch_size)?;
        Ok(Trainer {
            dataset,
            train_idx,
            graph,
            state,
            perm: Vec::new(),
            perm_epoch: None,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.state.params
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.train_idx.len();
        let mut out = Vec::with_capacity(self.graph.batch);
        while out.len() < self.graph.batch {
            let s = &mut self.state.sampler;
            if s.cursor as usize >= n {
                s.epoch += 1;
                s.cursor = 0;
            }
            if self.perm_epoch != Some(s.epoch) {
                self.perm = epoch_permutation(self.state.config.seed, s.epoch, n);
                self.perm_epoch = Some(s.epoch);
            }
            out.push(self.train_idx[self.perm[s.cursor as usize]]);
            s.cursor += 1;
        }
        out
    }

    /// One optimization step; returns the loss terms at the pre-step
    /// parameters.
    pub fn step(&mut self) -> Result<LogRow> {
        let batch = self.next_batch();
        let images: Vec<_> = batch.iter().map(|&i| self.dataset.image(i)).collect();
        let attrs: Vec<_> = batch.iter().map(|&i| self.dataset.attribute(i)).collect();
        let inputs = self.graph.inputs::<f32>(&images, &attrs, &self.state.running_mean)?;
        let eval = self.graph.evaluate(&self.state.params, &inputs, true)?;
        let iteration = self.state.iteration + 1;
        let diverged = |d: &LossDiagnostics| Error::Diverged {
            iteration,
            diagnostics: format!("{d:?}"),
        };
        if !eval.diagnostics.is_finite() {
            return Err(diverged(&eval.diagnostics));
        }
        let all = eval.gradients.expect("requested").params();
        let mut grads = ParamStore::new();
        for (name, g) in all.iter() {
            if self.state.config.is_trainable(name) {
                grads.insert_unchecked(name.to_string(), g.clone());
            }
        }
        let norm = clip_global_norm(&mut grads, self.state.config.clip_norm);
        if !norm.is_finite() {
            return Err(diverged(&eval.diagnostics));
        }
        optimizer_step(
            &mut self.state.params,
            &grads,
            &mut self.state.optimizer,
            &self.state.config.optimizer,
        )?;
        self.state.running_mean = update_running_mean(&self.state.running_mean, &eval.batch_mean_u)?;
        self.state.iteration = iteration;
        Ok(LogRow {
            iter: iteration,
            diagnostics: eval.diagnostics,
        })
    }

    /// Steps until `total` iterations have run, keeping rows on the log
    /// interval (and the last one). The checkpoint, when a path is given, is
    /// rewritten on the checkpoint interval and at the end.
    pub fn run_until(&mut self, total: u64, checkpoint_path: Option<&Path>) -> Result<Vec<LogRow>> {
        let cfg_log = self.state.config.log_interval;
        let cfg_ckpt = self.state.config.checkpoint_interval;
        let mut rows = Vec::new();
        while self.state.iteration < total {
            let row = self.step()?;
            if row.iter % cfg_log == 0 || row.iter == total {
                rows.push(row);
            }
            if let Some(p) = checkpoint_path {
                if cfg_ckpt > 0 && row.iter % cfg_ckpt == 0 && row.iter != total {
                    save_checkpoint(p, &self.state)?;
                }
            }
        }
        if let Some(p) = checkpoint_path {
            save_checkpoint(p, &self.state)?;
        }
        Ok(rows)
    }
}

/// Runs `config.iterations` steps from a fresh initialization.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut t = Trainer::new(config.clone(), dataset, None)?;
    let rows = t.run_until(config.iterations, None)?;
    Ok((t.into_checkpoint(), rows))
}
