//! Training objective: image likelihood plus the deformation prior
//! (centrality, magnitude, smoothness), and the running mean displacement.
//!
//! Every term is available twice: as a direct `f64` function over grids and
//! as a graph builder used for training. Sums run over pixels; per-image
//! terms are averaged over the batch.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{box_mean_forward, window_count};
use crate::autodiff::{backward, forward, Activations, Axis, Gradients, Graph, NodeId};
use crate::data::AttributeVector;
use crate::diffeo::{integrate_ss_graph, warp_graph, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, VectorField};
use crate::nets::{Model, ATTRIBUTE_INPUT, IMAGE_INPUT};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Input carrying the running mean from previous iterations, `[1, 2, h, w]`.
pub const EMA_INPUT: &str = "ema/prev";

pub const NCC_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    #[default]
    Gaussian,
    LocalNcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda_d: f64,
    pub lambda_a: f64,
    pub sigma: f64,
    /// Neighbourhood degree `d` of the grid graph.
    pub degree: usize,
    pub likelihood: Likelihood,
    pub ncc_window: usize,
    /// Effective window `c` of the running mean; decay is `1 − 1/c`.
    pub ema_window: usize,
    pub integration_steps: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.01,
            lambda_d: 0.001,
            lambda_a: 0.01,
            sigma: 1.0,
            degree: 4,
            likelihood: Likelihood::Gaussian,
            ncc_window: 9,
            ema_window: 100,
            integration_steps: DEFAULT_STEPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.gamma, self.lambda_d, self.lambda_a, self.sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("loss hyperparameters must be finite"));
        }
        if self.gamma < 0.0 || self.lambda_d < 0.0 || self.lambda_a < 0.0 {
            return Err(Error::invalid("gamma, lambda_d and lambda_a must be non-negative"));
        }
        if self.sigma <= 0.0 {
            return Err(Error::invalid("sigma must be positive"));
        }
        if self.degree == 0 || self.ema_window == 0 || self.integration_steps == 0 {
            return Err(Error::invalid(
                "degree, ema_window and integration_steps must be positive",
            ));
        }
        if self.ncc_window.is_multiple_of(2) {
            return Err(Error::invalid(format!("ncc window {} must be odd", self.ncc_window)));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        1.0 - 1.0 / self.ema_window as f64
    }
}

/// Exponential moving average of batch-mean displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMeanField {
    pub mean: VectorField,
    pub beta: f64,
    pub steps: u64,
}

impl RunningMeanField {
    pub fn new(height: usize, width: usize, ema_window: usize) -> Result<Self> {
        if ema_window == 0 {
            return Err(Error::invalid("ema window must be positive"));
        }
        Ok(RunningMeanField {
            mean: VectorField::zeros(height, width),
            beta: 1.0 - 1.0 / ema_window as f64,
            steps: 0,
        })
    }
}

/// `mean ← β·mean + (1−β)·batch_mean_u`.
pub fn update_running_mean(state: &RunningMeanField, batch_mean_u: &VectorField) -> Result<RunningMeanField> {
    batch_mean_u.same_dims(state.mean.dims())?;
    let b = state.beta;
    let data = state
        .mean
        .data()
        .iter()
        .zip(batch_mean_u.data())
        .map(|(m, u)| b * m + (1.0 - b) * u)
        .collect();
    let (h, w) = state.mean.dims();
    Ok(RunningMeanField {
        mean: VectorField::new(h, w, data)?,
        beta: b,
        steps: state.steps + 1,
    })
}

/// `γ · Σ_p ‖ū(p)‖²`.
pub fn centrality_penalty(state: &RunningMeanField, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    gamma * state.mean.sq_norm()
}

/// `Σ_p (x − t∘φ)² / (2σ²)`.
pub fn mse_data_term(x: &ImageGrid, warped_t: &ImageGrid, sigma: f64) -> Result<f64> {
    x.same_dims(warped_t.dims())?;
    if sigma <= 0.0 {
        return Err(Error::invalid("sigma must be positive"));
    }
    let ss: f64 = x
        .data()
        .iter()
        .zip(warped_t.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss / (2.0 * sigma * sigma))
}

/// `−mean_p cc(p)` with windowed squared correlation over in-bounds pixels.
pub fn ncc_data_term(x: &ImageGrid, warped_t: &ImageGrid, window: usize) -> Result<f64> {
    x.same_dims(warped_t.dims())?;
    if window.is_multiple_of(2) {
        return Err(Error::invalid(format!("window {window} must be odd")));
    }
    let (h, w) = x.dims();
    let r = window / 2;
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        x.data().iter().zip(warped_t.data()).map(|(&a, &b)| f(a, b)).collect()
    };
    let mx = box_mean_forward(x.data(), 1, h, w, r);
    let mt = box_mean_forward(warped_t.data(), 1, h, w, r);
    let mxx = box_mean_forward(&prod(&|a, _| a * a), 1, h, w, r);
    let mtt = box_mean_forward(&prod(&|_, b| b * b), 1, h, w, r);
    let mxt = box_mean_forward(&prod(&|a, b| a * b), 1, h, w, r);
    let mut total = 0.0;
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            let n = window_count(h, w, r, y, xx) as f64;
            let cross = n * (mxt[i] - mx[i] * mt[i]);
            let vx = n * (mxx[i] - mx[i] * mx[i]);
            let vt = n * (mtt[i] - mt[i] * mt[i]);
            total += cross * cross / (vx * vt + NCC_EPSILON);
        }
    }
    Ok(-total / (h * w) as f64)
}

/// `λ_d · (d/2) · Σ_p ‖u(p)‖²`.
pub fn magnitude_penalty(u: &VectorField, lambda_d: f64, degree: usize) -> f64 {
    lambda_d * degree as f64 / 2.0 * u.sq_norm()
}

/// `λ_a/2 · Σ` of squared in-bounds forward differences, both axes and
/// both channels.
pub fn smoothness_penalty(u: &VectorField, lambda_a: f64) -> f64 {
    let (h, w) = u.dims();
    let mut s = 0.0;
    for plane in [u.dx(), u.dy()] {
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if x + 1 < w {
                    s += (plane[y * w + x + 1] - v).powi(2);
                }
                if y + 1 < h {
                    s += (plane[(y + 1) * w + x] - v).powi(2);
                }
            }
        }
    }
    lambda_a / 2.0 * s
}

/// Graph form of [`mse_data_term`], summed over the whole batch.
pub fn mse_data_graph(g: &mut Graph, x: NodeId, warped: NodeId, sigma: f64) -> Result<NodeId> {
    let d = g.sub(x, warped)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (2.0 * sigma * sigma)))
}

/// Graph form of [`ncc_data_term`], averaged over batch and pixels.
pub fn ncc_data_graph(g: &mut Graph, x: NodeId, warped: NodeId, window: usize) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid("ncc expects [n, c, h, w] images"));
    }
    let (h, w) = (shape[2], shape[3]);
    let r = window / 2;
    let counts = Tensor::from_fn(&shape, |i| window_count(h, w, r, (i / w) % h, i % w) as f64);
    let n = g.constant(counts);
    let xx = g.mul(x, x)?;
    let tt = g.mul(warped, warped)?;
    let xt = g.mul(x, warped)?;
    let mx = g.box_mean(x, window)?;
    let mt = g.box_mean(warped, window)?;
    let mxx = g.box_mean(xx, window)?;
    let mtt = g.box_mean(tt, window)?;
    let mxt = g.box_mean(xt, window)?;
    let centered = |g: &mut Graph, m2: NodeId, a: NodeId, b: NodeId| -> Result<NodeId> {
        let ab = g.mul(a, b)?;
        let d = g.sub(m2, ab)?;
        g.mul(d, n)
    };
    let cross = centered(g, mxt, mx, mt)?;
    let vx = centered(g, mxx, mx, mx)?;
    let vt = centered(g, mtt, mt, mt)?;
    let num = g.square(cross);
    let den = g.mul(vx, vt)?;
    let den = g.add_scalar(den, NCC_EPSILON);
    let cc = g.div(num, den)?;
    let m = g.mean(cc);
    Ok(g.scale(m, -1.0))
}

/// Graph form of [`magnitude_penalty`], summed over the batch.
pub fn magnitude_graph(g: &mut Graph, u: NodeId, lambda_d: f64, degree: usize) -> NodeId {
    let sq = g.square(u);
    let s = g.sum(sq);
    g.scale(s, lambda_d * degree as f64 / 2.0)
}

/// Graph form of [`smoothness_penalty`], summed over the batch.
pub fn smoothness_graph(g: &mut Graph, u: NodeId, lambda_a: f64) -> Result<NodeId> {
    let dx = g.forward_diff(u, Axis::X)?;
    let dy = g.forward_diff(u, Axis::Y)?;
    let sx = g.square(dx);
    let sx = g.sum(sx);
    let sy = g.square(dy);
    let sy = g.sum(sy);
    let s = g.add(sx, sy)?;
    Ok(g.scale(s, lambda_a / 2.0))
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub total: f64,
    pub data: f64,
    pub magnitude: f64,
    pub smoothness: f64,
    pub centrality: f64,
    /// Mean displacement norm over pixels and batch, in pixels.
    pub mean_abs_u: f64,
}

impl LossDiagnostics {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.data,
            self.magnitude,
            self.smoothness,
            self.centrality,
            self.mean_abs_u,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// The full training graph for a fixed batch size:
/// template → U-Net → velocity → scaling and squaring → warp → loss.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub graph: Graph,
    pub model: Model,
    pub config: LossConfig,
    pub batch: usize,
    pub template: NodeId,
    pub velocity: NodeId,
    pub displacement: NodeId,
    pub warped: NodeId,
    /// Running mean including this batch's contribution.
    pub running_mean: NodeId,
    pub data: NodeId,
    pub magnitude: NodeId,
    pub smoothness: NodeId,
    pub centrality: NodeId,
    pub total: NodeId,
}

/// Result of evaluating a [`LossGraph`] on one batch.
pub struct LossEval<T> {
    pub diagnostics: LossDiagnostics,
    pub activations: Activations<T>,
    pub gradients: Option<Gradients<T>>,
    /// Mean displacement over the batch, for the running-mean update.
    pub batch_mean_u: VectorField,
}

impl LossGraph {
    pub fn build(model: &Model, config: &LossConfig, batch: usize) -> Result<Self> {
        config.validate()?;
        if batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let (h, w) = (model.arch.height, model.arch.width);
        let mut g = Graph::new();
        let x = model.image_input(&mut g, batch)?;
        let template = model.template(&mut g, batch, Some(x))?;
        let velocity = model.unet(&mut g, template, x)?;
        let displacement = integrate_ss_graph(&mut g, velocity, config.integration_steps)?;
        let warped = warp_graph(&mut g, template, displacement)?;
        let per_image = 1.0 / batch as f64;
        let data = match config.likelihood {
            Likelihood::Gaussian => {
                let s = mse_data_graph(&mut g, x, warped, config.sigma)?;
                g.scale(s, per_image)
            }
            Likelihood::LocalNcc => ncc_data_graph(&mut g, x, warped, config.ncc_window)?,
        };
        let magnitude = magnitude_graph(&mut g, displacement, config.lambda_d, config.degree);
        let magnitude = g.scale(magnitude, per_image);
        let smoothness = smoothness_graph(&mut g, displacement, config.lambda_a)?;
        let smoothness = g.scale(smoothness, per_image);
        let prev = g.input(EMA_INPUT, &[1, 2, h, w])?;
        let bm = g.batch_mean(displacement);
        let beta = config.beta();
        let kept = g.scale(prev, beta);
        let fresh = g.scale(bm, 1.0 - beta);
        let running_mean = g.add(kept, fresh)?;
        let centrality = if config.gamma > 0.0 {
            let sq = g.square(running_mean);
            let s = g.sum(sq);
            g.scale(s, config.gamma)
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        let t = g.add(data, magnitude)?;
        let t = g.add(t, smoothness)?;
        let total = g.add(t, centrality)?;
        for (name, id) in [
            ("template", template),
            ("velocity", velocity),
            ("displacement", displacement),
            ("warped", warped),
            ("total", total),
        ] {
            g.mark_output(name, id);
        }
        Ok(LossGraph {
            graph: g,
            model: *model,
            config: *config,
            batch,
            template,
            velocity,
            displacement,
            warped,
            running_mean,
            data,
            magnitude,
            smoothness,
            centrality,
            total,
        })
    }

    /// Input tensors for a batch of images, their attributes and the state.
    pub fn inputs<T: Real>(
        &self,
        images: &[&ImageGrid],
        attributes: &[&AttributeVector],
        state: &RunningMeanField,
    ) -> Result<HashMap<String, Tensor<T>>> {
        if images.len() != self.batch {
            return Err(Error::DimMismatch(format!(
                "batch of {} images for a graph built for {}",
                images.len(),
                self.batch
            )));
        }
        let (h, w) = (self.model.arch.height, self.model.arch.width);
        for im in images {
            im.same_dims((h, w))?;
        }
        state.mean.same_dims((h, w))?;
        let mut inputs = HashMap::new();
        inputs.insert(IMAGE_INPUT.to_string(), ImageGrid::stack::<T>(images)?);
        inputs.insert(EMA_INPUT.to_string(), VectorField::stack::<T>(&[&state.mean])?);
        if self.model.mode.uses_attributes() && self.model.arch.attr_len > 0 {
            let len = self.model.arch.attr_len;
            if attributes.len() != self.batch {
                return Err(Error::DimMismatch("one attribute vector per image required".into()));
            }
            let mut data = Vec::with_capacity(self.batch * len);
            for a in attributes {
                if a.len() != len {
                    return Err(Error::DimMismatch(format!(
                        "attribute vector has length {}, model expects {len}",
                        a.len()
                    )));
                }
                data.extend(a.values().iter().map(|&v| T::from_f64_lossy(v)));
            }
            inputs.insert(ATTRIBUTE_INPUT.to_string(), Tensor::new(vec![self.batch, len], data)?);
        }
        Ok(inputs)
    }

    pub fn evaluate<T: Real>(
        &self,
        params: &ParamStore<T>,
        inputs: &HashMap<String, Tensor<T>>,
        with_gradients: bool,
    ) -> Result<LossEval<T>> {
        let acts = forward(&self.graph, inputs, params)?;
        let s = |id| acts.scalar(id).as_f64();
        let u = acts.value(self.displacement);
        let (n, _, h, w) = u.dims4();
        let hw = h * w;
        let mut norm_sum = 0.0;
        let mut mean = vec![0.0; 2 * hw];
        for b in 0..n {
            let base = b * 2 * hw;
            for p in 0..hw {
                let dx = u.data()[base + p].as_f64();
                let dy = u.data()[base + hw + p].as_f64();
                norm_sum += (dx * dx + dy * dy).sqrt();
                mean[p] += dx;
                mean[hw + p] += dy;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let diagnostics = LossDiagnostics {
            total: s(self.total),
            data: s(self.data),
            magnitude: s(self.magnitude),
            smoothness: s(self.smoothness),
            centrality: s(self.centrality),
            mean_abs_u: norm_sum / (n * hw) as f64,
        };
        let gradients = if with_gradients {
            Some(backward(&self.graph, &acts, self.total)?)
        } else {
            None
        };
        Ok(LossEval {
            diagnostics,
            activations: acts,
            gradients,
            batch_mean_u: VectorField::new(h, w, mean)?,
        })
    }
}

/// Evaluates the objective on one batch and advances the running mean.
pub fn total_loss<T: Real>(
    model: &Model,
    config: &LossConfig,
    params: &ParamStore<T>,
    images: &[&ImageGrid],
    attributes: &[&AttributeVector],
    state: &RunningMeanField,
) -> Result<(f64, RunningMeanField, LossDiagnostics)> {
    let lg = LossGraph::build(model, config, images.len())?;
    let inputs = lg.inputs::<T>(images, attributes, state)?;
    let eval = lg.evaluate(params, &inputs, false)?;
    let next = update_running_mean(state, &eval.batch_mean_u)?;
    Ok((eval.diagnostics.total, next, eval.diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let a = ImageGrid::zeros(4, 4);
        let b = ImageGrid::from_fn(4, 4, |_, _| 1.0);
        assert_eq!(mse_data_term(&a, &a, 1.0).unwrap(), 0.0);
        assert_eq!(mse_data_term(&a, &b, 1.0).unwrap(), 8.0);
        assert_eq!(mse_data_term(&a, &b, 2.0).unwrap(), 2.0);
    }

    #[test]
    fn penalty_examples() {
        let mut u = VectorField::zeros(3, 3);
        assert_eq!(magnitude_penalty(&u, 0.001, 4), 0.0);
        u.data_mut()[4] = 3.0;
        u.data_mut()[9 + 4] = 4.0;
        assert!((magnitude_penalty(&u, 0.001, 4) - 0.05).abs() < 1e-15);
        let doubled = u.scaled(2.0);
        assert!((magnitude_penalty(&doubled, 0.001, 4) - 0.2).abs() < 1e-15);
        let ramp = VectorField::from_fn(2, 2, |_, x| (x as f64, 0.0));
        assert!((smoothness_penalty(&ramp, 0.01) - 0.01).abs() < 1e-15);
        assert_eq!(smoothness_penalty(&VectorField::constant(5, 4, 2.0, -1.0), 0.3), 0.0);
    }

    #[test]
    fn centrality_examples() {
        let mut st = RunningMeanField::new(2, 2, 100).unwrap();
        assert_eq!(centrality_penalty(&st, 0.01), 0.0);
        st.mean = VectorField::from_fn(2, 2, |y, x| if (y, x) == (0, 0) { (1.0, 1.0) } else { (0.0, 0.0) });
        assert!((centrality_penalty(&st, 0.01) - 0.02).abs() < 1e-15);
        assert_eq!(centrality_penalty(&st, 0.0), 0.0);
    }

    #[test]
    fn ncc_examples() {
        let x = ImageGrid::from_fn(12, 12, |y, x| {
            ((x * 7 + y * 3) % 11) as f64 / 10.0 + 0.01 * (x * y) as f64
        });
        assert!((ncc_data_term(&x, &x, 9).unwrap() + 1.0).abs() < 1e-3);
        let t = x.map(|v| 2.0 * v + 0.3);
        assert!((ncc_data_term(&x, &t, 9).unwrap() + 1.0).abs() < 1e-3);
        let c = ImageGrid::from_fn(12, 12, |_, _| 0.4);
        assert!(ncc_data_term(&c, &c, 9).unwrap().abs() < 1e-12);
        assert!(ncc_data_term(&x, &x, 4).is_err());
    }
}
