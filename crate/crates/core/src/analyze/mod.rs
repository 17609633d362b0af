//! Evaluation of trained checkpoints: centrality, regularity,
//! reconstruction, label propagation and velocity PCA.

mod baselines;
mod labels;
mod pca;

pub use baselines::{exemplar_init, select_exemplar, train_decoder_only, EXEMPLAR_REFERENCE_COUNT};
pub use labels::{dice, propagate_labels, propagate_labels_with_fields};
pub use pca::{pca_fields, symmetric_eigen, VelocityPCA};

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::autodiff::{forward, Graph};
use crate::data::{AttributeVector, Dataset, Split};
use crate::diffeo::{integrate_ss, jacobian_determinants, warp, DeformationField};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, VectorField};
use crate::nets::{Mode, Model, ATTRIBUTE_INPUT, IMAGE_INPUT};
use crate::objective::{LossGraph, RunningMeanField};
use crate::train::Checkpoint;

/// Images registered per graph evaluation.
const CHUNK: usize = 16;

/// One image registered to its template.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub index: usize,
    pub template: ImageGrid,
    pub velocity: VectorField,
    pub displacement: VectorField,
    pub warped: ImageGrid,
}

fn check_compatible(ckpt: &Checkpoint, dataset: &Dataset) -> Result<()> {
    let arch = &ckpt.config.arch;
    if let Some(d) = dataset.dims() {
        if d != (arch.height, arch.width) {
            return Err(Error::DimMismatch(format!(
                "dataset images are {}x{}, checkpoint expects {}x{}",
                d.0, d.1, arch.height, arch.width
            )));
        }
    }
    if ckpt.config.mode.uses_attributes() && dataset.layout().len() != arch.attr_len {
        return Err(Error::DimMismatch(format!(
            "dataset attributes have length {}, checkpoint expects {}",
            dataset.layout().len(),
            arch.attr_len
        )));
    }
    Ok(())
}

/// Registers the listed dataset items with the checkpoint's networks.
pub fn register(ckpt: &Checkpoint, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Registration>> {
    check_compatible(ckpt, dataset)?;
    let model = Model::new(ckpt.config.arch, ckpt.config.mode)?;
    let (h, w) = (model.arch.height, model.arch.width);
    let state = RunningMeanField::new(h, w, ckpt.config.loss.ema_window)?;
    let mut graphs: HashMap<usize, LossGraph> = HashMap::new();
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(CHUNK) {
        let lg = match graphs.get(&chunk.len()) {
            Some(g) => g,
            None => {
                let g = LossGraph::build(&model, &ckpt.config.loss, chunk.len())?;
                graphs.entry(chunk.len()).or_insert(g)
            }
        };
        let images: Vec<_> = chunk.iter().map(|&i| dataset.image(i)).collect();
        let attrs: Vec<_> = chunk.iter().map(|&i| dataset.attribute(i)).collect();
        let inputs = lg.inputs::<f32>(&images, &attrs, &state)?;
        let eval = lg.evaluate(&ckpt.params, &inputs, false)?;
        let acts = &eval.activations;
        let t = ImageGrid::unstack(acts.value(lg.template))?;
        let v = VectorField::unstack(acts.value(lg.velocity))?;
        let u = VectorField::unstack(acts.value(lg.displacement))?;
        let wp = ImageGrid::unstack(acts.value(lg.warped))?;
        for (k, (((t, v), u), wp)) in t.into_iter().zip(v).zip(u).zip(wp).enumerate() {
            out.push(Registration {
                index: chunk[k],
                template: t,
                velocity: v,
                displacement: u,
                warped: wp,
            });
        }
    }
    Ok(out)
}

fn split_indices(dataset: &Dataset, split: Split) -> Result<Vec<usize>> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::invalid(format!("the {split:?} split is empty")));
    }
    Ok(idx)
}

/// Registers every item of `split`.
pub fn register_split(ckpt: &Checkpoint, dataset: &Dataset, split: Split) -> Result<Vec<Registration>> {
    register(ckpt, dataset, &split_indices(dataset, split)?)
}

/// Template for one attribute vector (and, in latent mode, one image).
pub fn template_image(
    ckpt: &Checkpoint,
    attributes: Option<&AttributeVector>,
    image: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    let model = Model::new(ckpt.config.arch, ckpt.config.mode)?;
    let (h, w) = (model.arch.height, model.arch.width);
    let mut g = Graph::new();
    let t = model.template(&mut g, 1, None)?;
    let mut inputs = HashMap::new();
    if model.mode.uses_attributes() && model.arch.attr_len > 0 {
        let a = attributes.ok_or_else(|| Error::invalid("this model needs attribute values"))?;
        if a.len() != model.arch.attr_len {
            return Err(Error::DimMismatch(format!(
                "attribute vector has length {}, model expects {}",
                a.len(),
                model.arch.attr_len
            )));
        }
        let data = a.values().iter().map(|&v| v as f32).collect();
        inputs.insert(
            ATTRIBUTE_INPUT.to_string(),
            crate::tensor::Tensor::new(vec![1, a.len()], data)?,
        );
    }
    if model.mode == Mode::Latent {
        let x = image.ok_or_else(|| Error::invalid("latent mode needs an image to encode"))?;
        x.same_dims((h, w))?;
        inputs.insert(IMAGE_INPUT.to_string(), ImageGrid::stack::<f32>(&[x])?);
    }
    let acts = forward(&g, &inputs, &ckpt.params)?;
    Ok(ImageGrid::unstack(acts.value(t))?.remove(0))
}

/// Summary over a group of registrations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupMetrics {
    pub count: usize,
    /// `Σ_p ‖ū(p)‖²` with `ū` the mean displacement over the group.
    pub mean_field_sq_norm: f64,
    /// `Σ_p ‖ū(p)‖ / |p|`, the per-pixel size of the mean displacement.
    pub mean_field_norm_per_pixel: f64,
    /// `(1/n) Σ_i Σ_p ‖u_i(p)‖²`.
    pub mean_sq_displacement: f64,
    /// Mean squared difference between images and warped templates.
    pub mse: f64,
    pub nonpositive_jacobian_fraction: f64,
}

impl GroupMetrics {
    fn from_registrations(regs: &[&Registration], dataset: &Dataset) -> Result<Self> {
        if regs.is_empty() {
            return Ok(GroupMetrics::default());
        }
        let fields: Vec<VectorField> = regs.iter().map(|r| r.displacement.clone()).collect();
        let mean = VectorField::mean_of(&fields)?;
        let pixels = (mean.height() * mean.width()) as f64;
        let mut mse = 0.0;
        let mut bad = 0usize;
        let mut total = 0usize;
        for r in regs {
            mse += dataset.image(r.index).mse(&r.warped)?;
            let dets = jacobian_determinants(&DeformationField::from_displacement(r.displacement.clone()))?;
            bad += dets.data().iter().filter(|&&d| d <= 0.0).count();
            total += dets.data().len();
        }
        let n = regs.len() as f64;
        Ok(GroupMetrics {
            count: regs.len(),
            mean_field_sq_norm: mean.sq_norm(),
            mean_field_norm_per_pixel: mean.norms().iter().sum::<f64>() / pixels,
            mean_sq_displacement: fields.iter().map(VectorField::sq_norm).sum::<f64>() / n,
            mse: mse / n,
            nonpositive_jacobian_fraction: bad as f64 / total as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub overall: GroupMetrics,
    pub per_class: BTreeMap<usize, GroupMetrics>,
}

pub const METRICS_HEADER: &str =
    "group,count,mean_field_sq_norm,mean_field_norm_per_pixel,mean_sq_displacement,mse,nonpositive_jacobian_fraction";

impl MetricsReport {
    /// Overall and per-class metrics for precomputed registrations.
    pub fn from_registrations(regs: &[Registration], dataset: &Dataset) -> Result<Self> {
        if regs.is_empty() {
            return Err(Error::invalid("no registrations to summarize"));
        }
        let all: Vec<&Registration> = regs.iter().collect();
        let overall = GroupMetrics::from_registrations(&all, dataset)?;
        let mut groups: BTreeMap<usize, Vec<&Registration>> = BTreeMap::new();
        for r in regs {
            if let Some(c) = dataset.meta()[r.index].class {
                groups.entry(c).or_default().push(r);
            }
        }
        let per_class = groups
            .into_iter()
            .map(|(c, g)| Ok((c, GroupMetrics::from_registrations(&g, dataset)?)))
            .collect::<Result<_>>()?;
        Ok(MetricsReport { overall, per_class })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        let mut row = |name: String, m: &GroupMetrics| {
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{}",
                m.count,
                m.mean_field_sq_norm,
                m.mean_field_norm_per_pixel,
                m.mean_sq_displacement,
                m.mse,
                m.nonpositive_jacobian_fraction
            );
        };
        row("all".into(), &self.overall);
        for (c, m) in &self.per_class {
            row(format!("class{c}"), m);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let mut block = |name: &str, m: &GroupMetrics| {
            let _ = writeln!(s, "{name} ({} images)", m.count);
            let _ = writeln!(s, "  |mean u|^2            {:.6} px^2", m.mean_field_sq_norm);
            let _ = writeln!(s, "  |mean u| per pixel    {:.6} px", m.mean_field_norm_per_pixel);
            let _ = writeln!(s, "  mean |u|^2            {:.6} px^2", m.mean_sq_displacement);
            let _ = writeln!(s, "  reconstruction MSE    {:.6}", m.mse);
            let _ = writeln!(s, "  det J <= 0 fraction   {:.6}", m.nonpositive_jacobian_fraction);
        };
        block("all", &self.overall);
        for (c, m) in &self.per_class {
            block(&format!("class {c}"), m);
        }
        s
    }
}

/// Full report over one split.
pub fn evaluate_split(ckpt: &Checkpoint, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
    let regs = register_split(ckpt, dataset, split)?;
    MetricsReport::from_registrations(&regs, dataset)
}

/// Displacement centrality of a split; see [`GroupMetrics`].
pub fn centrality_metrics(ckpt: &Checkpoint, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
    evaluate_split(ckpt, dataset, split)
}

/// Centrality of a set of displacement fields: `(Σ_p ‖ū(p)‖², mean Σ_p ‖u_i(p)‖²)`.
pub fn field_centrality(fields: &[VectorField]) -> Result<(f64, f64)> {
    let mean = VectorField::mean_of(fields)?;
    let avg = fields.iter().map(VectorField::sq_norm).sum::<f64>() / fields.len() as f64;
    Ok((mean.sq_norm(), avg))
}

/// Lower bin edges of the determinant histogram; the first bin collects
/// every non-positive value.
pub const JACOBIAN_BIN_EDGES: [f64; 6] = [f64::NEG_INFINITY, 0.0, 0.5, 0.9, 1.1, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianStats {
    pub count: usize,
    pub nonpositive: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Counts per [`JACOBIAN_BIN_EDGES`] bin; bins are `(lo, next lo]`.
    pub histogram: Vec<usize>,
}

impl JacobianStats {
    pub fn fraction_nonpositive(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.nonpositive as f64 / self.count as f64
        }
    }

    pub fn from_deformations(fields: &[VectorField]) -> Result<Self> {
        let mut s = JacobianStats {
            count: 0,
            nonpositive: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            mean: 0.0,
            histogram: vec![0; JACOBIAN_BIN_EDGES.len()],
        };
        let mut sum = 0.0;
        for u in fields {
            let phi = DeformationField::from_displacement(u.clone());
            for &d in jacobian_determinants(&phi)?.data() {
                s.count += 1;
                sum += d;
                s.min = s.min.min(d);
                s.max = s.max.max(d);
                if d <= 0.0 {
                    s.nonpositive += 1;
                }
                let bin = JACOBIAN_BIN_EDGES.iter().rposition(|&lo| d > lo).unwrap_or(0);
                s.histogram[bin] += 1;
            }
        }
        s.mean = if s.count > 0 { sum / s.count as f64 } else { 0.0 };
        Ok(s)
    }
}

/// Determinant statistics of every registration in `split`.
pub fn jacobian_stats(ckpt: &Checkpoint, dataset: &Dataset, split: Split) -> Result<JacobianStats> {
    let regs = register_split(ckpt, dataset, split)?;
    let fields: Vec<_> = regs.into_iter().map(|r| r.displacement).collect();
    JacobianStats::from_deformations(&fields)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconMse {
    pub overall: f64,
    pub per_class: BTreeMap<usize, f64>,
}

/// Mean squared error between images and their warped templates.
pub fn recon_mse(ckpt: &Checkpoint, dataset: &Dataset, split: Split) -> Result<ReconMse> {
    let regs = register_split(ckpt, dataset, split)?;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for r in &regs {
        let e = dataset.image(r.index).mse(&r.warped)?;
        total += e;
        if let Some(c) = dataset.meta()[r.index].class {
            let s = sums.entry(c).or_default();
            s.0 += e;
            s.1 += 1;
        }
    }
    Ok(ReconMse {
        overall: total / regs.len() as f64,
        per_class: sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
    })
}

/// PCA over the predicted velocity fields of a split.
pub fn pca_velocity(ckpt: &Checkpoint, dataset: &Dataset, split: Split, n_components: usize) -> Result<VelocityPCA> {
    let regs = register_split(ckpt, dataset, split)?;
    let fields: Vec<_> = regs.into_iter().map(|r| r.velocity).collect();
    pca_fields(&fields, n_components)
}

/// `template` warped by the exponential of `α·component` for each α.
pub fn warp_along(
    template: &ImageGrid,
    component: &VectorField,
    coefficients: &[f64],
    steps: usize,
) -> Result<Vec<ImageGrid>> {
    if component.dims() != template.dims() {
        return Err(Error::DimMismatch(format!(
            "component is {:?}, template is {:?}",
            component.dims(),
            template.dims()
        )));
    }
    coefficients
        .iter()
        .map(|&a| warp(template, &integrate_ss(&component.scaled(a), steps)?))
        .collect()
}

/// Images synthesized by deforming the template for `attributes` along one
/// principal direction.
pub fn synth_along_component(
    ckpt: &Checkpoint,
    attributes: Option<&AttributeVector>,
    component: &VectorField,
    coefficients: &[f64],
) -> Result<Vec<ImageGrid>> {
    let t = template_image(ckpt, attributes, None)?;
    warp_along(&t, component, coefficients, ckpt.config.loss.integration_steps)
}

/// Side-by-side montage with a one-pixel black gap.
pub fn image_strip(images: &[ImageGrid]) -> Result<ImageGrid> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("no images for the strip"))?;
    let (h, w) = first.dims();
    for im in images {
        im.same_dims((h, w))?;
    }
    let n = images.len();
    let total = n * w + n - 1;
    Ok(ImageGrid::from_fn(h, total, |y, x| {
        let k = x / (w + 1);
        let c = x % (w + 1);
        if c == w {
            0.0
        } else {
            images[k].get(y, c)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opposite_fields_cancel() {
        let f = VectorField::constant(4, 4, 1.0, -2.0);
        let (mean, avg) = field_centrality(&[f.clone(), f.negated()]).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(avg, f.sq_norm());
    }

    #[test]
    fn identity_has_unit_determinants() {
        let s = JacobianStats::from_deformations(&[VectorField::zeros(6, 6)]).unwrap();
        assert_eq!(s.fraction_nonpositive(), 0.0);
        assert_eq!((s.min, s.max), (1.0, 1.0));
        assert_eq!(s.histogram[3], 36);
    }

    #[test]
    fn strip_layout() {
        let a = ImageGrid::from_fn(2, 2, |_, _| 1.0);
        let s = image_strip(&[a.clone(), a]).unwrap();
        assert_eq!(s.dims(), (2, 5));
        assert_eq!(s.get(0, 2), 0.0);
        assert_eq!(s.get(1, 4), 1.0);
    }
}
