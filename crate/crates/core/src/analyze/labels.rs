//! Label-map overlap and propagation into template space.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::diffeo::{invert, warp_nearest};
use crate::error::{Error, Result};
use crate::grid::VectorField;
use crate::train::Checkpoint;

/// Per-label Dice overlap; labels absent from both maps score 1.
pub fn dice(a: &[u32], b: &[u32], labels: &[u32]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!(
            "label maps have {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no labels to score"));
    }
    Ok(labels
        .iter()
        .map(|&l| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.iter().zip(b) {
                na += (x == l) as usize;
                nb += (y == l) as usize;
                both += (x == l && y == l) as usize;
            }
            if na + nb == 0 {
                1.0
            } else {
                2.0 * both as f64 / (na + nb) as f64
            }
        })
        .collect())
}

/// Pulls each label map into template space through the inverse flow of its
/// velocity, then takes the per-pixel majority (ties go to the smaller
/// label).
pub fn propagate_labels_with_fields(
    label_maps: &[Vec<u32>],
    velocities: &[VectorField],
    dims: (usize, usize),
    steps: usize,
) -> Result<Vec<u32>> {
    if label_maps.is_empty() {
        return Err(Error::invalid("no labelled images"));
    }
    if label_maps.len() != velocities.len() {
        return Err(Error::DimMismatch(format!(
            "{} label maps for {} velocity fields",
            label_maps.len(),
            velocities.len()
        )));
    }
    let mut votes: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); dims.0 * dims.1];
    for (labels, v) in label_maps.iter().zip(velocities) {
        let pulled = warp_nearest(labels, dims, &invert(v, steps)?)?;
        for (bucket, l) in votes.iter_mut().zip(pulled) {
            *bucket.entry(l).or_default() += 1;
        }
    }
    Ok(votes
        .iter()
        .map(|b| {
            let best = b.values().copied().max().unwrap_or(0);
            b.iter().find(|(_, &c)| c == best).map(|(&l, _)| l).unwrap_or(0)
        })
        .collect())
}

/// Template-space labels from the checkpoint's registrations of `indices`,
/// whose label maps are given in the same order.
pub fn propagate_labels(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    indices: &[usize],
    label_maps: &[Vec<u32>],
) -> Result<Vec<u32>> {
    let dims = dataset.dims().ok_or_else(|| Error::invalid("empty dataset"))?;
    let regs = super::register(ckpt, dataset, indices)?;
    let velocities: Vec<_> = regs.into_iter().map(|r| r.velocity).collect();
    propagate_labels_with_fields(label_maps, &velocities, dims, ckpt.config.loss.integration_steps)
}
