//! Datasets: ingestion, attribute encoding, simulated transformations and
//! synthetic ground-truth collections.

mod idx;
mod imagedir;
mod select;
mod synth;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use imagedir::{
    decode_pgm, encode_pgm, load_image_dir, read_image, read_label_pgm, write_image, write_image_dir, write_label_pgm,
    ImageFormat,
};
pub use select::{holdout_filter, split, HoldoutSpec, DEFAULT_FRACTIONS};
pub use synth::{
    band_limited_field, build_simulated, glyph_templates, pad_to, synth_class_dataset, synth_oracle_dataset,
    synth_transform, Regime, MAX_SCALE, MIN_SCALE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Encoded conditioning vector: class one-hot ⊕ scale scalar ⊕ rotation scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(pub Vec<f64>);

impl AttributeVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Which attribute segments are present, and the one-hot width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttributeLayout {
    pub num_classes: usize,
    pub scale: bool,
    pub rotation: bool,
}

impl AttributeLayout {
    pub fn classes_only(num_classes: usize) -> Self {
        AttributeLayout {
            num_classes,
            scale: false,
            rotation: false,
        }
    }

    pub fn len(&self) -> usize {
        self.num_classes + self.scale as usize + self.rotation as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, meta: &ItemMeta) -> Result<AttributeVector> {
        let class = if self.num_classes > 0 {
            Some(
                meta.class
                    .ok_or_else(|| Error::Missing("class id for one-hot attribute".into()))?,
            )
        } else {
            None
        };
        let scale = if self.scale {
            Some(meta.scale.ok_or_else(|| Error::Missing("scale attribute".into()))?)
        } else {
            None
        };
        let rotation = if self.rotation {
            Some(
                meta.rotation
                    .ok_or_else(|| Error::Missing("rotation attribute".into()))?,
            )
        } else {
            None
        };
        encode_attributes(class, self.num_classes, scale, rotation)
    }
}

/// Class one-hot, then `(scale − 0.7)/0.6`, then `rotation/360`.
pub fn encode_attributes(
    class: Option<usize>,
    num_classes: usize,
    scale: Option<f64>,
    rotation: Option<f64>,
) -> Result<AttributeVector> {
    let mut v = Vec::with_capacity(num_classes + 2);
    if let Some(c) = class {
        if c >= num_classes {
            return Err(Error::invalid(format!(
                "class {c} out of range for {num_classes} classes"
            )));
        }
        v.extend((0..num_classes).map(|k| if k == c { 1.0 } else { 0.0 }));
    }
    if let Some(s) = scale {
        if !(MIN_SCALE..=MAX_SCALE).contains(&s) {
            return Err(Error::invalid(format!("scale {s} outside [{MIN_SCALE}, {MAX_SCALE}]")));
        }
        v.push((s - MIN_SCALE) / (MAX_SCALE - MIN_SCALE));
    }
    if let Some(r) = rotation {
        if !(0.0..360.0).contains(&r) {
            return Err(Error::invalid(format!("rotation {r} outside [0, 360)")));
        }
        v.push(r / 360.0);
    }
    Ok(AttributeVector(v))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ItemMeta {
    pub class: Option<usize>,
    pub scale: Option<f64>,
    pub rotation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Parallel lists of images, encoded attributes, raw metadata and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<ImageGrid>,
    attributes: Vec<AttributeVector>,
    meta: Vec<ItemMeta>,
    splits: Vec<Split>,
    layout: AttributeLayout,
}

impl Dataset {
    /// All items start in the train split.
    pub fn new(images: Vec<ImageGrid>, meta: Vec<ItemMeta>, layout: AttributeLayout) -> Result<Self> {
        if images.len() != meta.len() {
            return Err(Error::DimMismatch(format!(
                "{} images but {} metadata rows",
                images.len(),
                meta.len()
            )));
        }
        if let Some(first) = images.first() {
            for (i, im) in images.iter().enumerate() {
                if im.dims() != first.dims() {
                    return Err(Error::DimMismatch(format!(
                        "image {i} is {}x{}, expected {}x{}",
                        im.height(),
                        im.width(),
                        first.height(),
                        first.width()
                    )));
                }
            }
        }
        let attributes = meta.iter().map(|m| layout.encode(m)).collect::<Result<Vec<_>>>()?;
        let splits = vec![Split::Train; images.len()];
        Ok(Dataset {
            images,
            attributes,
            meta,
            splits,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(ImageGrid::dims)
    }

    pub fn images(&self) -> &[ImageGrid] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &ImageGrid {
        &self.images[i]
    }

    pub fn attributes(&self) -> &[AttributeVector] {
        &self.attributes
    }

    pub fn attribute(&self, i: usize) -> &AttributeVector {
        &self.attributes[i]
    }

    pub fn meta(&self) -> &[ItemMeta] {
        &self.meta
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn layout(&self) -> AttributeLayout {
        self.layout
    }

    pub fn num_classes(&self) -> usize {
        self.meta
            .iter()
            .filter_map(|m| m.class)
            .max()
            .map_or(0, |c| c + 1)
            .max(self.layout.num_classes)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn set_splits(&mut self, splits: Vec<Split>) -> Result<()> {
        if splits.len() != self.len() {
            return Err(Error::DimMismatch("split tags must match dataset length".into()));
        }
        self.splits = splits;
        Ok(())
    }

    /// Re-encodes attributes under a different layout.
    pub fn with_layout(mut self, layout: AttributeLayout) -> Result<Self> {
        self.attributes = self.meta.iter().map(|m| layout.encode(m)).collect::<Result<Vec<_>>>()?;
        self.layout = layout;
        Ok(self)
    }

    /// Items at `indices`, in that order, keeping their split tags.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            attributes: indices.iter().map(|&i| self.attributes[i].clone()).collect(),
            meta: indices.iter().map(|&i| self.meta[i].clone()).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            layout: self.layout,
        }
    }

    /// Pixelwise mean of up to `limit` images taken from `indices`.
    pub fn mean_image(&self, indices: &[usize], limit: usize) -> Result<ImageGrid> {
        let take: Vec<usize> = indices.iter().copied().take(limit).collect();
        let first = take
            .first()
            .ok_or_else(|| Error::invalid("mean of an empty selection"))?;
        let (h, w) = self.images[*first].dims();
        let mut acc = vec![0.0; h * w];
        for &i in &take {
            for (a, v) in acc.iter_mut().zip(self.images[i].data()) {
                *a += v;
            }
        }
        let inv = 1.0 / take.len() as f64;
        ImageGrid::new(h, w, acc.into_iter().map(|v| v * inv).collect())
    }

    pub(crate) fn replace_images(&mut self, images: Vec<ImageGrid>) {
        debug_assert_eq!(images.len(), self.images.len());
        self.images = images;
    }

    pub(crate) fn set_meta(&mut self, meta: Vec<ItemMeta>, layout: AttributeLayout) -> Result<()> {
        self.attributes = meta.iter().map(|m| layout.encode(m)).collect::<Result<Vec<_>>>()?;
        self.meta = meta;
        self.layout = layout;
        Ok(())
    }
}
