//! IDX (MNIST) container parsing.

use std::path::Path;

use super::{AttributeLayout, Dataset, ItemMeta};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: format!("truncated header (file has {} bytes)", bytes.len()),
        })
}

fn expect_magic(bytes: &[u8], magic: u32) -> Result<()> {
    let got = read_u32(bytes, 0)?;
    if got != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {got:#010x}, expected {magic:#010x}"),
        });
    }
    Ok(())
}

/// Returns `(rows, cols, pixels)` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<ImageGrid>)> {
    expect_magic(bytes, IDX_IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let per = rows * cols;
    let need = 16 + count * per;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated pixel data: need {need} bytes for {count} images of {rows}x{cols}"),
        });
    }
    if per == 0 {
        return Err(Error::Format {
            offset: 8,
            message: "zero image dimension".into(),
        });
    }
    let images = bytes[16..need]
        .chunks(per)
        .map(|c| ImageGrid::new(rows, cols, c.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    expect_magic(bytes, IDX_LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated label data: need {need} bytes for {count} labels"),
        });
    }
    Ok(bytes[8..need].to_vec())
}

/// Loads an IDX image/label pair; labels become one-hot class attributes.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    let ib = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lb = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    let (_, _, images) = parse_idx_images(&ib)?;
    let labels = parse_idx_labels(&lb)?;
    if images.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let meta = labels
        .iter()
        .map(|&l| ItemMeta {
            class: Some(l as usize),
            ..ItemMeta::default()
        })
        .collect();
    Dataset::new(images, meta, AttributeLayout::classes_only(num_classes))
}
