//! 8-bit grayscale PGM/PNG images and the `filename,class,scale,rotation`
//! attribute CSV.

use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributeLayout, Dataset, ItemMeta};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "pgm" => Some(ImageFormat::Pgm),
            "png" => Some(ImageFormat::Png),
            _ => None,
        }
    }
}

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Header tokenizer that skips whitespace and `#` comments.
struct PgmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PgmHeader<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err(start, "expected an unsigned integer"))
    }
}

/// Returns `(height, width, raw 8-bit samples, maxval)`.
fn decode_pgm_raw(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>, usize)> {
    let ascii = match bytes.get(..2) {
        Some(b"P2") => true,
        Some(b"P5") => false,
        _ => return Err(fmt_err(0, "not a P2/P5 PGM file")),
    };
    let mut hdr = PgmHeader { bytes, pos: 2 };
    let width = hdr.number()?;
    let height = hdr.number()?;
    let maxval = hdr.number()?;
    if width == 0 || height == 0 {
        return Err(fmt_err(3, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fmt_err(hdr.pos, format!("maxval {maxval} is not an 8-bit depth")));
    }
    let n = width * height;
    let samples = if ascii {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let at = hdr.pos;
            let v = hdr.number()?;
            if v > maxval {
                return Err(fmt_err(at, format!("sample {v} exceeds maxval {maxval}")));
            }
            out.push(v as u8);
        }
        out
    } else {
        // exactly one whitespace byte separates the header from binary data
        let start = hdr.pos + 1;
        let data = bytes
            .get(start..start + n)
            .ok_or_else(|| fmt_err(bytes.len(), format!("truncated pixel data: need {n} bytes")))?;
        data.to_vec()
    };
    Ok((height, width, samples, maxval))
}

/// Intensities are `sample / maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let (h, w, samples, maxval) = decode_pgm_raw(bytes)?;
    let m = maxval as f64;
    ImageGrid::new(h, w, samples.iter().map(|&s| s as f64 / m).collect())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn pgm_bytes(h: usize, w: usize, samples: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

/// Binary P5 with maxval 255; values are clamped to `[0, 1]` and rounded.
pub fn encode_pgm(image: &ImageGrid) -> Vec<u8> {
    let samples: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    pgm_bytes(image.height(), image.width(), &samples)
}

fn decode_png(bytes: &[u8]) -> Result<ImageGrid> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().map_err(|e| Error::Codec(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Codec(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Codec(format!(
            "expected 8-bit grayscale PNG, got {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = (0..h)
        .flat_map(|y| buf[y * info.line_size..y * info.line_size + w].iter())
        .map(|&b| b as f64 / 255.0)
        .collect();
    ImageGrid::new(h, w, data)
}

fn encode_png(h: usize, w: usize, samples: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Codec(e.to_string()))?;
        writer
            .write_image_data(samples)
            .map_err(|e| Error::Codec(e.to_string()))?;
    }
    Ok(out)
}

/// Reads a PGM or PNG image, chosen by extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)
        .ok_or_else(|| Error::invalid(format!("{}: unknown image extension", path.display())))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        ImageFormat::Pgm => decode_pgm(&bytes),
        ImageFormat::Png => decode_png(&bytes),
    }
}

pub fn write_image(path: impl AsRef<Path>, image: &ImageGrid) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path).unwrap_or_default() {
        ImageFormat::Pgm => encode_pgm(image),
        ImageFormat::Png => {
            let samples: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
            encode_png(image.height(), image.width(), &samples)?
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit label map stored as a PGM.
pub fn read_label_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u32>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, samples, _) = decode_pgm_raw(&bytes)?;
    Ok((h, w, samples.into_iter().map(u32::from).collect()))
}

pub fn write_label_pgm(path: impl AsRef<Path>, dims: (usize, usize), labels: &[u32]) -> Result<()> {
    let path = path.as_ref();
    if labels.len() != dims.0 * dims.1 {
        return Err(Error::DimMismatch("label map length does not match dims".into()));
    }
    let samples = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in 8 bits"))))
        .collect::<Result<Vec<u8>>>()?;
    std::fs::write(path, pgm_bytes(dims.0, dims.1, &samples)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    filename: String,
    class: Option<usize>,
    scale: Option<f64>,
    rotation: Option<f64>,
}

/// Loads images listed in the attribute CSV; relative filenames resolve
/// against `dir`. The attribute layout covers every column that has values.
pub fn load_image_dir(dir: impl AsRef<Path>, attributes_csv: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let csv_path = attributes_csv.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| Error::invalid(format!("{}: {e}", csv_path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Row {
        row: 0,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["filename", "class", "scale", "rotation"] {
        return Err(Error::Row {
            row: 0,
            message: format!("expected header filename,class,scale,rotation, got {:?}", headers),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<CsvRow>().enumerate() {
        // row numbers are 1-based data rows, header excluded
        let row = rec.map_err(|e| Error::Row {
            row: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    let images = rows
        .iter()
        .map(|r| {
            let p = dir.join(&r.filename);
            if !p.exists() {
                return Err(Error::Missing(format!("image file {}", r.filename)));
            }
            read_image(&p)
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: Vec<ItemMeta> = rows
        .iter()
        .map(|r| ItemMeta {
            class: r.class,
            scale: r.scale,
            rotation: r.rotation,
        })
        .collect();
    let layout = AttributeLayout {
        num_classes: if meta.iter().all(|m| m.class.is_some()) {
            meta.iter().filter_map(|m| m.class).max().map_or(0, |c| c + 1)
        } else {
            0
        },
        scale: !meta.is_empty() && meta.iter().all(|m| m.scale.is_some()),
        rotation: !meta.is_empty() && meta.iter().all(|m| m.rotation.is_some()),
    };
    Dataset::new(images, meta, layout)
}

/// Writes `img_00000.<ext>` files plus `attributes.csv` into `dir`.
pub fn write_image_dir(dataset: &Dataset, dir: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("attributes.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    for (i, (im, m)) in dataset.images().iter().zip(dataset.meta()).enumerate() {
        let filename = format!("img_{i:05}.{}", format.extension());
        write_image(dir.join(&filename), im)?;
        writer
            .serialize(CsvRow {
                filename,
                class: m.class,
                scale: m.scale,
                rotation: m.rotation,
            })
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))
}
