//! Simulated scale/rotation variants, band-limited random fields and
//! synthetic collections with a known central template.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AttributeLayout, Dataset, ItemMeta};
use crate::diffeo::{integrate_ss, warp, DeformationField, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, VectorField};

pub const MIN_SCALE: f64 = 0.7;
pub const MAX_SCALE: f64 = 1.3;

/// Largest amplitude accepted by [`synth_oracle_dataset`], in pixels.
const MAX_ORACLE_AMPLITUDE: f64 = 5.0;

/// Field values are snapped to multiples of this before centering so that
/// sums of the centered fields are exact in any order.
const FIELD_QUANTUM: f64 = 1.0 / (1u64 << 24) as f64;

const BOX_PASSES: usize = 4;

/// Which simulated attributes to add to a class-labelled dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "class")]
    Class,
    #[serde(rename = "class-scale")]
    ClassScale,
    #[serde(rename = "class-scale-rot")]
    ClassScaleRot,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(Regime::Class),
            "class-scale" => Ok(Regime::ClassScale),
            "class-scale-rot" => Ok(Regime::ClassScaleRot),
            other => Err(Error::invalid(format!(
                "unknown regime {other:?} (expected class, class-scale or class-scale-rot)"
            ))),
        }
    }
}

fn box3_edge(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        src[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(y + dy, x + dx);
                }
            }
            out[y as usize * w + x as usize] = s / 9.0;
        }
    }
    out
}

/// White noise per channel, smoothed by four 3×3 box passes (edge padded),
/// rescaled so the largest vector norm equals `max_magnitude`.
pub fn band_limited_field<R: Rng + ?Sized>(h: usize, w: usize, max_magnitude: f64, rng: &mut R) -> VectorField {
    let mut planes = Vec::with_capacity(2 * h * w);
    for _ in 0..2 {
        let mut p: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..BOX_PASSES {
            p = box3_edge(&p, h, w);
        }
        planes.extend(p);
    }
    let field = VectorField::new(h, w, planes).expect("plane sizes match dims");
    let peak = field.max_norm();
    if peak > 0.0 {
        field.scaled(max_magnitude / peak)
    } else {
        field
    }
}

/// Rotates by `rotation_deg` then scales by `scale`, both about the image
/// center, in one bilinear resampling through the inverse affine map.
pub fn synth_transform(image: &ImageGrid, scale: f64, rotation_deg: f64) -> Result<ImageGrid> {
    if !(MIN_SCALE..=MAX_SCALE).contains(&scale) {
        return Err(Error::invalid(format!(
            "scale {scale} outside [{MIN_SCALE}, {MAX_SCALE}]"
        )));
    }
    if !(0.0..360.0).contains(&rotation_deg) {
        return Err(Error::invalid(format!("rotation {rotation_deg} outside [0, 360)")));
    }
    let (h, w) = image.dims();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    let u = VectorField::from_fn(h, w, |y, x| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        // inverse: rotate by −θ, divide by the scale
        let qx = cx + (cos * dx + sin * dy) / scale;
        let qy = cy + (-sin * dx + cos * dy) / scale;
        (qx - x as f64, qy - y as f64)
    });
    warp(image, &DeformationField::from_displacement(u))
}

/// Adds simulated scale and/or rotation per item, recording the drawn values
/// as attributes. Deterministic in `seed`.
pub fn build_simulated(dataset: &Dataset, regime: Regime, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let with_scale = matches!(regime, Regime::ClassScale | Regime::ClassScaleRot);
    let with_rot = regime == Regime::ClassScaleRot;
    let meta: Vec<ItemMeta> = dataset
        .meta()
        .iter()
        .map(|m| ItemMeta {
            class: m.class,
            scale: with_scale.then(|| rng.gen_range(MIN_SCALE..=MAX_SCALE)),
            rotation: with_rot.then(|| rng.gen_range(0.0..360.0)),
        })
        .collect();
    let images = if with_scale || with_rot {
        dataset
            .images()
            .par_iter()
            .zip(meta.par_iter())
            .map(|(im, m)| synth_transform(im, m.scale.unwrap_or(1.0), m.rotation.unwrap_or(0.0)))
            .collect::<Result<Vec<_>>>()?
    } else {
        dataset.images().to_vec()
    };
    let layout = AttributeLayout {
        num_classes: dataset.num_classes(),
        scale: with_scale,
        rotation: with_rot,
    };
    let mut out = dataset.clone();
    out.replace_images(images);
    out.set_meta(meta, layout)?;
    Ok(out)
}

/// Snaps fields to the quantum grid and subtracts their mean exactly, so the
/// centered fields sum to zero under any summation order.
fn center_exactly(fields: &mut [VectorField]) {
    let n = fields.len() as i64;
    let len = fields[0].data().len();
    let mut ints: Vec<Vec<i64>> = fields
        .iter()
        .map(|f| f.data().iter().map(|v| (v / FIELD_QUANTUM).round() as i64).collect())
        .collect();
    for j in 0..len {
        let total: i64 = ints.iter().map(|k| k[j]).sum();
        let base = total.div_euclid(n);
        let rem = total.rem_euclid(n);
        for (i, k) in ints.iter_mut().enumerate() {
            k[j] -= base + i64::from((i as i64) < rem);
        }
    }
    for (f, k) in fields.iter_mut().zip(ints) {
        for (d, q) in f.data_mut().iter_mut().zip(k) {
            *d = q as f64 * FIELD_QUANTUM;
        }
    }
}

/// `n` images `clip(template ∘ exp(vᵢ) + noise)` with band-limited velocities
/// whose sum is exactly zero, so the template is the true central image.
/// Returns the velocities alongside the dataset.
pub fn synth_oracle_dataset(
    template: &ImageGrid,
    n: usize,
    noise_sigma: f64,
    field_amplitude: f64,
    seed: u64,
) -> Result<(Dataset, Vec<VectorField>)> {
    if n == 0 {
        return Err(Error::invalid("oracle dataset needs n >= 1"));
    }
    if !(0.0..=MAX_ORACLE_AMPLITUDE).contains(&field_amplitude) {
        return Err(Error::invalid(format!(
            "field amplitude {field_amplitude} outside [0, {MAX_ORACLE_AMPLITUDE}]"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise sigma must be finite and non-negative"));
    }
    let (h, w) = template.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fields: Vec<VectorField> = (0..n)
        .map(|_| band_limited_field(h, w, field_amplitude, &mut rng))
        .collect();
    center_exactly(&mut fields);
    let warped = fields
        .par_iter()
        .map(|v| warp(template, &integrate_ss(v, DEFAULT_STEPS)?))
        .collect::<Result<Vec<_>>>()?;
    let images = warped
        .into_iter()
        .map(|mut im| {
            if noise_sigma > 0.0 {
                for p in im.data_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *p = (*p + noise_sigma * e).clamp(0.0, 1.0);
                }
            }
            im
        })
        .collect();
    let ds = Dataset::new(images, vec![ItemMeta::default(); n], AttributeLayout::default())?;
    Ok((ds, fields))
}

fn class_seed(seed: u64, class: usize) -> u64 {
    seed ^ ((class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One oracle collection per prototype, labelled by prototype index. Each
/// class's velocities sum to zero, so prototype `k` is class `k`'s center.
pub fn synth_class_dataset(
    prototypes: &[ImageGrid],
    n_per_class: usize,
    noise_sigma: f64,
    field_amplitude: f64,
    seed: u64,
) -> Result<(Dataset, Vec<VectorField>)> {
    if prototypes.is_empty() {
        return Err(Error::invalid("no class prototypes"));
    }
    let mut images = Vec::new();
    let mut meta = Vec::new();
    let mut fields = Vec::new();
    for (k, proto) in prototypes.iter().enumerate() {
        let (ds, f) = synth_oracle_dataset(proto, n_per_class, noise_sigma, field_amplitude, class_seed(seed, k))?;
        images.extend(ds.images().iter().cloned());
        meta.extend(std::iter::repeat_n(
            ItemMeta {
                class: Some(k),
                ..ItemMeta::default()
            },
            n_per_class,
        ));
        fields.extend(f);
    }
    let ds = Dataset::new(images, meta, AttributeLayout::classes_only(prototypes.len()))?;
    Ok((ds, fields))
}

/// Zero-pads `image` to `h × w`, centered.
pub fn pad_to(image: &ImageGrid, h: usize, w: usize) -> Result<ImageGrid> {
    let (ih, iw) = image.dims();
    if ih > h || iw > w {
        return Err(Error::invalid(format!("cannot pad {ih}x{iw} into {h}x{w}")));
    }
    let oy = (h - ih) / 2;
    let ox = (w - iw) / 2;
    Ok(ImageGrid::from_fn(h, w, |y, x| {
        if y >= oy && y < oy + ih && x >= ox && x < ox + iw {
            image.get(y - oy, x - ox)
        } else {
            0.0
        }
    }))
}

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Stroke {
    let steps = (((to_deg - from_deg).abs() / 10.0).ceil() as usize).max(2);
    (0..=steps)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64).to_radians();
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Digit-like strokes in a box spanning x ∈ [−0.5, 0.5], y ∈ [−0.8, 0.8]
/// (y points down).
fn glyph_strokes(class: usize) -> Vec<Stroke> {
    match class {
        0 => vec![arc(0.0, 0.0, 0.42, 0.72, 0.0, 360.0)],
        1 => vec![vec![(-0.2, -0.5), (0.05, -0.75), (0.05, 0.75)]],
        2 => {
            let mut s = arc(0.0, -0.35, 0.4, 0.4, 200.0, 400.0);
            s.extend([(-0.45, 0.75), (0.45, 0.75)]);
            vec![s]
        }
        3 => vec![
            arc(0.0, -0.375, 0.36, 0.36, 200.0, 450.0),
            arc(0.0, 0.375, 0.4, 0.375, 270.0, 520.0),
        ],
        4 => vec![vec![(0.2, 0.75), (0.2, -0.75), (-0.45, 0.3), (0.45, 0.3)]],
        5 => {
            let mut s = vec![(0.4, -0.75), (-0.32, -0.75), (-0.36, -0.08)];
            s.extend(arc(0.0, 0.3, 0.42, 0.42, 215.0, 510.0));
            vec![s]
        }
        6 => vec![
            arc(0.0, 0.35, 0.4, 0.4, 0.0, 360.0),
            vec![(0.3, -0.75), (-0.12, -0.35), (-0.38, 0.15), (-0.4, 0.35)],
        ],
        7 => vec![vec![(-0.45, -0.75), (0.45, -0.75), (-0.1, 0.75)]],
        8 => vec![
            arc(0.0, -0.4, 0.32, 0.34, 0.0, 360.0),
            arc(0.0, 0.37, 0.42, 0.38, 0.0, 360.0),
        ],
        _ => vec![arc(0.0, -0.35, 0.4, 0.4, 0.0, 360.0), vec![(0.4, -0.35), (0.3, 0.75)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Procedural digit-like prototypes (up to 10 distinct shapes), rendered as
/// anti-aliased strokes about 0.6·h tall and lightly blurred. Used as a
/// self-contained stand-in for handwritten-digit data.
pub fn glyph_templates(num_classes: usize, h: usize, w: usize) -> Result<Vec<ImageGrid>> {
    if num_classes == 0 || num_classes > 10 {
        return Err(Error::invalid("glyph classes must be in 1..=10"));
    }
    if h < 8 || w < 8 {
        return Err(Error::invalid("glyphs need at least 8x8 pixels"));
    }
    let unit = 0.38 * h.min(w) as f64;
    let radius = 0.05 * h.min(w) as f64;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    Ok((0..num_classes)
        .map(|k| {
            let strokes: Vec<Stroke> = glyph_strokes(k)
                .into_iter()
                .map(|s| s.into_iter().map(|(x, y)| (cx + unit * x, cy + unit * y)).collect())
                .collect();
            let sharp = ImageGrid::from_fn(h, w, |y, x| {
                let p = (x as f64, y as f64);
                let d = strokes
                    .iter()
                    .flat_map(|s| s.windows(2).map(move |ab| segment_distance(p, ab[0], ab[1])))
                    .fold(f64::INFINITY, f64::min);
                (radius + 0.5 - d).clamp(0.0, 1.0)
            });
            let blurred = box3_edge(sharp.data(), h, w);
            ImageGrid::new(h, w, blurred.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("blur keeps dims")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(h: usize, w: usize, r: usize, c: usize) -> ImageGrid {
        ImageGrid::from_fn(h, w, |y, x| if (y, x) == (r, c) { 1.0 } else { 0.0 })
    }

    #[test]
    fn band_limited_has_requested_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = band_limited_field(32, 32, 3.0, &mut rng);
        assert!((f.max_norm() - 3.0).abs() < 1e-12);
        assert_eq!(band_limited_field(8, 8, 0.0, &mut rng).max_norm(), 0.0);
    }

    #[test]
    fn identity_transform_is_exact() {
        let im = glyph_templates(3, 32, 32).unwrap().remove(2);
        assert_eq!(synth_transform(&im, 1.0, 0.0).unwrap(), im);
        assert!(synth_transform(&im, 0.69, 0.0).is_err());
        assert!(synth_transform(&im, 1.0, 360.0).is_err());
    }

    #[test]
    fn half_turn_mirrors_through_center() {
        let (h, w, r, c) = (9, 11, 2, 7);
        let out = synth_transform(&dot(h, w, r, c), 1.0, 180.0).unwrap();
        let argmax = (0..h * w)
            .max_by(|&a, &b| out.data()[a].total_cmp(&out.data()[b]))
            .unwrap();
        assert_eq!((argmax / w, argmax % w), (h - 1 - r, w - 1 - c));
        assert!((out.get(h - 1 - r, w - 1 - c) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn upscaling_grows_area_quadratically() {
        let disk = ImageGrid::from_fn(32, 32, |y, x| {
            let d = ((y as f64 - 15.5).powi(2) + (x as f64 - 15.5).powi(2)).sqrt();
            (7.0 - d).clamp(0.0, 1.0)
        });
        let before = disk.area_above(0.5) as f64;
        let after = synth_transform(&disk, 1.3, 0.0).unwrap().area_above(0.5) as f64;
        let ratio = after / before;
        assert!((ratio / 1.69 - 1.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn class_regime_keeps_images() {
        let protos = glyph_templates(3, 16, 16).unwrap();
        let meta = (0..3)
            .map(|k| ItemMeta {
                class: Some(k),
                ..ItemMeta::default()
            })
            .collect();
        let ds = Dataset::new(protos, meta, AttributeLayout::classes_only(3)).unwrap();
        let sim = build_simulated(&ds, Regime::Class, 4).unwrap();
        assert_eq!(sim.images(), ds.images());
        assert_eq!(sim.layout().len(), 3);
        let rot = build_simulated(&ds, Regime::ClassScaleRot, 4).unwrap();
        assert_eq!(rot.layout().len(), 5);
        assert_eq!(rot, build_simulated(&ds, Regime::ClassScaleRot, 4).unwrap());
        assert_ne!(rot, build_simulated(&ds, Regime::ClassScaleRot, 5).unwrap());
    }

    #[test]
    fn oracle_fields_sum_to_zero_exactly() {
        let t = glyph_templates(1, 16, 16).unwrap().remove(0);
        let (ds, fields) = synth_oracle_dataset(&t, 7, 0.05, 3.0, 11).unwrap();
        assert_eq!(ds.len(), 7);
        let mean = VectorField::mean_of(&fields).unwrap();
        assert!(mean.data().iter().all(|&v| v == 0.0));
        let mut rev = VectorField::zeros(16, 16);
        for f in fields.iter().rev() {
            rev = rev.add(f).unwrap();
        }
        assert!(rev.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_item_oracle_is_template_plus_noise() {
        let t = glyph_templates(1, 16, 16).unwrap().remove(0);
        let (ds, fields) = synth_oracle_dataset(&t, 1, 0.0, 3.0, 2).unwrap();
        assert!(fields[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(ds.image(0), &t);
        let (ds, _) = synth_oracle_dataset(&t, 4, 0.0, 0.0, 2).unwrap();
        assert!(ds.images().iter().all(|im| im == &t));
        assert!(synth_oracle_dataset(&t, 4, 0.0, 5.5, 2).is_err());
        assert!(synth_oracle_dataset(&t, 0, 0.0, 1.0, 2).is_err());
    }

    #[test]
    fn glyphs_are_distinct_and_in_range() {
        let g = glyph_templates(10, 32, 32).unwrap();
        for (i, a) in g.iter().enumerate() {
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(a.area_above(0.5) > 30, "glyph {i} too faint");
            for b in &g[i + 1..] {
                assert!(a.mse(b).unwrap() > 0.01);
            }
        }
    }

    #[test]
    fn padding_centers() {
        let im = ImageGrid::from_fn(28, 28, |_, _| 1.0);
        let p = pad_to(&im, 32, 32).unwrap();
        assert_eq!(p.get(1, 1), 0.0);
        assert_eq!(p.get(2, 2), 1.0);
        assert_eq!(p.get(29, 29), 1.0);
        assert_eq!(p.get(30, 30), 0.0);
    }
}
