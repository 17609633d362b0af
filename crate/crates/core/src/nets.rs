//! Network architectures: attribute-conditioned template decoder, per-pixel
//! template, registration U-Net and latent encoder, all expressed as graph
//! builders over named parameters.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward, Graph, NodeId};
use crate::data::AttributeVector;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, VectorField};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const TEMPLATE_PIXELS: &str = "template/pixels";
pub const EXEMPLAR_WEIGHTS: &str = "template/exemplars/w";
pub const EXEMPLAR_BIAS: &str = "template/exemplars/b";

pub const IMAGE_INPUT: &str = "image";
pub const ATTRIBUTE_INPUT: &str = "attributes";

const LEAKY_SLOPE: f64 = 0.2;
const FINAL_INIT_STD: f64 = 1e-5;
const KERNEL: usize = 3;

/// Where the template comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One learned image shared by all inputs.
    #[default]
    Unconditional,
    /// Decoder from the attribute vector.
    Conditional,
    /// Decoder from attributes concatenated with an encoded latent code.
    Latent,
    /// Fixed per-class exemplar images selected by the one-hot attributes.
    Exemplar,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconditional" => Ok(Mode::Unconditional),
            "conditional" => Ok(Mode::Conditional),
            "latent" => Ok(Mode::Latent),
            "exemplar" => Ok(Mode::Exemplar),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?} (expected unconditional, conditional, latent or exemplar)"
            ))),
        }
    }
}

impl Mode {
    pub fn uses_attributes(self) -> bool {
        !matches!(self, Mode::Unconditional)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub attr_len: usize,
    /// Feature count of the decoder's dense seed grid.
    pub decoder_k: usize,
    pub decoder_features: usize,
    pub decoder_levels: usize,
    pub unet_features: usize,
    pub unet_depth: usize,
    pub latent_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            height: 32,
            width: 32,
            attr_len: 0,
            decoder_k: 8,
            decoder_features: 16,
            decoder_levels: 3,
            unet_features: 32,
            unet_depth: 4,
            latent_size: 1,
        }
    }
}

impl ArchConfig {
    pub fn with_dims(height: usize, width: usize) -> Self {
        ArchConfig {
            height,
            width,
            ..ArchConfig::default()
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let unet = 1usize << self.unet_depth;
        let dec = 1usize << self.decoder_levels;
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image dims must be positive"));
        }
        if !self.height.is_multiple_of(unet) || !self.width.is_multiple_of(unet) {
            return Err(Error::invalid(format!(
                "{}x{} is not divisible by 2^{} for the registration network",
                self.height, self.width, self.unet_depth
            )));
        }
        if mode.uses_attributes() && (!self.height.is_multiple_of(dec) || !self.width.is_multiple_of(dec)) {
            return Err(Error::invalid(format!(
                "{}x{} is not divisible by 2^{} for the decoder",
                self.height, self.width, self.decoder_levels
            )));
        }
        if self.decoder_k == 0 || self.decoder_features == 0 || self.unet_features == 0 {
            return Err(Error::invalid("feature counts must be positive"));
        }
        match mode {
            Mode::Conditional | Mode::Exemplar if self.attr_len == 0 => Err(Error::invalid(format!(
                "{mode:?} mode needs a non-empty attribute vector"
            ))),
            Mode::Latent if self.latent_size == 0 => Err(Error::invalid("latent mode needs latent_size >= 1")),
            _ => Ok(()),
        }
    }

    fn seed_dims(&self) -> (usize, usize) {
        (self.height >> self.decoder_levels, self.width >> self.decoder_levels)
    }
}

/// Architecture plus template source; builds graphs for any batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub arch: ArchConfig,
    pub mode: Mode,
}

fn conv_params(g: &mut Graph, prefix: &str, cin: usize, cout: usize) -> Result<(NodeId, NodeId)> {
    let w = g.param(format!("{prefix}/w"), &[cout, cin, KERNEL, KERNEL])?;
    let b = g.param(format!("{prefix}/b"), &[cout])?;
    Ok((w, b))
}

fn conv(g: &mut Graph, x: NodeId, prefix: &str, cout: usize, stride: usize) -> Result<NodeId> {
    let cin = g.shape(x)[1];
    let (w, b) = conv_params(g, prefix, cin, cout)?;
    g.conv2d(x, w, b, stride)
}

fn dense(g: &mut Graph, x: NodeId, prefix: &str, out: usize) -> Result<NodeId> {
    let fin = g.shape(x)[1];
    let w = g.param(format!("{prefix}/w"), &[out, fin])?;
    let b = g.param(format!("{prefix}/b"), &[out])?;
    g.dense(x, w, b)
}

impl Model {
    pub fn new(arch: ArchConfig, mode: Mode) -> Result<Self> {
        arch.validate(mode)?;
        Ok(Model { arch, mode })
    }

    /// Declares the `image` input, `[n, 1, h, w]`.
    pub fn image_input(&self, g: &mut Graph, n: usize) -> Result<NodeId> {
        g.input(IMAGE_INPUT, &[n, 1, self.arch.height, self.arch.width])
    }

    /// Declares the `attributes` input, `[n, attr_len]`.
    pub fn attribute_input(&self, g: &mut Graph, n: usize) -> Result<NodeId> {
        g.input(ATTRIBUTE_INPUT, &[n, self.arch.attr_len])
    }

    /// Dense seed, then per level: ×2 upsample and two relu convolutions;
    /// sigmoid output in `[0, 1]`.
    pub fn decoder(&self, g: &mut Graph, code: NodeId) -> Result<NodeId> {
        let n = g.shape(code)[0];
        let (h0, w0) = self.arch.seed_dims();
        let k = self.arch.decoder_k;
        let seed = dense(g, code, "decoder/dense", k * h0 * w0)?;
        let mut x = g.reshape(seed, &[n, k, h0, w0])?;
        for lvl in 0..self.arch.decoder_levels {
            x = g.upsample2(x)?;
            for j in 0..2 {
                x = conv(
                    g,
                    x,
                    &format!("decoder/lvl{lvl}/conv{j}"),
                    self.arch.decoder_features,
                    1,
                )?;
                x = g.relu(x);
            }
        }
        let out = conv(g, x, "decoder/out", 1, 1)?;
        Ok(g.sigmoid(out))
    }

    /// Stride-2 leaky convolutions followed by a dense map to the latent code.
    pub fn encoder(&self, g: &mut Graph, image: NodeId) -> Result<NodeId> {
        let n = g.shape(image)[0];
        let mut x = image;
        for i in 0..self.arch.unet_depth {
            x = conv(g, x, &format!("encoder/down{i}/conv0"), self.arch.unet_features, 2)?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        let flat: usize = g.shape(x)[1..].iter().product();
        let x = g.reshape(x, &[n, flat])?;
        dense(g, x, "encoder/dense", self.arch.latent_size)
    }

    /// Template batch `[n, 1, h, w]` for the configured mode. `image` is only
    /// read by the latent mode.
    pub fn template(&self, g: &mut Graph, n: usize, image: Option<NodeId>) -> Result<NodeId> {
        let (h, w) = (self.arch.height, self.arch.width);
        match self.mode {
            Mode::Unconditional => {
                let p = g.param(TEMPLATE_PIXELS, &[1, 1, h, w])?;
                if n == 1 {
                    Ok(p)
                } else {
                    g.tile_batch(p, n)
                }
            }
            Mode::Conditional => {
                let a = self.attribute_input(g, n)?;
                self.decoder(g, a)
            }
            Mode::Latent => {
                let image = match image {
                    Some(id) => id,
                    None => self.image_input(g, n)?,
                };
                let z = self.encoder(g, image)?;
                let code = if self.arch.attr_len > 0 {
                    let a = self.attribute_input(g, n)?;
                    g.concat(&[a, z])?
                } else {
                    z
                };
                self.decoder(g, code)
            }
            Mode::Exemplar => {
                let a = self.attribute_input(g, n)?;
                let wt = g.param(EXEMPLAR_WEIGHTS, &[h * w, self.arch.attr_len])?;
                let b = g.param(EXEMPLAR_BIAS, &[h * w])?;
                let flat = g.dense(a, wt, b)?;
                g.reshape(flat, &[n, 1, h, w])
            }
        }
    }

    /// U-Net on `concat(t, x)` returning the velocity `[n, 2, h, w]`.
    pub fn unet(&self, g: &mut Graph, template: NodeId, image: NodeId) -> Result<NodeId> {
        let f = self.arch.unet_features;
        let input = g.concat(&[template, image])?;
        let mut skips = vec![input];
        let mut x = input;
        for i in 0..self.arch.unet_depth {
            x = conv(g, x, &format!("unet/down{i}/conv0"), f, 2)?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
            skips.push(x);
        }
        skips.pop();
        for i in 0..self.arch.unet_depth {
            x = g.upsample2(x)?;
            let skip = skips.pop().expect("one skip per level");
            x = g.concat(&[x, skip])?;
            x = conv(g, x, &format!("unet/up{i}/conv0"), f, 1)?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        let last = self.arch.unet_depth.saturating_sub(1);
        for j in 1..=2 {
            x = conv(g, x, &format!("unet/up{last}/conv{j}"), f, 1)?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        conv(g, x, "unet/final", 2, 1)
    }

    /// Every parameter `(name, shape)` the model declares, in graph order.
    pub fn param_specs(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut g = Graph::new();
        let x = self.image_input(&mut g, 1)?;
        let t = self.template(&mut g, 1, Some(x))?;
        self.unet(&mut g, t, x)?;
        Ok(g.param_specs()
            .into_iter()
            .map(|(n, s)| (n.to_string(), s.to_vec()))
            .collect())
    }

    /// Glorot-uniform weights and zero biases from a seeded generator; the
    /// final velocity layer draws weights and bias from `N(0, 1e-5²)`; the
    /// template starts at mid-gray until [`Model::set_template_image`].
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut specs = self.param_specs()?;
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tiny = Normal::new(0.0, FINAL_INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        for (name, shape) in specs {
            let numel: usize = shape.iter().product();
            let values: Vec<f64> = if name.starts_with("unet/final/") {
                (0..numel).map(|_| tiny.sample(&mut rng)).collect()
            } else if name == TEMPLATE_PIXELS {
                vec![0.5; numel]
            } else if name.starts_with("template/") || name.ends_with("/b") {
                vec![0.0; numel]
            } else {
                let (fan_in, fan_out) = match shape.len() {
                    2 => (shape[1], shape[0]),
                    _ => {
                        let rf: usize = shape[2..].iter().product();
                        (shape[1] * rf, shape[0] * rf)
                    }
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-limit..limit)).collect()
            };
            store.insert(
                name,
                Tensor::new(shape, values.into_iter().map(T::from_f64_lossy).collect())?,
            )?;
        }
        Ok(store)
    }

    /// Sets the unconditional template to `image`.
    pub fn set_template_image<T: Real>(&self, params: &mut ParamStore<T>, image: &ImageGrid) -> Result<()> {
        image.same_dims((self.arch.height, self.arch.width))?;
        let t = ImageGrid::stack::<T>(&[image])?;
        params.insert(TEMPLATE_PIXELS, t)
    }

    /// Loads exemplar images, one per class, into the exemplar lookup.
    pub fn set_exemplars<T: Real>(&self, params: &mut ParamStore<T>, exemplars: &[ImageGrid]) -> Result<()> {
        let (h, w) = (self.arch.height, self.arch.width);
        if exemplars.len() > self.arch.attr_len {
            return Err(Error::invalid("more exemplars than attribute slots"));
        }
        let mut wt = vec![T::zero(); h * w * self.arch.attr_len];
        for (k, im) in exemplars.iter().enumerate() {
            im.same_dims((h, w))?;
            for (p, &v) in im.data().iter().enumerate() {
                wt[p * self.arch.attr_len + k] = T::from_f64_lossy(v);
            }
        }
        params.insert(EXEMPLAR_WEIGHTS, Tensor::new(vec![h * w, self.arch.attr_len], wt)?)
    }
}

fn attr_tensor<T: Real>(a: &AttributeVector, expected: usize) -> Result<Tensor<T>> {
    if a.len() != expected {
        return Err(Error::DimMismatch(format!(
            "attribute vector has length {}, model expects {expected}",
            a.len()
        )));
    }
    Tensor::new(
        vec![1, expected],
        a.values().iter().map(|&v| T::from_f64_lossy(v)).collect(),
    )
}

fn single_output<T: Real>(
    g: &Graph,
    out: NodeId,
    inputs: HashMap<String, Tensor<T>>,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let acts = forward(g, &inputs, params)?;
    Ok(acts.value(out).clone())
}

/// Decoder template for one attribute vector.
pub fn template_decoder_forward<T: Real>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    a: &AttributeVector,
) -> Result<ImageGrid> {
    let model = Model::new(*arch, Mode::Conditional)?;
    let mut g = Graph::new();
    let t = model.template(&mut g, 1, None)?;
    let inputs = HashMap::from([(ATTRIBUTE_INPUT.to_string(), attr_tensor(a, arch.attr_len)?)]);
    Ok(ImageGrid::unstack(&single_output(&g, t, inputs, params)?)?.remove(0))
}

/// The learned per-pixel template.
pub fn unconditional_template<T: Real>(params: &ParamStore<T>) -> Result<ImageGrid> {
    let t = params.require(TEMPLATE_PIXELS)?;
    Ok(ImageGrid::unstack(t)?.remove(0))
}

/// Velocity field registering `x` to `t`.
pub fn registration_unet_forward<T: Real>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    t: &ImageGrid,
    x: &ImageGrid,
) -> Result<VectorField> {
    if t.dims() != x.dims() {
        return Err(Error::DimMismatch("template and image dims differ".into()));
    }
    let arch = ArchConfig {
        height: t.height(),
        width: t.width(),
        ..*arch
    };
    let model = Model::new(arch, Mode::Unconditional)?;
    let mut g = Graph::new();
    let ti = g.input("template", &[1, 1, arch.height, arch.width])?;
    let xi = model.image_input(&mut g, 1)?;
    let v = model.unet(&mut g, ti, xi)?;
    let inputs = HashMap::from([
        ("template".to_string(), ImageGrid::stack::<T>(&[t])?),
        (IMAGE_INPUT.to_string(), ImageGrid::stack::<T>(&[x])?),
    ]);
    Ok(VectorField::unstack(&single_output(&g, v, inputs, params)?)?.remove(0))
}

/// Latent code for one image.
pub fn latent_encoder_forward<T: Real>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    x: &ImageGrid,
) -> Result<AttributeVector> {
    x.same_dims((arch.height, arch.width))?;
    let model = Model::new(*arch, Mode::Latent)?;
    let mut g = Graph::new();
    let xi = model.image_input(&mut g, 1)?;
    let z = model.encoder(&mut g, xi)?;
    let inputs = HashMap::from([(IMAGE_INPUT.to_string(), ImageGrid::stack::<T>(&[x])?)]);
    let out = single_output(&g, z, inputs, params)?;
    Ok(AttributeVector(out.data().iter().map(|v| v.as_f64()).collect()))
}
