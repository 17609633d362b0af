//! Diffeomorphic deformation machinery on 2D grids.
//!
//! Deformations are stored as displacements: `φ(p) = p + u(p)`. All
//! sampling is bilinear with edge clamping, shared with the graph
//! `GridSample` primitive so the differentiable and direct paths agree.

use crate::autodiff::kernels::{grid_sample_forward, Stencil};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, VectorField};

/// Default number of scaling-and-squaring steps.
pub const DEFAULT_STEPS: usize = 7;

/// Pixels excluded at each border in oracle comparisons.
pub const INTERIOR_MARGIN: usize = 3;

/// A displacement field `u` interpreted as the map `p ↦ p + u(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField(VectorField);

impl DeformationField {
    pub fn identity(height: usize, width: usize) -> Self {
        DeformationField(VectorField::zeros(height, width))
    }

    pub fn from_displacement(u: VectorField) -> Self {
        DeformationField(u)
    }

    pub fn displacement(&self) -> &VectorField {
        &self.0
    }

    pub fn into_displacement(self) -> VectorField {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::invalid("integration needs at least one step"));
    }
    Ok(())
}

/// Samples both channels of `field` at `p + u(p)`.
pub fn warp_field(field: &VectorField, phi: &DeformationField) -> Result<VectorField> {
    field.same_dims(phi.dims())?;
    let (h, w) = field.dims();
    let out = grid_sample_forward(field.data(), phi.displacement().data(), 1, 2, h, w);
    VectorField::new(h, w, out)
}

/// Flow of the stationary velocity `v` at t = 1 by scaling and squaring:
/// `u ← v / 2^steps`, then `steps` times `u ← u + u(p + u(p))`.
pub fn integrate_ss(v: &VectorField, steps: usize) -> Result<DeformationField> {
    check_steps(steps)?;
    v.ensure_finite("velocity field")?;
    let mut u = v.scaled(1.0 / 2f64.powi(steps as i32));
    for _ in 0..steps {
        let phi = DeformationField(u);
        let sampled = warp_field(phi.displacement(), &phi)?;
        u = phi.0.add(&sampled)?;
    }
    Ok(DeformationField(u))
}

/// Forward-Euler integration of `dφ/dt = v(φ)`; dense-step oracle for
/// [`integrate_ss`].
pub fn integrate_euler(v: &VectorField, steps: usize) -> Result<DeformationField> {
    check_steps(steps)?;
    v.ensure_finite("velocity field")?;
    let (h, w) = v.dims();
    let dt = 1.0 / steps as f64;
    let mut px: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
    let mut py: Vec<f64> = (0..h * w).map(|i| (i / w) as f64).collect();
    for _ in 0..steps {
        for i in 0..h * w {
            let st = Stencil::new(px[i], py[i], h, w);
            let vx = st.sample(v.dx(), w);
            let vy = st.sample(v.dy(), w);
            px[i] += dt * vx;
            py[i] += dt * vy;
        }
    }
    Ok(DeformationField(VectorField::from_fn(h, w, |y, x| {
        let i = y * w + x;
        (px[i] - x as f64, py[i] - y as f64)
    })))
}

/// `image ∘ φ`: bilinear sample of `image` at `p + u(p)`.
pub fn warp(image: &ImageGrid, phi: &DeformationField) -> Result<ImageGrid> {
    image.same_dims(phi.dims())?;
    let (h, w) = image.dims();
    let out = grid_sample_forward(image.data(), phi.displacement().data(), 1, 1, h, w);
    ImageGrid::new(h, w, out)
}

/// Nearest-neighbour warp for label maps (edge clamped).
pub fn warp_nearest(labels: &[u32], dims: (usize, usize), phi: &DeformationField) -> Result<Vec<u32>> {
    let (h, w) = dims;
    if labels.len() != h * w {
        return Err(Error::DimMismatch("label map size".into()));
    }
    if phi.dims() != dims {
        return Err(Error::DimMismatch("label map and field dims differ".into()));
    }
    let u = phi.displacement();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = u.get(y, x);
            let sx = (x as f64 + dx).round().clamp(0.0, (w - 1) as f64) as usize;
            let sy = (y as f64 + dy).round().clamp(0.0, (h - 1) as f64) as usize;
            out.push(labels[sy * w + sx]);
        }
    }
    Ok(out)
}

/// `φ1 ∘ φ2`: `u(p) = u2(p) + u1(p + u2(p))`.
pub fn compose(phi1: &DeformationField, phi2: &DeformationField) -> Result<DeformationField> {
    phi1.displacement().same_dims(phi2.dims())?;
    let sampled = warp_field(phi1.displacement(), phi2)?;
    Ok(DeformationField(phi2.displacement().add(&sampled)?))
}

/// Inverse deformation of `integrate_ss(v)`, i.e. the flow of `−v`.
pub fn invert(v: &VectorField, steps: usize) -> Result<DeformationField> {
    integrate_ss(&v.negated(), steps)
}

fn central_diff(plane: &[f64], h: usize, w: usize, y: usize, x: usize, along_x: bool) -> f64 {
    let (len, pos) = if along_x { (w, x) } else { (h, y) };
    if len < 2 {
        return 0.0;
    }
    let at = |k: usize| {
        if along_x {
            plane[y * w + k]
        } else {
            plane[k * w + x]
        }
    };
    if pos == 0 {
        at(1) - at(0)
    } else if pos == len - 1 {
        at(len - 1) - at(len - 2)
    } else {
        (at(pos + 1) - at(pos - 1)) / 2.0
    }
}

/// Per-pixel `det ∇φ`, central differences inside and one-sided at borders.
pub fn jacobian_determinants(phi: &DeformationField) -> Result<ImageGrid> {
    let u = phi.displacement();
    u.ensure_finite("deformation field")?;
    let (h, w) = u.dims();
    Ok(ImageGrid::from_fn(h, w, |y, x| {
        let uxx = central_diff(u.dx(), h, w, y, x, true);
        let uxy = central_diff(u.dx(), h, w, y, x, false);
        let uyx = central_diff(u.dy(), h, w, y, x, true);
        let uyy = central_diff(u.dy(), h, w, y, x, false);
        (1.0 + uxx) * (1.0 + uyy) - uxy * uyx
    }))
}

fn interior(h: usize, w: usize, margin: usize) -> impl Iterator<Item = (usize, usize)> {
    let (y0, y1) = (margin.min(h), h.saturating_sub(margin));
    let (x0, x1) = (margin.min(w), w.saturating_sub(margin));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (y, x)))
}

/// Largest absolute component difference between two fields away from the border.
pub fn interior_max_abs_diff(a: &VectorField, b: &VectorField, margin: usize) -> Result<f64> {
    a.same_dims(b.dims())?;
    let (h, w) = a.dims();
    Ok(interior(h, w, margin)
        .map(|(y, x)| {
            let (ax, ay) = a.get(y, x);
            let (bx, by) = b.get(y, x);
            (ax - bx).abs().max((ay - by).abs())
        })
        .fold(0.0, f64::max))
}

/// Mean displacement norm away from the border.
pub fn interior_mean_norm(u: &VectorField, margin: usize) -> f64 {
    let (h, w) = u.dims();
    let (mut sum, mut n) = (0.0, 0usize);
    for (y, x) in interior(h, w, margin) {
        let (dx, dy) = u.get(y, x);
        sum += (dx * dx + dy * dy).sqrt();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Differentiable scaling and squaring on a `[n, 2, h, w]` velocity node.
pub fn integrate_ss_graph(g: &mut Graph, v: NodeId, steps: usize) -> Result<NodeId> {
    check_steps(steps)?;
    let mut u = g.scale(v, 1.0 / 2f64.powi(steps as i32));
    for _ in 0..steps {
        let sampled = g.grid_sample(u, u)?;
        u = g.add(u, sampled)?;
    }
    Ok(u)
}

/// Differentiable `image ∘ φ` for `[n, c, h, w]` images and `[n, 2, h, w]` displacements.
pub fn warp_graph(g: &mut Graph, image: NodeId, u: NodeId) -> Result<NodeId> {
    g.grid_sample(image, u)
}
