//! Image and vector-field grids used outside the training graph.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// 2D scalar grid, row-major. Intensity images live in `[0, 1]`; the same
/// type also carries unconstrained scalar maps such as Jacobian determinants.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dims must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(ImageGrid { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageGrid {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        ImageGrid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mse(&self, other: &ImageGrid) -> Result<f64> {
        self.same_dims(other.dims())?;
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub(crate) fn same_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimMismatch(format!(
                "grid is {}x{}, expected {}x{}",
                self.height, self.width, dims.0, dims.1
            )));
        }
        Ok(())
    }

    /// Number of pixels strictly above `threshold`.
    pub fn area_above(&self, threshold: f64) -> usize {
        self.data.iter().filter(|&&v| v > threshold).count()
    }

    /// Stacks images into a `[n, 1, h, w]` tensor.
    pub fn stack<T: Real>(images: &[&ImageGrid]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            im.same_dims((h, w))?;
            data.extend(im.data.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::new(vec![images.len(), 1, h, w], data)
    }

    /// Splits a `[n, 1, h, w]` tensor into images.
    pub fn unstack<T: Real>(t: &Tensor<T>) -> Result<Vec<ImageGrid>> {
        if t.shape().len() != 4 || t.shape()[1] != 1 {
            return Err(Error::DimMismatch(format!("expected [n,1,h,w], got {:?}", t.shape())));
        }
        let (n, _, h, w) = t.dims4();
        Ok((0..n)
            .map(|i| ImageGrid {
                height: h,
                width: w,
                data: t.data()[i * h * w..(i + 1) * h * w]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect(),
            })
            .collect())
    }
}

/// Per-pixel `(dx, dy)` vectors in pixel units, stored as two planes
/// (all dx, then all dy) to match the `[2, h, w]` tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl VectorField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("field dims must be positive"));
        }
        if data.len() != 2 * height * width {
            return Err(Error::DimMismatch(format!(
                "{height}x{width} field needs {} values, got {}",
                2 * height * width,
                data.len()
            )));
        }
        Ok(VectorField { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        VectorField {
            height,
            width,
            data: vec![0.0; 2 * height * width],
        }
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Self::from_fn(height, width, |_, _| (dx, dy))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let hw = height * width;
        let mut data = vec![0.0; 2 * hw];
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                data[y * width + x] = dx;
                data[hw + y * width + x] = dy;
            }
        }
        VectorField { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dx(&self) -> &[f64] {
        &self.data[..self.height * self.width]
    }

    pub fn dy(&self) -> &[f64] {
        &self.data[self.height * self.width..]
    }

    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.height * self.width + i])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub(crate) fn same_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimMismatch(format!(
                "field is {}x{}, expected {}x{}",
                self.height, self.width, dims.0, dims.1
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> VectorField {
        VectorField {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn negated(&self) -> VectorField {
        self.scaled(-1.0)
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        other.same_dims(self.dims())?;
        Ok(VectorField {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Σ_p ‖u(p)‖².
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Per-pixel Euclidean norms.
    pub fn norms(&self) -> Vec<f64> {
        self.dx()
            .iter()
            .zip(self.dy())
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }

    /// Mean of the given fields; all must share dims.
    pub fn mean_of(fields: &[VectorField]) -> Result<VectorField> {
        let first = fields.first().ok_or_else(|| Error::invalid("mean of zero fields"))?;
        let mut acc = VectorField::zeros(first.height, first.width);
        for f in fields {
            f.same_dims(first.dims())?;
            for (a, v) in acc.data.iter_mut().zip(&f.data) {
                *a += v;
            }
        }
        let inv = 1.0 / fields.len() as f64;
        acc.data.iter_mut().for_each(|v| *v *= inv);
        Ok(acc)
    }

    /// Stacks fields into `[n, 2, h, w]`.
    pub fn stack<T: Real>(fields: &[&VectorField]) -> Result<Tensor<T>> {
        let first = fields.first().ok_or_else(|| Error::invalid("no fields to stack"))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(fields.len() * 2 * h * w);
        for f in fields {
            f.same_dims((h, w))?;
            data.extend(f.data.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::new(vec![fields.len(), 2, h, w], data)
    }

    pub fn unstack<T: Real>(t: &Tensor<T>) -> Result<Vec<VectorField>> {
        if t.shape().len() != 4 || t.shape()[1] != 2 {
            return Err(Error::DimMismatch(format!("expected [n,2,h,w], got {:?}", t.shape())));
        }
        let (n, _, h, w) = t.dims4();
        let per = 2 * h * w;
        Ok((0..n)
            .map(|i| VectorField {
                height: h,
                width: w,
                data: t.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect(),
            })
            .collect())
    }

    /// `x,y,dx,dy` rows with a header, for inspection.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,dx,dy\n");
        for y in 0..self.height {
            for x in 0..self.width {
                let (dx, dy) = self.get(y, x);
                out.push_str(&format!("{x},{y},{dx},{dy}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_layout_is_planar() {
        let f = VectorField::from_fn(2, 3, |y, x| (x as f64, 10.0 * y as f64));
        assert_eq!(f.dx(), &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        assert_eq!(f.dy(), &[0.0, 0.0, 0.0, 10.0, 10.0, 10.0]);
        assert_eq!(f.get(1, 2), (2.0, 10.0));
        let t = VectorField::stack::<f32>(&[&f, &f]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 3]);
        assert_eq!(VectorField::unstack(&t).unwrap()[1], f);
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let csv = VectorField::constant(2, 2, 0.5, -1.0).to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "x,y,dx,dy");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "1,0,0.5,-1");
    }
}
