//! Raw forward/backward kernels over NCHW slices.

use crate::tensor::{matmul, MatView, Real};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2D convolution; `w` is `[cout, cin, k, k]`.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.patch();
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut col = vec![T::zero(); kk * p];
    let wmat = MatView::row_major(w, g.cout, kk);
    for n in 0..g.n {
        im2col(&x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w], g, &mut col);
        let dst = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        matmul(wmat, MatView::row_major(&col, kk, p), dst, false);
        for (co, chunk) in dst.chunks_mut(p).enumerate() {
            let bias = b[co];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward<T: Real>(x: &[T], w: &[T], gy: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.patch();
    let plane_in = g.cin * g.h * g.w;
    let mut dx = vec![T::zero(); g.n * plane_in];
    let mut dw = vec![T::zero(); g.cout * kk];
    let mut db = vec![T::zero(); g.cout];
    let mut col = vec![T::zero(); kk * p];
    let mut dcol = vec![T::zero(); kk * p];
    let wmat = MatView::row_major(w, g.cout, kk);
    for n in 0..g.n {
        let gy_n = &gy[n * g.cout * p..(n + 1) * g.cout * p];
        im2col(&x[n * plane_in..(n + 1) * plane_in], g, &mut col);
        let gmat = MatView::row_major(gy_n, g.cout, p);
        matmul(gmat, MatView::row_major(&col, kk, p).t(), &mut dw, true);
        for (co, chunk) in gy_n.chunks(p).enumerate() {
            db[co] = db[co] + chunk.iter().copied().sum::<T>();
        }
        matmul(wmat.t(), gmat, &mut dcol, false);
        col2im(&dcol, g, &mut dx[n * plane_in..(n + 1) * plane_in]);
    }
    (dx, dw, db)
}

/// `y[n, out] = x[n, in] · wᵀ + b` with `w` laid out `[out, in]`.
pub(crate) fn dense_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, fin: usize, fout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * fout];
    matmul(
        MatView::row_major(x, n, fin),
        MatView::row_major(w, fout, fin).t(),
        &mut y,
        false,
    );
    for row in y.chunks_mut(fout) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v = *v + bb;
        }
    }
    y
}

pub(crate) fn dense_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    n: usize,
    fin: usize,
    fout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * fin];
    matmul(
        MatView::row_major(gy, n, fout),
        MatView::row_major(w, fout, fin),
        &mut dx,
        false,
    );
    let mut dw = vec![T::zero(); fout * fin];
    matmul(
        MatView::row_major(gy, n, fout).t(),
        MatView::row_major(x, n, fin),
        &mut dw,
        false,
    );
    let mut db = vec![T::zero(); fout];
    for row in gy.chunks(fout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    (dx, dw, db)
}

pub(crate) fn upsample2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * h2 * w2..(pl + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(gy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &gy[pl * h2 * w2..(pl + 1) * h2 * w2];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                let d = &mut dst[(y / 2) * w + xx / 2];
                *d = *d + src[y * w2 + xx];
            }
        }
    }
    dx
}

/// Bilinear stencil for one sample location with edge clamping.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil<T> {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: T,
    pub fy: T,
    /// Whether the unclamped coordinate lies inside the grid; the sample is
    /// constant in that coordinate otherwise.
    pub live_x: bool,
    pub live_y: bool,
}

fn axis_stencil<T: Real>(coord: T, len: usize) -> (usize, usize, T, bool) {
    if len == 1 {
        return (0, 0, T::zero(), false);
    }
    let hi = T::from_f64_lossy((len - 1) as f64);
    let live = coord >= T::zero() && coord <= hi;
    let c = coord.max(T::zero()).min(hi);
    let i0 = c.floor().to_usize().unwrap_or(0).min(len - 2);
    let f = c - T::from_f64_lossy(i0 as f64);
    (i0, i0 + 1, f, live)
}

impl<T: Real> Stencil<T> {
    pub fn new(x: T, y: T, h: usize, w: usize) -> Self {
        let (x0, x1, fx, live_x) = axis_stencil(x, w);
        let (y0, y1, fy, live_y) = axis_stencil(y, h);
        Stencil {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            live_x,
            live_y,
        }
    }

    #[inline]
    pub fn sample(&self, plane: &[T], w: usize) -> T {
        let one = T::one();
        let s00 = plane[self.y0 * w + self.x0];
        let s01 = plane[self.y0 * w + self.x1];
        let s10 = plane[self.y1 * w + self.x0];
        let s11 = plane[self.y1 * w + self.x1];
        (one - self.fy) * ((one - self.fx) * s00 + self.fx * s01) + self.fy * ((one - self.fx) * s10 + self.fx * s11)
    }

    /// Partial derivatives of the sample w.r.t. the x and y coordinates.
    #[inline]
    pub fn coord_grad(&self, plane: &[T], w: usize) -> (T, T) {
        let one = T::one();
        let s00 = plane[self.y0 * w + self.x0];
        let s01 = plane[self.y0 * w + self.x1];
        let s10 = plane[self.y1 * w + self.x0];
        let s11 = plane[self.y1 * w + self.x1];
        let gx = if self.live_x {
            (one - self.fy) * (s01 - s00) + self.fy * (s11 - s10)
        } else {
            T::zero()
        };
        let gy = if self.live_y {
            (one - self.fx) * (s10 - s00) + self.fx * (s11 - s01)
        } else {
            T::zero()
        };
        (gx, gy)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [T], w: usize, g: T) {
        let one = T::one();
        let pairs = [
            (self.y0 * w + self.x0, (one - self.fy) * (one - self.fx)),
            (self.y0 * w + self.x1, (one - self.fy) * self.fx),
            (self.y1 * w + self.x0, self.fy * (one - self.fx)),
            (self.y1 * w + self.x1, self.fy * self.fx),
        ];
        for (i, wt) in pairs {
            plane[i] = plane[i] + g * wt;
        }
    }
}

/// Samples every channel of `src` (`[n, c, h, w]`) at `p + disp(p)`, where
/// `disp` is `[n, 2, h, w]` holding (dx, dy).
pub(crate) fn grid_sample_forward<T: Real>(src: &[T], disp: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        let dxs = &disp[(2 * b) * hw..(2 * b + 1) * hw];
        let dys = &disp[(2 * b + 1) * hw..(2 * b + 2) * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let st = Stencil::new(
                    T::from_f64_lossy(x as f64) + dxs[p],
                    T::from_f64_lossy(y as f64) + dys[p],
                    h,
                    w,
                );
                for ch in 0..c {
                    let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    out[(b * c + ch) * hw + p] = st.sample(plane, w);
                }
            }
        }
    }
    out
}

/// Returns `(d_src, d_disp)`.
pub(crate) fn grid_sample_backward<T: Real>(
    src: &[T],
    disp: &[T],
    gy: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut dsrc = vec![T::zero(); n * c * hw];
    let mut ddisp = vec![T::zero(); n * 2 * hw];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let st = Stencil::new(
                    T::from_f64_lossy(x as f64) + disp[(2 * b) * hw + p],
                    T::from_f64_lossy(y as f64) + disp[(2 * b + 1) * hw + p],
                    h,
                    w,
                );
                let (mut gdx, mut gdy) = (T::zero(), T::zero());
                for ch in 0..c {
                    let idx = (b * c + ch) * hw;
                    let g = gy[idx + p];
                    let plane = &src[idx..idx + hw];
                    let (sx, sy) = st.coord_grad(plane, w);
                    gdx = gdx + g * sx;
                    gdy = gdy + g * sy;
                    st.scatter(&mut dsrc[idx..idx + hw], w, g);
                }
                ddisp[(2 * b) * hw + p] = gdx;
                ddisp[(2 * b + 1) * hw + p] = gdy;
            }
        }
    }
    (dsrc, ddisp)
}

/// Sum over the window clipped to the grid, per plane.
fn box_sum_plane<T: Real>(src: &[T], h: usize, w: usize, r: usize, dst: &mut [T]) {
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let mut prefix = Vec::with_capacity(w + 1);
        prefix.push(T::zero());
        for &v in row {
            let last = *prefix.last().expect("non-empty");
            prefix.push(last + v);
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            tmp[y * w + x] = prefix[hi] - prefix[lo];
        }
    }
    for x in 0..w {
        let mut prefix = Vec::with_capacity(h + 1);
        prefix.push(T::zero());
        for y in 0..h {
            let last = *prefix.last().expect("non-empty");
            prefix.push(last + tmp[y * w + x]);
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            dst[y * w + x] = prefix[hi] - prefix[lo];
        }
    }
}

pub(crate) fn window_count(h: usize, w: usize, r: usize, y: usize, x: usize) -> usize {
    let cy = (y + r + 1).min(h) - y.saturating_sub(r);
    let cx = (x + r + 1).min(w) - x.saturating_sub(r);
    cy * cx
}

/// Mean over a `(2r+1)²` window clipped to the grid (divides by the in-bounds count).
pub(crate) fn box_mean_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); planes * hw];
    for pl in 0..planes {
        let dst = &mut out[pl * hw..(pl + 1) * hw];
        box_sum_plane(&x[pl * hw..(pl + 1) * hw], h, w, r, dst);
        for y in 0..h {
            for xx in 0..w {
                let cnt = T::from_f64_lossy(window_count(h, w, r, y, xx) as f64);
                dst[y * w + xx] = dst[y * w + xx] / cnt;
            }
        }
    }
    out
}

pub(crate) fn box_mean_backward<T: Real>(gy: &[T], planes: usize, h: usize, w: usize, r: usize) -> Vec<T> {
    let hw = h * w;
    let mut scaled = gy.to_vec();
    for pl in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                let cnt = T::from_f64_lossy(window_count(h, w, r, y, xx) as f64);
                let v = &mut scaled[pl * hw + y * w + xx];
                *v = *v / cnt;
            }
        }
    }
    let mut out = vec![T::zero(); planes * hw];
    for pl in 0..planes {
        box_sum_plane(
            &scaled[pl * hw..(pl + 1) * hw],
            h,
            w,
            r,
            &mut out[pl * hw..(pl + 1) * hw],
        );
    }
    out
}
