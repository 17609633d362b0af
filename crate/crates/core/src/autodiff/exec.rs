use std::collections::{BTreeMap, HashMap};

use super::graph::{Axis, Graph, NodeId, Op};
use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Every node's value from one forward pass, retained for `backward`.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    values: Vec<Tensor<T>>,
}

impl<T: Real> Activations<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.values[id].item()
    }

    pub fn output<'a>(&'a self, graph: &Graph, name: &str) -> Option<&'a Tensor<T>> {
        graph.output_id(name).map(|id| &self.values[id])
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a node; zero when the loss does not depend on it.
    pub fn node(&self, id: NodeId) -> Tensor<T> {
        self.by_node[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).map(|&id| self.node(id))
    }

    pub fn input(&self, name: &str) -> Option<Tensor<T>> {
        self.inputs.get(name).map(|&id| self.node(id))
    }

    /// Gradients for every parameter in the graph, by name.
    pub fn params(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (name, &id) in &self.params {
            store.insert_unchecked(name.clone(), self.node(id));
        }
        store
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

fn check_shape<T: Real>(id: NodeId, declared: &[usize], t: &Tensor<T>, what: &str) -> Result<()> {
    if t.shape() != declared {
        return Err(Error::Shape {
            node: id,
            expected: declared.to_vec(),
            actual: t.shape().to_vec(),
            context: what.to_string(),
        });
    }
    Ok(())
}

fn map<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

fn with_shape<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data).expect("kernel output matches node shape")
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize) -> ConvGeom {
    ConvGeom {
        n: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        k: ws[2],
        stride,
        pad: ws[2] / 2,
    }
}

/// Evaluates every node of `graph`.
pub fn forward<T: Real>(
    graph: &Graph,
    inputs: &HashMap<String, Tensor<T>>,
    params: &ParamStore<T>,
) -> Result<Activations<T>> {
    let mut values: Vec<Tensor<T>> = Vec::with_capacity(graph.len());
    for (id, node) in graph.nodes().iter().enumerate() {
        let arg = |i: usize| -> &Tensor<T> { &values[node.inputs[i]] };
        let out = match &node.op {
            Op::Input(name) => {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::Missing(format!("input `{name}` (node {id})")))?;
                check_shape(id, &node.shape, t, &format!("input `{name}`"))?;
                t.clone()
            }
            Op::Param(name) => {
                let t = params
                    .get(name)
                    .ok_or_else(|| Error::Missing(format!("parameter `{name}` (node {id})")))?;
                check_shape(id, &node.shape, t, &format!("parameter `{name}`"))?;
                t.clone()
            }
            Op::Const(idx) => graph.constant_value(*idx).cast(),
            Op::Dense => {
                let (x, w, b) = (arg(0), arg(1), arg(2));
                let (n, fin) = (x.shape()[0], x.shape()[1]);
                let fout = w.shape()[0];
                with_shape(
                    &node.shape,
                    kernels::dense_forward(x.data(), w.data(), b.data(), n, fin, fout),
                )
            }
            Op::Conv2d { stride } => {
                let (x, w, b) = (arg(0), arg(1), arg(2));
                let g = conv_geom(x.shape(), w.shape(), *stride);
                with_shape(&node.shape, kernels::conv2d_forward(x.data(), w.data(), b.data(), &g))
            }
            Op::Upsample2 => {
                let x = arg(0);
                let (n, c, h, w) = x.dims4();
                with_shape(&node.shape, kernels::upsample2_forward(x.data(), n * c, h, w))
            }
            Op::Reshape => with_shape(&node.shape, arg(0).data().to_vec()),
            Op::Relu => map(arg(0), |v| if v > T::zero() { v } else { T::zero() }),
            Op::LeakyRelu(slope) => {
                let s = T::from_f64_lossy(*slope);
                map(arg(0), |v| if v > T::zero() { v } else { v * s })
            }
            Op::Sigmoid => map(arg(0), |v| T::one() / (T::one() + (-v).exp())),
            Op::Add => zip(arg(0), arg(1), |a, b| a + b),
            Op::Sub => zip(arg(0), arg(1), |a, b| a - b),
            Op::Mul => zip(arg(0), arg(1), |a, b| a * b),
            Op::Div => zip(arg(0), arg(1), |a, b| a / b),
            Op::Scale(f) => {
                let f = T::from_f64_lossy(*f);
                map(arg(0), |v| v * f)
            }
            Op::AddScalar(c) => {
                let c = T::from_f64_lossy(*c);
                map(arg(0), |v| v + c)
            }
            Op::Square => map(arg(0), |v| v * v),
            Op::Sum => Tensor::scalar(arg(0).sum()),
            Op::Mean => {
                let x = arg(0);
                Tensor::scalar(x.sum() / T::from_f64_lossy(x.numel() as f64))
            }
            Op::BatchMean => {
                let x = arg(0);
                let n = x.shape()[0];
                let per = x.numel() / n;
                let mut out = vec![T::zero(); per];
                for row in x.data().chunks(per) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                let inv = T::one() / T::from_f64_lossy(n as f64);
                out.iter_mut().for_each(|v| *v = *v * inv);
                with_shape(&node.shape, out)
            }
            Op::TileBatch(n) => {
                let x = arg(0);
                let mut out = Vec::with_capacity(x.numel() * n);
                for _ in 0..*n {
                    out.extend_from_slice(x.data());
                }
                with_shape(&node.shape, out)
            }
            Op::Concat => {
                let n = node.shape[0];
                let mut out = Vec::with_capacity(node.shape.iter().product());
                for b in 0..n {
                    for &p in &node.inputs {
                        let t = &values[p];
                        let per = t.numel() / n;
                        out.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
                    }
                }
                with_shape(&node.shape, out)
            }
            Op::GridSample => {
                let (src, disp) = (arg(0), arg(1));
                let (n, c, h, w) = src.dims4();
                with_shape(
                    &node.shape,
                    kernels::grid_sample_forward(src.data(), disp.data(), n, c, h, w),
                )
            }
            Op::ForwardDiff(axis) => {
                let x = arg(0);
                with_shape(&node.shape, forward_diff(x, *axis))
            }
            Op::BoxMean { radius } => {
                let x = arg(0);
                let (n, c, h, w) = x.dims4();
                with_shape(&node.shape, kernels::box_mean_forward(x.data(), n * c, h, w, *radius))
            }
        };
        values.push(out);
    }
    Ok(Activations { values })
}

fn forward_diff<T: Real>(x: &Tensor<T>, axis: Axis) -> Vec<T> {
    let (n, c, h, w) = x.dims4();
    let d = x.data();
    let mut out = Vec::new();
    for pl in 0..n * c {
        let plane = &d[pl * h * w..(pl + 1) * h * w];
        match axis {
            Axis::X => {
                for y in 0..h {
                    for xx in 0..w - 1 {
                        out.push(plane[y * w + xx + 1] - plane[y * w + xx]);
                    }
                }
            }
            Axis::Y => {
                for y in 0..h - 1 {
                    for xx in 0..w {
                        out.push(plane[(y + 1) * w + xx] - plane[y * w + xx]);
                    }
                }
            }
        }
    }
    out
}

fn forward_diff_backward<T: Real>(gy: &[T], shape_in: &[usize], axis: Axis) -> Vec<T> {
    let (n, c, h, w) = (shape_in[0], shape_in[1], shape_in[2], shape_in[3]);
    let mut dx = vec![T::zero(); n * c * h * w];
    let mut k = 0;
    for pl in 0..n * c {
        let plane = &mut dx[pl * h * w..(pl + 1) * h * w];
        match axis {
            Axis::X => {
                for y in 0..h {
                    for xx in 0..w - 1 {
                        let g = gy[k];
                        k += 1;
                        plane[y * w + xx + 1] = plane[y * w + xx + 1] + g;
                        plane[y * w + xx] = plane[y * w + xx] - g;
                    }
                }
            }
            Axis::Y => {
                for y in 0..h - 1 {
                    for xx in 0..w {
                        let g = gy[k];
                        k += 1;
                        plane[(y + 1) * w + xx] = plane[(y + 1) * w + xx] + g;
                        plane[y * w + xx] = plane[y * w + xx] - g;
                    }
                }
            }
        }
    }
    dx
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Reverse pass from a scalar `loss` node.
pub fn backward<T: Real>(graph: &Graph, acts: &Activations<T>, loss: NodeId) -> Result<Gradients<T>> {
    let loss_shape = graph.shape(loss);
    if loss_shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalarLoss {
            node: loss,
            shape: loss_shape.to_vec(),
        });
    }
    let nodes = graph.nodes();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
    grads[loss] = Some(Tensor::full(loss_shape, T::one()));

    for id in (0..=loss).rev() {
        let node = &nodes[id];
        if node.inputs.is_empty() {
            continue;
        }
        let Some(gy) = grads[id].clone() else { continue };
        let val = |i: usize| acts.value(node.inputs[i]);
        let push = |grads: &mut Vec<Option<Tensor<T>>>, slot: usize, g: Tensor<T>| {
            accumulate(&mut grads[node.inputs[slot]], g);
        };
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::Dense => {
                let (x, w) = (val(0), val(1));
                let (n, fin) = (x.shape()[0], x.shape()[1]);
                let fout = w.shape()[0];
                let (dx, dw, db) = kernels::dense_backward(x.data(), w.data(), gy.data(), n, fin, fout);
                push(&mut grads, 0, with_shape(x.shape(), dx));
                push(&mut grads, 1, with_shape(w.shape(), dw));
                push(&mut grads, 2, with_shape(&[fout], db));
            }
            Op::Conv2d { stride } => {
                let (x, w) = (val(0), val(1));
                let g = conv_geom(x.shape(), w.shape(), *stride);
                let (dx, dw, db) = kernels::conv2d_backward(x.data(), w.data(), gy.data(), &g);
                push(&mut grads, 0, with_shape(x.shape(), dx));
                push(&mut grads, 1, with_shape(w.shape(), dw));
                push(&mut grads, 2, with_shape(&[g.cout], db));
            }
            Op::Upsample2 => {
                let x = val(0);
                let (n, c, h, w) = x.dims4();
                push(
                    &mut grads,
                    0,
                    with_shape(x.shape(), kernels::upsample2_backward(gy.data(), n * c, h, w)),
                );
            }
            Op::Reshape => {
                let x = val(0);
                push(&mut grads, 0, with_shape(x.shape(), gy.into_data()));
            }
            Op::Relu => {
                let g = zip(&gy, val(0), |g, x| if x > T::zero() { g } else { T::zero() });
                push(&mut grads, 0, g);
            }
            Op::LeakyRelu(slope) => {
                let s = T::from_f64_lossy(*slope);
                let g = zip(&gy, val(0), |g, x| if x > T::zero() { g } else { g * s });
                push(&mut grads, 0, g);
            }
            Op::Sigmoid => {
                let y = acts.value(id);
                push(&mut grads, 0, zip(&gy, y, |g, y| g * y * (T::one() - y)));
            }
            Op::Add => {
                push(&mut grads, 0, gy.clone());
                push(&mut grads, 1, gy);
            }
            Op::Sub => {
                push(&mut grads, 0, gy.clone());
                push(&mut grads, 1, map(&gy, |g| -g));
            }
            Op::Mul => {
                push(&mut grads, 0, zip(&gy, val(1), |g, b| g * b));
                push(&mut grads, 1, zip(&gy, val(0), |g, a| g * a));
            }
            Op::Div => {
                let (a, b) = (val(0), val(1));
                push(&mut grads, 0, zip(&gy, b, |g, b| g / b));
                let ab = zip(a, b, |a, b| a / (b * b));
                push(&mut grads, 1, zip(&gy, &ab, |g, q| -g * q));
            }
            Op::Scale(f) => {
                let f = T::from_f64_lossy(*f);
                push(&mut grads, 0, map(&gy, |g| g * f));
            }
            Op::AddScalar(_) => push(&mut grads, 0, gy),
            Op::Square => {
                let two = T::from_f64_lossy(2.0);
                push(&mut grads, 0, zip(&gy, val(0), |g, x| two * g * x));
            }
            Op::Sum => {
                let g = gy.item();
                push(&mut grads, 0, Tensor::full(val(0).shape(), g));
            }
            Op::Mean => {
                let x = val(0);
                let g = gy.item() / T::from_f64_lossy(x.numel() as f64);
                push(&mut grads, 0, Tensor::full(x.shape(), g));
            }
            Op::BatchMean => {
                let x = val(0);
                let n = x.shape()[0];
                let inv = T::one() / T::from_f64_lossy(n as f64);
                let row: Vec<T> = gy.data().iter().map(|&g| g * inv).collect();
                let mut out = Vec::with_capacity(x.numel());
                for _ in 0..n {
                    out.extend_from_slice(&row);
                }
                push(&mut grads, 0, with_shape(x.shape(), out));
            }
            Op::TileBatch(n) => {
                let x = val(0);
                let per = x.numel();
                let mut out = vec![T::zero(); per];
                for b in 0..*n {
                    for (o, &g) in out.iter_mut().zip(&gy.data()[b * per..(b + 1) * per]) {
                        *o = *o + g;
                    }
                }
                push(&mut grads, 0, with_shape(x.shape(), out));
            }
            Op::Concat => {
                let n = node.shape[0];
                let total_per = gy.numel() / n;
                let mut offset = 0;
                for (slot, &p) in node.inputs.iter().enumerate() {
                    let t = acts.value(p);
                    let per = t.numel() / n;
                    let mut out = Vec::with_capacity(t.numel());
                    for b in 0..n {
                        let start = b * total_per + offset;
                        out.extend_from_slice(&gy.data()[start..start + per]);
                    }
                    offset += per;
                    push(&mut grads, slot, with_shape(t.shape(), out));
                }
            }
            Op::GridSample => {
                let (src, disp) = (val(0), val(1));
                let (n, c, h, w) = src.dims4();
                let (ds, dd) = kernels::grid_sample_backward(src.data(), disp.data(), gy.data(), n, c, h, w);
                push(&mut grads, 0, with_shape(src.shape(), ds));
                push(&mut grads, 1, with_shape(disp.shape(), dd));
            }
            Op::ForwardDiff(axis) => {
                let x = val(0);
                push(
                    &mut grads,
                    0,
                    with_shape(x.shape(), forward_diff_backward(gy.data(), x.shape(), *axis)),
                );
            }
            Op::BoxMean { radius } => {
                let x = val(0);
                let (n, c, h, w) = x.dims4();
                push(
                    &mut grads,
                    0,
                    with_shape(x.shape(), kernels::box_mean_backward(gy.data(), n * c, h, w, *radius)),
                );
            }
        }
    }

    let mut params = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    for (id, node) in nodes.iter().enumerate() {
        match &node.op {
            Op::Param(name) => {
                params.insert(name.clone(), id);
            }
            Op::Input(name) => {
                inputs.insert(name.clone(), id);
            }
            _ => {}
        }
    }
    Ok(Gradients {
        by_node: grads,
        params,
        inputs,
        shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
    })
}
