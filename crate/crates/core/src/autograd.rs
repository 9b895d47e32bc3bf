//! A small tape-based reverse-mode autodiff engine over [`Tensor`].
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation. Values are `f64` throughout so
//! analytic gradients can be checked against finite differences.

use std::collections::HashMap;
use std::sync::Arc;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Precomputed separable resampling taps (bilinear or nearest), applied per channel.
#[derive(Debug, Clone)]
pub struct Resample {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl Resample {
    /// Bilinear interpolation with half-pixel centres and edge clamping.
    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        fn axis(dst: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
            let scale = n_in as f64 / n_out as f64;
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        }
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let (y0, y1, wy) = axis(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1, wx) = axis(ox, in_w, out_w);
                taps.push([
                    (y0 * in_w + x0, (1.0 - wy) * (1.0 - wx)),
                    (y0 * in_w + x1, (1.0 - wy) * wx),
                    (y1 * in_w + x0, wy * (1.0 - wx)),
                    (y1 * in_w + x1, wy * wx),
                ]);
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    /// Apply to a `channels × in_h × in_w` buffer.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let plane_in = self.in_h * self.in_w;
        let channels = input.len() / plane_in;
        let mut out = Vec::with_capacity(channels * self.taps.len());
        for c in 0..channels {
            let plane = &input[c * plane_in..(c + 1) * plane_in];
            out.extend(
                self.taps
                    .iter()
                    .map(|t| t.iter().map(|&(i, w)| plane[i] * w).sum::<f64>()),
            );
        }
        out
    }

    fn apply_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let plane_in = self.in_h * self.in_w;
        let plane_out = self.taps.len();
        let channels = grad_out.len() / plane_out;
        for c in 0..channels {
            let go = &grad_out[c * plane_out..(c + 1) * plane_out];
            let gi = &mut grad_in[c * plane_in..(c + 1) * plane_in];
            for (t, &g) in self.taps.iter().zip(go) {
                for &(i, w) in t {
                    gi[i] += g * w;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Arc<Vec<usize>>),
    Concat(Vec<Var>),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: Conv2dSpec,
    },
    Resample(Var, Arc<Resample>),
    BceWithLogits(Var, Arc<Vec<f64>>),
    Dice(Var, Arc<Vec<f64>>, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Row normalisation floor.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input whose gradient can be read back after
    /// [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a trainable parameter. Repeated calls for the same id return the
    /// same node, so gradients from every use are accumulated together.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    /// `[n × k] · [k × m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        let (k2, m) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let s = ad[i * k + p];
                if s == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                    *o += s * bv;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new([n, m], out), Op::MatMul(a, b), rg)
    }

    /// `[n × k] · [m × k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        let (m, k2) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..m {
                out.push(dot(ar, &bd[j * k..(j + 1) * k]));
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new([n, m], out), Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "add: {:?} vs {:?}", ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(shape, data), Op::Add(a, b), rg)
    }

    /// Adds the vector `b` (length `cols(a)`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let m = ta.cols();
        assert_eq!(tb.len(), m, "add_row: row of {} vs bias {}", m, tb.len());
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(m)
            .flat_map(|r| r.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(shape, data), Op::AddRowBroadcast(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(shape, data), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect());
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x.max(0.0)).collect());
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| sigmoid(x)).collect());
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Softmax over the trailing axes of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for r in ta.data().chunks(m) {
            data.extend(softmax(r));
        }
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, data), Op::SoftmaxRows(a), rg)
    }

    /// `log Σ exp` over each row; output has shape `[rows]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.cols();
        let data: Vec<f64> = ta.data().chunks(m).map(logsumexp).collect();
        let n = data.len();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new([n], data), Op::LogSumExpRows(a), rg)
    }

    /// L2-normalise each row.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for r in ta.data().chunks(m) {
            let n = dot(r, r).sqrt().max(NORM_EPS);
            data.extend(r.iter().map(|x| x / n));
        }
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, data), Op::NormalizeRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `out.flat[i] = a.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: impl Into<Vec<usize>>) -> Var {
        let ta = self.value(a);
        let data = indices.iter().map(|&i| ta.data()[i]).collect();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, data), Op::Gather(a, Arc::new(indices)), rg)
    }

    /// Select whole rows (leading-axis slices).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let ta = self.value(a);
        let m = ta.cols();
        let mut shape = ta.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = rows.len();
        let idx = rows.iter().flat_map(|&r| r * m..(r + 1) * m).collect();
        self.gather(a, idx, shape)
    }

    /// Swap the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, m) = (ta.rows(), ta.cols());
        let idx = (0..m).flat_map(|j| (0..n).map(move |i| i * m + j)).collect();
        self.gather(a, idx, [m, n])
    }

    /// Concatenate along the leading axis. Trailing sizes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.value(parts[0]);
        let trailing: Vec<usize> = if first.shape().is_empty() {
            vec![]
        } else {
            first.shape()[1..].to_vec()
        };
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let tt = if t.shape().is_empty() { &[][..] } else { &t.shape()[1..] };
            assert_eq!(tt, &trailing[..], "concat trailing shape mismatch");
            lead += t.rows();
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(trailing);
        let rg = self.any_grad(parts);
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// 2-D convolution of a `C × H × W` input with `O × C × k × k` weights and
    /// an `O` bias, zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Var {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = ConvGeom::new(x.shape(), w.shape(), spec);
        assert_eq!(b.len(), geom.o, "conv bias length");
        let mut out = vec![0.0; geom.o * geom.oh * geom.ow];
        for o in 0..geom.o {
            out[o * geom.oh * geom.ow..(o + 1) * geom.oh * geom.ow].fill(b.data()[o]);
        }
        geom.for_each_tap(|o, c, ky, kx| {
            let wv = w.data()[((o * geom.c + c) * geom.k + ky) * geom.k + kx];
            if wv == 0.0 {
                return;
            }
            geom.rows(ky, kx, |oy, iy, ox0, ox1, ix0| {
                let xrow = &x.data()[(c * geom.h + iy) * geom.w..];
                let orow = &mut out[(o * geom.oh + oy) * geom.ow..];
                for (j, ox) in (ox0..ox1).enumerate() {
                    orow[ox] += wv * xrow[ix0 + j * geom.s];
                }
            });
        });
        let rg = self.any_grad(&[input, weight, bias]);
        self.push(
            Tensor::new([geom.o, geom.oh, geom.ow], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        )
    }

    /// Resample a `C × H × W` tensor with precomputed taps.
    pub fn resample(&mut self, a: Var, map: Arc<Resample>) -> Var {
        let ta = self.value(a);
        let plane = map.in_h * map.in_w;
        assert_eq!(ta.len() % plane, 0, "resample input size");
        let channels = ta.len() / plane;
        let data = map.apply(ta.data());
        let rg = self.any_grad(&[a]);
        let (oh, ow) = (map.out_h, map.out_w);
        self.push(
            Tensor::new([channels, oh, ow], data),
            Op::Resample(a, map),
            rg,
        )
    }

    /// Mean binary cross-entropy of `logits` against a {0,1} target,
    /// in the overflow-free `max(z,0) − z·y + log(1 + e^{−|z|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, target: Arc<Vec<f64>>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), target.len(), "bce target size");
        let total: f64 = z
            .data()
            .iter()
            .zip(target.iter())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / z.len() as f64;
        let rg = self.any_grad(&[logits]);
        self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, target), rg)
    }

    /// Soft Dice loss `1 − (2Σpy + ε)/(Σp + Σy + ε)` with `p = σ(logits)`.
    pub fn dice(&mut self, logits: Var, target: Arc<Vec<f64>>, eps: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), target.len(), "dice target size");
        let (inter, sum_p, sum_y) = dice_sums(z.data(), &target);
        let loss = 1.0 - (2.0 * inter + eps) / (sum_p + sum_y + eps);
        let rg = self.any_grad(&[logits]);
        self.push(Tensor::scalar(loss), Op::Dice(logits, target, eps), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let lt = self.value(loss);
        assert_eq!(lt.len(), 1, "backward from non-scalar {:?}", lt.shape());
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gout.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &|da| {
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            da[i * k + p] += dot(gr, &tb.data()[p * m..(p + 1) * m]);
                        }
                    }
                });
                acc(*b, &|db| {
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let s = ta.data()[i * k + p];
                            for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(gr) {
                                *d += s * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &|da| {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            for p in 0..k {
                                da[i * k + p] += gv * tb.data()[j * k + p];
                            }
                        }
                    }
                });
                acc(*b, &|db| {
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            for p in 0..k {
                                db[j * k + p] += gv * ta.data()[i * k + p];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_into(d, g));
            }
            Op::AddRowBroadcast(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| {
                    let m = d.len();
                    for r in g.chunks(m) {
                        add_into(d, r);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * y;
                    }
                });
                acc(*b, &|d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }),
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &|d| {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &|d| {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let m = y.cols();
                acc(*a, &|d| {
                    for ((dr, gr), yr) in d.chunks_mut(m).zip(g.chunks(m)).zip(y.data().chunks(m)) {
                        let s = dot(gr, yr);
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let x = &nodes[a.0].value;
                let m = x.cols();
                acc(*a, &|d| {
                    for ((dr, xr), &gv) in d.chunks_mut(m).zip(x.data().chunks(m)).zip(g) {
                        for (dv, p) in dr.iter_mut().zip(softmax(xr)) {
                            *dv += gv * p;
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let x = &nodes[a.0].value;
                let y = &node.value;
                let m = x.cols();
                acc(*a, &|d| {
                    for (((dr, gr), xr), yr) in d
                        .chunks_mut(m)
                        .zip(g.chunks(m))
                        .zip(x.data().chunks(m))
                        .zip(y.data().chunks(m))
                    {
                        let norm = dot(xr, xr).sqrt();
                        if norm <= NORM_EPS {
                            for (dv, &gv) in dr.iter_mut().zip(gr) {
                                *dv += gv / NORM_EPS;
                            }
                            continue;
                        }
                        let yg = dot(yr, gr);
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += (gv - yv * yg) / norm;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => acc(*a, &|d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|v| *v += s);
            }),
            Op::Gather(a, idx) => acc(*a, &|d| {
                for (&i, &gv) in idx.iter().zip(g) {
                    d[i] += gv;
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    let slice = &g[off..off + n];
                    acc(*p, &|d| add_into(d, slice));
                    off += n;
                }
            }
            Op::Reshape(a) => acc(*a, &|d| add_into(d, g)),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (x, w) = (&nodes[input.0].value, &nodes[weight.0].value);
                let geom = ConvGeom::new(x.shape(), w.shape(), *spec);
                let plane = geom.oh * geom.ow;
                acc(*bias, &|db| {
                    for (o, dv) in db.iter_mut().enumerate() {
                        *dv += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                });
                acc(*weight, &|dw| {
                    geom.for_each_tap(|o, c, ky, kx| {
                        let mut s = 0.0;
                        geom.rows(ky, kx, |oy, iy, ox0, ox1, ix0| {
                            let xrow = &x.data()[(c * geom.h + iy) * geom.w..];
                            let grow = &g[(o * geom.oh + oy) * geom.ow..];
                            for (j, ox) in (ox0..ox1).enumerate() {
                                s += grow[ox] * xrow[ix0 + j * geom.s];
                            }
                        });
                        dw[((o * geom.c + c) * geom.k + ky) * geom.k + kx] += s;
                    });
                });
                acc(*input, &|dx| {
                    geom.for_each_tap(|o, c, ky, kx| {
                        let wv = w.data()[((o * geom.c + c) * geom.k + ky) * geom.k + kx];
                        if wv == 0.0 {
                            return;
                        }
                        geom.rows(ky, kx, |oy, iy, ox0, ox1, ix0| {
                            let grow = &g[(o * geom.oh + oy) * geom.ow..];
                            let base = (c * geom.h + iy) * geom.w;
                            for (j, ox) in (ox0..ox1).enumerate() {
                                dx[base + ix0 + j * geom.s] += wv * grow[ox];
                            }
                        });
                    });
                });
            }
            Op::Resample(a, map) => acc(*a, &|d| map.apply_transpose(g, d)),
            Op::BceWithLogits(a, target) => {
                let z = nodes[a.0].value.data();
                let n = z.len() as f64;
                acc(*a, &|d| {
                    for ((dv, &zv), &y) in d.iter_mut().zip(z).zip(target.iter()) {
                        *dv += g[0] * (sigmoid(zv) - y) / n;
                    }
                });
            }
            Op::Dice(a, target, eps) => {
                let z = nodes[a.0].value.data();
                let (inter, sum_p, sum_y) = dice_sums(z, target);
                let den = sum_p + sum_y + eps;
                let num = 2.0 * inter + eps;
                acc(*a, &|d| {
                    for ((dv, &zv), &y) in d.iter_mut().zip(z).zip(target.iter()) {
                        let p = sigmoid(zv);
                        let dl_dp = -(2.0 * y * den - num) / (den * den);
                        *dv += g[0] * dl_dp * p * (1.0 - p);
                    }
                });
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like its value when nothing flowed.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Self {
        assert_eq!(x.len(), 3, "conv input must be C×H×W, got {x:?}");
        assert_eq!(w.len(), 4, "conv weight must be O×C×k×k, got {w:?}");
        assert_eq!(x[0], w[1], "conv channel mismatch {x:?} vs {w:?}");
        assert_eq!(w[2], w[3], "square kernels only");
        let (c, h, wd) = (x[0], x[1], x[2]);
        let (o, k) = (w[0], w[2]);
        let (s, p) = (spec.stride, spec.padding);
        assert!(h + 2 * p >= k && wd + 2 * p >= k, "kernel larger than padded input");
        Self {
            c,
            h,
            w: wd,
            o,
            k,
            s,
            p,
            oh: (h + 2 * p - k) / s + 1,
            ow: (wd + 2 * p - k) / s + 1,
        }
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for o in 0..self.o {
            for c in 0..self.c {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        f(o, c, ky, kx);
                    }
                }
            }
        }
    }

    /// For a fixed tap, visit each output row with the valid output column
    /// range `[ox0, ox1)` and the input column of `ox0`.
    fn rows(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        // valid ox: 0 <= ox*s + kx - p < w
        let ox0 = if kx >= self.p { 0 } else { (self.p - kx).div_ceil(self.s) };
        let limit = self.w + self.p;
        if kx >= limit {
            return;
        }
        let ox1 = ((limit - kx - 1) / self.s + 1).min(self.ow);
        if ox0 >= ox1 {
            return;
        }
        let ix0 = ox0 * self.s + kx - self.p;
        for oy in 0..self.oh {
            let iy = oy * self.s + ky;
            if iy < self.p || iy - self.p >= self.h {
                continue;
            }
            f(oy, iy - self.p, ox0, ox1, ix0);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
    row.iter().map(move |x| (x - max).exp() / denom)
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn dice_sums(z: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sy = 0.0;
    for (&zv, &yv) in z.iter().zip(y) {
        let p = sigmoid(zv);
        inter += p * yv;
        sp += p;
        sy += yv;
    }
    (inter, sp, sy)
}

/// Central finite-difference checks of analytic gradients.
pub mod gradcheck {
    use super::{Graph, Var};
    use crate::tensor::Tensor;

    /// Largest `|analytic − numeric| / (max(|analytic|, |numeric|) + 1e-6)`
    /// over every entry of every input, with step `h`. `build` must return a
    /// scalar.
    pub fn max_relative_error<F>(inputs: &[Tensor], h: f64, build: F) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let run = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = run(inputs);
        let grads = g.backward(out);
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(&g, *v);
            for i in 0..inputs[k].len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let (gp, _, op) = run(&plus);
                let (gm, _, om) = run(&minus);
                let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
                worst = worst.max(err);
            }
        }
        worst
    }
}
