use std::collections::HashMap;

use crate::conv::{conv2d_backward, conv2d_forward, conv2d_output_side, Conv2dSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward pass is computed by the caller and whose
/// backward pass is supplied here.
pub trait CustomOp<T: Scalar> {
    /// Gradients for each input, given the upstream gradient of the output.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: Conv2dSpec,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvg(usize),
    GlobalMax {
        x: usize,
        argmax: Vec<usize>,
    },
    ChannelMean(usize),
    ChannelMax {
        x: usize,
        argmax: Vec<usize>,
    },
    Concat(Vec<usize>),
    Upsample(usize),
    Sum(usize),
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Build one per forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    training: bool,
    param_grads: HashMap<ParamId, Tensor<T>>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::ShapeMismatch { op, lhs: a, rhs: b }),
        };
    }
    Ok(out)
}

/// Element strides of `shape` viewed inside `out`, zero on broadcast axes.
fn broadcast_strides(shape: Shape, out: Shape) -> [usize; 4] {
    let dense = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let mut s = [0; 4];
    for d in 0..4 {
        s[d] = if shape[d] == 1 && out[d] != 1 {
            0
        } else {
            dense[d]
        };
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast output.
fn for_each_broadcast(
    out: Shape,
    sa: [usize; 4],
    sb: [usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) {
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let ba = n * sa[0] + c * sa[1] + h * sa[2];
                let bb = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out[3] {
                    f(o, ba + w * sa[3], bb + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Sums `grad` (of broadcast shape `out`) down to `shape`.
fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: Shape) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape();
    let s = broadcast_strides(shape, out);
    let mut r = Tensor::zeros(shape);
    let g = grad.data();
    let rd = r.data_mut();
    for_each_broadcast(out, s, s, |o, i, _| rd[i] = rd[i] + g[o]);
    r
}

impl<T: Scalar> Graph<T> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            param_grads: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn training() -> Self {
        Self::new(true)
    }

    pub fn inference() -> Self {
        Self::new(false)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is kept (for input-gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let trainable = store.is_trainable(id);
        self.push(p.clone(), Op::Param(id), trainable && self.training)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if xs[2] + 2 * spec.pad < ws[2] || xs[3] + 2 * spec.pad < ws[3] || spec.stride == 0 {
            return Err(Error::invalid(format!(
                "conv2d: kernel {ws:?} larger than padded input {xs:?}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).numel() != ws[0] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ws,
                    rhs: self.shape(b),
                });
            }
        }
        let y = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            y,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                spec,
            },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(if mul { "mul" } else { "add" }, sa, sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut y = Tensor::zeros(out);
        if sa == sb {
            for ((o, &x), &z) in y.data_mut().iter_mut().zip(va).zip(vb) {
                *o = if mul { x * z } else { x + z };
            }
        } else {
            let yd = y.data_mut();
            for_each_broadcast(
                out,
                broadcast_strides(sa, out),
                broadcast_strides(sb, out),
                |o, i, j| {
                    yd[o] = if mul { va[i] * vb[j] } else { va[i] + vb[j] };
                },
            );
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        let op = if mul {
            Op::Mul(a.0, b.0)
        } else {
            Op::Add(a.0, b.0)
        };
        Ok(self.push(y, op, rg))
    }

    /// Elementwise sum with broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with broadcasting over size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).scale(s);
        let rg = self.rg(a.0);
        self.push(y, Op::Scale(a.0, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v.max(T::zero()));
        let rg = self.rg(a.0);
        self.push(y, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(sigmoid);
        let rg = self.rg(a.0);
        self.push(y, Op::Sigmoid(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v.exp());
        let rg = self.rg(a.0);
        self.push(y, Op::Exp(a.0), rg)
    }

    /// Max pooling with `-inf` padding.
    pub fn max_pool2d(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(a);
        let spec = Conv2dSpec::new(stride, pad);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::invalid("max_pool2d: window larger than input"));
        }
        let (ho, wo) = (
            conv2d_output_side(h, kernel, spec),
            conv2d_output_side(w, kernel, spec),
        );
        let x = self.value(a);
        let mut y = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let mut o = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut arg = base;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            let v = x.data()[idx];
                            if v > best {
                                best = v;
                                arg = idx;
                            }
                        }
                    }
                    y.data_mut()[o] = best;
                    argmax[o] = arg;
                    o += 1;
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(y, Op::MaxPool { x: a.0, argmax }, rg))
    }

    /// Mean over `H × W`, giving `N × C × 1 × 1`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let x = self.value(a);
        let data = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let y = Tensor::new([n, c, 1, 1], data).unwrap();
        let rg = self.rg(a.0);
        self.push(y, Op::GlobalAvg(a.0), rg)
    }

    /// Max over `H × W`, giving `N × C × 1 × 1`.
    pub fn global_max_pool(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let hw = h * w;
        let x = self.value(a);
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (p, plane) in x.data().chunks(hw).enumerate() {
            let (mut bi, mut bv) = (0, plane[0]);
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = i;
                }
            }
            data.push(bv);
            argmax.push(p * hw + bi);
        }
        let y = Tensor::new([n, c, 1, 1], data).unwrap();
        let rg = self.rg(a.0);
        self.push(y, Op::GlobalMax { x: a.0, argmax }, rg)
    }

    /// Mean over channels, giving `N × 1 × H × W`.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let hw = h * w;
        let inv = T::one() / T::from_usize(c).unwrap();
        let x = self.value(a);
        let mut y = Tensor::zeros([n, 1, h, w]);
        for i in 0..n {
            let xs = x.sample(i);
            let ys = y.sample_mut(i);
            for ch in 0..c {
                for (o, &v) in ys.iter_mut().zip(&xs[ch * hw..(ch + 1) * hw]) {
                    *o = *o + v;
                }
            }
            ys.iter_mut().for_each(|v| *v = *v * inv);
        }
        let rg = self.rg(a.0);
        self.push(y, Op::ChannelMean(a.0), rg)
    }

    /// Max over channels, giving `N × 1 × H × W`.
    pub fn channel_max(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let hw = h * w;
        let x = self.value(a);
        let mut y = Tensor::zeros([n, 1, h, w]);
        let mut argmax = vec![0usize; n * hw];
        for i in 0..n {
            let xs = x.sample(i);
            let ys = y.sample_mut(i);
            ys.copy_from_slice(&xs[..hw]);
            let am = &mut argmax[i * hw..(i + 1) * hw];
            for (p, a) in am.iter_mut().enumerate() {
                *a = i * c * hw + p;
            }
            for ch in 1..c {
                for p in 0..hw {
                    let v = xs[ch * hw + p];
                    if v > ys[p] {
                        ys[p] = v;
                        am[p] = i * c * hw + ch * hw + p;
                    }
                }
            }
        }
        let rg = self.rg(a.0);
        self.push(y, Op::ChannelMax { x: a.0, argmax }, rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(
            *parts
                .first()
                .ok_or_else(|| Error::invalid("empty concat"))?,
        );
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            c_total += s[1];
        }
        let [n, _, h, w] = first;
        let mut y = Tensor::zeros([n, c_total, h, w]);
        for i in 0..n {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).sample(i);
                y.sample_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(y, Op::Concat(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Nearest-neighbour resize to `(height, width)`.
    pub fn upsample_nearest(&mut self, a: Var, height: usize, width: usize) -> Var {
        let [n, c, h, w] = self.shape(a);
        let x = self.value(a);
        let mut y = Tensor::zeros([n, c, height, width]);
        let yd = y.data_mut();
        let mut o = 0;
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..height {
                let iy = oy * h / height;
                for ox in 0..width {
                    yd[o] = src[iy * w + ox * w / width];
                    o += 1;
                }
            }
        }
        let rg = self.rg(a.0);
        self.push(y, Op::Upsample(a.0), rg)
    }

    /// Sum of all entries, as a `1 × 1 × 1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a.0);
        self.push(y, Op::Sum(a.0), rg)
    }

    /// Records a caller-computed output with a custom backward.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|v| self.rg(v.0));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                op,
            },
            rg,
        )
    }

    /// A scalar whose gradients with respect to `inputs` are already known.
    ///
    /// Losses computed outside the tape (with analytic derivatives) enter the
    /// graph this way.
    pub fn scalar_with_grads(&mut self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Var {
        debug_assert_eq!(inputs.len(), grads.len());
        self.custom(inputs, Tensor::scalar(value), Box::new(KnownGrads(grads)))
    }

    /// Running-statistic update produced during a training forward pass.
    pub fn push_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_grads.get(&id)
    }

    pub fn param_grads(&self) -> &HashMap<ParamId, Tensor<T>> {
        &self.param_grads
    }

    pub fn take_param_grads(&mut self) -> HashMap<ParamId, Tensor<T>> {
        std::mem::take(&mut self.param_grads)
    }

    /// Reverse pass from a scalar node. Returns gradients of leaf inputs
    /// created with [`Graph::input_with_grad`], keyed by their `Var`.
    pub fn backward(&mut self, root: Var) -> Result<HashMap<Var, Tensor<T>>> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        let mut leaf_grads = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.node_backward(i, &gy);
            for (target, g) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            match &self.nodes[i].op {
                Op::Param(id) => match self.param_grads.get_mut(id) {
                    Some(acc) => acc.add_assign(&gy),
                    None => {
                        self.param_grads.insert(*id, gy);
                    }
                },
                Op::Leaf => {
                    leaf_grads.insert(Var(i), gy);
                }
                _ => {}
            }
        }
        Ok(leaf_grads)
    }

    fn node_backward(&self, i: usize, gy: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv { x, w, b, spec } => {
                let want = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let (dx, dw, db) = conv2d_backward(val(*x), val(*w), gy, *spec, want);
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                if let (Some(db), Some(b)) = (db, b) {
                    out.push((*b, db.reshape(val(*b).shape()).unwrap()));
                }
                out
            }
            Op::Add(a, b) => vec![
                (*a, reduce_to(gy, val(*a).shape())),
                (*b, reduce_to(gy, val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let out = gy.shape();
                let (va, vb) = (val(*a), val(*b));
                let sa = broadcast_strides(va.shape(), out);
                let sb = broadcast_strides(vb.shape(), out);
                let mut res = Vec::new();
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(va.shape());
                    let gd = ga.data_mut();
                    for_each_broadcast(out, sa, sb, |o, ia, ib| {
                        gd[ia] = gd[ia] + gy.data()[o] * vb.data()[ib];
                    });
                    res.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(vb.shape());
                    let gd = gb.data_mut();
                    for_each_broadcast(out, sa, sb, |o, ia, ib| {
                        gd[ib] = gd[ib] + gy.data()[o] * va.data()[ia];
                    });
                    res.push((*b, gb));
                }
                res
            }
            Op::Scale(a, s) => vec![(*a, gy.scale(*s))],
            Op::Relu(a) => {
                let x = val(*a);
                let mut g = gy.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
                vec![(*a, g)]
            }
            Op::Sigmoid(a) => {
                let mut g = gy.clone();
                for (gv, &yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv = *gv * yv * (T::one() - yv);
                }
                vec![(*a, g)]
            }
            Op::Exp(a) => {
                let mut g = gy.clone();
                for (gv, &yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv = *gv * yv;
                }
                vec![(*a, g)]
            }
            Op::MaxPool { x, argmax }
            | Op::GlobalMax { x, argmax }
            | Op::ChannelMax { x, argmax } => {
                let mut g = Tensor::zeros(val(*x).shape());
                let gd = g.data_mut();
                for (&src, &gv) in argmax.iter().zip(gy.data()) {
                    gd[src] = gd[src] + gv;
                }
                vec![(*x, g)]
            }
            Op::GlobalAvg(a) => {
                let s = val(*a).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut g = Tensor::zeros(s);
                for (plane, &gv) in g.data_mut().chunks_mut(hw).zip(gy.data()) {
                    plane.fill(gv * inv);
                }
                vec![(*a, g)]
            }
            Op::ChannelMean(a) => {
                let s = val(*a).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let inv = T::one() / T::from_usize(c).unwrap();
                let mut g = Tensor::zeros(s);
                for n in 0..s[0] {
                    let src = gy.sample(n);
                    for plane in g.sample_mut(n).chunks_mut(hw) {
                        for (d, &v) in plane.iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                vec![(*a, g)]
            }
            Op::Concat(parts) => {
                let n = gy.shape()[0];
                let mut res: Vec<(usize, Tensor<T>)> = parts
                    .iter()
                    .map(|&p| (p, Tensor::zeros(val(p).shape())))
                    .collect();
                for i in 0..n {
                    let src = gy.sample(i);
                    let mut off = 0;
                    for (_, g) in res.iter_mut() {
                        let dst = g.sample_mut(i);
                        let len = dst.len();
                        dst.copy_from_slice(&src[off..off + len]);
                        off += len;
                    }
                }
                res
            }
            Op::Upsample(a) => {
                let [n, c, h, w] = val(*a).shape();
                let [_, _, ho, wo] = gy.shape();
                let mut g = Tensor::zeros([n, c, h, w]);
                let gd = g.data_mut();
                let mut o = 0;
                for plane in 0..n * c {
                    for oy in 0..ho {
                        let iy = oy * h / ho;
                        for ox in 0..wo {
                            let idx = plane * h * w + iy * w + ox * w / wo;
                            gd[idx] = gd[idx] + gy.data()[o];
                            o += 1;
                        }
                    }
                }
                vec![(*a, g)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gy.data()[0]))],
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&j| val(j)).collect();
                let gs = op.backward(&ins, &node.value, gy);
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(&j, g)| g.map(|g| (j, g)))
                    .collect()
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

struct KnownGrads<T>(Vec<Tensor<T>>);

impl<T: Scalar> CustomOp<T> for KnownGrads<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let s = gy.data()[0];
        self.0.iter().map(|g| Some(g.scale(s))).collect()
    }
}
