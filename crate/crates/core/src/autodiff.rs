//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes hold their forward
//! value and the op that produced them; [`Graph::backward`] walks the tape
//! in reverse and adds parameter gradients into a [`ParamStore`].
//!
//! Gradients *accumulate*: calling `backward` twice without
//! [`ParamStore::zero_grad`] in between doubles every parameter gradient.
//! The trainer relies on this to sum per-image losses within a batch.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Like [`ParamStore::id`] but errors with the missing name.
    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Replaces a value (shape may change); the gradient is reset.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        p.grad = Tensor::zeros(value.shape());
        p.value = value;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100000001b3;
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Log { x: Var, floor: f64 },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv1x1 { x: Var, w: Var, b: Var },
    Conv3x3 { x: Var, w: Var, b: Var },
    Softmax { x: Var, axis: usize },
    GlobalAvgPool(Var),
    ChannelAvg(Var),
    Outer(Var, Var),
    Concat(Var, Var),
    AvgPool2(Var),
    Upsample(Var),
    FrobNormalize { x: Var, degenerate: bool },
    ChannelGroupSum { x: Var, groups: Vec<Vec<usize>> },
    NllAtLabels { x: Var, targets: Vec<Option<usize>>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Frobenius norms below this are treated as zero by [`Graph::frob_normalize`].
pub const FROB_EPS: f64 = 1e-12;

/// A single forward pass recorded for differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    flags: Vec<&'static str>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v` was
    /// on a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Degeneracy events recorded during the forward pass
    /// (e.g. `"frob_normalize: zero norm"`).
    pub fn flags(&self) -> &[&'static str] {
        &self.flags
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input: never receives gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable parameter bound from `store`; `backward` accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Binds `id` either as a trainable parameter or as a frozen constant.
    pub fn bind(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if trainable {
            self.param(store, id)
        } else {
            self.input(store.value(id).clone())
        }
    }

    /// Stop-gradient: same value, no gradient flows back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Square(a), rg)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(t, Op::Log { x: a, floor }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(t, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = tensor::transpose(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let t = tensor::conv1x1(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv1x1 { x, w, b }, rg))
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let t = tensor::conv3x3(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv3x3 { x, w, b }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = tensor::softmax(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = tensor::global_avg_pool(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    pub fn channel_avg(&mut self, x: Var) -> Result<Var> {
        let t = tensor::channel_avg(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ChannelAvg(x), rg))
    }

    /// `[C] (x) [H,W] -> [C,H,W]`.
    pub fn outer(&mut self, ch: Var, sp: Var) -> Result<Var> {
        let t = tensor::outer(self.value(ch), self.value(sp))?;
        let rg = self.rg(&[ch, sp]);
        Ok(self.push(t, Op::Outer(ch, sp), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = tensor::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Concat(a, b), rg))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = tensor::avg_pool2(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AvgPool2(x), rg))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = tensor::upsample_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Upsample(x), rg))
    }

    /// `x / ||x||_F`. When the norm is below [`FROB_EPS`] the result is all
    /// zeros, the gradient is zero, and a degeneracy flag is recorded.
    pub fn frob_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let norm = v.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let degenerate = norm < FROB_EPS;
        let t = if degenerate {
            Tensor::zeros(v.shape())
        } else {
            v.map(|a| a / norm)
        };
        if degenerate {
            self.flags.push("frob_normalize: zero norm");
        }
        let rg = self.rg(&[x]);
        self.push(t, Op::FrobNormalize { x, degenerate }, rg)
    }

    /// Sums groups of channels: output channel `j` is the sum of input
    /// channels `groups[j]`. Covers channel selection and class aggregation.
    pub fn channel_group_sum(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("channel_group_sum")?;
        let p = h * w;
        if let Some(&bad) = groups.iter().flatten().find(|&&k| k >= c) {
            return Err(Error::Dimension {
                op: "channel_group_sum",
                axis: "channel",
                expected: c,
                actual: bad,
            });
        }
        if groups.is_empty() {
            return Err(Error::Shape {
                op: "channel_group_sum",
                detail: "no output groups".into(),
            });
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; groups.len() * p];
        for (j, g) in groups.iter().enumerate() {
            let dst = &mut out[j * p..(j + 1) * p];
            for &k in g {
                for (o, &s) in dst.iter_mut().zip(&src[k * p..(k + 1) * p]) {
                    *o += s;
                }
            }
        }
        let t = Tensor::new(&[groups.len(), h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ChannelGroupSum { x, groups }, rg))
    }

    /// Mean of `-x[target(p), p]` over pixels with a target; `x` is
    /// `[K,H,W]` and `targets` is row-major over `H*W`.
    pub fn nll_at_labels(&mut self, x: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let (k, h, w) = self.value(x).chw("nll_at_labels")?;
        let p = h * w;
        if targets.len() != p {
            return Err(Error::Dimension {
                op: "nll_at_labels",
                axis: "pixels",
                expected: p,
                actual: targets.len(),
            });
        }
        let data = self.value(x).data();
        let mut total = 0.0;
        let mut count = 0usize;
        for (pix, t) in targets.iter().enumerate() {
            if let Some(cls) = *t {
                if cls >= k {
                    return Err(Error::Dimension {
                        op: "nll_at_labels",
                        axis: "class",
                        expected: k,
                        actual: cls,
                    });
                }
                total -= data[cls * p + pix];
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::NllAtLabels { x, targets, count },
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Parameter gradients are *added*
    /// into `store`.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.get_mut(*id).grad.add_assign(g),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(g, val(*b), |x, y| x * y));
                acc(*b, zip(g, val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, zip(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, zip(g, out, |x, y| x * y * (1.0 - y))),
            Op::Square(a) => acc(*a, zip(g, val(*a), |x, y| 2.0 * x * y)),
            Op::Log { x, floor } => {
                let f = *floor;
                acc(*x, zip(g, val(*x), |d, v| if v > f { d / v } else { 0.0 }));
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::Reshape(a) => acc(*a, with_shape(g.clone(), val(*a).shape())),
            Op::Transpose(a) => acc(*a, tensor::transpose(g).expect("rank 2")),
            Op::MatMul(a, b) => {
                let bt = tensor::transpose(val(*b)).expect("rank 2");
                let at = tensor::transpose(val(*a)).expect("rank 2");
                acc(*a, tensor::matmul(g, &bt).expect("shapes checked forward"));
                acc(*b, tensor::matmul(&at, g).expect("shapes checked forward"));
            }
            Op::Conv1x1 { x, w, b } => {
                let (dx, dw, db) = tensor::conv1x1_backward(val(*x), val(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, with_shape(db, val(*b).shape()));
            }
            Op::Conv3x3 { x, w, b } => {
                let (dx, dw, db) = tensor::conv3x3_backward(val(*x), val(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, with_shape(db, val(*b).shape()));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = tensor::axis_split(out.shape(), *axis);
                let y = out.data();
                let gd = g.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let dot: f64 = (0..len)
                            .map(|a| gd[base + a * inner] * y[base + a * inner])
                            .sum();
                        for a in 0..len {
                            let idx = base + a * inner;
                            dx[idx] = y[idx] * (gd[idx] - dot);
                        }
                    }
                }
                acc(*x, with_shape(Tensor::from_fn(&[dx.len()], |i| dx[i]), out.shape()));
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let p = s[1] * s[2];
                let gd = g.data();
                acc(*x, Tensor::from_fn(s, |i| gd[i / p] / p as f64));
            }
            Op::ChannelAvg(x) => {
                let s = val(*x).shape();
                let p = s[1] * s[2];
                let c = s[0] as f64;
                let gd = g.data();
                acc(*x, Tensor::from_fn(s, |i| gd[i % p] / c));
            }
            Op::Outer(ch, sp) => {
                let (chv, spv) = (val(*ch).data(), val(*sp).data());
                let p = spv.len();
                let gd = g.data();
                let dch = Tensor::from_fn(val(*ch).shape(), |c| {
                    gd[c * p..(c + 1) * p].iter().zip(spv).map(|(a, b)| a * b).sum()
                });
                let dsp = Tensor::from_fn(val(*sp).shape(), |q| {
                    chv.iter().enumerate().map(|(c, a)| a * gd[c * p + q]).sum()
                });
                acc(*ch, dch);
                acc(*sp, dsp);
            }
            Op::Concat(a, b) => {
                let na = val(*a).numel();
                let gd = g.data();
                acc(*a, Tensor::from_fn(val(*a).shape(), |i| gd[i]));
                acc(*b, Tensor::from_fn(val(*b).shape(), |i| gd[na + i]));
            }
            Op::AvgPool2(x) => {
                let s = val(*x).shape();
                let (h, w) = (s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let gd = g.data();
                acc(
                    *x,
                    Tensor::from_fn(s, |idx| {
                        let c = idx / (h * w);
                        let (i, j) = ((idx / w) % h, idx % w);
                        if i / 2 >= oh || j / 2 >= ow {
                            0.0
                        } else {
                            0.25 * gd[c * oh * ow + (i / 2) * ow + j / 2]
                        }
                    }),
                );
            }
            Op::Upsample(x) => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                let rows = tensor::bilinear_taps(h, oh);
                let cols = tensor::bilinear_taps(w, ow);
                let gd = g.data();
                let mut dx = vec![0.0; c * h * w];
                for k in 0..c {
                    let d = &mut dx[k * h * w..(k + 1) * h * w];
                    for (i, &(r0, r1, tr)) in rows.iter().enumerate() {
                        for (j, &(c0, c1, tc)) in cols.iter().enumerate() {
                            let gv = gd[k * oh * ow + i * ow + j];
                            d[r0 * w + c0] += gv * (1.0 - tr) * (1.0 - tc);
                            d[r0 * w + c1] += gv * (1.0 - tr) * tc;
                            d[r1 * w + c0] += gv * tr * (1.0 - tc);
                            d[r1 * w + c1] += gv * tr * tc;
                        }
                    }
                }
                acc(*x, Tensor::new(s, dx).expect("shape preserved"));
            }
            Op::FrobNormalize { x, degenerate } => {
                if *degenerate {
                    return;
                }
                let xv = val(*x).data();
                let norm = xv.iter().map(|a| a * a).sum::<f64>().sqrt();
                let y = out.data();
                let dot: f64 = g.data().iter().zip(y).map(|(a, b)| a * b).sum();
                let gd = g.data();
                acc(*x, Tensor::from_fn(out.shape(), |i| (gd[i] - y[i] * dot) / norm));
            }
            Op::ChannelGroupSum { x, groups } => {
                let s = val(*x).shape();
                let p = s[1] * s[2];
                let gd = g.data();
                let mut dx = vec![0.0; val(*x).numel()];
                for (j, grp) in groups.iter().enumerate() {
                    for &k in grp {
                        for (d, &gv) in dx[k * p..(k + 1) * p].iter_mut().zip(&gd[j * p..(j + 1) * p]) {
                            *d += gv;
                        }
                    }
                }
                acc(*x, Tensor::new(s, dx).expect("shape preserved"));
            }
            Op::NllAtLabels { x, targets, count } => {
                let s = val(*x).shape();
                let p = s[1] * s[2];
                let mut dx = vec![0.0; val(*x).numel()];
                if *count > 0 {
                    let scale = -g.item() / *count as f64;
                    for (pix, t) in targets.iter().enumerate() {
                        if let Some(c) = *t {
                            dx[c * p + pix] = scale;
                        }
                    }
                }
                acc(*x, Tensor::new(s, dx).expect("shape preserved"));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_map(b, "backward", f).expect("shapes checked forward")
}

fn with_shape(t: Tensor, shape: &[usize]) -> Tensor {
    Tensor::new(shape, t.into_data()).expect("element count preserved")
}

/// Central finite-difference gradient of `f` with respect to parameter `id`:
/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` for every coordinate.
///
/// `store` is restored to its original values before returning.
pub fn finite_diff_grad<F>(mut f: F, store: &mut ParamStore, id: ParamId, eps: f64) -> Result<Tensor>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let n = store.value(id).numel();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = store.value(id).data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + eps;
        let plus = f(store);
        store.get_mut(id).value.data_mut()[i] = orig - eps;
        let minus = f(store);
        store.get_mut(id).value.data_mut()[i] = orig;
        *slot = (plus? - minus?) / (2.0 * eps);
    }
    Tensor::new(store.value(id).shape(), out)
}

/// Default finite-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
