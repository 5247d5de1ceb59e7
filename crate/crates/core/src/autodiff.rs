//! Reverse-mode differentiation over a recorded forward tape.
//!
//! Every method on [`Graph`] evaluates its op eagerly, appends a node, and
//! returns a [`Var`] handle. [`Graph::backward`] then walks the tape in
//! reverse applying each op's explicit backward rule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses;
use crate::ops::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Linear(Var, Var, Var),
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, mul: T },
    Concat(Vec<Var>),
    Softmax(Var),
    PairwiseSqdist(Var, Var),
    Upsample { x: Var, factor: usize },
    MulRows(Var, Var),
    SumCols(Var),
    MeanRows(Var),
    ScalarAffine { x: Var, a: Var, b: Var },
    Slice { x: Var, start: usize },
    Reshape(Var),
    VStack(Vec<Var>),
    Bce { logits: Var, target: Tensor<T>, picked: Vec<usize> },
    Miou { p: Var, g: Tensor<T> },
    Fuse { w: Var, a: Var, b: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, with zeros standing in for "no influence".
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear(x, w, b), &[x, w, b]))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x), self.value(k), stride, pad)?;
        let out = ops::conv2d(self.value(x), self.value(k), self.value(b), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { x, k, b, geom }, &[x, k, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Elementwise clamp to `[lo, hi]`; no gradient flows through clamped
    /// entries.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// Elementwise `mul·x + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: T, add: T) -> Var {
        let out = self.value(x).map(|v| v * mul + add);
        self.push(out, Op::Affine { x, mul }, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Top-k truncated row softmax. Dropped entries are exact zeros, so the
    /// softmax backward rule applies unchanged.
    pub fn softmax_topk_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = ops::softmax_topk_rows(self.value(x), k)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn pairwise_sqdist(&mut self, q: Var, k: Var) -> Result<Var> {
        let out = ops::pairwise_sqdist(self.value(q), self.value(k))?;
        Ok(self.push(out, Op::PairwiseSqdist(q, k), &[q, k]))
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(x), factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::mul_rows(self.value(x), self.value(w))?;
        Ok(self.push(out, Op::MulRows(x, w), &[x, w]))
    }

    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let out = ops::sum_cols(self.value(x))?;
        Ok(self.push(out, Op::SumCols(x), &[x]))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::mean_rows(self.value(x))?;
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    /// `a·x + b` with learnable one-element `a` and `b`.
    pub fn scalar_affine(&mut self, x: Var, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != 1 || bv.len() != 1 {
            return Err(Error::dim("scalar_affine", format!("{:?} / {:?}", av.shape(), bv.shape())));
        }
        let (av, bv) = (av.data()[0], bv.data()[0]);
        let out = self.value(x).map(|v| av * v + bv);
        Ok(self.push(out, Op::ScalarAffine { x, a, b }, &[x, a, b]))
    }

    /// Contiguous run of the flattened buffer of `x`, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(x);
        if start + n > src.len() {
            return Err(Error::dim("slice", format!("{start}+{n} exceeds {}", src.len())));
        }
        let out = Tensor::new(shape, src.data()[start..start + n].to_vec())?;
        Ok(self.push(out, Op::Slice { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::vstack(&vals)?;
        Ok(self.push(out, Op::VStack(parts.to_vec()), parts))
    }

    /// Bootstrapped binary cross-entropy on logits against a constant target.
    pub fn bce_bootstrap(&mut self, logits: Var, target: &Tensor<T>, frac: f64) -> Result<Var> {
        let (loss, picked) = losses::bce_bootstrap_select(self.value(logits), target, frac)?;
        let op = Op::Bce {
            logits,
            target: target.clone(),
            picked,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mask IoU loss of probabilities against a constant target.
    pub fn miou_loss(&mut self, p: Var, g: &Tensor<T>) -> Result<Var> {
        let loss = losses::miou_loss(self.value(p), g)?;
        Ok(self.push(Tensor::scalar(loss), Op::Miou { p, g: g.clone() }, &[p]))
    }

    /// Per-pixel blend `w·a + (1 − w)·b` of two `HW × C` maps under an
    /// `HW × 1` weight. Each result is clamped to the interval spanned by its
    /// two inputs, so `w = 0`, `w = 1` and `a = b` reproduce an input exactly.
    /// The clamp is treated as the identity when differentiating.
    pub fn fuse(&mut self, w: Var, a: Var, b: Var) -> Result<Var> {
        let (wv, av, bv) = (self.value(w), self.value(a), self.value(b));
        let (r, c) = av.dims2("fuse")?;
        if bv.shape() != av.shape() || wv.shape() != [r, 1] {
            return Err(Error::dim(
                "fuse",
                format!("weight {:?}, inputs {:?} and {:?}", wv.shape(), av.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let wi = wv.data()[i];
            for j in 0..c {
                let (x, y) = (av.data()[i * c + j], bv.data()[i * c + j]);
                let v = wi * x + (T::one() - wi) * y;
                out.push(if v.is_nan() { v } else { v.max(x.min(y)).min(x.max(y)) });
            }
        }
        let out = Tensor::from_parts(vec![r, c], out);
        Ok(self.push(out, Op::Fuse { w, a, b }, &[w, a, b]))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        let shape = self.shape(out);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::dim("backward", format!("output must be a scalar, got {shape:?}")));
        }
        self.backward_from(out, Tensor::ones(shape))
    }

    /// Reverse pass seeded with an arbitrary output gradient.
    pub fn backward_from(&self, out: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::dim("backward", format!("seed {:?} vs {:?}", seed.shape(), self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, d: Tensor<T>| accumulate(&self.nodes, grads, v, d);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = av.dims2("matmul")?;
                let n = bv.shape()[1];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); m * k];
                    ops::matmul_bt_into(g.data(), bv.data(), &mut da, m, n, k);
                    acc(a, Tensor::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); k * n];
                    ops::matmul_at_into(av.data(), g.data(), &mut db, k, m, n);
                    acc(b, Tensor::from_parts(vec![k, n], db));
                }
            }
            &Op::Transpose(a) => acc(a, g.transpose()?),
            &Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (m, cin) = xv.dims2("linear")?;
                let cout = wv.shape()[1];
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); m * cin];
                    ops::matmul_bt_into(g.data(), wv.data(), &mut dx, m, cout, cin);
                    acc(x, Tensor::from_parts(vec![m, cin], dx));
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![T::zero(); cin * cout];
                    ops::matmul_at_into(xv.data(), g.data(), &mut dw, cin, m, cout);
                    acc(w, Tensor::from_parts(vec![cin, cout], dw));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); cout];
                    for i in 0..m {
                        for (d, &v) in db.iter_mut().zip(&g.data()[i * cout..(i + 1) * cout]) {
                            *d += v;
                        }
                    }
                    acc(b, Tensor::from_parts(self.shape(b).to_vec(), db));
                }
            }
            &Op::Conv2d { x, k, b, geom } => {
                let (dx, dk, db) = ops::conv2d_backward(self.value(x), self.value(k), g, geom, self.nodes[x.0].requires_grad);
                acc(x, dx);
                acc(k, dk);
                acc(b, db);
            }
            &Op::Relu(x) => {
                let d = zip(self.value(x), g, |xv, gv| if xv > T::zero() { gv } else { T::zero() });
                acc(x, d);
            }
            &Op::Clamp { x, lo, hi } => {
                let d = zip(self.value(x), g, |xv, gv| if xv > lo && xv < hi { gv } else { T::zero() });
                acc(x, d);
            }
            &Op::Sigmoid(x) => {
                let d = zip(&node.value, g, |y, gv| gv * y * (T::one() - y));
                acc(x, d);
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                acc(a, zip(g, self.value(b), |gv, bv| gv * bv));
                acc(b, zip(g, self.value(a), |gv, av| gv * av));
            }
            &Op::Affine { x, mul } => acc(x, g.map(|v| v * mul)),
            Op::Concat(parts) => {
                let outer = g.outer();
                let total = g.channels();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).channels();
                    let mut d = Vec::with_capacity(outer * c);
                    for i in 0..outer {
                        d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    acc(p, Tensor::from_parts(self.shape(p).to_vec(), d));
                    offset += c;
                }
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                let (m, n) = y.dims2("softmax")?;
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(x, Tensor::from_parts(vec![m, n], d));
            }
            &Op::PairwiseSqdist(q, k) => {
                let (qv, kv) = (self.value(q), self.value(k));
                let (m, c) = qv.dims2("pairwise_sqdist")?;
                let n = kv.shape()[0];
                let mut dq = vec![T::zero(); m * c];
                let mut dk = vec![T::zero(); n * c];
                let two = T::from_f64(2.0);
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data()[i * n + j];
                        if gv == T::zero() {
                            continue;
                        }
                        let s = two * gv;
                        for ch in 0..c {
                            let diff = qv.data()[i * c + ch] - kv.data()[j * c + ch];
                            dq[i * c + ch] += s * diff;
                            dk[j * c + ch] -= s * diff;
                        }
                    }
                }
                acc(q, Tensor::from_parts(vec![m, c], dq));
                acc(k, Tensor::from_parts(vec![n, c], dk));
            }
            &Op::Upsample { x, factor } => {
                acc(x, ops::bilinear_upsample_backward(g, self.shape(x), factor));
            }
            &Op::MulRows(x, w) => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (r, c) = xv.dims2("mul_rows")?;
                acc(x, ops::mul_rows(g, wv)?);
                let dw = (0..r)
                    .map(|i| {
                        let xr = &xv.data()[i * c..(i + 1) * c];
                        let gr = &g.data()[i * c..(i + 1) * c];
                        xr.iter().zip(gr).map(|(&a, &b)| a * b).sum()
                    })
                    .collect();
                acc(w, Tensor::from_parts(vec![r, 1], dw));
            }
            &Op::SumCols(x) => {
                let (r, c) = self.value(x).dims2("sum_cols")?;
                let d = Tensor::from_fn(&[r, c], |i| g.data()[i / c]);
                acc(x, d);
            }
            &Op::MeanRows(x) => {
                let (r, c) = self.value(x).dims2("mean_rows")?;
                let inv = T::one() / T::from_f64(r as f64);
                let d = Tensor::from_fn(&[r, c], |i| g.data()[i % c] * inv);
                acc(x, d);
            }
            &Op::ScalarAffine { x, a, b } => {
                let av = self.value(a).data()[0];
                acc(x, g.map(|v| v * av));
                let da: T = self.value(x).data().iter().zip(g.data()).map(|(&xv, &gv)| xv * gv).sum();
                acc(a, Tensor::from_parts(self.shape(a).to_vec(), vec![da]));
                acc(b, Tensor::from_parts(self.shape(b).to_vec(), vec![g.sum()]));
            }
            &Op::Slice { x, start } => {
                let mut d = vec![T::zero(); self.value(x).len()];
                d[start..start + g.len()].copy_from_slice(g.data());
                acc(x, Tensor::from_parts(self.shape(x).to_vec(), d));
            }
            &Op::Reshape(x) => acc(x, Tensor::from_parts(self.shape(x).to_vec(), g.data().to_vec())),
            Op::VStack(parts) => {
                let mut row = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    acc(p, g.row_slice(row, row + r)?);
                    row += r;
                }
            }
            Op::Bce { logits, target, picked } => {
                let d = losses::bce_bootstrap_grad(self.value(*logits), target, picked, g.data()[0]);
                acc(*logits, d);
            }
            Op::Miou { p, g: target } => {
                let d = losses::miou_loss_grad(self.value(*p), target, g.data()[0]);
                acc(*p, d);
            }
            &Op::Fuse { w, a, b } => {
                let (wv, av, bv) = (self.value(w), self.value(a), self.value(b));
                let (r, c) = av.dims2("fuse")?;
                let mut dw = vec![T::zero(); r];
                let mut da = vec![T::zero(); r * c];
                let mut db = vec![T::zero(); r * c];
                for i in 0..r {
                    let wi = wv.data()[i];
                    for j in 0..c {
                        let k = i * c + j;
                        let gv = g.data()[k];
                        dw[i] += gv * (av.data()[k] - bv.data()[k]);
                        da[k] = gv * wi;
                        db[k] = gv * (T::one() - wi);
                    }
                }
                acc(w, Tensor::from_parts(vec![r, 1], dw));
                acc(a, Tensor::from_parts(vec![r, c], da));
                acc(b, Tensor::from_parts(vec![r, c], db));
            }
        }
        Ok(())
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        slot @ None => *slot = Some(d),
        Some(existing) => {
            let merged = zip(existing, &d, |a, b| a + b);
            *existing = merged;
        }
    }
}
