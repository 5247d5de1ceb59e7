//! Pixel-level memory retrieval.
//!
//! The affinity between query pixel `p` and memory pixel `q` is a row
//! softmax of the negative squared distance between their keys; the
//! retrieved value is the affinity-weighted sum of memory values.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Bound, ResBlock};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stored reference keys (`N·HW × C_k`) and values (`N·HW × C_v`).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMemory<T> {
    keys: Option<Tensor<T>>,
    values: Option<Tensor<T>>,
    frames: usize,
}

impl<T: Scalar> PixelMemory<T> {
    pub fn empty() -> Self {
        PixelMemory {
            keys: None,
            values: None,
            frames: 0,
        }
    }

    pub fn new(keys: Tensor<T>, values: Tensor<T>, frames: usize) -> Result<Self> {
        let (kr, _) = keys.dims2("pixel_memory")?;
        let (vr, _) = values.dims2("pixel_memory")?;
        if kr != vr {
            return Err(Error::dim("pixel_memory", alloc::format!("{kr} key rows vs {vr} value rows")));
        }
        if frames == 0 || kr % frames != 0 {
            return Err(Error::dim("pixel_memory", alloc::format!("{kr} rows for {frames} frames")));
        }
        Ok(PixelMemory {
            keys: Some(keys),
            values: Some(values),
            frames,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn keys(&self) -> Result<&Tensor<T>> {
        self.keys.as_ref().ok_or(Error::EmptyMemory)
    }

    pub fn values(&self) -> Result<&Tensor<T>> {
        self.values.as_ref().ok_or(Error::EmptyMemory)
    }

    pub fn rows(&self) -> usize {
        self.keys.as_ref().map_or(0, |k| k.shape()[0])
    }
}

/// `A(p, q) = softmax_q(−‖K_Q(p) − K_M(q)‖²)`.
pub fn affinity<T: Scalar>(k_q: &Tensor<T>, k_m: &Tensor<T>) -> Result<Tensor<T>> {
    let d = ops::pairwise_sqdist(k_q, k_m)?;
    ops::softmax_rows(&ops::scale(&d, -T::one()))
}

/// `R_V(p) = Σ_q A(p, q)·V_M(q)`.
pub fn read_value<T: Scalar>(a: &Tensor<T>, v_m: &Tensor<T>) -> Result<Tensor<T>> {
    ops::matmul(a, v_m)
}

/// Top-k retrieval: per query pixel keep the `k` most similar memory
/// pixels (ties toward the lower memory index), renormalize over them, and
/// aggregate both values and keys with that truncated affinity. With
/// `k ≥ N·HW` this is exactly the dense path.
pub fn read_topk<T: Scalar>(k_q: &Tensor<T>, mem: &PixelMemory<T>, k: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (keys, values) = (mem.keys()?, mem.values()?);
    if k == 0 {
        return Err(Error::dim("read_topk", "k must be at least 1"));
    }
    let n = keys.shape()[0];
    if k >= n {
        let a = affinity(k_q, keys)?;
        return Ok((read_value(&a, values)?, read_value(&a, keys)?));
    }
    let d = ops::pairwise_sqdist(k_q, keys)?;
    let (m, _) = d.dims2("read_topk")?;
    let (cv, ck) = (values.shape()[1], keys.shape()[1]);
    let mut r_v = vec![T::zero(); m * cv];
    let mut r_k = vec![T::zero(); m * ck];
    let mut sims: Vec<T> = Vec::with_capacity(n);
    let mut w: Vec<T> = Vec::with_capacity(k);
    for i in 0..m {
        sims.clear();
        sims.extend(d.data()[i * n..(i + 1) * n].iter().map(|&v| -v));
        let kept = ops::topk_indices(&sims, k);
        let max = kept.iter().map(|&j| sims[j]).fold(T::neg_infinity(), T::max);
        w.clear();
        w.extend(kept.iter().map(|&j| (sims[j] - max).exp()));
        let sum: T = w.iter().fold(T::zero(), |a, &b| a + b);
        for v in w.iter_mut() {
            *v = *v / sum;
        }
        for (&j, &a) in kept.iter().zip(&w) {
            if a == T::zero() {
                continue;
            }
            for (o, &v) in r_v[i * cv..(i + 1) * cv].iter_mut().zip(&values.data()[j * cv..(j + 1) * cv]) {
                *o += a * v;
            }
            for (o, &v) in r_k[i * ck..(i + 1) * ck].iter_mut().zip(&keys.data()[j * ck..(j + 1) * ck]) {
                *o += a * v;
            }
        }
    }
    Ok((Tensor::new(&[m, cv], r_v)?, Tensor::new(&[m, ck], r_k)?))
}

/// Affinity recorded on a graph; `topk = None` is the dense (training) path.
pub fn affinity_var<T: Scalar>(g: &mut Graph<T>, k_q: Var, k_m: Var, topk: Option<usize>) -> Result<Var> {
    let d = g.pairwise_sqdist(k_q, k_m)?;
    let logits = g.scale(d, -T::one());
    match topk {
        None => g.softmax_rows(logits),
        Some(k) => g.softmax_topk_rows(logits, k),
    }
}

/// `F_Pix`: residual block over `[R_V, F^t]`.
pub fn pixel_embed<T: Scalar>(g: &mut Graph<T>, p: &Bound, block: &ResBlock, r_v: Var, f_t: Var) -> Result<Var> {
    let (hw, _) = g.value(r_v).dims2("pixel_embed")?;
    let (hw2, _) = g.value(f_t).dims2("pixel_embed")?;
    if hw != hw2 {
        return Err(Error::dim("pixel_embed", alloc::format!("{hw} vs {hw2} pixels")));
    }
    let x = g.concat_channels(&[r_v, f_t])?;
    block.forward(g, p, x)
}
