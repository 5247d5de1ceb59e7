//! Instance-level memory of dynamically generated segmentation heads.
//!
//! A kernel predictor turns one reference frame's value tokens into a
//! parameter vector θ for a three-layer 1×1-convolution head (10 → 8 → 8 → 1).
//! Each head reads the channel-reduced query feature concatenated with a
//! position map relative to its source instance's centroid; head outputs
//! are averaged into `O_Inst`.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, PositionMode};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, LinearLayer, ParamId, ParamSet, ResBlock};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reduced feature channels fed to each head.
pub const HEAD_IN_FEAT: usize = 8;
/// Position channels fed to each head.
pub const HEAD_IN_POS: usize = 2;
pub const HEAD_WIDTH: usize = 8;

const L1_IN: usize = HEAD_IN_FEAT + HEAD_IN_POS;
const W1: usize = 0;
const B1: usize = W1 + L1_IN * HEAD_WIDTH;
const W2: usize = B1 + HEAD_WIDTH;
const B2: usize = W2 + HEAD_WIDTH * HEAD_WIDTH;
const W3: usize = B2 + HEAD_WIDTH;
const B3: usize = W3 + HEAD_WIDTH;

/// Length of θ: `(10·8 + 8) + (8·8 + 8) + (8·1 + 1)`.
pub const HEAD_PARAMS: usize = B3 + 1;

/// Offset of the final bias inside θ.
pub const HEAD_OUT_BIAS: usize = B3;

/// One dynamic head: its parameters and the centroid (grid row, col) of the
/// instance it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead<T> {
    pub theta: Tensor<T>,
    pub centroid: (f64, f64),
    /// Video frame the head was generated from.
    pub source_frame: usize,
}

/// Heads for one object, one per reference frame in which it appears.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMemory<T> {
    heads: Vec<SegHead<T>>,
}

impl<T: Scalar> Default for InstanceMemory<T> {
    fn default() -> Self {
        InstanceMemory { heads: Vec::new() }
    }
}

impl<T: Scalar> InstanceMemory<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn heads(&self) -> &[SegHead<T>] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn push(&mut self, head: SegHead<T>) -> Result<()> {
        if head.theta.len() != HEAD_PARAMS {
            return Err(Error::dim("instance_memory", alloc::format!("θ has {} entries", head.theta.len())));
        }
        self.heads.push(head);
        Ok(())
    }

    pub fn retain(&mut self, keep: impl FnMut(&SegHead<T>) -> bool) {
        self.heads.retain(keep);
    }
}

/// One plain cross-attention transformer layer (single head, no norms).
#[derive(Debug, Clone, Copy)]
pub struct AttnLayer {
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
    pub o: LinearLayer,
    pub ff1: LinearLayer,
    pub ff2: LinearLayer,
}

#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub e_init: ParamId,
    pub layers: [AttnLayer; 3],
    pub proj: LinearLayer,
    /// Replaces the attention layers in the global-average-pooling ablation.
    pub gap_proj: LinearLayer,
    pub dim: usize,
}

/// A head-parameter bias that starts every generated head from a He-style
/// random initialization with a near-silent output layer.
fn head_bias_init<T: Scalar>(init: &mut Init) -> Tensor<T> {
    let w1: Tensor<f64> = init.he(&[L1_IN * HEAD_WIDTH], L1_IN);
    let w2: Tensor<f64> = init.he(&[HEAD_WIDTH * HEAD_WIDTH], HEAD_WIDTH);
    let w3: Tensor<f64> = init.normal(&[HEAD_WIDTH], 0.1);
    let mut theta = alloc::vec![T::zero(); HEAD_PARAMS];
    for (dst, src) in [(W1, &w1), (W2, &w2), (W3, &w3)] {
        for (i, &v) in src.data().iter().enumerate() {
            theta[dst + i] = T::from_f64(v);
        }
    }
    Tensor::new(&[HEAD_PARAMS], theta).expect("fixed length")
}

impl PredictorParams {
    pub fn build<T: Scalar>(ps: &mut ParamSet<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.value_dim;
        let e_init = ps.push("inst.pred.e_init", init.normal(&[1, c], 0.02));
        let layers = core::array::from_fn(|i| {
            let n = |s: &str| alloc::format!("inst.pred.l{i}.{s}");
            AttnLayer {
                q: LinearLayer::build(ps, init, &n("q"), c, c, false),
                k: LinearLayer::build(ps, init, &n("k"), c, c, false),
                v: LinearLayer::build(ps, init, &n("v"), c, c, false),
                o: LinearLayer::build(ps, init, &n("o"), c, c, false),
                ff1: LinearLayer::build(ps, init, &n("ff1"), c, 2 * c, true),
                ff2: LinearLayer::build(ps, init, &n("ff2"), 2 * c, c, false),
            }
        });
        let proj_w = init.normal(&[c, HEAD_PARAMS], 0.02);
        let proj = LinearLayer::with_weights(ps, "inst.pred.proj", proj_w, head_bias_init(init));
        let gap_w = init.normal(&[c, HEAD_PARAMS], 0.02);
        let gap_proj = LinearLayer::with_weights(ps, "inst.gap.proj", gap_w, head_bias_init(init));
        PredictorParams {
            e_init,
            layers,
            proj,
            gap_proj,
            dim: c,
        }
    }
}

/// θ for one instance: `E_init` cross-attends to the value tokens through
/// three layers and is projected to [`HEAD_PARAMS`] entries. No positional
/// encoding is used, so θ is invariant to token order.
pub fn predict_theta<T: Scalar>(g: &mut Graph<T>, p: &Bound, pred: &PredictorParams, v_m: Var) -> Result<Var> {
    let (_, c) = g.value(v_m).dims2("predict_theta")?;
    if c != pred.dim {
        return Err(Error::dim("predict_theta", alloc::format!("{c} channels, predictor expects {}", pred.dim)));
    }
    let scale = T::from_f64(1.0 / libm::sqrt(c as f64));
    let mut e = p[pred.e_init];
    for layer in &pred.layers {
        let q = layer.q.forward(g, p, e)?;
        let k = layer.k.forward(g, p, v_m)?;
        let v = layer.v.forward(g, p, v_m)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s)?;
        let att = g.matmul(a, v)?;
        let o = layer.o.forward(g, p, att)?;
        e = g.add(e, o)?;
        let h = layer.ff1.forward(g, p, e)?;
        let h = g.relu(h);
        let f = layer.ff2.forward(g, p, h)?;
        e = g.add(e, f)?;
    }
    pred.proj.forward(g, p, e)
}

/// θ from globally average-pooled value tokens through a linear layer.
pub fn predict_theta_gap<T: Scalar>(g: &mut Graph<T>, p: &Bound, pred: &PredictorParams, v_m: Var) -> Result<Var> {
    let pooled = g.mean_rows(v_m)?;
    pred.gap_proj.forward(g, p, pooled)
}

/// Head layers sliced out of θ, in the order conv1 weights, conv1 bias,
/// conv2 weights, conv2 bias, conv3 weights, conv3 bias.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<X> {
    pub w1: X,
    pub b1: X,
    pub w2: X,
    pub b2: X,
    pub w3: X,
    pub b3: X,
}

const LAYOUT: [(usize, &[usize]); 6] = [
    (W1, &[L1_IN, HEAD_WIDTH]),
    (B1, &[HEAD_WIDTH]),
    (W2, &[HEAD_WIDTH, HEAD_WIDTH]),
    (B2, &[HEAD_WIDTH]),
    (W3, &[HEAD_WIDTH, 1]),
    (B3, &[1]),
];

fn check_theta_len(n: usize) -> Result<()> {
    if n != HEAD_PARAMS {
        return Err(Error::dim("unpack_head", alloc::format!("θ has {n} entries, expected {HEAD_PARAMS}")));
    }
    Ok(())
}

pub fn unpack_head<T: Scalar>(theta: &Tensor<T>) -> Result<HeadWeights<Tensor<T>>> {
    check_theta_len(theta.len())?;
    let part = |i: usize| {
        let (start, shape) = LAYOUT[i];
        let n: usize = shape.iter().product();
        Tensor::new(shape, theta.data()[start..start + n].to_vec())
    };
    Ok(HeadWeights {
        w1: part(0)?,
        b1: part(1)?,
        w2: part(2)?,
        b2: part(3)?,
        w3: part(4)?,
        b3: part(5)?,
    })
}

pub fn pack_head<T: Scalar>(h: &HeadWeights<Tensor<T>>) -> Tensor<T> {
    let mut data = Vec::with_capacity(HEAD_PARAMS);
    for t in [&h.w1, &h.b1, &h.w2, &h.b2, &h.w3, &h.b3] {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[1, HEAD_PARAMS], data).expect("fixed length")
}

pub fn unpack_head_var<T: Scalar>(g: &mut Graph<T>, theta: Var) -> Result<HeadWeights<Var>> {
    check_theta_len(g.value(theta).len())?;
    let mut parts = [theta; 6];
    for (slot, (start, shape)) in parts.iter_mut().zip(LAYOUT) {
        *slot = g.slice(theta, start, shape)?;
    }
    let [w1, b1, w2, b2, w3, b3] = parts;
    Ok(HeadWeights { w1, b1, w2, b2, w3, b3 })
}

/// Runs one head on `x` (`HW × 10`), giving `HW × 1` logits.
pub fn apply_head<T: Scalar>(g: &mut Graph<T>, w: &HeadWeights<Var>, x: Var) -> Result<Var> {
    let h = g.linear(x, w.w1, w.b1)?;
    let h = g.relu(h);
    let h = g.linear(h, w.w2, w.b2)?;
    let h = g.relu(h);
    g.linear(h, w.w3, w.b3)
}

/// Relative coordinates of every grid pixel with the centroid `(row, col)`
/// as origin: channel 0 is `(x − cx)/(w/2)`, channel 1 is `(y − cy)/(h/2)`.
pub fn coord_map<T: Scalar>(centroid: (f64, f64), h: usize, w: usize) -> Tensor<T> {
    let (cy, cx) = centroid;
    let (hh, hw) = (h as f64 / 2.0, w as f64 / 2.0);
    Tensor::from_fn(&[h * w, 2], |i| {
        let (pix, ch) = (i / 2, i % 2);
        let (y, x) = ((pix / w) as f64, (pix % w) as f64);
        T::from_f64(if ch == 0 { (x - cx) / hw } else { (y - cy) / hh })
    })
}

/// Absolute sine position map: `sin(2π·x/w)` and `cos(2π·y/h)`.
pub fn sine_map<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let tau = 2.0 * core::f64::consts::PI;
    Tensor::from_fn(&[h * w, 2], |i| {
        let (pix, ch) = (i / 2, i % 2);
        let (y, x) = ((pix / w) as f64, (pix % w) as f64);
        T::from_f64(if ch == 0 { libm::sin(tau * x / w as f64) } else { libm::cos(tau * y / h as f64) })
    })
}

/// Position channels for a head under the configured position mode.
pub fn position_map<T: Scalar>(mode: PositionMode, centroid: (f64, f64), h: usize, w: usize) -> Tensor<T> {
    match mode {
        PositionMode::RelCoord => coord_map(centroid, h, w),
        PositionMode::Sine => sine_map(h, w),
        PositionMode::None => Tensor::zeros(&[h * w, 2]),
    }
}

/// A head ready to run: θ on the graph plus its position channels.
#[derive(Debug, Clone)]
pub struct HeadInput<T> {
    pub theta: Var,
    pub position: Tensor<T>,
}

/// `O_Inst = (1/N)·Σ_i f^i([w(F^t), Pos_i])`.
pub fn apply_instance_memory<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    w_reduce: &LinearLayer,
    f_t: Var,
    heads: &[HeadInput<T>],
) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let reduced = w_reduce.forward(g, p, f_t)?;
    let mut total: Option<Var> = None;
    for head in heads {
        let pos = g.constant(head.position.clone());
        let x = g.concat_channels(&[reduced, pos])?;
        let weights = unpack_head_var(g, head.theta)?;
        let out = apply_head(g, &weights, x)?;
        total = Some(match total {
            None => out,
            Some(t) => g.add(t, out)?,
        });
    }
    let total = total.expect("nonempty");
    Ok(g.scale(total, T::one() / T::from_f64(heads.len() as f64)))
}

/// `F_Inst`: residual block over `[O_Inst, F^t]`.
pub fn instance_embed<T: Scalar>(g: &mut Graph<T>, p: &Bound, block: &ResBlock, o_inst: Var, f_t: Var) -> Result<Var> {
    let (hw, _) = g.value(o_inst).dims2("instance_embed")?;
    let (hw2, _) = g.value(f_t).dims2("instance_embed")?;
    if hw != hw2 {
        return Err(Error::dim("instance_embed", alloc::format!("{hw} vs {hw2} pixels")));
    }
    let x = g.concat_channels(&[o_inst, f_t])?;
    block.forward(g, p, x)
}

/// Mask-weighted mean grid position `(row, col)` of a grid-resolution mask
/// (`HW` entries, row-major), plus the mask area. `None` when the area is 0.
pub fn centroid(mask: &[f64], h: usize, w: usize) -> Option<((f64, f64), f64)> {
    let mut area = 0.0;
    let (mut sy, mut sx) = (0.0, 0.0);
    for (i, &m) in mask.iter().enumerate().take(h * w) {
        area += m;
        sy += m * (i / w) as f64;
        sx += m * (i % w) as f64;
    }
    (area > 0.0).then(|| ((sy / area, sx / area), area))
}
