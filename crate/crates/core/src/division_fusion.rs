//! Routing between the two streams and the mask decoder.
//!
//! The aggregated key `R_K` is what the query key would look like if it were
//! rebuilt from memory. Where the rebuild is poor, memory has no good match
//! and the pixel stream is unreliable; the routing map `W` grows with that
//! residual and hands those pixels to the instance stream.

use alloc::format;

use crate::autodiff::{Graph, Var};
use crate::config::{FusionMode, ModelConfig, RoutingForm};
use crate::error::{Error, Result};
use crate::params::{Bound, ConvLayer, Init, LinearLayer, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct RoutingParams {
    /// Scalar form: `a` and `b` of `sigmoid(a·D + b)`.
    pub a: ParamId,
    pub b: ParamId,
    /// Channelwise form: `C_k → 1`.
    pub channelwise: LinearLayer,
    pub key_dim: usize,
}

impl RoutingParams {
    /// `a = 1, b = 0`; the channelwise layer starts as the scalar form.
    pub fn build<T: Scalar>(ps: &mut ParamSet<T>, cfg: &ModelConfig) -> Self {
        let c = cfg.key_dim;
        let a = ps.push("route.a", Tensor::ones(&[1]));
        let b = ps.push("route.b", Tensor::zeros(&[1]));
        let w = Tensor::ones(&[c, 1]);
        let channelwise = LinearLayer::with_weights(ps, "route.chan", w, Tensor::zeros(&[1]));
        RoutingParams {
            a,
            b,
            channelwise,
            key_dim: c,
        }
    }
}

/// `R_K = A · K_M`.
pub fn aggregate_key<T: Scalar>(g: &mut Graph<T>, a: Var, k_m: Var) -> Result<Var> {
    g.matmul(a, k_m)
}

fn check_keys<T: Scalar>(g: &Graph<T>, r_k: Var, k_q: Var) -> Result<usize> {
    let (rows, c) = g.value(r_k).dims2("routing")?;
    if g.shape(k_q) != [rows, c] {
        return Err(Error::dim("routing", format!("{:?} vs {:?}", g.shape(r_k), g.shape(k_q))));
    }
    Ok(c)
}

/// `D = ‖R_K − K_Q‖²` per pixel (`HW × 1`).
pub fn routing_residual<T: Scalar>(g: &mut Graph<T>, r_k: Var, k_q: Var) -> Result<Var> {
    check_keys(g, r_k, k_q)?;
    let diff = g.sub(r_k, k_q)?;
    let sq = g.mul(diff, diff)?;
    g.sum_cols(sq)
}

/// The routing map `W` (`HW × 1`, in `(0, 1)`) for the learned modes, or
/// the constant map of an ablation.
pub fn routing<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    rp: &RoutingParams,
    form: RoutingForm,
    fusion: FusionMode,
    r_k: Var,
    k_q: Var,
) -> Result<Var> {
    let rows = g.shape(k_q)[0];
    let fixed = |v: f64| Tensor::full(&[rows, 1], T::from_f64(v));
    match fusion {
        FusionMode::PixelOnly => return Ok(g.constant(fixed(0.0))),
        FusionMode::Equal => return Ok(g.constant(fixed(0.5))),
        FusionMode::InstanceOnly => return Ok(g.constant(fixed(1.0))),
        FusionMode::Routing => {}
    }
    let z = match form {
        RoutingForm::Scalar => {
            let d = routing_residual(g, r_k, k_q)?;
            g.scalar_affine(d, p[rp.a], p[rp.b])?
        }
        RoutingForm::Channelwise => {
            check_keys(g, r_k, k_q)?;
            let diff = g.sub(r_k, k_q)?;
            let sq = g.mul(diff, diff)?;
            rp.channelwise.forward(g, p, sq)?
        }
    };
    let w = g.sigmoid(z);
    // Saturated logits round to exactly 0 or 1; W stays inside (0, 1).
    let eps = T::epsilon();
    Ok(g.clamp(w, eps, T::one() - eps))
}

/// `F = W·F_inst + (1 − W)·F_pix`.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, w: Var, f_inst: Var, f_pix: Var) -> Result<Var> {
    g.fuse(w, f_inst, f_pix)
}

/// Two upsampling stages with projected skips, then a 1×1 logit layer.
#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    pub skip1: ConvLayer,
    pub conv1: ConvLayer,
    pub skip2: ConvLayer,
    pub conv2: ConvLayer,
    pub out: ConvLayer,
}

impl DecoderParams {
    pub fn build<T: Scalar>(ps: &mut ParamSet<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.value_dim;
        DecoderParams {
            skip1: ConvLayer::build(ps, init, "dec.skip1", 1, cfg.enc_widths[0], c, 1, false),
            conv1: ConvLayer::build(ps, init, "dec.conv1", 3, c, c / 2, 1, true),
            skip2: ConvLayer::build(ps, init, "dec.skip2", 1, 3, c / 2, 1, false),
            conv2: ConvLayer::build(ps, init, "dec.conv2", 3, c / 2, c / 4, 1, true),
            out: ConvLayer::build(ps, init, "dec.out", 1, c / 4, 1, 1, false),
        }
    }
}

/// Decodes fused grid features (`HW × C_v`, grid `h × w`) with the encoder
/// skips `[stride-2 feature, frame]` into full-resolution logits
/// (`4h·4w × 1`).
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    dec: &DecoderParams,
    fused: Var,
    grid: (usize, usize),
    skips: &[Var],
) -> Result<Var> {
    let (h, w) = grid;
    let (rows, c) = g.value(fused).dims2("decode")?;
    if rows != h * w || skips.len() != 2 {
        return Err(Error::dim("decode", format!("{rows} rows for grid {h}×{w}, {} skips", skips.len())));
    }
    let x = g.reshape(fused, &[h, w, c])?;
    let x = g.bilinear_upsample(x, 2)?;
    let s = dec.skip1.forward(g, p, skips[0])?;
    let x = g.add(x, s)?;
    let x = dec.conv1.forward(g, p, x)?;
    let x = g.relu(x);
    let x = g.bilinear_upsample(x, 2)?;
    let s = dec.skip2.forward(g, p, skips[1])?;
    let x = g.add(x, s)?;
    let x = dec.conv2.forward(g, p, x)?;
    let x = g.relu(x);
    let x = dec.out.forward(g, p, x)?;
    g.reshape(x, &[16 * h * w, 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn routing_value(form: RoutingForm, fusion: FusionMode, rk: &Tensor<f64>, kq: &Tensor<f64>) -> Tensor<f64> {
        let cfg = ModelConfig {
            key_dim: rk.shape()[1],
            ..ModelConfig::default()
        };
        let mut ps = ParamSet::new();
        let rp = RoutingParams::build(&mut ps, &cfg);
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let (a, b) = (g.constant(rk.clone()), g.constant(kq.clone()));
        let w = routing(&mut g, &p, &rp, form, fusion, a, b).unwrap();
        g.value(w).clone()
    }

    #[test]
    fn routing_examples() {
        let kq = Tensor::from_rows(&[&[0.0, 0.0]]).unwrap();
        let same = routing_value(RoutingForm::Scalar, FusionMode::Routing, &kq, &kq);
        assert_eq!(same.data(), &[0.5]);
        let rk = Tensor::from_rows(&[&[2.0, 0.0]]).unwrap();
        let w = routing_value(RoutingForm::Scalar, FusionMode::Routing, &rk, &kq).data()[0];
        // D = 4 with a = 1, b = 0.
        assert!((w - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-12);
        assert!((w - 0.98201).abs() < 1e-5);
    }

    #[test]
    fn channelwise_matches_scalar_at_init() {
        let rk = rand_t(&[7, 5], 1);
        let kq = rand_t(&[7, 5], 2);
        let a = routing_value(RoutingForm::Scalar, FusionMode::Routing, &rk, &kq);
        let b = routing_value(RoutingForm::Channelwise, FusionMode::Routing, &rk, &kq);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn ablation_maps_are_constant() {
        let rk = rand_t(&[3, 4], 3);
        for (mode, v) in [(FusionMode::PixelOnly, 0.0), (FusionMode::Equal, 0.5), (FusionMode::InstanceOnly, 1.0)] {
            let w = routing_value(RoutingForm::Scalar, mode, &rk, &rk);
            assert!(w.data().iter().all(|&x| x == v));
        }
    }

    #[test]
    fn routing_shape_mismatch() {
        let cfg = ModelConfig::default();
        let mut ps = ParamSet::<f64>::new();
        let rp = RoutingParams::build(&mut ps, &cfg);
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let a = g.constant(rand_t(&[4, 16], 1));
        let b = g.constant(rand_t(&[5, 16], 1));
        assert!(routing(&mut g, &p, &rp, RoutingForm::Scalar, FusionMode::Routing, a, b).is_err());
    }

    fn fuse_value(w: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let (w, a, b) = (g.constant(w.clone()), g.constant(a.clone()), g.constant(b.clone()));
        let f = fuse(&mut g, w, a, b).unwrap();
        g.value(f).clone()
    }

    #[test]
    fn fuse_endpoints_are_exact() {
        let a = rand_t(&[6, 3], 4);
        let b = rand_t(&[6, 3], 5);
        assert_eq!(fuse_value(&Tensor::zeros(&[6, 1]), &a, &b), b);
        assert_eq!(fuse_value(&Tensor::ones(&[6, 1]), &a, &b), a);
        let w = rand_t(&[6, 1], 6).map(|v| v.abs());
        assert_eq!(fuse_value(&w, &a, &a), a);
        let a = Tensor::from_rows(&[&[2.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0, 4.0]]).unwrap();
        let half = fuse_value(&Tensor::full(&[1, 1], 0.5), &a, &b);
        assert_eq!(half.data(), &[1.0, 2.0]);
    }

    #[test]
    fn fuse_rejects_mismatch() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::zeros(&[4, 1]));
        let a = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        assert!(fuse(&mut g, w, a, b).is_err());
        let w2 = g.constant(Tensor::zeros(&[3, 1]));
        assert!(fuse(&mut g, w2, a, a).is_err());
    }

    #[test]
    fn decoder_output_shape() {
        let cfg = ModelConfig::default();
        let mut ps = ParamSet::<f64>::new();
        let dec = DecoderParams::build(&mut ps, &mut Init::new(1), &cfg);
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let f = g.constant(rand_t(&[6 * 5, 32], 1));
        let s1 = g.constant(rand_t(&[12, 10, 16], 2));
        let s2 = g.constant(rand_t(&[24, 20, 3], 3));
        let out = decode(&mut g, &p, &dec, f, (6, 5), &[s1, s2]).unwrap();
        assert_eq!(g.shape(out), &[480, 1]);
        assert!(decode(&mut g, &p, &dec, f, (5, 5), &[s1, s2]).is_err());
    }
}
