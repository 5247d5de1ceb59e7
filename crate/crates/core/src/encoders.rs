//! Tiny convolutional encoders: a key/feature stack for every frame and a
//! value stack for reference frames with their masks.
//!
//! Both stacks downsample twice with stride-2 3×3 convolutions, giving a
//! feature grid at stride 4. The key and query-feature heads share the first
//! two layers. Grid features are flattened row-major to `HW × C`, so row
//! `y·W + x` refers to the same pixel in every encoder output.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ConvLayer, Init, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub shared1: ConvLayer,
    pub shared2: ConvLayer,
    pub key_head: ConvLayer,
    pub feat_head: ConvLayer,
    pub value1: ConvLayer,
    pub value2: ConvLayer,
    pub value3: ConvLayer,
}

/// Output of [`key_encode`].
#[derive(Debug, Clone)]
pub struct KeyFeatures {
    /// `HW × C_k`.
    pub key: Var,
    /// `HW × C_v` query feature `F^t`.
    pub feat: Var,
    /// Decoder taps: `[stride-2 feature, stride-1 frame]`.
    pub skips: Vec<Var>,
    pub grid: (usize, usize),
}

impl EncoderParams {
    pub fn build<T: Scalar>(ps: &mut ParamSet<T>, init: &mut Init, cfg: &ModelConfig) -> Self {
        let [c1, c2] = cfg.enc_widths;
        EncoderParams {
            shared1: ConvLayer::build(ps, init, "enc.shared1", 3, 3, c1, 2, true),
            shared2: ConvLayer::build(ps, init, "enc.shared2", 3, c1, c2, 2, true),
            key_head: ConvLayer::build(ps, init, "enc.key", 3, c2, cfg.key_dim, 1, false),
            feat_head: ConvLayer::build(ps, init, "enc.feat", 3, c2, cfg.value_dim, 1, false),
            value1: ConvLayer::build(ps, init, "enc.value1", 3, 4, c1, 2, true),
            value2: ConvLayer::build(ps, init, "enc.value2", 3, c1, c2, 2, true),
            value3: ConvLayer::build(ps, init, "enc.value3", 3, c2, cfg.value_dim, 1, false),
        }
    }
}

/// Stride of the encoder grid.
pub const STRIDE: usize = 4;

fn check_frame<T: Scalar>(g: &Graph<T>, frame: Var, channels: usize) -> Result<(usize, usize)> {
    let (h, w, c) = g.value(frame).dims3("encoder")?;
    if c != channels {
        return Err(Error::dim("encoder", format!("expected {channels} channels, got {c}")));
    }
    if h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(Error::dim("encoder", format!("{h}×{w} not divisible by stride {STRIDE}")));
    }
    Ok((h / STRIDE, w / STRIDE))
}

fn flatten<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (h, w, c) = g.value(x).dims3("flatten")?;
    g.reshape(x, &[h * w, c])
}

/// Encodes a frame (`H_im × W_im × 3`, values in `[0, 1]`) into its key,
/// query feature and decoder skips.
pub fn key_encode<T: Scalar>(g: &mut Graph<T>, p: &Bound, enc: &EncoderParams, frame: Var) -> Result<KeyFeatures> {
    let grid = check_frame(g, frame, 3)?;
    let h1 = enc.shared1.forward(g, p, frame)?;
    let h1 = g.relu(h1);
    let h2 = enc.shared2.forward(g, p, h1)?;
    let h2 = g.relu(h2);
    let key = enc.key_head.forward(g, p, h2)?;
    let feat = enc.feat_head.forward(g, p, h2)?;
    Ok(KeyFeatures {
        key: flatten(g, key)?,
        feat: flatten(g, feat)?,
        skips: alloc::vec![h1, frame],
        grid,
    })
}

/// Encodes a reference frame and its mask (`H_im × W_im × 1`, values in
/// `[0, 1]`) into `V_M^n` (`HW × C_v`). The mask is concatenated as a fourth
/// input channel.
pub fn value_encode<T: Scalar>(g: &mut Graph<T>, p: &Bound, enc: &EncoderParams, frame: Var, mask: Var) -> Result<Var> {
    check_frame(g, frame, 3)?;
    let (fh, fw, _) = g.value(frame).dims3("value_encode")?;
    match g.value(mask).shape() {
        &[h, w, 1] if (h, w) == (fh, fw) => {}
        s => return Err(Error::dim("value_encode", format!("mask {s:?} does not match frame {fh}×{fw}"))),
    }
    let x = g.concat_channels(&[frame, mask])?;
    let h = enc.value1.forward(g, p, x)?;
    let h = g.relu(h);
    let h = enc.value2.forward(g, p, h)?;
    let h = g.relu(h);
    let v = enc.value3.forward(g, p, h)?;
    flatten(g, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(seed: u64) -> (ParamSet<f64>, EncoderParams) {
        let cfg = ModelConfig::default();
        let mut ps = ParamSet::new();
        let enc = EncoderParams::build(&mut ps, &mut Init::new(seed), &cfg);
        (ps, enc)
    }

    fn frame(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, 3], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn key_shapes_and_determinism() {
        let (ps, enc) = setup(1);
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let f1 = g.constant(frame(32, 32, 3));
        let f2 = g.constant(frame(32, 32, 3));
        let a = key_encode(&mut g, &p, &enc, f1).unwrap();
        let b = key_encode(&mut g, &p, &enc, f2).unwrap();
        assert_eq!(g.shape(a.key), &[64, 16]);
        assert_eq!(g.shape(a.feat), &[64, 32]);
        assert_eq!(g.shape(a.skips[0]), &[16, 16, 16]);
        assert_eq!(g.value(a.key), g.value(b.key));
    }

    #[test]
    fn zero_frame_with_zero_biases_gives_zero_key() {
        let (ps, enc) = setup(2);
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let f = g.constant(Tensor::zeros(&[32, 32, 3]));
        let k = key_encode(&mut g, &p, &enc, f).unwrap();
        assert!(g.value(k.key).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let (ps, enc) = setup(3);
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let f = g.constant(Tensor::zeros(&[30, 32, 3]));
        assert!(matches!(key_encode(&mut g, &p, &enc, f), Err(Error::Dimension { .. })));
    }

    #[test]
    fn value_depends_on_mask() {
        let (ps, enc) = setup(4);
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let f = g.constant(frame(32, 32, 9));
        let m = Tensor::from_fn(&[32, 32, 1], |i| if (i % 32) < 16 { 1.0 } else { 0.0 });
        let flipped = m.map(|v| 1.0 - v);
        let m1 = g.constant(m.clone());
        let m2 = g.constant(flipped);
        let m3 = g.constant(m);
        let v1 = value_encode(&mut g, &p, &enc, f, m1).unwrap();
        let v2 = value_encode(&mut g, &p, &enc, f, m2).unwrap();
        let v3 = value_encode(&mut g, &p, &enc, f, m3).unwrap();
        assert_eq!(g.shape(v1), &[64, 32]);
        assert!(g.value(v1).max_abs_diff(g.value(v2)) > 0.0);
        assert_eq!(g.value(v1), g.value(v3));
        let bad = g.constant(Tensor::zeros(&[16, 32, 1]));
        assert!(value_encode(&mut g, &p, &enc, f, bad).is_err());
    }

    /// A delta impulse at image pixel (4y+1, 4x+1) first influences grid row
    /// y·W + x in both encoders, so flattening agrees between them.
    #[test]
    fn flattening_order_matches_across_encoders() {
        let (ps, enc) = setup(5);
        let (gy, gx) = (5usize, 2usize);
        let img = Tensor::from_fn(&[32, 32, 3], |i| {
            let (y, x) = (i / 96, (i / 3) % 32);
            if y == 4 * gy + 1 && x == 4 * gx + 1 { 1.0 } else { 0.0 }
        });
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let f = g.constant(img);
        let zero_mask = g.constant(Tensor::zeros(&[32, 32, 1]));
        let k = key_encode(&mut g, &p, &enc, f).unwrap();
        let v = value_encode(&mut g, &p, &enc, f, zero_mask).unwrap();
        // With zero biases, rows untouched by the impulse's receptive field stay zero;
        // the centre row must be nonzero in both.
        let row = gy * 8 + gx;
        let nonzero = |t: &Tensor<f64>, r: usize| t.data()[r * t.channels()..(r + 1) * t.channels()].iter().any(|&v| v != 0.0);
        assert!(nonzero(g.value(k.key), row));
        assert!(nonzero(g.value(v), row));
        let far = 7 * 8 + 7;
        assert!(!nonzero(g.value(k.key), far));
        assert!(!nonzero(g.value(v), far));
    }
}
