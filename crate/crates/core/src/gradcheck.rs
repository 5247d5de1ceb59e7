//! Finite-difference verification of analytic gradients.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A function with an analytic backward rule.
pub trait DifferentiableOp<T: Scalar> {
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>>;

    /// One gradient per input, each shaped like its input.
    fn backward(&self, inputs: &[Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

type BuildFn<T> = dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>;

/// Wraps a graph-building closure; backward runs the recorded tape.
pub struct TapeOp<T> {
    build: Box<BuildFn<T>>,
}

impl<T: Scalar> TapeOp<T> {
    pub fn new(build: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var> + 'static) -> Self {
        TapeOp { build: Box::new(build) }
    }

    fn record(&self, inputs: &[Tensor<T>]) -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        Ok((g, vars, out))
    }
}

impl<T: Scalar> DifferentiableOp<T> for TapeOp<T> {
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let (g, _, out) = self.record(inputs)?;
        Ok(g.value(out).clone())
    }

    fn backward(&self, inputs: &[Tensor<T>], grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (g, vars, out) = self.record(inputs)?;
        let grads = g.backward_from(out, grad_out.clone())?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect())
    }
}

/// Denominator floor for the relative error, so that gradients that are
/// both essentially zero do not inflate the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Maximum relative error between the analytic gradient of a random scalar
/// projection `Σ r ⊙ op(inputs)` and its central finite difference.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn grad_check(op: &dyn DifferentiableOp<f64>, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    grad_check_inputs(op, inputs, eps, None)
}

/// As [`grad_check`], perturbing only the inputs whose index is listed.
pub fn grad_check_inputs(
    op: &dyn DifferentiableOp<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
    only: Option<&[usize]>,
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Input(alloc::format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    let out = op.forward(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let proj = Tensor::from_fn(out.shape(), |_| StandardNormal.sample(&mut rng));
    let analytic = op.backward(inputs, &proj)?;
    if analytic.len() != inputs.len() {
        return Err(Error::dim("grad_check", "backward returned the wrong number of gradients"));
    }
    let objective = |xs: &[Tensor<f64>]| -> Result<f64> {
        let y = op.forward(xs)?;
        Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        if only.is_some_and(|o| !o.contains(&i)) {
            continue;
        }
        if grad.shape() != inputs[i].shape() {
            return Err(Error::dim("grad_check", "gradient shape differs from its input"));
        }
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            xs[i] = with_entry(&inputs[i], j, orig + eps);
            let plus = objective(&xs)?;
            xs[i] = with_entry(&inputs[i], j, orig - eps);
            let minus = objective(&xs)?;
            xs[i] = inputs[i].clone();
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn with_entry(t: &Tensor<f64>, j: usize, v: f64) -> Tensor<f64> {
    let mut d = t.data().to_vec();
    d[j] = v;
    Tensor::new(t.shape(), d).expect("shape preserved")
}

/// Worst relative error of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

struct Inputs(ChaCha8Rng);

impl Inputs {
    fn normal(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut self.0))
    }

    /// Normal samples pushed at least 0.1 away from zero, clear of kinks.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.normal(shape).map(|v| v.signum() * (0.1 + v.abs()))
    }

    fn unit(&mut self, shape: &[usize]) -> Tensor<f64> {
        use rand::Rng;
        Tensor::from_fn(shape, |_| self.0.random_range(0.05..0.95))
    }

    fn binary(&mut self, shape: &[usize]) -> Tensor<f64> {
        use rand::Rng;
        Tensor::from_fn(shape, |_| if self.0.random_bool(0.5) { 1.0 } else { 0.0 })
    }
}

/// Central-difference checks of every differentiable tape operation, plus
/// the head and affinity compositions built from them.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckReport>> {
    use crate::instance_stream::{apply_head, unpack_head_var, HEAD_PARAMS};

    const EPS: f64 = 1e-6;
    let mut r = Inputs(ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    let mut check = |name: &'static str, op: TapeOp<f64>, inputs: Vec<Tensor<f64>>| -> Result<()> {
        let max_rel_err = grad_check(&op, &inputs, EPS)?;
        out.push(CheckReport { name, max_rel_err });
        Ok(())
    };

    check("matmul", TapeOp::new(|g, v| g.matmul(v[0], v[1])), alloc::vec![r.normal(&[3, 4]), r.normal(&[4, 2])])?;
    check("transpose", TapeOp::new(|g, v| g.transpose(v[0])), alloc::vec![r.normal(&[3, 2])])?;
    check(
        "linear",
        TapeOp::new(|g, v| g.linear(v[0], v[1], v[2])),
        alloc::vec![r.normal(&[5, 4]), r.normal(&[4, 3]), r.normal(&[3])],
    )?;
    check(
        "conv2d 3x3",
        TapeOp::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
        alloc::vec![r.normal(&[5, 4, 2]), r.normal(&[3, 3, 2, 3]), r.normal(&[3])],
    )?;
    check(
        "conv2d stride 2",
        TapeOp::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1)),
        alloc::vec![r.normal(&[6, 5, 2]), r.normal(&[3, 3, 2, 2]), r.normal(&[2])],
    )?;
    check(
        "conv2d 1x1",
        TapeOp::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 0)),
        alloc::vec![r.normal(&[3, 3, 4]), r.normal(&[1, 1, 4, 2]), r.normal(&[2])],
    )?;
    check("relu", TapeOp::new(|g, v| Ok(g.relu(v[0]))), alloc::vec![r.off_zero(&[4, 3])])?;
    check("sigmoid", TapeOp::new(|g, v| Ok(g.sigmoid(v[0]))), alloc::vec![r.normal(&[4, 3])])?;
    check("add", TapeOp::new(|g, v| g.add(v[0], v[1])), alloc::vec![r.normal(&[3, 2]), r.normal(&[3, 2])])?;
    check("sub", TapeOp::new(|g, v| g.sub(v[0], v[1])), alloc::vec![r.normal(&[3, 2]), r.normal(&[3, 2])])?;
    check("mul", TapeOp::new(|g, v| g.mul(v[0], v[1])), alloc::vec![r.normal(&[3, 2]), r.normal(&[3, 2])])?;
    check("affine", TapeOp::new(|g, v| Ok(g.affine(v[0], -1.7, 0.3))), alloc::vec![r.normal(&[2, 3])])?;
    check(
        "concat_channels",
        TapeOp::new(|g, v| g.concat_channels(&[v[0], v[1]])),
        alloc::vec![r.normal(&[2, 2, 3]), r.normal(&[2, 2, 1])],
    )?;
    check("softmax_rows", TapeOp::new(|g, v| g.softmax_rows(v[0])), alloc::vec![r.normal(&[4, 6])])?;
    check("softmax_topk_rows", TapeOp::new(|g, v| g.softmax_topk_rows(v[0], 3)), alloc::vec![r.normal(&[4, 7])])?;
    check(
        "pairwise_sqdist",
        TapeOp::new(|g, v| g.pairwise_sqdist(v[0], v[1])),
        alloc::vec![r.normal(&[4, 3]), r.normal(&[5, 3])],
    )?;
    check("bilinear_upsample x2", TapeOp::new(|g, v| g.bilinear_upsample(v[0], 2)), alloc::vec![r.normal(&[3, 2, 2])])?;
    check("bilinear_upsample x4", TapeOp::new(|g, v| g.bilinear_upsample(v[0], 4)), alloc::vec![r.normal(&[2, 3, 1])])?;
    check("mul_rows", TapeOp::new(|g, v| g.mul_rows(v[0], v[1])), alloc::vec![r.normal(&[4, 3]), r.normal(&[4, 1])])?;
    check("sum_cols", TapeOp::new(|g, v| g.sum_cols(v[0])), alloc::vec![r.normal(&[4, 3])])?;
    check("mean_rows", TapeOp::new(|g, v| g.mean_rows(v[0])), alloc::vec![r.normal(&[4, 3])])?;
    check(
        "scalar_affine",
        TapeOp::new(|g, v| g.scalar_affine(v[0], v[1], v[2])),
        alloc::vec![r.normal(&[4, 1]), r.normal(&[1]), r.normal(&[1])],
    )?;
    check("slice", TapeOp::new(|g, v| g.slice(v[0], 3, &[2, 2])), alloc::vec![r.normal(&[3, 4])])?;
    check("reshape", TapeOp::new(|g, v| g.reshape(v[0], &[6, 2])), alloc::vec![r.normal(&[3, 4])])?;
    check("vstack", TapeOp::new(|g, v| g.vstack(&[v[0], v[1]])), alloc::vec![r.normal(&[2, 3]), r.normal(&[1, 3])])?;
    check("fuse", TapeOp::new(|g, v| g.fuse(v[0], v[1], v[2])), alloc::vec![r.unit(&[4, 1]), r.normal(&[4, 3]), r.normal(&[4, 3])])?;

    let target = r.binary(&[12, 1]);
    let t = target.clone();
    check("bce_bootstrap full", TapeOp::new(move |g, v| g.bce_bootstrap(v[0], &t, 1.0)), alloc::vec![r.normal(&[12, 1])])?;
    let t = target.clone();
    check("bce_bootstrap half", TapeOp::new(move |g, v| g.bce_bootstrap(v[0], &t, 0.5)), alloc::vec![r.normal(&[12, 1])])?;
    check("miou_loss", TapeOp::new(move |g, v| g.miou_loss(v[0], &target)), alloc::vec![r.unit(&[12, 1])])?;

    check(
        "affinity read",
        TapeOp::new(|g, v| {
            let d = g.pairwise_sqdist(v[0], v[1])?;
            let s = g.affine(d, -0.5, 0.0);
            let a = g.softmax_rows(s)?;
            g.matmul(a, v[2])
        }),
        alloc::vec![r.normal(&[4, 3]), r.normal(&[6, 3]), r.normal(&[6, 2])],
    )?;
    let theta = r.normal(&[1, HEAD_PARAMS]).map(|v| v * 0.5);
    check(
        "segmentation head",
        TapeOp::new(|g, v| {
            let w = unpack_head_var(g, v[0])?;
            apply_head(g, &w, v[1])
        }),
        alloc::vec![theta, r.normal(&[6, 10])],
    )?;
    Ok(out)
}

/// A random three-frame 8×8 clip whose masks are blocks of different
/// placement, so every frame has foreground and background.
pub fn toy_clip(seed: u64) -> crate::synth::TrainingClip<f64> {
    use rand::Rng;
    let mut r = Inputs(ChaCha8Rng::seed_from_u64(seed));
    let frames = core::array::from_fn(|_| r.unit(&[8, 8, 3]));
    let masks = core::array::from_fn(|i| {
        let (y0, x0) = (r.0.random_range(0..3) + i, r.0.random_range(0..3));
        Tensor::from_fn(&[8, 8, 1], |p| {
            let (y, x) = (p / 8, p % 8);
            if (y0..y0 + 4).contains(&y) && (x0..x0 + 4).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    });
    crate::synth::TrainingClip {
        frames,
        masks,
        indices: [0, 1, 2],
        object: 1,
    }
}

fn toy_model(cfg: &crate::ModelConfig) -> Result<crate::model::Model<f64>> {
    let cfg = crate::ModelConfig {
        image_size: 8,
        ..cfg.clone()
    };
    crate::model::Model::new(cfg)
}

/// Worst relative error of the clip-loss gradient with respect to the
/// predictor's initial query embedding, on an 8×8 clip.
pub fn end_to_end_check(cfg: &crate::ModelConfig, seed: u64) -> Result<f64> {
    const EPS: f64 = 1e-6;
    let mut model = toy_model(cfg)?;
    let clip = toy_clip(seed);
    let id = model
        .params()
        .find("inst.pred.e_init")
        .ok_or(Error::Config("model has no predictor query".into()))?;
    let (_, grads) = model.clip_grads(&clip, 1.0)?;
    let analytic = grads[id.0].clone();
    let base = model.params().tensors()[id.0].clone();
    let mut worst: f64 = 0.0;
    for j in 0..base.len() {
        let orig = base.data()[j];
        model.params_mut().set(id, with_entry(&base, j, orig + EPS));
        let plus = model.clip_grads(&clip, 1.0)?.0;
        model.params_mut().set(id, with_entry(&base, j, orig - EPS));
        let minus = model.clip_grads(&clip, 1.0)?.0;
        let numeric = (plus - minus) / (2.0 * EPS);
        let a = analytic.data()[j];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR));
    }
    model.params_mut().set(id, base);
    Ok(worst)
}

/// Largest gradient magnitude over instance-stream parameters when the
/// fusion ignores the instance stream.
pub fn pixel_only_instance_grad(cfg: &crate::ModelConfig, seed: u64) -> Result<f64> {
    let cfg = crate::ModelConfig {
        fusion: crate::config::FusionMode::PixelOnly,
        ..cfg.clone()
    };
    let model = toy_model(&cfg)?;
    let (_, grads) = model.clip_grads(&toy_clip(seed), 1.0)?;
    Ok(model
        .instance_params()
        .into_iter()
        .flat_map(|id| grads[id.0].data().to_vec())
        .fold(0.0, |m, v| m.max(v.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for r in primitive_suite(1).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{} {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn end_to_end_and_disconnection() {
        let cfg = crate::ModelConfig::default();
        let e = end_to_end_check(&cfg, 3).unwrap();
        assert!(e < 1e-3, "{e}");
        assert_eq!(pixel_only_instance_grad(&cfg, 3).unwrap(), 0.0);
    }
}
