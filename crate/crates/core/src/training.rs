//! The training loop: curriculum clip sampling, batched gradients, Adam.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::bootstrap_fraction;
use crate::model::Model;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::synth::{sample_training_clip, TrainingClip, VideoSample};
use crate::tensor::Tensor;

/// Per-clip `(loss, gradients)` for a batch, in clip order.
pub type BatchGrads<T> = Vec<(f64, Vec<Tensor<T>>)>;

/// Evaluates every clip of a batch one after another.
pub fn sequential_grads<T: Scalar>(model: &Model<T>, clips: &[TrainingClip<T>], bootstrap: f64) -> Result<BatchGrads<T>> {
    clips.iter().map(|c| model.clip_grads(c, bootstrap)).collect()
}

/// Mean of per-clip gradients, summed in clip order so the result does not
/// depend on how the clips were evaluated.
pub fn mean_grads<T: Scalar>(parts: &BatchGrads<T>) -> Vec<Tensor<T>> {
    let inv = T::one() / T::from_f64(parts.len() as f64);
    let mut acc: Vec<Vec<T>> = parts[0].1.iter().map(|t| t.data().to_vec()).collect();
    for (_, grads) in &parts[1..] {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, &y) in a.iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    acc.into_iter()
        .zip(&parts[0].1)
        .map(|(mut d, t)| {
            d.iter_mut().for_each(|v| *v *= inv);
            Tensor::new(t.shape(), d).expect("same shape")
        })
        .collect()
}

/// Seed of the clip-sampling stream for a model seed.
fn sampler_seed(seed: u64) -> u64 {
    seed ^ 0x7261_696e_6c6f_6f70
}

/// Trains `model` for its configured number of iterations on `videos`.
/// `grads` evaluates a batch; `on_iter` sees every iteration's mean loss.
/// A non-finite loss or gradient aborts with a numerical error.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    videos: &[VideoSample],
    grads: impl Fn(&Model<T>, &[TrainingClip<T>], f64) -> Result<BatchGrads<T>>,
    mut on_iter: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if videos.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    let cfg = model.config().clone();
    let total = cfg.optim.iterations;
    let mut opt = Adam::new(cfg.optim.clone(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(sampler_seed(cfg.seed));
    let mut curve = Vec::with_capacity(total);
    for it in 0..total {
        let mut clips = Vec::with_capacity(cfg.optim.batch);
        for _ in 0..cfg.optim.batch {
            let v = &videos[rng.random_range(0..videos.len())];
            clips.push(sample_training_clip::<T>(v, it, total, &mut rng, true)?);
        }
        let frac = bootstrap_fraction(it, total);
        let parts = grads(model, &clips, frac)?;
        let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / parts.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(alloc::format!("loss became {loss} at iteration {it}")));
        }
        let mean = mean_grads(&parts);
        if mean.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(alloc::format!("non-finite gradient at iteration {it}")));
        }
        opt.step(model.params_mut(), &mean)?;
        on_iter(it, loss);
        curve.push(loss);
    }
    Ok(curve)
}
