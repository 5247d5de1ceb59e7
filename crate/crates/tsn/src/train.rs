//! Training driver: corpus in, checkpoint and loss curve out.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tsn_core::model::Model;
use tsn_core::optim::poly_lr;
use tsn_core::synth::{TrainingClip, VideoSample};
use tsn_core::training::{self, BatchGrads};
use tsn_core::ModelConfig;

use crate::checkpoint::save_checkpoint;
use crate::config_file::load_model_config;
use crate::corpus::load_corpus;
use crate::error::{Result, TsnError};

/// Clips of a batch evaluated concurrently; results keep clip order, so
/// the averaged gradient is the same as with sequential evaluation.
pub fn parallel_grads(model: &Model<f32>, clips: &[TrainingClip<f32>], bootstrap: f64) -> tsn_core::Result<BatchGrads<f32>> {
    clips.par_iter().map(|c| model.clip_grads(c, bootstrap)).collect()
}

/// Trains a fresh model for `cfg` and returns it with its loss curve.
pub fn train_model(cfg: ModelConfig, videos: &[VideoSample], on_iter: impl FnMut(usize, f64)) -> Result<(Model<f32>, Vec<f64>)> {
    if let Some(v) = videos.iter().find(|v| v.height != cfg.image_size || v.width != cfg.image_size) {
        return Err(TsnError::Input(format!(
            "corpus has {}×{} videos but image_size is {}",
            v.height, v.width, cfg.image_size
        )));
    }
    let mut model = Model::new(cfg)?;
    let curve = training::train(&mut model, videos, parallel_grads, on_iter)?;
    Ok((model, curve))
}

/// `iteration,lr,loss` rows; `lr` is the rate used for that iteration.
pub fn write_loss_csv(path: &Path, cfg: &ModelConfig, curve: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TsnError::format(path, e.to_string()))?;
    let o = &cfg.optim;
    let mut write = || -> csv::Result<()> {
        w.write_record(["iteration", "lr", "loss"])?;
        for (i, loss) in curve.iter().enumerate() {
            let lr = poly_lr(o.lr, i, o.iterations, o.poly_power);
            w.write_record([i.to_string(), format!("{lr:?}"), format!("{loss:?}")])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| TsnError::format(path, e.to_string()))
}

/// Where the loss curve of checkpoint `ckpt` goes.
pub fn loss_csv_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

/// The `train` command.
pub fn run(corpus: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = load_model_config(config)?;
    let videos = load_corpus(corpus)?;
    let total = cfg.optim.iterations;
    let every = (total / 20).max(1);
    let mut err = std::io::stderr();
    let (model, curve) = train_model(cfg, &videos, |it, loss| {
        if it % every == 0 || it + 1 == total {
            let _ = writeln!(err, "iteration {it:>6}/{total}  loss {loss:.5}");
        }
    })?;
    save_checkpoint(out, &model)?;
    write_loss_csv(&loss_csv_path(out), model.config(), &curve)?;
    Ok(())
}
