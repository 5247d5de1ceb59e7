//! Inference driver: label maps, optional routing dumps, timing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use tsn_core::model::{InferOptions, Model, VideoOutput};
use tsn_core::synth::rgb_tensor;
use tsn_core::Tensor;

use crate::checkpoint::load_checkpoint;
use crate::corpus::{is_video_dir, list_videos, mask_file, read_frames, read_maps};
use crate::error::{Result, TsnError};
use crate::pnm::write_pgm;

/// Which affinity inference uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retrieval {
    /// Whatever the checkpoint's settings say.
    Configured,
    TopK(usize),
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferSettings {
    pub retrieval: Retrieval,
    pub dump_routing: bool,
    pub first_frame_only: bool,
}

impl Default for InferSettings {
    fn default() -> Self {
        InferSettings {
            retrieval: Retrieval::Configured,
            dump_routing: false,
            first_frame_only: false,
        }
    }
}

impl InferSettings {
    pub fn options(&self, model: &Model<f32>) -> InferOptions {
        let topk = match self.retrieval {
            Retrieval::Configured => model.inference_topk(),
            Retrieval::TopK(k) => Some(k),
            Retrieval::Dense => None,
        };
        InferOptions {
            topk,
            first_frame_only: self.first_frame_only,
        }
    }
}

/// Wall-clock cost of one video.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub video: String,
    pub frames: usize,
    pub seconds: f64,
    pub fps: f64,
}

/// File name of the routing map of `object` at frame `t`.
pub fn routing_file(t: usize, object: usize) -> String {
    format!("routing_{t:03}_obj{object}.pgm")
}

/// Gray levels `⌊255·W⌋` of a routing map.
pub fn routing_gray(w: &Tensor<f32>) -> Vec<u8> {
    w.data().iter().map(|&v| (255.0 * v as f64).floor().clamp(0.0, 255.0) as u8).collect()
}

/// Runs the model over the video in `dir`.
pub fn infer_video_dir(model: &Model<f32>, dir: &Path, settings: &InferSettings) -> Result<(VideoOutput<f32>, usize, usize)> {
    let (frames, h, w) = read_frames(dir)?;
    if !dir.join(mask_file(0)).exists() {
        return Err(TsnError::Input(format!("{}: missing first-frame annotation {}", dir.display(), mask_file(0))));
    }
    let first = read_maps(dir, 1, h, w, mask_file)?.remove(0);
    let tensors: Vec<Tensor<f32>> = frames.iter().map(|f| rgb_tensor(f, h, w)).collect();
    let out = model.infer_video(&tensors, &first, settings.options(model))?;
    Ok((out, h, w))
}

pub fn write_prediction(out_dir: &Path, pred: &VideoOutput<f32>, h: usize, w: usize, dump_routing: bool) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| TsnError::io(out_dir, e))?;
    for (t, labels) in pred.labels.iter().enumerate() {
        write_pgm(&out_dir.join(mask_file(t)), labels, w, h)?;
    }
    if dump_routing {
        let (gh, gw) = pred.grid;
        for (t, maps) in pred.routing.iter().enumerate() {
            for (map, &id) in maps.iter().zip(&pred.objects) {
                write_pgm(&out_dir.join(routing_file(t, id)), &routing_gray(map), gw, gh)?;
            }
        }
    }
    Ok(())
}

fn one(model: &Model<f32>, dir: &Path, out: &Path, settings: &InferSettings) -> Result<Timing> {
    let start = Instant::now();
    let (pred, h, w) = infer_video_dir(model, dir, settings)?;
    let seconds = start.elapsed().as_secs_f64();
    write_prediction(out, &pred, h, w, settings.dump_routing)?;
    let frames = pred.labels.len();
    Ok(Timing {
        video: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        frames,
        seconds,
        fps: frames as f64 / seconds.max(1e-9),
    })
}

#[derive(Debug, Serialize)]
struct TimingReport<'a> {
    frames: usize,
    seconds: f64,
    fps: f64,
    videos: &'a [Timing],
}

/// The `infer` command. `video` is a single video directory or a corpus of
/// them; a corpus yields one output subdirectory per video. The timing
/// report goes to `timing.json` in `out`.
pub fn run(ckpt: &Path, video: &Path, out: &Path, settings: &InferSettings) -> Result<Vec<Timing>> {
    let model: Model<f32> = load_checkpoint(ckpt)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if is_video_dir(video) {
        vec![(video.to_path_buf(), out.to_path_buf())]
    } else {
        let dirs = list_videos(video)?;
        if dirs.is_empty() {
            return Err(TsnError::Input(format!("{}: neither a video nor a corpus", video.display())));
        }
        dirs.into_iter()
            .map(|d| {
                let name = d.file_name().expect("listed directory").to_owned();
                (d, out.join(name))
            })
            .collect()
    };
    let timings: Vec<Timing> = jobs.par_iter().map(|(d, o)| one(&model, d, o, settings)).collect::<Result<_>>()?;
    let frames = timings.iter().map(|t| t.frames).sum();
    let seconds = timings.iter().map(|t| t.seconds).sum::<f64>();
    let report = TimingReport {
        frames,
        seconds,
        fps: frames as f64 / seconds.max(1e-9),
        videos: &timings,
    };
    let path = out.join("timing.json");
    let json = serde_json::to_string_pretty(&report).expect("timing serializes");
    std::fs::write(&path, json + "\n").map_err(|e| TsnError::io(&path, e))?;
    Ok(timings)
}
