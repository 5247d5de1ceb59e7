//! On-disk corpus layout. Each video is a directory
//!
//! ```text
//! video_0000/
//!   manifest.json        {seed, cfg, T, objects, reveal_frame}
//!   frame_000.ppm ...    RGB frames
//!   mask_000.pgm ...     label maps, object id as gray level
//!   emergent_000.pgm ... 255 where the pixel is emergent
//! ```
//!
//! Prediction directories written by inference use the same `mask_*` names.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tsn_core::synth::{gen_corpus_video, SynthConfig, VideoSample};

use crate::error::{Result, TsnError};
use crate::pnm::{read_pgm, read_ppm, write_pgm, write_ppm, Raster};

pub const MANIFEST: &str = "manifest.json";

pub fn video_dir_name(index: usize) -> String {
    format!("video_{index:04}")
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:03}.ppm")
}

pub fn mask_file(t: usize) -> String {
    format!("mask_{t:03}.pgm")
}

pub fn emergent_file(t: usize) -> String {
    format!("emergent_{t:03}.pgm")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    pub frames: usize,
    pub size: usize,
    pub objects: usize,
    pub mode: String,
    pub reveal_frame: Option<usize>,
}

impl From<&SynthConfig> for SynthSettings {
    fn from(c: &SynthConfig) -> Self {
        SynthSettings {
            frames: c.frames,
            size: c.size,
            objects: c.objects,
            mode: c.mode.name().to_string(),
            reveal_frame: c.reveal_frame,
        }
    }
}

impl SynthSettings {
    pub fn to_config(&self) -> tsn_core::Result<SynthConfig> {
        let cfg = SynthConfig {
            frames: self.frames,
            size: self.size,
            objects: self.objects,
            mode: self.mode.parse()?,
            reveal_frame: self.reveal_frame,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub seed: u64,
    pub cfg: SynthSettings,
    #[serde(rename = "T")]
    pub frames: usize,
    pub objects: usize,
    pub reveal_frame: usize,
}

pub fn save_video(dir: &Path, v: &VideoSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TsnError::io(dir, e))?;
    let manifest = VideoManifest {
        seed: v.seed,
        cfg: (&v.config).into(),
        frames: v.len(),
        objects: v.objects,
        reveal_frame: v.reveal_frame,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| TsnError::io(&path, e))?;
    for t in 0..v.len() {
        write_ppm(&dir.join(frame_file(t)), &v.frames[t], v.width, v.height)?;
        write_pgm(&dir.join(mask_file(t)), &v.labels[t], v.width, v.height)?;
        let flags: Vec<u8> = v.emergent[t].iter().map(|&e| if e { 255 } else { 0 }).collect();
        write_pgm(&dir.join(emergent_file(t)), &flags, v.width, v.height)?;
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<VideoManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| TsnError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| TsnError::format(&path, e.to_string()))
}

fn check_size(path: &Path, r: &Raster, h: usize, w: usize) -> Result<()> {
    if (r.height, r.width) != (h, w) {
        return Err(TsnError::format(path, format!("{}×{} image, expected {h}×{w}", r.height, r.width)));
    }
    Ok(())
}

/// All `frame_*.ppm` of a directory, from 0 up to the first missing index,
/// as `(rgb frames, height, width)`.
pub fn read_frames(dir: &Path) -> Result<(Vec<Vec<u8>>, usize, usize)> {
    let mut frames = Vec::new();
    let mut hw = None;
    loop {
        let path = dir.join(frame_file(frames.len()));
        if !path.exists() {
            break;
        }
        let r = read_ppm(&path)?;
        let (h, w) = *hw.get_or_insert((r.height, r.width));
        check_size(&path, &r, h, w)?;
        frames.push(r.data);
    }
    let (h, w) = hw.ok_or_else(|| TsnError::Input(format!("{}: no frames (expected {})", dir.display(), frame_file(0))))?;
    Ok((frames, h, w))
}

/// Reads `count` graymaps named by `name` from `dir`.
pub fn read_maps(dir: &Path, count: usize, h: usize, w: usize, name: fn(usize) -> String) -> Result<Vec<Vec<u8>>> {
    (0..count)
        .map(|t| {
            let path = dir.join(name(t));
            let r = read_pgm(&path)?;
            check_size(&path, &r, h, w)?;
            Ok(r.data)
        })
        .collect()
}

/// Loads a generated video with its ground truth.
pub fn load_video(dir: &Path) -> Result<VideoSample> {
    let m = read_manifest(dir)?;
    let config = m.cfg.to_config().map_err(|e| TsnError::format(dir.join(MANIFEST), e.to_string()))?;
    let (frames, height, width) = read_frames(dir)?;
    if frames.len() != m.frames {
        return Err(TsnError::format(dir, format!("{} frames on disk, manifest says {}", frames.len(), m.frames)));
    }
    let labels = read_maps(dir, m.frames, height, width, mask_file)?;
    let emergent = read_maps(dir, m.frames, height, width, emergent_file)?
        .into_iter()
        .map(|f| f.into_iter().map(|v| v > 0).collect())
        .collect();
    Ok(VideoSample {
        seed: m.seed,
        config,
        height,
        width,
        objects: m.objects,
        frames,
        labels,
        emergent,
        offsets: Vec::new(),
        reveal_frame: m.reveal_frame,
    })
}

/// Whether `dir` is a single video (as opposed to a corpus of videos).
pub fn is_video_dir(dir: &Path) -> bool {
    dir.join(frame_file(0)).exists()
}

/// Subdirectories of `dir` that contain `marker`, sorted by name.
pub fn list_dirs_with(dir: &Path, marker: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| TsnError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| TsnError::io(dir, e))?.path();
        if path.is_dir() && path.join(marker).exists() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Video subdirectories of a corpus, sorted by name.
pub fn list_videos(dir: &Path) -> Result<Vec<PathBuf>> {
    list_dirs_with(dir, &frame_file(0))
}

pub fn load_corpus(dir: &Path) -> Result<Vec<VideoSample>> {
    let dirs = list_videos(dir)?;
    if dirs.is_empty() {
        return Err(TsnError::Input(format!("{}: no videos found", dir.display())));
    }
    dirs.par_iter().map(|d| load_video(d)).collect()
}

/// Generates and writes `videos` videos under `out`, returning their
/// directories.
pub fn generate_corpus(out: &Path, seed: u64, videos: usize, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| TsnError::io(out, e))?;
    (0..videos)
        .into_par_iter()
        .map(|i| {
            let dir = out.join(video_dir_name(i));
            save_video(&dir, &gen_corpus_video(seed, i, cfg)?)?;
            Ok(dir)
        })
        .collect()
}
