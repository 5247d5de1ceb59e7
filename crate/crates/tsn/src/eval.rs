//! Scoring predictions against ground truth.
//!
//! Frame 0 is the given annotation and is not scored. Per object, J, F and
//! J_emergent are averaged over its frames (J_emergent only over frames
//! with emergent pixels of that object); corpus means average the objects.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use tsn_core::metrics::{jf_mean, score_frame, summarize, FrameScore};

use crate::corpus::{emergent_file, list_dirs_with, mask_file, read_maps, MANIFEST};
use crate::pnm::read_pgm;
use crate::error::{Result, TsnError};

/// One CSV row: an object's scores in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub video_id: String,
    pub object_id: usize,
    pub frame: usize,
    pub j: f64,
    pub f: f64,
    /// `None` when the object has no emergent pixel in this frame.
    pub j_emergent: Option<f64>,
}

/// Corpus means.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorpusSummary {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    /// Mean over objects that have any emergent frame.
    pub j_emergent: Option<f64>,
    pub objects: usize,
}

/// Label maps and emergent flags of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    /// Object ids run from 1 to `objects`.
    pub objects: usize,
    pub labels: Vec<Vec<u8>>,
    pub emergent: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn count_maps(dir: &Path, name: fn(usize) -> String) -> usize {
    (0..).take_while(|&t| dir.join(name(t)).exists()).count()
}

/// Reads `mask_*.pgm` and, where present, `emergent_*.pgm` from `dir`. The
/// object count comes from the manifest when there is one, otherwise from
/// the largest label.
pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let n = count_maps(dir, mask_file);
    if n == 0 {
        return Err(TsnError::Input(format!("{}: no ground-truth masks", dir.display())));
    }
    let first = read_pgm(&dir.join(mask_file(0)))?;
    let (height, width) = (first.height, first.width);
    let labels = read_maps(dir, n, height, width, mask_file)?;
    let emergent = if dir.join(emergent_file(0)).exists() {
        read_maps(dir, n, height, width, emergent_file)?
            .into_iter()
            .map(|f| f.into_iter().map(|v| v > 0).collect())
            .collect()
    } else {
        vec![vec![false; height * width]; n]
    };
    let manifest = dir.join(MANIFEST);
    let objects = if manifest.exists() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| TsnError::io(&manifest, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| TsnError::format(&manifest, e.to_string()))?;
        v["objects"]
            .as_u64()
            .ok_or_else(|| TsnError::format(&manifest, "missing object count"))? as usize
    } else {
        labels.iter().flatten().copied().max().unwrap_or(0) as usize
    };
    Ok(GroundTruth {
        height,
        width,
        objects,
        labels,
        emergent,
    })
}

/// Scores every object of `gt` in frames 1.. of `pred`. J_emergent of an
/// object looks only at emergent pixels of that object.
pub fn score_video(video_id: &str, pred: &[Vec<u8>], gt: &GroundTruth) -> Result<Vec<MetricRow>> {
    if pred.len() != gt.len() {
        return Err(TsnError::Input(format!("{video_id}: {} predicted frames for {} ground-truth frames", pred.len(), gt.len())));
    }
    let (h, w) = (gt.height, gt.width);
    let mut rows = Vec::new();
    for id in 1..=gt.objects {
        for t in 1..gt.len() {
            let p: Vec<bool> = pred[t].iter().map(|&l| l as usize == id).collect();
            let g: Vec<bool> = gt.labels[t].iter().map(|&l| l as usize == id).collect();
            let region: Vec<bool> = g.iter().zip(&gt.emergent[t]).map(|(&a, &b)| a && b).collect();
            let s = score_frame(&p, &g, &region, h, w)?;
            rows.push(MetricRow {
                video_id: video_id.to_string(),
                object_id: id,
                frame: t,
                j: s.j,
                f: s.f,
                j_emergent: s.j_emergent,
            });
        }
    }
    Ok(rows)
}

pub fn summarize_rows(rows: &[MetricRow]) -> CorpusSummary {
    let mut per_object: BTreeMap<(&str, usize), Vec<FrameScore>> = BTreeMap::new();
    for r in rows {
        per_object.entry((&r.video_id, r.object_id)).or_default().push(FrameScore {
            j: r.j,
            f: r.f,
            j_emergent: r.j_emergent,
        });
    }
    let sums: Vec<_> = per_object.values().map(|s| summarize(s)).collect();
    let n = sums.len();
    if n == 0 {
        return CorpusSummary::default();
    }
    let j = sums.iter().map(|s| s.j).sum::<f64>() / n as f64;
    let f = sums.iter().map(|s| s.f).sum::<f64>() / n as f64;
    let em: Vec<f64> = sums.iter().filter_map(|s| s.j_emergent).collect();
    CorpusSummary {
        j,
        f,
        jf: jf_mean(j, f),
        j_emergent: (!em.is_empty()).then(|| em.iter().sum::<f64>() / em.len() as f64),
        objects: n,
    }
}

fn eval_pair(video_id: &str, pred_dir: &Path, gt_dir: &Path) -> Result<Vec<MetricRow>> {
    let gt = load_ground_truth(gt_dir)?;
    let extra = pred_dir.join(mask_file(gt.len()));
    if extra.exists() {
        return Err(TsnError::Input(format!("{}: more predicted frames than ground truth", extra.display())));
    }
    let pred = read_maps(pred_dir, gt.len(), gt.height, gt.width, mask_file).map_err(|e| match e {
        TsnError::Io { path, .. } => TsnError::Input(format!("{}: missing prediction", path.display())),
        other => other,
    })?;
    score_video(video_id, &pred, &gt)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

/// Scores a prediction directory against a ground-truth directory, either
/// two single videos or two corpora with the same video names.
pub fn evaluate(pred: &Path, gt: &Path) -> Result<Vec<MetricRow>> {
    if gt.join(mask_file(0)).exists() {
        return eval_pair(&dir_name(gt), pred, gt);
    }
    let gts = list_dirs_with(gt, &mask_file(0))?;
    if gts.is_empty() {
        return Err(TsnError::Input(format!("{}: no ground-truth videos", gt.display())));
    }
    let preds = list_dirs_with(pred, &mask_file(0))?;
    let names = |v: &[std::path::PathBuf]| v.iter().map(|p| dir_name(p)).collect::<Vec<_>>();
    let (gn, pn) = (names(&gts), names(&preds));
    if gn != pn {
        let missing: Vec<&String> = gn.iter().filter(|n| !pn.contains(n)).collect();
        let extra: Vec<&String> = pn.iter().filter(|n| !gn.contains(n)).collect();
        return Err(TsnError::Input(format!("video inventories differ: missing {missing:?}, unexpected {extra:?}")));
    }
    let parts: Vec<Vec<MetricRow>> = gts
        .par_iter()
        .zip(&gn)
        .map(|(g, name)| eval_pair(name, &pred.join(name), g))
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TsnError::format(path, e.to_string()))?;
    let mut write = || -> csv::Result<()> {
        w.write_record(["video_id", "object_id", "frame", "J", "F", "J_emergent"])?;
        for r in rows {
            w.write_record([
                r.video_id.clone(),
                r.object_id.to_string(),
                r.frame.to_string(),
                fmt(r.j),
                fmt(r.f),
                r.j_emergent.map(fmt).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| TsnError::format(path, e.to_string()))
}

/// The `eval` command; returns the corpus means.
pub fn run(pred: &Path, gt: &Path, out: &Path) -> Result<CorpusSummary> {
    let rows = evaluate(pred, gt)?;
    write_metrics_csv(out, &rows)?;
    Ok(summarize_rows(&rows))
}
