//! Inference over a bundle, segment-to-frame expansion, and frame-level
//! ROC-AUC via the Mann–Whitney rank statistic.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::features::{read_json, write_json, FeatureBundle, TruthManifest, VideoRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredVideo {
    pub video_id: String,
    pub segment_scores: Vec<f64>,
    pub frame_scores: Vec<f64>,
}

impl ScoredVideo {
    /// Expand segment scores to frames by repeating each `r` times.
    pub fn from_segments(video_id: impl Into<String>, segment_scores: Vec<f64>, r: usize) -> Self {
        let frame_scores = segment_scores
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, r))
            .collect();
        Self {
            video_id: video_id.into(),
            segment_scores,
            frame_scores,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub num_positive: usize,
    pub num_negative: usize,
}

impl RocResult {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }
}

fn video_matrix(v: &VideoRecord) -> Array2<f64> {
    Array2::from_shape_vec(
        (v.num_segments(), v.dim()),
        v.features().iter().map(|&x| f64::from(x)).collect(),
    )
    .expect("row-major segment matrix")
}

/// Score every segment. Each video is one inference batch, which is what the
/// batch-softmax attention modes expect.
pub fn score_bundle(model: &DetectorModel, bundle: &FeatureBundle) -> Result<Vec<ScoredVideo>> {
    if bundle.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: bundle.dim(),
            context: "bundle feature width vs detector input".into(),
        });
    }
    bundle
        .videos()
        .par_iter()
        .map(|v| {
            let scores = model.score(video_matrix(v).view())?;
            Ok(ScoredVideo::from_segments(
                v.id(),
                scores.to_vec(),
                v.frames_per_segment() as usize,
            ))
        })
        .collect()
}

/// Frame label 1 iff the score is strictly above `threshold`.
pub fn threshold_frames(scored: &ScoredVideo, threshold: f64) -> Vec<u8> {
    scored
        .frame_scores
        .iter()
        .map(|&s| u8::from(s > threshold))
        .collect()
}

/// Mann–Whitney AUC with average ranks for ties, i.e.
/// `P(pos > neg) + 0.5 * P(pos == neg)`.
pub fn auc_rank(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
            context: "labels per score".into(),
        });
    }
    let num_positive = labels.iter().filter(|&&l| l != 0).count();
    let num_negative = labels.len() - num_positive;
    if num_positive == 0 || num_negative == 0 {
        return Err(Error::UndefinedAuc {
            positives: num_positive,
            negatives: num_negative,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] != 0).count();
        positive_rank_sum += avg * pos as f64;
        i = j + 1;
    }
    let p = num_positive as f64;
    let n = num_negative as f64;
    Ok(RocResult {
        auc: (positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n),
        num_positive,
        num_negative,
    })
}

/// Truth labels for a video, truncated or padded with the last label to
/// `frames` entries. Returns the labels and whether an adjustment was made.
pub fn align_truth(truth: &[u8], frames: usize) -> Option<(Vec<u8>, bool)> {
    let last = *truth.last()?;
    let mut out: Vec<u8> = truth.iter().take(frames).copied().collect();
    out.resize(frames, last);
    Some((out, truth.len() != frames))
}

/// Pooled frame-level AUC over `(video_id, frame_scores)` pairs. Returns the
/// result and a warning for every video whose truth length was adjusted.
pub fn frame_auc_from_frames<'a>(
    frames: impl IntoIterator<Item = (&'a str, &'a [f64])>,
    truth: &TruthManifest,
) -> Result<(RocResult, Vec<String>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut warnings = Vec::new();
    for (id, s) in frames {
        let t = truth
            .frame_labels
            .get(id)
            .ok_or_else(|| Error::LabelMismatch(format!("no ground truth for video {id}")))?;
        let (aligned, adjusted) = align_truth(t, s.len())
            .ok_or_else(|| Error::LabelMismatch(format!("empty ground truth for video {id}")))?;
        if adjusted {
            warnings.push(format!(
                "video {id}: truth has {} frames, scores have {}; aligned",
                t.len(),
                s.len()
            ));
        }
        scores.extend_from_slice(s);
        labels.extend(aligned);
    }
    Ok((auc_rank(&scores, &labels)?, warnings))
}

pub fn frame_auc(
    scored: &[ScoredVideo],
    truth: &TruthManifest,
) -> Result<(RocResult, Vec<String>)> {
    frame_auc_from_frames(
        scored
            .iter()
            .map(|v| (v.video_id.as_str(), v.frame_scores.as_slice())),
        truth,
    )
}

/// Per-video AUC diagnostic; `None` where a video has only one class.
pub fn per_video_auc(scored: &[ScoredVideo], truth: &TruthManifest) -> Vec<(String, Option<f64>)> {
    scored
        .iter()
        .map(|v| {
            let auc = truth
                .frame_labels
                .get(&v.video_id)
                .and_then(|t| align_truth(t, v.frame_scores.len()))
                .and_then(|(t, _)| auc_rank(&v.frame_scores, &t).ok())
                .map(|r| r.auc);
            (v.video_id.clone(), auc)
        })
        .collect()
}

/// CSV with one `video_id,frame_index,score` row per frame.
pub fn write_frame_scores_csv(scored: &[ScoredVideo], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["video_id", "frame_index", "score"])?;
    for v in scored {
        for (i, s) in v.frame_scores.iter().enumerate() {
            w.write_record([v.video_id.as_str(), &i.to_string(), &s.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a frame-score CSV back as `(video_id, frame_scores)` in file order.
pub fn read_frame_scores_csv(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<f64>)>> {
    #[derive(Deserialize)]
    struct Row {
        video_id: String,
        frame_index: usize,
        score: f64,
    }
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        if !row.score.is_finite() {
            return Err(Error::NonFinite {
                video: row.video_id,
                segment: row.frame_index,
            });
        }
        let start_new = out.last().is_none_or(|(id, _)| *id != row.video_id);
        if start_new {
            if out.iter().any(|(id, _)| *id == row.video_id) {
                return Err(Error::DuplicateId(row.video_id));
            }
            out.push((row.video_id.clone(), Vec::new()));
        }
        let frames = &mut out.last_mut().expect("pushed above").1;
        if row.frame_index != frames.len() {
            return Err(Error::LabelMismatch(format!(
                "video {}: frame index {} out of sequence",
                row.video_id, row.frame_index
            )));
        }
        frames.push(row.score);
    }
    Ok(out)
}
