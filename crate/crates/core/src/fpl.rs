//! Fine (segment-level) pseudo-labels.
//!
//! A Gaussian null model is fitted to the segment representations of every
//! coarsely-normal video. Inside each coarsely-anomalous video the segments
//! are scored by their null density and the contiguous window of length
//! `ceil(beta * m)` with the lowest mean density is marked anomalous.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpl::CoarseLabels;
use crate::error::{Error, Result};
use crate::features::{read_json, segment_norm, write_json, FeatureBundle, VideoRecord};

/// Added to the null covariance diagonal.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Maps a segment feature to the low-dimensional vector the null model sees.
pub trait SegmentRepresentation: Sync {
    fn dim(&self) -> usize;
    fn represent(&self, f: &[f32]) -> Vec<f64>;
}

/// Feature magnitude: `z = [||f||_2]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct L2Norm;

impl SegmentRepresentation for L2Norm {
    fn dim(&self) -> usize {
        1
    }

    fn represent(&self, f: &[f32]) -> Vec<f64> {
        vec![segment_norm(f)]
    }
}

pub fn segment_representation(f: &[f32]) -> Vec<f64> {
    L2Norm.represent(f)
}

/// Gaussian `N(gamma, sigma)` over segment representations.
#[derive(Clone, Debug, PartialEq)]
pub struct NullModel {
    gamma: Vec<f64>,
    sigma: Vec<f64>,
    chol: Vec<f64>,
}

impl NullModel {
    /// `sigma` is row-major `dim × dim` and must be symmetric positive-definite.
    pub fn new(gamma: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let d = gamma.len();
        if d == 0 || sigma.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: sigma.len(),
                context: "null model covariance".into(),
            });
        }
        let chol = cholesky(&sigma, d).ok_or_else(|| {
            Error::DegenerateSplit("null covariance is not positive-definite".into())
        })?;
        Ok(Self { gamma, sigma, chol })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Squared Mahalanobis distance from `gamma`.
    pub fn mahalanobis2(&self, z: &[f64]) -> f64 {
        let d = self.dim();
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut acc = z[i] - self.gamma[i];
            for k in 0..i {
                acc -= self.chol[i * d + k] * y[k];
            }
            y[i] = acc / self.chol[i * d + i];
        }
        y.iter().map(|v| v * v).sum()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let d = self.dim();
        let log_det: f64 = (0..d).map(|i| 2.0 * self.chol[i * d + i].ln()).sum();
        -0.5 * self.mahalanobis2(z) - 0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * log_det
    }
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// The null-model density at `z`. This is what the labeling stage calls a
/// "p-value": smaller means less plausible under the normal hypothesis.
pub fn p_value(model: &NullModel, z: &[f64]) -> f64 {
    model.log_density(z).exp()
}

/// Fit the null model with the default feature-magnitude representation.
pub fn fit_null_model(bundle: &FeatureBundle, coarse: &CoarseLabels) -> Result<NullModel> {
    fit_null_model_with(bundle, coarse, &L2Norm)
}

pub fn fit_null_model_with(
    bundle: &FeatureBundle,
    coarse: &CoarseLabels,
    repr: &dyn SegmentRepresentation,
) -> Result<NullModel> {
    let d = repr.dim();
    let mut zs: Vec<Vec<f64>> = Vec::new();
    for v in bundle.videos() {
        if coarse_label(coarse, v)? == 0 {
            zs.extend(v.segments().map(|f| repr.represent(f)));
        }
    }
    let m0 = zs.len();
    if m0 < 2 {
        return Err(Error::InsufficientData(format!(
            "null model needs at least 2 segments from normal videos, got {m0}"
        )));
    }
    let mut gamma = vec![0.0; d];
    for z in &zs {
        for (g, v) in gamma.iter_mut().zip(z) {
            *g += v;
        }
    }
    gamma.iter_mut().for_each(|g| *g /= m0 as f64);
    let mut sigma = vec![0.0; d * d];
    for z in &zs {
        for i in 0..d {
            for j in 0..d {
                sigma[i * d + j] += (z[i] - gamma[i]) * (z[j] - gamma[j]);
            }
        }
    }
    for (idx, s) in sigma.iter_mut().enumerate() {
        *s /= (m0 - 1) as f64;
        if idx % (d + 1) == 0 {
            *s += VARIANCE_FLOOR;
        }
    }
    NullModel::new(gamma, sigma)
}

fn coarse_label(coarse: &CoarseLabels, v: &VideoRecord) -> Result<u8> {
    coarse
        .label(v.id())
        .ok_or_else(|| Error::LabelMismatch(format!("no coarse label for video {}", v.id())))
}

/// Per-segment null densities of one video, in temporal order.
pub fn segment_p_values(
    model: &NullModel,
    video: &VideoRecord,
    repr: &dyn SegmentRepresentation,
) -> Vec<f64> {
    video
        .segments()
        .map(|f| p_value(model, &repr.represent(f)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    /// 0-indexed first segment.
    pub start: usize,
    pub length: usize,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "beta must lie in (0, 1), got {beta}"
        )))
    }
}

/// `ceil(beta * m)` clamped to `[1, m]`. Products within 1e-9 of an integer
/// are snapped first so that e.g. `0.1 * 30` yields 3, not 4.
pub fn window_length(m: usize, beta: f64) -> usize {
    let x = beta * m as f64;
    let w = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    };
    (w as usize).clamp(1, m.max(1))
}

/// Window of length `ceil(beta * m)` with the smallest mean p-value; ties go
/// to the earliest start.
pub fn select_window(p_values: &[f64], beta: f64) -> Result<Window> {
    check_beta(beta)?;
    let m = p_values.len();
    if m == 0 {
        return Err(Error::InsufficientData(
            "cannot select a window in an empty video".into(),
        ));
    }
    let w = window_length(m, beta);
    let mut prefix = Vec::with_capacity(m + 1);
    prefix.push(0.0f64);
    let mut acc = 0.0;
    for &p in p_values {
        acc += p;
        prefix.push(acc);
    }
    let sums: Vec<f64> = (0..=m - w).map(|l| prefix[l + w] - prefix[l]).collect();
    let best = sums.iter().copied().fold(f64::INFINITY, f64::min);
    // Prefix differences carry rounding error; windows that land within it of
    // the best are re-summed directly so near-ties resolve exactly.
    let slack = 4.0 * (m as f64 + 1.0) * f64::EPSILON * prefix[m].abs();
    let mut chosen: Option<(usize, f64)> = None;
    for (l, &s) in sums.iter().enumerate() {
        if s <= best + slack {
            let exact: f64 = p_values[l..l + w].iter().sum();
            if chosen.is_none_or(|(_, b)| exact < b) {
                chosen = Some((l, exact));
            }
        }
    }
    let (start, _) = chosen.expect("at least one window");
    Ok(Window { start, length: w })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoFineLabels {
    pub video_id: String,
    /// Coarse (video-level) label.
    pub label: u8,
    pub window_start: Option<usize>,
    pub window_length: Option<usize>,
    pub segment_labels: Vec<u8>,
}

impl VideoFineLabels {
    pub fn window(&self) -> Option<Window> {
        match (self.window_start, self.window_length) {
            (Some(start), Some(length)) => Some(Window { start, length }),
            _ => None,
        }
    }
}

/// Segment-level labels for every video, in bundle order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineLabels {
    pub videos: Vec<VideoFineLabels>,
}

impl FineLabels {
    /// Labels without windows: every segment of a video gets its video label
    /// unless explicit segment labels are given.
    pub fn from_segment_labels(entries: Vec<(String, u8, Vec<u8>)>) -> Self {
        Self {
            videos: entries
                .into_iter()
                .map(|(video_id, label, segment_labels)| VideoFineLabels {
                    video_id,
                    label,
                    window_start: None,
                    window_length: None,
                    segment_labels,
                })
                .collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&VideoFineLabels> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    /// Check that the labels cover `bundle` exactly, in order.
    pub fn check_against(&self, bundle: &FeatureBundle) -> Result<()> {
        if self.videos.len() != bundle.len() {
            return Err(Error::LabelMismatch(format!(
                "{} labeled videos for a bundle of {}",
                self.videos.len(),
                bundle.len()
            )));
        }
        for (lab, v) in self.videos.iter().zip(bundle.videos()) {
            if lab.video_id != v.id() {
                return Err(Error::LabelMismatch(format!(
                    "expected video {}, found {}",
                    v.id(),
                    lab.video_id
                )));
            }
            if lab.segment_labels.len() != v.num_segments() {
                return Err(Error::LabelMismatch(format!(
                    "video {} has {} segments but {} labels",
                    v.id(),
                    v.num_segments(),
                    lab.segment_labels.len()
                )));
            }
            if lab.segment_labels.iter().any(|&l| l > 1) {
                return Err(Error::LabelMismatch(format!(
                    "non-binary label in video {}",
                    v.id()
                )));
            }
        }
        Ok(())
    }

    /// All segment labels flattened in bundle order.
    pub fn flat(&self) -> Vec<u8> {
        self.videos
            .iter()
            .flat_map(|v| v.segment_labels.iter().copied())
            .collect()
    }

    pub fn num_positive(&self) -> usize {
        self.videos
            .iter()
            .map(|v| v.segment_labels.iter().filter(|&&l| l == 1).count())
            .sum()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }
}

pub fn generate_fine_labels(
    bundle: &FeatureBundle,
    coarse: &CoarseLabels,
    beta: f64,
) -> Result<FineLabels> {
    generate_fine_labels_with(bundle, coarse, beta, &L2Norm)
}

pub fn generate_fine_labels_with(
    bundle: &FeatureBundle,
    coarse: &CoarseLabels,
    beta: f64,
    repr: &dyn SegmentRepresentation,
) -> Result<FineLabels> {
    check_beta(beta)?;
    let model = fit_null_model_with(bundle, coarse, repr)?;
    let videos = bundle
        .videos()
        .par_iter()
        .map(|v| {
            let label = coarse_label(coarse, v)?;
            let m = v.num_segments();
            if label == 0 {
                return Ok(VideoFineLabels {
                    video_id: v.id().to_owned(),
                    label,
                    window_start: None,
                    window_length: None,
                    segment_labels: vec![0; m],
                });
            }
            let p = segment_p_values(&model, v, repr);
            let win = select_window(&p, beta)?;
            let mut segment_labels = vec![0; m];
            segment_labels[win.start..win.start + win.length].fill(1);
            Ok(VideoFineLabels {
                video_id: v.id().to_owned(),
                label,
                window_start: Some(win.start),
                window_length: Some(win.length),
                segment_labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FineLabels { videos })
}

/// Diagnostic only: segments of coarsely-anomalous videos whose null density
/// falls below `alpha`. Not used for labeling.
pub fn alpha_report(
    bundle: &FeatureBundle,
    coarse: &CoarseLabels,
    model: &NullModel,
    alpha: f64,
) -> Result<Vec<(String, usize, f64)>> {
    let mut out = Vec::new();
    for v in bundle.videos() {
        if coarse_label(coarse, v)? == 1 {
            for (j, p) in segment_p_values(model, v, &L2Norm).into_iter().enumerate() {
                if p < alpha {
                    out.push((v.id().to_owned(), j, p));
                }
            }
        }
    }
    Ok(out)
}

/// CSV of `video_id,segment_index,z,p_value,label` for every segment of every
/// coarsely-anomalous video.
pub fn write_p_value_csv(
    bundle: &FeatureBundle,
    coarse: &CoarseLabels,
    fine: &FineLabels,
    model: &NullModel,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["video_id", "segment_index", "z", "p_value", "label"])?;
    for (v, lab) in bundle.videos().iter().zip(&fine.videos) {
        if coarse_label(coarse, v)? != 1 {
            continue;
        }
        for (j, f) in v.segments().enumerate() {
            let z = L2Norm.represent(f)[0];
            w.write_record([
                v.id().to_owned(),
                j.to_string(),
                z.to_string(),
                p_value(model, &[z]).to_string(),
                lab.segment_labels[j].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
