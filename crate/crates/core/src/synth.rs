//! Synthetic bundles with planted ground truth.
//!
//! Segment features are `norm × direction` with directions drawn uniformly
//! from the non-negative orthant of the unit sphere (like post-ReLU
//! features). Norms are drawn from `Normal(normal_mean, normal_std)`.
//! Segments inside the planted window of an anomalous video get their mean
//! shifted by `anomaly_shift × normal_std`; the remaining segments of an
//! anomalous video are shifted by `baseline_shift × normal_std`, modelling
//! footage whose ordinary content differs from that of normal videos.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_json, write_json, FeatureBundle, TruthManifest, VideoRecord};
use crate::fpl::window_length;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub anomaly_video_fraction: f64,
    pub d: usize,
    pub m_min: usize,
    pub m_max: usize,
    /// Explicit segment count per video. When non-empty it fixes both the
    /// number of videos and their lengths, overriding `n_videos` and the
    /// `m_min..=m_max` range.
    pub segment_counts: Vec<usize>,
    pub frames_per_segment: u32,
    pub normal_mean: f64,
    pub normal_std: f64,
    /// In units of `normal_std`.
    pub anomaly_shift: f64,
    pub window_fraction: f64,
    /// Shift of the non-window segments of anomalous videos, in units of
    /// `normal_std`.
    pub baseline_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 200,
            anomaly_video_fraction: 0.5,
            d: 32,
            m_min: 12,
            m_max: 36,
            segment_counts: Vec::new(),
            frames_per_segment: 16,
            normal_mean: 10.0,
            normal_std: 1.0,
            anomaly_shift: 6.0,
            window_fraction: 0.2,
            baseline_shift: -1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(format!("synth config: {what}")));
        if (self.n_videos == 0 && self.segment_counts.is_empty())
            || self.d == 0
            || self.frames_per_segment == 0
        {
            return bad("n_videos, d and frames_per_segment must be positive".into());
        }
        if !(0.0..1.0).contains(&self.anomaly_video_fraction) {
            return bad(format!(
                "anomaly_video_fraction {} outside [0, 1)",
                self.anomaly_video_fraction
            ));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction < 1.0) {
            return bad(format!(
                "window_fraction {} outside (0, 1)",
                self.window_fraction
            ));
        }
        if !(self.anomaly_shift > 0.0 && self.anomaly_shift.is_finite()) {
            return bad("anomaly_shift must be positive".into());
        }
        if !(self.normal_std > 0.0 && self.normal_mean.is_finite() && self.normal_std.is_finite()) {
            return bad("normal_std must be positive".into());
        }
        if self.m_min < 2 || self.m_max < self.m_min {
            return bad(format!(
                "segment range [{}, {}] invalid (m_min >= 2)",
                self.m_min, self.m_max
            ));
        }
        if self.segment_counts.iter().any(|&m| m < 2) {
            return bad("segment_counts entries must be >= 2".into());
        }
        if !self.baseline_shift.is_finite() {
            return bad("baseline_shift must be finite".into());
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let c: Self = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }
}

fn orthant_direction<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                g.abs()
            })
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generate a bundle and its ground truth (video, segment and frame labels).
pub fn generate(config: &SynthConfig) -> Result<(FeatureBundle, TruthManifest)> {
    config.validate()?;
    let mut rng = seed::rng(seed::derive_seed(config.seed, "synth"));
    let d = config.d;
    let n_videos = if config.segment_counts.is_empty() {
        config.n_videos
    } else {
        config.segment_counts.len()
    };
    let n_anom = (n_videos as f64 * config.anomaly_video_fraction).round() as usize;
    let mut is_anomalous: Vec<bool> = (0..n_videos).map(|i| i < n_anom).collect();
    is_anomalous.shuffle(&mut rng);

    let normal_norm = Normal::new(config.normal_mean, config.normal_std).expect("validated std");
    let anomaly_norm = Normal::new(
        config.normal_mean + config.anomaly_shift * config.normal_std,
        config.normal_std,
    )
    .expect("validated std");
    let baseline_norm = Normal::new(
        config.normal_mean + config.baseline_shift * config.normal_std,
        config.normal_std,
    )
    .expect("validated std");

    let r = config.frames_per_segment as usize;
    let mut videos = Vec::with_capacity(n_videos);
    let mut truth = TruthManifest::default();
    for (i, &anomalous) in is_anomalous.iter().enumerate() {
        let id = format!("vid_{i:05}");
        let m = match config.segment_counts.get(i) {
            Some(&m) => m,
            None => rng.gen_range(config.m_min..=config.m_max),
        };
        let mut seg_labels = vec![0u8; m];
        if anomalous {
            let w = window_length(m, config.window_fraction);
            let start = rng.gen_range(0..=m - w);
            seg_labels[start..start + w].fill(1);
        }
        let mut features = Vec::with_capacity(m * d);
        for &label in &seg_labels {
            let dist = match (anomalous, label) {
                (_, 1) => &anomaly_norm,
                (true, _) => &baseline_norm,
                (false, _) => &normal_norm,
            };
            let norm = dist.sample(&mut rng).max(0.0);
            let dir = orthant_direction(d, &mut rng);
            features.extend(dir.iter().map(|x| (x * norm) as f32));
        }
        videos.push(VideoRecord::new(
            id.clone(),
            d,
            config.frames_per_segment,
            features,
        )?);
        truth.video_labels.insert(id.clone(), u8::from(anomalous));
        truth.frame_labels.insert(
            id.clone(),
            seg_labels
                .iter()
                .flat_map(|&l| std::iter::repeat_n(l, r))
                .collect(),
        );
        truth.segment_labels.insert(id, seg_labels);
    }
    let bundle = FeatureBundle::new(d, videos, format!("synth:seed={}", config.seed))?;
    Ok((bundle, truth))
}

/// Ground-truth video labels keyed by id, for the supervised ablations.
pub fn video_labels(truth: &TruthManifest, bundle: &FeatureBundle) -> Result<BTreeMap<String, u8>> {
    bundle
        .videos()
        .iter()
        .map(|v| {
            truth
                .video_label(v.id())
                .map(|l| (v.id().to_owned(), l))
                .ok_or_else(|| {
                    Error::LabelMismatch(format!("no ground truth for video {}", v.id()))
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::segment_norm;

    fn small() -> SynthConfig {
        SynthConfig {
            n_videos: 30,
            d: 8,
            m_min: 5,
            m_max: 15,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shapes_and_truth_are_consistent() {
        let cfg = small();
        let (b, t) = generate(&cfg).unwrap();
        assert_eq!(b.len(), 30);
        assert_eq!(t.video_labels.values().filter(|&&l| l == 1).count(), 15);
        for v in b.videos() {
            assert!((5..=15).contains(&v.num_segments()));
            assert!(v.features().iter().all(|&x| x >= 0.0));
            let segs = &t.segment_labels[v.id()];
            let frames = &t.frame_labels[v.id()];
            assert_eq!(segs.len(), v.num_segments());
            assert_eq!(frames.len(), v.num_frames());
            for (j, &l) in segs.iter().enumerate() {
                assert!(frames[j * 16..(j + 1) * 16].iter().all(|&f| f == l));
            }
            let ones: Vec<usize> = (0..segs.len()).filter(|&j| segs[j] == 1).collect();
            if t.video_labels[v.id()] == 1 {
                assert_eq!(ones.len(), window_length(segs.len(), 0.2));
                assert_eq!(
                    ones.last().unwrap() - ones[0] + 1,
                    ones.len(),
                    "window not contiguous"
                );
            } else {
                assert!(ones.is_empty());
            }
        }
    }

    #[test]
    fn no_anomalies_when_fraction_is_zero() {
        let cfg = SynthConfig {
            anomaly_video_fraction: 0.0,
            ..small()
        };
        let (_, t) = generate(&cfg).unwrap();
        assert!(t.segment_labels.values().flatten().all(|&l| l == 0));
    }

    #[test]
    fn same_seed_same_bundle() {
        let (a, ta) = generate(&small()).unwrap();
        let (b, tb) = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn planted_segments_are_louder() {
        let cfg = SynthConfig::default();
        let (b, t) = generate(&cfg).unwrap();
        let (mut normal, mut anomalous) = (Vec::new(), Vec::new());
        for v in b.videos() {
            for (seg, &l) in v.segments().zip(&t.segment_labels[v.id()]) {
                if l == 1 {
                    anomalous.push(segment_norm(seg));
                } else {
                    normal.push(segment_norm(seg));
                }
            }
        }
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean(&anomalous) - mean(&normal) >= 4.0 * cfg.normal_std);
    }

    #[test]
    fn validation() {
        assert!(generate(&SynthConfig {
            m_min: 1,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            anomaly_shift: 0.0,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            window_fraction: 1.0,
            ..small()
        })
        .is_err());
        let c: SynthConfig = serde_json::from_str(r#"{"n_videos": 7}"#).unwrap();
        assert_eq!(c.n_videos, 7);
        assert_eq!(c.d, SynthConfig::default().d);
    }
}
