//! End-to-end orchestration: coarse labels, fine labels, detector training
//! and evaluation, plus the ablation variants and parameter sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpl::{generate_coarse_labels, CoarseLabels, DEFAULT_MAX_DIVISIVE_ITERS};
use crate::detector::{train, DetectorModel, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{frame_auc, score_bundle, RocResult, ScoredVideo};
use crate::features::{summarize_bundle, write_json, FeatureBundle, TruthManifest};
use crate::fpl::{
    fit_null_model, generate_fine_labels, segment_p_values, FineLabels, L2Norm, NullModel,
};
use crate::seed;
use crate::synth::video_labels;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Coarse then fine pseudo-labels, then the detector.
    #[default]
    Full,
    /// Ground-truth video labels replace the coarse stage.
    Wscoarse,
    /// Random video labels replace the coarse stage.
    RandomVideoLabels,
    /// Coarse labels copied to every segment; no fine stage.
    CplOnly,
    /// Ground-truth video labels copied to every segment.
    WsSegments,
    /// Random segment labels.
    RandomSegmentLabels,
    /// No detector: `1 - p / max p` from the null model is the score.
    NoDetector,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::Full,
        AblationMode::Wscoarse,
        AblationMode::RandomVideoLabels,
        AblationMode::CplOnly,
        AblationMode::WsSegments,
        AblationMode::RandomSegmentLabels,
        AblationMode::NoDetector,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::Wscoarse => "wscoarse",
            AblationMode::RandomVideoLabels => "random_video_labels",
            AblationMode::CplOnly => "cpl_only",
            AblationMode::WsSegments => "ws_segments",
            AblationMode::RandomSegmentLabels => "random_segment_labels",
            AblationMode::NoDetector => "no_detector",
        }
    }

    pub fn needs_ground_truth(self) -> bool {
        matches!(self, AblationMode::Wscoarse | AblationMode::WsSegments)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s}")))
    }
}

fn default_eta() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    0.2
}
fn default_max_iters() -> usize {
    DEFAULT_MAX_DIVISIVE_ITERS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_max_iters")]
    pub max_cpl_iters: usize,
    /// `train.seed` is ignored; the training seed is derived from `seed`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mode: AblationMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            eta: default_eta(),
            beta: default_beta(),
            max_cpl_iters: default_max_iters(),
            train: TrainConfig::default(),
            mode: AblationMode::Full,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// The training config actually used, with the derived seed.
    pub fn effective_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seed::derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub coarse: Option<CoarseLabels>,
    pub fine: FineLabels,
    pub model: Option<DetectorModel>,
    pub train_config: TrainConfig,
    pub epoch_losses: Vec<f64>,
    pub scored: Vec<ScoredVideo>,
    pub roc: Option<RocResult>,
    pub timings: Vec<StageTiming>,
    pub warnings: Vec<String>,
}

/// Summary of one run for the run manifest JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub train_seed: u64,
    pub timings: Vec<StageTiming>,
    pub num_videos: usize,
    pub num_segments: usize,
    pub coarse_anomalous_videos: Option<usize>,
    pub coarse_iterations: Option<usize>,
    pub coarse_final_ratio: Option<f64>,
    pub positive_segments: usize,
    pub first_epoch_loss: Option<f64>,
    pub last_epoch_loss: Option<f64>,
    pub metrics: Option<RocResult>,
    pub warnings: Vec<String>,
}

impl PipelineOutput {
    pub fn manifest(&self, config: &PipelineConfig, bundle: &FeatureBundle) -> RunManifest {
        RunManifest {
            config: config.clone(),
            train_seed: self.train_config.seed,
            timings: self.timings.clone(),
            num_videos: bundle.len(),
            num_segments: bundle.total_segments(),
            coarse_anomalous_videos: self.coarse.as_ref().map(CoarseLabels::num_anomalous),
            coarse_iterations: self.coarse.as_ref().map(|c| c.iterations_used),
            coarse_final_ratio: self
                .coarse
                .as_ref()
                .map(|c| c.final_ratio)
                .filter(|r| r.is_finite()),
            positive_segments: self.fine.num_positive(),
            first_epoch_loss: self.epoch_losses.first().copied(),
            last_epoch_loss: self.epoch_losses.last().copied(),
            metrics: self.roc.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

impl RunManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }
}

struct Stopwatch(Vec<StageTiming>);

impl Stopwatch {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.0.push(StageTiming {
            stage: stage.to_owned(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

fn copy_video_labels(bundle: &FeatureBundle, coarse: &CoarseLabels) -> Result<FineLabels> {
    let entries = bundle
        .videos()
        .iter()
        .map(|v| {
            let l = coarse
                .label(v.id())
                .ok_or_else(|| Error::LabelMismatch(format!("no label for video {}", v.id())))?;
            Ok((v.id().to_owned(), l, vec![l; v.num_segments()]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FineLabels::from_segment_labels(entries))
}

/// Coarse labels exactly as the full pipeline computes them for `config`.
pub fn coarse_stage(bundle: &FeatureBundle, config: &PipelineConfig) -> Result<CoarseLabels> {
    let summaries = summarize_bundle(bundle)?;
    generate_coarse_labels(
        &summaries,
        config.eta,
        seed::derive_seed(config.seed, "cpl"),
        config.max_cpl_iters,
    )
}

/// `1 - p / max(p)` per segment, max taken over every segment being scored.
pub fn density_scores(model: &NullModel, bundle: &FeatureBundle) -> Vec<ScoredVideo> {
    let per_video: Vec<Vec<f64>> = bundle
        .videos()
        .par_iter()
        .map(|v| segment_p_values(model, v, &L2Norm))
        .collect();
    let max = per_video.iter().flatten().copied().fold(0.0f64, f64::max);
    bundle
        .videos()
        .iter()
        .zip(per_video)
        .map(|(v, p)| {
            let s = p
                .into_iter()
                .map(|x| if max > 0.0 { 1.0 - x / max } else { 1.0 })
                .collect();
            ScoredVideo::from_segments(v.id(), s, v.frames_per_segment() as usize)
        })
        .collect()
}

/// Run one mode end to end.
///
/// The evaluation set is `eval` when given, otherwise the training bundle
/// scored against `train_truth`. Without either, no metrics are produced.
pub fn run(
    bundle: &FeatureBundle,
    train_truth: Option<&TruthManifest>,
    eval: Option<(&FeatureBundle, &TruthManifest)>,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    if !(config.beta > 0.0 && config.beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in (0, 1), got {}",
            config.beta
        )));
    }
    let mode = config.mode;
    if mode.needs_ground_truth() && train_truth.is_none() {
        return Err(Error::MissingGroundTruth(mode.to_string()));
    }
    let mut clock = Stopwatch(Vec::new());
    let mut warnings = Vec::new();

    let coarse = match mode {
        AblationMode::Full | AblationMode::CplOnly | AblationMode::NoDetector => {
            Some(clock.time("coarse", || coarse_stage(bundle, config))?)
        }
        AblationMode::Wscoarse | AblationMode::WsSegments => {
            let truth = train_truth.expect("checked above");
            Some(CoarseLabels::from_labels(video_labels(truth, bundle)?))
        }
        AblationMode::RandomVideoLabels => {
            let mut rng = seed::rng(seed::derive_seed(config.seed, "random_video_labels"));
            Some(CoarseLabels::from_labels(
                bundle
                    .videos()
                    .iter()
                    .map(|v| (v.id().to_owned(), u8::from(rng.gen_bool(0.5))))
                    .collect(),
            ))
        }
        AblationMode::RandomSegmentLabels => None,
    };

    let fine = clock.time("fine", || match mode {
        AblationMode::Full
        | AblationMode::Wscoarse
        | AblationMode::RandomVideoLabels
        | AblationMode::NoDetector => generate_fine_labels(
            bundle,
            coarse.as_ref().expect("coarse stage ran"),
            config.beta,
        ),
        AblationMode::CplOnly | AblationMode::WsSegments => {
            copy_video_labels(bundle, coarse.as_ref().expect("coarse stage ran"))
        }
        AblationMode::RandomSegmentLabels => {
            let mut rng = seed::rng(seed::derive_seed(config.seed, "random_segment_labels"));
            Ok(FineLabels::from_segment_labels(
                bundle
                    .videos()
                    .iter()
                    .map(|v| {
                        let labels: Vec<u8> = (0..v.num_segments())
                            .map(|_| u8::from(rng.gen_bool(0.5)))
                            .collect();
                        let video = u8::from(labels.contains(&1));
                        (v.id().to_owned(), video, labels)
                    })
                    .collect(),
            ))
        }
    })?;

    let train_config = config.effective_train_config();
    let eval_target = eval.or_else(|| train_truth.map(|t| (bundle, t)));

    let (model, epoch_losses, scored) = if mode == AblationMode::NoDetector {
        let null = fit_null_model(bundle, coarse.as_ref().expect("coarse stage ran"))?;
        let scored = match eval_target {
            Some((b, _)) => clock.time("score", || Ok(density_scores(&null, b)))?,
            None => Vec::new(),
        };
        (None, Vec::new(), scored)
    } else {
        let report = clock.time("train", || train(bundle, &fine, &train_config))?;
        warnings.extend(report.warnings);
        let scored = match eval_target {
            Some((b, _)) => clock.time("score", || score_bundle(&report.model, b))?,
            None => Vec::new(),
        };
        (Some(report.model), report.epoch_losses, scored)
    };

    let roc = match eval_target {
        Some((_, truth)) => {
            let (roc, w) = clock.time("evaluate", || frame_auc(&scored, truth))?;
            warnings.extend(w);
            Some(roc)
        }
        None => None,
    };

    Ok(PipelineOutput {
        coarse,
        fine,
        model,
        train_config,
        epoch_losses,
        scored,
        roc,
        timings: clock.0,
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Eta,
    Beta,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta" => Ok(SweepParam::Eta),
            "beta" => Ok(SweepParam::Beta),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep parameter {other}"
            ))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Eta => "eta",
            SweepParam::Beta => "beta",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: SweepParam,
    pub value: f64,
    pub seed: u64,
    pub auc: f64,
    pub coarse_anomalous_videos: Option<usize>,
    pub positive_segments: usize,
}

/// Run the pipeline once per grid value. Points run concurrently, each with
/// its own seed derived from the base seed and the point index.
pub fn sweep(
    bundle: &FeatureBundle,
    truth: &TruthManifest,
    eval: Option<(&FeatureBundle, &TruthManifest)>,
    base: &PipelineConfig,
    param: SweepParam,
    grid: &[f64],
) -> Result<Vec<SweepPoint>> {
    grid.par_iter()
        .enumerate()
        .map(|(i, &value)| {
            let mut cfg = base.clone();
            cfg.seed = seed::derive_indexed(base.seed, "sweep", i as u64);
            match param {
                SweepParam::Eta => cfg.eta = value,
                SweepParam::Beta => cfg.beta = value,
            }
            let out = run(bundle, Some(truth), eval, &cfg)?;
            Ok(SweepPoint {
                param,
                value,
                seed: cfg.seed,
                auc: out.roc.expect("truth supplied").auc,
                coarse_anomalous_videos: out.coarse.as_ref().map(CoarseLabels::num_anomalous),
                positive_segments: out.fine.num_positive(),
            })
        })
        .collect()
}

pub fn write_sweep_csv(points: &[SweepPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "param",
        "value",
        "seed",
        "auc",
        "coarse_anomalous_videos",
        "positive_segments",
    ])?;
    for p in points {
        w.write_record([
            p.param.to_string(),
            p.value.to_string(),
            p.seed.to_string(),
            p.auc.to_string(),
            p.coarse_anomalous_videos
                .map_or(String::new(), |n| n.to_string()),
            p.positive_segments.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn tiny() -> (FeatureBundle, TruthManifest, PipelineConfig) {
        let (b, t) = generate(&SynthConfig {
            n_videos: 24,
            d: 8,
            m_min: 6,
            m_max: 12,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = PipelineConfig {
            train: TrainConfig {
                epochs: 2,
                hidden: [16, 4],
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        };
        (b, t, cfg)
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!("supervised".parse::<AblationMode>().is_err());
    }

    #[test]
    fn supervised_modes_need_truth() {
        let (b, _, cfg) = tiny();
        for mode in [AblationMode::Wscoarse, AblationMode::WsSegments] {
            let c = PipelineConfig {
                mode,
                ..cfg.clone()
            };
            assert!(matches!(
                run(&b, None, None, &c),
                Err(Error::MissingGroundTruth(_))
            ));
        }
    }

    #[test]
    fn every_mode_runs_and_is_deterministic() {
        let (b, t, cfg) = tiny();
        for mode in AblationMode::ALL {
            let c = PipelineConfig {
                mode,
                ..cfg.clone()
            };
            let a = run(&b, Some(&t), None, &c).unwrap();
            let z = run(&b, Some(&t), None, &c).unwrap();
            assert_eq!(a.fine, z.fine, "{mode}");
            assert_eq!(a.model, z.model, "{mode}");
            assert_eq!(a.roc, z.roc, "{mode}");
            a.fine.check_against(&b).unwrap();
            assert_eq!(a.model.is_none(), mode == AblationMode::NoDetector);
            let roc = a.roc.unwrap();
            assert!((0.0..=1.0).contains(&roc.auc));
        }
    }

    #[test]
    fn cpl_only_copies_video_labels() {
        let (b, t, cfg) = tiny();
        let c = PipelineConfig {
            mode: AblationMode::CplOnly,
            ..cfg
        };
        let out = run(&b, Some(&t), None, &c).unwrap();
        let coarse = out.coarse.unwrap();
        for v in &out.fine.videos {
            assert!(v
                .segment_labels
                .iter()
                .all(|&l| l == coarse.labels[&v.video_id]));
        }
    }

    #[test]
    fn density_scores_are_normalized() {
        let (b, t, cfg) = tiny();
        let c = PipelineConfig {
            mode: AblationMode::NoDetector,
            ..cfg
        };
        let out = run(&b, Some(&t), None, &c).unwrap();
        let all: Vec<f64> = out
            .scored
            .iter()
            .flat_map(|v| v.segment_scores.clone())
            .collect();
        assert!(all.iter().all(|&s| (0.0..=1.0).contains(&s)));
        assert!(all.contains(&0.0));
    }

    #[test]
    fn no_truth_means_no_metrics() {
        let (b, _, cfg) = tiny();
        let out = run(&b, None, None, &cfg).unwrap();
        assert!(out.roc.is_none() && out.scored.is_empty());
        let m = out.manifest(&cfg, &b);
        assert_eq!(m.num_videos, 24);
        assert!(m.metrics.is_none());
    }

    #[test]
    fn sweep_emits_one_point_per_value() {
        let (b, t, cfg) = tiny();
        let pts = sweep(&b, &t, None, &cfg, SweepParam::Beta, &[0.1, 0.3]).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].value, 0.3);
        assert!(pts[1].positive_segments >= pts[0].positive_segments);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_sweep_csv(&pts, &p).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap().lines().count(), 3);
    }
}
