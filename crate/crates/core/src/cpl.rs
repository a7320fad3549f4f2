//! Coarse (video-level) pseudo-labels.
//!
//! Every video starts in the normal cluster. Each step re-clusters the normal
//! set into two with a 2-component Gaussian mixture, moves the smaller child
//! into the anomaly set and keeps the larger one as normal. The loop runs
//! while `|anomaly| / |normal| <= eta`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_json, write_json, VideoSummary};
use crate::seed;

/// Added to covariance diagonals at every M-step.
pub const COVARIANCE_FLOOR: f64 = 1e-6;
pub const EM_MAX_ITERS: usize = 200;
/// EM stops once the mean per-point log-likelihood gains less than this.
pub const EM_REL_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_DIVISIVE_ITERS: usize = 50;

/// Symmetric 2×2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    /// Smallest eigenvalue.
    pub fn min_eigenvalue(&self) -> f64 {
        let tr = self.xx + self.yy;
        let disc = ((self.xx - self.yy).powi(2) + 4.0 * self.xy * self.xy).sqrt();
        0.5 * (tr - disc)
    }

    fn log_density(&self, mean: &[f64; 2], p: &[f64; 2]) -> f64 {
        let det = self.det();
        let dx = p[0] - mean[0];
        let dy = p[1] - mean[1];
        let maha = (self.yy * dx * dx - 2.0 * self.xy * dx * dy + self.xx * dy * dy) / det;
        -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * maha
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: [f64; 2],
    pub means: [[f64; 2]; 2],
    pub covariances: [Cov2; 2],
}

impl GmmModel {
    /// `log(w_k) + log N(p | mean_k, cov_k)` for both components.
    pub fn weighted_log_densities(&self, p: &[f64; 2]) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + self.covariances[k].log_density(&self.means[k], p))
    }

    pub fn log_likelihood(&self, points: &[[f64; 2]]) -> f64 {
        points
            .iter()
            .map(|p| {
                let [a, b] = self.weighted_log_densities(p);
                log_sum_exp(a, b)
            })
            .sum()
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

fn validate_points(points: &[[f64; 2]]) -> Result<()> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "GMM needs at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite point passed to GMM".into(),
        ));
    }
    if points.iter().all(|p| p == &points[0]) {
        return Err(Error::DegenerateSplit(format!(
            "all {} points are identical",
            points.len()
        )));
    }
    Ok(())
}

/// k-means++ choice of two distinct data points as initial means.
fn seed_means(points: &[[f64; 2]], seed: u64) -> [[f64; 2]; 2] {
    let mut rng = seed::rng(seed);
    let first = points[rng.gen_range(0..points.len())];
    let d2: Vec<f64> = points
        .iter()
        .map(|p| (p[0] - first[0]).powi(2) + (p[1] - first[1]).powi(2))
        .collect();
    let total: f64 = d2.iter().sum();
    let mut target = rng.gen::<f64>() * total;
    let mut second = None;
    for (p, &w) in points.iter().zip(&d2) {
        if w > 0.0 {
            second = Some(*p);
            if target < w {
                break;
            }
            target -= w;
        }
    }
    // validate_points guarantees some point differs from `first`.
    [first, second.expect("non-degenerate point set")]
}

fn data_covariance(points: &[[f64; 2]]) -> Cov2 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut c = Cov2 {
        xx: 0.0,
        xy: 0.0,
        yy: 0.0,
    };
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        c.xx += dx * dx;
        c.xy += dx * dy;
        c.yy += dy * dy;
    }
    Cov2 {
        xx: c.xx / n + COVARIANCE_FLOOR,
        xy: c.xy / n,
        yy: c.yy / n + COVARIANCE_FLOOR,
    }
}

/// Fit a 2-component full-covariance GMM with EM. Returns the model and the
/// log-likelihood after every E-step.
pub fn fit_gmm_2_traced(points: &[[f64; 2]], seed: u64) -> Result<(GmmModel, Vec<f64>)> {
    validate_points(points)?;
    let cov = data_covariance(points);
    let mut model = GmmModel {
        weights: [0.5, 0.5],
        means: seed_means(points, seed),
        covariances: [cov, cov],
    };
    let n = points.len();
    let mut resp = vec![[0.0f64; 2]; n];
    let mut trace = Vec::new();
    for _ in 0..EM_MAX_ITERS {
        let mut ll = 0.0;
        for (p, r) in points.iter().zip(resp.iter_mut()) {
            let [a, b] = model.weighted_log_densities(p);
            let norm = log_sum_exp(a, b);
            ll += norm;
            *r = [(a - norm).exp(), (b - norm).exp()];
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (ll - prev) / n as f64 <= EM_REL_TOL {
                trace.push(ll);
                break;
            }
        }
        trace.push(ll);

        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk <= f64::EPSILON * n as f64 {
                return Err(Error::DegenerateSplit(format!(
                    "component {k} lost all mass"
                )));
            }
            let mut mean = [0.0; 2];
            for (p, r) in points.iter().zip(&resp) {
                mean[0] += r[k] * p[0];
                mean[1] += r[k] * p[1];
            }
            mean = [mean[0] / nk, mean[1] / nk];
            let mut c = Cov2 {
                xx: 0.0,
                xy: 0.0,
                yy: 0.0,
            };
            for (p, r) in points.iter().zip(&resp) {
                let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
                c.xx += r[k] * dx * dx;
                c.xy += r[k] * dx * dy;
                c.yy += r[k] * dy * dy;
            }
            model.weights[k] = nk / n as f64;
            model.means[k] = mean;
            model.covariances[k] = Cov2 {
                xx: c.xx / nk + COVARIANCE_FLOOR,
                xy: c.xy / nk,
                yy: c.yy / nk + COVARIANCE_FLOOR,
            };
        }
        let total = model.weights[0] + model.weights[1];
        model.weights = [model.weights[0] / total, model.weights[1] / total];
    }
    Ok((model, trace))
}

pub fn fit_gmm_2(points: &[[f64; 2]], seed: u64) -> Result<GmmModel> {
    fit_gmm_2_traced(points, seed).map(|(m, _)| m)
}

/// Hard assignment to the component with the larger posterior; ties go to 0.
pub fn assign_clusters(model: &GmmModel, points: &[[f64; 2]]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let [a, b] = model.weighted_log_densities(p);
            usize::from(b > a)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseLabels {
    /// 0 = normal, 1 = anomalous.
    pub labels: BTreeMap<String, u8>,
    pub iterations_used: usize,
    pub final_ratio: f64,
}

impl CoarseLabels {
    /// Build from explicit labels (ground truth or random ablations).
    pub fn from_labels(labels: BTreeMap<String, u8>) -> Self {
        let anomalous = labels.values().filter(|&&l| l == 1).count();
        let normal = labels.len() - anomalous;
        let final_ratio = if normal > 0 {
            anomalous as f64 / normal as f64
        } else {
            f64::INFINITY
        };
        Self {
            labels,
            iterations_used: 0,
            final_ratio,
        }
    }

    pub fn label(&self, id: &str) -> Option<u8> {
        self.labels.get(id).copied()
    }

    pub fn num_anomalous(&self) -> usize {
        self.labels.values().filter(|&&l| l == 1).count()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }
}

/// Divisive clustering of video summaries into normal / anomalous.
///
/// Besides the ratio condition the loop stops after `max_iters` splits, when
/// a split is degenerate (identical points, empty child, collapsed
/// component) or when the larger child would hold fewer than 2 videos.
pub fn generate_coarse_labels(
    summaries: &[VideoSummary],
    eta: f64,
    seed: u64,
    max_iters: usize,
) -> Result<CoarseLabels> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "eta must be positive, got {eta}"
        )));
    }
    if summaries.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "coarse labeling needs at least 2 videos, got {}",
            summaries.len()
        )));
    }
    let points: Vec<[f64; 2]> = summaries.iter().map(VideoSummary::point).collect();
    let mut normal: Vec<usize> = (0..points.len()).collect();
    let mut anomalous: Vec<usize> = Vec::new();
    let mut iterations = 0;

    while (anomalous.len() as f64) / (normal.len() as f64) <= eta && iterations < max_iters {
        if normal.len() < 2 {
            break;
        }
        let subset: Vec<[f64; 2]> = normal.iter().map(|&i| points[i]).collect();
        let model = match fit_gmm_2(
            &subset,
            seed::derive_indexed(seed, "cpl", iterations as u64),
        ) {
            Ok(m) => m,
            Err(Error::DegenerateSplit(_)) => break,
            Err(e) => return Err(e),
        };
        let assignment = assign_clusters(&model, &subset);
        let (mut children, mut centroid_mu) = ([Vec::new(), Vec::new()], [0.0f64; 2]);
        for (&idx, &k) in normal.iter().zip(&assignment) {
            children[k].push(idx);
            centroid_mu[k] += points[idx][0];
        }
        if children.iter().any(Vec::is_empty) {
            break;
        }
        let small = match children[0].len().cmp(&children[1].len()) {
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Greater => 1,
            // Equal sizes: the higher-magnitude child is the anomalous one.
            std::cmp::Ordering::Equal => usize::from(centroid_mu[1] >= centroid_mu[0]),
        };
        let [c0, c1] = children;
        let (small, large) = if small == 0 { (c0, c1) } else { (c1, c0) };
        if large.len() < 2 {
            break;
        }
        anomalous.extend(small);
        normal = large;
        iterations += 1;
    }

    let mut labels = BTreeMap::new();
    for &i in &normal {
        labels.insert(summaries[i].video_id.clone(), 0);
    }
    for &i in &anomalous {
        labels.insert(summaries[i].video_id.clone(), 1);
    }
    if labels.len() != summaries.len() {
        return Err(Error::DuplicateId("summary ids are not unique".into()));
    }
    Ok(CoarseLabels {
        labels,
        iterations_used: iterations,
        final_ratio: anomalous.len() as f64 / normal.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, centers: [[f64; 2]; 2], sd: f64, per: usize) -> Vec<[f64; 2]> {
        let mut rng = seed::rng(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut pts = Vec::new();
        for c in centers {
            for _ in 0..per {
                pts.push([c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
            }
        }
        pts
    }

    fn summaries(points: &[[f64; 2]]) -> Vec<VideoSummary> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| VideoSummary {
                video_id: format!("v{i:03}"),
                mu: p[0],
                sigma: p[1],
            })
            .collect()
    }

    /// Responsibility of component 1 from explicit density ratios.
    fn posterior_one(m: &GmmModel, p: &[f64; 2]) -> f64 {
        let dens = |k: usize| {
            let c = m.covariances[k];
            let det = c.xx * c.yy - c.xy * c.xy;
            let (dx, dy) = (p[0] - m.means[k][0], p[1] - m.means[k][1]);
            let q = (c.yy * dx * dx - 2.0 * c.xy * dx * dy + c.xx * dy * dy) / det;
            m.weights[k] * (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
        };
        let (a, b) = (dens(0), dens(1));
        b / (a + b)
    }

    #[test]
    fn recovers_separated_blobs() {
        let centers = [[0.0, 0.0], [8.0, 8.0]];
        let pts = blobs(11, centers, 0.5, 50);
        let (m, trace) = fit_gmm_2_traced(&pts, 3).unwrap();
        for c in centers {
            let best = m
                .means
                .iter()
                .map(|mu| ((mu[0] - c[0]).powi(2) + (mu[1] - c[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "center {c:?} missed by {best}");
        }
        assert!((m.weights[0] + m.weights[1] - 1.0).abs() < 1e-9);
        for c in &m.covariances {
            assert!(c.min_eigenvalue() >= COVARIANCE_FLOOR * 0.999);
        }
        for w in trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-9 * w[0].abs(),
                "log-likelihood fell: {w:?}"
            );
        }
    }

    #[test]
    fn assignments_match_density_ratio() {
        let pts = blobs(5, [[1.0, 0.2], [2.5, 1.0]], 0.6, 60);
        let m = fit_gmm_2(&pts, 9).unwrap();
        let got = assign_clusters(&m, &pts);
        for (p, g) in pts.iter().zip(got) {
            let post = posterior_one(&m, p);
            if (post - 0.5).abs() > 1e-9 {
                assert_eq!(g, usize::from(post > 0.5));
            }
        }
    }

    #[test]
    fn tie_goes_to_component_zero() {
        let cov = Cov2 {
            xx: 1.0,
            xy: 0.0,
            yy: 1.0,
        };
        let m = GmmModel {
            weights: [0.5, 0.5],
            means: [[-1.0, 0.0], [1.0, 0.0]],
            covariances: [cov, cov],
        };
        assert_eq!(
            assign_clusters(&m, &[[0.0, 3.0], [1.0, 0.0], [-1.0, 0.0]]),
            vec![0, 1, 0]
        );
    }

    #[test]
    fn degenerate_and_small_inputs() {
        assert!(matches!(
            fit_gmm_2(&[[1.0, 2.0]; 7], 0),
            Err(Error::DegenerateSplit(_))
        ));
        assert!(matches!(
            fit_gmm_2(&[[1.0, 2.0]], 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn fit_is_deterministic() {
        let pts = blobs(2, [[0.0, 0.0], [3.0, 1.0]], 1.0, 40);
        assert_eq!(fit_gmm_2(&pts, 42).unwrap(), fit_gmm_2(&pts, 42).unwrap());
    }

    #[test]
    fn two_group_example() {
        let mut pts = vec![[1.0, 0.1]; 5];
        pts.extend(vec![[10.0, 2.0]; 5]);
        let s = summaries(&pts);
        let c = generate_coarse_labels(&s, 1.0, 0, DEFAULT_MAX_DIVISIVE_ITERS).unwrap();
        for (i, sm) in s.iter().enumerate() {
            assert_eq!(c.label(&sm.video_id), Some(u8::from(i >= 5)));
        }
        assert_eq!(c.iterations_used, 1);
        assert_eq!(c.final_ratio, 1.0);
    }

    #[test]
    fn zero_iterations_labels_everything_normal() {
        let pts = blobs(1, [[0.0, 0.0], [5.0, 5.0]], 0.3, 10);
        let c = generate_coarse_labels(&summaries(&pts), 1.0, 0, 0).unwrap();
        assert_eq!(c.num_anomalous(), 0);
        assert_eq!(c.final_ratio, 0.0);
        assert_eq!(c.iterations_used, 0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let s = summaries(&[[1.0, 0.0]]);
        assert!(matches!(
            generate_coarse_labels(&s, 1.0, 0, 10),
            Err(Error::InsufficientData(_))
        ));
        let s = summaries(&[[1.0, 0.0], [2.0, 0.0]]);
        assert!(generate_coarse_labels(&s, 0.0, 0, 10).is_err());
    }

    /// Replays the divisive loop and checks the per-step invariants.
    #[test]
    fn anomaly_set_only_grows_and_partitions() {
        let mut pts = blobs(8, [[1.0, 0.2], [1.6, 0.5]], 0.15, 80);
        pts.extend(blobs(9, [[4.0, 1.5], [4.0, 1.5]], 0.4, 10));
        let s = summaries(&pts);
        let mut prev: Option<CoarseLabels> = None;
        for iters in 0..8 {
            let c = generate_coarse_labels(&s, 1.0, 77, iters).unwrap();
            assert_eq!(c.labels.len(), s.len());
            if let Some(p) = &prev {
                for (id, &l) in &p.labels {
                    if l == 1 {
                        assert_eq!(c.labels[id], 1, "video {id} left the anomaly set");
                    }
                }
            }
            let anomalous = c.num_anomalous() as f64;
            assert_eq!(c.final_ratio, anomalous / (s.len() as f64 - anomalous));
            prev = Some(c);
        }
    }

    #[test]
    fn labels_survive_uniform_scaling() {
        let mut pts = blobs(21, [[2.0, 0.3], [2.4, 0.5]], 0.2, 60);
        pts.extend(blobs(22, [[6.0, 2.0], [7.0, 2.5]], 0.5, 15));
        let base = generate_coarse_labels(&summaries(&pts), 1.0, 5, 50).unwrap();
        for c in [0.5, 3.0, 10.0] {
            let scaled: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] * c, p[1] * c]).collect();
            let got = generate_coarse_labels(&summaries(&scaled), 1.0, 5, 50).unwrap();
            assert_eq!(got.labels, base.labels, "scale {c}");
        }
    }
}
