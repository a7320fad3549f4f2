//! Segment-level anomaly detector.
//!
//! Two hidden fully-connected layers (default 512 and 32 units), each paired
//! with an attention branch of the same width: `S = softmax(affine(x))`,
//! combined with the ReLU backbone output `H` either residually
//! (`H * S + H`) or multiplicatively (`H * S`). Dropout follows each combined
//! layer during training. A linear head and a sigmoid produce the score.
//!
//! Gradients are written out by hand and checked against central finite
//! differences in [`gradient_check`].

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::fpl::FineLabels;
use crate::seed;

pub const HIDDEN1: usize = 512;
pub const HIDDEN2: usize = 32;
/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]` inside the BCE.
pub const SCORE_EPS: f64 = 1e-7;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C2FM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `H * S + H`, softmax over features.
    #[default]
    ResidualFd,
    /// `H * S`, softmax over features.
    MultiplicativeFd,
    /// `H * S + H`, softmax over the batch.
    ResidualBd,
    /// `H * S`, softmax over the batch.
    MultiplicativeBd,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::ResidualFd,
        AttentionMode::MultiplicativeFd,
        AttentionMode::ResidualBd,
        AttentionMode::MultiplicativeBd,
    ];

    pub fn is_residual(self) -> bool {
        matches!(self, AttentionMode::ResidualFd | AttentionMode::ResidualBd)
    }

    /// Softmax over the batch axis couples the rows of a batch.
    pub fn over_batch(self) -> bool {
        matches!(
            self,
            AttentionMode::ResidualBd | AttentionMode::MultiplicativeBd
        )
    }

    fn code(self) -> u8 {
        match self {
            AttentionMode::ResidualFd => 0,
            AttentionMode::MultiplicativeFd => 1,
            AttentionMode::ResidualBd => 2,
            AttentionMode::MultiplicativeBd => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(usize::from(c)).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::ResidualFd => "residual_fd",
            AttentionMode::MultiplicativeFd => "multiplicative_fd",
            AttentionMode::ResidualBd => "residual_bd",
            AttentionMode::MultiplicativeBd => "multiplicative_bd",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attention mode {s}")))
    }
}

/// Affine map `x -> x W^T + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: Array2::zeros((out, inp)),
            b: Array1::zeros(out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    fn glorot<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        Self {
            w: Array2::from_shape_simple_fn((out, inp), || rng.gen_range(-limit..limit)),
            b: Array1::zeros(out),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    fn inputs(&self) -> usize {
        self.w.ncols()
    }

    fn outputs(&self) -> usize {
        self.w.nrows()
    }
}

/// Every trainable tensor. Also used to hold gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layer1: Dense,
    pub attn1: Dense,
    pub layer2: Dense,
    pub attn2: Dense,
    pub head: Dense,
}

impl Params {
    fn zeros(d: usize, h1: usize, h2: usize) -> Self {
        Self {
            layer1: Dense::zeros(d, h1),
            attn1: Dense::zeros(d, h1),
            layer2: Dense::zeros(h1, h2),
            attn2: Dense::zeros(h1, h2),
            head: Dense::zeros(h2, 1),
        }
    }

    pub fn dense(&self) -> [&Dense; 5] {
        [
            &self.layer1,
            &self.attn1,
            &self.layer2,
            &self.attn2,
            &self.head,
        ]
    }

    pub fn dense_mut(&mut self) -> [&mut Dense; 5] {
        [
            &mut self.layer1,
            &mut self.attn1,
            &mut self.layer2,
            &mut self.attn2,
            &mut self.head,
        ]
    }

    /// Squared ℓ2 norm of all weight matrices (biases excluded).
    pub fn weight_norm2(&self) -> f64 {
        self.dense()
            .iter()
            .map(|d| d.w.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.dense().iter().map(|d| d.w.len() + d.b.len()).sum()
    }

    /// Flat parameter addressing: tensors in declaration order, weight then
    /// bias, each row-major.
    fn slot_mut(&mut self, mut index: usize) -> &mut f64 {
        for d in self.dense_mut() {
            if index < d.w.len() {
                let c = d.w.ncols();
                return &mut d.w[[index / c, index % c]];
            }
            index -= d.w.len();
            if index < d.b.len() {
                return &mut d.b[index];
            }
            index -= d.b.len();
        }
        panic!("parameter index out of range");
    }

    fn slot(&self, index: usize) -> f64 {
        let mut copy_index = index;
        for d in self.dense() {
            if copy_index < d.w.len() {
                let c = d.w.ncols();
                return d.w[[copy_index / c, copy_index % c]];
            }
            copy_index -= d.w.len();
            if copy_index < d.b.len() {
                return d.b[copy_index];
            }
            copy_index -= d.b.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// `(offset, len)` of each of the ten tensors in flat addressing.
    fn tensor_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(10);
        let mut off = 0;
        for d in self.dense() {
            out.push((off, d.w.len()));
            off += d.w.len();
            out.push((off, d.b.len()));
            off += d.b.len();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub params: Params,
    pub dropout_rate: f64,
    pub attention_mode: AttentionMode,
}

impl DetectorModel {
    pub fn new(
        d: usize,
        hidden: [usize; 2],
        attention_mode: AttentionMode,
        dropout_rate: f64,
        seed: u64,
    ) -> Self {
        let mut rng = seed::rng(seed);
        let [h1, h2] = hidden;
        let params = Params {
            layer1: Dense::glorot(d, h1, &mut rng),
            attn1: Dense::glorot(d, h1, &mut rng),
            layer2: Dense::glorot(h1, h2, &mut rng),
            attn2: Dense::glorot(h1, h2, &mut rng),
            head: Dense::glorot(h2, 1, &mut rng),
        };
        Self {
            params,
            dropout_rate,
            attention_mode,
        }
    }

    /// All weights and biases zero.
    pub fn zeros(d: usize, hidden: [usize; 2], attention_mode: AttentionMode) -> Self {
        Self {
            params: Params::zeros(d, hidden[0], hidden[1]),
            dropout_rate: 0.0,
            attention_mode,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.params.layer1.inputs()
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.params.layer1.outputs(), self.params.layer2.outputs()]
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .dense()
            .iter()
            .all(|d| d.w.iter().chain(d.b.iter()).all(|v| v.is_finite()))
    }

    /// Inference scores for a batch.
    pub fn score(&self, batch: ArrayView2<f64>) -> Result<Array1<f64>> {
        forward(self, batch, false, 0)
    }
}

struct LayerCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    attn: Array2<f64>,
    mask: Option<Array2<f64>>,
}

struct ForwardCache {
    layers: [LayerCache; 2],
    hidden_out: Array2<f64>,
    scores: Array1<f64>,
}

fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - hi).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

fn softmax_cols(a: &mut Array2<f64>) {
    for mut col in a.columns_mut() {
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|v| (v - hi).exp());
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn layer_forward<R: Rng>(
    backbone: &Dense,
    attention: &Dense,
    mode: AttentionMode,
    input: Array2<f64>,
    dropout: Option<(f64, &mut R)>,
) -> (Array2<f64>, LayerCache) {
    let view = input.view();
    let pre = backbone.apply(&view);
    let act = pre.mapv(|v| v.max(0.0));
    let mut attn = attention.apply(&view);
    if mode.over_batch() {
        softmax_cols(&mut attn);
    } else {
        softmax_rows(&mut attn);
    }
    let mut out = if mode.is_residual() {
        &act * &attn + &act
    } else {
        &act * &attn
    };
    let mask = match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let mask = Array2::from_shape_simple_fn(out.raw_dim(), || {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            out *= &mask;
            Some(mask)
        }
        _ => None,
    };
    (
        out,
        LayerCache {
            input,
            pre,
            act,
            attn,
            mask,
        },
    )
}

fn forward_cached(
    model: &DetectorModel,
    batch: ArrayView2<f64>,
    training: bool,
    seed: u64,
) -> Result<ForwardCache> {
    if batch.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: batch.ncols(),
            context: "detector input width".into(),
        });
    }
    let p = &model.params;
    let mut rng = seed::rng(seed);
    let rate = if training { model.dropout_rate } else { 0.0 };
    let (h1, c1) = layer_forward(
        &p.layer1,
        &p.attn1,
        model.attention_mode,
        batch.to_owned(),
        Some((rate, &mut rng)),
    );
    let (h2, c2) = layer_forward(
        &p.layer2,
        &p.attn2,
        model.attention_mode,
        h1,
        Some((rate, &mut rng)),
    );
    let logits = p.head.apply(&h2.view()).column(0).to_owned();
    let scores = logits.mapv(sigmoid);
    Ok(ForwardCache {
        layers: [c1, c2],
        hidden_out: h2,
        scores,
    })
}

/// Anomaly scores in (0, 1) for every row of `batch`. Dropout is active only
/// when `training` is set, driven by `seed`.
pub fn forward(
    model: &DetectorModel,
    batch: ArrayView2<f64>,
    training: bool,
    seed: u64,
) -> Result<Array1<f64>> {
    forward_cached(model, batch, training, seed).map(|c| c.scores)
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Mean binary cross-entropy over the batch.
pub fn bce(scores: &[f64], labels: &[f64]) -> f64 {
    let n = scores.len() as f64;
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let c = clamp_score(s);
            -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
        })
        .sum::<f64>()
        / n
}

/// Mean BCE plus `l2_lambda` times the squared norm of all weight matrices.
pub fn loss(scores: &[f64], labels: &[f64], model: &DetectorModel, l2_lambda: f64) -> f64 {
    bce(scores, labels) + l2_lambda * model.params.weight_norm2()
}

fn layer_backward(
    backbone: &Dense,
    attention: &Dense,
    mode: AttentionMode,
    cache: &LayerCache,
    mut d_out: Array2<f64>,
    grads: (&mut Dense, &mut Dense),
    need_input_grad: bool,
) -> Option<Array2<f64>> {
    if let Some(mask) = &cache.mask {
        d_out *= mask;
    }
    let mut d_act = &d_out * &cache.attn;
    if mode.is_residual() {
        d_act += &d_out;
    }
    let d_attn = &d_out * &cache.act;
    // Softmax Jacobian-vector product along the normalized axis.
    let prod = &d_attn * &cache.attn;
    let axis = if mode.over_batch() { Axis(0) } else { Axis(1) };
    let dots = prod.sum_axis(axis).insert_axis(axis);
    let d_attn_pre = (&d_attn - &dots) * &cache.attn;
    let mut d_pre = d_act;
    Zip::from(&mut d_pre).and(&cache.pre).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });

    let (g_backbone, g_attention) = grads;
    g_backbone.w = d_pre.t().dot(&cache.input);
    g_backbone.b = d_pre.sum_axis(Axis(0));
    g_attention.w = d_attn_pre.t().dot(&cache.input);
    g_attention.b = d_attn_pre.sum_axis(Axis(0));
    need_input_grad.then(|| d_pre.dot(&backbone.w) + d_attn_pre.dot(&attention.w))
}

fn backward(model: &DetectorModel, cache: &ForwardCache, labels: &[f64], l2_lambda: f64) -> Params {
    let p = &model.params;
    let b = labels.len() as f64;
    let d_logit = Array1::from_iter(cache.scores.iter().zip(labels).map(|(&s, &y)| {
        if (SCORE_EPS..=1.0 - SCORE_EPS).contains(&s) {
            (s - y) / b
        } else {
            0.0
        }
    }));
    let [h1, h2] = model.hidden();
    let mut g = Params::zeros(model.input_dim(), h1, h2);
    let d_logit_col = d_logit.view().insert_axis(Axis(1));
    g.head.w = d_logit_col.t().dot(&cache.hidden_out);
    g.head.b = Array1::from_elem(1, d_logit.sum());
    let d_h2 = d_logit_col.dot(&p.head.w);
    let d_h1 = layer_backward(
        &p.layer2,
        &p.attn2,
        model.attention_mode,
        &cache.layers[1],
        d_h2,
        (&mut g.layer2, &mut g.attn2),
        true,
    )
    .expect("input gradient requested");
    layer_backward(
        &p.layer1,
        &p.attn1,
        model.attention_mode,
        &cache.layers[0],
        d_h1,
        (&mut g.layer1, &mut g.attn1),
        false,
    );
    if l2_lambda != 0.0 {
        for (gd, pd) in g.dense_mut().into_iter().zip(p.dense()) {
            gd.w.scaled_add(2.0 * l2_lambda, &pd.w);
        }
    }
    g
}

/// Loss and its gradient for one batch.
pub fn loss_and_gradient(
    model: &DetectorModel,
    batch: ArrayView2<f64>,
    labels: &[f64],
    l2_lambda: f64,
    training: bool,
    seed: u64,
) -> Result<(f64, Params)> {
    if labels.len() != batch.nrows() {
        return Err(Error::DimensionMismatch {
            expected: batch.nrows(),
            got: labels.len(),
            context: "labels per batch row".into(),
        });
    }
    let cache = forward_cached(model, batch, training, seed)?;
    let value = loss(
        cache.scores.as_slice().expect("contiguous"),
        labels,
        model,
        l2_lambda,
    );
    Ok((value, backward(model, &cache, labels, l2_lambda)))
}

fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.01
}
fn default_l2() -> f64 {
    1e-3
}
fn default_dropout() -> f64 {
    0.6
}
fn default_hidden() -> [usize; 2] {
    [HIDDEN1, HIDDEN2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_l2")]
    pub l2_lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub attention_mode: AttentionMode,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_hidden")]
    pub hidden: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            l2_lambda: default_l2(),
            seed: 0,
            attention_mode: AttentionMode::default(),
            dropout_rate: default_dropout(),
            hidden: default_hidden(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.hidden.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Sample-weighted mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub model: DetectorModel,
    pub epoch_seconds: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Stack a bundle's segments into an `M × d` matrix in bundle order.
pub fn bundle_matrix(bundle: &FeatureBundle) -> Array2<f64> {
    let d = bundle.dim();
    let rows = bundle.total_segments();
    let flat: Vec<f64> = bundle
        .videos()
        .iter()
        .flat_map(|v| v.features().iter().map(|&x| f64::from(x)))
        .collect();
    Array2::from_shape_vec((rows, d), flat).expect("row-major segment matrix")
}

/// Supervised training on every `(segment, label)` pair with plain SGD.
pub fn train(
    bundle: &FeatureBundle,
    fine: &FineLabels,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    fine.check_against(bundle)?;
    let x = bundle_matrix(bundle);
    let y: Vec<f64> = fine.flat().into_iter().map(f64::from).collect();
    if y.is_empty() {
        return Err(Error::InsufficientData(
            "no labeled segments to train on".into(),
        ));
    }
    let mut warnings = Vec::new();
    let positives = y.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 || positives == y.len() {
        warnings.push(format!(
            "all {} training labels belong to one class ({})",
            y.len(),
            u8::from(positives > 0)
        ));
    }

    let mut model = DetectorModel::new(
        bundle.dim(),
        config.hidden,
        config.attention_mode,
        config.dropout_rate,
        seed::derive_seed(config.seed, "init"),
    );
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut epoch_seconds = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive_indexed(
            config.seed,
            "shuffle",
            epoch as u64,
        )));
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch = x.select(Axis(0), idx);
            let labels: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let dropout_seed = seed::derive_indexed(config.seed, "dropout", step);
            let (value, grad) = loss_and_gradient(
                &model,
                batch.view(),
                &labels,
                config.l2_lambda,
                true,
                dropout_seed,
            )?;
            total += value * idx.len() as f64;
            for (pd, gd) in model.params.dense_mut().into_iter().zip(grad.dense()) {
                pd.w.scaled_add(-config.learning_rate, &gd.w);
                pd.b.scaled_add(-config.learning_rate, &gd.b);
            }
            step += 1;
        }
        epoch_losses.push(total / n as f64);
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    if !model.is_finite() {
        return Err(Error::DegenerateSplit(
            "training diverged to non-finite weights".into(),
        ));
    }
    Ok(TrainReport {
        epoch_losses,
        model,
        epoch_seconds,
        warnings,
    })
}

/// Largest relative error between the analytic gradient and central finite
/// differences, over at least 200 parameters sampled evenly from all ten
/// tensors (every entry of tensors smaller than the per-tensor quota).
/// Parameters whose perturbation flips a ReLU are skipped in favour of
/// another entry of the same tensor. Dropout is disabled.
pub fn gradient_check(
    model: &DetectorModel,
    batch: ArrayView2<f64>,
    labels: &[f64],
    epsilon: f64,
    l2_lambda: f64,
    seed: u64,
) -> Result<f64> {
    gradient_check_with(model, batch, labels, epsilon, l2_lambda, seed, |_| {})
}

/// Denominator floor for the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// [`gradient_check`] with a hook that may alter the analytic gradient
/// before comparison (used to confirm the check catches wrong gradients).
pub fn gradient_check_with(
    model: &DetectorModel,
    batch: ArrayView2<f64>,
    labels: &[f64],
    epsilon: f64,
    l2_lambda: f64,
    seed: u64,
    mutate: impl Fn(&mut Params),
) -> Result<f64> {
    if !(epsilon > 1e-7 && epsilon < 1e-3) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside (1e-7, 1e-3)"
        )));
    }
    let (_, mut analytic) = loss_and_gradient(model, batch, labels, l2_lambda, false, 0)?;
    mutate(&mut analytic);

    let eval = |m: &DetectorModel| -> Result<(f64, Vec<bool>)> {
        let c = forward_cached(m, batch, false, 0)?;
        let l = loss(
            c.scores.as_slice().expect("contiguous"),
            labels,
            m,
            l2_lambda,
        );
        let pattern = c
            .layers
            .iter()
            .flat_map(|lc| lc.pre.iter().map(|&v| v > 0.0))
            .collect();
        Ok((l, pattern))
    };
    let (_, base) = eval(model)?;

    let mut rng = seed::rng(seed);
    let ranges = model.params.tensor_ranges();
    let per_tensor = 200usize.div_ceil(ranges.len());
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (off, len) in ranges {
        let mut order: Vec<usize> = (off..off + len).collect();
        order.shuffle(&mut rng);
        let mut checked = 0;
        for idx in order {
            if checked == per_tensor {
                break;
            }
            let orig = probe.params.slot(idx);
            *probe.params.slot_mut(idx) = orig + epsilon;
            let (up, up_pattern) = eval(&probe)?;
            *probe.params.slot_mut(idx) = orig - epsilon;
            let (down, down_pattern) = eval(&probe)?;
            *probe.params.slot_mut(idx) = orig;
            // A ReLU kink inside [-eps, eps] makes the difference quotient meaningless.
            if up_pattern != base || down_pattern != base {
                continue;
            }
            checked += 1;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.slot(idx);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serialize the model and the config it was trained with. Config fields
/// that describe the architecture are taken from the model.
pub fn checkpoint_bytes(model: &DetectorModel, config: &TrainConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.params.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let [h1, h2] = model.hidden();
    put_u32(&mut out, model.input_dim());
    put_u32(&mut out, h1);
    put_u32(&mut out, h2);
    out.push(model.attention_mode.code());
    out.extend_from_slice(&model.dropout_rate.to_le_bytes());
    out.extend_from_slice(&(config.epochs as u64).to_le_bytes());
    out.extend_from_slice(&(config.batch_size as u64).to_le_bytes());
    out.extend_from_slice(&config.learning_rate.to_le_bytes());
    out.extend_from_slice(&config.l2_lambda.to_le_bytes());
    out.extend_from_slice(&config.seed.to_le_bytes());
    for d in model.params.dense() {
        for v in d.w.iter().chain(d.b.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(DetectorModel, TrainConfig)> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Truncated(format!("checkpoint ends at offset {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::MalformedHeader("not a detector checkpoint".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().expect("8 bytes"));
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::MalformedHeader(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let d = u32_at(take(4)?);
    let h1 = u32_at(take(4)?);
    let h2 = u32_at(take(4)?);
    if d == 0 || h1 == 0 || h2 == 0 {
        return Err(Error::MalformedHeader("zero layer width".into()));
    }
    let mode = AttentionMode::from_code(take(1)?[0])
        .ok_or_else(|| Error::MalformedHeader("unknown attention mode".into()))?;
    let dropout_rate = f64_at(take(8)?);
    let epochs = u64_at(take(8)?) as usize;
    let batch_size = u64_at(take(8)?) as usize;
    let learning_rate = f64_at(take(8)?);
    let l2_lambda = f64_at(take(8)?);
    let seed = u64_at(take(8)?);
    let mut model = DetectorModel::zeros(d, [h1, h2], mode);
    model.dropout_rate = dropout_rate;
    for dense in model.params.dense_mut() {
        for v in dense.w.iter_mut().chain(dense.b.iter_mut()) {
            *v = f64_at(take(8)?);
        }
    }
    if pos != bytes.len() {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - pos
        )));
    }
    if !model.is_finite() {
        return Err(Error::NonFinite {
            video: "<checkpoint>".into(),
            segment: 0,
        });
    }
    let config = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        l2_lambda,
        seed,
        attention_mode: mode,
        dropout_rate,
        hidden: [h1, h2],
    };
    Ok((model, config))
}

pub fn write_checkpoint(
    model: &DetectorModel,
    config: &TrainConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(model, config))
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(DetectorModel, TrainConfig)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
