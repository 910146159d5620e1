//! Class-conditioned autoencoder back-end. The autoencoder learns to rebuild a
//! spectrogram when conditioned on its true class and to output silence when
//! conditioned on any other class; at test time it is conditioned on the
//! classifier's prediction and the reconstruction error decides.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{stack_features, LogitRecord, Regime};
use crate::dataio::{Example, LabelKind};
use crate::decision::{OpenSetDecision, Outcome};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{
    mae_per_example, mse, mse_to_zero, train, LayerSpec, Network, Objective, Tensor, TrainConfig, TrainOutcome,
};

pub const LATENT_WIDTH: usize = 128;

/// `+1` at the conditioning class, `-1` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector(Vec<f64>);

impl ConditioningVector {
    pub fn new(class: usize, num_known: usize) -> Result<Self> {
        if class >= num_known {
            return Err(Error::InvalidInput(format!("class {class} outside {num_known} known classes")));
        }
        Ok(Self((0..num_known).map(|i| if i == class { 1.0 } else { -1.0 }).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `[n, num_known]` batch of conditioning vectors.
pub fn conditioning_batch(classes: &[usize], num_known: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(classes.len() * num_known);
    for &c in classes {
        data.extend_from_slice(ConditioningVector::new(c, num_known)?.as_slice());
    }
    Tensor::new(vec![classes.len(), num_known], data)
}

/// Dense maps from the conditioning vector to per-unit scale and shift.
/// Weights are `[latent, num_known]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub alpha_weight: Vec<f64>,
    pub alpha_bias: Vec<f64>,
    pub beta_weight: Vec<f64>,
    pub beta_bias: Vec<f64>,
}

impl FilmParams {
    pub fn width(&self) -> usize {
        self.alpha_bias.len()
    }
}

/// `o = H_alpha(y) * z + H_beta(y)`, computed directly.
pub fn film(z: &[f64], y: &ConditioningVector, params: &FilmParams) -> Result<Vec<f64>> {
    let width = params.width();
    let k = y.as_slice().len();
    let ok = z.len() == width
        && params.beta_bias.len() == width
        && params.alpha_weight.len() == width * k
        && params.beta_weight.len() == width * k;
    if !ok {
        return Err(Error::Shape(format!("FiLM widths do not align: latent {}, params {width}", z.len())));
    }
    let dot =
        |w: &[f64], row: usize| -> f64 { w[row * k..(row + 1) * k].iter().zip(y.as_slice()).map(|(a, b)| a * b).sum() };
    Ok((0..width)
        .map(|i| {
            let a = dot(&params.alpha_weight, i) + params.alpha_bias[i];
            let b = dot(&params.beta_weight, i) + params.beta_bias[i];
            a * z[i] + b
        })
        .collect())
}

fn stage(n: usize) -> usize {
    n.div_ceil(3)
}

/// Smallest axis length that keeps every encoder stage at least one kernel wide.
pub const MIN_INPUT_AXIS: usize = 19;

/// Encoder of three kernel-3 stride-3 convs, a dense bottleneck with FiLM
/// conditioning on the latent, and a mirrored transposed-conv decoder ending
/// in a 1x1 projection to one channel.
pub fn autoencoder_specs(n_frames: usize, n_mels: usize, num_known: usize) -> Result<Vec<LayerSpec>> {
    if n_frames < MIN_INPUT_AXIS || n_mels < MIN_INPUT_AXIS {
        return Err(Error::Shape(format!(
            "autoencoder input {n_frames}x{n_mels} is too small for three stride-3 stages (minimum {MIN_INPUT_AXIS} per axis)"
        )));
    }
    if num_known == 0 {
        return Err(Error::InvalidConfig("autoencoder needs at least one class".into()));
    }
    let s1 = [stage(n_frames), stage(n_mels)];
    let s2 = [stage(s1[0]), stage(s1[1])];
    let s3 = [stage(s2[0]), stage(s2[1])];
    let flat = 4 * s3[0] * s3[1];
    let conv = |ci, co| LayerSpec::Conv2d { in_channels: ci, out_channels: co, kernel: 3, stride: 3 };
    let convt = |ci, co, hw| LayerSpec::Conv2dTranspose {
        in_channels: ci,
        out_channels: co,
        kernel: 3,
        stride: 3,
        output_hw: hw,
    };
    let dense = |i, o| LayerSpec::Dense { inputs: i, outputs: o };
    Ok(vec![
        conv(1, 16),
        LayerSpec::Relu,
        conv(16, 8),
        LayerSpec::Relu,
        conv(8, 4),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        dense(flat, 512),
        dense(512, LATENT_WIDTH),
        LayerSpec::Film { conditioning: num_known, width: LATENT_WIDTH },
        dense(LATENT_WIDTH, 128),
        dense(128, 512),
        dense(512, flat),
        LayerSpec::Reshape { channels: 4, height: s3[0], width: s3[1] },
        convt(4, 4, s2),
        LayerSpec::Relu,
        convt(4, 8, s1),
        LayerSpec::Relu,
        convt(8, 16, [n_frames, n_mels]),
        LayerSpec::Relu,
        LayerSpec::Conv2d { in_channels: 16, out_channels: 1, kernel: 1, stride: 1 },
    ])
}

pub fn build_autoencoder(n_frames: usize, n_mels: usize, num_known: usize, seed: u64) -> Result<Network> {
    Network::new(vec![1, n_frames, n_mels], &autoencoder_specs(n_frames, n_mels, num_known)?, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct C2aeConfig {
    /// Reconstruction MAE below which a prediction is accepted.
    pub threshold: f64,
    pub correct_weight: f64,
    pub wrong_weight: f64,
    pub train: TrainConfig,
}

impl Default for C2aeConfig {
    fn default() -> Self {
        Self { threshold: 0.3, correct_weight: 0.8, wrong_weight: 0.2, train: TrainConfig::default() }
    }
}

impl C2aeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::InvalidConfig(format!("threshold must be positive, got {}", self.threshold)));
        }
        let weights_ok = self.correct_weight >= 0.0
            && self.wrong_weight >= 0.0
            && (self.correct_weight + self.wrong_weight - 1.0).abs() < 1e-9;
        if !weights_ok {
            return Err(Error::InvalidConfig("reconstruction weights must be nonnegative and sum to 1".into()));
        }
        Ok(())
    }
}

/// A trained autoencoder tied to the standardization statistics it saw.
#[derive(Debug, Clone)]
pub struct C2aeModel {
    pub network: Network,
    pub num_known: usize,
    pub stats_fingerprint: u64,
}

impl C2aeModel {
    /// Wraps a network built by `build_autoencoder`; the class count is read
    /// from its FiLM layer.
    pub fn from_network(network: Network, stats_fingerprint: u64) -> Result<Self> {
        let (_, num_known) = film_layer(&network)?;
        Ok(Self { network, num_known, stats_fingerprint })
    }

    pub fn film_params(&self) -> Result<FilmParams> {
        let (index, _) = film_layer(&self.network)?;
        let p = self.network.layer_params(index);
        Ok(FilmParams {
            alpha_weight: p[0].value.clone(),
            alpha_bias: p[1].value.clone(),
            beta_weight: p[2].value.clone(),
            beta_bias: p[3].value.clone(),
        })
    }

    /// Reconstruction MAE of each matrix when conditioned on the matching class.
    pub fn reconstruction_errors(&self, features: &[&FeatureMatrix], classes: &[usize]) -> Result<Vec<f64>> {
        if features.len() != classes.len() {
            return Err(Error::Shape("one conditioning class is needed per example".into()));
        }
        for m in features {
            self.check_standardized(m)?;
        }
        let mut errors = Vec::with_capacity(features.len());
        for (fs, cs) in features.chunks(CHUNK).zip(classes.chunks(CHUNK)) {
            let x = stack_features(fs.iter().copied())?;
            let cond = conditioning_batch(cs, self.num_known)?;
            let recon = self.network.infer(&x, Some(&cond))?;
            errors.extend(mae_per_example(&recon, &x)?);
        }
        Ok(errors)
    }

    fn check_standardized(&self, m: &FeatureMatrix) -> Result<()> {
        match m.standardized_with {
            Some(fp) if fp == self.stats_fingerprint => Ok(()),
            Some(fp) => Err(Error::PipelineMismatch(format!(
                "features standardized with {fp:016x}, autoencoder expects {:016x}",
                self.stats_fingerprint
            ))),
            None => Err(Error::PipelineMismatch("features are not standardized".into())),
        }
    }
}

const CHUNK: usize = 64;

fn film_layer(network: &Network) -> Result<(usize, usize)> {
    network
        .specs()
        .iter()
        .enumerate()
        .find_map(|(i, s)| match s {
            LayerSpec::Film { conditioning, .. } => Some((i, *conditioning)),
            _ => None,
        })
        .ok_or_else(|| Error::InvalidInput("network has no FiLM layer".into()))
}

/// Uniformly random class other than `truth`.
fn sample_wrong(truth: usize, num_known: usize, rng: &mut ChaCha8Rng) -> usize {
    let w = rng.random_range(0..num_known - 1);
    if w >= truth {
        w + 1
    } else {
        w
    }
}

/// Fixed wrong label for validation example `i`, cycling through all others.
fn validation_wrong(truth: usize, num_known: usize, i: usize) -> usize {
    (truth + 1 + i % (num_known - 1)) % num_known
}

/// Weighted loss for one batch; accumulates gradients when `backprop` is set.
/// Returns `correct_weight * MSE(recon | truth, x) + wrong_weight * MSE(recon | wrong, 0)`.
pub fn c2ae_loss(
    net: &mut Network,
    x: &Tensor,
    truth: &[usize],
    wrong: &[usize],
    config: &C2aeConfig,
    num_known: usize,
) -> Result<f64> {
    let cond = conditioning_batch(truth, num_known)?;
    let recon = net.forward(x, Some(&cond))?;
    let (l_true, g_true) = mse(&recon, x)?;
    net.backward(&g_true.map(|g| g * config.correct_weight))?;
    let mut loss = config.correct_weight * l_true;
    if config.wrong_weight > 0.0 {
        let cond = conditioning_batch(wrong, num_known)?;
        let recon = net.forward(x, Some(&cond))?;
        let (l_wrong, g_wrong) = mse_to_zero(&recon)?;
        net.backward(&g_wrong.map(|g| g * config.wrong_weight))?;
        loss += config.wrong_weight * l_wrong;
    }
    Ok(loss)
}

fn eval_loss(
    net: &Network,
    x: &Tensor,
    truth: &[usize],
    wrong: &[usize],
    config: &C2aeConfig,
    k: usize,
) -> Result<f64> {
    let recon = net.infer(x, Some(&conditioning_batch(truth, k)?))?;
    let mut loss = config.correct_weight * mse(&recon, x)?.0;
    if config.wrong_weight > 0.0 {
        let recon = net.infer(x, Some(&conditioning_batch(wrong, k)?))?;
        loss += config.wrong_weight * mse_to_zero(&recon)?.0;
    }
    Ok(loss)
}

struct Reconstruction<'a> {
    train: &'a [Example],
    train_y: Vec<usize>,
    val: &'a [Example],
    val_y: Vec<usize>,
    config: C2aeConfig,
    num_known: usize,
}

impl Objective for Reconstruction<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn validation_len(&self) -> usize {
        self.val.len()
    }

    fn train_batch(&mut self, net: &mut Network, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<f64> {
        let x = stack_features(indices.iter().map(|&i| &self.train[i].features))?;
        let truth: Vec<usize> = indices.iter().map(|&i| self.train_y[i]).collect();
        let wrong: Vec<usize> = truth.iter().map(|&t| sample_wrong(t, self.num_known, rng)).collect();
        c2ae_loss(net, &x, &truth, &wrong, &self.config, self.num_known)
    }

    fn validation_loss(&mut self, net: &Network) -> Result<f64> {
        let n = self.val.len();
        let mut total = 0.0;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let x = stack_features(self.val[start..end].iter().map(|e| &e.features))?;
            let truth = &self.val_y[start..end];
            let wrong: Vec<usize> = (start..end).map(|i| validation_wrong(self.val_y[i], self.num_known, i)).collect();
            total += eval_loss(net, &x, truth, &wrong, &self.config, self.num_known)? * (end - start) as f64;
        }
        Ok(total / n as f64)
    }
}

fn known_targets(set: &[Example], num_known: usize) -> Result<Vec<usize>> {
    set.iter()
        .map(|e| match e.label.kind {
            LabelKind::Known(c) if c < num_known => Ok(c),
            _ => Err(Error::InvalidInput(format!(
                "autoencoder training needs known-class examples, {} is labeled {}",
                e.id, e.label.name
            ))),
        })
        .collect()
}

/// Trains on known-class examples only, keeping the best-validation weights.
pub fn train_c2ae(
    config: &C2aeConfig,
    num_known: usize,
    train_set: &[Example],
    validation: &[Example],
) -> Result<(C2aeModel, TrainOutcome)> {
    config.validate()?;
    if num_known < 2 {
        return Err(Error::InvalidConfig("conditioning on a wrong class needs at least two known classes".into()));
    }
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::EmptyDataset("autoencoder needs training and validation examples".into()));
    }
    let stats = train_set[0]
        .features
        .standardized_with
        .ok_or_else(|| Error::PipelineMismatch("autoencoder training features are not standardized".into()))?;
    if train_set.iter().chain(validation).any(|e| e.features.standardized_with != Some(stats)) {
        return Err(Error::PipelineMismatch("training features use different standardization".into()));
    }
    let first = &train_set[0].features;
    let mut network = build_autoencoder(first.n_frames, first.n_mels, num_known, config.train.seed)?;
    log::info!("autoencoder parameters: {}", network.parameter_count());
    let mut objective = Reconstruction {
        train: train_set,
        train_y: known_targets(train_set, num_known)?,
        val: validation,
        val_y: known_targets(validation, num_known)?,
        config: *config,
        num_known,
    };
    let outcome = train(&mut network, &mut objective, &config.train)?;
    Ok((C2aeModel { network, num_known, stats_fingerprint: stats }, outcome))
}

/// Reconstruction error plus the decision derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct C2aeOutput {
    pub decision: OpenSetDecision,
    /// MAE under the conditioning class used.
    pub error: f64,
    pub conditioned_on: usize,
}

/// Class the autoencoder is conditioned on: the prediction, or under C2 the
/// best known class when the unknown unit wins.
fn conditioning_class(record: &LogitRecord, num_known: usize) -> usize {
    if record.predicted < num_known {
        record.predicted
    } else {
        crate::classifier::argmax(&record.logits[..num_known])
    }
}

/// Accepts the classifier's prediction when its reconstruction error is
/// strictly below the threshold. A C2 prediction of the unknown unit is
/// rejected outright, scored `max(err, threshold)` so the score stays
/// consistent with the decision.
pub fn c2ae_decide_all(
    records: &[LogitRecord],
    features: &[&FeatureMatrix],
    model: &C2aeModel,
    config: &C2aeConfig,
    regime: Regime,
) -> Result<Vec<C2aeOutput>> {
    config.validate()?;
    let width = regime.width(model.num_known);
    if let Some(r) = records.iter().find(|r| r.width() != width) {
        return Err(Error::Shape(format!("record {} has width {}, expected {width}", r.id, r.width())));
    }
    let classes: Vec<usize> = records.iter().map(|r| conditioning_class(r, model.num_known)).collect();
    let errors = model.reconstruction_errors(features, &classes)?;
    Ok(records
        .iter()
        .zip(errors)
        .zip(classes)
        .map(|((r, err), class)| {
            let unknown_unit = regime == Regime::C2 && r.predicted == model.num_known;
            let (outcome, score) = if unknown_unit {
                (Outcome::Unknown, err.max(config.threshold))
            } else if err < config.threshold {
                (Outcome::Known(r.predicted), err)
            } else {
                (Outcome::Unknown, err)
            };
            C2aeOutput { decision: OpenSetDecision { outcome, unknownness: score }, error: err, conditioned_on: class }
        })
        .collect())
}

pub fn c2ae_decide(
    record: &LogitRecord,
    features: &FeatureMatrix,
    model: &C2aeModel,
    config: &C2aeConfig,
    regime: Regime,
) -> Result<C2aeOutput> {
    Ok(c2ae_decide_all(std::slice::from_ref(record), &[features], model, config, regime)?.remove(0))
}

/// Writes `id, true label, predicted, conditioned class, error` rows.
pub fn write_reconstruction_errors<W: Write>(records: &[LogitRecord], outputs: &[C2aeOutput], mut w: W) -> Result<()> {
    writeln!(w, "id\ttrue\tpredicted\tconditioned_on\terror")?;
    for (r, o) in records.iter().zip(outputs) {
        let truth = match r.truth {
            LabelKind::Known(c) => c.to_string(),
            LabelKind::Unknown => "unknown".into(),
        };
        writeln!(w, "{}\t{}\t{}\t{}\t{:e}", r.id, truth, r.predicted, o.conditioned_on, o.error)?;
    }
    Ok(())
}
