//! The closed-set convolutional classifier shared by every open-set back-end.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dataio::{Example, LabelKind};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{
    softmax, softmax_cross_entropy, train, LayerSpec, Network, Objective, Tensor, TrainConfig, TrainOutcome,
};

/// C1 trains on known classes only; C2 adds one output for all unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    C1,
    C2,
}

impl Regime {
    pub fn width(self, num_known: usize) -> usize {
        match self {
            Regime::C1 => num_known,
            Regime::C2 => num_known + 1,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::C1 => "c1",
            Regime::C2 => "c2",
        })
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c1" => Ok(Regime::C1),
            "c2" => Ok(Regime::C2),
            other => Err(Error::InvalidConfig(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub regime: Regime,
    pub num_known: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_epsilon")]
    pub bn_epsilon: f64,
}

fn default_bn_momentum() -> f64 {
    0.9
}

fn default_bn_epsilon() -> f64 {
    1e-3
}

impl ClassifierConfig {
    pub fn new(regime: Regime, num_known: usize) -> Self {
        Self {
            regime,
            num_known,
            train: TrainConfig::default(),
            bn_momentum: default_bn_momentum(),
            bn_epsilon: default_bn_epsilon(),
        }
    }

    pub fn width(&self) -> usize {
        self.regime.width(self.num_known)
    }
}

/// Five conv blocks (conv, ReLU, batch norm), global average pooling and a
/// dense softmax layer of `width` units.
pub fn classifier_specs(width: usize, bn_momentum: f64, bn_epsilon: f64) -> Vec<LayerSpec> {
    let blocks = [(1, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2), (64, 64, 1)];
    let mut specs = Vec::new();
    for (ci, co, s) in blocks {
        specs.push(LayerSpec::Conv2d { in_channels: ci, out_channels: co, kernel: 3, stride: s });
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::BatchNorm { channels: co, momentum: bn_momentum, epsilon: bn_epsilon });
    }
    specs.push(LayerSpec::GlobalAvgPool);
    specs.push(LayerSpec::Dense { inputs: 64, outputs: width });
    specs.push(LayerSpec::Softmax);
    specs
}

/// Builds an untrained classifier for `[n_frames, n_mels]` feature matrices.
pub fn build_classifier(config: &ClassifierConfig, n_frames: usize, n_mels: usize) -> Result<Network> {
    if config.num_known == 0 {
        return Err(Error::InvalidConfig("at least one known class is required".into()));
    }
    let specs = classifier_specs(config.width(), config.bn_momentum, config.bn_epsilon);
    Network::new(vec![1, n_frames, n_mels], &specs, config.train.seed)
}

/// Stacks feature matrices into a `[n, 1, frames, mels]` batch.
pub fn stack_features<'a>(items: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut n = 0;
    for m in items {
        match dims {
            None => dims = Some((m.n_frames, m.n_mels)),
            Some(d) if d != (m.n_frames, m.n_mels) => {
                return Err(Error::Shape(format!(
                    "feature matrix {}x{} differs from {}x{}",
                    m.n_frames, m.n_mels, d.0, d.1
                )))
            }
            Some(_) => {}
        }
        data.extend_from_slice(&m.values);
        n += 1;
    }
    let (t, b) = dims.ok_or_else(|| Error::EmptyDataset("no feature matrices to stack".into()))?;
    Tensor::new(vec![n, 1, t, b], data)
}

/// Output index for a label under a regime.
pub fn target_index(label: LabelKind, regime: Regime, num_known: usize) -> Result<usize> {
    match (label, regime) {
        (LabelKind::Known(c), _) if c < num_known => Ok(c),
        (LabelKind::Known(c), _) => {
            Err(Error::InvalidInput(format!("class index {c} outside {num_known} known classes")))
        }
        (LabelKind::Unknown, Regime::C2) => Ok(num_known),
        (LabelKind::Unknown, Regime::C1) => {
            Err(Error::RegimeViolation("unknown-labeled example supplied to a C1 classifier".into()))
        }
    }
}

/// Logits, probabilities and arg-max for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub id: String,
    pub truth: LabelKind,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

impl LogitRecord {
    pub fn from_logits(id: String, truth: LabelKind, logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        let predicted = argmax(&logits);
        Self { id, truth, logits, probabilities, predicted }
    }

    pub fn width(&self) -> usize {
        self.logits.len()
    }

    pub fn max_probability(&self) -> f64 {
        self.probabilities[self.predicted]
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A trained classifier and the label layout it was trained with.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub network: Network,
    pub regime: Regime,
    pub num_known: usize,
}

const PREDICT_CHUNK: usize = 64;

impl Classifier {
    pub fn width(&self) -> usize {
        self.regime.width(self.num_known)
    }

    /// Pre-softmax outputs for a batch, computed in inference mode.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.network.infer_to(batch, None, self.network.depth() - 1)
    }

    pub fn predict(&self, example: &Example) -> Result<LogitRecord> {
        Ok(self.predict_all(std::slice::from_ref(example))?.remove(0))
    }

    pub fn predict_all(&self, examples: &[Example]) -> Result<Vec<LogitRecord>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(PREDICT_CHUNK) {
            let x = stack_features(chunk.iter().map(|e| &e.features))?;
            let logits = self.logits(&x)?;
            for (e, row) in chunk.iter().zip(logits.data().chunks_exact(self.width())) {
                out.push(LogitRecord::from_logits(e.id.clone(), e.label.kind, row.to_vec()));
            }
        }
        Ok(out)
    }
}

struct CrossEntropy {
    train_x: Vec<FeatureMatrix>,
    train_y: Vec<usize>,
    val_x: Tensor,
    val_y: Vec<usize>,
    logits_depth: usize,
}

impl Objective for CrossEntropy {
    fn train_len(&self) -> usize {
        self.train_y.len()
    }

    fn validation_len(&self) -> usize {
        self.val_y.len()
    }

    fn train_batch(&mut self, net: &mut Network, indices: &[usize], _rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64> {
        let x = stack_features(indices.iter().map(|&i| &self.train_x[i]))?;
        let y: Vec<usize> = indices.iter().map(|&i| self.train_y[i]).collect();
        let logits = net.forward_to(&x, None, self.logits_depth)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
        net.backward(&grad)?;
        Ok(loss)
    }

    fn validation_loss(&mut self, net: &Network) -> Result<f64> {
        let mut total = 0.0;
        let n = self.val_y.len();
        let per = self.val_x.example_len();
        let shape = self.val_x.shape().to_vec();
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let mut s = shape.clone();
            s[0] = end - start;
            let x = Tensor::new(s, self.val_x.data()[start * per..end * per].to_vec())?;
            let logits = net.infer_to(&x, None, self.logits_depth)?;
            total += softmax_cross_entropy(&logits, &self.val_y[start..end])?.0 * (end - start) as f64;
        }
        Ok(total / n as f64)
    }
}

/// Result of `train_classifier`.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub outcome: TrainOutcome,
    /// One record per training example under the selected weights.
    pub train_records: Vec<LogitRecord>,
}

/// Trains with categorical cross-entropy and keeps the best-validation
/// weights. Unknown-labeled examples are rejected under C1.
pub fn train_classifier(
    config: &ClassifierConfig,
    train_set: &[Example],
    validation: &[Example],
) -> Result<TrainedClassifier> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("classifier training split is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::EmptyDataset("classifier validation split is empty".into()));
    }
    let targets = |set: &[Example]| -> Result<Vec<usize>> {
        set.iter().map(|e| target_index(e.label.kind, config.regime, config.num_known)).collect()
    };
    let train_y = targets(train_set)?;
    let val_y = targets(validation)?;
    let first = &train_set[0].features;
    let mut network = build_classifier(config, first.n_frames, first.n_mels)?;
    let mut objective = CrossEntropy {
        train_x: train_set.iter().map(|e| e.features.clone()).collect(),
        train_y,
        val_x: stack_features(validation.iter().map(|e| &e.features))?,
        val_y,
        logits_depth: network.depth() - 1,
    };
    // reject mismatched shapes before the first epoch
    stack_features(objective.train_x.iter())?;
    let outcome = train(&mut network, &mut objective, &config.train)?;
    let classifier = Classifier { network, regime: config.regime, num_known: config.num_known };
    let train_records = classifier.predict_all(train_set)?;
    Ok(TrainedClassifier { classifier, outcome, train_records })
}

fn label_text(kind: LabelKind) -> String {
    match kind {
        LabelKind::Known(c) => c.to_string(),
        LabelKind::Unknown => "unknown".into(),
    }
}

fn parse_label(s: &str) -> Result<LabelKind> {
    if s == "unknown" {
        return Ok(LabelKind::Unknown);
    }
    s.parse().map(LabelKind::Known).map_err(|_| Error::CorruptFile(format!("bad label field {s:?}")))
}

/// Tab-separated dump: id, true label, predicted index, logits, probabilities.
pub fn write_logit_records<W: Write>(records: &[LogitRecord], mut w: W) -> Result<()> {
    let width = records.first().map_or(0, |r| r.width());
    let mut header = vec!["id".to_string(), "true".into(), "predicted".into()];
    header.extend((0..width).map(|i| format!("logit_{i}")));
    header.extend((0..width).map(|i| format!("prob_{i}")));
    writeln!(w, "{}", header.join("\t"))?;
    for r in records {
        if r.width() != width {
            return Err(Error::Shape("logit records have mixed widths".into()));
        }
        let mut fields = vec![r.id.clone(), label_text(r.truth), r.predicted.to_string()];
        fields.extend(r.logits.iter().map(|v| format!("{v:e}")));
        fields.extend(r.probabilities.iter().map(|v| format!("{v:e}")));
        writeln!(w, "{}", fields.join("\t"))?;
    }
    Ok(())
}

pub fn read_logit_records<R: BufRead>(r: R) -> Result<Vec<LogitRecord>> {
    let mut records = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 5 || !(fields.len() - 3).is_multiple_of(2) {
            return Err(Error::CorruptFile(format!("logit line {} has {} fields", n + 1, fields.len())));
        }
        let width = (fields.len() - 3) / 2;
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::CorruptFile(format!("bad number {s:?} on line {}", n + 1)))
        };
        let logits = fields[3..3 + width].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let probabilities = fields[3 + width..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let predicted =
            fields[2].parse().map_err(|_| Error::CorruptFile(format!("bad predicted index on line {}", n + 1)))?;
        records.push(LogitRecord {
            id: fields[0].to_string(),
            truth: parse_label(fields[1])?,
            logits,
            probabilities,
            predicted,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::SceneLabel;
    use proptest::prelude::*;

    #[test]
    fn output_width_follows_regime() {
        let c1 = build_classifier(&ClassifierConfig::new(Regime::C1, 10), 16, 16).unwrap();
        let c2 = build_classifier(&ClassifierConfig::new(Regime::C2, 10), 16, 16).unwrap();
        assert_eq!(c1.output_shape(), &[10]);
        assert_eq!(c2.output_shape(), &[11]);
    }

    #[test]
    fn parameter_count_near_seventy_thousand() {
        let net = build_classifier(&ClassifierConfig::new(Regime::C1, 10), 64, 64).unwrap();
        // 69_472 conv + 832 batch norm + 650 dense
        assert_eq!(net.parameter_count(), 70_954);
    }

    #[test]
    fn small_inputs_pool_to_sixty_four_channels() {
        let net = build_classifier(&ClassifierConfig::new(Regime::C1, 3), 4, 4).unwrap();
        let pooled = net.depth() - 3;
        assert_eq!(net.layer_shape(pooled), &[64]);
        let x = Tensor::zeros(vec![2, 1, 4, 4]);
        assert_eq!(net.infer(&x, None).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn dense_head_matches_matrix_arithmetic() {
        // Zero every conv so each block emits its batch-norm shift; the last
        // shift then becomes the pooled vector fed to the dense layer.
        let mut net = build_classifier(&ClassifierConfig::new(Regime::C1, 2), 8, 8).unwrap();
        let pooled: Vec<f64> = (0..64).map(|i| (i as f64 - 31.5) / 10.0).collect();
        let w: Vec<f64> = (0..128).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect();
        let b = vec![0.25, -0.75];
        {
            let mut params = net.params_mut();
            for block in 0..5 {
                params[block * 4].value.fill(0.0);
                params[block * 4 + 1].value.fill(0.0);
            }
            params[19].value = pooled.clone();
            params[20].value = w.clone();
            params[21].value = b.clone();
        }
        let classifier = Classifier { network: net, regime: Regime::C1, num_known: 2 };
        let logits = classifier.logits(&Tensor::zeros(vec![1, 1, 8, 8])).unwrap();
        for o in 0..2 {
            let expected: f64 = (0..64).map(|i| w[o * 64 + i] * pooled[i]).sum::<f64>() + b[o];
            assert!((logits.data()[o] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_under_c1_is_a_regime_violation() {
        assert!(matches!(target_index(LabelKind::Unknown, Regime::C1, 3), Err(Error::RegimeViolation(_))));
        assert_eq!(target_index(LabelKind::Unknown, Regime::C2, 3).unwrap(), 3);
        let m = FeatureMatrix::new(4, 4, vec![0.0; 16]).unwrap();
        let ex = |kind| Example { id: "a".into(), features: m.clone(), label: SceneLabel { name: "x".into(), kind } };
        let cfg = ClassifierConfig::new(Regime::C1, 2);
        let err = train_classifier(&cfg, &[ex(LabelKind::Unknown)], &[ex(LabelKind::Known(0))]);
        assert!(matches!(err, Err(Error::RegimeViolation(_))));
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let r = LogitRecord::from_logits("x".into(), LabelKind::Known(0), vec![0.3; 5]);
        assert!(r.probabilities.iter().all(|p| (p - 0.2).abs() < 1e-12));
        assert_eq!(r.predicted, 0);
    }

    #[test]
    fn logit_dump_round_trip() {
        let records = vec![
            LogitRecord::from_logits("a".into(), LabelKind::Known(1), vec![0.5, 2.0, -1.0]),
            LogitRecord::from_logits("b".into(), LabelKind::Unknown, vec![1e-17, 3.25, 7.0]),
        ];
        let mut buf = Vec::new();
        write_logit_records(&records, &mut buf).unwrap();
        let back = read_logit_records(&buf[..]).unwrap();
        assert_eq!(back, records);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..8),
            shift in -100.0f64..100.0,
        ) {
            let a = LogitRecord::from_logits("x".into(), LabelKind::Known(0), logits.clone());
            let b = LogitRecord::from_logits("x".into(), LabelKind::Known(0), logits.iter().map(|v| v + shift).collect());
            prop_assert_eq!(a.predicted, b.predicted);
            for (p, q) in a.probabilities.iter().zip(&b.probabilities) {
                prop_assert!((p - q).abs() < 1e-6);
            }
            prop_assert!((softmax(&a.logits).iter().zip(&a.probabilities).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)) < 1e-6);
        }
    }
}
