//! Pipeline configuration: a sectioned TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use osasc_core::dataio::{SynthSettings, SyntheticClass};
use osasc_core::nn::{AdamConfig, TrainConfig};
use osasc_core::openmax::DivergenceConfig;
use osasc_core::{C2aeConfig, ClassifierConfig, FeatureConfig, OpenmaxConfig, Regime, ThresholdPolicy};
use serde::{Deserialize, Serialize};

use crate::InputError;

pub const CACHE_DIR_ENV: &str = "OSASC_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_regime")]
    pub regime: Regime,
    pub known_classes: Vec<String>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub synthesis: Option<SynthesisSection>,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub autoencoder: AutoencoderSection,
    #[serde(default)]
    pub threshold: ThresholdSection,
    #[serde(default)]
    pub openmax: OpenmaxSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn default_regime() -> Regime {
    Regime::C1
}

/// Relative paths are resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset_root: PathBuf,
    pub manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset_root: "data".into(),
            manifest: "data/manifest.tsv".into(),
            cache_dir: "work/cache".into(),
            checkpoint_dir: "work/models".into(),
            report_dir: "work/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Share of each class's training clips moved to validation when the
    /// manifest names no validation clips.
    pub validation_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { validation_fraction: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub log_floor: f64,
    pub std_floor: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        let f = FeatureConfig::default();
        Self {
            sample_rate: 44_100,
            window_size: f.window_size,
            hop: f.hop,
            n_mels: f.n_mels,
            log_floor: f.log_floor,
            std_floor: f.std_floor,
        }
    }
}

impl FeatureSection {
    pub fn extraction(&self) -> FeatureConfig {
        FeatureConfig {
            window_size: self.window_size,
            hop: self.hop,
            n_mels: self.n_mels,
            log_floor: self.log_floor,
            std_floor: self.std_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    /// Clip length in seconds.
    pub duration: f64,
    pub clips_per_class: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub classes: Vec<SyntheticClass>,
}

fn default_test_fraction() -> f64 {
    0.25
}

impl SynthesisSection {
    pub fn settings(&self, sample_rate: u32) -> SynthSettings {
        SynthSettings { sample_rate, duration: self.duration }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 32, learning_rate: 1e-3, bn_momentum: 0.9, bn_epsilon: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Reconstruction MAE below which a prediction is accepted.
    pub threshold: f64,
    pub correct_weight: f64,
    pub wrong_weight: f64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        let c = C2aeConfig::default();
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            threshold: c.threshold,
            correct_weight: c.correct_weight,
            wrong_weight: c.wrong_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSection {
    pub epsilons: Vec<f64>,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        Self { epsilons: vec![0.5, 0.6, 0.7] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenmaxSection {
    pub tail_size: usize,
    /// Defaults to `min(10, outputs)`.
    pub alpha: Option<usize>,
    pub euclid_weight: f64,
    pub cosine_weight: f64,
    /// Optional extra rejection when the winning revised probability is low.
    pub epsilon: Option<f64>,
}

impl Default for OpenmaxSection {
    fn default() -> Self {
        let d = DivergenceConfig::default();
        Self {
            tail_size: 20,
            alpha: None,
            euclid_weight: d.euclid_weight,
            cosine_weight: d.cosine_weight,
            epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub histogram_bins: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { histogram_bins: 20 }
    }
}

impl PipelineConfig {
    /// Reads `path`, applies `key=value` overrides (dotted keys, TOML values;
    /// bare words are taken as strings), resolves relative paths and
    /// validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, overrides)
    }

    pub fn parse(text: &str, base: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| InputError(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig =
            table.try_into().map_err(|e: toml::de::Error| InputError(format!("config: {e}")))?;
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            if !dir.is_empty() {
                cfg.paths.cache_dir = dir.into();
            }
        }
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let bad = |msg: String| -> anyhow::Result<()> { Err(InputError(msg).into()) };
        if self.known_classes.is_empty() {
            return bad("known_classes must name at least one class".into());
        }
        let mut names = self.known_classes.clone();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("known_classes contains duplicates".into());
        }
        let k = self.known_classes.len();
        for &eps in &self.threshold.epsilons {
            ThresholdPolicy::new(eps, self.regime, k).map_err(|e| InputError(e.to_string()))?;
        }
        if self.threshold.epsilons.is_empty() {
            return bad("threshold.epsilons is empty".into());
        }
        self.c2ae_config().validate().map_err(|e| InputError(e.to_string()))?;
        self.openmax_config().divergence.validate().map_err(|e| InputError(e.to_string()))?;
        if !(self.dataset.validation_fraction > 0.0 && self.dataset.validation_fraction < 1.0) {
            return bad("dataset.validation_fraction must lie in (0, 1)".into());
        }
        if self.evaluation.histogram_bins < 2 {
            return bad("evaluation.histogram_bins must be at least 2".into());
        }
        for (name, epochs, batch) in [
            ("classifier", self.classifier.epochs, self.classifier.batch_size),
            ("autoencoder", self.autoencoder.epochs, self.autoencoder.batch_size),
        ] {
            if epochs == 0 || batch == 0 {
                return bad(format!("{name}: epochs and batch_size must be positive"));
            }
        }
        if let Some(s) = &self.synthesis {
            if s.clips_per_class == 0 || !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
                return bad("synthesis: clips_per_class must be positive and test_fraction in (0, 1)".into());
            }
            let settings = s.settings(self.features.sample_rate);
            for c in &s.classes {
                c.validate(&settings).map_err(|e| InputError(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        let c = &self.classifier;
        ClassifierConfig {
            train: train_config(c.epochs, c.batch_size, c.learning_rate, self.seed),
            bn_momentum: c.bn_momentum,
            bn_epsilon: c.bn_epsilon,
            ..ClassifierConfig::new(self.regime, self.num_known())
        }
    }

    pub fn c2ae_config(&self) -> C2aeConfig {
        let a = &self.autoencoder;
        C2aeConfig {
            threshold: a.threshold,
            correct_weight: a.correct_weight,
            wrong_weight: a.wrong_weight,
            train: train_config(a.epochs, a.batch_size, a.learning_rate, self.seed.wrapping_add(1)),
        }
    }

    pub fn openmax_config(&self) -> OpenmaxConfig {
        let o = &self.openmax;
        OpenmaxConfig {
            tail_size: o.tail_size,
            alpha: o.alpha,
            divergence: DivergenceConfig { euclid_weight: o.euclid_weight, cosine_weight: o.cosine_weight },
        }
    }
}

fn train_config(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size, adam: AdamConfig { learning_rate, ..AdamConfig::default() }, seed }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.dataset_root,
            &mut self.manifest,
            &mut self.cache_dir,
            &mut self.checkpoint_dir,
            &mut self.report_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(InputError(format!("override {assignment:?} is not key=value")));
    };
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        let entry = current.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = match entry {
            toml::Value::Table(t) => t,
            _ => bail!(InputError(format!("override {key:?}: `{part}` is not a section"))),
        };
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 3\nknown_classes = [\"a\", \"b\", \"c\"]\n";

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = PipelineConfig::parse(MINIMAL, Path::new("/base"), &[]).unwrap();
        assert_eq!(cfg.regime, Regime::C1);
        assert_eq!(cfg.paths.cache_dir, Path::new("/base/work/cache"));
        assert_eq!(cfg.threshold.epsilons, vec![0.5, 0.6, 0.7]);
        assert_eq!(cfg.openmax.tail_size, 20);
        assert_eq!(cfg.autoencoder.threshold, 0.3);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(PipelineConfig::parse("known_classes = [\"a\"]", Path::new("."), &[]).is_err());
    }

    #[test]
    fn overrides_are_typed() {
        let o = [
            "regime=c2".to_string(),
            "threshold.epsilons=[0.4, 0.8]".into(),
            "autoencoder.threshold=0.25".into(),
            "paths.report_dir=/tmp/r".into(),
        ];
        let cfg = PipelineConfig::parse(MINIMAL, Path::new("."), &o).unwrap();
        assert_eq!(cfg.regime, Regime::C2);
        assert_eq!(cfg.threshold.epsilons, vec![0.4, 0.8]);
        assert_eq!(cfg.autoencoder.threshold, 0.25);
        assert_eq!(cfg.paths.report_dir, Path::new("/tmp/r"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_input_errors() {
        for o in [
            "classifier.epoch=3",
            "threshold.epsilons=[0.2]",
            "autoencoder.wrong_weight=0.5",
            "evaluation.histogram_bins=1",
        ] {
            let err = PipelineConfig::parse(MINIMAL, Path::new("."), &[o.to_string()]).unwrap_err();
            assert!(err.downcast_ref::<InputError>().is_some(), "{o}: {err:#}");
        }
    }
}
