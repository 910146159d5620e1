//! Artifact layout and the fingerprint chain linking pipeline stages.
//!
//! ```text
//! cache_dir/features/<clip id>.feat   raw log-mel features (f32)
//! cache_dir/stats.bin                 standardization statistics
//! checkpoint_dir/classifier.ckpt      + classifier_log.tsv
//! checkpoint_dir/autoencoder.ckpt     + autoencoder_log.tsv
//! checkpoint_dir/openmax.txt
//! report_dir/<backend>/...            summaries, ROC and histogram tables
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use osasc_core::container::{fingerprint_bytes, ArtifactKind, Container};
use osasc_core::features::standardize;
use osasc_core::nn::Network;
use osasc_core::{
    C2aeModel, Classifier, DatasetManifest, Example, FeatureMatrix, LabelKind, LabelSet, OpenmaxModel, Regime, Split,
    StandardizationStats,
};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::InputError;

pub fn fingerprint_of(value: &impl Serialize) -> u64 {
    fingerprint_bytes(&serde_json::to_vec(value).expect("config values serialize"))
}

/// Manifest with the validation split assigned, plus the fingerprint every
/// feature artifact carries.
pub struct Workspace {
    pub cfg: PipelineConfig,
    pub manifest: DatasetManifest,
    pub labels: LabelSet,
    pub features_fp: u64,
}

impl Workspace {
    pub fn open(cfg: &PipelineConfig) -> anyhow::Result<Self> {
        let bytes = std::fs::read(&cfg.paths.manifest)
            .with_context(|| format!("reading manifest {}", cfg.paths.manifest.display()))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| InputError("manifest is not UTF-8".into()))?;
        let mut manifest = DatasetManifest::parse(&text)?;
        if manifest.count(Split::Validation) == 0 {
            manifest = manifest.stratified_split(cfg.dataset.validation_fraction, cfg.seed)?;
        }
        let mut ids = BTreeSet::new();
        for e in &manifest.entries {
            if !ids.insert(e.id()) {
                return Err(InputError(format!("two manifest entries share the clip id `{}`", e.id())).into());
            }
        }
        let labels = LabelSet::new(cfg.known_classes.clone())?;
        let features_fp =
            fingerprint_of(&("features", &cfg.features, &cfg.dataset, cfg.seed, fingerprint_bytes(&bytes)));
        Ok(Self { cfg: cfg.clone(), manifest, labels, features_fp })
    }

    pub fn clip_path(&self, entry_path: &Path) -> PathBuf {
        if entry_path.is_relative() {
            self.cfg.paths.dataset_root.join(entry_path)
        } else {
            entry_path.to_path_buf()
        }
    }

    pub fn features_dir(&self) -> PathBuf {
        self.cfg.paths.cache_dir.join("features")
    }

    pub fn feature_path(&self, id: &str) -> PathBuf {
        self.features_dir().join(format!("{id}.feat"))
    }

    pub fn stats_path(&self) -> PathBuf {
        self.cfg.paths.cache_dir.join("stats.bin")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.cfg.paths.checkpoint_dir.join(name)
    }

    pub fn load_stats(&self) -> anyhow::Result<StandardizationStats> {
        let path = self.stats_path();
        let c = Container::load(&path).with_context(|| format!("loading {}", path.display()))?;
        c.expect(ArtifactKind::Stats, self.features_fp)
            .with_context(|| format!("{} is stale; rerun featurize", path.display()))?;
        Ok(StandardizationStats::from_container(&c)?)
    }

    /// Cached raw features of one clip.
    pub fn load_features(&self, id: &str) -> anyhow::Result<FeatureMatrix> {
        let path = self.feature_path(id);
        let c = Container::load(&path).with_context(|| format!("loading {}", path.display()))?;
        c.expect(ArtifactKind::Features, self.features_fp)
            .with_context(|| format!("{} is stale; rerun featurize", path.display()))?;
        Ok(FeatureMatrix::from_container(&c)?)
    }

    /// Standardized examples of one split, in manifest order. `known_only`
    /// drops unknown-class clips.
    pub fn examples(
        &self,
        split: Split,
        stats: &StandardizationStats,
        known_only: bool,
    ) -> anyhow::Result<Vec<Example>> {
        let mut out = Vec::new();
        for e in self.manifest.entries.iter().filter(|e| e.split == split) {
            let label = self.labels.resolve(&e.label);
            if known_only && label.is_unknown() {
                continue;
            }
            let id = e.id();
            let features = standardize(&self.load_features(&id)?, stats)?;
            out.push(Example { id, features, label });
        }
        Ok(out)
    }

    /// Splits the classifier trains and is fitted on.
    pub fn classifier_examples(&self, split: Split, stats: &StandardizationStats) -> anyhow::Result<Vec<Example>> {
        self.examples(split, stats, self.cfg.regime == Regime::C1)
    }

    pub fn classifier_fp(&self, stats: &StandardizationStats) -> u64 {
        fingerprint_of(&(
            "classifier",
            self.features_fp,
            stats.fingerprint(),
            self.cfg.regime,
            &self.cfg.known_classes,
            &self.cfg.classifier,
            self.cfg.seed,
        ))
    }

    /// The decision threshold is not part of training, so it is left out.
    pub fn autoencoder_fp(&self, stats: &StandardizationStats) -> u64 {
        let a = &self.cfg.autoencoder;
        fingerprint_of(&(
            "autoencoder",
            self.features_fp,
            stats.fingerprint(),
            &self.cfg.known_classes,
            (a.epochs, a.batch_size, a.learning_rate, a.correct_weight, a.wrong_weight),
            self.cfg.seed,
        ))
    }

    pub fn openmax_fp(&self, classifier_fp: u64) -> u64 {
        let o = &self.cfg.openmax;
        fingerprint_of(&("openmax", classifier_fp, o.tail_size, o.alpha, o.euclid_weight, o.cosine_weight))
    }

    pub fn load_classifier(&self, stats: &StandardizationStats) -> anyhow::Result<(Classifier, u64)> {
        let fp = self.classifier_fp(stats);
        let path = self.checkpoint("classifier.ckpt");
        let c = Container::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let network = Network::from_container(&c, fp)
            .with_context(|| format!("{} does not match the current config; retrain", path.display()))?;
        let classifier = Classifier { network, regime: self.cfg.regime, num_known: self.cfg.num_known() };
        let width = classifier.network.output_shape().iter().product::<usize>();
        if width != classifier.width() {
            return Err(
                InputError(format!("classifier has {width} outputs, config implies {}", classifier.width())).into()
            );
        }
        Ok((classifier, fp))
    }

    pub fn load_autoencoder(&self, stats: &StandardizationStats) -> anyhow::Result<(C2aeModel, u64)> {
        let fp = self.autoencoder_fp(stats);
        let path = self.checkpoint("autoencoder.ckpt");
        let c = Container::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let network = Network::from_container(&c, fp)
            .with_context(|| format!("{} does not match the current config; retrain", path.display()))?;
        Ok((C2aeModel::from_network(network, stats.fingerprint())?, fp))
    }

    pub fn load_openmax(&self, classifier_fp: u64) -> anyhow::Result<(OpenmaxModel, u64)> {
        let fp = self.openmax_fp(classifier_fp);
        let path = self.checkpoint("openmax.txt");
        let model = OpenmaxModel::load(&path, fp)
            .with_context(|| format!("loading {}; refit if the config changed", path.display()))?;
        Ok((model, fp))
    }

    pub fn class_name(&self, kind: LabelKind) -> String {
        match kind {
            LabelKind::Known(c) => self.cfg.known_classes[c].clone(),
            LabelKind::Unknown => "unknown".into(),
        }
    }
}
