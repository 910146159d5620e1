//! Open-set acoustic scene classification: log-mel features, a small CNN
//! classifier, and three open-set back-ends (softmax thresholding, Openmax and
//! a class-conditioned autoencoder) with their evaluation metrics.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod c2ae;
pub mod classifier;
pub mod container;
pub mod dataio;
pub mod decision;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod nn;
pub mod openmax;
pub mod thresholding;

pub use c2ae::{C2aeConfig, C2aeModel};
pub use classifier::{Classifier, ClassifierConfig, LogitRecord, Regime};
pub use dataio::{AudioClip, DatasetManifest, Example, LabelKind, LabelSet, SceneLabel, Split};
pub use decision::{OpenSetDecision, Outcome};
pub use error::{Error, Result};
pub use evaluation::{DcaseScore, EvaluationReport};
pub use features::{FeatureConfig, FeatureMatrix, FeaturePipeline, StandardizationStats};
pub use openmax::{OpenmaxConfig, OpenmaxModel};
pub use thresholding::ThresholdPolicy;
