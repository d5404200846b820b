use std::path::{Path, PathBuf};

use dlsa::cascade::EvalOptions;
use dlsa::classifier::ResidualKind;
use dlsa::data::{SyntheticSpec, HEAD_THRESHOLD};
use dlsa::metrics::NmiNormalization;
use dlsa::trainer::TrainConfig;
use dlsa::{DlsaError, Result};
use serde::{Deserialize, Serialize};

/// Where the features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated by `dlsa gen` into the output directory.
    Synthetic(SyntheticSpec),
    /// Existing DLFT files.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub confusion_bins: usize,
    pub nmi: NmiNormalization,
    pub head_threshold: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            confusion_bins: 20,
            nmi: NmiNormalization::Geometric,
            head_threshold: HEAD_THRESHOLD,
        }
    }
}

impl From<MetricsConfig> for EvalOptions {
    fn from(m: MetricsConfig) -> Self {
        EvalOptions {
            confusion_bins: m.confusion_bins,
            nmi: m.nmi,
            head_threshold: m.head_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Probabilities of sending a sample to its own group.
    pub p: Vec<f64>,
    /// Classifier fitted inside each group.
    pub classifier: ResidualKind,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            p: vec![0.5, 0.7, 0.9, 1.0],
            classifier: ResidualKind::Linear,
        }
    }
}

/// A complete, reproducible run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub stages: usize,
    pub metrics: MetricsConfig,
    pub probe: ProbeConfig,
    pub out: PathBuf,
    /// When set, replaces both the dataset seed and the training seed.
    pub seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SyntheticSpec::standard(0)),
            train: TrainConfig::default(),
            stages: 3,
            metrics: MetricsConfig::default(),
            probe: ProbeConfig::default(),
            out: PathBuf::from("runs/default"),
            seed: None,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale settings for the standard synthetic benchmark: 20 clusters,
    /// three stages and a small flow learning rate suited to summed likelihoods.
    pub fn desk(spec: SyntheticSpec) -> Self {
        let mut train = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 20,
            clusters: 20,
            seed: spec.seed,
            ..TrainConfig::default()
        };
        train.classifier.batch_size = 64;
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(spec),
            train,
            ..ExperimentConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DlsaError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DlsaError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies command-line overrides, then validates.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = Some(seed);
        }
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            if let DatasetSource::Synthetic(spec) = &mut self.dataset {
                spec.seed = seed;
            }
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(s) = o.stages {
            self.stages = s;
        }
        if let Some(k) = o.clusters {
            self.train.clusters = k;
        }
        if let Some(r) = o.filter_frac {
            self.train.filter_fraction = r;
        }
        if let Some(kind) = o.classifier {
            self.train.classifier.residual_kind = kind;
            self.probe.classifier = kind;
        }
        if o.no_bal {
            self.train.lambda_bal = 0.0;
        }
        if o.no_pure {
            self.train.lambda_pure = 0.0;
        }
        if o.no_mle_weight {
            self.train.q = 0.0;
        }
        self.train.validate()?;
        if self.metrics.confusion_bins < 2 {
            return Err(DlsaError::Config("metrics.confusion_bins must be ≥ 2".into()));
        }
        Ok(())
    }

    /// Paths of the training and test files.
    pub fn dataset_paths(&self) -> (PathBuf, PathBuf) {
        match &self.dataset {
            DatasetSource::Synthetic(_) => (self.out.join(TRAIN_FILE), self.out.join(TEST_FILE)),
            DatasetSource::Files { train, test } => (train.clone(), test.clone()),
        }
    }
}

pub const TRAIN_FILE: &str = "train.dlft";
pub const TEST_FILE: &str = "test.dlft";
pub const MODEL_FILE: &str = "model.dlsa";

/// Values given on the command line that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub stages: Option<usize>,
    pub clusters: Option<usize>,
    pub filter_frac: Option<f64>,
    pub classifier: Option<ResidualKind>,
    pub no_bal: bool,
    pub no_pure: bool,
    pub no_mle_weight: bool,
}
