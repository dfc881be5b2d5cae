//! Experiment configuration: one strict JSON document per run.

use std::path::{Path, PathBuf};

use ivi_core::eval::GridSpec;
use ivi_core::infer::TrainLoopConfig;
use ivi_core::models::{Dataset, LatentVariableModel, ModelKind};
use ivi_core::numerics::Rng;
use serde::{Deserialize, Serialize};

use crate::RunError;

/// Rng streams derived from the experiment seed.
pub const DATA_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;
pub const EVAL_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub train: TrainLoopConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

/// The observations `x ~ D` the generator is trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Number of draws from the model marginal `p(x)`.
    #[serde(default = "DataConfig::default_n")]
    pub n: usize,
    /// Explicit observations; replaces the marginal draws when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl DataConfig {
    fn default_n() -> usize {
        10_000
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: Self::default_n(),
            values: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "EvalConfig::default_xs")]
    pub xs: Vec<f64>,
    #[serde(default)]
    pub grid: GridSpec,
    /// q samples per observation for the histogram density.
    #[serde(default = "EvalConfig::default_samples")]
    pub samples: usize,
    /// Held-out joint samples for the flatness diagnostic.
    #[serde(default = "EvalConfig::default_flatness_samples")]
    pub flatness_samples: usize,
    /// Cells per axis of the grid the curl proxy is evaluated on.
    #[serde(default = "EvalConfig::default_curl_cells")]
    pub curl_cells: usize,
}

impl EvalConfig {
    fn default_xs() -> Vec<f64> {
        vec![0.0, 8.0, 50.0]
    }
    fn default_samples() -> usize {
        100_000
    }
    fn default_flatness_samples() -> usize {
        2_000
    }
    fn default_curl_cells() -> usize {
        50
    }

    pub fn curl_grid(&self) -> GridSpec {
        GridSpec {
            n1: self.curl_cells,
            n2: self.curl_cells,
            ..self.grid
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            xs: Self::default_xs(),
            grid: GridSpec::default(),
            samples: Self::default_samples(),
            flatness_samples: Self::default_flatness_samples(),
            curl_cells: Self::default_curl_cells(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn build_model(&self) -> Result<LatentVariableModel, RunError> {
        LatentVariableModel::new(self.model.clone()).map_err(RunError::from_config)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let model = self.build_model()?;
        if model.latent_dim() != 2 {
            return Err(RunError::Config(format!(
                "evaluation grids are 2-D, model has latent_dim {}",
                model.latent_dim()
            )));
        }
        self.train.validate_for(&model).map_err(RunError::from_config)?;
        match &self.data.values {
            Some(v) if v.is_empty() => return Err(RunError::Config("data.values is empty".into())),
            Some(v) if v.iter().any(|x| !x.is_finite()) => {
                return Err(RunError::Config("data.values must be finite".into()))
            }
            None if self.data.n == 0 => return Err(RunError::Config("data.n must be >= 1".into())),
            _ => {}
        }
        if self.eval.xs.is_empty() || self.eval.xs.iter().any(|x| !x.is_finite()) {
            return Err(RunError::Config(
                "eval.xs must be a non-empty list of finite values".into(),
            ));
        }
        self.eval.grid.validate().map_err(RunError::from_config)?;
        if self.eval.curl_cells < 2 {
            return Err(RunError::Config("eval.curl_cells must be >= 2".into()));
        }
        if self.eval.samples == 0 || self.eval.flatness_samples == 0 {
            return Err(RunError::Config("eval sample counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn rng(&self, stream: u64) -> Rng {
        Rng::new(self.seed).fork(stream)
    }

    pub fn dataset(&self, model: &LatentVariableModel) -> Result<Dataset, RunError> {
        match &self.data.values {
            Some(v) => Dataset::new(v.clone()),
            None => Dataset::from_model(model, self.data.n, &mut self.rng(DATA_STREAM)),
        }
        .map_err(RunError::from_config)
    }
}
