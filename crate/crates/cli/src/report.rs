use std::collections::BTreeMap;
use std::path::Path;

use performer_core::multimodal::{ConfusionMatrix, LabelSet};
use performer_core::Result;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseStats {
    pub mean: f64,
    pub std: f64,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub labels: Vec<String>,
    /// Row-normalized: row = true class, column = predicted class.
    pub matrix: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
    pub accuracy: f64,
}

impl ConfusionReport {
    pub fn new(cm: &ConfusionMatrix, labels: LabelSet) -> Self {
        Self {
            labels: labels.owned_names(),
            matrix: cm.row_normalized::<f64>(),
            counts: cm.counts().to_vec(),
            accuracy: cm.accuracy(),
        }
    }
}

/// Outcome of one command, written as `report.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub epoch_losses: Vec<f64>,
    /// Per split name.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub rmse: BTreeMap<String, RmseStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck_max_rel_error: Option<f64>,
}

impl EvalReport {
    pub fn new(task: &str, config_hash: String, seed: u64) -> Self {
        Self {
            task: task.into(),
            config_hash,
            seed,
            wall_clock_s: 0.0,
            model_hash: None,
            epoch_losses: Vec::new(),
            rmse: BTreeMap::new(),
            confusion: None,
            gradcheck_max_rel_error: None,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("report.toml"), self.to_toml())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| performer_core::Error::Input(format!("report: {e}")))
    }
}
