//! Run configuration file: `[model]`, `[train]`, `[data]` and `[task]` sections.

use std::path::{Path, PathBuf};

use performer_core::data::{CorpusSpec, SplitFractions};
use performer_core::multimodal::{ClfOptions, InputVariant, LabelSet, MultimodalConfig};
use performer_core::preprocess::Passbands;
use performer_core::reconstructor::TrainSchedule;
use performer_core::spa::StageConfig;
use performer_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: StageConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub task: TaskSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_steps: Option<usize>,
    pub grad_clip: Option<f64>,
    pub class_weighting: bool,
    pub frozen_encoder: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        Self {
            lr: s.lr,
            epochs: s.epochs,
            batch_size: s.batch_size,
            seed: s.seed,
            max_steps: s.max_steps,
            grad_clip: s.grad_clip,
            class_weighting: false,
            frozen_encoder: false,
        }
    }
}

impl TrainSection {
    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            max_steps: self.max_steps,
            grad_clip: self.grad_clip,
        }
    }

    pub fn clf_options(&self) -> ClfOptions {
        ClfOptions {
            class_weighting: self.class_weighting,
            frozen_encoder: self.frozen_encoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory holding `manifest.csv` and signal files; synthesized in memory when absent.
    pub dir: Option<PathBuf>,
    /// Sample rate forced onto every input file.
    pub hz: Option<f64>,
    pub split: SplitFractions,
    pub synth: CorpusSpec,
    pub ppg_band: [f64; 2],
    pub ecg_band: [f64; 2],
}

impl Default for DataSection {
    fn default() -> Self {
        let b = Passbands::default();
        Self {
            dir: None,
            hz: None,
            split: SplitFractions::default(),
            synth: CorpusSpec::default(),
            ppg_band: [b.ppg.0, b.ppg.1],
            ecg_band: [b.ecg.0, b.ecg.1],
        }
    }
}

impl DataSection {
    pub fn passbands(&self) -> Passbands {
        Passbands {
            ppg: (self.ppg_band[0], self.ppg_band[1]),
            ecg: (self.ecg_band[0], self.ecg_band[1]),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Reconstruct,
    Classify,
    Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub labels: LabelSet,
    /// Classifier input for `train-clf`, `classify` and `evaluate`.
    pub variant: InputVariant,
    /// Columns of the ablation table.
    pub variants: Vec<InputVariant>,
    pub classifier: MultimodalConfig,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::Reconstruct,
            labels: LabelSet::Cvd4,
            variant: InputVariant::PpgReconEcg,
            variants: InputVariant::ALL.to_vec(),
            classifier: MultimodalConfig::default(),
        }
    }
}

impl TaskSection {
    /// Classifier geometry with the modality count of `variant`.
    pub fn classifier_for(&self, variant: InputVariant) -> MultimodalConfig {
        MultimodalConfig {
            modalities: variant.modalities(),
            ..self.classifier.clone()
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.schedule().validate()?;
        self.data.split.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.task.classifier.validate()?;
        if let Some(n) = self.data.synth.n_classes {
            if n != self.task.labels.len() {
                return Err(Error::Config(format!(
                    "data.synth.n_classes = {n} but the {} label set has {} classes",
                    self.task.labels,
                    self.task.labels.len()
                )));
            }
        }
        Ok(())
    }

    /// Model geometry, replaced by the single-stage baseline when `fixed_patch` is set.
    pub fn stage_config(&self, fixed_patch: Option<usize>) -> Result<StageConfig> {
        match fixed_patch {
            Some(n) => self.model.fixed_patch(n),
            None => Ok(self.model.clone()),
        }
    }

    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("plain config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved().as_bytes()))
    }

    /// Writes `config.resolved.toml` and `config.hash` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved.toml"), self.resolved())?;
        std::fs::write(dir.join("config.hash"), format!("{}\n", self.hash()))?;
        Ok(())
    }
}
