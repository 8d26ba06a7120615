//! Multimodal classification over PPG and (reconstructed) ECG: token fusion
//! with modality embeddings and a pinned class token, a shifted-patch
//! encoder, cross-entropy training, confusion matrices, and input ablations.

mod ablation;
mod confusion;
mod labels;
mod model;
mod train;

use std::path::Path;

pub use ablation::{ablation_run, variant_examples, AblationTable, InputVariant};
pub use confusion::ConfusionMatrix;
pub use labels::LabelSet;
pub use model::{argmax, MultimodalConfig, MultimodalModel};
pub use train::{evaluate_classifier, train_classifier, ClfExample, ClfOptions};

use crate::error::Result;
use crate::numerics::Scalar;
use crate::reconstructor::checkpoint::{self, CheckpointHeader};

pub const MULTIMODAL_KIND: &str = "multimodal";

impl<T: Scalar> MultimodalModel<T> {
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            kind: MULTIMODAL_KIND.into(),
            config_hash: self.config().hash(self.labels()),
            seed,
        };
        checkpoint::save(dir, &header, self.params())
    }

    pub fn load(dir: &Path, config: &MultimodalConfig, labels: LabelSet) -> Result<(Self, u64)> {
        let (header, store) = checkpoint::load_matching(dir, MULTIMODAL_KIND, &config.hash(labels))?;
        Ok((Self::from_params(config.clone(), labels, store)?, header.seed))
    }
}
