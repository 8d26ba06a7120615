use std::fmt;

use serde::{Deserialize, Serialize};

use super::{evaluate_classifier, train_classifier, ClfExample, ClfOptions, LabelSet, MultimodalConfig, MultimodalModel};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::reconstructor::{ReconstructorModel, TrainSchedule};

/// Which signals feed the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputVariant {
    PpgOnly,
    EcgOnly,
    ReconEcgOnly,
    PpgEcg,
    PpgReconEcg,
}

impl InputVariant {
    pub const ALL: [InputVariant; 5] = [
        InputVariant::PpgOnly,
        InputVariant::EcgOnly,
        InputVariant::ReconEcgOnly,
        InputVariant::PpgEcg,
        InputVariant::PpgReconEcg,
    ];

    pub fn title(self) -> &'static str {
        match self {
            InputVariant::PpgOnly => "PPG only",
            InputVariant::EcgOnly => "ECG only",
            InputVariant::ReconEcgOnly => "Reconstructed ECG only",
            InputVariant::PpgEcg => "PPG + ECG",
            InputVariant::PpgReconEcg => "PPG + reconstructed ECG",
        }
    }

    pub fn modalities(self) -> usize {
        match self {
            InputVariant::PpgOnly | InputVariant::EcgOnly | InputVariant::ReconEcgOnly => 1,
            InputVariant::PpgEcg | InputVariant::PpgReconEcg => 2,
        }
    }

    pub fn needs_reconstruction(self) -> bool {
        matches!(self, InputVariant::ReconEcgOnly | InputVariant::PpgReconEcg)
    }
}

/// Builds classifier examples for `variant`; `ecg_hat[i]` is the reconstruction of `examples[i]`.
pub fn variant_examples<T: Scalar>(
    variant: InputVariant,
    examples: &[&Example<T>],
    ecg_hat: Option<&[Vec<T>]>,
    labels: LabelSet,
) -> Result<Vec<ClfExample<T>>> {
    if variant.needs_reconstruction() && ecg_hat.is_none() {
        return Err(Error::Config(format!("variant `{}` needs a reconstructor checkpoint", variant.title())));
    }
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let label = e
                .label
                .as_deref()
                .ok_or_else(|| Error::Input(format!("window {}@{} has no label", e.ppg.source.subject_id, e.ppg.source.start)))?;
            let label = labels.index_of(label)?;
            let ppg = e.ppg.values().to_vec();
            let ecg = e.ecg.values().to_vec();
            let hat = || ecg_hat.map(|h| h[i].clone()).expect("checked above");
            let windows = match variant {
                InputVariant::PpgOnly => vec![ppg],
                InputVariant::EcgOnly => vec![ecg],
                InputVariant::ReconEcgOnly => vec![hat()],
                InputVariant::PpgEcg => vec![ppg, ecg],
                InputVariant::PpgReconEcg => vec![ppg, hat()],
            };
            Ok(ClfExample { windows, label })
        })
        .collect()
}

/// Per-class test accuracy of each input variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub labels: LabelSet,
    pub variants: Vec<InputVariant>,
    /// `accuracy[class][variant]`; `None` when the class is absent from the test set.
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub overall: Vec<f64>,
}

impl fmt::Display for AblationTable {
    /// CSV with one row per class, one column per variant, percentages.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "class")?;
        for v in &self.variants {
            write!(f, ",{}", v.title())?;
        }
        writeln!(f)?;
        let cell = |x: Option<f64>| x.map_or("n/a".to_string(), |a| format!("{:.1}", 100.0 * a));
        for (c, row) in self.accuracy.iter().enumerate() {
            write!(f, "{}", self.labels.name(c))?;
            for &a in row {
                write!(f, ",{}", cell(a))?;
            }
            writeln!(f)?;
        }
        write!(f, "overall")?;
        for &a in &self.overall {
            write!(f, ",{}", cell(Some(a)))?;
        }
        writeln!(f)
    }
}

/// Trains and evaluates one classifier per variant on the same split.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run<T: Scalar>(
    train: &[&Example<T>],
    test: &[&Example<T>],
    labels: LabelSet,
    variants: &[InputVariant],
    config: &MultimodalConfig,
    schedule: &TrainSchedule,
    options: &ClfOptions,
    reconstructor: Option<&ReconstructorModel<T>>,
) -> Result<AblationTable> {
    if variants.iter().any(|v| v.needs_reconstruction()) && reconstructor.is_none() {
        return Err(Error::Config("reconstructed-ECG variants need a reconstructor checkpoint".into()));
    }
    let hats = |set: &[&Example<T>]| -> Result<Option<Vec<Vec<T>>>> {
        match reconstructor {
            Some(r) => {
                let ppg: Vec<&[T]> = set.iter().map(|e| e.ppg.values()).collect();
                r.reconstruct_batch(&ppg).map(Some)
            }
            None => Ok(None),
        }
    };
    let (train_hat, test_hat) = (hats(train)?, hats(test)?);
    let mut accuracy = vec![Vec::new(); labels.len()];
    let mut overall = Vec::new();
    for &v in variants {
        let cfg = MultimodalConfig {
            modalities: v.modalities(),
            ..config.clone()
        };
        let mut model = MultimodalModel::new(cfg, labels, schedule.seed)?;
        let tr = variant_examples(v, train, train_hat.as_deref(), labels)?;
        let te = variant_examples(v, test, test_hat.as_deref(), labels)?;
        train_classifier(&mut model, &tr, schedule, options)?;
        let cm = evaluate_classifier(&model, &te)?;
        for (c, a) in cm.per_class_accuracy().into_iter().enumerate() {
            accuracy[c].push(a);
        }
        overall.push(cm.accuracy());
        log::info!("ablation {}: accuracy {:.3}", v.title(), cm.accuracy());
    }
    Ok(AblationTable {
        labels,
        variants: variants.to_vec(),
        accuracy,
        overall,
    })
}
