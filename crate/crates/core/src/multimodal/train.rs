use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ConfusionMatrix, MultimodalModel};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Scalar, Tape};
use crate::reconstructor::{TrainReport, TrainSchedule};
use crate::rng::substream;

/// One classifier example: a waveform per modality and a class index.
#[derive(Clone, Debug, PartialEq)]
pub struct ClfExample<T = f32> {
    pub windows: Vec<Vec<T>>,
    pub label: usize,
}

impl<T: Scalar> ClfExample<T> {
    pub fn inputs(&self) -> Vec<&[T]> {
        self.windows.iter().map(Vec::as_slice).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClfOptions {
    /// Weight each class by `n / (classes · count)` in the loss.
    pub class_weighting: bool,
    /// Update only the classification head.
    pub frozen_encoder: bool,
}

fn class_weights<T: Scalar>(examples: &[ClfExample<T>], classes: usize) -> Vec<T> {
    let mut counts = vec![0usize; classes];
    for e in examples {
        counts[e.label] += 1;
    }
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                T::zero()
            } else {
                T::lit(examples.len() as f64 / (classes * c) as f64)
            }
        })
        .collect()
}

/// Mini-batch Adam on the cross-entropy of the class-token head.
pub fn train_classifier<T: Scalar>(
    model: &mut MultimodalModel<T>,
    examples: &[ClfExample<T>],
    schedule: &TrainSchedule,
    options: &ClfOptions,
) -> Result<TrainReport> {
    schedule.validate()?;
    let classes = model.labels().len();
    if let Some(bad) = examples.iter().find(|e| e.label >= classes) {
        return Err(Error::Input(format!("class index {} outside the {} label set", bad.label, model.labels())));
    }
    let mut present: Vec<usize> = examples.iter().map(|e| e.label).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Input(format!(
            "training needs at least two classes, found {}",
            present.len()
        )));
    }
    let weights = options.class_weighting.then(|| class_weights(examples, classes));
    let adam = AdamConfig::with_lr(schedule.lr);
    let mut rng = substream(schedule.seed, "multimodal/shuffle");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    'epochs: for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(schedule.batch_size).enumerate() {
            if schedule.max_steps.is_some_and(|m| report.steps >= m) {
                if batches > 0 {
                    report.epoch_losses.push(total / batches as f64);
                }
                break 'epochs;
            }
            let inputs: Vec<Vec<&[T]>> = chunk.iter().map(|&i| examples[i].inputs()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| examples[i].label).collect();
            let mut tape = Tape::new();
            let logits = model.logits(&mut tape, &inputs)?;
            let loss = tape.cross_entropy(logits, &labels, weights.as_deref())?;
            let value = tape.scalar(loss).as_f64();
            if !value.is_finite() {
                let norm = model.params().iter().map(|(_, t)| t.norm().powi(2)).sum::<f64>().sqrt();
                return Err(Error::Numeric {
                    op: "train_classifier",
                    detail: format!("loss {value} at epoch {epoch} batch {b}; parameter norm {norm:.4e}"),
                });
            }
            let grads = tape.backward(loss)?;
            tape.accumulate_param_grads(&grads, model.params_mut())?;
            schedule.clip(model.params_mut());
            if options.frozen_encoder {
                model.params_mut().adam_step_where(&adam, |n| n.starts_with("mm.head."))?;
            } else {
                model.params_mut().adam_step(&adam)?;
            }
            total += value;
            batches += 1;
            report.steps += 1;
        }
        report.epoch_losses.push(total / batches as f64);
    }
    Ok(report)
}

/// Confusion matrix of argmax predictions.
pub fn evaluate_classifier<T: Scalar>(model: &MultimodalModel<T>, examples: &[ClfExample<T>]) -> Result<ConfusionMatrix> {
    let inputs: Vec<Vec<&[T]>> = examples.iter().map(ClfExample::inputs).collect();
    let preds = model.predict_batch(&inputs)?;
    let truths: Vec<usize> = examples.iter().map(|e| e.label).collect();
    ConfusionMatrix::new(&preds, &truths, model.labels().len())
}
