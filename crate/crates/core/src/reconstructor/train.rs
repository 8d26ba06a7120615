use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ReconstructorModel;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, ParamStore, Scalar, Tape};
use crate::preprocess::SignalWindow;
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Rescales gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            max_steps: None,
            grad_clip: None,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies [`TrainSchedule::grad_clip`] to accumulated gradients.
    pub fn clip<T: Scalar>(&self, store: &mut ParamStore<T>) {
        if let Some(c) = self.grad_clip {
            let norm = store.grad_norm();
            if norm > c {
                store.scale_grads(T::lit(c / norm));
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss of every epoch (a truncated final epoch included).
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Mini-batch Adam on the per-window L1 loss. Batches are reshuffled every epoch.
pub fn train_reconstructor<T: Scalar>(
    model: &mut ReconstructorModel<T>,
    pairs: &[(SignalWindow<T>, SignalWindow<T>)],
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    schedule.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    let adam = AdamConfig::with_lr(schedule.lr);
    let mut rng = substream(schedule.seed, "reconstructor/shuffle");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
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
            let ppg: Vec<&[T]> = chunk.iter().map(|&i| pairs[i].0.values()).collect();
            let ecg: Vec<&[T]> = chunk.iter().map(|&i| pairs[i].1.values()).collect();
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, &ppg, &ecg)?;
            let value = tape.scalar(loss).as_f64();
            let grads = tape.backward(loss)?;
            tape.accumulate_param_grads(&grads, model.params_mut())?;
            let grad_norm = model.params().grad_norm();
            if !value.is_finite() || !grad_norm.is_finite() {
                let param_norm = model.params().iter().map(|(_, t)| t.norm().powi(2)).sum::<f64>().sqrt();
                return Err(Error::Numeric {
                    op: "train_reconstructor",
                    detail: format!(
                        "loss {value} at epoch {epoch} batch {b}; parameter norm {param_norm:.4e}, gradient norm {grad_norm:.4e}"
                    ),
                });
            }
            schedule.clip(model.params_mut());
            model.params_mut().adam_step(&adam)?;
            total += value;
            batches += 1;
            report.steps += 1;
        }
        let mean = total / batches as f64;
        log::info!("epoch {epoch}: mean loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
