use num_traits::{FromPrimitive, Num};

use crate::error::{Error, Result};

/// Counts of (true class, predicted class).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], truths: &[usize], n_classes: usize) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(Error::Input(format!(
                "{} predictions for {} ground-truth labels",
                preds.len(),
                truths.len()
            )));
        }
        if preds.is_empty() {
            return Err(Error::Input("confusion matrix of zero samples".into()));
        }
        let mut counts = vec![vec![0u64; n_classes]; n_classes];
        for (&p, &t) in preds.iter().zip(truths) {
            if p >= n_classes || t >= n_classes {
                return Err(Error::Input(format!("class index outside 0..{n_classes}")));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    /// Entry `(i, j)`: share of true-class-`i` samples predicted as `j`. Empty rows stay zero.
    pub fn row_normalized<F: Num + FromPrimitive + Clone>(&self) -> Vec<Vec<F>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| {
                        if total == 0 {
                            F::zero()
                        } else {
                            F::from_u64(c).unwrap() / F::from_u64(total).unwrap()
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().flatten().sum();
        let hits: u64 = (0..self.n_classes()).map(|i| self.counts[i][i]).sum();
        hits as f64 / total as f64
    }

    /// Diagonal of the row-normalized matrix; `None` for classes absent from the truths.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row[i] as f64 / total as f64)
            })
            .collect()
    }
}
