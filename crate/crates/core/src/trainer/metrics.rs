//! Confusion matrices and balanced accuracy.

use crate::error::{contract_err, Result};

/// `counts[true][pred]`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(contract_err!("metrics need at least one sample"));
        }
        if predictions.len() != labels.len() {
            return Err(contract_err!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            ));
        }
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= num_classes || l >= num_classes {
                return Err(contract_err!(
                    "class index {} outside 0..{num_classes}",
                    p.max(l)
                ));
            }
            counts[l][p] += 1;
        }
        Ok(Self { counts })
    }

    /// Recall per class; `None` for classes absent from the labels.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect()
    }

    pub fn balanced_accuracy(&self) -> f64 {
        let present: Vec<f64> = self.recalls().into_iter().flatten().collect();
        present.iter().sum::<f64>() / present.len() as f64
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        let hit: usize = (0..self.counts.len()).map(|c| self.counts[c][c]).sum();
        hit as f64 / total as f64
    }
}

/// Unweighted mean of per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<f64> {
    Ok(Confusion::new(predictions, labels, num_classes)?.balanced_accuracy())
}

/// Row-wise argmax of `[B, C]` logits; ties go to the lowest index.
pub fn argmax_rows<T: PartialOrd + Copy>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
