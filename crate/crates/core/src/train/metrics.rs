use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Confusion matrix (rows are truth, columns predictions) and the summary
/// accuracies derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: Vec<Vec<u64>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; 0 for classes absent from the evaluated pixels.
    pub per_class_acc: Vec<f64>,
}

impl EvalReport {
    /// Builds a report from `(truth, prediction)` class indices in `0..K`.
    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (t, p) in pairs {
            if t >= classes || p >= classes {
                return Err(Error::Label {
                    label: t.max(p),
                    classes,
                });
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Eval("confusion matrix must be square".into()));
        }
        let n: u64 = confusion.iter().flatten().sum();
        if n == 0 {
            return Err(Error::Eval("no pixels to evaluate".into()));
        }
        let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..k).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();

        let per_class_acc: Vec<f64> = (0..k)
            .map(|c| {
                if rows[c] == 0 {
                    0.0
                } else {
                    confusion[c][c] as f64 / rows[c] as f64
                }
            })
            .collect();
        let present: Vec<usize> = (0..k).filter(|&c| rows[c] > 0).collect();
        let aa = present.iter().map(|&c| per_class_acc[c]).sum::<f64>() / present.len() as f64;

        let oa = trace as f64 / n as f64;
        let chance: u128 = rows
            .iter()
            .zip(&cols)
            .map(|(&r, &c)| r as u128 * c as u128)
            .sum();
        let pe = chance as f64 / (n as u128 * n as u128) as f64;
        let kappa = if pe >= 1.0 {
            // A single class on both sides: agreement is total or absent.
            if trace == n {
                1.0
            } else {
                0.0
            }
        } else {
            (oa - pe) / (1.0 - pe)
        };
        Ok(Self {
            confusion,
            oa,
            aa,
            kappa,
            per_class_acc,
        })
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}
