//! Labeled feature sets.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::matrixkit::Matrix;

/// Rows of `features` paired with global class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub labels: Vec<u32>,
    pub features: Matrix,
}

impl LabeledFeatures {
    pub fn new(labels: Vec<u32>, features: Matrix) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape(
                "LabeledFeatures::new",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        Ok(Self { labels, features })
    }

    pub fn empty(width: usize) -> Self {
        Self {
            labels: Vec::new(),
            features: Matrix::zeros(0, width),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    /// Distinct labels, ascending.
    pub fn classes(&self) -> Vec<u32> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledFeatures {
        LabeledFeatures {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            features: self.features.select_rows(idx),
        }
    }

    /// Rows whose label satisfies `keep`, in original order.
    pub fn filter(&self, keep: impl Fn(u32) -> bool) -> LabeledFeatures {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.select(&idx)
    }

    pub fn concat(&self, other: &LabeledFeatures) -> Result<LabeledFeatures> {
        let features = self.features.vstack(&other.features)?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(LabeledFeatures { labels, features })
    }
}
