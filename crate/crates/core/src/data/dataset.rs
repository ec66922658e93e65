use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

/// Feature matrix with integer labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(invalid("features must be a matrix"));
        }
        if features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                expected: vec![features.rows()],
                got: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        features.ensure_finite("dataset features")?;
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Sub-dataset with the given rows, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Indices of each class, in row order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Rows of `parts` stacked in order.
    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("concat of no datasets"))?;
        let (dim, classes) = (first.dim(), first.num_classes);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.num_classes != classes || (!p.is_empty() && p.dim() != dim) {
                return Err(invalid("concat of datasets with different shapes"));
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
        }
        Self::new(Tensor::new(vec![labels.len(), dim], data)?, labels, classes)
    }

    /// Drop labels, keeping the feature matrix and class count.
    pub fn unlabeled(&self) -> Tensor {
        self.features.clone()
    }
}

/// One client's local data after the local/aggregator split.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Local-training part (90%).
    pub local_train: Dataset,
    /// Aggregator-training part (10%).
    pub agg_train: Dataset,
    pub label_counts: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, local_train: Dataset, agg_train: Dataset) -> Self {
        let label_counts = local_train
            .label_counts()
            .iter()
            .zip(agg_train.label_counts())
            .map(|(a, b)| a + b)
            .collect();
        Self {
            client_id,
            local_train,
            agg_train,
            label_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.local_train.len() + self.agg_train.len()
    }

    /// Both parts together, as an iterative-FL client would hold them.
    pub fn full(&self) -> Result<Dataset> {
        Dataset::concat(&[&self.local_train, &self.agg_train])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
