//! Behavioural descriptors: a network's softmax outputs over every training
//! instance, flattened instance-major.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cgp::{CgpError, Genotype};
use crate::dataset::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeVector {
    values: Vec<f64>,
    n_classes: usize,
}

impl PhenotypeVector {
    /// Runs `g` over `train` and flattens the probability rows.
    pub fn extract(g: &Genotype, train: &Dataset) -> Result<Self, CgpError> {
        if g.config.n_inputs != train.n_features() {
            return Err(CgpError::Dimension {
                expected: g.config.n_inputs,
                got: train.n_features(),
            });
        }
        if g.config.n_outputs != train.n_classes() {
            return Err(CgpError::Arity {
                outputs: g.config.n_outputs,
                classes: train.n_classes(),
            });
        }
        let probs = g.decode().forward(train.features())?;
        let values = probs.transpose().as_slice().to_vec();
        Ok(Self {
            values,
            n_classes: train.n_classes(),
        })
    }

    /// Wraps raw values; `values.len()` must be a multiple of `n_classes`.
    pub fn from_values(values: Vec<f64>, n_classes: usize) -> Option<Self> {
        (n_classes > 0 && values.len().is_multiple_of(n_classes)).then_some(Self { values, n_classes })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_instances(&self) -> usize {
        self.values.len() / self.n_classes
    }

    /// Probabilities of one instance.
    pub fn row(&self, instance: usize) -> &[f64] {
        &self.values[instance * self.n_classes..(instance + 1) * self.n_classes]
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    /// `len v1 v2 ...` with shortest round-trip decimals.
    pub fn to_line(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 20);
        let _ = write!(s, "{}", self.values.len());
        for v in &self.values {
            let _ = write!(s, " {v}");
        }
        s
    }
}
