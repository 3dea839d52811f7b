//! Mixture-of-Gaussians classification data.
//!
//! Class `c` has mean `separation · e_c` for `c < dim` and
//! `−separation · e_{c−dim}` otherwise, so up to `2·dim` classes get distinct
//! means. A row of class `c` is `mean_c + noise · N(0, I)`. Labels are drawn
//! from `class_weights` (uniform when empty).

use crate::data::{DataError, SupervisedDataset};
use crate::policy::sample_from;
use crate::rng::RngState;

use super::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub class_weights: Vec<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 10,
            classes: 5,
            separation: 2.0,
            noise: 1.0,
            class_weights: Vec::new(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        if self.dim == 0 || self.classes < 2 {
            return bad(format!(
                "need dim >= 1 and classes >= 2, got {} and {}",
                self.dim, self.classes
            ));
        }
        if self.classes > 2 * self.dim {
            return bad(format!(
                "at most 2 * dim = {} classes have distinct means",
                2 * self.dim
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !self.separation.is_finite() {
            return bad("noise must be finite and >= 0, separation finite".into());
        }
        if !self.class_weights.is_empty() {
            if self.class_weights.len() != self.classes {
                return bad(format!(
                    "{} class weights for {} classes",
                    self.class_weights.len(),
                    self.classes
                ));
            }
            if self.class_weights.iter().any(|w| !(*w >= 0.0))
                || self.class_weights.iter().sum::<f64>() <= 0.0
            {
                return bad("class weights must be non-negative with a positive sum".into());
            }
        }
        Ok(())
    }

    pub fn class_probs(&self) -> Vec<f64> {
        if self.class_weights.is_empty() {
            return vec![1.0 / self.classes as f64; self.classes];
        }
        let total: f64 = self.class_weights.iter().sum();
        self.class_weights.iter().map(|w| w / total).collect()
    }

    pub fn mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        if class < self.dim {
            m[class] = self.separation;
        } else {
            m[class - self.dim] = -self.separation;
        }
        m
    }
}

pub fn generate_synthetic(
    spec: &SyntheticSpec,
    rows: usize,
    seed: u64,
) -> Result<SupervisedDataset, HarnessError> {
    spec.validate()?;
    let mut rng = RngState::new(seed);
    let probs = spec.class_probs();
    let means: Vec<Vec<f64>> = (0..spec.classes).map(|c| spec.mean(c)).collect();
    let mut features = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let c = sample_from(&probs, &mut rng);
        features.push(
            means[c]
                .iter()
                .map(|m| m + spec.noise * rng.standard_normal())
                .collect(),
        );
        labels.push(c);
    }
    SupervisedDataset::new(features, labels, spec.classes).map_err(|e: DataError| e.into())
}
