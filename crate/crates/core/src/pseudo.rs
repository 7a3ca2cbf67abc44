//! Ensemble pseudo-labels for the unlabeled target domain.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{DampError, Result};
use crate::losses::ClassProbabilities;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    /// `epoch / E`.
    #[default]
    Linear,
    /// `(1 - cos(pi * epoch / E)) / 2`.
    Cosine,
    /// 0 for the first half of training, 1 afterwards.
    Step,
}

/// Ensemble weight of the model prediction at `epoch` out of `total`.
/// Epochs beyond `total` clamp to 1.
pub fn alpha_schedule(schedule: AlphaSchedule, epoch: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(DampError::Config("alpha schedule needs at least one epoch".into()));
    }
    if epoch > total {
        warn!("alpha requested for epoch {epoch} beyond {total}; clamping to 1");
        return Ok(1.0);
    }
    let x = epoch as f64 / total as f64;
    Ok(match schedule {
        AlphaSchedule::Linear => x,
        AlphaSchedule::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * x).cos()),
        AlphaSchedule::Step => {
            if 2 * epoch >= total {
                1.0
            } else {
                0.0
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord<T: Scalar> {
    pub naive_soft: ClassProbabilities<T>,
    pub model_soft: ClassProbabilities<T>,
    pub ensemble_soft: ClassProbabilities<T>,
    pub hard_label: usize,
    /// Model weak-view probability at `hard_label`.
    pub confidence: T,
    pub accepted: bool,
}

/// `(1 - alpha) * naive + alpha * model`, elementwise.
pub fn ensemble<T: Scalar>(
    naive: &ClassProbabilities<T>,
    model: &ClassProbabilities<T>,
    alpha: T,
) -> Result<ClassProbabilities<T>> {
    if naive.classes() != model.classes() {
        return Err(DampError::Invalid(format!(
            "naive has {} classes, model has {}",
            naive.classes(),
            model.classes()
        )));
    }
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(DampError::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let probs = if alpha == T::zero() {
        naive.probs.clone()
    } else if alpha == T::one() {
        model.probs.clone()
    } else {
        naive
            .probs
            .iter()
            .zip(&model.probs)
            .map(|(&a, &b)| (T::one() - alpha) * a + alpha * b)
            .collect()
    };
    Ok(ClassProbabilities { probs })
}

pub fn make_record<T: Scalar>(
    naive: ClassProbabilities<T>,
    model: ClassProbabilities<T>,
    alpha: T,
    threshold: T,
) -> Result<PseudoLabelRecord<T>> {
    let ens = ensemble(&naive, &model, alpha)?;
    let hard_label = ens.argmax();
    let confidence = model.get(hard_label);
    Ok(PseudoLabelRecord {
        naive_soft: naive,
        model_soft: model,
        ensemble_soft: ens,
        hard_label,
        confidence,
        accepted: confidence >= threshold,
    })
}

/// Labels a batch from precomputed naive and model predictions.
pub fn label_batch<T: Scalar>(
    naive: Vec<ClassProbabilities<T>>,
    model: Vec<ClassProbabilities<T>>,
    alpha: T,
    threshold: T,
) -> Result<Vec<PseudoLabelRecord<T>>> {
    if naive.len() != model.len() {
        return Err(DampError::Invalid(format!(
            "{} naive vs {} model predictions",
            naive.len(),
            model.len()
        )));
    }
    naive
        .into_iter()
        .zip(model)
        .map(|(n, m)| make_record(n, m, alpha, threshold))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp(p: &[f64]) -> ClassProbabilities<f64> {
        ClassProbabilities { probs: p.to_vec() }
    }

    #[test]
    fn schedule_endpoints() {
        for s in [AlphaSchedule::Linear, AlphaSchedule::Cosine, AlphaSchedule::Step] {
            assert_eq!(alpha_schedule(s, 0, 30).unwrap(), 0.0);
            assert_eq!(alpha_schedule(s, 30, 30).unwrap(), 1.0);
            assert_eq!(alpha_schedule(s, 31, 30).unwrap(), 1.0);
            let mut prev = 0.0;
            for e in 0..=30 {
                let a = alpha_schedule(s, e, 30).unwrap();
                assert!(a >= prev);
                prev = a;
            }
        }
        assert_eq!(alpha_schedule(AlphaSchedule::Linear, 15, 30).unwrap(), 0.5);
        assert!(alpha_schedule(AlphaSchedule::Linear, 0, 0).is_err());
    }

    #[test]
    fn tie_goes_to_lower_class() {
        let r = make_record(cp(&[0.8, 0.2]), cp(&[0.2, 0.8]), 0.5, 0.6).unwrap();
        assert_eq!(r.ensemble_soft.probs, vec![0.5, 0.5]);
        assert_eq!(r.hard_label, 0);
        assert_eq!(r.confidence, 0.2);
        assert!(!r.accepted);
    }

    #[test]
    fn endpoints_are_exact() {
        let n = cp(&[0.7, 0.2, 0.1]);
        let m = cp(&[0.1, 0.3, 0.6]);
        assert_eq!(ensemble(&n, &m, 0.0).unwrap(), n);
        assert_eq!(ensemble(&n, &m, 1.0).unwrap(), m);
        assert!(ensemble(&n, &m, 1.5).is_err());
        assert!(label_batch::<f64>(vec![], vec![], 0.3, 0.5).unwrap().is_empty());
    }
}
