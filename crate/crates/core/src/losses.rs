//! Cosine classification heads and the training losses.
//!
//! Value-level functions operate on plain probabilities and embeddings; the
//! `*_tape` variants build the same quantities on an autodiff tape for
//! training. Log arguments that are not produced by a log-softmax are
//! floored at [`LOG_FLOOR`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DampError, Result};
use crate::prompter::{PromptedBatch, PromptedPair};
use crate::scalar::Scalar;
use crate::tensor::{cosine, softmax, Matrix};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_i: f64,
    pub tau: f64,
    /// Weight of the source-batch contrastive term inside `L_idc`.
    pub idc_source_weight: f64,
    /// Weight of the target-batch contrastive term inside `L_idc`.
    pub idc_target_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_i: 1.0,
            tau: 0.01,
            idc_source_weight: 1.0,
            idc_target_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DampError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda_c < 0.0 || self.lambda_i < 0.0 || self.idc_source_weight < 0.0 || self.idc_target_weight < 0.0 {
            return Err(DampError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Softmax output over `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities<T: Scalar> {
    pub probs: Vec<T>,
}

impl<T: Scalar> ClassProbabilities<T> {
    pub fn from_logits(logits: &[T]) -> Self {
        Self { probs: softmax(logits) }
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![T::one() / T::of(k as f64); k],
        }
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn get(&self, k: usize) -> T {
        self.probs[k]
    }
}

/// Ties resolve to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn cos_or_err<T: Scalar>(a: &[T], b: &[T], what: &str) -> Result<T> {
    cosine(a, b).ok_or_else(|| DampError::Invalid(format!("{what}: zero-norm embedding, cosine undefined")))
}

fn check_classes(k: usize) -> Result<()> {
    if k < 2 {
        return Err(DampError::Invalid(format!("classification needs K >= 2, got {k}")));
    }
    Ok(())
}

/// Softmax over `cos(v, s_k) / tau` for the rows `s_k` of `s`.
pub fn zero_shot_classify<T: Scalar>(v: &[T], s: &Matrix<T>, tau: T) -> Result<ClassProbabilities<T>> {
    check_classes(s.rows())?;
    let logits = (0..s.rows())
        .map(|k| Ok(cos_or_err(v, s.row(k), "zero_shot_classify")? / tau))
        .collect::<Result<Vec<T>>>()?;
    Ok(ClassProbabilities::from_logits(&logits))
}

/// Prompted head: softmax over `cos(v', s'_k) / tau`.
pub fn classify<T: Scalar>(pair: &PromptedPair<T>, tau: T) -> Result<ClassProbabilities<T>> {
    zero_shot_classify(&pair.v_prime, &pair.s_prime, tau)
}

/// Instance-discrimination loss for pairs drawn from one domain batch.
pub fn l_idc<T: Scalar>(batch: &[PromptedPair<T>], tau: T) -> Result<T> {
    if batch.is_empty() {
        return Err(DampError::Invalid("l_idc needs a non-empty batch".into()));
    }
    let b = batch.len();
    let mut sim = Matrix::zeros(b, b);
    for (a, pa) in batch.iter().enumerate() {
        let k = pa.s_prime.rows();
        for (j, pb) in batch.iter().enumerate() {
            let mut acc = T::zero();
            for c in 0..k {
                acc += cos_or_err(pa.s_prime.row(c), &pb.v_prime, "l_idc")?;
            }
            sim.set(a, j, acc / T::of(k as f64) / tau);
        }
    }
    Ok(l_idc_from_sim(&sim))
}

/// Mean over anchors of `-log softmax(sim[a])[a]`.
pub fn l_idc_from_sim<T: Scalar>(sim: &Matrix<T>) -> T {
    let b = sim.rows();
    let mut total = T::zero();
    for a in 0..b {
        let lp = crate::tensor::log_softmax(sim.row(a));
        total -= lp[a];
    }
    total / T::of(b as f64)
}

fn neg_log<T: Scalar>(p: T) -> T {
    -p.max(T::of(LOG_FLOOR)).ln()
}

fn check_labels<T: Scalar>(probs: &[ClassProbabilities<T>], labels: &[usize]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(DampError::Invalid(format!(
            "{} predictions vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.classes() {
            return Err(DampError::OutOfRange {
                what: "label",
                index: y,
                len: p.classes(),
            });
        }
    }
    Ok(())
}

/// Mean cross-entropy at the given labels.
pub fn mean_cross_entropy<T: Scalar>(probs: &[ClassProbabilities<T>], labels: &[usize]) -> Result<T> {
    check_labels(probs, labels)?;
    if probs.is_empty() {
        return Ok(T::zero());
    }
    let total: T = probs.iter().zip(labels).map(|(p, &y)| neg_log(p.get(y))).sum();
    Ok(total / T::of(probs.len() as f64))
}

/// Cross-entropy summed over samples with `confidence >= threshold`,
/// divided by the full batch size. Zero when nothing passes.
pub fn gated_cross_entropy<T: Scalar>(
    probs: &[ClassProbabilities<T>],
    labels: &[usize],
    confidences: &[T],
    threshold: T,
) -> Result<T> {
    check_labels(probs, labels)?;
    if confidences.len() != probs.len() {
        return Err(DampError::Invalid("one confidence per sample required".into()));
    }
    if probs.is_empty() {
        return Ok(T::zero());
    }
    let total: T = probs
        .iter()
        .zip(labels)
        .zip(confidences)
        .filter(|(_, &c)| c >= threshold)
        .map(|((p, &y), _)| neg_log(p.get(y)))
        .sum();
    Ok(total / T::of(probs.len() as f64))
}

/// Strong-view cross-entropy at ground-truth labels.
pub fn l_sc_source<T: Scalar>(strong: &[ClassProbabilities<T>], labels: &[usize]) -> Result<T> {
    mean_cross_entropy(strong, labels)
}

/// Strong-view cross-entropy at pseudo-labels, gated by weak-view confidence.
pub fn l_sc_target<T: Scalar>(
    strong: &[ClassProbabilities<T>],
    pseudo: &[usize],
    weak_confidences: &[T],
    threshold: T,
) -> Result<T> {
    gated_cross_entropy(strong, pseudo, weak_confidences, threshold)
}

/// Weak-view cross-entropy at ground-truth labels.
pub fn l_sup_source<T: Scalar>(weak: &[ClassProbabilities<T>], labels: &[usize]) -> Result<T> {
    mean_cross_entropy(weak, labels)
}

/// Weak-view cross-entropy at pseudo-labels for samples whose weak-view
/// probability at the pseudo-label reaches `threshold`.
pub fn l_sup_target<T: Scalar>(weak: &[ClassProbabilities<T>], pseudo: &[usize], threshold: T) -> Result<T> {
    check_labels(weak, pseudo)?;
    let conf: Vec<T> = weak.iter().zip(pseudo).map(|(p, &y)| p.get(y)).collect();
    gated_cross_entropy(weak, pseudo, &conf, threshold)
}

fn entropy<T: Scalar>(p: &[T]) -> T {
    p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| -x * x.max(T::of(LOG_FLOOR)).ln())
        .sum()
}

/// `H_cond - H_marg`: mean per-sample entropy minus entropy of the mean
/// prediction. Never positive; zero iff all predictions coincide.
pub fn l_im<T: Scalar>(probs: &[ClassProbabilities<T>]) -> Result<T> {
    let first = probs
        .first()
        .ok_or_else(|| DampError::Invalid("l_im needs at least one prediction".into()))?;
    let k = first.classes();
    let n = T::of(probs.len() as f64);
    let mut mean = vec![T::zero(); k];
    let mut h_cond = T::zero();
    for p in probs {
        if p.classes() != k {
            return Err(DampError::Invalid("predictions disagree on class count".into()));
        }
        h_cond += entropy(&p.probs);
        for (m, &x) in mean.iter_mut().zip(&p.probs) {
            *m += x / n;
        }
    }
    Ok(h_cond / n - entropy(&mean))
}

/// Per-term losses of one step. Absent terms are zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub sup_source: f64,
    pub sup_target: f64,
    pub sc_source: f64,
    pub sc_target: f64,
    pub idc_source: f64,
    pub idc_target: f64,
    pub im: f64,
}

impl LossComponents {
    pub fn sup(&self) -> f64 {
        self.sup_source + self.sup_target
    }

    pub fn sc(&self) -> f64 {
        self.sc_source + self.sc_target
    }

    pub fn idc(&self, w: &LossWeights) -> f64 {
        w.idc_source_weight * self.idc_source + w.idc_target_weight * self.idc_target
    }

    pub fn is_finite(&self) -> bool {
        [
            self.sup_source,
            self.sup_target,
            self.sc_source,
            self.sc_target,
            self.idc_source,
            self.idc_target,
            self.im,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// `L_sup + L_sc + lambda_c * L_idc + lambda_i * L_im`.
pub fn l_all(c: &LossComponents, w: &LossWeights) -> f64 {
    c.sup() + c.sc() + w.lambda_c * c.idc(w) + w.lambda_i * c.im
}

/// Tape nodes of the cosine head for a prompted batch.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    /// Unit-norm `v'` rows (`B x D`).
    pub v_hat: Var,
    /// Unit-norm `s'` rows (`B*K x D`).
    pub s_hat: Var,
    /// `log softmax(cos / tau)` (`B x K`).
    pub log_probs: Var,
    pub classes: usize,
}

pub fn head_tape<T: Scalar>(tape: &mut Tape<T>, batch: &PromptedBatch, tau: f64) -> Result<HeadNodes> {
    check_classes(batch.classes)?;
    let v_hat = tape.normalize_rows(batch.v_prime)?;
    let s_hat = tape.normalize_rows(batch.s_prime)?;
    let cos = tape.grouped_row_dot(v_hat, s_hat, batch.classes)?;
    let logits = tape.mul_const(cos, T::of(1.0 / tau));
    let log_probs = tape.log_softmax_rows(logits);
    Ok(HeadNodes {
        v_hat,
        s_hat,
        log_probs,
        classes: batch.classes,
    })
}

/// `L_idc` over the rows `start..end` of the head (one domain batch).
pub fn l_idc_tape<T: Scalar>(tape: &mut Tape<T>, head: &HeadNodes, start: usize, end: usize, tau: f64) -> Result<Var> {
    let b = end - start;
    if b == 0 {
        return Err(DampError::Invalid("l_idc needs a non-empty batch".into()));
    }
    let k = head.classes;
    let v = tape.slice_rows(head.v_hat, start, end)?;
    let s = tape.slice_rows(head.s_hat, start * k, end * k)?;
    let mean_s = tape.group_mean_rows(s, k)?;
    let tiled = tape.tile_rows(v, b)?;
    let sim = tape.grouped_row_dot(mean_s, tiled, b)?;
    let logits = tape.mul_const(sim, T::of(1.0 / tau));
    let ls = tape.log_softmax_rows(logits);
    let w = -T::one() / T::of(b as f64);
    tape.pick(ls, (0..b).map(|a| (a, a, w)).collect())
}

/// `-(1/denom) * sum_i log_probs[row_i, class_i]` over `entries`.
pub fn cross_entropy_tape<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: Var,
    entries: &[(usize, usize)],
    denom: usize,
) -> Result<Var> {
    let w = -T::one() / T::of(denom.max(1) as f64);
    tape.pick(log_probs, entries.iter().map(|&(r, c)| (r, c, w)).collect())
}

/// `L_im` over the rows `start..end` of `log_probs`.
pub fn l_im_tape<T: Scalar>(tape: &mut Tape<T>, log_probs: Var, start: usize, end: usize) -> Result<Var> {
    let n = end - start;
    if n == 0 {
        return Err(DampError::Invalid("l_im needs at least one prediction".into()));
    }
    let lp = tape.slice_rows(log_probs, start, end)?;
    let p = tape.exp(lp);
    let plogp = tape.mul(p, lp)?;
    let neg_h_cond_sum = tape.sum_all(plogp);
    let mean = tape.mean_rows(p)?;
    let log_mean = tape.log_floor(mean, T::of(LOG_FLOOR));
    let mlogm = tape.mul(mean, log_mean)?;
    let neg_h_marg = tape.sum_all(mlogm);
    tape.weighted_sum(&[(neg_h_cond_sum, -T::one() / T::of(n as f64)), (neg_h_marg, T::one())])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp(p: &[f64]) -> ClassProbabilities<f64> {
        ClassProbabilities { probs: p.to_vec() }
    }

    #[test]
    fn saturated_two_class_head() {
        let v = [1.0, 0.0];
        let s = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = zero_shot_classify(&v, &s, 0.01).unwrap();
        let expected = (-100.0f64).exp() / (1.0 + (-100.0f64).exp());
        assert!((p.get(1) - expected).abs() < 1e-50);
        assert!((p.get(1) - 3.7e-44).abs() / 3.7e-44 < 0.01);
    }

    #[test]
    fn zero_norm_rejected() {
        let s = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(zero_shot_classify(&[0.0, 0.0], &s, 0.01).is_err());
    }

    #[test]
    fn idc_hand_values() {
        let sim = Matrix::from_vec(2, 2, vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let expected = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((l_idc_from_sim(&sim) - expected).abs() < 1e-15);
        assert!((expected - 4.54e-5).abs() < 1e-7);
        assert_eq!(l_idc_from_sim(&Matrix::scalar(3.0)), 0.0);
    }

    #[test]
    fn cross_entropy_hand_values() {
        let ce = l_sc_source(&[cp(&[0.5, 0.5]), cp(&[0.25, 0.75])], &[0, 0]).unwrap();
        assert!((ce - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        let u = l_sup_source(&[cp(&[1.0 / 3.0; 3])], &[2]).unwrap();
        assert!((u - 3f64.ln()).abs() < 1e-12);
        assert_eq!(l_sup_source(&[cp(&[0.0, 1.0])], &[1]).unwrap(), 0.0);
        assert!(l_sup_source(&[cp(&[0.5, 0.5])], &[2]).is_err());
    }

    #[test]
    fn target_gates() {
        let probs = [cp(&[0.6, 0.4]), cp(&[0.3, 0.7])];
        assert_eq!(l_sc_target(&probs, &[0, 1], &[0.1, 0.2], 0.6).unwrap(), 0.0);
        let at_threshold = l_sup_target(&probs, &[0, 0], 0.6).unwrap();
        assert!((at_threshold - (-(0.6f64).ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn im_extremes() {
        let u = l_im(&[cp(&[0.25; 4]), cp(&[0.25; 4])]).unwrap();
        assert!(u.abs() < 1e-12);
        let split = l_im(&[cp(&[1.0, 0.0]), cp(&[0.0, 1.0])]).unwrap();
        assert!((split + 2f64.ln()).abs() < 1e-12);
        assert!(l_im::<f64>(&[]).is_err());
    }

    #[test]
    fn total_is_affine_in_lambda_i() {
        let c = LossComponents {
            sup_source: 1.0,
            sup_target: 0.5,
            sc_source: 0.25,
            sc_target: 0.125,
            idc_source: 2.0,
            idc_target: 3.0,
            im: -0.7,
        };
        let mut w = LossWeights {
            lambda_c: 0.0,
            lambda_i: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(l_all(&c, &w), c.sup() + c.sc());
        w.lambda_i = 1.0;
        let a = l_all(&c, &w);
        w.lambda_i = 1.5;
        assert!(((l_all(&c, &w) - a) / 0.5 - c.im).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_on_tie() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.6, 0.6]), 1);
    }
}
