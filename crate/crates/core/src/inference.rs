//! Two-step (TSI) and direct (DI) inference, plus mismatch analysis.
//!
//! Ties are broken by the lowest index everywhere.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Tsi,
    Di,
}

impl InferenceMode {
    pub const BOTH: [InferenceMode; 2] = [InferenceMode::Tsi, InferenceMode::Di];
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceMode::Tsi => write!(f, "TSI"),
            InferenceMode::Di => write!(f, "DI"),
        }
    }
}

/// One sample's decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub finer_id: usize,
    pub super_id: usize,
    pub finer_confidence: f64,
    /// TSI: softmax confidence of the super-class head. DI: the finer softmax
    /// mass under the derived super-class (the super head is never evaluated).
    pub super_confidence: f64,
    pub mode: InferenceMode,
    /// Raw finer argmax is not a member of the raw super argmax. Only
    /// observable when super logits were computed (TSI).
    pub mismatch: bool,
}

/// Index of the first maximum.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax probability of `values[idx]` among `values`, in f64.
fn softmax_prob<T: Real>(values: &[T], idx: usize) -> f64 {
    let max = values
        .iter()
        .map(|v| v.to_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = values.iter().map(|v| (v.to_f64().unwrap() - max).exp()).sum();
    (values[idx].to_f64().unwrap() - max).exp() / denom
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::validation(format!(
            "{what} logits have length {got}, taxonomy expects {expected}"
        )));
    }
    Ok(())
}

/// Picks the most confident super-class, then the most confident finer class
/// among its members, with confidence from a softmax over only those members.
pub fn predict_tsi<T: Real>(super_logits: &[T], finer_logits: &[T], t: &Taxonomy) -> Result<Prediction> {
    check_len("super", super_logits.len(), t.num_super())?;
    check_len("finer", finer_logits.len(), t.num_finer())?;
    let super_id = argmax(super_logits);
    let members = t.members_of(super_id)?;
    let restricted: Vec<T> = members.iter().map(|&f| finer_logits[f]).collect();
    let local = argmax(&restricted);
    let raw_finer = argmax(finer_logits);
    Ok(Prediction {
        finer_id: members[local],
        super_id,
        finer_confidence: softmax_prob(&restricted, local),
        super_confidence: softmax_prob(super_logits, super_id),
        mode: InferenceMode::Tsi,
        mismatch: t.finer_to_super(raw_finer)? != super_id,
    })
}

/// Global finer argmax; the super-class is derived from the taxonomy.
pub fn predict_di<T: Real>(finer_logits: &[T], t: &Taxonomy) -> Result<Prediction> {
    check_len("finer", finer_logits.len(), t.num_finer())?;
    let finer_id = argmax(finer_logits);
    let super_id = t.finer_to_super(finer_id)?;
    let super_confidence = t
        .members_of(super_id)?
        .iter()
        .map(|&f| softmax_prob(finer_logits, f))
        .sum::<f64>()
        .min(1.0);
    Ok(Prediction {
        finer_id,
        super_id,
        finer_confidence: softmax_prob(finer_logits, finer_id),
        super_confidence,
        mode: InferenceMode::Di,
        mismatch: false,
    })
}

/// Aggregate over hierarchically conflicting samples (finer argmax not under
/// super argmax).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub mismatch_count: usize,
    pub correct_sc_count: usize,
    pub correct_fc_count: usize,
    pub correct_combined_count: usize,
    pub total_samples: usize,
}

impl MismatchReport {
    pub const HEADERS: [&'static str; 4] =
        ["Mismatch", "Correct SC", "Correct FC", "Correct Combined"];

    pub fn row(&self) -> [usize; 4] {
        [
            self.mismatch_count,
            self.correct_sc_count,
            self.correct_fc_count,
            self.correct_combined_count,
        ]
    }
}

/// A conflicting sample, for per-sample listings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub index: usize,
    pub truth: usize,
    pub super_argmax: usize,
    pub finer_argmax: usize,
    pub tsi_finer: usize,
}

fn check_batch<T: Real>(super_rows: &[T], finer_rows: &[T], n: usize, t: &Taxonomy) -> Result<()> {
    if super_rows.len() != n * t.num_super() || finer_rows.len() != n * t.num_finer() {
        return Err(Error::shape(format!(
            "batch of {n} needs {}×{} super and {}×{} finer logits, got {} and {}",
            n,
            t.num_super(),
            n,
            t.num_finer(),
            super_rows.len(),
            finer_rows.len()
        )));
    }
    Ok(())
}

/// Row-major `[N, C_SC]` / `[N, C_FC]` logits against finer ground truth.
pub fn mismatch_analysis<T: Real>(
    super_logits: &[T],
    finer_logits: &[T],
    finer_truth: &[usize],
    t: &Taxonomy,
) -> Result<(MismatchReport, Vec<Conflict>)> {
    let n = finer_truth.len();
    check_batch(super_logits, finer_logits, n, t)?;
    let truth_super = t.derive_super_labels(finer_truth)?;
    let mut report = MismatchReport {
        total_samples: n,
        ..Default::default()
    };
    let mut conflicts = Vec::new();
    for i in 0..n {
        let s = &super_logits[i * t.num_super()..(i + 1) * t.num_super()];
        let f = &finer_logits[i * t.num_finer()..(i + 1) * t.num_finer()];
        let tsi = predict_tsi(s, f, t)?;
        if !tsi.mismatch {
            continue;
        }
        let finer_argmax = argmax(f);
        report.mismatch_count += 1;
        report.correct_sc_count += usize::from(tsi.super_id == truth_super[i]);
        report.correct_fc_count += usize::from(finer_argmax == finer_truth[i]);
        report.correct_combined_count += usize::from(tsi.finer_id == finer_truth[i]);
        conflicts.push(Conflict {
            index: i,
            truth: finer_truth[i],
            super_argmax: tsi.super_id,
            finer_argmax,
            tsi_finer: tsi.finer_id,
        });
    }
    Ok((report, conflicts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub finer_top1: f64,
    pub super_top1: f64,
    pub serious_error_rate: f64,
    /// Samples whose predicted finer class is not under the predicted super-class.
    pub containment_violations: usize,
    pub samples: usize,
}

/// Accuracy metrics from precomputed logits. `super_logits` may be empty in DI mode.
pub fn metrics_from_logits<T: Real>(
    mode: InferenceMode,
    super_logits: &[T],
    finer_logits: &[T],
    finer_truth: &[usize],
    t: &Taxonomy,
) -> Result<Metrics> {
    let n = finer_truth.len();
    if n == 0 {
        return Err(Error::validation("cannot evaluate an empty dataset"));
    }
    match mode {
        InferenceMode::Tsi => check_batch(super_logits, finer_logits, n, t)?,
        InferenceMode::Di => check_len("finer", finer_logits.len(), n * t.num_finer())?,
    }
    let truth_super = t.derive_super_labels(finer_truth)?;
    let (mut finer_ok, mut super_ok, mut violations) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let f = &finer_logits[i * t.num_finer()..(i + 1) * t.num_finer()];
        let p = match mode {
            InferenceMode::Tsi => {
                predict_tsi(&super_logits[i * t.num_super()..(i + 1) * t.num_super()], f, t)?
            }
            InferenceMode::Di => predict_di(f, t)?,
        };
        finer_ok += usize::from(p.finer_id == finer_truth[i]);
        super_ok += usize::from(p.super_id == truth_super[i]);
        violations += usize::from(t.finer_to_super(p.finer_id)? != p.super_id);
    }
    let super_top1 = super_ok as f64 / n as f64;
    Ok(Metrics {
        finer_top1: finer_ok as f64 / n as f64,
        super_top1,
        serious_error_rate: 1.0 - super_top1,
        containment_violations: violations,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> Taxonomy {
        Taxonomy::new(
            "t",
            vec![
                ("S0".into(), vec!["f0".into(), "f1".into()]),
                ("S1".into(), vec!["f2".into(), "f3".into()]),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn tsi_restricts_to_winning_super() {
        let t = two_by_two();
        let p = predict_tsi(&[2.0, 1.0], &[0.1, 0.2, 5.0, 4.0], &t).unwrap();
        assert_eq!((p.super_id, p.finer_id), (0, 1));
        assert!(p.mismatch);
        let expect = 0.2f64.exp() / (0.1f64.exp() + 0.2f64.exp());
        assert!((p.finer_confidence - expect).abs() < 1e-12);
    }

    #[test]
    fn tsi_agrees_with_di_without_conflict() {
        let t = two_by_two();
        let p = predict_tsi(&[0.0, 3.0], &[0.0, 0.0, 9.0, 0.0], &t).unwrap();
        let d = predict_di(&[0.0, 0.0, 9.0, 0.0f64], &t).unwrap();
        assert_eq!(p.finer_id, d.finer_id);
        assert!(!p.mismatch);
    }

    #[test]
    fn singleton_super_forces_its_member() {
        let t = Taxonomy::coco();
        let person = t.super_index("person").unwrap();
        let mut s = vec![0.0f64; t.num_super()];
        s[person] = 10.0;
        let mut f = vec![0.0f64; t.num_finer()];
        f[5] = 50.0;
        let p = predict_tsi(&s, &f, &t).unwrap();
        assert_eq!(p.finer_id, t.finer_index("person").unwrap());
        assert_eq!(p.finer_confidence, 1.0);
    }

    #[test]
    fn di_global_argmax_and_ties() {
        let t = two_by_two();
        let p = predict_di(&[0.1, 0.2, 5.0, 4.0f64], &t).unwrap();
        assert_eq!((p.finer_id, p.super_id), (2, 1));
        assert!(p.super_confidence > p.finer_confidence && p.super_confidence <= 1.0);
        let p = predict_di(&[1.0f64; 4], &t).unwrap();
        assert_eq!(p.finer_id, 0);
        let shifted = predict_di(&[100.1, 100.2, 105.0, 104.0f64], &t).unwrap();
        assert_eq!(shifted.finer_id, 2);
    }

    #[test]
    fn length_mismatch_is_a_validation_error() {
        let t = two_by_two();
        assert!(matches!(predict_di(&[0.0f64; 3], &t), Err(Error::Validation(_))));
        assert!(matches!(predict_tsi(&[0.0f64; 3], &[0.0; 4], &t), Err(Error::Validation(_))));
    }

    #[test]
    fn no_conflict_batch_reports_zeros() {
        let t = two_by_two();
        let s = [3.0, 0.0, 0.0, 3.0f64];
        let f = [5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0f64];
        let (r, c) = mismatch_analysis(&s, &f, &[1, 2], &t).unwrap();
        assert_eq!(r.row(), [0, 0, 0, 0]);
        assert_eq!(r.total_samples, 2);
        assert!(c.is_empty());
    }

    #[test]
    fn evaluate_empty_is_rejected() {
        let t = two_by_two();
        assert!(metrics_from_logits::<f64>(InferenceMode::Di, &[], &[], &[], &t).is_err());
    }
}
