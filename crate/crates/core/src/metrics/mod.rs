//! Pixel-level anomaly metrics: average precision, FPR at 95% TPR and AUROC.
//!
//! Conventions:
//! - pixels labeled IGNORE are dropped before anything else;
//! - pixels are pooled across all images unless [`Pooling::PerImage`] is asked for;
//! - tied scores form a single threshold group, so no ordering credit is given
//!   inside a tie (a constant scorer gets AP equal to the positive rate);
//! - AP is the step-wise sum of `delta recall * precision` over the groups;
//! - FPR95 is the FPR at the first threshold (sweeping from the highest score
//!   down) whose TPR reaches 0.95;
//! - AUROC integrates the ROC curve with trapezoids, which equals the
//!   Mann-Whitney statistic with ties counted as one half.

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::data::{AnomalyLabel, AnomalyLabelMap, AnomalyScoreMap};
use crate::error::{Error, Result};

pub const TPR_TARGET: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Pooled,
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub positives: u64,
    pub negatives: u64,
    pub ignored: u64,
    pub conventions: Conventions,
}

/// Recorded alongside every result so reports state how numbers were made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub pooling: Pooling,
    pub ties: String,
    pub ap_integration: String,
    pub fpr_at_tpr: f64,
}

impl Conventions {
    fn new(pooling: Pooling) -> Self {
        Conventions {
            pooling,
            ties: "grouped".into(),
            ap_integration: "step".into(),
            fpr_at_tpr: TPR_TARGET,
        }
    }
}

/// One point of the threshold sweep, taken after a whole tie group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub positives: u64,
    pub negatives: u64,
    pub points: Vec<CurvePoint>,
}

impl Curves {
    /// Sweeps thresholds over `(score, is_positive)` pairs.
    pub fn sweep(mut pairs: Vec<(f64, bool)>) -> Result<Self> {
        if pairs.iter().any(|(s, _)| !s.is_finite()) {
            return Err(Error::Metric("non-finite score".into()));
        }
        let positives = pairs.iter().filter(|(_, p)| *p).count() as u64;
        let negatives = pairs.len() as u64 - positives;
        if positives == 0 {
            return Err(Error::Metric("no positive (anomaly) pixels after exclusion".into()));
        }
        if negatives == 0 {
            return Err(Error::Metric("no negative (inlier) pixels after exclusion".into()));
        }
        pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut i = 0;
        while i < pairs.len() {
            let t = pairs[i].0;
            while i < pairs.len() && pairs[i].0 == t {
                if pairs[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push(CurvePoint { threshold: t, tp, fp });
        }
        Ok(Curves {
            positives,
            negatives,
            points,
        })
    }

    pub fn average_precision(&self) -> f64 {
        let p = self.positives as f64;
        let mut prev_tp = 0u64;
        let mut ap = 0.0;
        for pt in &self.points {
            if pt.tp > prev_tp {
                let precision = pt.tp as f64 / (pt.tp + pt.fp) as f64;
                ap += (pt.tp - prev_tp) as f64 / p * precision;
                prev_tp = pt.tp;
            }
        }
        ap
    }

    pub fn fpr_at_tpr(&self, target: f64) -> f64 {
        let p = self.positives as f64;
        let n = self.negatives as f64;
        self.points
            .iter()
            .find(|pt| pt.tp as f64 / p >= target)
            .map(|pt| pt.fp as f64 / n)
            .unwrap_or(1.0)
    }

    pub fn auroc(&self) -> f64 {
        let p = self.positives as f64;
        let n = self.negatives as f64;
        let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
        let mut area = 0.0;
        for pt in &self.points {
            let tpr = pt.tp as f64 / p;
            let fpr = pt.fp as f64 / n;
            area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
            prev_tpr = tpr;
            prev_fpr = fpr;
        }
        area
    }

    /// `(recall, precision)` pairs for plotting.
    pub fn pr_curve(&self) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .map(|pt| (pt.tp as f64 / self.positives as f64, pt.tp as f64 / (pt.tp + pt.fp) as f64))
            .collect()
    }

    /// `(fpr, tpr)` pairs for plotting, starting at the origin.
    pub fn roc_curve(&self) -> Vec<(f64, f64)> {
        std::iter::once((0.0, 0.0))
            .chain(
                self.points
                    .iter()
                    .map(|pt| (pt.fp as f64 / self.negatives as f64, pt.tp as f64 / self.positives as f64)),
            )
            .collect()
    }
}

/// Metrics over flat pixel arrays. Labels use the [`AnomalyLabel`] byte values.
pub fn evaluate_pixels(scores: &[f64], labels: &[u8]) -> Result<EvalResult> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let (pairs, ignored) = collect_pairs(scores.iter().copied().zip(labels.iter().copied()))?;
    let curves = Curves::sweep(pairs)?;
    Ok(result_from(&curves, ignored, Pooling::Pooled))
}

fn collect_pairs(it: impl Iterator<Item = (f64, u8)>) -> Result<(Vec<(f64, bool)>, u64)> {
    let mut pairs = Vec::new();
    let mut ignored = 0;
    for (s, l) in it {
        match AnomalyLabel::from_u8(l) {
            Some(AnomalyLabel::Ignore) => ignored += 1,
            Some(AnomalyLabel::Anomaly) => pairs.push((s, true)),
            Some(AnomalyLabel::Inlier) => pairs.push((s, false)),
            None => return Err(Error::Invalid(format!("invalid anomaly label {l}"))),
        }
    }
    Ok((pairs, ignored))
}

fn result_from(curves: &Curves, ignored: u64, pooling: Pooling) -> EvalResult {
    EvalResult {
        ap: curves.average_precision(),
        fpr95: curves.fpr_at_tpr(TPR_TARGET),
        auroc: curves.auroc(),
        positives: curves.positives,
        negatives: curves.negatives,
        ignored,
        conventions: Conventions::new(pooling),
    }
}

fn check_pairs(scores: &[AnomalyScoreMap], labels: &[AnomalyLabelMap]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} score maps vs {} label maps", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Metric("nothing to evaluate".into()));
    }
    for (i, (s, l)) in scores.iter().zip(labels).enumerate() {
        if (s.height(), s.width()) != (l.height(), l.width()) {
            return Err(Error::Shape(format!(
                "image {i}: scores {}x{} vs labels {}x{}",
                s.height(),
                s.width(),
                l.height(),
                l.width()
            )));
        }
    }
    Ok(())
}

/// Threshold sweep over pooled pixels of all images.
pub fn curves(scores: &[AnomalyScoreMap], labels: &[AnomalyLabelMap]) -> Result<(Curves, u64)> {
    check_pairs(scores, labels)?;
    let it = scores
        .iter()
        .zip(labels)
        .flat_map(|(s, l)| s.scores().iter().map(|v| *v as f64).zip(l.raw().iter().copied()));
    let (pairs, ignored) = collect_pairs(it)?;
    Ok((Curves::sweep(pairs)?, ignored))
}

pub fn evaluate(scores: &[AnomalyScoreMap], labels: &[AnomalyLabelMap]) -> Result<EvalResult> {
    let (c, ignored) = curves(scores, labels)?;
    Ok(result_from(&c, ignored, Pooling::Pooled))
}

/// Pooled or per-image evaluation. Per-image mode averages each metric over
/// the images that contain both classes; pixel counts are totals.
pub fn evaluate_with(scores: &[AnomalyScoreMap], labels: &[AnomalyLabelMap], pooling: Pooling) -> Result<EvalResult> {
    match pooling {
        Pooling::Pooled => evaluate(scores, labels),
        Pooling::PerImage => {
            check_pairs(scores, labels)?;
            let mut acc = (0.0, 0.0, 0.0, 0usize);
            let (mut p, mut n, mut ign) = (0, 0, 0);
            for (s, l) in scores.iter().zip(labels) {
                let it = s.scores().iter().map(|v| *v as f64).zip(l.raw().iter().copied());
                let (pairs, ignored) = collect_pairs(it)?;
                ign += ignored;
                if let Ok(c) = Curves::sweep(pairs) {
                    acc.0 += c.average_precision();
                    acc.1 += c.fpr_at_tpr(TPR_TARGET);
                    acc.2 += c.auroc();
                    acc.3 += 1;
                    p += c.positives;
                    n += c.negatives;
                }
            }
            if acc.3 == 0 {
                return Err(Error::Metric("no image contains both classes".into()));
            }
            let k = acc.3 as f64;
            Ok(EvalResult {
                ap: acc.0 / k,
                fpr95: acc.1 / k,
                auroc: acc.2 / k,
                positives: p,
                negatives: n,
                ignored: ign,
                conventions: Conventions::new(Pooling::PerImage),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_ranking() {
        let r = evaluate_pixels(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_eq!((r.ap, r.auroc, r.fpr95), (1.0, 1.0, 0.0));
    }

    #[test]
    fn inverted_ranking() {
        let r = evaluate_pixels(&[0.9, 0.1], &[0, 1]).unwrap();
        assert_eq!(r.ap, oracle::brute_force_ap(&[0.9, 0.1], &[0, 1]));
        assert_eq!(r.ap, 0.5);
        assert_eq!(r.auroc, 0.0);
        assert_eq!(r.fpr95, 1.0);
    }

    #[test]
    fn constant_scorer_is_uninformative() {
        let labels: Vec<u8> = (0..1000).map(|i| u8::from(i % 10 == 3)).collect();
        let r = evaluate_pixels(&vec![0.3; 1000], &labels).unwrap();
        assert!((r.ap - 0.1).abs() < 1e-12);
        assert_eq!(r.auroc, 0.5);
        assert_eq!(r.fpr95, 1.0);
    }

    #[test]
    fn alternating_labels_ap() {
        let r = evaluate_pixels(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert!((r.ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_pool_names_missing_class() {
        let e = evaluate_pixels(&[0.1, 0.2], &[0, 0]).unwrap_err();
        assert!(e.to_string().contains("positive"));
        let e = evaluate_pixels(&[0.1, 0.2], &[1, 255]).unwrap_err();
        assert!(e.to_string().contains("negative"));
    }

    #[test]
    fn ignore_pixels_are_counted_but_excluded() {
        let r = evaluate_pixels(&[0.9, 0.5, 0.1], &[1, 255, 0]).unwrap();
        assert_eq!((r.positives, r.negatives, r.ignored), (1, 1, 1));
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn per_image_mode_averages() {
        let s = |v: Vec<f32>| AnomalyScoreMap::new(ndarray::Array2::from_shape_vec((1, v.len()), v).unwrap()).unwrap();
        let l = |v: Vec<u8>| AnomalyLabelMap::new(ndarray::Array2::from_shape_vec((1, v.len()), v).unwrap()).unwrap();
        let scores = [s(vec![0.9, 0.1]), s(vec![0.9, 0.1])];
        let labels = [l(vec![1, 0]), l(vec![0, 1])];
        let r = evaluate_with(&scores, &labels, Pooling::PerImage).unwrap();
        assert!((r.ap - 0.75).abs() < 1e-12);
        assert!((r.auroc - 0.5).abs() < 1e-12);
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..12).prop_map(|v| v as f64 / 11.0), n),
                proptest::collection::vec(prop_oneof![Just(0u8), Just(1u8), Just(255u8)], n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_oracle((scores, labels) in case()) {
            let fast = evaluate_pixels(&scores, &labels);
            let has_p = labels.contains(&1);
            let has_n = labels.contains(&0);
            prop_assume!(has_p && has_n);
            let fast = fast.unwrap();
            prop_assert!((fast.ap - oracle::brute_force_ap(&scores, &labels)).abs() < 1e-9);
            prop_assert!((fast.auroc - oracle::brute_force_auroc(&scores, &labels)).abs() < 1e-9);
            prop_assert!((fast.fpr95 - oracle::brute_force_fpr_at_tpr(&scores, &labels, TPR_TARGET)).abs() < 1e-9);
        }

        #[test]
        fn shuffle_and_ignore_invariance((scores, labels) in case(), extra in proptest::collection::vec(0.0f64..1.0, 0..10), seed: u64) {
            prop_assume!(labels.contains(&1) && labels.contains(&0));
            let base = evaluate_pixels(&scores, &labels).unwrap();
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            use rand::{seq::SliceRandom, SeedableRng};
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut s2: Vec<f64> = idx.iter().map(|i| scores[*i]).collect();
            let mut l2: Vec<u8> = idx.iter().map(|i| labels[*i]).collect();
            s2.extend(&extra);
            l2.extend(std::iter::repeat_n(255u8, extra.len()));
            let other = evaluate_pixels(&s2, &l2).unwrap();
            prop_assert_eq!((base.ap, base.auroc, base.fpr95), (other.ap, other.auroc, other.fpr95));
        }
    }
}
