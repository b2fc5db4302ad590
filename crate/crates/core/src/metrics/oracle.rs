//! Brute-force reference metrics for differential testing.
//!
//! Quadratic in the pixel count; intended for at most ~1e4 pixels. These
//! recount every threshold from scratch and compute AUROC from pairwise
//! comparisons, so they share no code with the sweep in the parent module.
//! Labels: 0 inlier, 1 anomaly, anything else ignored.

fn kept(scores: &[f64], labels: &[u8]) -> Vec<(f64, bool)> {
    scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l <= 1)
        .map(|(s, l)| (*s, *l == 1))
        .collect()
}

fn thresholds(pixels: &[(f64, bool)]) -> Vec<f64> {
    let mut t: Vec<f64> = pixels.iter().map(|p| p.0).collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(pixels: &[(f64, bool)], t: f64) -> (usize, usize) {
    let tp = pixels.iter().filter(|(s, p)| *p && *s >= t).count();
    let fp = pixels.iter().filter(|(s, p)| !*p && *s >= t).count();
    (tp, fp)
}

/// Exact AP by enumerating every distinct threshold. All-positive input gives 1.
pub fn brute_force_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let px = kept(scores, labels);
    let pos = px.iter().filter(|p| p.1).count();
    if pos == 0 {
        return 0.0;
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds(&px) {
        let (tp, fp) = counts_at(&px, t);
        let recall = tp as f64 / pos as f64;
        if tp > 0 {
            ap += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        }
        prev_recall = recall;
    }
    ap
}

/// Probability that a random anomaly outscores a random inlier, ties count 1/2.
pub fn brute_force_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let px = kept(scores, labels);
    let pos: Vec<f64> = px.iter().filter(|p| p.1).map(|p| p.0).collect();
    let neg: Vec<f64> = px.iter().filter(|p| !p.1).map(|p| p.0).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// FPR at the highest threshold whose TPR reaches `target`.
pub fn brute_force_fpr_at_tpr(scores: &[f64], labels: &[u8], target: f64) -> f64 {
    let px = kept(scores, labels);
    let pos = px.iter().filter(|p| p.1).count() as f64;
    let neg = px.iter().filter(|p| !p.1).count() as f64;
    for t in thresholds(&px) {
        let (tp, fp) = counts_at(&px, t);
        if tp as f64 / pos >= target {
            return fp as f64 / neg;
        }
    }
    1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_alternating_case() {
        let ap = brute_force_ap(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn all_positive_is_one() {
        assert_eq!(brute_force_ap(&[0.1, 0.7, 0.3], &[1, 1, 1]), 1.0);
    }

    #[test]
    fn two_pixel_inverted() {
        assert_eq!(brute_force_ap(&[0.9, 0.1], &[0, 1]), 0.5);
        assert_eq!(brute_force_auroc(&[0.9, 0.1], &[0, 1]), 0.0);
    }
}
