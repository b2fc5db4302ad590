use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::log_softmax_channels;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    /// Every labelled pixel counts equally.
    #[default]
    Uniform,
    /// Each class present in the batch contributes equally, i.e. the loss is
    /// the mean over present classes of that class's mean pixel loss.
    InverseFrequency,
}

/// Per-pixel cross-entropy over the channel axis of `B x C x H x W` logits.
/// `targets` holds one `H x W` class-id map per batch item; pixels equal to
/// `ignore` are excluded. Errors when no pixel is labelled.
pub fn cross_entropy(logits: &Tensor, targets: &[&Array2<u8>], ignore: u8, weighting: ClassWeighting) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if targets.len() != b {
        return Err(Error::Shape(format!("{} target maps for a batch of {b}", targets.len())));
    }
    let mut counts = vec![0usize; c];
    for t in targets {
        if t.dim() != (h, w) {
            return Err(Error::Shape(format!("target {:?} vs logits {:?}", t.dim(), (h, w))));
        }
        for &v in t.iter() {
            if v == ignore {
                continue;
            }
            let k = v as usize;
            if k >= c {
                return Err(Error::Invalid(format!("target class {v} out of range for {c} channels")));
            }
            counts[k] += 1;
        }
    }
    let labelled: usize = counts.iter().sum();
    if labelled == 0 {
        return Err(Error::Invalid("no labelled pixels in batch".into()));
    }
    let present = counts.iter().filter(|n| **n > 0).count() as f64;
    let class_weight: Vec<f64> = counts
        .iter()
        .map(|&n| match (weighting, n) {
            (_, 0) => 0.0,
            (ClassWeighting::Uniform, _) => 1.0 / labelled as f64,
            (ClassWeighting::InverseFrequency, n) => 1.0 / (present * n as f64),
        })
        .collect();

    // Weighted one-hot: entry (b, k, y, x) = weight of class k if the pixel is labelled k.
    let mut weighted = vec![0f64; b * c * h * w];
    for (bi, t) in targets.iter().enumerate() {
        for ((y, x), &v) in t.indexed_iter() {
            if v != ignore {
                let k = v as usize;
                weighted[((bi * c + k) * h + y) * w + x] = class_weight[k];
            }
        }
    }
    let weighted = Tensor::from_vec(weighted, (b, c, h, w), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let logp = log_softmax_channels(logits)?;
    Ok((logp * weighted)?.sum_all()?.neg()?)
}

/// Mean absolute error, optionally restricted by a `B x 1 x H x W` 0/1 mask.
pub fn l1(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let diff = (pred - target)?.abs()?;
    Ok(match mask {
        None => diff.mean_all()?,
        Some(m) => {
            let total = m.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? * pred.dim(1)? as f64;
            if total == 0.0 {
                return Err(Error::Invalid("empty loss mask".into()));
            }
            (diff.broadcast_mul(m)?.sum_all()? / total)?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn logits(vals: &[f64]) -> Tensor {
        // Two channels, one row of pixels.
        let n = vals.len() / 2;
        Tensor::from_vec(vals.to_vec(), (1, 2, 1, n), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn uniform_ce_matches_hand_value() {
        let t = array![[0u8, 1]];
        let l = cross_entropy(&logits(&[0.0, 0.0, 0.0, 0.0]), &[&t], 255, ClassWeighting::Uniform).unwrap();
        assert!((scalar(&l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_beats_inverted() {
        let t = array![[0u8, 1, 1]];
        let good = logits(&[5.0, -5.0, -5.0, -5.0, 5.0, 5.0]);
        let bad = (good.clone() * -1.0).unwrap();
        for wgt in [ClassWeighting::Uniform, ClassWeighting::InverseFrequency] {
            let lg = scalar(&cross_entropy(&good, &[&t], 255, wgt).unwrap());
            let lb = scalar(&cross_entropy(&bad, &[&t], 255, wgt).unwrap());
            assert!(lg <= lb);
        }
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let a = array![[0u8, 1]];
        let b = array![[0u8, 1, 255]];
        let la = cross_entropy(&logits(&[1.0, 2.0, 0.5, -1.0]), &[&a], 255, ClassWeighting::InverseFrequency).unwrap();
        let lb = cross_entropy(&logits(&[1.0, 2.0, 9.0, 0.5, -1.0, -9.0]), &[&b], 255, ClassWeighting::InverseFrequency).unwrap();
        assert!((scalar(&la) - scalar(&lb)).abs() < 1e-12);
    }

    #[test]
    fn inverse_frequency_averages_class_means() {
        // Class 0 has three pixels at loss ln 2, class 1 one pixel at a different loss.
        let t = array![[0u8, 0, 0, 1]];
        let lg = logits(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        let l = scalar(&cross_entropy(&lg, &[&t], 255, ClassWeighting::InverseFrequency).unwrap());
        let one = (1.0 + (-3f64).exp()).ln();
        assert!((l - (2f64.ln() + one) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let t = array![[255u8, 255]];
        assert!(cross_entropy(&logits(&[0.0; 4]), &[&t], 255, ClassWeighting::Uniform).is_err());
    }
}
