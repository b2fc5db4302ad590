use candle_core::{DType, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DissimilarityInputs, DissimilarityNet};
use crate::data::{AnomalyLabel, AnomalyLabelMap};
use crate::ensemble::EnsembleHead;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, softmax_channels, Adam, ClassWeighting, ReduceOnPlateau};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs without validation improvement before the learning rate drops.
    pub patience: usize,
    pub lr_factor: f64,
    pub batch_size: usize,
    /// Random left-right mirroring of inputs and labels together.
    pub flip: bool,
    /// Keep the shared image encoder fixed.
    pub freeze_encoder: bool,
    pub weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-4,
            patience: 10,
            lr_factor: 0.1,
            batch_size: 8,
            flip: true,
            freeze_encoder: false,
            weighting: ClassWeighting::InverseFrequency,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("epochs, learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub steps: usize,
}

/// Cross-entropy of the network on a batch of labelled examples, IGNORE
/// pixels excluded.
pub fn loss(
    net: &DissimilarityNet,
    inputs: &[&DissimilarityInputs],
    labels: &[&AnomalyLabelMap],
    weighting: ClassWeighting,
) -> Result<Tensor> {
    joint_loss(net, None, inputs, labels, weighting)
}

/// [`loss`] plus, with a head, the balanced cross-entropy of the ensemble of
/// the network's anomaly probability with the three uncertainty channels.
pub fn joint_loss(
    net: &DissimilarityNet,
    head: Option<&EnsembleHead>,
    inputs: &[&DissimilarityInputs],
    labels: &[&AnomalyLabelMap],
    weighting: ClassWeighting,
) -> Result<Tensor> {
    let batch = net.assemble(inputs)?;
    let out = net.forward(&batch)?;
    let raw: Vec<_> = labels.iter().map(|l| l.raw()).collect();
    let ce = cross_entropy(&out.logits, &raw, AnomalyLabel::Ignore as u8, weighting)?;
    let Some(head) = head else { return Ok(ce) };
    let prob = softmax_channels(&out.logits)?.narrow(1, 1, 1)?;
    let stacked = Tensor::cat(&[&prob, &batch.uncertainty], 1)?.permute((0, 2, 3, 1))?;
    let (b, _, h, w) = out.logits.dims4()?;
    let mut targets = Vec::with_capacity(b * h * w);
    let mut mask = Vec::with_capacity(b * h * w);
    for l in labels {
        for v in l.raw().iter() {
            targets.push(f32::from(*v == AnomalyLabel::Anomaly as u8));
            mask.push(f32::from(*v != AnomalyLabel::Ignore as u8));
        }
    }
    let dev = out.logits.device();
    let dt = out.logits.dtype();
    let targets = Tensor::from_vec(targets, (b, h, w), dev)?.to_dtype(dt)?;
    let mask = Tensor::from_vec(mask, (b, h, w), dev)?.to_dtype(dt)?;
    Ok((ce + head.loss(&stacked, &targets, &mask)?)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean batch loss over `data` in its stored order.
pub fn evaluate_loss(
    net: &DissimilarityNet,
    data: &[(DissimilarityInputs, AnomalyLabelMap)],
    batch_size: usize,
    weighting: ClassWeighting,
) -> Result<f64> {
    evaluate_joint(net, None, data, batch_size, weighting)
}

fn evaluate_joint(
    net: &DissimilarityNet,
    head: Option<&EnsembleHead>,
    data: &[(DissimilarityInputs, AnomalyLabelMap)],
    batch_size: usize,
    weighting: ClassWeighting,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for chunk in data.chunks(batch_size.max(1)) {
        if chunk.iter().all(|(_, l)| l.count(AnomalyLabel::Ignore) == l.raw().len()) {
            continue;
        }
        let inputs: Vec<_> = chunk.iter().map(|(x, _)| x).collect();
        let labels: Vec<_> = chunk.iter().map(|(_, l)| l).collect();
        total += scalar(&joint_loss(net, head, &inputs, &labels, weighting)?)?;
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

/// Trains with Adam, reduce-on-plateau scheduling on the validation loss and
/// optional flip augmentation, then restores the weights of the best
/// validation epoch. With an empty `val` the training loss is monitored.
pub fn train(
    net: &DissimilarityNet,
    train_set: &[(DissimilarityInputs, AnomalyLabelMap)],
    val_set: &[(DissimilarityInputs, AnomalyLabelMap)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    fit(net, None, train_set, val_set, cfg, seed)
}

/// Like [`train`], optimizing the ensemble head's scalars in the same steps.
pub fn train_joint(
    net: &DissimilarityNet,
    head: &EnsembleHead,
    train_set: &[(DissimilarityInputs, AnomalyLabelMap)],
    val_set: &[(DissimilarityInputs, AnomalyLabelMap)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    fit(net, Some(head), train_set, val_set, cfg, seed)
}

fn fit(
    net: &DissimilarityNet,
    head: Option<&EnsembleHead>,
    train_set: &[(DissimilarityInputs, AnomalyLabelMap)],
    val_set: &[(DissimilarityInputs, AnomalyLabelMap)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    let has = |label| train_set.iter().any(|(_, l)| l.count(label) > 0);
    if !has(AnomalyLabel::Anomaly) || !has(AnomalyLabel::Inlier) {
        let missing = if has(AnomalyLabel::Anomaly) { "inlier" } else { "anomaly" };
        return Err(Error::Invalid(format!(
            "training labels are single-class: no {missing} pixels in {} examples",
            train_set.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vars = net.trainable_vars(cfg.freeze_encoder);
    vars.extend(head.map(|h| h.theta.clone()));
    let mut opt = Adam::new(vars, cfg.lr)?;
    let mut sched = ReduceOnPlateau::new(cfg.patience, cfg.lr_factor);
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut snapshot = net.params().snapshot()?;
    let mut head_snapshot = head.map(|h| h.theta.as_tensor().copy()).transpose()?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                let (x, y) = &train_set[i];
                if cfg.flip && rng.random_bool(0.5) {
                    inputs.push(x.flip_horizontal());
                    labels.push(y.flip_horizontal());
                } else {
                    inputs.push(x.clone());
                    labels.push(y.clone());
                }
            }
            if labels.iter().all(|l| l.count(AnomalyLabel::Ignore) == l.raw().len()) {
                continue;
            }
            let irefs: Vec<_> = inputs.iter().collect();
            let lrefs: Vec<_> = labels.iter().collect();
            let l = joint_loss(net, head, &irefs, &lrefs, cfg.weighting)?;
            let v = scalar(&l)?;
            if !v.is_finite() {
                return Err(Error::Diverged { seed, step });
            }
            opt.step(&l.backward()?)?;
            total += v;
            batches += 1;
            step += 1;
        }
        let train_loss = total / batches.max(1) as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            evaluate_joint(net, head, val_set, cfg.batch_size, cfg.weighting)?
        };
        if val_loss < best {
            best = val_loss;
            best_epoch = epoch;
            snapshot = net.params().snapshot()?;
            head_snapshot = head.map(|h| h.theta.as_tensor().copy()).transpose()?;
        }
        opt.lr = sched.observe(val_loss, opt.lr);
        info!("dissimilarity epoch {epoch}: train {train_loss:.4}, val {val_loss:.4}, lr {:.2e}", opt.lr);
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            best_val_loss: best,
            lr: opt.lr,
        });
    }
    net.params().restore(&snapshot)?;
    if let (Some(h), Some(t)) = (head, head_snapshot) {
        h.theta.set(&t)?;
    }
    Ok(TrainLog {
        epochs,
        best_epoch,
        steps: step,
    })
}
