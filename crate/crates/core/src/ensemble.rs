//! Convex combination of the dissimilarity score with the three dispersion
//! maps, with weights from an exhaustive simplex grid or learned as softmax
//! scalars.

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{AnomalyLabel, AnomalyLabelMap, AnomalyScoreMap};
use crate::error::{Error, Result};
use crate::metrics::evaluate_pixels;
use crate::nn::Adam;

/// Map order used throughout: dissimilarity, entropy, distance, perceptual.
pub const MAP_NAMES: [&str; 4] = ["dissimilarity", "entropy", "distance", "perceptual"];

/// The four per-pixel maps of one image, in [`MAP_NAMES`] order.
pub type MapSet = [AnomalyScoreMap; 4];

/// Non-negative weights summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct EnsembleWeights([f64; 4]);

impl EnsembleWeights {
    /// Normalizes `w` onto the simplex.
    pub fn new(w: [f64; 4]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!("ensemble weights must be finite and non-negative: {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Invalid("ensemble weights sum to zero".into()));
        }
        Ok(EnsembleWeights(w.map(|v| v / sum)))
    }

    pub fn corner(i: usize) -> Self {
        let mut w = [0.0; 4];
        w[i] = 1.0;
        EnsembleWeights(w)
    }

    pub fn uniform() -> Self {
        EnsembleWeights([0.25; 4])
    }

    pub fn get(&self) -> [f64; 4] {
        self.0
    }

    /// The convex combination of one pixel's four values.
    pub fn mix(&self, v: [f32; 4]) -> f32 {
        let s: f64 = self.0.iter().zip(v).map(|(w, x)| w * x as f64).sum();
        (s as f32).clamp(0.0, 1.0)
    }
}

impl TryFrom<[f64; 4]> for EnsembleWeights {
    type Error = Error;

    fn try_from(w: [f64; 4]) -> Result<Self> {
        Self::new(w)
    }
}

impl From<EnsembleWeights> for [f64; 4] {
    fn from(w: EnsembleWeights) -> Self {
        w.0
    }
}

fn check_maps(maps: &MapSet) -> Result<(usize, usize)> {
    let size = (maps[0].height(), maps[0].width());
    for (name, m) in MAP_NAMES.iter().zip(maps) {
        if (m.height(), m.width()) != size {
            return Err(Error::Shape(format!(
                "{name} map is {}x{}, dissimilarity map is {}x{}",
                m.height(),
                m.width(),
                size.0,
                size.1
            )));
        }
        if m.scores().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!("{name} map has values outside [0,1]")));
        }
    }
    Ok(size)
}

/// Pixel-wise weighted average of the four maps.
pub fn combine(maps: &MapSet, w: &EnsembleWeights) -> Result<AnomalyScoreMap> {
    let size = check_maps(maps)?;
    let out = Array2::from_shape_fn(size, |p| {
        w.mix([maps[0].scores()[p], maps[1].scores()[p], maps[2].scores()[p], maps[3].scores()[p]])
    });
    AnomalyScoreMap::new(out)
}

/// Every point of the simplex whose coordinates are multiples of `step`,
/// corners included.
pub fn simplex_grid(step: f64) -> Result<Vec<EnsembleWeights>> {
    let n = (1.0 / step).round();
    if !(step > 0.0) || n < 1.0 || (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} must divide 1")));
    }
    let n = n as usize;
    let mut out = Vec::new();
    for a in 0..=n {
        for b in 0..=n - a {
            for c in 0..=n - a - b {
                let d = n - a - b - c;
                out.push(EnsembleWeights::new([a, b, c, d].map(|k| k as f64))?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Highest average precision.
    #[default]
    Ap,
    /// Lowest FPR at 95% TPR, average precision breaking ties.
    Fpr95,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub weights: EnsembleWeights,
    pub ap: f64,
    pub fpr95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best: GridPoint,
    pub objective: Objective,
    pub step: f64,
    /// Weights are normalized to the simplex.
    pub normalized: bool,
    pub log: Vec<GridPoint>,
}

/// Labelled pixels of a validation set, flattened once for repeated scoring.
#[derive(Debug, Clone)]
pub struct PixelTable {
    values: Vec<[f32; 4]>,
    labels: Vec<u8>,
}

impl PixelTable {
    /// Keeps only non-IGNORE pixels.
    pub fn new(maps: &[MapSet], labels: &[AnomalyLabelMap]) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Invalid("empty validation set".into()));
        }
        if maps.len() != labels.len() {
            return Err(Error::Shape(format!("{} map sets vs {} label maps", maps.len(), labels.len())));
        }
        let mut values = Vec::new();
        let mut out_labels = Vec::new();
        for (i, (m, l)) in maps.iter().zip(labels).enumerate() {
            if check_maps(m)? != (l.height(), l.width()) {
                return Err(Error::Shape(format!("image {i}: maps and labels differ in size")));
            }
            for (p, &lab) in l.raw().indexed_iter() {
                if lab != AnomalyLabel::Ignore as u8 {
                    values.push([m[0].scores()[p], m[1].scores()[p], m[2].scores()[p], m[3].scores()[p]]);
                    out_labels.push(lab);
                }
            }
        }
        Ok(PixelTable {
            values,
            labels: out_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn score(&self, w: &EnsembleWeights) -> Result<GridPoint> {
        let scores: Vec<f64> = self.values.iter().map(|v| w.mix(*v) as f64).collect();
        let r = evaluate_pixels(&scores, &self.labels)?;
        Ok(GridPoint {
            weights: *w,
            ap: r.ap,
            fpr95: r.fpr95,
        })
    }
}

fn better(a: &GridPoint, b: &GridPoint, objective: Objective) -> bool {
    use std::cmp::Ordering::*;
    let primary = match objective {
        Objective::Ap => a.ap.total_cmp(&b.ap),
        Objective::Fpr95 => b.fpr95.total_cmp(&a.fpr95).then(a.ap.total_cmp(&b.ap)),
    };
    match primary {
        Greater => true,
        Less => false,
        Equal => {
            let (wa, wb) = (a.weights.get(), b.weights.get());
            wa.iter().zip(&wb).map(|(x, y)| x.total_cmp(y)).find(|o| *o != Equal) == Some(Greater)
        }
    }
}

/// Exhaustive search over [`simplex_grid`]; exact ties go to the larger
/// dissimilarity weight, then to the lexicographically larger vector.
pub fn grid_search(table: &PixelTable, step: f64, objective: Objective) -> Result<GridSearch> {
    if table.is_empty() {
        return Err(Error::Invalid("empty validation set".into()));
    }
    let log = simplex_grid(step)?
        .iter()
        .map(|w| table.score(w))
        .collect::<Result<Vec<_>>>()?;
    let mut best = log[0].clone();
    for p in &log[1..] {
        if better(p, &best, objective) {
            best = p.clone();
        }
    }
    Ok(GridSearch {
        best,
        objective,
        step,
        normalized: true,
        log,
    })
}

/// Softmax-parameterized weights that can be trained by gradient descent.
#[derive(Debug, Clone)]
pub struct EnsembleHead {
    pub theta: Var,
}

impl EnsembleHead {
    /// Zero logits, i.e. uniform weights.
    pub fn new(dtype: DType) -> Result<Self> {
        Ok(EnsembleHead {
            theta: Var::zeros(4, dtype, &Device::Cpu)?,
        })
    }

    pub fn weights(&self) -> Result<EnsembleWeights> {
        let w: Vec<f64> = self.probabilities()?.to_dtype(DType::F64)?.to_vec1()?;
        EnsembleWeights::new([w[0], w[1], w[2], w[3]])
    }

    fn probabilities(&self) -> Result<Tensor> {
        let e = self.theta.as_tensor().exp()?;
        Ok(e.broadcast_div(&e.sum_all()?)?)
    }

    /// Combined score for stacked maps `... x 4`, last axis in map order.
    pub fn combine(&self, stacked: &Tensor) -> Result<Tensor> {
        let p = self.probabilities()?;
        Ok(stacked.broadcast_mul(&p)?.sum(stacked.rank() - 1)?)
    }

    /// Class-balanced binary cross-entropy of the combined score. `targets`
    /// holds 0/1 per row, `mask` 1 for labelled rows.
    pub fn loss(&self, stacked: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let s = self.combine(stacked)?.clamp(1e-6, 1.0 - 1e-6)?;
        let pos = (targets * mask)?;
        let neg = ((1.0 - targets)? * mask)?;
        let n_pos = pos.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let n_neg = neg.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let present = f64::from(u8::from(n_pos > 0.0) + u8::from(n_neg > 0.0));
        if present == 0.0 {
            return Err(Error::Invalid("no labelled pixels for the ensemble head".into()));
        }
        let mut total = Tensor::zeros((), s.dtype(), s.device())?;
        if n_pos > 0.0 {
            total = (total + ((s.log()? * &pos)?.sum_all()? / (n_pos * present))?)?;
        }
        if n_neg > 0.0 {
            total = (total + (((1.0 - &s)?.log()? * &neg)?.sum_all()? / (n_neg * present))?)?;
        }
        Ok(total.neg()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnMode {
    /// Trained together with the dissimilarity network.
    Joint,
    /// Fitted on fixed maps after the network is trained.
    #[default]
    PostHoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub mode: LearnMode,
    pub steps: usize,
    pub lr: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            mode: LearnMode::PostHoc,
            steps: 200,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedWeights {
    pub weights: EnsembleWeights,
    pub mode: LearnMode,
    pub losses: Vec<f64>,
}

/// Full-batch Adam on the class-balanced cross-entropy of the combined map.
pub fn learn_weights(table: &PixelTable, cfg: &LearnConfig) -> Result<LearnedWeights> {
    if table.is_empty() {
        return Err(Error::Invalid("empty validation set".into()));
    }
    let n = table.len();
    let flat: Vec<f32> = table.values.iter().flatten().copied().collect();
    let stacked = Tensor::from_vec(flat, (n, 4), &Device::Cpu)?;
    let targets: Vec<f32> = table.labels.iter().map(|l| f32::from(*l == AnomalyLabel::Anomaly as u8)).collect();
    let targets = Tensor::from_vec(targets, n, &Device::Cpu)?;
    let mask = Tensor::ones(n, DType::F32, &Device::Cpu)?;
    let head = EnsembleHead::new(DType::F32)?;
    let mut opt = Adam::new(vec![head.theta.clone()], cfg.lr)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = head.loss(&stacked, &targets, &mask)?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::Diverged { seed: 0, step });
        }
        losses.push(v);
        opt.step(&loss.backward()?)?;
    }
    Ok(LearnedWeights {
        weights: head.weights()?,
        mode: cfg.mode,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::oracle::brute_force_ap;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(v: Array2<f32>) -> AnomalyScoreMap {
        AnomalyScoreMap::new(v).unwrap()
    }

    fn constant(v: f32) -> AnomalyScoreMap {
        map(Array2::from_elem((2, 3), v))
    }

    fn random_set(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MapSet {
        std::array::from_fn(|_| map(Array2::from_shape_fn((h, w), |_| rng.random::<f32>())))
    }

    #[test]
    fn weights_normalize_and_reject_bad_input() {
        assert_eq!(EnsembleWeights::new([2.0, 2.0, 0.0, 0.0]).unwrap().get(), [0.5, 0.5, 0.0, 0.0]);
        assert!(EnsembleWeights::new([0.0; 4]).is_err());
        assert!(EnsembleWeights::new([-1.0, 1.0, 1.0, 1.0]).is_err());
        assert_eq!(EnsembleWeights::uniform().get(), [0.25; 4]);
        let json = serde_json::to_string(&EnsembleWeights::corner(2)).unwrap();
        assert_eq!(json, "[0.0,0.0,1.0,0.0]");
        assert!(serde_json::from_str::<EnsembleWeights>("[0,0,0,0]").is_err());
    }

    #[test]
    fn corner_weight_returns_dissimilarity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = random_set(&mut rng, 4, 5);
        assert_eq!(combine(&m, &EnsembleWeights::corner(0)).unwrap(), m[0]);
    }

    #[test]
    fn identical_maps_are_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = map(Array2::from_shape_fn((4, 5), |_| rng.random::<f32>()));
        let m: MapSet = std::array::from_fn(|_| a.clone());
        for w in simplex_grid(0.25).unwrap() {
            assert_eq!(combine(&m, &w).unwrap(), a);
        }
    }

    #[test]
    fn arithmetic_of_two_constants() {
        let m = [constant(0.2), constant(0.6), constant(0.9), constant(0.1)];
        let out = combine(&m, &EnsembleWeights::new([0.5, 0.5, 0.0, 0.0]).unwrap()).unwrap();
        assert!(out.scores().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn shape_and_range_are_checked() {
        let m = [constant(0.2), constant(0.6), map(Array2::zeros((3, 3))), constant(0.1)];
        assert!(combine(&m, &EnsembleWeights::uniform()).is_err());
        let m = [constant(0.2), constant(1.5), constant(0.1), constant(0.1)];
        assert!(combine(&m, &EnsembleWeights::uniform()).is_err());
    }

    #[test]
    fn combine_is_monotone_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = random_set(&mut rng, 3, 4);
            let w = EnsembleWeights::new(std::array::from_fn(|_| rng.random::<f64>() + 0.01)).unwrap();
            let base = combine(&m, &w).unwrap();
            let k = rng.random_range(0..4);
            let mut up = m.clone();
            up[k] = map(m[k].scores().mapv(|v| (v + 0.1).min(1.0)));
            let raised = combine(&up, &w).unwrap();
            assert!(raised.scores().iter().zip(base.scores()).all(|(a, b)| a >= b));
            let perm = [2, 0, 3, 1];
            let pm: MapSet = std::array::from_fn(|i| m[perm[i]].clone());
            let pw = EnsembleWeights::new(std::array::from_fn(|i| w.get()[perm[i]])).unwrap();
            let permuted = combine(&pm, &pw).unwrap();
            assert!(permuted.scores().iter().zip(base.scores()).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(simplex_grid(0.1).unwrap().len(), 286);
        let corners = simplex_grid(1.0).unwrap();
        assert_eq!(corners.len(), 4);
        for i in 0..4 {
            assert!(corners.contains(&EnsembleWeights::corner(i)));
        }
        assert!(simplex_grid(0.3).is_err());
        assert!(simplex_grid(0.0).is_err());
    }

    #[test]
    fn perfect_dissimilarity_wins_at_its_corner() {
        let labels = AnomalyLabelMap::new(array![[1, 0, 0], [0, 1, 255]]).unwrap();
        let m = [
            map(array![[0.9, 0.1, 0.2], [0.0, 0.8, 0.5]]),
            map(array![[0.1, 0.9, 0.2], [0.0, 0.3, 0.5]]),
            constant(0.5),
            constant(0.3),
        ];
        let table = PixelTable::new(&[m], &[labels]).unwrap();
        assert_eq!(table.len(), 5);
        let g = grid_search(&table, 0.1, Objective::Ap).unwrap();
        assert_eq!(g.best.ap, 1.0);
        assert_eq!(g.best.weights, EnsembleWeights::corner(0));
        assert_eq!(g.log.len(), 286);
    }

    #[test]
    fn interior_point_beats_every_corner() {
        // Two maps that each rank one positive last; their average ranks both first.
        let labels = AnomalyLabelMap::new(array![[1, 1, 0, 0, 0, 0, 0, 0, 0, 0]]).unwrap();
        let a = map(array![[1.0, 0.0, 0.3, 0.3, 0.3, 0.2, 0.2, 0.2, 0.2, 0.2]]);
        let b = map(array![[0.0, 1.0, 0.3, 0.3, 0.3, 0.2, 0.2, 0.2, 0.2, 0.2]]);
        let zero = map(Array2::zeros((1, 10)));
        let m = [a, b, zero.clone(), zero];
        let table = PixelTable::new(&[m.clone()], &[labels.clone()]).unwrap();
        let g = grid_search(&table, 0.5, Objective::Ap).unwrap();
        assert_eq!(g.log.len(), 10);
        let raw: Vec<u8> = labels.raw().iter().copied().collect();
        let oracle = |w: &EnsembleWeights| {
            let s: Vec<f64> = combine(&m, w).unwrap().scores().iter().map(|v| *v as f64).collect();
            brute_force_ap(&s, &raw)
        };
        let best_oracle = g.log.iter().map(|p| oracle(&p.weights)).fold(f64::MIN, f64::max);
        assert_eq!(g.best.weights, EnsembleWeights::new([0.5, 0.5, 0.0, 0.0]).unwrap());
        assert!((g.best.ap - best_oracle).abs() < 1e-12);
        for i in 0..4 {
            assert!(g.best.ap > oracle(&EnsembleWeights::corner(i)));
        }
    }

    #[test]
    fn grid_dominates_single_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let sets: Vec<MapSet> = (0..3).map(|_| random_set(&mut rng, 4, 4)).collect();
            let labels: Vec<AnomalyLabelMap> = (0..3)
                .map(|_| AnomalyLabelMap::new(Array2::from_shape_fn((4, 4), |_| rng.random_range(0..2u8))).unwrap())
                .collect();
            let table = PixelTable::new(&sets, &labels).unwrap();
            let g = grid_search(&table, 0.25, Objective::Ap).unwrap();
            for i in 0..4 {
                let single: Vec<AnomalyScoreMap> = sets.iter().map(|s| s[i].clone()).collect();
                let ap = crate::metrics::evaluate(&single, &labels).unwrap().ap;
                assert!(g.best.ap >= ap);
            }
            let f = grid_search(&table, 0.25, Objective::Fpr95).unwrap();
            assert!(f.log.iter().all(|p| p.fpr95 >= f.best.fpr95));
        }
    }

    #[test]
    fn empty_validation_set_errors() {
        assert!(PixelTable::new(&[], &[]).is_err());
    }

    #[test]
    fn zero_steps_return_uniform_init() {
        let labels = AnomalyLabelMap::new(array![[1, 0]]).unwrap();
        let m: MapSet = std::array::from_fn(|_| map(array![[0.7, 0.2]]));
        let table = PixelTable::new(&[m], &[labels]).unwrap();
        let cfg = LearnConfig {
            steps: 0,
            ..LearnConfig::default()
        };
        let l = learn_weights(&table, &cfg).unwrap();
        assert!(l.weights.get().iter().all(|w| (w - 0.25).abs() < 1e-12));
        assert!(l.losses.is_empty());
    }

    #[test]
    fn learned_mass_moves_toward_informative_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (16, 16);
        let mut sets = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..4 {
            let s = random_set(&mut rng, h, w);
            labels.push(AnomalyLabelMap::new(s[1].scores().mapv(|v| u8::from(v > 0.7))).unwrap());
            sets.push(s);
        }
        let table = PixelTable::new(&sets, &labels).unwrap();
        let l = learn_weights(&table, &LearnConfig::default()).unwrap();
        let w = l.weights.get();
        assert!(w[1] > 0.25 && w.iter().enumerate().all(|(i, v)| i == 1 || *v < w[1]), "{w:?}");
        assert!(l.losses.last().unwrap() < &l.losses[0]);
    }
}
