//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! fails. `ANOMSEG_ACCEPTANCE_DIR` keeps the end-to-end run on disk (and
//! reuses it on the next invocation) instead of a temporary directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anomseg::data::{AnomalyLabelMap, RgbImage, SemanticMap, Split, VOID};
use anomseg::datagen::{audit, check_no_leak, load_training_set, Audit, Provenance};
use anomseg::dissimilarity::train::{loss, train, TrainConfig};
use anomseg::dissimilarity::{DissimilarityInputs, DissimilarityNet, DissimilaritySpec, IMAGE_ENCODER_PREFIX};
use anomseg::metrics::evaluate_pixels;
use anomseg::metrics::oracle::{brute_force_ap, brute_force_auroc, brute_force_fpr_at_tpr};
use anomseg::nn::ClassWeighting;
use anomseg::pipeline::{AblationReport, NetKind, Pipeline, RunConfig, Variant};
use anomseg::uncertainty::{normalized_entropy, top2_distance};
use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const METRIC_TOL: f64 = 1e-9;
const MONOTONE_TOL: f64 = 1e-12;
const GRAD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-3;
const E2E_BUDGET: Duration = Duration::from_secs(45 * 60);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    format!("{e:#}")
}

fn dispersion() -> Outcome {
    for c in [2usize, 3, 5, 19] {
        let uniform = vec![1.0 / c as f32; c];
        let mut hot = vec![0.0f32; c];
        hot[c / 2] = 1.0;
        ensure(normalized_entropy(uniform.clone()) == 1.0, format!("uniform entropy != 1 for C={c}"))?;
        ensure(normalized_entropy(hot.clone()) == 0.0, format!("one-hot entropy != 0 for C={c}"))?;
        ensure(top2_distance(hot) == 0.0, format!("one-hot distance != 0 for C={c}"))?;
        ensure(top2_distance(uniform) == 1.0, format!("uniform distance != 1 for C={c}"))?;
        if c > 2 {
            let mut two = vec![0.0f32; c];
            two[0] = 0.5;
            two[1] = 0.5;
            let got = normalized_entropy(two);
            let want = 1.0 / (c as f64).log2();
            ensure((got - want).abs() <= METRIC_TOL, format!("two-class entropy {got} vs {want} for C={c}"))?;
        }
    }
    Ok("C in {2,3,5,19}".into())
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=100);
    let levels = rng.random_range(2..=20);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..=levels) as f64 / levels as f64).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    labels[0] = 1;
    labels[1] = 0;
    (scores, labels)
}

fn oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let (s, l) = random_case(&mut rng);
        let r = evaluate_pixels(&s, &l).map_err(err)?;
        for (name, got, want) in [
            ("AP", r.ap, brute_force_ap(&s, &l)),
            ("AUROC", r.auroc, brute_force_auroc(&s, &l)),
            ("FPR95", r.fpr95, brute_force_fpr_at_tpr(&s, &l, 0.95)),
        ] {
            let d = (got - want).abs();
            worst = worst.max(d);
            ensure(d < METRIC_TOL, format!("case {case}: {name} {got} vs oracle {want}"))?;
        }
    }
    Ok(format!("1000 cases, max |d| {worst:.1e}"))
}

fn monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (s, l) = random_case(&mut rng);
        let cubed: Vec<f64> = s.iter().map(|x| x.powi(3)).collect();
        let a = evaluate_pixels(&s, &l).map_err(err)?;
        let b = evaluate_pixels(&cubed, &l).map_err(err)?;
        for (name, x, y) in [("AP", a.ap, b.ap), ("AUROC", a.auroc, b.auroc), ("FPR95", a.fpr95, b.fpr95)] {
            let d = (x - y).abs();
            worst = worst.max(d);
            ensure(d <= MONOTONE_TOL, format!("case {case}: {name} moved by {d:e}"))?;
        }
    }
    Ok(format!("100 cases, max |d| {worst:.1e}"))
}

fn micro_inputs(spec: &DissimilaritySpec, seed: u64) -> DissimilarityInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = spec.input_size;
    let c = spec.num_classes as u8;
    let img = Array3::from_shape_fn((3, h, w), |_| rng.random::<f32>());
    let syn = Array3::from_shape_fn((3, h, w), |_| rng.random::<f32>());
    let ids = Array2::from_shape_fn((h, w), |_| match rng.random_range(0..=c) {
        v if v == c => VOID,
        v => v,
    });
    let unc = Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.05f32..0.95));
    DissimilarityInputs::new(
        RgbImage::new(img).unwrap(),
        RgbImage::new(syn).unwrap(),
        SemanticMap::new(ids, c).unwrap(),
        unc,
    )
    .unwrap()
}

fn micro_labels(spec: &DissimilaritySpec, seed: u64) -> AnomalyLabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = spec.input_size;
    let mut raw = Array2::from_shape_fn((h, w), |_| [0u8, 1, 255][rng.random_range(0..3)]);
    raw[[0, 0]] = 0;
    raw[[0, 1]] = 1;
    AnomalyLabelMap::new(raw).unwrap()
}

fn gradients() -> Outcome {
    let spec = DissimilaritySpec::micro(3);
    let net = DissimilarityNet::new(spec.clone(), 21, DType::F64).map_err(err)?;
    let xs = [micro_inputs(&spec, 1), micro_inputs(&spec, 2)];
    let ys = [micro_labels(&spec, 3), micro_labels(&spec, 4)];
    let xr: Vec<_> = xs.iter().collect();
    let yr: Vec<_> = ys.iter().collect();
    let eval = || -> Result<f64, String> {
        loss(&net, &xr, &yr, ClassWeighting::InverseFrequency)
            .and_then(|t| Ok(t.to_scalar::<f64>()?))
            .map_err(err)
    };
    let l = loss(&net, &xr, &yr, ClassWeighting::InverseFrequency).map_err(err)?;
    let grads = l.backward().map_err(err)?;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (name, var) in net.params().iter() {
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g.flatten_all().and_then(|g| g.to_vec1()).map_err(err)?,
            None => vec![0.0; var.elem_count()],
        };
        let shape = var.shape().clone();
        let base: Vec<f64> = var.as_tensor().flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
        for i in 0..base.len() {
            let probe = |delta: f64| -> Result<f64, String> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), var.device()).map_err(err)?)
                    .map_err(err)?;
                eval()
            };
            let numeric = (probe(GRAD_STEP)? - probe(-GRAD_STEP)?) / (2.0 * GRAD_STEP);
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), var.device()).map_err(err)?)
                .map_err(err)?;
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
            ensure(rel < GRAD_TOL, format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}"))?;
        }
    }
    Ok(format!("{checked} parameters, max rel err {worst:.1e}"))
}

fn flat(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().into_iter().map(f32::to_bits).collect()
}

fn wiring() -> Outcome {
    let spec = DissimilaritySpec::full(3).scaled(16);
    let net = DissimilarityNet::new(spec.clone(), 5, DType::F32).map_err(err)?;
    let x = micro_inputs(&spec, 6);
    let out = net.forward(&net.assemble(&[&x.with_zero_uncertainty()]).map_err(err)?).map_err(err)?;
    for (i, f) in out.fusion.iter().enumerate() {
        ensure(flat(f).iter().all(|b| f32::from_bits(*b) == 0.0), format!("fusion level {i} non-zero"))?;
    }

    let mut y = x.clone();
    let mut ids = y.semantic.ids().clone();
    ids[[7, 9]] = (ids[[7, 9]] + 1) % 3;
    y.semantic = y.semantic.with_ids(ids).map_err(err)?;
    let a = net.predict(&[&x]).map_err(err)?;
    let b = net.predict(&[&y]).map_err(err)?;
    ensure(a != b, "semantic perturbation left the output unchanged")?;

    let micro = DissimilaritySpec::micro(3);
    let net = DissimilarityNet::new(micro.clone(), 8, DType::F32).map_err(err)?;
    let before = net.params().snapshot().map_err(err)?;
    let data: Vec<_> = (0..4).map(|s| (micro_inputs(&micro, 30 + s), micro_labels(&micro, 40 + s))).collect();
    let cfg = TrainConfig {
        epochs: 2,
        lr: 1e-2,
        freeze_encoder: true,
        ..TrainConfig::default()
    };
    train(&net, &data, &[], &cfg, 0).map_err(err)?;
    let (mut frozen, mut moved) = (0, 0);
    for (k, v) in net.params().iter() {
        let same = flat(v.as_tensor()) == flat(&before[k]);
        if k.starts_with(IMAGE_ENCODER_PREFIX) {
            ensure(same, format!("frozen weight {k} changed"))?;
            frozen += 1;
        } else if !same {
            moved += 1;
        }
    }
    ensure(frozen > 0 && moved > 0, "no frozen or no trained tensors")?;
    Ok(format!("{frozen} frozen tensors bit-identical, {moved} trained tensors moved"))
}

fn e2e_dir() -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("ANOMSEG_ACCEPTANCE_DIR") {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir().expect("temporary directory");
            (t.path().join("run"), Some(t))
        }
    }
}

fn run_e2e(root: &Path) -> Result<(Pipeline, AblationReport, Duration), String> {
    let cfg = RunConfig {
        output: root.to_path_buf(),
        ..RunConfig::default()
    };
    let start = Instant::now();
    let p = Pipeline::new(cfg).map_err(err)?;
    let report = p
        .run_ablation(&[Variant::Full, Variant::NoEnsemble, Variant::NoUncertainty])
        .map_err(err)?;
    Ok((p, report, start.elapsed()))
}

fn directional(r: &AblationReport, elapsed: Duration) -> Outcome {
    let full = r.variant(Variant::Full).ok_or("missing full results")?;
    let no_unc = r.variant(Variant::NoUncertainty).ok_or("missing w/o-uncertainty results")?;
    let ratio = full.ap.mean / no_unc.ap.mean;
    let base = r.positive_rate;
    let fpr_wins = r
        .validation
        .iter()
        .filter(|v| v.ensemble_fpr95 <= v.dissimilarity_fpr95)
        .count();
    let detail = format!(
        "AP full {:.4} vs w/o unc {:.4} (x{ratio:.2}), random {base:.4}, val FPR95 wins {fpr_wins}/{}, {:.1} min",
        full.ap.mean,
        no_unc.ap.mean,
        r.validation.len(),
        elapsed.as_secs_f64() / 60.0
    );
    ensure(r.seeds.len() == 3, format!("{} seeds, need 3", r.seeds.len()))?;
    ensure(ratio >= 1.5, format!("(a) fails: {detail}"))?;
    ensure(
        full.ap.mean >= 3.0 * base && no_unc.ap.mean >= 3.0 * base,
        format!("(b) fails: {detail}"),
    )?;
    ensure(fpr_wins >= 2, format!("(c) fails: {detail}"))?;
    ensure(elapsed < E2E_BUDGET, format!("over the runtime budget: {detail}"))?;
    Ok(detail)
}

fn dominance(reports: &[&AblationReport]) -> Outcome {
    let mut n = 0;
    for r in reports {
        for v in &r.validation {
            ensure(
                v.ensemble_ap >= v.best_single_ap,
                format!("seed {}: grid AP {} < best single {}", v.seed, v.ensemble_ap, v.best_single_ap),
            )?;
            n += 1;
        }
    }
    ensure(n > 0, "no validation records")?;
    Ok(format!("{n} runs"))
}

fn small_config(root: &Path) -> Result<RunConfig, String> {
    let pairs = [
        ("output", serde_json::to_string(root).map_err(err)?),
        ("image_size", "[64, 128]".into()),
        ("seeds", "[3]".into()),
        ("shapes.train_images", "24".into()),
        ("shapes.val_images", "8".into()),
        ("shapes.test_images", "4".into()),
        ("shapes.anomaly_images", "6".into()),
        ("toy.seg_epochs", "1".into()),
        ("toy.synth_epochs", "1".into()),
        ("train.epochs", "1".into()),
        ("ensemble.step", "0.25".into()),
    ]
    .map(|(k, v)| (k.to_string(), v));
    RunConfig::from_pairs(&pairs).map_err(err)
}

fn metric_bits(r: &AblationReport) -> Vec<u64> {
    let mut out = Vec::new();
    for v in &r.variants {
        for m in &v.runs {
            out.extend([m.ap.to_bits(), m.fpr95.to_bits(), m.auroc.to_bits()]);
        }
    }
    for v in &r.validation {
        out.extend(v.weights.map(f64::to_bits));
        out.extend([v.ensemble_ap.to_bits(), v.dissimilarity_ap.to_bits()]);
    }
    out
}

fn determinism() -> Result<(String, AblationReport), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let p = Pipeline::new(small_config(&dir.path().join(run))?).map_err(err)?;
        reports.push(p.run_ablation(&[Variant::Full, Variant::NoUncertainty]).map_err(err)?);
    }
    let (a, b) = (metric_bits(&reports[0]), metric_bits(&reports[1]));
    ensure(a == b, "metrics differ between identical runs")?;
    Ok((format!("{} values bit-identical across two runs", a.len()), reports.remove(0)))
}

fn datagen_audit(p: &Pipeline) -> Outcome {
    let index = p.dataset().map_err(err)?;
    let mut total = Audit::default();
    let (mut swaps, mut voids) = (0, 0);
    for &seed in &p.cfg.seeds {
        for (split, kind) in [(Split::Train, NetKind::Full), (Split::Train, NetKind::NoUncertainty)] {
            let dir = p.datagen_dir(split, kind.mix(p.cfg.datagen.mix), seed);
            let (samples, _) = load_training_set(&dir).map_err(err)?;
            let stems: Vec<&str> = samples.iter().map(|s| s.stem.as_str()).collect();
            check_no_leak(&index, split, &stems).map_err(err)?;
            for s in &samples {
                let record = index
                    .split(split)
                    .find(|r| r.stem == s.stem)
                    .ok_or_else(|| format!("{} not in {split:?}", s.stem))?;
                let source = index.load_sample(record).map_err(err)?;
                let a = audit(s, &source);
                ensure(a.passed(), format!("{} ({:?}) failed the audit: {a:?}", s.stem, s.provenance))?;
                match s.provenance {
                    Provenance::Swap => swaps += 1,
                    Provenance::Void => voids += 1,
                }
                total = total.merge(a);
            }
        }
    }
    ensure(swaps > 0 && voids > 0, "audit saw no swap or no void samples")?;
    Ok(format!("{swaps} swap + {voids} void samples, {} anomaly pixels, no leaks", total.anomaly_pixels))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(&str, Outcome)> = vec![
        ("dispersion analytics", dispersion()),
        ("metric oracle equivalence", oracle()),
        ("monotone-transform invariance", monotone()),
        ("gradient check (f64, micro net)", gradients()),
        ("wiring: zero fusion, frozen encoder, semantic path", wiring()),
    ];

    let (root, _guard) = e2e_dir();
    let e2e = run_e2e(&root);
    let det = determinism();
    match &e2e {
        Ok((_, r, t)) => results.push(("toy end-to-end ablation", directional(r, *t))),
        Err(e) => results.push(("toy end-to-end ablation", Err(e.clone()))),
    }
    let mut reports = Vec::new();
    if let Ok((_, r, _)) = &e2e {
        reports.push(r);
    }
    if let Ok((_, r)) = &det {
        reports.push(r);
    }
    results.push(("ensemble dominance on validation", dominance(&reports)));
    results.push(("determinism", det.map(|(s, _)| s)));
    results.push((
        "datagen audit and split-leak check",
        match &e2e {
            Ok((p, _, _)) => datagen_audit(p),
            Err(e) => Err(format!("end-to-end run failed: {e}")),
        },
    ));

    let n = results.len();
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(d) => println!("[{}/{n}] {name} ... PASS ({d})", i + 1),
            Err(d) => {
                failed += 1;
                println!("[{}/{n}] {name} ... FAIL ({d})", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", n - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
