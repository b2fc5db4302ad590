//! Ablation summaries and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{EnsembleRecord, Evaluation, StageTiming, Variant};
use crate::data::io::{overlay, save_image};
use crate::data::{AnomalyLabel, AnomalyLabelMap, AnomalyScoreMap, RgbImage};
use crate::error::{Error, Result};

/// Files written by [`emit_report`]: the JSON summary, a metrics table with
/// one row per result and the PR/ROC curve points.
pub const REPORT_FILES: [&str; 3] = ["summary.json", "metrics.csv", "curves.csv"];

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Standard deviation is zero for a single value.
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub ap: f64,
    pub fpr95: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub label: String,
    pub ap: Stat,
    pub fpr95: Stat,
    pub auroc: Stat,
    pub runs: Vec<SeedMetrics>,
}

/// Validation-split comparison of the chosen ensemble with the
/// dissimilarity map alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub seed: u64,
    pub weights: [f64; 4],
    pub ensemble_ap: f64,
    pub ensemble_fpr95: f64,
    pub dissimilarity_ap: f64,
    pub dissimilarity_fpr95: f64,
    pub best_single_ap: f64,
    pub learned_weights: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Anomalous share of evaluated pixels; the AP of a random scorer.
    pub positive_rate: f64,
    pub variants: Vec<VariantSummary>,
    pub validation: Vec<ValidationCheck>,
    pub warnings: Vec<String>,
    pub timings: Vec<StageTiming>,
}

impl AblationReport {
    pub fn build(
        config_hash: String,
        seeds: &[u64],
        positive_rate: f64,
        variants: &[Variant],
        evaluations: &[(Variant, Evaluation)],
        ensembles: &[EnsembleRecord],
        timings: Vec<StageTiming>,
    ) -> Result<Self> {
        let mut warnings = Vec::new();
        if seeds.len() < 2 {
            let w = format!("only {} seed(s): standard deviations are reported as 0", seeds.len());
            warn!("{w}");
            warnings.push(w);
        }
        let mut summaries = Vec::new();
        for &v in variants {
            let runs: Vec<SeedMetrics> = evaluations
                .iter()
                .filter(|(x, _)| *x == v)
                .map(|(_, e)| SeedMetrics {
                    seed: e.seed,
                    ap: e.result.ap,
                    fpr95: e.result.fpr95,
                    auroc: e.result.auroc,
                })
                .collect();
            if runs.is_empty() {
                return Err(Error::Invalid(format!("no evaluations for `{}`", v.name())));
            }
            let col = |f: fn(&SeedMetrics) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
            summaries.push(VariantSummary {
                variant: v,
                label: v.label().into(),
                ap: col(|r| r.ap),
                fpr95: col(|r| r.fpr95),
                auroc: col(|r| r.auroc),
                runs,
            });
        }
        let validation = ensembles
            .iter()
            .map(|r| ValidationCheck {
                seed: r.seed,
                weights: r.search.best.weights.get(),
                ensemble_ap: r.search.best.ap,
                ensemble_fpr95: r.search.best.fpr95,
                dissimilarity_ap: r.dissimilarity_only().ap,
                dissimilarity_fpr95: r.dissimilarity_only().fpr95,
                best_single_ap: r.best_single_ap(),
                learned_weights: r.learned.weights.get(),
            })
            .collect();
        Ok(AblationReport {
            config_hash,
            seeds: seeds.to_vec(),
            positive_rate,
            variants: summaries,
            validation,
            warnings,
            timings,
        })
    }

    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }

    /// Markdown table of mean ± std AP and FPR95 in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Configuration | AP ↑ | FPR95 ↓ | AUROC ↑ |");
        let _ = writeln!(s, "|---|---|---|---|");
        for v in &self.variants {
            let _ = writeln!(
                s,
                "| {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
                v.label,
                100.0 * v.ap.mean,
                100.0 * v.ap.std,
                100.0 * v.fpr95.mean,
                100.0 * v.fpr95.std,
                100.0 * v.auroc.mean,
                100.0 * v.auroc.std
            );
        }
        let _ = writeln!(
            s,
            "\n{} seed(s); random-scorer AP {:.2}.",
            self.seeds.len(),
            100.0 * self.positive_rate
        );
        for w in &self.warnings {
            let _ = writeln!(s, "Warning: {w}");
        }
        s
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes [`REPORT_FILES`] into `dir`.
pub fn emit_report(results: &[Evaluation], dir: &Path) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        return Err(Error::Invalid("no evaluation results to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = REPORT_FILES.iter().map(|f| dir.join(f)).collect();

    let summary: Vec<_> = results
        .iter()
        .map(|e| {
            serde_json::json!({
                "name": e.name,
                "seed": e.seed,
                "weights": e.weights,
                "result": e.result,
            })
        })
        .collect();
    write(&paths[0], &serde_json::to_string_pretty(&summary)?)?;

    let mut csv = String::from("name,seed,ap,fpr95,auroc,positives,negatives,ignored,w_dissimilarity,w_entropy,w_distance,w_perceptual\n");
    for e in results {
        let r = &e.result;
        let w = e.weights.get();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            e.name, e.seed, r.ap, r.fpr95, r.auroc, r.positives, r.negatives, r.ignored, w[0], w[1], w[2], w[3]
        );
    }
    write(&paths[1], &csv)?;

    let mut curves = String::from("name,seed,curve,x,y\n");
    for e in results {
        for (kind, pts) in [("pr", &e.pr_curve), ("roc", &e.roc_curve)] {
            for (x, y) in pts.iter() {
                let _ = writeln!(curves, "{},{},{kind},{x},{y}", e.name, e.seed);
            }
        }
    }
    write(&paths[2], &curves)?;
    Ok(paths)
}

/// Heat overlays `<stem>.png` in `dir`; IGNORE pixels are left as in the input.
pub fn write_overlays(
    dir: &Path,
    items: &[(&str, &RgbImage, &AnomalyScoreMap, &AnomalyLabelMap)],
) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(items.len());
    for (stem, image, scores, labels) in items {
        let ignore = labels.raw().mapv(|l| l == AnomalyLabel::Ignore as u8);
        let path = dir.join(format!("{stem}.png"));
        save_image(&path, &overlay(image, scores, Some(&ignore))?)?;
        out.push(path);
    }
    Ok(out)
}
