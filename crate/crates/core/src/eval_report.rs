//! Evaluation, cross-validation, ablations and exports.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::backbone::Variant;
use crate::datamodel::{ClassIndex, FoldPlan, PairedSample};
use crate::error::{Error, Result};
use crate::model::{Network, PairBatch};
use crate::ndf_head::{log_softmax_loss, logits_batch};
use crate::spl_scheduler::PaceState;
use crate::tensor::Real;
use crate::trainer::{train_spnd, TrainConfig, TrainHistory};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_recall: Vec<f64>,
    pub n_samples: usize,
}

impl EvalResult {
    pub fn from_predictions(k: usize, truth: &[ClassIndex], predicted: &[ClassIndex]) -> Self {
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let n_samples: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        let per_class_recall = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[i] as f64 / total as f64
                }
            })
            .collect();
        Self {
            accuracy: if n_samples == 0 { 0.0 } else { trace as f64 / n_samples as f64 },
            confusion,
            per_class_recall,
            n_samples,
        }
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let v = serde_json::json!({
            "accuracy": self.accuracy,
            "per_class_recall": self.per_class_recall,
            "n_samples": self.n_samples,
        });
        fs::write(path, serde_json::to_string_pretty(&v)?).map_err(|e| Error::io(path, e))
    }

    pub fn write_confusion(&self, path: &Path) -> Result<()> {
        write_confusion_csv(&self.confusion, path)
    }
}

fn write_confusion_csv(confusion: &[Vec<usize>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\pred".to_string()];
    header.extend((0..confusion.len()).map(|j| j.to_string()));
    w.write_record(&header)?;
    for (i, row) in confusion.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> ClassIndex {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_variant<T: Real>(model: &Network<T>, pairs: &[PairedSample]) -> Result<()> {
    if model.variant() == Variant::Paired {
        if let Some(p) = pairs.iter().find(|p| p.reference.is_none()) {
            return Err(Error::VariantMismatch {
                model: "paired".into(),
                data: format!("pair `{}` without reference", p.id()),
            });
        }
    }
    Ok(())
}

/// Per-pair probabilities, NDFs and losses in inference mode.
pub struct Outputs {
    pub probabilities: Vec<Vec<f64>>,
    pub ndf: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

pub fn infer<T: Real>(model: &Network<T>, pairs: &[PairedSample]) -> Result<Outputs> {
    check_variant(model, pairs)?;
    let d = model.config.backbone.feature_dim;
    let mut out = Outputs {
        probabilities: Vec::with_capacity(pairs.len()),
        ndf: Vec::with_capacity(pairs.len()),
        losses: Vec::with_capacity(pairs.len()),
    };
    let refs: Vec<&PairedSample> = pairs.iter().collect();
    for chunk in refs.chunks(EVAL_BATCH) {
        let batch = PairBatch::from_pairs(chunk, &model.config.backbone)?;
        let f = model.forward(&batch, false)?;
        let logits = logits_batch(&f.ndf, chunk.len(), &model.head);
        for (i, p) in chunk.iter().enumerate() {
            let row = &logits[i * model.head.k..(i + 1) * model.head.k];
            out.probabilities.push(
                crate::ndf_head::softmax(row).iter().map(|v| v.as_f64()).collect(),
            );
            out.losses.push(log_softmax_loss(row, p.label).as_f64());
            out.ndf.push(f.ndf[i * d..(i + 1) * d].iter().map(|v| v.as_f64()).collect());
        }
    }
    Ok(out)
}

/// Inference-mode accuracy and confusion; no model state changes.
pub fn evaluate<T: Real>(model: &Network<T>, pairs: &[PairedSample]) -> Result<EvalResult> {
    let out = infer(model, pairs)?;
    let predicted: Vec<ClassIndex> = out.probabilities.iter().map(|p| argmax(p)).collect();
    let truth: Vec<ClassIndex> = pairs.iter().map(|p| p.label).collect();
    if let Some(&bad) = truth.iter().find(|&&t| t >= model.head.k) {
        return Err(Error::Shape(format!("label {bad} outside the model's {} classes", model.head.k)));
    }
    Ok(EvalResult::from_predictions(model.head.k, &truth, &predicted))
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub seed: u64,
    pub n_train: usize,
    pub result: EvalResult,
    #[serde(skip)]
    pub history: TrainHistory,
}

#[derive(Clone, Debug, Serialize)]
pub struct CrossValReport {
    pub folds: Vec<FoldReport>,
    pub fold_accuracies: Vec<f64>,
    /// Unweighted mean over folds.
    pub mean_accuracy: f64,
    pub fold_weighting: &'static str,
    pub confusion: Vec<Vec<usize>>,
    /// Test samples whose subject also appears in the fold's training split.
    pub subject_overlap: usize,
}

impl CrossValReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summed = EvalResult::from_confusion(self.confusion.clone());
        let v = serde_json::json!({
            "accuracy": self.mean_accuracy,
            "fold_accuracies": self.fold_accuracies,
            "fold_weighting": self.fold_weighting,
            "per_class_recall": summed.per_class_recall,
            "pooled_accuracy": summed.accuracy,
            "subject_overlap": self.subject_overlap,
        });
        let path = dir.join("metrics.json");
        fs::write(&path, serde_json::to_string_pretty(&v)?).map_err(|e| Error::io(&path, e))?;
        write_confusion_csv(&self.confusion, &dir.join("confusion.csv"))
    }
}

/// One model per fold, seeded `base + fold`, trained on the other folds.
pub fn crossval(
    pairs: &[PairedSample],
    plan: &FoldPlan,
    n_classes: usize,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CrossValReport> {
    let mut folds = Vec::with_capacity(plan.k);
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut subject_overlap = 0;
    for fold in 0..plan.k {
        let (train, test) = plan.split(pairs, fold)?;
        let train_subjects: HashSet<&str> =
            train.iter().map(|p| p.subject_id.as_str()).collect();
        subject_overlap += test
            .iter()
            .filter(|p| train_subjects.contains(p.subject_id.as_str()))
            .count();
        let cfg = TrainConfig {
            seed: config.seed + fold as u64,
            ..config.clone()
        };
        let fold_dir = out_dir.map(|d| d.join(format!("fold{fold}")));
        let (model, history) = train_spnd(&train, n_classes, &cfg, fold_dir.as_deref())?;
        let result = evaluate(&model, &test)?;
        info!("fold {fold}: accuracy {:.4} on {} pairs", result.accuracy, result.n_samples);
        if let Some(dir) = &fold_dir {
            result.write_metrics(&dir.join("metrics.json"))?;
            result.write_confusion(&dir.join("confusion.csv"))?;
        }
        for (acc_row, row) in confusion.iter_mut().zip(&result.confusion) {
            for (a, b) in acc_row.iter_mut().zip(row) {
                *a += b;
            }
        }
        folds.push(FoldReport {
            fold,
            seed: cfg.seed,
            n_train: train.len(),
            result,
            history,
        });
    }
    let fold_accuracies: Vec<f64> = folds.iter().map(|f| f.result.accuracy).collect();
    let report = CrossValReport {
        mean_accuracy: fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64,
        fold_accuracies,
        fold_weighting: "equal",
        confusion,
        subject_overlap,
        folds,
    };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub method: &'static str,
    pub ndf: bool,
    pub spl: bool,
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
}

/// The four (NDF, SPL) combinations. Without NDF the baseline variant is
/// used; with NDF the configured variant, or paired if that is the baseline.
pub fn ablation_configs(config: &TrainConfig) -> Vec<(&'static str, bool, bool, TrainConfig)> {
    let ndf_variant = match config.variant {
        Variant::Baseline => Variant::Paired,
        v => v,
    };
    [
        ("baseline", false, false),
        ("spl", false, true),
        ("ndf", true, false),
        ("ndf+spl", true, true),
    ]
    .into_iter()
    .map(|(name, ndf, spl)| {
        let cfg = TrainConfig {
            variant: if ndf { ndf_variant } else { Variant::Baseline },
            spl_enabled: spl,
            ..config.clone()
        };
        (name, ndf, spl, cfg)
    })
    .collect()
}

pub fn ablation_suite(
    pairs: &[PairedSample],
    plan: &FoldPlan,
    n_classes: usize,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for (method, ndf, spl, cfg) in ablation_configs(config) {
        let dir = out_dir.map(|d| d.join(method.replace('+', "_")));
        let report = crossval(pairs, plan, n_classes, &cfg, dir.as_deref())?;
        rows.push(AblationRow {
            method,
            ndf,
            spl,
            accuracy: report.mean_accuracy,
            fold_accuracies: report.fold_accuracies,
        });
    }
    if let Some(dir) = out_dir {
        write_ablation_csv(&rows, &dir.join("ablation.csv"))?;
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "ndf", "spl", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            u8::from(r.ndf).to_string(),
            u8::from(r.spl).to_string(),
            format!("{:.6}", r.accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub sample_id: String,
    pub class: ClassIndex,
    pub loss: f64,
    pub selected_last_pace: bool,
    pub ndf: Vec<f64>,
}

/// Ids a pace selected.
pub fn selected_ids(state: &PaceState) -> HashSet<String> {
    state
        .samples
        .iter()
        .zip(&state.selection)
        .filter(|(_, &v)| v)
        .map(|(x, _)| x.sample_id.clone())
        .collect()
}

/// Ids marked selected in a `selection_pace{p}.csv` log.
pub fn read_selection_log(path: &Path) -> Result<HashSet<String>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = HashSet::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.get(4) == Some("1") {
            out.insert(rec.get(1).unwrap_or_default().to_string());
        }
    }
    Ok(out)
}

/// Writes one row per pair; `selected` holds the ids chosen at the last pace.
pub fn export_embeddings<T: Real>(
    model: &Network<T>,
    pairs: &[PairedSample],
    selected: &HashSet<String>,
    out_path: &Path,
) -> Result<usize> {
    let out = infer(model, pairs)?;
    let mut w = csv::Writer::from_path(out_path)?;
    let d = model.config.backbone.feature_dim;
    let mut header = vec!["sample_id".to_string(), "class".into(), "loss".into(), "selected_last_pace".into()];
    header.extend((0..d).map(|i| format!("ndf_{i}")));
    w.write_record(&header)?;
    for ((p, ndf), loss) in pairs.iter().zip(&out.ndf).zip(&out.losses) {
        let mut rec = vec![
            p.id().to_string(),
            p.label.to_string(),
            format!("{loss:e}"),
            u8::from(selected.contains(p.id())).to_string(),
        ];
        rec.extend(ndf.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(out_path, e))?;
    Ok(pairs.len())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Manifest {
            row: i + 1,
            message: format!("bad {what}"),
        };
        let num = |j: usize, what: &str| -> Result<f64> {
            rec.get(j).and_then(|s| s.parse().ok()).ok_or_else(|| bad(what))
        };
        rows.push(EmbeddingRow {
            sample_id: rec.get(0).ok_or_else(|| bad("sample_id"))?.to_string(),
            class: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("class"))?,
            loss: num(2, "loss")?,
            selected_last_pace: rec.get(3) == Some("1"),
            ndf: (4..rec.len()).map(|j| num(j, "ndf")).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}
