//! Confusion matrices, macro metrics and the leave-one-expert-out ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertKind, ExpertMask};
use crate::head::HeadVariant;
use crate::textpipe::{Label, NUM_CLASSES};
use crate::training::{evaluate_ensemble, run_kfold, Corpus, TrainConfig};

/// Rows are gold labels, columns predictions, in `Label::ALL` order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("gold\\pred");
        for l in Label::ALL {
            s.push(',');
            s.push_str(l.as_str());
        }
        s.push('\n');
        for (g, row) in Label::ALL.iter().zip(&self.counts) {
            s.push_str(g.as_str());
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(golds: &[Label], preds: &[Label]) -> Result<ConfusionMatrix> {
    if golds.len() != preds.len() {
        return Err(Error::Dimension {
            what: "predictions vs gold labels".into(),
            expected: golds.len(),
            found: preds.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (g, p) in golds.iter().zip(preds) {
        cm.counts[g.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn class(&self, label: Label) -> &ClassMetrics {
        &self.per_class[label.index()]
    }

    pub fn overall(&self) -> Overall {
        Overall {
            accuracy: self.accuracy,
            precision: self.macro_precision,
            recall: self.macro_recall,
            f1: self.macro_f1,
        }
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<14} {:>9} {:>9} {:>9}\n",
            "class", "precision", "recall", "f1"
        );
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "{:<14} {:>9.4} {:>9.4} {:>9.4}",
                m.label.display_name(),
                m.precision,
                m.recall,
                m.f1
            );
        }
        let _ = writeln!(
            s,
            "{:<14} {:>9.4} {:>9.4} {:>9.4}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(
            s,
            "accuracy {:.4} ({} of {})",
            self.accuracy,
            self.confusion.trace(),
            self.confusion.total()
        );
        s
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro-averaged precision, recall and F1. Any 0/0 counts as 0.
pub fn macro_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let per_class: Vec<ClassMetrics> = Label::ALL
        .iter()
        .map(|&label| {
            let c = label.index();
            let tp = cm.counts[c][c];
            let predicted: u64 = (0..NUM_CLASSES).map(|g| cm.counts[g][c]).sum();
            let gold: u64 = cm.counts[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, gold);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let mean =
        |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    MetricsReport {
        accuracy: ratio(cm.trace(), cm.total()),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        confusion: *cm,
    }
}

/// Accuracy plus macro precision, recall and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Overall {
    fn to_array(self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Overall {
            accuracy: a[0],
            precision: a[1],
            recall: a[2],
            f1: a[3],
        }
    }
}

/// Mean and population standard deviation, column-wise.
pub fn mean_std(values: &[Overall]) -> (Overall, Overall) {
    let n = values.len().max(1) as f64;
    let mut mean = [0.0; 4];
    for v in values {
        for (m, x) in mean.iter_mut().zip(v.to_array()) {
            *m += x / n;
        }
    }
    let mut var = [0.0; 4];
    for v in values {
        for ((s, x), m) in var.iter_mut().zip(v.to_array()).zip(mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    (
        Overall::from_array(mean),
        Overall::from_array(var.map(f64::sqrt)),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub removed: Option<ExpertKind>,
    pub gate_dim: usize,
    /// Each fold model evaluated on the test data.
    pub fold_metrics: Vec<Overall>,
    pub kfold_mean: Overall,
    pub kfold_std: Overall,
    pub ensemble: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub const FULL_MODEL_ROW: &str = "StanceMoE";

/// Variants in reporting order: each expert removed in turn, then the full model.
pub fn ablation_variants() -> Vec<(String, Option<ExpertKind>, ExpertMask)> {
    let mut v: Vec<_> = ExpertKind::ALL
        .iter()
        .map(|&k| {
            (
                format!("w/o {}", k.display_name()),
                Some(k),
                ExpertMask::without(k),
            )
        })
        .collect();
    v.push((FULL_MODEL_ROW.to_string(), None, ExpertMask::all()));
    v
}

/// Retrains the model from scratch once per variant with the same seed
/// schedule, then scores the fold models and the ensemble on `test`.
pub fn ablate(
    config: &TrainConfig,
    train: &Corpus,
    test: &Corpus,
    vocab_size: usize,
    jobs: usize,
) -> Result<AblationReport> {
    if config.head != HeadVariant::Moe {
        return Err(Error::config("ablation requires the moe head"));
    }
    if !config.experts.is_full() {
        return Err(Error::config("ablation starts from the full expert set"));
    }
    if test.is_empty() {
        return Err(Error::config("ablation needs a non-empty test set"));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let mut rows = Vec::new();
    for (name, removed, mask) in ablation_variants() {
        log::info!("ablation run: {name}");
        let cfg = TrainConfig {
            experts: mask,
            ..config.clone()
        };
        let ensemble = run_kfold(&cfg, train, vocab_size, jobs)?;
        let fold_metrics = ensemble
            .folds
            .iter()
            .map(|f| crate::training::evaluate_model(&f.model, test, &all).map(|r| r.overall()))
            .collect::<Result<Vec<_>>>()?;
        let (kfold_mean, kfold_std) = mean_std(&fold_metrics);
        rows.push(AblationRow {
            name,
            removed,
            gate_dim: ensemble.folds[0].model.head.gate_dim(),
            fold_metrics,
            kfold_mean,
            kfold_std,
            ensemble: evaluate_ensemble(&ensemble, test)?,
        });
    }
    Ok(AblationReport { rows })
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

impl AblationReport {
    /// Per-class precision/recall/F1 and accuracy of each ensemble, in percent.
    pub fn classwise_table(&self) -> String {
        let mut header = vec!["Model".to_string()];
        for l in Label::ALL {
            for m in ["Pre", "Rec", "F1"] {
                header.push(format!("{} {m}", l.display_name()));
            }
        }
        header.push("Acc".into());
        let body = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.name.clone()];
                for m in &r.ensemble.per_class {
                    cells.extend([pct(m.precision), pct(m.recall), pct(m.f1)]);
                }
                cells.push(pct(r.ensemble.accuracy));
                cells
            })
            .collect();
        align(header, body)
    }

    /// K-fold mean±std and ensemble accuracy/precision/recall/F1, in percent.
    pub fn overall_table(&self) -> String {
        let mut header = vec!["Model".to_string()];
        for m in ["Acc", "Pre", "Rec", "F1"] {
            header.push(format!("K-fold {m}"));
        }
        for m in ["Acc", "Pre", "Rec", "F1"] {
            header.push(format!("Ensemble {m}"));
        }
        let body = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.name.clone()];
                for (m, s) in r.kfold_mean.to_array().iter().zip(r.kfold_std.to_array()) {
                    cells.push(format!("{}±{}", pct(*m), pct(s)));
                }
                cells.extend(r.ensemble.overall().to_array().map(pct));
                cells
            })
            .collect();
        align(header, body)
    }
}

fn align(header: Vec<String>, body: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    for row in &body {
        out.push_str(&line(row));
    }
    out
}
