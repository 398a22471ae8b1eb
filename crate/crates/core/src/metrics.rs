//! One-vs-rest class metrics, accuracy and macro/weighted aggregates.
//!
//! Undefined ratios (zero denominators) evaluate to 0 and carry a flag so a
//! report never contains NaN.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions but {labels} labels")]
    Length { predictions: usize, labels: usize },
    #[error("{which} #{index} is {value}, outside 0..{classes}")]
    OutOfRange {
        which: &'static str,
        index: usize,
        value: usize,
        classes: usize,
    },
    #[error("a confusion matrix needs at least one class")]
    NoClasses,
    #[error("{names} class names for {classes} classes")]
    Names { names: usize, classes: usize },
    #[error("confusion matrix is not square")]
    NotSquare,
    #[error("no samples to evaluate")]
    Empty,
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    class_names: Vec<String>,
}

impl ConfusionMatrix {
    /// Classes are named `"0"`, `"1"`, ... until renamed.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let k = counts.len();
        if k == 0 {
            return Err(MetricsError::NoClasses);
        }
        if counts.iter().any(|row| row.len() != k) {
            return Err(MetricsError::NotSquare);
        }
        Ok(Self {
            counts,
            class_names: (0..k).map(|i| i.to_string()).collect(),
        })
    }

    pub fn with_class_names(mut self, names: &[impl AsRef<str>]) -> Result<Self, MetricsError> {
        if names.len() != self.n_classes() {
            return Err(MetricsError::Names {
                names: names.len(),
                classes: self.n_classes(),
            });
        }
        self.class_names = names.iter().map(|s| s.as_ref().to_string()).collect();
        Ok(self)
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// `(tp, fp, fn, tn)` for class `k` against the rest.
    pub fn one_vs_rest(&self, k: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[k][k];
        let row: u64 = self.counts[k].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[k]).sum();
        let (fp, fn_) = (col - tp, row - tp);
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }
}

/// Tallies `(prediction, label)` pairs.
pub fn confusion(predictions: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::Length {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::from_counts(vec![vec![0; k]; k])?;
    for (index, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        for (which, value) in [("prediction", p), ("label", t)] {
            if value >= k {
                return Err(MetricsError::OutOfRange {
                    which,
                    index,
                    value,
                    classes: k,
                });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Marks a metric whose denominator was zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    PrecisionUndefined,
    RecallUndefined,
    F1Undefined,
    SpecificityUndefined,
    LiftUndefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub lift: f64,
    pub support: u64,
    pub flags: Vec<MetricFlag>,
}

fn ratio(num: u64, den: u64, flag: MetricFlag, flags: &mut Vec<MetricFlag>) -> f64 {
    if den == 0 {
        flags.push(flag);
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let s = precision + recall;
    (s > 0.0).then(|| 2.0 * precision * recall / s)
}

pub fn class_metrics(cm: &ConfusionMatrix, k: usize) -> ClassMetrics {
    let (tp, fp, fn_, tn) = cm.one_vs_rest(k);
    let mut flags = Vec::new();
    let precision = ratio(tp, tp + fp, MetricFlag::PrecisionUndefined, &mut flags);
    let recall = ratio(tp, tp + fn_, MetricFlag::RecallUndefined, &mut flags);
    let specificity = ratio(tn, tn + fp, MetricFlag::SpecificityUndefined, &mut flags);
    let fpr = ratio(fp, fp + tn, MetricFlag::SpecificityUndefined, &mut Vec::new());
    let fnr = ratio(fn_, fn_ + tp, MetricFlag::RecallUndefined, &mut Vec::new());
    let f1 = f1_score(precision, recall).unwrap_or_else(|| {
        flags.push(MetricFlag::F1Undefined);
        0.0
    });
    let total = tp + fp + fn_ + tn;
    let lift = if tp + fn_ == 0 || total == 0 {
        flags.push(MetricFlag::LiftUndefined);
        0.0
    } else {
        precision / ((tp + fn_) as f64 / total as f64)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        specificity,
        fpr,
        fnr,
        lift,
        support: tp + fn_,
        flags,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub classes: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub accuracy: f64,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub weighted: Averages,
    pub metadata: BTreeMap<String, String>,
}

/// Per-class metrics plus accuracy and macro/weighted averages.
pub fn aggregate(cm: &ConfusionMatrix) -> Result<EvaluationReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let per: Vec<ClassMetrics> = (0..cm.n_classes()).map(|k| class_metrics(cm, k)).collect();
    let k = per.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per.iter().map(f).sum::<f64>() / k;
    let weighted =
        |f: fn(&ClassMetrics) -> f64| per.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64;
    Ok(EvaluationReport {
        classes: cm.class_names().to_vec(),
        confusion: cm.counts().to_vec(),
        accuracy: cm.trace() as f64 / total as f64,
        macro_avg: Averages {
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
        },
        weighted: Averages {
            precision: weighted(|m| m.precision),
            recall: weighted(|m| m.recall),
            f1: weighted(|m| m.f1),
        },
        per_class: cm.class_names().iter().cloned().zip(per).collect(),
        metadata: BTreeMap::new(),
    })
}

/// Confusion matrix and report from raw predictions in one call.
pub fn evaluate_predictions(
    predictions: &[usize],
    labels: &[usize],
    class_names: &[impl AsRef<str>],
) -> Result<EvaluationReport, MetricsError> {
    let cm = confusion(predictions, labels, class_names.len())?.with_class_names(class_names)?;
    aggregate(&cm)
}

impl EvaluationReport {
    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.per_class.get(name)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.classes.iter().map(String::len).max().unwrap_or(0).max(12);
        writeln!(
            f,
            "{:<width$} {:>9} {:>9} {:>9} {:>11} {:>6} {:>6} {:>6} {:>8}",
            "Class", "Precision", "Recall", "F1", "Specificity", "FPR", "FNR", "Lift", "Support"
        )?;
        for name in &self.classes {
            let m = &self.per_class[name];
            let mark = if m.flags.is_empty() { "" } else { " *" };
            writeln!(
                f,
                "{name:<width$} {:>9.2} {:>9.2} {:>9.2} {:>11.2} {:>6.2} {:>6.2} {:>6.2} {:>8}{mark}",
                m.precision, m.recall, m.f1, m.specificity, m.fpr, m.fnr, m.lift, m.support
            )?;
        }
        for (label, a) in [("Macro avg", &self.macro_avg), ("Weighted avg", &self.weighted)] {
            writeln!(
                f,
                "{label:<width$} {:>9.2} {:>9.2} {:>9.2}",
                a.precision, a.recall, a.f1
            )?;
        }
        write!(f, "{:<width$} {:>9.4}", "Accuracy", self.accuracy)?;
        if self.per_class.values().any(|m| !m.flags.is_empty()) {
            write!(f, "\n* some ratios had a zero denominator and are reported as 0")?;
        }
        Ok(())
    }
}
