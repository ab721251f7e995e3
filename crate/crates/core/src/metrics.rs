//! Confusion matrix, per-class precision/recall/F1 with macro averages, and
//! one-vs-rest ROC curves with AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Result};

/// `counts[i][j]` = samples of true class `i` predicted as class `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(validation_err!("{} true labels but {} predictions", truth.len(), predicted.len()));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(validation_err!("label pair ({t}, {p}) outside [0, {classes})"));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples whose true class is this one.
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// `num / den`, with `0 / 0` defined as 0.
pub fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall and F1 from one-vs-rest counts.
pub fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    (precision, recall, f1)
}

pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(validation_err!("confusion matrix is empty"));
    }
    let c = cm.num_classes();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm.counts[k][k];
            let row: u64 = cm.counts[k].iter().sum();
            let col: u64 = cm.counts.iter().map(|r| r[k]).sum();
            let (precision, recall, f1) = prf(tp, col - tp, row - tp);
            ClassMetrics { precision, recall, f1, support: row }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    Ok(ClassificationReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: cm.trace() as f64 / total as f64,
        per_class,
    })
}

impl ClassificationReport {
    /// Plain-text table: one row per class, a macro-average row and an
    /// accuracy row.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let width = class_names
            .iter()
            .map(|n| n.chars().count())
            .chain(["Macro Avg".len(), "Accuracy".len(), "Class".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let rule = format!("{}\n", "-".repeat(width + 36));
        out.push_str(&rule);
        let _ =
            writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>10}", "Class", "Precision", "Recall", "F1-Score");
        out.push_str(&rule);
        for (k, m) in self.per_class.iter().enumerate() {
            let name = class_names.get(k).map(String::as_str).unwrap_or("?");
            let _ =
                writeln!(out, "{name:<width$}  {:>10.2}  {:>10.2}  {:>10.2}", m.precision, m.recall, m.f1);
        }
        out.push_str(&rule);
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.2}  {:>10.2}  {:>10.2}",
            "Macro Avg", self.macro_precision, self.macro_recall, self.macro_f1
        );
        out.push_str(&rule);
        let _ = writeln!(out, "{:<width$}  {:>34}", "Accuracy", format!("{:.2}%", self.accuracy * 100.0));
        out.push_str(&rule);
        out
    }
}

/// One point of a ROC curve. `threshold` is the score at or above which a
/// sample counts as positive; the origin point uses `+inf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn positives_and_negatives(truth: &[usize], scores: &[Vec<f64>], k: usize) -> Result<(usize, usize)> {
    if truth.len() != scores.len() {
        return Err(validation_err!("{} labels but {} score rows", truth.len(), scores.len()));
    }
    for row in scores {
        if k >= row.len() {
            return Err(validation_err!("class {k} outside a score row of length {}", row.len()));
        }
        if row[k].is_nan() {
            return Err(validation_err!("NaN score"));
        }
    }
    let pos = truth.iter().filter(|&&t| t == k).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(validation_err!("class {k} has {pos} positives and {neg} negatives; ROC needs both"));
    }
    Ok((pos, neg))
}

/// One-vs-rest ROC for class `k`: one point per distinct score, scanned from
/// high to low, with tied scores entering together.
pub fn roc_curve_ovr(truth: &[usize], scores: &[Vec<f64>], k: usize) -> Result<Vec<RocPoint>> {
    let (pos, neg) = positives_and_negatives(truth, scores, k)?;
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.sort_by(|&a, &b| scores[b][k].total_cmp(&scores[a][k]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]][k];
        while i < order.len() && scores[order[i]][k] == threshold {
            if truth[order[i]] == k {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(points)
}

/// Trapezoidal area under ROC points ordered by increasing FPR.
pub fn auc(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// AUC by pair counting: (concordant + ½·tied) / (positives · negatives).
pub fn auc_pairs(truth: &[usize], scores: &[Vec<f64>], k: usize) -> Result<f64> {
    let (pos, neg) = positives_and_negatives(truth, scores, k)?;
    let mut wins = 0.0;
    for (i, &ti) in truth.iter().enumerate() {
        if ti != k {
            continue;
        }
        for (j, &tj) in truth.iter().enumerate() {
            if tj == k {
                continue;
            }
            let (a, b) = (scores[i][k], scores[j][k]);
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos * neg) as f64)
}

pub const ROC_CSV_HEADER: &str = "threshold,fpr,tpr";

pub fn roc_to_csv(points: &[RocPoint]) -> String {
    let mut out = format!("{ROC_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

/// Everything `eval` reports for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: String,
    pub class_names: Vec<String>,
    pub samples: usize,
    pub confusion: ConfusionMatrix,
    pub report: ClassificationReport,
    /// One-vs-rest AUC per class; `None` when the split lacks positives or
    /// negatives for that class.
    pub auc: Vec<Option<f64>>,
}

impl EvaluationReport {
    pub fn from_scores(
        split: &str,
        class_names: &[String],
        truth: &[usize],
        scores: &[Vec<f64>],
    ) -> Result<Self> {
        let c = class_names.len();
        let predicted: Vec<usize> = scores.iter().map(|r| crate::tensor::argmax(r)).collect();
        let confusion = confusion_matrix(truth, &predicted, c)?;
        let report = classification_report(&confusion)?;
        let auc = (0..c).map(|k| roc_curve_ovr(truth, scores, k).ok().map(|pts| auc(&pts))).collect();
        Ok(Self {
            split: split.to_string(),
            class_names: class_names.to_vec(),
            samples: truth.len(),
            confusion,
            report,
            auc,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "split: {} ({} samples)\n\nconfusion matrix (rows = true, columns = predicted)\n",
            self.split, self.samples
        );
        let width = self.class_names.iter().map(|n| n.len()).max().unwrap_or(1).max(6);
        let _ = write!(out, "{:<width$}", "");
        for name in &self.class_names {
            let _ = write!(out, " {name:>width$}");
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion.counts) {
            let _ = write!(out, "{name:<width$}");
            for v in row {
                let _ = write!(out, " {v:>width$}");
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&self.report.to_table(&self.class_names));
        out.push_str("\none-vs-rest AUC\n");
        for (name, a) in self.class_names.iter().zip(&self.auc) {
            match a {
                Some(a) => {
                    let _ = writeln!(out, "{name:<width$} {a:.4}");
                }
                None => {
                    let _ = writeln!(out, "{name:<width$} n/a");
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[[u64; 3]]) -> ConfusionMatrix {
        ConfusionMatrix { counts: rows.iter().map(|r| r.to_vec()).collect() }
    }

    #[test]
    fn tallies() {
        let m = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m, cm(&[[1, 0, 0], [0, 1, 0], [0, 0, 1]]));
        let m = confusion_matrix(&[0, 0], &[1, 1], 3).unwrap();
        assert_eq!(m.counts[0][1], 2);
        assert_eq!(m.total(), 2);
        let m = confusion_matrix(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(m, cm(&[[1, 0, 0], [0, 1, 1], [0, 0, 1]]));
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
        assert!(confusion_matrix(&[0], &[], 3).is_err());
    }

    #[test]
    fn worked_report() {
        let r = classification_report(&cm(&[[8, 2, 0], [1, 9, 0], [0, 0, 10]])).unwrap();
        let c0 = r.per_class[0];
        assert!((c0.precision - 8.0 / 9.0).abs() < 1e-15);
        assert!((c0.recall - 0.8).abs() < 1e-15);
        let f1 = 2.0 * (8.0 / 9.0) * 0.8 / (8.0 / 9.0 + 0.8);
        assert!((c0.f1 - f1).abs() < 1e-15);
        assert!((c0.f1 - 0.842).abs() < 1e-3);
        assert_eq!(r.accuracy, 0.9);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let r = classification_report(&cm(&[[3, 0, 0], [0, 4, 0], [0, 0, 5]])).unwrap();
        assert!(r.per_class.iter().all(|m| m.precision == 1.0 && m.recall == 1.0 && m.f1 == 1.0));
        assert_eq!((r.macro_f1, r.accuracy), (1.0, 1.0));
        let r = classification_report(&cm(&[[3, 1, 0], [0, 4, 0], [0, 0, 0]])).unwrap();
        assert_eq!(r.per_class[2], ClassMetrics { precision: 0.0, recall: 0.0, f1: 0.0, support: 0 });
        assert!(classification_report(&cm(&[[0; 3]; 3])).is_err());
    }

    #[test]
    fn roc_hand_enumerated() {
        let truth = [1, 0, 1, 0];
        let scores: Vec<Vec<f64>> = [0.9, 0.8, 0.4, 0.2].iter().map(|&s| vec![1.0 - s, s]).collect();
        let pts = roc_curve_ovr(&truth, &scores, 1).unwrap();
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(xy, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]);
        assert_eq!(auc(&pts), 0.75);
        assert_eq!(auc_pairs(&truth, &scores, 1).unwrap(), 0.75);
    }

    #[test]
    fn roc_ties_and_separation() {
        let truth = [0, 1, 0, 1];
        let flat = vec![vec![0.5, 0.5]; 4];
        let pts = roc_curve_ovr(&truth, &flat, 1).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!((pts[1].fpr, pts[1].tpr), (1.0, 1.0));
        assert_eq!(auc(&pts), 0.5);
        let sep: Vec<Vec<f64>> = truth.iter().map(|&t| vec![0.0, t as f64]).collect();
        let pts = roc_curve_ovr(&truth, &sep, 1).unwrap();
        assert!(pts.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&pts), 1.0);
        assert!(roc_curve_ovr(&[1, 1], &sep[..2], 1).is_err());
    }

    #[test]
    fn table_layout() {
        let r = classification_report(&cm(&[[8, 2, 0], [1, 9, 0], [0, 0, 10]])).unwrap();
        let names: Vec<String> = ["alzheimer", "normal", "tumour"].iter().map(|s| s.to_string()).collect();
        let t = r.to_table(&names);
        assert!(t.contains("Precision"));
        assert!(t.contains("Macro Avg"));
        assert!(t.contains("90.00%"));
        assert!(t.lines().any(|l| l.starts_with("tumour") && l.contains("1.00")));
    }

    #[test]
    fn roc_csv() {
        let pts = [
            RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 },
            RocPoint { threshold: 0.5, fpr: 1.0, tpr: 1.0 },
        ];
        assert_eq!(roc_to_csv(&pts), "threshold,fpr,tpr\ninf,0,0\n0.5,1,1\n");
    }
}
