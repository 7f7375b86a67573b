//! Confusion matrices, per-class precision/recall/F1, macro and weighted
//! F1, and report rendering (CSV plus a text heatmap).
//!
//! Convention: rows are gold labels, columns are predictions. Undefined 0/0
//! precision or recall is reported as 0 and flagged.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold and predicted label lists differ in length: {gold} vs {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("cannot write report to {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    classes: usize,
}

#[derive(Clone, Debug)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when precision or recall hit the 0/0 case and were defined as 0.
    pub undefined: bool,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub method: String,
    pub split: String,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
            classes,
        }
    }

    pub fn from_labels(gold: &[usize], pred: &[usize], classes: usize) -> Result<Self, EvalError> {
        if gold.len() != pred.len() {
            return Err(EvalError::LengthMismatch {
                gold: gold.len(),
                pred: pred.len(),
            });
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&g, &p) in gold.iter().zip(pred) {
            for &label in [g, p].iter() {
                if label >= classes {
                    return Err(EvalError::LabelOutOfRange { label, classes });
                }
            }
            cm.counts[g][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Gold support of a class (row sum).
    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.counts[c][c]).sum()
    }
}

/// Per-class precision, recall, F1, and support from a confusion matrix.
/// F1 is computed as 2·tp / (2·tp + fp + fn), the harmonic mean of the two
/// ratios in a single division.
pub fn per_class_prf(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.classes())
        .map(|c| {
            let tp = cm.count(c, c);
            let col = cm.col_sum(c);
            let row = cm.support(c);
            let undefined = col == 0 || row == 0;
            let precision = if col == 0 {
                0.0
            } else {
                tp as f64 / col as f64
            };
            let recall = if row == 0 {
                0.0
            } else {
                tp as f64 / row as f64
            };
            let f1_den = 2 * tp + (col - tp) + (row - tp);
            let f1 = if f1_den == 0 {
                0.0
            } else {
                2.0 * tp as f64 / f1_den as f64
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: row,
                undefined,
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(per_class: &[ClassMetrics]) -> f64 {
    assert!(!per_class.is_empty(), "macro_f1 of zero classes");
    per_class.iter().map(|m| m.f1).sum::<f64>() / per_class.len() as f64
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(per_class: &[ClassMetrics]) -> f64 {
    let total: u64 = per_class.iter().map(|m| m.support).sum();
    assert!(total > 0, "weighted_f1 with zero total support");
    per_class
        .iter()
        .map(|m| m.f1 * m.support as f64)
        .sum::<f64>()
        / total as f64
}

/// Builds the full report for one method on one split.
pub fn evaluate(
    method: &str,
    split: &str,
    gold: &[usize],
    pred: &[usize],
    classes: usize,
) -> Result<EvalReport, EvalError> {
    let confusion = ConfusionMatrix::from_labels(gold, pred, classes)?;
    let per_class = per_class_prf(&confusion);
    let total = confusion.total();
    let accuracy = if total == 0 {
        0.0
    } else {
        confusion.trace() as f64 / total as f64
    };
    let macro_f1 = macro_f1(&per_class);
    let weighted_f1 = weighted_f1(&per_class);
    Ok(EvalReport {
        method: method.to_string(),
        split: split.to_string(),
        confusion,
        per_class,
        accuracy,
        macro_f1,
        weighted_f1,
    })
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

/// Renders confusion CSV, a Table-2 style metrics CSV, a per-class CSV, and
/// a row-normalized text heatmap into `out_dir`. File names embed the
/// method and split tags.
pub fn render_report(r: &EvalReport, out_dir: &Path) -> Result<Vec<String>, EvalError> {
    fs::create_dir_all(out_dir).map_err(|e| EvalError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let write = |name: &str, contents: &str| -> Result<String, EvalError> {
        let path = out_dir.join(name);
        fs::write(&path, contents).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(name.to_string())
    };
    let mut written = Vec::new();

    // confusion_<method>_<split>.csv: header with predicted class ids.
    let mut cm_csv = String::from("gold\\pred");
    for c in 0..r.confusion.classes() {
        write!(cm_csv, ",{c}").unwrap();
    }
    cm_csv.push('\n');
    for g in 0..r.confusion.classes() {
        write!(cm_csv, "{g}").unwrap();
        for p in 0..r.confusion.classes() {
            write!(cm_csv, ",{}", r.confusion.count(g, p)).unwrap();
        }
        cm_csv.push('\n');
    }
    written.push(write(
        &format!("confusion_{}_{}.csv", r.method, r.split),
        &cm_csv,
    )?);

    // metrics_<method>_<split>.csv in the summary schema; the accuracy cell
    // of the other split stays empty until `report` merges both.
    let (train_acc, test_acc) = match r.split.as_str() {
        "train" => (fmt4(r.accuracy), String::new()),
        _ => (String::new(), fmt4(r.accuracy)),
    };
    let metrics = format!(
        "method,train_acc,test_acc,macro_f1,weighted_f1\n{},{},{},{},{}\n",
        r.method,
        train_acc,
        test_acc,
        fmt4(r.macro_f1),
        fmt4(r.weighted_f1)
    );
    written.push(write(
        &format!("metrics_{}_{}.csv", r.method, r.split),
        &metrics,
    )?);

    let mut pc = String::from("class,precision,recall,f1,support,undefined\n");
    for (c, m) in r.per_class.iter().enumerate() {
        writeln!(
            pc,
            "{c},{},{},{},{},{}",
            fmt4(m.precision),
            fmt4(m.recall),
            fmt4(m.f1),
            m.support,
            m.undefined
        )
        .unwrap();
    }
    written.push(write(
        &format!("per_class_{}_{}.csv", r.method, r.split),
        &pc,
    )?);

    written.push(write(
        &format!("heatmap_{}_{}.txt", r.method, r.split),
        &heatmap(&r.confusion),
    )?);
    Ok(written)
}

/// Text heatmap of the row-normalized confusion matrix. Darker glyphs mean
/// higher per-row percentage.
pub fn heatmap(cm: &ConfusionMatrix) -> String {
    const RAMP: [char; 10] = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let k = cm.classes();
    let mut out = String::new();
    out.push_str("row-normalized confusion (rows = gold, cols = predicted)\n");
    out.push_str("shade: ' ' 0% … '@' 100% of the row\n    ");
    for c in 0..k {
        write!(out, "{c:>3}").unwrap();
    }
    out.push('\n');
    for g in 0..k {
        write!(out, "{g:>3} ").unwrap();
        let support = cm.support(g);
        for p in 0..k {
            let share = if support == 0 {
                0.0
            } else {
                cm.count(g, p) as f64 / support as f64
            };
            let idx = ((share * (RAMP.len() - 1) as f64).round() as usize).min(RAMP.len() - 1);
            write!(out, "  {}", RAMP[idx]).unwrap();
        }
        out.push('\n');
    }
    out
}
