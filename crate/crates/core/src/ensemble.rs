//! Weighted-average ensembling of per-model class probabilities, the final
//! argmax classification, and the evaluation metric suite (accuracy,
//! per-class and aggregated sensitivity/specificity, confusion matrix).
//!
//! Weights are normalized to sum to 1 before use, so any positive scaling of
//! the weight vector yields the identical result, bit for bit when the
//! scaling is exact in floating point (e.g. integer weights times an
//! integer). "Classification" is argmax over the averaged probabilities with
//! ties broken toward the lowest class index; no trained combiner is fitted.
//! Sensitivity and specificity are reported both macro-averaged (unweighted
//! mean over classes with support) and micro-averaged (pooled counts), since
//! the two legitimately disagree on imbalanced data.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{ClassLabel, Manifest};
use crate::fsio::write_atomic;

pub const PREDICTION_HEADER: &str = "image_id,p_covid19,p_normal,p_pneumonia,pred_label";
pub const SWEEP_HEADER: &str = "Models,Weights,Accuracy";

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: duplicate image id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("{members} members but {weights} weights")]
    WeightCountMismatch { members: usize, weights: usize },
    #[error("weight {index} is {value}; weights must be positive and finite")]
    BadWeight { index: usize, value: f64 },
    #[error(
        "member {member} covers a different image set than member 0: {}",
        diff_summary(missing, extra)
    )]
    IdSetMismatch {
        member: usize,
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("no ground-truth label for image id {id:?}")]
    MissingTruth { id: String },
    #[error("{preds} predictions vs {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class index {0} out of range (0..3)")]
    BadClassIndex(usize),
    #[error("confusion matrix has no counts")]
    EmptyMatrix,
}

fn diff_summary(missing: &[String], extra: &[String]) -> String {
    let list = |ids: &[String]| -> String {
        let mut s = ids
            .iter()
            .take(10)
            .map(|i| format!("{i:?}"))
            .collect::<Vec<_>>()
            .join(", ");
        if ids.len() > 10 {
            s.push_str(&format!(", … ({} total)", ids.len()));
        }
        s
    };
    format!(
        "missing [{}], unexpected [{}]",
        list(missing),
        list(extra)
    )
}

/// One model's output for one image: a probability vector over the fixed
/// class order (COVID-19, Normal, Pneumonia) plus its argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: String,
    pub probs: [f64; 3],
    pub pred_label: usize,
}

impl PredictionRecord {
    pub fn new(image_id: String, probs: [f64; 3]) -> Self {
        let pred_label = classify(&probs);
        PredictionRecord {
            image_id,
            probs,
            pred_label,
        }
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn classify(probs: &[f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if probs[k] > probs[best] {
            best = k;
        }
    }
    best
}

/// Serialize records to the prediction CSV format. Probabilities use Rust's
/// shortest-roundtrip float formatting, so a written file parses back to the
/// exact same doubles.
pub fn prediction_csv(records: &[PredictionRecord]) -> String {
    let mut out = String::from(PREDICTION_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.image_id, r.probs[0], r.probs[1], r.probs[2], r.pred_label
        ));
    }
    out
}

/// Write records atomically as CSV.
pub fn save_prediction_csv(
    path: &Path,
    records: &[PredictionRecord],
) -> Result<(), EnsembleError> {
    write_atomic(path, prediction_csv(records).as_bytes()).map_err(|source| {
        EnsembleError::Io {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Parse a prediction CSV, enforcing the record invariants: probabilities in
/// [0,1] summing to 1 within 1e-6, `pred_label` equal to the argmax under
/// the tie rule, and unique image ids.
pub fn load_prediction_csv(path: &Path) -> Result<Vec<PredictionRecord>, EnsembleError> {
    let text = std::fs::read_to_string(path).map_err(|source| EnsembleError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |line: usize, reason: String| EnsembleError::MalformedRecord {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == PREDICTION_HEADER => {}
        _ => {
            return Err(malformed(
                1,
                format!("expected header {PREDICTION_HEADER:?}"),
            ))
        }
    }
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 5 {
            return Err(malformed(line, format!("expected 5 fields, got {}", fields.len())));
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(malformed(line, "empty image id".into()));
        }
        let mut probs = [0.0f64; 3];
        for (k, f) in fields[1..4].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| malformed(line, format!("bad probability {f:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(malformed(line, format!("probability {v} outside [0,1]")));
            }
            probs[k] = v;
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(malformed(line, format!("probabilities sum to {sum}")));
        }
        let pred: usize = fields[4]
            .parse()
            .map_err(|_| malformed(line, format!("bad class index {:?}", fields[4])))?;
        if pred >= 3 {
            return Err(malformed(line, format!("class index {pred} out of range")));
        }
        if pred != classify(&probs) {
            return Err(malformed(
                line,
                format!("pred_label {pred} is not the argmax of {probs:?}"),
            ));
        }
        if !seen.insert(id.clone()) {
            return Err(EnsembleError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id,
            });
        }
        records.push(PredictionRecord {
            image_id: id,
            probs,
            pred_label: pred,
        });
    }
    Ok(records)
}

/// Combine members by normalized weighted average. Every member must cover
/// the same image-id set; ordering follows member 0. Weights are divided by
/// their sum first, so `(2,1)` and `(4,2)` produce identical bytes.
pub fn weighted_average(
    members: &[Vec<PredictionRecord>],
    weights: &[f64],
) -> Result<Vec<PredictionRecord>, EnsembleError> {
    if members.is_empty() {
        return Err(EnsembleError::NoMembers);
    }
    if members.len() != weights.len() {
        return Err(EnsembleError::WeightCountMismatch {
            members: members.len(),
            weights: weights.len(),
        });
    }
    for (index, &w) in weights.iter().enumerate() {
        if !(w.is_finite() && w > 0.0) {
            return Err(EnsembleError::BadWeight { index, value: w });
        }
    }
    let total: f64 = weights.iter().sum();
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let base_ids: BTreeSet<&str> = members[0].iter().map(|r| r.image_id.as_str()).collect();
    let mut lookups: Vec<HashMap<&str, &PredictionRecord>> = Vec::new();
    for (m, member) in members.iter().enumerate().skip(1) {
        let ids: BTreeSet<&str> = member.iter().map(|r| r.image_id.as_str()).collect();
        if ids != base_ids {
            return Err(EnsembleError::IdSetMismatch {
                member: m,
                missing: base_ids.difference(&ids).map(|s| s.to_string()).collect(),
                extra: ids.difference(&base_ids).map(|s| s.to_string()).collect(),
            });
        }
        lookups.push(member.iter().map(|r| (r.image_id.as_str(), r)).collect());
    }

    let mut out = Vec::with_capacity(members[0].len());
    for first in &members[0] {
        let mut probs = [0.0f64; 3];
        for k in 0..3 {
            probs[k] = norm[0] * first.probs[k];
        }
        for (lookup, &w) in lookups.iter().zip(&norm[1..]) {
            let r = lookup[first.image_id.as_str()];
            for k in 0..3 {
                probs[k] += w * r.probs[k];
            }
        }
        out.push(PredictionRecord::new(first.image_id.clone(), probs));
    }
    Ok(out)
}

/// Entry `(i, j)` counts samples with ground-truth class `i` predicted as
/// class `j`.
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
) -> Result<[[u64; 3]; 3], EnsembleError> {
    if preds.len() != labels.len() {
        return Err(EnsembleError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut cm = [[0u64; 3]; 3];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= 3 {
            return Err(EnsembleError::BadClassIndex(p));
        }
        if l >= 3 {
            return Err(EnsembleError::BadClassIndex(l));
        }
        cm[l][p] += 1;
    }
    Ok(cm)
}

/// Per-class counts and rates. `sensitivity` is `None` when the class has no
/// ground-truth support; `specificity` is `None` when every sample belongs
/// to the class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub support: u64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub confusion: [[u64; 3]; 3],
    pub total: u64,
    pub accuracy: f64,
    pub per_class: [ClassMetrics; 3],
    /// Unweighted mean over classes with a defined value.
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    /// Pooled counts. Micro sensitivity coincides with accuracy for
    /// single-label classification.
    pub micro_sensitivity: f64,
    pub micro_specificity: f64,
    /// Classes excluded from the macro sensitivity mean for lack of support.
    pub undefined_classes: Vec<usize>,
}

/// Derive the metric suite from a confusion matrix.
pub fn metric_report(cm: &[[u64; 3]; 3]) -> Result<MetricReport, EnsembleError> {
    let total: u64 = cm.iter().flatten().sum();
    if total == 0 {
        return Err(EnsembleError::EmptyMatrix);
    }
    let trace: u64 = (0..3).map(|i| cm[i][i]).sum();
    let accuracy = trace as f64 / total as f64;

    let mut per_class = [ClassMetrics {
        support: 0,
        sensitivity: None,
        specificity: None,
    }; 3];
    let mut undefined_classes = Vec::new();
    let (mut pooled_tp, mut pooled_fn) = (0u64, 0u64);
    let (mut pooled_tn, mut pooled_fp) = (0u64, 0u64);
    let (mut sens_sum, mut sens_n) = (0.0f64, 0u32);
    let (mut spec_sum, mut spec_n) = (0.0f64, 0u32);
    for i in 0..3 {
        let tp = cm[i][i];
        let row: u64 = cm[i].iter().sum();
        let col: u64 = (0..3).map(|r| cm[r][i]).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        let tn = total - row - fp;
        pooled_tp += tp;
        pooled_fn += fn_;
        pooled_tn += tn;
        pooled_fp += fp;
        let sensitivity = if row > 0 {
            Some(tp as f64 / row as f64)
        } else {
            undefined_classes.push(i);
            None
        };
        let specificity = if tn + fp > 0 {
            Some(tn as f64 / (tn + fp) as f64)
        } else {
            None
        };
        if let Some(s) = sensitivity {
            sens_sum += s;
            sens_n += 1;
        }
        if let Some(s) = specificity {
            spec_sum += s;
            spec_n += 1;
        }
        per_class[i] = ClassMetrics {
            support: row,
            sensitivity,
            specificity,
        };
    }
    Ok(MetricReport {
        confusion: *cm,
        total,
        accuracy,
        per_class,
        macro_sensitivity: sens_sum / sens_n.max(1) as f64,
        macro_specificity: spec_sum / spec_n.max(1) as f64,
        micro_sensitivity: pooled_tp as f64 / (pooled_tp + pooled_fn) as f64,
        micro_specificity: pooled_tn as f64 / (pooled_tn + pooled_fp) as f64,
        undefined_classes,
    })
}

fn fmt_rate(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    }
}

impl MetricReport {
    /// Render as a plain-text report. All rates use four decimals; the
    /// rendering is a pure function of the report, so equal reports produce
    /// identical bytes.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("records      {}\n", self.total));
        out.push_str(&format!("accuracy     {:.4}\n", self.accuracy));
        out.push_str(&format!(
            "sensitivity  macro {:.4}  micro {:.4}\n",
            self.macro_sensitivity, self.micro_sensitivity
        ));
        out.push_str(&format!(
            "specificity  macro {:.4}  micro {:.4}\n",
            self.macro_specificity, self.micro_specificity
        ));
        out.push('\n');
        out.push_str("class      support  sensitivity  specificity\n");
        for (i, c) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "{:<9}  {:>7}  {:>11}  {:>11}\n",
                ClassLabel::from_index(i).expect("three classes").name(),
                c.support,
                fmt_rate(c.sensitivity),
                fmt_rate(c.specificity),
            ));
        }
        out.push('\n');
        out.push_str("confusion matrix (rows truth, columns predicted)\n");
        out.push_str("           COVID-19     Normal  Pneumonia\n");
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!(
                "{:<9}  {:>8}  {:>9}  {:>9}\n",
                ClassLabel::from_index(i).expect("three classes").name(),
                row[0],
                row[1],
                row[2],
            ));
        }
        if !self.undefined_classes.is_empty() {
            let names: Vec<&str> = self
                .undefined_classes
                .iter()
                .map(|&i| ClassLabel::from_index(i).expect("three classes").name())
                .collect();
            out.push_str(&format!(
                "\nnote: no ground-truth support for {}; excluded from macro sensitivity\n",
                names.join(", ")
            ));
        }
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Ground-truth lookup from a manifest: image id (the manifest-relative
/// path) to class.
pub fn truth_map(manifest: &Manifest) -> HashMap<String, ClassLabel> {
    manifest
        .entries()
        .iter()
        .map(|e| (e.path.clone(), e.label))
        .collect()
}

/// Score records against ground truth. Every record id must have a label.
pub fn evaluate_records(
    records: &[PredictionRecord],
    truth: &HashMap<String, ClassLabel>,
) -> Result<MetricReport, EnsembleError> {
    let mut preds = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        let label = truth
            .get(&r.image_id)
            .ok_or_else(|| EnsembleError::MissingTruth {
                id: r.image_id.clone(),
            })?;
        preds.push(r.pred_label);
        labels.push(label.index());
    }
    metric_report(&confusion_matrix(&preds, &labels)?)
}

/// One row of the weight-sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub models: String,
    pub weights: String,
    pub accuracy: f64,
}

fn weights_string(weights: &[f64]) -> String {
    weights
        .iter()
        .map(|w| format!("{w}"))
        .collect::<Vec<_>>()
        .join(":")
}

/// Evaluate each member solo, then each weight vector over all members.
/// Solo rows use "/" in the weights column; accuracy carries four decimals
/// in the rendered table.
pub fn ensemble_sweep(
    names: &[String],
    members: &[Vec<PredictionRecord>],
    truth: &HashMap<String, ClassLabel>,
    weight_grid: &[Vec<f64>],
) -> Result<Vec<SweepRow>, EnsembleError> {
    if members.is_empty() {
        return Err(EnsembleError::NoMembers);
    }
    if names.len() != members.len() {
        return Err(EnsembleError::WeightCountMismatch {
            members: members.len(),
            weights: names.len(),
        });
    }
    let mut rows = Vec::new();
    for (name, member) in names.iter().zip(members) {
        let report = evaluate_records(member, truth)?;
        rows.push(SweepRow {
            models: name.clone(),
            weights: "/".to_string(),
            accuracy: report.accuracy,
        });
    }
    let joined = names.join(", ");
    for weights in weight_grid {
        let combined = weighted_average(members, weights)?;
        let report = evaluate_records(&combined, truth)?;
        rows.push(SweepRow {
            models: joined.clone(),
            weights: weights_string(weights),
            accuracy: report.accuracy,
        });
    }
    Ok(rows)
}

/// Render sweep rows as CSV. Model lists containing commas are quoted.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for row in rows {
        let models = if row.models.contains(',') {
            format!("\"{}\"", row.models)
        } else {
            row.models.clone()
        };
        out.push_str(&format!("{},{},{:.4}\n", models, row.weights, row.accuracy));
    }
    out
}
