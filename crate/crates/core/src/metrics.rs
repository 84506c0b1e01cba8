//! Scores, the task-by-task score matrix and the PM/FM summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::canonical::format_float;
use crate::gnn::{forward, GnnError, ModelConfig, ParamVector};
use crate::graph::{ItemRef, Objective, Task};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {predictions} predictions vs {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no items to score")]
    Empty,
    #[error("score matrix has no tasks")]
    EmptyMatrix,
    #[error("forgetting needs at least two tasks")]
    TooFewTasks,
    #[error("entry ({row}, {col}) is outside the lower triangle of a {size}-task matrix")]
    OutOfTriangle { row: usize, col: usize, size: usize },
    #[error("entry ({row}, {col}) was never recorded")]
    Missing { row: usize, col: usize },
    #[error(transparent)]
    Model(#[from] GnnError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Micro-averaged F1 over `class_set`: `TP / (TP + (FP + FN) / 2)` with
/// counts pooled across classes. Zero when nothing is counted.
pub fn micro_f1(predictions: &[usize], labels: &[usize], class_set: &[usize]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for &c in class_set {
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
    }
    let denom = tp as f64 + 0.5 * (fp + fne) as f64;
    Ok(if denom == 0.0 { 0.0 } else { tp as f64 / denom })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    Accuracy,
    MicroF1,
}

impl ScoreKind {
    /// Node streams report micro-F1, graph streams accuracy.
    pub fn for_objective(o: Objective) -> Self {
        match o {
            Objective::NodeClassification => ScoreKind::MicroF1,
            Objective::GraphClassification => ScoreKind::Accuracy,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Accuracy => "acc",
            ScoreKind::MicroF1 => "micro_f1",
        }
    }
}

/// `R[i][j]`: score on task `j` after training task `i`, for `j <= i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
    pub score_kind: ScoreKind,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize, score_kind: ScoreKind) -> Self {
        Self {
            rows: (0..tasks).map(|i| vec![None; i + 1]).collect(),
            score_kind,
        }
    }

    /// Builds a matrix from full lower-triangular rows.
    pub fn from_rows(rows: &[Vec<f64>], score_kind: ScoreKind) -> Result<Self> {
        let mut m = Self::new(rows.len(), score_kind);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate().take(i + 1) {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        if col > row || row >= self.rows.len() {
            return Err(MetricsError::OutOfTriangle {
                row,
                col,
                size: self.rows.len(),
            });
        }
        self.rows[row][col] = Some(value);
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> Result<f64> {
        self.rows
            .get(row)
            .and_then(|r| r.get(col))
            .ok_or(MetricsError::OutOfTriangle {
                row,
                col,
                size: self.rows.len(),
            })?
            .ok_or(MetricsError::Missing { row, col })
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        &self.rows[i]
    }
}

/// Mean of the diagonal.
pub fn pm(m: &AccuracyMatrix) -> Result<f64> {
    if m.tasks() == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let mut s = 0.0;
    for k in 0..m.tasks() {
        s += m.get(k, k)?;
    }
    Ok(s / m.tasks() as f64)
}

/// Mean over `k >= 1` of the mean drop `R[k-1][j] - R[k][j]` over `j < k`.
/// Positive means forgetting; negative values are kept.
pub fn fm(m: &AccuracyMatrix) -> Result<f64> {
    if m.tasks() < 2 {
        return Err(MetricsError::TooFewTasks);
    }
    let mut total = 0.0;
    for k in 1..m.tasks() {
        let mut drop = 0.0;
        for j in 0..k {
            drop += m.get(k - 1, j)? - m.get(k, j)?;
        }
        total += drop / k as f64;
    }
    Ok(total / (m.tasks() - 1) as f64)
}

/// Predictions and labels of one evaluation of task `task` after training `after`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub after: usize,
    pub task: usize,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes: Vec<usize>,
}

impl EvalRecord {
    pub fn score(&self, kind: ScoreKind) -> Result<f64> {
        match kind {
            ScoreKind::Accuracy => accuracy(&self.predictions, &self.labels),
            ScoreKind::MicroF1 => micro_f1(&self.predictions, &self.labels, &self.classes),
        }
    }
}

/// Rebuilds the score matrix from an evaluation log.
pub fn matrix_from_log(log: &[EvalRecord], tasks: usize, kind: ScoreKind) -> Result<AccuracyMatrix> {
    let mut m = AccuracyMatrix::new(tasks, kind);
    for r in log {
        m.set(r.after, r.task, r.score(kind)?)?;
    }
    Ok(m)
}

/// Eval-mode predictions on `items` of `task`. Class-incremental: argmax is
/// taken over every output class, not only the task's own.
pub fn predict(
    params: &ParamVector,
    cfg: &ModelConfig,
    task: &Task,
    items: &[ItemRef],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut cache: Vec<Option<Tensor>> = vec![None; task.graphs.len()];
    let mut preds = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for &item in items {
        if cache[item.graph].is_none() {
            cache[item.graph] = Some(forward(params, cfg, &task.graphs[item.graph], task.objective, None)?);
        }
        let logits = cache[item.graph].as_ref().expect("filled above");
        let row = logits.row(item.vertex.unwrap_or(0));
        preds.push(argmax(row));
        labels.push(task.label_of(item));
    }
    Ok((preds, labels))
}

/// Evaluates `task`'s test split after training task `after`.
pub fn evaluate_task(params: &ParamVector, cfg: &ModelConfig, task: &Task, after: usize) -> Result<EvalRecord> {
    let (predictions, labels) = predict(params, cfg, task, &task.split.test)?;
    Ok(EvalRecord {
        after,
        task: task.task_id,
        predictions,
        labels,
        classes: task.classes.clone(),
    })
}

/// One run's summary for the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub matrix: AccuracyMatrix,
}

impl MetricsReport {
    pub fn pm(&self) -> Result<f64> {
        pm(&self.matrix)
    }

    /// FM, or `None` for single-task runs.
    pub fn fm(&self) -> Option<f64> {
        fm(&self.matrix).ok()
    }
}

fn opt_float(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// Writes reports as CSV, one line per row of each matrix:
/// `run_id,seed,method,score,pm,fm,after_task,r0..r{T-1}`.
pub fn write_metrics_csv<W: Write>(out: W, reports: &[MetricsReport]) -> std::result::Result<(), csv::Error> {
    let width = reports.iter().map(|r| r.matrix.tasks()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["run_id", "seed", "method", "score", "pm", "fm", "after_task"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..width).map(|j| format!("r{j}")));
    w.write_record(&header)?;
    for r in reports {
        let pm = r.pm().ok();
        let fm = r.fm();
        for i in 0..r.matrix.tasks() {
            let mut rec = vec![
                r.run_id.clone(),
                r.seed.to_string(),
                r.method.clone(),
                r.matrix.score_kind.as_str().to_string(),
                opt_float(pm),
                opt_float(fm),
                i.to_string(),
            ];
            for j in 0..width {
                rec.push(opt_float(r.matrix.rows.get(i).and_then(|row| row.get(j)).copied().flatten()));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Summary row parsed back from a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub pm: Option<f64>,
    pub fm: Option<f64>,
    pub after_task: usize,
    pub scores: Vec<Option<f64>>,
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> std::result::Result<Vec<MetricsRow>, String> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers().map_err(|e| e.to_string())?.clone();
    if headers.get(0) != Some("run_id") || headers.len() < 7 {
        return Err("not a metrics csv".into());
    }
    let parse_opt = |s: &str| -> std::result::Result<Option<f64>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e: std::num::ParseFloatError| e.to_string())
        }
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        out.push(MetricsRow {
            run_id: rec[0].to_string(),
            seed: rec[1].parse().map_err(|e: std::num::ParseIntError| e.to_string())?,
            method: rec[2].to_string(),
            pm: parse_opt(&rec[4])?,
            fm: parse_opt(&rec[5])?,
            after_task: rec[6].parse().map_err(|e: std::num::ParseIntError| e.to_string())?,
            scores: rec.iter().skip(7).map(parse_opt).collect::<std::result::Result<_, _>>()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap(), 2.0 / 3.0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(micro_f1(&[1, 0], &[0, 1], &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn length_errors() {
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(MetricsError::LengthMismatch { .. })));
        assert_eq!(accuracy(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn pm_fm_examples() {
        let m = AccuracyMatrix::from_rows(&[vec![0.8]], ScoreKind::Accuracy).unwrap();
        assert_eq!(pm(&m).unwrap(), 0.8);
        assert_eq!(fm(&m), Err(MetricsError::TooFewTasks));
        let m = AccuracyMatrix::from_rows(&[vec![1.0], vec![0.2, 0.5]], ScoreKind::Accuracy).unwrap();
        assert_eq!(pm(&m).unwrap(), 0.75);
        let m = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.6, 0.7]], ScoreKind::Accuracy).unwrap();
        assert!((fm(&m).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn upper_triangle_rejected() {
        let mut m = AccuracyMatrix::new(2, ScoreKind::Accuracy);
        assert!(matches!(m.set(0, 1, 0.5), Err(MetricsError::OutOfTriangle { .. })));
        assert_eq!(m.get(1, 0), Err(MetricsError::Missing { row: 1, col: 0 }));
    }

    #[test]
    fn csv_roundtrip() {
        let m = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.6, 0.7]], ScoreKind::MicroF1).unwrap();
        let rep = MetricsReport {
            run_id: "a".into(),
            seed: 3,
            method: "game".into(),
            matrix: m,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[rep]).unwrap();
        let rows = read_metrics_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].scores, vec![Some(0.6), Some(0.7)]);
        assert_eq!(rows[0].scores, vec![Some(0.9), None]);
        assert_eq!(rows[0].pm, Some(0.8));
    }
}
