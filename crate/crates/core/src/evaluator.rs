//! Continual-learning metrics and their file exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AespError, Result};
use crate::iqkm::{vote, IqkmMode, SelectionRecord};

/// `a[t][i]`: accuracy on task `i`'s test set after session `t`, stored as
/// lower-triangular rows (row `t` has `t` entries). Indices are 1-based in the
/// accessors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub num_tasks: usize,
    pub test_sizes: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize, test_sizes: Vec<usize>) -> Result<Self> {
        if num_tasks == 0 || test_sizes.len() != num_tasks {
            return Err(AespError::Protocol(format!(
                "{} test sizes for {num_tasks} tasks",
                test_sizes.len()
            )));
        }
        if let Some(i) = test_sizes.iter().position(|&n| n == 0) {
            return Err(AespError::Data(format!("task {} has an empty test set", i + 1)));
        }
        Ok(AccuracyMatrix {
            num_tasks,
            test_sizes,
            rows: Vec::new(),
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, test_sizes: Vec<usize>) -> Result<Self> {
        let mut m = Self::new(test_sizes.len(), test_sizes)?;
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Records the row for the next session.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len() + 1;
        if t > self.num_tasks {
            return Err(AespError::Protocol(format!(
                "matrix already holds all {} sessions",
                self.num_tasks
            )));
        }
        if row.len() != t {
            return Err(AespError::Protocol(format!(
                "session {t} row needs {t} entries, got {}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AespError::Numerical(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn sessions(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `a[t][i]` for `1 ≤ i ≤ t ≤ sessions`.
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        if i == 0 || i > t {
            return None;
        }
        self.rows.get(t.checked_sub(1)?)?.get(i - 1).copied()
    }

    /// Sample-weighted accuracy over tasks `1..=t` after session `t`.
    pub fn session_accuracy(&self, t: usize) -> Option<f64> {
        let row = self.rows.get(t.checked_sub(1)?)?;
        let mut hit = 0.0;
        let mut total = 0usize;
        for (a, &n) in row.iter().zip(&self.test_sizes) {
            hit += a * n as f64;
            total += n;
        }
        Some(hit / total as f64)
    }

    fn require_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(AespError::Protocol(format!(
                "accuracy matrix has {} of {} sessions",
                self.rows.len(),
                self.num_tasks
            )))
        }
    }

    /// The matrix restricted to its first `t` sessions and tasks.
    pub fn truncated(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.rows.len() {
            return Err(AespError::Protocol(format!(
                "cannot truncate {} sessions to {t}",
                self.rows.len()
            )));
        }
        Self::from_rows(self.rows[..t].to_vec(), self.test_sizes[..t].to_vec())
    }
}

pub fn last_acc(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    Ok(m.session_accuracy(m.num_tasks).expect("complete"))
}

pub fn avg_acc(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let sum: f64 = (1..=m.num_tasks)
        .map(|t| m.session_accuracy(t).expect("complete"))
        .sum();
    Ok(sum / m.num_tasks as f64)
}

/// Mean over earlier tasks of the drop from their best accuracy before the
/// final session to their final accuracy.
pub fn forgetting(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let t_final = m.num_tasks;
    if t_final < 2 {
        return Err(AespError::Protocol("forgetting is undefined for a single task".into()));
    }
    let mut sum = 0.0;
    for i in 1..t_final {
        let best = (i..t_final)
            .map(|t| m.get(t, i).expect("complete"))
            .fold(f64::NEG_INFINITY, f64::max);
        sum += best - m.get(t_final, i).expect("complete");
    }
    Ok(sum / (t_final - 1) as f64)
}

/// Metrics computed on the first `t` sessions, as if the run ended there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: usize,
    pub last_acc: f64,
    pub avg_acc: f64,
    pub forgetting: Option<f64>,
}

pub fn metrics_so_far(m: &AccuracyMatrix) -> Vec<SessionMetrics> {
    (1..=m.sessions())
        .map(|t| {
            let sub = m.truncated(t).expect("t within recorded sessions");
            SessionMetrics {
                session: t,
                last_acc: last_acc(&sub).expect("complete"),
                avg_acc: avg_acc(&sub).expect("complete"),
                forgetting: forgetting(&sub).ok(),
            }
        })
        .collect()
}

/// `s[g][p]`: fraction of task-`g` queries routed to task `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    pub counts: Vec<Vec<usize>>,
    pub rows: Vec<Vec<f64>>,
}

impl SelectionMatrix {
    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    /// Share of queries routed to their own task.
    pub fn accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        let diag: usize = (0..self.counts.len()).map(|g| self.counts[g][g]).sum();
        diag as f64 / total as f64
    }
}

/// Task the record would route to under `mode`.
pub fn chosen_under(record: &SelectionRecord, mode: IqkmMode) -> usize {
    match mode {
        IqkmMode::Full => vote(record.p1, record.p2, record.p3),
        IqkmMode::MultiKeyOnly => record.p1,
        IqkmMode::EntropyOnly => record.p2,
        IqkmMode::PrototypeOnly => record.p3,
    }
}

/// Row-normalized confusion of chosen vs. true task over tasks `1..=num_tasks`,
/// using each record's `chosen` field.
pub fn selection_matrix(records: &[SelectionRecord], num_tasks: usize) -> Result<SelectionMatrix> {
    selection_matrix_by(records, num_tasks, |r| r.chosen)
}

/// As [`selection_matrix`], re-deciding each record under `mode`.
pub fn selection_matrix_for_mode(
    records: &[SelectionRecord],
    num_tasks: usize,
    mode: IqkmMode,
) -> Result<SelectionMatrix> {
    selection_matrix_by(records, num_tasks, |r| chosen_under(r, mode))
}

fn selection_matrix_by(
    records: &[SelectionRecord],
    num_tasks: usize,
    chosen: impl Fn(&SelectionRecord) -> usize,
) -> Result<SelectionMatrix> {
    let mut counts = vec![vec![0usize; num_tasks]; num_tasks];
    for r in records {
        let g = r.ground_truth_task.ok_or_else(|| {
            AespError::Protocol(format!("selection record {} has no ground-truth task", r.query_id))
        })?;
        let p = chosen(r);
        if g == 0 || g > num_tasks || p == 0 || p > num_tasks {
            return Err(AespError::Protocol(format!(
                "record {} routes task {g} to {p}, outside 1..={num_tasks}",
                r.query_id
            )));
        }
        counts[g - 1][p - 1] += 1;
    }
    let mut rows = Vec::with_capacity(num_tasks);
    for (g, c) in counts.iter().enumerate() {
        let n: usize = c.iter().sum();
        if n == 0 {
            return Err(AespError::Protocol(format!("no queries from task {}", g + 1)));
        }
        rows.push(c.iter().map(|&k| k as f64 / n as f64).collect());
    }
    Ok(SelectionMatrix { counts, rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(m: &AccuracyMatrix) -> String {
    let mut out = String::from("session,last_acc_so_far,avg_acc_so_far,ff_so_far\n");
    for s in metrics_so_far(m) {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.session,
            s.last_acc,
            s.avg_acc,
            fmt_opt(s.forgetting)
        );
    }
    out
}

/// Per-session accuracy curve: overall accuracy on seen tasks plus one column
/// per task (empty before the task is seen).
pub fn curve_csv(m: &AccuracyMatrix) -> String {
    let mut out = String::from("session,accuracy");
    for i in 1..=m.num_tasks {
        let _ = write!(out, ",task_{i}");
    }
    out.push('\n');
    for t in 1..=m.sessions() {
        let _ = write!(out, "{},{}", t, m.session_accuracy(t).expect("recorded"));
        for i in 1..=m.num_tasks {
            let _ = write!(out, ",{}", fmt_opt(m.get(t, i)));
        }
        out.push('\n');
    }
    out
}

pub fn selection_csv(s: &SelectionMatrix) -> String {
    let mut out = String::from("true_task");
    for p in 1..=s.num_tasks() {
        let _ = write!(out, ",{p}");
    }
    out.push('\n');
    for (g, row) in s.rows.iter().enumerate() {
        let _ = write!(out, "{}", g + 1);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Grayscale rendering, `cell` pixels per matrix entry, white = 1.
pub fn render_heatmap(s: &SelectionMatrix, cell: u32) -> image::GrayImage {
    let n = s.num_tasks() as u32;
    image::GrayImage::from_fn(n * cell, n * cell, |x, y| {
        let v = s.rows[(y / cell) as usize][(x / cell) as usize];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// What [`export`] writes.
#[derive(Debug, Clone)]
pub struct ExportSet<'a> {
    pub accuracy: &'a AccuracyMatrix,
    /// `(label, matrix)` pairs written as `selection_<label>.csv`.
    pub selection: Vec<(String, SelectionMatrix)>,
    pub render_png: bool,
}

/// Writes the metrics table, accuracy curve and selection heatmaps into `dir`.
/// Returns the written paths.
pub fn export(dir: &Path, set: &ExportSet) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| AespError::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| AespError::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    put("metrics.csv".into(), metrics_csv(set.accuracy))?;
    put("curve.csv".into(), curve_csv(set.accuracy))?;
    for (label, s) in &set.selection {
        put(format!("selection_{label}.csv"), selection_csv(s))?;
    }
    if set.render_png {
        for (label, s) in &set.selection {
            let path = dir.join(format!("selection_{label}.png"));
            render_heatmap(s, 16)
                .save(&path)
                .map_err(|e| AespError::Serialization(format!("{}: {e}", path.display())))?;
            written.push(path);
        }
    }
    Ok(written)
}
