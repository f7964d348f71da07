//! Accuracy aggregates and gradient-imbalance diagnostics.
//!
//! Task indices are 0-based throughout: `a(l, k)` is the accuracy on task
//! `l` after training through task `k`, defined for `l <= k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassSet, GradientSet, FC_BIAS, FC_WEIGHT};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    /// `rows[k][l] = a(l, k)`; row `k` has `k + 1` slots.
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            rows: (0..num_tasks).map(|k| vec![None; k + 1]).collect(),
        }
    }

    /// Builds a matrix from fully populated lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (k, row) in rows.into_iter().enumerate() {
            if row.len() != k + 1 {
                return Err(Error::shape("AccuracyMatrix::from_rows", format!("row {k} has {} entries", row.len())));
            }
            for (l, v) in row.into_iter().enumerate() {
                m.set(l, k, Some(v))?;
            }
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, l: usize, k: usize) -> Option<f64> {
        self.rows.get(k).and_then(|r| r.get(l)).copied().flatten()
    }

    pub fn set(&mut self, l: usize, k: usize, value: Option<f64>) -> Result<()> {
        if l > k || k >= self.rows.len() {
            return Err(Error::Contract(format!("a({l},{k}) outside the lower triangle")));
        }
        if let Some(v) = value {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("accuracy {v} outside [0, 1]")));
            }
        }
        self.rows[k][l] = value;
        Ok(())
    }

    pub fn row(&self, k: usize) -> &[Option<f64>] {
        &self.rows[k]
    }

    pub fn is_row_complete(&self, k: usize) -> bool {
        self.rows.get(k).is_some_and(|r| r.iter().all(Option::is_some))
    }
}

/// `A_k`: mean of `a(0..=k, k)`.
pub fn average_accuracy(matrix: &AccuracyMatrix, k: usize) -> Result<f64> {
    if k >= matrix.num_tasks() {
        return Err(Error::Contract(format!("task {k} >= {} tasks", matrix.num_tasks())));
    }
    let row = matrix.row(k);
    let missing: Vec<String> = row
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(l, _)| format!("a({l},{k})"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Undefined(missing.join(", ")));
    }
    Ok(row.iter().map(|v| v.unwrap()).sum::<f64>() / row.len() as f64)
}

/// Average performance: mean of `A_0..A_{T-1}`.
pub fn average_performance(matrix: &AccuracyMatrix) -> Result<f64> {
    let t = matrix.num_tasks();
    if t == 0 {
        return Err(Error::Undefined("empty accuracy matrix".into()));
    }
    let mut total = 0.0;
    for k in 0..t {
        total += average_accuracy(matrix, k)?;
    }
    Ok(total / t as f64)
}

/// `A_{T-1}`, the average accuracy after the last task.
pub fn final_average_accuracy(matrix: &AccuracyMatrix) -> Result<f64> {
    match matrix.num_tasks() {
        0 => Err(Error::Undefined("empty accuracy matrix".into())),
        t => average_accuracy(matrix, t - 1),
    }
}

/// Per-step, per-class L2 norms of the FC gradient (weight column plus bias
/// entry), one row per optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNormLog {
    pub steps: Vec<Vec<f64>>,
    pub task_classes: Vec<ClassSet>,
}

impl GradNormLog {
    pub fn new(task_classes: Vec<ClassSet>) -> Self {
        Self {
            steps: Vec::new(),
            task_classes,
        }
    }

    pub fn push(&mut self, norms: Vec<f64>) {
        self.steps.push(norms);
    }

    pub fn t_max(&self) -> usize {
        self.steps.len()
    }
}

/// Norm of `[fc.weight[:, j], fc.bias[j]]` for every class `j`.
pub fn class_gradient_norms(grads: &GradientSet) -> Vec<f64> {
    let (Some(w), Some(b)) = (grads.get(FC_WEIGHT), grads.get(FC_BIAS)) else {
        return Vec::new();
    };
    (0..w.cols())
        .map(|j| {
            let mut s = b.get(0, j) * b.get(0, j);
            for k in 0..w.rows() {
                let v = w.get(k, j);
                s += v * v;
            }
            s.sqrt()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGradNorm {
    /// Mean over the task's classes of the time-averaged class norm.
    pub g: f64,
    /// `g / max_l g_l`; `None` when every task's norm is zero.
    pub g_n: Option<f64>,
}

pub fn task_gradient_norms(log: &GradNormLog) -> Result<Vec<TaskGradNorm>> {
    if log.steps.is_empty() {
        return Err(Error::Contract("empty gradient-norm log".into()));
    }
    let c = log.steps[0].len();
    let t_max = log.t_max() as f64;
    let mut per_class = vec![0.0; c];
    for step in &log.steps {
        for (acc, &n) in per_class.iter_mut().zip(step) {
            *acc += n;
        }
    }
    per_class.iter_mut().for_each(|v| *v /= t_max);

    let mut g = Vec::with_capacity(log.task_classes.len());
    for (k, classes) in log.task_classes.iter().enumerate() {
        if classes.is_empty() {
            return Err(Error::Contract(format!("task {k} has no classes")));
        }
        g.push(classes.iter().map(|&j| per_class[j]).sum::<f64>() / classes.len() as f64);
    }
    let max = g.iter().copied().fold(0.0_f64, f64::max);
    Ok(g
        .into_iter()
        .map(|g| TaskGradNorm {
            g,
            g_n: (max > 0.0).then(|| g / max),
        })
        .collect())
}

/// Per-step mean norm over the classes of `task`, smoothed with a trailing
/// window of `window` steps (1 = raw).
pub fn task_gradient_curve(log: &GradNormLog, task: usize, window: usize) -> Result<Vec<f64>> {
    let classes = log
        .task_classes
        .get(task)
        .ok_or_else(|| Error::Contract(format!("task {task} out of range")))?;
    if classes.is_empty() {
        return Err(Error::Contract(format!("task {task} has no classes")));
    }
    let raw: Vec<f64> = log
        .steps
        .iter()
        .map(|s| classes.iter().map(|&j| s[j]).sum::<f64>() / classes.len() as f64)
        .collect();
    let window = window.max(1);
    if window == 1 {
        return Ok(raw);
    }
    Ok((0..raw.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            raw[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64
        })
        .collect())
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Mean and sample (n - 1) standard deviation; the deviation is 0 for a
/// single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// TSV table `task, G_k, G_k_n`.
pub fn task_norms_tsv(norms: &[TaskGradNorm]) -> String {
    let mut out = String::from("task\tG_k\tG_k_n\n");
    for (k, n) in norms.iter().enumerate() {
        let gn = n.g_n.map_or_else(|| "undefined".to_string(), |v| format!("{v:.9}"));
        out.push_str(&format!("{k}\t{:.9}\t{gn}\n", n.g));
    }
    out
}

/// TSV table `step, value`.
pub fn curve_tsv(curve: &[f64]) -> String {
    let mut out = String::from("step\tvalue\n");
    for (t, v) in curve.iter().enumerate() {
        out.push_str(&format!("{t}\t{v:.9}\n"));
    }
    out
}
