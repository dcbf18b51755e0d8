//! Error metrics over flattened zone-slot entries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleSet};
use crate::error::{Error, Result};
use crate::model::GesmeNet;
use crate::scalar::Scalar;
use crate::train::predict_set;

fn check(o: &[f64], a: &[f64]) -> Result<()> {
    if o.len() != a.len() {
        return Err(Error::usage(format!("metric inputs differ in length: {} vs {}", o.len(), a.len())));
    }
    if o.is_empty() {
        return Err(Error::usage("metrics need at least one entry"));
    }
    Ok(())
}

pub fn mae(o: &[f64], a: &[f64]) -> Result<f64> {
    check(o, a)?;
    Ok(o.iter().zip(a).map(|(x, y)| (x - y).abs()).sum::<f64>() / o.len() as f64)
}

pub fn rmse(o: &[f64], a: &[f64]) -> Result<f64> {
    check(o, a)?;
    Ok((o.iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / o.len() as f64).sqrt())
}

/// Symmetric percentage error with `+1` in the denominator.
pub fn smape(o: &[f64], a: &[f64]) -> Result<f64> {
    check(o, a)?;
    Ok(o.iter()
        .zip(a)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1.0))
        .sum::<f64>()
        / o.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    pub smape: f64,
    pub n: usize,
}

impl MetricSet {
    pub fn compute(o: &[f64], a: &[f64]) -> Result<Self> {
        Ok(Self {
            mae: mae(o, a)?,
            rmse: rmse(o, a)?,
            smape: smape(o, a)?,
            n: o.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub metrics: MetricSet,
    /// Training wall time attributed to this task.
    pub time_s: f64,
}

/// Metrics of every task on raw-unit values.
///
/// `train_time_s` is split equally among the model's tasks.
pub fn evaluate<T: Scalar>(net: &GesmeNet<T>, data: &Dataset, set: &SampleSet, train_time_s: f64) -> Result<Vec<TaskMetrics>> {
    let batch = set.batch.cast::<T>();
    let preds = predict_set(net, &batch)?;
    let stats = data.target_stats()?;
    let names = data.task_names();
    let share = train_time_s / net.tasks().len() as f64;
    net.tasks()
        .iter()
        .zip(&preds)
        .map(|(task, p)| {
            let i = names
                .iter()
                .position(|n| n == task)
                .ok_or_else(|| Error::usage(format!("dataset has no task `{task}`")))?;
            let o: Vec<f64> = p.data().iter().map(|v| stats[i].invert(v.to_f64_lossy())).collect();
            let a = data.raw_targets(i, &set.slots)?;
            Ok(TaskMetrics {
                task: task.clone(),
                metrics: MetricSet::compute(&o, &a)?,
                time_s: share,
            })
        })
        .collect()
}

/// `task,mae,rmse,smape` with fixed precision, so reruns compare byte for byte.
pub fn metrics_csv(rows: &[TaskMetrics]) -> String {
    let mut s = String::from("task,mae,rmse,smape\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6},{:.6}", r.task, r.metrics.mae, r.metrics.rmse, r.metrics.smape).unwrap();
    }
    s
}

/// Plain-text table: one row per task with the time column.
pub fn metrics_table(rows: &[TaskMetrics]) -> String {
    let mut s = format!("{:<20} {:>10} {:>10} {:>8} {:>9}\n", "Task", "MAE", "RMSE", "sMAPE", "Time (s)");
    for r in rows {
        writeln!(
            s,
            "{:<20} {:>10.4} {:>10.4} {:>8.4} {:>9.1}",
            r.task, r.metrics.mae, r.metrics.rmse, r.metrics.smape, r.time_s
        )
        .unwrap();
    }
    s
}
