//! Training runs, ablations and sweeps on a loaded dataset.

use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Settings;
use crate::data::{Dataset, SampleSet, ScenarioConfig, Split};
use crate::error::{Error, Result};
use crate::interpret::ImportanceReport;
use crate::metrics::{evaluate, metrics_csv, metrics_table, TaskMetrics};
use crate::model::{Block, GesmeNet, ModelConfig, Variant};
use crate::train::{fit_with, EpochRecord, FitReport, TrainConfig};

/// Everything needed to repeat a run, plus what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub variant: Variant,
    pub data: String,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tower_width: usize,
    pub param_count: usize,
    pub metrics: Vec<TaskMetrics>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub wall_time_s: f64,
    pub loss_curve: Vec<EpochRecord>,
    pub importance_files: Vec<PathBuf>,
}

pub struct RunOutcome {
    pub net: GesmeNet<f32>,
    pub fit: FitReport,
    pub metrics: Vec<TaskMetrics>,
    pub report: RunReport,
}

/// Keep only the targets of `tasks`, in that order.
pub fn select_targets(set: &SampleSet, data: &Dataset, tasks: &[String]) -> Result<SampleSet> {
    let names = data.task_names();
    let mut out = set.clone();
    out.batch.targets = tasks
        .iter()
        .map(|t| {
            names
                .iter()
                .position(|n| n == t)
                .map(|i| set.batch.targets[i].clone())
                .ok_or_else(|| Error::usage(format!("dataset has no task `{t}` (tasks: {names:?})")))
        })
        .collect::<Result<_>>()?;
    Ok(out)
}

/// Resolve the model for a variant; single-task runs need `task`.
pub fn variant_config(base: &ModelConfig, data: &Dataset, variant: Variant, task: Option<&str>) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    cfg.tasks = match (variant, task) {
        (_, Some(t)) => vec![t.to_string()],
        (Variant::Sm, None) if data.task_names().len() == 1 => data.task_names(),
        (Variant::Sm, None) => {
            return Err(Error::usage(format!(
                "the single-task variant needs --task (one of {:?})",
                data.task_names()
            )))
        }
        (_, None) => data.task_names(),
    };
    cfg.for_variant(variant)
}

/// Train one model and evaluate it on the test split.
///
/// With `out`, writes `model.*` (checkpoint), `loss.csv`, `metrics.csv`,
/// `table.txt`, `report.json` and, when weighting is present, `importance/`.
pub fn train_run(
    data: &Dataset,
    settings: &Settings,
    variant: Variant,
    task: Option<&str>,
    out: Option<&Path>,
    mut observer: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<RunOutcome> {
    let model = variant_config(&settings.model, data, variant, task)?;
    let train = select_targets(&data.samples(Split::Train)?, data, &model.tasks)?;
    let val = select_targets(&data.samples(Split::Val)?, data, &model.tasks)?;
    let test = select_targets(&data.samples(Split::Test)?, data, &model.tasks)?;
    let mut net = GesmeNet::<f32>::build(&model, &data.roster())?;
    let ckpt = out.map(|d| d.join("model"));
    if let Some(d) = out {
        fs::create_dir_all(d)?;
    }
    let fit = fit_with(&mut net, &train.batch, &val.batch, &settings.train, ckpt.as_deref(), &mut observer)?;
    let metrics = evaluate(&net, data, &test, fit.wall_time_s)?;
    let mut importance_files = Vec::new();
    if let Some(d) = out {
        net.save(ckpt.as_deref().unwrap())?;
        fit.write_loss_csv(&d.join("loss.csv"))?;
        fs::write(d.join("metrics.csv"), metrics_csv(&metrics))?;
        fs::write(d.join("table.txt"), metrics_table(&metrics))?;
        if net.weighting.is_some() {
            let rep = ImportanceReport::compute(&net, &test.batch, &data.manifest.zone_ids)?;
            importance_files = rep.write_csvs(&d.join("importance"))?;
        }
    }
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        variant,
        data: data.manifest.scenario.name.clone(),
        scenario: data.manifest.scenario.clone(),
        model: model.clone(),
        train: settings.train.clone(),
        tower_width: net.tower_width(),
        param_count: net.param_count(),
        metrics: metrics.clone(),
        best_epoch: fit.best_epoch,
        epochs_run: fit.epochs.len() - 1,
        stopped_early: fit.stopped_early,
        wall_time_s: fit.wall_time_s,
        loss_curve: fit.epochs.clone(),
        importance_files,
    };
    if let Some(d) = out {
        fs::write(d.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(RunOutcome {
        net,
        fit,
        metrics,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the full model.
    pub removed: Option<Block>,
    pub tower_width: usize,
    pub final_train_loss: f64,
    pub metrics: Vec<TaskMetrics>,
    pub time_s: f64,
}

/// The full model followed by one run per removed block.
pub fn ablate(data: &Dataset, settings: &Settings, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let removals = std::iter::once(None).chain(Block::ALL.iter().copied().map(Some));
    for removed in removals {
        let mut s = settings.clone();
        s.model.ablation.clear();
        if let Some(b) = removed {
            s.model.ablation.insert(b);
        }
        let label = removed.map_or("full", |b| b.as_str());
        let dir = out.map(|d| d.join(label));
        let run = train_run(data, &s, Variant::Gesme, None, dir.as_deref(), |_| ControlFlow::Continue(()))?;
        rows.push(AblationRow {
            removed,
            tower_width: run.report.tower_width,
            final_train_loss: run.fit.last().train_loss,
            time_s: run.fit.wall_time_s,
            metrics: run.metrics,
        });
    }
    if let Some(d) = out {
        fs::write(d.join("ablation.csv"), ablation_csv(&rows))?;
        fs::write(d.join("ablation.txt"), ablation_table(&rows))?;
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("removed,tower_width");
    for m in &rows[0].metrics {
        write!(s, ",{0}_mae,{0}_rmse,{0}_smape", m.task).unwrap();
    }
    s.push_str(",time_s\n");
    for r in rows {
        write!(s, "{},{}", r.removed.map_or("none", |b| b.as_str()), r.tower_width).unwrap();
        for m in &r.metrics {
            write!(s, ",{:.6},{:.6},{:.6}", m.metrics.mae, m.metrics.rmse, m.metrics.smape).unwrap();
        }
        writeln!(s, ",{:.3}", r.time_s).unwrap();
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<18}", "Removed");
    for m in &rows[0].metrics {
        write!(s, " | {:^26}", m.task).unwrap();
    }
    s.push_str(" | Time (s)\n");
    write!(s, "{:<18}", "").unwrap();
    for _ in &rows[0].metrics {
        write!(s, " | {:>8} {:>8} {:>8}", "MAE", "RMSE", "sMAPE").unwrap();
    }
    s.push_str(" |\n");
    for r in rows {
        write!(s, "{:<18}", r.removed.map_or("None", |b| b.label())).unwrap();
        for m in &r.metrics {
            write!(s, " | {:>8.3} {:>8.3} {:>8.4}", m.metrics.mae, m.metrics.rmse, m.metrics.smape).unwrap();
        }
        writeln!(s, " | {:>8.1}", r.time_s).unwrap();
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Layers,
    Filters,
    FilterLen,
    Hidden,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Layers => "layers",
            SweepParam::Filters => "filters",
            SweepParam::FilterLen => "filter_len",
            SweepParam::Hidden => "hidden",
        }
    }

    pub fn default_grid(self) -> Vec<usize> {
        match self {
            SweepParam::Layers => vec![1, 2, 3, 4],
            SweepParam::Filters => vec![5, 10, 25, 50],
            SweepParam::FilterLen => vec![1, 3, 5, 7],
            SweepParam::Hidden => vec![2, 4, 8, 16],
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig, v: usize) {
        match self {
            SweepParam::Layers => {
                cfg.layers = v;
                let base = cfg.conv_filters.first().copied().unwrap_or(25);
                cfg.set_filter_base(base);
            }
            SweepParam::Filters => cfg.set_filter_base(v),
            SweepParam::FilterLen => {
                cfg.conv_filter_len = v;
                cfg.convrnn_filter_len = v;
            }
            SweepParam::Hidden => cfg.gru_hidden = v,
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(SweepParam::Layers),
            "filters" | "filter_base" => Ok(SweepParam::Filters),
            "filter_len" | "filter_length" => Ok(SweepParam::FilterLen),
            "hidden" | "gru_hidden" => Ok(SweepParam::Hidden),
            other => Err(Error::config(format!(
                "unknown sweep parameter `{other}` (layers, filters, filter_len, hidden)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub point: usize,
    pub param: SweepParam,
    pub value: usize,
    /// Lowest mean training objective over the trained epochs.
    pub best_train_loss: f64,
    pub best_val_loss: f64,
    pub epochs: usize,
}

/// Train each grid point with early stopping.
pub fn sweep(data: &Dataset, settings: &Settings, param: SweepParam, grid: &[usize], out: Option<&Path>) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut points = Vec::new();
    for (i, &v) in grid.iter().enumerate() {
        let mut s = settings.clone();
        param.apply(&mut s.model, v);
        let run = train_run(data, &s, Variant::Gesme, None, None, |_| ControlFlow::Continue(()))?;
        let best_train = run.fit.epochs[1..]
            .iter()
            .map(|e| e.train_loss)
            .fold(f64::INFINITY, f64::min);
        points.push(SweepPoint {
            point: i,
            param,
            value: v,
            best_train_loss: best_train,
            best_val_loss: run.fit.best_val_loss,
            epochs: run.fit.epochs.len() - 1,
        });
    }
    if let Some(d) = out {
        fs::create_dir_all(d)?;
        fs::write(d.join("sweep.csv"), sweep_csv(&points))?;
    }
    Ok(points)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("point,param,value,best_train_loss,best_val_loss,epochs\n");
    for p in points {
        writeln!(
            s,
            "{},{},{},{:.6},{:.6},{}",
            p.point,
            p.param.as_str(),
            p.value,
            p.best_train_loss,
            p.best_val_loss,
            p.epochs
        )
        .unwrap();
    }
    s
}
