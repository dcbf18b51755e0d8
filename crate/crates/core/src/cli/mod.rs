//! Command-line surface: `preprocess`, `synth`, `train`, `evaluate`, `ablate`, `sweep`, `explain`.
//!
//! Outputs go under `--out`, or `$STMOE_OUTPUT_ROOT/<command>-…` (default
//! root `runs`). Settings come from `--config` files and `--set key=value`
//! pairs, applied in that order, then from dedicated flags.

pub mod config;
pub mod run;

use std::ffi::OsString;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{Dataset, ScenarioConfig, Split, Synth, SynthSpec};
use crate::error::{Error, Result};
use crate::interpret::ImportanceReport;
use crate::metrics::{evaluate, metrics_csv, metrics_table};
use crate::model::{GesmeNet, Variant};
use crate::train::predict_set;
pub use config::Settings;
pub use run::{ablate, sweep, train_run, AblationRow, RunOutcome, RunReport, SweepParam, SweepPoint};

pub const OUTPUT_ROOT_ENV: &str = "STMOE_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "stmoe", version, about = "Multi-task spatio-temporal mixture-of-experts forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate raw CSVs into a dataset directory.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic scenario (raw CSVs plus dataset).
    Synth(SynthArgs),
    /// Train one model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Evaluate(EvalArgs),
    /// Train the full model and every single-block removal.
    Ablate(CommonArgs),
    /// Train a grid over one hyperparameter.
    Sweep(SweepArgs),
    /// Write feature-importance CSVs for a checkpoint.
    Explain(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory with one subdirectory per city (or the CSVs themselves for one city).
    #[arg(long)]
    pub input: PathBuf,
    /// Scenario preset: scenario1 or scenario2.
    #[arg(long, default_value = "scenario1")]
    pub preset: String,
    #[arg(long)]
    pub config: Vec<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// scenario-synth (orders, 4 zones) or scenario2 (trajectories, 10×10 grids).
    #[arg(long, default_value = "scenario-synth")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub days: Option<usize>,
    /// Add an i.i.d. noise feature to the dataset (order scenarios only).
    #[arg(long)]
    pub noise_feature: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Dataset directory written by `preprocess` or `synth`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// table1, scenario1, scenario2 or scenario-synth. Without --dataset only
    /// scenario-synth works; it is generated in memory from --seed.
    #[arg(long, default_value = "table1")]
    pub preset: String,
    #[arg(long)]
    pub config: Vec<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Inject an i.i.d. noise feature into the synthetic preset.
    #[arg(long)]
    pub noise_feature: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// gesme, sesme, sbsm or sm.
    #[arg(long, default_value = "gesme")]
    pub variant: String,
    /// Task for single-task training.
    #[arg(long)]
    pub task: Option<String>,
    /// Comma-separated blocks to remove.
    #[arg(long)]
    pub ablate: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint base path (`<base>.manifest.json`, `<base>.params`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// layers, filters, filter_len or hidden.
    #[arg(long)]
    pub param: String,
    /// Comma-separated grid; defaults depend on the parameter.
    #[arg(long)]
    pub values: Option<String>,
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn out_dir(explicit: &Option<PathBuf>, default: String) -> PathBuf {
    explicit.clone().unwrap_or_else(|| output_root().join(default))
}

fn split_of(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::usage(format!("unknown split `{other}` (train, val, test)"))),
    }
}

fn scenario_preset(preset: &str) -> Result<Option<ScenarioConfig>> {
    match preset {
        "table1" => Ok(None),
        other => ScenarioConfig::preset(other).map(Some),
    }
}

/// The dataset and resolved settings for a run.
pub fn resolve(args: &CommonArgs) -> Result<(Dataset, Settings)> {
    let preset = scenario_preset(&args.preset)?;
    let loaded = match &args.dataset {
        Some(dir) => Some(Dataset::load(dir)?),
        None => None,
    };
    let base = match (&loaded, &preset) {
        (Some(d), Some(p)) if p.name != d.manifest.scenario.name => {
            return Err(Error::usage(format!(
                "dataset was built for `{}`, not `{}`",
                d.manifest.scenario.name, p.name
            )))
        }
        (Some(d), _) => d.manifest.scenario.clone(),
        (None, Some(p)) if p.name == "scenario-synth" => p.clone(),
        (None, _) => {
            return Err(Error::usage(format!(
                "preset `{}` needs --dataset; only scenario-synth can be generated in memory",
                args.preset
            )))
        }
    };
    let mut settings = Settings::new(base);
    for c in &args.config {
        settings.apply_file(c)?;
    }
    for pair in &args.set {
        settings.set_pair(pair)?;
    }
    if let Some(seed) = args.seed {
        settings.set("seed", &seed.to_string())?;
    }
    if let Some(e) = args.epochs {
        settings.train.max_epochs = e;
    }
    let data = match loaded {
        None => {
            let mut spec = SynthSpec::synth(settings.model.seed);
            spec.scenario = settings.scenario.clone();
            spec.noise_feature = args.noise_feature;
            Synth::generate(&spec)?.dataset()?
        }
        Some(_) if args.noise_feature => {
            return Err(Error::usage("--noise-feature only applies to the in-memory synthetic preset"))
        }
        Some(mut d) => {
            let s = &settings.scenario;
            let m = &d.manifest.scenario;
            if s.days != m.days || s.val_fraction != m.val_fraction || s.test_fraction != m.test_fraction {
                return Err(Error::usage(
                    "days and split fractions are fixed when the dataset is built; rerun preprocess",
                ));
            }
            d.manifest.scenario.lookback = s.lookback;
            d
        }
    };
    settings.scenario = data.manifest.scenario.clone();
    Ok((data, settings))
}

fn load_checkpoint(path: &Path, data: &Dataset) -> Result<GesmeNet<f32>> {
    let mut net = GesmeNet::<f32>::load(path)?;
    if net.roster != data.roster() {
        return Err(Error::usage(format!(
            "checkpoint {} was trained on a different feature roster",
            path.display()
        )));
    }
    // Make sure the stored parameters really belong to this configuration.
    net.load_params(path)?;
    Ok(net)
}

fn print_counters(data: &Dataset) {
    for (k, v) in &data.manifest.counters {
        println!("  {k}: {v}");
    }
}

pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                Error::Usage(String::new())
            }
            _ => Error::usage(e.to_string()),
        }
    });
    let cli = match cli {
        Ok(c) => c,
        Err(Error::Usage(m)) if m.is_empty() => return Ok(()),
        Err(e) => return Err(e),
    };
    execute(cli.command)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Preprocess(a) => {
            let mut settings = Settings::new(ScenarioConfig::preset(&a.preset)?);
            for c in &a.config {
                settings.apply_file(c)?;
            }
            for p in &a.set {
                settings.set_pair(p)?;
            }
            let data = Dataset::preprocess(&a.input, &settings.scenario)?;
            let out = out_dir(&a.out, format!("dataset-{}", a.preset));
            data.save(&out)?;
            println!(
                "dataset {}: {} zones, {} slots ({} per day), split {}/{}/{}",
                out.display(),
                data.manifest.zones,
                data.manifest.slots,
                data.axis().slots_per_day(),
                data.manifest.split.train_end,
                data.manifest.split.val_end - data.manifest.split.train_end,
                data.manifest.split.slots - data.manifest.split.val_end
            );
            print_counters(&data);
        }
        Command::Synth(a) => {
            let mut spec = SynthSpec::preset(&a.preset, a.seed)?;
            if let Some(d) = a.days {
                spec.scenario.days = Some(d);
            }
            spec.noise_feature = a.noise_feature;
            let synth = Synth::generate(&spec)?;
            let out = out_dir(&a.out, format!("synth-{}-seed{}", a.preset, a.seed));
            let raw = out.join("raw");
            synth.write_csvs(&raw)?;
            let data = if a.noise_feature {
                synth.dataset()?
            } else {
                Dataset::preprocess(&raw, &spec.scenario)?
            };
            data.save(&out.join("dataset"))?;
            fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
            println!(
                "synthetic {}: raw CSVs in {}, dataset in {} ({} zones, {} slots, {:.1}% zero-demand cells)",
                a.preset,
                raw.display(),
                out.join("dataset").display(),
                data.manifest.zones,
                data.manifest.slots,
                100.0 * synth.zero_fraction()
            );
            print_counters(&data);
        }
        Command::Train(a) => {
            let variant: Variant = a.variant.parse()?;
            let mut common = a.common.clone();
            if let Some(ab) = &a.ablate {
                common.set.push(format!("ablation={ab}"));
            }
            let (data, settings) = resolve(&common)?;
            let label = match &a.task {
                Some(t) => format!("train-{}-{t}-seed{}", variant.as_str(), settings.model.seed),
                None => format!("train-{}-seed{}", variant.as_str(), settings.model.seed),
            };
            let out = out_dir(&common.out, label);
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), settings.to_text())?;
            let run = train_run(&data, &settings, variant, a.task.as_deref(), Some(&out), |e| {
                if e.epoch % 10 == 0 {
                    eprintln!("epoch {:>4}  train {:.6}  val {:.6}", e.epoch, e.train_loss, e.val_loss);
                }
                ControlFlow::Continue(())
            })?;
            print!("{}", metrics_table(&run.metrics));
            println!(
                "best epoch {} of {}; outputs in {}",
                run.fit.best_epoch,
                run.fit.epochs.len() - 1,
                out.display()
            );
        }
        Command::Evaluate(a) => {
            let (data, _) = resolve(&a.common)?;
            let net = load_checkpoint(&a.checkpoint, &data)?;
            let set = run::select_targets(&data.samples(split_of(&a.split)?)?, &data, net.tasks())?;
            let metrics = evaluate(&net, &data, &set, 0.0)?;
            let out = out_dir(&a.common.out, format!("evaluate-{}", a.split));
            fs::create_dir_all(&out)?;
            fs::write(out.join("metrics.csv"), metrics_csv(&metrics))?;
            let preds = predict_set(&net, &set.batch)?;
            let mut csv = String::from("task,slot,zone,prediction\n");
            let stats = data.target_stats()?;
            for (task, p) in net.tasks().iter().zip(&preds) {
                let i = data.task_names().iter().position(|n| n == task).unwrap();
                let n = data.manifest.zones;
                for (k, v) in p.data().iter().enumerate() {
                    csv.push_str(&format!(
                        "{task},{},{},{:.6}\n",
                        set.slots[k / n],
                        data.manifest.zone_ids[k % n],
                        stats[i].invert(*v as f64)
                    ));
                }
            }
            fs::write(out.join("predictions.csv"), csv)?;
            print!("{}", metrics_table(&metrics));
        }
        Command::Ablate(a) => {
            let (data, settings) = resolve(&a)?;
            let out = out_dir(&a.out, format!("ablate-seed{}", settings.model.seed));
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), settings.to_text())?;
            let rows = ablate(&data, &settings, Some(&out))?;
            print!("{}", run::ablation_table(&rows));
        }
        Command::Sweep(a) => {
            let param: SweepParam = a.param.parse()?;
            let grid = match &a.values {
                Some(v) => v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().map_err(|_| Error::config(format!("bad grid value `{s}`"))))
                    .collect::<Result<Vec<usize>>>()?,
                None => param.default_grid(),
            };
            let (data, settings) = resolve(&a.common)?;
            let out = out_dir(&a.common.out, format!("sweep-{}-seed{}", param.as_str(), settings.model.seed));
            let points = sweep(&data, &settings, param, &grid, Some(&out))?;
            print!("{}", run::sweep_csv(&points));
        }
        Command::Explain(a) => {
            let (data, _) = resolve(&a.common)?;
            let net = load_checkpoint(&a.checkpoint, &data)?;
            let set = data.samples(split_of(&a.split)?)?;
            let report = ImportanceReport::compute(&net, &set.batch, &data.manifest.zone_ids)?;
            let out = out_dir(&a.common.out, "explain".to_string());
            for p in report.write_csvs(&out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
