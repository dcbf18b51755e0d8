//! Flat `key = value` settings shared by every subcommand.
//!
//! Lines starting with `#` are comments. Keys mirror the fields of
//! [`ModelConfig`], [`TrainConfig`] and the scenario; `seed` sets both the
//! model and the training seed, `filter_base` rebuilds both filter lists and
//! changing `layers` rebuilds them from the current first Conv-ME width.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::data::ScenarioConfig;
use crate::error::{Error, Result};
use crate::model::{Block, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "seed",
    "lookback",
    "days",
    "val_fraction",
    "test_fraction",
    "experts",
    "layers",
    "filter_base",
    "conv_filters",
    "conv_filter_len",
    "convrnn_filters",
    "convrnn_filter_len",
    "gru_hidden",
    "gate_hidden",
    "gate_filters",
    "gate_sharing",
    "ablation",
    "conv_activation",
    "convrnn_activation",
    "weighting_activation",
    "gamma",
    "init_half_width",
    "learning_rate",
    "batch_size",
    "alpha",
    "beta",
    "patience",
    "max_epochs",
    "clip_norm",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

impl Settings {
    pub fn new(scenario: ScenarioConfig) -> Self {
        let tasks = scenario.tasks.iter().map(|t| t.name.clone()).collect();
        Self {
            scenario,
            model: ModelConfig::table1(tasks),
            train: TrainConfig::default(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key.trim() {
            "seed" => {
                m.seed = parse(key, v)?;
                t.seed = m.seed;
            }
            "lookback" => self.scenario.lookback = parse(key, v)?,
            "days" => self.scenario.days = Some(parse(key, v)?),
            "val_fraction" => self.scenario.val_fraction = parse(key, v)?,
            "test_fraction" => self.scenario.test_fraction = parse(key, v)?,
            "experts" => m.experts = parse(key, v)?,
            "layers" => {
                m.layers = parse(key, v)?;
                let base = m.conv_filters.first().copied().unwrap_or(25);
                m.set_filter_base(base);
            }
            "filter_base" => m.set_filter_base(parse(key, v)?),
            "conv_filters" => m.conv_filters = list(key, v)?,
            "conv_filter_len" => m.conv_filter_len = parse(key, v)?,
            "convrnn_filters" => m.convrnn_filters = list(key, v)?,
            "convrnn_filter_len" => m.convrnn_filter_len = parse(key, v)?,
            "gru_hidden" => m.gru_hidden = parse(key, v)?,
            "gate_hidden" => m.gate_hidden = parse(key, v)?,
            "gate_filters" => m.gate_filters = parse(key, v)?,
            "gate_sharing" => m.gate_sharing = v.parse()?,
            "ablation" => {
                m.ablation = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Block::from_str)
                    .collect::<Result<_>>()?
            }
            "conv_activation" => m.conv_activation = v.parse()?,
            "convrnn_activation" => m.convrnn_activation = v.parse()?,
            "weighting_activation" => m.weighting_activation = v.parse()?,
            "gamma" => m.gamma = parse(key, v)?,
            "init_half_width" => m.init_half_width = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "beta" => t.beta = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "clip_norm" => {
                t.clip_norm = match v {
                    "" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            other => {
                return Err(Error::config(format!(
                    "unknown setting `{other}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Apply one `key=value` pair.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    /// All settings in file syntax, so a run can be repeated from its echo.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let ablation: Vec<&str> = m.ablation.iter().map(|b| b.as_str()).collect();
        let mut lines = vec![
            format!("seed = {}", m.seed),
            format!("lookback = {}", self.scenario.lookback),
        ];
        if let Some(d) = self.scenario.days {
            lines.push(format!("days = {d}"));
        }
        lines.extend([
            format!("val_fraction = {}", self.scenario.val_fraction),
            format!("test_fraction = {}", self.scenario.test_fraction),
            format!("experts = {}", m.experts),
            format!("layers = {}", m.layers),
            format!("conv_filters = {}", join(&m.conv_filters)),
            format!("conv_filter_len = {}", m.conv_filter_len),
            format!("convrnn_filters = {}", join(&m.convrnn_filters)),
            format!("convrnn_filter_len = {}", m.convrnn_filter_len),
            format!("gru_hidden = {}", m.gru_hidden),
            format!("gate_hidden = {}", m.gate_hidden),
            format!("gate_filters = {}", m.gate_filters),
            format!("gate_sharing = {}", format!("{:?}", m.gate_sharing).to_ascii_lowercase()),
            format!("ablation = {}", ablation.join(",")),
            format!("conv_activation = {}", m.conv_activation.as_str()),
            format!("convrnn_activation = {}", m.convrnn_activation.as_str()),
            format!("weighting_activation = {}", m.weighting_activation.as_str()),
            format!("gamma = {}", m.gamma),
            format!("init_half_width = {}", m.init_half_width),
            format!("learning_rate = {}", t.learning_rate),
            format!("batch_size = {}", t.batch_size),
            format!("alpha = {}", t.alpha),
            format!("beta = {}", t.beta),
            format!("patience = {}", t.patience),
            format!("max_epochs = {}", t.max_epochs),
            format!("clip_norm = {}", t.clip_norm.map_or("none".to_string(), |c| c.to_string())),
        ]);
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut s = Settings::new(ScenarioConfig::synth());
        for p in ["layers=3", "ablation=gru_me,weighting", "clip_norm=5", "seed=9", "beta=0.01"] {
            s.set_pair(p).unwrap();
        }
        assert_eq!(s.model.conv_filters, vec![25, 50, 100]);
        let mut back = Settings::new(ScenarioConfig::synth());
        for line in s.to_text().lines() {
            back.set_pair(line).unwrap();
        }
        assert_eq!(back, s);
        assert!(matches!(s.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(s.set("layers", "x"), Err(Error::Config(_))));
    }
}
