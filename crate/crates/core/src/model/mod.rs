//! Full network assembly, benchmark variants and checkpointing.

mod checkpoint;
mod net;

pub use checkpoint::{CheckpointManifest, TensorRecord};
pub(crate) use checkpoint::{decode_f32, encode_f32};
pub use net::{BlockInputs, GesmeNet, PartitionAudit, WeightingSet};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A removable component of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Weighting,
    ConvrnnMe,
    ConvMe,
    ZonedistGruMe,
    GruMe,
}

impl Block {
    pub const ALL: [Block; 5] = [
        Block::Weighting,
        Block::ConvrnnMe,
        Block::ConvMe,
        Block::ZonedistGruMe,
        Block::GruMe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Block::Weighting => "weighting",
            Block::ConvrnnMe => "convrnn_me",
            Block::ConvMe => "conv_me",
            Block::ZonedistGruMe => "zonedist_gru_me",
            Block::GruMe => "gru_me",
        }
    }

    /// Name used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Block::Weighting => "Weighting",
            Block::ConvrnnMe => "ConvRNN-ME",
            Block::ConvMe => "Conv-ME",
            Block::ZonedistGruMe => "ZoneDist(GRU)-ME",
            Block::GruMe => "GRU-ME",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '(', ')'], "_");
        let key = key.trim_matches('_');
        Ok(match key {
            "weighting" => Block::Weighting,
            "convrnn_me" | "convrnn" => Block::ConvrnnMe,
            "conv_me" | "conv" => Block::ConvMe,
            "zonedist_gru_me" | "zonedist_gru__me" | "zonedist" => Block::ZonedistGruMe,
            "gru_me" | "gru" => Block::GruMe,
            other => return Err(Error::config(format!("unknown block `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSharing {
    Multi,
    Shared,
    None,
}

impl FromStr for GateSharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multi" => Ok(GateSharing::Multi),
            "shared" => Ok(GateSharing::Shared),
            "none" => Ok(GateSharing::None),
            other => Err(Error::config(format!("unknown gate sharing `{other}`"))),
        }
    }
}

/// The four networks compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single task, single network.
    Sm,
    /// Shared bottom with per-task towers.
    Sbsm,
    /// Mixtures with one gate shared by all tasks.
    Sesme,
    /// Mixtures with per-task gates.
    Gesme,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Sm => "sm",
            Variant::Sbsm => "sbsm",
            Variant::Sesme => "sesme",
            Variant::Gesme => "gesme",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_end_matches("-net") {
            "sm" => Ok(Variant::Sm),
            "sbsm" => Ok(Variant::Sbsm),
            "sesme" => Ok(Variant::Sesme),
            "gesme" => Ok(Variant::Gesme),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Network hyperparameters. [`ModelConfig::table1`] gives the published defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tasks: Vec<String>,
    pub experts: usize,
    pub layers: usize,
    /// Filters per Conv-ME layer.
    pub conv_filters: Vec<usize>,
    pub conv_filter_len: usize,
    /// Filters per ConvRNN-ME layer.
    pub convrnn_filters: Vec<usize>,
    pub convrnn_filter_len: usize,
    /// Hidden units of every GRU expert layer.
    pub gru_hidden: usize,
    /// Hidden units of GRU gate bodies.
    pub gate_hidden: usize,
    /// Filters of ConvRNN gate bodies.
    pub gate_filters: usize,
    pub gate_sharing: GateSharing,
    pub ablation: BTreeSet<Block>,
    pub conv_activation: Activation,
    pub convrnn_activation: Activation,
    pub weighting_activation: Activation,
    /// Half-width of the feature-weighting init.
    pub gamma: f64,
    /// Half-width of every other weight init; biases start at zero.
    pub init_half_width: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn table1(tasks: Vec<String>) -> Self {
        Self {
            tasks,
            experts: 2,
            layers: 2,
            conv_filters: vec![25, 50],
            conv_filter_len: 7,
            convrnn_filters: vec![50, 100],
            convrnn_filter_len: 5,
            gru_hidden: 4,
            gate_hidden: 4,
            gate_filters: 8,
            gate_sharing: GateSharing::Multi,
            ablation: BTreeSet::new(),
            conv_activation: Activation::Relu,
            convrnn_activation: Activation::Relu,
            weighting_activation: Activation::Linear,
            gamma: 0.5,
            init_half_width: 0.05,
            seed: 0,
        }
    }

    /// Filter lists doubling per layer from `base` (Conv-ME) and `2·base` (ConvRNN-ME).
    pub fn set_filter_base(&mut self, base: usize) {
        self.conv_filters = (0..self.layers).map(|l| base << l).collect();
        self.convrnn_filters = (0..self.layers).map(|l| (2 * base) << l).collect();
    }

    /// Reconfigure for a benchmark variant.
    pub fn for_variant(mut self, variant: Variant) -> Result<Self> {
        match variant {
            Variant::Sm => {
                if self.tasks.len() != 1 {
                    return Err(Error::config(format!(
                        "the single-task network needs exactly one task, got {:?}",
                        self.tasks
                    )));
                }
                self.experts = 1;
                self.gate_sharing = GateSharing::None;
            }
            Variant::Sbsm => {
                self.experts = 1;
                self.gate_sharing = GateSharing::None;
            }
            Variant::Sesme => self.gate_sharing = GateSharing::Shared,
            Variant::Gesme => self.gate_sharing = GateSharing::Multi,
        }
        Ok(self)
    }

    pub fn has(&self, block: Block) -> bool {
        !self.ablation.contains(&block)
    }

    pub fn validate(&self, roster: &FeatureRoster) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        let distinct: BTreeSet<&String> = self.tasks.iter().collect();
        if distinct.len() != self.tasks.len() {
            return Err(Error::config(format!("duplicate task ids in {:?}", self.tasks)));
        }
        if let Some(bad) = self.tasks.iter().find(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(Error::config(format!("invalid task id `{bad}`")));
        }
        if self.experts == 0 || self.layers == 0 {
            return Err(Error::config("experts and layers must be positive"));
        }
        if self.gate_sharing == GateSharing::None && self.experts != 1 {
            return Err(Error::config(format!(
                "ungated (shared-bottom) layers need exactly one expert, got {}",
                self.experts
            )));
        }
        if self.conv_filters.len() != self.layers || self.convrnn_filters.len() != self.layers {
            return Err(Error::config(format!(
                "filter lists {:?} / {:?} must have one entry per layer ({})",
                self.conv_filters, self.convrnn_filters, self.layers
            )));
        }
        if self.conv_filters.iter().chain(&self.convrnn_filters).any(|&k| k == 0)
            || self.gru_hidden == 0
            || self.gate_hidden == 0
            || self.gate_filters == 0
        {
            return Err(Error::config("filter counts and hidden sizes must be positive"));
        }
        if [Block::ConvrnnMe, Block::ConvMe, Block::ZonedistGruMe, Block::GruMe]
            .iter()
            .all(|b| !self.has(*b))
        {
            return Err(Error::config(
                "ablation removes every mixture block; at least one must remain",
            ));
        }
        let limit = 2 * roster.zones - 1;
        for (what, len) in [("conv", self.conv_filter_len), ("convrnn", self.convrnn_filter_len)] {
            if len % 2 == 0 || len > limit {
                return Err(Error::config(format!(
                    "{what} filter length {len} must be odd and at most 2N-1 = {limit}"
                )));
            }
        }
        roster.validate()
    }

    /// Output width a block contributes to each tower (0 for weighting).
    pub fn block_width(&self, block: Block) -> usize {
        match block {
            Block::Weighting => 0,
            Block::ConvrnnMe => *self.convrnn_filters.last().unwrap_or(&0),
            Block::ConvMe => *self.conv_filters.last().unwrap_or(&0),
            Block::ZonedistGruMe | Block::GruMe => self.gru_hidden,
        }
    }

    /// Surviving block widths plus the four time-context columns.
    pub fn tower_width(&self) -> usize {
        Block::ALL
            .iter()
            .filter(|b| self.has(**b))
            .map(|b| self.block_width(*b))
            .sum::<usize>()
            + CONTEXT_COLUMNS
    }
}

/// Three time-of-day bins plus the weekend flag.
pub const CONTEXT_COLUMNS: usize = 4;

/// Input dimensions and feature names of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRoster {
    pub zones: usize,
    pub lookback: usize,
    /// Spatio-temporal feature names (`F_st`).
    pub st_features: Vec<String>,
    /// Weather feature names (`F_w`).
    pub weather_features: Vec<String>,
    /// POI channel names (`C_p`).
    pub poi_channels: Vec<String>,
}

impl FeatureRoster {
    pub fn f_st(&self) -> usize {
        self.st_features.len()
    }

    pub fn f_w(&self) -> usize {
        self.weather_features.len()
    }

    pub fn c_p(&self) -> usize {
        self.poi_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.zones == 0 || self.lookback == 0 {
            return Err(Error::config("zones and lookback must be positive"));
        }
        if self.st_features.is_empty() || self.weather_features.is_empty() || self.poi_channels.is_empty() {
            return Err(Error::config(
                "roster needs at least one spatio-temporal, weather and POI feature",
            ));
        }
        Ok(())
    }
}

/// One batch of `R` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch<T> {
    /// `[R, N, F_st, B]`
    pub x_st: Tensor<T>,
    /// `[R, B, F_w]`
    pub x_w: Tensor<T>,
    /// `[R, N, 3]`
    pub cd: Tensor<T>,
    /// `[R, N]`
    pub cw: Tensor<T>,
    /// `[R, N, C_p]`
    pub cp: Tensor<T>,
    /// Per task, in task order: `[R, N]`.
    pub targets: Vec<Tensor<T>>,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn rows(&self) -> usize {
        self.x_st.shape()[0]
    }

    pub fn check(&self, roster: &FeatureRoster) -> Result<()> {
        let r = self.x_st.shape().first().copied().unwrap_or(0);
        let (n, b) = (roster.zones, roster.lookback);
        let expect: [(&str, &Tensor<T>, Vec<usize>); 5] = [
            ("x_st", &self.x_st, vec![r, n, roster.f_st(), b]),
            ("x_w", &self.x_w, vec![r, b, roster.f_w()]),
            ("cd", &self.cd, vec![r, n, 3]),
            ("cw", &self.cw, vec![r, n]),
            ("cp", &self.cp, vec![r, n, roster.c_p()]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "batch block {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        for (i, t) in self.targets.iter().enumerate() {
            if t.shape() != [r, n] {
                return Err(Error::dim(format!(
                    "target {i} has shape {:?}, expected {:?}",
                    t.shape(),
                    [r, n]
                )));
            }
        }
        Ok(())
    }

    /// Samples `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> Result<Self> {
        Ok(SampleBatch {
            x_st: self.x_st.gather_leading(idx)?,
            x_w: self.x_w.gather_leading(idx)?,
            cd: self.cd.gather_leading(idx)?,
            cw: self.cw.gather_leading(idx)?,
            cp: self.cp.gather_leading(idx)?,
            targets: self
                .targets
                .iter()
                .map(|t| t.gather_leading(idx))
                .collect::<Result<_>>()?,
        })
    }

    /// Contiguous samples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather(&idx)
    }

    pub fn cast<U: Scalar>(&self) -> SampleBatch<U> {
        SampleBatch {
            x_st: self.x_st.cast(),
            x_w: self.x_w.cast(),
            cd: self.cd.cast(),
            cw: self.cw.cast(),
            cp: self.cp.cast(),
            targets: self.targets.iter().map(|t| t.cast()).collect(),
        }
    }
}
