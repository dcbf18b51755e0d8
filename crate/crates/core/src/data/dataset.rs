//! Scenario configuration, the on-disk dataset, splits, normalization and sample windows.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::context::{encode_contexts, repeat_time, repeat_zones};
use super::ingest::{
    aggregate_orders, aggregate_trajectories, check_order_invariants, encode_weather, Counters, GeoGrid, Grid,
    OrderFields, Table, WeatherTable, ZoneRoster,
};
use super::time::TimeAxis;
use crate::error::{Error, Result};
use crate::model::{decode_f32, encode_f32, FeatureRoster, SampleBatch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// `orders.csv`: fields `od`, `demand`, `gap`.
    Orders,
    /// `trajectory.csv` + `grid.json`: fields `demand`, `access`, `speed`, `speed_missing`.
    Trajectory,
}

impl Source {
    pub fn kinds(self) -> &'static [&'static str] {
        match self {
            Source::Orders => &["od", "demand", "gap"],
            Source::Trajectory => &["demand", "access", "speed", "speed_missing"],
        }
    }
}

/// A forecasting target: task id plus the dataset field it predicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub interval_minutes: u32,
    pub lookback: usize,
    /// First day of the span; inferred from the data when absent.
    pub start: Option<NaiveDate>,
    pub days: Option<usize>,
    /// Expected zone count, checked on ingest.
    pub zones: Option<usize>,
    pub cities: Vec<String>,
    pub source: Source,
    /// Per-city field kinds fed to the spatio-temporal block.
    pub features: Vec<String>,
    pub tasks: Vec<TaskSpec>,
    pub weather_categories: Option<Vec<String>>,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

fn tasks(pairs: &[(&str, &str)]) -> Vec<TaskSpec> {
    pairs
        .iter()
        .map(|(n, f)| TaskSpec {
            name: n.to_string(),
            field: f.to_string(),
        })
        .collect()
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl ScenarioConfig {
    /// One city, 10-minute slots, original demand and gap tasks.
    pub fn scenario1() -> Self {
        Self {
            name: "scenario1".into(),
            interval_minutes: 10,
            lookback: 6,
            start: None,
            days: None,
            zones: None,
            cities: strings(&["beijing"]),
            source: Source::Orders,
            features: strings(&["od", "demand", "gap"]),
            tasks: tasks(&[("original_demand", "beijing.od"), ("gap", "beijing.gap")]),
            weather_categories: None,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }

    /// Two cities on 10×10 grids, 15-minute slots, one demand task per city.
    pub fn scenario2() -> Self {
        Self {
            name: "scenario2".into(),
            interval_minutes: 15,
            lookback: 9,
            start: None,
            days: None,
            zones: Some(100),
            cities: strings(&["chengdu", "xian"]),
            source: Source::Trajectory,
            features: strings(&["demand", "access", "speed", "speed_missing"]),
            tasks: tasks(&[("demand_chengdu", "chengdu.demand"), ("demand_xian", "xian.demand")]),
            weather_categories: None,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }

    /// Desk-scale synthetic two-city scenario.
    pub fn synth() -> Self {
        Self {
            name: "scenario-synth".into(),
            interval_minutes: 15,
            lookback: 4,
            start: NaiveDate::from_ymd_opt(2016, 11, 1),
            days: Some(20),
            zones: Some(4),
            cities: strings(&["city_a", "city_b"]),
            source: Source::Orders,
            features: strings(&["od", "gap"]),
            tasks: tasks(&[("demand_city_a", "city_a.od"), ("demand_city_b", "city_b.od")]),
            weather_categories: Some(strings(&["sunny", "cloudy", "rainy"])),
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "scenario1" => Ok(Self::scenario1()),
            "scenario2" => Ok(Self::scenario2()),
            "scenario-synth" | "synth" => Ok(Self::synth()),
            other => Err(Error::config(format!("unknown scenario preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 {
            return Err(Error::config("lookback must be at least 1"));
        }
        if self.cities.is_empty() || self.features.is_empty() || self.tasks.is_empty() {
            return Err(Error::config("cities, features and tasks must be non-empty"));
        }
        let kinds = self.source.kinds();
        if let Some(f) = self.features.iter().find(|f| !kinds.contains(&f.as_str()) && f.as_str() != "noise") {
            return Err(Error::config(format!("feature `{f}` is not produced by {:?} data ({kinds:?})", self.source)));
        }
        if !(self.val_fraction > 0.0 && self.test_fraction > 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return Err(Error::config("validation and test fractions must be positive and sum below 1"));
        }
        Ok(())
    }
}

/// Min-max scaling to `[0, 1]`; constant fields are shifted only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        if !min.is_finite() {
            (min, max) = (0.0, 0.0);
        }
        Self { min, max }
    }

    fn range(&self) -> f64 {
        if self.max > self.min {
            self.max - self.min
        } else {
            1.0
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / self.range()
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.range() + self.min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    OneHot,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldInfo {
    pub name: String,
    /// Train-split statistics.
    pub stats: MinMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherColumn {
    pub name: String,
    pub kind: ColumnKind,
    /// Train-split mean and standard deviation (continuous columns only).
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiChannel {
    pub name: String,
    pub stats: MinMax,
}

/// Chronological split: train `[0, train_end)`, validation `[train_end, val_end)`, test `[val_end, slots)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: usize,
    pub val_end: usize,
    pub slots: usize,
}

impl SplitSpec {
    pub fn new(slots: usize, val_fraction: f64, test_fraction: f64) -> Result<Self> {
        let test = (slots as f64 * test_fraction).round() as usize;
        let val = (slots as f64 * val_fraction).round() as usize;
        if test == 0 || val == 0 || val + test >= slots {
            return Err(Error::config(format!(
                "{slots} slots cannot be split {val_fraction}/{test_fraction}"
            )));
        }
        Ok(Self {
            train_end: slots - val - test,
            val_end: slots - test,
            slots,
        })
    }

    pub fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end, self.val_end),
            Split::Test => (self.val_end, self.slots),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

pub const FORMAT: &str = "stmoe-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub scenario: ScenarioConfig,
    pub start: NaiveDate,
    pub days: usize,
    pub interval_minutes: u32,
    pub slots: usize,
    pub zones: usize,
    pub zone_ids: Vec<String>,
    /// Raw `[T × N]` matrices, in blob order.
    pub fields: Vec<FieldInfo>,
    /// Field names feeding the spatio-temporal block.
    pub st_features: Vec<String>,
    /// `[T × F_w]` in blob order after the fields.
    pub weather: Vec<WeatherColumn>,
    /// `[N × C_p]` in blob order after the weather.
    pub poi: Vec<PoiChannel>,
    pub split: SplitSpec,
    pub counters: Counters,
    /// Number of binary32 values in the blob.
    pub total: usize,
}

/// Raw per-city input before assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct CityData {
    pub name: String,
    pub zones: ZoneRoster,
    /// `(kind, [T × N])`
    pub fields: Vec<(String, Grid)>,
    pub weather: WeatherTable,
}

/// A preprocessed scenario: raw fields, weather and POI plus train-split statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub fields: Vec<Vec<f32>>,
    pub weather: Vec<f32>,
    pub poi: Vec<f32>,
}

/// Samples of one split plus their target slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub batch: SampleBatch<f32>,
    pub slots: Vec<usize>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl Dataset {
    pub fn axis(&self) -> TimeAxis {
        TimeAxis::new(self.manifest.start, self.manifest.days, self.manifest.interval_minutes)
            .expect("manifest holds a validated axis")
    }

    /// Combine per-city inputs into one dataset with names `<city>.<kind>`.
    pub fn assemble(scenario: &ScenarioConfig, axis: TimeAxis, cities: Vec<CityData>, counters: Counters) -> Result<Self> {
        scenario.validate()?;
        let n = cities[0].zones.len();
        if let Some(expected) = scenario.zones {
            if n != expected {
                return Err(Error::config(format!("scenario expects {expected} zones, data has {n}")));
            }
        }
        if scenario.lookback + 1 >= axis.len() {
            return Err(Error::config("time span shorter than one sample window"));
        }
        let t = axis.len();
        let split = SplitSpec::new(t, scenario.val_fraction, scenario.test_fraction)?;
        let mut fields = Vec::new();
        let mut infos = Vec::new();
        let mut weather_cols = Vec::new();
        let mut weather_parts = Vec::new();
        let mut poi_channels = Vec::new();
        let mut poi = vec![0.0; n * cities.len()];
        for (ci, city) in cities.iter().enumerate() {
            if city.zones.len() != n {
                return Err(Error::config(format!(
                    "city `{}` has {} zones, `{}` has {n}",
                    city.name,
                    city.zones.len(),
                    cities[0].name
                )));
            }
            for (kind, grid) in &city.fields {
                if grid.slots != t || grid.zones != n {
                    return Err(Error::dim(format!("field {}.{kind} is not [{t} × {n}]", city.name)));
                }
                let stats = MinMax::fit(grid.values[..split.train_end * n].iter().copied());
                infos.push(FieldInfo {
                    name: format!("{}.{kind}", city.name),
                    stats,
                });
                fields.push(to_f32(&grid.values));
            }
            let kind_of = |k: &str| city.fields.iter().find(|(n, _)| n == k).map(|(_, g)| g);
            if let (Some(od), Some(d), Some(g)) = (kind_of("od"), kind_of("demand"), kind_of("gap")) {
                check_order_invariants(&OrderFields {
                    original_demand: od.clone(),
                    demand: d.clone(),
                    gap: g.clone(),
                })
                .map_err(|m| Error::config(format!("city `{}`: {m}", city.name)))?;
            }
            let w = &city.weather;
            for (j, name) in w.column_names().into_iter().enumerate() {
                let kind = if j < w.categories.len() {
                    ColumnKind::OneHot
                } else {
                    ColumnKind::Continuous
                };
                let (mean, std) = match kind {
                    ColumnKind::OneHot => (0.0, 1.0),
                    ColumnKind::Continuous => {
                        let col: Vec<f64> = (0..split.train_end).map(|s| w.values[s * w.width + j]).collect();
                        let mean = col.iter().sum::<f64>() / col.len() as f64;
                        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
                        (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
                    }
                };
                weather_cols.push(WeatherColumn {
                    name: format!("{}.{name}", city.name),
                    kind,
                    mean,
                    std,
                });
            }
            weather_parts.push(w);
            poi_channels.push(PoiChannel {
                name: format!("{}.poi", city.name),
                stats: MinMax::fit(city.zones.poi.iter().copied()),
            });
            let k = cities.len();
            for z in 0..n {
                poi[z * k + ci] = city.zones.poi[z];
            }
        }
        let width: usize = weather_parts.iter().map(|w| w.width).sum();
        let mut weather = Vec::with_capacity(t * width);
        for s in 0..t {
            for w in &weather_parts {
                weather.extend(w.values[s * w.width..(s + 1) * w.width].iter().map(|&v| v as f32));
            }
        }
        let mut st_features = Vec::new();
        for city in &cities {
            for f in &scenario.features {
                let name = format!("{}.{f}", city.name);
                if infos.iter().any(|i| i.name == name) {
                    st_features.push(name);
                } else if f != "noise" {
                    return Err(Error::config(format!("feature `{name}` missing from the data")));
                }
            }
        }
        if infos.iter().any(|i| i.name == "noise") {
            st_features.push("noise".into());
        }
        for task in &scenario.tasks {
            if !infos.iter().any(|i| i.name == task.field) {
                return Err(Error::config(format!(
                    "task `{}` targets unknown field `{}`",
                    task.name, task.field
                )));
            }
        }
        let total = fields.len() * t * n + weather.len() + poi.len();
        let manifest = DatasetManifest {
            format: FORMAT.into(),
            scenario: scenario.clone(),
            start: axis.start,
            days: axis.days,
            interval_minutes: axis.interval_minutes,
            slots: t,
            zones: n,
            zone_ids: cities[0].zones.ids.clone(),
            fields: infos,
            st_features,
            weather: weather_cols,
            poi: poi_channels,
            split,
            counters,
            total,
        };
        Ok(Self {
            manifest,
            fields,
            weather,
            poi: to_f32(&poi),
        })
    }

    /// Append an extra spatio-temporal field (train-split statistics computed here).
    pub fn push_field(&mut self, name: &str, values: Vec<f32>, as_feature: bool) -> Result<()> {
        let (t, n) = (self.manifest.slots, self.manifest.zones);
        if values.len() != t * n {
            return Err(Error::dim(format!("field `{name}` needs {} values", t * n)));
        }
        if self.manifest.fields.iter().any(|f| f.name == name) {
            return Err(Error::config(format!("field `{name}` already exists")));
        }
        let stats = MinMax::fit(values[..self.manifest.split.train_end * n].iter().map(|&v| v as f64));
        self.manifest.fields.push(FieldInfo {
            name: name.to_string(),
            stats,
        });
        self.fields.push(values);
        if as_feature {
            self.manifest.st_features.push(name.to_string());
        }
        self.manifest.total += t * n;
        Ok(())
    }

    pub fn field_index(&self, name: &str) -> Result<usize> {
        self.manifest
            .fields
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::usage(format!("unknown field `{name}`")))
    }

    pub fn task_names(&self) -> Vec<String> {
        self.manifest.scenario.tasks.iter().map(|t| t.name.clone()).collect()
    }

    /// Min-max statistics of each task's target field.
    pub fn target_stats(&self) -> Result<Vec<MinMax>> {
        self.manifest
            .scenario
            .tasks
            .iter()
            .map(|t| Ok(self.manifest.fields[self.field_index(&t.field)?].stats))
            .collect()
    }

    pub fn roster(&self) -> FeatureRoster {
        FeatureRoster {
            zones: self.manifest.zones,
            lookback: self.manifest.scenario.lookback,
            st_features: self.manifest.st_features.clone(),
            weather_features: self.manifest.weather.iter().map(|c| c.name.clone()).collect(),
            poi_channels: self.manifest.poi.iter().map(|c| c.name.clone()).collect(),
        }
    }

    /// Target slots of a split whose whole history window lies inside it.
    pub fn sample_slots(&self, split: Split) -> Vec<usize> {
        let (start, end) = self.manifest.split.range(split);
        (start + self.manifest.scenario.lookback..end).collect()
    }

    /// Normalized model inputs and targets for every sample of a split.
    pub fn samples(&self, split: Split) -> Result<SampleSet> {
        let slots = self.sample_slots(split);
        if slots.is_empty() {
            return Err(Error::config(format!("split {split:?} holds no complete sample window")));
        }
        let m = &self.manifest;
        let (n, b) = (m.zones, m.scenario.lookback);
        let axis = self.axis();
        let contexts = encode_contexts(&axis)?;
        let st: Vec<usize> = m
            .st_features
            .iter()
            .map(|f| self.field_index(f))
            .collect::<Result<_>>()?;
        let targets: Vec<usize> = m
            .scenario
            .tasks
            .iter()
            .map(|t| self.field_index(&t.field))
            .collect::<Result<_>>()?;
        let fw = m.weather.len();
        let cp = m.poi.len();
        let poi_norm: Vec<f64> = (0..n * cp)
            .map(|i| m.poi[i % cp].stats.apply(self.poi[i] as f64))
            .collect();
        let r = slots.len();
        let mut x_st = Vec::with_capacity(r * n * st.len() * b);
        let mut x_w = Vec::with_capacity(r * b * fw);
        let mut cd = Vec::with_capacity(r * n * 3);
        let mut cw = Vec::with_capacity(r * n);
        let mut cps = Vec::with_capacity(r * n * cp);
        let mut ys: Vec<Vec<f32>> = vec![Vec::with_capacity(r * n); targets.len()];
        for &t in &slots {
            for z in 0..n {
                for &f in &st {
                    let stats = m.fields[f].stats;
                    for k in 0..b {
                        let s = t - b + k;
                        x_st.push(stats.apply(self.fields[f][s * n + z] as f64) as f32);
                    }
                }
            }
            for k in 0..b {
                let s = t - b + k;
                for (j, col) in m.weather.iter().enumerate() {
                    let v = self.weather[s * fw + j] as f64;
                    x_w.push(match col.kind {
                        ColumnKind::OneHot => v,
                        ColumnKind::Continuous => (v - col.mean) / col.std,
                    } as f32);
                }
            }
            let ctx = contexts[t];
            cd.extend(repeat_zones(&ctx.day_part, n).into_iter().map(|v| v as f32));
            cw.extend(repeat_zones(&[ctx.weekend], n).into_iter().map(|v| v as f32));
            cps.extend(poi_norm.iter().map(|&v| v as f32));
            for (y, &f) in ys.iter_mut().zip(&targets) {
                let stats = m.fields[f].stats;
                y.extend((0..n).map(|z| stats.apply(self.fields[f][t * n + z] as f64) as f32));
            }
        }
        let batch = SampleBatch {
            x_st: Tensor::new(&[r, n, st.len(), b], x_st)?,
            x_w: Tensor::new(&[r, b, fw], x_w)?,
            cd: Tensor::new(&[r, n, 3], cd)?,
            cw: Tensor::new(&[r, n], cw)?,
            cp: Tensor::new(&[r, n, cp], cps)?,
            targets: ys
                .into_iter()
                .map(|y| Tensor::new(&[r, n], y))
                .collect::<Result<_>>()?,
        };
        Ok(SampleSet { batch, slots })
    }

    /// Raw (unnormalized) target values `[S × N]` of one task at the given slots.
    pub fn raw_targets(&self, task: usize, slots: &[usize]) -> Result<Vec<f64>> {
        let spec = self
            .manifest
            .scenario
            .tasks
            .get(task)
            .ok_or_else(|| Error::usage(format!("no task {task}")))?;
        let f = self.field_index(&spec.field)?;
        let n = self.manifest.zones;
        Ok(slots
            .iter()
            .flat_map(|&t| (0..n).map(move |z| (t, z)))
            .map(|(t, z)| self.fields[f][t * n + z] as f64)
            .collect())
    }

    /// POI as a `[T × N]` matrix for channel `c` via `f_RT`.
    pub fn poi_over_time(&self, c: usize) -> Vec<f64> {
        let k = self.manifest.poi.len();
        let col: Vec<f64> = (0..self.manifest.zones).map(|z| self.poi[z * k + c] as f64).collect();
        repeat_time(&col, self.manifest.slots)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let blob = encode_f32(self.fields.iter().flatten().chain(&self.weather).chain(&self.poi).copied());
        fs::write(dir.join("data.f32"), blob)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| {
            Error::usage(format!("cannot read dataset manifest {}: {e}", mpath.display()))
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::usage(format!("{}: unsupported format `{}`", mpath.display(), manifest.format)));
        }
        TimeAxis::new(manifest.start, manifest.days, manifest.interval_minutes)?;
        let bytes = fs::read(dir.join("data.f32"))?;
        let (t, n) = (manifest.slots, manifest.zones);
        let nf = manifest.fields.len() * t * n;
        let nw = manifest.weather.len() * t;
        let np = manifest.poi.len() * n;
        if bytes.len() != manifest.total * 4 || manifest.total != nf + nw + np {
            return Err(Error::usage(format!(
                "{}: blob holds {} bytes, manifest describes {} values",
                dir.display(),
                bytes.len(),
                nf + nw + np
            )));
        }
        let values = decode_f32(&bytes);
        let fields = values[..nf].chunks(t * n).map(|c| c.to_vec()).collect();
        Ok(Self {
            fields,
            weather: values[nf..nf + nw].to_vec(),
            poi: values[nf + nw..].to_vec(),
            manifest,
        })
    }

    /// Ingest a directory of CSVs (one subdirectory per city, or the directory
    /// itself for a single city).
    pub fn preprocess(input: &Path, scenario: &ScenarioConfig) -> Result<Self> {
        scenario.validate()?;
        let dirs: Vec<_> = scenario
            .cities
            .iter()
            .map(|c| {
                let d = input.join(c);
                if !d.is_dir() && scenario.cities.len() == 1 {
                    input.to_path_buf()
                } else {
                    d
                }
            })
            .collect();
        let source_file = match scenario.source {
            Source::Orders => "orders.csv",
            Source::Trajectory => "trajectory.csv",
        };
        let axis = match (scenario.start, scenario.days) {
            (Some(start), Some(days)) => TimeAxis::new(start, days, scenario.interval_minutes)?,
            _ => infer_axis(&dirs.iter().map(|d| d.join("weather.csv")).collect::<Vec<_>>(), scenario)?,
        };
        let mut counters = Counters::new();
        let mut cities = Vec::new();
        for (name, dir) in scenario.cities.iter().zip(&dirs) {
            let mut zones = ZoneRoster::read(&dir.join("poi.csv"))?;
            let fields = match scenario.source {
                Source::Orders => {
                    let f = aggregate_orders(&dir.join(source_file), &axis, &zones, &mut counters)?;
                    vec![
                        ("od".to_string(), f.original_demand),
                        ("demand".to_string(), f.demand),
                        ("gap".to_string(), f.gap),
                    ]
                }
                Source::Trajectory => {
                    let grid = GeoGrid::read(&dir.join("grid.json"))?;
                    zones = grid_zone_order(&zones, &grid, &dir.join("poi.csv"))?;
                    let f = aggregate_trajectories(&dir.join(source_file), &axis, &grid, &mut counters)?;
                    vec![
                        ("demand".to_string(), f.demand),
                        ("access".to_string(), f.accessibility),
                        ("speed".to_string(), f.speed),
                        ("speed_missing".to_string(), f.speed_missing),
                    ]
                }
            };
            let weather = encode_weather(
                &dir.join("weather.csv"),
                &axis,
                scenario.weather_categories.as_deref(),
                &mut counters,
            )?;
            cities.push(CityData {
                name: name.clone(),
                zones,
                fields,
                weather,
            });
        }
        let mut scenario = scenario.clone();
        scenario.start = Some(axis.start);
        scenario.days = Some(axis.days);
        if scenario.weather_categories.is_none() {
            // Pin the discovered order so later runs encode identically.
            let mut all = BTreeSet::new();
            for c in &cities {
                all.extend(c.weather.categories.iter().cloned());
            }
            if cities.iter().any(|c| c.weather.categories.len() != all.len()) {
                return Err(Error::config(
                    "cities report different weather categories; declare them in the scenario",
                ));
            }
            scenario.weather_categories = Some(all.into_iter().collect());
        }
        Self::assemble(&scenario, axis, cities, counters)
    }
}

/// For grid-based cities, zone ids must be the integer cell indices `0..rows·cols`.
fn grid_zone_order(zones: &ZoneRoster, grid: &GeoGrid, path: &Path) -> Result<ZoneRoster> {
    let n = grid.zones();
    let mut poi = vec![None; n];
    for (id, &v) in zones.ids.iter().zip(&zones.poi) {
        let idx: usize = id.parse().ok().filter(|&i| i < n).ok_or_else(|| Error::Ingest {
            file: path.to_path_buf(),
            line: None,
            message: format!("zone id `{id}` is not a grid cell index below {n}"),
        })?;
        poi[idx] = Some(v);
    }
    let poi = poi
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| Error::Ingest {
                file: path.to_path_buf(),
                line: None,
                message: format!("grid cell {i} has no POI row"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ZoneRoster {
        ids: (0..n).map(|i| i.to_string()).collect(),
        poi,
    })
}

/// Whole days covering every weather record.
///
/// Weather is the calendar: trips that run past midnight on the last day
/// would otherwise add a mostly empty day.
fn infer_axis(files: &[std::path::PathBuf], scenario: &ScenarioConfig) -> Result<TimeAxis> {
    let (mut lo, mut hi) = (None, None);
    for f in files {
        let t = Table::read(f, &["ts"])?;
        for (line, r) in &t.rows {
            let ts = t.timestamp(*line, &r[0])?;
            lo = Some(lo.map_or(ts, |l: chrono::NaiveDateTime| l.min(ts)));
            hi = Some(hi.map_or(ts, |h: chrono::NaiveDateTime| h.max(ts)));
        }
    }
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Err(Error::config("no timestamps to infer the time span from"));
    };
    let start = scenario.start.unwrap_or(lo.date());
    let days = scenario
        .days
        .unwrap_or(((hi.date() - start).num_days() + 1).max(1) as usize);
    TimeAxis::new(start, days, scenario.interval_minutes)
}
