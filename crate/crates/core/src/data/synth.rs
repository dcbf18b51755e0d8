//! Synthetic multi-city scenarios with shared structure.
//!
//! Demand per zone-slot is Poisson with intensity
//! `base_z · (1 − a·cos(2π(h − 4)/24)) · weekend · weather · exp(ε)`, gap is
//! Binomial over the demand with a higher probability in busier zones, and
//! every further city is a smooth warp of the first (neighbour-blended bases,
//! scaled, phase-shifted by an hour).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::dataset::{CityData, Dataset, ScenarioConfig, Source};
use super::ingest::{Counters, GeoGrid, Grid, WeatherTable, ZoneRoster, WEATHER_CONTINUOUS};
use super::time::{format_timestamp, TimeAxis};
use crate::error::{Error, Result};

pub const CATEGORIES: [&str; 3] = ["sunny", "cloudy", "rainy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub scenario: ScenarioConfig,
    pub seed: u64,
    /// Mean demand per slot of the quietest zone of the first city.
    pub base: f64,
    /// Ratio between the busiest and the quietest zone.
    pub spread: f64,
    /// Daily amplitude `a` in `[0, 1)`.
    pub amplitude: f64,
    pub weekend_factor: f64,
    pub rain_factor: f64,
    /// Standard deviation of the log-normal intensity noise.
    pub noise_sd: f64,
    /// Gap probability of the quietest and busiest zones.
    pub gap_low: f64,
    pub gap_high: f64,
    /// Add an i.i.d. Poisson field `noise` to the spatio-temporal features.
    pub noise_feature: bool,
    /// Per-city bounding boxes for trajectory scenarios.
    pub grids: Vec<GeoGrid>,
}

impl SynthSpec {
    /// Four zones, 20 days of 15-minute slots, two cities.
    pub fn synth(seed: u64) -> Self {
        Self {
            scenario: ScenarioConfig::synth(),
            seed,
            base: 200.0,
            spread: 4.0,
            amplitude: 0.8,
            weekend_factor: 0.85,
            rain_factor: 1.1,
            noise_sd: 0.02,
            gap_low: 0.05,
            gap_high: 0.35,
            noise_feature: false,
            grids: Vec::new(),
        }
    }

    /// Two 10×10 cities with GPS trajectories; about 12% of zone-slots have no demand.
    pub fn scenario2(seed: u64, days: usize) -> Self {
        let mut scenario = ScenarioConfig::scenario2();
        scenario.start = NaiveDate::from_ymd_opt(2016, 10, 1);
        scenario.days = Some(days);
        scenario.weather_categories = Some(CATEGORIES.iter().map(|s| s.to_string()).collect());
        let grid = |lat: f64, lon: f64| GeoGrid {
            min_lat: lat,
            min_lon: lon,
            max_lat: lat + 0.09,
            max_lon: lon + 0.1,
            rows: 10,
            cols: 10,
        };
        Self {
            scenario,
            seed,
            base: 1.2,
            spread: 8.0,
            amplitude: 0.6,
            weekend_factor: 0.85,
            rain_factor: 1.25,
            noise_sd: 0.2,
            gap_low: 0.05,
            gap_high: 0.35,
            noise_feature: false,
            grids: vec![grid(30.65, 104.04), grid(34.2, 108.92)],
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "scenario-synth" | "synth" => Ok(Self::synth(seed)),
            "scenario2" => Ok(Self::scenario2(seed, 7)),
            other => Err(Error::config(format!("no synthetic generator for preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.scenario.start.is_none() || self.scenario.days.is_none() || self.scenario.zones.is_none() {
            return Err(Error::config("synthetic scenarios need start, days and zones"));
        }
        if !(self.base > 0.0 && self.spread >= 1.0 && (0.0..1.0).contains(&self.amplitude) && self.noise_sd >= 0.0) {
            return Err(Error::config("synthetic intensity parameters out of range"));
        }
        if !(0.0 <= self.gap_low && self.gap_low <= self.gap_high && self.gap_high <= 1.0) {
            return Err(Error::config("gap probabilities must satisfy 0 ≤ low ≤ high ≤ 1"));
        }
        if self.scenario.source == Source::Trajectory {
            if self.grids.len() != self.scenario.cities.len() {
                return Err(Error::config("trajectory synthesis needs one grid per city"));
            }
            if self.grids.iter().any(|g| Some(g.zones()) != self.scenario.zones) {
                return Err(Error::config("grid cell count differs from the scenario zone count"));
            }
        }
        Ok(())
    }

    pub fn axis(&self) -> Result<TimeAxis> {
        TimeAxis::new(
            self.scenario.start.expect("validated"),
            self.scenario.days.expect("validated"),
            self.scenario.interval_minutes,
        )
    }
}

/// Generated counts before they are turned into events.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCity {
    pub name: String,
    pub zone_ids: Vec<String>,
    pub poi: Vec<f64>,
    /// Demand including unfulfilled requests.
    pub original_demand: Grid,
    pub gap: Grid,
    pub weather: WeatherTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synth {
    pub spec: SynthSpec,
    pub axis: TimeAxis,
    pub cities: Vec<SynthCity>,
    /// `[T × N]` i.i.d. noise field, present when requested.
    pub noise: Option<Vec<f64>>,
}

fn round2(v: f64) -> f64 {
    format!("{v:.2}").parse().unwrap()
}

/// Slot weather: a per-hour Markov chain over the categories plus smooth continuous readings.
fn weather(axis: &TimeAxis, rng: &mut ChaCha8Rng) -> (Vec<usize>, WeatherTable) {
    let per_hour = (60 / axis.interval_minutes).max(1) as usize;
    let stay = [0.9, 0.8, 0.75];
    let mut cat = 0usize;
    let mut cats = Vec::with_capacity(axis.len());
    let mut values = Vec::new();
    let width = CATEGORIES.len() + WEATHER_CONTINUOUS.len();
    let normal = Normal::new(0.0, 1.0).unwrap();
    for s in 0..axis.len() {
        if s % per_hour == 0 && s > 0 && rng.gen::<f64>() > stay[cat] {
            cat = (cat + rng.gen_range(1..CATEGORIES.len())) % CATEGORIES.len();
        }
        cats.push(cat);
        let h = axis.slot_of_day(s) as f64 * axis.interval_minutes as f64 / 60.0;
        let diurnal = (2.0 * PI * (h - 9.0) / 24.0).sin();
        let wet = if cat == 2 { 1.0 } else { 0.0 };
        let mut row = vec![0.0; width];
        row[cat] = 1.0;
        let cont = [
            12.0 + 6.0 * diurnal - 3.0 * wet + normal.sample(rng),
            80.0 - 30.0 * wet + 10.0 * normal.sample(rng),
            4.0 + 2.0 * diurnal + normal.sample(rng),
            55.0 + 30.0 * wet - 10.0 * diurnal + 3.0 * normal.sample(rng),
            [0.1, 0.6, 0.9][cat] + 0.05 * normal.sample(rng),
            3.0 + 2.0 * wet + normal.sample(rng).abs(),
            10.0 - 6.0 * wet + normal.sample(rng),
        ];
        for (j, v) in cont.into_iter().enumerate() {
            row[CATEGORIES.len() + j] = round2(v);
        }
        values.extend(row);
    }
    (
        cats,
        WeatherTable {
            categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
            values,
            width,
        },
    )
}

impl Synth {
    pub fn generate(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let axis = spec.axis()?;
        let n = spec.scenario.zones.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (cats, weather) = weather(&axis, &mut rng);

        // Zone bases: geometric ladder over a random rank order.
        let mut rank: Vec<usize> = (0..n).collect();
        rank.shuffle(&mut rng);
        let level = |r: usize| if n > 1 { r as f64 / (n - 1) as f64 } else { 0.0 };
        let base0: Vec<f64> = rank.iter().map(|&r| spec.base * spec.spread.powf(level(r))).collect();
        let gap_p: Vec<f64> = rank
            .iter()
            .map(|&r| spec.gap_low + (spec.gap_high - spec.gap_low) * level(r))
            .collect();
        let noise = Normal::new(0.0, spec.noise_sd.max(1e-12)).unwrap();

        let mut cities = Vec::new();
        for (ci, name) in spec.scenario.cities.iter().enumerate() {
            let (bases, phase) = if ci == 0 {
                (base0.clone(), 0.0)
            } else {
                let w = 0.8f64.powi(ci as i32);
                let b: Vec<f64> = (0..n).map(|z| w * (0.6 * base0[z] + 0.4 * base0[(z + ci) % n])).collect();
                (b, ci as f64)
            };
            let mut od = Grid::zeros(axis.len(), n);
            let mut gap = Grid::zeros(axis.len(), n);
            for s in 0..axis.len() {
                let h = axis.slot_of_day(s) as f64 * axis.interval_minutes as f64 / 60.0;
                let daily = 1.0 - spec.amplitude * (2.0 * PI * (h - 4.0 - phase) / 24.0).cos();
                let week = if axis.is_weekend(s) { spec.weekend_factor } else { 1.0 };
                let wet = if cats[s] == 2 { spec.rain_factor } else { 1.0 };
                for z in 0..n {
                    let eps = if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    let lambda = bases[z] * daily * week * wet * eps.exp();
                    let d = Poisson::new(lambda).map_err(|e| Error::config(e.to_string()))?.sample(&mut rng);
                    let g = if d > 0.0 {
                        Binomial::new(d as u64, gap_p[z])
                            .map_err(|e| Error::config(e.to_string()))?
                            .sample(&mut rng) as f64
                    } else {
                        0.0
                    };
                    *od.at_mut(s, z) = d;
                    *gap.at_mut(s, z) = g;
                }
            }
            let zone_ids = match spec.scenario.source {
                Source::Orders => (0..n).map(|_| format!("{:016x}", rng.gen::<u64>())).collect(),
                Source::Trajectory => (0..n).map(|z| z.to_string()).collect(),
            };
            let poi = bases
                .iter()
                .map(|&b| Poisson::new(5.0 + 10.0 * b / spec.base).unwrap().sample(&mut rng))
                .collect();
            cities.push(SynthCity {
                name: name.clone(),
                zone_ids,
                poi,
                original_demand: od,
                gap,
                weather: weather.clone(),
            });
        }
        let noise = spec.noise_feature.then(|| {
            let p = Poisson::new(spec.base).unwrap();
            (0..axis.len() * n).map(|_| p.sample(&mut rng)).collect()
        });
        Ok(Self {
            spec: spec.clone(),
            axis,
            cities,
            noise,
        })
    }

    /// Fraction of zone-slots without demand, over all cities.
    pub fn zero_fraction(&self) -> f64 {
        let cells: Vec<f64> = self
            .cities
            .iter()
            .flat_map(|c| c.original_demand.values.iter().copied())
            .collect();
        cells.iter().filter(|&&v| v == 0.0).count() as f64 / cells.len() as f64
    }

    /// The dataset that ingesting [`Synth::write_csvs`] output yields, built without touching disk.
    pub fn dataset(&self) -> Result<Dataset> {
        if self.spec.scenario.source != Source::Orders {
            return Err(Error::config(
                "in-memory datasets need order data; write the trajectory CSVs and preprocess them",
            ));
        }
        let cities = self
            .cities
            .iter()
            .map(|c| {
                let mut d = c.original_demand.clone();
                for (v, g) in d.values.iter_mut().zip(&c.gap.values) {
                    *v -= g;
                }
                CityData {
                    name: c.name.clone(),
                    zones: ZoneRoster {
                        ids: c.zone_ids.clone(),
                        poi: c.poi.clone(),
                    },
                    fields: vec![
                        ("od".to_string(), c.original_demand.clone()),
                        ("demand".to_string(), d),
                        ("gap".to_string(), c.gap.clone()),
                    ],
                    weather: c.weather.clone(),
                }
            })
            .collect();
        let mut scenario = self.spec.scenario.clone();
        if self.noise.is_some() && !scenario.features.iter().any(|f| f == "noise") {
            scenario.features.push("noise".into());
        }
        let mut ds = Dataset::assemble(&scenario, self.axis, cities, Counters::new())?;
        if let Some(noise) = &self.noise {
            ds.push_field("noise", noise.iter().map(|&v| v as f32).collect(), true)?;
        }
        Ok(ds)
    }

    /// One subdirectory per city holding `poi.csv`, `weather.csv` and the event file.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed_ca5e);
        let slot_secs = self.axis.interval_minutes as i64 * 60;
        for (ci, city) in self.cities.iter().enumerate() {
            let cdir = dir.join(&city.name);
            fs::create_dir_all(&cdir)?;
            let mut poi = String::from("zone_id,poi_count\n");
            for (id, p) in city.zone_ids.iter().zip(&city.poi) {
                writeln!(poi, "{id},{p}").unwrap();
            }
            fs::write(cdir.join("poi.csv"), poi)?;

            let mut w = String::from("ts,category");
            for c in WEATHER_CONTINUOUS {
                write!(w, ",{c}").unwrap();
            }
            w.push('\n');
            let width = city.weather.width;
            let k = city.weather.categories.len();
            for s in 0..self.axis.len() {
                let row = &city.weather.values[s * width..(s + 1) * width];
                let cat = row[..k].iter().position(|&v| v == 1.0).unwrap();
                write!(w, "{},{}", format_timestamp(self.axis.slot_start(s)), city.weather.categories[cat]).unwrap();
                for v in &row[k..] {
                    write!(w, ",{v:.2}").unwrap();
                }
                w.push('\n');
            }
            fs::write(cdir.join("weather.csv"), w)?;

            match self.spec.scenario.source {
                Source::Orders => {
                    let mut out = String::from("order_id,zone_id,ts,driver_id\n");
                    let mut id = 0u64;
                    for s in 0..self.axis.len() {
                        let t0 = self.axis.slot_start(s);
                        for z in 0..city.zone_ids.len() {
                            let od = city.original_demand.at(s, z) as u64;
                            let gap = city.gap.at(s, z) as u64;
                            for j in 0..od {
                                id += 1;
                                let ts = t0 + Duration::seconds(rng.gen_range(0..slot_secs));
                                let driver = if j < gap {
                                    "null".to_string()
                                } else {
                                    format!("d{}", rng.gen_range(0..5000))
                                };
                                writeln!(out, "o{id},{},{},{driver}", city.zone_ids[z], format_timestamp(ts)).unwrap();
                            }
                        }
                    }
                    fs::write(cdir.join("orders.csv"), out)?;
                }
                Source::Trajectory => {
                    let grid = self.spec.grids[ci];
                    fs::write(cdir.join("grid.json"), serde_json::to_string_pretty(&grid)? + "\n")?;
                    let mut out = String::from("trip_id,ts,lat,lon\n");
                    let mut id = 0u64;
                    for s in 0..self.axis.len() {
                        let t0 = self.axis.slot_start(s);
                        for z in 0..city.zone_ids.len() {
                            let ((clat, clon), (hlat, hlon)) = grid.cell(z);
                            for _ in 0..city.original_demand.at(s, z) as u64 {
                                id += 1;
                                let mut lat = clat + rng.gen_range(-0.9..0.9) * hlat;
                                let mut lon = clon + rng.gen_range(-0.9..0.9) * hlon;
                                let mut ts = t0 + Duration::seconds(rng.gen_range(0..slot_secs));
                                let heading = rng.gen_range(0.0..2.0 * PI);
                                let kmh: f64 = rng.gen_range(15.0..45.0);
                                for p in 0..rng.gen_range(2..5) {
                                    if p > 0 {
                                        let dt = rng.gen_range(60..120);
                                        let km = kmh * dt as f64 / 3600.0;
                                        lat += km * heading.cos() / 111.2;
                                        lon += km * heading.sin() / (111.2 * lat.to_radians().cos());
                                        ts += Duration::seconds(dt);
                                    }
                                    writeln!(out, "t{id},{},{lat:.6},{lon:.6}", format_timestamp(ts)).unwrap();
                                }
                            }
                        }
                    }
                    fs::write(cdir.join("trajectory.csv"), out)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        let mut s = SynthSpec::synth(3);
        s.scenario.days = Some(3);
        s
    }

    #[test]
    fn gap_bounded_by_demand() {
        let g = Synth::generate(&small()).unwrap();
        for c in &g.cities {
            assert!(c.gap.values.iter().zip(&c.original_demand.values).all(|(g, d)| 0.0 <= *g && g <= d));
        }
        assert_eq!(g, Synth::generate(&small()).unwrap());
        assert_ne!(g.cities[0].original_demand, Synth::generate(&SynthSpec { seed: 4, ..small() }).unwrap().cities[0].original_demand);
    }

    #[test]
    fn in_memory_matches_ingest() {
        let g = Synth::generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.write_csvs(dir.path()).unwrap();
        let ingested = Dataset::preprocess(dir.path(), &g.spec.scenario).unwrap();
        let direct = g.dataset().unwrap();
        assert_eq!(ingested.fields, direct.fields);
        assert_eq!(ingested.weather, direct.weather);
        assert_eq!(ingested.poi, direct.poi);
        assert_eq!(ingested.manifest.fields, direct.manifest.fields);
    }

    #[test]
    fn scenario2_zero_share() {
        let g = Synth::generate(&SynthSpec::scenario2(1, 14)).unwrap();
        let z = g.zero_fraction();
        assert!((0.10..0.14).contains(&z), "zero-demand share {z}");
    }
}
