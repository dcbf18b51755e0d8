//! CSV ingestion and aggregation onto the zone × slot grid.
//!
//! Schemas (header row required, extra columns ignored):
//! - `orders.csv`: `order_id,zone_id,ts,driver_id` (empty or `null` driver = unfulfilled)
//! - `trajectory.csv`: `trip_id,ts,lat,lon`
//! - `weather.csv`: `ts,category,temp,pm,dew,humidity,cloud,wind,visibility`
//! - `poi.csv`: `zone_id,poi_count` (row order defines the zone index)

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::time::{parse_timestamp, TimeAxis};
use crate::error::{Error, Result};

pub const WEATHER_CONTINUOUS: [&str; 7] = ["temp", "pm", "dew", "humidity", "cloud", "wind", "visibility"];

/// Named counts of dropped, filled or otherwise notable input rows.
pub type Counters = BTreeMap<String, u64>;

fn bump(c: &mut Counters, key: &str, by: u64) {
    *c.entry(key.to_string()).or_insert(0) += by;
}

fn ingest_err(file: &Path, line: Option<usize>, message: impl Into<String>) -> Error {
    Error::Ingest {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Rows of a CSV file projected onto `columns`, with 1-based line numbers.
pub(crate) struct Table {
    pub path: PathBuf,
    pub rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    pub fn read(path: &Path, columns: &[&str]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| ingest_err(path, None, e.to_string()))?;
        let header = rdr
            .headers()
            .map_err(|e| ingest_err(path, Some(1), e.to_string()))?
            .clone();
        let idx = columns
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h.eq_ignore_ascii_case(c))
                    .ok_or_else(|| ingest_err(path, Some(1), format!("missing column `{c}` (have {:?})", header.iter().collect::<Vec<_>>())))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| ingest_err(path, Some(line), e.to_string()))?;
            if rec.len() != header.len() {
                return Err(ingest_err(
                    path,
                    Some(line),
                    format!("expected {} columns, found {}", header.len(), rec.len()),
                ));
            }
            rows.push((line, idx.iter().map(|&j| rec[j].to_string()).collect()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            rows,
        })
    }

    pub fn err(&self, line: usize, message: impl Into<String>) -> Error {
        ingest_err(&self.path, Some(line), message)
    }

    pub fn number(&self, line: usize, what: &str, s: &str) -> Result<f64> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(line, format!("{what}: `{s}` is not a finite number")))
    }

    pub fn timestamp(&self, line: usize, s: &str) -> Result<chrono::NaiveDateTime> {
        parse_timestamp(s).ok_or_else(|| self.err(line, format!("unparseable timestamp `{s}`")))
    }
}

/// Zone roster from `poi.csv`: opaque ids in file order plus POI counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneRoster {
    pub ids: Vec<String>,
    pub poi: Vec<f64>,
}

impl ZoneRoster {
    pub fn read(path: &Path) -> Result<Self> {
        let t = Table::read(path, &["zone_id", "poi_count"])?;
        let mut ids = Vec::new();
        let mut poi = Vec::new();
        for (line, r) in &t.rows {
            if ids.contains(&r[0]) {
                return Err(t.err(*line, format!("duplicate zone id `{}`", r[0])));
            }
            let v = t.number(*line, "poi_count", &r[1])?;
            if v < 0.0 {
                return Err(t.err(*line, "poi_count must be non-negative"));
            }
            ids.push(r[0].clone());
            poi.push(v);
        }
        if ids.is_empty() {
            return Err(ingest_err(path, None, "no zones"));
        }
        Ok(Self { ids, poi })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

/// Slot-major `[T × N]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub slots: usize,
    pub zones: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn zeros(slots: usize, zones: usize) -> Self {
        Self {
            slots,
            zones,
            values: vec![0.0; slots * zones],
        }
    }

    pub fn at(&self, t: usize, z: usize) -> f64 {
        self.values[t * self.zones + z]
    }

    pub fn at_mut(&mut self, t: usize, z: usize) -> &mut f64 {
        &mut self.values[t * self.zones + z]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderFields {
    pub original_demand: Grid,
    pub demand: Grid,
    pub gap: Grid,
}

/// Count orders per zone-slot: all orders, fulfilled ones, and the difference.
pub fn aggregate_orders(path: &Path, axis: &TimeAxis, zones: &ZoneRoster, counters: &mut Counters) -> Result<OrderFields> {
    let t = Table::read(path, &["order_id", "zone_id", "ts", "driver_id"])?;
    let index = zones.index();
    let (n, len) = (zones.len(), axis.len());
    let mut od = Grid::zeros(len, n);
    let mut d = Grid::zeros(len, n);
    for (line, r) in &t.rows {
        let z = *index
            .get(r[1].as_str())
            .ok_or_else(|| t.err(*line, format!("unknown zone id `{}`", r[1])))?;
        let ts = t.timestamp(*line, &r[2])?;
        let Some(slot) = axis.slot_of(ts) else {
            bump(counters, "orders_out_of_span", 1);
            continue;
        };
        bump(counters, "orders", 1);
        *od.at_mut(slot, z) += 1.0;
        let driver = r[3].trim();
        if !(driver.is_empty() || driver.eq_ignore_ascii_case("null")) {
            *d.at_mut(slot, z) += 1.0;
        }
    }
    let mut gap = Grid::zeros(len, n);
    for i in 0..gap.values.len() {
        gap.values[i] = od.values[i] - d.values[i];
    }
    let fields = OrderFields {
        original_demand: od,
        demand: d,
        gap,
    };
    check_order_invariants(&fields).map_err(|m| ingest_err(path, None, m))?;
    Ok(fields)
}

/// `0 ≤ D ≤ OD` and `0 ≤ G ≤ OD` on every cell.
pub fn check_order_invariants(f: &OrderFields) -> std::result::Result<(), String> {
    for i in 0..f.original_demand.values.len() {
        let (od, d, g) = (f.original_demand.values[i], f.demand.values[i], f.gap.values[i]);
        if !(0.0 <= d && d <= od && 0.0 <= g && g <= od) {
            return Err(format!("cell {i}: OD={od} D={d} G={g} violates 0 ≤ D,G ≤ OD"));
        }
    }
    Ok(())
}

/// Regular lat/lon grid; zone `r·cols + c` covers row `r` (south to north) and column `c` (west to east).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoGrid {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GeoGrid {
    pub fn zones(&self) -> usize {
        self.rows * self.cols
    }

    pub fn zone_of(&self, lat: f64, lon: f64) -> Option<usize> {
        if !(lat >= self.min_lat && lat < self.max_lat && lon >= self.min_lon && lon < self.max_lon) {
            return None;
        }
        let r = ((lat - self.min_lat) / (self.max_lat - self.min_lat) * self.rows as f64) as usize;
        let c = ((lon - self.min_lon) / (self.max_lon - self.min_lon) * self.cols as f64) as usize;
        Some(r.min(self.rows - 1) * self.cols + c.min(self.cols - 1))
    }

    /// Centre of a zone and its half extents in degrees.
    pub fn cell(&self, zone: usize) -> ((f64, f64), (f64, f64)) {
        let (r, c) = (zone / self.cols, zone % self.cols);
        let dlat = (self.max_lat - self.min_lat) / self.rows as f64;
        let dlon = (self.max_lon - self.min_lon) / self.cols as f64;
        (
            (self.min_lat + (r as f64 + 0.5) * dlat, self.min_lon + (c as f64 + 0.5) * dlon),
            (dlat / 2.0, dlon / 2.0),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let g: GeoGrid = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| ingest_err(path, None, e.to_string()))?;
        if g.rows == 0 || g.cols == 0 || !(g.max_lat > g.min_lat) || !(g.max_lon > g.min_lon) {
            return Err(ingest_err(path, None, "degenerate grid"));
        }
        Ok(g)
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    const R: f64 = 6371.0088;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * R * a.sqrt().asin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFields {
    /// Distinct trips with a point in the cell.
    pub accessibility: Grid,
    /// Mean per-trip speed (km/h) over segments starting in the cell; 0 when unknown.
    pub speed: Grid,
    /// 1 where no speed could be measured.
    pub speed_missing: Grid,
    /// Trips starting in the cell.
    pub demand: Grid,
}

/// Accessibility, speed and demand from GPS trajectories.
///
/// Each segment between consecutive in-grid points of a trip is attributed to
/// the zone and slot of its first point.
pub fn aggregate_trajectories(path: &Path, axis: &TimeAxis, grid: &GeoGrid, counters: &mut Counters) -> Result<TrajectoryFields> {
    let t = Table::read(path, &["trip_id", "ts", "lat", "lon"])?;
    let (n, len) = (grid.zones(), axis.len());
    // Points per trip in file order: (line, seconds, lat, lon).
    let mut trips: BTreeMap<&str, Vec<(usize, i64, f64, f64)>> = BTreeMap::new();
    for (line, r) in &t.rows {
        let ts = t.timestamp(*line, &r[1])?;
        let lat = t.number(*line, "lat", &r[2])?;
        let lon = t.number(*line, "lon", &r[3])?;
        trips
            .entry(r[0].as_str())
            .or_default()
            .push((*line, ts.and_utc().timestamp(), lat, lon));
    }
    let origin = axis.start.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
    let slot_secs = axis.interval_minutes as i64 * 60;
    let locate = |secs: i64, lat: f64, lon: f64| -> (Option<usize>, Option<usize>) {
        let slot = (secs >= origin)
            .then(|| ((secs - origin) / slot_secs) as usize)
            .filter(|&s| s < len);
        (grid.zone_of(lat, lon), slot)
    };

    let mut access = Grid::zeros(len, n);
    let mut demand = Grid::zeros(len, n);
    let mut speed_sum = Grid::zeros(len, n);
    let mut speed_count = Grid::zeros(len, n);
    for points in trips.values() {
        for w in points.windows(2) {
            if w[1].1 < w[0].1 {
                return Err(t.err(w[1].0, "timestamps decrease within a trip"));
            }
        }
        bump(counters, "trajectory_points", points.len() as u64);
        let mut kept = Vec::with_capacity(points.len());
        for &(_, secs, lat, lon) in points {
            match locate(secs, lat, lon) {
                (Some(z), Some(s)) => kept.push((z, s, secs, lat, lon)),
                (None, _) => bump(counters, "points_out_of_grid", 1),
                (_, None) => bump(counters, "points_out_of_span", 1),
            }
        }
        let Some(&(z0, s0, ..)) = kept.first() else {
            continue;
        };
        bump(counters, "trips", 1);
        *demand.at_mut(s0, z0) += 1.0;
        let mut visited: Vec<(usize, usize)> = kept.iter().map(|p| (p.1, p.0)).collect();
        visited.sort_unstable();
        visited.dedup();
        for (s, z) in visited {
            *access.at_mut(s, z) += 1.0;
        }
        // Per (slot, zone): distance and time of this trip's segments.
        let mut per_cell: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        for w in kept.windows(2) {
            let (a, b) = (w[0], w[1]);
            let e = per_cell.entry((a.1, a.0)).or_insert((0.0, 0.0));
            e.0 += haversine_km(a.3, a.4, b.3, b.4);
            e.1 += (b.2 - a.2) as f64 / 3600.0;
        }
        for ((s, z), (km, hours)) in per_cell {
            if hours > 0.0 {
                *speed_sum.at_mut(s, z) += km / hours;
                *speed_count.at_mut(s, z) += 1.0;
            }
        }
    }
    let mut speed = Grid::zeros(len, n);
    let mut missing = Grid::zeros(len, n);
    for i in 0..speed.values.len() {
        if speed_count.values[i] > 0.0 {
            speed.values[i] = speed_sum.values[i] / speed_count.values[i];
        } else {
            missing.values[i] = 1.0;
        }
    }
    Ok(TrajectoryFields {
        accessibility: access,
        speed,
        speed_missing: missing,
        demand,
    })
}

/// Per-slot weather: one-hot categories followed by the raw continuous columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherTable {
    pub categories: Vec<String>,
    /// `[T × (categories + continuous)]`
    pub values: Vec<f64>,
    pub width: usize,
}

impl WeatherTable {
    pub fn column_names(&self) -> Vec<String> {
        self.categories
            .iter()
            .map(|c| format!("wc_{c}"))
            .chain(WEATHER_CONTINUOUS.iter().map(|c| c.to_string()))
            .collect()
    }
}

/// One-hot weather categories plus raw continuous columns, one row per slot.
///
/// `declared` fixes the category order; otherwise the sorted distinct
/// categories of the file are used. Rows with an undeclared category get an
/// all-zero one-hot part. Missing slots copy the previous slot (the first
/// observed row for leading gaps); both cases are counted.
pub fn encode_weather(path: &Path, axis: &TimeAxis, declared: Option<&[String]>, counters: &mut Counters) -> Result<WeatherTable> {
    let mut cols = vec!["ts", "category"];
    cols.extend(WEATHER_CONTINUOUS);
    let t = Table::read(path, &cols)?;
    let categories: Vec<String> = match declared {
        Some(d) => d.to_vec(),
        None => {
            let mut c: Vec<String> = t.rows.iter().map(|(_, r)| r[1].to_ascii_lowercase()).collect();
            c.sort();
            c.dedup();
            c
        }
    };
    let width = categories.len() + WEATHER_CONTINUOUS.len();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; axis.len()];
    for (line, r) in &t.rows {
        let ts = t.timestamp(*line, &r[0])?;
        let Some(slot) = axis.slot_of(ts) else {
            bump(counters, "weather_out_of_span", 1);
            continue;
        };
        if rows[slot].is_some() {
            bump(counters, "weather_duplicates", 1);
            continue;
        }
        let mut v = vec![0.0; width];
        match categories.iter().position(|c| c.eq_ignore_ascii_case(&r[1])) {
            Some(i) => v[i] = 1.0,
            None => {
                bump(counters, "weather_unseen_category", 1);
                eprintln!("warning: {}:{line}: unseen weather category `{}`", path.display(), r[1]);
            }
        }
        for (j, name) in WEATHER_CONTINUOUS.iter().enumerate() {
            v[categories.len() + j] = t.number(*line, name, &r[2 + j])?;
        }
        rows[slot] = Some(v);
    }
    let first = rows
        .iter()
        .flatten()
        .next()
        .cloned()
        .ok_or_else(|| ingest_err(path, None, "no weather rows inside the time span"))?;
    let mut prev = first;
    let mut values = Vec::with_capacity(axis.len() * width);
    let mut filled = 0;
    for r in rows {
        match r {
            Some(v) => prev = v,
            None => filled += 1,
        }
        values.extend_from_slice(&prev);
    }
    bump(counters, "weather_filled", filled);
    Ok(WeatherTable {
        categories,
        values,
        width,
    })
}
