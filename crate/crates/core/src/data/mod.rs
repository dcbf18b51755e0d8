//! Time partitioning, CSV ingestion, context encodings, datasets and synthetic scenarios.

mod context;
mod dataset;
mod ingest;
mod synth;
mod time;

pub use context::{encode_contexts, repeat_time, repeat_zones, SlotContext};
pub use dataset::{
    CityData, ColumnKind, Dataset, DatasetManifest, FieldInfo, MinMax, PoiChannel, SampleSet, ScenarioConfig, Source,
    Split, SplitSpec, TaskSpec, WeatherColumn,
};
pub use ingest::{
    aggregate_orders, aggregate_trajectories, check_order_invariants, encode_weather, haversine_km, Counters, GeoGrid,
    Grid, OrderFields, TrajectoryFields, WeatherTable, ZoneRoster, WEATHER_CONTINUOUS,
};
pub use synth::{Synth, SynthCity, SynthSpec, CATEGORIES};
pub use time::{format_timestamp, parse_timestamp, TimeAxis};
