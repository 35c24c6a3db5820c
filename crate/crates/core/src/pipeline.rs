//! Pipeline configuration and the four end-to-end pipelines.
//!
//! A pipeline reads its sources from the snapshot cache only and returns the
//! resources, auxiliary reports and audit events of one package; writing,
//! validating and stamping happen in [`crate::cli`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::capacity::{self, CapacityObservation};
use crate::datapackage::{Cell, ExtraFile, FieldSchema, FieldType, PackageMeta, Resource, ResourceData, SourceRef};
use crate::events::{Event, EventLog};
use crate::markers::{MarkerFlag, MarkerSet};
use crate::par::Exec;
use crate::plants::{self, CoordPrecision, MatchKey, MatchPolicy, PlantRecord, Rule};
use crate::sources::{self, Cache, CacheEntry, RawTable, SourceDescriptor};
use crate::taxonomy::{Taxonomy, UnmappedPolicy, VocabMapping};
use crate::timeseries::{self, LocalStampColumn, Resolution, TimeSeries};
use crate::weather::{self, BoundingBox, GridField, GridSpec};

pub const UNMAPPED_TERM: &str = "gridforge:unmapped_term";
pub const INCOMPLETE_SUM: &str = "gridforge:incomplete";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    /// Bad configuration or environment: exit code 2.
    #[error("configuration: {0}")]
    Config(String),
    /// Data problem in a named stage: exit code 1.
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 1,
        }
    }
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: e.to_string() }
}

fn config<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Config(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Timeseries,
    Plants,
    Capacity,
    Weather,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    package_name: String,
    #[serde(default)]
    title: Option<String>,
    version: String,
    sources: Vec<PathBuf>,
    pipeline: PipelineKind,
    #[serde(default)]
    options: Value,
    output_dir: PathBuf,
    #[serde(default)]
    contributors: Vec<String>,
    #[serde(default)]
    created: Option<DateTime<Utc>>,
}

fn default_max_gap() -> u32 {
    timeseries::DEFAULT_MAX_GAP_MINUTES
}

fn default_timestamp_column() -> String {
    "timestamp".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeseriesOptions {
    #[serde(default = "default_max_gap")]
    pub max_gap_minutes: u32,
    /// Canonical name of the local timestamp column.
    #[serde(default = "default_timestamp_column")]
    pub timestamp_column: String,
}

impl Default for TimeseriesOptions {
    fn default() -> Self {
        TimeseriesOptions { max_gap_minutes: default_max_gap(), timestamp_column: default_timestamp_column() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantRole {
    Primary,
    Secondary,
    Renewable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DailyCapacityOptions {
    pub groupings: Vec<String>,
    pub first_day: NaiveDate,
    pub last_day: NaiveDate,
}

fn default_tolerance() -> f64 {
    MatchPolicy::default().tolerance
}

fn default_keys() -> Vec<MatchKey> {
    MatchPolicy::default().keys
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantsOptions {
    /// Source id to role. Sources not listed are rejected.
    pub roles: BTreeMap<String, PlantRole>,
    #[serde(default = "default_keys")]
    pub match_keys: Vec<MatchKey>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Route unmapped energy-source terms to `other_or_unspecified`
    /// (marked) instead of failing.
    #[serde(default)]
    pub route_unmapped: bool,
    #[serde(default)]
    pub rules: Option<PathBuf>,
    #[serde(default)]
    pub daily_capacity: Option<DailyCapacityOptions>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityOptions {
    /// Multiplier per source id that converts its values to GW (default 1).
    #[serde(default)]
    pub unit_factors: BTreeMap<String, f64>,
    #[serde(default)]
    pub route_unmapped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherOptions {
    #[serde(default)]
    pub bbox: Option<BoundingBox>,
    #[serde(default = "yes")]
    pub derive_wind_speed: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineOptions {
    Timeseries(TimeseriesOptions),
    Plants(PlantsOptions),
    Capacity(CapacityOptions),
    Weather(WeatherOptions),
}

/// Options shared by every pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommonOptions {
    #[serde(default)]
    taxonomy: Option<PathBuf>,
    /// Extra vocabulary mapping files, by path.
    #[serde(default)]
    mappings: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub package_name: String,
    pub title: String,
    pub version: String,
    /// Descriptor paths, resolved against the config file's directory.
    pub sources: Vec<PathBuf>,
    pub options: PipelineOptions,
    pub output_dir: PathBuf,
    pub contributors: Vec<String>,
    pub created: Option<DateTime<Utc>>,
    pub taxonomy: Option<PathBuf>,
    pub mappings: Vec<PathBuf>,
}

impl PipelineConfig {
    pub fn kind(&self) -> PipelineKind {
        match self.options {
            PipelineOptions::Timeseries(_) => PipelineKind::Timeseries,
            PipelineOptions::Plants(_) => PipelineKind::Plants,
            PipelineOptions::Capacity(_) => PipelineKind::Capacity,
            PipelineOptions::Weather(_) => PipelineKind::Weather,
        }
    }

    pub fn registry_path(&self) -> PathBuf {
        self.output_dir.join("versions.json")
    }

    pub fn package_dir(&self) -> PathBuf {
        self.output_dir.join(&self.package_name).join(&self.version)
    }
}

fn is_safe_name(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Split the generic `options` object into shared and pipeline-specific
/// parts, each parsed strictly.
fn split_options(kind: PipelineKind, options: Value) -> Result<(CommonOptions, PipelineOptions), PipelineError> {
    let mut map = match options {
        Value::Null => serde_json::Map::new(),
        Value::Object(m) => m,
        _ => return Err(PipelineError::Config("options must be an object".into())),
    };
    let mut common = serde_json::Map::new();
    for key in ["taxonomy", "mappings"] {
        if let Some(v) = map.remove(key) {
            common.insert(key.into(), v);
        }
    }
    let common: CommonOptions = serde_json::from_value(Value::Object(common)).map_err(config)?;
    let rest = Value::Object(map);
    let specific = match kind {
        PipelineKind::Timeseries => PipelineOptions::Timeseries(serde_json::from_value(rest).map_err(config)?),
        PipelineKind::Plants => PipelineOptions::Plants(serde_json::from_value(rest).map_err(config)?),
        PipelineKind::Capacity => PipelineOptions::Capacity(serde_json::from_value(rest).map_err(config)?),
        PipelineKind::Weather => PipelineOptions::Weather(serde_json::from_value(rest).map_err(config)?),
    };
    Ok((common, specific))
}

pub fn parse_config(text: &str, base: &Path) -> Result<PipelineConfig, PipelineError> {
    let raw: RawConfig = serde_json::from_str(text).map_err(config)?;
    if !is_safe_name(&raw.package_name) {
        return Err(PipelineError::Config(format!("package_name {:?} must be a plain file name", raw.package_name)));
    }
    if !is_safe_name(&raw.version) {
        return Err(PipelineError::Config(format!("version {:?} must be a plain file name", raw.version)));
    }
    if raw.sources.is_empty() {
        return Err(PipelineError::Config("at least one source is required".into()));
    }
    let (common, options) = split_options(raw.pipeline, raw.options)?;
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut options = options;
    match &mut options {
        PipelineOptions::Timeseries(o) => {
            if o.max_gap_minutes % 15 != 0 {
                return Err(PipelineError::Config(format!("max_gap_minutes {} is not a multiple of 15", o.max_gap_minutes)));
            }
        }
        PipelineOptions::Plants(o) => {
            MatchPolicy { keys: o.match_keys.clone(), tolerance: o.tolerance }.validate().map_err(config)?;
            o.rules = o.rules.as_deref().map(resolve);
            if let Some(d) = &o.daily_capacity {
                if d.last_day < d.first_day {
                    return Err(PipelineError::Config("daily_capacity.last_day precedes first_day".into()));
                }
            }
        }
        PipelineOptions::Capacity(o) => {
            if let Some((id, f)) = o.unit_factors.iter().find(|(_, f)| !(f.is_finite() && **f > 0.0)) {
                return Err(PipelineError::Config(format!("unit factor {f} for {id} must be positive")));
            }
        }
        PipelineOptions::Weather(o) => {
            if let Some(b) = &o.bbox {
                b.validate().map_err(config)?;
            }
        }
    }
    let config = PipelineConfig {
        title: raw.title.unwrap_or_else(|| raw.package_name.clone()),
        package_name: raw.package_name,
        version: raw.version,
        sources: raw.sources.iter().map(|p| resolve(p)).collect(),
        options,
        output_dir: resolve(&raw.output_dir),
        contributors: raw.contributors,
        created: raw.created,
        taxonomy: common.taxonomy.as_deref().map(resolve),
        mappings: common.mappings.iter().map(|p| resolve(p)).collect(),
    };
    for p in config.sources.iter().chain(&config.taxonomy).chain(&config.mappings) {
        if !p.is_file() {
            return Err(PipelineError::Config(format!("referenced file {} does not exist", p.display())));
        }
    }
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base).map_err(|e| match e {
        PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Everything a pipeline produces for one package.
#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub meta: PackageMeta,
    pub resources: Vec<ResourceData>,
    pub extras: Vec<ExtraFile>,
    pub events: EventLog,
}

struct Input {
    desc: SourceDescriptor,
    entry: CacheEntry,
    bytes: Vec<u8>,
}

fn load_inputs(cfg: &PipelineConfig, cache: &Cache) -> Result<Vec<Input>, PipelineError> {
    let descs = sources::load_descriptors(&cfg.sources).map_err(config)?;
    descs
        .into_iter()
        .map(|desc| {
            let entry = cache
                .latest(&desc.id)
                .map_err(config)?
                .ok_or_else(|| PipelineError::Config(format!("source {:?} is not in the cache; run ingest first", desc.id)))?;
            let bytes = cache.read(&entry).map_err(config)?;
            Ok(Input { desc, entry, bytes })
        })
        .collect()
}

fn load_taxonomy(cfg: &PipelineConfig) -> Result<(Taxonomy, BTreeMap<String, VocabMapping>), PipelineError> {
    let t = match &cfg.taxonomy {
        Some(p) => Taxonomy::load(p).map_err(config)?,
        None => Taxonomy::builtin(),
    };
    let mut mappings = crate::taxonomy::builtin_mappings(&t).map_err(config)?;
    for p in &cfg.mappings {
        let m = VocabMapping::load(p, &t).map_err(config)?;
        mappings.insert(m.id.clone(), m);
    }
    Ok((t, mappings))
}

fn parse_input(input: &Input) -> Result<RawTable, PipelineError> {
    sources::parse_table(&input.bytes, &input.desc.dialect, &input.desc.column_map, &input.desc.id)
        .map_err(|e| PipelineError::Stage { stage: "sources", message: format!("{}: {e}", input.desc.id) })
}

/// Run the configured pipeline against the cache.
pub fn run(cfg: &PipelineConfig, cache: &Cache, exec: Exec) -> Result<BuildOutput, PipelineError> {
    let inputs = load_inputs(cfg, cache)?;
    let created = cfg.created.or_else(|| inputs.iter().map(|i| i.entry.retrieved_at).max()).expect("at least one source");
    let meta = PackageMeta {
        name: cfg.package_name.clone(),
        title: cfg.title.clone(),
        version: cfg.version.clone(),
        created,
        sources: inputs.iter().map(|i| SourceRef { title: i.desc.id.clone(), path: i.desc.origin.clone() }).collect(),
        contributors: cfg.contributors.clone(),
    };
    let mut events = EventLog::new();
    for i in &inputs {
        events.push(Event::new("sources", "snapshot_used").with("source", &i.desc.id).with("content_hash", &i.entry.content_hash));
    }
    let (resources, extras) = match &cfg.options {
        PipelineOptions::Timeseries(o) => (timeseries_pipeline(&inputs, o, exec, &mut events)?, Vec::new()),
        PipelineOptions::Plants(o) => plants_pipeline(cfg, &inputs, o, &mut events)?,
        PipelineOptions::Capacity(o) => (capacity_pipeline(cfg, &inputs, o, exec, &mut events)?, Vec::new()),
        PipelineOptions::Weather(o) => (weather_pipeline(&inputs, o, exec, &mut events)?, Vec::new()),
    };
    Ok(BuildOutput { meta, resources, extras, events })
}

fn number(cell: Option<&str>, desc: &SourceDescriptor, row: usize, column: &str) -> Result<Option<f64>, PipelineError> {
    sources::parse_number(cell, &desc.dialect)
        .map_err(|e| PipelineError::Stage { stage: "sources", message: format!("{} row {} column {column}: {e}", desc.id, row + 1) })
}

// ---------------------------------------------------------------- timeseries

fn series_from_input(input: &Input, ts_column: &str) -> Result<Vec<TimeSeries>, PipelineError> {
    let table = parse_input(input)?;
    let desc = &input.desc;
    let ts_idx = table
        .column_index(ts_column)
        .ok_or_else(|| PipelineError::Config(format!("{}: no {ts_column:?} column in column_map", desc.id)))?;
    let stamps = table
        .rows
        .iter()
        .map(|r| timeseries::parse_local_stamp(r[ts_idx].as_deref().unwrap_or("")))
        .collect::<Result<Vec<_>, _>>()
        .map_err(stage("timeseries"))?;
    let zone = desc.tz().map_err(config)?;
    let instants = timeseries::to_utc(&LocalStampColumn::new(zone, stamps))
        .map_err(|e| PipelineError::Stage { stage: "timeseries", message: format!("{}: {e}", desc.id) })?;
    let resolution = timeseries::infer_resolution(&instants).ok_or_else(|| PipelineError::Stage {
        stage: "timeseries",
        message: format!("{}: cannot infer a 15, 30 or 60 minute resolution", desc.id),
    })?;
    let mut out = Vec::new();
    for (c, name) in table.columns.iter().enumerate() {
        if c == ts_idx {
            continue;
        }
        let obs = table
            .rows
            .iter()
            .enumerate()
            .map(|(r, row)| Ok((instants[r], number(row[c].as_deref(), desc, r, name)?)))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let ts = timeseries::from_observations(name, resolution, &obs).map_err(stage("timeseries"))?;
        out.push(pad_to_hour(ts));
    }
    Ok(out)
}

/// Prepend NA points so a sub-hourly series starts on a full hour.
fn pad_to_hour(mut ts: TimeSeries) -> TimeSeries {
    let step = ts.resolution.seconds();
    let lead = (ts.start.timestamp().rem_euclid(3600) / step) as usize;
    if lead > 0 {
        ts.start -= chrono::Duration::seconds(lead as i64 * step);
        ts.values.splice(0..0, std::iter::repeat_n(None, lead));
        ts.markers.splice(0..0, std::iter::repeat_n(MarkerSet::new(), lead));
    }
    ts
}

fn count_flag(ts: &TimeSeries, flag: &MarkerFlag) -> usize {
    ts.markers.iter().filter(|m| m.contains(flag)).count()
}

fn timeseries_pipeline(
    inputs: &[Input],
    o: &TimeseriesOptions,
    exec: Exec,
    events: &mut EventLog,
) -> Result<Vec<ResourceData>, PipelineError> {
    let mut series = Vec::new();
    for input in inputs {
        series.extend(series_from_input(input, &o.timestamp_column)?);
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = series.iter().find(|s| !seen.insert(s.series_id.clone())) {
        return Err(PipelineError::Config(format!("series {:?} is provided by more than one source", dup.series_id)));
    }
    for s in &series {
        if !o.max_gap_minutes.is_multiple_of(s.resolution.minutes()) {
            return Err(PipelineError::Config(format!(
                "max_gap_minutes {} is not a multiple of the {} resolution of {}",
                o.max_gap_minutes, s.resolution, s.series_id
            )));
        }
    }
    let filled = timeseries::fill_gaps_batch(&series, o.max_gap_minutes, exec).map_err(stage("timeseries"))?;
    for (before, after) in series.iter().zip(&filled) {
        let n = count_flag(after, &MarkerFlag::Interpolated) - count_flag(before, &MarkerFlag::Interpolated);
        if n > 0 {
            events.push(
                Event::new("timeseries", "marker_added").with("series", &after.series_id).with("marker", "interpolated").with("count", n),
            );
        }
    }
    let hourly: Vec<TimeSeries> = filled
        .iter()
        .map(|s| match s.resolution {
            Resolution::Min60 => Ok(s.clone()),
            _ => {
                let h = timeseries::aggregate_to_hourly(s)?;
                events.push(
                    Event::new("timeseries", "aggregated")
                        .with("series", &s.series_id)
                        .with("from", s.resolution.minutes())
                        .with("points", h.len()),
                );
                Ok(h)
            }
        })
        .collect::<Result<_, timeseries::TimeSeriesError>>()
        .map_err(stage("timeseries"))?;
    Ok(vec![hourly_resource(hourly)])
}

/// One hourly table: `utc_timestamp`, then a value and a marker column per
/// series in series-id order.
fn hourly_resource(mut hourly: Vec<TimeSeries>) -> ResourceData {
    hourly.sort_by(|a, b| a.series_id.cmp(&b.series_id));
    let start = hourly.iter().map(|s| s.start).min().expect("at least one series");
    let end = hourly.iter().map(|s| s.end()).max().expect("at least one series");
    let hours = ((end - start).num_seconds() / 3600) as usize;
    let mut fields = vec![FieldSchema::new("utc_timestamp", FieldType::Datetime, "Start of the hour (UTC)")];
    let mut companions = BTreeMap::new();
    for s in &hourly {
        fields.push(FieldSchema::new(&s.series_id, FieldType::Number, &format!("{} (hourly mean)", s.series_id)));
        let marker = format!("{}_marker", s.series_id);
        fields.push(FieldSchema::new(&marker, FieldType::String, &format!("Processing flags for {}", s.series_id)));
        companions.insert(s.series_id.clone(), marker);
    }
    let mut rows = Vec::with_capacity(hours);
    for h in 0..hours {
        let t = start + chrono::Duration::hours(h as i64);
        let mut row = vec![Cell::DateTime(t)];
        for s in &hourly {
            let offset = (t - s.start).num_seconds();
            let i = (offset >= 0).then_some((offset / 3600) as usize).filter(|&i| i < s.len());
            row.push(i.map_or(Cell::Null, |i| s.values[i].into()));
            row.push(Cell::Markers(i.map(|i| s.markers[i].clone()).unwrap_or_default()));
        }
        rows.push(row);
    }
    let mut resource = Resource::new("time_series_60min", fields);
    resource.primary_key = vec!["utc_timestamp".into()];
    resource.marker_companions = companions;
    ResourceData { resource, rows }
}

// -------------------------------------------------------------------- plants

fn classify(
    term: Option<&str>,
    context: Option<&str>,
    desc: &SourceDescriptor,
    t: &Taxonomy,
    mappings: &BTreeMap<String, VocabMapping>,
    route_unmapped: bool,
) -> Result<(String, bool), PipelineError> {
    let term = term.ok_or_else(|| PipelineError::Stage { stage: "taxonomy", message: format!("{}: missing energy_source", desc.id) })?;
    let Some(id) = &desc.vocab_map_id else {
        // no mapping: terms are taxonomy node ids
        return if t.contains(term) {
            Ok((term.to_string(), false))
        } else if route_unmapped {
            Ok((crate::taxonomy::OTHER_OR_UNSPECIFIED.to_string(), true))
        } else {
            Err(PipelineError::Stage { stage: "taxonomy", message: format!("{}: unknown taxonomy node {term:?}", desc.id) })
        };
    };
    let mapping = mappings.get(id).ok_or_else(|| PipelineError::Config(format!("{}: unknown vocabulary mapping {id:?}", desc.id)))?;
    let policy = if route_unmapped { UnmappedPolicy::RouteToOther } else { UnmappedPolicy::Error };
    let c = mapping
        .classify_with_policy(term, context, policy)
        .map_err(|e| PipelineError::Stage { stage: "taxonomy", message: format!("{}: {e}", desc.id) })?;
    Ok((c.node, c.routed))
}

fn parse_date(cell: Option<&str>, desc: &SourceDescriptor, row: usize, column: &str) -> Result<Option<NaiveDate>, PipelineError> {
    let Some(s) = cell.map(str::trim) else { return Ok(None) };
    ["%Y-%m-%d", "%d.%m.%Y", "%d/%m/%Y"].iter().find_map(|f| NaiveDate::parse_from_str(s, f).ok()).map(Some).ok_or_else(|| {
        PipelineError::Stage { stage: "plants", message: format!("{} row {} column {column}: not a date: {s:?}", desc.id, row + 1) }
    })
}

fn parse_bool(cell: Option<&str>, desc: &SourceDescriptor, row: usize, column: &str) -> Result<Option<bool>, PipelineError> {
    let Some(s) = cell else { return Ok(None) };
    match s.trim().to_lowercase().as_str() {
        "true" | "yes" | "ja" | "y" | "1" => Ok(Some(true)),
        "false" | "no" | "nein" | "n" | "0" => Ok(Some(false)),
        _ => Err(PipelineError::Stage {
            stage: "plants",
            message: format!("{} row {} column {column}: not a boolean: {s:?}", desc.id, row + 1),
        }),
    }
}

/// Canonical plant columns a descriptor may map to.
pub const PLANT_COLUMNS: &[&str] = &[
    "record_id",
    "name",
    "country",
    "energy_source",
    "energy_source_context",
    "technology",
    "capacity_net_mw",
    "capacity_gross_mw",
    "chp",
    "commissioned",
    "decommissioned",
    "lat",
    "lon",
    "coord_precision",
    "eic",
    "efficiency",
];

fn plant_records(
    input: &Input,
    t: &Taxonomy,
    mappings: &BTreeMap<String, VocabMapping>,
    route_unmapped: bool,
    events: &mut EventLog,
) -> Result<Vec<PlantRecord>, PipelineError> {
    let table = parse_input(input)?;
    let desc = &input.desc;
    if let Some(c) = table.columns.iter().find(|c| !PLANT_COLUMNS.contains(&c.as_str())) {
        return Err(PipelineError::Config(format!("{}: unknown canonical plant column {c:?}", desc.id)));
    }
    let idx = |name: &str| table.column_index(name);
    let cols: BTreeMap<&str, Option<usize>> = PLANT_COLUMNS.iter().map(|c| (*c, idx(c))).collect();
    let mut out = Vec::with_capacity(table.rows.len());
    let mut routed = 0usize;
    for (r, row) in table.rows.iter().enumerate() {
        let get = |name: &str| cols[name].and_then(|i| row[i].as_deref());
        let text = |name: &str| get(name).map(|s| s.trim().to_string()).unwrap_or_default();
        let num = |name: &str| number(get(name), desc, r, name);
        let (node, was_routed) = classify(get("energy_source"), get("energy_source_context"), desc, t, mappings, route_unmapped)?;
        let coord_precision = match get("coord_precision").map(str::trim) {
            None => None,
            Some(s) => Some(serde_json::from_value::<CoordPrecision>(Value::String(s.into())).map_err(|_| PipelineError::Stage {
                stage: "plants",
                message: format!("{} row {}: unknown coord_precision {s:?}", desc.id, r + 1),
            })?),
        };
        let record_id = match get("record_id") {
            Some(id) => format!("{}:{}", desc.id, id.trim()),
            None => format!("{}:{}", desc.id, r + 1),
        };
        let mut rec = PlantRecord {
            record_id,
            name: text("name"),
            country: text("country").to_uppercase(),
            source_node: node,
            technology: text("technology"),
            capacity_net_mw: num("capacity_net_mw")?,
            capacity_gross_mw: num("capacity_gross_mw")?,
            chp: parse_bool(get("chp"), desc, r, "chp")?,
            commissioned: parse_date(get("commissioned"), desc, r, "commissioned")?,
            decommissioned: parse_date(get("decommissioned"), desc, r, "decommissioned")?,
            lat: num("lat")?,
            lon: num("lon")?,
            coord_precision,
            eic: get("eic").map(|s| s.trim().to_string()).filter(|s| !s.is_empty()),
            efficiency: num("efficiency")?,
            provenance: vec![desc.id.clone()],
            ..PlantRecord::default()
        };
        if was_routed {
            rec.markers.insert(MarkerFlag::Custom(UNMAPPED_TERM.into()));
            rec.flags.insert("unmapped_term".into());
            routed += 1;
        }
        out.push(rec);
    }
    if routed > 0 {
        events.push(Event::new("taxonomy", "marker_added").with("source", &desc.id).with("marker", UNMAPPED_TERM).with("count", routed));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = out.iter().find(|r| !seen.insert(r.record_id.clone())) {
        return Err(PipelineError::Stage { stage: "plants", message: format!("duplicate record id {:?}", dup.record_id) });
    }
    let invalid = plants::flag_invariant_violations(&mut out);
    if invalid > 0 {
        events.push(
            Event::new("plants", "marker_added")
                .with("source", &desc.id)
                .with("marker", "implausible")
                .with("reason", "invariant")
                .with("count", invalid),
        );
    }
    Ok(out)
}

fn join(items: impl IntoIterator<Item = impl AsRef<str>>) -> Cell {
    let s = items.into_iter().map(|s| s.as_ref().to_string()).collect::<Vec<_>>().join(";");
    if s.is_empty() {
        Cell::Null
    } else {
        Cell::String(s)
    }
}

fn text_cell(s: &str) -> Cell {
    if s.is_empty() {
        Cell::Null
    } else {
        Cell::String(s.to_string())
    }
}

fn plant_resource(name: &str, records: &[PlantRecord]) -> ResourceData {
    let fields = vec![
        FieldSchema::new("record_id", FieldType::String, "Source-qualified record id"),
        FieldSchema::new("name", FieldType::String, "Plant or unit name as reported"),
        FieldSchema::new("country", FieldType::String, "ISO country code"),
        FieldSchema::new("energy_source", FieldType::String, "Taxonomy node"),
        FieldSchema::new("technology", FieldType::String, "Generation technology"),
        FieldSchema::new("capacity_net_mw", FieldType::Number, "Net electrical capacity").unit("MW"),
        FieldSchema::new("capacity_gross_mw", FieldType::Number, "Gross electrical capacity").unit("MW"),
        FieldSchema::new("chp", FieldType::Boolean, "Combined heat and power"),
        FieldSchema::new("commissioned", FieldType::Date, "Commissioning date"),
        FieldSchema::new("decommissioned", FieldType::Date, "Decommissioning date"),
        FieldSchema::new("lat", FieldType::Number, "Latitude (WGS84)").unit("degree"),
        FieldSchema::new("lon", FieldType::Number, "Longitude (WGS84)").unit("degree"),
        FieldSchema::new("coord_precision", FieldType::String, "How coordinates were obtained"),
        FieldSchema::new("eic", FieldType::String, "Energy Identification Code"),
        FieldSchema::new("efficiency", FieldType::Number, "Electrical efficiency"),
        FieldSchema::new("provenance", FieldType::String, "Contributing sources"),
        FieldSchema::new("field_provenance", FieldType::String, "field=source for every fused field"),
        FieldSchema::new("flags", FieldType::String, "Reasons behind the record markers"),
    ];
    let mut resource = Resource::new(name, fields).with_marker("record_id");
    resource.primary_key = vec!["record_id".into()];
    let rows = records
        .iter()
        .map(|r| {
            vec![
                Cell::String(r.record_id.clone()),
                text_cell(&r.name),
                text_cell(&r.country),
                Cell::String(r.source_node.clone()),
                text_cell(&r.technology),
                r.capacity_net_mw.into(),
                r.capacity_gross_mw.into(),
                r.chp.map_or(Cell::Null, Cell::Boolean),
                r.commissioned.map_or(Cell::Null, Cell::Date),
                r.decommissioned.map_or(Cell::Null, Cell::Date),
                r.lat.into(),
                r.lon.into(),
                r.coord_precision.map_or(Cell::Null, |p| {
                    Cell::String(serde_json::to_value(p).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
                }),
                r.eic.as_deref().map_or(Cell::Null, text_cell),
                r.efficiency.into(),
                join(&r.provenance),
                join(r.field_provenance.iter().map(|(k, v)| format!("{k}={v}"))),
                join(&r.flags),
                Cell::Markers(r.markers.clone()),
            ]
        })
        .collect();
    ResourceData { resource, rows }
}

fn json_extra(path: &str, value: &impl Serialize) -> ExtraFile {
    let v = serde_json::to_value(value).expect("report serializes");
    ExtraFile { path: path.into(), bytes: crate::datapackage::to_canonical_json(&v).into_bytes() }
}

fn plants_pipeline(
    cfg: &PipelineConfig,
    inputs: &[Input],
    o: &PlantsOptions,
    events: &mut EventLog,
) -> Result<(Vec<ResourceData>, Vec<ExtraFile>), PipelineError> {
    let (t, mappings) = load_taxonomy(cfg)?;
    let rules: Vec<Rule> = match &o.rules {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
        }
        None => plants::default_rules(),
    };
    plants::validate_rules(&rules, &t).map_err(config)?;

    let mut lists: BTreeMap<PlantRole, Vec<PlantRecord>> = BTreeMap::new();
    let mut role_sources: BTreeMap<PlantRole, Vec<&str>> = BTreeMap::new();
    for input in inputs {
        let role = *o
            .roles
            .get(&input.desc.id)
            .ok_or_else(|| PipelineError::Config(format!("source {:?} has no role in options.roles", input.desc.id)))?;
        role_sources.entry(role).or_default().push(&input.desc.id);
        let records = plant_records(input, &t, &mappings, o.route_unmapped, events)?;
        lists.entry(role).or_default().extend(records);
    }
    for (role, ids) in &role_sources {
        if *role != PlantRole::Renewable && ids.len() > 1 {
            return Err(PipelineError::Config(format!("more than one {role:?} source: {ids:?}")));
        }
    }
    let primary = lists.remove(&PlantRole::Primary).unwrap_or_default();
    let secondary = lists.remove(&PlantRole::Secondary).unwrap_or_default();
    let renewable = lists.remove(&PlantRole::Renewable).unwrap_or_default();

    let policy = MatchPolicy { keys: o.match_keys.clone(), tolerance: o.tolerance };
    let (merged, match_report) = plants::merge_lists(&primary, &secondary, &policy).map_err(stage("plants"))?;
    events.push(
        Event::new("plants", "lists_merged")
            .with("primary", primary.len())
            .with("secondary", secondary.len())
            .with("matched", match_report.matched.len())
            .with("output", merged.len()),
    );
    for c in &match_report.conflicts {
        events.push(
            Event::new("plants", "conflict_resolved")
                .with("primary", &c.primary)
                .with("secondary", &c.secondary)
                .with("field", &c.field)
                .with("kept", &c.kept)
                .with("discarded", &c.discarded),
        );
    }
    if !match_report.ambiguous.is_empty() {
        events
            .push(Event::new("plants", "marker_added").with("marker", plants::AMBIGUOUS_MATCH).with("count", match_report.ambiguous.len()));
    }
    let (conv, ren, overlap) = plants::dedupe_cross_domain(merged, renewable, &t, o.tolerance);
    for m in &overlap.moved {
        events.push(Event::new("plants", "record_moved").with("record", &m.record_id).with("from", m.from).with("to", m.to));
    }
    if !overlap.duplicates.is_empty() {
        events.push(
            Event::new("plants", "marker_added")
                .with("marker", "implausible")
                .with("reason", plants::CROSS_DOMAIN_DUPLICATE)
                .with("count", overlap.duplicates.len()),
        );
    }
    let mut conv = plants::flag_implausible(&conv, &rules, &t).map_err(stage("plants"))?;
    let mut ren = plants::flag_implausible(&ren, &rules, &t).map_err(stage("plants"))?;
    plants::sort_records(&mut conv);
    plants::sort_records(&mut ren);
    let implausible = conv.iter().chain(&ren).filter(|r| r.markers.contains(&MarkerFlag::Implausible)).count();
    events.push(Event::new("plants", "plausibility_checked").with("implausible_records", implausible));

    let mut resources = vec![plant_resource("conventional_power_plants", &conv), plant_resource("renewable_power_plants", &ren)];
    let mut extras = vec![json_extra("reports/match_report.json", &match_report), json_extra("reports/overlap_report.json", &overlap)];
    if let Some(d) = &o.daily_capacity {
        let all: Vec<PlantRecord> = conv.iter().chain(&ren).cloned().collect();
        let mut fields = vec![FieldSchema::new("date", FieldType::Date, "Calendar day (UTC)")];
        let mut columns = Vec::new();
        let mut excluded = BTreeMap::new();
        for g in &d.groupings {
            if !t.contains(g) {
                return Err(PipelineError::Config(format!("daily_capacity grouping {g:?} is not a taxonomy node")));
            }
            let report = timeseries::build_daily_capacity(&all, g, &t, d.first_day, d.last_day);
            fields.push(FieldSchema::new(&format!("{g}_mw"), FieldType::Number, &format!("Installed capacity of {g}")).unit("MW"));
            excluded.insert(
                g.clone(),
                report.excluded.iter().map(|(id, why)| serde_json::json!({"record_id": id, "reason": why})).collect::<Vec<_>>(),
            );
            columns.push(report.series);
        }
        let days = columns.first().map_or(0, |c| c.capacity_mw.len());
        let rows = (0..days)
            .map(|i| {
                let mut row = vec![Cell::Date(d.first_day + chrono::Duration::days(i as i64))];
                row.extend(columns.iter().map(|c| Cell::Number(c.capacity_mw[i])));
                row
            })
            .collect();
        let mut resource = Resource::new("daily_installed_capacity", fields);
        resource.primary_key = vec!["date".into()];
        resources.push(ResourceData { resource, rows });
        extras.push(json_extra("reports/daily_capacity_excluded.json", &excluded));
    }
    Ok((resources, extras))
}

// ------------------------------------------------------------------ capacity

fn capacity_observations(
    input: &Input,
    factor: f64,
    t: &Taxonomy,
    mappings: &BTreeMap<String, VocabMapping>,
    route_unmapped: bool,
) -> Result<Vec<CapacityObservation>, PipelineError> {
    let table = parse_input(input)?;
    let desc = &input.desc;
    let col = |name: &str| {
        table.column_index(name).ok_or_else(|| PipelineError::Config(format!("{}: no {name:?} column in column_map", desc.id)))
    };
    let (c_country, c_year, c_node, c_value) = (col("country")?, col("year")?, col("energy_source")?, col("value")?);
    let mut out = Vec::with_capacity(table.rows.len());
    for (r, row) in table.rows.iter().enumerate() {
        let country = row[c_country].as_deref().map(str::trim).unwrap_or_default().to_uppercase();
        let year_text = row[c_year].as_deref().map(str::trim).unwrap_or_default();
        let year: i32 = year_text.parse().map_err(|_| PipelineError::Stage {
            stage: "capacity",
            message: format!("{} row {}: year {year_text:?} is not an integer", desc.id, r + 1),
        })?;
        let (node, routed) = classify(row[c_node].as_deref(), None, desc, t, mappings, route_unmapped)?;
        let value = number(row[c_value].as_deref(), desc, r, "value")?.map(|v| v * factor);
        out.push(CapacityObservation { country, year, node, source: desc.id.clone(), value, incomplete: routed });
    }
    Ok(out)
}

fn capacity_pipeline(
    cfg: &PipelineConfig,
    inputs: &[Input],
    o: &CapacityOptions,
    exec: Exec,
    events: &mut EventLog,
) -> Result<Vec<ResourceData>, PipelineError> {
    let (t, mappings) = load_taxonomy(cfg)?;
    let mut obs = Vec::new();
    for input in inputs {
        let factor = o.unit_factors.get(&input.desc.id).copied().unwrap_or(1.0);
        obs.extend(capacity_observations(input, factor, &t, &mappings, o.route_unmapped)?);
    }
    let all = capacity::with_rollups(&obs, &t).map_err(stage("capacity"))?;
    let reported: BTreeSet<(String, i32, String, String)> =
        obs.iter().map(|o| (o.country.clone(), o.year, o.node.clone(), o.source.clone())).collect();
    events.push(Event::new("capacity", "rolled_up").with("reported", obs.len()).with("derived", all.len() - obs.len()));
    let m = capacity::build_matrix(&all).map_err(stage("capacity"))?;

    let mut fields = vec![
        FieldSchema::new("country", FieldType::String, "ISO country code"),
        FieldSchema::new("year", FieldType::Integer, "Reference year"),
        FieldSchema::new("energy_source", FieldType::String, "Taxonomy node"),
        FieldSchema::new("energy_source_level", FieldType::Integer, "Taxonomy level of the node"),
    ];
    for s in &m.sources {
        fields.push(FieldSchema::new(s, FieldType::Number, &format!("Installed capacity reported by {s}")).unit("GW").minimum(0.0));
    }
    let mut resource = Resource::new("national_generation_capacity", fields);
    for s in &m.sources {
        resource = resource.with_marker(s);
    }
    resource.primary_key = vec!["country".into(), "year".into(), "energy_source".into()];
    let mut rows = Vec::with_capacity(m.rows.len());
    for (key, cells) in m.rows.iter().zip(&m.cells) {
        let mut row = vec![
            Cell::String(key.country.clone()),
            Cell::Integer(key.year.into()),
            Cell::String(key.node.clone()),
            Cell::Integer(t.level(&key.node).map_err(stage("capacity"))?.into()),
        ];
        let mut markers = Vec::new();
        for (s, cell) in m.sources.iter().zip(cells) {
            row.push(cell.value.into());
            let mut set = MarkerSet::new();
            let present = cell.value.is_some() || cell.incomplete;
            if present && !reported.contains(&(key.country.clone(), key.year, key.node.clone(), s.clone())) {
                set.insert(MarkerFlag::SummedFromComponents);
            }
            if cell.incomplete {
                set.insert(MarkerFlag::Custom(INCOMPLETE_SUM.into()));
            }
            markers.push(Cell::Markers(set));
        }
        row.extend(markers);
        rows.push(row);
    }

    let reports = capacity::range_reports(&m, &t, exec).map_err(stage("capacity"))?;
    let range_fields = vec![
        FieldSchema::new("country", FieldType::String, "ISO country code"),
        FieldSchema::new("year", FieldType::Integer, "Reference year"),
        FieldSchema::new("min_total", FieldType::Number, "Smallest complete national total").unit("GW"),
        FieldSchema::new("max_total", FieldType::Number, "Largest complete national total").unit("GW"),
        FieldSchema::new("complete_sources", FieldType::String, "Sources with complete totals"),
        FieldSchema::new("incomplete_sources", FieldType::String, "Sources with incomplete totals"),
        FieldSchema::new("note", FieldType::String, ""),
    ];
    let mut ranges = Resource::new("national_capacity_ranges", range_fields);
    ranges.primary_key = vec!["country".into(), "year".into()];
    let range_rows = reports
        .iter()
        .map(|r| {
            let by = |complete: bool| join(r.per_source.iter().filter(|(_, t)| t.complete == complete).map(|(s, _)| s));
            vec![
                Cell::String(r.country.clone()),
                Cell::Integer(r.year.into()),
                r.min.into(),
                r.max.into(),
                by(true),
                by(false),
                r.note.as_deref().map_or(Cell::Null, text_cell),
            ]
        })
        .collect();
    Ok(vec![ResourceData { resource, rows }, ResourceData { resource: ranges, rows: range_rows }])
}

// ------------------------------------------------------------------- weather

fn weather_pipeline(inputs: &[Input], o: &WeatherOptions, exec: Exec, events: &mut EventLog) -> Result<Vec<ResourceData>, PipelineError> {
    let mut spec: Option<GridSpec> = None;
    let mut fields: Vec<GridField> = Vec::new();
    for input in inputs {
        let text = std::str::from_utf8(&input.bytes)
            .map_err(|e| PipelineError::Stage { stage: "weather", message: format!("{}: {e}", input.desc.id) })?;
        let (s, f) = weather::parse_container(text)
            .map_err(|e| PipelineError::Stage { stage: "weather", message: format!("{}: {e}", input.desc.id) })?;
        match spec {
            Some(prev) if prev != s => {
                return Err(PipelineError::Stage {
                    stage: "weather",
                    message: format!("{}: grid differs from the other sources", input.desc.id),
                })
            }
            _ => spec = Some(s),
        }
        fields.extend(f);
    }
    let mut spec = spec.expect("at least one source");
    if let Some(b) = &o.bbox {
        let subset: Vec<(GridField, GridSpec)> = crate::par::map(exec, &fields, |f| weather::subset(f, &spec, b))
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(stage("weather"))?;
        let sub = weather::subset_spec(&spec, b).map_err(stage("weather"))?.0;
        events.push(Event::new("weather", "subset").with("nx", sub.nx).with("ny", sub.ny).with("fields", subset.len()));
        fields = subset.into_iter().map(|(f, _)| f).collect();
        spec = sub;
    }
    if o.derive_wind_speed {
        let speeds = weather::derive_wind_speeds(&fields, exec).map_err(stage("weather"))?;
        if !speeds.is_empty() {
            events.push(Event::new("weather", "derived").with("parameter", "wind_speed").with("fields", speeds.len()));
        }
        fields.extend(speeds);
    }
    let table = weather::flatten_to_table(&fields, &spec, exec).map_err(stage("weather"))?;
    let mut schema = vec![
        FieldSchema::new("utc_timestamp", FieldType::Datetime, "Field time (UTC)"),
        FieldSchema::new("lat", FieldType::Number, "Cell centre latitude").unit("degree"),
        FieldSchema::new("lon", FieldType::Number, "Cell centre longitude").unit("degree"),
    ];
    for p in &table.parameters {
        schema.push(FieldSchema::new(&p.name(), FieldType::Number, &p.name()).unit(p.unit()));
    }
    let mut resource = Resource::new("weather_data", schema);
    resource.primary_key = vec!["utc_timestamp".into(), "lat".into(), "lon".into()];
    let rows = table
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![Cell::DateTime(r.time), Cell::Number(r.lat), Cell::Number(r.lon)];
            row.extend(r.values.iter().map(|v| Cell::from(*v)));
            row
        })
        .collect();
    Ok(vec![ResourceData { resource, rows }])
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn pad_to_hour_prepends_na() {
        let start = Utc.with_ymd_and_hms(2020, 1, 1, 0, 30, 0).unwrap();
        let ts = pad_to_hour(TimeSeries::new("x", Resolution::Min15, start, vec![Some(1.0), Some(2.0)]));
        assert_eq!(ts.start, Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap());
        assert_eq!(ts.values, vec![None, None, Some(1.0), Some(2.0)]);
        assert_eq!(ts.markers.len(), 4);
    }

    #[test]
    fn config_options_are_strict() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.json"), "{}").unwrap();
        let base = r#"{"package_name": "p", "version": "v1", "sources": ["a.json"],
                       "pipeline": "timeseries", "output_dir": "out", "options": OPTIONS}"#;
        let ok = parse_config(&base.replace("OPTIONS", r#"{"max_gap_minutes": 60}"#), dir.path()).unwrap();
        assert_eq!(ok.options, PipelineOptions::Timeseries(TimeseriesOptions { max_gap_minutes: 60, ..Default::default() }));
        assert_eq!(ok.package_dir(), dir.path().join("out/p/v1"));
        for bad in [r#"{"max_gap": 60}"#, r#"{"max_gap_minutes": 50}"#, r#"{"tolerance": 0.1}"#] {
            let err = parse_config(&base.replace("OPTIONS", bad), dir.path()).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}");
        }
        let missing = base.replace("a.json", "b.json").replace("OPTIONS", "{}");
        assert!(parse_config(&missing, dir.path()).is_err());
        let escape = base.replace("\"v1\"", "\"../v1\"").replace("OPTIONS", "{}");
        assert!(parse_config(&escape, dir.path()).is_err());
    }

    #[test]
    fn hourly_resource_aligns_series() {
        let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let a = TimeSeries::new("a", Resolution::Min60, t0, vec![Some(1.0), Some(2.0)]);
        let b = TimeSeries::new("b", Resolution::Min60, t0 + chrono::Duration::hours(1), vec![Some(0.0)]);
        let r = hourly_resource(vec![b, a]);
        assert_eq!(
            r.resource.fields.iter().map(|f| f.name.as_str()).collect::<Vec<_>>(),
            vec!["utc_timestamp", "a", "a_marker", "b", "b_marker"]
        );
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0][3], Cell::Null);
        assert_eq!(r.rows[1][3], Cell::Number(0.0));
    }
}
