//! Gridded weather fields: rectangular subsetting, wind speed from vector
//! components, and flattening to one row per (time, cell).
//!
//! Grids are regular in longitude and latitude. Row `j = 0` is the southernmost
//! row and values are stored row-major, so the value of cell `(i, j)` is
//! `values[j * nx + i]` with centre `(lon0 + i*dlon, lat0 + j*dlat)`.
//!
//! # Input container
//!
//! ```json
//! {
//!   "grid": {"lon0": 5.0, "lat0": 47.0, "dlon": 0.625, "dlat": 0.5, "nx": 2, "ny": 2},
//!   "fields": [
//!     {"parameter": "wind_u_10m", "time": "2016-01-01T00:00:00Z",
//!      "values": [[1.0, 2.0], [3.0, null]]}
//!   ]
//! }
//! ```
//!
//! `values` lists rows from south to north; `null` is NA. `dlon`/`dlat` may be
//! omitted and default to 0.625 and 0.5 degrees.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};

pub const DEFAULT_DLON: f64 = 0.625;
pub const DEFAULT_DLAT: f64 = 0.5;
/// Slack on cell-centre inclusion so that a box edge written in decimal
/// still contains the centre it names.
const CENTRE_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum WeatherError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("bounding box contains no cell centre")]
    EmptyIntersection,
    #[error("field {parameter} at {time}: expected {expected} values, found {found}")]
    Shape { parameter: Parameter, time: DateTime<Utc>, expected: usize, found: usize },
    #[error("time mismatch: {0} vs {1}")]
    TimeMismatch(DateTime<Utc>, DateTime<Utc>),
    #[error("wind components do not pair: {0} and {1}")]
    ComponentMismatch(Parameter, Parameter),
    #[error("duplicate field {parameter} at {time}")]
    DuplicateField { parameter: Parameter, time: DateTime<Utc> },
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("container: {0}")]
    Container(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Height {
    M2,
    M10,
    M50,
}

impl Height {
    fn suffix(self) -> &'static str {
        match self {
            Height::M2 => "2m",
            Height::M10 => "10m",
            Height::M50 => "50m",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Parameter {
    WindU(Height),
    WindV(Height),
    WindSpeed(Height),
    RoughnessLength,
    SolarRadiation,
    Temperature,
    AirDensity,
    Pressure,
}

impl Parameter {
    pub fn name(self) -> String {
        match self {
            Parameter::WindU(h) => format!("wind_u_{}", h.suffix()),
            Parameter::WindV(h) => format!("wind_v_{}", h.suffix()),
            Parameter::WindSpeed(h) => format!("wind_speed_{}", h.suffix()),
            Parameter::RoughnessLength => "roughness_length".into(),
            Parameter::SolarRadiation => "solar_radiation".into(),
            Parameter::Temperature => "temperature".into(),
            Parameter::AirDensity => "air_density".into(),
            Parameter::Pressure => "pressure".into(),
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Parameter::WindU(_) | Parameter::WindV(_) | Parameter::WindSpeed(_) => "m/s",
            Parameter::RoughnessLength => "m",
            Parameter::SolarRadiation => "W/m2",
            Parameter::Temperature => "K",
            Parameter::AirDensity => "kg/m3",
            Parameter::Pressure => "Pa",
        }
    }
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Parameter {
    type Err = WeatherError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let height = |h: &str| match h {
            "2m" => Some(Height::M2),
            "10m" => Some(Height::M10),
            "50m" => Some(Height::M50),
            _ => None,
        };
        let unknown = || WeatherError::UnknownParameter(s.to_string());
        Ok(match s {
            "roughness_length" => Parameter::RoughnessLength,
            "solar_radiation" => Parameter::SolarRadiation,
            "temperature" => Parameter::Temperature,
            "air_density" => Parameter::AirDensity,
            "pressure" => Parameter::Pressure,
            _ => {
                if let Some(h) = s.strip_prefix("wind_u_") {
                    Parameter::WindU(height(h).ok_or_else(unknown)?)
                } else if let Some(h) = s.strip_prefix("wind_v_") {
                    Parameter::WindV(height(h).ok_or_else(unknown)?)
                } else if let Some(h) = s.strip_prefix("wind_speed_") {
                    Parameter::WindSpeed(height(h).ok_or_else(unknown)?)
                } else {
                    return Err(unknown());
                }
            }
        })
    }
}

impl Serialize for Parameter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Parameter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_dlon() -> f64 {
    DEFAULT_DLON
}

fn default_dlat() -> f64 {
    DEFAULT_DLAT
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lon0: f64,
    pub lat0: f64,
    #[serde(default = "default_dlon")]
    pub dlon: f64,
    #[serde(default = "default_dlat")]
    pub dlat: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(lon0: f64, lat0: f64, nx: usize, ny: usize) -> Self {
        GridSpec { lon0, lat0, dlon: DEFAULT_DLON, dlat: DEFAULT_DLAT, nx, ny }
    }

    pub fn validate(&self) -> Result<(), WeatherError> {
        let finite = [self.lon0, self.lat0, self.dlon, self.dlat].iter().all(|v| v.is_finite());
        if !finite {
            return Err(WeatherError::InvalidGrid("non-finite origin or spacing".into()));
        }
        if self.dlon <= 0.0 || self.dlat <= 0.0 {
            return Err(WeatherError::InvalidGrid("spacing must be positive".into()));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(WeatherError::InvalidGrid("nx and ny must be at least 1".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn lon(&self, i: usize) -> f64 {
        self.lon0 + i as f64 * self.dlon
    }

    pub fn lat(&self, j: usize) -> f64 {
        self.lat0 + j as f64 * self.dlat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub ne: LatLon,
    pub sw: LatLon,
}

impl BoundingBox {
    pub fn new(sw: (f64, f64), ne: (f64, f64)) -> Result<Self, WeatherError> {
        let b = BoundingBox { sw: LatLon { lat: sw.0, lon: sw.1 }, ne: LatLon { lat: ne.0, lon: ne.1 } };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), WeatherError> {
        if ![self.ne.lat, self.ne.lon, self.sw.lat, self.sw.lon].iter().all(|v| v.is_finite()) {
            return Err(WeatherError::InvalidBox("non-finite corner".into()));
        }
        if self.ne.lat < self.sw.lat {
            return Err(WeatherError::InvalidBox("north edge below south edge".into()));
        }
        if self.ne.lon < self.sw.lon {
            return Err(WeatherError::InvalidBox("east edge west of west edge (no antimeridian wrap)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub parameter: Parameter,
    pub time: DateTime<Utc>,
    /// Row-major from the south, `ny * nx` entries.
    pub values: Vec<Option<f64>>,
}

impl GridField {
    pub fn check_shape(&self, spec: &GridSpec) -> Result<(), WeatherError> {
        if self.values.len() != spec.cells() {
            return Err(WeatherError::Shape {
                parameter: self.parameter,
                time: self.time,
                expected: spec.cells(),
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Index range `[lo, hi)` of centres `c0 + k*d` inside `[min, max]`.
fn centre_range(c0: f64, d: f64, n: usize, min: f64, max: f64) -> (usize, usize) {
    let lo = (0..n).find(|&k| c0 + k as f64 * d >= min - CENTRE_EPS);
    match lo {
        None => (0, 0),
        Some(lo) => {
            let hi = (lo..n).take_while(|&k| c0 + k as f64 * d <= max + CENTRE_EPS).count();
            (lo, lo + hi)
        }
    }
}

/// The window of `spec` a box selects, as `(sub_spec, i0, j0)`.
pub fn subset_spec(spec: &GridSpec, bbox: &BoundingBox) -> Result<(GridSpec, usize, usize), WeatherError> {
    spec.validate()?;
    bbox.validate()?;
    let (i0, i1) = centre_range(spec.lon0, spec.dlon, spec.nx, bbox.sw.lon, bbox.ne.lon);
    let (j0, j1) = centre_range(spec.lat0, spec.dlat, spec.ny, bbox.sw.lat, bbox.ne.lat);
    if i1 <= i0 || j1 <= j0 {
        return Err(WeatherError::EmptyIntersection);
    }
    let sub = GridSpec { lon0: spec.lon(i0), lat0: spec.lat(j0), dlon: spec.dlon, dlat: spec.dlat, nx: i1 - i0, ny: j1 - j0 };
    Ok((sub, i0, j0))
}

/// Cells whose centres lie inside the closed box.
pub fn subset(field: &GridField, spec: &GridSpec, bbox: &BoundingBox) -> Result<(GridField, GridSpec), WeatherError> {
    field.check_shape(spec)?;
    let (sub, i0, j0) = subset_spec(spec, bbox)?;
    let mut values = Vec::with_capacity(sub.cells());
    for j in j0..j0 + sub.ny {
        let row = j * spec.nx;
        values.extend_from_slice(&field.values[row + i0..row + i0 + sub.nx]);
    }
    Ok((GridField { parameter: field.parameter, time: field.time, values }, sub))
}

/// Elementwise magnitude of the eastward (`u`) and northward (`v`) components.
pub fn wind_speed(u: &GridField, v: &GridField) -> Result<GridField, WeatherError> {
    wind_speed_with(u, v, Exec::Sequential)
}

pub fn wind_speed_with(u: &GridField, v: &GridField, exec: Exec) -> Result<GridField, WeatherError> {
    let height = match (u.parameter, v.parameter) {
        (Parameter::WindU(a), Parameter::WindV(b)) if a == b => a,
        (a, b) => return Err(WeatherError::ComponentMismatch(a, b)),
    };
    if u.time != v.time {
        return Err(WeatherError::TimeMismatch(u.time, v.time));
    }
    if u.values.len() != v.values.len() {
        return Err(WeatherError::Shape { parameter: v.parameter, time: v.time, expected: u.values.len(), found: v.values.len() });
    }
    let values = par::zip_map(exec, &u.values, &v.values, |a, b| match (a, b) {
        (Some(a), Some(b)) => Some(a.hypot(*b)),
        _ => None,
    });
    Ok(GridField { parameter: Parameter::WindSpeed(height), time: u.time, values })
}

/// Derive a speed field for every (height, time) with both components.
pub fn derive_wind_speeds(fields: &[GridField], exec: Exec) -> Result<Vec<GridField>, WeatherError> {
    type Components<'a> = (Option<&'a GridField>, Option<&'a GridField>);
    let mut pairs: BTreeMap<(Height, DateTime<Utc>), Components> = BTreeMap::new();
    for f in fields {
        match f.parameter {
            Parameter::WindU(h) => pairs.entry((h, f.time)).or_default().0 = Some(f),
            Parameter::WindV(h) => pairs.entry((h, f.time)).or_default().1 = Some(f),
            _ => {}
        }
    }
    let complete: Vec<(&GridField, &GridField)> = pairs.values().filter_map(|(u, v)| Some(((*u)?, (*v)?))).collect();
    par::map(exec, &complete, |(u, v)| wind_speed(u, v)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatTable {
    pub parameters: Vec<Parameter>,
    pub rows: Vec<FlatRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatRow {
    pub time: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    /// In the order of [`FlatTable::parameters`].
    pub values: Vec<Option<f64>>,
}

/// One row per (time, cell): time ascending, then latitude descending, then
/// longitude ascending. Parameter columns are sorted by name.
pub fn flatten_to_table(fields: &[GridField], spec: &GridSpec, exec: Exec) -> Result<FlatTable, WeatherError> {
    spec.validate()?;
    let mut index: BTreeMap<(DateTime<Utc>, Parameter), &GridField> = BTreeMap::new();
    for f in fields {
        f.check_shape(spec)?;
        if index.insert((f.time, f.parameter), f).is_some() {
            return Err(WeatherError::DuplicateField { parameter: f.parameter, time: f.time });
        }
    }
    let mut parameters: Vec<Parameter> = fields.iter().map(|f| f.parameter).collect::<BTreeSet<_>>().into_iter().collect();
    parameters.sort_by_key(|p| p.name());
    let times: Vec<DateTime<Utc>> = fields.iter().map(|f| f.time).collect::<BTreeSet<_>>().into_iter().collect();

    let per_time = par::map(exec, &times, |t| {
        let cols: Vec<Option<&GridField>> = parameters.iter().map(|p| index.get(&(*t, *p)).copied()).collect();
        let mut rows = Vec::with_capacity(spec.cells());
        for j in (0..spec.ny).rev() {
            for i in 0..spec.nx {
                let k = j * spec.nx + i;
                rows.push(FlatRow {
                    time: *t,
                    lat: spec.lat(j),
                    lon: spec.lon(i),
                    values: cols.iter().map(|c| c.and_then(|f| f.values[k])).collect(),
                });
            }
        }
        rows
    });
    Ok(FlatTable { parameters, rows: per_time.into_iter().flatten().collect() })
}

/// Inverse of [`flatten_to_table`]: one field per (parameter, time) that has
/// at least one present value.
pub fn regroup(table: &FlatTable, spec: &GridSpec) -> Vec<GridField> {
    let mut out: BTreeMap<(DateTime<Utc>, Parameter), Vec<Option<f64>>> = BTreeMap::new();
    let per_time = spec.cells();
    for (n, row) in table.rows.iter().enumerate() {
        let k = n % per_time;
        let (jr, i) = (k / spec.nx, k % spec.nx);
        let j = spec.ny - 1 - jr;
        for (p, v) in table.parameters.iter().zip(&row.values) {
            let values = out.entry((row.time, *p)).or_insert_with(|| vec![None; per_time]);
            values[j * spec.nx + i] = *v;
        }
    }
    out.into_iter()
        .filter(|(_, v)| v.iter().any(Option::is_some))
        .map(|((time, parameter), values)| GridField { parameter, time, values })
        .collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerField {
    parameter: Parameter,
    time: DateTime<Utc>,
    values: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    grid: GridSpec,
    fields: Vec<ContainerField>,
}

pub fn parse_container(text: &str) -> Result<(GridSpec, Vec<GridField>), WeatherError> {
    let c: Container = serde_json::from_str(text).map_err(|e| WeatherError::Container(e.to_string()))?;
    c.grid.validate()?;
    let mut fields = Vec::with_capacity(c.fields.len());
    for f in c.fields {
        if f.values.len() != c.grid.ny || f.values.iter().any(|r| r.len() != c.grid.nx) {
            return Err(WeatherError::Shape {
                parameter: f.parameter,
                time: f.time,
                expected: c.grid.cells(),
                found: f.values.iter().map(Vec::len).sum(),
            });
        }
        if let Some(v) = f.values.iter().flatten().flatten().find(|v| !v.is_finite()) {
            return Err(WeatherError::Container(format!("non-finite value {v}")));
        }
        fields.push(GridField { parameter: f.parameter, time: f.time, values: f.values.into_iter().flatten().collect() });
    }
    Ok((c.grid, fields))
}

pub fn load_container(path: &Path) -> Result<(GridSpec, Vec<GridField>), WeatherError> {
    let text = std::fs::read_to_string(path).map_err(|source| WeatherError::Io { path: path.to_path_buf(), source })?;
    parse_container(&text)
}
