//! Tabular Data Package output: CSV resources, a canonical `datapackage.json`
//! descriptor, a `checksums.txt` manifest, validation, version stamping and
//! package diffs.
//!
//! Output is byte-deterministic. CSV is UTF-8 with `,` delimiters, LF line
//! endings and minimal quoting; numbers use the shortest representation that
//! parses back to the same `f64`; datetimes are `YYYY-MM-DDTHH:MM:SSZ`; NA is
//! the empty field. Marker sets live in companion `<field>_marker` columns,
//! declared under the namespaced `gridforge` key of the descriptor together
//! with per-file checksums.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::fsutil::{self, LockFile};
use crate::markers::{self, MarkerSet};
use crate::par::{self, Exec};
use crate::sources::sha256_hex;

pub const DESCRIPTOR: &str = "datapackage.json";
pub const MANIFEST: &str = "checksums.txt";
/// Namespaced descriptor key for extensions.
pub const EXTENSION_KEY: &str = "gridforge";
pub const DATETIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, thiserror::Error)]
pub enum PackageError {
    #[error("package must contain at least one resource")]
    NoResources,
    #[error("duplicate resource name {0:?}")]
    DuplicateResource(String),
    #[error("resource {resource}: duplicate field name {field:?}")]
    DuplicateField { resource: String, field: String },
    #[error("resource {resource}: path {path:?} is not inside the package root")]
    PathOutsidePackage { resource: String, path: String },
    #[error("resource {resource}: marker companion {marker:?} for {field:?} is not in the schema")]
    MissingCompanion { resource: String, field: String, marker: String },
    #[error("resource {resource}: primary key field {field:?} is not in the schema")]
    MissingKeyField { resource: String, field: String },
    #[error("resource {resource} row {row} column {column} ({field}): expected {expected}, got {found}")]
    TypeMismatch { resource: String, row: usize, column: usize, field: String, expected: FieldType, found: String },
    #[error("resource {resource} row {row}: expected {expected} cells, got {found}")]
    RowLength { resource: String, row: usize, expected: usize, found: usize },
    #[error("no {DESCRIPTOR} in {0}")]
    MissingDescriptor(PathBuf),
    #[error("package failed validation:\n{0}")]
    Invalid(ValidationReport),
    #[error("version immutability violated: {id} is registered with content {registered}, new content is {found}")]
    VersionImmutability { id: String, registered: String, found: String },
    #[error("version registry {path}: {message}")]
    Registry { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PackageError + '_ {
    move |source| PackageError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    String,
    Number,
    Integer,
    Boolean,
    Date,
    Datetime,
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldType::String => "string",
            FieldType::Number => "number",
            FieldType::Integer => "integer",
            FieldType::Boolean => "boolean",
            FieldType::Date => "date",
            FieldType::Datetime => "datetime",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maximum: Option<f64>,
    #[serde(default, rename = "enum", skip_serializing_if = "Option::is_none")]
    pub enumeration: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSchema {
    pub name: String,
    #[serde(rename = "type")]
    pub field_type: FieldType,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<Constraints>,
}

impl FieldSchema {
    pub fn new(name: &str, field_type: FieldType, description: &str) -> Self {
        FieldSchema { name: name.into(), field_type, description: description.into(), unit: None, constraints: None }
    }

    pub fn unit(mut self, unit: &str) -> Self {
        self.unit = Some(unit.into());
        self
    }

    pub fn minimum(mut self, min: f64) -> Self {
        self.constraints.get_or_insert_with(Constraints::default).minimum = Some(min);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resource {
    pub name: String,
    /// Relative to the package root, `/`-separated.
    pub path: String,
    pub fields: Vec<FieldSchema>,
    pub primary_key: Vec<String>,
    /// data field -> marker field
    pub marker_companions: BTreeMap<String, String>,
}

impl Resource {
    pub fn new(name: &str, fields: Vec<FieldSchema>) -> Self {
        Resource {
            name: name.into(),
            path: format!("data/{name}.csv"),
            fields,
            primary_key: Vec::new(),
            marker_companions: BTreeMap::new(),
        }
    }

    /// Append a `<field>_marker` companion column for `field`.
    pub fn with_marker(mut self, field: &str) -> Self {
        let marker = format!("{field}_marker");
        self.fields.push(FieldSchema::new(&marker, FieldType::String, &format!("Semicolon-separated processing flags for {field}")));
        self.marker_companions.insert(field.into(), marker);
        self
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    fn marker_fields(&self) -> BTreeSet<&str> {
        self.marker_companions.values().map(String::as_str).collect()
    }

    pub fn validate(&self) -> Result<(), PackageError> {
        let mut seen = BTreeSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(PackageError::DuplicateField { resource: self.name.clone(), field: f.name.clone() });
            }
        }
        if !is_safe_relative(&self.path) {
            return Err(PackageError::PathOutsidePackage { resource: self.name.clone(), path: self.path.clone() });
        }
        for (field, marker) in &self.marker_companions {
            if !seen.contains(field.as_str()) || !seen.contains(marker.as_str()) {
                return Err(PackageError::MissingCompanion { resource: self.name.clone(), field: field.clone(), marker: marker.clone() });
            }
        }
        if let Some(k) = self.primary_key.iter().find(|k| !seen.contains(k.as_str())) {
            return Err(PackageError::MissingKeyField { resource: self.name.clone(), field: k.clone() });
        }
        Ok(())
    }
}

fn is_safe_relative(path: &str) -> bool {
    let p = Path::new(path);
    !path.is_empty() && !path.contains('\\') && p.components().all(|c| matches!(c, Component::Normal(_)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Null,
    String(String),
    Number(f64),
    Integer(i64),
    Boolean(bool),
    Date(NaiveDate),
    DateTime(DateTime<Utc>),
    Markers(MarkerSet),
}

impl Cell {
    fn kind(&self) -> &'static str {
        match self {
            Cell::Null => "NA",
            Cell::String(_) => "string",
            Cell::Number(_) => "number",
            Cell::Integer(_) => "integer",
            Cell::Boolean(_) => "boolean",
            Cell::Date(_) => "date",
            Cell::DateTime(_) => "datetime",
            Cell::Markers(_) => "marker set",
        }
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Null, Cell::Number)
    }
}

/// Shortest representation that parses back to the same value.
pub fn format_number(v: f64) -> String {
    format!("{v:?}")
}

fn render(cell: &Cell, field: &FieldSchema, is_marker: bool) -> Option<String> {
    Some(match (cell, field.field_type) {
        (Cell::Null, _) => String::new(),
        (Cell::Markers(m), FieldType::String) if is_marker => markers::render(m),
        (Cell::String(s), FieldType::String) if !is_marker => s.clone(),
        (Cell::Number(v), FieldType::Number) if v.is_finite() => format_number(*v),
        (Cell::Integer(v), FieldType::Integer) => v.to_string(),
        (Cell::Boolean(v), FieldType::Boolean) => v.to_string(),
        (Cell::Date(d), FieldType::Date) => d.format("%Y-%m-%d").to_string(),
        (Cell::DateTime(t), FieldType::Datetime) => t.format(DATETIME_FORMAT).to_string(),
        _ => return None,
    })
}

fn csv_writer(buf: &mut Vec<u8>) -> csv::Writer<&mut Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).quote_style(csv::QuoteStyle::Necessary).from_writer(buf)
}

/// Serialize rows of one resource. Row numbers in errors are 1-based data rows.
pub fn write_csv(resource: &Resource, rows: &[Vec<Cell>]) -> Result<Vec<u8>, PackageError> {
    let markers = resource.marker_fields();
    let is_marker: Vec<bool> = resource.fields.iter().map(|f| markers.contains(f.name.as_str())).collect();
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        let header: Vec<&str> = resource.fields.iter().map(|f| f.name.as_str()).collect();
        w.write_record(&header).map_err(|e| csv_io(&resource.path, e))?;
        let mut record = Vec::with_capacity(header.len());
        for (r, row) in rows.iter().enumerate() {
            if row.len() != resource.fields.len() {
                return Err(PackageError::RowLength {
                    resource: resource.name.clone(),
                    row: r + 1,
                    expected: resource.fields.len(),
                    found: row.len(),
                });
            }
            record.clear();
            for (c, (cell, field)) in row.iter().zip(&resource.fields).enumerate() {
                let text = render(cell, field, is_marker[c]).ok_or_else(|| PackageError::TypeMismatch {
                    resource: resource.name.clone(),
                    row: r + 1,
                    column: c + 1,
                    field: field.name.clone(),
                    expected: field.field_type,
                    found: match cell {
                        Cell::Number(v) if !v.is_finite() => format!("non-finite number {v}"),
                        other => other.kind().to_string(),
                    },
                })?;
                record.push(text);
            }
            w.write_record(&record).map_err(|e| csv_io(&resource.path, e))?;
        }
        w.flush().map_err(io_err(Path::new(&resource.path)))?;
    }
    Ok(buf)
}

fn csv_io(path: &str, e: csv::Error) -> PackageError {
    PackageError::Io { path: PathBuf::from(path), source: io::Error::other(e.to_string()) }
}

/// Plain decimal or exponent notation; rejects `inf`, `NaN` and friends.
fn parse_number_cell(s: &str) -> Option<f64> {
    let ok =
        s.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'-' | b'+' | b'.' | b'e' | b'E')) && s.bytes().any(|b| b.is_ascii_digit());
    ok.then(|| s.parse::<f64>().ok()).flatten().filter(|v| v.is_finite())
}

fn parse_cell(text: &str, field: &FieldSchema, is_marker: bool) -> Result<Cell, String> {
    if is_marker {
        return markers::parse(text).map(Cell::Markers).map_err(|e| e.to_string());
    }
    if text.is_empty() {
        return Ok(Cell::Null);
    }
    let bad = || format!("{:?} is not a valid {}", text, field.field_type);
    match field.field_type {
        FieldType::String => Ok(Cell::String(text.to_string())),
        FieldType::Number => parse_number_cell(text).map(Cell::Number).ok_or_else(bad),
        FieldType::Integer => text.parse().map(Cell::Integer).map_err(|_| bad()),
        FieldType::Boolean => match text {
            "true" => Ok(Cell::Boolean(true)),
            "false" => Ok(Cell::Boolean(false)),
            _ => Err(bad()),
        },
        FieldType::Date => NaiveDate::parse_from_str(text, "%Y-%m-%d").map(Cell::Date).map_err(|_| bad()),
        FieldType::Datetime => NaiveDateTime::parse_from_str(text, DATETIME_FORMAT).map(|t| Cell::DateTime(t.and_utc())).map_err(|_| bad()),
    }
}

fn check_constraints(cell: &Cell, c: &Constraints) -> Option<String> {
    let v = match cell {
        Cell::Number(v) => Some(*v),
        Cell::Integer(v) => Some(*v as f64),
        _ => None,
    };
    if let (Some(v), Some(min)) = (v, c.minimum) {
        if v < min {
            return Some(format!("{v} is below minimum {min}"));
        }
    }
    if let (Some(v), Some(max)) = (v, c.maximum) {
        if v > max {
            return Some(format!("{v} is above maximum {max}"));
        }
    }
    if let (Cell::String(s), Some(allowed)) = (cell, &c.enumeration) {
        if !allowed.contains(s) {
            return Some(format!("{s:?} is not one of the allowed values"));
        }
    }
    None
}

/// Parse CSV bytes back into typed cells, strictly per the schema.
pub fn parse_csv(resource: &Resource, bytes: &[u8]) -> Result<Vec<Vec<Cell>>, ValidationReport> {
    let mut report = ValidationReport::default();
    let rows = check_table(resource, bytes, &mut report);
    if report.is_empty() {
        Ok(rows)
    } else {
        Err(report)
    }
}

fn csv_reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(bytes)
}

/// Header, type, constraint and marker checks; returns the parsed rows.
fn check_table(resource: &Resource, bytes: &[u8], report: &mut ValidationReport) -> Vec<Vec<Cell>> {
    let path = resource.path.as_str();
    let markers = resource.marker_fields();
    let is_marker: Vec<bool> = resource.fields.iter().map(|f| markers.contains(f.name.as_str())).collect();
    let mut records = csv_reader(bytes).into_byte_records();
    let header = match records.next() {
        None => {
            report.push(Issue::at(path, "missing header row"));
            return Vec::new();
        }
        Some(Err(e)) => {
            report.push(Issue::at(path, format!("unreadable header: {e}")));
            return Vec::new();
        }
        Some(Ok(h)) => h,
    };
    let width = resource.fields.len();
    for k in 0..header.len().max(width) {
        let found = header.get(k).map(String::from_utf8_lossy);
        let expected = resource.fields.get(k).map(|f| f.name.as_str());
        if found.as_deref() != expected {
            report.push(Issue::column(
                path,
                None,
                k + 1,
                format!(
                    "header mismatch at column {}: expected {:?}, found {:?}",
                    k + 1,
                    expected.unwrap_or("<none>"),
                    found.as_deref().unwrap_or("<none>")
                ),
            ));
        }
    }
    let key_columns: Vec<usize> = resource.primary_key.iter().filter_map(|k| resource.field_index(k)).collect();
    let mut first_seen: HashMap<Vec<Vec<u8>>, usize> = HashMap::new();
    let mut rows = Vec::new();
    for (r, rec) in records.enumerate() {
        let row_no = r + 1;
        let rec = match rec {
            Ok(rec) => rec,
            Err(e) => {
                report.push(Issue::row(path, row_no, format!("unreadable row: {e}")));
                continue;
            }
        };
        if rec.len() != width {
            report.push(Issue::row(path, row_no, format!("expected {width} cells, found {}", rec.len())));
            continue;
        }
        let mut row = Vec::with_capacity(width);
        for (c, raw) in rec.iter().enumerate() {
            let field = &resource.fields[c];
            let text = match std::str::from_utf8(raw) {
                Ok(t) => t,
                Err(_) => {
                    report.push(Issue::column(path, Some(row_no), c + 1, "cell is not valid UTF-8".into()));
                    row.push(Cell::Null);
                    continue;
                }
            };
            match parse_cell(text, field, is_marker[c]) {
                Ok(cell) => {
                    if let Some(msg) = field.constraints.as_ref().and_then(|k| check_constraints(&cell, k)) {
                        report.push(Issue::column(path, Some(row_no), c + 1, format!("{}: constraint violated: {msg}", field.name)));
                    }
                    row.push(cell);
                }
                Err(msg) => {
                    let what = if is_marker[c] { "marker" } else { "type" };
                    report.push(Issue::column(path, Some(row_no), c + 1, format!("{}: {what} violation: {msg}", field.name)));
                    row.push(Cell::Null);
                }
            }
        }
        if !key_columns.is_empty() {
            if let Some(&c) = key_columns.iter().find(|&&c| rec[c].is_empty()) {
                report.push(Issue::column(path, Some(row_no), c + 1, format!("{}: primary key is missing", resource.fields[c].name)));
            } else {
                let key: Vec<Vec<u8>> = key_columns.iter().map(|&c| rec[c].to_vec()).collect();
                let first = *first_seen.entry(key).or_insert(row_no);
                if first != row_no {
                    report.push(Issue::row(path, row_no, format!("duplicate primary key (first at row {first})")));
                }
            }
        }
        rows.push(row);
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Issue {
    /// File the issue is in, relative to the package root.
    pub path: String,
    /// 1-based data row (header excluded).
    pub row: Option<usize>,
    /// 1-based column.
    pub column: Option<usize>,
    pub message: String,
}

impl Issue {
    fn at(path: &str, message: impl Into<String>) -> Self {
        Issue { path: path.into(), row: None, column: None, message: message.into() }
    }

    fn row(path: &str, row: usize, message: String) -> Self {
        Issue { row: Some(row), ..Issue::at(path, message) }
    }

    fn column(path: &str, row: Option<usize>, column: usize, message: String) -> Self {
        Issue { row, column: Some(column), ..Issue::at(path, message) }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path)?;
        if let Some(r) = self.row {
            write!(f, " row {r}")?;
        }
        if let Some(c) = self.column {
            write!(f, " column {c}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, issue: Issue) {
        self.issues.push(issue);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.issues {
            writeln!(f, "{i}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub title: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackageMeta {
    pub name: String,
    pub title: String,
    pub version: String,
    pub created: DateTime<Utc>,
    pub sources: Vec<SourceRef>,
    pub contributors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SchemaDoc {
    fields: Vec<FieldSchema>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    primary_key: Vec<String>,
    #[serde(default)]
    missing_values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResourceDoc {
    name: String,
    path: String,
    #[serde(default)]
    profile: String,
    #[serde(default)]
    format: String,
    #[serde(default)]
    mediatype: String,
    #[serde(default)]
    encoding: String,
    schema: SchemaDoc,
}

impl ResourceDoc {
    fn from_resource(r: &Resource) -> Self {
        ResourceDoc {
            name: r.name.clone(),
            path: r.path.clone(),
            profile: "tabular-data-resource".into(),
            format: "csv".into(),
            mediatype: "text/csv".into(),
            encoding: "utf-8".into(),
            schema: SchemaDoc { fields: r.fields.clone(), primary_key: r.primary_key.clone(), missing_values: vec![String::new()] },
        }
    }

    fn into_resource(self, companions: BTreeMap<String, String>) -> Resource {
        Resource {
            name: self.name,
            path: self.path,
            fields: self.schema.fields,
            primary_key: self.schema.primary_key,
            marker_companions: companions,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Extension {
    #[serde(default)]
    marker_companions: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    checksums: BTreeMap<String, String>,
}

/// Rebuild every object with keys inserted in sorted order, so output is
/// sorted whether or not serde_json preserves insertion order.
fn canonical(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, canonical(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonical).collect()),
        other => other,
    }
}

/// Sorted keys, two-space indentation, trailing LF.
pub fn to_canonical_json(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(&canonical(v.clone())).expect("json value serializes");
    s.push('\n');
    s
}

fn check_resources(resources: &[Resource]) -> Result<(), PackageError> {
    if resources.is_empty() {
        return Err(PackageError::NoResources);
    }
    let mut names = BTreeSet::new();
    for r in resources {
        if !names.insert(r.name.as_str()) {
            return Err(PackageError::DuplicateResource(r.name.clone()));
        }
        r.validate()?;
    }
    Ok(())
}

/// Descriptor text for `resources`. `checksums` maps package-relative paths
/// to SHA-256 hex digests.
pub fn build_descriptor(resources: &[Resource], meta: &PackageMeta, checksums: &BTreeMap<String, String>) -> Result<String, PackageError> {
    check_resources(resources)?;
    let ext = Extension {
        marker_companions: resources
            .iter()
            .filter(|r| !r.marker_companions.is_empty())
            .map(|r| (r.name.clone(), r.marker_companions.clone()))
            .collect(),
        checksums: checksums.clone(),
    };
    let doc = json!({
        "profile": "tabular-data-package",
        "name": meta.name,
        "title": meta.title,
        "version": meta.version,
        "created": meta.created.format(DATETIME_FORMAT).to_string(),
        "sources": meta.sources,
        "contributors": meta.contributors.iter().map(|c| json!({"title": c})).collect::<Vec<_>>(),
        "resources": resources.iter().map(ResourceDoc::from_resource).collect::<Vec<_>>(),
        EXTENSION_KEY: ext,
    });
    Ok(to_canonical_json(&doc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceData {
    pub resource: Resource,
    pub rows: Vec<Vec<Cell>>,
}

/// A non-tabular file shipped with the package (reports and the like).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraFile {
    pub path: String,
    pub bytes: Vec<u8>,
}

fn manifest_text(digests: &BTreeMap<String, String>) -> String {
    digests.iter().map(|(p, d)| format!("{p} {d}\n")).collect()
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>, (usize, String)> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let Some((path, digest)) = line.rsplit_once(' ') else {
            return Err((n + 1, format!("malformed line {line:?}")));
        };
        if out.insert(path.to_string(), digest.to_string()).is_some() {
            return Err((n + 1, format!("duplicate entry for {path}")));
        }
    }
    Ok(out)
}

fn write_file(root: &Path, rel: &str, bytes: &[u8]) -> Result<(), PackageError> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&path, bytes).map_err(io_err(&path))
}

/// Write a complete package into `dir` and return the manifest digests.
pub fn write_package(
    dir: &Path,
    meta: &PackageMeta,
    data: &[ResourceData],
    extras: &[ExtraFile],
    exec: Exec,
) -> Result<BTreeMap<String, String>, PackageError> {
    let resources: Vec<Resource> = data.iter().map(|d| d.resource.clone()).collect();
    check_resources(&resources)?;
    if let Some(e) = extras.iter().find(|e| !is_safe_relative(&e.path)) {
        return Err(PackageError::PathOutsidePackage { resource: e.path.clone(), path: e.path.clone() });
    }
    let bodies: Vec<Vec<u8>> = par::map(exec, data, |d| write_csv(&d.resource, &d.rows)).into_iter().collect::<Result<_, _>>()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut digests = BTreeMap::new();
    for (d, body) in data.iter().zip(&bodies) {
        write_file(dir, &d.resource.path, body)?;
        digests.insert(d.resource.path.clone(), sha256_hex(body));
    }
    for e in extras {
        write_file(dir, &e.path, &e.bytes)?;
        digests.insert(e.path.clone(), sha256_hex(&e.bytes));
    }
    let descriptor = build_descriptor(&resources, meta, &digests)?;
    write_file(dir, DESCRIPTOR, descriptor.as_bytes())?;
    digests.insert(DESCRIPTOR.to_string(), sha256_hex(descriptor.as_bytes()));
    write_file(dir, MANIFEST, manifest_text(&digests).as_bytes())?;
    Ok(digests)
}

/// A package as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDescriptor {
    pub name: String,
    pub version: String,
    pub resources: Vec<Resource>,
    pub checksums: BTreeMap<String, String>,
    pub raw: Value,
}

fn read_descriptor(dir: &Path) -> Result<Vec<u8>, PackageError> {
    if !dir.is_dir() {
        return Err(PackageError::MissingDescriptor(dir.to_path_buf()));
    }
    let path = dir.join(DESCRIPTOR);
    match fs::read(&path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(PackageError::MissingDescriptor(dir.to_path_buf())),
        Err(e) => Err(io_err(&path)(e)),
    }
}

/// Interpret descriptor JSON; problems are reported, not fatal.
fn interpret_descriptor(bytes: &[u8], report: &mut ValidationReport) -> Option<LoadedDescriptor> {
    let raw: Value = match serde_json::from_slice(bytes) {
        Ok(v) => v,
        Err(e) => {
            report.push(Issue::at(DESCRIPTOR, format!("descriptor does not parse: {e}")));
            return None;
        }
    };
    let text_field = |key: &str, report: &mut ValidationReport| match raw.get(key).and_then(Value::as_str) {
        Some(s) if !s.is_empty() => s.to_string(),
        _ => {
            report.push(Issue::at(DESCRIPTOR, format!("missing or empty {key:?}")));
            String::new()
        }
    };
    let name = text_field("name", report);
    let version = text_field("version", report);
    if raw.get("profile").and_then(Value::as_str) != Some("tabular-data-package") {
        report.push(Issue::at(DESCRIPTOR, "profile is not \"tabular-data-package\""));
    }
    if let Some(created) = raw.get("created").and_then(Value::as_str) {
        if NaiveDateTime::parse_from_str(created, DATETIME_FORMAT).is_err() {
            report.push(Issue::at(DESCRIPTOR, format!("created {created:?} is not a UTC timestamp")));
        }
    }
    let ext: Extension = match raw.get(EXTENSION_KEY) {
        None => Extension::default(),
        Some(v) => serde_json::from_value(v.clone()).unwrap_or_else(|e| {
            report.push(Issue::at(DESCRIPTOR, format!("{EXTENSION_KEY}: {e}")));
            Extension::default()
        }),
    };
    let docs = raw.get("resources").and_then(Value::as_array).cloned().unwrap_or_default();
    if docs.is_empty() {
        report.push(Issue::at(DESCRIPTOR, "package must contain at least one resource"));
    }
    let mut resources = Vec::new();
    let mut names = BTreeSet::new();
    for (k, doc) in docs.into_iter().enumerate() {
        let label = doc.get("name").and_then(Value::as_str).unwrap_or("?").to_string();
        let doc: ResourceDoc = match serde_json::from_value(doc) {
            Ok(d) => d,
            Err(e) => {
                report.push(Issue::at(DESCRIPTOR, format!("resource {} ({label}): {e}", k + 1)));
                continue;
            }
        };
        if !names.insert(doc.name.clone()) {
            report.push(Issue::at(DESCRIPTOR, format!("duplicate resource name {:?}", doc.name)));
        }
        let companions = ext.marker_companions.get(&doc.name).cloned().unwrap_or_default();
        let resource = doc.into_resource(companions);
        if let Err(e) = resource.validate() {
            report.push(Issue::at(DESCRIPTOR, e.to_string()));
            continue;
        }
        resources.push(resource);
    }
    for r in ext.marker_companions.keys() {
        if !names.contains(r) {
            report.push(Issue::at(DESCRIPTOR, format!("marker companions declared for unknown resource {r:?}")));
        }
    }
    Some(LoadedDescriptor { name, version, resources, checksums: ext.checksums, raw })
}

pub fn load_descriptor(dir: &Path) -> Result<(LoadedDescriptor, ValidationReport), PackageError> {
    let bytes = read_descriptor(dir)?;
    let mut report = ValidationReport::default();
    match interpret_descriptor(&bytes, &mut report) {
        Some(d) => Ok((d, report)),
        None => Err(PackageError::Invalid(report)),
    }
}

fn read_member(dir: &Path, rel: &str) -> Result<Option<Vec<u8>>, Issue> {
    if !is_safe_relative(rel) {
        return Err(Issue::at(rel, "path is not inside the package root"));
    }
    match fs::read(dir.join(rel)) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Issue::at(rel, format!("unreadable: {e}"))),
    }
}

/// Check a package directory. `Err` only when there is no descriptor to check.
pub fn validate_package(dir: &Path) -> Result<ValidationReport, PackageError> {
    validate_package_with(dir, Exec::default())
}

pub fn validate_package_with(dir: &Path, exec: Exec) -> Result<ValidationReport, PackageError> {
    let bytes = read_descriptor(dir)?;
    let mut report = ValidationReport::default();
    let Some(desc) = interpret_descriptor(&bytes, &mut report) else {
        return Ok(report);
    };

    let per_resource = par::map(exec, &desc.resources, |r| {
        let mut local = ValidationReport::default();
        match read_member(dir, &r.path) {
            Err(issue) => local.push(issue),
            Ok(None) => local.push(Issue::at(&r.path, format!("resource {:?}: file is missing", r.name))),
            Ok(Some(body)) => {
                check_table(r, &body, &mut local);
                match desc.checksums.get(&r.path) {
                    None => local.push(Issue::at(&r.path, "not covered by descriptor checksums")),
                    Some(d) if *d != sha256_hex(&body) => local.push(Issue::at(&r.path, "checksum mismatch against descriptor")),
                    Some(_) => {}
                }
            }
        }
        local
    });
    for r in per_resource {
        report.issues.extend(r.issues);
    }

    for (path, digest) in &desc.checksums {
        if desc.resources.iter().any(|r| &r.path == path) {
            continue;
        }
        match read_member(dir, path) {
            Err(issue) => report.push(issue),
            Ok(None) => report.push(Issue::at(path, "listed in descriptor checksums but missing")),
            Ok(Some(b)) if sha256_hex(&b) != *digest => report.push(Issue::at(path, "checksum mismatch against descriptor")),
            Ok(Some(_)) => {}
        }
    }

    match fs::read(dir.join(MANIFEST)) {
        Err(_) => report.push(Issue::at(MANIFEST, "manifest is missing")),
        Ok(text) => match parse_manifest(&String::from_utf8_lossy(&text)) {
            Err((line, msg)) => report.push(Issue::row(MANIFEST, line, msg)),
            Ok(manifest) => {
                let mut required: BTreeSet<&str> = desc.checksums.keys().map(String::as_str).collect();
                required.insert(DESCRIPTOR);
                for r in &desc.resources {
                    required.insert(&r.path);
                }
                for p in required {
                    if !manifest.contains_key(p) {
                        report.push(Issue::at(MANIFEST, format!("no entry for {p}")));
                    }
                }
                for (path, digest) in &manifest {
                    match read_member(dir, path) {
                        Err(issue) => report.push(issue),
                        Ok(None) => report.push(Issue::at(MANIFEST, format!("{path} is listed but missing"))),
                        Ok(Some(b)) if sha256_hex(&b) != *digest => {
                            report.push(Issue::at(MANIFEST, format!("checksum mismatch for {path}")))
                        }
                        Ok(Some(_)) => {}
                    }
                }
            }
        },
    }
    report.issues.sort();
    report.issues.dedup();
    Ok(report)
}

/// Read one resource's rows back, typed per schema.
pub fn read_resource(dir: &Path, resource: &Resource) -> Result<Vec<Vec<Cell>>, PackageError> {
    let path = dir.join(&resource.path);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    parse_csv(resource, &bytes).map_err(PackageError::Invalid)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stamp {
    /// `name/version`
    pub identifier: String,
    pub content_hash: String,
    pub newly_registered: bool,
}

/// Record `version` in the package and register its content hash in the
/// write-once registry at `registry`. The content hash is the SHA-256 of the
/// manifest, which covers every file including the descriptor.
pub fn version_stamp(dir: &Path, version: &str, registry: &Path) -> Result<Stamp, PackageError> {
    let report = validate_package(dir)?;
    if !report.is_empty() {
        return Err(PackageError::Invalid(report));
    }
    let (desc, _) = load_descriptor(dir)?;
    let mut raw = desc.raw.clone();
    raw["version"] = Value::String(version.to_string());
    let descriptor = to_canonical_json(&raw);
    let manifest_path = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut digests = parse_manifest(&manifest)
        .map_err(|(line, message)| PackageError::Registry { path: manifest_path.clone(), message: format!("line {line}: {message}") })?;
    digests.insert(DESCRIPTOR.to_string(), sha256_hex(descriptor.as_bytes()));
    let manifest = manifest_text(&digests);
    let content_hash = sha256_hex(manifest.as_bytes());
    let identifier = format!("{}/{}", desc.name, version);

    let newly_registered = register(registry, &identifier, &content_hash)?;
    if descriptor.as_bytes() != read_descriptor(dir)?.as_slice() {
        write_file(dir, DESCRIPTOR, descriptor.as_bytes())?;
        write_file(dir, MANIFEST, manifest.as_bytes())?;
    }
    Ok(Stamp { identifier, content_hash, newly_registered })
}

pub fn read_registry(registry: &Path) -> Result<BTreeMap<String, String>, PackageError> {
    match fs::read(registry) {
        Ok(b) => serde_json::from_slice(&b).map_err(|e| PackageError::Registry { path: registry.to_path_buf(), message: e.to_string() }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(io_err(registry)(e)),
    }
}

/// Returns whether the identifier was new. Same hash again is a no-op.
fn register(registry: &Path, identifier: &str, hash: &str) -> Result<bool, PackageError> {
    if let Some(parent) = registry.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let lock_path = registry.with_extension("lock");
    let _lock = LockFile::acquire(&lock_path).map_err(io_err(&lock_path))?;
    let mut entries = read_registry(registry)?;
    match entries.get(identifier) {
        Some(existing) if existing == hash => Ok(false),
        Some(existing) => {
            Err(PackageError::VersionImmutability { id: identifier.to_string(), registered: existing.clone(), found: hash.to_string() })
        }
        None => {
            entries.insert(identifier.to_string(), hash.to_string());
            let text = to_canonical_json(&serde_json::to_value(&entries).expect("registry serializes"));
            fsutil::write_atomic(registry, text.as_bytes()).map_err(io_err(registry))?;
            Ok(true)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CellChange {
    /// Row key (primary key values) or 1-based row number.
    pub row: String,
    pub column: String,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ResourceDiff {
    pub resource: String,
    pub schema_changes: Vec<String>,
    pub changed: usize,
    pub added: usize,
    pub removed: usize,
    /// First changes, capped.
    pub changes: Vec<CellChange>,
}

impl ResourceDiff {
    fn is_empty(&self) -> bool {
        self.schema_changes.is_empty() && self.changed == 0 && self.added == 0 && self.removed == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct PackageDiff {
    pub package_changes: Vec<String>,
    pub resources: Vec<ResourceDiff>,
}

impl PackageDiff {
    pub fn is_empty(&self) -> bool {
        self.package_changes.is_empty() && self.resources.is_empty()
    }
}

impl fmt::Display for PackageDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.package_changes {
            writeln!(f, "{c}")?;
        }
        for r in &self.resources {
            let plural = |n: usize| if n == 1 { "" } else { "s" };
            writeln!(f, "{}: {} cell{} changed, {} added, {} removed", r.resource, r.changed, plural(r.changed), r.added, r.removed)?;
            for s in &r.schema_changes {
                writeln!(f, "  schema: {s}")?;
            }
            for c in &r.changes {
                writeln!(f, "  row {} column {}: {:?} -> {:?}", c.row, c.column, c.before, c.after)?;
            }
        }
        Ok(())
    }
}

pub const MAX_LISTED_CHANGES: usize = 50;

type Rows = (Vec<String>, Vec<Vec<String>>);

fn read_rows(dir: &Path, r: &Resource) -> Result<Rows, PackageError> {
    let path = dir.join(&r.path);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for rec in csv_reader(&bytes).into_records() {
        let rec = rec.map_err(|e| csv_io(&r.path, e))?;
        out.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
    }
    let header = if out.is_empty() { Vec::new() } else { out.remove(0) };
    Ok((header, out))
}

fn keyed(header: &[String], rows: &[Vec<String>], key: &[String]) -> Option<BTreeMap<String, usize>> {
    let idx: Vec<usize> = key.iter().map(|k| header.iter().position(|h| h == k)).collect::<Option<_>>()?;
    let mut out = BTreeMap::new();
    for (n, row) in rows.iter().enumerate() {
        let k = idx.iter().map(|&i| row.get(i).map_or("", String::as_str)).collect::<Vec<_>>().join("|");
        if out.insert(k, n).is_some() {
            return None;
        }
    }
    Some(out)
}

fn diff_resource(a_dir: &Path, a: &Resource, b_dir: &Path, b: &Resource) -> Result<ResourceDiff, PackageError> {
    let mut d = ResourceDiff { resource: a.name.clone(), ..Default::default() };
    let a_fields: BTreeMap<&str, &FieldSchema> = a.fields.iter().map(|f| (f.name.as_str(), f)).collect();
    let b_fields: BTreeMap<&str, &FieldSchema> = b.fields.iter().map(|f| (f.name.as_str(), f)).collect();
    for (name, fa) in &a_fields {
        match b_fields.get(name) {
            None => d.schema_changes.push(format!("field {name:?} removed")),
            Some(fb) if fa.field_type != fb.field_type => {
                d.schema_changes.push(format!("field {name:?} type {} -> {}", fa.field_type, fb.field_type))
            }
            Some(fb) if fa != fb => d.schema_changes.push(format!("field {name:?} metadata changed")),
            Some(_) => {}
        }
    }
    for name in b_fields.keys().filter(|n| !a_fields.contains_key(*n)) {
        d.schema_changes.push(format!("field {name:?} added"));
    }
    if a.path != b.path {
        d.schema_changes.push(format!("path {:?} -> {:?}", a.path, b.path));
    }

    let (ha, ra) = read_rows(a_dir, a)?;
    let (hb, rb) = read_rows(b_dir, b)?;
    let pairs: Vec<(String, Option<usize>, Option<usize>)> = match (a.primary_key == b.primary_key && !a.primary_key.is_empty())
        .then(|| Some((keyed(&ha, &ra, &a.primary_key)?, keyed(&hb, &rb, &b.primary_key)?)))
        .flatten()
    {
        Some((ka, kb)) => {
            let keys: BTreeSet<&String> = ka.keys().chain(kb.keys()).collect();
            keys.into_iter().map(|k| (k.clone(), ka.get(k).copied(), kb.get(k).copied())).collect()
        }
        None => {
            (0..ra.len().max(rb.len())).map(|n| ((n + 1).to_string(), (n < ra.len()).then_some(n), (n < rb.len()).then_some(n))).collect()
        }
    };
    let cols_a: BTreeMap<&str, usize> = ha.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let cols_b: BTreeMap<&str, usize> = hb.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let get = |rows: &[Vec<String>], n: usize, c: usize| rows[n].get(c).cloned().unwrap_or_default();
    for (label, ia, ib) in pairs {
        match (ia, ib) {
            (Some(ia), Some(ib)) => {
                for (col, &ca) in &cols_a {
                    match cols_b.get(col) {
                        Some(&cb) => {
                            let (before, after) = (get(&ra, ia, ca), get(&rb, ib, cb));
                            if before != after {
                                d.changed += 1;
                                if d.changes.len() < MAX_LISTED_CHANGES {
                                    d.changes.push(CellChange { row: label.clone(), column: col.to_string(), before, after });
                                }
                            }
                        }
                        None => d.removed += 1,
                    }
                }
                d.added += cols_b.keys().filter(|c| !cols_a.contains_key(*c)).count();
            }
            (Some(_), None) => d.removed += cols_a.len(),
            (None, Some(_)) => d.added += cols_b.len(),
            (None, None) => {}
        }
    }
    Ok(d)
}

/// Per-resource cell and schema differences from package `a` to package `b`.
/// Rows are aligned by primary key when both sides declare the same unique
/// key, by position otherwise.
pub fn diff_packages(a_dir: &Path, b_dir: &Path) -> Result<PackageDiff, PackageError> {
    let mut out = PackageDiff::default();
    let mut loaded = Vec::new();
    for dir in [a_dir, b_dir] {
        let report = validate_package(dir)?;
        if !report.is_empty() {
            return Err(PackageError::Invalid(report));
        }
        loaded.push(load_descriptor(dir)?.0);
    }
    let (a, b) = (&loaded[0], &loaded[1]);
    if a.name != b.name {
        out.package_changes.push(format!("name {:?} -> {:?}", a.name, b.name));
    }
    if a.version != b.version {
        out.package_changes.push(format!("version {:?} -> {:?}", a.version, b.version));
    }
    let rb: BTreeMap<&str, &Resource> = b.resources.iter().map(|r| (r.name.as_str(), r)).collect();
    let ra: BTreeMap<&str, &Resource> = a.resources.iter().map(|r| (r.name.as_str(), r)).collect();
    for (name, r) in &ra {
        match rb.get(name) {
            None => out.package_changes.push(format!("resource {name:?} removed")),
            Some(other) => {
                let d = diff_resource(a_dir, r, b_dir, other)?;
                if !d.is_empty() {
                    out.resources.push(d);
                }
            }
        }
    }
    for name in rb.keys().filter(|n| !ra.contains_key(*n)) {
        out.package_changes.push(format!("resource {name:?} added"));
    }
    Ok(out)
}
