//! Source descriptors, dialect-aware table parsing and the snapshot cache.
//!
//! A [`SourceDescriptor`] is a declarative JSON file that says how to read one
//! original input: its CSV dialect, which source columns to keep (and what to
//! call them), and the timezone its local timestamps are in. Raw bytes are
//! first stored in a content-addressed [`Cache`]; every later stage reads from
//! there only.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    DescriptorSyntax { path: PathBuf, line: usize, column: usize, message: String },
    #[error("invalid descriptor {id:?}: {message}")]
    InvalidDescriptor { id: String, message: String },
    #[error("invalid dialect: {0}")]
    InvalidDialect(String),
    #[error("invalid timezone {0:?}")]
    InvalidTimezone(String),
    #[error("duplicate canonical column {0:?}")]
    DuplicateCanonicalColumn(String),
    #[error("bytes are not valid {encoding} at byte offset {offset}")]
    Undecodable { encoding: &'static str, offset: usize },
    #[error("ragged row {row}: expected {expected} cells, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("mapped column {0:?} missing from header")]
    MissingColumn(String),
    #[error("table has fewer than {0} header rows")]
    MissingHeader(usize),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("cannot serialize NA: dialect has no NA token")]
    NoNaToken,
    #[error("hash collision on {hash}: stored bytes differ from new bytes")]
    HashCollision { hash: String },
    #[error("cached file {path} does not match its recorded hash")]
    CorruptCache { path: PathBuf },
    #[error("source {0:?} not found in cache")]
    NotCached(String),
    #[error("cache index is malformed: {0}")]
    BadIndex(String),
    #[error("fetch of {origin} failed: {message}")]
    Fetch { origin: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SourceError + '_ {
    move |source| SourceError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "utf-8", alias = "UTF-8", alias = "utf8")]
    Utf8,
    #[serde(rename = "latin-1", alias = "Latin-1", alias = "iso-8859-1", alias = "latin1")]
    Latin1,
}

impl Encoding {
    fn name(self) -> &'static str {
        match self {
            Encoding::Utf8 => "UTF-8",
            Encoding::Latin1 => "Latin-1",
        }
    }
}

fn default_header_rows() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialect {
    pub delimiter: char,
    pub decimal_separator: char,
    #[serde(default)]
    pub thousands_separator: Option<char>,
    pub encoding: Encoding,
    #[serde(default = "default_header_rows")]
    pub header_rows: usize,
    #[serde(default)]
    pub na_tokens: BTreeSet<String>,
}

impl Default for Dialect {
    fn default() -> Self {
        Dialect {
            delimiter: ',',
            decimal_separator: '.',
            thousands_separator: None,
            encoding: Encoding::Utf8,
            header_rows: 1,
            na_tokens: [String::new()].into_iter().collect(),
        }
    }
}

impl Dialect {
    pub fn validate(&self) -> Result<(), SourceError> {
        if !self.delimiter.is_ascii() || matches!(self.delimiter, '"' | '\n' | '\r') {
            return Err(SourceError::InvalidDialect(format!(
                "delimiter {:?} must be a single ASCII character other than quote or newline",
                self.delimiter
            )));
        }
        if !matches!(self.decimal_separator, '.' | ',') {
            return Err(SourceError::InvalidDialect(format!("decimal separator must be '.' or ',', got {:?}", self.decimal_separator)));
        }
        if self.delimiter == self.decimal_separator {
            return Err(SourceError::InvalidDialect("delimiter equals decimal separator".into()));
        }
        if self.thousands_separator == Some(self.decimal_separator) {
            return Err(SourceError::InvalidDialect("thousands separator equals decimal separator".into()));
        }
        Ok(())
    }

    pub fn is_na(&self, cell: &str) -> bool {
        self.na_tokens.contains(cell)
    }
}

/// `(source column name, canonical column name)`, in output order.
pub type ColumnMap = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDescriptor {
    pub id: String,
    pub origin: String,
    pub dialect: Dialect,
    pub column_map: ColumnMap,
    #[serde(default)]
    pub vocab_map_id: Option<String>,
    pub timezone: String,
    #[serde(default)]
    pub notes: String,
}

impl SourceDescriptor {
    pub fn validate(&self) -> Result<(), SourceError> {
        if self.id.trim().is_empty() {
            return Err(SourceError::InvalidDescriptor { id: self.id.clone(), message: "id must be non-empty".into() });
        }
        self.dialect.validate()?;
        self.tz()?;
        let mut seen = HashSet::new();
        for (_, canonical) in &self.column_map {
            if !seen.insert(canonical.as_str()) {
                return Err(SourceError::DuplicateCanonicalColumn(canonical.clone()));
            }
        }
        Ok(())
    }

    pub fn tz(&self) -> Result<Tz, SourceError> {
        Tz::from_str(&self.timezone).map_err(|_| SourceError::InvalidTimezone(self.timezone.clone()))
    }

    /// Resolve `origin` against a base directory when it is a relative local path.
    pub fn origin_path(&self, base: &Path) -> Option<PathBuf> {
        if is_remote(&self.origin) {
            return None;
        }
        let p = Path::new(&self.origin);
        Some(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
    }
}

pub fn is_remote(origin: &str) -> bool {
    origin.starts_with("http://") || origin.starts_with("https://")
}

pub fn parse_descriptor(text: &str, path: &Path) -> Result<SourceDescriptor, SourceError> {
    let desc: SourceDescriptor = serde_json::from_str(text).map_err(|e| SourceError::DescriptorSyntax {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    desc.validate()?;
    Ok(desc)
}

pub fn load_descriptor(path: &Path) -> Result<SourceDescriptor, SourceError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_descriptor(&text, path)
}

/// Canonical string table. NA is already resolved to `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub source_id: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

impl RawTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<impl Iterator<Item = Option<&str>> + '_> {
        let idx = self.column_index(name)?;
        Some(self.rows.iter().map(move |r| r[idx].as_deref()))
    }
}

pub fn decode(bytes: &[u8], encoding: Encoding) -> Result<String, SourceError> {
    match encoding {
        Encoding::Utf8 => {
            let body = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
            let bom = bytes.len() - body.len();
            std::str::from_utf8(body)
                .map(str::to_owned)
                .map_err(|e| SourceError::Undecodable { encoding: encoding.name(), offset: bom + e.valid_up_to() })
        }
        // Latin-1 maps every byte to the code point of the same value.
        Encoding::Latin1 => Ok(bytes.iter().map(|&b| b as char).collect()),
    }
}

fn encode(text: &str, encoding: Encoding) -> Vec<u8> {
    match encoding {
        Encoding::Utf8 => text.as_bytes().to_vec(),
        Encoding::Latin1 => text.chars().map(|c| u8::try_from(u32::from(c)).unwrap_or(b'?')).collect(),
    }
}

/// Parse a delimited table. Header rows are consumed (the last one names the
/// columns; with zero header rows, columns are named by 0-based position),
/// mapped columns are renamed, unmapped ones dropped, and NA tokens resolved.
/// Values are never coerced here.
pub fn parse_table(bytes: &[u8], dialect: &Dialect, column_map: &[(String, String)], source_id: &str) -> Result<RawTable, SourceError> {
    dialect.validate()?;
    let text = decode(bytes, dialect.encoding)?;
    let mut reader =
        csv::ReaderBuilder::new().delimiter(dialect.delimiter as u8).has_headers(false).flexible(true).from_reader(text.as_bytes());

    let mut header: Option<Vec<String>> = None;
    let mut width: Option<usize> = None;
    let mut selected: Vec<usize> = Vec::new();
    let mut rows = Vec::new();

    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| SourceError::Csv(e.to_string()))?;
        if idx < dialect.header_rows {
            if idx + 1 == dialect.header_rows {
                header = Some(record.iter().map(|s| s.trim().to_string()).collect());
                width = Some(record.len());
            }
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if header.is_none() {
            header = Some((0..expected).map(|i| i.to_string()).collect());
        }
        if selected.is_empty() && !column_map.is_empty() {
            selected = select_columns(header.as_deref().unwrap_or_default(), column_map)?;
        }
        if record.len() != expected {
            return Err(SourceError::RaggedRow { row: idx, expected, found: record.len() });
        }
        rows.push(
            selected
                .iter()
                .map(|&c| {
                    let cell = &record[c];
                    (!dialect.is_na(cell)).then(|| cell.to_string())
                })
                .collect(),
        );
    }

    if dialect.header_rows > 0 && header.is_none() {
        return Err(SourceError::MissingHeader(dialect.header_rows));
    }
    if rows.is_empty() {
        // Still report missing columns on header-only tables.
        select_columns(header.as_deref().unwrap_or_default(), column_map)?;
    }
    Ok(RawTable { source_id: source_id.to_string(), columns: column_map.iter().map(|(_, c)| c.clone()).collect(), rows })
}

fn select_columns(header: &[String], column_map: &[(String, String)]) -> Result<Vec<usize>, SourceError> {
    column_map.iter().map(|(src, _)| header.iter().position(|h| h == src).ok_or_else(|| SourceError::MissingColumn(src.clone()))).collect()
}

/// Serialize a table in the given dialect with a single header row. NA cells
/// are written as the dialect's first (lexicographically smallest) NA token.
pub fn write_table(table: &RawTable, dialect: &Dialect) -> Result<Vec<u8>, SourceError> {
    dialect.validate()?;
    let needs_na = table.rows.iter().flatten().any(Option::is_none);
    let na = match dialect.na_tokens.iter().next() {
        Some(t) => t.as_str(),
        None if needs_na => return Err(SourceError::NoNaToken),
        None => "",
    };
    let mut writer =
        csv::WriterBuilder::new().delimiter(dialect.delimiter as u8).terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    writer.write_record(&table.columns).map_err(|e| SourceError::Csv(e.to_string()))?;
    for row in &table.rows {
        writer.write_record(row.iter().map(|c| c.as_deref().unwrap_or(na))).map_err(|e| SourceError::Csv(e.to_string()))?;
    }
    let text = writer.into_inner().map_err(|e| SourceError::Csv(e.to_string()))?;
    Ok(encode(&String::from_utf8(text).expect("csv writer emits utf-8"), dialect.encoding))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a number: {0:?}")]
pub struct NumberError(pub String);

/// Parse a numeric cell. NA stays NA; `"0"` is zero, never NA.
pub fn parse_number(cell: Option<&str>, dialect: &Dialect) -> Result<Option<f64>, NumberError> {
    let Some(raw) = cell else { return Ok(None) };
    let bad = || NumberError(raw.to_string());
    let trimmed = raw.trim();
    let mut normalized = String::with_capacity(trimmed.len());
    for c in trimmed.chars() {
        if Some(c) == dialect.thousands_separator {
            continue;
        }
        normalized.push(if c == dialect.decimal_separator { '.' } else { c });
    }
    if !is_plain_decimal(&normalized) {
        return Err(bad());
    }
    let value: f64 = normalized.parse().map_err(|_| bad())?;
    if !value.is_finite() {
        return Err(bad());
    }
    Ok(Some(value))
}

/// Accepts `[+-]digits[.digits][(e|E)[+-]digits]` with at least one mantissa
/// digit; rejects `inf`, `nan` and friends that `f64::from_str` would take.
fn is_plain_decimal(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    if matches!(b.first(), Some(b'+' | b'-')) {
        i += 1;
    }
    let mut digits = 0;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
        digits += 1;
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
            digits += 1;
        }
    }
    if digits == 0 {
        return false;
    }
    if i < b.len() && matches!(b[i], b'e' | b'E') {
        i += 1;
        if matches!(b.get(i), Some(b'+' | b'-')) {
            i += 1;
        }
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return false;
        }
    }
    i == b.len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub source_id: String,
    pub retrieved_at: DateTime<Utc>,
    pub content_hash: String,
    /// Relative to the cache directory.
    pub stored_path: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheIndex {
    entries: Vec<CacheEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content-addressed store of original input bytes.
///
/// Layout: `<dir>/<source_id>/<sha256>.raw` plus `<dir>/index.json`. Stored
/// files are written once via atomic rename and never modified.
#[derive(Debug, Clone)]
pub struct Cache {
    dir: PathBuf,
}

struct IndexLock {
    path: PathBuf,
}

impl Drop for IndexLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Cache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Cache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn index_path(&self) -> PathBuf {
        self.dir.join("index.json")
    }

    fn lock(&self) -> Result<IndexLock, SourceError> {
        let path = self.dir.join("index.lock");
        for _ in 0..2000 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(IndexLock { path }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        Err(SourceError::Io { path, source: io::Error::new(io::ErrorKind::TimedOut, "cache index lock held too long") })
    }

    fn read_index(&self) -> Result<CacheIndex, SourceError> {
        let path = self.index_path();
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| SourceError::BadIndex(e.to_string())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(CacheIndex::default()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn write_index(&self, index: &CacheIndex) -> Result<(), SourceError> {
        let path = self.index_path();
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io_err(&self.dir))?;
        let mut text = serde_json::to_vec_pretty(index).expect("index serializes");
        text.push(b'\n');
        tmp.write_all(&text).map_err(io_err(&path))?;
        tmp.persist(&path).map_err(|e| io_err(&path)(e.error))?;
        Ok(())
    }

    pub fn entries(&self) -> Result<Vec<CacheEntry>, SourceError> {
        Ok(self.read_index()?.entries)
    }

    /// Most recently retrieved entry for a source.
    pub fn latest(&self, source_id: &str) -> Result<Option<CacheEntry>, SourceError> {
        Ok(self
            .read_index()?
            .entries
            .into_iter()
            .filter(|e| e.source_id == source_id)
            .max_by(|a, b| a.retrieved_at.cmp(&b.retrieved_at).then_with(|| a.content_hash.cmp(&b.content_hash))))
    }

    /// Read stored bytes back, verifying the digest.
    pub fn read(&self, entry: &CacheEntry) -> Result<Vec<u8>, SourceError> {
        let path = self.dir.join(&entry.stored_path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != entry.content_hash {
            return Err(SourceError::CorruptCache { path });
        }
        Ok(bytes)
    }

    /// Store `bytes` for `source_id`. Returns the entry and whether it is new.
    pub fn snapshot(&self, source_id: &str, bytes: &[u8]) -> Result<(CacheEntry, bool), SourceError> {
        let hash = sha256_hex(bytes);
        let source_dir = self.dir.join(source_id);
        fs::create_dir_all(&source_dir).map_err(io_err(&source_dir))?;
        let stored_path = format!("{source_id}/{hash}.raw");
        let full = self.dir.join(&stored_path);

        let _guard = self.lock()?;
        match fs::read(&full) {
            Ok(existing) if existing != bytes => return Err(SourceError::HashCollision { hash }),
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let mut tmp = tempfile::NamedTempFile::new_in(&source_dir).map_err(io_err(&source_dir))?;
                tmp.write_all(bytes).map_err(io_err(&full))?;
                tmp.as_file().sync_all().map_err(io_err(&full))?;
                tmp.persist_noclobber(&full).map_err(|e| io_err(&full)(e.error))?;
            }
            Err(e) => return Err(io_err(&full)(e)),
        }

        let mut index = self.read_index()?;
        if let Some(existing) = index.entries.iter().find(|e| e.source_id == source_id && e.content_hash == hash) {
            return Ok((existing.clone(), false));
        }
        // strictly later than any earlier snapshot of the source, so
        // `latest` never ties
        let floor =
            index.entries.iter().filter(|e| e.source_id == source_id).map(|e| e.retrieved_at + chrono::Duration::microseconds(1)).max();
        let entry = CacheEntry {
            source_id: source_id.to_string(),
            retrieved_at: floor.map_or_else(now_micros, |f| f.max(now_micros())),
            content_hash: hash,
            stored_path,
        };
        index.entries.push(entry.clone());
        index.entries.sort_by(|a, b| {
            (a.source_id.as_str(), a.retrieved_at, a.content_hash.as_str()).cmp(&(
                b.source_id.as_str(),
                b.retrieved_at,
                b.content_hash.as_str(),
            ))
        });
        self.write_index(&index)?;
        Ok((entry, true))
    }
}

fn now_micros() -> DateTime<Utc> {
    let now = Utc::now();
    DateTime::parse_from_rfc3339(&now.to_rfc3339_opts(SecondsFormat::Micros, true)).map(|d| d.with_timezone(&Utc)).unwrap_or(now)
}

/// Store the bytes of one source in the cache under `cache_dir`.
pub fn snapshot_source(desc: &SourceDescriptor, bytes: &[u8], cache_dir: &Path) -> Result<CacheEntry, SourceError> {
    fs::create_dir_all(cache_dir).map_err(io_err(cache_dir))?;
    Cache::new(cache_dir).snapshot(&desc.id, bytes).map(|(e, _)| e)
}

/// Read the original bytes for a descriptor: a local file, or, with the
/// `fetch` feature and `offline == false`, an HTTP(S) download.
pub fn read_origin(desc: &SourceDescriptor, base: &Path, offline: bool) -> Result<Vec<u8>, SourceError> {
    if let Some(path) = desc.origin_path(base) {
        return fs::read(&path).map_err(io_err(&path));
    }
    if offline {
        return Err(SourceError::Fetch { origin: desc.origin.clone(), message: "remote origin requested in offline mode".into() });
    }
    fetch(&desc.origin)
}

#[cfg(feature = "fetch")]
fn fetch(origin: &str) -> Result<Vec<u8>, SourceError> {
    use std::io::Read;
    let fail = |message: String| SourceError::Fetch { origin: origin.to_string(), message };
    let response = ureq::get(origin).call().map_err(|e| fail(e.to_string()))?;
    let mut bytes = Vec::new();
    response.into_body().into_reader().read_to_end(&mut bytes).map_err(|e| fail(e.to_string()))?;
    Ok(bytes)
}

#[cfg(not(feature = "fetch"))]
fn fetch(origin: &str) -> Result<Vec<u8>, SourceError> {
    Err(SourceError::Fetch { origin: origin.to_string(), message: "built without the `fetch` feature".into() })
}

/// Load every descriptor in `paths`, rejecting duplicate ids.
pub fn load_descriptors(paths: &[PathBuf]) -> Result<Vec<SourceDescriptor>, SourceError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let desc = load_descriptor(path)?;
        if seen.insert(desc.id.clone(), path.clone()).is_some() {
            return Err(SourceError::InvalidDescriptor { id: desc.id, message: "duplicate source id within run".into() });
        }
        out.push(desc);
    }
    Ok(out)
}
