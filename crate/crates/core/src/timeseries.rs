//! Fixed-resolution UTC time series with per-point markers.
//!
//! Timestamps are implied by `start` and the resolution; they are never
//! stored per point. Every transformation here only ever adds marker flags.

use std::collections::HashMap;
use std::fmt;

use chrono::{DateTime, Duration, LocalResult, NaiveDate, NaiveDateTime, TimeZone, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::markers::{MarkerFlag, MarkerSet};
use crate::par::{self, Exec};
use crate::plants::PlantRecord;
use crate::taxonomy::Taxonomy;

/// Profiles above `1 + PROFILE_TOLERANCE` are marked implausible (never clipped).
pub const PROFILE_TOLERANCE: f64 = 0.02;
/// Default bound on interpolated gaps, in minutes.
pub const DEFAULT_MAX_GAP_MINUTES: u32 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Resolution {
    Min15,
    Min30,
    Min60,
}

impl Resolution {
    pub fn minutes(self) -> u32 {
        match self {
            Resolution::Min15 => 15,
            Resolution::Min30 => 30,
            Resolution::Min60 => 60,
        }
    }

    pub fn seconds(self) -> i64 {
        i64::from(self.minutes()) * 60
    }

    pub fn from_minutes(m: u32) -> Option<Self> {
        match m {
            15 => Some(Resolution::Min15),
            30 => Some(Resolution::Min30),
            60 => Some(Resolution::Min60),
            _ => None,
        }
    }
}

impl TryFrom<u32> for Resolution {
    type Error = String;
    fn try_from(m: u32) -> Result<Self, String> {
        Resolution::from_minutes(m).ok_or_else(|| format!("unsupported resolution {m} min"))
    }
}

impl From<Resolution> for u32 {
    fn from(r: Resolution) -> u32 {
        r.minutes()
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}min", self.minutes())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TimeSeriesError {
    #[error("nonexistent local time(s) in {zone}: {}", fmt_stamps(.stamps))]
    NonexistentLocalTime { zone: String, stamps: Vec<(usize, NaiveDateTime)> },
    #[error("local time {stamp} at index {index} appears more than twice")]
    AmbiguityUnresolvable { index: usize, stamp: NaiveDateTime },
    #[error("UTC output not strictly increasing at index {index}")]
    NonMonotoneOutput { index: usize },
    #[error("cannot parse local timestamp {0:?}")]
    BadStamp(String),
    #[error("max gap of {max_gap_minutes} min is not a multiple of {resolution}")]
    InvalidMaxGap { max_gap_minutes: u32, resolution: Resolution },
    #[error("series {0} is already hourly")]
    AlreadyHourly(String),
    #[error("series {series} start {start} is not aligned to {what}")]
    Unaligned { series: String, start: DateTime<Utc>, what: String },
    #[error("series {series}: {message}")]
    InvalidGrid { series: String, message: String },
    #[error("no positive installed capacity for {grouping} on {day}")]
    MissingCapacity { grouping: String, day: NaiveDate },
    #[error("irregular timestamps in {series}: {message}")]
    IrregularStamps { series: String, message: String },
}

fn fmt_stamps(stamps: &[(usize, NaiveDateTime)]) -> String {
    stamps.iter().map(|(i, s)| format!("{s} (row {i})")).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub series_id: String,
    pub resolution: Resolution,
    pub start: DateTime<Utc>,
    pub values: Vec<Option<f64>>,
    pub markers: Vec<MarkerSet>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridViolation {
    LengthMismatch { values: usize, markers: usize },
    Misaligned { start: DateTime<Utc> },
    NonFinite { index: usize },
}

impl GridViolation {
    /// Index of the first offending point, where one applies.
    pub fn index(&self) -> Option<usize> {
        match self {
            GridViolation::LengthMismatch { values, markers } => Some(*values.min(markers)),
            GridViolation::Misaligned { .. } => Some(0),
            GridViolation::NonFinite { index } => Some(*index),
        }
    }
}

impl TimeSeries {
    /// A series with no markers.
    pub fn new(series_id: impl Into<String>, resolution: Resolution, start: DateTime<Utc>, values: Vec<Option<f64>>) -> Self {
        let markers = vec![MarkerSet::new(); values.len()];
        TimeSeries { series_id: series_id.into(), resolution, start, values, markers }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, index: usize) -> DateTime<Utc> {
        self.start + Duration::seconds(self.resolution.seconds() * index as i64)
    }

    /// Exclusive end instant.
    pub fn end(&self) -> DateTime<Utc> {
        self.timestamp(self.len())
    }

    /// Report of grid invariants; empty means valid.
    pub fn validate_grid(&self) -> Vec<GridViolation> {
        let mut report = Vec::new();
        if self.values.len() != self.markers.len() {
            report.push(GridViolation::LengthMismatch { values: self.values.len(), markers: self.markers.len() });
        }
        if !is_aligned(self.start, self.resolution.seconds()) {
            report.push(GridViolation::Misaligned { start: self.start });
        }
        if let Some(index) = self.values.iter().position(|v| v.is_some_and(|x| !x.is_finite())) {
            report.push(GridViolation::NonFinite { index });
        }
        report
    }

    fn ensure_valid(&self) -> Result<(), TimeSeriesError> {
        match self.validate_grid().first() {
            None => Ok(()),
            Some(v) => Err(TimeSeriesError::InvalidGrid { series: self.series_id.clone(), message: format!("{v:?}") }),
        }
    }
}

pub fn validate_grid(ts: &TimeSeries) -> Vec<GridViolation> {
    ts.validate_grid()
}

fn is_aligned(t: DateTime<Utc>, step_seconds: i64) -> bool {
    t.timestamp_subsec_nanos() == 0 && t.timestamp().rem_euclid(step_seconds) == 0
}

/// How to resolve local stamps that occur twice at the autumn transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FoldPolicy {
    /// First occurrence takes the pre-transition (summer) offset, the second
    /// the post-transition one.
    #[default]
    OrderOfAppearance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalStampColumn {
    pub zone: Tz,
    pub stamps: Vec<NaiveDateTime>,
    pub disambiguation: FoldPolicy,
}

impl LocalStampColumn {
    pub fn new(zone: Tz, stamps: Vec<NaiveDateTime>) -> Self {
        LocalStampColumn { zone, stamps, disambiguation: FoldPolicy::OrderOfAppearance }
    }
}

const STAMP_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%d.%m.%Y %H:%M:%S",
    "%d.%m.%Y %H:%M",
    "%d/%m/%Y %H:%M",
];

/// Parse a local wall-clock stamp in one of the common source layouts.
pub fn parse_local_stamp(s: &str) -> Result<NaiveDateTime, TimeSeriesError> {
    let s = s.trim();
    STAMP_FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok()).ok_or_else(|| TimeSeriesError::BadStamp(s.to_string()))
}

/// Convert local stamps to strictly increasing UTC instants.
pub fn to_utc(col: &LocalStampColumn) -> Result<Vec<DateTime<Utc>>, TimeSeriesError> {
    let mut out = Vec::with_capacity(col.stamps.len());
    let mut nonexistent = Vec::new();
    let mut seen: HashMap<NaiveDateTime, u8> = HashMap::new();
    for (index, stamp) in col.stamps.iter().enumerate() {
        match col.zone.from_local_datetime(stamp) {
            LocalResult::Single(t) => out.push(t.with_timezone(&Utc)),
            LocalResult::Ambiguous(earlier, later) => {
                let n = seen.entry(*stamp).or_insert(0);
                *n += 1;
                match *n {
                    1 => out.push(earlier.with_timezone(&Utc)),
                    2 => out.push(later.with_timezone(&Utc)),
                    _ => return Err(TimeSeriesError::AmbiguityUnresolvable { index, stamp: *stamp }),
                }
            }
            LocalResult::None => nonexistent.push((index, *stamp)),
        }
    }
    if !nonexistent.is_empty() {
        return Err(TimeSeriesError::NonexistentLocalTime { zone: col.zone.name().to_string(), stamps: nonexistent });
    }
    if let Some(i) = out.windows(2).position(|w| w[0] >= w[1]) {
        return Err(TimeSeriesError::NonMonotoneOutput { index: i + 1 });
    }
    Ok(out)
}

/// Inverse of [`to_utc`]: wall-clock stamps in `zone`.
pub fn to_local(instants: &[DateTime<Utc>], zone: Tz) -> LocalStampColumn {
    LocalStampColumn::new(zone, instants.iter().map(|t| t.with_timezone(&zone).naive_local()).collect())
}

/// Place `(instant, value)` observations on a regular grid spanning the first
/// to the last instant. Rows absent from the source become NA.
pub fn from_observations(
    series_id: &str,
    resolution: Resolution,
    obs: &[(DateTime<Utc>, Option<f64>)],
) -> Result<TimeSeries, TimeSeriesError> {
    let irregular = |message: String| TimeSeriesError::IrregularStamps { series: series_id.to_string(), message };
    let Some(&(start, _)) = obs.first() else {
        return Err(irregular("no observations".into()));
    };
    if !is_aligned(start, resolution.seconds()) {
        return Err(TimeSeriesError::Unaligned { series: series_id.to_string(), start, what: resolution.to_string() });
    }
    let step = resolution.seconds();
    let last = obs[obs.len() - 1].0;
    let len = ((last - start).num_seconds() / step + 1) as usize;
    let mut values = vec![None; len];
    let mut prev: Option<usize> = None;
    for (t, v) in obs {
        let offset = (*t - start).num_seconds();
        if offset % step != 0 || t.timestamp_subsec_nanos() != 0 {
            return Err(irregular(format!("{t} is off the {resolution} grid")));
        }
        let i = (offset / step) as usize;
        if prev.is_some_and(|p| p >= i) {
            return Err(irregular(format!("{t} is duplicated or out of order")));
        }
        prev = Some(i);
        values[i] = *v;
    }
    Ok(TimeSeries::new(series_id, resolution, start, values))
}

/// Infer resolution from the smallest positive step between instants.
pub fn infer_resolution(instants: &[DateTime<Utc>]) -> Option<Resolution> {
    let step = instants.windows(2).map(|w| (w[1] - w[0]).num_minutes()).filter(|&m| m > 0).min()?;
    Resolution::from_minutes(u32::try_from(step).ok()?)
}

/// Fill NA runs no longer than `max_gap_minutes` that have values on both
/// sides by linear interpolation, marking every filled point. Longer runs and
/// runs touching either end of the series are left alone. A bound of zero
/// disables filling.
pub fn fill_gaps(ts: &TimeSeries, max_gap_minutes: u32) -> Result<TimeSeries, TimeSeriesError> {
    ts.ensure_valid()?;
    let res = ts.resolution.minutes();
    if !max_gap_minutes.is_multiple_of(res) {
        return Err(TimeSeriesError::InvalidMaxGap { max_gap_minutes, resolution: ts.resolution });
    }
    let max_points = (max_gap_minutes / res) as usize;
    let mut out = ts.clone();
    if max_points == 0 {
        return Ok(out);
    }
    let values = &ts.values;
    let mut i = 0;
    while i < values.len() {
        if values[i].is_some() {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < values.len() && values[i].is_none() {
            i += 1;
        }
        let run_len = i - run_start;
        if run_start == 0 || i == values.len() || run_len > max_points {
            continue;
        }
        let left = values[run_start - 1].expect("bounded run");
        let right = values[i].expect("bounded run");
        let span = (run_len + 1) as f64;
        for k in 1..=run_len {
            let w = k as f64;
            out.values[run_start + k - 1] = Some((left * (span - w) + right * w) / span);
            out.markers[run_start + k - 1].insert(MarkerFlag::Interpolated);
        }
    }
    Ok(out)
}

/// Average 15- or 30-minute series to hourly. An hour is NA if any
/// constituent is NA (including a trailing partial hour); markers are the
/// union of the constituents' plus `own_calculation`.
pub fn aggregate_to_hourly(ts: &TimeSeries) -> Result<TimeSeries, TimeSeriesError> {
    ts.ensure_valid()?;
    let k = match ts.resolution {
        Resolution::Min60 => return Err(TimeSeriesError::AlreadyHourly(ts.series_id.clone())),
        Resolution::Min15 => 4,
        Resolution::Min30 => 2,
    };
    if !is_aligned(ts.start, 3600) {
        return Err(TimeSeriesError::Unaligned { series: ts.series_id.clone(), start: ts.start, what: "the hour".into() });
    }
    let hours = ts.len().div_ceil(k);
    let mut values = Vec::with_capacity(hours);
    let mut markers = Vec::with_capacity(hours);
    for (vals, marks) in ts.values.chunks(k).zip(ts.markers.chunks(k)) {
        let mut set: MarkerSet = marks.iter().flatten().cloned().collect();
        set.insert(MarkerFlag::OwnCalculation);
        markers.push(set);
        let complete = vals.len() == k && vals.iter().all(Option::is_some);
        values.push(complete.then(|| vals.iter().map(|v| v.unwrap()).sum::<f64>() / k as f64));
    }
    Ok(TimeSeries { series_id: ts.series_id.clone(), resolution: Resolution::Min60, start: ts.start, values, markers })
}

/// Installed capacity per calendar day (UTC), in MW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyCapacitySeries {
    pub grouping: String,
    pub start: NaiveDate,
    pub capacity_mw: Vec<f64>,
}

impl DailyCapacitySeries {
    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.start.iter_days().take(self.capacity_mw.len())
    }

    pub fn on(&self, day: NaiveDate) -> Option<f64> {
        let offset = (day - self.start).num_days();
        usize::try_from(offset).ok().and_then(|i| self.capacity_mw.get(i).copied())
    }
}

/// Generation divided by the installed capacity of the same UTC day.
pub fn capacity_profile(generation: &TimeSeries, cap: &DailyCapacitySeries) -> Result<TimeSeries, TimeSeriesError> {
    generation.ensure_valid()?;
    let mut out = generation.clone();
    out.series_id = format!("{}_profile", generation.series_id);
    for i in 0..generation.len() {
        let day = generation.timestamp(i).date_naive();
        let capacity =
            cap.on(day).filter(|c| *c > 0.0).ok_or_else(|| TimeSeriesError::MissingCapacity { grouping: cap.grouping.clone(), day })?;
        let profile = generation.values[i].map(|g| g / capacity);
        out.values[i] = profile;
        out.markers[i].insert(MarkerFlag::OwnCalculation);
        if profile.is_some_and(|p| p > 1.0 + PROFILE_TOLERANCE) {
            out.markers[i].insert(MarkerFlag::Implausible);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DailyCapacityReport {
    pub series: DailyCapacitySeries,
    /// Records in the grouping that were left out, with the reason.
    pub excluded: Vec<(String, String)>,
}

/// Cumulative installed capacity per day for plants in `grouping`'s subtree.
///
/// A plant counts on day `d` if commissioned on or before `d` and not
/// decommissioned on or before `d`. Net capacity is used, falling back to
/// gross; records lacking a commissioning date or any capacity are excluded
/// and listed.
pub fn build_daily_capacity(
    records: &[PlantRecord],
    grouping: &str,
    t: &Taxonomy,
    first_day: NaiveDate,
    last_day: NaiveDate,
) -> DailyCapacityReport {
    let days = usize::try_from((last_day - first_day).num_days() + 1).unwrap_or(0);
    let index_of = |d: NaiveDate| -> usize { (d - first_day).num_days().clamp(0, days as i64) as usize };
    let mut excluded = Vec::new();
    // (first active day, first inactive day, MW), in input order
    let mut spans: Vec<(usize, usize, f64)> = Vec::new();
    for r in records.iter().filter(|r| t.is_in_subtree(&r.source_node, grouping)) {
        let Some(commissioned) = r.commissioned else {
            excluded.push((r.record_id.clone(), "missing commissioning date".to_string()));
            continue;
        };
        let Some(capacity) = r.capacity_net_mw.or(r.capacity_gross_mw) else {
            excluded.push((r.record_id.clone(), "missing capacity".to_string()));
            continue;
        };
        let on = index_of(commissioned);
        let off = r.decommissioned.map_or(days, index_of);
        if on < off {
            spans.push((on, off, capacity));
        }
    }
    // The active set only changes at commissioning/decommissioning days; the
    // sum is recomputed there (in input order) instead of being updated
    // incrementally, so no rounding drift accumulates.
    let mut breaks: Vec<usize> = spans.iter().flat_map(|&(on, off, _)| [on, off]).collect();
    breaks.push(0);
    breaks.push(days);
    breaks.sort_unstable();
    breaks.dedup();
    let mut capacity_mw = Vec::with_capacity(days);
    for w in breaks.windows(2) {
        let (from, to) = (w[0], w[1]);
        let total: f64 = spans
            .iter()
            .filter(|(on, off, _)| *on <= from && from < *off)
            .map(|(_, _, c)| *c)
            // `sum` of an empty f64 iterator is -0.0
            .fold(0.0, |acc, c| acc + c);
        capacity_mw.extend(std::iter::repeat_n(total, to - from));
    }
    DailyCapacityReport { series: DailyCapacitySeries { grouping: grouping.to_string(), start: first_day, capacity_mw }, excluded }
}

/// [`fill_gaps`] over many series.
pub fn fill_gaps_batch(series: &[TimeSeries], max_gap_minutes: u32, exec: Exec) -> Result<Vec<TimeSeries>, TimeSeriesError> {
    par::map(exec, series, |s| fill_gaps(s, max_gap_minutes)).into_iter().collect()
}

/// Fill gaps at native resolution, then aggregate sub-hourly series to hourly.
pub fn harmonize_batch(series: &[TimeSeries], max_gap_minutes: u32, exec: Exec) -> Result<Vec<TimeSeries>, TimeSeriesError> {
    par::map(exec, series, |s| {
        let filled = fill_gaps(s, max_gap_minutes)?;
        match filled.resolution {
            Resolution::Min60 => Ok(filled),
            _ => aggregate_to_hourly(&filled),
        }
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use chrono_tz::Europe::Berlin;
    use proptest::prelude::*;

    fn utc(y: i32, m: u32, d: u32, h: u32, min: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, h, min, 0).unwrap()
    }

    fn local(y: i32, m: u32, d: u32, h: u32, min: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(h, min, 0).unwrap()
    }

    fn hourly(values: Vec<Option<f64>>) -> TimeSeries {
        TimeSeries::new("s", Resolution::Min60, utc(2017, 1, 1, 0, 0), values)
    }

    #[test]
    fn spring_forward_offsets() {
        let col = LocalStampColumn::new(Berlin, vec![local(2017, 3, 26, 1, 0), local(2017, 3, 26, 3, 0)]);
        assert_eq!(to_utc(&col).unwrap(), vec![utc(2017, 3, 26, 0, 0), utc(2017, 3, 26, 1, 0)]);
    }

    #[test]
    fn spring_gap_rejected() {
        let col = LocalStampColumn::new(Berlin, vec![local(2017, 3, 26, 2, 30)]);
        assert!(matches!(to_utc(&col), Err(TimeSeriesError::NonexistentLocalTime { .. })));
    }

    #[test]
    fn autumn_fold_by_order() {
        let col = LocalStampColumn::new(Berlin, vec![local(2017, 10, 29, 2, 0), local(2017, 10, 29, 2, 0)]);
        assert_eq!(to_utc(&col).unwrap(), vec![utc(2017, 10, 29, 0, 0), utc(2017, 10, 29, 1, 0)]);
        let thrice = LocalStampColumn::new(Berlin, vec![local(2017, 10, 29, 2, 0); 3]);
        assert!(matches!(to_utc(&thrice), Err(TimeSeriesError::AmbiguityUnresolvable { index: 2, .. })));
    }

    #[test]
    fn non_monotone_rejected() {
        let col = LocalStampColumn::new(Berlin, vec![local(2017, 1, 1, 2, 0), local(2017, 1, 1, 1, 0)]);
        assert_eq!(to_utc(&col), Err(TimeSeriesError::NonMonotoneOutput { index: 1 }));
    }

    #[test]
    fn stamp_formats() {
        assert_eq!(parse_local_stamp("2017-03-26 01:00").unwrap(), local(2017, 3, 26, 1, 0));
        assert_eq!(parse_local_stamp("26.03.2017 01:15").unwrap(), local(2017, 3, 26, 1, 15));
        assert!(parse_local_stamp("yesterday").is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(hourly(vec![Some(1.0); 24]).validate_grid().is_empty());
        let odd = TimeSeries::new("s", Resolution::Min15, utc(2017, 1, 1, 0, 7), vec![None]);
        assert!(matches!(odd.validate_grid()[0], GridViolation::Misaligned { .. }));
        let mut short = hourly(vec![Some(1.0); 3]);
        short.markers.pop();
        assert_eq!(short.validate_grid()[0].index(), Some(2));
        let nan = hourly(vec![Some(1.0), Some(f64::NAN)]);
        assert_eq!(nan.validate_grid(), vec![GridViolation::NonFinite { index: 1 }]);
    }

    #[test]
    fn fills_short_gap() {
        let out = fill_gaps(&hourly(vec![Some(100.0), None, None, Some(130.0)]), 120).unwrap();
        assert_eq!(out.values, vec![Some(100.0), Some(110.0), Some(120.0), Some(130.0)]);
        let flagged: Vec<usize> = (0..4).filter(|&i| out.markers[i].contains(&MarkerFlag::Interpolated)).collect();
        assert_eq!(flagged, vec![1, 2]);
    }

    #[test]
    fn leaves_long_and_boundary_gaps() {
        let long = hourly(vec![Some(100.0), None, None, None, Some(140.0)]);
        assert_eq!(fill_gaps(&long, 120).unwrap(), long);
        let lead = hourly(vec![None, Some(5.0), Some(6.0)]);
        assert_eq!(fill_gaps(&lead, 120).unwrap(), lead);
        let trail = hourly(vec![Some(5.0), None]);
        assert_eq!(fill_gaps(&trail, 120).unwrap(), trail);
    }

    #[test]
    fn gap_bound_is_in_minutes() {
        let mut v = vec![Some(0.0)];
        v.extend(vec![None; 8]);
        v.push(Some(9.0));
        let q = TimeSeries::new("q", Resolution::Min15, utc(2017, 1, 1, 0, 0), v);
        let out = fill_gaps(&q, 120).unwrap();
        assert_eq!(out.values[4], Some(4.0));
        assert!(matches!(fill_gaps(&q, 100), Err(TimeSeriesError::InvalidMaxGap { .. })));
        assert_eq!(fill_gaps(&q, 0).unwrap(), q);
    }

    #[test]
    fn hourly_mean() {
        let q = TimeSeries::new("q", Resolution::Min15, utc(2017, 1, 1, 0, 0), vec![Some(10.0), Some(20.0), Some(30.0), Some(40.0)]);
        let h = aggregate_to_hourly(&q).unwrap();
        assert_eq!(h.values, vec![Some(25.0)]);
        assert_eq!(h.resolution, Resolution::Min60);
        let half = TimeSeries::new("h", Resolution::Min30, utc(2017, 1, 1, 0, 0), vec![Some(7.0), None]);
        assert_eq!(aggregate_to_hourly(&half).unwrap().values, vec![None]);
    }

    #[test]
    fn hourly_marker_union() {
        let mut q = TimeSeries::new("q", Resolution::Min15, utc(2017, 1, 1, 0, 0), vec![Some(1.0); 4]);
        q.markers[0].insert(MarkerFlag::Interpolated);
        let h = aggregate_to_hourly(&q).unwrap();
        let expected: MarkerSet = [MarkerFlag::Interpolated, MarkerFlag::OwnCalculation].into_iter().collect();
        assert_eq!(h.markers[0], expected);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(aggregate_to_hourly(&hourly(vec![Some(1.0)])), Err(TimeSeriesError::AlreadyHourly(_))));
        let off = TimeSeries::new("q", Resolution::Min15, utc(2017, 1, 1, 0, 15), vec![Some(1.0); 4]);
        assert!(matches!(aggregate_to_hourly(&off), Err(TimeSeriesError::Unaligned { .. })));
        let partial = TimeSeries::new("q", Resolution::Min15, utc(2017, 1, 1, 0, 0), vec![Some(1.0); 6]);
        assert_eq!(aggregate_to_hourly(&partial).unwrap().values, vec![Some(1.0), None]);
    }

    fn flat_capacity(mw: f64, days: usize) -> DailyCapacitySeries {
        DailyCapacitySeries { grouping: "wind".into(), start: NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(), capacity_mw: vec![mw; days] }
    }

    #[test]
    fn profiles() {
        let g = hourly(vec![Some(50.0), None, Some(210.0), Some(204.0)]);
        let p = capacity_profile(&g, &flat_capacity(200.0, 1)).unwrap();
        assert_eq!(p.values, vec![Some(0.25), None, Some(1.05), Some(1.02)]);
        assert!(p.markers.iter().all(|m| m.contains(&MarkerFlag::OwnCalculation)));
        assert!(p.markers[2].contains(&MarkerFlag::Implausible));
        assert!(!p.markers[3].contains(&MarkerFlag::Implausible));
        assert!(matches!(capacity_profile(&g, &flat_capacity(0.0, 1)), Err(TimeSeriesError::MissingCapacity { .. })));
        let next_day = TimeSeries::new("s", Resolution::Min60, utc(2017, 1, 2, 0, 0), vec![Some(1.0)]);
        assert!(capacity_profile(&next_day, &flat_capacity(5.0, 1)).is_err());
    }

    fn plant(id: &str, mw: f64, on: Option<(u32, u32)>, off: Option<(u32, u32)>) -> PlantRecord {
        let d = |(m, day): (u32, u32)| NaiveDate::from_ymd_opt(2017, m, day).unwrap();
        PlantRecord {
            record_id: id.into(),
            source_node: "wind_onshore".into(),
            capacity_net_mw: Some(mw),
            commissioned: on.map(d),
            decommissioned: off.map(d),
            ..PlantRecord::default()
        }
    }

    #[test]
    fn daily_capacity_steps() {
        let t = Taxonomy::builtin();
        let jan = |d| NaiveDate::from_ymd_opt(2017, 1, d).unwrap();
        let fleet = vec![plant("A", 10.0, Some((1, 10)), Some((1, 20))), plant("B", 5.0, Some((1, 12)), None)];
        let r = build_daily_capacity(&fleet, "wind", &t, jan(9), jan(21));
        assert_eq!(r.series.capacity_mw, vec![0.0, 10.0, 10.0, 15.0, 15.0, 15.0, 15.0, 15.0, 15.0, 15.0, 15.0, 5.0, 5.0]);
        let empty = build_daily_capacity(&[], "wind", &t, jan(1), jan(3));
        assert_eq!(empty.series.capacity_mw, vec![0.0; 3]);
        assert!(empty.series.capacity_mw.iter().all(|c| c.is_sign_positive()));
        let solar = build_daily_capacity(&fleet, "solar", &t, jan(1), jan(31));
        assert!(solar.series.capacity_mw.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn daily_capacity_lists_undated() {
        let t = Taxonomy::builtin();
        let jan = |d| NaiveDate::from_ymd_opt(2017, 1, d).unwrap();
        let r = build_daily_capacity(&[plant("X", 3.0, None, None)], "renewable", &t, jan(1), jan(2));
        assert_eq!(r.excluded, vec![("X".to_string(), "missing commissioning date".to_string())]);
    }

    #[test]
    fn utc_grid_from_observations() {
        let obs = vec![(utc(2017, 1, 1, 0, 0), Some(1.0)), (utc(2017, 1, 1, 2, 0), Some(3.0))];
        let ts = from_observations("s", Resolution::Min60, &obs).unwrap();
        assert_eq!(ts.values, vec![Some(1.0), None, Some(3.0)]);
        let dup = vec![obs[0], obs[0]];
        assert!(from_observations("s", Resolution::Min60, &dup).is_err());
        assert_eq!(infer_resolution(&[utc(2017, 1, 1, 0, 0), utc(2017, 1, 1, 0, 15)]), Some(Resolution::Min15));
    }

    fn series_with_gaps() -> impl Strategy<Value = Vec<Option<f64>>> {
        prop::collection::vec(prop_oneof![3 => (-1e3f64..1e3).prop_map(Some), 1 => Just(None)], 0..80)
    }

    proptest! {
        #[test]
        fn fill_is_idempotent_and_monotone(values in series_with_gaps(), quarter in any::<bool>()) {
            let res = if quarter { Resolution::Min15 } else { Resolution::Min60 };
            let ts = TimeSeries::new("p", res, utc(2017, 1, 1, 0, 0), values);
            let once = fill_gaps(&ts, 120).unwrap();
            prop_assert_eq!(&fill_gaps(&once, 120).unwrap(), &once);
            for i in 0..ts.len() {
                if ts.values[i].is_some() {
                    prop_assert_eq!(ts.values[i], once.values[i]);
                    prop_assert!(once.markers[i].is_empty());
                }
                prop_assert!(ts.markers[i].is_subset(&once.markers[i]));
            }
        }

        #[test]
        fn local_round_trip(hours in 0i64..(24 * 366), quarter in 0i64..4) {
            let t = utc(2017, 1, 1, 0, 0) + Duration::minutes(hours * 60 + quarter * 15);
            let instants = vec![t, t + Duration::minutes(15)];
            prop_assert_eq!(to_utc(&to_local(&instants, Berlin)).unwrap(), instants);
        }

        #[test]
        fn constant_series_aggregates_to_constant(c in -1e6f64..1e6, hours in 1usize..30) {
            let ts = TimeSeries::new("c", Resolution::Min15, utc(2017, 1, 1, 0, 0), vec![Some(c); hours * 4]);
            let h = aggregate_to_hourly(&ts).unwrap();
            prop_assert!(h.values.iter().all(|v| (v.unwrap() - c).abs() <= 1e-9 * c.abs().max(1.0)));
        }
    }
}
