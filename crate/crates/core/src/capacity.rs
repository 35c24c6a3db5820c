//! National generation capacity by country, year, taxonomy node and source.
//!
//! Zero and NA are different things here and stay different: a reported zero
//! is a value, a missing report is `None`. Sums over the hierarchy add the
//! values that are present and carry an `incomplete` flag when another source
//! reports something this one does not.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};
use crate::taxonomy::{Taxonomy, TaxonomyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityObservation {
    pub country: String,
    pub year: i32,
    pub node: String,
    pub source: String,
    /// GW; `None` is "not available", never zero.
    pub value: Option<f64>,
    #[serde(default)]
    pub incomplete: bool,
}

impl CapacityObservation {
    pub fn new(country: &str, year: i32, node: &str, source: &str, value: Option<f64>) -> Self {
        CapacityObservation { country: country.into(), year, node: node.into(), source: source.into(), value, incomplete: false }
    }

    fn key(&self) -> ObservationKey {
        (self.country.clone(), self.year, self.node.clone(), self.source.clone())
    }
}

type ObservationKey = (String, i32, String, String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub country: String,
    pub year: i32,
    pub node: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Cell {
    pub value: Option<f64>,
    pub incomplete: bool,
}

/// Pivot with one row per (country, year, node) and one column per source,
/// both in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityMatrix {
    pub sources: Vec<String>,
    pub rows: Vec<RowKey>,
    /// `cells[row][source]`
    pub cells: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CapacityError {
    #[error("duplicate observation for {key:?}: {first:?} and {second:?}")]
    Duplicate { key: (String, i32, String, String), first: Option<f64>, second: Option<f64> },
    #[error("negative capacity {value} for {country}/{year}/{node} from {source_id}")]
    Negative { country: String, year: i32, node: String, source_id: String, value: f64 },
    #[error("no observations for {country}/{year}")]
    Absent { country: String, year: i32 },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyErrorMessage),
}

/// Cloneable wrapper for taxonomy lookups failing inside this module.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct TaxonomyErrorMessage(pub String);

impl From<TaxonomyError> for CapacityError {
    fn from(e: TaxonomyError) -> Self {
        CapacityError::Taxonomy(TaxonomyErrorMessage(e.to_string()))
    }
}

impl CapacityMatrix {
    pub fn get(&self, row: &RowKey, source: &str) -> Option<Cell> {
        let r = self.rows.binary_search(row).ok()?;
        let c = self.sources.binary_search_by(|s| s.as_str().cmp(source)).ok()?;
        Some(self.cells[r][c])
    }

    /// Back to observations; only cells with an observation behind them are
    /// emitted (value present, or flagged incomplete).
    pub fn observations(&self) -> Vec<CapacityObservation> {
        let mut out = Vec::new();
        for (row, cells) in self.rows.iter().zip(&self.cells) {
            for (source, cell) in self.sources.iter().zip(cells) {
                if cell.value.is_some() || cell.incomplete {
                    out.push(CapacityObservation {
                        country: row.country.clone(),
                        year: row.year,
                        node: row.node.clone(),
                        source: source.clone(),
                        value: cell.value,
                        incomplete: cell.incomplete,
                    });
                }
            }
        }
        out
    }
}

pub fn check_observations(obs: &[CapacityObservation]) -> Result<(), CapacityError> {
    let mut seen: BTreeMap<ObservationKey, Option<f64>> = BTreeMap::new();
    for o in obs {
        if let Some(v) = o.value.filter(|v| *v < 0.0) {
            return Err(CapacityError::Negative {
                country: o.country.clone(),
                year: o.year,
                node: o.node.clone(),
                source_id: o.source.clone(),
                value: v,
            });
        }
        if let Some(first) = seen.insert(o.key(), o.value) {
            return Err(CapacityError::Duplicate { key: o.key(), first, second: o.value });
        }
    }
    Ok(())
}

pub fn build_matrix(obs: &[CapacityObservation]) -> Result<CapacityMatrix, CapacityError> {
    check_observations(obs)?;
    let sources: Vec<String> = obs.iter().map(|o| o.source.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let rows: Vec<RowKey> = obs
        .iter()
        .map(|o| RowKey { country: o.country.clone(), year: o.year, node: o.node.clone() })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut cells = vec![vec![Cell::default(); sources.len()]; rows.len()];
    for o in obs {
        let r = rows
            .binary_search_by(|k| (k.country.as_str(), k.year, k.node.as_str()).cmp(&(o.country.as_str(), o.year, o.node.as_str())))
            .expect("row present");
        let c = sources.binary_search(&o.source).expect("source present");
        cells[r][c] = Cell { value: o.value, incomplete: o.incomplete };
    }
    Ok(CapacityMatrix { sources, rows, cells })
}

/// Does `source` cover `node`? It does if it reports a value at the node, at
/// one of its ancestors, or at one of its descendants.
fn covers(present: &BTreeSet<&str>, node: &str, t: &Taxonomy) -> bool {
    present.iter().any(|p| *p == node || t.is_in_subtree(node, p) || t.is_in_subtree(p, node))
}

/// Sum observations up to `target_level` per (country, year, source).
///
/// Present values are added; a sum is `None` only when every contributing
/// observation is `None`. A sum is flagged incomplete when any contribution
/// was already incomplete, or when another source reports a value somewhere
/// in the subtree that this source does not cover. Observations above the
/// target level are ignored.
pub fn roll_up(obs: &[CapacityObservation], target_level: u8, t: &Taxonomy) -> Result<Vec<CapacityObservation>, CapacityError> {
    // (country, year, ancestor) -> source -> contributing observations
    type Groups<'a> = BTreeMap<(String, i32, String), BTreeMap<String, Vec<&'a CapacityObservation>>>;
    let mut groups: Groups = BTreeMap::new();
    for o in obs {
        if t.level(&o.node)? < target_level {
            continue;
        }
        let ancestor = t.ancestor_at(&o.node, target_level)?.expect("level checked above").to_string();
        groups.entry((o.country.clone(), o.year, ancestor)).or_default().entry(o.source.clone()).or_default().push(o);
    }
    let mut out = Vec::new();
    for ((country, year, node), by_source) in &groups {
        let present: BTreeMap<&str, BTreeSet<&str>> = by_source
            .iter()
            .map(|(s, list)| (s.as_str(), list.iter().filter(|o| o.value.is_some()).map(|o| o.node.as_str()).collect()))
            .collect();
        for (source, list) in by_source {
            let values: Vec<f64> = list.iter().filter_map(|o| o.value).collect();
            let value = (!values.is_empty()).then(|| values.iter().sum());
            let mine = &present[source.as_str()];
            let missing_elsewhere = present
                .iter()
                .filter(|(other, _)| **other != source.as_str())
                .flat_map(|(_, nodes)| nodes.iter())
                .any(|n| !covers(mine, n, t));
            out.push(CapacityObservation {
                country: country.clone(),
                year: *year,
                node: node.clone(),
                source: source.clone(),
                value,
                incomplete: list.iter().any(|o| o.incomplete) || missing_elsewhere,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceTotal {
    pub total: Option<f64>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeReport {
    pub country: String,
    pub year: i32,
    /// Over complete totals only.
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub per_source: BTreeMap<String, SourceTotal>,
    pub note: Option<String>,
}

/// Spread of national totals across sources for one country and year.
pub fn range_report(m: &CapacityMatrix, country: &str, year: i32, t: &Taxonomy) -> Result<RangeReport, CapacityError> {
    let obs: Vec<CapacityObservation> = m.observations().into_iter().filter(|o| o.country == country && o.year == year).collect();
    if obs.is_empty() && !m.rows.iter().any(|r| r.country == country && r.year == year) {
        return Err(CapacityError::Absent { country: country.into(), year });
    }
    let (_, level1) = layered(&obs, t)?;
    let roots_reported: BTreeSet<&str> = level1.iter().filter(|o| o.value.is_some()).map(|o| o.node.as_str()).collect();
    let sources: BTreeSet<&str> = level1.iter().map(|o| o.source.as_str()).collect();

    let mut per_source = BTreeMap::new();
    for s in sources {
        let mine: Vec<&CapacityObservation> = level1.iter().filter(|o| o.source == s).collect();
        let values: Vec<f64> = mine.iter().filter_map(|o| o.value).collect();
        let total = (!values.is_empty()).then(|| values.iter().sum::<f64>());
        let has_root = |root: &str| mine.iter().any(|o| o.node == root && o.value.is_some());
        let complete = total.is_some() && !mine.iter().any(|o| o.incomplete) && roots_reported.iter().all(|r| has_root(r));
        per_source.insert(s.to_string(), SourceTotal { total, complete });
    }
    let complete: Vec<f64> = per_source.values().filter(|t| t.complete).filter_map(|t| t.total).collect();
    let min = complete.iter().copied().reduce(f64::min);
    let max = complete.iter().copied().reduce(f64::max);
    Ok(RangeReport {
        country: country.into(),
        year,
        min,
        max,
        note: complete.is_empty().then(|| "no complete totals".to_string()),
        per_source,
    })
}

/// Level-1 totals built level by level: leaves roll into level 2, where a
/// value the source reported directly wins over the rolled one, and the
/// result rolls into level 1 the same way.
fn layered(obs: &[CapacityObservation], t: &Taxonomy) -> Result<(Vec<CapacityObservation>, Vec<CapacityObservation>), CapacityError> {
    let mut by_level: [Vec<CapacityObservation>; 4] = Default::default();
    for o in obs {
        by_level[t.level(&o.node)? as usize].push(o.clone());
    }
    let prefer_reported = |reported: &[CapacityObservation], rolled: Vec<CapacityObservation>| {
        let mut all: BTreeMap<ObservationKey, CapacityObservation> = rolled.into_iter().map(|o| (o.key(), o)).collect();
        for o in reported {
            all.insert(o.key(), o.clone());
        }
        all.into_values().collect::<Vec<_>>()
    };
    let level2 = prefer_reported(&by_level[2], roll_up(&by_level[3], 2, t)?);
    let level1 = prefer_reported(&by_level[1], roll_up(&level2, 1, t)?);
    Ok((level2, level1))
}

/// Observations plus roll-ups to levels 2 and 1 for every (country, year,
/// source). Rolled values never replace a value the source reported directly.
pub fn with_rollups(obs: &[CapacityObservation], t: &Taxonomy) -> Result<Vec<CapacityObservation>, CapacityError> {
    check_observations(obs)?;
    let (level2, level1) = layered(obs, t)?;
    let mut all: BTreeMap<ObservationKey, CapacityObservation> = BTreeMap::new();
    for o in obs.iter().cloned().chain(level2).chain(level1) {
        all.entry(o.key()).or_insert(o);
    }
    Ok(all.into_values().collect())
}

/// [`range_report`] for every (country, year) in the matrix.
pub fn range_reports(m: &CapacityMatrix, t: &Taxonomy, exec: Exec) -> Result<Vec<RangeReport>, CapacityError> {
    let keys: Vec<(String, i32)> = m.rows.iter().map(|r| (r.country.clone(), r.year)).collect::<BTreeSet<_>>().into_iter().collect();
    par::map(exec, &keys, |(c, y)| range_report(m, c, *y, t)).into_iter().collect()
}
