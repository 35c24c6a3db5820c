//! Power plant lists: canonical records, two-list merging, cross-domain
//! deduplication and plausibility flags.
//!
//! Nothing in this module deletes a record or alters a reported value.
//! Suspicious records are marked and reported instead.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::markers::{MarkerFlag, MarkerSet};
use crate::taxonomy::{Domain, Taxonomy};

/// How a coordinate pair was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordPrecision {
    Exact,
    ZipCentroid,
    DistrictCentroid,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantRecord {
    pub record_id: String,
    pub name: String,
    pub country: String,
    pub source_node: String,
    pub technology: String,
    pub capacity_net_mw: Option<f64>,
    pub capacity_gross_mw: Option<f64>,
    pub chp: Option<bool>,
    pub commissioned: Option<NaiveDate>,
    pub decommissioned: Option<NaiveDate>,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub coord_precision: Option<CoordPrecision>,
    pub eic: Option<String>,
    pub efficiency: Option<f64>,
    pub provenance: Vec<String>,
    pub markers: MarkerSet,
    /// Rule ids and other reasons behind the markers.
    pub flags: BTreeSet<String>,
    pub field_provenance: BTreeMap<String, String>,
}

impl PlantRecord {
    /// Invariant breaches, as rule-style ids.
    pub fn invariant_violations(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if let (Some(on), Some(off)) = (self.commissioned, self.decommissioned) {
            if off < on {
                out.push("invariant:decommissioned_before_commissioned");
            }
        }
        if self.lat.is_some_and(|v| !(-90.0..=90.0).contains(&v)) {
            out.push("invariant:lat_range");
        }
        if self.lon.is_some_and(|v| !(-180.0..=180.0).contains(&v)) {
            out.push("invariant:lon_range");
        }
        if let (Some(net), Some(gross)) = (self.capacity_net_mw, self.capacity_gross_mw) {
            if gross < net {
                out.push("invariant:gross_below_net");
            }
        }
        if self.capacity_net_mw.is_some_and(|v| v < 0.0) || self.capacity_gross_mw.is_some_and(|v| v < 0.0) {
            out.push("invariant:negative_capacity");
        }
        if self.efficiency.is_some_and(|e| !(e > 0.0 && e <= 1.0)) {
            out.push("invariant:efficiency_range");
        }
        out
    }

    fn primary_source(&self) -> String {
        self.provenance.first().cloned().unwrap_or_default()
    }

    fn sort_key(&self) -> (String, String, String, String, String) {
        (self.country.clone(), self.source_node.clone(), normalize_name(&self.name), self.record_id.clone(), self.provenance.join(";"))
    }

    fn mark(&mut self, flag: MarkerFlag, reason: &str) {
        self.markers.insert(flag);
        self.flags.insert(reason.to_string());
    }
}

/// Mark records whose own invariants are broken. Values are kept as reported.
pub fn flag_invariant_violations(records: &mut [PlantRecord]) -> usize {
    let mut n = 0;
    for r in records {
        for v in r.invariant_violations() {
            r.mark(MarkerFlag::Implausible, v);
            n += 1;
        }
    }
    n
}

fn legal_forms() -> &'static [Vec<String>] {
    static FORMS: OnceLock<Vec<Vec<String>>> = OnceLock::new();
    FORMS.get_or_init(|| {
        let mut forms: Vec<Vec<String>> = include_str!("../data/legal_forms.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect();
        // longest suffix first
        forms.sort_by_key(|f| std::cmp::Reverse(f.len()));
        forms
    })
}

/// Case-fold, strip punctuation, collapse whitespace and drop trailing
/// legal-form suffixes (`GmbH`, `AG`, ...).
pub fn normalize_name(name: &str) -> String {
    let cleaned: String = name.to_lowercase().chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
    let mut words: Vec<&str> = cleaned.split_whitespace().collect();
    // keep at least one word so "AG" alone stays a name
    'strip: while words.len() > 1 {
        for form in legal_forms() {
            if form.len() < words.len() && words[words.len() - form.len()..].iter().eq(form.iter()) {
                words.truncate(words.len() - form.len());
                continue 'strip;
            }
        }
        break;
    }
    words.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKey {
    /// Identical Energy Identification Code.
    Eic,
    /// Same normalized name, country and taxonomy node.
    NameCountryNode,
    /// As `NameCountryNode`, and net capacities (when both known) within the
    /// policy's relative tolerance.
    NameCountryNodeCapacity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPolicy {
    pub keys: Vec<MatchKey>,
    pub tolerance: f64,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        MatchPolicy { keys: vec![MatchKey::Eic, MatchKey::NameCountryNodeCapacity], tolerance: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("invalid match policy: {0}")]
    InvalidPolicy(String),
    #[error("rule {rule:?} references unknown field {field:?}")]
    UnknownRuleField { rule: String, field: String },
    #[error("rule {rule:?} references unknown taxonomy node {node:?}")]
    UnknownRuleNode { rule: String, node: String },
    #[error("rule {0:?} has neither min nor max")]
    EmptyRule(String),
}

impl MatchPolicy {
    pub fn validate(&self) -> Result<(), PlantError> {
        if self.keys.is_empty() {
            return Err(PlantError::InvalidPolicy("at least one match key required".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 0.5) {
            return Err(PlantError::InvalidPolicy(format!("tolerance {} outside (0, 0.5)", self.tolerance)));
        }
        Ok(())
    }
}

fn within_tolerance(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= tol * a.abs().max(b.abs()),
        _ => true,
    }
}

fn eic_key(r: &PlantRecord) -> Option<String> {
    r.eic.as_deref().map(|e| e.trim().to_uppercase()).filter(|e| !e.is_empty())
}

fn name_key(r: &PlantRecord) -> Option<(String, String, String)> {
    let name = normalize_name(&r.name);
    (!name.is_empty()).then(|| (name, r.country.trim().to_uppercase(), r.source_node.clone()))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct MatchedPair {
    pub primary: String,
    pub secondary: String,
    pub key: MatchKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Primary,
    Secondary,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Ambiguity {
    pub side: Side,
    pub record_id: String,
    pub key: MatchKey,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conflict {
    pub primary: String,
    pub secondary: String,
    pub field: String,
    pub kept: serde_json::Value,
    pub discarded: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MatchReport {
    pub matched: Vec<MatchedPair>,
    pub ambiguous: Vec<Ambiguity>,
    pub conflicts: Vec<Conflict>,
}

pub const AMBIGUOUS_MATCH: &str = "gridforge:ambiguous_match";

/// Candidate partners for each record on both sides under one key.
fn candidates(
    key: MatchKey,
    tol: f64,
    primary: &[PlantRecord],
    open_p: &BTreeSet<usize>,
    secondary: &[PlantRecord],
    open_s: &BTreeSet<usize>,
) -> (BTreeMap<usize, Vec<usize>>, BTreeMap<usize, Vec<usize>>) {
    let mut by_p: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut by_s: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut link = |p: usize, s: usize| {
        by_p.entry(p).or_default().push(s);
        by_s.entry(s).or_default().push(p);
    };
    match key {
        MatchKey::Eic => {
            let mut index: HashMap<String, Vec<usize>> = HashMap::new();
            for &s in open_s {
                if let Some(k) = eic_key(&secondary[s]) {
                    index.entry(k).or_default().push(s);
                }
            }
            for &p in open_p {
                if let Some(hits) = eic_key(&primary[p]).and_then(|k| index.get(&k)) {
                    for &s in hits {
                        link(p, s);
                    }
                }
            }
        }
        MatchKey::NameCountryNode | MatchKey::NameCountryNodeCapacity => {
            let check_capacity = key == MatchKey::NameCountryNodeCapacity;
            let mut index: HashMap<(String, String, String), Vec<usize>> = HashMap::new();
            for &s in open_s {
                if let Some(k) = name_key(&secondary[s]) {
                    index.entry(k).or_default().push(s);
                }
            }
            for &p in open_p {
                if let Some(hits) = name_key(&primary[p]).and_then(|k| index.get(&k)) {
                    for &s in hits {
                        if !check_capacity || within_tolerance(primary[p].capacity_net_mw, secondary[s].capacity_net_mw, tol) {
                            link(p, s);
                        }
                    }
                }
            }
        }
    }
    (by_p, by_s)
}

macro_rules! fuse_fields {
    ($out:ident, $sec:ident, $report:ident, $pdonor:ident, $sdonor:ident; $($field:ident),* $(,)?) => {
        $(
            match ($out.$field.clone(), $sec.$field.clone()) {
                (Some(a), other) => {
                    if !$pdonor.is_empty() {
                        $out.field_provenance
                            .entry(stringify!($field).to_string())
                            .or_insert_with(|| $pdonor.clone());
                    }
                    if let Some(b) = other.filter(|b| *b != a) {
                        $report.conflicts.push(Conflict {
                            primary: $out.record_id.clone(),
                            secondary: $sec.record_id.clone(),
                            field: stringify!($field).to_string(),
                            kept: serde_json::to_value(a).unwrap_or_default(),
                            discarded: serde_json::to_value(b).unwrap_or_default(),
                        });
                    }
                }
                (None, Some(v)) => {
                    $out.$field = Some(v);
                    $out.field_provenance.insert(stringify!($field).to_string(), $sdonor.clone());
                }
                (None, None) => {}
            }
        )*
    };
}

fn fuse(primary: &PlantRecord, secondary: &PlantRecord, report: &mut MatchReport) -> PlantRecord {
    let mut out = primary.clone();
    let primary_donor = primary.primary_source();
    let donor = secondary.primary_source();
    fuse_fields!(out, secondary, report, primary_donor, donor;
        capacity_net_mw, capacity_gross_mw, chp, commissioned, decommissioned,
        lat, lon, coord_precision, eic, efficiency);
    if out.technology.is_empty() && !secondary.technology.is_empty() {
        out.technology = secondary.technology.clone();
        out.field_provenance.insert("technology".into(), donor.clone());
    }
    for p in &secondary.provenance {
        if !out.provenance.contains(p) {
            out.provenance.push(p.clone());
        }
    }
    out.markers.extend(secondary.markers.iter().cloned());
    out.flags.extend(secondary.flags.iter().cloned());
    out
}

/// Full outer merge of two plant lists.
///
/// Match keys are tried in policy order; a pair is fused only when each
/// record is the other's unique candidate under that key. Records with two or
/// more candidates are reported, marked, and passed through unfused. Fused
/// records keep the primary's value for every field and fill its gaps from
/// the secondary; disagreements are kept as primary and logged.
pub fn merge_lists(
    primary: &[PlantRecord],
    secondary: &[PlantRecord],
    policy: &MatchPolicy,
) -> Result<(Vec<PlantRecord>, MatchReport), PlantError> {
    policy.validate()?;
    let mut report = MatchReport::default();
    let mut open_p: BTreeSet<usize> = (0..primary.len()).collect();
    let mut open_s: BTreeSet<usize> = (0..secondary.len()).collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut ambiguous_p = BTreeSet::new();
    let mut ambiguous_s = BTreeSet::new();

    for &key in &policy.keys {
        let (by_p, by_s) = candidates(key, policy.tolerance, primary, &open_p, secondary, &open_s);
        for (&p, cands) in &by_p {
            if cands.len() == 1 && by_s.get(&cands[0]).is_some_and(|back| back.len() == 1) {
                pairs.push((p, cands[0]));
                report.matched.push(MatchedPair {
                    primary: primary[p].record_id.clone(),
                    secondary: secondary[cands[0]].record_id.clone(),
                    key,
                });
            } else if cands.len() > 1 {
                ambiguous_p.insert(p);
                report.ambiguous.push(Ambiguity {
                    side: Side::Primary,
                    record_id: primary[p].record_id.clone(),
                    key,
                    candidates: sorted_ids(cands.iter().map(|&s| &secondary[s])),
                });
            }
        }
        for (&s, cands) in &by_s {
            if cands.len() > 1 {
                ambiguous_s.insert(s);
                report.ambiguous.push(Ambiguity {
                    side: Side::Secondary,
                    record_id: secondary[s].record_id.clone(),
                    key,
                    candidates: sorted_ids(cands.iter().map(|&p| &primary[p])),
                });
            }
        }
        for &(p, s) in &pairs {
            open_p.remove(&p);
            open_s.remove(&s);
        }
        open_p.retain(|p| !ambiguous_p.contains(p));
        open_s.retain(|s| !ambiguous_s.contains(s));
    }

    let matched_p: HashMap<usize, usize> = pairs.iter().copied().collect();
    let matched_s: BTreeSet<usize> = pairs.iter().map(|&(_, s)| s).collect();
    let mut out = Vec::with_capacity(primary.len() + secondary.len() - pairs.len());
    for (p, rec) in primary.iter().enumerate() {
        let mut r = match matched_p.get(&p) {
            Some(&s) => fuse(rec, &secondary[s], &mut report),
            None => rec.clone(),
        };
        if ambiguous_p.contains(&p) {
            r.mark(MarkerFlag::Custom(AMBIGUOUS_MATCH.into()), "ambiguous_match");
        }
        out.push(r);
    }
    for (s, rec) in secondary.iter().enumerate() {
        if matched_s.contains(&s) {
            continue;
        }
        let mut r = rec.clone();
        if ambiguous_s.contains(&s) {
            r.mark(MarkerFlag::Custom(AMBIGUOUS_MATCH.into()), "ambiguous_match");
        }
        out.push(r);
    }
    sort_records(&mut out);
    report.matched.sort();
    report.ambiguous.sort();
    report.conflicts.sort_by(|a, b| (&a.primary, &a.secondary, &a.field).cmp(&(&b.primary, &b.secondary, &b.field)));
    Ok((out, report))
}

fn sorted_ids<'a>(records: impl Iterator<Item = &'a PlantRecord>) -> Vec<String> {
    let mut ids: Vec<String> = records.map(|r| r.record_id.clone()).collect();
    ids.sort();
    ids
}

pub fn sort_records(records: &mut [PlantRecord]) {
    records.sort_by_cached_key(|r| (r.sort_key(), serde_json::to_string(r).unwrap_or_default()));
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Moved {
    pub record_id: String,
    pub from: Domain,
    pub to: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Overlap {
    pub conventional: String,
    pub renewable: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct OverlapReport {
    pub moved: Vec<Moved>,
    pub duplicates: Vec<Overlap>,
    /// Records whose node has no resolved domain; left where they were.
    pub unclassified: Vec<String>,
}

impl OverlapReport {
    pub fn is_empty(&self) -> bool {
        self.moved.is_empty() && self.duplicates.is_empty() && self.unclassified.is_empty()
    }
}

pub const CROSS_DOMAIN_DUPLICATE: &str = "cross_domain_duplicate";

/// Put every record in the list its taxonomy leaf belongs to, then flag
/// candidate duplicates across the two lists. Never deletes.
pub fn dedupe_cross_domain(
    conventional: Vec<PlantRecord>,
    renewable: Vec<PlantRecord>,
    t: &Taxonomy,
    tolerance: f64,
) -> (Vec<PlantRecord>, Vec<PlantRecord>, OverlapReport) {
    let mut report = OverlapReport::default();
    let mut conv = Vec::with_capacity(conventional.len());
    let mut ren = Vec::with_capacity(renewable.len());
    for (list, domain) in [(conventional, Domain::Conventional), (renewable, Domain::Renewable)] {
        for r in list {
            let target = match t.domain_of(&r.source_node) {
                Ok(d) => d,
                Err(_) => {
                    report.unclassified.push(r.record_id.clone());
                    domain
                }
            };
            if target != domain {
                report.moved.push(Moved { record_id: r.record_id.clone(), from: domain, to: target });
            }
            match target {
                Domain::Conventional => conv.push(r),
                Domain::Renewable => ren.push(r),
            }
        }
    }

    let mut by_eic: HashMap<String, Vec<usize>> = HashMap::new();
    let mut by_name: HashMap<(String, String), Vec<usize>> = HashMap::new();
    for (i, r) in ren.iter().enumerate() {
        if let Some(e) = eic_key(r) {
            by_eic.entry(e).or_default().push(i);
        }
        let name = normalize_name(&r.name);
        if !name.is_empty() {
            by_name.entry((r.country.trim().to_uppercase(), name)).or_default().push(i);
        }
    }
    let mut hits: BTreeSet<(usize, usize, &'static str)> = BTreeSet::new();
    for (ci, c) in conv.iter().enumerate() {
        if let Some(list) = eic_key(c).and_then(|e| by_eic.get(&e)) {
            hits.extend(list.iter().map(|&ri| (ci, ri, "same_eic")));
        }
        let name = normalize_name(&c.name);
        if let Some(list) = by_name.get(&(c.country.trim().to_uppercase(), name)) {
            for &ri in list {
                if c.capacity_net_mw.is_some()
                    && ren[ri].capacity_net_mw.is_some()
                    && within_tolerance(c.capacity_net_mw, ren[ri].capacity_net_mw, tolerance)
                    && !hits.contains(&(ci, ri, "same_eic"))
                {
                    hits.insert((ci, ri, "same_name_and_capacity"));
                }
            }
        }
    }
    for &(ci, ri, reason) in &hits {
        conv[ci].mark(MarkerFlag::Implausible, CROSS_DOMAIN_DUPLICATE);
        ren[ri].mark(MarkerFlag::Implausible, CROSS_DOMAIN_DUPLICATE);
        report.duplicates.push(Overlap {
            conventional: conv[ci].record_id.clone(),
            renewable: ren[ri].record_id.clone(),
            reason: reason.to_string(),
        });
    }
    report.moved.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    report.duplicates.sort_by(|a, b| (&a.conventional, &a.renewable).cmp(&(&b.conventional, &b.renewable)));
    report.unclassified.sort();
    (conv, ren, report)
}

pub const RULE_FIELDS: [&str; 5] = ["capacity_net_mw", "capacity_gross_mw", "efficiency", "lat", "lon"];

/// A bound on one numeric field, optionally restricted to a taxonomy subtree
/// and a technology label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub id: String,
    pub field: String,
    #[serde(default)]
    pub node: Option<String>,
    #[serde(default)]
    pub technology: Option<String>,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

impl Rule {
    fn value(&self, r: &PlantRecord) -> Option<f64> {
        match self.field.as_str() {
            "capacity_net_mw" => r.capacity_net_mw,
            "capacity_gross_mw" => r.capacity_gross_mw,
            "efficiency" => r.efficiency,
            "lat" => r.lat,
            "lon" => r.lon,
            _ => None,
        }
    }

    fn applies(&self, r: &PlantRecord, t: &Taxonomy) -> bool {
        self.node.as_deref().is_none_or(|n| t.is_in_subtree(&r.source_node, n))
            && self.technology.as_deref().is_none_or(|tech| tech.trim().eq_ignore_ascii_case(r.technology.trim()))
    }

    fn violated_by(&self, r: &PlantRecord) -> bool {
        self.value(r).is_some_and(|v| self.min.is_some_and(|m| v < m) || self.max.is_some_and(|m| v > m))
    }
}

/// Rules applied when no rule file is configured.
pub fn default_rules() -> Vec<Rule> {
    let rule = |id: &str, field: &str, node: Option<&str>, technology: Option<&str>, min: Option<f64>, max: Option<f64>| Rule {
        id: id.into(),
        field: field.into(),
        node: node.map(Into::into),
        technology: technology.map(Into::into),
        min,
        max,
    };
    vec![
        rule("capacity_net_non_negative", "capacity_net_mw", None, None, Some(0.0), None),
        rule("capacity_gross_non_negative", "capacity_gross_mw", None, None, Some(0.0), None),
        rule("rooftop_solar_max_1mw", "capacity_net_mw", Some("photovoltaics"), Some("rooftop"), None, Some(1.0)),
        rule("efficiency_at_most_one", "efficiency", None, None, None, Some(1.0)),
    ]
}

pub fn validate_rules(rules: &[Rule], t: &Taxonomy) -> Result<(), PlantError> {
    for rule in rules {
        if !RULE_FIELDS.contains(&rule.field.as_str()) {
            return Err(PlantError::UnknownRuleField { rule: rule.id.clone(), field: rule.field.clone() });
        }
        if let Some(n) = &rule.node {
            if !t.contains(n) {
                return Err(PlantError::UnknownRuleNode { rule: rule.id.clone(), node: n.clone() });
            }
        }
        if rule.min.is_none() && rule.max.is_none() {
            return Err(PlantError::EmptyRule(rule.id.clone()));
        }
    }
    Ok(())
}

/// Mark every rule violation with `implausible` and the rule id. Values are
/// never changed.
pub fn flag_implausible(records: &[PlantRecord], rules: &[Rule], t: &Taxonomy) -> Result<Vec<PlantRecord>, PlantError> {
    validate_rules(rules, t)?;
    Ok(records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for rule in rules {
                if rule.applies(&r, t) && rule.violated_by(&r) {
                    r.mark(MarkerFlag::Implausible, &rule.id);
                }
            }
            r
        })
        .collect())
}
