//! Per-point provenance flags.
//!
//! Flags are only ever added by pipeline stages. The four built-in flags form
//! the closed core vocabulary; anything else must be namespaced as
//! `<namespace>:<name>`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MarkerFlag {
    Interpolated,
    OwnCalculation,
    Implausible,
    SummedFromComponents,
    /// Namespaced extension flag, stored as the full `ns:name` string.
    Custom(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown marker flag {0:?}")]
pub struct UnknownMarker(pub String);

impl MarkerFlag {
    pub fn as_str(&self) -> &str {
        match self {
            MarkerFlag::Interpolated => "interpolated",
            MarkerFlag::OwnCalculation => "own_calculation",
            MarkerFlag::Implausible => "implausible",
            MarkerFlag::SummedFromComponents => "summed_from_components",
            MarkerFlag::Custom(s) => s,
        }
    }

    pub fn custom(namespace: &str, name: &str) -> Result<Self, UnknownMarker> {
        format!("{namespace}:{name}").parse()
    }
}

fn is_flag_token(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

impl FromStr for MarkerFlag {
    type Err = UnknownMarker;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "interpolated" => MarkerFlag::Interpolated,
            "own_calculation" => MarkerFlag::OwnCalculation,
            "implausible" => MarkerFlag::Implausible,
            "summed_from_components" => MarkerFlag::SummedFromComponents,
            other => match other.split_once(':') {
                Some((ns, name)) if is_flag_token(ns) && is_flag_token(name) => MarkerFlag::Custom(other.to_string()),
                _ => return Err(UnknownMarker(other.to_string())),
            },
        })
    }
}

impl fmt::Display for MarkerFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// Ordering follows the rendered name so that sorted sets render sorted.
impl Ord for MarkerFlag {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.as_str().cmp(other.as_str())
    }
}

impl PartialOrd for MarkerFlag {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for MarkerFlag {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for MarkerFlag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub type MarkerSet = BTreeSet<MarkerFlag>;

/// Render a marker set as sorted, semicolon-joined flag names.
pub fn render(set: &MarkerSet) -> String {
    let mut out = String::new();
    for (i, flag) in set.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        out.push_str(flag.as_str());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MarkerParseError {
    #[error(transparent)]
    Unknown(#[from] UnknownMarker),
    #[error("marker flags not sorted or duplicated in {0:?}")]
    NotCanonical(String),
}

/// Parse the canonical rendering produced by [`render`]. Unsorted or
/// duplicated lists are rejected so that rendering stays a bijection.
pub fn parse(text: &str) -> Result<MarkerSet, MarkerParseError> {
    if text.is_empty() {
        return Ok(MarkerSet::new());
    }
    let mut set = MarkerSet::new();
    let mut prev: Option<&str> = None;
    for token in text.split(';') {
        let flag: MarkerFlag = token.parse()?;
        if prev.is_some_and(|p| p >= token) {
            return Err(MarkerParseError::NotCanonical(text.to_string()));
        }
        prev = Some(token);
        set.insert(flag);
    }
    Ok(set)
}
