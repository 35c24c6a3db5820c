//! Three-level classification of energy sources and technologies.
//!
//! The tree and the source-vocabulary mappings are data files (see
//! `data/taxonomy.json` and `data/mappings/`), loaded and validated here.
//! Every leaf resolves to exactly one package domain, conventional or
//! renewable; hydro technologies are split explicitly so that no leaf is
//! covered by both plant lists.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const ROOTS: [&str; 4] = ["renewable", "fossil", "nuclear", "other_or_unspecified"];
pub const OTHER_OR_UNSPECIFIED: &str = "other_or_unspecified";
pub const MAX_LEVEL: u8 = 3;

/// The taxonomy shipped with the crate.
pub const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Conventional,
    Renewable,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Conventional => "conventional",
            Domain::Renewable => "renewable",
        })
    }
}

/// Declared domain of a node. `Mixed` inner nodes have children in both
/// domains; `None` inherits from the nearest ancestor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainDecl {
    Conventional,
    Renewable,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyNode {
    pub id: String,
    pub label: String,
    pub level: u8,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub domain: Option<DomainDecl>,
    /// Free-text provenance note for the node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { node: String },
    LevelOutOfRange { node: String, level: u8 },
    RootWithParent { node: String },
    MissingParent { node: String },
    UnknownParent { node: String, parent: String },
    LevelSkip { node: String, level: u8, parent_level: u8 },
    Cycle { node: String },
    MissingRoot { node: String },
    UnexpectedRoot { node: String },
    UnresolvedDomain { node: String },
}

impl Violation {
    pub fn node(&self) -> &str {
        match self {
            Violation::DuplicateId { node }
            | Violation::LevelOutOfRange { node, .. }
            | Violation::RootWithParent { node }
            | Violation::MissingParent { node }
            | Violation::UnknownParent { node, .. }
            | Violation::LevelSkip { node, .. }
            | Violation::Cycle { node }
            | Violation::MissingRoot { node }
            | Violation::UnexpectedRoot { node }
            | Violation::UnresolvedDomain { node } => node,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { node } => write!(f, "{node}: duplicate id"),
            Violation::LevelOutOfRange { node, level } => write!(f, "{node}: level {level} outside 1..=3"),
            Violation::RootWithParent { node } => write!(f, "{node}: level 1 node has a parent"),
            Violation::MissingParent { node } => write!(f, "{node}: non-root node without parent"),
            Violation::UnknownParent { node, parent } => write!(f, "{node}: unknown parent {parent}"),
            Violation::LevelSkip { node, level, parent_level } => {
                write!(f, "{node}: level skip (level {level} under level {parent_level})")
            }
            Violation::Cycle { node } => write!(f, "{node}: cycle"),
            Violation::MissingRoot { node } => write!(f, "{node}: required root missing"),
            Violation::UnexpectedRoot { node } => write!(f, "{node}: unexpected level 1 node"),
            Violation::UnresolvedDomain { node } => write!(f, "{node}: leaf domain unresolved"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("taxonomy file {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid taxonomy: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("node {0:?} has no resolved package domain")]
    UnresolvedDomain(String),
    #[error("unmapped term {0:?}")]
    UnmappedTerm(String),
    #[error("mapping {mapping:?}: {message}")]
    InvalidMapping { mapping: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    nodes: Vec<TaxonomyNode>,
    index: HashMap<String, usize>,
    children: HashMap<String, Vec<String>>,
}

impl Taxonomy {
    /// Build an index over `nodes` without checking invariants; see [`Taxonomy::validate`].
    pub fn new(nodes: Vec<TaxonomyNode>) -> Self {
        let mut index = HashMap::new();
        let mut children: HashMap<String, Vec<String>> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            index.entry(n.id.clone()).or_insert(i);
            if let Some(p) = &n.parent {
                children.entry(p.clone()).or_default().push(n.id.clone());
            }
        }
        Taxonomy { nodes, index, children }
    }

    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        let nodes: Vec<TaxonomyNode> =
            serde_json::from_str(text).map_err(|e| TaxonomyError::Parse { path: "<inline>".into(), message: e.to_string() })?;
        let t = Taxonomy::new(nodes);
        let report = t.validate();
        if report.is_empty() {
            Ok(t)
        } else {
            Err(TaxonomyError::Invalid(report))
        }
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = fs::read_to_string(path).map_err(|source| TaxonomyError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text).map_err(|e| match e {
            TaxonomyError::Parse { message, .. } => TaxonomyError::Parse { path: path.display().to_string(), message },
            other => other,
        })
    }

    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_TAXONOMY).expect("shipped taxonomy is valid")
    }

    pub fn nodes(&self) -> &[TaxonomyNode] {
        &self.nodes
    }

    pub fn get(&self, id: &str) -> Option<&TaxonomyNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn children(&self, id: &str) -> &[String] {
        self.children.get(id).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn is_leaf(&self, id: &str) -> bool {
        self.children(id).is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TaxonomyNode> {
        self.nodes.iter().filter(|n| self.is_leaf(&n.id))
    }

    /// Check every structural invariant. An empty report means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut report = Vec::new();
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                report.push(Violation::DuplicateId { node: n.id.clone() });
            }
            if !(1..=MAX_LEVEL).contains(&n.level) {
                report.push(Violation::LevelOutOfRange { node: n.id.clone(), level: n.level });
            }
            match (&n.parent, n.level) {
                (Some(_), 1) => report.push(Violation::RootWithParent { node: n.id.clone() }),
                (None, l) if l != 1 => report.push(Violation::MissingParent { node: n.id.clone() }),
                (Some(p), level) => match self.get(p) {
                    None => report.push(Violation::UnknownParent { node: n.id.clone(), parent: p.clone() }),
                    Some(parent) if parent.level + 1 != level => {
                        report.push(Violation::LevelSkip { node: n.id.clone(), level, parent_level: parent.level })
                    }
                    Some(_) => {}
                },
                _ => {}
            }
        }
        for n in &self.nodes {
            let mut visited = HashSet::new();
            let mut cur = Some(n);
            while let Some(node) = cur {
                if !visited.insert(node.id.as_str()) {
                    report.push(Violation::Cycle { node: n.id.clone() });
                    break;
                }
                cur = node.parent.as_deref().and_then(|p| self.get(p));
            }
        }
        let roots: Vec<&str> = self.nodes.iter().filter(|n| n.level == 1).map(|n| n.id.as_str()).collect();
        for r in ROOTS {
            if !roots.contains(&r) {
                report.push(Violation::MissingRoot { node: r.to_string() });
            }
        }
        for r in roots {
            if !ROOTS.contains(&r) {
                report.push(Violation::UnexpectedRoot { node: r.to_string() });
            }
        }
        if report.is_empty() {
            for leaf in self.leaves() {
                if self.domain_of(&leaf.id).is_err() {
                    report.push(Violation::UnresolvedDomain { node: leaf.id.clone() });
                }
            }
        }
        report
    }

    /// Path from the level-1 root down to `id`, inclusive.
    pub fn ancestors(&self, id: &str) -> Result<Vec<&str>, TaxonomyError> {
        let mut node = self.get(id).ok_or_else(|| TaxonomyError::UnknownNode(id.to_string()))?;
        let mut path = vec![node.id.as_str()];
        while let Some(p) = &node.parent {
            if path.len() > MAX_LEVEL as usize {
                return Err(TaxonomyError::Invalid(vec![Violation::Cycle { node: id.to_string() }]));
            }
            node = self.get(p).ok_or_else(|| TaxonomyError::UnknownNode(p.clone()))?;
            path.push(node.id.as_str());
        }
        path.reverse();
        Ok(path)
    }

    /// Ancestor of `id` at `level` (the node itself when at that level).
    pub fn ancestor_at(&self, id: &str, level: u8) -> Result<Option<&str>, TaxonomyError> {
        let path = self.ancestors(id)?;
        Ok(path.get(usize::from(level).wrapping_sub(1)).copied())
    }

    pub fn is_in_subtree(&self, id: &str, root: &str) -> bool {
        self.ancestors(id).is_ok_and(|p| p.contains(&root))
    }

    pub fn level(&self, id: &str) -> Result<u8, TaxonomyError> {
        self.get(id).map(|n| n.level).ok_or_else(|| TaxonomyError::UnknownNode(id.to_string()))
    }

    /// Package domain of a node: its own declaration, else the nearest
    /// ancestor's. `Mixed` nodes themselves have no single domain.
    pub fn domain_of(&self, id: &str) -> Result<Domain, TaxonomyError> {
        let path = self.ancestors(id)?;
        for nid in path.iter().rev() {
            match self.get(nid).and_then(|n| n.domain) {
                Some(DomainDecl::Conventional) => return Ok(Domain::Conventional),
                Some(DomainDecl::Renewable) => return Ok(Domain::Renewable),
                Some(DomainDecl::Mixed) => return Err(TaxonomyError::UnresolvedDomain(id.to_string())),
                None => {}
            }
        }
        Err(TaxonomyError::UnresolvedDomain(id.to_string()))
    }
}

/// Trim, collapse inner whitespace, and lowercase.
pub fn normalize_term(term: &str) -> String {
    term.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabEntry {
    pub term: String,
    #[serde(default)]
    pub context: Option<String>,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabMappingFile {
    pub id: String,
    pub entries: Vec<VocabEntry>,
}

/// Source term to taxonomy node lookup, validated against a taxonomy.
#[derive(Debug, Clone)]
pub struct VocabMapping {
    pub id: String,
    lookup: BTreeMap<(String, Option<String>), String>,
}

/// What to do with terms a mapping does not cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnmappedPolicy {
    #[default]
    Error,
    /// Classify as `other_or_unspecified` and let the caller mark the record.
    RouteToOther,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub node: String,
    /// True when the term was not in the mapping and was routed to
    /// `other_or_unspecified`.
    pub routed: bool,
}

impl VocabMapping {
    pub fn new(file: VocabMappingFile, t: &Taxonomy) -> Result<Self, TaxonomyError> {
        let invalid = |message: String| TaxonomyError::InvalidMapping { mapping: file.id.clone(), message };
        let mut lookup = BTreeMap::new();
        for e in &file.entries {
            if !t.contains(&e.node) {
                return Err(invalid(format!("term {:?} targets unknown node {:?}", e.term, e.node)));
            }
            let key = (normalize_term(&e.term), e.context.as_deref().map(normalize_term));
            if let Some(prev) = lookup.insert(key.clone(), e.node.clone()) {
                if prev != e.node {
                    return Err(invalid(format!("term {:?} maps to both {prev:?} and {:?}", key.0, e.node)));
                }
            }
        }
        Ok(VocabMapping { id: file.id, lookup })
    }

    pub fn from_json(text: &str, t: &Taxonomy) -> Result<Self, TaxonomyError> {
        let file: VocabMappingFile =
            serde_json::from_str(text).map_err(|e| TaxonomyError::Parse { path: "<inline>".into(), message: e.to_string() })?;
        Self::new(file, t)
    }

    pub fn load(path: &Path, t: &Taxonomy) -> Result<Self, TaxonomyError> {
        let text = fs::read_to_string(path).map_err(|source| TaxonomyError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text, t).map_err(|e| match e {
            TaxonomyError::Parse { message, .. } => TaxonomyError::Parse { path: path.display().to_string(), message },
            other => other,
        })
    }

    pub fn len(&self) -> usize {
        self.lookup.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lookup.is_empty()
    }

    /// Normalized `(term, context)` keys.
    pub fn keys(&self) -> impl Iterator<Item = &(String, Option<String>)> {
        self.lookup.keys()
    }

    pub fn classify(&self, term: &str) -> Result<&str, TaxonomyError> {
        self.classify_in_context(term, None)
    }

    /// Look up `(term, context)` first, then the context-free entry.
    pub fn classify_in_context(&self, term: &str, context: Option<&str>) -> Result<&str, TaxonomyError> {
        let norm = normalize_term(term);
        let ctx = context.map(normalize_term);
        if ctx.is_some() {
            if let Some(node) = self.lookup.get(&(norm.clone(), ctx)) {
                return Ok(node);
            }
        }
        self.lookup.get(&(norm.clone(), None)).map(String::as_str).ok_or(TaxonomyError::UnmappedTerm(norm))
    }

    pub fn classify_with_policy(&self, term: &str, context: Option<&str>, policy: UnmappedPolicy) -> Result<Classification, TaxonomyError> {
        match self.classify_in_context(term, context) {
            Ok(node) => Ok(Classification { node: node.to_string(), routed: false }),
            Err(TaxonomyError::UnmappedTerm(_)) if policy == UnmappedPolicy::RouteToOther => {
                Ok(Classification { node: OTHER_OR_UNSPECIFIED.to_string(), routed: true })
            }
            Err(e) => Err(e),
        }
    }
}

/// Convenience wrapper for the free-function form of the lookup.
pub fn classify<'m>(term: &str, mapping: &'m VocabMapping, _t: &Taxonomy) -> Result<&'m str, TaxonomyError> {
    mapping.classify(term)
}

/// Mapping files shipped with the crate, keyed by id.
pub fn builtin_mappings(t: &Taxonomy) -> Result<BTreeMap<String, VocabMapping>, TaxonomyError> {
    [include_str!("../data/mappings/de_generic.json"), include_str!("../data/mappings/en_generic.json")]
        .iter()
        .map(|text| VocabMapping::from_json(text, t).map(|m| (m.id.clone(), m)))
        .collect()
}
