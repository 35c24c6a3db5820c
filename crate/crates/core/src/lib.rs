//! Turn heterogeneous raw electricity-system tables into validated, versioned
//! Tabular Data Packages.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`sources`]: dialect-aware ingestion and the content-addressed snapshot cache
//! * [`taxonomy`]: the three-level energy-source classification and vocabulary mappings
//! * [`timeseries`]: UTC normalization, marked gap filling, hourly aggregation, capacity profiles
//! * [`plants`]: plant-list merging, cross-domain deduplication, plausibility flags
//! * [`capacity`]: cross-source national capacity matrices with strict zero-vs-NA semantics
//! * [`weather`]: gridded field subsetting, wind speed derivation, flattening
//! * [`datapackage`]: deterministic CSV/descriptor output, validation and version stamping
//! * [`pipeline`] and [`cli`]: end-to-end orchestration
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is
//! enabled (the default); see [`Exec`].

pub mod capacity;
pub mod cli;
pub mod datapackage;
pub mod events;
pub mod fsutil;
pub mod markers;
pub mod par;
pub mod pipeline;
pub mod plants;
pub mod sources;
pub mod taxonomy;
pub mod timeseries;
pub mod weather;

pub use markers::{MarkerFlag, MarkerSet};
pub use par::Exec;
