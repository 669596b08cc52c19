//! Compatible representation learning through feature stationarity.
//!
//! Feature extractors are trained against a fixed regular-polytope classifier
//! whose unused outputs are reserved for classes that arrive in later
//! upgrades. Because the prototypes never move, features learned at different
//! upgrade steps stay comparable, and galleries indexed by an old model can be
//! queried with a new one without re-indexing.

pub mod dataset;
pub mod error;
pub mod gallery;
pub mod linalg;
pub mod metrics;
pub mod netcore;
pub mod polytope;
pub mod report;
pub mod seed;
pub mod timeline;

pub use error::{Error, Result};
