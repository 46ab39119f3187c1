//! Data side of the excellence mapping engine: corpus ingest, reader-count
//! acquisition, top-10% indicators, institution aggregation and the
//! ranking bundles the map and list views load.

pub mod aggregate;
pub mod config;
pub mod demo;
pub mod error;
pub mod export;
pub mod fetch;
pub mod fitting;
pub mod indicators;
pub mod ingest;
pub mod pipeline;
pub mod sector;
pub mod subject;
mod table;

pub use error::{CoreError, Result};
pub use sector::{map_status_to_sector, Indicator, Sector};
pub use subject::Subject;
