//! Real-time passenger information core.
//!
//! Converts raw GPS traces into optimized node/link route models, ingests
//! live vehicle position updates, maintains per-link travel-time estimates,
//! predicts arrival times at stops, and answers passenger/operator queries.
//! A deterministic fleet simulator stands in for on-vehicle hardware, and an
//! analytic capacity model estimates how large a fleet a single server can
//! carry.

pub mod capacity;
pub mod error;
pub mod eta;
pub mod geo;
pub mod query;
pub mod sim;
pub mod store;
pub mod trace;
pub mod tracker;

pub use error::Error;
pub use geo::GeoPoint;
pub use store::{Category, Store};
