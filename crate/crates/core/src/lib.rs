//! Pruning a small decoder-only transformer and recovering its accuracy by
//! learning per-head lost components that fold into bias slots.

pub mod error;
pub mod format;
pub mod harness;
pub mod lcc;
pub mod linalg;
pub mod lossdiff;
pub mod model;
pub mod probing;
pub mod pruning;

pub use error::{LccError, Result};
