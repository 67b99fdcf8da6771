//! Plan documents and CSV formatting for the `kw` command-line tool.

pub mod document;
pub mod format;

pub use document::{DocumentError, PlanDocument, PlanStatus, SCHEMA_VERSION};
