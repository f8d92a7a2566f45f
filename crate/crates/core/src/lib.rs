//! Core of a self-hosted newsletter evaluation service.
//!
//! Newsletters are split into messages, sent to a panel through personal
//! tracked links, and the interaction events those pages report are turned
//! into reading sessions, per-message reading-time estimates and the
//! awareness, relevance, cost and reputation metrics communicators see.

pub mod delivery;
pub mod domain;
pub mod error;
pub mod estimation;
pub mod feedback;
pub mod ingest;
pub mod metrics;
pub mod reports;
pub mod service;
pub mod splitter;
pub mod store;
pub mod token;

pub use error::{Error, Result};
