//! Multi-modal knowledge graph enrichment: dataset handling, image crawling,
//! captioning, caption fusion, link prediction and human audit.

pub mod audit;
pub mod captioning;
pub mod crawler;
pub mod fusion;
pub mod io;
pub mod kgdata;
pub mod linkpred;
pub mod pipeline;
pub mod provider;

pub use captioning::{Caption, DegenerateReason};
pub use crawler::{ImageRecord, ImageSource};
pub use fusion::{FusedSummary, Variant};
pub use kgdata::{Dataset, Entity, Qid, Triple};

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;
