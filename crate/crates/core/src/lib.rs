//! Digital twins of rare-tumor patients: extraction from clinical text,
//! storage, analog matching, cohort statistics, evaluation and biomarker
//! driven recommendations.

pub mod analytics;
pub mod config;
pub mod eval;
pub mod extract;
pub mod ingest;
pub mod matcher;
pub mod model;
pub mod parse;
pub mod recommend;
pub mod store;

pub use analytics::{summarize, CensoringPolicy, CohortSummary};
pub use config::Config;
pub use eval::{ConfusionTally, Metrics, Verdict};
pub use ingest::{ManifestEntry, Origin, SourceDocument};
pub use matcher::{EligibilitySpec, MatchResult, WhatIfOverrides};
pub use model::{
    BiomarkerPanel, CensoredDuration, DigitalTwin, Marker, MmrStatus, PdL1Score, ResponseCategory, SimilarityCriterion,
    Source, ValidationReport,
};
pub use recommend::{KnowledgeEntry, RecommendContext, Recommendation};
pub use store::{OutcomeUpdate, TwinStore};
