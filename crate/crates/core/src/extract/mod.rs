//! Schema-constrained extraction from source documents.

pub mod backend;
pub mod contract;
pub mod job;
pub mod prompt;

pub use backend::{Backend, BackendError, BackendKind, LlmBackendSpec, PrivacyTier, PrivacyViolation};
pub use contract::{enforce_contract, RawExtraction, RecordSchema, SCHEMA_VERSION};
pub use job::{load_corpus, run_job, CorpusDocument, ExtractionJob, JobError, JobOutput, JobReport, SubjectOutcome};
pub use prompt::{build_prompt, PromptExample, PromptTemplate};
