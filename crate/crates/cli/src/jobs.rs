//! Extraction runs shared by the CLI and the background jobs of the service.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use oncotwin_core::config::ConfigError;
use oncotwin_core::extract::{
    load_corpus, run_job, Backend, BackendError, BackendKind, ExtractionJob, JobError, JobOutput, JobReport,
    PrivacyTier,
};
use oncotwin_core::ingest::IngestError;
use oncotwin_core::{Config, Origin};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("refusing to route {origin} documents to the {backend} backend: its privacy tier is public_only")]
    Privacy { origin: Origin, backend: BackendKind },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error("manifest lists no {0} documents")]
    NoDocuments(Origin),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractRequest {
    #[serde(default = "default_manifest")]
    pub manifest: PathBuf,
    pub origin: Origin,
    pub backend: BackendKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Reply directory for the mock backend, overriding the configured one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replies: Option<PathBuf>,
}

fn default_manifest() -> PathBuf {
    PathBuf::from("manifest.jsonl")
}

fn default_width() -> usize {
    1
}

/// Refuses EHR material for a public-only backend. Runs before the backend
/// section is resolved, so no endpoint is ever looked up or contacted.
pub fn preflight(config: &Config, req: &ExtractRequest) -> Result<(), ExtractError> {
    if req.origin == Origin::Ehr && config.privacy_tier(req.backend) == PrivacyTier::PublicOnly {
        return Err(ExtractError::Privacy {
            origin: req.origin,
            backend: req.backend,
        });
    }
    Ok(())
}

pub fn execute_extraction(config: &Config, req: &ExtractRequest) -> Result<JobOutput, ExtractError> {
    preflight(config, req)?;
    let mut spec = config.backend_spec(req.backend)?;
    if let (BackendKind::Mock, Some(dir)) = (req.backend, &req.replies) {
        spec.endpoint = dir.to_string_lossy().into_owned();
    }
    let backend = Backend::from_spec(spec)?;
    let mut corpus = load_corpus(&req.manifest, &config.ocr_adapter())?;
    corpus.retain(|d| d.entry.origin == req.origin);
    if corpus.is_empty() {
        return Err(ExtractError::NoDocuments(req.origin));
    }
    let mut job = ExtractionJob::over(&corpus, req.origin, req.seed);
    job.width = req.width.max(1);
    Ok(run_job(&job, &backend, &corpus)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded { report: JobReport, stored: Vec<String> },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub id: String,
    pub request: ExtractRequest,
    #[serde(flatten)]
    pub status: JobStatus,
}

/// In-memory table of background extraction jobs.
#[derive(Debug, Default)]
pub struct JobRegistry {
    next: AtomicU64,
    jobs: Mutex<BTreeMap<String, JobView>>,
}

impl JobRegistry {
    pub fn start(&self, request: ExtractRequest) -> JobView {
        let id = format!("job-{}", self.next.fetch_add(1, Ordering::SeqCst) + 1);
        let view = JobView {
            id: id.clone(),
            request,
            status: JobStatus::Running,
        };
        self.jobs.lock().expect("job table poisoned").insert(id, view.clone());
        view
    }

    pub fn finish(&self, id: &str, status: JobStatus) {
        if let Some(v) = self.jobs.lock().expect("job table poisoned").get_mut(id) {
            v.status = status;
        }
    }

    pub fn get(&self, id: &str) -> Option<JobView> {
        self.jobs.lock().expect("job table poisoned").get(id).cloned()
    }
}
