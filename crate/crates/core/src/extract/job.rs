//! Extraction jobs: per-subject merge of document extractions into twins.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::backend::{check_privacy, Backend, BackendError, CompletionRequest, PrivacyViolation};
use super::contract::{attribute_count, enforce_contract, RawExtraction, RecordSchema};
use super::prompt::{build_prompt, PromptError, PromptExample, PromptTemplate};
use crate::eval::canonical;
use crate::ingest::{ingest, IngestError, ManifestEntry, OcrAdapter, Origin, SourceDocument};
use crate::model::{
    validate_twin, AgeValue, CensoredDuration, DigitalTwin, Marker, ResponseRecord, Source, ValidationReport,
};
use crate::parse::{parse_age, parse_duration, parse_mmr, parse_pdl1, parse_response, parse_tmb, parse_treatments};

#[derive(Debug, Error)]
pub enum JobError {
    #[error("unknown schema version {0:?}")]
    UnknownSchema(String),
    #[error(transparent)]
    Template(#[from] PromptError),
    #[error("document {0} is listed in the job but not in the corpus")]
    MissingDocument(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyViolation),
    #[error("backend failure aborted the job: {0}")]
    Fatal(BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionJob {
    pub doc_ids: Vec<String>,
    pub prompt_template_id: String,
    pub schema_version: String,
    pub seed: u64,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub examples: Vec<PromptExample>,
}

fn default_width() -> usize {
    1
}

impl ExtractionJob {
    /// A job over every document of a corpus, in corpus order.
    pub fn over(corpus: &[CorpusDocument], origin: Origin, seed: u64) -> Self {
        ExtractionJob {
            doc_ids: corpus.iter().map(|d| d.entry.doc_id.clone()).collect(),
            prompt_template_id: PromptTemplate::default_for(origin).id.to_string(),
            schema_version: super::contract::SCHEMA_VERSION.to_string(),
            seed,
            width: 1,
            examples: PromptExample::defaults(origin),
        }
    }
}

/// A manifest entry together with its loaded text.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusDocument {
    pub entry: ManifestEntry,
    pub doc: SourceDocument,
}

/// Loads every document named by a manifest. Paths resolve relative to
/// the manifest's directory.
pub fn load_corpus(manifest: &Path, ocr: &dyn OcrAdapter) -> Result<Vec<CorpusDocument>, IngestError> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = crate::ingest::read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let mut doc = ingest(&base.join(&entry.path), entry.origin, entry.patient_hint.clone(), ocr)?;
        if doc.doc_id != entry.doc_id {
            log::warn!(
                "{}: content hash is {}, keeping the manifest id",
                entry.doc_id,
                doc.doc_id
            );
            doc.doc_id = entry.doc_id.clone();
        }
        out.push(CorpusDocument { entry, doc });
    }
    Ok(out)
}

/// One attribute value and the document it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sourced {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedSubject {
    pub subject: String,
    pub twin: DigitalTwin,
    /// Attribute path to the values that made it into the twin.
    pub provenance: BTreeMap<String, Vec<Sourced>>,
    pub warnings: Vec<String>,
    pub validation: ValidationReport,
    pub documents: Vec<RawExtraction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub subject: String,
    pub reasons: Vec<String>,
    pub documents: Vec<RawExtraction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SubjectOutcome {
    Extracted(Box<ExtractedSubject>),
    Quarantined(QuarantineRecord),
}

impl SubjectOutcome {
    pub fn subject(&self) -> &str {
        match self {
            SubjectOutcome::Extracted(e) => &e.subject,
            SubjectOutcome::Quarantined(q) => &q.subject,
        }
    }

    pub fn twin(&self) -> Option<&DigitalTwin> {
        match self {
            SubjectOutcome::Extracted(e) => Some(&e.twin),
            SubjectOutcome::Quarantined(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobReport {
    pub schema_version: String,
    pub template: String,
    pub seed: u64,
    pub subjects: usize,
    pub extracted: usize,
    pub quarantined: usize,
    pub documents: usize,
    pub quarantined_documents: usize,
    pub repairs: usize,
    pub attribute_values: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutput {
    pub report: JobReport,
    pub outcomes: Vec<SubjectOutcome>,
}

impl JobOutput {
    pub fn twins(&self) -> impl Iterator<Item = &DigitalTwin> {
        self.outcomes.iter().filter_map(SubjectOutcome::twin)
    }
}

/// Runs the job subject by subject. Subjects are grouped by patient hint
/// (or document id) in first-appearance order. Per-subject failures become
/// quarantine records; privacy and configuration failures abort.
pub fn run_job(job: &ExtractionJob, backend: &Backend, corpus: &[CorpusDocument]) -> Result<JobOutput, JobError> {
    let template = PromptTemplate::by_id(&job.prompt_template_id)?;
    let by_id: BTreeMap<&str, &CorpusDocument> = corpus.iter().map(|d| (d.entry.doc_id.as_str(), d)).collect();

    let mut subjects: Vec<(String, Vec<&CorpusDocument>)> = Vec::new();
    for id in &job.doc_ids {
        let doc = *by_id
            .get(id.as_str())
            .ok_or_else(|| JobError::MissingDocument(id.clone()))?;
        RecordSchema::lookup(&job.schema_version, doc.entry.origin)
            .ok_or_else(|| JobError::UnknownSchema(job.schema_version.clone()))?;
        // Refuse the whole job before anything is sent anywhere.
        check_privacy(doc.entry.origin, id, backend.spec())?;
        let key = doc.entry.subject();
        match subjects.iter_mut().find(|(s, _)| s == key) {
            Some((_, docs)) => docs.push(doc),
            None => subjects.push((key.to_string(), vec![doc])),
        }
    }

    let results: Vec<Mutex<Option<Result<SubjectOutcome, BackendError>>>> =
        subjects.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let worker = || loop {
        if abort.load(Ordering::SeqCst) {
            break;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((subject, docs)) = subjects.get(i) else { break };
        let r = process_subject(subject, docs, job, &template, backend);
        if r.is_err() {
            abort.store(true, Ordering::SeqCst);
        }
        *results[i].lock().expect("result slot poisoned") = Some(r);
    };
    let width = job.width.max(1).min(subjects.len().max(1));
    if width == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..width {
                s.spawn(worker);
            }
        });
    }

    let mut outcomes = Vec::with_capacity(subjects.len());
    for slot in results {
        match slot.into_inner().expect("result slot poisoned") {
            Some(Ok(o)) => outcomes.push(o),
            Some(Err(e)) => return Err(JobError::Fatal(e)),
            None => {}
        }
    }

    let mut report = JobReport {
        schema_version: job.schema_version.clone(),
        template: template.id.to_string(),
        seed: job.seed,
        subjects: outcomes.len(),
        extracted: 0,
        quarantined: 0,
        documents: 0,
        quarantined_documents: 0,
        repairs: 0,
        attribute_values: 0,
    };
    for o in &outcomes {
        let docs = match o {
            SubjectOutcome::Extracted(e) => {
                report.extracted += 1;
                &e.documents
            }
            SubjectOutcome::Quarantined(q) => {
                report.quarantined += 1;
                &q.documents
            }
        };
        for d in docs {
            report.documents += 1;
            report.repairs += usize::from(d.repair_applied);
            match &d.parsed {
                Some(p) => {
                    let origin = by_id[d.doc_id.as_str()].entry.origin;
                    let schema = RecordSchema::for_origin(origin);
                    report.attribute_values += attribute_count(p, &schema);
                }
                None => report.quarantined_documents += 1,
            }
        }
    }
    Ok(JobOutput { report, outcomes })
}

fn process_subject(
    subject: &str,
    docs: &[&CorpusDocument],
    job: &ExtractionJob,
    template: &PromptTemplate,
    backend: &Backend,
) -> Result<SubjectOutcome, BackendError> {
    let mut raws = Vec::with_capacity(docs.len());
    for d in docs {
        let schema = RecordSchema::for_origin(d.entry.origin);
        let prompt = match build_prompt(&d.doc, template, &job.examples, backend.spec().max_context_chars) {
            Ok(p) => p,
            Err(e) => {
                raws.push(quarantined(&d.entry.doc_id, e.to_string()));
                continue;
            }
        };
        let req = CompletionRequest {
            doc_id: &d.entry.doc_id,
            prompt: &prompt,
            seed: job.seed,
        };
        match backend.invoke(d.entry.origin, &req) {
            Ok(payload) => raws.push(enforce_contract(&d.entry.doc_id, &payload, &schema)),
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => raws.push(quarantined(&d.entry.doc_id, format!("backend: {e}"))),
        }
    }
    if raws.iter().all(RawExtraction::is_quarantined) {
        let reasons = raws
            .iter()
            .filter_map(|r| r.quarantine_reason.as_ref().map(|q| format!("{}: {q}", r.doc_id)))
            .collect();
        return Ok(SubjectOutcome::Quarantined(QuarantineRecord {
            subject: subject.to_string(),
            reasons,
            documents: raws,
        }));
    }
    let first = &docs[0].entry;
    let source_ref = docs
        .iter()
        .find_map(|d| d.entry.source_ref.clone())
        .unwrap_or_else(|| first.doc_id.clone());
    let mut twin = DigitalTwin::new(subject, source_of(first.origin), source_ref);
    for d in docs {
        twin.similarity.extend(d.entry.similarity.iter().copied());
    }
    let (twin, provenance, warnings) = extract_record(twin, &raws);
    let validation = validate_twin(&twin);
    Ok(SubjectOutcome::Extracted(Box::new(ExtractedSubject {
        subject: subject.to_string(),
        twin,
        provenance,
        warnings,
        validation,
        documents: raws,
    })))
}

fn source_of(origin: Origin) -> Source {
    match origin {
        Origin::Ehr => Source::Institutional,
        Origin::Literature => Source::Literature,
    }
}

fn quarantined(doc_id: &str, reason: String) -> RawExtraction {
    RawExtraction {
        doc_id: doc_id.to_string(),
        payload: String::new(),
        parsed: None,
        repair_applied: false,
        repairs: Vec::new(),
        quarantine_reason: Some(reason),
    }
}

/// Text of a leaf value, `None` when the model reported nothing.
fn leaf_text(v: &Value) -> Option<String> {
    let s = match v {
        Value::Null => return None,
        Value::String(s) => s.trim().to_string(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().filter_map(leaf_text).collect();
            parts.join("; ")
        }
        Value::Object(_) => v.to_string(),
    };
    (!is_blank(&s)).then_some(s)
}

fn is_blank(s: &str) -> bool {
    matches!(
        s.trim().to_lowercase().as_str(),
        "" | "n/a" | "na" | "none" | "null" | "unknown" | "not reported" | "not available"
    )
}

fn list_items(v: &Value) -> Vec<String> {
    match v {
        Value::Array(items) => items.iter().filter_map(leaf_text).collect(),
        other => leaf_text(other)
            .map(|s| {
                s.split([';', '\n'])
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default(),
    }
}

const SCALARS: [&str; 12] = [
    "n",
    "age",
    "gender",
    "race",
    "diagnosis",
    "biomarkers.pd-l1",
    "biomarkers.tmb/mb",
    "biomarkers.msi/mss",
    "study treatment",
    "study treatment response.treatment response",
    "study treatment response.adverse effects",
    "main recommendation",
];
const DURATIONS: [&str; 2] = ["PFS", "OS"];
const LISTS: [&str; 2] = ["previous treatments", "biomarkers.others"];

fn lookup<'a>(map: &'a Map<String, Value>, path: &str) -> Option<&'a Value> {
    match path.split_once('.') {
        None => map.get(path),
        Some((head, tail)) => match map.get(head)? {
            Value::Object(inner) => inner.get(tail),
            // A flat string where a dictionary was expected feeds the
            // first sub-attribute only.
            v @ Value::String(_) if tail == "treatment response" => Some(v),
            v @ Value::String(_) if head == "biomarkers" && tail == "others" => Some(v),
            _ => None,
        },
    }
}

/// Merges parsed document extractions (in document order) into `twin`.
/// Scalars take the latest non-empty value and report conflicts; lists are
/// unioned in first-seen order.
pub fn extract_record(
    mut twin: DigitalTwin,
    raws: &[RawExtraction],
) -> (DigitalTwin, BTreeMap<String, Vec<Sourced>>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut prov: BTreeMap<String, Vec<Sourced>> = BTreeMap::new();
    let parsed: Vec<(&str, &Map<String, Value>)> = raws
        .iter()
        .filter_map(|r| r.parsed.as_ref().map(|p| (r.doc_id.as_str(), p)))
        .collect();
    for r in raws.iter().filter(|r| r.is_quarantined()) {
        warnings.push(format!(
            "document {} quarantined: {}",
            r.doc_id,
            r.quarantine_reason.as_deref().unwrap_or_default()
        ));
    }

    for path in SCALARS.iter().chain(DURATIONS.iter()) {
        let mut current: Option<Sourced> = None;
        for (doc_id, map) in &parsed {
            let Some(text) = lookup(map, path).and_then(leaf_text) else {
                continue;
            };
            if let Some(prev) = &current {
                let attr = path.rsplit('.').next().unwrap_or(path);
                if canonical(attr, &prev.text) != canonical(attr, &text) {
                    warnings.push(format!(
                        "{path}: {:?} from {} replaced by {:?} from {doc_id}",
                        prev.text, prev.doc_id, text
                    ));
                }
            }
            current = Some(Sourced {
                doc_id: doc_id.to_string(),
                text,
            });
        }
        if let Some(v) = current {
            prov.insert(path.to_string(), vec![v]);
        }
    }
    for path in LISTS {
        let mut items: Vec<Sourced> = Vec::new();
        for (doc_id, map) in &parsed {
            for text in lookup(map, path).map(list_items).unwrap_or_default() {
                let key = text.to_lowercase();
                if !items.iter().any(|s| s.text.to_lowercase() == key) {
                    items.push(Sourced {
                        doc_id: doc_id.to_string(),
                        text,
                    });
                }
            }
        }
        if !items.is_empty() {
            prov.insert(path.to_string(), items);
        }
    }

    let text = |p: &str| prov.get(p).and_then(|v| v.first()).map(|s| s.text.clone());
    let mut note = |field: &str, raw: &str, why: Option<String>| {
        warnings.push(format!(
            "{field}: could not read {raw:?}{}",
            why.map(|w| format!(" ({w})")).unwrap_or_default()
        ));
    };

    if twin.source == Source::Literature {
        if let Some(n) = text("n") {
            match n.trim().parse::<u32>() {
                Ok(v) if v > 0 => twin.sample_size = Some(v),
                _ => note("n", &n, None),
            }
        }
        twin.main_recommendation = text("main recommendation");
    }
    if let Some(raw) = text("age") {
        let o = parse_age(&raw);
        if o.is_failed() {
            note("age", &raw, o.note.clone());
        }
        twin.age = o.value.unwrap_or(AgeValue {
            low: None,
            high: None,
            raw,
        });
    }
    twin.gender = text("gender");
    twin.race = text("race");
    twin.diagnosis = text("diagnosis").unwrap_or_default();

    if let Some(raw) = text("biomarkers.pd-l1") {
        let o = parse_pdl1(&raw);
        match o.value {
            Some(Some(score)) => twin.biomarkers.pdl1 = Some(score),
            _ => {
                note("biomarkers.pd-l1", &raw, o.note.clone());
                twin.biomarkers.others.push(Marker::new("PD-L1", raw));
            }
        }
    }
    if let Some(raw) = text("biomarkers.tmb/mb") {
        let o = parse_tmb(&raw);
        match o.value {
            Some(Some(v)) => twin.biomarkers.set_tmb(Some(v)),
            _ => {
                note("biomarkers.tmb/mb", &raw, o.note.clone());
                twin.biomarkers.others.push(Marker::new("TMB", raw));
            }
        }
    }
    if let Some(raw) = text("biomarkers.msi/mss") {
        let o = parse_mmr(&raw);
        match o.value {
            Some(r) if r.status.is_some() || r.msi_fraction.is_some() => {
                twin.biomarkers.mmr = r.status;
                twin.biomarkers.msi_fraction = r.msi_fraction;
            }
            _ => {
                note("biomarkers.msi/mss", &raw, o.note.clone());
                twin.biomarkers.others.push(Marker::new("MSI", raw));
            }
        }
    }
    if let Some(items) = prov.get("biomarkers.others") {
        twin.biomarkers.others.extend(items.iter().map(|s| marker_of(&s.text)));
    }

    if let Some(items) = prov.get("previous treatments") {
        let joined: Vec<&str> = items.iter().map(|s| s.text.as_str()).collect();
        let joined = joined.join("; ");
        let o = parse_treatments(&joined);
        if let Some(n) = &o.note {
            note("previous treatments", &joined, Some(n.clone()));
        }
        twin.previous_treatments = o.value.unwrap_or_default();
        if !twin.previous_treatments.is_empty() {
            let numbered: std::collections::BTreeSet<u32> =
                twin.previous_treatments.iter().filter_map(|e| e.line).collect();
            let all_numbered = twin.previous_treatments.iter().all(|e| e.line.is_some());
            let prior = if all_numbered {
                numbered.len()
            } else {
                twin.previous_treatments.len()
            };
            twin.treatment_line = Some(prior as u32 + 1);
        }
    }
    twin.study_treatment = text("study treatment").unwrap_or_default();
    let response = text("study treatment response.treatment response");
    let adverse = text("study treatment response.adverse effects");
    if response.is_some() || adverse.is_some() {
        let mut rec = match &response {
            Some(raw) => {
                let o = parse_response(raw);
                if o.is_failed() {
                    note("study treatment response", raw, o.note.clone());
                }
                o.value.unwrap_or(ResponseRecord {
                    raw: raw.clone(),
                    ..ResponseRecord::default()
                })
            }
            None => ResponseRecord::default(),
        };
        rec.adverse_effects = adverse;
        twin.study_response = rec;
    }
    for (field, slot) in [("PFS", &mut twin.pfs), ("OS", &mut twin.os)] {
        if let Some(raw) = text(field) {
            let o = parse_duration(&raw);
            if o.is_failed() {
                note(field, &raw, o.note.clone());
            }
            *slot = o.value.unwrap_or(CensoredDuration {
                months: None,
                censored: false,
                raw,
            });
        }
    }
    (twin, prov, warnings)
}

/// `"HER2: positive"` or `"HER2 positive"` → name and detail.
fn marker_of(text: &str) -> Marker {
    let t = text.trim();
    let (name, detail) = match t.split_once(':') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => match t.split_once(char::is_whitespace) {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (t, ""),
        },
    };
    Marker::new(name, detail)
}
