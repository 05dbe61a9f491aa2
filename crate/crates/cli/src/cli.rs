//! The `oncotwin` command line.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use oncotwin_core::analytics::summarize_with;
use oncotwin_core::config::ConfigError;
use oncotwin_core::eval::{
    check_verdicts, evaluate_run, lint_reported_table, read_adjudications, read_reported_table, sample_size, EvalError,
};
use oncotwin_core::extract::BackendKind;
use oncotwin_core::ingest::{ingest, read_manifest, write_manifest, IngestError};
use oncotwin_core::matcher::{cohort_funnel, whatif, MatchError};
use oncotwin_core::model::validate_twin;
use oncotwin_core::recommend::{coverage_letter, default_kb, load_kb, recommend, KbError};
use oncotwin_core::store::{read_snapshot, read_twins_jsonl, StoreError};
use oncotwin_core::{
    CensoringPolicy, Config, DigitalTwin, EligibilitySpec, ManifestEntry, Origin, OutcomeUpdate, RecommendContext,
    Source, TwinStore, WhatIfOverrides,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::api::{self, AppState, EvaluationReport, StartupError};
use crate::jobs::{execute_extraction, ExtractError, ExtractRequest};
use crate::table::Table;
use crate::views;

#[derive(Debug, Parser)]
#[command(name = "oncotwin", version, about = "Digital twins for rare-tumor case review")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "ONCOTWIN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Store directory, overriding `store.path`.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

/// Parses a value by its serialized name.
fn by_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize source files into a corpus directory and manifest.
    Ingest(IngestArgs),
    /// Run an extraction job over a manifest.
    Extract(ExtractArgs),
    /// Check twins in a JSON-lines file against the record contract.
    Validate { input: PathBuf },
    /// Read and write the twin store.
    #[command(subcommand)]
    Store(StoreCommand),
    /// Screen candidates with the eligibility funnel.
    Match(MatchArgs),
    /// Vary a twin's biomarkers or treatment and collect analogs.
    Whatif(WhatIfArgs),
    /// Cohort outcome statistics.
    Summarize(SummarizeArgs),
    /// Extraction metrics from adjudication files.
    Evaluate(EvaluateArgs),
    /// Review sample size for a finite population.
    SampleSize(SampleSizeArgs),
    /// Knowledge-base recommendations for a twin.
    Recommend(RecommendArgs),
    /// Cost-coverage request letter for one recommendation.
    Letter(LetterArgs),
    /// List the knowledge base.
    Kb {
        /// Knowledge-base file, overriding `kb.path`.
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        /// Listen address, overriding `server.bind`.
        #[arg(long)]
        bind: Option<SocketAddr>,
    },
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    #[arg(long, value_parser = by_name::<Origin>)]
    pub origin: Origin,
    /// Groups documents of one patient.
    #[arg(long)]
    pub patient: Option<String>,
    #[arg(long, default_value = "corpus")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long, value_parser = by_name::<BackendKind>)]
    pub backend: BackendKind,
    #[arg(long, value_parser = by_name::<Origin>)]
    pub origin: Origin,
    #[arg(long, default_value = "manifest.jsonl")]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub width: usize,
    /// Reply directory for the mock backend.
    #[arg(long)]
    pub replies: Option<PathBuf>,
    /// Write extracted twins as JSON lines.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also put extracted twins into the store.
    #[arg(long)]
    pub save: bool,
}

#[derive(Debug, Subcommand)]
pub enum StoreCommand {
    /// Validate and append twins from a JSON-lines file.
    Put {
        input: PathBuf,
    },
    Get {
        id: String,
    },
    /// Twins matching a predicate such as `cps >= 40 AND source == literature`.
    Query {
        #[arg(default_value = "")]
        predicate: String,
    },
    /// Record an outcome update given as a JSON object.
    Outcome {
        id: String,
        update: String,
    },
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    /// Twins file to read instead of the store.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Predicate restricting the twins considered.
    #[arg(long, default_value = "")]
    pub query: String,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Eligibility spec as a JSON file; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

/// The modified twin is gated by the default eligibility spec; `--spec`
/// selects the analogs.
#[derive(Debug, Args)]
pub struct WhatIfArgs {
    pub id: String,
    #[command(flatten)]
    pub cohort: CohortArgs,
    /// Overrides as a JSON object.
    #[arg(long, default_value = "{}")]
    pub overrides: String,
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[command(flatten)]
    pub cohort: CohortArgs,
    #[arg(long, value_parser = by_name::<Source>)]
    pub source: Option<Source>,
    #[arg(long, value_parser = by_name::<CensoringPolicy>, default_value = "observed-bound")]
    pub policy: CensoringPolicy,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Adjudication files (JSON lines).
    #[arg(required = true)]
    pub adjudications: Vec<PathBuf>,
    /// A published metrics table (CSV) to check against its own counts.
    #[arg(long)]
    pub reported: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleSizeArgs {
    #[arg(long = "Z")]
    pub z: f64,
    #[arg(long = "N")]
    pub n: u64,
    #[arg(long = "e")]
    pub e: f64,
    #[arg(long = "P")]
    pub p: f64,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    pub id: String,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long)]
    pub allow_off_label: bool,
    /// Findings older than a year before this date are flagged stale.
    #[arg(long)]
    pub as_of: Option<NaiveDate>,
    /// Knowledge-base file, overriding `kb.path`.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long, default_value = "{}")]
    pub overrides: String,
}

#[derive(Debug, Args)]
pub struct LetterArgs {
    #[command(flatten)]
    pub recommend: RecommendArgs,
    /// Recommendation id; the top-ranked one when omitted.
    #[arg(long)]
    pub recommendation: Option<String>,
    /// Letter date; today when omitted.
    #[arg(long)]
    pub date: Option<NaiveDate>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Startup(#[from] StartupError),
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Data(String),
}

/// What a command produced: a JSON value (the contract) and its table view.
struct Output {
    json: Value,
    table: Table,
    /// Raw text printed as is in table format.
    text: Option<String>,
    failed: bool,
}

impl Output {
    fn new<T: Serialize>(value: &T, table: Table) -> Self {
        Output {
            json: serde_json::to_value(value).expect("core types serialize"),
            table,
            text: None,
            failed: false,
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 on data errors, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let format = cli.format;
    match execute(cli) {
        Ok(out) => {
            let rendered = match (format, out.text) {
                (Format::Json, _) => serde_json::to_string_pretty(&out.json).expect("values serialize") + "\n",
                (Format::Table, Some(t)) => t,
                (Format::Table, None) => out.table.render(),
            };
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = std::io::stdout().lock().write_all(rendered.as_bytes());
            i32::from(out.failed)
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(dir) = &cli.store {
        config.store.path = dir.clone();
    }
    Ok(config)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn parse_arg(name: &str, text: &str) -> Result<Value, CliError> {
    serde_json::from_str(text).map_err(|source| CliError::Json {
        path: name.into(),
        source,
    })
}

/// Twins from `--input` or the store, filtered by the predicate.
fn cohort(config: &Config, input: Option<&Path>, query: &str) -> Result<Vec<DigitalTwin>, CliError> {
    match input {
        Some(path) => {
            let predicate = oncotwin_core::store::Predicate::parse(query).map_err(StoreError::from)?;
            Ok(read_twins_jsonl(path)?
                .into_iter()
                .filter(|t| predicate.matches(t))
                .collect())
        }
        None => Ok(read_snapshot(&config.store.path)?.query(query)?),
    }
}

fn find(twins: &[DigitalTwin], id: &str) -> Result<DigitalTwin, CliError> {
    twins
        .iter()
        .find(|t| t.id == id)
        .cloned()
        .ok_or_else(|| StoreError::NotFound(id.into()).into())
}

fn spec(path: Option<&Path>) -> Result<EligibilitySpec, CliError> {
    let spec: EligibilitySpec = path.map(read_json).transpose()?.unwrap_or_default();
    spec.validate()?;
    Ok(spec)
}

fn execute(cli: Cli) -> Result<Output, CliError> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Ingest(a) => ingest_files(&config, &a),
        Command::Extract(a) => extract(&config, a),
        Command::Validate { input } => {
            let reports: Vec<(String, _)> = read_twins_jsonl(&input)?
                .iter()
                .map(|t| (t.id.clone(), validate_twin(t)))
                .collect();
            let failed = reports.iter().any(|(_, r)| !r.is_admissible());
            let json: Vec<Value> = reports
                .iter()
                .map(|(id, r)| serde_json::json!({ "id": id, "admissible": r.is_admissible(), "findings": r.findings }))
                .collect();
            let mut out = Output::new(&json, views::validation(&reports));
            out.failed = failed;
            Ok(out)
        }
        Command::Store(c) => store(&config, c),
        Command::Match(a) => {
            let twins = cohort(&config, a.cohort.input.as_deref(), &a.cohort.query)?;
            let funnel = cohort_funnel(&twins, &spec(a.spec.as_deref())?);
            Ok(Output::new(&funnel, views::funnel(&funnel)))
        }
        Command::Whatif(a) => {
            let twins = cohort(&config, a.cohort.input.as_deref(), "")?;
            let twin = find(&twins, &a.id)?;
            let candidates = cohort(&config, a.cohort.input.as_deref(), &a.cohort.query)?;
            let overrides = WhatIfOverrides::from_json(&parse_arg("--overrides", &a.overrides)?)?;
            let analog_spec = spec(a.spec.as_deref())?;
            let r = whatif(
                &twin,
                &overrides,
                &analog_spec,
                &EligibilitySpec::default(),
                &candidates,
            );
            Ok(Output::new(&r, views::whatif(&r)))
        }
        Command::Summarize(a) => {
            let mut twins = cohort(&config, a.cohort.input.as_deref(), &a.cohort.query)?;
            if let Some(src) = a.source {
                twins.retain(|t| t.source == src);
            }
            let s = summarize_with(&twins, a.policy);
            Ok(Output::new(&s, views::summary(&s)))
        }
        Command::Evaluate(a) => {
            let mut records = Vec::new();
            for p in &a.adjudications {
                records.extend(read_adjudications(p)?);
            }
            let reported = a
                .reported
                .as_deref()
                .map(read_reported_table)
                .transpose()?
                .unwrap_or_default();
            let report = EvaluationReport {
                table: evaluate_run(&records)?,
                mismatches: check_verdicts(&records),
                lint: lint_reported_table(&reported),
            };
            let mut table = views::metrics(&report.table);
            if !report.lint.is_empty() {
                let text = format!("{}\n{}", table.render(), views::lint(&report.lint).render());
                table = Table::default();
                let mut out = Output::new(&report, table);
                out.text = Some(text);
                return Ok(out);
            }
            Ok(Output::new(&report, table))
        }
        Command::SampleSize(a) => {
            let n = sample_size(a.z, a.n, a.e, a.p)?;
            let mut out = Output::new(&n, Table::pairs([("n", n.to_string())]));
            out.text = Some(format!("{n}\n"));
            Ok(out)
        }
        Command::Recommend(a) => {
            let (_, recs) = recommendations(&config, &a)?;
            Ok(Output::new(&recs, views::recommendations(&recs)))
        }
        Command::Letter(a) => letter(&config, &a),
        Command::Kb { kb } => {
            let kb = knowledge_base(&config, kb.as_deref())?;
            Ok(Output::new(&kb, views::knowledge(&kb)))
        }
        Command::Serve { bind } => {
            let addr = match bind {
                Some(a) => a,
                None => config
                    .server
                    .bind
                    .parse()
                    .map_err(|e| CliError::Data(format!("server.bind `{}`: {e}", config.server.bind)))?,
            };
            let state = AppState::open(config)?;
            tokio::runtime::Runtime::new()?.block_on(api::serve(state, addr))?;
            Ok(Output::new(&Value::Null, Table::default()))
        }
    }
}

fn ingest_files(config: &Config, a: &IngestArgs) -> Result<Output, CliError> {
    let ocr = config.ocr_adapter();
    std::fs::create_dir_all(&a.out_dir)?;
    let manifest = a.out_dir.join("manifest.jsonl");
    let mut entries = if manifest.exists() {
        read_manifest(&manifest)?
    } else {
        Vec::new()
    };
    let mut added = Vec::new();
    for path in &a.paths {
        let doc = ingest(path, a.origin, a.patient.clone(), &ocr)?;
        let name = format!("{}.txt", doc.doc_id);
        std::fs::write(a.out_dir.join(&name), &doc.text)?;
        if entries.iter().all(|e: &ManifestEntry| e.doc_id != doc.doc_id) {
            let entry = ManifestEntry::for_document(&doc, name);
            entries.push(entry.clone());
            added.push(entry);
        }
    }
    write_manifest(&manifest, &entries)?;
    let mut table = Table::new(["doc_id", "origin", "pages", "chars", "patient"]);
    for e in &added {
        table.push([
            e.doc_id.clone(),
            e.origin.to_string(),
            e.pages.to_string(),
            e.chars.to_string(),
            e.patient_hint.clone().unwrap_or_default(),
        ]);
    }
    Ok(Output::new(&added, table))
}

fn extract(config: &Config, a: ExtractArgs) -> Result<Output, CliError> {
    let req = ExtractRequest {
        manifest: a.manifest,
        origin: a.origin,
        backend: a.backend,
        seed: a.seed,
        width: a.width,
        replies: a.replies,
    };
    let out = execute_extraction(config, &req)?;
    let twins: Vec<DigitalTwin> = out.twins().cloned().collect();
    if let Some(path) = &a.out {
        let lines: String = twins.iter().map(|t| t.to_json_line() + "\n").collect();
        std::fs::write(path, lines)?;
    }
    if a.save {
        TwinStore::open(&config.store.path)?.put_all(twins)?;
    }
    Ok(Output::new(&out, views::job_report(&out.report)))
}

fn store(config: &Config, c: StoreCommand) -> Result<Output, CliError> {
    match c {
        StoreCommand::Put { input } => {
            let twins = read_twins_jsonl(&input)?;
            let receipts = TwinStore::open(&config.store.path)?.put_all(twins)?;
            let mut table = Table::new(["id", "version"]);
            for r in &receipts {
                table.push([r.id.clone(), r.version.to_string()]);
            }
            Ok(Output::new(&receipts, table))
        }
        StoreCommand::Get { id } => {
            let twin = read_snapshot(&config.store.path)?
                .get(&id)
                .cloned()
                .ok_or(StoreError::NotFound(id))?;
            let table = views::twins(std::slice::from_ref(&twin));
            Ok(Output::new(&twin, table))
        }
        StoreCommand::Query { predicate } => {
            let twins = read_snapshot(&config.store.path)?.query(&predicate)?;
            Ok(Output::new(&twins, views::twins(&twins)))
        }
        StoreCommand::Outcome { id, update } => {
            let update = OutcomeUpdate::from_json(&parse_arg("update", &update)?)?;
            let r = TwinStore::open(&config.store.path)?.record_outcome(&id, &update)?;
            let table = Table::pairs([("id", r.id.clone()), ("version", r.version.to_string())]);
            Ok(Output::new(&r, table))
        }
    }
}

fn knowledge_base(config: &Config, path: Option<&Path>) -> Result<Vec<oncotwin_core::KnowledgeEntry>, CliError> {
    Ok(match path.or(config.kb.path.as_deref()) {
        Some(p) => load_kb(p)?,
        None => default_kb(),
    })
}

fn recommendations(
    config: &Config,
    a: &RecommendArgs,
) -> Result<(DigitalTwin, Vec<oncotwin_core::Recommendation>), CliError> {
    let twins = cohort(config, a.input.as_deref(), "")?;
    let overrides = WhatIfOverrides::from_json(&parse_arg("--overrides", &a.overrides)?)?;
    let twin = overrides.apply(&find(&twins, &a.id)?);
    let kb = knowledge_base(config, a.kb.as_deref())?;
    let ctx = RecommendContext {
        region: a.region.clone(),
        allow_off_label: a.allow_off_label,
        as_of: a.as_of,
        ..RecommendContext::default()
    };
    let recs = recommend(&twin, &kb, &ctx);
    Ok((twin, recs))
}

fn letter(config: &Config, a: &LetterArgs) -> Result<Output, CliError> {
    let (twin, recs) = recommendations(config, &a.recommend)?;
    let rec = match &a.recommendation {
        Some(id) => recs.iter().find(|r| &r.entry.id == id),
        None => recs.first(),
    }
    .ok_or_else(|| {
        CliError::Data(format!(
            "no recommendation {} for {}",
            a.recommendation.as_deref().unwrap_or("at all"),
            twin.id
        ))
    })?;
    let candidates = cohort(config, a.recommend.input.as_deref(), "")?;
    let spec = EligibilitySpec::default();
    let analogs = whatif(&twin, &WhatIfOverrides::default(), &spec, &spec, &candidates);
    let summary = (!analogs.analogs.is_empty()).then_some(&analogs.summary);
    let date = a.date.unwrap_or_else(|| chrono::Local::now().date_naive());
    let text = coverage_letter(&twin, rec, summary, date);
    let mut out = Output::new(
        &serde_json::json!({ "twin": twin.id, "recommendation": rec.entry.id, "letter": text }),
        Table::default(),
    );
    out.text = Some(text);
    Ok(out)
}
