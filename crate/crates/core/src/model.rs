//! Patient-level digital twin records and their record-level validation.
//!
//! The canonical serialization mirrors the extraction schema key names
//! (`"n"`, `"age"`, `"biomarkers"` with `"pd-l1"`, `"tmb/mb"`, `"msi/mss"`,
//! `"others"`, `"previous treatments"`, `"study treatment"`,
//! `"study treatment response"`, `"PFS"`, `"OS"`), extended with bookkeeping
//! keys (`"id"`, `"source"`, `"source_ref"`, `"adjudication"`). Store files
//! hold one such object per line.

use std::collections::BTreeSet;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Institutional,
    Literature,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Institutional => "institutional",
            Source::Literature => "literature",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjudication {
    #[default]
    Unreviewed,
    Confirmed,
    Corrected,
}

/// Similarity metadata assigned by the tumor board, not inferred from text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityCriterion {
    GynOncologyDiscipline,
    CarcinosarcomaOrSarcomatoidMorphology,
}

impl SimilarityCriterion {
    pub const ALL: [SimilarityCriterion; 2] = [
        SimilarityCriterion::GynOncologyDiscipline,
        SimilarityCriterion::CarcinosarcomaOrSarcomatoidMorphology,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            SimilarityCriterion::GynOncologyDiscipline => "discipline",
            SimilarityCriterion::CarcinosarcomaOrSarcomatoidMorphology => "morphology",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TmbClass {
    Low,
    Intermediate,
    High,
}

impl fmt::Display for TmbClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TmbClass::Low => "low",
            TmbClass::Intermediate => "intermediate",
            TmbClass::High => "high",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("tumor mutational burden must be finite and non-negative, got {0}")]
pub struct InvalidTmb(pub f64);

/// Classes a TMB value (mutations/megabase): `[0,5)` low, `[5,15)`
/// intermediate, `[15,∞)` high.
pub fn tmb_class(tmb: f64) -> Result<TmbClass, InvalidTmb> {
    if !tmb.is_finite() || tmb < 0.0 {
        return Err(InvalidTmb(tmb));
    }
    Ok(if tmb < 5.0 {
        TmbClass::Low
    } else if tmb < 15.0 {
        TmbClass::Intermediate
    } else {
        TmbClass::High
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MmrStatus {
    #[serde(rename = "pMMR")]
    Proficient,
    #[serde(rename = "dMMR")]
    Deficient,
}

impl fmt::Display for MmrStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MmrStatus::Proficient => "pMMR",
            MmrStatus::Deficient => "dMMR",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qualitative {
    Positive,
    Negative,
}

/// PD-L1 expression. Percent-type scores are stored as fractions in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PdL1Score {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualitative: Option<Qualitative>,
    /// Source text the score was read from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl PdL1Score {
    pub fn is_empty(&self) -> bool {
        self.cps.is_none() && self.tps.is_none() && self.ic.is_none() && self.qualitative.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerStatus {
    Positive,
    Negative,
    Elevated,
    Normal,
}

/// A biomarker outside the PD-L1/TMB/MMR core panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub name: String,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<MarkerStatus>,
    /// Date of the finding, used to flag stale results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<NaiveDate>,
}

impl Marker {
    pub fn new(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Marker {
            name: name.into(),
            detail: detail.into(),
            status: None,
            observed: None,
        }
    }

    pub fn with_status(mut self, status: MarkerStatus) -> Self {
        self.status = Some(status);
        self
    }

    pub fn observed_on(mut self, date: NaiveDate) -> Self {
        self.observed = Some(date);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "PanelWire", into = "PanelWire")]
pub struct BiomarkerPanel {
    pub pdl1: Option<PdL1Score>,
    pub tmb: Option<f64>,
    pub tmb_class: Option<TmbClass>,
    pub mmr: Option<MmrStatus>,
    pub msi_fraction: Option<f64>,
    pub others: Vec<Marker>,
}

impl BiomarkerPanel {
    pub fn is_empty(&self) -> bool {
        self.pdl1.is_none()
            && self.tmb.is_none()
            && self.tmb_class.is_none()
            && self.mmr.is_none()
            && self.msi_fraction.is_none()
            && self.others.is_empty()
    }

    pub fn cps(&self) -> Option<f64> {
        self.pdl1.as_ref().and_then(|p| p.cps)
    }

    /// Sets the TMB value and its derived class together.
    pub fn set_tmb(&mut self, tmb: Option<f64>) {
        self.tmb = tmb;
        self.tmb_class = tmb.and_then(|t| tmb_class(t).ok());
    }

    pub fn marker(&self, name: &str) -> Option<&Marker> {
        self.others.iter().find(|m| m.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Serialize, Deserialize)]
struct TmbWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<TmbClass>,
}

#[derive(Serialize, Deserialize)]
struct MsiWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    status: Option<MmrStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    msi_fraction: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct PanelWire {
    #[serde(rename = "pd-l1", default)]
    pdl1: Option<PdL1Score>,
    #[serde(rename = "tmb/mb", default)]
    tmb: Option<TmbWire>,
    #[serde(rename = "msi/mss", default)]
    msi: Option<MsiWire>,
    #[serde(default)]
    others: Vec<Marker>,
}

impl From<PanelWire> for BiomarkerPanel {
    fn from(w: PanelWire) -> Self {
        let (tmb, tmb_class) = w.tmb.map(|t| (t.value, t.class)).unwrap_or((None, None));
        let (mmr, msi_fraction) = w.msi.map(|m| (m.status, m.msi_fraction)).unwrap_or((None, None));
        BiomarkerPanel {
            pdl1: w.pdl1,
            tmb,
            tmb_class,
            mmr,
            msi_fraction,
            others: w.others,
        }
    }
}

impl From<BiomarkerPanel> for PanelWire {
    fn from(p: BiomarkerPanel) -> Self {
        PanelWire {
            pdl1: p.pdl1,
            tmb: (p.tmb.is_some() || p.tmb_class.is_some()).then_some(TmbWire {
                value: p.tmb,
                class: p.tmb_class,
            }),
            msi: (p.mmr.is_some() || p.msi_fraction.is_some()).then_some(MsiWire {
                status: p.mmr,
                msi_fraction: p.msi_fraction,
            }),
            others: p.others,
        }
    }
}

/// A survival duration in months with right-censoring.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CensoredDuration {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub months: Option<f64>,
    #[serde(default)]
    pub censored: bool,
    #[serde(default)]
    pub raw: String,
}

impl CensoredDuration {
    pub fn exact(months: f64) -> Self {
        CensoredDuration {
            months: Some(months),
            censored: false,
            raw: crate::parse::fmt_decimal(months),
        }
    }

    pub fn unknown() -> Self {
        CensoredDuration::default()
    }

    pub fn is_known(&self) -> bool {
        self.months.is_some()
    }

    /// True when neither a value nor any source text is present.
    pub fn is_absent(&self) -> bool {
        self.months.is_none() && self.raw.trim().is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResponseCategory {
    CR,
    PR,
    SD,
    MR,
    PD,
}

impl ResponseCategory {
    pub const ALL: [ResponseCategory; 5] = [
        ResponseCategory::CR,
        ResponseCategory::PR,
        ResponseCategory::SD,
        ResponseCategory::MR,
        ResponseCategory::PD,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ResponseCategory::CR => "CR",
            ResponseCategory::PR => "PR",
            ResponseCategory::SD => "SD",
            ResponseCategory::MR => "MR",
            ResponseCategory::PD => "PD",
        }
    }
}

impl fmt::Display for ResponseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Treatment response in source order, e.g. `"PR, PD"` is two entries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResponseRecord {
    #[serde(rename = "treatment response", default)]
    pub raw: String,
    #[serde(default)]
    pub categories: Vec<ResponseCategory>,
    #[serde(rename = "adverse effects", default, skip_serializing_if = "Option::is_none")]
    pub adverse_effects: Option<String>,
}

impl ResponseRecord {
    pub fn is_absent(&self) -> bool {
        self.categories.is_empty() && self.raw.trim().is_empty() && self.adverse_effects.is_none()
    }

    pub fn best(&self) -> Option<ResponseCategory> {
        self.categories.first().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ResponseRecord>,
}

/// Age in years; exact ages have `low == high`, ranges keep both bounds.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgeValue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high: Option<u32>,
    #[serde(default)]
    pub raw: String,
}

impl AgeValue {
    pub fn exact(years: u32) -> Self {
        AgeValue {
            low: Some(years),
            high: Some(years),
            raw: years.to_string(),
        }
    }

    pub fn is_exact(&self) -> bool {
        self.low.is_some() && self.low == self.high
    }

    pub fn is_known(&self) -> bool {
        self.low.is_some() || self.high.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitalTwin {
    pub id: String,
    pub source: Source,
    pub source_ref: String,
    #[serde(rename = "n", default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<u32>,
    #[serde(default)]
    pub age: AgeValue,
    #[serde(default)]
    pub gender: Option<String>,
    #[serde(default)]
    pub race: Option<String>,
    #[serde(default)]
    pub diagnosis: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub similarity: BTreeSet<SimilarityCriterion>,
    #[serde(default)]
    pub biomarkers: BiomarkerPanel,
    #[serde(rename = "previous treatments", default)]
    pub previous_treatments: Vec<TreatmentEvent>,
    #[serde(rename = "study treatment", default)]
    pub study_treatment: String,
    #[serde(rename = "treatment line", default, skip_serializing_if = "Option::is_none")]
    pub treatment_line: Option<u32>,
    #[serde(rename = "study treatment response", default)]
    pub study_response: ResponseRecord,
    #[serde(rename = "PFS", default)]
    pub pfs: CensoredDuration,
    #[serde(rename = "OS", default)]
    pub os: CensoredDuration,
    #[serde(rename = "main recommendation", default, skip_serializing_if = "Option::is_none")]
    pub main_recommendation: Option<String>,
    #[serde(default)]
    pub adjudication: Adjudication,
}

impl DigitalTwin {
    /// An otherwise empty twin carrying only identity fields.
    pub fn new(id: impl Into<String>, source: Source, source_ref: impl Into<String>) -> Self {
        DigitalTwin {
            id: id.into(),
            source,
            source_ref: source_ref.into(),
            sample_size: None,
            age: AgeValue::default(),
            gender: None,
            race: None,
            diagnosis: String::new(),
            similarity: BTreeSet::new(),
            biomarkers: BiomarkerPanel::default(),
            previous_treatments: Vec::new(),
            study_treatment: String::new(),
            treatment_line: None,
            study_response: ResponseRecord::default(),
            pfs: CensoredDuration::default(),
            os: CensoredDuration::default(),
            main_recommendation: None,
            adjudication: Adjudication::Unreviewed,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("twin serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Whether any study or prior treatment names an immune checkpoint inhibitor.
    pub fn received_ici(&self) -> bool {
        is_ici_regimen(&self.study_treatment) || self.previous_treatments.iter().any(|t| is_ici_regimen(&t.description))
    }
}

const ICI_AGENTS: &[&str] = &[
    "pembrolizumab",
    "nivolumab",
    "ipilimumab",
    "atezolizumab",
    "durvalumab",
    "avelumab",
    "dostarlimab",
    "cemiplimab",
    "tremelimumab",
    "tislelizumab",
    "pd-1 antibody",
    "pd-l1 antibody",
    "ctla-4 antibody",
    "pd-1 inhibitor",
    "checkpoint inhibitor",
];

pub fn is_ici_regimen(text: &str) -> bool {
    let lower = text.to_lowercase();
    ICI_AGENTS.iter().any(|a| lower.contains(a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub field: String,
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    fn error(&mut self, field: &str, message: impl Into<String>) {
        self.findings.push(Finding {
            field: field.to_string(),
            severity: Severity::Error,
            message: message.into(),
        });
    }

    fn warn(&mut self, field: &str, message: impl Into<String>) {
        self.findings.push(Finding {
            field: field.to_string(),
            severity: Severity::Warning,
            message: message.into(),
        });
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Warning)
    }

    pub fn is_admissible(&self) -> bool {
        self.errors().next().is_none()
    }
}

fn check_fraction(report: &mut ValidationReport, field: &str, v: Option<f64>) {
    if let Some(x) = v {
        if !x.is_finite() || !(0.0..=1.0).contains(&x) {
            report.error(field, format!("fraction {x} outside [0,1]"));
        }
    }
}

fn check_duration(report: &mut ValidationReport, field: &str, d: &CensoredDuration) {
    if d.is_absent() {
        report.warn(field, "attribute absent");
        return;
    }
    if let Some(m) = d.months {
        if !m.is_finite() || m < 0.0 {
            report.error(field, format!("months must be finite and non-negative, got {m}"));
        }
    } else if !crate::parse::is_unknown_duration(&d.raw) {
        report.warn(field, format!("no duration could be read from {:?}", d.raw));
    }
    let lower = d.raw.to_lowercase();
    if (d.raw.contains('>') || lower.contains("(ongoing)")) && !d.censored {
        report.error(
            field,
            "source marks the duration as a lower bound but censored is false",
        );
    }
}

/// Checks a twin against the record contract. Errors block storage,
/// warnings (mostly absent attributes) do not.
pub fn validate_twin(t: &DigitalTwin) -> ValidationReport {
    let mut r = ValidationReport::default();

    if t.id.trim().is_empty() {
        r.error("id", "id must not be empty");
    }
    match (t.source, t.sample_size) {
        (Source::Institutional, Some(_)) => r.error("n", "sample size applies to literature records only"),
        (Source::Literature, Some(0)) => r.error("n", "sample size must be at least 1"),
        (Source::Literature, None) => r.warn("n", "attribute absent"),
        _ => {}
    }

    let age = &t.age;
    if !age.is_known() {
        r.warn("age", "attribute absent");
    } else if let (Some(lo), Some(hi)) = (age.low, age.high) {
        if hi < lo {
            r.error("age", format!("age range {lo}-{hi} is inverted"));
        }
    }
    if t.gender.as_deref().is_none_or(|g| g.trim().is_empty()) {
        r.warn("gender", "attribute absent");
    }
    if t.race.as_deref().is_none_or(|g| g.trim().is_empty()) {
        r.warn("race", "attribute absent");
    }
    if t.diagnosis.trim().is_empty() {
        r.error("diagnosis", "diagnosis must not be empty");
    }

    let b = &t.biomarkers;
    if b.is_empty() {
        r.warn("biomarkers", "attribute absent");
    }
    if let Some(p) = &b.pdl1 {
        if p.is_empty() {
            r.error("biomarkers.pd-l1", "PD-L1 score carries no value");
        }
        if let Some(cps) = p.cps {
            if !cps.is_finite() || cps < 0.0 {
                r.error("biomarkers.pd-l1", format!("CPS must be non-negative, got {cps}"));
            }
            if p.qualitative == Some(Qualitative::Negative) && cps > 0.0 {
                r.error("biomarkers.pd-l1", "qualitative negative contradicts CPS > 0");
            }
        }
        check_fraction(&mut r, "biomarkers.pd-l1", p.tps);
        check_fraction(&mut r, "biomarkers.pd-l1", p.ic);
    }
    if let Some(tmb) = b.tmb {
        match tmb_class(tmb) {
            Err(e) => r.error("biomarkers.tmb/mb", e.to_string()),
            Ok(expected) => match b.tmb_class {
                Some(c) if c != expected => r.error(
                    "biomarkers.tmb/mb",
                    format!("class {c} does not match TMB {tmb} (expected {expected})"),
                ),
                _ => {}
            },
        }
    }
    check_fraction(&mut r, "biomarkers.msi/mss", b.msi_fraction);
    for m in &b.others {
        if m.name.trim().is_empty() {
            r.error("biomarkers.others", "marker name must not be empty");
        }
    }

    let mut last_line = 0;
    for ev in &t.previous_treatments {
        if ev.description.trim().is_empty() {
            r.error("previous treatments", "treatment description must not be empty");
        }
        if let Some(line) = ev.line {
            if line == 0 || line <= last_line {
                r.error(
                    "previous treatments",
                    "treatment lines must be positive and strictly increasing",
                );
            }
            last_line = line;
        }
    }
    if t.previous_treatments.is_empty() {
        r.warn("previous treatments", "attribute absent");
    }
    if t.study_treatment.trim().is_empty() {
        r.warn("study treatment", "attribute absent");
    }
    match t.treatment_line {
        Some(0) => r.error("treatment line", "treatment line must be positive"),
        Some(line) => {
            let lines: BTreeSet<u32> = t.previous_treatments.iter().filter_map(|e| e.line).collect();
            let all_numbered =
                !t.previous_treatments.is_empty() && t.previous_treatments.iter().all(|e| e.line.is_some());
            if all_numbered && line as usize != lines.len() + 1 {
                r.warn(
                    "treatment line",
                    format!("line {line} is not 1 + {} documented prior lines", lines.len()),
                );
            }
        }
        None => {}
    }
    if t.study_response.is_absent() {
        r.warn("study treatment response", "attribute absent");
    }
    check_duration(&mut r, "PFS", &t.pfs);
    check_duration(&mut r, "OS", &t.os);
    r
}
