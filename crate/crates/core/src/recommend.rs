//! Biomarker-driven recommendation rules and cost-coverage letters.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::CohortSummary;
use crate::model::{BiomarkerPanel, DigitalTwin, Marker, MarkerStatus, MmrStatus, Qualitative};
use crate::parse::{fmt_decimal, fmt_percent};

pub const DEFAULT_KB: &str = include_str!("../data/kb_default.jsonl");

#[derive(Debug, Error)]
pub enum KbError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate entry for ({biomarker}, {action})")]
    Duplicate {
        line: usize,
        biomarker: String,
        action: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Positive,
    Negative,
    Elevated,
    NotDetermined,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Treatment,
    ConfirmatoryTest,
    TrialReferral,
    Monitoring,
}

/// Ordered from strongest to weakest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceLevel {
    #[serde(rename = "phase_3")]
    Phase3,
    #[serde(rename = "phase_2")]
    Phase2,
    #[serde(rename = "phase_1")]
    Phase1,
    CaseReport,
    Retrospective,
    Preclinical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    #[serde(default)]
    pub id: String,
    pub biomarker: String,
    /// Marker consulted when `biomarker` itself is undetermined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy: Option<String>,
    pub condition: Condition,
    pub action_kind: ActionKind,
    pub action: String,
    pub evidence_level: EvidenceLevel,
    pub expected_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recruiting: Option<bool>,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.to_lowercase().chars() {
        if c.is_alphanumeric() {
            out.push(c);
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

pub fn parse_kb(text: &str) -> Result<Vec<KnowledgeEntry>, KbError> {
    let mut entries: Vec<KnowledgeEntry> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: KnowledgeEntry = serde_json::from_str(line).map_err(|err| KbError::Malformed {
            line: line_no,
            message: err.to_string(),
        })?;
        let malformed = |message: &str| KbError::Malformed {
            line: line_no,
            message: message.into(),
        };
        if e.biomarker.trim().is_empty() || e.action.trim().is_empty() {
            return Err(malformed("biomarker and action are required"));
        }
        if e.reference.trim().is_empty() {
            return Err(malformed("entry has no reference"));
        }
        if e.action_kind == ActionKind::TrialReferral && e.trial_id.is_none() {
            return Err(malformed("trial_referral entry lacks trial_id"));
        }
        if !seen.insert((norm(&e.biomarker), e.action.to_lowercase())) {
            return Err(KbError::Duplicate {
                line: line_no,
                biomarker: e.biomarker,
                action: e.action,
            });
        }
        if e.id.is_empty() {
            e.id = slug(&format!("{} {}", e.biomarker, e.action));
        }
        entries.push(e);
    }
    if entries.is_empty() {
        log::warn!("knowledge base is empty");
    }
    Ok(entries)
}

pub fn load_kb(path: &Path) -> Result<Vec<KnowledgeEntry>, KbError> {
    parse_kb(&std::fs::read_to_string(path)?)
}

pub fn default_kb() -> Vec<KnowledgeEntry> {
    parse_kb(DEFAULT_KB).expect("bundled knowledge base is valid")
}

/// Observed state of one biomarker in a twin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerState {
    Positive,
    Negative,
    Elevated,
    Normal,
    Undetermined,
}

/// Whether an entry with `condition` fires against `state`.
pub fn condition_fires(condition: Condition, state: MarkerState) -> bool {
    match condition {
        Condition::Any => true,
        Condition::Positive => state == MarkerState::Positive,
        Condition::Negative => state == MarkerState::Negative,
        Condition::Elevated => state == MarkerState::Elevated,
        Condition::NotDetermined => matches!(state, MarkerState::Undetermined | MarkerState::Positive),
    }
}

fn norm(name: &str) -> String {
    name.to_lowercase()
        .replace('α', "alpha")
        .replace("serum", "")
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect()
}

fn state_from_detail(detail: &str) -> MarkerState {
    let d = detail.to_lowercase();
    if d.contains("not determined") || d.trim() == "n/a" || d.trim().is_empty() {
        return MarkerState::Undetermined;
    }
    if d.contains("negative") || d.contains("score 0") || d.trim() == "0%" || d.trim() == "0" {
        return MarkerState::Negative;
    }
    if d.contains("elevated") {
        return MarkerState::Elevated;
    }
    if d.contains("normal") {
        return MarkerState::Normal;
    }
    if d.contains("positive") || d.contains("amplif") || d.contains('%') || d.contains("score") {
        return MarkerState::Positive;
    }
    MarkerState::Undetermined
}

/// Finding that determined a marker state, for rationale text.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub name: String,
    pub state: MarkerState,
    pub value: String,
    pub observed: Option<NaiveDate>,
}

fn marker_finding(m: &Marker) -> Finding {
    let state = match m.status {
        Some(MarkerStatus::Positive) => MarkerState::Positive,
        Some(MarkerStatus::Negative) => MarkerState::Negative,
        Some(MarkerStatus::Elevated) => MarkerState::Elevated,
        Some(MarkerStatus::Normal) => MarkerState::Normal,
        None => state_from_detail(&m.detail),
    };
    Finding {
        name: m.name.clone(),
        state,
        value: if m.detail.is_empty() {
            format!("{state:?}").to_lowercase()
        } else {
            m.detail.clone()
        },
        observed: m.observed,
    }
}

fn panel_finding(panel: &BiomarkerPanel, name: &str) -> Option<Finding> {
    let key = norm(name);
    let finding = |state, value: String| Finding {
        name: name.to_string(),
        state,
        value,
        observed: None,
    };
    match key.as_str() {
        "pdl1" => panel.pdl1.as_ref().map(|p| {
            let positive = p.cps.is_some_and(|c| c >= 1.0) || p.qualitative == Some(Qualitative::Positive);
            let value = p.raw.clone().unwrap_or_else(|| describe_pdl1(panel));
            finding(
                if positive {
                    MarkerState::Positive
                } else {
                    MarkerState::Negative
                },
                value,
            )
        }),
        "dmmr" | "msih" | "msi" => panel.mmr.map(|m| {
            let state = if m == MmrStatus::Deficient {
                MarkerState::Positive
            } else {
                MarkerState::Negative
            };
            finding(state, m.to_string())
        }),
        "tmb" | "tmbhigh" => panel.tmb.map(|v| {
            let state = if v >= 15.0 {
                MarkerState::Positive
            } else {
                MarkerState::Negative
            };
            finding(state, format!("{} mut/Mb", fmt_decimal(v)))
        }),
        _ => None,
    }
}

pub fn find_marker(twin: &DigitalTwin, name: &str) -> Option<Finding> {
    let key = norm(name);
    twin.biomarkers
        .others
        .iter()
        .find(|m| norm(&m.name) == key)
        .map(marker_finding)
        .or_else(|| panel_finding(&twin.biomarkers, name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendContext {
    #[serde(default)]
    pub region: Option<String>,
    #[serde(default)]
    pub allow_off_label: bool,
    /// Reference date for staleness; without it no finding is stale.
    #[serde(default)]
    pub as_of: Option<NaiveDate>,
    #[serde(default = "default_stale_days")]
    pub stale_after_days: i64,
}

fn default_stale_days() -> i64 {
    365
}

impl Default for RecommendContext {
    fn default() -> Self {
        RecommendContext {
            region: None,
            allow_off_label: false,
            as_of: None,
            stale_after_days: default_stale_days(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub entry: KnowledgeEntry,
    /// The action actually advised; an undetermined marker turns any entry
    /// into a confirmatory test first.
    pub kind: ActionKind,
    pub rationale: String,
    pub gating_notes: Vec<String>,
    pub rank_key: (EvidenceLevel, ActionKind),
}

fn region_matches(entry: &str, wanted: &str) -> bool {
    let (a, b) = (entry.to_lowercase(), wanted.to_lowercase());
    a.contains(&b) || b.contains(&a)
}

/// Evaluates every knowledge entry against the twin and returns the fired
/// ones ordered by evidence level, then action kind, then file order.
pub fn recommend(twin: &DigitalTwin, kb: &[KnowledgeEntry], ctx: &RecommendContext) -> Vec<Recommendation> {
    let mut out = Vec::new();
    for entry in kb {
        let own = find_marker(twin, &entry.biomarker);
        let mut finding = own.clone().filter(|f| f.state != MarkerState::Undetermined);
        let mut via_proxy = None;
        if finding.is_none() {
            if let Some(proxy) = &entry.proxy {
                if let Some(p) = find_marker(twin, proxy).filter(|f| f.state != MarkerState::Undetermined) {
                    via_proxy = Some(proxy.clone());
                    finding = Some(p);
                }
            }
        }
        let state = finding.as_ref().map_or(MarkerState::Undetermined, |f| f.state);
        if !condition_fires(entry.condition, state) {
            continue;
        }

        let mut notes = Vec::new();
        if entry.action_kind == ActionKind::TrialReferral {
            match &ctx.region {
                None => notes.push("location unverified: no patient region given".to_string()),
                Some(r) => match &entry.region {
                    Some(er) if region_matches(er, r) => {}
                    Some(er) => {
                        log::debug!("{}: trial site {er} outside {r}", entry.id);
                        continue;
                    }
                    None => notes.push("location unverified: trial region not recorded".to_string()),
                },
            }
        }
        if entry.recruiting == Some(false) {
            let trial = entry.trial_id.as_deref().unwrap_or("trial");
            if ctx.allow_off_label {
                notes.push(format!(
                    "{trial} is no longer recruiting; consider off-label use of {}",
                    entry.action
                ));
            } else if entry.action_kind == ActionKind::TrialReferral {
                continue;
            } else {
                notes.push(format!("{trial} is no longer recruiting"));
            }
        }

        let kind = if state == MarkerState::Undetermined {
            ActionKind::ConfirmatoryTest
        } else {
            entry.action_kind
        };
        if kind == ActionKind::ConfirmatoryTest && entry.action_kind != ActionKind::ConfirmatoryTest {
            notes.push(format!("{} status required before {}", entry.biomarker, entry.action));
        }

        if let (Some(f), Some(as_of)) = (&finding, ctx.as_of) {
            if let Some(obs) = f.observed {
                let age = (as_of - obs).num_days();
                if age > ctx.stale_after_days && kind != ActionKind::Monitoring {
                    notes.push(format!(
                        "{} finding dates from {} ({age} days old); confirm with a new biopsy",
                        f.name,
                        obs.format("%Y-%m")
                    ));
                }
            }
        }
        notes.extend(entry.notes.iter().cloned());

        let rationale = match (&finding, &via_proxy) {
            (Some(f), Some(proxy)) => format!(
                "{} not determined; {proxy} {} ({}) used as proxy",
                entry.biomarker,
                format!("{:?}", f.state).to_lowercase(),
                f.value
            ),
            (Some(f), None) => format!("{} {} ({})", f.name, format!("{:?}", f.state).to_lowercase(), f.value),
            (None, _) => match own {
                Some(o) => format!("{} not determined ({})", entry.biomarker, o.value),
                None => format!("{} not determined in the current panel", entry.biomarker),
            },
        };
        out.push(Recommendation {
            rank_key: (entry.evidence_level, kind),
            entry: entry.clone(),
            kind,
            rationale,
            gating_notes: notes,
        });
    }
    out.sort_by_key(|r| r.rank_key);
    out
}

fn describe_pdl1(panel: &BiomarkerPanel) -> String {
    let Some(p) = &panel.pdl1 else {
        return "not reported".into();
    };
    let mut parts = Vec::new();
    if let Some(c) = p.cps {
        parts.push(format!("CPS {}", fmt_decimal(c)));
    }
    if let Some(t) = p.tps {
        parts.push(format!("TPS {}%", fmt_percent(t)));
    }
    if let Some(i) = p.ic {
        parts.push(format!("IC {}%", fmt_percent(i)));
    }
    if let Some(q) = p.qualitative {
        parts.push(format!("{q:?}").to_lowercase());
    }
    parts.join(", ")
}

fn describe_panel(panel: &BiomarkerPanel) -> Vec<String> {
    let mut lines = Vec::new();
    if panel.pdl1.is_some() {
        lines.push(format!("PD-L1: {}", describe_pdl1(panel)));
    }
    if let Some(t) = panel.tmb {
        let class = panel.tmb_class.map(|c| format!(" ({c})")).unwrap_or_default();
        lines.push(format!("TMB: {} mut/Mb{class}", fmt_decimal(t)));
    }
    if let Some(m) = panel.mmr {
        let frac = panel
            .msi_fraction
            .map(|f| format!(" (MSI {}%)", fmt_percent(f)))
            .unwrap_or_default();
        lines.push(format!("MMR: {m}{frac}"));
    }
    for m in &panel.others {
        lines.push(format!("{}: {}", m.name, m.detail));
    }
    lines
}

/// Renders a cost-coverage request. Output depends only on the arguments.
pub fn coverage_letter(
    twin: &DigitalTwin,
    rec: &Recommendation,
    analogs: Option<&CohortSummary>,
    date: NaiveDate,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "---");
    let _ = writeln!(s, "twin: {}", twin.id);
    let _ = writeln!(s, "date: {}", date.format("%Y-%m-%d"));
    let _ = writeln!(s, "recommendation: {}", rec.entry.id);
    let _ = writeln!(s, "---");
    let _ = writeln!(s);
    let _ = writeln!(s, "Request for cost coverage: {}", rec.entry.action);
    let _ = writeln!(s);
    let _ = writeln!(s, "Patient summary");
    let age = if twin.age.is_known() {
        format!("{} years", crate::parse::render_age(&twin.age))
    } else {
        "age not recorded".into()
    };
    let _ = writeln!(
        s,
        "- Diagnosis: {}",
        if twin.diagnosis.is_empty() {
            "not recorded"
        } else {
            &twin.diagnosis
        }
    );
    let _ = writeln!(s, "- Age: {age}");
    if let Some(line) = twin.treatment_line {
        let _ = writeln!(s, "- Planned treatment line: {line}");
    }
    let prior: Vec<&str> = twin
        .previous_treatments
        .iter()
        .map(|t| t.description.as_str())
        .collect();
    if !prior.is_empty() {
        let _ = writeln!(s, "- Prior therapy: {}", prior.join("; "));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Biomarker evidence");
    for l in describe_panel(&twin.biomarkers) {
        let _ = writeln!(s, "- {l}");
    }
    let _ = writeln!(s, "- Basis for this request: {}", rec.rationale);
    let _ = writeln!(s);
    let _ = writeln!(s, "Expected response");
    let _ = writeln!(s, "{}", rec.entry.expected_response);
    let _ = writeln!(
        s,
        "Evidence: {:?}; reference: {}",
        rec.entry.evidence_level, rec.entry.reference
    );
    if let Some(trial) = &rec.entry.trial_id {
        let _ = writeln!(s, "Trial: {trial}");
    }
    if let Some(a) = analogs {
        let _ = writeln!(s);
        let _ = writeln!(s, "Outcomes of analogous cases");
        let _ = writeln!(s, "- Analog cases: {}", a.n);
        let fmt_range = |r: Option<[f64; 2]>| {
            r.map(|[lo, hi]| format!(" (range {}-{})", fmt_decimal(lo), fmt_decimal(hi)))
                .unwrap_or_default()
        };
        match a.median_pfs {
            Some(m) => {
                let _ = writeln!(s, "- Median PFS: {} months{}", fmt_decimal(m), fmt_range(a.pfs_range));
            }
            None => {
                let _ = writeln!(s, "- Median PFS: not estimable");
            }
        }
        match a.median_os {
            Some(m) => {
                let _ = writeln!(s, "- Median OS: {} months{}", fmt_decimal(m), fmt_range(a.os_range));
            }
            None => {
                let _ = writeln!(s, "- Median OS: not estimable");
            }
        }
        let responses: Vec<String> = a
            .response_counts
            .iter()
            .map(|(k, v)| format!("{} {v}", k.code()))
            .collect();
        if !responses.is_empty() {
            let _ = writeln!(s, "- Best responses: {}", responses.join(", "));
        }
    }
    if !rec.gating_notes.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "Notes");
        for n in &rec.gating_notes {
            let _ = writeln!(s, "- {n}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Source;

    fn entry(biomarker: &str, condition: Condition, kind: ActionKind) -> KnowledgeEntry {
        KnowledgeEntry {
            id: String::new(),
            biomarker: biomarker.into(),
            proxy: None,
            condition,
            action_kind: kind,
            action: format!("act-{biomarker}"),
            evidence_level: EvidenceLevel::Phase2,
            expected_response: "x".into(),
            region: None,
            trial_id: (kind == ActionKind::TrialReferral).then(|| "NCT0".into()),
            recruiting: None,
            reference: "ref".into(),
            notes: vec![],
        }
    }

    fn twin_with(markers: Vec<Marker>) -> DigitalTwin {
        let mut t = DigitalTwin::new("t", Source::Institutional, "x");
        t.diagnosis = "UCS".into();
        t.biomarkers.others = markers;
        t
    }

    #[test]
    fn default_kb_loads() {
        let kb = default_kb();
        assert_eq!(kb.len(), 11);
        assert!(kb.iter().all(|e| !e.reference.is_empty()));
    }

    #[test]
    fn kb_errors() {
        assert!(parse_kb("").unwrap().is_empty());
        let bad = r#"{"biomarker":"X","condition":"any","action_kind":"trial_referral","action":"a","evidence_level":"phase_1","expected_response":"","reference":"r"}"#;
        assert!(matches!(parse_kb(bad), Err(KbError::Malformed { line: 1, .. })));
        let ok = r#"{"biomarker":"X","condition":"any","action_kind":"treatment","action":"a","evidence_level":"phase_1","expected_response":"","reference":"r"}"#;
        let dup = format!("{ok}\n{ok}\n");
        assert!(matches!(parse_kb(&dup), Err(KbError::Duplicate { line: 2, .. })));
        assert!(matches!(parse_kb("{not json"), Err(KbError::Malformed { line: 1, .. })));
    }

    #[test]
    fn condition_state_matrix() {
        use MarkerState::*;
        let states = [Positive, Negative, Elevated, Normal, Undetermined];
        for s in states {
            assert_eq!(condition_fires(Condition::Positive, s), s == Positive);
            assert_eq!(condition_fires(Condition::Negative, s), s == Negative);
            assert_eq!(condition_fires(Condition::Elevated, s), s == Elevated);
            assert!(condition_fires(Condition::Any, s));
            assert_eq!(
                condition_fires(Condition::NotDetermined, s),
                matches!(s, Undetermined | Positive)
            );
        }
    }

    #[test]
    fn positive_entry_never_fires_on_negative() {
        let kb = vec![entry("HER2", Condition::Positive, ActionKind::Treatment)];
        let t = twin_with(vec![Marker::new("HER2", "Score 0").with_status(MarkerStatus::Negative)]);
        assert!(recommend(&t, &kb, &RecommendContext::default()).is_empty());
        let t = twin_with(vec![Marker::new("HER2", "positive")]);
        assert_eq!(recommend(&t, &kb, &RecommendContext::default()).len(), 1);
    }

    #[test]
    fn empty_panel_only_confirmatory() {
        let recs = recommend(&twin_with(vec![]), &default_kb(), &RecommendContext::default());
        assert!(!recs.is_empty());
        assert!(recs.iter().all(|r| r.kind == ActionKind::ConfirmatoryTest));
    }

    #[test]
    fn region_filter_and_unverified_note() {
        let mut e = entry("MAGE-A4", Condition::NotDetermined, ActionKind::TrialReferral);
        e.region = Some("Bavaria".into());
        e.recruiting = Some(true);
        let t = twin_with(vec![]);
        let none = recommend(&t, std::slice::from_ref(&e), &RecommendContext::default());
        assert!(none[0]
            .gating_notes
            .iter()
            .any(|n| n.starts_with("location unverified")));
        let ctx = RecommendContext {
            region: Some("Hamburg".into()),
            ..Default::default()
        };
        assert!(recommend(&t, std::slice::from_ref(&e), &ctx).is_empty());
    }

    #[test]
    fn stale_finding_gets_rebiopsy_note() {
        let kb = vec![entry("HER2", Condition::Positive, ActionKind::Treatment)];
        let t = twin_with(vec![
            Marker::new("HER2", "positive").observed_on(NaiveDate::from_ymd_opt(2021, 1, 15).unwrap())
        ]);
        let ctx = RecommendContext {
            as_of: NaiveDate::from_ymd_opt(2024, 6, 1),
            ..Default::default()
        };
        let r = recommend(&t, &kb, &ctx);
        assert!(r[0].gating_notes.iter().any(|n| n.contains("new biopsy")));
    }

    #[test]
    fn adding_positive_marker_keeps_unrelated() {
        let kb = default_kb();
        let base = twin_with(vec![Marker::new("ER", "80%")]);
        let before: Vec<String> = recommend(&base, &kb, &RecommendContext::default())
            .into_iter()
            .map(|r| r.entry.id)
            .collect();
        let mut more = base.clone();
        more.biomarkers.others.push(Marker::new("HER2", "positive"));
        let after: Vec<String> = recommend(&more, &kb, &RecommendContext::default())
            .into_iter()
            .map(|r| r.entry.id)
            .collect();
        for id in before.iter().filter(|id| !id.starts_with("her2")) {
            assert!(after.contains(id), "{id} disappeared");
        }
    }
}
