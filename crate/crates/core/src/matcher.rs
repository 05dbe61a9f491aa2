//! Analog-case eligibility rules, the screening funnel and the what-if overlay.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{summarize, CohortSummary};
use crate::model::{DigitalTwin, Marker, MmrStatus, PdL1Score, SimilarityCriterion, TreatmentEvent};

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("override of non-modeled field `{0}`")]
    UnmodeledField(String),
    #[error("malformed overrides: {0}")]
    MalformedOverrides(String),
    #[error("invalid eligibility spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EligibilitySpec {
    pub min_cps: f64,
    pub max_tmb_exclusive: f64,
    pub required_mmr: MmrStatus,
    /// An empty set disables similarity filtering.
    pub similarity: BTreeSet<SimilarityCriterion>,
    pub require_ici_treatment: bool,
}

impl Default for EligibilitySpec {
    fn default() -> Self {
        EligibilitySpec {
            min_cps: 40.0,
            max_tmb_exclusive: 15.0,
            required_mmr: MmrStatus::Proficient,
            similarity: SimilarityCriterion::ALL.into_iter().collect(),
            require_ici_treatment: true,
        }
    }
}

impl EligibilitySpec {
    pub fn validate(&self) -> Result<(), MatchError> {
        if !(self.min_cps.is_finite() && self.min_cps >= 0.0) {
            return Err(MatchError::InvalidSpec(format!(
                "min_cps must be finite and >= 0, got {}",
                self.min_cps
            )));
        }
        if !(self.max_tmb_exclusive.is_finite() && self.max_tmb_exclusive > 0.0) {
            return Err(MatchError::InvalidSpec(format!(
                "max_tmb_exclusive must be finite and > 0, got {}",
                self.max_tmb_exclusive
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Cps,
    Tmb,
    Mmr,
    Similarity,
    IciTreatment,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Cps => "cps",
            Rule::Tmb => "tmb",
            Rule::Mmr => "mmr",
            Rule::Similarity => "similarity",
            Rule::IciTreatment => "ici_treatment",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOutcome {
    Pass,
    Fail,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub id: String,
    pub passed: bool,
    pub per_rule: BTreeMap<Rule, RuleOutcome>,
    /// One entry per rule that did not pass, prefixed with the rule name.
    pub reasons: Vec<String>,
}

impl MatchResult {
    pub fn outcome(&self, rule: Rule) -> Option<RuleOutcome> {
        self.per_rule.get(&rule).copied()
    }

    pub fn failed_rules(&self) -> Vec<Rule> {
        self.per_rule
            .iter()
            .filter(|(_, o)| **o != RuleOutcome::Pass)
            .map(|(r, _)| *r)
            .collect()
    }
}

fn cps_rule(t: &DigitalTwin, spec: &EligibilitySpec) -> (RuleOutcome, String) {
    match t.biomarkers.cps() {
        None => (RuleOutcome::Unknown, "CPS not reported".into()),
        Some(c) if c >= spec.min_cps => (RuleOutcome::Pass, String::new()),
        Some(c) => (RuleOutcome::Fail, format!("CPS {c} below {}", spec.min_cps)),
    }
}

fn tmb_rule(t: &DigitalTwin, spec: &EligibilitySpec) -> (RuleOutcome, String) {
    match t.biomarkers.tmb {
        None => (RuleOutcome::Unknown, "TMB not reported".into()),
        Some(v) if v < spec.max_tmb_exclusive => (RuleOutcome::Pass, String::new()),
        Some(v) => (
            RuleOutcome::Fail,
            format!("TMB {v} not below {}", spec.max_tmb_exclusive),
        ),
    }
}

fn mmr_rule(t: &DigitalTwin, spec: &EligibilitySpec) -> (RuleOutcome, String) {
    match t.biomarkers.mmr {
        None => (RuleOutcome::Unknown, "MMR status not reported".into()),
        Some(m) if m == spec.required_mmr => (RuleOutcome::Pass, String::new()),
        Some(m) => (
            RuleOutcome::Fail,
            format!("{m} does not match required {}", spec.required_mmr),
        ),
    }
}

fn similarity_rule(t: &DigitalTwin, spec: &EligibilitySpec) -> (RuleOutcome, String) {
    if spec.similarity.is_empty() || t.similarity.iter().any(|c| spec.similarity.contains(c)) {
        (RuleOutcome::Pass, String::new())
    } else {
        let wanted: Vec<_> = spec.similarity.iter().map(|c| c.short_name()).collect();
        (
            RuleOutcome::Fail,
            format!("no similarity criterion among {}", wanted.join(", ")),
        )
    }
}

fn ici_rule(t: &DigitalTwin) -> (RuleOutcome, String) {
    if t.study_treatment.trim().is_empty() {
        (RuleOutcome::Unknown, "study treatment not reported".into())
    } else if t.received_ici() {
        (RuleOutcome::Pass, String::new())
    } else {
        (
            RuleOutcome::Fail,
            format!("study treatment `{}` is not an ICI regimen", t.study_treatment),
        )
    }
}

/// Applies every mandatory rule of `spec`. An unknown outcome is not a pass.
pub fn evaluate_eligibility(twin: &DigitalTwin, spec: &EligibilitySpec) -> MatchResult {
    let mut rules = vec![
        (Rule::Cps, cps_rule(twin, spec)),
        (Rule::Tmb, tmb_rule(twin, spec)),
        (Rule::Mmr, mmr_rule(twin, spec)),
        (Rule::Similarity, similarity_rule(twin, spec)),
    ];
    if spec.require_ici_treatment {
        rules.push((Rule::IciTreatment, ici_rule(twin)));
    }
    let mut per_rule = BTreeMap::new();
    let mut reasons = Vec::new();
    for (rule, (outcome, why)) in rules {
        per_rule.insert(rule, outcome);
        if outcome != RuleOutcome::Pass {
            reasons.push(format!("{rule}: {why}"));
        }
    }
    MatchResult {
        id: twin.id.clone(),
        passed: reasons.is_empty(),
        per_rule,
        reasons,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelStage {
    pub stage: String,
    pub ids: Vec<String>,
}

impl FunnelStage {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Screening funnel in the order all, cps, tmb+mmr, similarity, ici-treated.
/// Each stage keeps the survivors of the previous one that pass its rules.
pub fn cohort_funnel(twins: &[DigitalTwin], spec: &EligibilitySpec) -> Vec<FunnelStage> {
    let results: Vec<(&DigitalTwin, MatchResult)> = twins.iter().map(|t| (t, evaluate_eligibility(t, spec))).collect();
    let stages: [(&str, &[Rule]); 5] = [
        ("all", &[]),
        ("cps", &[Rule::Cps]),
        ("tmb+mmr", &[Rule::Tmb, Rule::Mmr]),
        ("similarity", &[Rule::Similarity]),
        ("ici-treated", &[Rule::IciTreatment]),
    ];
    let mut alive: Vec<&(&DigitalTwin, MatchResult)> = results.iter().collect();
    let mut out = Vec::new();
    for (name, rules) in stages {
        alive.retain(|(_, r)| {
            rules
                .iter()
                .all(|rule| r.outcome(*rule).is_none_or(|o| o == RuleOutcome::Pass))
        });
        let mut ids: Vec<String> = alive.iter().map(|(t, _)| t.id.clone()).collect();
        ids.sort_by(|a, b| natural_cmp(a, b));
        out.push(FunnelStage {
            stage: name.into(),
            ids,
        });
    }
    out
}

/// Orders ids so that embedded numbers compare numerically (`case-2` < `case-10`).
pub fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    fn split(s: &str) -> Vec<(String, Option<u64>)> {
        let mut parts = Vec::new();
        let mut cur = String::new();
        let mut digits = false;
        for ch in s.chars() {
            let d = ch.is_ascii_digit();
            if !cur.is_empty() && d != digits {
                parts.push(std::mem::take(&mut cur));
            }
            digits = d;
            cur.push(ch);
        }
        if !cur.is_empty() {
            parts.push(cur);
        }
        parts
            .into_iter()
            .map(|p| {
                let n = p.parse::<u64>().ok();
                (p, n)
            })
            .collect()
    }
    let (pa, pb) = (split(a), split(b));
    for (x, y) in pa.iter().zip(&pb) {
        let ord = match (x.1, y.1) {
            (Some(m), Some(n)) => m.cmp(&n).then_with(|| x.0.cmp(&y.0)),
            _ => x.0.cmp(&y.0),
        };
        if ord.is_ne() {
            return ord;
        }
    }
    pa.len().cmp(&pb.len())
}

/// Biomarker and treatment fields a clinician may vary in a what-if run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhatIfOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pdl1: Option<PdL1Score>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tmb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmr: Option<MmrStatus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msi_fraction: Option<f64>,
    /// Upserted by marker name.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub markers: Vec<Marker>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub previous_treatments: Option<Vec<TreatmentEvent>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study_treatment: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treatment_line: Option<u32>,
}

const OVERRIDE_FIELDS: &[&str] = &[
    "pdl1",
    "cps",
    "tmb",
    "mmr",
    "msi_fraction",
    "markers",
    "previous_treatments",
    "study_treatment",
    "treatment_line",
];

impl WhatIfOverrides {
    /// Parses overrides, naming the first field that is not modeled.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, MatchError> {
        if let Some(obj) = value.as_object() {
            if let Some(k) = obj.keys().find(|k| !OVERRIDE_FIELDS.contains(&k.as_str())) {
                return Err(MatchError::UnmodeledField(k.clone()));
            }
        }
        serde_json::from_value(value.clone()).map_err(|e| MatchError::MalformedOverrides(e.to_string()))
    }

    /// Returns a modified copy; the input twin is untouched.
    pub fn apply(&self, twin: &DigitalTwin) -> DigitalTwin {
        let mut t = twin.clone();
        let panel = &mut t.biomarkers;
        if let Some(p) = &self.pdl1 {
            panel.pdl1 = Some(p.clone());
        }
        if let Some(c) = self.cps {
            let mut p = panel.pdl1.clone().unwrap_or_default();
            p.cps = Some(c);
            p.raw = None;
            panel.pdl1 = Some(p);
        }
        if let Some(v) = self.tmb {
            panel.set_tmb(Some(v));
        }
        if let Some(m) = self.mmr {
            panel.mmr = Some(m);
        }
        if let Some(f) = self.msi_fraction {
            panel.msi_fraction = Some(f);
        }
        for m in &self.markers {
            match panel.others.iter_mut().find(|o| o.name.eq_ignore_ascii_case(&m.name)) {
                Some(existing) => *existing = m.clone(),
                None => panel.others.push(m.clone()),
            }
        }
        if let Some(p) = &self.previous_treatments {
            t.previous_treatments = p.clone();
        }
        if let Some(s) = &self.study_treatment {
            t.study_treatment = s.clone();
        }
        if let Some(l) = self.treatment_line {
            t.treatment_line = Some(l);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResult {
    pub modified: DigitalTwin,
    pub index: MatchResult,
    pub analogs: Vec<String>,
    pub summary: CohortSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Applies `overrides` to `twin`, gates the modified twin with `index_spec`
/// and, when it qualifies, collects analogs from `candidates` under
/// `analog_spec`. The twin never counts as its own analog.
pub fn whatif(
    twin: &DigitalTwin,
    overrides: &WhatIfOverrides,
    analog_spec: &EligibilitySpec,
    index_spec: &EligibilitySpec,
    candidates: &[DigitalTwin],
) -> WhatIfResult {
    let modified = overrides.apply(twin);
    let index = evaluate_eligibility(&modified, index_spec);
    let (analogs, reason) = if index.passed {
        let mut found: Vec<&DigitalTwin> = candidates
            .iter()
            .filter(|c| c.id != twin.id && evaluate_eligibility(c, analog_spec).passed)
            .collect();
        found.sort_by(|a, b| natural_cmp(&a.id, &b.id));
        let reason = found
            .is_empty()
            .then(|| "no analog satisfies the eligibility spec".to_string());
        (found, reason)
    } else {
        (
            Vec::new(),
            Some(format!("index twin not eligible: {}", index.reasons.join("; "))),
        )
    };
    let cohort: Vec<DigitalTwin> = analogs.iter().map(|t| (*t).clone()).collect();
    WhatIfResult {
        summary: summarize(&cohort),
        analogs: cohort.into_iter().map(|t| t.id).collect(),
        modified,
        index,
        reason,
    }
}
