//! Table renderings of core results for `--format table`.

use oncotwin_core::eval::{LintIssue, MetricsTable};
use oncotwin_core::extract::JobReport;
use oncotwin_core::matcher::{FunnelStage, WhatIfResult};
use oncotwin_core::model::{CensoredDuration, DigitalTwin, ValidationReport};
use oncotwin_core::{CohortSummary, KnowledgeEntry, Recommendation};
use serde::Serialize;

use crate::table::Table;

/// The serialized name of a unit enum variant.
fn tag<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_else(|| "-".into())
}

fn range(r: Option<[f64; 2]>) -> String {
    r.map(|[a, b]| format!("{a}-{b}")).unwrap_or_else(|| "-".into())
}

fn duration(d: &CensoredDuration) -> String {
    match d.months {
        Some(m) if d.censored => format!(">{m}"),
        Some(m) => format!("{m}"),
        None if d.raw.is_empty() => "-".into(),
        None => d.raw.clone(),
    }
}

pub fn twins(twins: &[DigitalTwin]) -> Table {
    let mut t = Table::new([
        "id",
        "source",
        "age",
        "diagnosis",
        "cps",
        "tmb",
        "mmr",
        "treatment",
        "response",
        "pfs",
        "os",
    ]);
    for tw in twins {
        let b = &tw.biomarkers;
        let response: Vec<&str> = tw.study_response.categories.iter().map(|c| c.code()).collect();
        t.push([
            tw.id.clone(),
            tw.source.to_string(),
            if tw.age.raw.is_empty() {
                "-".into()
            } else {
                tw.age.raw.clone()
            },
            tw.diagnosis.clone(),
            num(b.cps()),
            num(b.tmb),
            b.mmr.map(|m| m.to_string()).unwrap_or_else(|| "-".into()),
            tw.study_treatment.clone(),
            response.join(","),
            duration(&tw.pfs),
            duration(&tw.os),
        ]);
    }
    t
}

pub fn validation(reports: &[(String, ValidationReport)]) -> Table {
    let mut t = Table::new(["id", "severity", "field", "message"]);
    for (id, r) in reports {
        if r.findings.is_empty() {
            t.push([id.as_str(), "ok", "", ""]);
        }
        for f in &r.findings {
            t.push([id.clone(), tag(&f.severity), f.field.clone(), f.message.clone()]);
        }
    }
    t
}

pub fn funnel(stages: &[FunnelStage]) -> Table {
    let mut t = Table::new(["stage", "count", "ids"]);
    for s in stages {
        t.push([s.stage.clone(), s.len().to_string(), s.ids.join(", ")]);
    }
    t
}

fn summary_rows(s: &CohortSummary) -> Vec<(String, String)> {
    let counts = |pairs: Vec<(String, usize)>| {
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    vec![
        ("n".into(), s.n.to_string()),
        ("median_pfs".into(), num(s.median_pfs)),
        ("pfs_range".into(), range(s.pfs_range)),
        (
            "pfs_known/censored".into(),
            format!("{}/{}", s.pfs_known, s.pfs_censored),
        ),
        ("median_os".into(), num(s.median_os)),
        ("os_range".into(), range(s.os_range)),
        ("os_known/censored".into(), format!("{}/{}", s.os_known, s.os_censored)),
        ("median_line".into(), num(s.median_line)),
        ("line_range".into(), range(s.line_range)),
        ("median_cps".into(), num(s.median_cps)),
        ("cps_range".into(), range(s.cps_range)),
        ("median_tmb".into(), num(s.median_tmb)),
        ("tmb_range".into(), range(s.tmb_range)),
        (
            "responses".into(),
            counts(
                s.response_counts
                    .iter()
                    .map(|(k, v)| (k.code().to_string(), *v))
                    .collect(),
            ),
        ),
        (
            "vital_status".into(),
            counts(s.vital_status_counts.iter().map(|(k, v)| (tag(k), *v)).collect()),
        ),
    ]
}

pub fn summary(s: &CohortSummary) -> Table {
    Table::pairs(summary_rows(s))
}

pub fn whatif(r: &WhatIfResult) -> Table {
    let mut rows = vec![
        (
            "index".to_string(),
            format!(
                "{} ({})",
                r.index.id,
                if r.index.passed { "eligible" } else { "not eligible" }
            ),
        ),
        ("analogs".to_string(), r.analogs.join(", ")),
    ];
    if let Some(reason) = &r.reason {
        rows.push(("reason".into(), reason.clone()));
    }
    rows.extend(summary_rows(&r.summary));
    Table::pairs(rows)
}

pub fn metrics(m: &MetricsTable) -> Table {
    let mut t = Table::new([
        "source",
        "attribute",
        "obs",
        "tp",
        "tn",
        "fp",
        "fn",
        "accuracy",
        "precision",
        "recall",
        "f1",
    ]);
    let show = |m: Option<oncotwin_core::eval::Metric>| m.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
    for r in &m.rows {
        let c = &r.tally;
        t.push([
            r.source.clone(),
            r.attribute.clone(),
            c.observations.to_string(),
            c.tp.to_string(),
            c.tn.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            show(r.metrics.accuracy),
            show(r.metrics.precision),
            show(r.metrics.recall),
            show(r.metrics.f1),
        ]);
    }
    t
}

pub fn lint(issues: &[LintIssue]) -> Table {
    let mut t = Table::new(["source", "attribute", "issue"]);
    for i in issues {
        t.push([i.source.as_str(), i.attribute.as_str(), i.message.as_str()]);
    }
    t
}

pub fn recommendations(recs: &[Recommendation]) -> Table {
    let mut t = Table::new(["id", "kind", "evidence", "action", "notes"]);
    for r in recs {
        t.push([
            r.entry.id.clone(),
            tag(&r.kind),
            tag(&r.entry.evidence_level),
            r.entry.action.clone(),
            r.gating_notes.join("; "),
        ]);
    }
    t
}

pub fn knowledge(kb: &[KnowledgeEntry]) -> Table {
    let mut t = Table::new(["id", "biomarker", "condition", "kind", "evidence", "action"]);
    for e in kb {
        t.push([
            e.id.clone(),
            e.biomarker.clone(),
            tag(&e.condition),
            tag(&e.action_kind),
            tag(&e.evidence_level),
            e.action.clone(),
        ]);
    }
    t
}

pub fn job_report(r: &JobReport) -> Table {
    Table::pairs([
        ("schema_version", r.schema_version.clone()),
        ("template", r.template.clone()),
        ("seed", r.seed.to_string()),
        ("subjects", r.subjects.to_string()),
        ("extracted", r.extracted.to_string()),
        ("quarantined", r.quarantined.to_string()),
        ("documents", r.documents.to_string()),
        ("quarantined_documents", r.quarantined_documents.to_string()),
        ("repairs", r.repairs.to_string()),
        ("attribute_values", r.attribute_values.to_string()),
    ])
}
