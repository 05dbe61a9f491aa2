//! Extraction-quality harness: verdict scoring, confusion tallies, the four
//! metrics, review sampling and finite-population sample sizing.
//!
//! Metrics are kept as exact ratios of counts; display rounding is half-up
//! to two decimals and computed on the ratio, not on a float.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::{self, Confidence};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need at least one observation")]
    ZeroObservations,
    #[error("sample size parameter out of domain: {0}")]
    Domain(String),
    #[error("cannot draw {requested} ids from a population of {population}")]
    SampleTooLarge { requested: usize, population: usize },
    #[error("conflicting verdicts for {}", .0.iter().map(|c| format!("{}/{}", c.subject, c.attribute)).collect::<Vec<_>>().join(", "))]
    ConflictingVerdicts(Vec<VerdictConflict>),
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Tp,
    Tn,
    Fp,
    Fn,
}

fn attribute_key(attribute: &str) -> String {
    attribute.to_lowercase().replace("[months]", "").trim().to_string()
}

fn is_absent(v: Option<&str>) -> bool {
    match v {
        None => true,
        Some(s) => matches!(
            s.split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
                .to_lowercase()
                .as_str(),
            "" | "n/a" | "na" | "none" | "null" | "unknown" | "not reported"
        ),
    }
}

/// Canonical comparison form of a value for an attribute. Values that the
/// attribute's grammar can read exactly compare by parsed value; anything
/// else compares as normalized text.
pub fn canonical(attribute: &str, value: &str) -> String {
    fn text(v: &str) -> String {
        v.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
    }
    let key = attribute_key(attribute);
    let parsed = match key.as_str() {
        "pfs" | "os" => {
            let o = parse::parse_duration(value);
            (o.confidence == Confidence::Exact).then(|| o.value.map(|d| parse::render_duration(&d)))
        }
        "age" => {
            let o = parse::parse_age(value);
            (o.confidence == Confidence::Exact).then(|| o.value.map(|a| parse::render_age(&a)))
        }
        "pd-l1" => {
            let o = parse::parse_pdl1(value);
            (o.confidence == Confidence::Exact).then(|| o.value.flatten().map(|p| parse::render_pdl1(&p)))
        }
        "tmb" | "tmb/mb" => {
            let o = parse::parse_tmb(value);
            (o.confidence == Confidence::Exact).then(|| o.value.flatten().map(parse::render_tmb))
        }
        "mmr" | "msi/mss" => {
            let o = parse::parse_mmr(value);
            (o.confidence == Confidence::Exact).then(|| o.value.map(|r| parse::render_mmr(&r)))
        }
        "study treatment response" | "response" => {
            let o = parse::parse_response(value);
            (o.confidence == Confidence::Exact).then(|| o.value.map(|r| parse::render_response(&r)))
        }
        _ => None,
    };
    parsed.flatten().unwrap_or_else(|| text(value))
}

/// Scores one extracted value against the reviewer's gold value.
pub fn score(attribute: &str, extracted: Option<&str>, gold: Option<&str>) -> Verdict {
    match (is_absent(extracted), is_absent(gold)) {
        (true, true) => Verdict::Tn,
        (false, true) => Verdict::Fp,
        (true, false) => Verdict::Fn,
        (false, false) => {
            if canonical(attribute, extracted.unwrap()) == canonical(attribute, gold.unwrap()) {
                Verdict::Tp
            } else {
                Verdict::Fn
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionTally {
    pub attribute: String,
    pub observations: u64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionTally {
    pub fn new(attribute: impl Into<String>, tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionTally {
            attribute: attribute.into(),
            observations: tp + tn + fp + fn_,
            tp,
            tn,
            fp,
            fn_,
        }
    }

    pub fn add(&mut self, v: Verdict) {
        self.observations += 1;
        match v {
            Verdict::Tp => self.tp += 1,
            Verdict::Tn => self.tn += 1,
            Verdict::Fp => self.fp += 1,
            Verdict::Fn => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionTally) {
        self.observations += other.observations;
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn is_consistent(&self) -> bool {
        self.tp + self.tn + self.fp + self.fn_ == self.observations
    }
}

/// An exact ratio of counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metric {
    pub num: u64,
    pub den: u64,
}

impl Metric {
    fn new(num: u64, den: u64) -> Option<Self> {
        (den > 0).then_some(Metric { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Value in hundredths, rounded half-up.
    pub fn hundredths(self) -> u64 {
        (200 * self.num + self.den) / (2 * self.den)
    }

    pub fn rounded(self) -> f64 {
        self.hundredths() as f64 / 100.0
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.hundredths();
        write!(f, "{}.{:02}", h / 100, h % 100)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<Metric>,
    pub precision: Option<Metric>,
    pub recall: Option<Metric>,
    pub f1: Option<Metric>,
}

/// Accuracy, precision, recall and F1 from a tally. Undefined ratios are
/// absent rather than 0 or 1.
pub fn metrics(t: &ConfusionTally) -> Result<Metrics, EvalError> {
    if t.observations == 0 {
        return Err(EvalError::ZeroObservations);
    }
    let precision = Metric::new(t.tp, t.tp + t.fp);
    let recall = Metric::new(t.tp, t.tp + t.fn_);
    // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn) when both are defined
    let f1 = match (precision, recall) {
        (Some(_), Some(_)) if t.tp > 0 => Metric::new(2 * t.tp, 2 * t.tp + t.fp + t.fn_),
        _ => None,
    };
    Ok(Metrics {
        accuracy: Metric::new(t.tp + t.tn, t.observations),
        precision,
        recall,
        f1,
    })
}

/// Cochran's sample size with finite-population correction:
/// `n0 = Z²·P(1−P)/e²`, `n = ceil(n0 / (1 + (n0−1)/N))`.
pub fn sample_size(z: f64, population: u64, e: f64, p: f64) -> Result<u64, EvalError> {
    if !(z.is_finite() && z > 0.0) {
        return Err(EvalError::Domain(format!("Z must be positive, got {z}")));
    }
    if population < 1 {
        return Err(EvalError::Domain("N must be at least 1".into()));
    }
    if !(e > 0.0 && e < 1.0) {
        return Err(EvalError::Domain(format!("e must lie in (0,1), got {e}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(EvalError::Domain(format!("P must lie in (0,1), got {p}")));
    }
    let n0 = z * z * p * (1.0 - p) / (e * e);
    let big_n = population as f64;
    let n = n0 * big_n / (big_n + n0 - 1.0);
    // absorb float noise on results that are mathematically integral
    let n = (n - 1e-9).ceil().max(1.0) as u64;
    Ok(n.min(population))
}

/// Uniform sample without replacement. The result depends only on the set
/// of ids and the seed, and is returned sorted.
pub fn draw_sample(population: &[String], n: usize, seed: u64) -> Result<Vec<String>, EvalError> {
    let ids: Vec<&String> = population.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if n > ids.len() {
        return Err(EvalError::SampleTooLarge {
            requested: n,
            population: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<String> = sample(&mut rng, ids.len(), n)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect();
    picked.sort();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationRecord {
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub attribute: String,
    #[serde(default)]
    pub extracted: Option<String>,
    #[serde(default)]
    pub gold: Option<String>,
    pub verdict: Verdict,
    #[serde(default)]
    pub reviewer: String,
    #[serde(default)]
    pub note: String,
}

impl AdjudicationRecord {
    pub fn rescored(&self) -> Verdict {
        score(&self.attribute, self.extracted.as_deref(), self.gold.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictConflict {
    pub subject: String,
    pub attribute: String,
    pub verdicts: Vec<Verdict>,
}

pub fn read_adjudications(path: &Path) -> Result<Vec<AdjudicationRecord>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Records whose stored verdict disagrees with the scoring rule.
pub fn check_verdicts(records: &[AdjudicationRecord]) -> Vec<(usize, Verdict)> {
    records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let v = r.rescored();
            (v != r.verdict).then_some((i, v))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub source: String,
    pub attribute: String,
    pub tally: ConfusionTally,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

pub const TOTAL: &str = "TOTAL";

impl MetricsTable {
    pub fn total(&self, source: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.source == source && r.attribute == TOTAL)
    }

    pub fn row(&self, source: &str, attribute: &str) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.source == source && r.attribute == attribute)
    }

    /// Plain-text rendering in the usual evaluation-table column order.
    pub fn render(&self) -> String {
        let mut out =
            String::from("Source\tData point\tObservations\tTP\tTN\tFP\tFN\tAccuracy\tPrecision\tRecall\tF1\n");
        let show = |m: Option<Metric>| m.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            let t = &r.tally;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.source,
                r.attribute,
                t.observations,
                t.tp,
                t.tn,
                t.fp,
                t.fn_,
                show(r.metrics.accuracy),
                show(r.metrics.precision),
                show(r.metrics.recall),
                show(r.metrics.f1),
            ));
        }
        out
    }
}

/// Groups adjudications by (source, attribute), tallies verdicts and appends
/// one TOTAL row per source. Repeated identical verdicts for a subject and
/// attribute count once; differing ones are an error.
pub fn evaluate_run(records: &[AdjudicationRecord]) -> Result<MetricsTable, EvalError> {
    let mut seen: HashMap<(String, String, String), Vec<Verdict>> = HashMap::new();
    let mut order: Vec<(String, String, String)> = Vec::new();
    for r in records {
        let key = (
            r.source.clone().unwrap_or_default(),
            r.subject.clone(),
            r.attribute.clone(),
        );
        let entry = seen.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        if !entry.contains(&r.verdict) {
            entry.push(r.verdict);
        }
    }
    let conflicts: Vec<VerdictConflict> = order
        .iter()
        .filter(|k| seen[*k].len() > 1)
        .map(|k| VerdictConflict {
            subject: k.1.clone(),
            attribute: k.2.clone(),
            verdicts: seen[k].clone(),
        })
        .collect();
    if !conflicts.is_empty() {
        return Err(EvalError::ConflictingVerdicts(conflicts));
    }

    let mut sources: Vec<String> = Vec::new();
    let mut groups: Vec<(String, String, ConfusionTally)> = Vec::new();
    for key in &order {
        let (source, _, attribute) = key;
        if !sources.contains(source) {
            sources.push(source.clone());
        }
        let idx = match groups.iter().position(|g| &g.0 == source && &g.1 == attribute) {
            Some(i) => i,
            None => {
                groups.push((
                    source.clone(),
                    attribute.clone(),
                    ConfusionTally {
                        attribute: attribute.clone(),
                        ..Default::default()
                    },
                ));
                groups.len() - 1
            }
        };
        groups[idx].2.add(seen[key][0]);
    }

    let mut table = MetricsTable::default();
    for source in &sources {
        let mut total = ConfusionTally {
            attribute: TOTAL.into(),
            ..Default::default()
        };
        for (s, attribute, tally) in groups.iter().filter(|g| &g.0 == source) {
            total.merge(tally);
            table.rows.push(MetricsRow {
                source: s.clone(),
                attribute: attribute.clone(),
                tally: tally.clone(),
                metrics: metrics(tally)?,
            });
        }
        table.rows.push(MetricsRow {
            source: source.clone(),
            attribute: TOTAL.into(),
            metrics: metrics(&total)?,
            tally: total,
        });
    }
    Ok(table)
}

/// One row of a metrics table as published, with its reported values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedRow {
    pub source: String,
    pub attribute: String,
    #[serde(deserialize_with = "count")]
    pub observations: u64,
    #[serde(deserialize_with = "count")]
    pub tp: u64,
    #[serde(deserialize_with = "count")]
    pub tn: u64,
    #[serde(deserialize_with = "count")]
    pub fp: u64,
    #[serde(rename = "fn", deserialize_with = "count")]
    pub fn_: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Counts may be typeset as decimals ("7.00"); they must still be whole.
fn count<'de, D: serde::Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    let v = f64::deserialize(d)?;
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(serde::de::Error::custom(format!("{v} is not a count")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LintIssue {
    pub source: String,
    pub attribute: String,
    pub message: String,
}

pub fn read_reported_table(path: &Path) -> Result<Vec<ReportedRow>, EvalError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| EvalError::Malformed {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| EvalError::Malformed {
                path: path.display().to_string(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Recomputes every metric of a reported table from its counts and lists the
/// rows whose published values disagree at two-decimal precision.
pub fn lint_reported_table(rows: &[ReportedRow]) -> Vec<LintIssue> {
    let mut issues = Vec::new();
    for r in rows {
        let fn_ = r.fn_;
        let tally = ConfusionTally {
            attribute: r.attribute.clone(),
            observations: r.observations,
            tp: r.tp,
            tn: r.tn,
            fp: r.fp,
            fn_,
        };
        let mut problems = Vec::new();
        if !tally.is_consistent() {
            problems.push(format!(
                "counts sum to {} but observations is {}",
                r.tp + r.tn + r.fp + fn_,
                r.observations
            ));
        }
        if let Ok(m) = metrics(&tally) {
            for (name, reported, computed) in [
                ("accuracy", r.accuracy, m.accuracy),
                ("precision", r.precision, m.precision),
                ("recall", r.recall, m.recall),
                ("f1", r.f1, m.f1),
            ] {
                let reported_h = (reported * 100.0).round() as u64;
                match computed {
                    Some(c) if c.hundredths() != reported_h => {
                        problems.push(format!("{name} reported {reported:.2}, recomputed {c}"))
                    }
                    None => problems.push(format!("{name} reported {reported:.2}, undefined from counts")),
                    _ => {}
                }
            }
        }
        if !problems.is_empty() {
            issues.push(LintIssue {
                source: r.source.clone(),
                attribute: r.attribute.clone(),
                message: problems.join("; "),
            });
        }
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        assert_eq!(score("diagnosis", Some("UCS"), Some("UCS")), Verdict::Tp);
        assert_eq!(score("diagnosis", None, None), Verdict::Tn);
        assert_eq!(score("PFS [months]", Some("6 months"), Some("PFS 18")), Verdict::Fn);
        assert_eq!(score("diagnosis", Some("UCS"), None), Verdict::Fp);
        assert_eq!(score("diagnosis", None, Some("UCS")), Verdict::Fn);
        assert_eq!(score("PFS", Some(">30 (ongoing)"), Some("> 30 (Ongoing)")), Verdict::Tp);
        assert_eq!(score("age", Some("n/a"), Some("")), Verdict::Tn);
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&ConfusionTally::new("TOTAL", 225, 120, 0, 7)).unwrap();
        assert_eq!(m.accuracy.unwrap().to_string(), "0.98");
        assert_eq!(m.precision.unwrap().to_string(), "1.00");
        assert_eq!(m.recall.unwrap().to_string(), "0.97");
        assert_eq!(m.f1.unwrap().to_string(), "0.98");

        let m = metrics(&ConfusionTally::new("Diagnosis", 7, 0, 0, 0)).unwrap();
        for x in [m.accuracy, m.precision, m.recall, m.f1] {
            assert_eq!(x.unwrap().to_string(), "1.00");
        }
        let m = metrics(&ConfusionTally::new("PFS", 1, 0, 0, 6)).unwrap();
        assert_eq!(m.recall.unwrap().to_string(), "0.14");
    }

    #[test]
    fn undefined_metrics_are_absent() {
        let m = metrics(&ConfusionTally::new("x", 0, 5, 0, 0)).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.accuracy.unwrap().to_string(), "1.00");
        assert!(matches!(
            metrics(&ConfusionTally::default()),
            Err(EvalError::ZeroObservations)
        ));
    }

    #[test]
    fn half_up_rounding_is_exact() {
        // 0.285 is not representable; the ratio 57/200 must still round up
        assert_eq!(Metric { num: 57, den: 200 }.to_string(), "0.29");
        assert_eq!(Metric { num: 1, den: 8 }.to_string(), "0.13");
        assert_eq!(Metric { num: 2, den: 3 }.to_string(), "0.67");
    }

    #[test]
    fn sample_size_examples() {
        assert_eq!(sample_size(1.96, 7956, 0.05, 0.5).unwrap(), 367);
        assert_eq!(sample_size(1.96, 1_000_000_000_000, 0.05, 0.5).unwrap(), 385);
        assert_eq!(sample_size(1.96, 1, 0.05, 0.5).unwrap(), 1);
        assert!(sample_size(0.0, 10, 0.05, 0.5).is_err());
        assert!(sample_size(1.96, 0, 0.05, 0.5).is_err());
        assert!(sample_size(1.96, 10, 1.0, 0.5).is_err());
        assert!(sample_size(1.96, 10, 0.05, 0.0).is_err());
    }

    #[test]
    fn draw_sample_examples() {
        let ids: Vec<String> = (0..7956).map(|i| format!("attr-{i:05}")).collect();
        let s = draw_sample(&ids, 352, 7).unwrap();
        assert_eq!(s.len(), 352);
        assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), 352);
        assert_eq!(draw_sample(&ids, 352, 7).unwrap(), s);
        let mut rev = ids.clone();
        rev.reverse();
        assert_eq!(draw_sample(&rev, 352, 7).unwrap(), s);
        assert_eq!(draw_sample(&ids[..10], 10, 1).unwrap().len(), 10);
        assert!(draw_sample(&ids[..10], 11, 1).is_err());
    }

    fn rec(subject: &str, attribute: &str, v: Verdict) -> AdjudicationRecord {
        AdjudicationRecord {
            subject: subject.into(),
            source: Some("EHR".into()),
            attribute: attribute.into(),
            extracted: None,
            gold: None,
            verdict: v,
            reviewer: "r1".into(),
            note: String::new(),
        }
    }

    #[test]
    fn evaluate_run_totals_and_conflicts() {
        let recs = vec![
            rec("a", "Age", Verdict::Tp),
            rec("b", "Age", Verdict::Fn),
            rec("a", "OS", Verdict::Tp),
            rec("a", "OS", Verdict::Tp),
        ];
        let t = evaluate_run(&recs).unwrap();
        assert_eq!(t.rows.len(), 3);
        let total = t.total("EHR").unwrap();
        assert_eq!((total.tally.observations, total.tally.tp, total.tally.fn_), (3, 2, 1));

        let mut bad = recs.clone();
        bad.push(rec("b", "Age", Verdict::Tp));
        match evaluate_run(&bad) {
            Err(EvalError::ConflictingVerdicts(c)) => {
                assert_eq!(c.len(), 1);
                assert_eq!(c[0].subject, "b");
            }
            other => panic!("expected conflict, got {other:?}"),
        }
        assert!(evaluate_run(&[]).unwrap().rows.is_empty());
    }

    proptest! {
        #[test]
        fn metric_bounds(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
            prop_assume!(tp + tn + fp + fn_ > 0);
            let m = metrics(&ConfusionTally::new("x", tp, tn, fp, fn_)).unwrap();
            for x in [m.accuracy, m.precision, m.recall, m.f1].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&x.value()));
            }
            if let (Some(p), Some(r), Some(f)) = (m.precision, m.recall, m.f1) {
                let (p, r, f) = (p.value(), r.value(), f.value());
                prop_assert!(f <= p.max(r) + 1e-12);
                prop_assert!(f >= p.min(r) - 1e-12);
                prop_assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }
    }
}
