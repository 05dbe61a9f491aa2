//! Total, deterministic grammars for the clinical strings found in health
//! records and publications. No parser here panics or returns `Err`; an
//! unreadable input comes back as an outcome with `Confidence::Failed`.
//!
//! Matching is case- and whitespace-insensitive and accepts a decimal comma.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{
    tmb_class, AgeValue, CensoredDuration, MmrStatus, PdL1Score, Qualitative, ResponseCategory, ResponseRecord,
    TmbClass, TreatmentEvent,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    Exact,
    Inferred,
    Failed,
}

/// Result of running a grammar over one raw string. `value` is present
/// exactly when `confidence` is not `Failed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome<T> {
    pub value: Option<T>,
    pub confidence: Confidence,
    pub raw: String,
    pub note: Option<String>,
}

impl<T> ParseOutcome<T> {
    fn exact(raw: &str, value: T) -> Self {
        ParseOutcome {
            value: Some(value),
            confidence: Confidence::Exact,
            raw: raw.to_string(),
            note: None,
        }
    }

    fn inferred(raw: &str, value: T, note: impl Into<String>) -> Self {
        ParseOutcome {
            value: Some(value),
            confidence: Confidence::Inferred,
            raw: raw.to_string(),
            note: Some(note.into()),
        }
    }

    fn failed(raw: &str, note: impl Into<String>) -> Self {
        ParseOutcome {
            value: None,
            confidence: Confidence::Failed,
            raw: raw.to_string(),
            note: Some(note.into()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.confidence == Confidence::Failed
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> ParseOutcome<U> {
        ParseOutcome {
            value: self.value.map(f),
            confidence: self.confidence,
            raw: self.raw,
            note: self.note,
        }
    }
}

/// Formats a decimal without trailing zeros (`30.0` → `"30"`).
pub fn fmt_decimal(x: f64) -> String {
    let s = format!("{x:.9}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Renders a fraction as a percentage number without the sign.
pub fn fmt_percent(fraction: f64) -> String {
    fmt_decimal(fraction * 100.0)
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn number(s: &str) -> Option<f64> {
    s.replace(',', ".").parse::<f64>().ok().filter(|x| x.is_finite())
}

const UNKNOWN_FORMS: &[&str] = &[
    "",
    "n/a",
    "na",
    "n.a.",
    "-",
    "–",
    "—",
    "unknown",
    "not reported",
    "not available",
    "nr",
    "none reported",
];

fn is_unknown_token(s: &str) -> bool {
    UNKNOWN_FORMS.contains(&s)
}

static DURATION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:(?P<gt>>=|≥|>)\s*)?(?P<num>\d+(?:[.,]\d+)?)\s*(?:months?|mos?\.?|m)?\s*(?:\((?P<ann>[^()]*)\))?$")
        .unwrap()
});

static UNKNOWN_DURATION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?P<unk>n/a|na|n\.a\.|-|–|—|unknown|not reported|not available|nr)?\s*(?:\((?P<ann>[^()]*)\))?$")
        .unwrap()
});

fn annotation_censors(ann: &str) -> Option<bool> {
    if ann.contains("ongoing") || ann.contains("alive") || ann.contains("censored") {
        Some(true)
    } else if ann.contains("deceased") || ann.contains("died") || ann.contains("dead") || ann.contains("death") {
        Some(false)
    } else {
        None
    }
}

/// True when `raw` is one of the recognized forms meaning "no value".
pub fn is_unknown_duration(raw: &str) -> bool {
    let s = normalize(raw);
    UNKNOWN_DURATION_RE.is_match(&s)
}

/// Reads survival durations such as `"4"`, `">30 (ongoing)"`,
/// `"9.9 (deceased)"`, `"- (ongoing)"` or `"n/a"`. Prose statements fail.
pub fn parse_duration(raw: &str) -> ParseOutcome<CensoredDuration> {
    let s = normalize(raw);
    let marker_censored = raw.contains('>') || raw.contains('≥') || s.contains("(ongoing)");

    if let Some(c) = DURATION_RE.captures(&s) {
        let Some(months) = number(&c["num"]) else {
            return ParseOutcome::failed(raw, "number out of range");
        };
        let ann = c.name("ann").map(|m| m.as_str().trim().to_string());
        let ann_censor = ann.as_deref().and_then(annotation_censors);
        let censored = c.name("gt").is_some() || marker_censored || ann_censor == Some(true);
        let value = CensoredDuration {
            months: Some(months),
            censored,
            raw: raw.to_string(),
        };
        return match ann {
            Some(a) if !a.is_empty() && ann_censor.is_none() => {
                ParseOutcome::inferred(raw, value, format!("unrecognized annotation {a:?} ignored"))
            }
            _ => ParseOutcome::exact(raw, value),
        };
    }

    if let Some(c) = UNKNOWN_DURATION_RE.captures(&s) {
        let ann = c.name("ann").map(|m| m.as_str().trim().to_string());
        let ann_censor = ann.as_deref().and_then(annotation_censors);
        let value = CensoredDuration {
            months: None,
            censored: marker_censored || ann_censor == Some(true),
            raw: raw.to_string(),
        };
        return match ann {
            Some(a) if !a.is_empty() && ann_censor.is_none() => {
                ParseOutcome::inferred(raw, value, format!("unrecognized annotation {a:?} ignored"))
            }
            _ => ParseOutcome::exact(raw, value),
        };
    }

    ParseOutcome::failed(
        raw,
        "prose survival statement; not converted to months, needs manual review",
    )
}

/// Canonical text for a duration, inverse of [`parse_duration`].
pub fn render_duration(d: &CensoredDuration) -> String {
    match d.months {
        Some(m) if d.censored => format!(">{} (ongoing)", fmt_decimal(m)),
        Some(m) => fmt_decimal(m),
        None if d.censored => "- (ongoing)".to_string(),
        None => "n/a".to_string(),
    }
}

static PDL1_TOKEN_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?P<key>cps|tps|ic)\s*:?\s*(?P<lt><|≤)?\s*(?P<num>\d+(?:[.,]\d+)?)\s*(?P<pct>%)?").unwrap()
});

/// Reads PD-L1 scores: `"CPS: 41, TPS: 3%, IC: 40%"`, `"positive"`,
/// `"1+, low positive"`. A `"<x"` bound maps to 90% of `x` (so `"<1%"`
/// becomes 0.009) with inferred confidence.
pub fn parse_pdl1(raw: &str) -> ParseOutcome<Option<PdL1Score>> {
    let s = normalize(raw);
    if is_unknown_token(&s) {
        return ParseOutcome::exact(raw, None);
    }
    let mut score = PdL1Score {
        raw: Some(raw.to_string()),
        ..PdL1Score::default()
    };
    let mut notes = Vec::new();
    let mut rest = s.clone();
    for c in PDL1_TOKEN_RE.captures_iter(&s) {
        let Some(mut v) = number(&c["num"]) else {
            return ParseOutcome::failed(raw, "number out of range");
        };
        if c.name("lt").is_some() {
            v *= 0.9;
            notes.push(format!(
                "{} below-detection bound mapped to {}",
                &c["key"],
                fmt_decimal(v)
            ));
        }
        let slot = match &c["key"] {
            "cps" => &mut score.cps,
            "tps" => {
                v /= 100.0;
                &mut score.tps
            }
            _ => {
                v /= 100.0;
                &mut score.ic
            }
        };
        if slot.is_some() {
            return ParseOutcome::failed(raw, format!("duplicate {} score", &c["key"]));
        }
        *slot = Some(v);
        rest = rest.replacen(c.get(0).unwrap().as_str(), " ", 1);
    }
    if s.contains("negative") {
        score.qualitative = Some(Qualitative::Negative);
    } else if s.contains("positive") {
        score.qualitative = Some(Qualitative::Positive);
    }
    if score.is_empty() {
        return ParseOutcome::failed(raw, "no PD-L1 score recognized");
    }
    if score.qualitative == Some(Qualitative::Negative) && score.cps.is_some_and(|c| c > 0.0) {
        return ParseOutcome::failed(raw, "qualitative negative contradicts CPS > 0");
    }
    let leftover: String = rest
        .replace("low positive", " ")
        .replace("positive", " ")
        .replace("negative", " ")
        .replace("1+", " ")
        .replace("2+", " ")
        .replace("3+", " ")
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect();
    if !leftover.is_empty() {
        notes.push(format!("ignored text {leftover:?}"));
    }
    if notes.is_empty() {
        ParseOutcome::exact(raw, Some(score))
    } else {
        ParseOutcome::inferred(raw, Some(score), notes.join("; "))
    }
}

pub fn render_pdl1(p: &PdL1Score) -> String {
    let mut parts = Vec::new();
    if let Some(c) = p.cps {
        parts.push(format!("CPS: {}", fmt_decimal(c)));
    }
    if let Some(t) = p.tps {
        parts.push(format!("TPS: {}%", fmt_percent(t)));
    }
    if let Some(i) = p.ic {
        parts.push(format!("IC: {}%", fmt_percent(i)));
    }
    match p.qualitative {
        Some(Qualitative::Positive) => parts.push("positive".into()),
        Some(Qualitative::Negative) => parts.push("negative".into()),
        None => {}
    }
    parts.join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MmrReading {
    pub status: Option<MmrStatus>,
    pub msi_fraction: Option<f64>,
}

static MMR_PCT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(\s*(\d+(?:[.,]\d+)?)\s*%\s*\)").unwrap());
static MMR_TOKEN_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"pmmr|dmmr|msi-h|msi-high|msi high|msi-l|msi-low|mss|mmr[- ]proficient|mmr[- ]deficient|proficient|deficient",
    )
    .unwrap()
});

/// Reads mismatch-repair status: `"pMMR (3.6%)"`, `"dMMR/MSI-H"`, `"MSS"`.
pub fn parse_mmr(raw: &str) -> ParseOutcome<MmrReading> {
    let s = normalize(raw);
    if is_unknown_token(&s) {
        return ParseOutcome::exact(raw, MmrReading::default());
    }
    let mut proficient = false;
    let mut deficient = false;
    let mut low = false;
    for m in MMR_TOKEN_RE.find_iter(&s) {
        match m.as_str() {
            "pmmr" | "mss" | "mmr-proficient" | "mmr proficient" | "proficient" => proficient = true,
            "msi-l" | "msi-low" => {
                proficient = true;
                low = true;
            }
            _ => deficient = true,
        }
    }
    if proficient && deficient {
        return ParseOutcome::failed(raw, "contradictory proficient and deficient markers");
    }
    let msi_fraction = match MMR_PCT_RE.captures(&s) {
        Some(c) => match number(&c[1]) {
            Some(v) if v <= 100.0 => Some(v / 100.0),
            _ => return ParseOutcome::failed(raw, "MSI percentage out of range"),
        },
        None => None,
    };
    let status = if proficient {
        MmrStatus::Proficient
    } else if deficient {
        MmrStatus::Deficient
    } else {
        return ParseOutcome::failed(raw, "no MMR/MSI status recognized");
    };
    let reading = MmrReading {
        status: Some(status),
        msi_fraction,
    };
    if low {
        ParseOutcome::inferred(raw, reading, "MSI-low read as proficient")
    } else {
        ParseOutcome::exact(raw, reading)
    }
}

pub fn render_mmr(r: &MmrReading) -> String {
    match (r.status, r.msi_fraction) {
        (Some(s), Some(f)) => format!("{s} ({}%)", fmt_percent(f)),
        (Some(s), None) => s.to_string(),
        _ => "n/a".to_string(),
    }
}

static AGE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(?:range\s*:?\s*)?(?P<lo>\d{1,3})(?:\s*(?:-|–|to)\s*(?P<hi>\d{1,3}))?\s*(?:years?|yrs?|y)?(?:\s*old)?$",
    )
    .unwrap()
});

/// Reads an age or age range: `"77"`, `"55-68"`, `"range: 55-68"`.
pub fn parse_age(raw: &str) -> ParseOutcome<AgeValue> {
    let s = normalize(raw);
    if is_unknown_token(&s) {
        return ParseOutcome::exact(
            raw,
            AgeValue {
                low: None,
                high: None,
                raw: raw.to_string(),
            },
        );
    }
    let Some(c) = AGE_RE.captures(&s) else {
        return ParseOutcome::failed(raw, "no age or age range recognized");
    };
    let lo: u32 = c["lo"].parse().unwrap_or(u32::MAX);
    let hi: u32 = c
        .name("hi")
        .map(|m| m.as_str().parse().unwrap_or(u32::MAX))
        .unwrap_or(lo);
    if hi < lo {
        return ParseOutcome::failed(raw, "inverted age range");
    }
    ParseOutcome::exact(
        raw,
        AgeValue {
            low: Some(lo),
            high: Some(hi),
            raw: raw.to_string(),
        },
    )
}

pub fn render_age(a: &AgeValue) -> String {
    match (a.low, a.high) {
        (Some(l), Some(h)) if l == h => l.to_string(),
        (Some(l), Some(h)) => format!("{l}-{h}"),
        _ => "n/a".to_string(),
    }
}

static TMB_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(?P<num>\d+(?:[.,]\d+)?)\s*(?:muts?/mb|mutations?/mb|mutations?/megabase|mut/megabase|mb)?\s*(?:\(\s*(?P<class>low|intermediate|high)\s*\))?$",
    )
    .unwrap()
});

/// Reads a tumor mutational burden in mutations/megabase; unit suffixes and a
/// parenthesized class are accepted.
pub fn parse_tmb(raw: &str) -> ParseOutcome<Option<f64>> {
    let s = normalize(raw);
    if is_unknown_token(&s) {
        return ParseOutcome::exact(raw, None);
    }
    let Some(c) = TMB_RE.captures(&s) else {
        return ParseOutcome::failed(raw, "no TMB value recognized");
    };
    let Some(v) = number(&c["num"]) else {
        return ParseOutcome::failed(raw, "number out of range");
    };
    if let Some(stated) = c.name("class") {
        let computed = tmb_class(v).expect("regex admits only non-negative numbers");
        let stated = match stated.as_str() {
            "low" => TmbClass::Low,
            "intermediate" => TmbClass::Intermediate,
            _ => TmbClass::High,
        };
        if stated != computed {
            return ParseOutcome::inferred(
                raw,
                Some(v),
                format!("stated class {stated} disagrees with computed {computed}"),
            );
        }
    }
    ParseOutcome::exact(raw, Some(v))
}

pub fn render_tmb(v: f64) -> String {
    fmt_decimal(v)
}

static RESPONSE_SPLIT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s*(?:,|;|/|→|->|\bthen\b)\s*").unwrap());
static PAREN_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\([^()]*\)").unwrap());

fn response_token(t: &str) -> Option<ResponseCategory> {
    Some(match t {
        "cr" | "complete response" | "complete remission" => ResponseCategory::CR,
        "pr" | "partial response" | "partial remission" => ResponseCategory::PR,
        "sd" | "stable disease" => ResponseCategory::SD,
        "mr" | "mixed response" => ResponseCategory::MR,
        "pd" | "progressive disease" | "progression" | "disease progression" => ResponseCategory::PD,
        _ => return None,
    })
}

/// Reads a response sequence such as `"PR, PD"`, keeping source order.
pub fn parse_response(raw: &str) -> ParseOutcome<ResponseRecord> {
    let s = normalize(raw);
    let mut record = ResponseRecord {
        raw: raw.to_string(),
        categories: Vec::new(),
        adverse_effects: None,
    };
    if is_unknown_token(&s) {
        return ParseOutcome::exact(raw, record);
    }
    let had_paren = PAREN_RE.is_match(&s);
    let stripped = PAREN_RE.replace_all(&s, " ");
    let mut unknown = Vec::new();
    for tok in RESPONSE_SPLIT_RE.split(stripped.trim()) {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        match response_token(tok) {
            Some(c) => record.categories.push(c),
            None => unknown.push(tok.to_string()),
        }
    }
    if record.categories.is_empty() {
        return ParseOutcome::failed(raw, "no response category recognized");
    }
    if unknown.is_empty() && !had_paren {
        ParseOutcome::exact(raw, record)
    } else {
        ParseOutcome::inferred(raw, record, format!("ignored text {unknown:?}"))
    }
}

pub fn render_response(r: &ResponseRecord) -> String {
    r.categories.iter().map(|c| c.code()).collect::<Vec<_>>().join(", ")
}

static LINE_PREFIX_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?i)(?:line\s*(?P<a>\d+)|(?P<b>\d+)\s*(?:st|nd|rd|th)?\s*line|(?P<c>\d+))\s*[:.)\-]\s*").unwrap()
});
static TRAILING_PAREN_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([^()]*)\)\s*$").unwrap());

/// Splits a free-text treatment history into events. Segments are separated
/// by `;` or newlines; a leading `"Line 2:"`/`"2."` sets the line number and a
/// trailing parenthesized response code is read as that line's response.
pub fn parse_treatments(raw: &str) -> ParseOutcome<Vec<TreatmentEvent>> {
    let s = raw.trim();
    if is_unknown_token(&normalize(s)) {
        return ParseOutcome::exact(raw, Vec::new());
    }
    let mut events = Vec::new();
    for seg in s.split([';', '\n']).map(str::trim).filter(|x| !x.is_empty()) {
        let (line, body) = match LINE_PREFIX_RE.captures(seg) {
            Some(c) => {
                let n = c.name("a").or(c.name("b")).or(c.name("c")).unwrap().as_str();
                (n.parse::<u32>().ok(), seg[c.get(0).unwrap().end()..].trim())
            }
            None => (None, seg),
        };
        let (description, response) = match TRAILING_PAREN_RE.captures(body) {
            Some(c) => {
                let r = parse_response(&c[1]);
                if r.confidence == Confidence::Exact {
                    (body[..c.get(0).unwrap().start()].trim(), r.value)
                } else {
                    (body, None)
                }
            }
            None => (body, None),
        };
        if description.is_empty() {
            return ParseOutcome::failed(raw, "treatment segment without description");
        }
        events.push(TreatmentEvent {
            line,
            description: description.to_string(),
            response,
        });
    }
    let mut last = 0;
    for e in &events {
        if let Some(l) = e.line {
            if l <= last {
                return ParseOutcome::inferred(raw, events, "line numbers not increasing");
            }
            last = l;
        }
    }
    ParseOutcome::exact(raw, events)
}
