//! JSON contract enforcement: strict parse, bounded mechanical repair, quarantine.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ingest::Origin;

pub const SCHEMA_VERSION: &str = "rgt-1";

/// The ten per-patient attributes, in record order.
pub const RECORD_KEYS: [&str; 10] = [
    "age",
    "gender",
    "race",
    "diagnosis",
    "biomarkers",
    "previous treatments",
    "study treatment",
    "study treatment response",
    "PFS",
    "OS",
];

pub const BIOMARKER_KEYS: [&str; 4] = ["pd-l1", "tmb/mb", "msi/mss", "others"];
pub const RESPONSE_KEYS: [&str; 2] = ["treatment response", "adverse effects"];

pub const SAMPLE_SIZE_KEY: &str = "n";
pub const RECOMMENDATION_KEY: &str = "main recommendation";
pub const OTHERS_KEY: &str = "others";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordSchema {
    pub version: &'static str,
    pub origin: Origin,
    pub keys: Vec<&'static str>,
}

impl RecordSchema {
    pub fn for_origin(origin: Origin) -> Self {
        let mut keys = Vec::with_capacity(12);
        if origin == Origin::Literature {
            keys.push(SAMPLE_SIZE_KEY);
        }
        keys.extend(RECORD_KEYS);
        if origin == Origin::Literature {
            keys.push(RECOMMENDATION_KEY);
        }
        RecordSchema {
            version: SCHEMA_VERSION,
            origin,
            keys,
        }
    }

    /// Looks up a schema by version string.
    pub fn lookup(version: &str, origin: Origin) -> Option<Self> {
        (version == SCHEMA_VERSION).then(|| Self::for_origin(origin))
    }

    fn canonical_key(&self, key: &str) -> Option<&'static str> {
        let norm = normalize_key(key);
        self.keys.iter().copied().find(|k| normalize_key(k) == norm)
    }
}

fn normalize_key(key: &str) -> String {
    key.trim().to_lowercase().replace('_', " ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExtraction {
    pub doc_id: String,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<Map<String, Value>>,
    pub repair_applied: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repairs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quarantine_reason: Option<String>,
}

impl RawExtraction {
    pub fn is_quarantined(&self) -> bool {
        self.quarantine_reason.is_some()
    }

    fn quarantine(doc_id: &str, payload: &str, repairs: Vec<String>, reason: String) -> Self {
        RawExtraction {
            doc_id: doc_id.to_string(),
            payload: payload.to_string(),
            parsed: None,
            repair_applied: !repairs.is_empty(),
            repairs,
            quarantine_reason: Some(reason),
        }
    }
}

/// Parses model output against `schema`. Never fails: unusable output
/// comes back with a `quarantine_reason` instead of a parsed object.
pub fn enforce_contract(doc_id: &str, payload: &str, schema: &RecordSchema) -> RawExtraction {
    let mut repairs = Vec::new();

    let object = match serde_json::from_str::<Value>(payload) {
        Ok(Value::Object(map)) => Some(map),
        _ => None,
    };
    let object = match object {
        Some(map) => map,
        None => {
            let Some(body) = isolate_object(payload) else {
                return RawExtraction::quarantine(doc_id, payload, repairs, "no object found".into());
            };
            if body.len() != payload.trim().len() {
                repairs.push("strip-wrapper".to_string());
            }
            let mut candidate = body.to_string();
            let mut last_err = match try_object(&candidate) {
                Ok(map) => return accept(doc_id, payload, map, repairs, schema),
                Err(e) => e,
            };
            let passes: [(&str, Pass); 2] = [
                ("trailing-commas", strip_trailing_commas),
                ("single-quotes", single_to_double_quotes),
            ];
            let mut found = None;
            for (name, pass) in passes {
                let next = pass(&candidate);
                if next == candidate {
                    continue;
                }
                candidate = next;
                repairs.push(name.to_string());
                match try_object(&candidate) {
                    Ok(map) => {
                        found = Some(map);
                        break;
                    }
                    Err(e) => last_err = e,
                }
            }
            match found {
                Some(map) => map,
                None => return RawExtraction::quarantine(doc_id, payload, repairs, format!("unparseable: {last_err}")),
            }
        }
    };
    accept(doc_id, payload, object, repairs, schema)
}

type Pass = fn(&str) -> String;

fn try_object(s: &str) -> Result<Map<String, Value>, String> {
    match serde_json::from_str::<Value>(s) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err("top-level value is not an object".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn accept(
    doc_id: &str,
    payload: &str,
    map: Map<String, Value>,
    repairs: Vec<String>,
    schema: &RecordSchema,
) -> RawExtraction {
    RawExtraction {
        doc_id: doc_id.to_string(),
        payload: payload.to_string(),
        parsed: Some(canonicalize(map, schema)),
        repair_applied: !repairs.is_empty(),
        repairs,
        quarantine_reason: None,
    }
}

/// Renames keys to their schema spelling and moves unknown keys under `others`.
fn canonicalize(map: Map<String, Value>, schema: &RecordSchema) -> Map<String, Value> {
    let mut out = Map::new();
    let mut others = Map::new();
    for (key, value) in map {
        if let Some(canon) = schema.canonical_key(&key) {
            out.insert(canon.to_string(), value);
        } else if normalize_key(&key) == OTHERS_KEY {
            match value {
                Value::Object(inner) => others.extend(inner),
                other => {
                    others.insert(key, other);
                }
            }
        } else {
            others.insert(key, value);
        }
    }
    if !others.is_empty() {
        out.insert(OTHERS_KEY.to_string(), Value::Object(others));
    }
    out
}

/// Drops code fences and prose around the first balanced `{...}`.
fn isolate_object(payload: &str) -> Option<&str> {
    let start = payload.find('{')?;
    let bytes = payload.as_bytes();
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == q {
                quote = None;
            }
            continue;
        }
        match b {
            b'"' => quote = Some(b'"'),
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&payload[start..=i]);
                }
            }
            _ => {}
        }
    }
    // Unbalanced: hand back the tail so later passes report a parse error.
    Some(&payload[start..])
}

fn strip_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn single_to_double_quotes(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars().peekable();
    while let Some(c) = it.next() {
        match c {
            '"' => {
                out.push('"');
                let mut escaped = false;
                for d in it.by_ref() {
                    out.push(d);
                    if escaped {
                        escaped = false;
                    } else if d == '\\' {
                        escaped = true;
                    } else if d == '"' {
                        break;
                    }
                }
            }
            '\'' => {
                out.push('"');
                while let Some(d) = it.next() {
                    match d {
                        '\\' => match it.next() {
                            Some('\'') => out.push('\''),
                            Some(e) => {
                                out.push('\\');
                                out.push(e);
                            }
                            None => out.push('\\'),
                        },
                        '"' => out.push_str("\\\""),
                        '\'' => break,
                        other => out.push(other),
                    }
                }
                out.push('"');
            }
            other => out.push(other),
        }
    }
    out
}

/// Number of schema attributes the extraction returned, whatever their value.
pub fn attribute_count(parsed: &Map<String, Value>, schema: &RecordSchema) -> usize {
    schema.keys.iter().filter(|k| parsed.contains_key(**k)).count()
}
