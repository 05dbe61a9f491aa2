//! Prompt assembly from versioned templates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::contract::{RecordSchema, BIOMARKER_KEYS, RESPONSE_KEYS, SAMPLE_SIZE_KEY};
use crate::ingest::{Origin, SourceDocument};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("document {0} has no text")]
    EmptyDocument(String),
    #[error("prompt for {doc_id} is {overflow} chars over the {limit}-char context")]
    Oversize {
        doc_id: String,
        overflow: usize,
        limit: usize,
    },
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: &'static str,
    pub origin: Origin,
    pub text: &'static str,
}

pub const TEMPLATES: [PromptTemplate; 2] = [
    PromptTemplate {
        id: "ehr-v1",
        origin: Origin::Ehr,
        text: include_str!("../../templates/ehr-v1.txt"),
    },
    PromptTemplate {
        id: "literature-v1",
        origin: Origin::Literature,
        text: include_str!("../../templates/literature-v1.txt"),
    },
];

impl PromptTemplate {
    pub fn by_id(id: &str) -> Result<Self, PromptError> {
        TEMPLATES
            .iter()
            .copied()
            .find(|t| t.id == id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn default_for(origin: Origin) -> Self {
        match origin {
            Origin::Ehr => TEMPLATES[0],
            Origin::Literature => TEMPLATES[1],
        }
    }
}

/// An in-context example: a source text and the object expected for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExample {
    pub input: String,
    pub output: serde_json::Value,
}

impl PromptExample {
    /// The bundled example pair for an origin.
    pub fn defaults(origin: Origin) -> Vec<PromptExample> {
        let text = match origin {
            Origin::Ehr => include_str!("../../templates/examples-ehr-v1.json"),
            Origin::Literature => include_str!("../../templates/examples-literature-v1.json"),
        };
        serde_json::from_str(text).expect("bundled examples are valid")
    }
}

/// The key list as a typed JSON skeleton.
pub fn render_keys(schema: &RecordSchema) -> String {
    let nested = |keys: &[&str]| {
        let inner: Vec<String> = keys.iter().map(|k| format!("    \"{k}\": String")).collect();
        format!("{{\n{}\n  }}", inner.join(",\n"))
    };
    let lines: Vec<String> = schema
        .keys
        .iter()
        .map(|&k| {
            let ty = match k {
                SAMPLE_SIZE_KEY => "Integer".to_string(),
                "biomarkers" => nested(&BIOMARKER_KEYS),
                "study treatment response" => nested(&RESPONSE_KEYS),
                _ => "String".to_string(),
            };
            format!("  \"{k}\": {ty}")
        })
        .collect();
    format!("{{\n{}\n}}", lines.join(",\n"))
}

fn render_examples(examples: &[PromptExample]) -> String {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        let n = i + 1;
        let output = serde_json::to_string_pretty(&ex.output).expect("JSON value serializes");
        out.push_str(&format!(
            "Example {n} document:\n<<<\n{}\n>>>\nExample {n} answer:\n{output}\n\n",
            ex.input
        ));
    }
    out
}

/// Substitutes `{{name}}` placeholders in one pass over the template, so
/// document text that happens to contain a placeholder is left alone.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = &after[..end];
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[start..start + 2 + end + 2]),
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn build_prompt(
    doc: &SourceDocument,
    template: &PromptTemplate,
    examples: &[PromptExample],
    max_context_chars: usize,
) -> Result<String, PromptError> {
    if doc.text.trim().is_empty() {
        return Err(PromptError::EmptyDocument(doc.doc_id.clone()));
    }
    let keys = render_keys(&RecordSchema::for_origin(template.origin));
    let examples = render_examples(examples);
    let prompt = fill(
        template.text,
        &[
            ("keys", &keys),
            ("examples", &examples),
            ("doc_id", &doc.doc_id),
            ("document", &doc.text),
        ],
    );
    let len = prompt.chars().count();
    if len > max_context_chars {
        return Err(PromptError::Oversize {
            doc_id: doc.doc_id.clone(),
            overflow: len - max_context_chars,
            limit: max_context_chars,
        });
    }
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::contract::RECORD_KEYS;
    use crate::ingest::{ingest_bytes, Media, PassthroughOcr};

    fn doc(text: &str, origin: Origin) -> SourceDocument {
        ingest_bytes(text.as_bytes(), Media::Text, origin, None, &PassthroughOcr, "t").unwrap()
    }

    #[test]
    fn ehr_prompt_lists_every_key() {
        let d = doc("77-year-old woman with uterine carcinosarcoma. CPS 41.", Origin::Ehr);
        let p = build_prompt(&d, &PromptTemplate::default_for(Origin::Ehr), &[], 100_000).unwrap();
        for k in RECORD_KEYS {
            assert!(p.contains(&format!("\"{k}\"")), "{k} missing");
        }
        for k in BIOMARKER_KEYS {
            assert!(p.contains(&format!("\"{k}\"")));
        }
        assert!(!p.contains("\"n\""));
        assert!(p.contains(&d.text));
        assert!(!p.contains("Example 1"));
    }

    #[test]
    fn literature_prompt_has_extra_keys_and_examples() {
        let d = doc("A case report.", Origin::Literature);
        let ex = PromptExample {
            input: "One patient, 60 years.".into(),
            output: serde_json::json!({"n": 1, "age": "60"}),
        };
        let t = PromptTemplate::by_id("literature-v1").unwrap();
        let p = build_prompt(&d, &t, std::slice::from_ref(&ex), 100_000).unwrap();
        assert!(p.contains("\"n\": Integer"));
        assert!(p.contains("\"main recommendation\": String"));
        assert!(p.contains("Example 1 document:\n<<<\nOne patient, 60 years."));
        assert_eq!(p, build_prompt(&d, &t, &[ex], 100_000).unwrap());
    }

    #[test]
    fn placeholders_in_documents_are_not_expanded() {
        let d = doc("literal {{keys}} here", Origin::Ehr);
        let p = build_prompt(&d, &PromptTemplate::default_for(Origin::Ehr), &[], 100_000).unwrap();
        assert!(p.contains("literal {{keys}} here"));
    }

    #[test]
    fn size_limits() {
        let big = "a".repeat(934_513);
        let d = doc(&big, Origin::Literature);
        let t = PromptTemplate::default_for(Origin::Literature);
        assert!(build_prompt(&d, &t, &[], 1_000_000).is_ok());
        match build_prompt(&d, &t, &[], 934_513) {
            Err(PromptError::Oversize { doc_id, overflow, .. }) => {
                assert_eq!(doc_id, d.doc_id);
                let full = build_prompt(&d, &t, &[], usize::MAX).unwrap().chars().count();
                assert_eq!(overflow, full - 934_513);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bundled_examples_follow_the_schema() {
        for origin in [Origin::Ehr, Origin::Literature] {
            let schema = RecordSchema::for_origin(origin);
            for ex in PromptExample::defaults(origin) {
                let obj = ex.output.as_object().unwrap();
                let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
                assert_eq!(keys, schema.keys);
            }
        }
    }

    #[test]
    fn unknown_template() {
        assert!(matches!(
            PromptTemplate::by_id("x"),
            Err(PromptError::UnknownTemplate(_))
        ));
    }
}
