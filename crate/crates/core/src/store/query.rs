//! Predicate language for store queries.
//!
//! ```text
//! expr   := term ("OR" term)*
//! term   := factor ("AND" factor)*
//! factor := "(" expr ")" | field op value
//! op     := == | = | != | >= | ≥ | <= | ≤ | > | < | ~
//! ```
//!
//! Keywords are case-insensitive, values may be quoted. A twin lacking the
//! field's value never satisfies the comparison.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DigitalTwin;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("field `{field}` expects a number, got `{value}`")]
    NotANumber { field: String, value: String },
    #[error("operator `{op}` does not apply to field `{field}`")]
    BadOperator { field: String, op: String },
    #[error("syntax error at token {pos}: {message}")]
    Syntax { pos: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Eq,
    Ne,
    Ge,
    Le,
    Gt,
    Lt,
    Contains,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Num,
    Text,
    Set,
    Bool,
}

/// Queryable fields and their value kinds.
pub const FIELDS: &[(&str, &str)] = &[
    ("id", "text"),
    ("source", "text"),
    ("source_ref", "text"),
    ("n", "number"),
    ("age", "number"),
    ("gender", "text"),
    ("race", "text"),
    ("diagnosis", "text"),
    ("cps", "number"),
    ("tps", "number"),
    ("ic", "number"),
    ("pdl1", "text"),
    ("tmb", "number"),
    ("tmb_class", "text"),
    ("mmr", "text"),
    ("msi_fraction", "number"),
    ("marker", "set"),
    ("similarity", "set"),
    ("study_treatment", "text"),
    ("treatment_line", "number"),
    ("response", "text"),
    ("pfs", "number"),
    ("os", "number"),
    ("pfs_censored", "bool"),
    ("os_censored", "bool"),
    ("ici", "bool"),
    ("adjudication", "text"),
];

fn kind_of(field: &str) -> Option<Kind> {
    FIELDS.iter().find(|(f, _)| *f == field).map(|(_, k)| match *k {
        "number" => Kind::Num,
        "set" => Kind::Set,
        "bool" => Kind::Bool,
        _ => Kind::Text,
    })
}

fn canonical_field(name: &str) -> String {
    let lower = name.to_lowercase().replace(['-', ' '], "_");
    match lower.as_str() {
        "pd_l1" => "pdl1".into(),
        "line" => "treatment_line".into(),
        "sample_size" => "n".into(),
        "study_response" => "response".into(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Num(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    field: String,
    op: Op,
    value: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    True,
    Cmp(Comparison),
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
}

fn json_enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn num_field(t: &DigitalTwin, field: &str) -> Option<f64> {
    let b = &t.biomarkers;
    match field {
        "n" => t.sample_size.map(f64::from),
        "age" => t.age.low.map(f64::from),
        "cps" => b.cps(),
        "tps" => b.pdl1.as_ref().and_then(|p| p.tps),
        "ic" => b.pdl1.as_ref().and_then(|p| p.ic),
        "tmb" => b.tmb,
        "msi_fraction" => b.msi_fraction,
        "treatment_line" => t.treatment_line.map(f64::from),
        "pfs" => t.pfs.months,
        "os" => t.os.months,
        _ => None,
    }
}

fn text_field(t: &DigitalTwin, field: &str) -> Option<String> {
    let b = &t.biomarkers;
    match field {
        "id" => Some(t.id.clone()),
        "source" => Some(t.source.to_string()),
        "source_ref" => Some(t.source_ref.clone()),
        "gender" => t.gender.clone(),
        "race" => t.race.clone(),
        "diagnosis" => (!t.diagnosis.is_empty()).then(|| t.diagnosis.clone()),
        "pdl1" => b.pdl1.as_ref().and_then(|p| p.qualitative).map(|q| json_enum_name(&q)),
        "tmb_class" => b.tmb_class.map(|c| c.to_string()),
        "mmr" => b.mmr.map(|m| m.to_string()),
        "study_treatment" => (!t.study_treatment.is_empty()).then(|| t.study_treatment.clone()),
        "response" => t.study_response.best().map(|c| c.code().to_string()),
        "adjudication" => Some(json_enum_name(&t.adjudication)),
        _ => None,
    }
}

fn set_field(t: &DigitalTwin, field: &str) -> Vec<String> {
    match field {
        "similarity" => t.similarity.iter().map(|c| c.short_name().to_string()).collect(),
        "marker" => t.biomarkers.others.iter().map(|m| m.name.clone()).collect(),
        _ => Vec::new(),
    }
}

fn bool_field(t: &DigitalTwin, field: &str) -> Option<bool> {
    match field {
        "pfs_censored" => (!t.pfs.is_absent()).then_some(t.pfs.censored),
        "os_censored" => (!t.os.is_absent()).then_some(t.os.censored),
        "ici" => (!t.study_treatment.is_empty()).then(|| t.received_ici()),
        _ => None,
    }
}

fn cmp_text(actual: &str, op: Op, expected: &str) -> bool {
    let a = actual.to_lowercase();
    let e = expected.to_lowercase();
    match op {
        Op::Eq => a == e,
        Op::Ne => a != e,
        Op::Contains => a.contains(&e),
        Op::Ge => a >= e,
        Op::Le => a <= e,
        Op::Gt => a > e,
        Op::Lt => a < e,
    }
}

impl Comparison {
    fn matches(&self, t: &DigitalTwin) -> bool {
        let field = self.field.as_str();
        match (kind_of(field).expect("validated at parse time"), &self.value) {
            (Kind::Num, Value::Num(v)) => {
                let Some(x) = num_field(t, field) else { return false };
                match self.op {
                    Op::Eq => x == *v,
                    Op::Ne => x != *v,
                    Op::Ge => x >= *v,
                    Op::Le => x <= *v,
                    Op::Gt => x > *v,
                    Op::Lt => x < *v,
                    Op::Contains => false,
                }
            }
            (Kind::Text, Value::Text(v)) => text_field(t, field).is_some_and(|x| cmp_text(&x, self.op, v)),
            (Kind::Set, Value::Text(v)) => {
                let items = set_field(t, field);
                let hit = |op| items.iter().any(|x| cmp_text(x, op, v));
                match self.op {
                    Op::Ne => !items.is_empty() && !hit(Op::Eq),
                    op => hit(op),
                }
            }
            (Kind::Bool, Value::Text(v)) => {
                let Some(x) = bool_field(t, field) else { return false };
                let want = v.eq_ignore_ascii_case("true");
                match self.op {
                    Op::Eq => x == want,
                    Op::Ne => x != want,
                    _ => false,
                }
            }
            _ => false,
        }
    }
}

impl Predicate {
    pub fn parse(src: &str) -> Result<Predicate, QueryError> {
        let tokens = tokenize(src)?;
        if tokens.is_empty() {
            return Ok(Predicate::True);
        }
        let mut p = Parser { tokens, pos: 0 };
        let expr = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(expr)
    }

    pub fn matches(&self, t: &DigitalTwin) -> bool {
        match self {
            Predicate::True => true,
            Predicate::Cmp(c) => c.matches(t),
            Predicate::And(ps) => ps.iter().all(|p| p.matches(t)),
            Predicate::Or(ps) => ps.iter().any(|p| p.matches(t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Op(Op, String),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Tok>, QueryError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        let two = |op: Op, s: &str| (Tok::Op(op, s.to_string()), 2);
        let one = |op: Op, s: &str| (Tok::Op(op, s.to_string()), 1);
        let op = match (c, next) {
            ('=', Some('=')) => Some(two(Op::Eq, "==")),
            ('!', Some('=')) => Some(two(Op::Ne, "!=")),
            ('>', Some('=')) => Some(two(Op::Ge, ">=")),
            ('<', Some('=')) => Some(two(Op::Le, "<=")),
            ('=', _) => Some(one(Op::Eq, "=")),
            ('≥', _) => Some(one(Op::Ge, "≥")),
            ('≤', _) => Some(one(Op::Le, "≤")),
            ('>', _) => Some(one(Op::Gt, ">")),
            ('<', _) => Some(one(Op::Lt, "<")),
            ('~', _) => Some(one(Op::Contains, "~")),
            _ => None,
        };
        if let Some((tok, len)) = op {
            out.push(tok);
            i += len;
            continue;
        }
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '"' | '\'' => {
                let end = chars[i + 1..].iter().position(|&x| x == c).ok_or(QueryError::Syntax {
                    pos: out.len(),
                    message: "unterminated quote".into(),
                })?;
                out.push(Tok::Quoted(chars[i + 1..i + 1 + end].iter().collect()));
                i += end + 2;
            }
            _ => {
                let start = i;
                while i < chars.len() && !chars[i].is_whitespace() && !"()=!<>~≥≤\"'".contains(chars[i]) {
                    i += 1;
                }
                out.push(Tok::Word(chars[start..i].iter().collect()));
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn err(&self, message: &str) -> QueryError {
        QueryError::Syntax {
            pos: self.pos,
            message: message.into(),
        }
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if let Some(Tok::Word(w)) = self.tokens.get(self.pos) {
            if w.eq_ignore_ascii_case(kw) {
                self.pos += 1;
                return true;
            }
        }
        false
    }

    fn expr(&mut self) -> Result<Predicate, QueryError> {
        let mut terms = vec![self.term()?];
        while self.keyword("or") {
            terms.push(self.term()?);
        }
        Ok(if terms.len() == 1 {
            terms.pop().unwrap()
        } else {
            Predicate::Or(terms)
        })
    }

    fn term(&mut self) -> Result<Predicate, QueryError> {
        let mut factors = vec![self.factor()?];
        while self.keyword("and") {
            factors.push(self.factor()?);
        }
        Ok(if factors.len() == 1 {
            factors.pop().unwrap()
        } else {
            Predicate::And(factors)
        })
    }

    fn factor(&mut self) -> Result<Predicate, QueryError> {
        if self.tokens.get(self.pos) == Some(&Tok::LParen) {
            self.pos += 1;
            let inner = self.expr()?;
            if self.tokens.get(self.pos) != Some(&Tok::RParen) {
                return Err(self.err("expected `)`"));
            }
            self.pos += 1;
            return Ok(inner);
        }
        let field = match self.tokens.get(self.pos) {
            Some(Tok::Word(w)) => canonical_field(w),
            _ => return Err(self.err("expected a field name")),
        };
        let kind = kind_of(&field).ok_or_else(|| QueryError::UnknownField(field.clone()))?;
        self.pos += 1;
        let (op, op_text) = match self.tokens.get(self.pos) {
            Some(Tok::Op(op, s)) => (*op, s.clone()),
            _ => return Err(self.err("expected a comparison operator")),
        };
        self.pos += 1;
        let raw = match self.tokens.get(self.pos) {
            Some(Tok::Word(w)) | Some(Tok::Quoted(w)) => w.clone(),
            _ => return Err(self.err("expected a value")),
        };
        self.pos += 1;
        let bad_op = || QueryError::BadOperator {
            field: field.clone(),
            op: op_text.clone(),
        };
        let value = match kind {
            Kind::Num => {
                if op == Op::Contains {
                    return Err(bad_op());
                }
                Value::Num(raw.replace(',', ".").parse().map_err(|_| QueryError::NotANumber {
                    field: field.clone(),
                    value: raw.clone(),
                })?)
            }
            Kind::Bool if !matches!(op, Op::Eq | Op::Ne) => return Err(bad_op()),
            _ => Value::Text(raw),
        };
        Ok(Predicate::Cmp(Comparison { field, op, value }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MmrStatus, PdL1Score, Source};

    fn t(id: &str, source: Source, cps: Option<f64>, mmr: Option<MmrStatus>) -> DigitalTwin {
        let mut t = DigitalTwin::new(id, source, "x");
        t.biomarkers.pdl1 = cps.map(|c| PdL1Score {
            cps: Some(c),
            ..Default::default()
        });
        t.biomarkers.mmr = mmr;
        t
    }

    #[test]
    fn comparisons() {
        let a = t("a", Source::Institutional, Some(41.0), Some(MmrStatus::Proficient));
        let b = t("b", Source::Literature, None, Some(MmrStatus::Proficient));
        let p = Predicate::parse("cps >= 40").unwrap();
        assert!(p.matches(&a) && !p.matches(&b));
        let p = Predicate::parse("cps ≥ 40").unwrap();
        assert!(p.matches(&a));
        let p = Predicate::parse("source == literature AND mmr == pMMR").unwrap();
        assert!(!p.matches(&a) && p.matches(&b));
        let p = Predicate::parse("source == literature or cps > 100").unwrap();
        assert!(p.matches(&b) && !p.matches(&a));
        assert!(Predicate::parse("").unwrap().matches(&a));
    }

    #[test]
    fn and_binds_tighter_than_or() {
        let a = t("a", Source::Institutional, Some(41.0), None);
        let p = Predicate::parse("id == zzz AND cps > 1 OR id == a").unwrap();
        assert!(p.matches(&a));
        let p = Predicate::parse("id == zzz AND (cps > 1 OR id == a)").unwrap();
        assert!(!p.matches(&a));
    }

    #[test]
    fn missing_values_never_match() {
        let b = t("b", Source::Literature, None, None);
        assert!(!Predicate::parse("cps != 5").unwrap().matches(&b));
        assert!(!Predicate::parse("mmr != dMMR").unwrap().matches(&b));
    }

    #[test]
    fn errors() {
        assert_eq!(
            Predicate::parse("colour == red"),
            Err(QueryError::UnknownField("colour".into()))
        );
        assert!(matches!(
            Predicate::parse("cps >= lots"),
            Err(QueryError::NotANumber { .. })
        ));
        assert!(matches!(
            Predicate::parse("cps ~ 4"),
            Err(QueryError::BadOperator { .. })
        ));
        assert!(matches!(Predicate::parse("cps >="), Err(QueryError::Syntax { .. })));
        assert!(matches!(Predicate::parse("(cps >= 1"), Err(QueryError::Syntax { .. })));
        assert!(matches!(
            Predicate::parse("diagnosis == \"open"),
            Err(QueryError::Syntax { .. })
        ));
    }

    #[test]
    fn quoted_values_and_contains() {
        let mut a = t("a", Source::Institutional, None, None);
        a.diagnosis = "Undifferentiated Sarcomatoid Carcinoma of the Pancreas".into();
        assert!(Predicate::parse("diagnosis ~ sarcomatoid").unwrap().matches(&a));
        assert!(
            Predicate::parse("diagnosis == 'undifferentiated sarcomatoid carcinoma of the pancreas'")
                .unwrap()
                .matches(&a)
        );
    }
}
