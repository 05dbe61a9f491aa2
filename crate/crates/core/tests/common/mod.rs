#![allow(dead_code)]

use std::path::PathBuf;

use oncotwin_core::model::DigitalTwin;
use oncotwin_core::store::read_twins_jsonl;
use oncotwin_core::Source;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn twins() -> Vec<DigitalTwin> {
    read_twins_jsonl(&fixture("twins.jsonl")).expect("twins fixture")
}

pub fn candidates() -> Vec<DigitalTwin> {
    read_twins_jsonl(&fixture("institutional_candidates.jsonl")).expect("candidates fixture")
}

pub fn by_source(twins: &[DigitalTwin], source: Source) -> Vec<DigitalTwin> {
    twins.iter().filter(|t| t.source == source).cloned().collect()
}

pub fn twin(id: &str) -> DigitalTwin {
    twins().into_iter().find(|t| t.id == id).expect("fixture twin")
}

#[derive(Debug, serde::Deserialize)]
pub struct Table2Row {
    pub id: u32,
    pub reference: String,
    pub diagnosis: String,
    pub age: String,
    pub race: String,
    pub pdl1: String,
    pub tmb: String,
    pub mmr: String,
    pub biomarkers: String,
    pub line: String,
    pub treatment: String,
    pub response: String,
    pub pfs: String,
    pub os: String,
}

pub fn table2() -> Vec<Table2Row> {
    csv::Reader::from_path(fixture("table2_raw.csv"))
        .expect("table 2 fixture")
        .deserialize()
        .collect::<Result<_, _>>()
        .expect("table 2 rows")
}
