//! Shared inputs for the pipeline benchmarks.

use std::path::{Path, PathBuf};

use oncotwin_core::store::read_twins_jsonl;
use oncotwin_core::DigitalTwin;

/// Path of a file in the core crate's fixture directory.
pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

/// The 21 reference twins.
pub fn fixture_twins() -> Vec<DigitalTwin> {
    read_twins_jsonl(&fixture("twins.jsonl")).expect("fixture twins are readable")
}

/// Raw survival strings as they appear in source tables.
pub const DURATIONS: &[&str] = &[
    "4",
    "9.9",
    ">13 (ongoing)",
    "2.1 (deceased)",
    "≥48",
    "n/a",
    "36+",
    "alive at 24 months",
    "not reported",
    "0.9",
];
