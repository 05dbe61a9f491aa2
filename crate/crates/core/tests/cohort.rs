mod common;

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use oncotwin_core::analytics::{summarize_with, vital_status, CensoringPolicy, VitalStatus};
use oncotwin_core::matcher::{cohort_funnel, evaluate_eligibility, whatif};
use oncotwin_core::model::{validate_twin, MarkerStatus, Qualitative};
use oncotwin_core::recommend::{coverage_letter, default_kb, recommend, ActionKind};
use oncotwin_core::{
    summarize, EligibilitySpec, Marker, RecommendContext, SimilarityCriterion, Source, WhatIfOverrides,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vitals(twins: &[oncotwin_core::DigitalTwin]) -> BTreeMap<VitalStatus, usize> {
    summarize(twins).vital_status_counts
}

#[test]
fn fixture_twins_are_admissible() {
    let twins = common::twins();
    assert_eq!(twins.len(), 21);
    for t in &twins {
        let r = validate_twin(t);
        assert!(r.is_admissible(), "{}: {:?}", t.id, r);
    }
    assert_eq!(common::by_source(&twins, Source::Institutional).len(), 7);
    assert_eq!(common::by_source(&twins, Source::Literature).len(), 14);
}

#[test]
fn literature_cohort_statistics() {
    let lit = common::by_source(&common::twins(), Source::Literature);
    let s = summarize(&lit);
    assert_eq!(s.median_pfs, Some(4.0));
    assert_eq!(s.median_os, Some(9.9));
    assert_eq!(s.os_range, Some([2.1, 48.0]));
    let v = vitals(&lit);
    assert_eq!(
        (
            v[&VitalStatus::Alive],
            v[&VitalStatus::Deceased],
            v[&VitalStatus::Unknown]
        ),
        (6, 7, 1)
    );
}

#[test]
fn institutional_cohort_statistics() {
    let inst = common::by_source(&common::twins(), Source::Institutional);
    let s = summarize(&inst);
    assert_eq!(s.median_cps, Some(75.0));
    assert_eq!(s.cps_range, Some([40.0, 95.0]));
    assert_eq!(vitals(&inst)[&VitalStatus::Deceased], 3);
    assert_eq!(s.line_range, Some([2.0, 4.0]));
    let deceased: Vec<String> = inst
        .iter()
        .filter(|t| vital_status(t) == VitalStatus::Deceased)
        .map(|t| t.id.clone())
        .collect();
    assert_eq!(deceased.len(), 3);
}

#[test]
fn excluding_censored_values_changes_the_summary() {
    let inst = common::by_source(&common::twins(), Source::Institutional);
    let bound = summarize_with(&inst, CensoringPolicy::ObservedBound);
    let strict = summarize_with(&inst, CensoringPolicy::ExcludeCensored);
    assert!(strict.pfs_known < bound.pfs_known);
    assert_eq!(bound.pfs_censored, strict.pfs_censored);
}

/// The reported institutional median PFS of 6 months is not reached by
/// either censoring policy over {1, 3, 6, 18, >30, >45, >49}.
#[test]
fn institutional_median_pfs_under_each_policy() {
    let inst = common::by_source(&common::twins(), Source::Institutional);
    let bound = summarize_with(&inst, CensoringPolicy::ObservedBound);
    let strict = summarize_with(&inst, CensoringPolicy::ExcludeCensored);
    assert_eq!((bound.median_pfs, bound.pfs_range), (Some(18.0), Some([1.0, 49.0])));
    assert_eq!((strict.median_pfs, strict.pfs_range), (Some(4.5), Some([1.0, 18.0])));
    assert_ne!(bound.median_pfs, Some(6.0));
    assert_ne!(strict.median_pfs, Some(6.0));
}

#[test]
fn funnel_over_institutional_candidates() {
    let candidates = common::candidates();
    assert_eq!(candidates.len(), 9);
    let funnel = cohort_funnel(&candidates, &EligibilitySpec::default());
    let sizes: Vec<usize> = funnel.iter().map(|s| s.len()).collect();
    assert_eq!(sizes.first(), Some(&9));
    assert_eq!(sizes.last(), Some(&7));
    assert!(sizes.windows(2).all(|w| w[1] <= w[0]));
    let last = &funnel.last().unwrap().ids;
    let expected: Vec<String> = (1..=7).map(|i| format!("case-{i}")).collect();
    assert_eq!(last, &expected);
}

fn tighten(rng: &mut ChaCha8Rng, spec: &EligibilitySpec) -> EligibilitySpec {
    let mut t = spec.clone();
    t.min_cps += rng.random_range(0.0..40.0);
    t.max_tmb_exclusive = (t.max_tmb_exclusive - rng.random_range(0.0..10.0)).max(0.5);
    if !t.similarity.is_empty() && rng.random_bool(0.3) {
        let drop = *t.similarity.iter().next().unwrap();
        if t.similarity.len() > 1 {
            t.similarity.remove(&drop);
        }
    }
    if rng.random_bool(0.3) {
        t.require_ici_treatment = true;
    }
    t
}

fn random_spec(rng: &mut ChaCha8Rng) -> EligibilitySpec {
    let mut similarity = BTreeSet::new();
    for c in SimilarityCriterion::ALL {
        if rng.random_bool(0.7) {
            similarity.insert(c);
        }
    }
    if similarity.is_empty() {
        similarity.insert(SimilarityCriterion::ALL[0]);
    }
    EligibilitySpec {
        min_cps: rng.random_range(0.0..100.0),
        max_tmb_exclusive: rng.random_range(1.0..30.0),
        similarity,
        require_ici_treatment: rng.random_bool(0.5),
        ..EligibilitySpec::default()
    }
}

fn matched(twins: &[oncotwin_core::DigitalTwin], spec: &EligibilitySpec) -> BTreeSet<String> {
    twins
        .iter()
        .filter(|t| evaluate_eligibility(t, spec).passed)
        .map(|t| t.id.clone())
        .collect()
}

#[test]
fn tightening_thresholds_never_grows_the_matched_set() {
    let mut pool = common::candidates();
    pool.extend(common::twins());
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..200 {
        let loose = random_spec(&mut rng);
        let tight = tighten(&mut rng, &loose);
        let (a, b) = (matched(&pool, &loose), matched(&pool, &tight));
        assert!(b.is_subset(&a), "{loose:?} -> {tight:?}");
    }
}

#[test]
fn whatif_for_case_1() {
    let twins = common::twins();
    let inst = common::by_source(&twins, Source::Institutional);
    let case1 = common::twin("case-1");
    let spec = EligibilitySpec::default();
    let r = whatif(&case1, &WhatIfOverrides::default(), &spec, &spec, &inst);
    assert_eq!(r.analogs.len(), 6);
    assert!(!r.analogs.contains(&"case-1".to_string()));
    assert_eq!(r.summary.n, 6);

    let high_cps = EligibilitySpec {
        min_cps: 80.0,
        ..EligibilitySpec::default()
    };
    let r = whatif(&case1, &WhatIfOverrides::default(), &high_cps, &spec, &inst);
    assert_eq!(r.analogs, vec!["case-4", "case-5", "case-7"]);

    let dmmr = WhatIfOverrides {
        mmr: Some(oncotwin_core::MmrStatus::Deficient),
        ..Default::default()
    };
    let r = whatif(&case1, &dmmr, &spec, &spec, &inst);
    assert!(r.analogs.is_empty());
    assert!(r.reason.unwrap().starts_with("index twin not eligible"));
}

fn ctx() -> RecommendContext {
    RecommendContext {
        region: Some("Bavaria".into()),
        allow_off_label: true,
        as_of: NaiveDate::from_ymd_opt(2024, 6, 1),
        ..Default::default()
    }
}

#[test]
fn case_1_recommendations_match_the_knowledge_base() {
    let kb = default_kb();
    let case1 = common::twin("case-1");
    let recs = recommend(&case1, &kb, &ctx());
    let got: BTreeSet<(String, ActionKind)> = recs
        .iter()
        .map(|r| (r.entry.biomarker.clone(), r.entry.action_kind))
        .collect();
    let want: BTreeSet<(String, ActionKind)> = kb.iter().map(|e| (e.biomarker.clone(), e.action_kind)).collect();
    assert_eq!(recs.len(), 11);
    assert_eq!(got, want);

    let her2 = recs.iter().find(|r| r.entry.id == "her2-t-dxd").unwrap();
    assert!(
        her2.gating_notes.iter().any(|n| n.contains("new biopsy")),
        "{:?}",
        her2.gating_notes
    );
    let fra = recs.iter().find(|r| r.entry.biomarker == "FRα").unwrap();
    assert!(
        fra.gating_notes.iter().any(|n| n.contains("off-label")),
        "{:?}",
        fra.gating_notes
    );

    let levels: Vec<_> = recs.iter().map(|r| r.rank_key).collect();
    assert!(levels.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn her2_negative_override_drops_trastuzumab_deruxtecan() {
    let kb = default_kb();
    let case1 = common::twin("case-1");
    let neg = WhatIfOverrides {
        markers: vec![Marker::new("HER2", "negative").with_status(MarkerStatus::Negative)],
        ..Default::default()
    };
    let modified = neg.apply(&case1);
    let recs = recommend(&modified, &kb, &ctx());
    assert!(recs.iter().all(|r| r.entry.id != "her2-t-dxd"));
    assert!(recs.iter().any(|r| r.entry.id == "er-antihormonal"));
}

#[test]
fn coverage_letter_is_deterministic_and_cites_evidence() {
    let twins = common::twins();
    let inst = common::by_source(&twins, Source::Institutional);
    let case1 = common::twin("case-1");
    let spec = EligibilitySpec::default();
    let analogs = whatif(&case1, &WhatIfOverrides::default(), &spec, &spec, &inst).summary;
    let recs = recommend(&case1, &default_kb(), &ctx());
    let rec = recs
        .iter()
        .find(|r| r.entry.action_kind == ActionKind::Treatment)
        .unwrap();
    let date = NaiveDate::from_ymd_opt(2024, 6, 1).unwrap();
    let a = coverage_letter(&case1, rec, Some(&analogs), date);
    let b = coverage_letter(&case1, rec, Some(&analogs), date);
    assert_eq!(a, b);
    assert!(a.starts_with("---\ntwin: case-1\ndate: 2024-06-01\n"));
    assert!(a.contains("PD-L1: CPS 41"));
    assert!(a.contains(&rec.entry.reference));
    assert!(a.contains("Median PFS"));
}

#[test]
fn literature_pdl1_is_qualitative() {
    let lit = common::by_source(&common::twins(), Source::Literature);
    let positives = lit
        .iter()
        .filter(|t| t.biomarkers.pdl1.as_ref().and_then(|p| p.qualitative) == Some(Qualitative::Positive))
        .count();
    assert_eq!(positives, 3);
}
