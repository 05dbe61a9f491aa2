use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use oncotwin_bench::{fixture, fixture_twins, DURATIONS};
use oncotwin_core::extract::{load_corpus, run_job, Backend, ExtractionJob, LlmBackendSpec, PrivacyTier};
use oncotwin_core::ingest::PassthroughOcr;
use oncotwin_core::matcher::{cohort_funnel, whatif};
use oncotwin_core::parse::parse_duration;
use oncotwin_core::recommend::{default_kb, recommend};
use oncotwin_core::{summarize, EligibilitySpec, Origin, RecommendContext, TwinStore, WhatIfOverrides};

fn parsers(c: &mut Criterion) {
    c.bench_function("parse_duration", |b| {
        b.iter(|| {
            for s in DURATIONS {
                black_box(parse_duration(black_box(s)));
            }
        })
    });
}

fn matching(c: &mut Criterion) {
    let twins = fixture_twins();
    let spec = EligibilitySpec::default();
    c.bench_function("cohort_funnel", |b| b.iter(|| cohort_funnel(black_box(&twins), &spec)));
    let case1 = twins.iter().find(|t| t.id == "case-1").unwrap().clone();
    c.bench_function("whatif", |b| {
        b.iter(|| whatif(&case1, &WhatIfOverrides::default(), &spec, &spec, black_box(&twins)))
    });
    c.bench_function("summarize", |b| b.iter(|| summarize(black_box(&twins))));
    let kb = default_kb();
    let ctx = RecommendContext::default();
    c.bench_function("recommend", |b| b.iter(|| recommend(black_box(&case1), &kb, &ctx)));
}

fn store(c: &mut Criterion) {
    let twins = fixture_twins();
    c.bench_function("store_put_21", |b| {
        b.iter_batched(
            || tempfile::tempdir().unwrap(),
            |dir| {
                let store = TwinStore::open(dir.path()).unwrap();
                store.put_all(twins.clone()).unwrap();
            },
            BatchSize::PerIteration,
        )
    });
    let dir = tempfile::tempdir().unwrap();
    TwinStore::open(dir.path()).unwrap().put_all(twins.clone()).unwrap();
    c.bench_function("store_reopen", |b| {
        b.iter(|| TwinStore::open(dir.path()).unwrap().count())
    });
}

fn extraction(c: &mut Criterion) {
    let corpus = load_corpus(&fixture("mock_corpus/manifest.jsonl"), &PassthroughOcr).unwrap();
    let spec = LlmBackendSpec::mock(fixture("mock_corpus/replies"), PrivacyTier::PhiAllowed);
    let backend = Backend::from_spec(spec).unwrap();
    let job = ExtractionJob::over(&corpus, Origin::Ehr, 1);
    c.bench_function("run_job_mock", |b| {
        b.iter(|| run_job(&job, &backend, black_box(&corpus)).unwrap())
    });
}

criterion_group!(benches, parsers, matching, store, extraction);
criterion_main!(benches);
