mod common;

use std::collections::BTreeSet;
use std::path::Path;

use oncotwin_core::store::{read_snapshot, StoreOptions};
use oncotwin_core::{CensoredDuration, OutcomeUpdate, TwinStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds a store holding the 21 fixture twins plus a few outcome updates
/// and returns the bytes of its log.
fn populated(dir: &Path) -> Vec<u8> {
    let store = TwinStore::open_with(dir, StoreOptions { index_every: 5 }).unwrap();
    store.put_all(common::twins()).unwrap();
    for id in ["case-1", "case-2", "case-4"] {
        let update = OutcomeUpdate {
            pfs: Some(CensoredDuration {
                months: Some(60.0),
                censored: true,
                raw: ">60 (ongoing)".into(),
            }),
            ..Default::default()
        };
        store.record_outcome(id, &update).unwrap();
    }
    drop(store);
    std::fs::read(dir.join("twins.log")).unwrap()
}

/// Ids present in the complete lines of a log prefix.
fn expected_ids(prefix: &[u8]) -> (BTreeSet<String>, usize) {
    let end = prefix.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let ids = prefix[..end]
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| {
            serde_json::from_slice::<serde_json::Value>(l).unwrap()["id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    (ids, end)
}

fn copy_store(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for name in ["twins.log", "twins.idx", "audit.log"] {
        if from.join(name).exists() {
            std::fs::copy(from.join(name), to.join(name)).unwrap();
        }
    }
}

#[test]
fn truncated_logs_reopen_consistently() {
    let root = tempfile::tempdir().unwrap();
    let original = root.path().join("original");
    let log = populated(&original);
    assert_eq!(log.iter().filter(|&&b| b == b'\n').count(), 24);

    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for trial in 0..50 {
        let cut = rng.random_range(0..log.len());
        let dir = root.path().join(format!("cut-{trial}"));
        copy_store(&original, &dir);
        std::fs::write(dir.join("twins.log"), &log[..cut]).unwrap();
        let (ids, complete) = expected_ids(&log[..cut]);

        let snap = read_snapshot(&dir).unwrap();
        assert_eq!(snap.count(), ids.len(), "cut at {cut}");

        let store = TwinStore::open(&dir).unwrap();
        assert_eq!(store.count(), ids.len(), "cut at {cut}");
        let reopened: BTreeSet<String> = store.snapshot().all().iter().map(|t| t.id.clone()).collect();
        assert_eq!(reopened, ids);
        drop(store);
        assert_eq!(
            std::fs::metadata(dir.join("twins.log")).unwrap().len() as usize,
            complete,
            "torn tail kept"
        );

        // The discarded record can be written again after recovery.
        let store = TwinStore::open(&dir).unwrap();
        let extra = common::twin("case-21");
        store.put(extra).unwrap();
        assert!(store.get("case-21").is_ok());
    }
}
