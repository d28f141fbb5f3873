mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use chainsleuth_core::detect::{
    candidates_bad_randomness, candidates_reentrancy, detect_bad_randomness, detect_reentrancy, ReplayConfig,
};
use chainsleuth_core::evm::Opcode;
use chainsleuth_core::fixtures;
use chainsleuth_core::instrument::{InstrumentationPoint, Registry, Scratch};
use chainsleuth_core::records::TxStatus;
use chainsleuth_core::replay::{
    group_transactions, replay_batch, replay_slice, replay_transaction, slice_size, ReplayOptions, ReplayRequest,
};
use chainsleuth_core::store::{QueryFilter, Range, WordRange};
use chainsleuth_core::store::Store;
use chainsleuth_core::{Word, B256};
use common::*;
use proptest::prelude::*;

fn all_hashes(store: &Store) -> Vec<B256> {
    store.transactions().map(|(_, t)| t.hash).collect()
}

#[test]
fn every_shipped_fixture_replays_ok_and_isolated() {
    let files = shipped_fixtures();
    assert_eq!(files.len(), fixtures::SCENARIOS.len());
    for path in files {
        let mut store = Store::in_memory();
        store.ingest(&path).unwrap();
        for (_, tx) in store.transactions() {
            let start = Instant::now();
            let r = replay_transaction(&store, &tx.hash, None, ReplayOptions { verify_gas: true }).unwrap();
            assert!(start.elapsed() < Duration::from_secs(10), "{} too slow", tx.hash);
            assert!(r.verdict.is_ok(), "{} {}: {:?}", path.display(), tx.hash, r.verdict);
            assert_eq!(r.counters.foreign_txns, 0);
            assert!(r.counters.slice_loads <= slice_size(tx), "{}", tx.hash);
        }
    }
}

#[test]
fn replay_is_order_independent_and_idempotent() {
    let store = load_fixture("combined");
    let hashes = all_hashes(&store);
    let forward = replay_batch(&store, &ReplayRequest::new(hashes.clone()), None);
    let mut reversed_hashes = hashes.clone();
    reversed_hashes.reverse();
    let mut backward = replay_batch(&store, &ReplayRequest::new(reversed_hashes), None);
    backward.reverse();
    assert_eq!(forward, backward);
    assert_eq!(forward, replay_batch(&store, &ReplayRequest::new(hashes), None));
}

#[test]
fn worker_count_does_not_change_results() {
    let store = load_fixture("bulk");
    let hashes: Vec<B256> = all_hashes(&store).into_iter().take(1000).collect();
    assert_eq!(hashes.len(), 1000);
    let runs: Vec<String> = [1, 4, 8]
        .iter()
        .map(|w| {
            let req = ReplayRequest::new(hashes.clone()).workers(*w).group_limit(300);
            serde_json::to_string(&replay_batch(&store, &req, None)).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn callbacks_fire_only_where_registered() {
    let s = fixtures::scenario("stress").unwrap();
    let store = load_fixture("stress");
    let slice = store.get_replay_slice(&s.labels.one("loop")).unwrap();
    let reg = Registry::new().on(InstrumentationPoint::Before(Opcode::CALL), |_| Ok(()));
    let calls = replay_slice(&slice, Some(&reg), &mut Scratch::default(), ReplayOptions::default());
    assert!(calls.verdict.is_ok());
    assert!(calls.counters.opcodes >= 1000, "{}", calls.counters.opcodes);
    assert_eq!(calls.counters.callbacks, 3);

    let bare = replay_slice(&slice, None, &mut Scratch::default(), ReplayOptions::default());
    let empty = replay_slice(&slice, Some(&Registry::new()), &mut Scratch::default(), ReplayOptions::default());
    assert_eq!(serde_json::to_vec(&bare).unwrap(), serde_json::to_vec(&empty).unwrap());
    assert_eq!(bare.counters.callbacks, 0);
}

#[test]
fn default_grouping_of_a_large_batch() {
    let hashes: Vec<B256> = (0..25_000u64).map(|i| B256::from_word(Word::from(i))).collect();
    let sizes: Vec<usize> = group_transactions(&hashes, ReplayConfig::default().group_limit)
        .iter()
        .map(|g| g.len())
        .collect();
    assert_eq!(sizes, vec![10_000, 10_000, 5_000]);
}

proptest! {
    #[test]
    fn grouping_partitions_in_order(n in 0usize..2000, limit in 1usize..500) {
        let hashes: Vec<B256> = (0..n as u64).map(|i| B256::from_word(Word::from(i))).collect();
        let groups = group_transactions(&hashes, limit);
        prop_assert!(groups.iter().all(|g| !g.is_empty() && g.len() <= limit));
        prop_assert!(groups.iter().rev().skip(1).all(|g| g.len() == limit));
        let flat: Vec<B256> = groups.concat();
        prop_assert_eq!(flat, hashes);
    }
}

#[test]
fn candidates_match_brute_force_scan() {
    let store = load_fixture("combined");
    let scan = |pred: fn(&chainsleuth_core::records::NormalTxRecord) -> bool| -> Vec<B256> {
        store.transactions().filter(|(_, t)| pred(t)).map(|(_, t)| t.hash).collect()
    };
    let reentrancy: Vec<B256> = candidates_reentrancy(&store).into_iter().map(|l| l.hash).collect();
    let randomness: Vec<B256> = candidates_bad_randomness(&store).into_iter().map(|l| l.hash).collect();
    assert_eq!(reentrancy, scan(reentrancy_candidate_oracle));
    assert_eq!(randomness, scan(randomness_candidate_oracle));
    assert!(!reentrancy.is_empty() && !randomness.is_empty());

    let cfg = ReplayConfig::default();
    let confirmed: BTreeSet<B256> = detect_reentrancy(&store, cfg).iter().filter_map(|f| f.txn).collect();
    assert!(confirmed.iter().all(|h| reentrancy.contains(h)));
    let confirmed: BTreeSet<B256> = detect_bad_randomness(&store, cfg).iter().filter_map(|f| f.txn).collect();
    assert!(confirmed.iter().all(|h| randomness.contains(h)));
}

/// Filters built from values present in the corpus, so they select something.
fn filter_strategy(pool: Vec<(u64, chainsleuth_core::records::NormalTxRecord)>) -> impl Strategy<Value = QueryFilter> {
    let n = pool.len();
    (
        0..n,
        0u8..8,
        proptest::option::of(0u64..4),
        proptest::option::of(any::<bool>()),
        proptest::option::of(any::<bool>()),
        proptest::option::of(any::<bool>()),
    )
        .prop_map(move |(i, which, ints, code, to_contract, status)| {
            let (number, tx) = &pool[i];
            let mut f = QueryFilter::default();
            match which {
                0 => f.hash = Some(tx.hash),
                1 => f.from_address = Some(tx.from_address),
                2 => f.to_address = tx.to_address,
                3 => {
                    f.value = Some(WordRange {
                        gte: Some(tx.value),
                        ..Default::default()
                    })
                }
                4 => {
                    f.number = Some(Range {
                        gt: Some(number.saturating_sub(3)),
                        lte: Some(*number),
                        ..Default::default()
                    })
                }
                5 => f.call_function = Some(tx.call_function.clone()),
                _ => {}
            }
            if let Some(k) = ints {
                f.int_txn_count = Some(Range {
                    gte: Some(k),
                    ..Default::default()
                });
            }
            f.to_has_code = code;
            f.internal_value_to_contract = to_contract;
            f.status = status.map(|s| if s { TxStatus::Success } else { TxStatus::Failure });
            f
        })
}

fn filter_oracle(f: &QueryFilter, number: u64, tx: &chainsleuth_core::records::NormalTxRecord) -> bool {
    let to_code = tx
        .to_address
        .is_some_and(|to| tx.read_committed_state.iter().any(|s| s.address == to && s.code_size > 0));
    let range_u64 = |r: &Range<u64>, v: u64| {
        r.gt.is_none_or(|b| v > b)
            && r.gte.is_none_or(|b| v >= b)
            && r.lt.is_none_or(|b| v < b)
            && r.lte.is_none_or(|b| v <= b)
    };
    f.hash.is_none_or(|h| h == tx.hash)
        && f.from_address.is_none_or(|a| a == tx.from_address)
        && f.to_address.is_none_or(|a| Some(a) == tx.to_address)
        && f.value.as_ref().is_none_or(|r| {
            r.gt.is_none_or(|b| tx.value > b)
                && r.gte.is_none_or(|b| tx.value >= b)
                && r.lt.is_none_or(|b| tx.value < b)
                && r.lte.is_none_or(|b| tx.value <= b)
        })
        && f.number.as_ref().is_none_or(|r| range_u64(r, number))
        && f.int_txn_count.as_ref().is_none_or(|r| range_u64(r, tx.int_txn_count))
        && f.to_has_code.is_none_or(|w| w == to_code)
        && f.internal_value_to_contract.is_none_or(|w| w == value_to_contract_oracle(tx))
        && f.min_internal_txns.is_none_or(|m| tx.int_txn_count >= m)
        && f.call_function.as_ref().is_none_or(|c| c == &tx.call_function)
        && f.status.is_none_or(|s| s == tx.status)
}

#[test]
fn query_matches_scan() {
    let store = load_fixture("combined");
    let pool: Vec<_> = store.transactions().map(|(b, t)| (b.number, t.clone())).collect();
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(300));
    runner
        .run(&filter_strategy(pool.clone()), |f| {
            let got: Vec<B256> = store.query(&f).into_iter().map(|l| l.hash).collect();
            let want: Vec<B256> = pool
                .iter()
                .filter(|(n, t)| filter_oracle(&f, *n, t))
                .map(|(_, t)| t.hash)
                .collect();
            prop_assert_eq!(got, want, "{}", serde_json::to_string(&f).unwrap());
            Ok(())
        })
        .unwrap();
}
