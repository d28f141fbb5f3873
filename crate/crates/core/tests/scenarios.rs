use chainsleuth_core::fixtures;
use chainsleuth_core::replay::{replay_batch, ReplayRequest};
use chainsleuth_core::store::Store;

#[test]
fn every_scenario_replays_cleanly() {
    for s in fixtures::all() {
        let store = Store::from_records(s.records.clone()).unwrap_or_else(|e| panic!("{}: {e}", s.name));
        let hashes: Vec<_> = store.transactions().map(|(_, t)| t.hash).collect();
        let results = replay_batch(&store, &ReplayRequest::new(hashes).verify_gas(true), None);
        for r in &results {
            assert!(r.verdict.is_ok(), "{}: {} -> {:?}", s.name, r.hash, r.verdict);
        }
        eprintln!("{}: {} txs", s.name, results.len());
    }
}

