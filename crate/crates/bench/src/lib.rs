//! Shared setup for the benchmarks.

use chainsleuth_core::fixtures;
use chainsleuth_core::store::Store;
use chainsleuth_core::B256;

/// A store holding the generated scenario `name`, with its labels.
pub fn scenario_store(name: &str) -> (Store, fixtures::Labels) {
    let s = fixtures::scenario(name).unwrap_or_else(|| panic!("no scenario named {name}"));
    let store = Store::from_records(s.records).expect("generated fixtures are valid");
    (store, s.labels)
}

pub fn all_hashes(store: &Store) -> Vec<B256> {
    store.transactions().map(|(_, t)| t.hash).collect()
}
