//! Isolated replay of normal transactions from their pre-state slices.
//!
//! Each transaction runs against a [`SliceSource`] built only from the
//! store's replay slice, so no other transaction is ever executed and any
//! read outside the slice surfaces as a state mismatch.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::evm::{
    execute_transaction, AccountInfo, BlockEnv, Env, SliceMiss, StateSource, TxEnv, TxExecution, TxInput, WorldState,
};
use crate::instrument::{Registry, Scratch};
use crate::primitives::{Address, Bytes, Word, B256};
use crate::records::{NormalTxRecord, StateDiffRecord, TxStatus};
use crate::store::{ReplaySlice, Store};

pub const DEFAULT_GROUP_LIMIT: usize = 10_000;

/// Committed state made only of one transaction's slice.
pub struct SliceSource {
    accounts: BTreeMap<Address, Result<AccountInfo, SliceMiss>>,
    storage: BTreeMap<(Address, Word), Word>,
}

impl SliceSource {
    pub fn new(slice: &ReplaySlice) -> Self {
        let mut accounts = BTreeMap::new();
        let mut storage = BTreeMap::new();
        for acc in &slice.accounts {
            let info = if !acc.exists() {
                Ok(AccountInfo::absent())
            } else if acc.code_size == 0 {
                Ok(AccountInfo {
                    balance: acc.balance,
                    nonce: acc.nonce,
                    code: Arc::from(Vec::new()),
                    code_hash: acc.code_hash,
                    exists: true,
                })
            } else {
                match slice.codes.get(&acc.address) {
                    Some(code) => Ok(AccountInfo {
                        balance: acc.balance,
                        nonce: acc.nonce,
                        code: Arc::from(code.0.clone()),
                        code_hash: acc.code_hash,
                        exists: true,
                    }),
                    None => Err(SliceMiss::Code(acc.address)),
                }
            };
            accounts.insert(acc.address, info);
            for e in &acc.storage {
                storage.insert((acc.address, e.key), e.value);
            }
        }
        SliceSource { accounts, storage }
    }
}

impl StateSource for SliceSource {
    fn account(&self, address: &Address) -> Result<AccountInfo, SliceMiss> {
        self.accounts
            .get(address)
            .cloned()
            .unwrap_or(Err(SliceMiss::Account(*address)))
    }

    fn storage(&self, address: &Address, key: &Word) -> Result<Word, SliceMiss> {
        self.storage
            .get(&(*address, *key))
            .copied()
            .ok_or(SliceMiss::Storage(*address, *key))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "Verdict", content = "Detail", rename_all = "kebab-case")]
pub enum Verdict {
    Ok,
    OutputMismatch(String),
    StateMismatch(String),
    GasMismatch { expected: u64, actual: u64 },
    CallbackError(String),
    /// The transaction could not be replayed at all.
    Error(String),
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct Counters {
    pub opcodes: u64,
    pub slice_loads: u64,
    /// Transactions executed other than the one requested.
    pub foreign_txns: u64,
    pub callbacks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct ReplayResult {
    pub hash: B256,
    pub success: bool,
    pub output: Bytes,
    pub gas_used: u64,
    pub state_diff: Vec<StateDiffRecord>,
    #[serde(flatten)]
    pub verdict: Verdict,
    pub counters: Counters,
}

impl ReplayResult {
    fn failed(hash: B256, verdict: Verdict) -> Self {
        ReplayResult {
            hash,
            success: false,
            output: Bytes::new(),
            gas_used: 0,
            state_diff: Vec::new(),
            verdict,
            counters: Counters::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayOptions {
    pub verify_gas: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayRequest {
    pub hashes: Vec<B256>,
    pub group_limit: usize,
    pub workers: usize,
    pub verify_gas: bool,
}

impl ReplayRequest {
    pub fn new(hashes: Vec<B256>) -> Self {
        ReplayRequest {
            hashes,
            group_limit: DEFAULT_GROUP_LIMIT,
            workers: 1,
            verify_gas: false,
        }
    }

    pub fn workers(mut self, n: usize) -> Self {
        self.workers = n;
        self
    }

    pub fn group_limit(mut self, n: usize) -> Self {
        self.group_limit = n;
        self
    }

    pub fn verify_gas(mut self, on: bool) -> Self {
        self.verify_gas = on;
        self
    }
}

/// Splits `hashes` into consecutive groups of at most `group_limit`.
///
/// # Panics
/// If `group_limit` is zero.
pub fn group_transactions(hashes: &[B256], group_limit: usize) -> Vec<&[B256]> {
    assert!(group_limit >= 1, "group limit must be at least 1");
    hashes.chunks(group_limit).collect()
}

pub fn block_env(slice: &ReplaySlice) -> Env {
    let h = &slice.header;
    Env {
        block: BlockEnv {
            number: h.number,
            timestamp: h.timestamp,
            coinbase: h.miner,
            difficulty: h.difficulty,
            gas_limit: h.gas_limit,
            ancestor_hashes: slice.ancestor_hashes.clone(),
        },
        tx: TxEnv {
            hash: slice.tx.hash,
            index: slice.tx.txn_index,
            origin: slice.tx.from_address,
            gas_price: slice.tx.gas_price,
        },
        schedule: Default::default(),
    }
}

pub fn tx_input(slice: &ReplaySlice) -> TxInput {
    let tx = &slice.tx;
    TxInput {
        from: tx.from_address,
        to: tx.to_address,
        value: tx.value,
        gas_limit: if tx.gas_limit > Word::from(u64::MAX) {
            u64::MAX
        } else {
            tx.gas_limit.as_u64()
        },
        gas_price: tx.gas_price,
        input: match (&slice.deploy_code, tx.is_creation()) {
            (Some(code), true) => code.0.clone(),
            _ => tx.input.0.clone(),
        },
    }
}

fn normalized(diff: &[StateDiffRecord]) -> Vec<StateDiffRecord> {
    let mut d: Vec<StateDiffRecord> = diff
        .iter()
        .cloned()
        .map(|mut r| {
            r.storage.sort();
            r
        })
        .collect();
    d.sort();
    d
}

/// Describes the first difference between two diffs, naming the account
/// and, for storage differences, the slot.
fn describe_diff(expected: &[StateDiffRecord], actual: &[StateDiffRecord]) -> String {
    let exp: BTreeMap<Address, &StateDiffRecord> = expected.iter().map(|r| (r.address, r)).collect();
    let act: BTreeMap<Address, &StateDiffRecord> = actual.iter().map(|r| (r.address, r)).collect();
    let addresses: std::collections::BTreeSet<Address> = exp.keys().chain(act.keys()).copied().collect();
    for a in addresses {
        match (exp.get(&a), act.get(&a)) {
            (Some(_), None) => return format!("account {a} expected in diff but unchanged"),
            (None, Some(_)) => return format!("account {a} changed unexpectedly"),
            (Some(e), Some(g)) => {
                let es: BTreeMap<Word, Word> = e.storage.iter().map(|s| (s.key, s.value)).collect();
                let gs: BTreeMap<Word, Word> = g.storage.iter().map(|s| (s.key, s.value)).collect();
                let keys: std::collections::BTreeSet<&Word> = es.keys().chain(gs.keys()).collect();
                for k in keys {
                    if es.get(k) != gs.get(k) {
                        return format!(
                            "slot {a}:{} expected {:?} got {:?}",
                            B256::from_word(*k),
                            es.get(k).map(|v| format!("{v:#x}")),
                            gs.get(k).map(|v| format!("{v:#x}"))
                        );
                    }
                }
                if e.balance != g.balance {
                    return format!("balance of {a} expected {:#x} got {:#x}", e.balance, g.balance);
                }
                if e.nonce != g.nonce {
                    return format!("nonce of {a} expected {} got {}", e.nonce, g.nonce);
                }
            }
            (None, None) => unreachable!(),
        }
    }
    "diffs differ".into()
}

/// Compares a replay against the recorded transaction. Output covers the
/// status flag as well as the returned bytes.
pub fn verify_state(result: &ReplayResult, record: &NormalTxRecord, verify_gas: bool) -> Verdict {
    let recorded_success = record.status == TxStatus::Success;
    if result.success != recorded_success {
        return Verdict::OutputMismatch(format!(
            "status {} but recorded {}",
            if result.success { "success" } else { "failure" },
            if recorded_success { "success" } else { "failure" }
        ));
    }
    let expected = normalized(&record.changed_state);
    let actual = normalized(&result.state_diff);
    if expected != actual {
        return Verdict::StateMismatch(describe_diff(&expected, &actual));
    }
    if result.output != record.output {
        return Verdict::OutputMismatch(format!("output {} but recorded {}", result.output, record.output));
    }
    if verify_gas {
        let expected = if record.gas_used > Word::from(u64::MAX) {
            u64::MAX
        } else {
            record.gas_used.as_u64()
        };
        if expected != result.gas_used {
            return Verdict::GasMismatch {
                expected,
                actual: result.gas_used,
            };
        }
    }
    Verdict::Ok
}

/// Replays one slice. `scratch` receives whatever the callbacks stored.
pub fn replay_slice(
    slice: &ReplaySlice,
    hooks: Option<&Registry>,
    scratch: &mut Scratch,
    opts: ReplayOptions,
) -> ReplayResult {
    let source = SliceSource::new(slice);
    let mut world = WorldState::new(&source);
    let env = block_env(slice);
    let input = tx_input(slice);
    let hash = slice.tx.hash;
    let exec: TxExecution = match execute_transaction(&mut world, &env, &input, hooks, scratch) {
        Ok(e) => e,
        Err(rejected) => return ReplayResult::failed(hash, Verdict::Error(format!("rejected: {rejected}"))),
    };
    let mut result = ReplayResult {
        hash,
        success: exec.success,
        output: exec.output,
        gas_used: exec.gas_used,
        state_diff: normalized(&world.changed_state()),
        verdict: Verdict::Ok,
        counters: Counters {
            opcodes: exec.opcodes,
            slice_loads: world.loads() as u64,
            foreign_txns: 0,
            callbacks: exec.callbacks_invoked,
        },
    };
    result.verdict = if let Some(miss) = world.misses().first() {
        Verdict::StateMismatch(miss.to_string())
    } else if let Some(err) = exec.callback_error {
        Verdict::CallbackError(err)
    } else {
        verify_state(&result, &slice.tx, opts.verify_gas)
    };
    result
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
}

pub fn replay_transaction(
    store: &Store,
    hash: &B256,
    hooks: Option<&Registry>,
    opts: ReplayOptions,
) -> Result<ReplayResult, ReplayError> {
    let slice = store.get_replay_slice(hash)?;
    Ok(replay_slice(&slice, hooks, &mut Scratch::default(), opts))
}

/// Replays every requested transaction, preserving request order. Per-hash
/// failures are reported in the result's verdict.
pub fn replay_batch(store: &Store, req: &ReplayRequest, hooks: Option<&Registry>) -> Vec<ReplayResult> {
    replay_batch_map(store, req, hooks, |_, _| ()).into_iter().map(|(r, ())| r).collect()
}

/// Like [`replay_batch`], additionally running `f` on each result together
/// with the scratch space its callbacks filled.
pub fn replay_batch_map<T, F>(store: &Store, req: &ReplayRequest, hooks: Option<&Registry>, f: F) -> Vec<(ReplayResult, T)>
where
    T: Send,
    F: Fn(&ReplayResult, &mut Scratch) -> T + Sync,
{
    let opts = ReplayOptions {
        verify_gas: req.verify_gas,
    };
    let one = |hash: &B256| -> (ReplayResult, T) {
        let mut scratch = Scratch::default();
        let result = match store.get_replay_slice(hash) {
            Ok(slice) => replay_slice(&slice, hooks, &mut scratch, opts),
            Err(e) => ReplayResult::failed(*hash, Verdict::Error(e.to_string())),
        };
        let extra = f(&result, &mut scratch);
        (result, extra)
    };
    let workers = req.workers.max(1);
    let mut out = Vec::with_capacity(req.hashes.len());
    for group in group_transactions(&req.hashes, req.group_limit.max(1)) {
        if workers == 1 || group.len() < 2 {
            out.extend(group.iter().map(one));
            continue;
        }
        let cluster = group.len().div_ceil(workers);
        let one = &one;
        let parts: Vec<Vec<(ReplayResult, T)>> = std::thread::scope(|s| {
            let handles: Vec<_> = group
                .chunks(cluster)
                .map(|c| s.spawn(move || c.iter().map(one).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("replay worker panicked"))
                .collect()
        });
        out.extend(parts.into_iter().flatten());
    }
    out
}

/// Total size of a transaction's pre-state slice: accounts plus storage slots.
pub fn slice_size(tx: &NormalTxRecord) -> u64 {
    tx.read_committed_state
        .iter()
        .map(|s| 1 + s.storage.len() as u64)
        .sum()
}
