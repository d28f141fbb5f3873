//! Indexed, transaction-granular chain store.
//!
//! Records live in an append-only `records.jsonl` inside the store directory;
//! indices are rebuilt in memory on open. Ingestion is single-writer and the
//! store is read-only afterwards, so shared references are safe across
//! threads.

mod fixture;
mod query;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use fixture::{
    canonical_order, created_addresses, fixture_string, parse_fixture_text, read_fixture, validate, write_fixture,
    FixtureError, Located,
};
pub use query::{internal_value_to_contract, is_contract_in, to_has_code, FilterError, QueryFilter, Range, WordRange};

use crate::primitives::{Address, Bytes, Word, B256};
use crate::records::{AccountSlice, BlockRecord, CodeRecord, FixtureRecord, LifecycleRecord, LogRecord, NormalTxRecord};

pub const RECORDS_FILE: &str = "records.jsonl";

/// How far back BLOCKHASH can see.
pub const BLOCKHASH_WINDOW: u64 = 256;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error("transaction {0} not found")]
    NotFound(B256),
    #[error("account {0} not found")]
    UnknownAccount(Address),
    #[error("corrupt fixture: {0}")]
    Corrupt(String),
    #[error("bucket size must be at least 1")]
    ZeroBucket,
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub blocks: u64,
    pub txs: u64,
    /// Distinct accounts in the pre-state slices of the new transactions.
    pub accounts: u64,
    pub codes: u64,
    pub lifecycle: u64,
    /// Records already present and skipped.
    pub unchanged: u64,
}

/// A matching transaction's position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct TxLocator {
    pub number: u64,
    pub txn_index: u64,
    pub hash: B256,
}

/// Everything needed to replay one transaction in isolation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplaySlice {
    /// The block header; `transactions` is left empty.
    pub header: BlockRecord,
    pub tx: NormalTxRecord,
    /// Runtime code of every address in the transaction's GetCodeList.
    pub codes: BTreeMap<Address, Bytes>,
    /// Init code of the outer frame, for creation transactions.
    pub deploy_code: Option<Bytes>,
    pub accounts: Vec<AccountSlice>,
    /// Hashes of the stored ancestors within the BLOCKHASH window.
    pub ancestor_hashes: BTreeMap<u64, B256>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleBucket {
    pub start: u64,
    pub creations: u64,
    pub destructions: u64,
}

/// A decoded ERC20 `Transfer` event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTransfer {
    pub token: Address,
    pub from: Address,
    pub to: Address,
    #[serde(with = "crate::primitives::serde_quantity")]
    pub amount: Word,
}

/// keccak256("Transfer(address,address,uint256)").
pub const TRANSFER_TOPIC: B256 = B256([
    0xdd, 0xf2, 0x52, 0xad, 0x1b, 0xe2, 0xc8, 0x9b, 0x69, 0xc2, 0xb0, 0x68, 0xfc, 0x37, 0x8d, 0xaa, 0x95, 0x2b, 0xa7,
    0xf1, 0x63, 0xc4, 0xa1, 0x16, 0x28, 0xf5, 0x5a, 0x4d, 0xf5, 0x23, 0xb3, 0xef,
]);

pub fn decode_transfers(logs: &[LogRecord]) -> Vec<TokenTransfer> {
    logs.iter()
        .filter(|l| l.topics.len() == 3 && l.topics[0] == TRANSFER_TOPIC)
        .map(|l| {
            let mut data = [0u8; 32];
            let n = l.data.len().min(32);
            data[..n].copy_from_slice(&l.data[..n]);
            TokenTransfer {
                token: l.address,
                from: Address::from_word(l.topics[1].to_word()),
                to: Address::from_word(l.topics[2].to_word()),
                amount: Word::from_big_endian(&data),
            }
        })
        .collect()
}

type TxPos = (usize, usize);

#[derive(Debug, Default)]
pub struct Store {
    dir: Option<PathBuf>,
    blocks: Vec<BlockRecord>,
    codes: Vec<CodeRecord>,
    lifecycle: Vec<LifecycleRecord>,
    by_hash: HashMap<B256, TxPos>,
    by_from: HashMap<Address, Vec<TxPos>>,
    by_to: HashMap<Address, Vec<TxPos>>,
    code_by_address: HashMap<Address, Vec<usize>>,
    code_by_key: HashMap<(Address, u64, u64), usize>,
    lifecycle_by_tx: HashMap<B256, usize>,
}

impl Store {
    /// A store without a backing directory.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a store directory and loads its records.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let file = dir.join(RECORDS_FILE);
        let mut store = Store {
            dir: Some(dir),
            ..Default::default()
        };
        if file.exists() {
            let records = read_fixture(&file)?;
            store.apply(records.into_iter().map(|l| l.record).collect());
        }
        Ok(store)
    }

    pub fn from_records(records: Vec<FixtureRecord>) -> Result<Self, StoreError> {
        let mut store = Self::in_memory();
        store.ingest_records(records)?;
        Ok(store)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn ingest(&mut self, path: impl AsRef<Path>) -> Result<IngestSummary, StoreError> {
        let located = read_fixture(path.as_ref())?;
        self.ingest_located(located)
    }

    pub fn ingest_text(&mut self, text: &str) -> Result<IngestSummary, StoreError> {
        self.ingest_located(parse_fixture_text(text)?)
    }

    pub fn ingest_records(&mut self, records: Vec<FixtureRecord>) -> Result<IngestSummary, StoreError> {
        let located = records
            .into_iter()
            .enumerate()
            .map(|(i, record)| Located { line: i + 1, record })
            .collect();
        self.ingest_located(located)
    }

    fn ingest_located(&mut self, located: Vec<Located>) -> Result<IngestSummary, StoreError> {
        validate(&located, None)?;
        let mut summary = IngestSummary::default();
        let mut fresh = Vec::new();
        let mut next = self.next_block();
        let mut accounts = BTreeSet::new();
        let mut new_positions = HashMap::new();
        for Located { line, record } in located {
            let conflict = |message: String| FixtureError::Conflict { line, message };
            match &record {
                FixtureRecord::Block(b) => {
                    if let Some(stored) = self.block(b.number) {
                        if stored != b {
                            return Err(conflict(format!("block {} differs", b.number)).into());
                        }
                        summary.unchanged += 1;
                        continue;
                    }
                    if let Some(n) = next {
                        if b.number > n {
                            return Err(FixtureError::Gap { missing: n }.into());
                        }
                        if b.number < n {
                            return Err(conflict(format!("block {} precedes the stored range", b.number)).into());
                        }
                    }
                    next = Some(b.number + 1);
                    summary.blocks += 1;
                    summary.txs += b.transactions.len() as u64;
                    for tx in &b.transactions {
                        accounts.extend(tx.read_committed_state.iter().map(|s| s.address));
                        new_positions.insert(tx.hash, (b.number, tx.txn_index));
                        if self.by_hash.contains_key(&tx.hash) {
                            return Err(conflict(format!("transaction {} already stored", tx.hash)).into());
                        }
                    }
                }
                FixtureRecord::Code(c) => {
                    if let Some(&i) = self.code_by_key.get(&(c.address(), c.number, c.transaction.txn_index)) {
                        if &self.codes[i] != c {
                            return Err(conflict(format!("code record for {} differs", c.address())).into());
                        }
                        summary.unchanged += 1;
                        continue;
                    }
                    self.check_origin(line, c.number, c.transaction.txn_index, c.transaction.hash, &new_positions)?;
                    summary.codes += 1;
                }
                FixtureRecord::State(s) => {
                    if let Some(&i) = self.lifecycle_by_tx.get(&s.transaction.hash) {
                        if &self.lifecycle[i] != s {
                            return Err(conflict(format!("lifecycle record for {} differs", s.transaction.hash)).into());
                        }
                        summary.unchanged += 1;
                        continue;
                    }
                    self.check_origin(line, s.number, s.transaction.txn_index, s.transaction.hash, &new_positions)?;
                    summary.lifecycle += 1;
                }
            }
            fresh.push(record);
        }
        summary.accounts = accounts.len() as u64;
        if let Some(dir) = &self.dir {
            if !fresh.is_empty() {
                let path = dir.join(RECORDS_FILE);
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(io_err(&path))?;
                let mut w = io::BufWriter::new(file);
                write_fixture(&mut w, &fresh).map_err(io_err(&path))?;
                w.flush().map_err(io_err(&path))?;
            }
        }
        self.apply(fresh);
        Ok(summary)
    }

    /// Code and lifecycle records must name a transaction that is stored or
    /// arrives in the same batch.
    fn check_origin(
        &self,
        line: usize,
        number: u64,
        index: u64,
        hash: B256,
        pending: &HashMap<B256, (u64, u64)>,
    ) -> Result<(), StoreError> {
        let stored = self
            .by_hash
            .get(&hash)
            .map(|&(b, t)| (self.blocks[b].number, t as u64));
        match stored.or_else(|| pending.get(&hash).copied()) {
            Some(pos) if pos == (number, index) => Ok(()),
            Some((b, t)) => Err(FixtureError::Invariant {
                line,
                message: format!("record places {hash} at block {number} tx {index}, stored at block {b} tx {t}"),
            }
            .into()),
            None => Err(FixtureError::Invariant {
                line,
                message: format!("record points at unknown transaction {hash}"),
            }
            .into()),
        }
    }

    fn apply(&mut self, records: Vec<FixtureRecord>) {
        for record in records {
            match record {
                FixtureRecord::Block(b) => {
                    let bi = self.blocks.len();
                    for (ti, tx) in b.transactions.iter().enumerate() {
                        self.by_hash.insert(tx.hash, (bi, ti));
                        self.by_from.entry(tx.from_address).or_default().push((bi, ti));
                        if let Some(to) = tx.to_address {
                            self.by_to.entry(to).or_default().push((bi, ti));
                        }
                    }
                    self.blocks.push(b);
                }
                FixtureRecord::Code(c) => {
                    let i = self.codes.len();
                    self.code_by_key.insert((c.address(), c.number, c.transaction.txn_index), i);
                    self.code_by_address.entry(c.address()).or_default().push(i);
                    self.codes.push(c);
                }
                FixtureRecord::State(s) => {
                    self.lifecycle_by_tx.insert(s.transaction.hash, self.lifecycle.len());
                    self.lifecycle.push(s);
                }
            }
        }
    }

    fn next_block(&self) -> Option<u64> {
        self.blocks.last().map(|b| b.number + 1)
    }

    pub fn block(&self, number: u64) -> Option<&BlockRecord> {
        let first = self.blocks.first()?.number;
        let i = usize::try_from(number.checked_sub(first)?).ok()?;
        self.blocks.get(i)
    }

    pub fn blocks(&self) -> &[BlockRecord] {
        &self.blocks
    }

    pub fn block_range(&self) -> Option<(u64, u64)> {
        Some((self.blocks.first()?.number, self.blocks.last()?.number))
    }

    pub fn code_records(&self) -> &[CodeRecord] {
        &self.codes
    }

    pub fn lifecycle_records(&self) -> &[LifecycleRecord] {
        &self.lifecycle
    }

    pub fn lifecycle_of(&self, hash: &B256) -> Option<&LifecycleRecord> {
        self.lifecycle_by_tx.get(hash).map(|&i| &self.lifecycle[i])
    }

    pub fn tx_count(&self) -> usize {
        self.by_hash.len()
    }

    /// All transactions in chain order.
    pub fn transactions(&self) -> impl Iterator<Item = (&BlockRecord, &NormalTxRecord)> {
        self.blocks.iter().flat_map(|b| b.transactions.iter().map(move |t| (b, t)))
    }

    pub fn tx(&self, hash: &B256) -> Option<(&BlockRecord, &NormalTxRecord)> {
        self.by_hash.get(hash).map(|&(b, t)| self.at((b, t)))
    }

    fn at(&self, (b, t): TxPos) -> (&BlockRecord, &NormalTxRecord) {
        let block = &self.blocks[b];
        (block, &block.transactions[t])
    }

    pub fn locate(&self, hash: &B256) -> Option<TxLocator> {
        self.tx(hash).map(|(b, t)| TxLocator {
            number: b.number,
            txn_index: t.txn_index,
            hash: t.hash,
        })
    }

    /// The code record in force for `address` just before transaction
    /// `(number, index)`: the latest deployment strictly earlier in the chain.
    pub fn code_before(&self, address: &Address, number: u64, index: u64) -> Option<&CodeRecord> {
        self.code_by_address
            .get(address)?
            .iter()
            .map(|&i| &self.codes[i])
            .filter(|c| c.created_in() < (number, index))
            .max_by_key(|c| c.created_in())
    }

    pub fn code_created_at(&self, address: &Address, number: u64, index: u64) -> Option<&CodeRecord> {
        self.code_by_key.get(&(*address, number, index)).map(|&i| &self.codes[i])
    }

    pub fn query(&self, filter: &QueryFilter) -> Vec<TxLocator> {
        let positions: Box<dyn Iterator<Item = TxPos> + '_> = if let Some(h) = &filter.hash {
            Box::new(self.by_hash.get(h).copied().into_iter())
        } else if let Some(a) = &filter.from_address {
            Box::new(self.by_from.get(a).into_iter().flatten().copied())
        } else if let Some(a) = &filter.to_address {
            Box::new(self.by_to.get(a).into_iter().flatten().copied())
        } else {
            Box::new(
                self.blocks
                    .iter()
                    .enumerate()
                    .flat_map(|(bi, b)| (0..b.transactions.len()).map(move |ti| (bi, ti))),
            )
        };
        let mut out: Vec<TxLocator> = positions
            .map(|p| self.at(p))
            .filter(|(b, t)| filter.matches(b.number, t))
            .map(|(b, t)| TxLocator {
                number: b.number,
                txn_index: t.txn_index,
                hash: t.hash,
            })
            .collect();
        out.sort();
        out
    }

    pub fn get_replay_slice(&self, hash: &B256) -> Result<ReplaySlice, StoreError> {
        let (block, tx) = self.tx(hash).ok_or(StoreError::NotFound(*hash))?;
        let mut codes = BTreeMap::new();
        for a in &tx.get_code_list {
            let record = self
                .code_before(a, block.number, tx.txn_index)
                .ok_or_else(|| StoreError::Corrupt(format!("no code record for {a} before {}", tx.hash)))?;
            let contract = &record.transaction.contract;
            let expected = tx.slice_for(a).map(|s| s.code_hash);
            if expected != Some(contract.hash) {
                return Err(StoreError::Corrupt(format!(
                    "code hash of {a} in the slice of {} does not match its code record",
                    tx.hash
                )));
            }
            codes.insert(*a, contract.code.clone());
        }
        let deploy_code = match tx.con_address.filter(|_| tx.is_creation()) {
            Some(addr) => Some(
                self.code_created_at(&addr, block.number, tx.txn_index)
                    .map(|c| c.transaction.input.clone())
                    .unwrap_or_else(|| tx.input.clone()),
            ),
            None if tx.is_creation() => Some(tx.input.clone()),
            None => None,
        };
        let low = block.number.saturating_sub(BLOCKHASH_WINDOW);
        let ancestor_hashes = (low..block.number)
            .filter_map(|n| self.block(n).map(|b| (n, b.hash)))
            .collect();
        Ok(ReplaySlice {
            header: BlockRecord {
                transactions: Vec::new(),
                ..block.clone()
            },
            tx: tx.clone(),
            codes,
            deploy_code,
            accounts: tx.read_committed_state.clone(),
            ancestor_hashes,
        })
    }

    /// Creations and destructions per block bucket, covering every stored
    /// block. Buckets are aligned to multiples of `bucket_size`.
    pub fn lifecycle_counts(&self, bucket_size: u64) -> Result<Vec<LifecycleBucket>, StoreError> {
        if bucket_size == 0 {
            return Err(StoreError::ZeroBucket);
        }
        let (mut lo, mut hi) = match self.block_range() {
            Some(r) => r,
            None => return Ok(Vec::new()),
        };
        for r in &self.lifecycle {
            lo = lo.min(r.number);
            hi = hi.max(r.number);
        }
        let first = lo / bucket_size;
        let last = hi / bucket_size;
        let mut out: Vec<LifecycleBucket> = (first..=last)
            .map(|k| LifecycleBucket {
                start: k * bucket_size,
                creations: 0,
                destructions: 0,
            })
            .collect();
        for r in &self.lifecycle {
            let b = &mut out[(r.number / bucket_size - first) as usize];
            b.creations += r.transaction.create.len() as u64;
            b.destructions += r.transaction.suicide.len() as u64;
        }
        Ok(out)
    }

    pub fn erc20_transfers(&self, hash: &B256) -> Result<Vec<TokenTransfer>, StoreError> {
        let (_, tx) = self.tx(hash).ok_or(StoreError::NotFound(*hash))?;
        Ok(decode_transfers(&tx.logs))
    }

    /// All stored records in canonical order.
    pub fn export(&self) -> Vec<FixtureRecord> {
        let mut out: Vec<FixtureRecord> = self
            .blocks
            .iter()
            .cloned()
            .map(FixtureRecord::Block)
            .chain(self.codes.iter().cloned().map(FixtureRecord::Code))
            .chain(self.lifecycle.iter().cloned().map(FixtureRecord::State))
            .collect();
        canonical_order(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::keccak256;
    use crate::records::{LifecycleEvents, TxStatus};

    fn tx(i: u64, from: u64, to: Option<u64>) -> NormalTxRecord {
        NormalTxRecord {
            hash: B256::from_word(Word::from(1000 + i)),
            txn_index: 0,
            from_address: Address::from_low_u64(from),
            to_address: to.map(Address::from_low_u64),
            con_address: None,
            value: Word::zero(),
            nonce: i,
            gas_limit: Word::from(21000),
            gas_price: Word::one(),
            gas_used: Word::from(21000),
            cum_gas_used: Word::from(21000),
            input: Bytes::new(),
            call_function: Bytes::new(),
            status: TxStatus::Success,
            output: Bytes::new(),
            int_txn_count: 0,
            internal_txns: Vec::new(),
            logs: Vec::new(),
            read_committed_state: Vec::new(),
            changed_state: Vec::new(),
            get_code_list: Vec::new(),
        }
    }

    fn block(number: u64, txs: Vec<NormalTxRecord>) -> FixtureRecord {
        let txs: Vec<_> = txs
            .into_iter()
            .enumerate()
            .map(|(i, mut t)| {
                t.txn_index = i as u64;
                t
            })
            .collect();
        FixtureRecord::Block(BlockRecord {
            number,
            hash: B256::from_word(Word::from(number + 1)),
            parent_hash: B256::from_word(Word::from(number)),
            miner: Address::ZERO,
            difficulty: Word::one(),
            gas_limit: Word::from(10_000_000),
            gas_used: Word::zero(),
            timestamp: 1_500_000_000 + number,
            extra_data: Bytes::new(),
            txn_count: txs.len() as u64,
            transactions: txs,
        })
    }

    #[test]
    fn empty_fixture_summary() {
        let mut s = Store::in_memory();
        let sum = s.ingest_text("").unwrap();
        assert_eq!((sum.blocks, sum.txs), (0, 0));
    }

    #[test]
    fn counts_blocks_and_transactions() {
        let s_rec = vec![block(0, vec![tx(0, 1, Some(2)), tx(1, 1, Some(3))])];
        let mut s = Store::in_memory();
        let sum = s.ingest_records(s_rec.clone()).unwrap();
        assert_eq!((sum.blocks, sum.txs), (1, 2));
        let again = s.ingest_records(s_rec).unwrap();
        assert_eq!((again.blocks, again.txs, again.unchanged), (0, 0, 1));
        assert_eq!(s.tx_count(), 2);
    }

    #[test]
    fn gap_names_missing_block() {
        let mut s = Store::in_memory();
        let err = s.ingest_records(vec![block(0, vec![]), block(2, vec![])]).unwrap_err();
        assert!(matches!(err, StoreError::Fixture(FixtureError::Gap { missing: 1 })), "{err}");
        s.ingest_records(vec![block(0, vec![])]).unwrap();
        let err = s.ingest_records(vec![block(2, vec![])]).unwrap_err();
        assert!(matches!(err, StoreError::Fixture(FixtureError::Gap { missing: 1 })), "{err}");
    }

    #[test]
    fn conflicting_block_rejected() {
        let mut s = Store::from_records(vec![block(0, vec![tx(0, 1, Some(2))])]).unwrap();
        let err = s.ingest_records(vec![block(0, vec![tx(5, 1, Some(2))])]).unwrap_err();
        assert!(matches!(err, StoreError::Fixture(FixtureError::Conflict { .. })), "{err}");
    }

    #[test]
    fn lifecycle_buckets_include_empty_ones() {
        let lc = |number: u64, hash: B256, n: usize| {
            FixtureRecord::State(LifecycleRecord {
                number,
                timestamp: 0,
                transaction: LifecycleEvents {
                    hash,
                    txn_index: 0,
                    create: (0..n).map(|k| Address::from_low_u64(50 + k as u64)).collect(),
                    reset: vec![],
                    suicide: vec![],
                },
            })
        };
        let mut records: Vec<_> = (0..12).map(|n| block(n, vec![tx(n, 1, None)])).collect();
        let h1 = B256::from_word(Word::from(1001));
        let h11 = B256::from_word(Word::from(1011));
        records.push(lc(1, h1, 1));
        records.push(lc(11, h11, 2));
        let s = Store::from_records(records).unwrap();
        let buckets = s.lifecycle_counts(10).unwrap();
        let got: Vec<_> = buckets.iter().map(|b| (b.start, b.creations, b.destructions)).collect();
        assert_eq!(got, vec![(0, 1, 0), (10, 2, 0)]);
        let fine = s.lifecycle_counts(1).unwrap();
        assert_eq!(fine.len(), 12);
        assert_eq!(fine.iter().map(|b| b.creations).sum::<u64>(), 3);
        assert!(matches!(s.lifecycle_counts(0), Err(StoreError::ZeroBucket)));
    }

    #[test]
    fn transfer_topic_matches_keccak() {
        assert_eq!(TRANSFER_TOPIC, keccak256(b"Transfer(address,address,uint256)"));
    }

    #[test]
    fn open_reloads_appended_records() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path()).unwrap();
            s.ingest_records(vec![block(0, vec![tx(0, 1, Some(2))])]).unwrap();
            s.ingest_records(vec![block(1, vec![tx(1, 2, Some(1))])]).unwrap();
        }
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.tx_count(), 2);
        assert_eq!(s.block_range(), Some((0, 1)));
    }
}
