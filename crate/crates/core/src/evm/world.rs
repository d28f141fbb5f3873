//! Account state seen by one normal transaction.
//!
//! [`WorldState`] caches every account and storage slot it loads from a
//! [`StateSource`], keeps a journal so failed frames can be rolled back, and
//! afterwards reports exactly what was read (the pre-state slice) and what
//! changed (the state diff). Self-destructions are queued and only applied
//! by [`WorldState::finalize`] at the end of the normal transaction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::primitives::{empty_code_hash, keccak256, Address, Bytes, Word, B256};
use crate::records::{AccountSlice, Destruction, LogRecord, StateDiffRecord, StorageEntry};

pub type Code = Arc<[u8]>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountInfo {
    pub balance: Word,
    pub nonce: u64,
    pub code: Code,
    /// Zero for accounts that do not exist.
    pub code_hash: B256,
    pub exists: bool,
}

impl AccountInfo {
    pub fn absent() -> Self {
        AccountInfo {
            balance: Word::zero(),
            nonce: 0,
            code: Arc::from(Vec::new()),
            code_hash: B256::ZERO,
            exists: false,
        }
    }

    pub fn new(balance: Word, nonce: u64, code: Vec<u8>) -> Self {
        let code_hash = keccak256(&code);
        AccountInfo {
            balance,
            nonce,
            code: Arc::from(code),
            code_hash,
            exists: true,
        }
    }
}

/// A read the backing state could not answer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SliceMiss {
    Account(Address),
    Storage(Address, Word),
    Code(Address),
}

impl fmt::Display for SliceMiss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SliceMiss::Account(a) => write!(f, "account {a} missing from slice"),
            SliceMiss::Storage(a, k) => write!(f, "slot {a}:{} missing from slice", B256::from_word(*k)),
            SliceMiss::Code(a) => write!(f, "code of {a} missing from slice"),
        }
    }
}

/// Committed state a transaction executes against.
pub trait StateSource: Sync {
    fn account(&self, address: &Address) -> Result<AccountInfo, SliceMiss>;
    fn storage(&self, address: &Address, key: &Word) -> Result<Word, SliceMiss>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemAccount {
    pub balance: Word,
    pub nonce: u64,
    pub code: Vec<u8>,
    pub storage: BTreeMap<Word, Word>,
}

/// A complete in-memory state: genesis allocations plus everything committed since.
#[derive(Debug, Clone, Default)]
pub struct InMemoryState {
    accounts: BTreeMap<Address, MemAccount>,
}

impl InMemoryState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, address: Address, account: MemAccount) {
        self.accounts.insert(address, account);
    }

    pub fn set_balance(&mut self, address: Address, balance: Word) {
        self.accounts.entry(address).or_default().balance = balance;
    }

    pub fn get(&self, address: &Address) -> Option<&MemAccount> {
        self.accounts.get(address)
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&Address, &MemAccount)> {
        self.accounts.iter()
    }

    pub fn remove(&mut self, address: &Address) {
        self.accounts.remove(address);
    }

    /// Writes the final state of a finished transaction back.
    pub fn commit(&mut self, world: &WorldState<'_>) {
        let updates: Vec<_> = world.final_accounts().collect();
        self.apply(updates);
    }

    /// Applies the output of [`WorldState::final_accounts`].
    pub fn apply(&mut self, updates: Vec<(Address, Option<FinalAccount>)>) {
        for (address, fin) in updates {
            match fin {
                None => {
                    self.accounts.remove(&address);
                }
                Some(fin) => {
                    let entry = self.accounts.entry(address).or_default();
                    entry.balance = fin.balance;
                    entry.nonce = fin.nonce;
                    entry.code = fin.code.to_vec();
                    if fin.fresh_storage {
                        entry.storage.clear();
                    }
                    for (k, v) in fin.storage {
                        if v.is_zero() {
                            entry.storage.remove(&k);
                        } else {
                            entry.storage.insert(k, v);
                        }
                    }
                }
            }
        }
    }
}

impl StateSource for InMemoryState {
    fn account(&self, address: &Address) -> Result<AccountInfo, SliceMiss> {
        Ok(match self.accounts.get(address) {
            Some(a) => AccountInfo::new(a.balance, a.nonce, a.code.clone()),
            None => AccountInfo::absent(),
        })
    }

    fn storage(&self, address: &Address, key: &Word) -> Result<Word, SliceMiss> {
        Ok(self
            .accounts
            .get(address)
            .and_then(|a| a.storage.get(key).copied())
            .unwrap_or_default())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    original: Word,
    current: Word,
    from_source: bool,
}

#[derive(Debug, Clone)]
struct CachedAccount {
    original: AccountInfo,
    balance: Word,
    nonce: u64,
    code: Code,
    code_hash: B256,
    exists: bool,
    fresh_storage: bool,
    destroyed: bool,
    storage: BTreeMap<Word, Slot>,
}

impl CachedAccount {
    fn from_info(info: AccountInfo) -> Self {
        CachedAccount {
            balance: info.balance,
            nonce: info.nonce,
            code: info.code.clone(),
            code_hash: info.code_hash,
            exists: info.exists,
            fresh_storage: false,
            destroyed: false,
            storage: BTreeMap::new(),
            original: info,
        }
    }
}

#[derive(Debug, Clone)]
enum JournalEntry {
    Balance(Address, Word),
    Nonce(Address, u64),
    Code(Address, Code, B256),
    Exists(Address, bool),
    FreshStorage(Address, bool),
    Storage(Address, Word, Word),
    Log,
    Destruction,
    Created,
}

/// A contract created during the transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CreatedContract {
    pub address: Address,
    pub init_code: Bytes,
    /// The address already held an account (balance only) before creation.
    pub reset: bool,
    /// Deployed code, once the constructor has returned.
    pub runtime: Option<Bytes>,
}

/// Final state of one account after [`WorldState::finalize`].
#[derive(Debug, Clone)]
pub struct FinalAccount {
    pub balance: Word,
    pub nonce: u64,
    pub code: Code,
    pub fresh_storage: bool,
    pub storage: Vec<(Word, Word)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsufficientBalance;

pub struct WorldState<'a> {
    source: &'a dyn StateSource,
    accounts: BTreeMap<Address, CachedAccount>,
    journal: Vec<JournalEntry>,
    logs: Vec<LogRecord>,
    pending_destructions: Vec<Destruction>,
    created: Vec<CreatedContract>,
    loads: usize,
    misses: Vec<SliceMiss>,
    finalized: bool,
}

impl<'a> WorldState<'a> {
    pub fn new(source: &'a dyn StateSource) -> Self {
        WorldState {
            source,
            accounts: BTreeMap::new(),
            journal: Vec::new(),
            logs: Vec::new(),
            pending_destructions: Vec::new(),
            created: Vec::new(),
            loads: 0,
            misses: Vec::new(),
            finalized: false,
        }
    }

    fn load(&mut self, address: &Address) -> &mut CachedAccount {
        if !self.accounts.contains_key(address) {
            let info = match self.source.account(address) {
                Ok(info) => {
                    self.loads += 1;
                    info
                }
                Err(miss) => {
                    self.misses.push(miss);
                    AccountInfo::absent()
                }
            };
            self.accounts.insert(*address, CachedAccount::from_info(info));
        }
        self.accounts.get_mut(address).expect("just inserted")
    }

    pub fn balance(&mut self, address: &Address) -> Word {
        self.load(address).balance
    }

    pub fn nonce(&mut self, address: &Address) -> u64 {
        self.load(address).nonce
    }

    pub fn code(&mut self, address: &Address) -> Code {
        self.load(address).code.clone()
    }

    /// EXTCODEHASH semantics: zero for absent accounts.
    pub fn code_hash(&mut self, address: &Address) -> B256 {
        let acc = self.load(address);
        if acc.exists {
            acc.code_hash
        } else {
            B256::ZERO
        }
    }

    pub fn exists(&mut self, address: &Address) -> bool {
        self.load(address).exists
    }

    pub fn set_balance(&mut self, address: &Address, balance: Word) {
        let acc = self.load(address);
        let prev = acc.balance;
        acc.balance = balance;
        self.journal.push(JournalEntry::Balance(*address, prev));
    }

    fn mark_exists(&mut self, address: &Address) {
        let acc = self.load(address);
        if !acc.exists {
            acc.exists = true;
            acc.code_hash = empty_code_hash();
            self.journal.push(JournalEntry::Exists(*address, false));
        }
    }

    /// Moves `value` Wei. A recipient that does not exist is created when
    /// the value is non-zero.
    pub fn transfer(&mut self, from: &Address, to: &Address, value: Word) -> Result<(), InsufficientBalance> {
        if value.is_zero() {
            return Ok(());
        }
        let from_balance = self.balance(from);
        if from_balance < value {
            return Err(InsufficientBalance);
        }
        self.set_balance(from, from_balance - value);
        self.mark_exists(to);
        let to_balance = self.balance(to);
        self.set_balance(to, to_balance.overflowing_add(value).0);
        Ok(())
    }

    /// Unjournaled debit used for transaction fees after execution.
    pub fn charge_fee(&mut self, address: &Address, fee: Word) {
        let acc = self.load(address);
        acc.balance = acc.balance.saturating_sub(fee);
    }

    pub fn increment_nonce(&mut self, address: &Address) {
        let acc = self.load(address);
        let prev = acc.nonce;
        acc.nonce = prev + 1;
        self.journal.push(JournalEntry::Nonce(*address, prev));
    }

    /// Prepares `address` for a new contract: nonce 1, empty storage.
    /// Returns whether an account already existed there.
    pub fn create_account(&mut self, address: &Address, init_code: &[u8]) -> bool {
        let acc = self.load(address);
        let reset = acc.exists;
        let prev_nonce = acc.nonce;
        let prev_fresh = acc.fresh_storage;
        acc.nonce = 1;
        acc.fresh_storage = true;
        self.journal.push(JournalEntry::Nonce(*address, prev_nonce));
        self.journal.push(JournalEntry::FreshStorage(*address, prev_fresh));
        self.mark_exists(address);
        self.created.push(CreatedContract {
            address: *address,
            init_code: Bytes(init_code.to_vec()),
            reset,
            runtime: None,
        });
        self.journal.push(JournalEntry::Created);
        reset
    }

    pub fn set_code(&mut self, address: &Address, code: Vec<u8>) {
        let hash = keccak256(&code);
        let runtime = code.clone();
        let acc = self.load(address);
        let prev = std::mem::replace(&mut acc.code, Arc::from(code));
        let prev_hash = std::mem::replace(&mut acc.code_hash, hash);
        self.journal.push(JournalEntry::Code(*address, prev, prev_hash));
        if let Some(c) = self.created.iter_mut().rev().find(|c| &c.address == address) {
            c.runtime = Some(Bytes(runtime));
        }
    }

    fn slot(&mut self, address: &Address, key: &Word) -> Word {
        let source = self.source;
        let acc = self.load(address);
        if let Some(slot) = acc.storage.get(key) {
            return slot.current;
        }
        if acc.fresh_storage || !acc.original.exists {
            acc.storage.insert(
                *key,
                Slot {
                    original: Word::zero(),
                    current: Word::zero(),
                    from_source: false,
                },
            );
            return Word::zero();
        }
        let (value, from_source) = match source.storage(address, key) {
            Ok(v) => (v, true),
            Err(miss) => {
                self.misses.push(miss);
                (Word::zero(), false)
            }
        };
        if from_source {
            self.loads += 1;
        }
        self.accounts.get_mut(address).expect("loaded").storage.insert(
            *key,
            Slot {
                original: value,
                current: value,
                from_source,
            },
        );
        value
    }

    pub fn sload(&mut self, address: &Address, key: &Word) -> Word {
        self.slot(address, key)
    }

    /// Writes a slot and returns its value before the write.
    pub fn sstore(&mut self, address: &Address, key: &Word, value: Word) -> Word {
        let prev = self.slot(address, key);
        let slot = self
            .accounts
            .get_mut(address)
            .and_then(|a| a.storage.get_mut(key))
            .expect("slot cached");
        slot.current = value;
        self.journal.push(JournalEntry::Storage(*address, *key, prev));
        prev
    }

    pub fn push_log(&mut self, log: LogRecord) {
        self.logs.push(log);
        self.journal.push(JournalEntry::Log);
    }

    /// Moves the victim's balance to the beneficiary right away (creating
    /// the beneficiary if needed) and queues the destruction.
    pub fn selfdestruct(&mut self, victim: &Address, beneficiary: &Address) -> Word {
        let value = self.balance(victim);
        self.mark_exists(beneficiary);
        if victim != beneficiary {
            self.set_balance(victim, Word::zero());
            let b = self.balance(beneficiary);
            self.set_balance(beneficiary, b.overflowing_add(value).0);
        }
        self.pending_destructions.push(Destruction {
            address: *victim,
            beneficiary: *beneficiary,
        });
        self.journal.push(JournalEntry::Destruction);
        value
    }

    pub fn checkpoint(&self) -> usize {
        self.journal.len()
    }

    pub fn revert_to(&mut self, checkpoint: usize) {
        while self.journal.len() > checkpoint {
            let entry = self.journal.pop().expect("non-empty");
            match entry {
                JournalEntry::Balance(a, prev) => self.cached(&a).balance = prev,
                JournalEntry::Nonce(a, prev) => self.cached(&a).nonce = prev,
                JournalEntry::Code(a, code, hash) => {
                    let acc = self.cached(&a);
                    acc.code = code;
                    acc.code_hash = hash;
                }
                JournalEntry::Exists(a, prev) => {
                    let acc = self.cached(&a);
                    acc.exists = prev;
                    if !prev {
                        acc.code_hash = B256::ZERO;
                    }
                }
                JournalEntry::FreshStorage(a, prev) => self.cached(&a).fresh_storage = prev,
                JournalEntry::Storage(a, k, prev) => {
                    if let Some(slot) = self.cached(&a).storage.get_mut(&k) {
                        slot.current = prev;
                    }
                }
                JournalEntry::Log => {
                    self.logs.pop();
                }
                JournalEntry::Destruction => {
                    self.pending_destructions.pop();
                }
                JournalEntry::Created => {
                    self.created.pop();
                }
            }
        }
    }

    fn cached(&mut self, address: &Address) -> &mut CachedAccount {
        self.accounts.get_mut(address).expect("journaled account is cached")
    }

    /// Applies queued self-destructions. Called once, when the normal
    /// transaction ends.
    pub fn finalize(&mut self) {
        if self.finalized {
            return;
        }
        self.finalized = true;
        let victims: BTreeSet<Address> = self.pending_destructions.iter().map(|d| d.address).collect();
        for victim in victims {
            let acc = self.load(&victim);
            acc.destroyed = true;
            acc.exists = false;
            acc.balance = Word::zero();
            acc.nonce = 0;
            acc.code = Arc::from(Vec::new());
            acc.code_hash = B256::ZERO;
            for slot in acc.storage.values_mut() {
                slot.current = Word::zero();
            }
        }
        self.journal.clear();
    }

    pub fn logs(&self) -> &[LogRecord] {
        &self.logs
    }

    pub fn pending_destructions(&self) -> &[Destruction] {
        &self.pending_destructions
    }

    pub fn created(&self) -> &[CreatedContract] {
        &self.created
    }

    /// Number of accounts and slots fetched from the source.
    pub fn loads(&self) -> usize {
        self.loads
    }

    pub fn misses(&self) -> &[SliceMiss] {
        &self.misses
    }

    /// Everything read from the source, with original values.
    pub fn read_committed_state(&self) -> Vec<AccountSlice> {
        self.accounts
            .iter()
            .map(|(address, acc)| {
                let o = &acc.original;
                AccountSlice {
                    address: *address,
                    balance: o.balance,
                    nonce: o.nonce,
                    code_hash: if o.exists { o.code_hash } else { B256::ZERO },
                    code_size: o.code.len() as u64,
                    storage: acc
                        .storage
                        .iter()
                        .filter(|(_, s)| s.from_source)
                        .map(|(k, s)| StorageEntry {
                            key: *k,
                            value: s.original,
                        })
                        .collect(),
                }
            })
            .collect()
    }

    /// Accounts whose existence, balance, nonce, code or storage differs
    /// from the pre-state. Destroyed accounts report zero balance and nonce.
    pub fn changed_state(&self) -> Vec<StateDiffRecord> {
        let mut out = Vec::new();
        for (address, acc) in &self.accounts {
            let o = &acc.original;
            if acc.destroyed {
                if o.exists {
                    out.push(StateDiffRecord {
                        address: *address,
                        balance: Word::zero(),
                        nonce: 0,
                        storage: Vec::new(),
                    });
                }
                continue;
            }
            let storage: Vec<StorageEntry> = acc
                .storage
                .iter()
                .filter(|(_, s)| s.current != s.original)
                .map(|(k, s)| StorageEntry {
                    key: *k,
                    value: s.current,
                })
                .collect();
            let changed = acc.exists != o.exists
                || acc.balance != o.balance
                || acc.nonce != o.nonce
                || (acc.exists && acc.code_hash != o.code_hash)
                || !storage.is_empty();
            if changed {
                out.push(StateDiffRecord {
                    address: *address,
                    balance: acc.balance,
                    nonce: acc.nonce,
                    storage,
                });
            }
        }
        out
    }

    /// Final per-account state; `None` marks an account that no longer exists.
    pub fn final_accounts(&self) -> impl Iterator<Item = (Address, Option<FinalAccount>)> + '_ {
        self.accounts.iter().filter_map(|(address, acc)| {
            if acc.destroyed {
                return Some((*address, None));
            }
            if !acc.exists {
                return None;
            }
            Some((
                *address,
                Some(FinalAccount {
                    balance: acc.balance,
                    nonce: acc.nonce,
                    code: acc.code.clone(),
                    fresh_storage: acc.fresh_storage,
                    storage: acc.storage.iter().map(|(k, s)| (*k, s.current)).collect(),
                }),
            ))
        })
    }

    // Side-effect-free reads for observers: never load into the cache and
    // never record misses.

    pub fn peek_balance(&self, address: &Address) -> Word {
        match self.accounts.get(address) {
            Some(a) => a.balance,
            None => self.source.account(address).map(|i| i.balance).unwrap_or_default(),
        }
    }

    pub fn peek_nonce(&self, address: &Address) -> u64 {
        match self.accounts.get(address) {
            Some(a) => a.nonce,
            None => self.source.account(address).map(|i| i.nonce).unwrap_or_default(),
        }
    }

    pub fn peek_code(&self, address: &Address) -> Code {
        match self.accounts.get(address) {
            Some(a) => a.code.clone(),
            None => self
                .source
                .account(address)
                .map(|i| i.code)
                .unwrap_or_else(|_| Arc::from(Vec::new())),
        }
    }

    pub fn peek_storage(&self, address: &Address, key: &Word) -> Word {
        if let Some(acc) = self.accounts.get(address) {
            if let Some(slot) = acc.storage.get(key) {
                return slot.current;
            }
            if acc.fresh_storage || !acc.original.exists || acc.destroyed {
                return Word::zero();
            }
        }
        self.source.storage(address, key).unwrap_or_default()
    }
}
