//! Transaction-granular chain records and their line-delimited text form.
//!
//! Every line of a fixture file is one [`FixtureRecord`], a JSON object with a
//! `kind` discriminator. Field names mirror the index layout of the original
//! aggregator: `Block` objects carry their `Transaction` list, `code` lines
//! describe deployed contracts and `state` lines describe account lifecycle
//! events.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::primitives::{serde_quantity, serde_word, Address, Bytes, Word, B256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FixtureRecord {
    Block(BlockRecord),
    Code(CodeRecord),
    State(LifecycleRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct BlockRecord {
    pub number: u64,
    pub hash: B256,
    pub parent_hash: B256,
    pub miner: Address,
    #[serde(with = "serde_quantity")]
    pub difficulty: Word,
    #[serde(with = "serde_quantity")]
    pub gas_limit: Word,
    #[serde(with = "serde_quantity")]
    pub gas_used: Word,
    pub timestamp: u64,
    pub extra_data: Bytes,
    pub txn_count: u64,
    #[serde(rename = "Transaction")]
    pub transactions: Vec<NormalTxRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct NormalTxRecord {
    pub hash: B256,
    pub txn_index: u64,
    pub from_address: Address,
    pub to_address: Option<Address>,
    /// Address of the contract created by a creation transaction.
    pub con_address: Option<Address>,
    #[serde(with = "serde_quantity")]
    pub value: Word,
    pub nonce: u64,
    #[serde(with = "serde_quantity")]
    pub gas_limit: Word,
    #[serde(with = "serde_quantity")]
    pub gas_price: Word,
    #[serde(with = "serde_quantity")]
    pub gas_used: Word,
    #[serde(with = "serde_quantity")]
    pub cum_gas_used: Word,
    pub input: Bytes,
    pub call_function: Bytes,
    pub status: TxStatus,
    pub output: Bytes,
    pub int_txn_count: u64,
    pub internal_txns: Vec<InternalTxRecord>,
    pub logs: Vec<LogRecord>,
    pub read_committed_state: Vec<AccountSlice>,
    pub changed_state: Vec<StateDiffRecord>,
    pub get_code_list: Vec<Address>,
}

impl NormalTxRecord {
    pub fn is_creation(&self) -> bool {
        self.to_address.is_none()
    }

    /// Recipient of the outer frame: the callee, or the created contract.
    pub fn target(&self) -> Option<Address> {
        self.to_address.or(self.con_address)
    }

    pub fn slice_for(&self, address: &Address) -> Option<&AccountSlice> {
        self.read_committed_state
            .iter()
            .find(|s| &s.address == address)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CallKind {
    Call,
    CallCode,
    DelegateCall,
    StaticCall,
    Create,
    Create2,
    SelfDestruct,
}

impl CallKind {
    pub fn is_create(self) -> bool {
        matches!(self, CallKind::Create | CallKind::Create2)
    }

    pub fn name(self) -> &'static str {
        match self {
            CallKind::Call => "CALL",
            CallKind::CallCode => "CALLCODE",
            CallKind::DelegateCall => "DELEGATECALL",
            CallKind::StaticCall => "STATICCALL",
            CallKind::Create => "CREATE",
            CallKind::Create2 => "CREATE2",
            CallKind::SelfDestruct => "SELFDESTRUCT",
        }
    }
}

impl fmt::Display for CallKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct InternalTxRecord {
    /// Zero-based execution order within the normal transaction.
    #[serde(rename = "TxnIndex")]
    pub serial: u64,
    #[serde(rename = "Type")]
    pub kind: CallKind,
    pub from_address: Address,
    pub to_address: Address,
    #[serde(with = "serde_quantity")]
    pub value: Word,
    pub call_function: Bytes,
    pub call_parameter: Bytes,
    pub output: Bytes,
    pub evm_depth: u64,
    #[serde(with = "serde_quantity")]
    pub gas_limit: Word,
}

impl InternalTxRecord {
    /// The full call input, selector included.
    pub fn input(&self) -> Vec<u8> {
        let mut v = self.call_function.0.clone();
        v.extend_from_slice(&self.call_parameter);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct LogRecord {
    pub address: Address,
    pub topics: Vec<B256>,
    pub data: Bytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct StorageEntry {
    #[serde(with = "serde_word")]
    pub key: Word,
    #[serde(with = "serde_word")]
    pub value: Word,
}

/// Pre-state of one account as seen by a single transaction.
///
/// A `code_hash` of all zeroes marks an account that did not exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct AccountSlice {
    pub address: Address,
    #[serde(with = "serde_quantity")]
    pub balance: Word,
    pub nonce: u64,
    pub code_hash: B256,
    pub code_size: u64,
    pub storage: Vec<StorageEntry>,
}

impl AccountSlice {
    pub fn exists(&self) -> bool {
        !self.code_hash.is_zero()
    }

    pub fn has_code(&self) -> bool {
        self.code_size > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct StateDiffRecord {
    pub address: Address,
    #[serde(with = "serde_quantity")]
    pub balance: Word,
    pub nonce: u64,
    pub storage: Vec<StorageEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct CodeRecord {
    pub number: u64,
    pub timestamp: u64,
    pub transaction: CodeOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct CodeOrigin {
    pub hash: B256,
    pub txn_index: u64,
    /// Deployment (init) code that produced the contract.
    pub input: Bytes,
    pub contract: ContractCode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct ContractCode {
    pub address: Address,
    pub hash: B256,
    pub code: Bytes,
}

impl CodeRecord {
    pub fn address(&self) -> Address {
        self.transaction.contract.address
    }

    pub fn created_in(&self) -> (u64, u64) {
        (self.number, self.transaction.txn_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct LifecycleRecord {
    pub number: u64,
    pub timestamp: u64,
    pub transaction: LifecycleEvents,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct LifecycleEvents {
    pub hash: B256,
    pub txn_index: u64,
    pub create: Vec<Address>,
    pub reset: Vec<Address>,
    pub suicide: Vec<Destruction>,
}

impl LifecycleEvents {
    pub fn is_empty(&self) -> bool {
        self.create.is_empty() && self.reset.is_empty() && self.suicide.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct Destruction {
    pub address: Address,
    pub beneficiary: Address,
}
