//! Conjunctive transaction filters.
//!
//! A filter is a JSON object in the fixture's field naming; every present
//! field must hold for a transaction to match. Unknown fields are rejected.

use serde::{Deserialize, Serialize};

use crate::primitives::{Address, Bytes, Word, B256};
use crate::records::{NormalTxRecord, TxStatus};

/// Bounds on an ordered value; all present bounds must hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range<T> {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gte: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lt: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lte: Option<T>,
}

impl<T: PartialOrd> Range<T> {
    pub fn contains(&self, v: &T) -> bool {
        self.gt.as_ref().is_none_or(|b| v > b)
            && self.gte.as_ref().is_none_or(|b| v >= b)
            && self.lt.as_ref().is_none_or(|b| v < b)
            && self.lte.as_ref().is_none_or(|b| v <= b)
    }
}

/// Quantity bounds in hex, like every 256-bit field of the fixture.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordRange {
    #[serde(default, with = "crate::primitives::serde_opt_quantity", skip_serializing_if = "Option::is_none")]
    pub gt: Option<Word>,
    #[serde(default, with = "crate::primitives::serde_opt_quantity", skip_serializing_if = "Option::is_none")]
    pub gte: Option<Word>,
    #[serde(default, with = "crate::primitives::serde_opt_quantity", skip_serializing_if = "Option::is_none")]
    pub lt: Option<Word>,
    #[serde(default, with = "crate::primitives::serde_opt_quantity", skip_serializing_if = "Option::is_none")]
    pub lte: Option<Word>,
}

impl WordRange {
    pub fn contains(&self, v: &Word) -> bool {
        Range {
            gt: self.gt,
            gte: self.gte,
            lt: self.lt,
            lte: self.lte,
        }
        .contains(v)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "PascalCase")]
pub struct QueryFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<B256>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_address: Option<Address>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_address: Option<Address>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<WordRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number: Option<Range<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub int_txn_count: Option<Range<u64>>,
    /// The recipient of the outer call has code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_has_code: Option<bool>,
    /// Some internal transaction moves a positive value to a contract.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal_value_to_contract: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_internal_txns: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_function: Option<Bytes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<TxStatus>,
}

#[derive(Debug, thiserror::Error)]
#[error("invalid filter: {0}")]
pub struct FilterError(serde_json::Error);

impl QueryFilter {
    pub fn parse(text: &str) -> Result<Self, FilterError> {
        serde_json::from_str(text).map_err(FilterError)
    }

    pub fn matches(&self, block: u64, tx: &NormalTxRecord) -> bool {
        self.hash.is_none_or(|h| tx.hash == h)
            && self.from_address.is_none_or(|a| tx.from_address == a)
            && self.to_address.is_none_or(|a| tx.to_address == Some(a))
            && self.value.as_ref().is_none_or(|r| r.contains(&tx.value))
            && self.number.as_ref().is_none_or(|r| r.contains(&block))
            && self.int_txn_count.as_ref().is_none_or(|r| r.contains(&tx.int_txn_count))
            && self.to_has_code.is_none_or(|want| to_has_code(tx) == want)
            && self
                .internal_value_to_contract
                .is_none_or(|want| internal_value_to_contract(tx) == want)
            && self.min_internal_txns.is_none_or(|n| tx.int_txn_count >= n)
            && self.call_function.as_ref().is_none_or(|f| &tx.call_function == f)
            && self.status.is_none_or(|s| tx.status == s)
    }
}

/// Whether `address` is a contract from the point of view of `tx`: it had
/// code before the transaction or the transaction created it.
pub fn is_contract_in(tx: &NormalTxRecord, address: &Address) -> bool {
    if tx.slice_for(address).is_some_and(|s| s.has_code()) {
        return true;
    }
    if tx.is_creation() && tx.con_address.as_ref() == Some(address) {
        return true;
    }
    tx.internal_txns
        .iter()
        .any(|i| i.kind.is_create() && &i.to_address == address)
}

pub fn to_has_code(tx: &NormalTxRecord) -> bool {
    tx.to_address
        .is_some_and(|to| tx.slice_for(&to).is_some_and(|s| s.has_code()))
}

pub fn internal_value_to_contract(tx: &NormalTxRecord) -> bool {
    tx.internal_txns
        .iter()
        .any(|i| !i.value.is_zero() && is_contract_in(tx, &i.to_address))
}
