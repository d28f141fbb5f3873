//! Reading, writing and validating line-delimited fixture files.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use crate::primitives::{keccak256, Address};
use crate::records::{BlockRecord, FixtureRecord, NormalTxRecord};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("block-number gap: block {missing} is missing")]
    Gap { missing: u64 },
    #[error("line {line}: {message}")]
    Invariant { line: usize, message: String },
    #[error("line {line}: conflicts with stored record: {message}")]
    Conflict { line: usize, message: String },
}

/// A parsed record with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Located {
    pub line: usize,
    pub record: FixtureRecord,
}

pub fn parse_fixture_text(text: &str) -> Result<Vec<Located>, FixtureError> {
    parse_lines(text.lines().map(|l| Ok::<_, io::Error>(l.to_owned())), "<text>")
}

pub fn read_fixture(path: &Path) -> Result<Vec<Located>, FixtureError> {
    let file = fs::File::open(path).map_err(|source| FixtureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_lines(io::BufReader::new(file).lines(), &path.display().to_string())
}

fn parse_lines<I>(lines: I, path: &str) -> Result<Vec<Located>, FixtureError>
where
    I: Iterator<Item = Result<String, io::Error>>,
{
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|source| FixtureError::Io {
            path: path.to_owned(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&text).map_err(|e| FixtureError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(Located { line: line_no, record });
    }
    Ok(out)
}

pub fn write_fixture<W: Write>(mut w: W, records: &[FixtureRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn fixture_string(records: &[FixtureRecord]) -> String {
    let mut buf = Vec::new();
    write_fixture(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

/// Canonical record order: blocks by number, then code records by creation
/// point and address, then lifecycle records by transaction position.
pub fn canonical_order(records: &mut [FixtureRecord]) {
    fn key(r: &FixtureRecord) -> (u8, u64, u64, Address) {
        match r {
            FixtureRecord::Block(b) => (0, b.number, 0, Address::ZERO),
            FixtureRecord::Code(c) => (1, c.number, c.transaction.txn_index, c.address()),
            FixtureRecord::State(s) => (2, s.number, s.transaction.txn_index, Address::ZERO),
        }
    }
    records.sort_by_key(key);
}

fn invariant(line: usize, message: impl Into<String>) -> FixtureError {
    FixtureError::Invariant {
        line,
        message: message.into(),
    }
}

/// Addresses a transaction brought into existence as contracts.
pub fn created_addresses(tx: &NormalTxRecord) -> BTreeSet<Address> {
    let mut out: BTreeSet<Address> = tx
        .internal_txns
        .iter()
        .filter(|i| i.kind.is_create())
        .map(|i| i.to_address)
        .collect();
    if tx.is_creation() {
        out.extend(tx.con_address);
    }
    out
}

fn check_tx(line: usize, block: &BlockRecord, pos: usize, tx: &NormalTxRecord) -> Result<(), FixtureError> {
    let at = |m: String| invariant(line, format!("block {} tx {}: {m}", block.number, pos));
    if tx.txn_index != pos as u64 {
        return Err(at(format!("TxnIndex {} out of order", tx.txn_index)));
    }
    if tx.int_txn_count != tx.internal_txns.len() as u64 {
        return Err(at(format!(
            "IntTxnCount {} but {} internal transactions",
            tx.int_txn_count,
            tx.internal_txns.len()
        )));
    }
    for (k, itx) in tx.internal_txns.iter().enumerate() {
        if itx.serial != k as u64 {
            return Err(at(format!("internal transaction serial {} at position {k}", itx.serial)));
        }
        if itx.evm_depth < 2 {
            return Err(at(format!("internal transaction {k} has depth {}", itx.evm_depth)));
        }
    }
    for log in &tx.logs {
        if log.topics.len() > 4 {
            return Err(at(format!("log with {} topics", log.topics.len())));
        }
    }
    let mut seen = HashSet::new();
    for slice in &tx.read_committed_state {
        if !seen.insert(slice.address) {
            return Err(at(format!("account {} sliced twice", slice.address)));
        }
        let mut keys = HashSet::new();
        if !slice.storage.iter().all(|e| keys.insert(e.key)) {
            return Err(at(format!("duplicate storage key in slice of {}", slice.address)));
        }
    }
    for diff in &tx.changed_state {
        let mut keys = HashSet::new();
        if !diff.storage.iter().all(|e| keys.insert(e.key)) {
            return Err(at(format!("duplicate storage key in diff of {}", diff.address)));
        }
    }
    let created = created_addresses(tx);
    for itx in &tx.internal_txns {
        for a in [itx.from_address, itx.to_address] {
            if !seen.contains(&a) && !created.contains(&a) {
                return Err(at(format!("internal transaction {} references {a} outside the slice", itx.serial)));
            }
        }
    }
    for a in &tx.get_code_list {
        match tx.slice_for(a) {
            Some(s) if s.has_code() => {}
            _ => return Err(at(format!("GetCodeList entry {a} has no code in the slice"))),
        }
    }
    Ok(())
}

/// Checks the structural invariants of a parsed fixture. `next_block` is
/// the block number the first block must have, when the store already
/// holds earlier blocks.
pub fn validate(records: &[Located], next_block: Option<u64>) -> Result<(), FixtureError> {
    let mut expected = next_block;
    let mut hashes = HashSet::new();
    let mut tx_positions = HashSet::new();
    let mut blocks = HashSet::new();
    for Located { line, record } in records {
        match record {
            FixtureRecord::Block(b) => {
                if let Some(e) = expected {
                    if b.number > e {
                        return Err(FixtureError::Gap { missing: e });
                    }
                    if b.number < e {
                        return Err(invariant(*line, format!("block {} out of order (expected {e})", b.number)));
                    }
                }
                expected = Some(b.number + 1);
                blocks.insert(b.number);
                if b.txn_count != b.transactions.len() as u64 {
                    return Err(invariant(
                        *line,
                        format!("block {}: TxnCount {} but {} transactions", b.number, b.txn_count, b.transactions.len()),
                    ));
                }
                for (pos, tx) in b.transactions.iter().enumerate() {
                    check_tx(*line, b, pos, tx)?;
                    if !hashes.insert(tx.hash) {
                        return Err(invariant(*line, format!("duplicate transaction hash {}", tx.hash)));
                    }
                    tx_positions.insert((b.number, pos as u64, tx.hash));
                }
            }
            FixtureRecord::Code(c) => {
                let contract = &c.transaction.contract;
                if keccak256(&contract.code) != contract.hash {
                    return Err(invariant(*line, format!("code hash mismatch for {}", contract.address)));
                }
            }
            FixtureRecord::State(s) => {
                let ev = &s.transaction;
                let mut created = HashSet::new();
                for a in &ev.create {
                    created.insert(*a);
                }
                for r in &ev.reset {
                    if !created.contains(r) {
                        return Err(invariant(*line, format!("reset {r} is not among created contracts")));
                    }
                }
            }
        }
    }
    // Code and lifecycle records must point at transactions of the fixture
    // when the referenced block is part of it.
    for Located { line, record } in records {
        let (number, index, hash) = match record {
            FixtureRecord::Code(c) => (c.number, c.transaction.txn_index, c.transaction.hash),
            FixtureRecord::State(s) => (s.number, s.transaction.txn_index, s.transaction.hash),
            FixtureRecord::Block(_) => continue,
        };
        if blocks.contains(&number) && !tx_positions.contains(&(number, index, hash)) {
            return Err(invariant(
                *line,
                format!("record points at block {number} tx {index} ({hash}) which is not in the fixture"),
            ));
        }
    }
    Ok(())
}
