//! Record mode: executes transactions in order against a full in-memory
//! state and emits the fixture records a chain aggregator would have
//! collected for them.

use std::collections::BTreeMap;

use crate::evm::{
    execute_transaction, BlockEnv, Env, InMemoryState, MemAccount, TxEnv, TxInput, TxRejected, WorldState,
};
use crate::instrument::Scratch;
use crate::primitives::{keccak256, Address, Bytes, Word, B256};
use crate::records::{
    BlockRecord, CodeOrigin, CodeRecord, ContractCode, FixtureRecord, InternalTxRecord, LifecycleEvents,
    LifecycleRecord, NormalTxRecord, TxStatus,
};
use crate::store::canonical_order;

pub const DEFAULT_TX_GAS: u64 = 5_000_000;
pub const BLOCK_INTERVAL: u64 = 13;

/// 10^24 Wei.
pub fn default_funding() -> Word {
    Word::exp10(24)
}

/// A deterministic address derived from a human-readable label.
pub fn labeled_address(label: &str) -> Address {
    Address::from_word(keccak256(label.as_bytes()).to_word())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub hash: B256,
    pub number: u64,
    pub txn_index: u64,
    pub success: bool,
    pub output: Bytes,
    pub gas_used: u64,
    pub con_address: Option<Address>,
    pub internal_txns: Vec<InternalTxRecord>,
}

#[derive(Debug)]
pub struct ChainBuilder {
    state: InMemoryState,
    sealed: Vec<BlockRecord>,
    codes: Vec<CodeRecord>,
    lifecycle: Vec<LifecycleRecord>,
    open: Vec<NormalTxRecord>,
    number: u64,
    timestamp: u64,
    miner: Address,
    difficulty: Word,
    gas_limit: Word,
    gas_price: Word,
    tx_gas: u64,
}

impl Default for ChainBuilder {
    fn default() -> Self {
        Self::new(1, 1_500_000_000)
    }
}

impl ChainBuilder {
    pub fn new(first_block: u64, timestamp: u64) -> Self {
        ChainBuilder {
            state: InMemoryState::new(),
            sealed: Vec::new(),
            codes: Vec::new(),
            lifecycle: Vec::new(),
            open: Vec::new(),
            number: first_block,
            timestamp,
            miner: labeled_address("miner"),
            difficulty: Word::from(2_000_000u64),
            gas_limit: Word::from(100_000_000u64),
            gas_price: Word::one(),
            tx_gas: DEFAULT_TX_GAS,
        }
    }

    /// A funded externally owned account named by `label`.
    pub fn eoa(&mut self, label: &str) -> Address {
        let a = labeled_address(label);
        if self.state.get(&a).is_none() {
            self.state.set_balance(a, default_funding());
        }
        a
    }

    pub fn fund(&mut self, address: Address, balance: Word) {
        self.state.set_balance(address, balance);
    }

    /// Places an account directly into the pre-state, outside any transaction.
    pub fn install(&mut self, address: Address, account: MemAccount) {
        self.state.insert(address, account);
    }

    pub fn state(&self) -> &InMemoryState {
        &self.state
    }

    pub fn balance(&self, a: &Address) -> Word {
        self.state.get(a).map(|x| x.balance).unwrap_or_default()
    }

    pub fn nonce(&self, a: &Address) -> u64 {
        self.state.get(a).map(|x| x.nonce).unwrap_or_default()
    }

    pub fn storage(&self, a: &Address, key: Word) -> Word {
        self.state
            .get(a)
            .and_then(|x| x.storage.get(&key).copied())
            .unwrap_or_default()
    }

    pub fn code(&self, a: &Address) -> Vec<u8> {
        self.state.get(a).map(|x| x.code.clone()).unwrap_or_default()
    }

    pub fn exists(&self, a: &Address) -> bool {
        self.state.get(a).is_some()
    }

    pub fn block_number(&self) -> u64 {
        self.number
    }

    pub fn timestamp(&self) -> u64 {
        self.timestamp
    }

    pub fn miner(&self) -> Address {
        self.miner
    }

    pub fn set_tx_gas(&mut self, gas: u64) {
        self.tx_gas = gas;
    }

    /// Sets the open block's timestamp. Only valid before its first transaction.
    pub fn set_timestamp(&mut self, timestamp: u64) {
        assert!(self.open.is_empty(), "timestamp of a block with transactions");
        self.timestamp = timestamp;
    }

    fn ancestor_hashes(&self) -> BTreeMap<u64, B256> {
        self.sealed
            .iter()
            .rev()
            .take(crate::store::BLOCKHASH_WINDOW as usize)
            .map(|b| (b.number, b.hash))
            .collect()
    }

    fn env(&self, hash: B256, index: u64, origin: Address) -> Env {
        Env {
            block: BlockEnv {
                number: self.number,
                timestamp: self.timestamp,
                coinbase: self.miner,
                difficulty: self.difficulty,
                gas_limit: self.gas_limit,
                ancestor_hashes: self.ancestor_hashes(),
            },
            tx: TxEnv {
                hash,
                index,
                origin,
                gas_price: self.gas_price,
            },
            schedule: Default::default(),
        }
    }

    pub fn call(&mut self, from: Address, to: Address, value: Word, input: Vec<u8>) -> Result<Receipt, TxRejected> {
        self.send(from, Some(to), value, input)
    }

    pub fn create(&mut self, from: Address, value: Word, init_code: Vec<u8>) -> Result<Receipt, TxRejected> {
        self.send(from, None, value, init_code)
    }

    /// Deploys `init_code` and returns the new contract's address.
    ///
    /// # Panics
    /// If the creation fails; scenario code treats that as a bug.
    pub fn deploy(&mut self, from: Address, init_code: Vec<u8>) -> Address {
        let r = self.create(from, Word::zero(), init_code).expect("deployment accepted");
        assert!(r.success, "deployment from {from} failed");
        r.con_address.expect("creation reports an address")
    }

    pub fn send(&mut self, from: Address, to: Option<Address>, value: Word, input: Vec<u8>) -> Result<Receipt, TxRejected> {
        let index = self.open.len() as u64;
        let nonce = self.nonce(&from);
        let mut preimage = Vec::new();
        preimage.extend_from_slice(&self.number.to_be_bytes());
        preimage.extend_from_slice(&index.to_be_bytes());
        preimage.extend_from_slice(from.as_bytes());
        preimage.extend_from_slice(&nonce.to_be_bytes());
        preimage.extend_from_slice(to.unwrap_or(Address::ZERO).as_bytes());
        preimage.extend_from_slice(&crate::primitives::word_to_be(value));
        preimage.extend_from_slice(&input);
        let hash = keccak256(&preimage);
        let env = self.env(hash, index, from);
        let tx = TxInput {
            from,
            to,
            value,
            gas_limit: self.tx_gas,
            gas_price: self.gas_price,
            input: input.clone(),
        };
        let mut world = WorldState::new(&self.state);
        let exec = execute_transaction(&mut world, &env, &tx, None, &mut Scratch::default())?;
        let read = world.read_committed_state();
        let mut changed = world.changed_state();
        for d in &mut changed {
            d.storage.sort();
        }
        changed.sort();
        let get_code_list = read.iter().filter(|s| s.has_code()).map(|s| s.address).collect();
        let cum = self.open.iter().map(|t| t.gas_used).fold(Word::zero(), |a, b| a + b) + Word::from(exec.gas_used);
        let record = NormalTxRecord {
            hash,
            txn_index: index,
            from_address: from,
            to_address: to,
            con_address: exec.con_address,
            value,
            nonce,
            gas_limit: Word::from(self.tx_gas),
            gas_price: self.gas_price,
            gas_used: Word::from(exec.gas_used),
            cum_gas_used: cum,
            call_function: match to {
                Some(_) if input.len() >= 4 => Bytes(input[..4].to_vec()),
                _ => Bytes::new(),
            },
            input: Bytes(input),
            status: if exec.success { TxStatus::Success } else { TxStatus::Failure },
            output: exec.output.clone(),
            int_txn_count: exec.internal_txns.len() as u64,
            internal_txns: exec.internal_txns.clone(),
            logs: world.logs().to_vec(),
            read_committed_state: read,
            changed_state: changed,
            get_code_list,
        };
        let mut events = LifecycleEvents {
            hash,
            txn_index: index,
            ..Default::default()
        };
        for c in world.created() {
            let Some(runtime) = &c.runtime else { continue };
            events.create.push(c.address);
            if c.reset {
                events.reset.push(c.address);
            }
            self.codes.push(CodeRecord {
                number: self.number,
                timestamp: self.timestamp,
                transaction: CodeOrigin {
                    hash,
                    txn_index: index,
                    input: c.init_code.clone(),
                    contract: ContractCode {
                        address: c.address,
                        hash: keccak256(runtime),
                        code: runtime.clone(),
                    },
                },
            });
        }
        events.suicide = world.pending_destructions().to_vec();
        if !events.is_empty() {
            self.lifecycle.push(LifecycleRecord {
                number: self.number,
                timestamp: self.timestamp,
                transaction: events,
            });
        }
        let updates: Vec<_> = world.final_accounts().collect();
        drop(world);
        self.state.apply(updates);
        self.open.push(record);
        Ok(Receipt {
            hash,
            number: self.number,
            txn_index: index,
            success: exec.success,
            output: exec.output,
            gas_used: exec.gas_used,
            con_address: exec.con_address,
            internal_txns: exec.internal_txns,
        })
    }

    /// Closes the open block (even if empty) and opens the next one.
    pub fn seal(&mut self) -> B256 {
        let parent_hash = self.sealed.last().map(|b| b.hash).unwrap_or(B256::ZERO);
        let mut preimage = Vec::new();
        preimage.extend_from_slice(&self.number.to_be_bytes());
        preimage.extend_from_slice(parent_hash.as_bytes());
        preimage.extend_from_slice(&self.timestamp.to_be_bytes());
        for t in &self.open {
            preimage.extend_from_slice(t.hash.as_bytes());
        }
        let hash = keccak256(&preimage);
        let transactions = std::mem::take(&mut self.open);
        let gas_used = transactions.iter().fold(Word::zero(), |a, t| a + t.gas_used);
        self.sealed.push(BlockRecord {
            number: self.number,
            hash,
            parent_hash,
            miner: self.miner,
            difficulty: self.difficulty,
            gas_limit: self.gas_limit,
            gas_used,
            timestamp: self.timestamp,
            extra_data: Bytes::new(),
            txn_count: transactions.len() as u64,
            transactions,
        });
        self.number += 1;
        self.timestamp += BLOCK_INTERVAL;
        hash
    }

    pub fn has_open_transactions(&self) -> bool {
        !self.open.is_empty()
    }

    /// Seals any open transactions and returns every record in canonical order.
    pub fn finish(mut self) -> Vec<FixtureRecord> {
        if !self.open.is_empty() {
            self.seal();
        }
        let mut out: Vec<FixtureRecord> = self
            .sealed
            .into_iter()
            .map(FixtureRecord::Block)
            .chain(self.codes.into_iter().map(FixtureRecord::Code))
            .chain(self.lifecycle.into_iter().map(FixtureRecord::State))
            .collect();
        canonical_order(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evm::asm::{deployer, CodeBuilder};
    use crate::evm::Opcode;

    #[test]
    fn plain_transfer_records_two_account_slice() {
        let mut c = ChainBuilder::default();
        let a = c.eoa("alice");
        let b = c.eoa("bob");
        let r = c.call(a, b, Word::from(5), vec![]).unwrap();
        assert!(r.success);
        let recs = c.finish();
        let FixtureRecord::Block(block) = &recs[0] else { panic!() };
        let tx = &block.transactions[0];
        assert_eq!(tx.read_committed_state.len(), 2);
        assert!(tx.get_code_list.is_empty());
        assert_eq!(tx.gas_used, Word::from(21_000));
    }

    #[test]
    fn deployment_emits_code_and_lifecycle() {
        let mut c = ChainBuilder::default();
        let a = c.eoa("alice");
        let mut rt = CodeBuilder::new();
        rt.push(1u64).push(0u64).op(Opcode::SSTORE).op(Opcode::STOP);
        let runtime = rt.build().unwrap();
        let addr = c.deploy(a, deployer(&[], &runtime));
        assert_eq!(c.code(&addr), runtime);
        let recs = c.finish();
        assert!(recs.iter().any(|r| matches!(r, FixtureRecord::Code(code) if code.address() == addr)));
        assert!(recs
            .iter()
            .any(|r| matches!(r, FixtureRecord::State(s) if s.transaction.create == vec![addr])));
    }
}
