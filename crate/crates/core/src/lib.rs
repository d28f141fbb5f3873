//! Transaction-granular chain storage, isolated replay, execution
//! instrumentation with taint tracking, and attack detectors for EVM-style
//! chains.

pub mod chain;
pub mod detect;
pub mod evm;
pub mod fixtures;
pub mod graph;
pub mod instrument;
pub mod primitives;
pub mod records;
pub mod replay;
pub mod store;
pub mod taint;

pub use primitives::{keccak256, Address, Bytes, Word, B256};
