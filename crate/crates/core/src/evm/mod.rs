//! The bytecode interpreter: opcodes, gas, world state, single-step
//! execution and the transaction driver.

pub mod address;
pub mod asm;
pub mod executor;
pub mod gas;
pub mod machine;
pub mod opcode;
pub mod world;

pub use address::{create2_address, create_address, selector};
pub use executor::{execute_transaction, TxExecution, TxInput, TxRejected};
pub use gas::GasSchedule;
pub use machine::{BlockEnv, CallDescriptor, Env, Frame, HaltReason, InvalidKind, Machine, StepOutcome, TxEnv};
pub use opcode::Opcode;
pub use world::{AccountInfo, FinalAccount, InMemoryState, MemAccount, SliceMiss, StateSource, WorldState};
