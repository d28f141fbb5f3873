//! Drives whole normal transactions: owns the frame stack, turns spawn
//! requests into frames, records internal transactions and dispatches
//! instrumentation callbacks.
//!
//! Callback order for a transaction whose outer frame calls one contract:
//! transactionStart, contractStart(outer), before/after pairs, the call's
//! before point, contractStart(callee) .. contractEnd(callee), the call's
//! after point, .. contractEnd(outer), transactionEnd.

use std::sync::Arc;

use super::address::{create2_address, create_address};
use super::gas::words;
use super::machine::{step, CallDescriptor, Env, Frame, HaltReason, Machine, StepOutcome, DEPTH_LIMIT};
use super::opcode::Opcode;
use super::world::WorldState;
use crate::instrument::{HookContext, HookError, InstrumentationPoint, LiveFrame, Registry, Scratch};
use crate::primitives::{Address, Bytes, Word};
use crate::records::{CallKind, InternalTxRecord};
use crate::taint::{TagSet, TaintEngine};

const IDENTITY: u64 = 4;

/// A normal transaction to execute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxInput {
    pub from: Address,
    /// `None` creates a contract.
    pub to: Option<Address>,
    pub value: Word,
    pub gas_limit: u64,
    pub gas_price: Word,
    pub input: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TxRejected {
    #[error("sender cannot cover value plus maximum fee")]
    InsufficientFunds,
    #[error("gas limit {limit} below intrinsic cost {intrinsic}")]
    IntrinsicGas { limit: u64, intrinsic: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxExecution {
    pub success: bool,
    pub halt: HaltReason,
    pub output: Bytes,
    pub gas_used: u64,
    pub con_address: Option<Address>,
    pub internal_txns: Vec<InternalTxRecord>,
    /// Opcodes fetched and executed, across all frames.
    pub opcodes: u64,
    pub callbacks_invoked: u64,
    pub callback_error: Option<String>,
}

struct FrameState {
    checkpoint: usize,
    record: Option<usize>,
    created: Option<Address>,
    ret_offset: usize,
    ret_size: usize,
    /// Call opcode waiting for this frame's child to return.
    waiting_on: Option<Opcode>,
}

struct Driver<'r, 'e, 'w, 's> {
    world: &'e mut WorldState<'w>,
    env: &'e Env,
    hooks: Option<&'r Registry>,
    scratch: &'s mut Scratch,
    taint: TaintEngine,
    frames: Vec<LiveFrame>,
    states: Vec<FrameState>,
    records: Vec<InternalTxRecord>,
    opcodes: u64,
    callbacks: u64,
}

enum Started {
    Frame,
    /// No frame was created; the caller gets this much gas back.
    Failed(u64),
}

fn is_precompile(address: &Address) -> Option<u64> {
    if address.0[..19].iter().all(|b| *b == 0) && (1..=8).contains(&address.0[19]) {
        Some(address.0[19] as u64)
    } else {
        None
    }
}

fn split_input(input: &[u8], kind: CallKind) -> (Bytes, Bytes) {
    if !kind.is_create() && input.len() >= 4 {
        (Bytes(input[..4].to_vec()), Bytes(input[4..].to_vec()))
    } else {
        (Bytes::new(), Bytes(input.to_vec()))
    }
}

impl<'r, 'e, 'w, 's> Driver<'r, 'e, 'w, 's> {
    fn dispatch(&mut self, point: InstrumentationPoint, hijack: Option<&mut Option<bool>>) -> Result<(), HookError> {
        let Some(hooks) = self.hooks else {
            return Ok(());
        };
        let callbacks = hooks.callbacks(point);
        if callbacks.is_empty() {
            return Ok(());
        }
        let mut slot = hijack;
        for cb in callbacks {
            self.callbacks += 1;
            let mut ctx = HookContext {
                point,
                frames: &self.frames,
                world: self.world,
                env: self.env,
                taint: &mut self.taint,
                scratch: self.scratch,
                params: hooks.params(),
                internal_count: self.records.len(),
                hijack: slot.as_deref_mut(),
            };
            cb(&mut ctx)?;
        }
        Ok(())
    }

    fn wants_before(&self, op: Opcode) -> bool {
        self.hooks.is_some_and(|h| h.has_before(op))
    }

    fn wants_after(&self, op: Opcode) -> bool {
        self.hooks.is_some_and(|h| h.has_after(op))
    }

    /// Sets up a frame for `desc`; `parent` is the caller's context address
    /// (`None` for the outer frame).
    fn start(&mut self, mut desc: CallDescriptor, parent: Option<Address>) -> Result<Started, HookError> {
        let is_root = parent.is_none();
        if desc.depth > DEPTH_LIMIT {
            return Ok(Started::Failed(desc.gas));
        }
        if !desc.transfer.is_zero() && self.world.balance(&desc.caller) < desc.transfer {
            return Ok(Started::Failed(desc.gas));
        }
        let mut created = None;
        if desc.kind.is_create() {
            let creator = desc.caller;
            let address = match desc.salt {
                Some(salt) => create2_address(&creator, &salt, &desc.input),
                None => {
                    // The outer creation's sender nonce was already bumped.
                    let nonce = self.world.nonce(&creator) - u64::from(is_root);
                    create_address(&creator, nonce)
                }
            };
            if !is_root {
                self.world.increment_nonce(&creator);
            }
            if !self.world.code(&address).is_empty() || self.world.nonce(&address) > 0 {
                // Address collision: the creation fails and keeps the gas.
                return Ok(Started::Failed(0));
            }
            desc.target = address;
            desc.context = address;
            created = Some(address);
        }
        let checkpoint = self.world.checkpoint();
        if let Some(address) = created {
            self.world.create_account(&address, &desc.input);
        }
        self.world
            .transfer(&desc.caller, &desc.context, desc.transfer)
            .expect("balance checked above");

        let record = parent.map(|from| {
            let (call_function, call_parameter) = split_input(&desc.input, desc.kind);
            self.records.push(InternalTxRecord {
                serial: self.records.len() as u64,
                kind: desc.kind,
                from_address: from,
                to_address: desc.target,
                value: if desc.kind == CallKind::DelegateCall || desc.kind == CallKind::StaticCall {
                    Word::zero()
                } else {
                    desc.transfer
                },
                call_function,
                call_parameter,
                output: Bytes::new(),
                evm_depth: desc.depth as u64,
                gas_limit: Word::from(desc.gas),
            });
            self.records.len() - 1
        });

        let (code, input): (Arc<[u8]>, Vec<u8>) = if desc.kind.is_create() {
            (Arc::from(std::mem::take(&mut desc.input)), Vec::new())
        } else {
            (self.world.code(&desc.target), std::mem::take(&mut desc.input))
        };
        let input_tags = if is_root {
            vec![TagSet::empty(); input.len()]
        } else {
            self.taint.argument_tags(desc.args_offset, input.len())
        };
        let precompile = if desc.kind.is_create() { None } else { is_precompile(&desc.target) };
        let mut machine = Machine::new(code, input, desc.gas);
        if let Some(id) = precompile {
            run_precompile(&mut machine, id, self.env);
        } else if machine.code.is_empty() {
            machine.halted = Some(HaltReason::Stop);
        }
        let frame = Frame {
            kind: desc.kind,
            context_address: desc.context,
            code_address: desc.target,
            caller: desc.caller,
            call_value: desc.apparent_value,
            depth: desc.depth,
            is_static: desc.is_static,
        };
        self.frames.push(LiveFrame { machine, frame });
        self.states.push(FrameState {
            checkpoint,
            record,
            created,
            ret_offset: desc.ret_offset,
            ret_size: desc.ret_size,
            waiting_on: None,
        });
        self.taint.enter_frame(input_tags);
        if precompile == Some(IDENTITY) {
            // The identity precompile returns its input unchanged.
            if let Some(shadow) = self.taint.frames_mut().last_mut() {
                shadow.output = shadow.input.clone();
            }
        }
        self.dispatch(InstrumentationPoint::ContractStart, None)?;
        Ok(Started::Frame)
    }

    /// Ends the halted top frame and resumes its parent. Returns the outer
    /// frame's result once the stack is empty.
    fn finish(&mut self) -> Result<Option<(HaltReason, Bytes, u64)>, HookError> {
        self.dispatch(InstrumentationPoint::ContractEnd, None)?;
        let LiveFrame { machine, .. } = self.frames.pop().expect("frame to finish");
        let state = self.states.pop().expect("state per frame");
        let shadow = self.taint.exit_frame();
        let mut reason = machine.halted.clone().expect("finished frames are halted");
        let mut gas = machine.gas;
        let mut output = machine.output.clone();

        if reason.is_success() {
            if let Some(address) = state.created {
                let cost = self.env.schedule.code_deposit_byte * output.len() as u64;
                if gas < cost {
                    reason = HaltReason::OutOfGas;
                    gas = 0;
                } else {
                    gas -= cost;
                    self.world.set_code(&address, output.0.clone());
                }
            }
        }
        if !reason.is_success() {
            self.world.revert_to(state.checkpoint);
        }
        if !reason.keeps_gas() {
            gas = 0;
        }
        if let Some(i) = state.record {
            self.records[i].output = output.clone();
        }
        if self.frames.is_empty() {
            return Ok(Some((reason, output, gas)));
        }

        let success = reason.is_success();
        let result = match (success, state.created) {
            (true, Some(address)) => address.to_word(),
            (true, None) => Word::one(),
            (false, _) => Word::zero(),
        };
        let returns_data = match reason {
            HaltReason::Revert => true,
            HaltReason::Return | HaltReason::Stop | HaltReason::SelfDestruct => state.created.is_none(),
            _ => false,
        };
        if !returns_data {
            output = Bytes::new();
        }
        let ret_tags = match shadow {
            Some(s) if returns_data => {
                let mut t = s.output;
                t.resize(output.len(), TagSet::empty());
                t
            }
            _ => vec![TagSet::empty(); output.len()],
        };
        let parent = self.frames.last_mut().expect("parent frame");
        parent.machine.resume_after_call(result, gas, output.0, state.ret_offset, state.ret_size);
        let mem_len = parent.machine.memory.len();
        self.taint.resume_call(ret_tags, state.ret_offset, state.ret_size, mem_len);
        let op = self.states.last_mut().and_then(|s| s.waiting_on.take());
        if let Some(op) = op {
            if self.wants_after(op) {
                self.dispatch(InstrumentationPoint::After(op), None)?;
            }
        }
        Ok(None)
    }

    fn run(&mut self) -> Result<(HaltReason, Bytes, u64), HookError> {
        loop {
            let top = self.frames.last().expect("running frame");
            if top.machine.halted.is_some() {
                if let Some(done) = self.finish()? {
                    return Ok(done);
                }
                continue;
            }
            let op = top.machine.current_opcode();
            let mut override_slot = None;
            if let Some(op) = op {
                self.opcodes += 1;
                if self.wants_before(op) {
                    let slot = if op == Opcode::JUMPI { Some(&mut override_slot) } else { None };
                    self.dispatch(InstrumentationPoint::Before(op), slot)?;
                }
            }
            let top = self.frames.last_mut().expect("running frame");
            let pending = self.taint.before_step(&top.machine);
            let outcome = step(&mut top.machine, &top.frame, self.world, self.env, override_slot);
            if let Some(p) = pending {
                self.taint.after_step(p, &top.machine, &top.frame, &outcome);
            }
            match outcome {
                StepOutcome::Continue => {
                    if let Some(op) = op {
                        if self.wants_after(op) {
                            self.dispatch(InstrumentationPoint::After(op), None)?;
                        }
                    }
                }
                StepOutcome::Halt(HaltReason::SelfDestruct) => {
                    let (beneficiary, moved) = top.machine.selfdestruct.expect("set on selfdestruct");
                    let from = top.frame.context_address;
                    let depth = top.frame.depth as u64 + 1;
                    self.records.push(InternalTxRecord {
                        serial: self.records.len() as u64,
                        kind: CallKind::SelfDestruct,
                        from_address: from,
                        to_address: beneficiary,
                        value: moved,
                        call_function: Bytes::new(),
                        call_parameter: Bytes::new(),
                        output: Bytes::new(),
                        evm_depth: depth,
                        gas_limit: Word::zero(),
                    });
                }
                StepOutcome::Halt(_) => {}
                StepOutcome::Spawn(desc) => {
                    let parent = top.frame.context_address;
                    let op = op.expect("spawned by an opcode");
                    self.states.last_mut().expect("state").waiting_on = Some(op);
                    match self.start(*desc, Some(parent))? {
                        Started::Frame => {}
                        Started::Failed(gas_back) => {
                            let top = self.frames.last_mut().expect("caller");
                            top.machine.resume_failed_call(gas_back);
                            let mem_len = top.machine.memory.len();
                            self.taint.resume_call(Vec::new(), 0, 0, mem_len);
                            self.states.last_mut().expect("state").waiting_on = None;
                            if self.wants_after(op) {
                                self.dispatch(InstrumentationPoint::After(op), None)?;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn run_precompile(m: &mut Machine, id: u64, env: &Env) {
    if id != IDENTITY {
        m.gas = 0;
        m.halted = Some(HaltReason::Unsupported(format!("precompile 0x{id:02x}")));
        return;
    }
    let g = &env.schedule;
    let cost = g.identity_base + g.identity_word * words(m.input.len() as u64);
    if m.gas < cost {
        m.gas = 0;
        m.halted = Some(HaltReason::OutOfGas);
        return;
    }
    m.gas -= cost;
    m.output = m.input.clone();
    m.output_range = (0, m.input.len());
    m.halted = Some(HaltReason::Return);
}

/// Executes one normal transaction against `world`. Fees are charged to the
/// sender; queued destructions are applied before `transactionEnd` fires.
pub fn execute_transaction(
    world: &mut WorldState<'_>,
    env: &Env,
    tx: &TxInput,
    hooks: Option<&Registry>,
    scratch: &mut Scratch,
) -> Result<TxExecution, TxRejected> {
    let is_create = tx.to.is_none();
    let intrinsic = env.schedule.intrinsic(&tx.input, is_create);
    if tx.gas_limit < intrinsic {
        return Err(TxRejected::IntrinsicGas {
            limit: tx.gas_limit,
            intrinsic,
        });
    }
    let max_fee = Word::from(tx.gas_limit).full_mul(tx.gas_price);
    let needed = max_fee + primitive_types::U512::from(tx.value);
    if primitive_types::U512::from(world.balance(&tx.from)) < needed {
        return Err(TxRejected::InsufficientFunds);
    }
    let policy = hooks.map(Registry::policy).unwrap_or_default();
    let mut driver = Driver {
        world,
        env,
        hooks,
        scratch,
        taint: TaintEngine::new(policy),
        frames: Vec::new(),
        states: Vec::new(),
        records: Vec::new(),
        opcodes: 0,
        callbacks: 0,
    };
    driver.taint.begin_transaction();

    let outcome = (|| -> Result<(HaltReason, Bytes, u64, Option<Address>), HookError> {
        driver.dispatch(InstrumentationPoint::TransactionStart, None)?;
        driver.world.increment_nonce(&tx.from);
        let desc = CallDescriptor {
            kind: if is_create { CallKind::Create } else { CallKind::Call },
            caller: tx.from,
            target: tx.to.unwrap_or(Address::ZERO),
            context: tx.to.unwrap_or(Address::ZERO),
            transfer: tx.value,
            apparent_value: tx.value,
            input: tx.input.clone(),
            gas: tx.gas_limit - intrinsic,
            is_static: false,
            depth: 1,
            salt: None,
            args_offset: 0,
            ret_offset: 0,
            ret_size: 0,
        };
        let con_address = if is_create {
            Some(create_address(&tx.from, driver.world.nonce(&tx.from) - 1))
        } else {
            None
        };
        match driver.start(desc, None)? {
            Started::Frame => {
                let (reason, output, gas) = driver.run()?;
                Ok((reason, output, gas, con_address))
            }
            Started::Failed(gas) => Ok((HaltReason::OutOfGas, Bytes::new(), gas, con_address)),
        }
    })();

    let (halt, output, gas_left, con_address, callback_error) = match outcome {
        Ok((r, o, g, c)) => (r, o, g, c, None),
        Err(e) => (HaltReason::Unsupported("callback error".into()), Bytes::new(), 0, None, Some(e.to_string())),
    };
    let gas_used = tx.gas_limit - gas_left;
    let fee = Word::from(gas_used).overflowing_mul(tx.gas_price).0;
    driver.world.charge_fee(&tx.from, fee);
    driver.world.finalize();
    let mut callback_error = callback_error;
    if callback_error.is_none() {
        if let Err(e) = driver.dispatch(InstrumentationPoint::TransactionEnd, None) {
            callback_error = Some(e.to_string());
        }
    }
    let success = halt.is_success();
    Ok(TxExecution {
        success,
        output: if success || halt == HaltReason::Revert { output } else { Bytes::new() },
        halt,
        gas_used,
        con_address,
        internal_txns: driver.records,
        opcodes: driver.opcodes,
        callbacks_invoked: driver.callbacks,
        callback_error,
    })
}
