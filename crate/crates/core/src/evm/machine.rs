//! One execution unit and the single-opcode step function.
//!
//! `step` never recurses into a callee. Message calls and creations come
//! back as [`StepOutcome::Spawn`]; the driver in `executor` owns the frame
//! stack and resumes the caller with [`Machine::resume_after_call`].

use std::collections::BTreeMap;
use std::sync::Arc;

use primitive_types::U512;

use super::gas::{words, GasSchedule};
use super::opcode::Opcode;
use super::world::WorldState;
use crate::primitives::{keccak256, word_to_be, Address, Bytes, Word, B256};
use crate::records::{CallKind, LogRecord};

pub const STACK_LIMIT: usize = 1024;
pub const DEPTH_LIMIT: usize = 1024;

/// Memory beyond this size is treated as unaffordable.
const MEMORY_LIMIT: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidKind {
    StackUnderflow,
    StackOverflow,
    BadJump,
    UndefinedOpcode(u8),
    StaticViolation,
    Designated,
    ReturnDataOutOfBounds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HaltReason {
    Stop,
    Return,
    Revert,
    SelfDestruct,
    Invalid(InvalidKind),
    OutOfGas,
    Unsupported(String),
}

impl HaltReason {
    pub fn is_success(&self) -> bool {
        matches!(self, HaltReason::Stop | HaltReason::Return | HaltReason::SelfDestruct)
    }

    /// Whether unused gas goes back to the caller.
    pub fn keeps_gas(&self) -> bool {
        self.is_success() || matches!(self, HaltReason::Revert)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Stack {
    data: Vec<Word>,
}

impl Stack {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `n = 0` is the top.
    pub fn peek(&self, n: usize) -> Option<Word> {
        self.data.len().checked_sub(n + 1).map(|i| self.data[i])
    }

    pub fn as_slice(&self) -> &[Word] {
        &self.data
    }

    fn pop(&mut self) -> Word {
        self.data.pop().expect("stack depth checked before execution")
    }

    fn push(&mut self, w: Word) {
        debug_assert!(self.data.len() < STACK_LIMIT);
        self.data.push(w);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Memory {
    data: Vec<u8>,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reads `[offset, offset+size)`, with zeros past the end.
    pub fn read(&self, offset: usize, size: usize) -> Vec<u8> {
        let mut out = vec![0u8; size];
        if offset < self.data.len() {
            let end = (offset + size).min(self.data.len());
            out[..end - offset].copy_from_slice(&self.data[offset..end]);
        }
        out
    }

    pub fn read_word(&self, offset: usize) -> Word {
        Word::from_big_endian(&self.read(offset, 32))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    fn write(&mut self, offset: usize, bytes: &[u8]) {
        self.data[offset..offset + bytes.len()].copy_from_slice(bytes);
    }

    /// Copies `size` bytes of `src` starting at `src_offset`, zero padded.
    fn copy_padded(&mut self, offset: usize, src: &[u8], src_offset: usize, size: usize) {
        for i in 0..size {
            let b = src_offset
                .checked_add(i)
                .and_then(|j| src.get(j))
                .copied()
                .unwrap_or(0);
            self.data[offset + i] = b;
        }
    }

    fn grow_to(&mut self, len: usize) {
        if len > self.data.len() {
            self.data.resize(len, 0);
        }
    }
}

/// Execution context of a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: CallKind,
    /// Account whose storage and balance the code operates on.
    pub context_address: Address,
    /// Account whose code runs.
    pub code_address: Address,
    pub caller: Address,
    pub call_value: Word,
    pub depth: usize,
    pub is_static: bool,
}

#[derive(Debug, Clone, Default)]
pub struct BlockEnv {
    pub number: u64,
    pub timestamp: u64,
    pub coinbase: Address,
    pub difficulty: Word,
    pub gas_limit: Word,
    /// Hashes of up to 256 ancestors, for BLOCKHASH.
    pub ancestor_hashes: BTreeMap<u64, B256>,
}

#[derive(Debug, Clone, Default)]
pub struct TxEnv {
    pub hash: B256,
    pub index: u64,
    pub origin: Address,
    pub gas_price: Word,
}

#[derive(Debug, Clone, Default)]
pub struct Env {
    pub block: BlockEnv,
    pub tx: TxEnv,
    pub schedule: GasSchedule,
}

/// A message call or creation requested by the running frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallDescriptor {
    pub kind: CallKind,
    /// `msg.sender` inside the callee.
    pub caller: Address,
    /// Code address; for creations, filled in by the driver.
    pub target: Address,
    /// Storage context of the callee.
    pub context: Address,
    /// Wei moved from `caller`'s context to `context`.
    pub transfer: Word,
    /// CALLVALUE seen by the callee.
    pub apparent_value: Word,
    pub input: Vec<u8>,
    pub gas: u64,
    pub is_static: bool,
    pub depth: usize,
    pub salt: Option<B256>,
    pub args_offset: usize,
    pub ret_offset: usize,
    pub ret_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Spawn(Box<CallDescriptor>),
    Halt(HaltReason),
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub code: Arc<[u8]>,
    jumpdests: Arc<[bool]>,
    pub pc: usize,
    pub gas: u64,
    pub stack: Stack,
    pub memory: Memory,
    pub input: Bytes,
    /// Return data of the most recent completed sub-call.
    pub ret: Bytes,
    pub output: Bytes,
    /// Memory range `[offset, offset+len)` that RETURN/REVERT produced.
    pub output_range: (usize, usize),
    pub halted: Option<HaltReason>,
    /// Beneficiary and moved value of a SELFDESTRUCT halt.
    pub selfdestruct: Option<(Address, Word)>,
}

pub fn analyze_jumpdests(code: &[u8]) -> Vec<bool> {
    let mut out = vec![false; code.len()];
    let mut i = 0;
    while i < code.len() {
        let op = Opcode(code[i]);
        if op == Opcode::JUMPDEST {
            out[i] = true;
        }
        i += 1 + op.push_width();
    }
    out
}

fn to_usize(w: Word) -> Option<usize> {
    if w > Word::from(u64::MAX) {
        None
    } else {
        usize::try_from(w.as_u64()).ok()
    }
}

fn is_negative(w: Word) -> bool {
    w.bit(255)
}

fn negate(w: Word) -> Word {
    (!w).overflowing_add(Word::one()).0
}

fn abs(w: Word) -> Word {
    if is_negative(w) {
        negate(w)
    } else {
        w
    }
}

pub fn sdiv(a: Word, b: Word) -> Word {
    if b.is_zero() {
        return Word::zero();
    }
    let q = abs(a) / abs(b);
    if is_negative(a) != is_negative(b) {
        negate(q)
    } else {
        q
    }
}

pub fn smod(a: Word, b: Word) -> Word {
    if b.is_zero() {
        return Word::zero();
    }
    let r = abs(a) % abs(b);
    if is_negative(a) {
        negate(r)
    } else {
        r
    }
}

pub fn slt(a: Word, b: Word) -> bool {
    match (is_negative(a), is_negative(b)) {
        (true, false) => true,
        (false, true) => false,
        _ => a < b,
    }
}

pub fn sar(shift: Word, value: Word) -> Word {
    let neg = is_negative(value);
    if shift >= Word::from(256) {
        return if neg { Word::MAX } else { Word::zero() };
    }
    let s = shift.as_usize();
    if neg {
        !((!value) >> s)
    } else {
        value >> s
    }
}

pub fn signextend(b: Word, x: Word) -> Word {
    if b >= Word::from(31) {
        return x;
    }
    let bit = b.as_usize() * 8 + 7;
    let mask = (Word::one() << (bit + 1)) - Word::one();
    if x.bit(bit) {
        x | !mask
    } else {
        x & mask
    }
}

pub fn byte_at(i: Word, x: Word) -> Word {
    if i >= Word::from(32) {
        Word::zero()
    } else {
        Word::from(x.byte(31 - i.as_usize()))
    }
}

fn mod_wide(v: U512, n: Word) -> Word {
    let r = v % U512::from(n);
    Word::try_from(r).expect("remainder below a 256-bit modulus")
}

pub fn addmod(a: Word, b: Word, n: Word) -> Word {
    if n.is_zero() {
        return Word::zero();
    }
    mod_wide(U512::from(a) + U512::from(b), n)
}

pub fn mulmod(a: Word, b: Word, n: Word) -> Word {
    if n.is_zero() {
        return Word::zero();
    }
    mod_wide(a.full_mul(b), n)
}

fn bool_word(b: bool) -> Word {
    if b {
        Word::one()
    } else {
        Word::zero()
    }
}

type Halt = HaltReason;

impl Machine {
    pub fn new(code: Arc<[u8]>, input: Vec<u8>, gas: u64) -> Self {
        let jumpdests: Arc<[bool]> = Arc::from(analyze_jumpdests(&code));
        Machine {
            code,
            jumpdests,
            pc: 0,
            gas,
            stack: Stack::default(),
            memory: Memory::default(),
            input: Bytes(input),
            ret: Bytes::new(),
            output: Bytes::new(),
            output_range: (0, 0),
            halted: None,
            selfdestruct: None,
        }
    }

    pub fn current_opcode(&self) -> Option<Opcode> {
        self.code.get(self.pc).map(|b| Opcode(*b))
    }

    fn charge(&mut self, cost: u64) -> Result<(), Halt> {
        if self.gas < cost {
            return Err(Halt::OutOfGas);
        }
        self.gas -= cost;
        Ok(())
    }

    /// Charges expansion for `[offset, offset+size)` and grows memory.
    /// Returns the range as native integers; empty ranges never expand.
    fn touch(&mut self, offset: Word, size: Word, schedule: &GasSchedule) -> Result<(usize, usize), Halt> {
        if size.is_zero() {
            return Ok((0, 0));
        }
        let (o, s) = match (to_usize(offset), to_usize(size)) {
            (Some(o), Some(s)) => (o as u64, s as u64),
            _ => return Err(Halt::OutOfGas),
        };
        let end = o.checked_add(s).ok_or(Halt::OutOfGas)?;
        if end > MEMORY_LIMIT {
            return Err(Halt::OutOfGas);
        }
        let cur_words = words(self.memory.len() as u64);
        let new_words = words(end);
        if new_words > cur_words {
            let cost = schedule.memory_cost(new_words) - schedule.memory_cost(cur_words);
            self.charge(cost)?;
            self.memory.grow_to((new_words * 32) as usize);
        }
        Ok((o as usize, s as usize))
    }

    fn halt(&mut self, reason: HaltReason) -> StepOutcome {
        if !reason.keeps_gas() {
            self.gas = 0;
        }
        self.halted = Some(reason.clone());
        StepOutcome::Halt(reason)
    }

    /// Completes a CALL/CREATE opcode once its callee has finished.
    pub fn resume_after_call(&mut self, result: Word, returned_gas: u64, ret: Vec<u8>, ret_offset: usize, ret_size: usize) {
        self.gas += returned_gas;
        let n = ret_size.min(ret.len());
        if n > 0 {
            self.memory.write(ret_offset, &ret[..n]);
        }
        self.ret = Bytes(ret);
        self.stack.push(result);
    }

    /// Completes a call that never started a frame (depth, balance).
    pub fn resume_failed_call(&mut self, returned_gas: u64) {
        self.gas += returned_gas;
        self.ret = Bytes::new();
        self.stack.push(Word::zero());
    }
}

/// Executes one opcode. `branch_override` replaces the decision of a JUMPI.
pub fn step(m: &mut Machine, frame: &Frame, world: &mut WorldState<'_>, env: &Env, branch_override: Option<bool>) -> StepOutcome {
    if let Some(reason) = &m.halted {
        return StepOutcome::Halt(reason.clone());
    }
    match exec(m, frame, world, env, branch_override) {
        Ok(outcome) => outcome,
        Err(reason) => m.halt(reason),
    }
}

fn exec(m: &mut Machine, frame: &Frame, world: &mut WorldState<'_>, env: &Env, branch_override: Option<bool>) -> Result<StepOutcome, Halt> {
    let Some(op) = m.current_opcode() else {
        return Ok(m.halt(Halt::Stop));
    };
    let Some(info) = op.info() else {
        return Err(Halt::Invalid(InvalidKind::UndefinedOpcode(op.0)));
    };
    let inputs = info.inputs as usize;
    if m.stack.len() < inputs {
        return Err(Halt::Invalid(InvalidKind::StackUnderflow));
    }
    if m.stack.len() - inputs + info.outputs as usize > STACK_LIMIT {
        return Err(Halt::Invalid(InvalidKind::StackOverflow));
    }
    let g = &env.schedule;
    m.charge(g.base_cost(op))?;
    let mut next_pc = m.pc + 1;

    match op.0 {
        0x00 => return Ok(m.halt(Halt::Stop)),
        0x01..=0x0b | 0x10..=0x1d => {
            let a = m.stack.pop();
            let r = match op {
                Opcode::ISZERO => bool_word(a.is_zero()),
                Opcode::NOT => !a,
                _ => {
                    let b = m.stack.pop();
                    match op {
                        Opcode::ADD => a.overflowing_add(b).0,
                        Opcode::MUL => a.overflowing_mul(b).0,
                        Opcode::SUB => a.overflowing_sub(b).0,
                        Opcode::DIV => a.checked_div(b).unwrap_or_default(),
                        Opcode::SDIV => sdiv(a, b),
                        Opcode::MOD => a.checked_rem(b).unwrap_or_default(),
                        Opcode::SMOD => smod(a, b),
                        Opcode::ADDMOD => addmod(a, b, m.stack.pop()),
                        Opcode::MULMOD => mulmod(a, b, m.stack.pop()),
                        Opcode::EXP => {
                            let bytes = (b.bits() as u64).div_ceil(8);
                            m.charge(g.exp_byte * bytes)?;
                            a.overflowing_pow(b).0
                        }
                        Opcode::SIGNEXTEND => signextend(a, b),
                        Opcode::LT => bool_word(a < b),
                        Opcode::GT => bool_word(a > b),
                        Opcode::SLT => bool_word(slt(a, b)),
                        Opcode::SGT => bool_word(slt(b, a)),
                        Opcode::EQ => bool_word(a == b),
                        Opcode::AND => a & b,
                        Opcode::OR => a | b,
                        Opcode::XOR => a ^ b,
                        Opcode::BYTE => byte_at(a, b),
                        Opcode::SHL => {
                            if a >= Word::from(256) {
                                Word::zero()
                            } else {
                                b << a.as_usize()
                            }
                        }
                        Opcode::SHR => {
                            if a >= Word::from(256) {
                                Word::zero()
                            } else {
                                b >> a.as_usize()
                            }
                        }
                        Opcode::SAR => sar(a, b),
                        _ => unreachable!("arithmetic opcode table"),
                    }
                }
            };
            m.stack.push(r);
        }
        0x20 => {
            let (offset, size) = (m.stack.pop(), m.stack.pop());
            let (o, s) = m.touch(offset, size, g)?;
            m.charge(g.sha3_word * words(s as u64))?;
            let h = keccak256(&m.memory.read(o, s));
            m.stack.push(h.to_word());
        }
        0x30 => m.stack.push(frame.context_address.to_word()),
        0x31 => {
            let a = Address::from_word(m.stack.pop());
            let b = world.balance(&a);
            m.stack.push(b);
        }
        0x32 => m.stack.push(env.tx.origin.to_word()),
        0x33 => m.stack.push(frame.caller.to_word()),
        0x34 => m.stack.push(frame.call_value),
        0x35 => {
            let off = m.stack.pop();
            let mut buf = [0u8; 32];
            if let Some(o) = to_usize(off) {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = o.checked_add(i).and_then(|j| m.input.get(j)).copied().unwrap_or(0);
                }
            }
            m.stack.push(Word::from_big_endian(&buf));
        }
        0x36 => m.stack.push(Word::from(m.input.len())),
        0x37 | 0x39 | 0x3e => {
            let (dest, off, size) = (m.stack.pop(), m.stack.pop(), m.stack.pop());
            if op == Opcode::RETURNDATACOPY {
                let end = off.overflowing_add(size);
                if end.1 || end.0 > Word::from(m.ret.len()) {
                    return Err(Halt::Invalid(InvalidKind::ReturnDataOutOfBounds));
                }
            }
            let (d, s) = m.touch(dest, size, g)?;
            m.charge(g.copy_word * words(s as u64))?;
            let src_off = to_usize(off).unwrap_or(usize::MAX);
            let src = match op {
                Opcode::CALLDATACOPY => m.input.0.clone(),
                Opcode::CODECOPY => m.code.to_vec(),
                _ => m.ret.0.clone(),
            };
            m.memory.copy_padded(d, &src, src_off, s);
        }
        0x38 => m.stack.push(Word::from(m.code.len())),
        0x3a => m.stack.push(env.tx.gas_price),
        0x3b => {
            let a = Address::from_word(m.stack.pop());
            let n = world.code(&a).len();
            m.stack.push(Word::from(n));
        }
        0x3c => {
            let a = Address::from_word(m.stack.pop());
            let (dest, off, size) = (m.stack.pop(), m.stack.pop(), m.stack.pop());
            let (d, s) = m.touch(dest, size, g)?;
            m.charge(g.copy_word * words(s as u64))?;
            let code = world.code(&a);
            m.memory.copy_padded(d, &code, to_usize(off).unwrap_or(usize::MAX), s);
        }
        0x3d => m.stack.push(Word::from(m.ret.len())),
        0x3f => {
            let a = Address::from_word(m.stack.pop());
            let h = world.code_hash(&a);
            m.stack.push(h.to_word());
        }
        0x40 => {
            let n = m.stack.pop();
            let cur = env.block.number;
            let h = match to_usize(n) {
                Some(n) if (n as u64) < cur && cur - (n as u64) <= 256 => {
                    env.block.ancestor_hashes.get(&(n as u64)).copied().unwrap_or(B256::ZERO)
                }
                _ => B256::ZERO,
            };
            m.stack.push(h.to_word());
        }
        0x41 => m.stack.push(env.block.coinbase.to_word()),
        0x42 => m.stack.push(Word::from(env.block.timestamp)),
        0x43 => m.stack.push(Word::from(env.block.number)),
        0x44 => m.stack.push(env.block.difficulty),
        0x45 => m.stack.push(env.block.gas_limit),
        0x50 => {
            m.stack.pop();
        }
        0x51 => {
            let off = m.stack.pop();
            let (o, _) = m.touch(off, Word::from(32), g)?;
            let w = m.memory.read_word(o);
            m.stack.push(w);
        }
        0x52 => {
            let (off, v) = (m.stack.pop(), m.stack.pop());
            let (o, _) = m.touch(off, Word::from(32), g)?;
            m.memory.write(o, &word_to_be(v));
        }
        0x53 => {
            let (off, v) = (m.stack.pop(), m.stack.pop());
            let (o, _) = m.touch(off, Word::one(), g)?;
            m.memory.write(o, &[v.byte(0)]);
        }
        0x54 => {
            let key = m.stack.pop();
            let v = world.sload(&frame.context_address, &key);
            m.stack.push(v);
        }
        0x55 => {
            if frame.is_static {
                return Err(Halt::Invalid(InvalidKind::StaticViolation));
            }
            let (key, v) = (m.stack.pop(), m.stack.pop());
            let current = world.peek_storage(&frame.context_address, &key);
            let cost = if current.is_zero() && !v.is_zero() {
                g.sstore_set
            } else {
                g.sstore_reset
            };
            m.charge(cost)?;
            world.sstore(&frame.context_address, &key, v);
        }
        0x56 => {
            let dest = m.stack.pop();
            next_pc = checked_jump(m, dest)?;
        }
        0x57 => {
            let (dest, cond) = (m.stack.pop(), m.stack.pop());
            let take = branch_override.unwrap_or(!cond.is_zero());
            if take {
                next_pc = checked_jump(m, dest)?;
            }
        }
        0x58 => m.stack.push(Word::from(m.pc)),
        0x59 => m.stack.push(Word::from(m.memory.len())),
        0x5a => m.stack.push(Word::from(m.gas)),
        0x5b => {}
        0x60..=0x7f => {
            let n = op.push_width();
            let mut buf = [0u8; 32];
            for i in 0..n {
                buf[32 - n + i] = m.code.get(m.pc + 1 + i).copied().unwrap_or(0);
            }
            m.stack.push(Word::from_big_endian(&buf));
            next_pc = m.pc + 1 + n;
        }
        0x80..=0x8f => {
            let n = (op.0 - 0x80) as usize;
            let v = m.stack.peek(n).expect("depth checked");
            m.stack.push(v);
        }
        0x90..=0x9f => {
            let n = (op.0 - 0x90) as usize + 1;
            let len = m.stack.data.len();
            m.stack.data.swap(len - 1, len - 1 - n);
        }
        0xa0..=0xa4 => {
            if frame.is_static {
                return Err(Halt::Invalid(InvalidKind::StaticViolation));
            }
            let (off, size) = (m.stack.pop(), m.stack.pop());
            let topics: Vec<B256> = (0..(op.0 - 0xa0)).map(|_| B256::from_word(m.stack.pop())).collect();
            let (o, s) = m.touch(off, size, g)?;
            m.charge(g.log_data_byte * s as u64)?;
            let data = m.memory.read(o, s);
            world.push_log(LogRecord {
                address: frame.context_address,
                topics,
                data: Bytes(data),
            });
        }
        0xf0 | 0xf5 => {
            if frame.is_static {
                return Err(Halt::Invalid(InvalidKind::StaticViolation));
            }
            let (value, off, size) = (m.stack.pop(), m.stack.pop(), m.stack.pop());
            let salt = if op == Opcode::CREATE2 {
                Some(B256::from_word(m.stack.pop()))
            } else {
                None
            };
            let (o, s) = m.touch(off, size, g)?;
            if salt.is_some() {
                m.charge(g.sha3_word * words(s as u64))?;
            }
            let init = m.memory.read(o, s);
            let gas = g.max_forward(m.gas);
            m.gas -= gas;
            m.pc = next_pc;
            return Ok(StepOutcome::Spawn(Box::new(CallDescriptor {
                kind: if salt.is_some() { CallKind::Create2 } else { CallKind::Create },
                caller: frame.context_address,
                target: Address::ZERO,
                context: Address::ZERO,
                transfer: value,
                apparent_value: value,
                input: init,
                gas,
                is_static: false,
                depth: frame.depth + 1,
                salt,
                args_offset: o,
                ret_offset: 0,
                ret_size: 0,
            })));
        }
        0xf1 | 0xf2 | 0xf4 | 0xfa => {
            let requested = m.stack.pop();
            let to = Address::from_word(m.stack.pop());
            let value = if matches!(op, Opcode::CALL | Opcode::CALLCODE) {
                m.stack.pop()
            } else {
                Word::zero()
            };
            let (args_off, args_size, ret_off, ret_size) = (m.stack.pop(), m.stack.pop(), m.stack.pop(), m.stack.pop());
            if op == Opcode::CALL && frame.is_static && !value.is_zero() {
                return Err(Halt::Invalid(InvalidKind::StaticViolation));
            }
            let (ao, asz) = m.touch(args_off, args_size, g)?;
            let (ro, rsz) = m.touch(ret_off, ret_size, g)?;
            let mut cost = 0;
            if !value.is_zero() {
                cost += g.call_value;
                if op == Opcode::CALL && !world.exists(&to) {
                    cost += g.call_new_account;
                }
            }
            m.charge(cost)?;
            let cap = g.max_forward(m.gas);
            let forward = match to_usize(requested) {
                Some(r) if (r as u64) < cap => r as u64,
                _ => cap,
            };
            m.gas -= forward;
            let stipend = if value.is_zero() { 0 } else { g.call_stipend };
            let input = m.memory.read(ao, asz);
            let (kind, caller, context, transfer, apparent, is_static) = match op {
                Opcode::CALL => (CallKind::Call, frame.context_address, to, value, value, frame.is_static),
                Opcode::CALLCODE => (
                    CallKind::CallCode,
                    frame.context_address,
                    frame.context_address,
                    value,
                    value,
                    frame.is_static,
                ),
                Opcode::DELEGATECALL => (
                    CallKind::DelegateCall,
                    frame.caller,
                    frame.context_address,
                    Word::zero(),
                    frame.call_value,
                    frame.is_static,
                ),
                _ => (CallKind::StaticCall, frame.context_address, to, Word::zero(), Word::zero(), true),
            };
            m.pc = next_pc;
            return Ok(StepOutcome::Spawn(Box::new(CallDescriptor {
                kind,
                caller,
                target: to,
                context,
                transfer,
                apparent_value: apparent,
                input,
                gas: forward + stipend,
                is_static,
                depth: frame.depth + 1,
                salt: None,
                args_offset: ao,
                ret_offset: ro,
                ret_size: rsz,
            })));
        }
        0xf3 | 0xfd => {
            let (off, size) = (m.stack.pop(), m.stack.pop());
            let (o, s) = m.touch(off, size, g)?;
            m.output = Bytes(m.memory.read(o, s));
            m.output_range = (o, s);
            let reason = if op == Opcode::RETURN { Halt::Return } else { Halt::Revert };
            return Ok(m.halt(reason));
        }
        0xfe => return Err(Halt::Invalid(InvalidKind::Designated)),
        0xff => {
            if frame.is_static {
                return Err(Halt::Invalid(InvalidKind::StaticViolation));
            }
            let beneficiary = Address::from_word(m.stack.pop());
            let moved = world.selfdestruct(&frame.context_address, &beneficiary);
            m.selfdestruct = Some((beneficiary, moved));
            return Ok(m.halt(Halt::SelfDestruct));
        }
        other => return Err(Halt::Unsupported(format!("opcode 0x{other:02x}"))),
    }
    m.pc = next_pc;
    Ok(StepOutcome::Continue)
}

fn checked_jump(m: &Machine, dest: Word) -> Result<usize, Halt> {
    match to_usize(dest) {
        Some(d) if m.jumpdests.get(d).copied().unwrap_or(false) => Ok(d),
        _ => Err(Halt::Invalid(InvalidKind::BadJump)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evm::world::InMemoryState;

    fn frame() -> Frame {
        Frame {
            kind: CallKind::Call,
            context_address: Address::from_low_u64(0xc0),
            code_address: Address::from_low_u64(0xc0),
            caller: Address::from_low_u64(0xee),
            call_value: Word::zero(),
            depth: 1,
            is_static: false,
        }
    }

    fn run(code: &[u8]) -> (Machine, HaltReason) {
        let state = InMemoryState::new();
        let mut world = WorldState::new(&state);
        let env = Env::default();
        let mut m = Machine::new(Arc::from(code.to_vec()), vec![], 1_000_000);
        let f = frame();
        loop {
            match step(&mut m, &f, &mut world, &env, None) {
                StepOutcome::Continue => {}
                StepOutcome::Halt(r) => return (m, r),
                StepOutcome::Spawn(_) => panic!("unexpected spawn"),
            }
        }
    }

    #[test]
    fn add_two_numbers() {
        let (m, r) = run(&[0x60, 0x02, 0x60, 0x03, 0x01]);
        assert_eq!(r, HaltReason::Stop);
        assert_eq!(m.stack.as_slice(), &[Word::from(5)]);
    }

    #[test]
    fn dup_on_empty_stack_underflows() {
        let (_, r) = run(&[0x80]);
        assert_eq!(r, HaltReason::Invalid(InvalidKind::StackUnderflow));
    }

    #[test]
    fn push_1025_overflows() {
        let mut code = Vec::new();
        for _ in 0..1025 {
            code.extend_from_slice(&[0x60, 0x01]);
        }
        let (m, r) = run(&code);
        assert_eq!(r, HaltReason::Invalid(InvalidKind::StackOverflow));
        assert_eq!(m.stack.len(), 1024);
    }

    #[test]
    fn jump_into_push_data_is_invalid() {
        // PUSH1 0x03 JUMP PUSH1 0x5b
        let (_, r) = run(&[0x60, 0x04, 0x56, 0x60, 0x5b]);
        assert_eq!(r, HaltReason::Invalid(InvalidKind::BadJump));
    }

    #[test]
    fn signed_helpers() {
        let minus_one = Word::MAX;
        let minus_two = negate(Word::from(2));
        assert_eq!(sdiv(Word::from(7), minus_one), negate(Word::from(7)));
        assert_eq!(smod(negate(Word::from(7)), Word::from(3)), minus_one);
        assert!(slt(minus_one, Word::zero()));
        assert_eq!(sar(Word::from(1), minus_two), minus_one);
        assert_eq!(signextend(Word::zero(), Word::from(0xff)), Word::MAX);
        assert_eq!(signextend(Word::zero(), Word::from(0x7f)), Word::from(0x7f));
        assert_eq!(byte_at(Word::from(31), Word::from(0xab)), Word::from(0xab));
        let min = Word::one() << 255;
        assert_eq!(sdiv(min, minus_one), min);
    }

    #[test]
    fn wide_modular_ops() {
        assert_eq!(addmod(Word::MAX, Word::from(2), Word::from(10)), Word::from(7));
        assert_eq!(mulmod(Word::MAX, Word::MAX, Word::from(12)), Word::from(9));
    }

    #[test]
    fn mstore_mload_roundtrip() {
        // PUSH1 7 PUSH1 0 MSTORE PUSH1 0 MLOAD
        let (m, _) = run(&[0x60, 0x07, 0x60, 0x00, 0x52, 0x60, 0x00, 0x51]);
        assert_eq!(m.stack.peek(0), Some(Word::from(7)));
        assert_eq!(m.memory.len(), 32);
    }

    #[test]
    fn out_of_gas_zeroes_gas() {
        let state = InMemoryState::new();
        let mut world = WorldState::new(&state);
        let mut m = Machine::new(Arc::from(vec![0x60, 0x01, 0x60, 0x01]), vec![], 4);
        let env = Env::default();
        assert_eq!(step(&mut m, &frame(), &mut world, &env, None), StepOutcome::Continue);
        assert_eq!(step(&mut m, &frame(), &mut world, &env, None), StepOutcome::Halt(HaltReason::OutOfGas));
        assert_eq!(m.gas, 0);
    }
}
