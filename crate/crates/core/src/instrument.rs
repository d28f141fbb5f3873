//! Instrumentation points, callback registries and the context handed to
//! callbacks.
//!
//! Callbacks fire only at points they are registered for. A callback sees
//! the executing frame, the world and the taint engine through
//! [`HookContext`]; apart from taint labels and the branch override of
//! [`HookContext::hijack`] every accessor is read-only.

use std::any::{Any, TypeId};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::evm::machine::{Env, Frame, HaltReason, Machine};
use crate::evm::opcode::Opcode;
use crate::evm::world::WorldState;
use crate::primitives::{Address, Word, B256};
use crate::records::CallKind;
use crate::taint::{Location, ShadowFrame, TagSet, TaintEngine, TaintPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InstrumentationPoint {
    Before(Opcode),
    After(Opcode),
    TransactionStart,
    TransactionEnd,
    ContractStart,
    ContractEnd,
}

impl fmt::Display for InstrumentationPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstrumentationPoint::Before(op) => write!(f, "{}", op.name().to_ascii_lowercase()),
            InstrumentationPoint::After(op) => {
                let lower = op.name().to_ascii_lowercase();
                let mut chars = lower.chars();
                let first = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or_default();
                write!(f, "after{first}{}", chars.as_str())
            }
            InstrumentationPoint::TransactionStart => f.write_str("transactionStart"),
            InstrumentationPoint::TransactionEnd => f.write_str("transactionEnd"),
            InstrumentationPoint::ContractStart => f.write_str("contractStart"),
            InstrumentationPoint::ContractEnd => f.write_str("contractEnd"),
        }
    }
}

/// Parses the script-style names: `call`, `afterCall`, `transactionStart`, ...
impl FromStr for InstrumentationPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "transactionStart" => return Ok(InstrumentationPoint::TransactionStart),
            "transactionEnd" => return Ok(InstrumentationPoint::TransactionEnd),
            "contractStart" => return Ok(InstrumentationPoint::ContractStart),
            "contractEnd" => return Ok(InstrumentationPoint::ContractEnd),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("after") {
            if let Ok(op) = rest.parse::<Opcode>() {
                return Ok(InstrumentationPoint::After(op));
            }
        }
        s.parse::<Opcode>()
            .map(InstrumentationPoint::Before)
            .map_err(|_| format!("unknown instrumentation point `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HookError {
    /// Misuse of the context API, such as peeking past the stack.
    #[error("context error: {0}")]
    Context(String),
    /// The callback itself gave up.
    #[error("callback failed: {0}")]
    Failed(String),
}

pub type Callback = Arc<dyn Fn(&mut HookContext<'_, '_>) -> Result<(), HookError> + Send + Sync>;

/// Callbacks keyed by point plus the parameters and taint policy of a run.
/// Immutable once a replay starts and shareable across worker threads.
#[derive(Clone, Default)]
pub struct Registry {
    callbacks: HashMap<InstrumentationPoint, Vec<Callback>>,
    before: Vec<bool>,
    after: Vec<bool>,
    params: BTreeMap<String, String>,
    policy: TaintPolicy,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut points: Vec<String> = self.callbacks.keys().map(|p| p.to_string()).collect();
        points.sort();
        f.debug_struct("Registry")
            .field("points", &points)
            .field("params", &self.params)
            .field("policy", &self.policy)
            .finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Registry {
            before: vec![false; 256],
            after: vec![false; 256],
            ..Default::default()
        }
    }

    /// Appends a callback; callbacks on one point run in registration order.
    pub fn on<F>(mut self, point: InstrumentationPoint, f: F) -> Self
    where
        F: Fn(&mut HookContext<'_, '_>) -> Result<(), HookError> + Send + Sync + 'static,
    {
        self.add(point, Arc::new(f));
        self
    }

    pub fn add(&mut self, point: InstrumentationPoint, f: Callback) {
        if self.before.is_empty() {
            self.before = vec![false; 256];
            self.after = vec![false; 256];
        }
        match point {
            InstrumentationPoint::Before(op) => self.before[op.0 as usize] = true,
            InstrumentationPoint::After(op) => self.after[op.0 as usize] = true,
            _ => {}
        }
        self.callbacks.entry(point).or_default().push(f);
    }

    pub fn with_param(mut self, key: &str, value: &str) -> Self {
        self.params.insert(key.to_owned(), value.to_owned());
        self
    }

    pub fn set_param(&mut self, key: &str, value: &str) {
        self.params.insert(key.to_owned(), value.to_owned());
    }

    pub fn with_policy(mut self, policy: TaintPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn policy(&self) -> TaintPolicy {
        self.policy
    }

    pub fn params(&self) -> &BTreeMap<String, String> {
        &self.params
    }

    pub fn is_empty(&self) -> bool {
        self.callbacks.is_empty()
    }

    pub fn callbacks(&self, point: InstrumentationPoint) -> &[Callback] {
        self.callbacks.get(&point).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_before(&self, op: Opcode) -> bool {
        self.before.get(op.0 as usize).copied().unwrap_or(false)
    }

    pub fn has_after(&self, op: Opcode) -> bool {
        self.after.get(op.0 as usize).copied().unwrap_or(false)
    }

    pub fn has(&self, point: InstrumentationPoint) -> bool {
        self.callbacks.contains_key(&point)
    }
}

/// Per-transaction state for callbacks, keyed by type.
#[derive(Default)]
pub struct Scratch {
    map: HashMap<TypeId, Box<dyn Any + Send>>,
}

impl fmt::Debug for Scratch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scratch({} entries)", self.map.len())
    }
}

impl Scratch {
    pub fn get_mut<T: Default + Send + 'static>(&mut self) -> &mut T {
        self.map
            .entry(TypeId::of::<T>())
            .or_insert_with(|| Box::new(T::default()))
            .downcast_mut()
            .expect("keyed by type id")
    }

    pub fn get<T: 'static>(&self) -> Option<&T> {
        self.map.get(&TypeId::of::<T>()).and_then(|b| b.downcast_ref())
    }

    pub fn take<T: Default + Send + 'static>(&mut self) -> T {
        std::mem::take(self.get_mut::<T>())
    }
}

/// A frame on the driver's stack, as seen by callbacks.
#[derive(Debug)]
pub struct LiveFrame {
    pub machine: Machine,
    pub frame: Frame,
}

pub struct HookContext<'x, 'w> {
    pub(crate) point: InstrumentationPoint,
    pub(crate) frames: &'x [LiveFrame],
    pub(crate) world: &'x WorldState<'w>,
    pub(crate) env: &'x Env,
    pub(crate) taint: &'x mut TaintEngine,
    pub(crate) scratch: &'x mut Scratch,
    pub(crate) params: &'x BTreeMap<String, String>,
    pub(crate) internal_count: usize,
    pub(crate) hijack: Option<&'x mut Option<bool>>,
}

impl<'x, 'w> HookContext<'x, 'w> {
    fn live(&self) -> Result<&LiveFrame, HookError> {
        self.frames
            .last()
            .ok_or_else(|| HookError::Context(format!("no frame at {}", self.point)))
    }

    pub fn point(&self) -> InstrumentationPoint {
        self.point
    }

    /// Opcode of a before/after point.
    pub fn op(&self) -> Option<Opcode> {
        match self.point {
            InstrumentationPoint::Before(op) | InstrumentationPoint::After(op) => Some(op),
            _ => None,
        }
    }

    /// Operand width for PUSH opcodes, 0 otherwise.
    pub fn op_n(&self) -> usize {
        self.op().map_or(0, Opcode::push_width)
    }

    pub fn stack_len(&self) -> usize {
        self.frames.last().map_or(0, |f| f.machine.stack.len())
    }

    /// `n = 0` is the top of the stack.
    pub fn stack_peek(&self, n: usize) -> Result<Word, HookError> {
        let live = self.live()?;
        live.machine
            .stack
            .peek(n)
            .ok_or_else(|| HookError::Context(format!("stack peek({n}) with {} items", live.machine.stack.len())))
    }

    /// Bytes `[start, end)`; bytes beyond the touched memory read as zero.
    pub fn mem_slice(&self, start: usize, end: usize) -> Result<Vec<u8>, HookError> {
        if end < start {
            return Err(HookError::Context(format!("memory slice {start}..{end}")));
        }
        Ok(self.live()?.machine.memory.read(start, end - start))
    }

    pub fn mem_uint(&self, offset: usize) -> Result<Word, HookError> {
        Ok(self.live()?.machine.memory.read_word(offset))
    }

    pub fn mem_len(&self) -> usize {
        self.frames.last().map_or(0, |f| f.machine.memory.len())
    }

    pub fn frame(&self) -> Option<&Frame> {
        self.frames.last().map(|f| &f.frame)
    }

    pub fn call_kind(&self) -> Option<CallKind> {
        self.frame().map(|f| f.kind)
    }

    /// Context contract: owner of the storage being used.
    pub fn self_address(&self) -> Result<Address, HookError> {
        Ok(self.live()?.frame.context_address)
    }

    pub fn code_address(&self) -> Result<Address, HookError> {
        Ok(self.live()?.frame.code_address)
    }

    pub fn caller(&self) -> Result<Address, HookError> {
        Ok(self.live()?.frame.caller)
    }

    pub fn value(&self) -> Result<Word, HookError> {
        Ok(self.live()?.frame.call_value)
    }

    pub fn input(&self) -> Result<&[u8], HookError> {
        Ok(&self.live()?.machine.input)
    }

    pub fn pc(&self) -> Result<usize, HookError> {
        Ok(self.live()?.machine.pc)
    }

    pub fn gas(&self) -> Result<u64, HookError> {
        Ok(self.live()?.machine.gas)
    }

    /// Depth of the executing frame; the outermost frame has depth 1.
    pub fn depth(&self) -> usize {
        self.frames.last().map_or(0, |f| f.frame.depth)
    }

    pub fn return_data(&self) -> Result<&[u8], HookError> {
        Ok(&self.live()?.machine.ret)
    }

    /// Output and halt reason of a finished frame (at contractEnd).
    pub fn frame_result(&self) -> Option<(&HaltReason, &[u8])> {
        let m = &self.frames.last()?.machine;
        m.halted.as_ref().map(|r| (r, &m.output[..]))
    }

    pub fn balance(&self, address: &Address) -> Word {
        self.world.peek_balance(address)
    }

    pub fn nonce(&self, address: &Address) -> u64 {
        self.world.peek_nonce(address)
    }

    pub fn code(&self, address: &Address) -> Vec<u8> {
        self.world.peek_code(address).to_vec()
    }

    pub fn storage(&self, address: &Address, slot: &Word) -> Word {
        self.world.peek_storage(address, slot)
    }

    pub fn block_number(&self) -> u64 {
        self.env.block.number
    }

    pub fn timestamp(&self) -> u64 {
        self.env.block.timestamp
    }

    pub fn txn_hash(&self) -> B256 {
        self.env.tx.hash
    }

    pub fn txn_index(&self) -> u64 {
        self.env.tx.index
    }

    pub fn origin(&self) -> Address {
        self.env.tx.origin
    }

    /// Internal transactions started so far in this normal transaction.
    pub fn internal_txn_count(&self) -> usize {
        self.internal_count
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn scratch<T: Default + Send + 'static>(&mut self) -> &mut T {
        self.scratch.get_mut::<T>()
    }

    /// Overrides the branch decision of the JUMPI about to execute.
    pub fn hijack(&mut self, take_jump: bool) -> Result<(), HookError> {
        match self.hijack.as_deref_mut() {
            Some(slot) => {
                *slot = Some(take_jump);
                Ok(())
            }
            None => Err(HookError::Context(format!("hijack is only valid before jumpi, not at {}", self.point))),
        }
    }

    fn engine(&mut self) -> &mut TaintEngine {
        if !self.taint.is_active() {
            self.taint.activate(self.frames.iter().map(|f| &f.machine));
        }
        self.taint
    }

    fn check(&self, loc: Location) -> Result<(), HookError> {
        let m = self.frames.last().map(|f| &f.machine);
        let ok = |len: usize, o: usize, s: usize| o.checked_add(s).is_some_and(|e| e <= len);
        let fine = match (loc, m) {
            (Location::Storage(..), _) => true,
            (_, None) => false,
            (Location::Stack(n), Some(m)) => n < m.stack.len(),
            (Location::Memory(o, s), Some(m)) => ok(m.memory.len(), o, s),
            (Location::Input(o, s), Some(m)) => ok(m.input.len(), o, s),
            (Location::ReturnData(o, s), Some(m)) => ok(m.ret.len(), o, s),
        };
        if fine {
            Ok(())
        } else {
            Err(HookError::Context(format!("taint location {loc:?} out of range")))
        }
    }

    pub fn label(&mut self, loc: Location, tag: &str) -> Result<(), HookError> {
        self.check(loc)?;
        self.engine().label(loc, tag).map_err(|e| HookError::Context(e.to_string()))
    }

    pub fn clear(&mut self, loc: Location) -> Result<(), HookError> {
        self.check(loc)?;
        if !self.taint.is_active() {
            return Ok(());
        }
        self.taint.clear(loc).map_err(|e| HookError::Context(e.to_string()))
    }

    pub fn peek(&self, loc: Location) -> Result<TagSet, HookError> {
        self.check(loc)?;
        if !self.taint.is_active() {
            return Ok(TagSet::empty());
        }
        self.taint.peek(loc).map_err(|e| HookError::Context(e.to_string()))
    }

    /// Shadow of the running frame, or `None` while taint tracking is off.
    pub fn shadow(&self) -> Option<&ShadowFrame> {
        if self.taint.is_active() {
            self.taint.current()
        } else {
            None
        }
    }

    pub fn label_stack(&mut self, n: usize, tag: &str) -> Result<(), HookError> {
        self.label(Location::Stack(n), tag)
    }

    pub fn label_memory(&mut self, offset: usize, size: usize, tag: &str) -> Result<(), HookError> {
        self.label(Location::Memory(offset, size), tag)
    }

    pub fn label_input(&mut self, offset: usize, size: usize, tag: &str) -> Result<(), HookError> {
        self.label(Location::Input(offset, size), tag)
    }

    pub fn label_return_data(&mut self, offset: usize, size: usize, tag: &str) -> Result<(), HookError> {
        self.label(Location::ReturnData(offset, size), tag)
    }

    pub fn label_storage(&mut self, address: Address, slot: Word, tag: &str) -> Result<(), HookError> {
        self.label(Location::Storage(address, slot), tag)
    }

    pub fn peek_stack(&self, n: usize) -> Result<TagSet, HookError> {
        self.peek(Location::Stack(n))
    }

    pub fn peek_memory(&self, offset: usize, size: usize) -> Result<TagSet, HookError> {
        self.peek(Location::Memory(offset, size))
    }

    pub fn peek_input(&self, offset: usize, size: usize) -> Result<TagSet, HookError> {
        self.peek(Location::Input(offset, size))
    }

    pub fn peek_return_data(&self, offset: usize, size: usize) -> Result<TagSet, HookError> {
        self.peek(Location::ReturnData(offset, size))
    }

    pub fn peek_storage(&self, address: Address, slot: Word) -> Result<TagSet, HookError> {
        self.peek(Location::Storage(address, slot))
    }

    pub fn clear_stack(&mut self, n: usize) -> Result<(), HookError> {
        self.clear(Location::Stack(n))
    }

    pub fn clear_memory(&mut self, offset: usize, size: usize) -> Result<(), HookError> {
        self.clear(Location::Memory(offset, size))
    }

    pub fn clear_storage(&mut self, address: Address, slot: Word) -> Result<(), HookError> {
        self.clear(Location::Storage(address, slot))
    }
}
