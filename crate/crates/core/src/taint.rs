//! Dynamic taint tracking over stack, memory, call input, return data and
//! storage.
//!
//! Stack slots carry one [`TagSet`] per word; memory, input and return data
//! carry one per byte. Propagation is explicit-flow only: a result is
//! tainted by the operands it was computed from, loads are tainted by both
//! their address operands and the loaded contents, and stores copy the
//! stored value's tags. Branch conditions never taint later values.
//!
//! The engine stays inactive until a source policy is configured or a
//! label is placed, so replays that never use taint pay nothing.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::evm::machine::{Frame, HaltReason, Machine, StepOutcome};
use crate::evm::opcode::Opcode;
use crate::primitives::{Address, Word};

pub type Tag = Arc<str>;

/// An immutable, cheaply cloned set of tags. The empty set allocates nothing.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct TagSet(Option<Arc<BTreeSet<Tag>>>);

impl TagSet {
    pub fn empty() -> Self {
        TagSet(None)
    }

    pub fn single(tag: &str) -> Self {
        let mut s = BTreeSet::new();
        s.insert(Arc::from(tag));
        TagSet(Some(Arc::new(s)))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }

    pub fn len(&self) -> usize {
        self.0.as_ref().map_or(0, |s| s.len())
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.0.as_ref().is_some_and(|s| s.contains(tag))
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().flat_map(|s| s.iter().map(|t| &**t))
    }

    pub fn union(&self, other: &TagSet) -> TagSet {
        match (&self.0, &other.0) {
            (None, _) => other.clone(),
            (_, None) => self.clone(),
            (Some(a), Some(b)) => {
                if Arc::ptr_eq(a, b) || b.is_subset(a) {
                    self.clone()
                } else if a.is_subset(b) {
                    other.clone()
                } else {
                    TagSet(Some(Arc::new(a.union(b).cloned().collect())))
                }
            }
        }
    }

    pub fn with(&self, tag: &str) -> TagSet {
        self.union(&TagSet::single(tag))
    }

    pub fn to_vec(&self) -> Vec<String> {
        self.iter().map(str::to_owned).collect()
    }
}

impl fmt::Debug for TagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl<'a> FromIterator<&'a str> for TagSet {
    fn from_iter<I: IntoIterator<Item = &'a str>>(iter: I) -> Self {
        let s: BTreeSet<Tag> = iter.into_iter().map(Arc::from).collect();
        if s.is_empty() {
            TagSet(None)
        } else {
            TagSet(Some(Arc::new(s)))
        }
    }
}

pub fn union_all<'a>(sets: impl IntoIterator<Item = &'a TagSet>) -> TagSet {
    sets.into_iter().fold(TagSet::empty(), |acc, s| acc.union(s))
}

/// Automatic labeling applied while the engine runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TaintPolicy {
    /// Tag COINBASE, TIMESTAMP, NUMBER, DIFFICULTY, GASLIMIT and BLOCKHASH
    /// results with the opcode name.
    pub block_info: bool,
    /// Tag every SLOAD result with its storage origin.
    pub storage_origin: bool,
}

impl TaintPolicy {
    pub const NONE: TaintPolicy = TaintPolicy {
        block_info: false,
        storage_origin: false,
    };
    pub const BLOCK_INFO: TaintPolicy = TaintPolicy {
        block_info: true,
        storage_origin: false,
    };
    pub const STORAGE_ORIGIN: TaintPolicy = TaintPolicy {
        block_info: false,
        storage_origin: true,
    };

    pub fn is_none(&self) -> bool {
        !self.block_info && !self.storage_origin
    }
}

pub const BLOCK_INFO_TAGS: [&str; 6] = ["COINBASE", "TIMESTAMP", "NUMBER", "DIFFICULTY", "GASLIMIT", "BLOCKHASH"];

/// Label of a value read from `slot` of `contract`: `0x<address>_<hex slot>`.
pub fn storage_tag(contract: &Address, slot: &Word) -> String {
    format!("{contract}_{slot:x}")
}

/// Splits a storage tag back into contract and slot.
pub fn parse_storage_tag(tag: &str) -> Option<(Address, Word)> {
    let (a, k) = tag.split_once('_')?;
    let address = a.parse().ok()?;
    let slot = Word::from_str_radix(k, 16).ok()?;
    Some((address, slot))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Stack(usize),
    Memory(usize, usize),
    Input(usize, usize),
    ReturnData(usize, usize),
    Storage(Address, Word),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutOfRange(pub Location);

impl fmt::Display for OutOfRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "taint location {:?} is out of range", self.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ShadowFrame {
    /// Bottom first, like the concrete stack.
    pub stack: Vec<TagSet>,
    pub memory: Vec<TagSet>,
    pub input: Vec<TagSet>,
    pub ret: Vec<TagSet>,
    /// Tags of the bytes this frame returned or reverted with.
    pub output: Vec<TagSet>,
}

impl ShadowFrame {
    fn sized(m: &Machine) -> Self {
        ShadowFrame {
            stack: vec![TagSet::empty(); m.stack.len()],
            memory: vec![TagSet::empty(); m.memory.len()],
            input: vec![TagSet::empty(); m.input.len()],
            ret: vec![TagSet::empty(); m.ret.len()],
            output: Vec::new(),
        }
    }

    fn pop(&mut self) -> TagSet {
        self.stack.pop().unwrap_or_default()
    }

    fn range(cells: &[TagSet], offset: usize, size: usize) -> TagSet {
        if size == 0 || offset >= cells.len() {
            return TagSet::empty();
        }
        let end = offset.saturating_add(size).min(cells.len());
        union_all(&cells[offset..end])
    }

    fn copy_out(cells: &[TagSet], offset: usize, size: usize) -> Vec<TagSet> {
        (0..size)
            .map(|i| {
                offset
                    .checked_add(i)
                    .and_then(|j| cells.get(j))
                    .cloned()
                    .unwrap_or_default()
            })
            .collect()
    }

    fn fill_memory(&mut self, offset: usize, tags: &[TagSet]) {
        for (i, t) in tags.iter().enumerate() {
            if let Some(cell) = self.memory.get_mut(offset + i) {
                *cell = t.clone();
            }
        }
    }
}

/// Operand values captured just before an opcode executes.
#[derive(Debug, Clone)]
pub struct PendingStep {
    op: Opcode,
    operands: Vec<Word>,
}

#[derive(Debug, Default)]
pub struct TaintEngine {
    active: bool,
    policy: TaintPolicy,
    storage: HashMap<(Address, Word), TagSet>,
    frames: Vec<ShadowFrame>,
}

impl TaintEngine {
    pub fn new(policy: TaintPolicy) -> Self {
        TaintEngine {
            active: false,
            policy,
            storage: HashMap::new(),
            frames: Vec::new(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn policy(&self) -> TaintPolicy {
        self.policy
    }

    /// Switches the engine on, building empty shadows for the live frames
    /// (outermost first).
    pub fn activate<'a>(&mut self, live: impl IntoIterator<Item = &'a Machine>) {
        if self.active {
            return;
        }
        self.active = true;
        self.frames = live.into_iter().map(ShadowFrame::sized).collect();
    }

    /// Activates from the start of a transaction when a policy is set.
    pub fn begin_transaction(&mut self) {
        self.storage.clear();
        self.frames.clear();
        self.active = !self.policy.is_none();
    }

    pub fn frames(&self) -> &[ShadowFrame] {
        &self.frames
    }

    pub(crate) fn frames_mut(&mut self) -> &mut Vec<ShadowFrame> {
        &mut self.frames
    }

    pub fn current(&self) -> Option<&ShadowFrame> {
        self.frames.last()
    }

    fn top(&mut self) -> &mut ShadowFrame {
        self.frames.last_mut().expect("shadow frame for the running machine")
    }

    pub fn enter_frame(&mut self, input: Vec<TagSet>) {
        if self.active {
            self.frames.push(ShadowFrame {
                input,
                ..Default::default()
            });
        }
    }

    pub fn exit_frame(&mut self) -> Option<ShadowFrame> {
        if self.active {
            self.frames.pop()
        } else {
            None
        }
    }

    /// Tags of the caller's argument bytes, to become the callee's input.
    pub fn argument_tags(&self, offset: usize, size: usize) -> Vec<TagSet> {
        match self.frames.last() {
            Some(f) if self.active => ShadowFrame::copy_out(&f.memory, offset, size),
            _ => Vec::new(),
        }
    }

    /// Mirrors [`Machine::resume_after_call`]: pushes the (untainted) call
    /// result and installs the callee's returned tags.
    pub fn resume_call(&mut self, ret: Vec<TagSet>, ret_offset: usize, ret_size: usize, memory_len: usize) {
        if !self.active {
            return;
        }
        let f = self.top();
        f.memory.resize(memory_len, TagSet::empty());
        let n = ret_size.min(ret.len());
        f.fill_memory(ret_offset, &ret[..n]);
        f.ret = ret;
        f.stack.push(TagSet::empty());
    }

    pub fn before_step(&self, m: &Machine) -> Option<PendingStep> {
        if !self.active {
            return None;
        }
        let op = m.current_opcode()?;
        let info = op.info()?;
        let n = info.inputs as usize;
        if m.stack.len() < n {
            return None;
        }
        Some(PendingStep {
            op,
            operands: (0..n).map(|i| m.stack.peek(i).expect("checked")).collect(),
        })
    }

    /// Applies the effect of the opcode captured in `pending` to the shadow
    /// of the running frame. `m` is the machine after the step.
    pub fn after_step(&mut self, pending: PendingStep, m: &Machine, frame: &Frame, outcome: &StepOutcome) {
        if !self.active {
            return;
        }
        if let StepOutcome::Halt(reason) = outcome {
            if !matches!(reason, HaltReason::Return | HaltReason::Revert) {
                return;
            }
        }
        let policy = self.policy;
        let PendingStep { op, operands } = pending;
        let mut storage_write: Option<((Address, Word), TagSet)> = None;
        let storage_read = if op == Opcode::SLOAD {
            self.storage.get(&(frame.context_address, operands[0])).cloned().unwrap_or_default()
        } else {
            TagSet::empty()
        };
        let f = self.top();
        let inputs: Vec<TagSet> = (0..operands.len()).map(|_| f.pop()).collect();
        f.memory.resize(m.memory.len(), TagSet::empty());
        let all = || union_all(&inputs);
        let as_usize = |w: Word| -> usize {
            if w > Word::from(u32::MAX) {
                usize::MAX
            } else {
                w.as_usize()
            }
        };
        let mut push: Option<TagSet> = None;
        match op.0 {
            0x01..=0x0b | 0x10..=0x1d => push = Some(all()),
            0x20 => {
                let (o, s) = (as_usize(operands[0]), as_usize(operands[1]));
                push = Some(all().union(&ShadowFrame::range(&f.memory, o, s)));
            }
            0x31 | 0x3b | 0x3f => push = Some(all()),
            0x35 => {
                let o = as_usize(operands[0]);
                push = Some(all().union(&ShadowFrame::range(&f.input, o, 32)));
            }
            0x37 | 0x3e => {
                let (d, o, s) = (as_usize(operands[0]), as_usize(operands[1]), as_usize(operands[2]));
                if s > 0 {
                    let src = if op == Opcode::CALLDATACOPY { &f.input } else { &f.ret };
                    let tags = ShadowFrame::copy_out(src, o, s);
                    f.fill_memory(d, &tags);
                }
            }
            0x39 | 0x3c => {
                let (d, s) = if op == Opcode::CODECOPY {
                    (as_usize(operands[0]), as_usize(operands[2]))
                } else {
                    (as_usize(operands[1]), as_usize(operands[3]))
                };
                if s > 0 {
                    f.fill_memory(d, &vec![TagSet::empty(); s]);
                }
            }
            0x40 => {
                let t = all();
                push = Some(if policy.block_info { t.with("BLOCKHASH") } else { t });
            }
            0x41..=0x45 => {
                push = Some(if policy.block_info {
                    TagSet::single(op.name())
                } else {
                    TagSet::empty()
                })
            }
            0x51 => {
                let o = as_usize(operands[0]);
                push = Some(all().union(&ShadowFrame::range(&f.memory, o, 32)));
            }
            0x52 => {
                let o = as_usize(operands[0]);
                f.fill_memory(o, &vec![inputs[1].clone(); 32]);
            }
            0x53 => {
                let o = as_usize(operands[0]);
                f.fill_memory(o, &[inputs[1].clone()]);
            }
            0x54 => {
                let mut t = all().union(&storage_read);
                if policy.storage_origin {
                    t = t.with(&storage_tag(&frame.context_address, &operands[0]));
                }
                push = Some(t);
            }
            0x55 => storage_write = Some(((frame.context_address, operands[0]), inputs[1].clone())),
            0x80..=0x8f => {
                // The duplicated slot is still on the stack; inputs only
                // held copies of the top n+1 tags.
                let n = (op.0 - 0x80) as usize;
                for t in inputs.iter().rev() {
                    f.stack.push(t.clone());
                }
                push = Some(inputs[n].clone());
            }
            0x90..=0x9f => {
                let n = (op.0 - 0x90) as usize + 1;
                let mut restored = inputs.clone();
                restored.swap(0, n);
                for t in restored.iter().rev() {
                    f.stack.push(t.clone());
                }
            }
            0xf3 | 0xfd => {
                let (o, s) = m.output_range;
                f.output = ShadowFrame::copy_out(&f.memory, o, s);
            }
            _ => {
                let outputs = op.info().map_or(0, |i| i.outputs);
                if outputs > 0 && !op.is_call() && !op.is_create() {
                    push = Some(TagSet::empty());
                }
            }
        }
        if let Some(t) = push {
            f.stack.push(t);
        }
        if let Some((key, t)) = storage_write {
            if t.is_empty() {
                self.storage.remove(&key);
            } else {
                self.storage.insert(key, t);
            }
        }
    }

    /// Adds `tag` to every cell of `loc` in the running frame.
    pub fn label(&mut self, loc: Location, tag: &str) -> Result<(), OutOfRange> {
        self.update(loc, |t| t.with(tag))
    }

    pub fn clear(&mut self, loc: Location) -> Result<(), OutOfRange> {
        self.update(loc, |_| TagSet::empty())
    }

    fn update(&mut self, loc: Location, mut f: impl FnMut(&TagSet) -> TagSet) -> Result<(), OutOfRange> {
        if let Location::Storage(a, k) = loc {
            let t = f(&self.storage.get(&(a, k)).cloned().unwrap_or_default());
            if t.is_empty() {
                self.storage.remove(&(a, k));
            } else {
                self.storage.insert((a, k), t);
            }
            return Ok(());
        }
        let frame = self.frames.last_mut().ok_or(OutOfRange(loc))?;
        let cells = cells_mut(frame, loc).ok_or(OutOfRange(loc))?;
        for c in cells {
            *c = f(c);
        }
        Ok(())
    }

    /// Union of the tags covering `loc`; never mutates.
    pub fn peek(&self, loc: Location) -> Result<TagSet, OutOfRange> {
        if let Location::Storage(a, k) = loc {
            return Ok(self.storage.get(&(a, k)).cloned().unwrap_or_default());
        }
        let Some(frame) = self.frames.last() else {
            return Ok(TagSet::empty());
        };
        let cells = cells(frame, loc).ok_or(OutOfRange(loc))?;
        Ok(union_all(cells))
    }

    pub fn peek_storage(&self, address: &Address, slot: &Word) -> TagSet {
        self.storage.get(&(*address, *slot)).cloned().unwrap_or_default()
    }
}

fn bounds(len: usize, offset: usize, size: usize) -> Option<(usize, usize)> {
    let end = offset.checked_add(size)?;
    if end > len {
        None
    } else {
        Some((offset, end))
    }
}

fn cells(frame: &ShadowFrame, loc: Location) -> Option<&[TagSet]> {
    match loc {
        Location::Stack(n) => {
            let i = frame.stack.len().checked_sub(n + 1)?;
            Some(&frame.stack[i..=i])
        }
        Location::Memory(o, s) => bounds(frame.memory.len(), o, s).map(|(a, b)| &frame.memory[a..b]),
        Location::Input(o, s) => bounds(frame.input.len(), o, s).map(|(a, b)| &frame.input[a..b]),
        Location::ReturnData(o, s) => bounds(frame.ret.len(), o, s).map(|(a, b)| &frame.ret[a..b]),
        Location::Storage(..) => None,
    }
}

fn cells_mut(frame: &mut ShadowFrame, loc: Location) -> Option<&mut [TagSet]> {
    match loc {
        Location::Stack(n) => {
            let i = frame.stack.len().checked_sub(n + 1)?;
            Some(&mut frame.stack[i..=i])
        }
        Location::Memory(o, s) => bounds(frame.memory.len(), o, s).map(|(a, b)| &mut frame.memory[a..b]),
        Location::Input(o, s) => bounds(frame.input.len(), o, s).map(|(a, b)| &mut frame.input[a..b]),
        Location::ReturnData(o, s) => bounds(frame.ret.len(), o, s).map(|(a, b)| &mut frame.ret[a..b]),
        Location::Storage(..) => None,
    }
}
