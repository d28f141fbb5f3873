//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls into the library's hashing, encoding or taint
//! code; the library is only used to run programs.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chainsleuth_core::evm::asm::CodeBuilder;
use chainsleuth_core::evm::{execute_transaction, BlockEnv, Env, InMemoryState, MemAccount, Opcode, TxExecution, TxInput, WorldState};
use chainsleuth_core::instrument::{InstrumentationPoint, Registry, Scratch};
use chainsleuth_core::records::{CallKind, NormalTxRecord};
use chainsleuth_core::taint::TaintPolicy;
use chainsleuth_core::{Address, Word};
use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{One, Zero};
use rand::Rng;
use sha3::{Digest, Keccak256};

pub const KECCAK_EMPTY: &str = "c5d2460186f7233c927e7db2dcc703c0e500b653ca82273b7bfad8045d85a470";

pub fn keccak(data: &[u8]) -> [u8; 32] {
    Keccak256::digest(data).into()
}

pub fn create_oracle(sender: &[u8; 20], nonce: u64) -> [u8; 20] {
    let mut s = rlp::RlpStream::new_list(2);
    s.append(&sender.as_slice());
    s.append(&nonce);
    let h = keccak(&s.out());
    h[12..].try_into().unwrap()
}

pub fn create2_oracle(sender: &[u8; 20], salt: &[u8; 32], init: &[u8]) -> [u8; 20] {
    let mut buf = vec![0xff];
    buf.extend_from_slice(sender);
    buf.extend_from_slice(salt);
    buf.extend_from_slice(&keccak(init));
    keccak(&buf)[12..].try_into().unwrap()
}

pub fn selector_oracle(signature: &str) -> [u8; 4] {
    keccak(signature.as_bytes())[..4].try_into().unwrap()
}

// ---- 256-bit arithmetic through arbitrary precision integers ----

fn modulus() -> BigUint {
    BigUint::one() << 256
}

fn big(w: &[u8; 32]) -> BigUint {
    BigUint::from_bytes_be(w)
}

fn signed(w: &[u8; 32]) -> BigInt {
    let u = BigInt::from(big(w));
    if w[0] & 0x80 != 0 {
        u - BigInt::from(modulus())
    } else {
        u
    }
}

fn word(v: BigUint) -> [u8; 32] {
    let v = v % modulus();
    let bytes = v.to_bytes_be();
    let mut out = [0u8; 32];
    out[32 - bytes.len()..].copy_from_slice(&bytes);
    out
}

fn from_signed(v: BigInt) -> [u8; 32] {
    let m = BigInt::from(modulus());
    let r = ((v % &m) + &m) % &m;
    word(r.to_biguint().unwrap())
}

fn flag(b: bool) -> [u8; 32] {
    word(BigUint::from(b as u8))
}

/// Operand count of the opcodes [`arith_oracle`] understands.
pub const ARITH_OPS: [(Opcode, usize); 25] = [
    (Opcode::ADD, 2),
    (Opcode::MUL, 2),
    (Opcode::SUB, 2),
    (Opcode::DIV, 2),
    (Opcode::SDIV, 2),
    (Opcode::MOD, 2),
    (Opcode::SMOD, 2),
    (Opcode::ADDMOD, 3),
    (Opcode::MULMOD, 3),
    (Opcode::EXP, 2),
    (Opcode::SIGNEXTEND, 2),
    (Opcode::LT, 2),
    (Opcode::GT, 2),
    (Opcode::SLT, 2),
    (Opcode::SGT, 2),
    (Opcode::EQ, 2),
    (Opcode::ISZERO, 1),
    (Opcode::AND, 2),
    (Opcode::OR, 2),
    (Opcode::XOR, 2),
    (Opcode::NOT, 1),
    (Opcode::BYTE, 2),
    (Opcode::SHL, 2),
    (Opcode::SHR, 2),
    (Opcode::SAR, 2),
];

/// `a` is the top of the stack.
pub fn arith_oracle(op: Opcode, a: &[u8; 32], b: &[u8; 32], c: &[u8; 32]) -> [u8; 32] {
    let (ua, ub, uc) = (big(a), big(b), big(c));
    let (sa, sb) = (signed(a), signed(b));
    let m = modulus();
    match op {
        Opcode::ADD => word(ua + ub),
        Opcode::MUL => word(ua * ub),
        Opcode::SUB => word(ua + &m - ub),
        Opcode::DIV if ub.is_zero() => [0; 32],
        Opcode::DIV => word(ua / ub),
        Opcode::MOD if ub.is_zero() => [0; 32],
        Opcode::MOD => word(ua % ub),
        Opcode::SDIV if sb.is_zero() => [0; 32],
        Opcode::SDIV => from_signed(sa / sb),
        Opcode::SMOD if sb.is_zero() => [0; 32],
        Opcode::SMOD => from_signed(sa % sb),
        Opcode::ADDMOD if uc.is_zero() => [0; 32],
        Opcode::ADDMOD => word((ua + ub) % uc),
        Opcode::MULMOD if uc.is_zero() => [0; 32],
        Opcode::MULMOD => word((ua * ub) % uc),
        Opcode::EXP => word(ua.modpow(&ub, &m)),
        Opcode::SIGNEXTEND => {
            if ua >= BigUint::from(31u8) {
                return *b;
            }
            let bit = 8 * ua.to_u32_digits().first().copied().unwrap_or(0) + 7;
            let low = (BigUint::one() << (bit + 1)) - 1u8;
            if ub.bit(bit as u64) {
                word(ub | (&m - 1u8 - low))
            } else {
                word(ub & low)
            }
        }
        Opcode::LT => flag(ua < ub),
        Opcode::GT => flag(ua > ub),
        Opcode::SLT => flag(sa < sb),
        Opcode::SGT => flag(sa > sb),
        Opcode::EQ => flag(ua == ub),
        Opcode::ISZERO => flag(ua.is_zero()),
        Opcode::AND => word(ua & ub),
        Opcode::OR => word(ua | ub),
        Opcode::XOR => word(ua ^ ub),
        Opcode::NOT => word(&m - 1u8 - ua),
        Opcode::BYTE => {
            if ua >= BigUint::from(32u8) {
                return [0; 32];
            }
            let i = ua.to_u32_digits().first().copied().unwrap_or(0) as usize;
            let mut out = [0u8; 32];
            out[31] = b[i];
            out
        }
        Opcode::SHL | Opcode::SHR | Opcode::SAR => {
            let huge = ua >= BigUint::from(256u16);
            let s = if huge { 256 } else { ua.to_u32_digits().first().copied().unwrap_or(0) as usize };
            match op {
                Opcode::SHL if huge => [0; 32],
                Opcode::SHL => word(ub << s),
                Opcode::SHR if huge => [0; 32],
                Opcode::SHR => word(ub >> s),
                _ => {
                    if sb.sign() != Sign::Minus {
                        if huge {
                            [0; 32]
                        } else {
                            word(ub >> s)
                        }
                    } else if huge {
                        [0xff; 32]
                    } else {
                        // Floor division of a negative value by 2^s.
                        let p = BigInt::one() << s;
                        let mag = -sb;
                        let q: BigInt = (mag + &p - BigInt::one()) / &p;
                        from_signed(-q)
                    }
                }
            }
        }
        other => panic!("no oracle for {}", other.name()),
    }
}

// ---- running programs ----

pub const SENDER: u64 = 0x5e4d;
pub const CONTRACT: u64 = 0xc0de;

pub fn test_env() -> Env {
    Env {
        block: BlockEnv {
            number: 4_370_123,
            timestamp: 1_540_000_000,
            coinbase: Address::from_low_u64(0xc01b),
            difficulty: Word::from(3_000_000_000u64),
            gas_limit: Word::from(8_000_000u64),
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Runs `input` against `to` with `accounts` deployed, from a funded sender.
pub fn run_code(
    accounts: &[(Address, Vec<u8>)],
    to: Address,
    input: Vec<u8>,
    hooks: Option<&Registry>,
    scratch: &mut Scratch,
) -> TxExecution {
    let mut state = InMemoryState::new();
    state.insert(
        Address::from_low_u64(SENDER),
        MemAccount {
            balance: Word::exp10(21),
            ..Default::default()
        },
    );
    for (a, code) in accounts {
        state.insert(
            *a,
            MemAccount {
                code: code.clone(),
                ..Default::default()
            },
        );
    }
    let mut world = WorldState::new(&state);
    let mut env = test_env();
    env.tx.origin = Address::from_low_u64(SENDER);
    let tx = TxInput {
        from: Address::from_low_u64(SENDER),
        to: Some(to),
        value: Word::zero(),
        gas_limit: 5_000_000,
        gas_price: Word::zero(),
        input,
    };
    execute_transaction(&mut world, &env, &tx, hooks, scratch).expect("transaction accepted")
}

// ---- taint dependency oracle ----

pub type Tags = BTreeSet<String>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ins {
    Push(u8),
    Source(Opcode),
    Dup(usize),
    Swap(usize),
    Pop,
    Op(Opcode, usize),
    MStore(u8),
    MStore8(u8),
    MLoad(u8),
    Sha3(u8, u8),
    SStore(u8),
    SLoad(u8),
}

impl Ins {
    fn opcodes(&self) -> usize {
        match self {
            Ins::Push(_) | Ins::Source(_) | Ins::Dup(_) | Ins::Swap(_) | Ins::Pop | Ins::Op(..) => 1,
            Ins::MStore(_) | Ins::MStore8(_) | Ins::MLoad(_) | Ins::SStore(_) | Ins::SLoad(_) => 2,
            Ins::Sha3(..) => 3,
        }
    }

    fn needs(&self) -> usize {
        match self {
            Ins::Push(_) | Ins::Source(_) | Ins::MLoad(_) | Ins::Sha3(..) | Ins::SLoad(_) => 0,
            Ins::Dup(n) => *n,
            Ins::Swap(n) => n + 1,
            Ins::Pop | Ins::MStore(_) | Ins::MStore8(_) | Ins::SStore(_) => 1,
            Ins::Op(_, k) => *k,
        }
    }

    fn effect(&self) -> isize {
        match self {
            Ins::Push(_) | Ins::Source(_) | Ins::Dup(_) | Ins::MLoad(_) | Ins::Sha3(..) | Ins::SLoad(_) => 1,
            Ins::Swap(_) => 0,
            Ins::Pop | Ins::MStore(_) | Ins::MStore8(_) | Ins::SStore(_) => -1,
            Ins::Op(_, k) => 1 - *k as isize,
        }
    }
}

pub const SOURCES: [Opcode; 5] = [
    Opcode::COINBASE,
    Opcode::TIMESTAMP,
    Opcode::NUMBER,
    Opcode::DIFFICULTY,
    Opcode::GASLIMIT,
];

pub const STORAGE_KEYS: u8 = 6;

#[derive(Debug, Clone)]
pub struct TaintProgram {
    pub ins: Vec<Ins>,
    /// Tag added to the top of the stack just before instruction `i`.
    pub labels: Vec<(usize, String)>,
    pub policy: TaintPolicy,
}

pub fn policy_of(i: u8) -> TaintPolicy {
    TaintPolicy {
        block_info: i & 1 != 0,
        storage_origin: i & 2 != 0,
    }
}

/// A random straight-line program of at most `max_ops` opcodes, STOP included.
pub fn random_program<R: Rng>(rng: &mut R, max_ops: usize) -> TaintProgram {
    let budget = rng.gen_range(1..max_ops);
    let mut ins = Vec::new();
    let mut depths = Vec::new();
    let (mut used, mut depth) = (0usize, 0usize);
    let mut stuck = 0;
    while used < budget && stuck < 100 {
        let cand = match rng.gen_range(0..12) {
            0 | 1 => Ins::Push(rng.gen()),
            2 | 3 => Ins::Source(SOURCES[rng.gen_range(0..SOURCES.len())]),
            4 => Ins::Dup(rng.gen_range(1..=16)),
            5 => Ins::Swap(rng.gen_range(1..=16)),
            6 => Ins::Pop,
            7 | 8 => {
                if rng.gen_bool(0.1) {
                    Ins::Op(Opcode::BLOCKHASH, 1)
                } else {
                    let (op, k) = ARITH_OPS[rng.gen_range(0..ARITH_OPS.len())];
                    Ins::Op(op, k)
                }
            }
            9 => match rng.gen_range(0..3) {
                0 => Ins::MStore(rng.gen_range(0..64)),
                1 => Ins::MStore8(rng.gen_range(0..80)),
                _ => Ins::MLoad(rng.gen_range(0..64)),
            },
            10 => Ins::Sha3(rng.gen_range(0..64), rng.gen_range(0..64)),
            _ => {
                let key = rng.gen_range(0..STORAGE_KEYS);
                if rng.gen_bool(0.5) {
                    Ins::SStore(key)
                } else {
                    Ins::SLoad(key)
                }
            }
        };
        if depth < cand.needs() || used + cand.opcodes() > budget {
            stuck += 1;
            continue;
        }
        used += cand.opcodes();
        depths.push(depth);
        depth = (depth as isize + cand.effect()) as usize;
        ins.push(cand);
    }
    let mut labels = Vec::new();
    for (i, d) in depths.iter().enumerate() {
        if *d > 0 && rng.gen_bool(0.08) {
            labels.push((i, format!("L{}", labels.len())));
        }
    }
    TaintProgram {
        ins,
        labels,
        policy: policy_of(rng.gen_range(0..4)),
    }
}

/// Bytecode plus the pc at which each instruction starts.
pub fn assemble(p: &TaintProgram) -> (Vec<u8>, Vec<usize>) {
    let mut code = Vec::new();
    let mut starts = Vec::new();
    for i in &p.ins {
        starts.push(code.len());
        match i {
            Ins::Push(v) => code.extend([0x60, *v]),
            Ins::Source(op) | Ins::Op(op, _) => code.push(op.0),
            Ins::Dup(n) => code.push(0x7f + *n as u8),
            Ins::Swap(n) => code.push(0x8f + *n as u8),
            Ins::Pop => code.push(0x50),
            Ins::MStore(o) => code.extend([0x60, *o, 0x52]),
            Ins::MStore8(o) => code.extend([0x60, *o, 0x53]),
            Ins::MLoad(o) => code.extend([0x60, *o, 0x51]),
            Ins::Sha3(o, s) => code.extend([0x60, *s, 0x60, *o, 0x20]),
            Ins::SStore(k) => code.extend([0x60, *k, 0x55]),
            Ins::SLoad(k) => code.extend([0x60, *k, 0x54]),
        }
    }
    code.push(0x00);
    (code, starts)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaintState {
    /// Bottom first.
    pub stack: Vec<Tags>,
    pub memory: Vec<Tags>,
    pub storage: BTreeMap<u8, Tags>,
}

fn union(sets: &[&Tags]) -> Tags {
    sets.iter().flat_map(|s| s.iter().cloned()).collect()
}

fn grow(memory: &mut Vec<Tags>, end: usize) {
    let words = end.div_ceil(32) * 32;
    if memory.len() < words {
        memory.resize(words, Tags::new());
    }
}

fn address_tag(contract: &Address, key: u8) -> String {
    let hex: String = contract.0.iter().map(|b| format!("{b:02x}")).collect();
    format!("0x{hex}_{key:x}")
}

/// Which sources each live value depends on, tracked symbolically.
pub fn dependency_oracle(p: &TaintProgram, contract: &Address) -> TaintState {
    let mut st = TaintState::default();
    let labels: BTreeMap<usize, Vec<&str>> = p.labels.iter().fold(BTreeMap::new(), |mut m, (i, t)| {
        m.entry(*i).or_insert_with(Vec::new).push(t.as_str());
        m
    });
    for (idx, i) in p.ins.iter().enumerate() {
        if let Some(ts) = labels.get(&idx) {
            let top = st.stack.last_mut().expect("labelled instruction has a stack");
            top.extend(ts.iter().map(|t| t.to_string()));
        }
        let s = &mut st.stack;
        match i {
            Ins::Push(_) => s.push(Tags::new()),
            Ins::Source(op) => {
                let mut t = Tags::new();
                if p.policy.block_info {
                    t.insert(op.name().to_owned());
                }
                s.push(t);
            }
            Ins::Dup(n) => s.push(s[s.len() - n].clone()),
            Ins::Swap(n) => {
                let len = s.len();
                s.swap(len - 1, len - 1 - n);
            }
            Ins::Pop => {
                s.pop();
            }
            Ins::Op(op, k) => {
                let args: Vec<Tags> = (0..*k).map(|_| s.pop().unwrap()).collect();
                let mut t = union(&args.iter().collect::<Vec<_>>());
                if *op == Opcode::BLOCKHASH && p.policy.block_info {
                    t.insert("BLOCKHASH".to_owned());
                }
                s.push(t);
            }
            Ins::MStore(o) => {
                let v = s.pop().unwrap();
                let o = *o as usize;
                grow(&mut st.memory, o + 32);
                for cell in &mut st.memory[o..o + 32] {
                    *cell = v.clone();
                }
            }
            Ins::MStore8(o) => {
                let v = s.pop().unwrap();
                let o = *o as usize;
                grow(&mut st.memory, o + 1);
                st.memory[o] = v;
            }
            Ins::MLoad(o) => {
                let o = *o as usize;
                grow(&mut st.memory, o + 32);
                let t = union(&st.memory[o..o + 32].iter().collect::<Vec<_>>());
                st.stack.push(t);
            }
            Ins::Sha3(o, size) => {
                let (o, size) = (*o as usize, *size as usize);
                let t = if size == 0 {
                    Tags::new()
                } else {
                    grow(&mut st.memory, o + size);
                    union(&st.memory[o..o + size].iter().collect::<Vec<_>>())
                };
                st.stack.push(t);
            }
            Ins::SStore(k) => {
                let v = s.pop().unwrap();
                if v.is_empty() {
                    st.storage.remove(k);
                } else {
                    st.storage.insert(*k, v);
                }
            }
            Ins::SLoad(k) => {
                let mut t = st.storage.get(k).cloned().unwrap_or_default();
                if p.policy.storage_origin {
                    t.insert(address_tag(contract, *k));
                }
                st.stack.push(t);
            }
        }
    }
    st
}

/// Runs `p` with the engine and reads back the shadow state at STOP, along
/// with any lockstep violations when `lockstep` is set.
pub fn engine_state(p: &TaintProgram, lockstep: bool) -> (TaintState, TxExecution, Vec<String>) {
    let contract = Address::from_low_u64(CONTRACT);
    let (code, starts) = assemble(p);
    let mut at_pc: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, t) in &p.labels {
        at_pc.entry(starts[*i]).or_default().push(t.clone());
    }
    let mut reg = Registry::new().with_policy(p.policy);
    let first_ops: BTreeSet<u8> = at_pc.keys().map(|pc| code[*pc]).collect();
    for op in first_ops {
        let at_pc = at_pc.clone();
        reg = reg.on(InstrumentationPoint::Before(Opcode(op)), move |ctx| {
            if let Some(tags) = at_pc.get(&ctx.pc()?) {
                for t in tags {
                    ctx.label_stack(0, t)?;
                }
            }
            Ok(())
        });
    }
    reg = reg.on(InstrumentationPoint::Before(Opcode::STOP), move |ctx| {
        let to_set = |t: chainsleuth_core::taint::TagSet| t.iter().map(str::to_owned).collect::<Tags>();
        let mut st = TaintState::default();
        let n = ctx.stack_len();
        for i in (0..n).rev() {
            st.stack.push(to_set(ctx.peek_stack(i)?));
        }
        for b in 0..ctx.mem_len() {
            st.memory.push(to_set(ctx.peek_memory(b, 1)?));
        }
        for k in 0..STORAGE_KEYS {
            let t = to_set(ctx.peek_storage(contract, Word::from(k))?);
            if !t.is_empty() {
                st.storage.insert(k, t);
            }
        }
        *ctx.scratch::<Option<TaintState>>() = Some(st);
        Ok(())
    });
    if lockstep {
        reg = with_lockstep_checks(reg);
    }
    let mut scratch = Scratch::default();
    let exec = run_code(&[(contract, code)], contract, Vec::new(), Some(&reg), &mut scratch);
    let st = scratch.take::<Option<TaintState>>().expect("program reached STOP");
    (st, exec, scratch.take::<Vec<String>>())
}

/// Registers lockstep checks at every before/after point: whenever taint
/// tracking is on, the shadow must match the machine's stack and memory
/// sizes. Violations land in `Vec<String>` scratch.
pub fn with_lockstep_checks(mut reg: Registry) -> Registry {
    for op in Opcode::all() {
        for point in [InstrumentationPoint::Before(op), InstrumentationPoint::After(op)] {
            reg = reg.on(point, move |ctx| {
                let sizes = ctx.shadow().map(|s| (s.stack.len(), s.memory.len()));
                if let Some((stack, memory)) = sizes {
                    if stack != ctx.stack_len() || memory != ctx.mem_len() {
                        let msg = format!(
                            "{point}: shadow {stack}/{memory} vs machine {}/{}",
                            ctx.stack_len(),
                            ctx.mem_len()
                        );
                        ctx.scratch::<Vec<String>>().push(msg);
                    }
                }
                Ok(())
            });
        }
    }
    reg
}

// ---- shipped fixtures and candidate scans ----

pub fn fixtures_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn shipped_fixtures() -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(fixtures_dir())
        .expect("fixtures directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    v.sort();
    v
}

pub fn load_fixture(name: &str) -> chainsleuth_core::store::Store {
    let mut s = chainsleuth_core::store::Store::in_memory();
    s.ingest(fixtures_dir().join(format!("{name}.jsonl"))).expect("fixture ingests");
    s
}

fn transfer_topic() -> [u8; 32] {
    keccak(b"Transfer(address,address,uint256)")
}

fn has_code(tx: &NormalTxRecord, a: &Address) -> bool {
    let before = tx.read_committed_state.iter().any(|s| &s.address == a && s.code_size > 0);
    let created = (tx.to_address.is_none() && tx.con_address.as_ref() == Some(a))
        || tx
            .internal_txns
            .iter()
            .any(|i| matches!(i.kind, CallKind::Create | CallKind::Create2) && &i.to_address == a);
    before || created
}

/// Some frame is entered while an earlier frame of the same address is still
/// open, and the transaction moves Ether or tokens.
pub fn reentrancy_candidate_oracle(tx: &NormalTxRecord) -> bool {
    let moves_value = tx.internal_txns.iter().any(|i| !i.value.is_zero())
        || tx.logs.iter().any(|l| l.topics.len() == 3 && l.topics[0].0 == transfer_topic());
    if !moves_value {
        return false;
    }
    let Some(root) = tx.to_address.or(tx.con_address) else {
        return false;
    };
    let mut open: Vec<(u64, Address)> = vec![(1, root)];
    for i in &tx.internal_txns {
        while open.last().is_some_and(|(d, _)| *d >= i.evm_depth) {
            open.pop();
        }
        if open.iter().any(|(_, a)| *a == i.to_address) {
            return true;
        }
        if i.kind != CallKind::SelfDestruct {
            open.push((i.evm_depth, i.to_address));
        }
    }
    false
}

pub fn value_to_contract_oracle(tx: &NormalTxRecord) -> bool {
    tx.internal_txns.iter().any(|i| !i.value.is_zero() && has_code(tx, &i.to_address))
}

pub fn randomness_candidate_oracle(tx: &NormalTxRecord) -> bool {
    tx.int_txn_count >= 2 && tx.internal_txns.len() >= 2 && value_to_contract_oracle(tx)
}

// ---- cross-contract round trip ----

/// The caller sends two words, the second derived from TIMESTAMP; the callee
/// returns them swapped.
pub fn round_trip_contracts() -> (Address, Vec<u8>, Address, Vec<u8>) {
    let (a, b) = (Address::from_low_u64(0xa11ce), Address::from_low_u64(0xb0b));
    let callee = CodeBuilder::new()
        .push(0u64)
        .op(Opcode::CALLDATALOAD)
        .push(32u64)
        .op(Opcode::MSTORE)
        .push(32u64)
        .op(Opcode::CALLDATALOAD)
        .push(0u64)
        .op(Opcode::MSTORE)
        .push(64u64)
        .push(0u64)
        .op(Opcode::RETURN)
        .build()
        .unwrap();
    let caller = CodeBuilder::new()
        .push(7u64)
        .push(0u64)
        .op(Opcode::MSTORE)
        .op(Opcode::TIMESTAMP)
        .push(32u64)
        .op(Opcode::MSTORE)
        // call(gas, b, 0, in 0..64, out 64..128)
        .push(64u64)
        .push(64u64)
        .push(64u64)
        .push(0u64)
        .push(0u64)
        .push_address(b)
        .op(Opcode::GAS)
        .op(Opcode::CALL)
        .op(Opcode::POP)
        .push(64u64)
        .op(Opcode::MLOAD)
        .push(96u64)
        .op(Opcode::MLOAD)
        // returndatacopy(128, 0, 32)
        .push(32u64)
        .push(0u64)
        .push(128u64)
        .op(Opcode::RETURNDATACOPY)
        .push(128u64)
        .op(Opcode::MLOAD)
        .op(Opcode::STOP)
        .build()
        .unwrap();
    (a, caller, b, callee)
}

pub fn stack_tags_at_stop(reg: Registry) -> Vec<Tags> {
    let (a, caller, b, callee) = round_trip_contracts();
    let reg = with_lockstep_checks(reg.on(InstrumentationPoint::Before(Opcode::STOP), |ctx| {
        let n = ctx.stack_len();
        let tags: Vec<Tags> = (0..n)
            .rev()
            .map(|i| ctx.peek_stack(i).unwrap().iter().map(str::to_owned).collect())
            .collect();
        *ctx.scratch::<Vec<Tags>>() = tags;
        Ok(())
    }));
    let mut scratch = Scratch::default();
    let exec = run_code(&[(a, caller), (b, callee)], a, Vec::new(), Some(&reg), &mut scratch);
    assert!(exec.success);
    assert!(scratch.take::<Vec<String>>().is_empty());
    scratch.take::<Vec<Tags>>()
}

pub fn tags(names: &[&str]) -> Tags {
    names.iter().map(|s| s.to_string()).collect()
}
