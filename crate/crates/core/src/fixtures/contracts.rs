//! Bytecode of the contracts the scenarios deploy.
//!
//! Mappings use the usual `keccak256(key . index)` slot layout. Every
//! dispatcher falls through to a payable `STOP` fallback unless noted.

use crate::evm::asm::{deployer, CodeBuilder};
use crate::evm::{selector, Opcode as Op};
use crate::primitives::{word_to_be, Address, Word};
use crate::store::TRANSFER_TOPIC;

/// ABI-style calldata: selector followed by 32-byte words.
pub fn calldata(signature: &str, args: &[Word]) -> Vec<u8> {
    let mut out = selector(signature).to_vec();
    for a in args {
        out.extend_from_slice(&word_to_be(*a));
    }
    out
}

fn build(b: &CodeBuilder) -> Vec<u8> {
    b.build().expect("scenario bytecode assembles")
}

/// Jumps to `label` for each matching selector, else to `fallback`. The
/// selector stays on the stack; handlers start with [`entry`].
fn dispatch(b: &mut CodeBuilder, routes: &[(&str, &str)], fallback: &str) {
    b.push(0u64).op(Op::CALLDATALOAD).push(0xe0u64).op(Op::SHR);
    for (sig, label) in routes {
        b.op(Op::DUP1).push_bytes(&selector(sig)).op(Op::EQ).jumpi(label);
    }
    b.jump(fallback);
}

fn entry(b: &mut CodeBuilder, label: &str) {
    b.label(label).op(Op::POP);
}

fn stop_fallback(b: &mut CodeBuilder) {
    b.label("fallback").op(Op::STOP);
}

/// Replaces the key on top of the stack with its mapping slot.
fn mapping_slot(b: &mut CodeBuilder, index: u64) {
    b.push(0u64)
        .op(Op::MSTORE)
        .push(index)
        .push(32u64)
        .op(Op::MSTORE)
        .push(64u64)
        .push(0u64)
        .op(Op::SHA3);
}

fn put_selector(b: &mut CodeBuilder, sig: &str) {
    b.push_bytes(&selector(sig)).push(0xe0u64).op(Op::SHL).push(0u64).op(Op::MSTORE);
}

/// Continues only if the top of the stack is non-zero; reverts otherwise.
fn require(b: &mut CodeBuilder, ok: &str) {
    b.jumpi(ok).push(0u64).op(Op::DUP1).op(Op::REVERT).label(ok);
}

/// Emits a CALL forwarding all gas. `value` and `target` each push one word;
/// they run after the four memory arguments are on the stack.
fn call(
    b: &mut CodeBuilder,
    target: impl FnOnce(&mut CodeBuilder),
    value: impl FnOnce(&mut CodeBuilder),
    args: (u64, u64),
    ret: (u64, u64),
) {
    b.push(ret.1).push(ret.0).push(args.1).push(args.0);
    value(b);
    target(b);
    b.op(Op::GAS).op(Op::CALL);
}

fn to(a: Address) -> impl FnOnce(&mut CodeBuilder) {
    move |b: &mut CodeBuilder| {
        b.push_address(a);
    }
}

fn op(o: Op) -> impl FnOnce(&mut CodeBuilder) {
    move |b: &mut CodeBuilder| {
        b.op(o);
    }
}

fn zero(b: &mut CodeBuilder) {
    b.push(0u64);
}

fn return_top(b: &mut CodeBuilder) {
    b.push(0u64).op(Op::MSTORE).push(32u64).push(0u64).op(Op::RETURN);
}

/// Copies the data section marked `data` (of `len` bytes) to memory 0.
fn copy_data(b: &mut CodeBuilder, len: usize) {
    b.push(len as u64).push_label("data").push(0u64).op(Op::CODECOPY);
}

fn deposit_handler(b: &mut CodeBuilder) {
    entry(b, "deposit");
    b.op(Op::CALLER);
    mapping_slot(b, 0);
    b.op(Op::DUP1)
        .op(Op::SLOAD)
        .op(Op::CALLVALUE)
        .op(Op::ADD)
        .op(Op::SWAP1)
        .op(Op::SSTORE)
        .op(Op::STOP);
}

fn balance_of_handler(b: &mut CodeBuilder) {
    entry(b, "balanceOf");
    b.push(4u64).op(Op::CALLDATALOAD);
    mapping_slot(b, 0);
    b.op(Op::SLOAD);
    return_top(b);
}

/// A bank that pays out the caller's whole balance before zeroing it.
pub fn bank() -> Vec<u8> {
    let mut b = CodeBuilder::new();
    dispatch(
        &mut b,
        &[("deposit()", "deposit"), ("withdraw()", "withdraw"), ("balanceOf(address)", "balanceOf")],
        "fallback",
    );
    stop_fallback(&mut b);
    deposit_handler(&mut b);
    balance_of_handler(&mut b);
    entry(&mut b, "withdraw");
    b.op(Op::CALLER);
    mapping_slot(&mut b, 0);
    // [slot bal]
    b.op(Op::DUP1).op(Op::SLOAD).op(Op::DUP1);
    require(&mut b, "has_balance");
    call(&mut b, op(Op::CALLER), op(Op::dup(5)), (0, 0), (0, 0));
    b.op(Op::POP).op(Op::POP).push(0u64).op(Op::SWAP1).op(Op::SSTORE).op(Op::STOP);
    deployer(&[], &build(&b))
}

/// Deposits into `bank`, withdraws, and re-enters `withdraw` from its
/// fallback while a counter (slot 1) is below `limit`.
pub fn bank_attacker(bank: Address, limit: u64) -> Vec<u8> {
    let withdraw = |b: &mut CodeBuilder| {
        put_selector(b, "withdraw()");
        call(b, to(bank), zero, (0, 4), (0, 0));
        b.op(Op::POP);
    };
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("attack()", "attack")], "fallback");
    entry(&mut b, "attack");
    put_selector(&mut b, "deposit()");
    call(&mut b, to(bank), op(Op::CALLVALUE), (0, 4), (0, 0));
    b.op(Op::POP);
    withdraw(&mut b);
    b.op(Op::STOP);
    entry(&mut b, "fallback");
    b.push(limit).push(1u64).op(Op::SLOAD).op(Op::LT).jumpi("again").op(Op::STOP);
    b.label("again").push(1u64).op(Op::SLOAD).push(1u64).op(Op::ADD).push(1u64).op(Op::SSTORE);
    withdraw(&mut b);
    b.op(Op::STOP);
    deployer(&[], &build(&b))
}

/// A wallet that decrements the balance before paying and bumps a
/// per-account withdrawal counter (limit 3) afterwards.
pub fn hodl_wallet(max_withdrawal: u64) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    dispatch(
        &mut b,
        &[("deposit()", "deposit"), ("withdraw(uint256)", "withdraw"), ("balanceOf(address)", "balanceOf")],
        "fallback",
    );
    stop_fallback(&mut b);
    deposit_handler(&mut b);
    balance_of_handler(&mut b);
    entry(&mut b, "withdraw");
    // [amt]
    b.push(4u64).op(Op::CALLDATALOAD);
    b.push(max_withdrawal).op(Op::dup(2)).op(Op::GT).op(Op::ISZERO);
    require(&mut b, "within_max");
    // [amt bslot bal]
    b.op(Op::CALLER);
    mapping_slot(&mut b, 0);
    b.op(Op::DUP1).op(Op::SLOAD);
    b.op(Op::dup(3)).op(Op::dup(2)).op(Op::LT).op(Op::ISZERO);
    require(&mut b, "covered");
    // [amt bslot bal cslot]
    b.op(Op::CALLER);
    mapping_slot(&mut b, 1);
    b.push(3u64).op(Op::dup(2)).op(Op::SLOAD).op(Op::LT);
    require(&mut b, "under_count");
    b.op(Op::dup(4)).op(Op::dup(3)).op(Op::SUB).op(Op::dup(4)).op(Op::SSTORE);
    call(&mut b, op(Op::CALLER), op(Op::dup(8)), (0, 0), (0, 0));
    b.op(Op::POP);
    b.op(Op::DUP1)
        .op(Op::SLOAD)
        .push(1u64)
        .op(Op::ADD)
        .op(Op::SWAP1)
        .op(Op::SSTORE)
        .op(Op::STOP);
    deployer(&[], &build(&b))
}

/// Deposits the call value into `wallet`, withdraws `amount`, and re-enters
/// from its fallback while a counter (slot 1) is below `limit`.
pub fn hodl_attacker(wallet: Address, amount: u64, limit: u64) -> Vec<u8> {
    let withdraw = move |b: &mut CodeBuilder| {
        put_selector(b, "withdraw(uint256)");
        b.push(amount).push(4u64).op(Op::MSTORE);
        call(b, to(wallet), zero, (0, 36), (0, 0));
        b.op(Op::POP);
    };
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("attack()", "attack")], "fallback");
    entry(&mut b, "attack");
    put_selector(&mut b, "deposit()");
    call(&mut b, to(wallet), op(Op::CALLVALUE), (0, 4), (0, 0));
    b.op(Op::POP);
    withdraw(&mut b);
    b.op(Op::STOP);
    entry(&mut b, "fallback");
    b.push(limit).push(1u64).op(Op::SLOAD).op(Op::LT).jumpi("again").op(Op::STOP);
    b.label("again").push(1u64).op(Op::SLOAD).push(1u64).op(Op::ADD).push(1u64).op(Op::SSTORE);
    withdraw(&mut b);
    b.op(Op::STOP);
    deployer(&[], &build(&b))
}

/// `pay()` forwards the call value to `peer`; `ack()` bumps slot 5.
pub fn loop_payer(peer: Address) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("pay()", "pay"), ("ack()", "ack")], "fallback");
    stop_fallback(&mut b);
    entry(&mut b, "pay");
    call(&mut b, to(peer), op(Op::CALLVALUE), (0, 0), (0, 0));
    b.op(Op::POP).op(Op::STOP);
    entry(&mut b, "ack");
    b.push(1u64)
        .push(5u64)
        .op(Op::SLOAD)
        .op(Op::ADD)
        .push(5u64)
        .op(Op::SSTORE)
        .op(Op::STOP);
    deployer(&[], &build(&b))
}

/// Calls `payer.ack()` whenever it is called.
pub fn loop_acker(payer: Address) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    put_selector(&mut b, "ack()");
    call(&mut b, to(payer), zero, (0, 4), (0, 0));
    b.op(Op::POP).op(Op::STOP);
    deployer(&[], &build(&b))
}

/// Leaves `keccak256(TIMESTAMP . NUMBER . word at 64) mod 10` on the stack.
fn lottery_draw(b: &mut CodeBuilder) {
    b.op(Op::TIMESTAMP)
        .push(0u64)
        .op(Op::MSTORE)
        .op(Op::NUMBER)
        .push(32u64)
        .op(Op::MSTORE)
        .push(96u64)
        .push(0u64)
        .op(Op::SHA3)
        .push(10u64)
        .op(Op::SWAP1)
        .op(Op::MOD);
}

/// `play()` pays `prize` to the caller when
/// `keccak256(TIMESTAMP . NUMBER . CALLER) mod 10 < 3`.
pub fn lottery(prize: Word) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("play()", "play")], "fallback");
    stop_fallback(&mut b);
    entry(&mut b, "play");
    b.op(Op::CALLER).push(64u64).op(Op::MSTORE);
    lottery_draw(&mut b);
    b.push(3u64).op(Op::dup(2)).op(Op::LT).jumpi("win").op(Op::STOP);
    b.label("win");
    call(&mut b, op(Op::CALLER), move |b| {
        b.push(prize);
    }, (0, 0), (0, 0));
    b.op(Op::POP).op(Op::STOP);
    deployer(&[], &build(&b))
}

/// Constructor of a throwaway player: plays `game` with its endowment and
/// self-destructs to its creator.
pub fn lottery_child(game: Address) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    put_selector(&mut b, "play()");
    call(&mut b, to(game), op(Op::CALLVALUE), (0, 4), (0, 0));
    b.op(Op::POP).op(Op::CALLER).op(Op::SELFDESTRUCT);
    build(&b)
}

/// Predicts the address of its next child (creation nonce kept in slot 0),
/// evaluates the lottery formula for it and only creates the child, which
/// plays with the call value, when it would win.
pub fn lottery_controller(game: Address) -> Vec<u8> {
    let child = lottery_child(game);
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("attack()", "attack")], "fallback");
    stop_fallback(&mut b);
    entry(&mut b, "attack");
    // rlp([address, nonce]) for nonces below 0x80: d6 94 <address> <nonce>
    b.push(0xd694u64)
        .push(240u64)
        .op(Op::SHL)
        .op(Op::ADDRESS)
        .push(80u64)
        .op(Op::SHL)
        .op(Op::OR)
        .push(0u64)
        .op(Op::SLOAD)
        .push(72u64)
        .op(Op::SHL)
        .op(Op::OR)
        .push(0u64)
        .op(Op::MSTORE)
        .push(23u64)
        .push(0u64)
        .op(Op::SHA3)
        .push_bytes(&[0xff; 20])
        .op(Op::AND)
        .push(64u64)
        .op(Op::MSTORE);
    lottery_draw(&mut b);
    b.push(3u64).op(Op::dup(2)).op(Op::LT).jumpi("go").op(Op::STOP);
    b.label("go");
    copy_data(&mut b, child.len());
    b.push(child.len() as u64).push(0u64).op(Op::CALLVALUE).op(Op::CREATE).op(Op::POP);
    b.push(0u64)
        .op(Op::SLOAD)
        .push(1u64)
        .op(Op::ADD)
        .push(0u64)
        .op(Op::SSTORE)
        .op(Op::STOP);
    b.mark("data").raw(&child);
    let mut ctor = CodeBuilder::new();
    ctor.push(1u64).push(0u64).op(Op::SSTORE);
    deployer(&build(&ctor), &build(&b))
}

/// `go()` plays `game` with the call value on even timestamps.
pub fn lottery_copycat(game: Address) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("go()", "go")], "fallback");
    stop_fallback(&mut b);
    entry(&mut b, "go");
    b.op(Op::TIMESTAMP)
        .push(2u64)
        .op(Op::SWAP1)
        .op(Op::MOD)
        .op(Op::ISZERO)
        .jumpi("bet")
        .op(Op::STOP);
    b.label("bet");
    put_selector(&mut b, "play()");
    call(&mut b, to(game), op(Op::CALLVALUE), (0, 4), (0, 0));
    b.op(Op::POP).op(Op::STOP);
    deployer(&[], &build(&b))
}

/// Runtime that self-destructs to the address in the first calldata word.
pub fn destructible() -> Vec<u8> {
    let mut b = CodeBuilder::new();
    b.push(0u64).op(Op::CALLDATALOAD).op(Op::SELFDESTRUCT);
    deployer(&[], &build(&b))
}

/// `bomb()` creates `children` destructible contracts with 1 Wei each and
/// calls every child `calls` times, each time naming a fresh beneficiary
/// `base + i * calls + j`.
pub fn bomber(children: u64, calls: u64, base: Word) -> Vec<u8> {
    let child = destructible();
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("bomb()", "bomb")], "fallback");
    stop_fallback(&mut b);
    entry(&mut b, "bomb");
    b.push(0u64);
    // [i]
    b.label("outer")
        .push(children)
        .op(Op::dup(2))
        .op(Op::LT)
        .op(Op::ISZERO)
        .jumpi("done");
    copy_data(&mut b, child.len());
    b.push(child.len() as u64).push(0u64).push(1u64).op(Op::CREATE).push(0u64);
    // [i child j]
    b.label("inner")
        .push(calls)
        .op(Op::dup(2))
        .op(Op::LT)
        .op(Op::ISZERO)
        .jumpi("next");
    b.op(Op::dup(3))
        .push(calls)
        .op(Op::MUL)
        .op(Op::dup(2))
        .op(Op::ADD)
        .push(base)
        .op(Op::ADD)
        .push(0u64)
        .op(Op::MSTORE);
    call(&mut b, op(Op::dup(7)), zero, (0, 32), (0, 0));
    b.op(Op::POP).push(1u64).op(Op::ADD).jump("inner");
    b.label("next").op(Op::POP).op(Op::POP).push(1u64).op(Op::ADD).jump("outer");
    b.label("done").op(Op::POP).op(Op::STOP);
    b.mark("data").raw(&child);
    deployer(&[], &build(&b))
}

/// A token with a one-time `claim()` of `grant` units per account and an
/// ERC20-style `transfer` that logs `Transfer` events.
pub fn airdrop_token(grant: u64) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    dispatch(
        &mut b,
        &[
            ("claim()", "claim"),
            ("transfer(address,uint256)", "transfer"),
            ("balanceOf(address)", "balanceOf"),
        ],
        "fallback",
    );
    stop_fallback(&mut b);
    balance_of_handler(&mut b);
    entry(&mut b, "claim");
    b.op(Op::CALLER);
    mapping_slot(&mut b, 1);
    b.op(Op::DUP1).op(Op::SLOAD).op(Op::ISZERO);
    require(&mut b, "unclaimed");
    b.push(1u64).op(Op::SWAP1).op(Op::SSTORE);
    b.op(Op::CALLER);
    mapping_slot(&mut b, 0);
    b.op(Op::DUP1)
        .op(Op::SLOAD)
        .push(grant)
        .op(Op::ADD)
        .op(Op::SWAP1)
        .op(Op::SSTORE);
    b.push(grant).push(0u64).op(Op::MSTORE);
    b.op(Op::CALLER)
        .push(0u64)
        .push_bytes(TRANSFER_TOPIC.as_bytes())
        .push(32u64)
        .push(0u64)
        .op(Op::log(3))
        .op(Op::STOP);
    entry(&mut b, "transfer");
    // [amt to fslot fbal]
    b.push(36u64).op(Op::CALLDATALOAD).push(4u64).op(Op::CALLDATALOAD);
    b.op(Op::CALLER);
    mapping_slot(&mut b, 0);
    b.op(Op::DUP1).op(Op::SLOAD);
    b.op(Op::dup(4)).op(Op::dup(2)).op(Op::LT).op(Op::ISZERO);
    require(&mut b, "funded");
    b.op(Op::dup(4)).op(Op::SWAP1).op(Op::SUB).op(Op::SWAP1).op(Op::SSTORE);
    b.op(Op::DUP1);
    mapping_slot(&mut b, 0);
    b.op(Op::DUP1)
        .op(Op::SLOAD)
        .op(Op::dup(4))
        .op(Op::ADD)
        .op(Op::SWAP1)
        .op(Op::SSTORE);
    b.op(Op::dup(2)).push(0u64).op(Op::MSTORE);
    b.op(Op::DUP1)
        .op(Op::CALLER)
        .push_bytes(TRANSFER_TOPIC.as_bytes())
        .push(32u64)
        .push(0u64)
        .op(Op::log(3))
        .op(Op::POP)
        .op(Op::POP);
    b.push(1u64);
    return_top(&mut b);
    deployer(&[], &build(&b))
}

/// Constructor that claims `grant` from `token`, forwards it to the
/// transaction origin and self-destructs to the origin.
pub fn airdrop_child(token: Address, grant: u64) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    put_selector(&mut b, "claim()");
    call(&mut b, to(token), zero, (0, 4), (0, 0));
    b.op(Op::POP);
    put_selector(&mut b, "transfer(address,uint256)");
    b.op(Op::ORIGIN).push(4u64).op(Op::MSTORE).push(grant).push(36u64).op(Op::MSTORE);
    call(&mut b, to(token), zero, (0, 68), (0, 0));
    b.op(Op::POP).op(Op::ORIGIN).op(Op::SELFDESTRUCT);
    build(&b)
}

/// Constructor that only self-destructs to the transaction origin.
pub fn plain_child() -> Vec<u8> {
    let mut b = CodeBuilder::new();
    b.op(Op::ORIGIN).op(Op::SELFDESTRUCT);
    build(&b)
}

/// `run(n)` creates `n` contracts from `child_init`.
pub fn factory(child_init: &[u8]) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("run(uint256)", "run")], "fallback");
    stop_fallback(&mut b);
    entry(&mut b, "run");
    b.push(4u64).op(Op::CALLDATALOAD).push(0u64);
    // [n i]
    b.label("loop")
        .op(Op::dup(2))
        .op(Op::dup(2))
        .op(Op::LT)
        .op(Op::ISZERO)
        .jumpi("done");
    copy_data(&mut b, child_init.len());
    b.push(child_init.len() as u64)
        .push(0u64)
        .push(0u64)
        .op(Op::CREATE)
        .op(Op::POP)
        .push(1u64)
        .op(Op::ADD)
        .jump("loop");
    b.label("done").op(Op::STOP);
    b.mark("data").raw(child_init);
    deployer(&[], &build(&b))
}

/// Counts down from `iterations` in a tight loop, then calls `sink` three times.
pub fn looper(iterations: u64, sink: Address) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    b.push(iterations);
    b.label("loop").push(1u64).op(Op::SWAP1).op(Op::SUB).op(Op::DUP1).jumpi("loop").op(Op::POP);
    for _ in 0..3 {
        call(&mut b, to(sink), zero, (0, 0), (0, 0));
        b.op(Op::POP);
    }
    b.op(Op::STOP);
    deployer(&[], &build(&b))
}

/// Runtime consisting of a single STOP.
pub fn sink() -> Vec<u8> {
    deployer(&[], &[Op::STOP.0])
}

/// `fan(n)` calls `sink` n times.
pub fn fanout(sink: Address) -> Vec<u8> {
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("fan(uint256)", "fan")], "fallback");
    stop_fallback(&mut b);
    entry(&mut b, "fan");
    b.push(4u64).op(Op::CALLDATALOAD);
    b.label("loop").op(Op::DUP1).op(Op::ISZERO).jumpi("done");
    call(&mut b, to(sink), zero, (0, 0), (0, 0));
    b.op(Op::POP).push(1u64).op(Op::SWAP1).op(Op::SUB).jump("loop");
    b.label("done").op(Op::STOP);
    deployer(&[], &build(&b))
}

/// `inc()` bumps slot 0, `fail()` reverts, anything else accepts Ether.
pub fn counter() -> Vec<u8> {
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("inc()", "inc"), ("fail()", "fail"), ("get()", "get")], "fallback");
    stop_fallback(&mut b);
    entry(&mut b, "inc");
    b.push(0u64)
        .op(Op::SLOAD)
        .push(1u64)
        .op(Op::ADD)
        .push(0u64)
        .op(Op::SSTORE)
        .op(Op::STOP);
    entry(&mut b, "fail");
    b.push(0u64).op(Op::DUP1).op(Op::REVERT);
    entry(&mut b, "get");
    b.push(0u64).op(Op::SLOAD);
    return_top(&mut b);
    deployer(&[], &build(&b))
}

/// `forward(address)` sends the call value on to the given address.
pub fn forwarder() -> Vec<u8> {
    let mut b = CodeBuilder::new();
    dispatch(&mut b, &[("forward(address)", "forward")], "fallback");
    stop_fallback(&mut b);
    entry(&mut b, "forward");
    call(
        &mut b,
        |b| {
            b.push(4u64).op(Op::CALLDATALOAD);
        },
        op(Op::CALLVALUE),
        (0, 0),
        (0, 0),
    );
    b.op(Op::POP).op(Op::STOP);
    deployer(&[], &build(&b))
}
