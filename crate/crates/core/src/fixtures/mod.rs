//! Deterministic scenario chains used as shipped fixtures and test corpora.
//!
//! Each scenario runs in record mode on a [`ChainBuilder`] and returns labels
//! naming the transactions and accounts of interest, so tests can refer to
//! them without re-deriving anything from the records.

pub mod contracts;

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::{labeled_address, ChainBuilder};
use crate::evm::create_address;
use crate::graph::SelectorDict;
use crate::primitives::{keccak256, word_to_be, Address, Word, B256};
use crate::records::FixtureRecord;
use crate::store::fixture_string;

use contracts::calldata;

/// Transactions and accounts a scenario wants to point at.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Labels {
    pub txs: BTreeMap<String, Vec<B256>>,
    pub accounts: BTreeMap<String, Address>,
}

impl Labels {
    fn tx(&mut self, name: &str, hash: B256) {
        self.txs.entry(name.to_owned()).or_default().push(hash);
    }

    fn account(&mut self, name: &str, a: Address) {
        self.accounts.insert(name.to_owned(), a);
    }

    /// All hashes under `name`, empty if none.
    pub fn hashes(&self, name: &str) -> &[B256] {
        self.txs.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The single hash under `name`.
    ///
    /// # Panics
    /// If there is not exactly one.
    pub fn one(&self, name: &str) -> B256 {
        let h = self.hashes(name);
        assert_eq!(h.len(), 1, "label {name} names {} transactions", h.len());
        h[0]
    }

    pub fn addr(&self, name: &str) -> Address {
        *self.accounts.get(name).unwrap_or_else(|| panic!("no account labeled {name}"))
    }

    fn merge(&mut self, prefix: &str, other: Labels) {
        for (k, v) in other.txs {
            self.txs.entry(format!("{prefix}.{k}")).or_default().extend(v);
        }
        for (k, v) in other.accounts {
            self.accounts.insert(format!("{prefix}.{k}"), v);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub records: Vec<FixtureRecord>,
    pub labels: Labels,
}

impl Scenario {
    pub fn text(&self) -> String {
        fixture_string(&self.records)
    }
}

type Builder = fn(&mut ChainBuilder, &str) -> Labels;

fn run(name: &'static str, f: Builder) -> Scenario {
    let mut c = ChainBuilder::default();
    let labels = f(&mut c, name);
    Scenario {
        name,
        records: c.finish(),
        labels,
    }
}

fn eth(n: u64) -> Word {
    Word::exp10(18) * Word::from(n)
}

fn next_address(c: &ChainBuilder, deployer: &Address) -> Address {
    create_address(deployer, c.nonce(deployer))
}

fn ok(c: &mut ChainBuilder, from: Address, to: Address, value: Word, input: Vec<u8>) -> B256 {
    let r = c.call(from, to, value, input).expect("transaction accepted");
    assert!(r.success, "scenario transaction {} from {from} to {to} failed", r.hash);
    r.hash
}

/// Honest deposits and withdrawals around one attack that re-enters
/// `withdraw()` twice, draining two extra payouts of 100 Wei.
pub fn dao(c: &mut ChainBuilder, p: &str) -> Labels {
    let mut l = Labels::default();
    let owner = c.eoa(&format!("{p}/owner"));
    let bank = c.deploy(owner, contracts::bank());
    c.seal();
    let users: Vec<Address> = (0..3).map(|i| c.eoa(&format!("{p}/user{i}"))).collect();
    for u in &users {
        let h = ok(c, *u, bank, Word::from(1000), calldata("deposit()", &[]));
        l.tx("deposit", h);
    }
    c.seal();
    let mallory = c.eoa(&format!("{p}/mallory"));
    let attacker = c.deploy(mallory, contracts::bank_attacker(bank, 2));
    c.seal();
    let h = ok(c, mallory, attacker, Word::from(100), calldata("attack()", &[]));
    l.tx("attack", h);
    c.seal();
    let h = ok(c, users[0], bank, Word::zero(), calldata("withdraw()", &[]));
    l.tx("withdraw", h);
    c.seal();
    l.account("bank", bank);
    l.account("attacker", attacker);
    l.account("mallory", mallory);
    l
}

/// A wallet that updates balances before paying out; the attacker re-enters
/// but cannot withdraw more than it deposited.
pub fn hodl(c: &mut ChainBuilder, p: &str) -> Labels {
    let mut l = Labels::default();
    let owner = c.eoa(&format!("{p}/owner"));
    let wallet = c.deploy(owner, contracts::hodl_wallet(1000));
    c.seal();
    let user = c.eoa(&format!("{p}/user"));
    let h = ok(c, user, wallet, Word::from(500), calldata("deposit()", &[]));
    l.tx("deposit", h);
    let h = ok(c, user, wallet, Word::zero(), calldata("withdraw(uint256)", &[Word::from(200)]));
    l.tx("withdraw", h);
    c.seal();
    let mallory = c.eoa(&format!("{p}/mallory"));
    let attacker = c.deploy(mallory, contracts::hodl_attacker(wallet, 50, 2));
    c.seal();
    let h = ok(c, mallory, attacker, Word::from(100), calldata("attack()", &[]));
    l.tx("attack", h);
    c.seal();
    l.account("wallet", wallet);
    l.account("attacker", attacker);
    l
}

/// Two contracts calling each other with value, without any control-flow
/// dependence on storage.
pub fn benign_loop(c: &mut ChainBuilder, p: &str) -> Labels {
    let mut l = Labels::default();
    let owner = c.eoa(&format!("{p}/owner"));
    let payer = next_address(c, &owner);
    let acker = create_address(&owner, c.nonce(&owner) + 1);
    assert_eq!(c.deploy(owner, contracts::loop_payer(acker)), payer);
    assert_eq!(c.deploy(owner, contracts::loop_acker(payer)), acker);
    c.seal();
    let user = c.eoa(&format!("{p}/user"));
    for _ in 0..2 {
        let h = ok(c, user, payer, Word::from(7), calldata("pay()", &[]));
        l.tx("pay", h);
    }
    c.seal();
    l.account("payer", payer);
    l.account("acker", acker);
    l
}

/// `keccak256(timestamp . number . player) mod 10 < 3`, as the lottery computes it.
pub fn lottery_wins(timestamp: u64, number: u64, player: &Address) -> bool {
    let mut buf = Vec::with_capacity(96);
    buf.extend_from_slice(&word_to_be(Word::from(timestamp)));
    buf.extend_from_slice(&word_to_be(Word::from(number)));
    buf.extend_from_slice(&word_to_be(player.to_word()));
    keccak256(&buf).to_word() % Word::from(10) < Word::from(3)
}

/// Picks the first timestamp at or after the builder's current one that
/// satisfies `pred`.
fn pick_timestamp(c: &mut ChainBuilder, pred: impl Fn(u64) -> bool) {
    let mut ts = c.timestamp();
    while !pred(ts) {
        ts += 1;
    }
    c.set_timestamp(ts);
}

/// A lottery keyed on block data; a controller contract predicts the winning
/// condition and only then spawns a one-shot player.
pub fn fomo(c: &mut ChainBuilder, p: &str) -> Labels {
    let mut l = Labels::default();
    let owner = c.eoa(&format!("{p}/owner"));
    let game = next_address(c, &owner);
    let r = c.create(owner, eth(1000), contracts::lottery(eth(2))).expect("accepted");
    assert!(r.success && r.con_address == Some(game));
    c.seal();
    let players: Vec<Address> = (0..3).map(|i| c.eoa(&format!("{p}/player{i}"))).collect();
    for (i, pl) in players.iter().enumerate() {
        // Alternate losing and winning honest plays.
        let number = c.block_number();
        let want = i % 2 == 1;
        pick_timestamp(c, |ts| lottery_wins(ts, number, pl) == want);
        let h = ok(c, *pl, game, eth(1) / Word::from(10), calldata("play()", &[]));
        l.tx("honest", h);
        c.seal();
    }
    let mallory = c.eoa(&format!("{p}/mallory"));
    let controller = c.deploy(mallory, contracts::lottery_controller(game));
    c.seal();
    for _ in 0..3 {
        let child = create_address(&controller, c.nonce(&controller));
        let number = c.block_number();
        pick_timestamp(c, |ts| lottery_wins(ts, number, &child));
        let h = ok(c, mallory, controller, eth(1) / Word::from(10), calldata("attack()", &[]));
        l.tx("attack", h);
        c.seal();
    }
    // A losing round: the controller declines to play.
    let child = create_address(&controller, c.nonce(&controller));
    let number = c.block_number();
    pick_timestamp(c, |ts| !lottery_wins(ts, number, &child));
    let h = ok(c, mallory, controller, eth(1) / Word::from(10), calldata("attack()", &[]));
    l.tx("declined", h);
    c.seal();
    let trudy = c.eoa(&format!("{p}/trudy"));
    let copycat = c.deploy(trudy, contracts::lottery_copycat(game));
    c.seal();
    let number = c.block_number();
    pick_timestamp(c, |ts| ts % 2 == 0 && lottery_wins(ts, number, &copycat));
    let h = ok(c, trudy, copycat, eth(1) / Word::from(10), calldata("go()", &[]));
    l.tx("copycat", h);
    c.seal();
    l.account("game", game);
    l.account("controller", controller);
    l.account("mallory", mallory);
    l.account("copycat", copycat);
    l
}

pub const BOMB_CHILDREN: u64 = 32;
pub const BOMB_CALLS: u64 = 10;

/// One transaction destroying 32 children ten times each towards fresh
/// addresses, and one ordinary single self-destruction.
pub fn suicide_bomb(c: &mut ChainBuilder, p: &str) -> Labels {
    let mut l = Labels::default();
    let mallory = c.eoa(&format!("{p}/mallory"));
    let base = labeled_address(&format!("{p}/dead")).to_word() >> 16 << 16;
    let bomber = c.deploy(mallory, contracts::bomber(BOMB_CHILDREN, BOMB_CALLS, base));
    ok(c, mallory, bomber, Word::from(1000), vec![]);
    c.seal();
    c.set_tx_gas(20_000_000);
    let h = ok(c, mallory, bomber, Word::zero(), calldata("bomb()", &[]));
    c.set_tx_gas(crate::chain::DEFAULT_TX_GAS);
    l.tx("bomb", h);
    c.seal();
    let owner = c.eoa(&format!("{p}/owner"));
    let heir = c.eoa(&format!("{p}/heir"));
    let victim = c.deploy(owner, contracts::destructible());
    c.seal();
    let h = ok(c, owner, victim, Word::zero(), word_to_be(heir.to_word()).to_vec());
    l.tx("single", h);
    c.seal();
    l.account("bomber", bomber);
    l
}

pub const AIRDROP_CHILDREN: u64 = 12;
pub const AIRDROP_GRANT: u64 = 2019;

/// A factory spawning children that claim a token grant, pass it to the
/// transaction origin and self-destruct.
pub fn airdrop(c: &mut ChainBuilder, p: &str) -> Labels {
    let mut l = Labels::default();
    let issuer = c.eoa(&format!("{p}/issuer"));
    let token = c.deploy(issuer, contracts::airdrop_token(AIRDROP_GRANT));
    c.seal();
    let user = c.eoa(&format!("{p}/user"));
    let h = ok(c, user, token, Word::zero(), calldata("claim()", &[]));
    l.tx("claim", h);
    c.seal();
    let hunter = c.eoa(&format!("{p}/hunter"));
    let factory = c.deploy(hunter, contracts::factory(&contracts::airdrop_child(token, AIRDROP_GRANT)));
    c.seal();
    c.set_tx_gas(20_000_000);
    let h = ok(c, hunter, factory, Word::zero(), calldata("run(uint256)", &[Word::from(AIRDROP_CHILDREN)]));
    l.tx("hunt", h);
    let h = ok(c, hunter, factory, Word::zero(), calldata("run(uint256)", &[Word::from(5)]));
    l.tx("small_hunt", h);
    c.set_tx_gas(crate::chain::DEFAULT_TX_GAS);
    c.seal();
    l.account("token", token);
    l.account("factory", factory);
    l.account("hunter", hunter);
    l
}

/// The same factory shape with children that never touch a token.
pub fn airdrop_control(c: &mut ChainBuilder, p: &str) -> Labels {
    let mut l = Labels::default();
    let owner = c.eoa(&format!("{p}/owner"));
    let factory = c.deploy(owner, contracts::factory(&contracts::plain_child()));
    c.seal();
    c.set_tx_gas(20_000_000);
    let h = ok(c, owner, factory, Word::zero(), calldata("run(uint256)", &[Word::from(AIRDROP_CHILDREN)]));
    c.set_tx_gas(crate::chain::DEFAULT_TX_GAS);
    l.tx("spawn", h);
    c.seal();
    l.account("factory", factory);
    l
}

pub const STRESS_LOOP: u64 = 150;

/// One long-running transaction with exactly three CALLs, and 100 fan-out
/// transactions totalling 2,519 message frames.
pub fn stress(c: &mut ChainBuilder, p: &str) -> Labels {
    let mut l = Labels::default();
    let owner = c.eoa(&format!("{p}/owner"));
    let sink_eoa = c.eoa(&format!("{p}/sink"));
    let looper = c.deploy(owner, contracts::looper(STRESS_LOOP, sink_eoa));
    let sink = c.deploy(owner, contracts::sink());
    let fan = c.deploy(owner, contracts::fanout(sink));
    c.seal();
    let h = ok(c, owner, looper, Word::zero(), vec![]);
    l.tx("loop", h);
    c.seal();
    for i in 0..100u64 {
        let n = if i < 19 { 25u64 } else { 24 };
        let h = ok(c, owner, fan, Word::zero(), calldata("fan(uint256)", &[Word::from(n)]));
        l.tx("fan", h);
        if i % 10 == 9 {
            c.seal();
        }
    }
    l.account("looper", looper);
    l.account("fanout", fan);
    l
}

/// Pseudo-random everyday traffic: transfers, token activity, counters,
/// reverting calls, forwarding and deployments.
pub fn bulk_n(c: &mut ChainBuilder, p: &str, count: usize, seed: u64) -> Labels {
    let mut l = Labels::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let owner = c.eoa(&format!("{p}/owner"));
    let token = c.deploy(owner, contracts::airdrop_token(100));
    let counter = c.deploy(owner, contracts::counter());
    let forwarder = c.deploy(owner, contracts::forwarder());
    c.seal();
    let users: Vec<Address> = (0..12).map(|i| c.eoa(&format!("{p}/user{i}"))).collect();
    let mut claimed = Vec::new();
    let mut deployed = vec![counter];
    for i in 0..count {
        let from = users[rng.gen_range(0..users.len())];
        let kind = rng.gen_range(0..100u32);
        let r = if kind < 30 {
            let to = users[rng.gen_range(0..users.len())];
            c.call(from, to, Word::from(rng.gen_range(1..1_000_000u64)), vec![])
        } else if kind < 45 {
            if !claimed.contains(&from) {
                claimed.push(from);
                c.call(from, token, Word::zero(), calldata("claim()", &[]))
            } else {
                let to = users[rng.gen_range(0..users.len())];
                let amt = rng.gen_range(0..150u64);
                c.call(
                    from,
                    token,
                    Word::zero(),
                    calldata("transfer(address,uint256)", &[to.to_word(), Word::from(amt)]),
                )
            }
        } else if kind < 65 {
            let target = deployed[rng.gen_range(0..deployed.len())];
            c.call(from, target, Word::zero(), calldata("inc()", &[]))
        } else if kind < 72 {
            c.call(from, counter, Word::zero(), calldata("fail()", &[]))
        } else if kind < 80 {
            c.call(from, counter, Word::from(rng.gen_range(1..1000u64)), vec![])
        } else if kind < 95 {
            let target = if rng.gen_bool(0.5) {
                users[rng.gen_range(0..users.len())]
            } else {
                deployed[rng.gen_range(0..deployed.len())]
            };
            c.call(
                from,
                forwarder,
                Word::from(rng.gen_range(1..10_000u64)),
                calldata("forward(address)", &[target.to_word()]),
            )
        } else {
            let r = c.create(from, Word::zero(), contracts::counter());
            if let Ok(rc) = &r {
                if rc.success {
                    deployed.extend(rc.con_address);
                }
            }
            r
        };
        let r = r.expect("bulk transaction accepted");
        l.tx("tx", r.hash);
        if i % 8 == 7 {
            c.seal();
        }
    }
    c.seal();
    l.account("token", token);
    l.account("counter", counter);
    l.account("forwarder", forwarder);
    l
}

pub const BULK_TXS: usize = 1000;

pub fn bulk(c: &mut ChainBuilder, p: &str) -> Labels {
    bulk_n(c, p, BULK_TXS, 7)
}

/// Every attack scenario plus background traffic on one chain.
pub fn combined(c: &mut ChainBuilder, p: &str) -> Labels {
    let mut l = Labels::default();
    let parts: [(&str, Builder); 7] = [
        ("dao", dao),
        ("hodl", hodl),
        ("benign_loop", benign_loop),
        ("fomo", fomo),
        ("suicide_bomb", suicide_bomb),
        ("airdrop", airdrop),
        ("airdrop_control", airdrop_control),
    ];
    let noise = bulk_n(c, &format!("{p}/noise0"), 60, 11);
    l.merge("noise0", noise);
    for (name, f) in parts {
        let sub = f(c, &format!("{p}/{name}"));
        l.merge(name, sub);
    }
    let noise = bulk_n(c, &format!("{p}/noise1"), 60, 13);
    l.merge("noise1", noise);
    l
}

pub const SCENARIOS: [(&str, Builder); 10] = [
    ("dao", dao),
    ("hodl", hodl),
    ("benign_loop", benign_loop),
    ("fomo", fomo),
    ("suicide_bomb", suicide_bomb),
    ("airdrop", airdrop),
    ("airdrop_control", airdrop_control),
    ("stress", stress),
    ("bulk", bulk),
    ("combined", combined),
];

pub fn scenario(name: &str) -> Option<Scenario> {
    SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, f)| run(n, *f))
}

pub fn all() -> Vec<Scenario> {
    SCENARIOS.iter().map(|(n, f)| run(n, *f)).collect()
}

/// Signatures of every function the scenario contracts expose, plus common
/// ERC20 entry points.
pub const SIGNATURES: [&str; 23] = [
    "ack()",
    "allowance(address,address)",
    "approve(address,uint256)",
    "attack()",
    "balanceOf(address)",
    "bomb()",
    "claim()",
    "deposit()",
    "fail()",
    "fan(uint256)",
    "forward(address)",
    "get()",
    "go()",
    "inc()",
    "pay()",
    "play()",
    "run(uint256)",
    "totalSupply()",
    "transfer(address,uint256)",
    "transferFrom(address,address,uint256)",
    "withdraw()",
    "withdraw(uint256)",
    "symbol()",
];

pub fn selector_dictionary() -> SelectorDict {
    SelectorDict::from_signatures(SIGNATURES)
}

/// Writes every scenario as `<name>.jsonl` under `dir`.
pub fn write_all(dir: &Path) -> io::Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for s in all() {
        let file = format!("{}.jsonl", s.name);
        std::fs::write(dir.join(&file), s.text())?;
        names.push(file);
    }
    Ok(names)
}
