//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chainsleuth_core::detect::{
    candidates_bad_randomness, candidates_reentrancy, detect_airdrop_hunting, detect_bad_randomness,
    detect_reentrancy, detect_suicide_bomb, Evidence, ReplayConfig, DEFAULT_AIRDROP_THRESHOLD,
    DEFAULT_SUICIDE_THRESHOLD,
};
use chainsleuth_core::evm::{create2_address, create_address, selector, Opcode};
use chainsleuth_core::fixtures;
use chainsleuth_core::instrument::{InstrumentationPoint, Registry, Scratch};
use chainsleuth_core::records::{CallKind, NormalTxRecord};
use chainsleuth_core::replay::{
    group_transactions, replay_batch, replay_slice, replay_transaction, slice_size, ReplayOptions, ReplayRequest,
};
use chainsleuth_core::store::Store;
use chainsleuth_core::taint::TaintPolicy;
use chainsleuth_core::{keccak256, Address, Word, B256};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn hashes(store: &Store) -> Vec<B256> {
    store.transactions().map(|(_, t)| t.hash).collect()
}

fn shipped_stores() -> Vec<(String, Store)> {
    shipped_fixtures()
        .into_iter()
        .map(|p| {
            let mut s = Store::in_memory();
            s.ingest(&p).expect("fixture ingests");
            (p.file_stem().unwrap().to_string_lossy().into_owned(), s)
        })
        .collect()
}

fn fixtures_replay() -> Outcome {
    let mut n = 0;
    let mut slowest = Duration::ZERO;
    for (name, store) in shipped_stores() {
        for h in hashes(&store) {
            let start = Instant::now();
            let r = replay_transaction(&store, &h, None, ReplayOptions { verify_gas: true }).map_err(|e| e.to_string())?;
            let took = start.elapsed();
            slowest = slowest.max(took);
            ensure!(r.verdict.is_ok(), "{name} {h}: {:?}", r.verdict);
            ensure!(took < Duration::from_secs(10), "{name} {h} took {took:?}");
            n += 1;
        }
    }
    Ok(format!("{n} transactions, slowest {slowest:?}"))
}

fn replay_isolation() -> Outcome {
    let mut n = 0;
    for (name, store) in shipped_stores() {
        let results = replay_batch(&store, &ReplayRequest::new(hashes(&store)), None);
        for r in results {
            let (_, tx) = store.tx(&r.hash).unwrap();
            ensure!(r.counters.foreign_txns == 0, "{name} {}: foreign transactions executed", r.hash);
            ensure!(
                r.counters.slice_loads <= slice_size(tx),
                "{name} {}: {} loads for a slice of {}",
                r.hash,
                r.counters.slice_loads,
                slice_size(tx)
            );
            n += 1;
        }
    }
    Ok(format!("{n} transactions"))
}

fn dispatch_economy() -> Outcome {
    let s = fixtures::scenario("stress").unwrap();
    let store = load_fixture("stress");
    let slice = store.get_replay_slice(&s.labels.one("loop")).map_err(|e| e.to_string())?;
    let calls = Registry::new().on(InstrumentationPoint::Before(Opcode::CALL), |_| Ok(()));
    let r = replay_slice(&slice, Some(&calls), &mut Scratch::default(), ReplayOptions::default());
    let call_records = slice.tx.internal_txns.iter().filter(|i| i.kind == CallKind::Call).count();
    ensure!(r.verdict.is_ok(), "{:?}", r.verdict);
    ensure!(r.counters.opcodes >= 1000, "only {} opcodes", r.counters.opcodes);
    ensure!(call_records == 3, "{call_records} CALLs in the stress transaction");
    ensure!(r.counters.callbacks == 3, "{} dispatches", r.counters.callbacks);
    let bare = replay_slice(&slice, None, &mut Scratch::default(), ReplayOptions::default());
    let empty = replay_slice(&slice, Some(&Registry::new()), &mut Scratch::default(), ReplayOptions::default());
    ensure!(
        serde_json::to_vec(&bare).unwrap() == serde_json::to_vec(&empty).unwrap(),
        "empty registry changed the result"
    );
    Ok(format!("{} opcodes, 3 dispatches", r.counters.opcodes))
}

fn reentrancy() -> Outcome {
    let cfg = ReplayConfig::default();
    let dao = detect_reentrancy(&load_fixture("dao"), cfg);
    ensure!(dao.len() == 1, "DAO: {} findings", dao.len());
    let loss = dao[0].financial_loss.unwrap_or_default();
    ensure!(!loss.is_zero(), "DAO finding without loss");
    let hodl = detect_reentrancy(&load_fixture("hodl"), cfg);
    ensure!(hodl.len() == 1, "HODL: {} findings", hodl.len());
    ensure!(hodl[0].financial_loss == Some(Word::zero()), "HODL loss {:?}", hodl[0].financial_loss);
    let benign = detect_reentrancy(&load_fixture("benign_loop"), cfg);
    ensure!(benign.is_empty(), "benign loop: {} findings", benign.len());
    Ok(format!("DAO loss {loss}, HODL rule-level, benign loop clean"))
}

fn bad_randomness() -> Outcome {
    let s = fixtures::scenario("fomo").unwrap();
    let found = detect_bad_randomness(&load_fixture("fomo"), ReplayConfig::default());
    let flagged: BTreeSet<B256> = found.iter().filter_map(|f| f.txn).collect();
    for h in s.labels.hashes("attack") {
        ensure!(flagged.contains(h), "attack {h} not flagged");
    }
    for h in s.labels.hashes("honest") {
        ensure!(!flagged.contains(h), "honest play {h} flagged");
    }
    for f in &found {
        let Evidence::BadRandomness { code_addresses, .. } = &f.evidence else {
            return Err("wrong evidence kind".into());
        };
        let distinct: BTreeSet<&Address> = code_addresses.iter().collect();
        ensure!(distinct.len() >= 2, "{:?}: single code address", f.txn);
    }
    Ok(format!("{} attacks flagged, honest plays clean", flagged.len()))
}

#[derive(Default)]
struct DestructionProbe {
    live_at_selfdestruct: usize,
    calls: usize,
    gone_at_end: usize,
}

fn suicide_bomb() -> Outcome {
    let s = fixtures::scenario("suicide_bomb").unwrap();
    let store = load_fixture("suicide_bomb");
    let found = detect_suicide_bomb(&store, DEFAULT_SUICIDE_THRESHOLD);
    ensure!(found.len() == 1, "{} findings", found.len());
    let Evidence::SuicideBomb { destructions, .. } = found[0].evidence else {
        return Err("wrong evidence kind".into());
    };
    ensure!(destructions == 320, "{destructions} destructions");

    // Every SELFDESTRUCT sees its contract intact; all are gone at the end.
    let bomb = s.labels.one("bomb");
    let (_, tx) = store.tx(&bomb).unwrap();
    let victims: Arc<BTreeSet<Address>> = Arc::new(
        tx.internal_txns
            .iter()
            .filter(|i| i.kind == CallKind::SelfDestruct)
            .map(|i| i.from_address)
            .collect(),
    );
    let v = victims.clone();
    let reg = Registry::new()
        .on(InstrumentationPoint::Before(Opcode::SELFDESTRUCT), |ctx| {
            let me = ctx.self_address()?;
            let live = !ctx.code(&me).is_empty();
            let p = ctx.scratch::<DestructionProbe>();
            p.calls += 1;
            p.live_at_selfdestruct += live as usize;
            Ok(())
        })
        .on(InstrumentationPoint::TransactionEnd, move |ctx| {
            let gone = v.iter().filter(|a| ctx.code(a).is_empty()).count();
            ctx.scratch::<DestructionProbe>().gone_at_end = gone;
            Ok(())
        });
    let slice = store.get_replay_slice(&bomb).map_err(|e| e.to_string())?;
    let mut scratch = Scratch::default();
    let r = replay_slice(&slice, Some(&reg), &mut scratch, ReplayOptions { verify_gas: true });
    ensure!(r.verdict.is_ok(), "{:?}", r.verdict);
    let p = scratch.take::<DestructionProbe>();
    ensure!(p.calls == 320 && p.live_at_selfdestruct == 320, "{} of {} live", p.live_at_selfdestruct, p.calls);
    ensure!(p.gone_at_end == victims.len(), "{} of {} removed", p.gone_at_end, victims.len());
    Ok(format!("320 destructions of {} contracts, applied at the end", victims.len()))
}

fn airdrop() -> Outcome {
    let found = detect_airdrop_hunting(&load_fixture("airdrop"), DEFAULT_AIRDROP_THRESHOLD);
    ensure!(found.len() == 1, "{} findings", found.len());
    let Evidence::AirdropHunting { children, .. } = &found[0].evidence else {
        return Err("wrong evidence kind".into());
    };
    ensure!(children.len() == 12, "{} children", children.len());
    let control = detect_airdrop_hunting(&load_fixture("airdrop_control"), DEFAULT_AIRDROP_THRESHOLD);
    ensure!(control.is_empty(), "control flagged");
    Ok("12 children, control clean".into())
}

fn combined_corpus() -> Outcome {
    let store = load_fixture("combined");
    let cfg = ReplayConfig::default();
    let scan = |pred: fn(&NormalTxRecord) -> bool| -> Vec<B256> {
        store.transactions().filter(|(_, t)| pred(t)).map(|(_, t)| t.hash).collect()
    };
    let re: Vec<B256> = candidates_reentrancy(&store).into_iter().map(|l| l.hash).collect();
    let br: Vec<B256> = candidates_bad_randomness(&store).into_iter().map(|l| l.hash).collect();
    ensure!(re == scan(reentrancy_candidate_oracle), "reentrancy candidates differ from the scan");
    ensure!(br == scan(randomness_candidate_oracle), "bad-randomness candidates differ from the scan");
    let re_found = detect_reentrancy(&store, cfg);
    let br_found = detect_bad_randomness(&store, cfg);
    for f in re_found.iter().chain(&br_found) {
        ensure!(!f.is_error(), "error finding {:?}", f.evidence);
    }
    ensure!(
        re_found.iter().filter_map(|f| f.txn).all(|h| re.contains(&h)),
        "confirmed reentrancy outside candidates"
    );
    ensure!(
        br_found.iter().filter_map(|f| f.txn).all(|h| br.contains(&h)),
        "confirmed bad randomness outside candidates"
    );
    Ok(format!(
        "{} txs; reentrancy {}/{}, bad randomness {}/{} confirmed/candidates",
        store.tx_count(),
        re_found.len(),
        re.len(),
        br_found.len(),
        br.len()
    ))
}

fn address_derivation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tuples = 128;
    for _ in 0..tuples {
        let sender: [u8; 20] = rng.gen();
        let nonce: u64 = if rng.gen_bool(0.5) { rng.gen_range(0..300) } else { rng.gen() };
        let salt: [u8; 32] = rng.gen();
        let init: Vec<u8> = (0..rng.gen_range(0..100)).map(|_| rng.gen()).collect();
        let sig = format!("f{}(uint256,address)", rng.gen::<u32>());
        ensure!(create_address(&Address(sender), nonce).0 == create_oracle(&sender, nonce), "create {nonce}");
        ensure!(
            create2_address(&Address(sender), &B256(salt), &init).0 == create2_oracle(&sender, &salt, &init),
            "create2"
        );
        ensure!(selector(&sig) == selector_oracle(&sig), "selector {sig}");
    }
    ensure!(hex::encode(keccak256(b"").0) == KECCAK_EMPTY, "keccak of empty input");
    Ok(format!("{tuples} tuples"))
}

fn taint_suite() -> Outcome {
    let programs = 500u64;
    let mut tainted = 0;
    for seed in 0..programs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_program(&mut rng, 50);
        let (got, exec, violations) = engine_state(&p, true);
        ensure!(exec.success, "program {seed} failed");
        ensure!(violations.is_empty(), "program {seed}: {violations:?}");
        ensure!(got == dependency_oracle(&p, &Address::from_low_u64(CONTRACT)), "program {seed} differs from the oracle");
        tainted += got.stack.iter().chain(&got.memory).any(|t| !t.is_empty()) as usize;

        let mut quiet = p.clone();
        quiet.labels.clear();
        quiet.policy = TaintPolicy::NONE;
        let (got, _, _) = engine_state(&quiet, false);
        let any = got.stack.iter().chain(&got.memory).any(|t| !t.is_empty()) || !got.storage.is_empty();
        ensure!(!any, "program {seed}: taint without labels or policy");
    }
    let round = stack_tags_at_stop(Registry::new().with_policy(TaintPolicy::BLOCK_INFO));
    ensure!(
        round == vec![tags(&["TIMESTAMP"]), tags(&[]), tags(&["TIMESTAMP"])],
        "round trip lost tags: {round:?}"
    );
    Ok(format!("{programs} programs ({tainted} tainted), round trip intact"))
}

fn parallel_determinism() -> Outcome {
    let store = load_fixture("bulk");
    let hs: Vec<B256> = hashes(&store).into_iter().take(1000).collect();
    ensure!(hs.len() == 1000, "bulk fixture holds {} transactions", hs.len());
    let outputs: Vec<Vec<u8>> = [1, 4, 8]
        .iter()
        .map(|w| serde_json::to_vec(&replay_batch(&store, &ReplayRequest::new(hs.clone()).workers(*w), None)).unwrap())
        .collect();
    ensure!(outputs[0] == outputs[1] && outputs[0] == outputs[2], "outputs differ across worker counts");
    Ok(format!("{} bytes identical for 1, 4 and 8 workers", outputs[0].len()))
}

fn grouping() -> Outcome {
    let hs: Vec<B256> = (0..25_000u64).map(|i| B256::from_word(Word::from(i))).collect();
    let sizes: Vec<usize> = group_transactions(&hs, ReplayConfig::default().group_limit)
        .iter()
        .map(|g| g.len())
        .collect();
    ensure!(sizes == [10_000, 10_000, 5_000], "{sizes:?}");
    Ok(format!("{sizes:?}"))
}

type Check = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let checks: [Check; 12] = [
        ("fixture transactions replay", fixtures_replay),
        ("replay isolation", replay_isolation),
        ("dispatch economy", dispatch_economy),
        ("reentrancy", reentrancy),
        ("bad randomness", bad_randomness),
        ("suicide bomb", suicide_bomb),
        ("airdrop hunting", airdrop),
        ("combined corpus", combined_corpus),
        ("address derivation", address_derivation),
        ("taint tracking", taint_suite),
        ("parallel determinism", parallel_determinism),
        ("batch grouping", grouping),
    ];
    let panics = Arc::new(Mutex::new(String::new()));
    let sink = panics.clone();
    std::panic::set_hook(Box::new(move |info| {
        *sink.lock().unwrap() = info.to_string();
    }));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err(format!("panicked: {}", panics.lock().unwrap())));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
