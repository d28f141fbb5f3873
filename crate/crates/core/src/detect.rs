//! Attack detectors: cheap candidate filters over stored records followed,
//! where needed, by instrumented replay with taint tracking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::evm::Opcode;
use crate::graph::{call_graph_of, find_reentry_points, first_reentries, has_loop_with_reentry, CallGraph, ReentryEvidence, SelectorDict};
use crate::instrument::{HookContext, HookError, InstrumentationPoint, Registry, Scratch};
use crate::primitives::{Address, Word, B256};
use crate::records::{CallKind, NormalTxRecord, TxStatus};
use crate::replay::{replay_batch_map, ReplayRequest, ReplayResult, DEFAULT_GROUP_LIMIT};
use crate::store::{decode_transfers, internal_value_to_contract, Store, StoreError, TxLocator};
use crate::taint::{parse_storage_tag, TaintPolicy, BLOCK_INFO_TAGS};

pub const DEFAULT_SUICIDE_THRESHOLD: usize = 50;
pub const DEFAULT_AIRDROP_THRESHOLD: usize = 10;
pub const DEFAULT_TREND_K: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Reentrancy,
    BadRandomness,
    SuicideBomb,
    AirdropHunting,
    TrendAnomaly,
}

impl Rule {
    pub const ALL: [Rule; 5] = [
        Rule::Reentrancy,
        Rule::BadRandomness,
        Rule::SuicideBomb,
        Rule::AirdropHunting,
        Rule::TrendAnomaly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Reentrancy => "reentrancy",
            Rule::BadRandomness => "bad-randomness",
            Rule::SuicideBomb => "suicide-bomb",
            Rule::AirdropHunting => "airdrop-hunting",
            Rule::TrendAnomaly => "trend-anomaly",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown rule `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct SlotRef {
    pub contract: Address,
    #[serde(with = "crate::primitives::serde_word")]
    pub slot: Word,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct TokenTotal {
    pub token: Address,
    #[serde(with = "crate::primitives::serde_quantity")]
    pub amount: Word,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "Kind", rename_all = "kebab-case")]
pub enum Evidence {
    #[serde(rename_all = "PascalCase")]
    Reentrancy {
        reentries: Vec<ReentryEvidence>,
        /// Slots influencing branches or sent amounts.
        influencing: Vec<SlotRef>,
        /// Influencing slots of re-entered contracts written after re-entry.
        written_after_reentry: Vec<SlotRef>,
    },
    #[serde(rename_all = "PascalCase")]
    BadRandomness {
        tags: Vec<String>,
        #[serde(with = "crate::primitives::serde_word")]
        condition: Word,
        code_addresses: Vec<Address>,
    },
    #[serde(rename_all = "PascalCase")]
    SuicideBomb { destructions: usize, fresh_beneficiaries: usize },
    #[serde(rename_all = "PascalCase")]
    AirdropHunting {
        children: Vec<Address>,
        beneficiary: Address,
        tokens: Vec<TokenTotal>,
    },
    #[serde(rename_all = "PascalCase")]
    TrendAnomaly {
        metric: String,
        count: u64,
        mean: f64,
        stddev: f64,
    },
    #[serde(rename_all = "PascalCase")]
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct Finding {
    pub rule: Rule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub txn: Option<B256>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bucket: Option<u64>,
    pub attackers: Vec<Address>,
    pub victims: Vec<Address>,
    pub evidence: Evidence,
    #[serde(with = "crate::primitives::serde_opt_quantity", skip_serializing_if = "Option::is_none")]
    pub financial_loss: Option<Word>,
}

impl Finding {
    fn error(rule: Rule, txn: B256, message: String) -> Self {
        Finding {
            rule,
            txn: Some(txn),
            bucket: None,
            attackers: Vec::new(),
            victims: Vec::new(),
            evidence: Evidence::Error { message },
            financial_loss: None,
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self.evidence, Evidence::Error { .. })
    }

    pub fn has_loss(&self) -> bool {
        self.financial_loss.is_some_and(|l| !l.is_zero())
    }

    /// One JSON object, no trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("findings serialize")
    }
}

/// Replay settings shared by the replay-based detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayConfig {
    pub workers: usize,
    pub group_limit: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            workers: 1,
            group_limit: DEFAULT_GROUP_LIMIT,
        }
    }
}

fn root_accounts(tx: &NormalTxRecord) -> Vec<Address> {
    let mut v = vec![tx.from_address];
    if let Some(t) = tx.target() {
        if t != tx.from_address {
            v.push(t);
        }
    }
    v
}

// ---------------------------------------------------------------------------
// Re-entrancy

/// Whether a recorded transaction passes both re-entrancy candidate rules:
/// a call loop through a re-entry point, and some Ether or token movement.
pub fn is_reentrancy_candidate(tx: &NormalTxRecord) -> bool {
    let moves_value = tx.internal_txns.iter().any(|i| !i.value.is_zero()) || !decode_transfers(&tx.logs).is_empty();
    moves_value && has_loop_with_reentry(&call_graph_of(tx, &SelectorDict::default()))
}

pub fn candidates_reentrancy(store: &Store) -> Vec<TxLocator> {
    candidates(store, is_reentrancy_candidate)
}

fn candidates(store: &Store, pred: impl Fn(&NormalTxRecord) -> bool) -> Vec<TxLocator> {
    store
        .transactions()
        .filter(|(_, t)| pred(t))
        .map(|(b, t)| TxLocator {
            number: b.number,
            txn_index: t.txn_index,
            hash: t.hash,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallObservation {
    pub from: Address,
    pub value: Word,
    pub slots: BTreeSet<SlotRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageWrite {
    pub slot: SlotRef,
    /// Internal transactions started before the write.
    pub internal_count: usize,
}

/// What the re-entrancy callbacks collect during one replay.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReentrancyTrace {
    /// Storage slots whose values reached a JUMPI condition.
    pub branch_slots: BTreeSet<SlotRef>,
    /// CALLs keyed by the call-graph serial the call would receive.
    pub calls: BTreeMap<u64, CallObservation>,
    pub writes: Vec<StorageWrite>,
}

fn storage_slots(tags: &crate::taint::TagSet) -> BTreeSet<SlotRef> {
    tags.iter()
        .filter_map(parse_storage_tag)
        .map(|(contract, slot)| SlotRef { contract, slot })
        .collect()
}

/// Callbacks of the re-entrancy confirmation under the storage-origin policy.
pub fn reentrancy_registry() -> Registry {
    Registry::new()
        .with_policy(TaintPolicy::STORAGE_ORIGIN)
        .on(InstrumentationPoint::Before(Opcode::JUMPI), |ctx| {
            let slots = storage_slots(&ctx.peek_stack(1)?);
            ctx.scratch::<ReentrancyTrace>().branch_slots.extend(slots);
            Ok(())
        })
        .on(InstrumentationPoint::Before(Opcode::CALL), |ctx| {
            let value = ctx.stack_peek(2)?;
            let slots = storage_slots(&ctx.peek_stack(2)?);
            let from = ctx.self_address()?;
            let serial = ctx.internal_txn_count() as u64 + 1;
            ctx.scratch::<ReentrancyTrace>()
                .calls
                .insert(serial, CallObservation { from, value, slots });
            Ok(())
        })
        .on(InstrumentationPoint::Before(Opcode::SSTORE), |ctx| {
            let slot = SlotRef {
                contract: ctx.self_address()?,
                slot: ctx.stack_peek(0)?,
            };
            let internal_count = ctx.internal_txn_count();
            ctx.scratch::<ReentrancyTrace>()
                .writes
                .push(StorageWrite { slot, internal_count });
            Ok(())
        })
}

/// Storage slots reaching JUMPI conditions, collected the way a minimal
/// analysis script would: label each SLOAD key with `contract_slot` before
/// the load and report the tags of every JUMPI condition. Runs without an
/// automatic taint policy.
pub fn branch_slot_script() -> Registry {
    Registry::new()
        .on(InstrumentationPoint::Before(Opcode::SLOAD), |ctx| {
            let contract = ctx.self_address()?;
            let key = ctx.stack_peek(0)?;
            ctx.label_stack(0, &crate::taint::storage_tag(&contract, &key))
        })
        .on(InstrumentationPoint::Before(Opcode::JUMPI), |ctx| {
            let slots = storage_slots(&ctx.peek_stack(1)?);
            ctx.scratch::<BranchSlots>().0.extend(slots);
            Ok(())
        })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BranchSlots(pub BTreeSet<SlotRef>);

/// Decides a re-entrancy candidate from its call graph and replay trace.
///
/// A re-entered contract is flagged when it writes a branch- or
/// amount-influencing slot of its own at or after the first edge that
/// re-enters it. The loss is the Ether that flagged contracts send from that
/// edge on, counting only sends whose amount derives from such a slot.
pub fn judge_reentrancy(tx: &NormalTxRecord, graph: &CallGraph, trace: &ReentrancyTrace) -> Option<Finding> {
    let evidence = find_reentry_points(graph);
    let first = first_reentries(&evidence);
    let mut influencing = trace.branch_slots.clone();
    for c in trace.calls.values() {
        influencing.extend(c.slots.iter().copied());
    }
    let mut flagged: BTreeMap<Address, BTreeSet<SlotRef>> = BTreeMap::new();
    for (contract, inner) in &first {
        let late: BTreeSet<SlotRef> = trace
            .writes
            .iter()
            .filter(|w| &w.slot.contract == contract && w.internal_count as u64 >= *inner && influencing.contains(&w.slot))
            .map(|w| w.slot)
            .collect();
        if !late.is_empty() {
            flagged.insert(*contract, late);
        }
    }
    if flagged.is_empty() {
        return None;
    }
    let mut loss = Word::zero();
    for (contract, late) in &flagged {
        let inner = first[contract];
        for e in &graph.edges {
            if e.kind != CallKind::Call || &e.from != contract || e.serial < inner || e.value.is_zero() {
                continue;
            }
            let Some(obs) = trace.calls.get(&e.serial) else { continue };
            if obs.from == e.from && obs.value == e.value && !obs.slots.is_disjoint(late) {
                loss = loss.saturating_add(e.value);
            }
        }
    }
    let attackers = root_accounts(tx);
    let mut victims: Vec<Address> = flagged.keys().filter(|a| !attackers.contains(a)).copied().collect();
    if victims.is_empty() {
        victims = flagged.keys().copied().collect();
    }
    Some(Finding {
        rule: Rule::Reentrancy,
        txn: Some(tx.hash),
        bucket: None,
        attackers,
        victims,
        evidence: Evidence::Reentrancy {
            reentries: evidence.into_iter().filter(|e| flagged.contains_key(&e.address)).collect(),
            influencing: influencing.into_iter().collect(),
            written_after_reentry: flagged.into_values().flatten().collect(),
        },
        financial_loss: Some(loss),
    })
}

fn confirm_many<T, J>(
    store: &Store,
    hashes: Vec<B256>,
    cfg: ReplayConfig,
    rule: Rule,
    registry: &Registry,
    judge: J,
) -> Vec<Finding>
where
    T: Default + Send + 'static,
    J: Fn(&NormalTxRecord, T) -> Option<Finding> + Sync,
{
    let req = ReplayRequest::new(hashes).workers(cfg.workers).group_limit(cfg.group_limit);
    let results = replay_batch_map(store, &req, Some(registry), |r: &ReplayResult, s: &mut Scratch| {
        if !r.verdict.is_ok() {
            return Some(Finding::error(rule, r.hash, format!("replay failed: {:?}", r.verdict)));
        }
        match store.tx(&r.hash) {
            Some((_, tx)) => judge(tx, s.take::<T>()),
            None => Some(Finding::error(rule, r.hash, "transaction not in store".into())),
        }
    });
    results.into_iter().filter_map(|(_, f)| f).collect()
}

/// Replays each transaction with the re-entrancy callbacks and judges it.
pub fn confirm_reentrancy(store: &Store, hashes: &[B256], cfg: ReplayConfig) -> Vec<Finding> {
    let reg = reentrancy_registry();
    confirm_many(store, hashes.to_vec(), cfg, Rule::Reentrancy, &reg, |tx, trace: ReentrancyTrace| {
        judge_reentrancy(tx, &call_graph_of(tx, &SelectorDict::default()), &trace)
    })
}

pub fn detect_reentrancy(store: &Store, cfg: ReplayConfig) -> Vec<Finding> {
    let hashes: Vec<B256> = candidates_reentrancy(store).into_iter().map(|l| l.hash).collect();
    confirm_reentrancy(store, &hashes, cfg)
}

// ---------------------------------------------------------------------------
// Bad randomness

/// At least two internal transactions, one of which sends Ether to a contract.
pub fn is_bad_randomness_candidate(tx: &NormalTxRecord) -> bool {
    tx.int_txn_count >= 2 && tx.internal_txns.len() >= 2 && internal_value_to_contract(tx)
}

pub fn candidates_bad_randomness(store: &Store) -> Vec<TxLocator> {
    candidates(store, is_bad_randomness_candidate)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct BranchObservation {
    pub tags: Vec<String>,
    pub condition: Word,
    pub code_address: Address,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RandomnessTrace(pub Vec<BranchObservation>);

/// Callbacks of the bad-randomness confirmation under the block-info policy.
pub fn randomness_registry() -> Registry {
    Registry::new()
        .with_policy(TaintPolicy::BLOCK_INFO)
        .on(InstrumentationPoint::Before(Opcode::JUMPI), |ctx: &mut HookContext<'_, '_>| {
            let tags: Vec<String> = ctx
                .peek_stack(1)?
                .iter()
                .filter(|t| BLOCK_INFO_TAGS.contains(t))
                .map(str::to_owned)
                .collect();
            if tags.is_empty() {
                return Ok(());
            }
            let obs = BranchObservation {
                tags,
                condition: ctx.stack_peek(1)?,
                code_address: ctx.code_address()?,
            };
            ctx.scratch::<RandomnessTrace>().0.push(obs);
            Ok::<(), HookError>(())
        })
}

/// Flags a transaction in which the same block-info branch fingerprint
/// (sorted tag names, condition value) is evaluated by at least two
/// different code addresses.
pub fn judge_bad_randomness(tx: &NormalTxRecord, trace: &RandomnessTrace) -> Option<Finding> {
    let mut groups: BTreeMap<(Vec<String>, Word), BTreeSet<Address>> = BTreeMap::new();
    for o in &trace.0 {
        let mut tags = o.tags.clone();
        tags.sort();
        tags.dedup();
        groups.entry((tags, o.condition)).or_default().insert(o.code_address);
    }
    let ((tags, condition), codes) = groups.into_iter().find(|(_, codes)| codes.len() >= 2)?;
    let attackers = root_accounts(tx);
    let mut victims: Vec<Address> = codes.iter().filter(|a| !attackers.contains(a)).copied().collect();
    if victims.is_empty() {
        victims = codes.iter().copied().collect();
    }
    Some(Finding {
        rule: Rule::BadRandomness,
        txn: Some(tx.hash),
        bucket: None,
        attackers,
        victims,
        evidence: Evidence::BadRandomness {
            tags,
            condition,
            code_addresses: codes.into_iter().collect(),
        },
        financial_loss: None,
    })
}

pub fn confirm_bad_randomness(store: &Store, hashes: &[B256], cfg: ReplayConfig) -> Vec<Finding> {
    let reg = randomness_registry();
    confirm_many(store, hashes.to_vec(), cfg, Rule::BadRandomness, &reg, |tx, trace: RandomnessTrace| {
        judge_bad_randomness(tx, &trace)
    })
}

pub fn detect_bad_randomness(store: &Store, cfg: ReplayConfig) -> Vec<Finding> {
    let hashes: Vec<B256> = candidates_bad_randomness(store).into_iter().map(|l| l.hash).collect();
    confirm_bad_randomness(store, &hashes, cfg)
}

// ---------------------------------------------------------------------------
// Suicide bomb

/// Self-destruction count and how many distinct beneficiaries did not exist
/// before the transaction.
pub fn destruction_profile(tx: &NormalTxRecord) -> (usize, usize) {
    let mut count = 0;
    let mut fresh = BTreeSet::new();
    for i in &tx.internal_txns {
        if i.kind != CallKind::SelfDestruct {
            continue;
        }
        count += 1;
        if !tx.slice_for(&i.to_address).is_some_and(|s| s.exists()) {
            fresh.insert(i.to_address);
        }
    }
    (count, fresh.len())
}

/// Transactions with at least `threshold` self-destructions whose
/// beneficiaries are mostly fresh accounts.
pub fn detect_suicide_bomb(store: &Store, threshold: usize) -> Vec<Finding> {
    let mut out = Vec::new();
    for (_, tx) in store.transactions() {
        if tx.status != TxStatus::Success {
            continue;
        }
        let (count, fresh) = destruction_profile(tx);
        if count == 0 || count < threshold {
            continue;
        }
        let beneficiaries: BTreeSet<Address> = tx
            .internal_txns
            .iter()
            .filter(|i| i.kind == CallKind::SelfDestruct)
            .map(|i| i.to_address)
            .collect();
        if fresh * 2 <= beneficiaries.len() {
            continue;
        }
        let victims: BTreeSet<Address> = tx
            .internal_txns
            .iter()
            .filter(|i| i.kind == CallKind::SelfDestruct)
            .map(|i| i.from_address)
            .collect();
        out.push(Finding {
            rule: Rule::SuicideBomb,
            txn: Some(tx.hash),
            bucket: None,
            attackers: root_accounts(tx),
            victims: victims.into_iter().collect(),
            evidence: Evidence::SuicideBomb {
                destructions: count,
                fresh_beneficiaries: fresh,
            },
            financial_loss: None,
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Airdrop hunting

/// Checks one transaction for mass-created, self-destructed children that
/// pass tokens to the originator or to one common collector.
pub fn judge_airdrop(tx: &NormalTxRecord, threshold: usize) -> Option<Finding> {
    let created: Vec<Address> = tx
        .internal_txns
        .iter()
        .filter(|i| i.kind.is_create())
        .map(|i| i.to_address)
        .collect();
    if created.len() < threshold.max(1) {
        return None;
    }
    let destroyed: BTreeSet<Address> = tx
        .internal_txns
        .iter()
        .filter(|i| i.kind == CallKind::SelfDestruct)
        .map(|i| i.from_address)
        .collect();
    let transfers = decode_transfers(&tx.logs);
    // beneficiary -> children paying it
    let mut paid: BTreeMap<Address, BTreeSet<Address>> = BTreeMap::new();
    for t in &transfers {
        if created.contains(&t.from) && destroyed.contains(&t.from) {
            paid.entry(t.to).or_default().insert(t.from);
        }
    }
    let origin = tx.from_address;
    let best = paid
        .iter()
        .filter(|(b, kids)| kids.len() >= threshold && (**b == origin || !created.contains(b)))
        .max_by(|(a, ka), (b, kb)| ka.len().cmp(&kb.len()).then((**a == origin).cmp(&(**b == origin))).then(b.cmp(a)))?;
    let (beneficiary, kids) = (*best.0, best.1);
    let children: Vec<Address> = created.iter().filter(|c| kids.contains(c)).copied().collect();
    let mut tokens: BTreeMap<Address, Word> = BTreeMap::new();
    for t in &transfers {
        if t.to == beneficiary && kids.contains(&t.from) {
            let e = tokens.entry(t.token).or_default();
            *e = e.saturating_add(t.amount);
        }
    }
    Some(Finding {
        rule: Rule::AirdropHunting,
        txn: Some(tx.hash),
        bucket: None,
        attackers: root_accounts(tx),
        victims: tokens.keys().copied().collect(),
        evidence: Evidence::AirdropHunting {
            children,
            beneficiary,
            tokens: tokens.into_iter().map(|(token, amount)| TokenTotal { token, amount }).collect(),
        },
        financial_loss: None,
    })
}

pub fn detect_airdrop_hunting(store: &Store, threshold: usize) -> Vec<Finding> {
    store
        .transactions()
        .filter(|(_, t)| t.status == TxStatus::Success)
        .filter_map(|(_, t)| judge_airdrop(t, threshold))
        .collect()
}

// ---------------------------------------------------------------------------
// Lifecycle trend

/// Mean and population standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Indices of values exceeding mean + k * stddev of all other values. When
/// the other values have no spread at all, only a positive value against an
/// all-zero background counts.
pub fn outliers(values: &[u64], k: f64) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    if values.len() < 2 {
        return out;
    }
    for (i, &v) in values.iter().enumerate() {
        let others: Vec<f64> = values
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, &x)| x as f64)
            .collect();
        let (mean, std) = mean_std(&others);
        let hit = if std == 0.0 {
            v > 0 && mean == 0.0
        } else {
            (v as f64) > mean + k * std
        };
        if hit {
            out.push((i, mean, std));
        }
    }
    out
}

/// Buckets whose creation or destruction count is an outlier.
pub fn trend_anomalies(store: &Store, bucket_size: u64, k: f64) -> Result<Vec<Finding>, StoreError> {
    let buckets = store.lifecycle_counts(bucket_size)?;
    let mut found: BTreeMap<(u64, usize), Finding> = BTreeMap::new();
    type Metric = (&'static str, fn(&crate::store::LifecycleBucket) -> u64);
    let metrics: [Metric; 2] =
        [("creations", |b| b.creations), ("destructions", |b| b.destructions)];
    for (m, (name, get)) in metrics.iter().enumerate() {
        let values: Vec<u64> = buckets.iter().map(get).collect();
        for (i, mean, stddev) in outliers(&values, k) {
            found.insert(
                (buckets[i].start, m),
                Finding {
                    rule: Rule::TrendAnomaly,
                    txn: None,
                    bucket: Some(buckets[i].start),
                    attackers: Vec::new(),
                    victims: Vec::new(),
                    evidence: Evidence::TrendAnomaly {
                        metric: (*name).to_owned(),
                        count: values[i],
                        mean,
                        stddev,
                    },
                    financial_loss: None,
                },
            );
        }
    }
    Ok(found.into_values().collect())
}
