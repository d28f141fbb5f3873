//! Dynamic call graphs, re-entry reconstruction and money-flow graphs, all
//! built from stored records without replay.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::primitives::{Address, Word, B256};
use crate::records::{CallKind, NormalTxRecord};
use crate::store::{is_contract_in, Store, StoreError};

pub const DEFAULT_HOPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum NodeKind {
    Eoa,
    Contract,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct CallNode {
    pub address: Address,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct CallEdge {
    /// 0 for the normal transaction, `k + 1` for internal transaction `k`.
    pub serial: u64,
    pub kind: CallKind,
    #[serde(with = "crate::primitives::serde_quantity")]
    pub value: Word,
    /// First four input bytes; `None` when the input is empty or too short.
    pub selector: Option<[u8; 4]>,
    pub function: Option<String>,
    pub depth: u64,
    pub from: Address,
    pub to: Address,
}

impl CallEdge {
    /// Label text for the invoked function: the resolved signature, the raw
    /// selector, or `null` for empty input.
    pub fn function_label(&self) -> String {
        match (&self.function, &self.selector) {
            (Some(name), _) => name.clone(),
            (None, Some(sel)) => format!("0x{}", hex::encode(sel)),
            (None, None) => "null".to_owned(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct CallGraph {
    pub hash: B256,
    /// In order of first appearance.
    pub nodes: Vec<CallNode>,
    /// Ordered by serial.
    pub edges: Vec<CallEdge>,
}

impl CallGraph {
    pub fn node(&self, address: &Address) -> Option<&CallNode> {
        self.nodes.iter().find(|n| &n.address == address)
    }

    pub fn max_depth(&self) -> u64 {
        self.edges.iter().map(|e| e.depth).max().unwrap_or(0)
    }
}

/// Offline selector to signature dictionary read from `selector<TAB>signature` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SelectorDict {
    map: BTreeMap<[u8; 4], String>,
}

#[derive(Debug, thiserror::Error)]
pub enum DictError {
    #[error("selector dictionary line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SelectorDict {
    pub fn parse(text: &str) -> Result<Self, DictError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| DictError::Parse {
                line: i + 1,
                reason: reason.to_owned(),
            };
            let (sel, sig) = line.split_once('\t').ok_or_else(|| err("expected two tab-separated columns"))?;
            let sel = sel.strip_prefix("0x").unwrap_or(sel);
            let bytes = hex::decode(sel).map_err(|_| err("selector is not hex"))?;
            let sel: [u8; 4] = bytes.try_into().map_err(|_| err("selector must be 4 bytes"))?;
            let sig = sig.trim();
            if sig.is_empty() {
                return Err(err("empty signature"));
            }
            map.insert(sel, sig.to_owned());
        }
        Ok(SelectorDict { map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DictError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Builds a dictionary by hashing the given signatures.
    pub fn from_signatures<'a>(sigs: impl IntoIterator<Item = &'a str>) -> Self {
        let map = sigs.into_iter().map(|s| (crate::evm::selector(s), s.to_owned())).collect();
        SelectorDict { map }
    }

    pub fn lookup(&self, selector: &[u8; 4]) -> Option<&str> {
        self.map.get(selector).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (sel, sig) in &self.map {
            let _ = writeln!(out, "0x{}\t{sig}", hex::encode(sel));
        }
        out
    }
}

fn selector_of(input: &[u8]) -> Option<[u8; 4]> {
    input.get(..4).map(|s| s.try_into().expect("4 bytes"))
}

/// Builds the call graph of one recorded transaction.
pub fn call_graph_of(tx: &NormalTxRecord, dict: &SelectorDict) -> CallGraph {
    let mut nodes: Vec<CallNode> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut add = |a: Address, nodes: &mut Vec<CallNode>| {
        if seen.insert(a) {
            let kind = if is_contract_in(tx, &a) {
                NodeKind::Contract
            } else {
                NodeKind::Eoa
            };
            nodes.push(CallNode { address: a, kind });
        }
    };
    let root_to = tx.target().unwrap_or(Address::ZERO);
    let root_sel = if tx.is_creation() { None } else { selector_of(&tx.input) };
    let mut edges = vec![CallEdge {
        serial: 0,
        kind: if tx.is_creation() { CallKind::Create } else { CallKind::Call },
        value: tx.value,
        selector: root_sel,
        function: root_sel.and_then(|s| dict.lookup(&s).map(str::to_owned)),
        depth: 1,
        from: tx.from_address,
        to: root_to,
    }];
    add(tx.from_address, &mut nodes);
    add(root_to, &mut nodes);
    let mut internals: Vec<_> = tx.internal_txns.iter().collect();
    internals.sort_by_key(|i| i.serial);
    for i in internals {
        let sel = if i.call_function.is_empty() {
            None
        } else {
            selector_of(&i.call_function)
        };
        add(i.from_address, &mut nodes);
        add(i.to_address, &mut nodes);
        edges.push(CallEdge {
            serial: i.serial + 1,
            kind: i.kind,
            value: i.value,
            selector: sel,
            function: sel.and_then(|s| dict.lookup(&s).map(str::to_owned)),
            depth: i.evm_depth,
            from: i.from_address,
            to: i.to_address,
        });
    }
    CallGraph {
        hash: tx.hash,
        nodes,
        edges,
    }
}

pub fn build_call_graph(store: &Store, hash: &B256, dict: &SelectorDict) -> Result<CallGraph, StoreError> {
    let (_, tx) = store.tx(hash).ok_or(StoreError::NotFound(*hash))?;
    Ok(call_graph_of(tx, dict))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct ReentryEvidence {
    pub address: Address,
    pub outer_serial: u64,
    pub inner_serial: u64,
    pub outer_depth: u64,
    pub inner_depth: u64,
}

/// Replays the frame stack implied by the serial/depth sequence and reports
/// every edge entering an address that still has an open frame. The outer
/// edge is the outermost open frame of that address.
pub fn find_reentry_points(graph: &CallGraph) -> Vec<ReentryEvidence> {
    let mut stack: Vec<&CallEdge> = Vec::new();
    let mut out = Vec::new();
    for e in &graph.edges {
        let parent_len = e.depth.saturating_sub(1) as usize;
        stack.truncate(parent_len);
        if let Some(outer) = stack.iter().find(|o| o.to == e.to) {
            out.push(ReentryEvidence {
                address: e.to,
                outer_serial: outer.serial,
                inner_serial: e.serial,
                outer_depth: outer.depth,
                inner_depth: e.depth,
            });
        }
        // A self-destruction opens no frame.
        if e.kind != CallKind::SelfDestruct {
            stack.push(e);
        }
    }
    out
}

/// Addresses re-entered in `graph`, each with its earliest inner edge serial.
pub fn first_reentries(evidence: &[ReentryEvidence]) -> BTreeMap<Address, u64> {
    let mut m: BTreeMap<Address, u64> = BTreeMap::new();
    for e in evidence {
        let v = m.entry(e.address).or_insert(e.inner_serial);
        *v = (*v).min(e.inner_serial);
    }
    m
}

/// True iff the edge set has a directed cycle passing through a re-entry point.
pub fn has_loop_with_reentry(graph: &CallGraph) -> bool {
    let points: BTreeSet<Address> = find_reentry_points(graph).into_iter().map(|e| e.address).collect();
    if points.is_empty() {
        return false;
    }
    let mut adj: HashMap<Address, BTreeSet<Address>> = HashMap::new();
    for e in &graph.edges {
        adj.entry(e.from).or_default().insert(e.to);
    }
    points.iter().any(|p| {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<Address> = adj.get(p).into_iter().flatten().copied().collect();
        while let Some(a) = queue.pop_front() {
            if a == *p {
                return true;
            }
            if seen.insert(a) {
                queue.extend(adj.get(&a).into_iter().flatten().copied());
            }
        }
        false
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct FlowNode {
    pub address: Address,
    #[serde(with = "crate::primitives::serde_quantity")]
    pub received: Word,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct FlowEdge {
    pub from: Address,
    pub to: Address,
    #[serde(with = "crate::primitives::serde_quantity")]
    pub amount: Word,
    pub transfers: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "PascalCase")]
pub struct MoneyFlowGraph {
    pub focal: Address,
    /// Sorted by address.
    pub nodes: Vec<FlowNode>,
    /// Sorted by (from, to).
    pub edges: Vec<FlowEdge>,
}

impl MoneyFlowGraph {
    pub fn received(&self, a: &Address) -> Word {
        self.nodes
            .iter()
            .find(|n| &n.address == a)
            .map_or(Word::zero(), |n| n.received)
    }

    /// Nodes by received amount, largest first; ties by address.
    pub fn ranked(&self) -> Vec<&FlowNode> {
        let mut v: Vec<&FlowNode> = self.nodes.iter().collect();
        v.sort_by(|a, b| b.received.cmp(&a.received).then(a.address.cmp(&b.address)));
        v
    }
}

#[derive(Debug, Clone, Copy)]
struct Transfer {
    from: Address,
    to: Address,
    value: Word,
}

/// Value movements of successful transactions: the outer transfer and every
/// value-bearing internal transaction.
fn value_transfers(store: &Store) -> Vec<Transfer> {
    let mut out = Vec::new();
    for (_, tx) in store.transactions() {
        if tx.status != crate::records::TxStatus::Success {
            continue;
        }
        if !tx.value.is_zero() {
            if let Some(to) = tx.target() {
                out.push(Transfer {
                    from: tx.from_address,
                    to,
                    value: tx.value,
                });
            }
        }
        for i in &tx.internal_txns {
            if !i.value.is_zero() && i.kind != CallKind::DelegateCall && i.kind != CallKind::StaticCall {
                out.push(Transfer {
                    from: i.from_address,
                    to: i.to_address,
                    value: i.value,
                });
            }
        }
    }
    out
}

/// Breadth-first expansion from `focal` over value transfers, `hops` levels
/// deep. Repeated payments between one pair aggregate on one edge.
pub fn build_money_flow(store: &Store, focal: &Address, hops: usize) -> Result<MoneyFlowGraph, StoreError> {
    let transfers = value_transfers(store);
    let known = store
        .transactions()
        .any(|(_, t)| &t.from_address == focal || t.target().as_ref() == Some(focal) || t.internal_txns.iter().any(|i| &i.from_address == focal || &i.to_address == focal));
    if !known {
        return Err(StoreError::UnknownAccount(*focal));
    }
    let mut by_account: HashMap<Address, Vec<usize>> = HashMap::new();
    for (i, t) in transfers.iter().enumerate() {
        by_account.entry(t.from).or_default().push(i);
        if t.to != t.from {
            by_account.entry(t.to).or_default().push(i);
        }
    }
    let mut visited: BTreeSet<Address> = BTreeSet::from([*focal]);
    let mut frontier = vec![*focal];
    let mut included: BTreeSet<usize> = BTreeSet::new();
    for _ in 0..hops {
        let mut next = Vec::new();
        for a in &frontier {
            for &i in by_account.get(a).into_iter().flatten() {
                if !included.insert(i) {
                    continue;
                }
                let t = &transfers[i];
                for end in [t.from, t.to] {
                    if visited.insert(end) {
                        next.push(end);
                    }
                }
            }
        }
        frontier = next;
    }
    let mut edges: BTreeMap<(Address, Address), (Word, u64)> = BTreeMap::new();
    for i in included {
        let t = &transfers[i];
        let e = edges.entry((t.from, t.to)).or_insert((Word::zero(), 0));
        e.0 = e.0.saturating_add(t.value);
        e.1 += 1;
    }
    let mut received: BTreeMap<Address, Word> = visited.iter().map(|a| (*a, Word::zero())).collect();
    for ((_, to), (amount, _)) in &edges {
        let r = received.entry(*to).or_default();
        *r = r.saturating_add(*amount);
    }
    Ok(MoneyFlowGraph {
        focal: *focal,
        nodes: received
            .into_iter()
            .map(|(address, received)| FlowNode { address, received })
            .collect(),
        edges: edges
            .into_iter()
            .map(|((from, to), (amount, transfers))| FlowEdge {
                from,
                to,
                amount,
                transfers,
            })
            .collect(),
    })
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT text of a call graph. EOAs are boxes, contracts ellipses.
pub fn call_graph_dot(graph: &CallGraph) -> String {
    let mut out = String::from("digraph calls {\n");
    for n in &graph.nodes {
        let shape = match n.kind {
            NodeKind::Eoa => "box",
            NodeKind::Contract => "ellipse",
        };
        let _ = writeln!(out, "  \"{}\" [shape={shape}];", n.address);
    }
    for e in &graph.edges {
        let label = format!("{} {} {} {} d{}", e.serial, e.kind, e.value, e.function_label(), e.depth);
        let _ = writeln!(out, "  \"{}\" -> \"{}\" [label=\"{}\"];", e.from, e.to, dot_escape(&label));
    }
    out.push_str("}\n");
    out
}

/// DOT text of a money-flow graph; node labels carry the received total.
pub fn money_flow_dot(graph: &MoneyFlowGraph) -> String {
    let mut out = String::from("digraph money {\n");
    for n in &graph.nodes {
        let _ = writeln!(
            out,
            "  \"{}\" [label=\"{}\\n{}\"];",
            n.address,
            n.address,
            n.received
        );
    }
    for e in &graph.edges {
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{} ({})\"];",
            e.from, e.to, e.amount, e.transfers
        );
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(n: u64) -> Address {
        Address::from_low_u64(n)
    }

    fn edge(serial: u64, depth: u64, from: u64, to: u64) -> CallEdge {
        CallEdge {
            serial,
            kind: CallKind::Call,
            value: Word::zero(),
            selector: None,
            function: None,
            depth,
            from: a(from),
            to: a(to),
        }
    }

    fn graph(edges: Vec<CallEdge>) -> CallGraph {
        CallGraph {
            hash: B256::ZERO,
            nodes: Vec::new(),
            edges,
        }
    }

    #[test]
    fn linear_chain_has_no_reentry() {
        let g = graph(vec![edge(0, 1, 9, 1), edge(1, 2, 1, 2), edge(2, 3, 2, 3)]);
        assert!(find_reentry_points(&g).is_empty());
        assert!(!has_loop_with_reentry(&g));
    }

    #[test]
    fn back_call_is_reentry() {
        let g = graph(vec![edge(0, 1, 9, 1), edge(1, 2, 1, 2), edge(2, 3, 2, 1)]);
        let ev = find_reentry_points(&g);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].address, a(1));
        assert_eq!((ev[0].outer_serial, ev[0].inner_serial), (0, 2));
        assert!(has_loop_with_reentry(&g));
    }

    #[test]
    fn sequential_mutual_calls_are_not_reentry() {
        // 1 calls 2, which returns; then 2 is called again at the same depth.
        let g = graph(vec![edge(0, 1, 9, 1), edge(1, 2, 1, 2), edge(2, 2, 1, 2)]);
        assert!(find_reentry_points(&g).is_empty());
        assert!(!has_loop_with_reentry(&g));
    }

    #[test]
    fn dictionary_parse_and_lookup() {
        let d = SelectorDict::parse("0xa9059cbb\ttransfer(address,uint256)\n# note\n\n").unwrap();
        assert_eq!(d.lookup(&[0xa9, 0x05, 0x9c, 0xbb]), Some("transfer(address,uint256)"));
        assert_eq!(d.lookup(&[0, 0, 0, 0]), None);
        assert!(SelectorDict::parse("0xa9059c\tx()").is_err());
        assert!(SelectorDict::parse("zz").is_err());
        assert_eq!(SelectorDict::parse(&d.to_tsv()).unwrap(), d);
    }

    #[test]
    fn empty_graph_dot() {
        assert_eq!(call_graph_dot(&CallGraph::default()), "digraph calls {\n}\n");
    }
}
