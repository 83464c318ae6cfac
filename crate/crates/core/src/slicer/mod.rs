//! Scaling machinery: policy equivalence classes by partition refinement,
//! slice construction, and the slice/full-network equivalence harness.

pub mod classify;

pub use classify::{
    classify_state_class, declared_state_class, ClassifyBounds, ClassifyError, Provenance,
    StateClass, StateClassKind, Witness,
};

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::bmc::{explore, Bounds};
use crate::invariant::{referenced_nodes, Invariant, MbxRef, VerdictKind};
use crate::mbx::ConfigValue;
use crate::net::{Address, NodeId, NodeKind, Value};
use crate::netfunc::{forwarding_graph, transfers_within_budget, TransferError};
use crate::network::{Network, NetworkBuilder};

/// Assignment of hosts to policy equivalence classes. Class ids are
/// deterministic: classes are numbered by their lexicographically least
/// member name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyPartition {
    class_of: BTreeMap<NodeId, u32>,
    members: BTreeMap<u32, Vec<NodeId>>,
}

impl PolicyPartition {
    pub fn class_of(&self, host: NodeId) -> u32 {
        self.class_of.get(&host).copied().unwrap_or(u32::MAX)
    }

    pub fn classes(&self) -> impl Iterator<Item = (u32, &[NodeId])> {
        self.members.iter().map(|(c, m)| (*c, m.as_slice()))
    }

    pub fn class_count(&self) -> usize {
        self.members.len()
    }

    /// Lexicographically least host of a class.
    pub fn representative(&self, class: u32) -> Option<NodeId> {
        self.members.get(&class).and_then(|m| m.first().copied())
    }
}

/// Middlebox-type sequence along the default-scenario forwarding path from
/// `from` toward `dst`, bounded by node count to survive routing anomalies.
fn path_types(
    net: &Network,
    tf: &crate::netfunc::TransferFunction,
    from: NodeId,
    dst: Address,
) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = from;
    let mut hops = 0usize;
    let limit = net.nodes().count() + 1;
    loop {
        let Some(next) = tf.next(cur, dst) else { break };
        if let Some(m) = net.middlebox(next) {
            out.push(m.model.name.clone());
        }
        if matches!(net.kind(next), NodeKind::Host) || hops > limit {
            break;
        }
        hops += 1;
        cur = next;
    }
    out
}

/// Canonical form of one config entry as seen by `host`: the host's own
/// address becomes `self`, other host addresses become their class, and
/// non-host addresses and other values stay literal.
fn canonical_entry(
    net: &Network,
    classes: &BTreeMap<NodeId, u32>,
    host_addr: Address,
    entry: &[Value],
) -> String {
    let mut parts = Vec::new();
    for v in entry {
        parts.push(canonical_value(net, classes, host_addr, v));
    }
    parts.join(",")
}

fn canonical_value(
    net: &Network,
    classes: &BTreeMap<NodeId, u32>,
    host_addr: Address,
    v: &Value,
) -> String {
    match v {
        Value::Addr(a) if *a == host_addr => "self".to_string(),
        Value::Addr(a) => match net.address_owner(*a) {
            Some(h) => format!("class{}", classes.get(&h).copied().unwrap_or(u32::MAX)),
            None => format!("addr:{}", net.universe.address_name(*a)),
        },
        Value::Port(p) => format!("port:{}", net.universe.port_name(*p)),
        Value::Content(c) => format!("content:{}", net.universe.content_name(*c)),
        Value::Flow(_) => "flow".to_string(),
        Value::Tuple(items) => items
            .iter()
            .map(|i| canonical_value(net, classes, host_addr, i))
            .collect::<Vec<_>>()
            .join(","),
    }
}

fn mentions_address(v: &Value, addr: Address) -> bool {
    match v {
        Value::Addr(a) => *a == addr,
        Value::Flow(f) => f.lo.0 == addr || f.hi.0 == addr,
        Value::Tuple(items) => items.iter().any(|i| mentions_address(i, addr)),
        _ => false,
    }
}

/// Computes policy equivalence classes by iterative partition refinement:
/// hosts are split by (per peer class) the middlebox-type sequences on
/// their forwarding paths and by their config-rule footprint in each
/// middlebox model, canonicalized by class, to a fixed point.
pub fn policy_partition(net: &Network) -> Result<PolicyPartition, TransferError> {
    let tf = crate::netfunc::compute_transfer(net, &crate::net::FailureScenario::none())?;
    let hosts: Vec<NodeId> = net.hosts().map(|h| h.id).collect();

    // Path-type sequences are independent of the evolving classes: memoize.
    let mut paths: BTreeMap<(NodeId, NodeId), (Vec<String>, Vec<String>)> = BTreeMap::new();
    for &a in &hosts {
        for &b in &hosts {
            if a == b {
                continue;
            }
            let addr_b = net.host(b).unwrap().address;
            let addr_a = net.host(a).unwrap().address;
            paths.insert((a, b), (path_types(net, &tf, a, addr_b), path_types(net, &tf, b, addr_a)));
        }
    }

    let mut classes: BTreeMap<NodeId, u32> = hosts.iter().map(|h| (*h, 0)).collect();
    for _round in 0..hosts.len() + 1 {
        // Signature per host under the current classes.
        let mut signatures: BTreeMap<NodeId, String> = BTreeMap::new();
        for &h in &hosts {
            let host_addr = net.host(h).unwrap().address;
            let mut sig = format!("c{};", classes[&h]);

            // Per peer class: the set of (path there, path back) sequences.
            let mut per_class: BTreeMap<u32, BTreeSet<String>> = BTreeMap::new();
            for &peer in &hosts {
                if peer == h {
                    continue;
                }
                let (there, back) = &paths[&(h, peer)];
                per_class
                    .entry(classes[&peer])
                    .or_default()
                    .insert(format!("{}|{}", there.join(">"), back.join(">")));
            }
            for (c, seqs) in per_class {
                sig.push_str(&format!("peer{c}:{};", seqs.iter().cloned().collect::<Vec<_>>().join("&")));
            }

            // Config footprint: entries mentioning this host, canonicalized
            // by class. A multiset: multiplicity is what separates a host
            // accepting from everyone from one accepting from a few.
            let mut footprint: BTreeMap<String, usize> = BTreeMap::new();
            for m in net.middleboxes() {
                for (param, value) in &m.config {
                    match value {
                        ConfigValue::Set(items) => {
                            for entry in items {
                                if entry.iter().any(|v| mentions_address(v, host_addr)) {
                                    *footprint
                                        .entry(format!(
                                            "{}::{}({})",
                                            m.model.name,
                                            param,
                                            canonical_entry(net, &classes, host_addr, entry)
                                        ))
                                        .or_default() += 1;
                                }
                            }
                        }
                        ConfigValue::Scalar(v) => {
                            if mentions_address(v, host_addr) {
                                *footprint
                                    .entry(format!("{}::{}=self", m.model.name, param))
                                    .or_default() += 1;
                            }
                        }
                    }
                }
            }
            for (f, count) in footprint {
                sig.push_str(&format!("{f}x{count};"));
            }
            signatures.insert(h, sig);
        }

        // Re-number classes canonically by least member name.
        let mut by_sig: BTreeMap<String, Vec<NodeId>> = BTreeMap::new();
        for &h in &hosts {
            by_sig.entry(signatures[&h].clone()).or_default().push(h);
        }
        let mut groups: Vec<Vec<NodeId>> = by_sig.into_values().collect();
        for g in groups.iter_mut() {
            g.sort_by(|a, b| net.node_name(*a).cmp(net.node_name(*b)));
        }
        groups.sort_by(|a, b| net.node_name(a[0]).cmp(net.node_name(b[0])));
        let mut next: BTreeMap<NodeId, u32> = BTreeMap::new();
        for (i, g) in groups.iter().enumerate() {
            for h in g {
                next.insert(*h, i as u32);
            }
        }
        if next == classes {
            break;
        }
        classes = next;
    }

    let mut members: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
    for (&h, &c) in &classes {
        members.entry(c).or_default().push(h);
    }
    for m in members.values_mut() {
        m.sort_by(|a, b| net.node_name(*a).cmp(net.node_name(*b)));
    }
    Ok(PolicyPartition { class_of: classes, members })
}

/// Which slice-construction rule produced a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceRule {
    /// All middleboxes flow-parallel: the forwarding graph between the
    /// invariant's nodes is already closed under state.
    FlowParallel,
    /// Origin-agnostic middleboxes present: one representative host per
    /// policy class added before re-closing under forwarding.
    WithRepresentatives,
}

#[derive(Debug, Clone)]
pub struct Slice {
    pub nodes: BTreeSet<NodeId>,
    pub links: BTreeSet<(NodeId, NodeId)>,
    pub rule: SliceRule,
    /// Representative host chosen per policy class (empty for the
    /// flow-parallel rule).
    pub representatives: BTreeMap<u32, NodeId>,
}

#[derive(Debug, Error)]
pub enum SliceError {
    #[error("general middleboxes present: {0:?}; verify on the full network")]
    GeneralMiddleboxPresent(Vec<String>),
    #[error(transparent)]
    Transfer(#[from] TransferError),
}

/// Builds a slice for one invariant. `class_table` maps model names to
/// their state class.
pub fn build_slice(
    net: &Network,
    inv: &Invariant,
    class_table: &BTreeMap<String, StateClassKind>,
    partition: &PolicyPartition,
) -> Result<Slice, SliceError> {
    let general: Vec<String> = net
        .middleboxes()
        .filter(|m| {
            matches!(class_table.get(&m.model.name), Some(StateClassKind::General) | None)
        })
        .map(|m| m.name.clone())
        .collect();
    if !general.is_empty() {
        return Err(SliceError::GeneralMiddleboxPresent(general));
    }

    let budget = inv.max_failures;
    let tfs = transfers_within_budget(net, budget)?;
    let tf_refs: Vec<&crate::netfunc::TransferFunction> = tfs.values().collect();

    let mut endpoints = referenced_nodes(inv, net);
    // Traversal invariants reference a middlebox type rather than hosts:
    // widen to the named instances and every host that can source traffic.
    let refs = inv.predicate.mbx_refs();
    if !refs.is_empty() {
        for r in refs {
            match r {
                MbxRef::Instance(id) => {
                    endpoints.insert(*id);
                }
                MbxRef::Kind(kind) => {
                    for m in net.middleboxes() {
                        if m.model.name == *kind {
                            endpoints.insert(m.id);
                        }
                    }
                }
            }
        }
        for h in net.hosts() {
            endpoints.insert(h.id);
        }
    }

    let any_origin_agnostic = net
        .middleboxes()
        .any(|m| class_table.get(&m.model.name) == Some(&StateClassKind::OriginAgnostic));

    let mut representatives = BTreeMap::new();
    let rule = if any_origin_agnostic {
        for (c, _) in partition.classes() {
            if let Some(rep) = partition.representative(c) {
                representatives.insert(c, rep);
                endpoints.insert(rep);
            }
        }
        SliceRule::WithRepresentatives
    } else {
        SliceRule::FlowParallel
    };

    let g = forwarding_graph(net, &tf_refs, &endpoints);
    Ok(Slice { nodes: g.nodes, links: g.links, rule, representatives })
}

/// Restriction of a network to a slice's nodes. The universe is kept
/// unchanged (so interned values stay valid); hosts and middleboxes outside
/// the slice are dropped, along with links and forwarding rules that
/// reference them, and failure scenarios for removed middleboxes.
pub fn restrict_network(net: &Network, nodes: &BTreeSet<NodeId>) -> Network {
    let mut b = NetworkBuilder::new(net.universe.clone());
    for h in net.hosts() {
        if nodes.contains(&h.id) {
            b = b.host(&h.name, net.universe.address_name(h.address));
        }
    }
    for m in net.middleboxes() {
        if nodes.contains(&m.id) {
            b = b.middlebox(&m.name, m.model.clone(), m.config.clone());
        }
    }

    let kept_name = |name: &str| -> bool {
        match net.node_id(name) {
            Some(id) => nodes.contains(&id),
            None => true, // switches are kept
        }
    };

    let topo = &net.topology;
    let mut seen_links: BTreeSet<(String, String)> = BTreeSet::new();
    for idx in topo.indices() {
        if topo.is_switch(idx) {
            b = b.switch(topo.name_of(idx));
        }
    }
    for idx in topo.indices() {
        let from = topo.name_of(idx).to_string();
        if !kept_name(&from) {
            continue;
        }
        for n in topo.neighbors(idx) {
            let to = topo.name_of(n).to_string();
            if !kept_name(&to) {
                continue;
            }
            let key = if from <= to {
                (from.clone(), to.clone())
            } else {
                (to.clone(), from.clone())
            };
            if seen_links.insert(key) {
                b = b.link(&from, &to);
            }
        }
    }

    // Forwarding rules whose node and next hop both survive.
    for ((node_idx, dst), next_idx) in topo.default_rules() {
        let node = topo.name_of(node_idx).to_string();
        let next = topo.name_of(next_idx).to_string();
        if kept_name(&node) && kept_name(&next) {
            b = b.route(&node, net.universe.address_name(dst), &next);
        }
    }
    for (failed, rules) in topo.scenario_rules() {
        if !failed.iter().all(|f| nodes.contains(f)) {
            continue;
        }
        let failed_names: Vec<String> =
            failed.iter().map(|f| net.node_name(*f).to_string()).collect();
        let failed_refs: Vec<&str> = failed_names.iter().map(|s| s.as_str()).collect();
        let rules_named: Vec<(String, String, String)> = rules
            .iter()
            .filter_map(|((node_idx, dst), next_idx)| {
                let node = topo.name_of(*node_idx).to_string();
                let next = topo.name_of(*next_idx).to_string();
                if kept_name(&node) && kept_name(&next) {
                    Some((node, net.universe.address_name(*dst).to_string(), next))
                } else {
                    None
                }
            })
            .collect();
        let rule_refs: Vec<(&str, &str, &str)> = rules_named
            .iter()
            .map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str()))
            .collect();
        b = b.scenario(&failed_refs, &rule_refs);
    }

    b.build().expect("restricting a valid network yields a valid network")
}

/// Test harness for the slice theorem: the verdict kind on the slice equals
/// the verdict kind on the full network at equal bounds.
pub fn check_slice_equivalence(
    net: &Network,
    slice: &Slice,
    inv: &Invariant,
    bounds: &Bounds,
) -> Result<bool, String> {
    let full = explore(net, inv, bounds);
    let restricted = restrict_network(net, &slice.nodes);
    let remapped = crate::invariant::remap_invariant(inv, net, &restricted)
        .ok_or_else(|| "invariant references nodes outside the slice".to_string())?;
    // Packets belonging to the slice are exchanged between its hosts;
    // non-host addresses stay visible.
    let mut bounds_slice = bounds.clone();
    if bounds_slice.universe.addresses.is_none() {
        let mut addrs: BTreeSet<crate::net::Address> = net
            .hosts()
            .filter(|h| slice.nodes.contains(&h.id))
            .map(|h| h.address)
            .collect();
        for a in net.universe.declared_addresses() {
            if net.address_owner(a).is_none() {
                addrs.insert(a);
            }
        }
        bounds_slice.universe.addresses = Some(addrs);
    }
    let on_slice = explore(&restricted, &remapped, &bounds_slice);
    match (full.kind(), on_slice.kind()) {
        (VerdictKind::Unknown, _) | (_, VerdictKind::Unknown) => {
            Err("verdict unknown on one side".to_string())
        }
        (a, b) => Ok(a == b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mbx::builtin;
    use crate::net::{Universe, Value};
    use crate::network::NetworkBuilder;

    /// Hosts with per-host unique ACL footprints split into one class each.
    #[test]
    fn unique_acls_give_singleton_classes() {
        let u = Universe::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["p1".into()],
            vec!["c1".into()],
        )
        .unwrap();
        let mk = |pairs: &[(&str, &str)]| {
            ConfigValue::Set(
                pairs
                    .iter()
                    .map(|(x, y)| {
                        vec![
                            Value::Addr(u.address(x).unwrap()),
                            Value::Addr(u.address(y).unwrap()),
                        ]
                    })
                    .collect(),
            )
        };
        // One firewall whose deny list mentions a and b differently.
        let net = NetworkBuilder::new(u.clone())
            .host("A", "a")
            .host("B", "b")
            .host("C", "c")
            .middlebox(
                "fw",
                builtin("acl_firewall").unwrap(),
                [("deny".to_string(), mk(&[("a", "b"), ("c", "a"), ("c", "b")]))]
                    .into_iter()
                    .collect(),
            )
            .switch("s1")
            .switch("s2")
            .link("A", "s1")
            .link("B", "s1")
            .link("C", "s2")
            .link("s1", "fw")
            .link("fw", "s2")
            .route("s1", "a", "A")
            .route("s1", "b", "B")
            .route("s1", "c", "fw")
            .route("fw", "c", "s2")
            .route("fw", "a", "s1")
            .route("fw", "b", "s1")
            .route("s2", "c", "C")
            .route("s2", "a", "fw")
            .route("s2", "b", "fw")
            .build()
            .unwrap();
        let p = policy_partition(&net).unwrap();
        assert_eq!(p.class_count(), 3, "no two hosts share a policy signature");
    }

    /// Hosts with no rules and symmetric paths share a class.
    #[test]
    fn symmetric_hosts_share_a_class() {
        let u = Universe::new(
            vec!["a".into(), "b".into()],
            vec!["p1".into()],
            vec!["c1".into()],
        )
        .unwrap();
        let net = NetworkBuilder::new(u)
            .host("A", "a")
            .host("B", "b")
            .switch("s1")
            .link("A", "s1")
            .link("B", "s1")
            .route("s1", "a", "A")
            .route("s1", "b", "B")
            .build()
            .unwrap();
        let p = policy_partition(&net).unwrap();
        assert_eq!(p.class_count(), 1);
        let class = p.class_of(net.node_id("A").unwrap());
        assert_eq!(p.representative(class), net.node_id("A").unwrap().into());
    }

    #[test]
    fn general_middlebox_blocks_slicing() {
        let u = Universe::new(
            vec!["a".into(), "b".into()],
            vec!["p1".into()],
            vec!["c1".into()],
        )
        .unwrap();
        let net = NetworkBuilder::new(u)
            .host("A", "a")
            .host("B", "b")
            .middlebox(
                "x",
                builtin("idps").unwrap(),
                std::collections::BTreeMap::new(),
            )
            .switch("s1")
            .link("A", "s1")
            .link("B", "s1")
            .link("s1", "x")
            .route("s1", "a", "A")
            .route("s1", "b", "B")
            .route("x", "a", "s1")
            .route("x", "b", "s1")
            .build()
            .unwrap();
        let partition = policy_partition(&net).unwrap();
        let table: BTreeMap<String, StateClassKind> =
            [("idps".to_string(), StateClassKind::General)].into_iter().collect();
        let inv = crate::invariant::Invariant {
            name: "i".into(),
            target: net.node_id("A").unwrap(),
            predicate: crate::invariant::Predicate::SrcEquals(
                net.universe.address("b").unwrap(),
            ),
            max_failures: 0,
        };
        let err = build_slice(&net, &inv, &table, &partition).unwrap_err();
        assert!(matches!(err, SliceError::GeneralMiddleboxPresent(_)));
    }
}
