//! Exhaustiveness cross-check: on tiny networks the engine's pruned search
//! must agree with a naive enumerator over raw event sequences that knows
//! nothing about search order, visited states, or slicing.

mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use common::*;
use mboxverify_core::bmc::{explore, Bounds};
use mboxverify_core::invariant::{negate, DeliveryContext, Invariant};
use mboxverify_core::mbx::{step, MbxState, OracleBinding, OracleEnv, StepError};
use mboxverify_core::net::{flow_of, FlowId, NodeId, NodeKind, Packet};
use mboxverify_core::netfunc::compute_transfer;
use mboxverify_core::network::Network;
use mboxverify_core::{Verdict, VerdictKind};

#[derive(Clone)]
struct NaiveWorld {
    states: BTreeMap<NodeId, MbxState>,
    queues: BTreeMap<(NodeId, NodeId), VecDeque<(Packet, Vec<NodeId>)>>,
    failed: BTreeSet<NodeId>,
    emits: u32,
    fails: u32,
    env: OracleEnv,
    emitted_flows: BTreeMap<NodeId, BTreeSet<FlowId>>,
}

/// Plain recursive enumeration of every event sequence up to `depth`.
fn naive_violation(net: &Network, inv: &Invariant, depth: u32, max_emits: u32, budget: u32) -> bool {
    let pool: Vec<(NodeId, Packet)> = {
        let mut out = Vec::new();
        for h in net.hosts() {
            for dst in net.universe.declared_addresses() {
                if dst == h.address {
                    continue;
                }
                for sp in net.universe.declared_ports() {
                    for dp in net.universe.declared_ports() {
                        for c in net.universe.declared_contents() {
                            out.push((
                                h.id,
                                Packet {
                                    src: h.address,
                                    dst,
                                    src_port: sp,
                                    dst_port: dp,
                                    origin: h.address,
                                    content: c,
                                },
                            ));
                        }
                    }
                }
            }
        }
        out
    };

    let world = NaiveWorld {
        states: net.middleboxes().map(|m| (m.id, MbxState::initial(&m.model))).collect(),
        queues: BTreeMap::new(),
        failed: BTreeSet::new(),
        emits: 0,
        fails: 0,
        env: OracleEnv::new(),
        emitted_flows: BTreeMap::new(),
    };
    recurse(net, inv, &world, &pool, depth, max_emits, budget)
}

fn recurse(
    net: &Network,
    inv: &Invariant,
    world: &NaiveWorld,
    pool: &[(NodeId, Packet)],
    depth: u32,
    max_emits: u32,
    budget: u32,
) -> bool {
    if depth == 0 {
        return false;
    }
    // Emissions.
    if world.emits < max_emits {
        for (host, pkt) in pool {
            let mut w = world.clone();
            w.emits += 1;
            w.queues
                .entry((*host, net.omega()))
                .or_default()
                .push_back((*pkt, vec![]));
            w.emitted_flows.entry(*host).or_default().insert(flow_of(pkt));
            if recurse(net, inv, &w, pool, depth - 1, max_emits, budget) {
                return true;
            }
        }
    }
    // Failures and recoveries.
    if world.fails < budget {
        for m in net.middleboxes() {
            if world.failed.contains(&m.id) {
                continue;
            }
            let mut w = world.clone();
            w.fails += 1;
            w.failed.insert(m.id);
            let st = w.states.get_mut(&m.id).unwrap();
            st.clear_registers(&m.model);
            st.failed = true;
            if recurse(net, inv, &w, pool, depth - 1, max_emits, budget) {
                return true;
            }
        }
    }
    // Deliveries.
    let links: Vec<(NodeId, NodeId)> = world
        .queues
        .iter()
        .filter(|(_, q)| !q.is_empty())
        .map(|(l, _)| *l)
        .collect();
    for (from, to) in links {
        if deliver(net, inv, world, pool, depth, max_emits, budget, from, to, &[]) {
            return true;
        }
    }
    false
}

#[allow(clippy::too_many_arguments)]
fn deliver(
    net: &Network,
    inv: &Invariant,
    world: &NaiveWorld,
    pool: &[(NodeId, Packet)],
    depth: u32,
    max_emits: u32,
    budget: u32,
    from: NodeId,
    to: NodeId,
    extra: &[OracleBinding],
) -> bool {
    let (pkt, traversed) = world.queues[&(from, to)].front().cloned().unwrap();
    match net.kind(to) {
        NodeKind::Host => {
            let mut w = world.clone();
            let q = w.queues.get_mut(&(from, to)).unwrap();
            q.pop_front();
            if to == inv.target {
                let vc = negate(inv);
                let empty = BTreeSet::new();
                let ctx = DeliveryContext {
                    net,
                    packet: &pkt,
                    target_emitted_flows: world.emitted_flows.get(&inv.target).unwrap_or(&empty),
                    traversed: &traversed,
                };
                if vc.predicate.satisfied(&ctx) {
                    return true;
                }
            }
            recurse(net, inv, &w, pool, depth - 1, max_emits, budget)
        }
        NodeKind::OmegaSwitch => {
            let mut w = world.clone();
            w.queues.get_mut(&(from, to)).unwrap().pop_front();
            let tf = compute_transfer(
                net,
                &mboxverify_core::net::FailureScenario { failed: world.failed.clone() },
            )
            .unwrap();
            if let Some(next) = tf.next(from, pkt.dst) {
                w.queues.entry((to, next)).or_default().push_back((pkt, traversed));
            }
            recurse(net, inv, &w, pool, depth - 1, max_emits, budget)
        }
        NodeKind::MiddleboxInstance => {
            let inst = net.middlebox(to).unwrap();
            let mut env = world.env.clone();
            for b in extra {
                env.bind(b);
            }
            match step(inst, &world.states[&to], &pkt, &env, &net.universe) {
                Ok(out) => {
                    let mut w = world.clone();
                    w.env = env;
                    w.queues.get_mut(&(from, to)).unwrap().pop_front();
                    let mut tr = traversed;
                    tr.push(to);
                    for p in out.forwarded {
                        w.queues
                            .entry((to, net.omega()))
                            .or_default()
                            .push_back((p, tr.clone()));
                    }
                    w.states.insert(to, out.state);
                    recurse(net, inv, &w, pool, depth - 1, max_emits, budget)
                }
                Err(StepError::NeedOracle { query, choices }) => {
                    for choice in choices {
                        let mut more = extra.to_vec();
                        more.push(OracleBinding { query: query.clone(), answer: choice });
                        if deliver(net, inv, world, pool, depth, max_emits, budget, from, to, &more)
                        {
                            return true;
                        }
                    }
                    false
                }
                Err(StepError::MapLookupMiss { .. }) => {
                    let mut w = world.clone();
                    w.env = env;
                    w.queues.get_mut(&(from, to)).unwrap().pop_front();
                    recurse(net, inv, &w, pool, depth - 1, max_emits, budget)
                }
                Err(e) => panic!("unexpected step error: {e}"),
            }
        }
    }
}

#[test]
fn explore_agrees_with_naive_enumeration() {
    let mut cases: Vec<(Network, Invariant)> = Vec::new();
    {
        let net = acl_fw_net(&[("a", "b")]);
        let inv = simple_iso(&net, "deny", "B", "a");
        cases.push((net, inv));
    }
    {
        let net = acl_fw_net(&[]);
        let inv = simple_iso(&net, "open", "B", "a");
        cases.push((net, inv));
    }
    {
        let net = learning_fw_net(&[("b", "a")]);
        let inv = flow_iso(&net, "flow", "B", "a");
        cases.push((net, inv));
    }
    {
        let net = learning_fw_net(&[("a", "b")]);
        let inv = flow_iso(&net, "flow-open", "B", "a");
        cases.push((net, inv));
    }
    {
        let net = nat_net();
        let inv = simple_iso(&net, "nat", "X", "n");
        cases.push((net, inv));
    }

    for (net, inv) in &cases {
        for depth in [3u32, 5] {
            for emits in [1u32, 2] {
                let bounds = Bounds::default().with_depth(depth).with_emits(emits);
                let fast = explore(net, inv, &bounds);
                assert_ne!(fast.kind(), VerdictKind::Unknown);
                let expected = naive_violation(net, inv, depth, emits, 0);
                let got = matches!(fast, Verdict::Violated { .. });
                assert_eq!(
                    got, expected,
                    "{}: K={depth} emits={emits}: explore={got} naive={expected}",
                    inv.name
                );
            }
        }
    }
}

#[test]
fn explore_agrees_with_naive_enumeration_under_failures() {
    let net = acl_fw_net(&[("a", "b")]);
    let mut inv = simple_iso(&net, "deny", "B", "a");
    inv.max_failures = 1;
    for depth in [4u32, 6] {
        let bounds = Bounds::default().with_depth(depth).with_emits(1);
        let fast = matches!(explore(&net, &inv, &bounds), Verdict::Violated { .. });
        let expected = naive_violation(&net, &inv, depth, 1, 1);
        assert_eq!(fast, expected, "K={depth}");
    }
}
