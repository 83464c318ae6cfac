//! Transfer functions: per-failure-scenario resolution of the static
//! datapath. For each (egress node, destination address) pair the chain of
//! switch hops is collapsed, so every successor is a host or middlebox
//! ingress and switches never appear in the event model. A destination with
//! no route is an explicit blackhole (empty successor set), while a switch
//! revisited for the same destination is a static forwarding loop and an
//! error, surfaced so the operator learns about it.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::logic::{Atom, Formula, FormulaTemplate, Term};
use crate::net::{Address, FailureScenario, NodeId, NodeKind};
use crate::network::Network;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("static forwarding loop for destination {dst:?} through {cycle:?}")]
    StaticLoop { dst: String, cycle: Vec<String> },
}

/// The resolved located-packet map for one failure scenario: from a
/// middlebox-or-host egress and a destination address to the next
/// middlebox-or-host ingress. Missing entries are blackholes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferFunction {
    pub scenario: FailureScenario,
    succ: BTreeMap<(NodeId, Address), NodeId>,
}

impl TransferFunction {
    /// Next verification node for a packet with destination `dst` leaving
    /// `from`. `None` is a blackhole: the packet is dropped by the fabric.
    pub fn next(&self, from: NodeId, dst: Address) -> Option<NodeId> {
        self.succ.get(&(from, dst)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (NodeId, Address, NodeId)> + '_ {
        self.succ.iter().map(|((f, a), n)| (*f, *a, *n))
    }
}

/// Computes the transfer function for one failure scenario by resolving
/// switch-hop chains from every host/middlebox egress toward every address.
pub fn compute_transfer(
    net: &Network,
    scenario: &FailureScenario,
) -> Result<TransferFunction, TransferError> {
    compute_transfer_over(net, scenario, net.universe.addresses())
}

/// As `compute_transfer`, restricted to the given destination addresses.
/// Engines use this so that work on a slice stays proportional to the
/// slice, not to the full declared universe.
pub fn compute_transfer_over(
    net: &Network,
    scenario: &FailureScenario,
    addrs: impl IntoIterator<Item = Address>,
) -> Result<TransferFunction, TransferError> {
    let addrs: Vec<Address> = addrs.into_iter().collect();
    let table = net.topology.effective_table(&scenario.failed);
    let mut succ = BTreeMap::new();

    for node in net.nodes() {
        if matches!(net.kind(node), NodeKind::OmegaSwitch) {
            continue;
        }
        let start = net.topo_index(node);
        for &dst in &addrs {
            let mut cur = start;
            let mut visited: Vec<usize> = Vec::new();
            let resolved = loop {
                let next = match table.get(&(cur, dst)) {
                    Some(n) => *n,
                    None => {
                        // A node with a single attachment forwards everything
                        // to it; anything else without a rule blackholes.
                        let neighbors: Vec<usize> = net.topology.neighbors(cur).collect();
                        if cur == start && neighbors.len() == 1 {
                            neighbors[0]
                        } else {
                            break None;
                        }
                    }
                };
                if !net.topology.is_switch(next) {
                    break Some(next);
                }
                if visited.contains(&next) {
                    let mut cycle: Vec<String> =
                        visited.iter().map(|i| net.topology.name_of(*i).to_string()).collect();
                    cycle.push(net.topology.name_of(next).to_string());
                    return Err(TransferError::StaticLoop {
                        dst: net.universe.address_name(dst).to_string(),
                        cycle,
                    });
                }
                visited.push(next);
                cur = next;
            };
            if let Some(n) = resolved {
                let id = net.node_of_topo(n).expect("non-switch topo node");
                succ.insert((node, dst), id);
            }
        }
    }

    Ok(TransferFunction { scenario: scenario.clone(), succ })
}

/// Computes transfer functions for every failure scenario with at most
/// `budget` failed middleboxes.
pub fn transfers_within_budget(
    net: &Network,
    budget: u32,
) -> Result<BTreeMap<BTreeSet<NodeId>, TransferFunction>, TransferError> {
    transfers_within_budget_over(net, budget, net.universe.addresses().collect())
}

/// As `transfers_within_budget`, restricted to the given addresses.
pub fn transfers_within_budget_over(
    net: &Network,
    budget: u32,
    addrs: Vec<Address>,
) -> Result<BTreeMap<BTreeSet<NodeId>, TransferFunction>, TransferError> {
    let mbx: Vec<NodeId> = net.middleboxes().map(|m| m.id).collect();
    let mut out = BTreeMap::new();
    let mut frontier: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new()];
    while let Some(set) = frontier.pop() {
        if out.contains_key(&set) {
            continue;
        }
        let tf =
            compute_transfer_over(net, &FailureScenario { failed: set.clone() }, addrs.clone())?;
        out.insert(set.clone(), tf);
        if (set.len() as u32) < budget {
            for m in &mbx {
                if !set.contains(m) {
                    let mut bigger = set.clone();
                    bigger.insert(*m);
                    frontier.push(bigger);
                }
            }
        }
    }
    Ok(out)
}

/// Axioms for the pseudo-node view of the static datapath: sends by hosts go
/// only to the pseudo-node, and a pseudo-node send of a packet for address
/// `a` goes to the resolved node and is preceded by a receive at the
/// pseudo-node. Blackholed destinations get an axiom forbidding any
/// pseudo-node send for them.
pub fn omega_axioms(net: &Network, tf: &TransferFunction) -> Vec<FormulaTemplate> {
    let omega = net.omega();
    let mut out = Vec::new();

    // Host egress: anything a host sends, it sends to omega.
    for host in net.hosts() {
        let body = Formula::implies(
            Formula::Atom(Atom::Snd { node: host.id, var: "p".into() }),
            Formula::Atom(Atom::SndTo { node: host.id, to: omega, var: "p".into() }),
        );
        out.push(FormulaTemplate {
            name: format!("host_egress_{}", host.name),
            formula: Formula::ForallPkts {
                vars: vec!["p".into()],
                body: Box::new(Formula::Always(Box::new(body))),
            },
        });
    }

    // Per destination address: the set of possible resolved ingress nodes.
    for dst in net.universe.addresses() {
        let mut targets: BTreeSet<NodeId> = BTreeSet::new();
        for (_, a, next) in tf.entries() {
            if a == dst {
                targets.insert(next);
            }
        }
        let dst_eq = Formula::Atom(Atom::Eq {
            lhs: Term::PktField { var: "p".into(), field: crate::mbx::Field::Dst },
            rhs: Term::Const(crate::net::Value::Addr(dst)),
        });
        let name = format!("omega_route_{}", net.universe.address_name(dst));
        let formula = if targets.is_empty() {
            // Blackhole: omega never sends packets for this destination.
            Formula::ForallPkts {
                vars: vec!["p".into()],
                body: Box::new(Formula::Always(Box::new(Formula::not(Formula::and(vec![
                    Formula::Atom(Atom::Snd { node: omega, var: "p".into() }),
                    dst_eq,
                ]))))),
            }
        } else {
            let goes_to = Formula::or(
                targets
                    .iter()
                    .map(|t| {
                        Formula::Atom(Atom::SndTo { node: omega, to: *t, var: "p".into() })
                    })
                    .collect(),
            );
            let was_received = Formula::past(Formula::Atom(Atom::Rcv {
                node: omega,
                var: "p".into(),
            }));
            Formula::ForallPkts {
                vars: vec!["p".into()],
                body: Box::new(Formula::Always(Box::new(Formula::implies(
                    Formula::and(vec![
                        Formula::Atom(Atom::Snd { node: omega, var: "p".into() }),
                        dst_eq,
                    ]),
                    Formula::and(vec![goes_to, was_received]),
                )))),
            }
        };
        out.push(FormulaTemplate { name, formula });
    }

    out
}

/// The forwarding-reachable subnetwork between a set of endpoints: the least
/// node set containing the endpoints and closed under transfer-function
/// successors for packets exchanged between included hosts (and addresses
/// owned by no host, such as NAT external addresses). Closure is taken over
/// every supplied transfer function, so scenario reroutes stay inside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubnetworkGraph {
    pub nodes: BTreeSet<NodeId>,
    pub links: BTreeSet<(NodeId, NodeId)>,
}

pub fn forwarding_graph(
    net: &Network,
    tfs: &[&TransferFunction],
    endpoints: &BTreeSet<NodeId>,
) -> SubnetworkGraph {
    let mut nodes: BTreeSet<NodeId> = endpoints.clone();
    let mut links: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();

    loop {
        let mut grew = false;
        // Addresses of interest: those owned by included hosts plus every
        // address owned by no host (middlebox-facing addresses).
        let mut addrs: BTreeSet<Address> = net
            .hosts()
            .filter(|h| nodes.contains(&h.id))
            .map(|h| h.address)
            .collect();
        for a in net.universe.addresses() {
            if net.address_owner(a).is_none() {
                addrs.insert(a);
            }
        }
        for tf in tfs {
            for start in nodes.clone() {
                for &dst in &addrs {
                    let mut cur = start;
                    let mut walked: BTreeSet<NodeId> = BTreeSet::new();
                    loop {
                        let Some(next) = tf.next(cur, dst) else { break };
                        links.insert((cur, next));
                        grew |= nodes.insert(next);
                        if matches!(net.kind(next), NodeKind::Host) || !walked.insert(next) {
                            break;
                        }
                        cur = next;
                    }
                }
            }
        }
        if !grew {
            break;
        }
    }

    SubnetworkGraph { nodes, links }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Universe;
    use crate::network::NetworkBuilder;

    fn three_host_net() -> Network {
        let u = Universe::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["p1".into()],
            vec!["d".into()],
        )
        .unwrap();
        NetworkBuilder::new(u)
            .host("A", "a")
            .host("B", "b")
            .host("C", "c")
            .switch("s1")
            .link("A", "s1")
            .link("B", "s1")
            .link("C", "s1")
            .route("s1", "a", "A")
            .route("s1", "b", "B")
            .route("s1", "c", "C")
            .build()
            .unwrap()
    }

    #[test]
    fn transfer_resolves_single_switch() {
        let net = three_host_net();
        let tf = compute_transfer(&net, &FailureScenario::none()).unwrap();
        let a = net.node_id("A").unwrap();
        let b = net.node_id("B").unwrap();
        let c = net.node_id("C").unwrap();
        let addr = |n: &str| net.universe.address(n).unwrap();
        assert_eq!(tf.next(a, addr("b")), Some(b));
        assert_eq!(tf.next(a, addr("c")), Some(c));
        assert_eq!(tf.next(b, addr("a")), Some(a));
        assert_eq!(tf.next(c, addr("a")), Some(a));
        // The fresh address has no route: blackhole, not an error.
        assert_eq!(tf.next(a, net.universe.fresh_address()), None);
    }

    #[test]
    fn transfer_detects_static_loop() {
        let u = Universe::new(vec!["a".into()], vec!["p1".into()], vec!["d".into()]).unwrap();
        let net = NetworkBuilder::new(u)
            .host("A", "a")
            .switch("s1")
            .switch("s2")
            .link("A", "s1")
            .link("s1", "s2")
            .route("A", "a", "s1")
            .route("s1", "a", "s2")
            .route("s2", "a", "s1")
            .build()
            .unwrap();
        let err = compute_transfer(&net, &FailureScenario::none()).unwrap_err();
        match err {
            TransferError::StaticLoop { dst, cycle } => {
                assert_eq!(dst, "a");
                assert!(cycle.contains(&"s1".to_string()) && cycle.contains(&"s2".to_string()));
            }
        }
    }

    #[test]
    fn omega_axioms_shapes() {
        let net = three_host_net();
        let tf = compute_transfer(&net, &FailureScenario::none()).unwrap();
        let axioms = omega_axioms(&net, &tf);
        // Three host-egress axioms plus one per address (3 declared + fresh).
        assert_eq!(axioms.len(), 3 + 4);
        let route_a = axioms.iter().find(|t| t.name == "omega_route_a").unwrap();
        let rendered = route_a.render(&net);
        assert!(rendered.contains("snd(@omega, p)"), "{rendered}");
        assert!(rendered.contains("snd(@omega, A, p)"), "{rendered}");
        assert!(rendered.contains("past(rcv(@omega, p))"), "{rendered}");
        // Blackholed fresh address yields a forbidding axiom.
        let fresh = axioms.iter().find(|t| t.name == "omega_route_@fresh").unwrap();
        assert!(fresh.render(&net).contains("!("), "{}", fresh.render(&net));
    }

    #[test]
    fn omega_axioms_empty_network() {
        let u = Universe::new(vec![], vec![], vec![]).unwrap();
        let net = NetworkBuilder::new(u).build().unwrap();
        let tf = compute_transfer(&net, &FailureScenario::none()).unwrap();
        let axioms = omega_axioms(&net, &tf);
        // No hosts and only the fresh address, which is blackholed.
        assert_eq!(axioms.len(), 1);
    }

    #[test]
    fn forwarding_graph_is_a_fixed_point() {
        let net = three_host_net();
        let tf = compute_transfer(&net, &FailureScenario::none()).unwrap();
        let a = net.node_id("A").unwrap();
        let b = net.node_id("B").unwrap();
        let endpoints: BTreeSet<NodeId> = [a, b].into_iter().collect();
        let g = forwarding_graph(&net, &[&tf], &endpoints);
        assert!(g.nodes.contains(&a) && g.nodes.contains(&b));
        assert!(!g.nodes.contains(&net.node_id("C").unwrap()));
        let again = forwarding_graph(&net, &[&tf], &g.nodes);
        assert_eq!(again.nodes, g.nodes);
    }
}
