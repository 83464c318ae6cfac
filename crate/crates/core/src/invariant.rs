//! Reachability (isolation) invariants: a target node should never receive
//! a packet matching a predicate, under at most a given number of
//! simultaneous failures. Checking works on the negation: search for a
//! delivery that satisfies the predicate.

use std::collections::BTreeSet;

use crate::bmc::Bounds;
use crate::net::{flow_of, Address, FlowId, NodeId, NodeKind, Packet};
use crate::network::Network;
use crate::slicer::PolicyPartition;
use crate::trace::Trace;

/// Reference to a middlebox by model kind or concrete instance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum MbxRef {
    Kind(String),
    Instance(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Predicate {
    /// Simple isolation: the delivered packet's source address.
    SrcEquals(Address),
    /// Data isolation: provenance of the delivered data.
    OriginEquals(Address),
    /// Flow isolation: a packet from this source that does not belong to a
    /// flow the target previously sent in.
    NoPriorOutboundFlow(Address),
    /// Traversal: the packet's causal chain never passed this middlebox.
    NotTraversed(MbxRef),
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
    Not(Box<Predicate>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invariant {
    pub name: String,
    pub target: NodeId,
    pub predicate: Predicate,
    /// The invariant must hold for every schedule with at most this many
    /// simultaneous failures.
    pub max_failures: u32,
}

/// The existential dual of an invariant: find a delivery at `target` of a
/// packet satisfying `predicate` with at most `max_failures` failures
/// active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViolationCondition {
    pub target: NodeId,
    pub predicate: Predicate,
    pub max_failures: u32,
}

pub fn negate(inv: &Invariant) -> ViolationCondition {
    ViolationCondition {
        target: inv.target,
        predicate: inv.predicate.clone(),
        max_failures: inv.max_failures,
    }
}

/// Everything a predicate may consult about one delivery.
pub struct DeliveryContext<'a> {
    pub net: &'a Network,
    pub packet: &'a Packet,
    /// Flows in which the target host emitted a packet strictly earlier.
    pub target_emitted_flows: &'a BTreeSet<FlowId>,
    /// Middlebox nodes on the delivered packet's causal chain.
    pub traversed: &'a [NodeId],
}

impl Predicate {
    pub fn satisfied(&self, ctx: &DeliveryContext) -> bool {
        match self {
            Predicate::SrcEquals(a) => ctx.packet.src == *a,
            Predicate::OriginEquals(a) => ctx.packet.origin == *a,
            Predicate::NoPriorOutboundFlow(src) => {
                ctx.packet.src == *src
                    && !ctx.target_emitted_flows.contains(&flow_of(ctx.packet))
            }
            Predicate::NotTraversed(r) => !ctx.traversed.iter().any(|n| match r {
                MbxRef::Instance(id) => n == id,
                MbxRef::Kind(kind) => {
                    ctx.net.middlebox(*n).map(|m| m.model.name == *kind).unwrap_or(false)
                }
            }),
            Predicate::And(items) => items.iter().all(|p| p.satisfied(ctx)),
            Predicate::Or(items) => items.iter().any(|p| p.satisfied(ctx)),
            Predicate::Not(inner) => !inner.satisfied(ctx),
        }
    }

    /// Addresses mentioned by the predicate, in a stable traversal order.
    pub fn addresses(&self) -> Vec<Address> {
        let mut out = Vec::new();
        self.collect_addresses(&mut out);
        out
    }

    fn collect_addresses(&self, out: &mut Vec<Address>) {
        match self {
            Predicate::SrcEquals(a)
            | Predicate::OriginEquals(a)
            | Predicate::NoPriorOutboundFlow(a) => out.push(*a),
            Predicate::NotTraversed(_) => {}
            Predicate::And(items) | Predicate::Or(items) => {
                for p in items {
                    p.collect_addresses(out);
                }
            }
            Predicate::Not(inner) => inner.collect_addresses(out),
        }
    }

    /// Middlebox references mentioned by traversal predicates.
    pub fn mbx_refs(&self) -> Vec<&MbxRef> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a MbxRef>) {
        match self {
            Predicate::NotTraversed(r) => out.push(r),
            Predicate::And(items) | Predicate::Or(items) => {
                for p in items {
                    p.collect_refs(out);
                }
            }
            Predicate::Not(inner) => inner.collect_refs(out),
            _ => {}
        }
    }
}

/// The nodes an invariant references: its target plus every host whose
/// address appears in the predicate.
pub fn referenced_nodes(inv: &Invariant, net: &Network) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    out.insert(inv.target);
    for a in inv.predicate.addresses() {
        if let Some(h) = net.address_owner(a) {
            out.insert(h);
        }
    }
    out
}

/// Checking outcome. `Holds` is always relative to the bounds searched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Holds { bounds: Bounds },
    Violated { trace: Trace },
    Unknown { reason: String },
}

impl Verdict {
    pub fn kind(&self) -> VerdictKind {
        match self {
            Verdict::Holds { .. } => VerdictKind::Holds,
            Verdict::Violated { .. } => VerdictKind::Violated,
            Verdict::Unknown { .. } => VerdictKind::Unknown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum VerdictKind {
    Holds,
    Violated,
    Unknown,
}

impl std::fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VerdictKind::Holds => write!(f, "holds"),
            VerdictKind::Violated => write!(f, "violated"),
            VerdictKind::Unknown => write!(f, "unknown"),
        }
    }
}

/// A set of invariants equivalent up to a policy-class-preserving renaming
/// of nodes. Verifying the representative verifies every member.
#[derive(Debug, Clone)]
pub struct SymmetryGroup {
    pub representative: Invariant,
    pub members: Vec<Invariant>,
    /// For each member (parallel to `members`): the node renaming taking the
    /// representative's referenced nodes to the member's.
    pub bijections: Vec<std::collections::BTreeMap<NodeId, NodeId>>,
}

/// Canonical signature of an invariant under the partition: node references
/// are replaced by their policy class.
fn signature(inv: &Invariant, partition: &PolicyPartition, net: &Network) -> String {
    fn pred_sig(p: &Predicate, partition: &PolicyPartition, net: &Network, out: &mut String) {
        match p {
            Predicate::SrcEquals(a) => {
                out.push_str(&format!("src={};", class_of_addr(*a, partition, net)))
            }
            Predicate::OriginEquals(a) => {
                out.push_str(&format!("origin={};", class_of_addr(*a, partition, net)))
            }
            Predicate::NoPriorOutboundFlow(a) => {
                out.push_str(&format!("flow-from={};", class_of_addr(*a, partition, net)))
            }
            Predicate::NotTraversed(r) => match r {
                MbxRef::Kind(k) => out.push_str(&format!("not-via-kind={k};")),
                MbxRef::Instance(id) => {
                    out.push_str(&format!("not-via={};", net.node_name(*id)))
                }
            },
            Predicate::And(items) => {
                out.push_str("and(");
                for i in items {
                    pred_sig(i, partition, net, out);
                }
                out.push(')');
            }
            Predicate::Or(items) => {
                out.push_str("or(");
                for i in items {
                    pred_sig(i, partition, net, out);
                }
                out.push(')');
            }
            Predicate::Not(inner) => {
                out.push_str("not(");
                pred_sig(inner, partition, net, out);
                out.push(')');
            }
        }
    }
    fn class_of_addr(a: Address, partition: &PolicyPartition, net: &Network) -> String {
        match net.address_owner(a) {
            Some(h) => format!("class:{}", partition.class_of(h)),
            // Addresses owned by no host are infrastructure constants and
            // are not renamed.
            None => format!("addr:{}", net.universe.address_name(a)),
        }
    }
    let mut s = format!(
        "target=class:{};failures={};",
        partition.class_of(inv.target),
        inv.max_failures
    );
    pred_sig(&inv.predicate, partition, net, &mut s);
    s
}

/// Groups invariants by policy-class-preserving renamings. Within a group
/// the representative is the lexicographically least invariant by name.
pub fn symmetry_groups(
    invs: &[Invariant],
    partition: &PolicyPartition,
    net: &Network,
) -> Vec<SymmetryGroup> {
    let mut by_sig: std::collections::BTreeMap<String, Vec<&Invariant>> =
        std::collections::BTreeMap::new();
    for inv in invs {
        by_sig.entry(signature(inv, partition, net)).or_default().push(inv);
    }

    let mut groups = Vec::new();
    for (_, mut members) in by_sig {
        members.sort_by(|a, b| a.name.cmp(&b.name));
        let representative = members[0].clone();
        let rep_nodes = node_positions(&representative, net);
        let mut bijections = Vec::new();
        for m in &members {
            let m_nodes = node_positions(m, net);
            let mut map = std::collections::BTreeMap::new();
            for (r, mm) in rep_nodes.iter().zip(&m_nodes) {
                map.insert(*r, *mm);
            }
            bijections.push(map);
        }
        groups.push(SymmetryGroup {
            representative,
            members: members.into_iter().cloned().collect(),
            bijections,
        });
    }
    groups
}

/// Referenced nodes in predicate traversal order (target first), used to
/// align representative and member when building renamings.
fn node_positions(inv: &Invariant, net: &Network) -> Vec<NodeId> {
    let mut out = vec![inv.target];
    for a in inv.predicate.addresses() {
        if let Some(h) = net.address_owner(a) {
            if matches!(net.kind(h), NodeKind::Host) {
                out.push(h);
            }
        }
    }
    out
}

/// Translates an invariant between two networks that share a universe but
/// assign node ids differently (e.g. a network and its slice restriction).
/// Returns `None` when a referenced node does not exist in the target.
pub fn remap_invariant(inv: &Invariant, from: &Network, to: &Network) -> Option<Invariant> {
    debug_assert_eq!(from.universe, to.universe, "remapping assumes a shared universe");
    fn remap_pred(p: &Predicate, from: &Network, to: &Network) -> Option<Predicate> {
        Some(match p {
            Predicate::SrcEquals(a) => Predicate::SrcEquals(*a),
            Predicate::OriginEquals(a) => Predicate::OriginEquals(*a),
            Predicate::NoPriorOutboundFlow(a) => Predicate::NoPriorOutboundFlow(*a),
            Predicate::NotTraversed(MbxRef::Kind(k)) => {
                Predicate::NotTraversed(MbxRef::Kind(k.clone()))
            }
            Predicate::NotTraversed(MbxRef::Instance(id)) => {
                Predicate::NotTraversed(MbxRef::Instance(to.node_id(from.node_name(*id))?))
            }
            Predicate::And(items) => Predicate::And(
                items.iter().map(|i| remap_pred(i, from, to)).collect::<Option<Vec<_>>>()?,
            ),
            Predicate::Or(items) => Predicate::Or(
                items.iter().map(|i| remap_pred(i, from, to)).collect::<Option<Vec<_>>>()?,
            ),
            Predicate::Not(inner) => Predicate::Not(Box::new(remap_pred(inner, from, to)?)),
        })
    }
    Some(Invariant {
        name: inv.name.clone(),
        target: to.node_id(from.node_name(inv.target))?,
        predicate: remap_pred(&inv.predicate, from, to)?,
        max_failures: inv.max_failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mbx::{builtin, ConfigValue};
    use crate::net::{Universe, Value};
    use crate::network::NetworkBuilder;
    use crate::slicer::policy_partition;

    fn net3() -> Network {
        let u = Universe::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["p1".into()],
            vec!["c1".into()],
        )
        .unwrap();
        NetworkBuilder::new(u)
            .host("A", "a")
            .host("B", "b")
            .host("C", "c")
            .middlebox(
                "fw",
                builtin("acl_firewall").unwrap(),
                [("deny".to_string(), ConfigValue::Set(Default::default()))]
                    .into_iter()
                    .collect(),
            )
            .switch("s1")
            .link("A", "s1")
            .link("B", "s1")
            .link("C", "s1")
            .link("s1", "fw")
            .route("s1", "a", "A")
            .route("s1", "b", "B")
            .route("s1", "c", "C")
            .route("fw", "a", "s1")
            .route("fw", "b", "s1")
            .route("fw", "c", "s1")
            .build()
            .unwrap()
    }

    #[test]
    fn referenced_nodes_reads_off_target_and_hosts() {
        let net = net3();
        let d = net.node_id("A").unwrap();
        let s = net.universe.address("b").unwrap();
        let inv = Invariant {
            name: "i".into(),
            target: d,
            predicate: Predicate::SrcEquals(s),
            max_failures: 0,
        };
        let nodes = referenced_nodes(&inv, &net);
        assert_eq!(nodes, [d, net.node_id("B").unwrap()].into_iter().collect());

        let data = Invariant {
            name: "d".into(),
            target: d,
            predicate: Predicate::OriginEquals(s),
            max_failures: 0,
        };
        assert_eq!(referenced_nodes(&data, &net).len(), 2);

        let trav = Invariant {
            name: "t".into(),
            target: d,
            predicate: Predicate::NotTraversed(MbxRef::Kind("idps".into())),
            max_failures: 0,
        };
        assert_eq!(referenced_nodes(&trav, &net), [d].into_iter().collect());
    }

    #[test]
    fn negate_preserves_predicate_and_budget() {
        let net = net3();
        let inv = Invariant {
            name: "i".into(),
            target: net.node_id("A").unwrap(),
            predicate: Predicate::NoPriorOutboundFlow(net.universe.address("b").unwrap()),
            max_failures: 2,
        };
        let vc = negate(&inv);
        assert_eq!(vc.target, inv.target);
        assert_eq!(vc.predicate, inv.predicate);
        assert_eq!(vc.max_failures, 2);
    }

    #[test]
    fn symmetric_invariants_group_and_distinct_classes_split() {
        let net = net3();
        // A, B and C are policy-equivalent here (no rules); invariants that
        // differ only by a class-preserving renaming land in one group.
        let partition = policy_partition(&net).unwrap();
        let mk = |name: &str, target: &str, src: &str| Invariant {
            name: name.into(),
            target: net.node_id(target).unwrap(),
            predicate: Predicate::SrcEquals(net.universe.address(src).unwrap()),
            max_failures: 0,
        };
        let invs =
            vec![mk("i1", "A", "b"), mk("i2", "B", "c"), mk("i3", "C", "a")];
        let groups = symmetry_groups(&invs, &partition, &net);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].representative.name, "i1");
        assert_eq!(groups[0].members.len(), 3);
        // The renaming for member i2 maps A to B and host(b) to host(c).
        let bij = &groups[0].bijections[1];
        assert_eq!(bij[&net.node_id("A").unwrap()], net.node_id("B").unwrap());
        assert_eq!(bij[&net.node_id("B").unwrap()], net.node_id("C").unwrap());

        // A different failure budget is never symmetric.
        let mut other = mk("i4", "A", "b");
        other.max_failures = 1;
        let groups = symmetry_groups(&[invs[0].clone(), other], &partition, &net);
        assert_eq!(groups.len(), 2);
    }
}
