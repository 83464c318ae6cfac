//! Domain vocabulary shared by every engine: symbolic address/port/content
//! universes, packets, flows, node identities, links, and failure scenarios.
//!
//! All values here are small `Copy` indices into name tables owned by
//! [`Universe`] / [`crate::network::Network`]; engines hash and compare them
//! constantly, so they must stay cheap. Everything is immutable after
//! construction and safe to share across verification tasks.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Name reserved for the extra "fresh" value appended to each sort of the
/// universe. It represents a spoofed/unknown value in symbolic search and is
/// never a declared name (declared identifiers may not start with `@`).
pub const FRESH_NAME: &str = "@fresh";

/// A symbolic address drawn from the finite universe declared by the network
/// under analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Address(pub u16);

/// A symbolic port from the declared finite port universe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Port(pub u16);

/// An opaque content identifier. A response and any cached copy of it carry
/// the same content id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContentId(pub u16);

/// The finite value universe of one network: declared addresses, ports and
/// contents, each with one reserved fresh value appended at the end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Universe {
    addresses: Vec<String>,
    ports: Vec<String>,
    contents: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum UniverseError {
    #[error("duplicate {sort} name {name:?}")]
    Duplicate { sort: &'static str, name: String },
    #[error("invalid {sort} name {name:?}: must match [A-Za-z0-9_.-]+ and not start with '@'")]
    BadName { sort: &'static str, name: String },
    #[error("unknown {sort} name {name:?}")]
    Unknown { sort: &'static str, name: String },
}

fn check_names(sort: &'static str, names: &[String]) -> Result<(), UniverseError> {
    let mut seen = BTreeSet::new();
    for n in names {
        let ok = !n.is_empty()
            && n.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'));
        if !ok {
            return Err(UniverseError::BadName { sort, name: n.clone() });
        }
        if !seen.insert(n.clone()) {
            return Err(UniverseError::Duplicate { sort, name: n.clone() });
        }
    }
    Ok(())
}

impl Universe {
    /// Builds a universe from declared names. A fresh value is appended to
    /// each sort; declared names keep their declared order and indices.
    pub fn new(
        addresses: Vec<String>,
        ports: Vec<String>,
        contents: Vec<String>,
    ) -> Result<Self, UniverseError> {
        check_names("address", &addresses)?;
        check_names("port", &ports)?;
        check_names("content", &contents)?;
        let mut u = Universe { addresses, ports, contents };
        u.addresses.push(FRESH_NAME.to_string());
        u.ports.push(FRESH_NAME.to_string());
        u.contents.push(FRESH_NAME.to_string());
        Ok(u)
    }

    pub fn address(&self, name: &str) -> Result<Address, UniverseError> {
        self.addresses
            .iter()
            .position(|a| a == name)
            .map(|i| Address(i as u16))
            .ok_or_else(|| UniverseError::Unknown { sort: "address", name: name.to_string() })
    }

    pub fn port(&self, name: &str) -> Result<Port, UniverseError> {
        self.ports
            .iter()
            .position(|a| a == name)
            .map(|i| Port(i as u16))
            .ok_or_else(|| UniverseError::Unknown { sort: "port", name: name.to_string() })
    }

    pub fn content(&self, name: &str) -> Result<ContentId, UniverseError> {
        self.contents
            .iter()
            .position(|a| a == name)
            .map(|i| ContentId(i as u16))
            .ok_or_else(|| UniverseError::Unknown { sort: "content", name: name.to_string() })
    }

    pub fn address_name(&self, a: Address) -> &str {
        &self.addresses[a.0 as usize]
    }
    pub fn port_name(&self, p: Port) -> &str {
        &self.ports[p.0 as usize]
    }
    pub fn content_name(&self, c: ContentId) -> &str {
        &self.contents[c.0 as usize]
    }

    pub fn fresh_address(&self) -> Address {
        Address((self.addresses.len() - 1) as u16)
    }
    pub fn fresh_port(&self) -> Port {
        Port((self.ports.len() - 1) as u16)
    }
    pub fn fresh_content(&self) -> ContentId {
        ContentId((self.contents.len() - 1) as u16)
    }

    /// All addresses including the fresh value.
    pub fn addresses(&self) -> impl Iterator<Item = Address> + '_ {
        (0..self.addresses.len()).map(|i| Address(i as u16))
    }
    /// Declared addresses only (fresh excluded).
    pub fn declared_addresses(&self) -> impl Iterator<Item = Address> + '_ {
        (0..self.addresses.len() - 1).map(|i| Address(i as u16))
    }
    pub fn ports(&self) -> impl Iterator<Item = Port> + '_ {
        (0..self.ports.len()).map(|i| Port(i as u16))
    }
    pub fn declared_ports(&self) -> impl Iterator<Item = Port> + '_ {
        (0..self.ports.len() - 1).map(|i| Port(i as u16))
    }
    pub fn contents(&self) -> impl Iterator<Item = ContentId> + '_ {
        (0..self.contents.len()).map(|i| ContentId(i as u16))
    }
    pub fn declared_contents(&self) -> impl Iterator<Item = ContentId> + '_ {
        (0..self.contents.len() - 1).map(|i| ContentId(i as u16))
    }

    pub fn contains_address(&self, a: Address) -> bool {
        (a.0 as usize) < self.addresses.len()
    }
    pub fn contains_port(&self, p: Port) -> bool {
        (p.0 as usize) < self.ports.len()
    }
    pub fn contains_content(&self, c: ContentId) -> bool {
        (c.0 as usize) < self.contents.len()
    }
}

/// A packet value. `origin` is the provenance of the data the packet carries
/// (it travels with content through caches); `content` is an opaque content
/// identifier. Abstract packet classes are not stored on the packet: class
/// bits are fixed per flow and live in the classification oracle environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Packet {
    pub src: Address,
    pub dst: Address,
    pub src_port: Port,
    pub dst_port: Port,
    pub origin: Address,
    pub content: ContentId,
}

impl Packet {
    /// The packet with src/dst endpoints swapped (the reply direction).
    pub fn reverse(&self) -> Packet {
        Packet {
            src: self.dst,
            dst: self.src,
            src_port: self.dst_port,
            dst_port: self.src_port,
            origin: self.origin,
            content: self.content,
        }
    }
}

/// Canonical unordered endpoint pair identifying a flow. Reverse-direction
/// packets map to the same flow id, which is what lets a firewall's
/// `established` set match replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowId {
    pub lo: (Address, Port),
    pub hi: (Address, Port),
}

/// Computes the flow id of a packet: the unordered pair of its endpoints.
pub fn flow_of(p: &Packet) -> FlowId {
    let a = (p.src, p.src_port);
    let b = (p.dst, p.dst_port);
    if a <= b {
        FlowId { lo: a, hi: b }
    } else {
        FlowId { lo: b, hi: a }
    }
}

/// Identifier of a node, assigned by [`crate::network::Network`] in
/// name-sorted order so that id order is deterministic for a given input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

/// What a verification-level node is. Switches are not first-class here:
/// static switching collapses into the single `OmegaSwitch` pseudo-node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    Host,
    MiddleboxInstance,
    OmegaSwitch,
}

/// A directed link between two verification-level nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from.0, self.to.0)
    }
}

/// A set of simultaneously failed middlebox nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FailureScenario {
    pub failed: BTreeSet<NodeId>,
}

impl FailureScenario {
    pub fn none() -> Self {
        FailureScenario::default()
    }

    pub fn of(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        FailureScenario { failed: nodes.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.failed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.failed.is_empty()
    }
}

/// A runtime value: register contents, oracle results and config bindings
/// are all built from these.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Value {
    Addr(Address),
    Port(Port),
    Content(ContentId),
    Flow(FlowId),
    Tuple(Vec<Value>),
}

impl Value {
    pub fn as_addr(&self) -> Option<Address> {
        match self {
            Value::Addr(a) => Some(*a),
            _ => None,
        }
    }
    pub fn as_port(&self) -> Option<Port> {
        match self {
            Value::Port(p) => Some(*p),
            _ => None,
        }
    }
    pub fn as_content(&self) -> Option<ContentId> {
        match self {
            Value::Content(c) => Some(*c),
            _ => None,
        }
    }
    pub fn as_flow(&self) -> Option<FlowId> {
        match self {
            Value::Flow(f) => Some(*f),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn universe() -> Universe {
        Universe::new(
            vec!["a".into(), "b".into()],
            vec!["p1".into(), "p2".into(), "p3".into()],
            vec!["c".into()],
        )
        .unwrap()
    }

    fn pkt(u: &Universe, src: &str, dst: &str, sp: &str, dp: &str) -> Packet {
        Packet {
            src: u.address(src).unwrap(),
            dst: u.address(dst).unwrap(),
            src_port: u.port(sp).unwrap(),
            dst_port: u.port(dp).unwrap(),
            origin: u.address(src).unwrap(),
            content: u.content("c").unwrap(),
        }
    }

    #[test]
    fn flow_of_canonicalizes() {
        let u = universe();
        let p = pkt(&u, "a", "b", "p1", "p2");
        let f = flow_of(&p);
        assert_eq!(f.lo, (u.address("a").unwrap(), u.port("p1").unwrap()));
        assert_eq!(f.hi, (u.address("b").unwrap(), u.port("p2").unwrap()));
    }

    #[test]
    fn flow_of_is_direction_insensitive() {
        let u = universe();
        let p = pkt(&u, "a", "b", "p1", "p2");
        let q = pkt(&u, "b", "a", "p2", "p1");
        assert_eq!(flow_of(&p), flow_of(&q));
        assert_eq!(flow_of(&p), flow_of(&p.reverse()));
    }

    #[test]
    fn flow_of_distinguishes_ports() {
        let u = universe();
        let p = pkt(&u, "a", "b", "p1", "p2");
        let r = pkt(&u, "a", "b", "p1", "p3");
        assert_ne!(flow_of(&p), flow_of(&r));
    }

    #[test]
    fn fresh_values_are_reserved() {
        let u = universe();
        assert_eq!(u.address_name(u.fresh_address()), FRESH_NAME);
        assert!(u.address(FRESH_NAME).is_ok());
        assert_eq!(u.declared_addresses().count(), 2);
        assert_eq!(u.addresses().count(), 3);
        assert!(Universe::new(vec!["@bad".into()], vec![], vec![]).is_err());
        assert!(Universe::new(vec!["a".into(), "a".into()], vec![], vec![]).is_err());
    }
}
