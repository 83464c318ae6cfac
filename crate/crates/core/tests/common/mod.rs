//! Shared fixtures for the integration suites.

use std::collections::BTreeSet;

use mboxverify_core::invariant::{Invariant, Predicate};
use mboxverify_core::mbx::{builtin, ConfigValue};
use mboxverify_core::net::{Universe, Value};
use mboxverify_core::network::{Network, NetworkBuilder};

pub fn pair_set(u: &Universe, pairs: &[(&str, &str)]) -> ConfigValue {
    ConfigValue::Set(
        pairs
            .iter()
            .map(|(a, b)| {
                vec![Value::Addr(u.address(a).unwrap()), Value::Addr(u.address(b).unwrap())]
            })
            .collect::<BTreeSet<_>>(),
    )
}

/// A -- fw -- B with an ACL (deny-list) firewall.
pub fn acl_fw_net(deny: &[(&str, &str)]) -> Network {
    let u = Universe::new(
        vec!["a".into(), "b".into()],
        vec!["p1".into()],
        vec!["c1".into()],
    )
    .unwrap();
    let deny = pair_set(&u, deny);
    NetworkBuilder::new(u)
        .host("A", "a")
        .host("B", "b")
        .middlebox(
            "fw",
            builtin("acl_firewall").unwrap(),
            [("deny".to_string(), deny)].into_iter().collect(),
        )
        .switch("s1")
        .switch("s2")
        .link("A", "s1")
        .link("s1", "fw")
        .link("fw", "s2")
        .link("s2", "B")
        .route("s1", "b", "fw")
        .route("s1", "a", "A")
        .route("fw", "b", "s2")
        .route("fw", "a", "s1")
        .route("s2", "a", "fw")
        .route("s2", "b", "B")
        .build()
        .unwrap()
}

/// A -- fw -- B with a learning (allow-list) firewall.
pub fn learning_fw_net(allow: &[(&str, &str)]) -> Network {
    let u = Universe::new(
        vec!["a".into(), "b".into()],
        vec!["p1".into()],
        vec!["c1".into()],
    )
    .unwrap();
    let acl = pair_set(&u, allow);
    NetworkBuilder::new(u)
        .host("A", "a")
        .host("B", "b")
        .middlebox(
            "fw",
            builtin("learning_firewall").unwrap(),
            [("acl".to_string(), acl)].into_iter().collect(),
        )
        .switch("s1")
        .switch("s2")
        .link("A", "s1")
        .link("s1", "fw")
        .link("fw", "s2")
        .link("s2", "B")
        .route("s1", "b", "fw")
        .route("s1", "a", "A")
        .route("fw", "b", "s2")
        .route("fw", "a", "s1")
        .route("s2", "a", "fw")
        .route("s2", "b", "B")
        .build()
        .unwrap()
}

/// Internal host, external host, NAT in between.
pub fn nat_net() -> Network {
    let u = Universe::new(
        vec!["h".into(), "x".into(), "n".into()],
        vec!["p1".into(), "p2".into()],
        vec!["c1".into()],
    )
    .unwrap();
    let nat_address = ConfigValue::Scalar(Value::Addr(u.address("n").unwrap()));
    NetworkBuilder::new(u)
        .host("H", "h")
        .host("X", "x")
        .middlebox(
            "nat1",
            builtin("nat").unwrap(),
            [("nat_address".to_string(), nat_address)].into_iter().collect(),
        )
        .switch("s1")
        .switch("s2")
        .link("H", "s1")
        .link("s1", "nat1")
        .link("nat1", "s2")
        .link("s2", "X")
        .route("s1", "x", "nat1")
        .route("s1", "n", "nat1")
        .route("s1", "h", "H")
        .route("nat1", "x", "s2")
        .route("nat1", "n", "s1")
        .route("nat1", "h", "s1")
        .route("s2", "h", "nat1")
        .route("s2", "n", "nat1")
        .route("s2", "x", "X")
        .build()
        .unwrap()
}

pub fn simple_iso(net: &Network, name: &str, target: &str, src: &str) -> Invariant {
    Invariant {
        name: name.to_string(),
        target: net.node_id(target).unwrap(),
        predicate: Predicate::SrcEquals(net.universe.address(src).unwrap()),
        max_failures: 0,
    }
}

pub fn flow_iso(net: &Network, name: &str, target: &str, src: &str) -> Invariant {
    Invariant {
        name: name.to_string(),
        target: net.node_id(target).unwrap(),
        predicate: Predicate::NoPriorOutboundFlow(net.universe.address(src).unwrap()),
        max_failures: 0,
    }
}

/// The solver command for SMT tests: the environment override or `z3` when
/// present on PATH.
pub fn solver_cmd() -> Option<String> {
    if let Ok(cmd) = std::env::var("MBOXVERIFY_SOLVER") {
        if !cmd.trim().is_empty() {
            return Some(cmd);
        }
    }
    let found = std::process::Command::new("sh")
        .arg("-c")
        .arg("command -v z3")
        .output()
        .ok()
        .map(|o| o.status.success())
        .unwrap_or(false);
    if found {
        Some("z3 -in".to_string())
    } else {
        None
    }
}
