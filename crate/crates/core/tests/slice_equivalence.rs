//! Slice soundness: the verdict on a slice equals the verdict on the full
//! network at equal bounds, across seeded random flow-parallel networks.
//! Also the origin-agnostic counterexample: a cache network where the
//! naive forwarding-graph subnetwork gives the wrong verdict and the
//! policy-class representative fixes it.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use mboxverify_core::bmc::{explore, Bounds, PacketUniverse};
use mboxverify_core::invariant::{remap_invariant, Invariant, Predicate};
use mboxverify_core::mbx::{builtin, ConfigValue};
use mboxverify_core::net::{Universe, Value};
use mboxverify_core::netfunc::{forwarding_graph, transfers_within_budget};
use mboxverify_core::network::{Network, NetworkBuilder};
use mboxverify_core::slicer::{
    build_slice, check_slice_equivalence, policy_partition, restrict_network, StateClassKind,
};
use mboxverify_core::{Verdict, VerdictKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random linear network: a chain of zero to two firewalls between
/// switch groups, hosts attached to random ends, random ACL contents.
fn random_net(seed: u64) -> (Network, Invariant) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_hosts = rng.gen_range(2..=4usize);
    let n_mbx = rng.gen_range(0..=2usize);
    let two_ports = rng.gen_bool(0.4);

    let addresses: Vec<String> = (0..n_hosts).map(|i| format!("a{i}")).collect();
    let ports: Vec<String> = if two_ports {
        vec!["p0".into(), "p1".into()]
    } else {
        vec!["p0".into()]
    };
    let u = Universe::new(addresses.clone(), ports, vec!["c0".into()]).unwrap();

    let mut b = NetworkBuilder::new(u.clone());
    for i in 0..n_hosts {
        b = b.host(&format!("h{i}"), &format!("a{i}"));
    }
    // Chain: sw0 [- m0 - sw1 [- m1 - sw2]].
    let n_sw = n_mbx + 1;
    for s in 0..n_sw {
        b = b.switch(&format!("sw{s}"));
    }
    let mut fw_names = Vec::new();
    for m in 0..n_mbx {
        let name = format!("m{m}");
        let learning = rng.gen_bool(0.5);
        // Random pair set over host addresses.
        let mut pairs: BTreeSet<Vec<Value>> = BTreeSet::new();
        for i in 0..n_hosts {
            for j in 0..n_hosts {
                if i != j && rng.gen_bool(0.4) {
                    pairs.insert(vec![
                        Value::Addr(u.address(&format!("a{i}")).unwrap()),
                        Value::Addr(u.address(&format!("a{j}")).unwrap()),
                    ]);
                }
            }
        }
        if learning {
            b = b.middlebox(
                &name,
                builtin("learning_firewall").unwrap(),
                [("acl".to_string(), ConfigValue::Set(pairs))].into_iter().collect(),
            );
        } else {
            b = b.middlebox(
                &name,
                builtin("acl_firewall").unwrap(),
                [("deny".to_string(), ConfigValue::Set(pairs))].into_iter().collect(),
            );
        }
        b = b.link(&format!("sw{m}"), &name).link(&name, &format!("sw{}", m + 1));
        fw_names.push(name);
    }
    // Hosts attach to a random switch.
    let mut attach = Vec::new();
    for i in 0..n_hosts {
        let s = rng.gen_range(0..n_sw);
        attach.push(s);
        b = b.link(&format!("h{i}"), &format!("sw{s}"));
    }
    // Routes: along the chain toward each host's switch.
    for i in 0..n_hosts {
        let dst = format!("a{i}");
        let home = attach[i];
        b = b.route(&format!("sw{home}"), &dst, &format!("h{i}"));
        for s in 0..n_sw {
            if s < home {
                b = b.route(&format!("sw{s}"), &dst, &format!("m{s}"));
            } else if s > home {
                b = b.route(&format!("sw{s}"), &dst, &format!("m{}", s - 1));
            }
        }
        for (m, name) in fw_names.iter().enumerate() {
            // Middlebox m sits between sw m and sw m+1.
            if home <= m {
                b = b.route(name, &dst, &format!("sw{m}"));
            } else {
                b = b.route(name, &dst, &format!("sw{}", m + 1));
            }
        }
    }
    let net = b.build().unwrap();

    // A random isolation invariant over two distinct hosts.
    let t = rng.gen_range(0..n_hosts);
    let s = loop {
        let s = rng.gen_range(0..n_hosts);
        if s != t {
            break s;
        }
    };
    let target = net.node_id(&format!("h{t}")).unwrap();
    let src = net.universe.address(&format!("a{s}")).unwrap();
    let predicate = if rng.gen_bool(0.5) {
        Predicate::SrcEquals(src)
    } else {
        Predicate::NoPriorOutboundFlow(src)
    };
    let inv = Invariant { name: format!("inv{seed}"), target, predicate, max_failures: 0 };
    (net, inv)
}

fn flow_parallel_table(net: &Network) -> BTreeMap<String, StateClassKind> {
    net.middleboxes()
        .map(|m| (m.model.name.clone(), StateClassKind::FlowParallel))
        .collect()
}

#[test]
fn random_flow_parallel_networks_agree_on_slices() {
    let bounds = Bounds::default().with_depth(6).with_emits(2);
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 100 {
        seed += 1;
        let (net, inv) = random_net(seed);
        let partition = policy_partition(&net).unwrap();
        let table = flow_parallel_table(&net);
        let slice = build_slice(&net, &inv, &table, &partition).unwrap();
        let ok = check_slice_equivalence(&net, &slice, &inv, &bounds)
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(ok, "seed {seed}: slice and full network disagree");
        checked += 1;
    }
}

#[test]
fn slices_are_forwarding_fixed_points() {
    for seed in 1..=20u64 {
        let (net, inv) = random_net(seed);
        let partition = policy_partition(&net).unwrap();
        let table = flow_parallel_table(&net);
        let slice = build_slice(&net, &inv, &table, &partition).unwrap();
        let tfs = transfers_within_budget(&net, 0).unwrap();
        let tf_refs: Vec<_> = tfs.values().collect();
        let again = forwarding_graph(&net, &tf_refs, &slice.nodes);
        assert_eq!(again.nodes, slice.nodes, "seed {seed}");
    }
}

#[test]
fn partition_and_slices_are_deterministic() {
    let (net, inv) = random_net(42);
    let p1 = policy_partition(&net).unwrap();
    let p2 = policy_partition(&net).unwrap();
    assert_eq!(p1, p2);
    let table = flow_parallel_table(&net);
    let s1 = build_slice(&net, &inv, &table, &p1).unwrap();
    let s2 = build_slice(&net, &inv, &table, &p2).unwrap();
    assert_eq!(s1.nodes, s2.nodes);
    assert_eq!(s1.representatives, s2.representatives);
}

/// The cache-and-firewall network: clients A and B, a content cache with no
/// ACLs, then a firewall blocking A's traffic to and from the server.
fn cache_net() -> (Network, Invariant) {
    let u = Universe::new(
        vec!["ca".into(), "cb".into(), "sa".into()],
        vec!["svc".into(), "cp".into()],
        vec!["c0".into()],
    )
    .unwrap();
    let deny: BTreeSet<Vec<Value>> = [
        vec![Value::Addr(u.address("ca").unwrap()), Value::Addr(u.address("sa").unwrap())],
        vec![Value::Addr(u.address("sa").unwrap()), Value::Addr(u.address("ca").unwrap())],
    ]
    .into_iter()
    .collect();
    let net = NetworkBuilder::new(u.clone())
        .host("clientA", "ca")
        .host("clientB", "cb")
        .host("server", "sa")
        .middlebox(
            "cache0",
            builtin("content_cache").unwrap(),
            [
                ("deny".to_string(), ConfigValue::Set(BTreeSet::new())),
                (
                    "service_port".to_string(),
                    ConfigValue::Scalar(Value::Port(u.port("svc").unwrap())),
                ),
            ]
            .into_iter()
            .collect(),
        )
        .middlebox(
            "fw0",
            builtin("acl_firewall").unwrap(),
            [("deny".to_string(), ConfigValue::Set(deny))].into_iter().collect(),
        )
        .switch("csw1")
        .switch("csw2")
        .switch("csw3")
        .link("clientA", "csw1")
        .link("clientB", "csw1")
        .link("csw1", "cache0")
        .link("cache0", "csw2")
        .link("csw2", "fw0")
        .link("fw0", "csw3")
        .link("csw3", "server")
        .route("csw1", "sa", "cache0")
        .route("cache0", "sa", "csw2")
        .route("csw2", "sa", "fw0")
        .route("fw0", "sa", "csw3")
        .route("csw3", "sa", "server")
        .route("csw1", "ca", "clientA")
        .route("cache0", "ca", "csw1")
        .route("csw2", "ca", "cache0")
        .route("fw0", "ca", "csw2")
        .route("csw3", "ca", "fw0")
        .route("csw1", "cb", "clientB")
        .route("cache0", "cb", "csw1")
        .route("csw2", "cb", "cache0")
        .route("fw0", "cb", "csw2")
        .route("csw3", "cb", "fw0")
        .build()
        .unwrap();
    let inv = Invariant {
        name: "a-no-server-data".into(),
        target: net.node_id("clientA").unwrap(),
        predicate: Predicate::OriginEquals(net.universe.address("sa").unwrap()),
        max_failures: 0,
    };
    (net, inv)
}

/// Origin-agnostic middleboxes need a policy-class representative: the
/// naive forwarding-graph subnetwork wrongly holds, the representative
/// slice and the full network are both violated.
#[test]
fn cache_fixture_three_way_outcome() {
    let (net, inv) = cache_net();
    let bounds = Bounds::default().with_depth(12).with_emits(2);

    // Full network: violated (B primes the cache, A reads it).
    let full = explore(&net, &inv, &bounds);
    assert_eq!(full.kind(), VerdictKind::Violated, "{full:?}");
    if let Verdict::Violated { trace } = &full {
        assert!(mboxverify_core::bmc::replay(&net, trace, &inv).unwrap());
    }

    // Naive subnetwork: forwarding graph over the invariant's nodes only.
    let tfs = transfers_within_budget(&net, 0).unwrap();
    let tf_refs: Vec<_> = tfs.values().collect();
    let endpoints: BTreeSet<_> =
        [net.node_id("clientA").unwrap(), net.node_id("server").unwrap()].into_iter().collect();
    let naive_nodes = forwarding_graph(&net, &tf_refs, &endpoints).nodes;
    assert!(!naive_nodes.contains(&net.node_id("clientB").unwrap()));
    let naive = restrict_network(&net, &naive_nodes);
    let naive_inv = remap_invariant(&inv, &net, &naive).unwrap();
    let naive_universe = PacketUniverse {
        addresses: Some(
            naive
                .hosts()
                .map(|h| h.address)
                .collect(),
        ),
        ports: None,
        contents: None,
    };
    let naive_bounds = Bounds { universe: naive_universe, ..bounds.clone() };
    let naive_verdict = explore(&naive, &naive_inv, &naive_bounds);
    assert_eq!(
        naive_verdict.kind(),
        VerdictKind::Holds,
        "dropping the class representative must hide the violation"
    );

    // Proper slice: a representative of B's class is included.
    let partition = policy_partition(&net).unwrap();
    let mut table = flow_parallel_table(&net);
    table.insert("content_cache".into(), StateClassKind::OriginAgnostic);
    let slice = build_slice(&net, &inv, &table, &partition).unwrap();
    assert!(
        slice.nodes.contains(&net.node_id("clientB").unwrap()),
        "slice must include a representative of B's policy class"
    );
    let restricted = restrict_network(&net, &slice.nodes);
    let sliced_inv = remap_invariant(&inv, &net, &restricted).unwrap();
    let verdict = explore(&restricted, &sliced_inv, &bounds);
    assert_eq!(verdict.kind(), VerdictKind::Violated, "{verdict:?}");

    // And the equivalence harness agrees on the proper slice.
    assert!(check_slice_equivalence(&net, &slice, &inv, &bounds).unwrap());
}
