//! Deterministic generation of the evaluation scenarios as on-disk
//! fixtures: an enterprise network behind a gateway and firewall, a
//! redundant-firewall pair, a multi-tenant datacenter with security
//! groups, an ISP with intrusion detection at its peering points, and a
//! cache-plus-firewall fixture. Misconfiguration knobs reproduce the three
//! classic error classes: deleted rules, broken backups, and routing that
//! bypasses a mandatory middlebox.


use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?} (expected enterprise, redundant, multi_tenant, isp_ids, cache_acl)")]
    Unknown(String),
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

#[derive(Debug, Clone)]
pub struct ScenarioParams {
    pub subnets: u32,
    pub tenants: u32,
    pub peerings: u32,
    pub seed: u64,
    pub delete_rules: u32,
    pub break_backup: bool,
    pub reroute_around_idps: bool,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            subnets: 3,
            tenants: 4,
            peerings: 1,
            seed: 1,
            delete_rules: 0,
            break_backup: false,
            reroute_around_idps: false,
        }
    }
}

/// Files produced for one scenario: (relative name, contents).
pub struct GeneratedScenario {
    pub files: Vec<(String, String)>,
}

const DENY_FIREWALL_DSL: &str = "\
// Default-allow stateful firewall with an explicit deny list. Flows not
// denied are learned on first packet; replies pass via the established set.
model deny_firewall(deny: Set[(Address, Address)]) {
  failure closed
  state established: Set[Flow]

  when established.contains(flow(p)) => {
    forward(p)
  }
  when deny.contains((p.src, p.dst)) => {
    drop
  }
  otherwise => {
    established += flow(p);
    forward(p)
  }
}
";

const SG_FIREWALL_DSL: &str = "\
// Security-group firewall guarding one tenant's members. Inbound packets
// (destination is a member) need an ingress allow entry; outbound packets
// always pass; both directions establish the flow for replies.
model sg_firewall(members: Set[Address], in_acl: Set[(Address, Address)]) {
  failure closed
  state established: Set[Flow]

  when established.contains(flow(p)) => {
    forward(p)
  }
  when members.contains(p.dst) && in_acl.contains((p.src, p.dst)) => {
    established += flow(p);
    forward(p)
  }
  when !members.contains(p.dst) => {
    established += flow(p);
    forward(p)
  }
  otherwise => {
    drop
  }
}
";

pub fn gen_scenario(
    name: &str,
    params: &ScenarioParams,
) -> Result<GeneratedScenario, ScenarioError> {
    match name {
        "enterprise" => enterprise(params),
        "redundant" => redundant(params),
        "multi_tenant" => multi_tenant(params),
        "isp_ids" => isp_ids(params),
        "cache_acl" => cache_acl(params),
        other => Err(ScenarioError::Unknown(other.to_string())),
    }
}

fn rule(node: &str, dst: &str, next: &str) -> Value {
    json!({ "node": node, "dst": dst, "next": next })
}

/// Enterprise network: subnets (public / private / quarantined in equal
/// proportion) behind a deny-list firewall and a gateway, facing one
/// external host. `delete_rules` removes deny entries at random (seeded).
fn enterprise(p: &ScenarioParams) -> Result<GeneratedScenario, ScenarioError> {
    let n = p.subnets;
    if n == 0 {
        return Err(ScenarioError::BadParam("subnets must be at least 1".into()));
    }
    let role = |i: u32| match i % 3 {
        0 => "public",
        1 => "private",
        _ => "quarantined",
    };

    let mut addresses: Vec<String> = (0..n).map(|i| format!("s{i}a")).collect();
    addresses.push("exta".into());

    let mut hosts = Vec::new();
    for i in 0..n {
        hosts.push(json!({ "id": format!("s{i}h"), "address": format!("s{i}a") }));
    }
    hosts.push(json!({ "id": "ext", "address": "exta" }));

    // Deny rules: two per quarantined subnet (either direction), one per
    // private subnet (inbound).
    let mut deny: Vec<(String, String)> = Vec::new();
    for i in 0..n {
        match role(i) {
            "quarantined" => {
                deny.push((format!("s{i}a"), "exta".into()));
                deny.push(("exta".into(), format!("s{i}a")));
            }
            "private" => deny.push(("exta".into(), format!("s{i}a"))),
            _ => {}
        }
    }
    deny.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    for _ in 0..p.delete_rules.min(deny.len() as u32) {
        let idx = (0..deny.len()).collect::<Vec<_>>();
        let pick = *idx.as_slice().choose(&mut rng).expect("nonempty");
        deny.remove(pick);
    }
    let deny_json: Vec<Value> =
        deny.iter().map(|(a, b)| json!([a, b])).collect();

    let mut links = vec![
        json!(["isw", "fw"]),
        json!(["fw", "mid"]),
        json!(["mid", "gw"]),
        json!(["gw", "esw"]),
        json!(["esw", "ext"]),
    ];
    for i in 0..n {
        links.push(json!([format!("s{i}h"), "isw"]));
    }

    let mut fwd = Vec::new();
    for i in 0..n {
        let a = format!("s{i}a");
        fwd.push(rule("isw", &a, &format!("s{i}h")));
        fwd.push(rule("fw", &a, "isw"));
        fwd.push(rule("mid", &a, "fw"));
        fwd.push(rule("gw", &a, "mid"));
        fwd.push(rule("esw", &a, "gw"));
    }
    fwd.push(rule("isw", "exta", "fw"));
    fwd.push(rule("fw", "exta", "mid"));
    fwd.push(rule("mid", "exta", "gw"));
    fwd.push(rule("gw", "exta", "esw"));
    fwd.push(rule("esw", "exta", "ext"));

    let network = json!({
        "universe": { "addresses": addresses, "ports": ["p0"], "contents": ["c0"] },
        "hosts": hosts,
        "middleboxes": [
            {
                "id": "fw",
                "model": "deny_firewall.dsl",
                "config": { "deny": deny_json },
                "class_hint": "flow-parallel",
            },
            {
                "id": "gw",
                "model": "acl_firewall",
                "config": { "deny": [] },
                "class_hint": "flow-parallel",
            },
        ],
        "links": links,
        "forwarding": { "default": fwd, "scenarios": {} },
    });

    let mut invariants = Vec::new();
    for i in 0..n {
        match role(i) {
            "quarantined" => {
                invariants.push(json!({
                    "name": format!("q-in-s{i}"),
                    "type": "simple-isolation",
                    "target": format!("s{i}h"),
                    "src": "exta",
                    "max_failures": 0,
                }));
                invariants.push(json!({
                    "name": format!("q-out-s{i}"),
                    "type": "simple-isolation",
                    "target": "ext",
                    "src": format!("s{i}a"),
                    "max_failures": 0,
                }));
            }
            "private" => {
                invariants.push(json!({
                    "name": format!("priv-flow-s{i}"),
                    "type": "flow-isolation",
                    "target": format!("s{i}h"),
                    "src": "exta",
                    "max_failures": 0,
                }));
            }
            _ => {}
        }
    }

    Ok(GeneratedScenario {
        files: vec![
            ("network.json".into(), pretty(&network)),
            ("invariants.json".into(), pretty(&json!(invariants))),
            ("deny_firewall.dsl".into(), DENY_FIREWALL_DSL.to_string()),
        ],
    })
}

/// Redundant ACL firewalls between an internal and an external host. The
/// backup carries the same deny rules unless `break_backup` empties them;
/// the declared failure scenarios reroute through the surviving box.
fn redundant(p: &ScenarioParams) -> Result<GeneratedScenario, ScenarioError> {
    let deny = json!([["exta", "inta"]]);
    let backup_deny = if p.break_backup { json!([]) } else { deny.clone() };

    let route_via = |via: &str| -> Vec<Value> {
        vec![
            rule("s1", "exta", via),
            rule("s1", "inta", "int"),
            rule("s2", "inta", via),
            rule("s2", "exta", "ext"),
            rule("fw1", "exta", "s2"),
            rule("fw1", "inta", "s1"),
            rule("fw2", "exta", "s2"),
            rule("fw2", "inta", "s1"),
        ]
    };

    let network = json!({
        "universe": { "addresses": ["inta", "exta"], "ports": ["p0"], "contents": ["c0"] },
        "hosts": [
            { "id": "int", "address": "inta" },
            { "id": "ext", "address": "exta" },
        ],
        "middleboxes": [
            { "id": "fw1", "model": "acl_firewall", "config": { "deny": deny }, "class_hint": "flow-parallel" },
            { "id": "fw2", "model": "acl_firewall", "config": { "deny": backup_deny }, "class_hint": "flow-parallel" },
        ],
        "links": [
            ["int", "s1"], ["ext", "s2"],
            ["s1", "fw1"], ["fw1", "s2"],
            ["s1", "fw2"], ["fw2", "s2"],
        ],
        "forwarding": {
            "default": route_via("fw1"),
            "scenarios": {
                "fw1": route_via("fw2"),
                "fw2": route_via("fw1"),
            },
        },
    });

    let invariants = json!([{
        "name": "int-isolated-from-ext",
        "type": "simple-isolation",
        "target": "int",
        "src": "exta",
        "max_failures": 1,
    }]);

    Ok(GeneratedScenario {
        files: vec![
            ("network.json".into(), pretty(&network)),
            ("invariants.json".into(), pretty(&invariants)),
        ],
    })
}

/// Multi-tenant datacenter with per-tenant security-group firewalls: every
/// tenant has public VMs (accept from anyone) and private VMs (accept only
/// from the same tenant).
fn multi_tenant(p: &ScenarioParams) -> Result<GeneratedScenario, ScenarioError> {
    let t = p.tenants;
    if t < 2 {
        return Err(ScenarioError::BadParam("tenants must be at least 2".into()));
    }
    const PUB: u32 = 5;
    const PRIV: u32 = 5;

    let mut addresses = Vec::new();
    let mut hosts = Vec::new();
    for ti in 0..t {
        for i in 0..PUB {
            addresses.push(format!("t{ti}pa{i}"));
            hosts.push(json!({ "id": format!("t{ti}pub{i}"), "address": format!("t{ti}pa{i}") }));
        }
        for i in 0..PRIV {
            addresses.push(format!("t{ti}va{i}"));
            hosts.push(json!({ "id": format!("t{ti}priv{i}"), "address": format!("t{ti}va{i}") }));
        }
    }

    let mut middleboxes = Vec::new();
    let mut links = Vec::new();
    let mut fwd = Vec::new();
    for ti in 0..t {
        let members: Vec<String> = (0..PUB)
            .map(|i| format!("t{ti}pa{i}"))
            .chain((0..PRIV).map(|i| format!("t{ti}va{i}")))
            .collect();
        // Ingress allows: anyone -> public members; own members -> private.
        let mut in_acl: Vec<(String, String)> = Vec::new();
        for i in 0..PUB {
            let dst = format!("t{ti}pa{i}");
            for src in &addresses {
                if *src != dst {
                    in_acl.push((src.clone(), dst.clone()));
                }
            }
        }
        for i in 0..PRIV {
            let dst = format!("t{ti}va{i}");
            for src in &members {
                if *src != dst {
                    in_acl.push((src.clone(), dst.clone()));
                }
            }
        }
        in_acl.sort();
        let in_acl_json: Vec<Value> = in_acl.iter().map(|(a, b)| json!([a, b])).collect();
        middleboxes.push(json!({
            "id": format!("t{ti}fw"),
            "model": "sg_firewall.dsl",
            "config": { "members": members, "in_acl": in_acl_json },
            "class_hint": "flow-parallel",
        }));

        links.push(json!([format!("t{ti}sw"), format!("t{ti}fw")]));
        links.push(json!([format!("t{ti}fw"), "core"]));
        for i in 0..PUB {
            links.push(json!([format!("t{ti}pub{i}"), format!("t{ti}sw")]));
        }
        for i in 0..PRIV {
            links.push(json!([format!("t{ti}priv{i}"), format!("t{ti}sw")]));
        }

        // Routes toward this tenant's addresses.
        for i in 0..PUB {
            let a = format!("t{ti}pa{i}");
            fwd.push(rule(&format!("t{ti}sw"), &a, &format!("t{ti}pub{i}")));
            fwd.push(rule(&format!("t{ti}fw"), &a, &format!("t{ti}sw")));
            fwd.push(rule("core", &a, &format!("t{ti}fw")));
        }
        for i in 0..PRIV {
            let a = format!("t{ti}va{i}");
            fwd.push(rule(&format!("t{ti}sw"), &a, &format!("t{ti}priv{i}")));
            fwd.push(rule(&format!("t{ti}fw"), &a, &format!("t{ti}sw")));
            fwd.push(rule("core", &a, &format!("t{ti}fw")));
        }
    }
    // Foreign destinations leave through the tenant firewall toward core.
    for ti in 0..t {
        for addr in &addresses {
            let own = addr.starts_with(&format!("t{ti}p")) || addr.starts_with(&format!("t{ti}v"));
            if !own {
                fwd.push(rule(&format!("t{ti}sw"), addr, &format!("t{ti}fw")));
                fwd.push(rule(&format!("t{ti}fw"), addr, "core"));
            }
        }
    }

    let network = json!({
        "universe": { "addresses": addresses, "ports": ["p0"], "contents": ["c0"] },
        "hosts": hosts,
        "middleboxes": middleboxes,
        "links": links,
        "forwarding": { "default": fwd, "scenarios": {} },
    });

    // Three invariant kinds per ordered tenant pair, expressed on the
    // first public/private VM of each tenant.
    let mut invariants = Vec::new();
    for i in 0..t {
        for j in 0..t {
            if i == j {
                continue;
            }
            invariants.push(json!({
                "name": format!("priv-priv-{i}-{j}"),
                "type": "flow-isolation",
                "target": format!("t{j}priv0"),
                "src": format!("t{i}va0"),
                "max_failures": 0,
            }));
            invariants.push(json!({
                "name": format!("pub-priv-{i}-{j}"),
                "type": "flow-isolation",
                "target": format!("t{j}priv0"),
                "src": format!("t{i}pa0"),
                "max_failures": 0,
            }));
            // Reachability of public VMs shows up as a violated isolation.
            invariants.push(json!({
                "name": format!("priv-pub-{i}-{j}"),
                "type": "simple-isolation",
                "target": format!("t{j}pub0"),
                "src": format!("t{i}va0"),
                "max_failures": 0,
            }));
        }
    }

    Ok(GeneratedScenario {
        files: vec![
            ("network.json".into(), pretty(&network)),
            ("invariants.json".into(), pretty(&json!(invariants))),
            ("sg_firewall.dsl".into(), SG_FIREWALL_DSL.to_string()),
        ],
    })
}

/// ISP with an IDPS pair at each peering point. Traffic from peers must
/// traverse an IDPS before reaching internal hosts; the misconfiguration
/// knob installs failover routes that bypass both boxes.
fn isp_ids(p: &ScenarioParams) -> Result<GeneratedScenario, ScenarioError> {
    let k = p.peerings;
    if k == 0 {
        return Err(ScenarioError::BadParam("peerings must be at least 1".into()));
    }
    let n = p.subnets.max(1);

    let mut addresses: Vec<String> = (0..k).map(|i| format!("peer{i}a")).collect();
    addresses.extend((0..n).map(|j| format!("h{j}a")));

    let mut hosts: Vec<Value> = (0..k)
        .map(|i| json!({ "id": format!("peer{i}"), "address": format!("peer{i}a") }))
        .collect();
    hosts.extend((0..n).map(|j| json!({ "id": format!("h{j}"), "address": format!("h{j}a") })));

    let mut middleboxes = Vec::new();
    let mut links = Vec::new();
    for i in 0..k {
        middleboxes.push(json!({
            "id": format!("idps{i}a"), "model": "idps", "config": {},
            "class_hint": "origin-agnostic",
        }));
        middleboxes.push(json!({
            "id": format!("idps{i}b"), "model": "idps", "config": {},
            "class_hint": "origin-agnostic",
        }));
        links.push(json!([format!("peer{i}"), format!("psw{i}")]));
        links.push(json!([format!("psw{i}"), format!("idps{i}a")]));
        links.push(json!([format!("idps{i}a"), "core"]));
        links.push(json!([format!("psw{i}"), format!("idps{i}b")]));
        links.push(json!([format!("idps{i}b"), "core"]));
        // Physical bypass link; correct routing never uses it.
        links.push(json!([format!("psw{i}"), "core"]));
    }
    for j in 0..n {
        links.push(json!([format!("h{j}"), "core"]));
    }

    let mut fwd = Vec::new();
    for j in 0..n {
        let a = format!("h{j}a");
        fwd.push(rule("core", &a, &format!("h{j}")));
        for i in 0..k {
            fwd.push(rule(&format!("psw{i}"), &a, &format!("idps{i}a")));
            fwd.push(rule(&format!("idps{i}a"), &a, "core"));
            fwd.push(rule(&format!("idps{i}b"), &a, "core"));
        }
    }
    for i in 0..k {
        let a = format!("peer{i}a");
        fwd.push(rule(&format!("psw{i}"), &a, &format!("peer{i}")));
        fwd.push(rule(&format!("idps{i}a"), &a, &format!("psw{i}")));
        fwd.push(rule(&format!("idps{i}b"), &a, &format!("psw{i}")));
        fwd.push(rule("core", &a, &format!("idps{i}a")));
        for i2 in 0..k {
            if i2 != i {
                fwd.push(rule(&format!("psw{i2}"), &a, "core"));
            }
        }
    }

    // Failure scenarios per primary IDPS.
    let mut scenarios = serde_json::Map::new();
    for i in 0..k {
        let mut rules: Vec<Value> = Vec::new();
        for j in 0..n {
            let a = format!("h{j}a");
            rules.push(rule("core", &a, &format!("h{j}")));
            for i2 in 0..k {
                if i2 == i {
                    if p.reroute_around_idps {
                        rules.push(rule(&format!("psw{i2}"), &a, "core"));
                    } else {
                        rules.push(rule(&format!("psw{i2}"), &a, &format!("idps{i2}b")));
                    }
                } else {
                    rules.push(rule(&format!("psw{i2}"), &a, &format!("idps{i2}a")));
                }
                rules.push(rule(&format!("idps{i2}a"), &a, "core"));
                rules.push(rule(&format!("idps{i2}b"), &a, "core"));
            }
        }
        for i2 in 0..k {
            let a = format!("peer{i2}a");
            rules.push(rule(&format!("psw{i2}"), &a, &format!("peer{i2}")));
            rules.push(rule(&format!("idps{i2}a"), &a, &format!("psw{i2}")));
            rules.push(rule(&format!("idps{i2}b"), &a, &format!("psw{i2}")));
            if i2 == i {
                rules.push(rule("core", &a, &format!("idps{i2}b")));
            } else {
                rules.push(rule("core", &a, &format!("idps{i2}a")));
            }
            for i3 in 0..k {
                if i3 != i2 {
                    rules.push(rule(&format!("psw{i3}"), &a, "core"));
                }
            }
        }
        scenarios.insert(format!("idps{i}a"), json!(rules));
    }

    let network = json!({
        "universe": { "addresses": addresses, "ports": ["p0"], "contents": ["c0"] },
        "hosts": hosts,
        "middleboxes": middleboxes,
        "links": links,
        "forwarding": { "default": fwd, "scenarios": scenarios },
    });

    // Peer-sourced traffic must traverse an IDPS; internal traffic is not
    // constrained.
    let mut invariants: Vec<Value> = Vec::new();
    for j in 0..n {
        for i in 0..k {
            invariants.push(json!({
                "name": format!("h{j}-from-peer{i}-via-idps"),
                "type": "traversal",
                "target": format!("h{j}"),
                "via": "idps",
                "src": format!("peer{i}a"),
                "max_failures": 1,
            }));
        }
    }

    Ok(GeneratedScenario {
        files: vec![
            ("network.json".into(), pretty(&network)),
            ("invariants.json".into(), pretty(&json!(invariants))),
        ],
    })
}

/// Content cache in front of a firewall. The firewall blocks client A's
/// traffic to and from the server; the cache carries no ACLs, so cached
/// data leaks to A once any other client has populated it.
fn cache_acl(_p: &ScenarioParams) -> Result<GeneratedScenario, ScenarioError> {
    let network = json!({
        "universe": {
            "addresses": ["ca", "cb", "sa"],
            "ports": ["svc", "cp"],
            "contents": ["c0"],
        },
        "hosts": [
            { "id": "clientA", "address": "ca" },
            { "id": "clientB", "address": "cb" },
            { "id": "server", "address": "sa" },
        ],
        "middleboxes": [
            {
                "id": "cache0",
                "model": "content_cache",
                "config": { "deny": [], "service_port": "svc" },
                "class_hint": "origin-agnostic",
            },
            {
                "id": "fw0",
                "model": "acl_firewall",
                "config": { "deny": [["ca", "sa"], ["sa", "ca"]] },
                "class_hint": "flow-parallel",
            },
        ],
        "links": [
            ["clientA", "csw1"], ["clientB", "csw1"],
            ["csw1", "cache0"], ["cache0", "csw2"],
            ["csw2", "fw0"], ["fw0", "csw3"],
            ["csw3", "server"],
        ],
        "forwarding": { "default": [
            rule("csw1", "sa", "cache0"),
            rule("cache0", "sa", "csw2"),
            rule("csw2", "sa", "fw0"),
            rule("fw0", "sa", "csw3"),
            rule("csw3", "sa", "server"),
            rule("csw1", "ca", "clientA"),
            rule("cache0", "ca", "csw1"),
            rule("csw2", "ca", "cache0"),
            rule("fw0", "ca", "csw2"),
            rule("csw3", "ca", "fw0"),
            rule("csw1", "cb", "clientB"),
            rule("cache0", "cb", "csw1"),
            rule("csw2", "cb", "cache0"),
            rule("fw0", "cb", "csw2"),
            rule("csw3", "cb", "fw0"),
        ], "scenarios": {} },
    });

    let invariants = json!([{
        "name": "clientA-no-server-data",
        "type": "data-isolation",
        "target": "clientA",
        "origin": "sa",
        "max_failures": 0,
    }]);

    Ok(GeneratedScenario {
        files: vec![
            ("network.json".into(), pretty(&network)),
            ("invariants.json".into(), pretty(&invariants)),
        ],
    })
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}
