//! Unit tests for the modeling language: parsing, the bundled models, and
//! concrete execution of the firewall and NAT models.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::ast::*;
use super::builtins::*;
use super::oracle::*;
use super::parse::*;
use super::step::*;
use crate::net::{flow_of, NodeId, Packet, Universe, Value};

fn universe() -> Universe {
    Universe::new(
        vec!["a".into(), "b".into(), "n".into()],
        vec!["p1".into(), "p2".into()],
        vec!["c1".into()],
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
        content: u.content("c1").unwrap(),
    }
}

fn fw_instance(u: &Universe, allow: &[(&str, &str)]) -> MiddleboxInstance {
    let model = builtin(LEARNING_FIREWALL).unwrap();
    let acl: std::collections::BTreeSet<Vec<Value>> = allow
        .iter()
        .map(|(s, d)| {
            vec![
                Value::Addr(u.address(s).unwrap()),
                Value::Addr(u.address(d).unwrap()),
            ]
        })
        .collect();
    MiddleboxInstance {
        id: NodeId(0),
        name: "f".into(),
        model,
        config: [("acl".to_string(), ConfigValue::Set(acl))].into_iter().collect(),
    }
}

fn nat_instance(u: &Universe) -> MiddleboxInstance {
    let model = builtin(NAT).unwrap();
    MiddleboxInstance {
        id: NodeId(1),
        name: "n1".into(),
        model,
        config: [(
            "nat_address".to_string(),
            ConfigValue::Scalar(Value::Addr(u.address("n").unwrap())),
        )]
        .into_iter()
        .collect(),
    }
}

#[test]
fn listing_firewall_parses_to_expected_shape() {
    let m = parse_model(builtin_source(LEARNING_FIREWALL).unwrap()).unwrap();
    assert_eq!(m.registers.len(), 1);
    assert_eq!(m.rules.len(), 3);
    assert_eq!(m.failure, FailurePolicy::Closed);
    assert_eq!(*builtin(LEARNING_FIREWALL).unwrap(), m);
}

#[test]
fn listing_nat_parses_to_expected_shape() {
    let m = parse_model(builtin_source(NAT).unwrap()).unwrap();
    assert_eq!(m.registers.len(), 2);
    assert_eq!(m.oracles.len(), 1);
    assert_eq!(m.rules.len(), 4);
    assert_eq!(m.failure, FailurePolicy::Explicit);
    assert_eq!(*builtin(NAT).unwrap(), m);
}

#[test]
fn all_builtins_parse_from_their_sources() {
    for name in builtin_names() {
        let model = builtin(name).unwrap();
        let parsed = parse_model(builtin_source(name).unwrap()).unwrap();
        assert_eq!(*model, parsed, "builtin {name} differs from its source");
    }
}

#[test]
fn missing_otherwise_rule_is_rejected() {
    let err = parse_model(
        "model broken(acl: Set[(Address, Address)]) {\n  when acl.contains((p.src, p.dst)) => { forward(p) }\n}",
    )
    .unwrap_err();
    assert!(matches!(err, ModelError::Semantic { .. }), "{err}");
}

#[test]
fn duplicate_register_is_rejected() {
    let err = parse_model(
        "model broken() {\n  state s: Set[Flow]\n  state s: Set[Flow]\n  otherwise => { drop }\n}",
    )
    .unwrap_err();
    assert!(err.to_string().contains("duplicate register"), "{err}");
}

#[test]
fn undeclared_symbol_is_rejected() {
    let err = parse_model(
        "model broken() {\n  when acl.contains((p.src, p.dst)) => { drop }\n  otherwise => { drop }\n}",
    )
    .unwrap_err();
    assert!(err.to_string().contains("undeclared"), "{err}");
}

#[test]
fn parse_error_carries_position() {
    let err = parse_model("model broken( {").unwrap_err();
    match err {
        ModelError::Parse { line, col, .. } => {
            assert_eq!(line, 1);
            assert!(col > 1);
        }
        other => panic!("expected parse error, got {other}"),
    }
}

#[test]
fn firewall_permitted_packet_establishes_flow() {
    let u = universe();
    let f = fw_instance(&u, &[("a", "b")]);
    let st = MbxState::initial(&f.model);
    let env = OracleEnv::new();
    let p = pkt(&u, "a", "b", "p1", "p2");

    let out = step(&f, &st, &p, &env, &u).unwrap();
    assert_eq!(out.forwarded, vec![p]);
    assert_eq!(out.fired_rule, Some(1));
    let RegValue::Set(established) = &out.state.registers[0] else { panic!() };
    assert!(established.contains(&vec![Value::Flow(flow_of(&p))]));
}

#[test]
fn firewall_reply_passes_via_established() {
    let u = universe();
    let f = fw_instance(&u, &[("a", "b")]);
    let env = OracleEnv::new();
    let p = pkt(&u, "a", "b", "p1", "p2");
    let st = step(&f, &MbxState::initial(&f.model), &p, &env, &u).unwrap().state;

    let reply = pkt(&u, "b", "a", "p2", "p1");
    let out = step(&f, &st, &reply, &env, &u).unwrap();
    assert_eq!(out.forwarded, vec![reply]);
    assert_eq!(out.fired_rule, Some(0), "reply must pass via the established branch");
}

#[test]
fn firewall_unsolicited_packet_is_dropped() {
    let u = universe();
    let f = fw_instance(&u, &[("a", "b")]);
    let env = OracleEnv::new();
    let p = pkt(&u, "b", "a", "p2", "p1");
    let out = step(&f, &MbxState::initial(&f.model), &p, &env, &u).unwrap();
    assert!(out.forwarded.is_empty());
    assert_eq!(out.fired_rule, Some(2));
}

#[test]
fn fail_closed_firewall_drops_when_failed() {
    let u = universe();
    let f = fw_instance(&u, &[("a", "b")]);
    let mut st = MbxState::initial(&f.model);
    st.failed = true;
    let out = step(&f, &st, &pkt(&u, "a", "b", "p1", "p2"), &OracleEnv::new(), &u).unwrap();
    assert!(out.forwarded.is_empty());
    assert_eq!(out.fired_rule, None);
}

#[test]
fn fail_open_instance_forwards_unmodified_when_failed() {
    let model = Arc::new(
        parse_model("model pass() {\n  failure open\n  otherwise => { drop }\n}").unwrap(),
    );
    let inst = MiddleboxInstance {
        id: NodeId(2),
        name: "open1".into(),
        model,
        config: BTreeMap::new(),
    };
    let u = universe();
    let mut st = MbxState::initial(&inst.model);
    st.failed = true;
    let p = pkt(&u, "a", "b", "p1", "p2");
    let out = step(&inst, &st, &p, &OracleEnv::new(), &u).unwrap();
    assert_eq!(out.forwarded, vec![p], "fail-open forwards unmodified during failure");
}

#[test]
fn nat_rewrites_and_reverses() {
    let u = universe();
    let nat = nat_instance(&u);
    let p = pkt(&u, "a", "b", "p1", "p2");

    // Unbound oracle: step reports the query and its choices.
    let err = step(&nat, &MbxState::initial(&nat.model), &p, &OracleEnv::new(), &u).unwrap_err();
    let StepError::NeedOracle { query, choices } = err else { panic!("{err}") };
    assert!(matches!(&query, OracleQuery::Fn { name, .. } if name == "remapped_port"));
    // Range Port includes the reserved fresh port.
    assert_eq!(choices.len(), 3);

    // Bind the remapped port to p2 and run the outbound packet.
    let mut env = OracleEnv::new();
    env.bind(&OracleBinding { query, answer: OracleAnswer::Value(Value::Port(u.port("p2").unwrap())) });
    let out = step(&nat, &MbxState::initial(&nat.model), &p, &env, &u).unwrap();
    assert_eq!(out.forwarded.len(), 1);
    let egress = out.forwarded[0];
    assert_eq!(egress.src, u.address("n").unwrap());
    assert_eq!(egress.src_port, u.port("p2").unwrap());
    assert_eq!(egress.dst, p.dst);

    // active and reverse encode inverse maps.
    let RegValue::Map(active) = &out.state.registers[0] else { panic!() };
    let RegValue::Map(reverse) = &out.state.registers[1] else { panic!() };
    let fl = flow_of(&p);
    let assigned = active.get(&vec![Value::Flow(fl)]).expect("active keyed by internal flow");
    assert_eq!(assigned, &vec![Value::Port(u.port("p2").unwrap())]);
    let internal = reverse.get(&vec![Value::Port(u.port("p2").unwrap())]).unwrap();
    assert_eq!(
        internal,
        &vec![Value::Addr(u.address("a").unwrap()), Value::Port(u.port("p1").unwrap())]
    );

    // Inbound packet to (n, p2) is rewritten back to (a, p1).
    let inbound = Packet {
        src: u.address("b").unwrap(),
        dst: u.address("n").unwrap(),
        src_port: u.port("p2").unwrap(),
        dst_port: u.port("p2").unwrap(),
        origin: u.address("b").unwrap(),
        content: u.content("c1").unwrap(),
    };
    let back = step(&nat, &out.state, &inbound, &env, &u).unwrap();
    assert_eq!(back.forwarded.len(), 1);
    assert_eq!(back.forwarded[0].dst, u.address("a").unwrap());
    assert_eq!(back.forwarded[0].dst_port, u.port("p1").unwrap());
}

#[test]
fn nat_inbound_to_unmapped_port_is_a_lookup_miss() {
    let u = universe();
    let nat = nat_instance(&u);
    let inbound = Packet {
        src: u.address("b").unwrap(),
        dst: u.address("n").unwrap(),
        src_port: u.port("p1").unwrap(),
        dst_port: u.port("p1").unwrap(),
        origin: u.address("b").unwrap(),
        content: u.content("c1").unwrap(),
    };
    let err =
        step(&nat, &MbxState::initial(&nat.model), &inbound, &OracleEnv::new(), &u).unwrap_err();
    assert!(matches!(err, StepError::MapLookupMiss { .. }), "{err}");
}

#[test]
fn nat_explicit_failure_drops() {
    let u = universe();
    let nat = nat_instance(&u);
    let mut st = MbxState::initial(&nat.model);
    st.failed = true;
    let out = step(&nat, &st, &pkt(&u, "a", "b", "p1", "p2"), &OracleEnv::new(), &u).unwrap();
    assert!(out.forwarded.is_empty());
    assert_eq!(out.fired_rule, Some(0), "explicit models see fail(self)");
}

#[test]
fn step_is_deterministic() {
    let u = universe();
    let f = fw_instance(&u, &[("a", "b")]);
    let st = MbxState::initial(&f.model);
    let env = OracleEnv::new();
    let p = pkt(&u, "a", "b", "p1", "p2");
    let a = step(&f, &st, &p, &env, &u).unwrap();
    let b = step(&f, &st, &p, &env, &u).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.forwarded, b.forwarded);
}

#[test]
fn content_cache_serves_cached_origin() {
    let u = universe();
    let model = builtin(CONTENT_CACHE).unwrap();
    let cache = MiddleboxInstance {
        id: NodeId(3),
        name: "c1".into(),
        model,
        config: [
            ("deny".to_string(), ConfigValue::Set(Default::default())),
            (
                "service_port".to_string(),
                ConfigValue::Scalar(Value::Port(u.port("p1").unwrap())),
            ),
        ]
        .into_iter()
        .collect(),
    };
    let env = OracleEnv::new();

    // A response from b (src_port = service port) populates the cache.
    let response = Packet {
        src: u.address("b").unwrap(),
        dst: u.address("a").unwrap(),
        src_port: u.port("p1").unwrap(),
        dst_port: u.port("p2").unwrap(),
        origin: u.address("b").unwrap(),
        content: u.content("c1").unwrap(),
    };
    let st = step(&cache, &MbxState::initial(&cache.model), &response, &env, &u).unwrap();
    assert_eq!(st.forwarded, vec![response]);

    // A later request for the same content is answered locally with the
    // cached origin.
    let request = Packet {
        src: u.address("a").unwrap(),
        dst: u.address("n").unwrap(),
        src_port: u.port("p2").unwrap(),
        dst_port: u.port("p1").unwrap(),
        origin: u.address("a").unwrap(),
        content: u.content("c1").unwrap(),
    };
    let hit = step(&cache, &st.state, &request, &env, &u).unwrap();
    assert_eq!(hit.forwarded.len(), 1);
    let served = hit.forwarded[0];
    assert_eq!(served.dst, request.src);
    assert_eq!(served.src, request.dst);
    assert_eq!(served.origin, u.address("b").unwrap(), "origin travels with content");
}

#[test]
fn load_balancer_keeps_flows_on_one_backend() {
    let u = universe();
    let model = builtin(LOAD_BALANCER).unwrap();
    let backends: std::collections::BTreeSet<Vec<Value>> =
        [vec![Value::Addr(u.address("a").unwrap())], vec![Value::Addr(u.address("b").unwrap())]]
            .into_iter()
            .collect();
    let lb = MiddleboxInstance {
        id: NodeId(4),
        name: "lb1".into(),
        model,
        config: [("backends".to_string(), ConfigValue::Set(backends))].into_iter().collect(),
    };
    let p = pkt(&u, "a", "n", "p1", "p2");
    let err = step(&lb, &MbxState::initial(&lb.model), &p, &OracleEnv::new(), &u).unwrap_err();
    let StepError::NeedOracle { query, choices } = err else { panic!() };
    // The range is the configured backend set, keyed by the flow.
    assert_eq!(choices.len(), 2);
    let OracleQuery::Fn { args, .. } = &query else { panic!() };
    assert_eq!(args, &vec![Value::Flow(flow_of(&p))]);

    let mut env = OracleEnv::new();
    env.bind(&OracleBinding {
        query,
        answer: OracleAnswer::Value(Value::Addr(u.address("b").unwrap())),
    });
    let out1 = step(&lb, &MbxState::initial(&lb.model), &p, &env, &u).unwrap();
    assert_eq!(out1.forwarded[0].dst, u.address("b").unwrap());
    // Same flow, later packet: the oracle binding forces the same backend.
    let out2 = step(&lb, &out1.state, &p, &env, &u).unwrap();
    assert_eq!(out2.forwarded[0].dst, u.address("b").unwrap());
}

#[test]
fn class_exclusion_constrains_choices() {
    let model = Arc::new(
        parse_model(
            "model dpi() {\n  class skype excludes jabber\n  class jabber\n  when skype?(p) => { drop }\n  when jabber?(p) => { drop }\n  otherwise => { forward(p) }\n}",
        )
        .unwrap(),
    );
    let inst = MiddleboxInstance {
        id: NodeId(5),
        name: "dpi1".into(),
        model,
        config: BTreeMap::new(),
    };
    let u = universe();
    let p = pkt(&u, "a", "b", "p1", "p2");
    let fl = flow_of(&p);

    // With skype already true for the flow, jabber may only be false.
    let mut env = OracleEnv::new();
    env.bind(&OracleBinding {
        query: OracleQuery::Class { class: "skype".into(), flow: fl },
        answer: OracleAnswer::Bool(true),
    });
    // skype?(p) consults first and is bound true: packet drops without
    // touching jabber.
    let out = step(&inst, &MbxState::initial(&inst.model), &p, &env, &u).unwrap();
    assert!(out.forwarded.is_empty());

    // Rebind skype false; jabber consult must offer both choices.
    let mut env2 = OracleEnv::new();
    env2.bind(&OracleBinding {
        query: OracleQuery::Class { class: "skype".into(), flow: fl },
        answer: OracleAnswer::Bool(false),
    });
    let err = step(&inst, &MbxState::initial(&inst.model), &p, &env2, &u).unwrap_err();
    let StepError::NeedOracle { choices, .. } = err else { panic!() };
    assert_eq!(choices.len(), 2);

    // With skype true, a fresh jabber consult is restricted to false.
    let model2 = inst.model.clone();
    let exclusions = model2.exclusions_of("jabber");
    assert!(env.excluded_conflict(exclusions.into_iter(), fl));
}

#[test]
fn oracle_out_of_range_is_rejected() {
    let u = universe();
    let nat = nat_instance(&u);
    let p = pkt(&u, "a", "b", "p1", "p2");
    let mut env = OracleEnv::new();
    // Bind the remapped port to an address value's index beyond the port
    // universe: range checking catches it.
    let query = OracleQuery::Fn {
        instance: nat.id,
        name: "remapped_port".into(),
        args: vec![{
            let mut q = p;
            q.src = u.address("n").unwrap();
            packet_value(&q)
        }],
    };
    env.bind(&OracleBinding {
        query,
        answer: OracleAnswer::Value(Value::Port(crate::net::Port(99))),
    });
    let err = step(&nat, &MbxState::initial(&nat.model), &p, &env, &u).unwrap_err();
    assert!(matches!(err, StepError::OracleValueOutOfRange { .. }), "{err}");
}

#[test]
fn unknown_builtin_is_an_error() {
    assert!(builtin("no_such_model").is_err());
}
