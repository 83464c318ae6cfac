//! Interpreter fidelity against independent hand-written oracles.
//!
//! The oracles reimplement the learning-firewall and NAT semantics directly
//! as plain Rust over explicit state, with no shared code with the DSL
//! interpreter. Exhaustive comparison over a 2-address, 2-port universe
//! with histories up to length 3: forward/drop decision, rewritten fields,
//! and full register contents must match exactly.

use std::collections::{BTreeMap, BTreeSet};

use mboxverify_core::mbx::{
    builtin, step, ConfigValue, MbxState, MiddleboxInstance, OracleAnswer, OracleBinding,
    OracleEnv, OracleQuery, RegValue, StepError,
};
use mboxverify_core::net::{flow_of, Address, ContentId, NodeId, Packet, Port, Universe, Value};

fn universe() -> Universe {
    Universe::new(
        vec!["a0".into(), "a1".into(), "n".into()],
        vec!["q0".into(), "q1".into()],
        vec!["c0".into()],
    )
    .unwrap()
}

/// All host-shaped packets over two addresses and two ports. The NAT
/// address is a routing constant, not an endpoint, matching a 2-address
/// endpoint universe.
fn packet_pool(u: &Universe) -> Vec<Packet> {
    let mut out = Vec::new();
    let addrs = [u.address("a0").unwrap(), u.address("a1").unwrap(), u.address("n").unwrap()];
    let ports = [u.port("q0").unwrap(), u.port("q1").unwrap()];
    for &src in &addrs[..2] {
        for &dst in &addrs {
            if src == dst {
                continue;
            }
            for &sp in &ports {
                for &dp in &ports {
                    out.push(Packet {
                        src,
                        dst,
                        src_port: sp,
                        dst_port: dp,
                        origin: src,
                        content: u.content("c0").unwrap(),
                    });
                }
            }
        }
    }
    out
}

fn histories(pool: &[Packet], max_len: usize) -> Vec<Vec<Packet>> {
    let mut out: Vec<Vec<Packet>> = vec![vec![]];
    let mut frontier: Vec<Vec<Packet>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for h in &frontier {
            for p in pool {
                let mut h2 = h.clone();
                h2.push(*p);
                next.push(h2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

// ---------------------------------------------------------------------------
// Hand oracle: learning firewall (allow-list with hole punching)

#[derive(Default, Clone, PartialEq, Debug)]
struct HandFirewall {
    established: BTreeSet<(
        (Address, Port),
        (Address, Port),
    )>,
}

fn hand_flow(p: &Packet) -> ((Address, Port), (Address, Port)) {
    let a = (p.src, p.src_port);
    let b = (p.dst, p.dst_port);
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl HandFirewall {
    /// Returns the forwarded packets (empty = dropped).
    fn process(&mut self, acl: &BTreeSet<(Address, Address)>, p: &Packet) -> Vec<Packet> {
        if self.established.contains(&hand_flow(p)) {
            return vec![*p];
        }
        if acl.contains(&(p.src, p.dst)) {
            self.established.insert(hand_flow(p));
            return vec![*p];
        }
        vec![]
    }
}

#[test]
fn firewall_matches_hand_oracle_exhaustively() {
    let u = universe();
    let pool = packet_pool(&u);
    let a0 = u.address("a0").unwrap();
    let a1 = u.address("a1").unwrap();
    // One-directional allow: a0 -> a1 only.
    let acl: BTreeSet<(Address, Address)> = [(a0, a1)].into_iter().collect();

    let model = builtin("learning_firewall").unwrap();
    let inst = MiddleboxInstance {
        id: NodeId(0),
        name: "f".into(),
        model,
        config: [(
            "acl".to_string(),
            ConfigValue::Set(
                acl.iter()
                    .map(|(s, d)| vec![Value::Addr(*s), Value::Addr(*d)])
                    .collect(),
            ),
        )]
        .into_iter()
        .collect(),
    };

    let env = OracleEnv::new();
    let mut cases = 0usize;
    for h in histories(&pool, 3) {
        // Run the history through both.
        let mut hand = HandFirewall::default();
        let mut st = MbxState::initial(&inst.model);
        for pkt in &h {
            let expected = hand.process(&acl, pkt);
            let got = step(&inst, &st, pkt, &env, &u).unwrap();
            assert_eq!(got.forwarded, expected, "history {h:?} packet {pkt:?}");
            st = got.state;
        }
        // Register contents must agree with the oracle's state.
        let RegValue::Set(established) = &st.registers[0] else { panic!() };
        let got_flows: BTreeSet<_> = established
            .iter()
            .map(|t| t[0].as_flow().unwrap())
            .map(|f| (f.lo, f.hi))
            .collect();
        let want_flows: BTreeSet<_> = hand.established.iter().cloned().collect();
        assert_eq!(got_flows, want_flows, "register contents for history {h:?}");
        cases += 1;
    }
    assert!(cases > 1000, "exhaustive sweep must cover all histories, got {cases}");
}

// ---------------------------------------------------------------------------
// Hand oracle: NAT (Listing-2 semantics with explicit failure)

#[derive(Default, Clone, PartialEq, Debug)]
struct HandNat {
    active: BTreeMap<((Address, Port), (Address, Port)), Port>,
    reverse: BTreeMap<Port, (Address, Port)>,
}

impl HandNat {
    /// remap: the oracle decision for fresh flows (queried with the packet
    /// value after the source address rewrite, as the listing does).
    fn process(
        &mut self,
        nat_address: Address,
        p: &Packet,
        remap: &dyn Fn(Packet) -> Port,
    ) -> Option<Vec<Packet>> {
        // Rule 1: fail(self) is handled by the caller (never failed here).
        // Rule 2: inbound to the NAT address.
        if p.dst == nat_address {
            let (addr, port) = *self.reverse.get(&p.dst_port)?;
            let mut out = *p;
            out.dst = addr;
            out.dst_port = port;
            return Some(vec![out]);
        }
        // Rule 3: established outbound flow.
        if let Some(assigned) = self.active.get(&hand_flow(p)) {
            let mut out = *p;
            out.src = nat_address;
            out.src_port = *assigned;
            return Some(vec![out]);
        }
        // Rule 4: fresh outbound flow.
        let address = p.src;
        let port = p.src_port;
        let f = hand_flow(p);
        let mut out = *p;
        out.src = nat_address;
        out.src_port = remap(out);
        self.active.insert(f, out.src_port);
        self.reverse.insert(out.src_port, (address, port));
        Some(vec![out])
    }
}

#[test]
fn nat_matches_hand_oracle_exhaustively() {
    let u = universe();
    let pool = packet_pool(&u);
    let nat_address = u.address("n").unwrap();

    let model = builtin("nat").unwrap();
    let inst = MiddleboxInstance {
        id: NodeId(0),
        name: "n1".into(),
        model,
        config: [(
            "nat_address".to_string(),
            ConfigValue::Scalar(Value::Addr(nat_address)),
        )]
        .into_iter()
        .collect(),
    };

    // Deterministic remap decision shared by both sides, keyed by the
    // queried packet value; enumerating a few distinct functions covers
    // collisions and the fresh port.
    let ports: Vec<Port> = u.ports().collect();
    let remap_fns: Vec<Box<dyn Fn(Packet) -> Port>> = vec![
        Box::new({
            let ports = ports.clone();
            move |p: Packet| ports[(p.dst_port.0 as usize) % ports.len()]
        }),
        Box::new({
            let ports = ports.clone();
            move |_p: Packet| ports[0]
        }),
        Box::new({
            let ports = ports.clone();
            move |p: Packet| ports[(p.src_port.0 as usize + p.dst.0 as usize) % ports.len()]
        }),
    ];

    let mut checked = 0usize;
    for remap in &remap_fns {
        for h in histories(&pool, 3) {
            let mut hand = HandNat::default();
            let mut st = MbxState::initial(&inst.model);
            let mut env = OracleEnv::new();
            for pkt in &h {
                let expected = hand.process(nat_address, pkt, remap);
                // Drive the interpreter, answering oracle queries with the
                // same remap function.
                let got = loop {
                    match step(&inst, &st, pkt, &env, &u) {
                        Ok(out) => break Some(out),
                        Err(StepError::NeedOracle { query, .. }) => {
                            let OracleQuery::Fn { args, .. } = &query else { panic!() };
                            let queried = packet_of_value(&args[0]);
                            env.bind(&OracleBinding {
                                query: query.clone(),
                                answer: OracleAnswer::Value(Value::Port(remap(queried))),
                            });
                        }
                        Err(StepError::MapLookupMiss { .. }) => break None,
                        Err(e) => panic!("unexpected step error: {e}"),
                    }
                };
                match (expected, got) {
                    (None, None) => {}
                    (Some(want), Some(out)) => {
                        assert_eq!(out.forwarded, want, "history {h:?} packet {pkt:?}");
                        st = out.state;
                    }
                    (want, got) => panic!(
                        "divergence on {pkt:?} after {h:?}: hand={want:?} interp={:?}",
                        got.map(|g| g.forwarded)
                    ),
                }
            }
            // Register contents: active and reverse maps must agree.
            let RegValue::Map(active) = &st.registers[0] else { panic!() };
            let RegValue::Map(reverse) = &st.registers[1] else { panic!() };
            let got_active: BTreeMap<_, _> = active
                .iter()
                .map(|(k, v)| {
                    let f = k[0].as_flow().unwrap();
                    (((f.lo), (f.hi)), v[0].as_port().unwrap())
                })
                .collect();
            assert_eq!(got_active, hand.active, "active map for history {h:?}");
            let got_reverse: BTreeMap<_, _> = reverse
                .iter()
                .map(|(k, v)| {
                    (k[0].as_port().unwrap(), (v[0].as_addr().unwrap(), v[1].as_port().unwrap()))
                })
                .collect();
            assert_eq!(got_reverse, hand.reverse, "reverse map for history {h:?}");
            checked += 1;
        }
    }
    assert!(checked > 3000, "exhaustive sweep must cover all histories, got {checked}");
}

fn packet_of_value(v: &Value) -> Packet {
    let Value::Tuple(items) = v else { panic!("oracle argument is a packet tuple") };
    Packet {
        src: items[0].as_addr().unwrap(),
        dst: items[1].as_addr().unwrap(),
        src_port: items[2].as_port().unwrap(),
        dst_port: items[3].as_port().unwrap(),
        origin: items[4].as_addr().unwrap(),
        content: match items[5] {
            Value::Content(c) => c,
            _ => ContentId(0),
        },
    }
}

/// NAT consistency: after any history, reverse[active[f]] recovers f's
/// internal endpoint.
#[test]
fn nat_reverse_inverts_active() {
    let u = universe();
    let pool = packet_pool(&u);
    let nat_address = u.address("n").unwrap();
    let model = builtin("nat").unwrap();
    let inst = MiddleboxInstance {
        id: NodeId(0),
        name: "n1".into(),
        model,
        config: [(
            "nat_address".to_string(),
            ConfigValue::Scalar(Value::Addr(nat_address)),
        )]
        .into_iter()
        .collect(),
    };
    let ports: Vec<Port> = u.ports().collect();
    for h in histories(&pool, 3) {
        let mut st = MbxState::initial(&inst.model);
        let mut env = OracleEnv::new();
        let mut last_writer: BTreeMap<Port, Vec<Value>> = BTreeMap::new();
        for pkt in &h {
            // Only fresh outbound flows (rule 4) write the reverse map.
            let fresh = {
                let RegValue::Map(active) = &st.registers[0] else { panic!() };
                pkt.dst != nat_address
                    && !active.contains_key(&vec![Value::Flow(flow_of(pkt))])
            };
            loop {
                match step(&inst, &st, pkt, &env, &u) {
                    Ok(out) => {
                        if let Some(fwd) = out.forwarded.first() {
                            if fresh && fwd.src == nat_address {
                                last_writer.insert(
                                    fwd.src_port,
                                    vec![Value::Addr(pkt.src), Value::Port(pkt.src_port)],
                                );
                            }
                        }
                        st = out.state;
                        break;
                    }
                    Err(StepError::NeedOracle { query, .. }) => {
                        let OracleQuery::Fn { args, .. } = &query else { panic!() };
                        let qp = packet_of_value(&args[0]);
                        env.bind(&OracleBinding {
                            query: query.clone(),
                            answer: OracleAnswer::Value(Value::Port(
                                ports[(qp.dst_port.0 as usize) % ports.len()],
                            )),
                        });
                    }
                    Err(StepError::MapLookupMiss { .. }) => break,
                    Err(e) => panic!("{e}"),
                }
            }
        }
        let RegValue::Map(active) = &st.registers[0] else { panic!() };
        let RegValue::Map(reverse) = &st.registers[1] else { panic!() };
        for (_flow, port) in active {
            // Every assigned port has a reverse entry; when ports collide
            // the most recent flow owns the mapping.
            let port = port[0].as_port().unwrap();
            let entry = reverse.get(&vec![Value::Port(port)]);
            assert!(entry.is_some(), "assigned port without reverse entry");
            assert_eq!(entry.unwrap(), &last_writer[&port]);
        }
    }
}
