//! Discrete-timestep traces and their well-formedness validator.
//!
//! One event per timestep. Delivery and processing are fused: a `Recv` at a
//! middlebox runs the model and the forwarded packets appear in the step's
//! `emitted` list; a `Recv` at the omega pseudo-node applies the transfer
//! function the same way. `HostEmit` both creates a packet and places it on
//! the host's link toward omega. Standalone `Send` events are accepted for
//! hand-built traces: they move an already-known packet onto a link.
//!
//! The validator checks structural well-formedness: send/receive matching
//! with per-link FIFO order, universe-valid host emissions, timestep
//! numbering, failure alternation, and omega routing consistency. Whether a
//! middlebox's recorded outputs are faithful to its model is `replay`'s job.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::mbx::{OracleAnswer, OracleBinding, OracleQuery, RegValue};
use crate::net::{FailureScenario, Link, NodeId, NodeKind, Packet, Value};
use crate::netfunc::{compute_transfer, TransferFunction};
use crate::network::Network;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    HostEmit { host: NodeId, packet: Packet },
    Send { from: NodeId, to: NodeId, packet: Packet },
    Recv { at: NodeId, from: NodeId, packet: Packet },
    Fail { node: NodeId },
    Recover { node: NodeId },
}

impl Event {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Event::HostEmit { .. } => "host_emit",
            Event::Send { .. } => "send",
            Event::Recv { .. } => "recv",
            Event::Fail { .. } => "fail",
            Event::Recover { .. } => "recover",
        }
    }
}

/// Register valuation of the acting instance after a step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterSnapshot {
    pub node: NodeId,
    pub failed: bool,
    pub registers: Vec<(String, RegValue)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub time: u64,
    pub event: Event,
    /// Packets placed on links as a consequence of this event.
    pub emitted: Vec<(Link, Packet)>,
    /// Oracle consultations made while processing this event.
    pub oracle: Vec<OracleBinding>,
    /// Register valuation of the acting middlebox after the event.
    pub registers: Option<RegisterSnapshot>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// A prefix of this trace (first `n` steps).
    pub fn prefix(&self, n: usize) -> Trace {
        Trace { steps: self.steps.iter().take(n).cloned().collect() }
    }
}

fn universe_valid(net: &Network, p: &Packet) -> bool {
    let u = &net.universe;
    u.contains_address(p.src)
        && u.contains_address(p.dst)
        && u.contains_port(p.src_port)
        && u.contains_port(p.dst_port)
        && u.contains_address(p.origin)
        && u.contains_content(p.content)
}

fn declared_only(net: &Network, p: &Packet) -> bool {
    let u = &net.universe;
    p.src != u.fresh_address()
        && p.dst != u.fresh_address()
        && p.origin != u.fresh_address()
        && p.src_port != u.fresh_port()
        && p.dst_port != u.fresh_port()
        && p.content != u.fresh_content()
}

/// Checks trace well-formedness and returns human-readable violation
/// descriptions; the empty list means the trace is well-formed. Violations
/// are data, not errors.
pub fn validate_trace(trace: &Trace, net: &Network) -> Vec<String> {
    let mut violations = Vec::new();
    let mut queues: BTreeMap<Link, VecDeque<Packet>> = BTreeMap::new();
    let mut failed: BTreeSet<NodeId> = BTreeSet::new();
    let mut tfs: BTreeMap<BTreeSet<NodeId>, Option<TransferFunction>> = BTreeMap::new();
    let omega = net.omega();

    for (i, step) in trace.steps.iter().enumerate() {
        let t = i as u64;
        if step.time != t {
            violations.push(format!("timestep {} out of order (expected {t})", step.time));
        }

        // Transfer function currently in effect.
        let tf = tfs
            .entry(failed.clone())
            .or_insert_with(|| {
                compute_transfer(net, &FailureScenario { failed: failed.clone() }).ok()
            })
            .clone();

        match &step.event {
            Event::HostEmit { host, packet } => {
                if !matches!(net.kind(*host), NodeKind::Host) {
                    violations.push(format!("host emit by non-host @{t}"));
                }
                if !universe_valid(net, packet) || !declared_only(net, packet) {
                    violations.push(format!("host emit outside declared universes @{t}"));
                }
                queues.entry(Link { from: *host, to: omega }).or_default().push_back(*packet);
            }
            Event::Send { from, to, packet } => {
                queues.entry(Link { from: *from, to: *to }).or_default().push_back(*packet);
            }
            Event::Recv { at, from, packet } => {
                let link = Link { from: *from, to: *at };
                let queue = queues.entry(link).or_default();
                match queue.front() {
                    None => violations.push(format!("recv without prior send @{t}")),
                    Some(head) if head == packet => {
                        queue.pop_front();
                    }
                    Some(_) => {
                        if let Some(pos) = queue.iter().position(|q| q == packet) {
                            violations.push(format!(
                                "fifo violation on link {}->{} @{t}",
                                net.node_name(*from),
                                net.node_name(*at)
                            ));
                            queue.remove(pos);
                        } else {
                            violations.push(format!("recv without prior send @{t}"));
                        }
                    }
                }
                match net.kind(*at) {
                    NodeKind::Host => {
                        if !step.emitted.is_empty() {
                            violations.push(format!("host forwarded a packet @{t}"));
                        }
                    }
                    NodeKind::OmegaSwitch => {
                        // Omega routing must match the transfer function.
                        let expect = tf.as_ref().and_then(|tf| tf.next(*from, packet.dst));
                        let expected: Vec<(Link, Packet)> = expect
                            .map(|n| vec![(Link { from: omega, to: n }, *packet)])
                            .unwrap_or_default();
                        if step.emitted != expected {
                            violations.push(format!("omega routing mismatch @{t}"));
                        }
                    }
                    NodeKind::MiddleboxInstance => {
                        for (link, _) in &step.emitted {
                            if link.from != *at {
                                violations
                                    .push(format!("forwarded packet from wrong node @{t}"));
                            }
                        }
                    }
                }
                for (link, p) in &step.emitted {
                    queues.entry(*link).or_default().push_back(*p);
                }
            }
            Event::Fail { node } => {
                if net.middlebox(*node).is_none() {
                    violations.push(format!("failure of non-middlebox @{t}"));
                } else if !failed.insert(*node) {
                    violations.push(format!("fail of already-failed node @{t}"));
                }
            }
            Event::Recover { node } => {
                if !failed.remove(node) {
                    violations.push(format!("recover of non-failed node @{t}"));
                }
            }
        }
    }

    violations
}

// ---------------------------------------------------------------------------
// JSON projection (names instead of ids, for files and tooling)

fn value_json(v: &Value, net: &Network) -> serde_json::Value {
    use serde_json::json;
    let u = &net.universe;
    match v {
        Value::Addr(a) => json!({ "addr": u.address_name(*a) }),
        Value::Port(p) => json!({ "port": u.port_name(*p) }),
        Value::Content(c) => json!({ "content": u.content_name(*c) }),
        Value::Flow(f) => json!({ "flow": [
            [u.address_name(f.lo.0), u.port_name(f.lo.1)],
            [u.address_name(f.hi.0), u.port_name(f.hi.1)],
        ] }),
        Value::Tuple(items) => {
            json!({ "tuple": items.iter().map(|i| value_json(i, net)).collect::<Vec<_>>() })
        }
    }
}

fn value_from_json(v: &serde_json::Value, net: &Network) -> Option<Value> {
    let u = &net.universe;
    let obj = v.as_object()?;
    if let Some(a) = obj.get("addr") {
        return Some(Value::Addr(u.address(a.as_str()?).ok()?));
    }
    if let Some(p) = obj.get("port") {
        return Some(Value::Port(u.port(p.as_str()?).ok()?));
    }
    if let Some(c) = obj.get("content") {
        return Some(Value::Content(u.content(c.as_str()?).ok()?));
    }
    if let Some(f) = obj.get("flow") {
        let ends = f.as_array()?;
        let parse = |e: &serde_json::Value| -> Option<(crate::net::Address, crate::net::Port)> {
            let pair = e.as_array()?;
            Some((u.address(pair[0].as_str()?).ok()?, u.port(pair[1].as_str()?).ok()?))
        };
        return Some(Value::Flow(crate::net::FlowId {
            lo: parse(&ends[0])?,
            hi: parse(&ends[1])?,
        }));
    }
    if let Some(t) = obj.get("tuple") {
        let items = t
            .as_array()?
            .iter()
            .map(|i| value_from_json(i, net))
            .collect::<Option<Vec<_>>>()?;
        return Some(Value::Tuple(items));
    }
    None
}

fn packet_json(p: &Packet, net: &Network) -> serde_json::Value {
    let u = &net.universe;
    serde_json::json!({
        "src": u.address_name(p.src),
        "dst": u.address_name(p.dst),
        "src_port": u.port_name(p.src_port),
        "dst_port": u.port_name(p.dst_port),
        "origin": u.address_name(p.origin),
        "content": u.content_name(p.content),
    })
}

fn packet_from_json(v: &serde_json::Value, net: &Network) -> Option<Packet> {
    let u = &net.universe;
    Some(Packet {
        src: u.address(v.get("src")?.as_str()?).ok()?,
        dst: u.address(v.get("dst")?.as_str()?).ok()?,
        src_port: u.port(v.get("src_port")?.as_str()?).ok()?,
        dst_port: u.port(v.get("dst_port")?.as_str()?).ok()?,
        origin: u.address(v.get("origin")?.as_str()?).ok()?,
        content: u.content(v.get("content")?.as_str()?).ok()?,
    })
}

fn binding_json(b: &OracleBinding, net: &Network) -> serde_json::Value {
    use serde_json::json;
    match (&b.query, &b.answer) {
        (OracleQuery::Fn { instance, name, args }, OracleAnswer::Value(v)) => json!({
            "kind": "fn",
            "instance": net.node_name(*instance),
            "name": name,
            "args": args.iter().map(|a| value_json(a, net)).collect::<Vec<_>>(),
            "result": value_json(v, net),
        }),
        (OracleQuery::Class { class, flow }, OracleAnswer::Bool(v)) => json!({
            "kind": "class",
            "class": class,
            "flow": value_json(&Value::Flow(*flow), net),
            "value": v,
        }),
        _ => unreachable!("mismatched binding"),
    }
}

fn binding_from_json(v: &serde_json::Value, net: &Network) -> Option<OracleBinding> {
    match v.get("kind")?.as_str()? {
        "fn" => {
            let instance = net.node_id(v.get("instance")?.as_str()?)?;
            let name = v.get("name")?.as_str()?.to_string();
            let args = v
                .get("args")?
                .as_array()?
                .iter()
                .map(|a| value_from_json(a, net))
                .collect::<Option<Vec<_>>>()?;
            let result = value_from_json(v.get("result")?, net)?;
            Some(OracleBinding {
                query: OracleQuery::Fn { instance, name, args },
                answer: OracleAnswer::Value(result),
            })
        }
        "class" => {
            let class = v.get("class")?.as_str()?.to_string();
            let flow = value_from_json(v.get("flow")?, net)?.as_flow()?;
            Some(OracleBinding {
                query: OracleQuery::Class { class, flow },
                answer: OracleAnswer::Bool(v.get("value")?.as_bool()?),
            })
        }
        _ => None,
    }
}

impl Trace {
    /// Serializes the trace with node and value names resolved.
    pub fn to_json(&self, net: &Network) -> serde_json::Value {
        use serde_json::json;
        let steps: Vec<serde_json::Value> = self
            .steps
            .iter()
            .map(|s| {
                let event = match &s.event {
                    Event::HostEmit { host, packet } => json!({
                        "kind": "host_emit",
                        "host": net.node_name(*host),
                        "packet": packet_json(packet, net),
                    }),
                    Event::Send { from, to, packet } => json!({
                        "kind": "send",
                        "from": net.node_name(*from),
                        "to": net.node_name(*to),
                        "packet": packet_json(packet, net),
                    }),
                    Event::Recv { at, from, packet } => json!({
                        "kind": "recv",
                        "at": net.node_name(*at),
                        "from": net.node_name(*from),
                        "packet": packet_json(packet, net),
                    }),
                    Event::Fail { node } => {
                        json!({ "kind": "fail", "node": net.node_name(*node) })
                    }
                    Event::Recover { node } => {
                        json!({ "kind": "recover", "node": net.node_name(*node) })
                    }
                };
                let mut obj = serde_json::Map::new();
                obj.insert("t".into(), json!(s.time));
                obj.insert("event".into(), event);
                obj.insert(
                    "emitted".into(),
                    json!(s
                        .emitted
                        .iter()
                        .map(|(l, p)| json!({
                            "from": net.node_name(l.from),
                            "to": net.node_name(l.to),
                            "packet": packet_json(p, net),
                        }))
                        .collect::<Vec<_>>()),
                );
                obj.insert(
                    "oracle".into(),
                    json!(s.oracle.iter().map(|b| binding_json(b, net)).collect::<Vec<_>>()),
                );
                if let Some(r) = &s.registers {
                    obj.insert(
                        "registers".into(),
                        json!({
                            "node": net.node_name(r.node),
                            "failed": r.failed,
                            "values": r
                                .registers
                                .iter()
                                .map(|(name, rv)| json!({
                                    "name": name,
                                    "contents": reg_json(rv, net),
                                }))
                                .collect::<Vec<_>>(),
                        }),
                    );
                }
                serde_json::Value::Object(obj)
            })
            .collect();
        json!({ "steps": steps })
    }

    /// Parses a trace back from its JSON projection.
    pub fn from_json(v: &serde_json::Value, net: &Network) -> Option<Trace> {
        let mut steps = Vec::new();
        for s in v.get("steps")?.as_array()? {
            let time = s.get("t")?.as_u64()?;
            let e = s.get("event")?;
            let event = match e.get("kind")?.as_str()? {
                "host_emit" => Event::HostEmit {
                    host: net.node_id(e.get("host")?.as_str()?)?,
                    packet: packet_from_json(e.get("packet")?, net)?,
                },
                "send" => Event::Send {
                    from: net.node_id(e.get("from")?.as_str()?)?,
                    to: net.node_id(e.get("to")?.as_str()?)?,
                    packet: packet_from_json(e.get("packet")?, net)?,
                },
                "recv" => Event::Recv {
                    at: net.node_id(e.get("at")?.as_str()?)?,
                    from: net.node_id(e.get("from")?.as_str()?)?,
                    packet: packet_from_json(e.get("packet")?, net)?,
                },
                "fail" => Event::Fail { node: net.node_id(e.get("node")?.as_str()?)? },
                "recover" => Event::Recover { node: net.node_id(e.get("node")?.as_str()?)? },
                _ => return None,
            };
            let mut emitted = Vec::new();
            for em in s.get("emitted")?.as_array()? {
                emitted.push((
                    Link {
                        from: net.node_id(em.get("from")?.as_str()?)?,
                        to: net.node_id(em.get("to")?.as_str()?)?,
                    },
                    packet_from_json(em.get("packet")?, net)?,
                ));
            }
            let mut oracle = Vec::new();
            for b in s.get("oracle")?.as_array()? {
                oracle.push(binding_from_json(b, net)?);
            }
            let registers = match s.get("registers") {
                None => None,
                Some(r) => {
                    let node = net.node_id(r.get("node")?.as_str()?)?;
                    let failed = r.get("failed")?.as_bool()?;
                    let mut regs = Vec::new();
                    for rv in r.get("values")?.as_array()? {
                        regs.push((
                            rv.get("name")?.as_str()?.to_string(),
                            reg_from_json(rv.get("contents")?, net)?,
                        ));
                    }
                    Some(RegisterSnapshot { node, failed, registers: regs })
                }
            };
            steps.push(TraceStep { time, event, emitted, oracle, registers });
        }
        Some(Trace { steps })
    }
}

fn reg_json(rv: &RegValue, net: &Network) -> serde_json::Value {
    use serde_json::json;
    match rv {
        RegValue::Set(s) => json!({
            "set": s
                .iter()
                .map(|t| t.iter().map(|v| value_json(v, net)).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        }),
        RegValue::Map(m) => json!({
            "map": m
                .iter()
                .map(|(k, v)| json!({
                    "key": k.iter().map(|x| value_json(x, net)).collect::<Vec<_>>(),
                    "value": v.iter().map(|x| value_json(x, net)).collect::<Vec<_>>(),
                }))
                .collect::<Vec<_>>(),
        }),
    }
}

fn reg_from_json(v: &serde_json::Value, net: &Network) -> Option<RegValue> {
    if let Some(s) = v.get("set") {
        let mut out = BTreeSet::new();
        for tuple in s.as_array()? {
            out.insert(
                tuple
                    .as_array()?
                    .iter()
                    .map(|x| value_from_json(x, net))
                    .collect::<Option<Vec<_>>>()?,
            );
        }
        return Some(RegValue::Set(out));
    }
    if let Some(m) = v.get("map") {
        let mut out = BTreeMap::new();
        for entry in m.as_array()? {
            let k = entry
                .get("key")?
                .as_array()?
                .iter()
                .map(|x| value_from_json(x, net))
                .collect::<Option<Vec<_>>>()?;
            let val = entry
                .get("value")?
                .as_array()?
                .iter()
                .map(|x| value_from_json(x, net))
                .collect::<Option<Vec<_>>>()?;
            out.insert(k, val);
        }
        return Some(RegValue::Map(out));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Universe;
    use crate::network::NetworkBuilder;

    fn tiny_net() -> Network {
        let u = Universe::new(
            vec!["a".into(), "b".into()],
            vec!["p1".into()],
            vec!["c".into()],
        )
        .unwrap();
        NetworkBuilder::new(u)
            .host("A", "a")
            .host("B", "b")
            .switch("s1")
            .link("A", "s1")
            .link("B", "s1")
            .route("s1", "a", "A")
            .route("s1", "b", "B")
            .build()
            .unwrap()
    }

    fn pkt(net: &Network) -> Packet {
        let u = &net.universe;
        Packet {
            src: u.address("a").unwrap(),
            dst: u.address("b").unwrap(),
            src_port: u.port("p1").unwrap(),
            dst_port: u.port("p1").unwrap(),
            origin: u.address("a").unwrap(),
            content: u.content("c").unwrap(),
        }
    }

    #[test]
    fn empty_trace_is_valid() {
        let net = tiny_net();
        assert!(validate_trace(&Trace::default(), &net).is_empty());
    }

    #[test]
    fn recv_without_send_is_flagged() {
        let net = tiny_net();
        let a = net.node_id("A").unwrap();
        let trace = Trace {
            steps: vec![TraceStep {
                time: 0,
                event: Event::Recv { at: a, from: net.omega(), packet: pkt(&net) },
                emitted: vec![],
                oracle: vec![],
                registers: None,
            }],
        };
        let v = validate_trace(&trace, &net);
        assert_eq!(v, vec!["recv without prior send @0".to_string()]);
    }

    #[test]
    fn fifo_order_is_enforced() {
        let net = tiny_net();
        let a = net.node_id("A").unwrap();
        let omega = net.omega();
        let p1 = pkt(&net);
        let mut p2 = p1;
        p2.content = net.universe.content("c").unwrap();
        p2.origin = net.universe.address("b").unwrap();
        let link = Link { from: a, to: omega };
        let trace = Trace {
            steps: vec![
                TraceStep {
                    time: 0,
                    event: Event::Send { from: a, to: omega, packet: p1 },
                    emitted: vec![(link, p1)],
                    oracle: vec![],
                    registers: None,
                },
                TraceStep {
                    time: 1,
                    event: Event::Send { from: a, to: omega, packet: p2 },
                    emitted: vec![(link, p2)],
                    oracle: vec![],
                    registers: None,
                },
                TraceStep {
                    time: 2,
                    event: Event::Recv { at: omega, from: a, packet: p2 },
                    emitted: vec![],
                    oracle: vec![],
                    registers: None,
                },
            ],
        };
        let v = validate_trace(&trace, &net);
        assert!(v.iter().any(|m| m.contains("fifo violation")), "{v:?}");
    }

    #[test]
    fn host_emit_must_stay_in_declared_universe() {
        let net = tiny_net();
        let a = net.node_id("A").unwrap();
        let mut p = pkt(&net);
        p.dst = net.universe.fresh_address();
        let trace = Trace {
            steps: vec![TraceStep {
                time: 0,
                event: Event::HostEmit { host: a, packet: p },
                emitted: vec![],
                oracle: vec![],
                registers: None,
            }],
        };
        let v = validate_trace(&trace, &net);
        assert!(v.iter().any(|m| m.contains("declared universes")), "{v:?}");
    }

    #[test]
    fn fail_recover_alternate() {
        let net = tiny_net();
        let a = net.node_id("A").unwrap();
        let trace = Trace {
            steps: vec![TraceStep {
                time: 0,
                event: Event::Fail { node: a },
                emitted: vec![],
                oracle: vec![],
                registers: None,
            }],
        };
        // A is a host, not a middlebox.
        let v = validate_trace(&trace, &net);
        assert!(v.iter().any(|m| m.contains("non-middlebox")), "{v:?}");
    }
}

/// Translates a trace between two networks that share node names and a
/// universe but assign ids differently (a slice restriction and its source).
/// Returns `None` if a referenced node is missing from the target network.
pub fn remap_trace(trace: &Trace, from: &Network, to: &Network) -> Option<Trace> {
    let node = |id: NodeId| -> Option<NodeId> { to.node_id(from.node_name(id)) };
    let mut steps = Vec::with_capacity(trace.steps.len());
    for s in &trace.steps {
        let event = match &s.event {
            Event::HostEmit { host, packet } => {
                Event::HostEmit { host: node(*host)?, packet: *packet }
            }
            Event::Send { from: f, to: t, packet } => {
                Event::Send { from: node(*f)?, to: node(*t)?, packet: *packet }
            }
            Event::Recv { at, from: f, packet } => {
                Event::Recv { at: node(*at)?, from: node(*f)?, packet: *packet }
            }
            Event::Fail { node: n } => Event::Fail { node: node(*n)? },
            Event::Recover { node: n } => Event::Recover { node: node(*n)? },
        };
        let emitted = s
            .emitted
            .iter()
            .map(|(l, p)| {
                Some((Link { from: node(l.from)?, to: node(l.to)? }, *p))
            })
            .collect::<Option<Vec<_>>>()?;
        let oracle = s
            .oracle
            .iter()
            .map(|b| {
                Some(OracleBinding {
                    query: match &b.query {
                        OracleQuery::Fn { instance, name, args } => OracleQuery::Fn {
                            instance: node(*instance)?,
                            name: name.clone(),
                            args: args.clone(),
                        },
                        OracleQuery::Class { class, flow } => {
                            OracleQuery::Class { class: class.clone(), flow: *flow }
                        }
                    },
                    answer: b.answer.clone(),
                })
            })
            .collect::<Option<Vec<_>>>()?;
        let registers = match &s.registers {
            None => None,
            Some(r) => Some(RegisterSnapshot {
                node: node(r.node)?,
                failed: r.failed,
                registers: r.registers.clone(),
            }),
        };
        steps.push(TraceStep { time: s.time, event, emitted, oracle, registers });
    }
    Some(Trace { steps })
}
