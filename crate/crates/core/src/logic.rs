//! First-order temporal formula skeletons shared by the axiom generators.
//!
//! Formulas are produced by `mbx::axioms` (per-instance middlebox axioms)
//! and `netfunc::omega_axioms` (pseudo-node routing axioms). They serve two
//! purposes: a stable text rendering for inspection and golden tests, and
//! direct evaluation over concrete traces, which is how the interpreter and
//! the axioms are checked against each other.

use std::fmt;

use crate::mbx::{MbxState, RegValue};
use crate::net::{flow_of, NodeId, Packet, Value};
use crate::network::Network;
use crate::trace::Trace;

/// A term over a packet variable and constants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    /// A field of a packet variable, e.g. `src(p)`.
    PktField { var: String, field: crate::mbx::Field },
    /// `flow(p)`.
    FlowOf { var: String },
    /// A constant value, rendered through the universe tables.
    Const(Value),
    /// A scalar config parameter of an instance.
    Param { instance: NodeId, name: String },
    /// An oracle function applied to terms, e.g. `remapped_port_n(...)`.
    OracleApp { instance: NodeId, name: String, args: Vec<Term> },
    /// Current contents of a map register at the given key.
    RegLookup { instance: NodeId, register: String, key: Box<Term> },
    /// Tuple projection.
    Proj(Box<Term>, usize),
    /// Tuple of terms.
    Tuple(Vec<Term>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Atom {
    /// Node `node` received packet `var` (from anyone).
    Rcv { node: NodeId, var: String },
    /// Node `node` sent packet `var` (to anyone).
    Snd { node: NodeId, var: String },
    /// Node `node` sent packet `var` to node `to`.
    SndTo { node: NodeId, to: NodeId, var: String },
    /// Node is in the failed state.
    Fail { node: NodeId },
    /// Instance register contains the tuple.
    RegContains { instance: NodeId, register: String, args: Vec<Term> },
    /// Instance config set contains the tuple.
    ConfigContains { instance: NodeId, param: String, args: Vec<Term> },
    /// Term equality.
    Eq { lhs: Term, rhs: Term },
    /// Abstract class bit of the packet's flow.
    ClassIs { class: String, var: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    Atom(Atom),
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    /// Holds at all times.
    Always(Box<Formula>),
    /// Held at some time at or before now.
    Past(Box<Formula>),
    /// Universal quantification over packet variables.
    ForallPkts { vars: Vec<String>, body: Box<Formula> },
    /// Existential quantification over packet variables.
    ExistsPkt { var: String, body: Box<Formula> },
}

impl Formula {
    pub fn implies(lhs: Formula, rhs: Formula) -> Formula {
        Formula::Implies(Box::new(lhs), Box::new(rhs))
    }

    pub fn past(inner: Formula) -> Formula {
        Formula::Past(Box::new(inner))
    }

    pub fn not(inner: Formula) -> Formula {
        Formula::Not(Box::new(inner))
    }

    pub fn and(items: Vec<Formula>) -> Formula {
        match items.len() {
            1 => items.into_iter().next().unwrap(),
            _ => Formula::And(items),
        }
    }

    pub fn or(items: Vec<Formula>) -> Formula {
        match items.len() {
            1 => items.into_iter().next().unwrap(),
            _ => Formula::Or(items),
        }
    }
}

/// A named formula skeleton with instance-specific symbols substituted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormulaTemplate {
    pub name: String,
    pub formula: Formula,
}

// ---------------------------------------------------------------------------
// Rendering

pub struct Render<'a> {
    pub net: &'a Network,
    pub template: &'a FormulaTemplate,
}

impl FormulaTemplate {
    pub fn render(&self, net: &Network) -> String {
        let mut s = String::new();
        render_formula(&mut s, &self.formula, net);
        format!("{}: {}", self.name, s)
    }
}

fn render_term(out: &mut String, t: &Term, net: &Network) {
    match t {
        Term::PktField { var, field } => {
            out.push_str(field.name());
            out.push('(');
            out.push_str(var);
            out.push(')');
        }
        Term::FlowOf { var } => {
            out.push_str("flow(");
            out.push_str(var);
            out.push(')');
        }
        Term::Const(v) => render_value(out, v, net),
        Term::Param { instance, name } => {
            out.push_str(&format!("{}_{}", name, net.node_name(*instance)));
        }
        Term::OracleApp { instance, name, args } => {
            out.push_str(&format!("{}_{}(", name, net.node_name(*instance)));
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_term(out, a, net);
            }
            out.push(')');
        }
        Term::RegLookup { instance, register, key } => {
            out.push_str(&format!("{}_{}[", register, net.node_name(*instance)));
            render_term(out, key, net);
            out.push(']');
        }
        Term::Proj(inner, i) => {
            render_term(out, inner, net);
            out.push_str(&format!(".{i}"));
        }
        Term::Tuple(items) => {
            out.push('(');
            for (i, a) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_term(out, a, net);
            }
            out.push(')');
        }
    }
}

fn render_value(out: &mut String, v: &Value, net: &Network) {
    use fmt::Write;
    match v {
        Value::Addr(a) => out.push_str(net.universe.address_name(*a)),
        Value::Port(p) => out.push_str(net.universe.port_name(*p)),
        Value::Content(c) => out.push_str(net.universe.content_name(*c)),
        Value::Flow(f) => {
            let _ = write!(
                out,
                "{{({}, {}), ({}, {})}}",
                net.universe.address_name(f.lo.0),
                net.universe.port_name(f.lo.1),
                net.universe.address_name(f.hi.0),
                net.universe.port_name(f.hi.1),
            );
        }
        Value::Tuple(items) => {
            out.push('(');
            for (i, it) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_value(out, it, net);
            }
            out.push(')');
        }
    }
}

fn render_atom(out: &mut String, a: &Atom, net: &Network) {
    match a {
        Atom::Rcv { node, var } => {
            out.push_str(&format!("rcv({}, {})", net.node_name(*node), var));
        }
        Atom::Snd { node, var } => {
            out.push_str(&format!("snd({}, {})", net.node_name(*node), var));
        }
        Atom::SndTo { node, to, var } => {
            out.push_str(&format!("snd({}, {}, {})", net.node_name(*node), net.node_name(*to), var));
        }
        Atom::Fail { node } => out.push_str(&format!("fail({})", net.node_name(*node))),
        Atom::RegContains { instance, register, args } => {
            out.push_str(&format!("{}_{}(", register, net.node_name(*instance)));
            for (i, t) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_term(out, t, net);
            }
            out.push(')');
        }
        Atom::ConfigContains { instance, param, args } => {
            out.push_str(&format!("{}_{}(", param, net.node_name(*instance)));
            for (i, t) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_term(out, t, net);
            }
            out.push(')');
        }
        Atom::Eq { lhs, rhs } => {
            render_term(out, lhs, net);
            out.push_str(" = ");
            render_term(out, rhs, net);
        }
        Atom::ClassIs { class, var } => {
            out.push_str(&format!("{class}?({var})"));
        }
    }
}

fn render_formula(out: &mut String, f: &Formula, net: &Network) {
    match f {
        Formula::Atom(a) => render_atom(out, a, net),
        Formula::Not(inner) => {
            out.push('!');
            render_grouped(out, inner, net);
        }
        Formula::And(items) => render_nary(out, items, " && ", net),
        Formula::Or(items) => render_nary(out, items, " || ", net),
        Formula::Implies(lhs, rhs) => {
            render_grouped(out, lhs, net);
            out.push_str(" => ");
            render_grouped(out, rhs, net);
        }
        Formula::Always(inner) => {
            out.push_str("always ");
            render_grouped(out, inner, net);
        }
        Formula::Past(inner) => {
            out.push_str("past");
            out.push('(');
            render_formula(out, inner, net);
            out.push(')');
        }
        Formula::ForallPkts { vars, body } => {
            out.push_str(&format!("forall {}: ", vars.join(", ")));
            render_grouped(out, body, net);
        }
        Formula::ExistsPkt { var, body } => {
            out.push_str(&format!("exists {var}: "));
            render_grouped(out, body, net);
        }
    }
}

fn render_nary(out: &mut String, items: &[Formula], sep: &str, net: &Network) {
    for (i, f) in items.iter().enumerate() {
        if i > 0 {
            out.push_str(sep);
        }
        render_grouped(out, f, net);
    }
}

fn render_grouped(out: &mut String, f: &Formula, net: &Network) {
    let atomic = matches!(f, Formula::Atom(_) | Formula::Past(_) | Formula::Not(_));
    if atomic {
        render_formula(out, f, net);
    } else {
        out.push('(');
        render_formula(out, f, net);
        out.push(')');
    }
}

// ---------------------------------------------------------------------------
// Evaluation over concrete traces

/// Evaluation view of one trace: per-step failed sets, register valuations,
/// logical send/receive events, and oracle bindings.
pub struct TraceView<'a> {
    trace: &'a Trace,
    net: &'a Network,
    /// failed[t] = set of failed nodes after step t.
    failed: Vec<std::collections::BTreeSet<NodeId>>,
    /// states[t] = register valuation per instance after step t.
    states: Vec<std::collections::BTreeMap<NodeId, MbxState>>,
    /// All packets mentioned anywhere in the trace.
    packets: Vec<Packet>,
    /// rcv[t] = (node, packet) delivered at step t.
    rcv: Vec<Option<(NodeId, Packet)>>,
    /// snd[t] = (node, to, packet) emissions at step t.
    snd: Vec<Vec<(NodeId, NodeId, Packet)>>,
}

impl<'a> TraceView<'a> {
    pub fn new(trace: &'a Trace, net: &'a Network) -> Self {
        let mut failed = Vec::with_capacity(trace.steps.len());
        let mut states = Vec::with_capacity(trace.steps.len());
        let mut packets = Vec::new();
        let mut rcv = Vec::with_capacity(trace.steps.len());
        let mut snd = Vec::with_capacity(trace.steps.len());

        let mut cur_failed = std::collections::BTreeSet::new();
        let mut cur_states: std::collections::BTreeMap<NodeId, MbxState> = net
            .middleboxes()
            .map(|m| (m.id, MbxState::initial(&m.model)))
            .collect();

        let note_packet = |packets: &mut Vec<Packet>, p: &Packet| {
            if !packets.contains(p) {
                packets.push(*p);
            }
        };

        for step in &trace.steps {
            use crate::trace::Event;
            let mut step_snd: Vec<(NodeId, NodeId, Packet)> = Vec::new();
            let mut step_rcv = None;
            match &step.event {
                Event::HostEmit { host, packet } => {
                    note_packet(&mut packets, packet);
                    for (link, p) in &step.emitted {
                        step_snd.push((*host, link.to, *p));
                    }
                }
                Event::Send { from, to, packet } => {
                    note_packet(&mut packets, packet);
                    step_snd.push((*from, *to, *packet));
                }
                Event::Recv { at, packet, .. } => {
                    note_packet(&mut packets, packet);
                    step_rcv = Some((*at, *packet));
                    for (link, p) in &step.emitted {
                        note_packet(&mut packets, p);
                        step_snd.push((*at, link.to, *p));
                    }
                }
                Event::Fail { node } => {
                    cur_failed.insert(*node);
                    if let Some(st) = cur_states.get_mut(node) {
                        if let Some(inst) = net.middlebox(*node) {
                            st.clear_registers(&inst.model);
                        }
                        st.failed = true;
                    }
                }
                Event::Recover { node } => {
                    cur_failed.remove(node);
                    if let Some(st) = cur_states.get_mut(node) {
                        st.failed = false;
                    }
                }
            }
            if let Some(snapshot) = &step.registers {
                cur_states.insert(
                    snapshot.node,
                    MbxState {
                        registers: snapshot.registers.iter().map(|(_, v)| v.clone()).collect(),
                        failed: snapshot.failed,
                    },
                );
            }
            failed.push(cur_failed.clone());
            states.push(cur_states.clone());
            rcv.push(step_rcv);
            snd.push(step_snd);
        }

        TraceView { trace, net, failed, states, packets, rcv, snd }
    }

    pub fn len(&self) -> usize {
        self.trace.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.steps.is_empty()
    }

    fn reg_contains(&self, t: usize, instance: NodeId, register: &str, needle: &[Value]) -> bool {
        let Some(inst) = self.net.middlebox(instance) else { return false };
        let Some(idx) = inst.model.register_index(register) else { return false };
        let Some(state) = self.states[t].get(&instance) else { return false };
        match &state.registers[idx] {
            RegValue::Set(s) => s.contains(needle),
            RegValue::Map(m) => {
                // A map "contains" (k ++ v) when m[k] == v; bare keys are
                // tested when the needle has key arity.
                let key_arity = match &inst.model.registers[idx].shape {
                    crate::mbx::RegisterShape::MapOf(k, _) => k.len(),
                    _ => return false,
                };
                if needle.len() == key_arity {
                    m.contains_key(needle)
                } else {
                    let (k, v) = needle.split_at(key_arity);
                    m.get(k).map(|val| val.as_slice() == v).unwrap_or(false)
                }
            }
        }
    }

}

#[derive(Debug, Clone, Default)]
struct Env {
    pkts: std::collections::BTreeMap<String, Packet>,
}

/// Evaluates a closed template over a trace: true iff it holds of the trace.
pub fn eval_template(tpl: &FormulaTemplate, trace: &Trace, net: &Network) -> bool {
    let view = TraceView::new(trace, net);
    if view.is_empty() {
        return true;
    }
    // Top-level formulas are implicitly `always` over every timestep unless
    // they already quantify time; evaluate at the last step which, with the
    // Always wrapper inside templates, covers the whole trace.
    eval_formula(&tpl.formula, &view, &Env::default(), view.len() - 1)
}

fn eval_term(t: &Term, view: &TraceView, env: &Env, now: usize) -> Value {
    match t {
        Term::PktField { var, field } => {
            let p = env.pkts.get(var).copied().unwrap_or_else(|| panic!("unbound var {var}"));
            match field {
                crate::mbx::Field::Src => Value::Addr(p.src),
                crate::mbx::Field::Dst => Value::Addr(p.dst),
                crate::mbx::Field::SrcPort => Value::Port(p.src_port),
                crate::mbx::Field::DstPort => Value::Port(p.dst_port),
                crate::mbx::Field::Origin => Value::Addr(p.origin),
                crate::mbx::Field::Content => Value::Content(p.content),
            }
        }
        Term::FlowOf { var } => {
            let p = env.pkts.get(var).copied().unwrap_or_else(|| panic!("unbound var {var}"));
            Value::Flow(flow_of(&p))
        }
        Term::Const(v) => v.clone(),
        Term::Param { instance, name } => {
            match view.net.middlebox(*instance).and_then(|m| m.config.get(name)) {
                Some(crate::mbx::ConfigValue::Scalar(v)) => v.clone(),
                _ => Value::Tuple(vec![]),
            }
        }
        Term::RegLookup { instance, register, key } => {
            let k = flatten(eval_term(key, view, env, now));
            let lookup = || -> Option<Value> {
                let inst = view.net.middlebox(*instance)?;
                let idx = inst.model.register_index(register)?;
                let state = view.states[now].get(instance)?;
                match &state.registers[idx] {
                    RegValue::Map(m) => {
                        let v = m.get(&k)?;
                        Some(if v.len() == 1 {
                            v[0].clone()
                        } else {
                            Value::Tuple(v.clone())
                        })
                    }
                    RegValue::Set(_) => None,
                }
            };
            lookup().unwrap_or(Value::Tuple(vec![]))
        }
        Term::Proj(inner, i) => match eval_term(inner, view, env, now) {
            Value::Tuple(items) => items.get(*i).cloned().unwrap_or(Value::Tuple(vec![])),
            _ => Value::Tuple(vec![]),
        },
        Term::OracleApp { instance, name, args } => {
            let argv: Vec<Value> = args.iter().map(|a| eval_term(a, view, env, now)).collect();
            // Look the application up in the trace's recorded bindings.
            for step in &view.trace.steps {
                for b in &step.oracle {
                    if let crate::mbx::OracleQuery::Fn { instance: i, name: n, args: a } = &b.query
                    {
                        if i == instance && n == name && *a == argv {
                            if let crate::mbx::OracleAnswer::Value(v) = &b.answer {
                                return v.clone();
                            }
                        }
                    }
                }
            }
            // Unrecorded applications evaluate to a sentinel that compares
            // unequal to every universe value.
            Value::Tuple(vec![])
        }
        Term::Tuple(items) => {
            Value::Tuple(items.iter().map(|i| eval_term(i, view, env, now)).collect())
        }
    }
}

fn flatten(v: Value) -> Vec<Value> {
    match v {
        Value::Tuple(items) => items,
        other => vec![other],
    }
}

fn eval_atom(a: &Atom, view: &TraceView, env: &Env, now: usize) -> bool {
    match a {
        Atom::Rcv { node, var } => {
            let p = env.pkts.get(var).copied().expect("bound var");
            view.rcv[now].map(|(n, q)| n == *node && q == p).unwrap_or(false)
        }
        Atom::Snd { node, var } => {
            let p = env.pkts.get(var).copied().expect("bound var");
            view.snd[now].iter().any(|(n, _, q)| *n == *node && *q == p)
        }
        Atom::SndTo { node, to, var } => {
            let p = env.pkts.get(var).copied().expect("bound var");
            view.snd[now].iter().any(|(n, t2, q)| *n == *node && t2 == to && *q == p)
        }
        Atom::Fail { node } => view.failed[now].contains(node),
        Atom::RegContains { instance, register, args } => {
            let needle: Vec<Value> = args
                .iter()
                .flat_map(|t| flatten(eval_term(t, view, env, now)))
                .collect();
            view.reg_contains(now, *instance, register, &needle)
        }
        Atom::ConfigContains { instance, param, args } => {
            let Some(inst) = view.net.middlebox(*instance) else { return false };
            let needle: Vec<Value> =
                args.iter().flat_map(|t| flatten(eval_term(t, view, env, now))).collect();
            match inst.config.get(param) {
                Some(crate::mbx::ConfigValue::Set(s)) => s.contains(&needle),
                Some(crate::mbx::ConfigValue::Scalar(v)) => {
                    needle.len() == 1 && needle[0] == *v
                }
                None => false,
            }
        }
        Atom::Eq { lhs, rhs } => {
            eval_term(lhs, view, env, now) == eval_term(rhs, view, env, now)
        }
        Atom::ClassIs { class, var } => {
            let p = env.pkts.get(var).copied().expect("bound var");
            let flow = flow_of(&p);
            for step in &view.trace.steps {
                for b in &step.oracle {
                    if let crate::mbx::OracleQuery::Class { class: c, flow: f } = &b.query {
                        if c == class && *f == flow {
                            if let crate::mbx::OracleAnswer::Bool(v) = b.answer {
                                return v;
                            }
                        }
                    }
                }
            }
            false
        }
    }
}

fn eval_formula(f: &Formula, view: &TraceView, env: &Env, now: usize) -> bool {
    match f {
        Formula::Atom(a) => eval_atom(a, view, env, now),
        Formula::Not(inner) => !eval_formula(inner, view, env, now),
        Formula::And(items) => items.iter().all(|i| eval_formula(i, view, env, now)),
        Formula::Or(items) => items.iter().any(|i| eval_formula(i, view, env, now)),
        Formula::Implies(lhs, rhs) => {
            !eval_formula(lhs, view, env, now) || eval_formula(rhs, view, env, now)
        }
        Formula::Always(inner) => (0..=now).all(|t| eval_formula(inner, view, env, t)),
        Formula::Past(inner) => (0..=now).any(|t| eval_formula(inner, view, env, t)),
        Formula::ForallPkts { vars, body } => {
            let mut assignments = vec![env.clone()];
            for v in vars {
                let mut next = Vec::new();
                for e in &assignments {
                    for p in &view.packets {
                        let mut e2 = e.clone();
                        e2.pkts.insert(v.clone(), *p);
                        next.push(e2);
                    }
                }
                assignments = next;
            }
            assignments.iter().all(|e| eval_formula(body, view, e, now))
        }
        Formula::ExistsPkt { var, body } => view.packets.iter().any(|p| {
            let mut e2 = env.clone();
            e2.pkts.insert(var.clone(), *p);
            eval_formula(body, view, &e2, now)
        }),
    }
}
