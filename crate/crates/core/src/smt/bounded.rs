//! Quantifier-free bounded encoding of the event semantics.
//!
//! The script unrolls K timesteps. Each timestep is one event: idle, a host
//! emission, a delivery (fused with processing at the receiving node), a
//! failure, or a recovery — exactly the explicit-state engine's step
//! relation, so sat/unsat matches Violated/Holds at identical bounds.
//! Enumerated sorts are bounded integers with range assertions; flows are
//! packed endpoint-key pairs (lo, hi); oracle applications are per-timestep
//! constants tied together by argument-equality consistency constraints,
//! which realizes the "same call, same value" oracle discipline.
//!
//! Known restrictions, shared with the interpreter's models: map lookups in
//! guards must be containment-guarded, and a rule must not read a map key
//! it wrote earlier in the same rule body.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::{kinds, ScriptMode, SmtScript, SymbolRole};
use crate::bmc::Bounds;
use crate::invariant::{Invariant, MbxRef, Predicate};
use crate::mbx::{
    Action, ConfigValue, ContainerKind, Expr, FailurePolicy, Field, Guard, MiddleboxInstance,
    RangeExpr, RegisterShape, Sort, Terminator,
};
use crate::net::{NodeId, NodeKind, Value};
use crate::network::Network;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("universe too large to encode: {0}")]
    UniverseTooLarge(String),
    #[error("depth must be at least 1")]
    ZeroDepth,
}

/// Cap on (addresses x ports) to keep scripts tractable.
const MAX_ENDPOINT_KEYS: usize = 4096;

struct Enc<'a> {
    net: &'a Network,
    bounds: &'a Bounds,
    budget: u32,
    a: i64, // addresses incl fresh
    p: i64, // ports incl fresh
    c: i64, // contents incl fresh
    n: i64, // verification nodes incl omega
    max_out: usize,
    watched: Vec<MbxRef>,
    decls: String,
    asserts: String,
    symbols: Vec<(String, SymbolRole)>,
}

impl<'a> Enc<'a> {
    fn declare_int(&mut self, name: &str) {
        let _ = writeln!(self.decls, "(declare-const {name} Int)");
    }

    fn declare_bool(&mut self, name: &str) {
        let _ = writeln!(self.decls, "(declare-const {name} Bool)");
    }

    fn assert(&mut self, term: &str) {
        let _ = writeln!(self.asserts, "(assert {term})");
    }

    fn comment(&mut self, text: &str) {
        let _ = writeln!(self.asserts, "; {text}");
    }
}

fn and(terms: Vec<String>) -> String {
    match terms.len() {
        0 => "true".to_string(),
        1 => terms.into_iter().next().unwrap(),
        _ => format!("(and {})", terms.join(" ")),
    }
}

fn or(terms: Vec<String>) -> String {
    match terms.len() {
        0 => "false".to_string(),
        1 => terms.into_iter().next().unwrap(),
        _ => format!("(or {})", terms.join(" ")),
    }
}

fn eq(a: &str, b: impl std::fmt::Display) -> String {
    format!("(= {a} {b})")
}

fn not(a: &str) -> String {
    format!("(not {a})")
}

fn implies(a: &str, b: &str) -> String {
    format!("(=> {a} {b})")
}

fn ite(c: &str, t: &str, e: &str) -> String {
    format!("(ite {c} {t} {e})")
}

/// A symbolic multi-component value (flows are [lo, hi], tuples concatenate).
#[derive(Clone, Debug)]
struct SymVal {
    comps: Vec<String>,
}

impl SymVal {
    fn scalar(s: impl Into<String>) -> SymVal {
        SymVal { comps: vec![s.into()] }
    }
}

/// Components of a concrete value in the integer encoding.
fn value_comps(v: &Value, ports: i64) -> Vec<i64> {
    match v {
        Value::Addr(a) => vec![a.0 as i64],
        Value::Port(p) => vec![p.0 as i64],
        Value::Content(c) => vec![c.0 as i64],
        Value::Flow(f) => {
            let lo = f.lo.0 .0 as i64 * ports + f.lo.1 .0 as i64;
            let hi = f.hi.0 .0 as i64 * ports + f.hi.1 .0 as i64;
            vec![lo, hi]
        }
        Value::Tuple(items) => items.iter().flat_map(|i| value_comps(i, ports)).collect(),
    }
}

/// Number of integer components of a sort.
fn sort_width(s: &Sort) -> usize {
    match s {
        Sort::Address | Sort::Port | Sort::Content => 1,
        Sort::Flow => 2,
        Sort::Packet => 6,
        Sort::Tuple(items) => items.iter().map(sort_width).sum(),
    }
}

fn tuple_width(sorts: &[Sort]) -> usize {
    sorts.iter().map(sort_width).sum()
}

/// Enumerates all concrete elements of a sort tuple, as component vectors.
fn enumerate_tuple(net: &Network, sorts: &[Sort]) -> Vec<Vec<i64>> {
    let mut out: Vec<Vec<i64>> = vec![vec![]];
    for s in sorts {
        let opts: Vec<Vec<i64>> = enumerate_sort(net, s);
        out = out
            .into_iter()
            .flat_map(|prefix| {
                opts.iter().map(move |o| {
                    let mut v = prefix.clone();
                    v.extend(o);
                    v
                })
            })
            .collect();
    }
    out
}

fn enumerate_sort(net: &Network, s: &Sort) -> Vec<Vec<i64>> {
    let a = net.universe.addresses().count() as i64;
    let p = net.universe.ports().count() as i64;
    let c = net.universe.contents().count() as i64;
    match s {
        Sort::Address => (0..a).map(|i| vec![i]).collect(),
        Sort::Port => (0..p).map(|i| vec![i]).collect(),
        Sort::Content => (0..c).map(|i| vec![i]).collect(),
        Sort::Flow => {
            let e = a * p;
            let mut out = Vec::new();
            for lo in 0..e {
                for hi in lo..e {
                    out.push(vec![lo, hi]);
                }
            }
            out
        }
        Sort::Packet => unreachable!("packets are not register elements"),
        Sort::Tuple(items) => enumerate_tuple(net, items),
    }
}

/// Symbolic evaluation context for one middlebox rule at one timestep.
struct RuleCtx<'a> {
    enc_ports: i64,
    inst: &'a MiddleboxInstance,
    t: u32,
    /// Current symbolic packet fields (rewrites applied so far).
    fields: BTreeMap<Field, String>,
    locals: BTreeMap<String, SymVal>,
    /// Register state symbol prefix for reads (pre-step state).
    reg_prefix: String,
    /// Lookup-ok condition accumulated over action-position map reads.
    lookups_ok: Vec<String>,
    /// Oracle uses in this rule: (oracle name, arg components).
    oracle_uses: Vec<(String, Vec<String>)>,
    /// Class predicates consulted (class name).
    class_uses: Vec<String>,
    /// Auxiliary definitions for map lookups (flattened, not nested).
    aux_decls: Vec<String>,
    aux_asserts: Vec<String>,
    aux_seq: usize,
    rule_tag: usize,
}

impl<'a> RuleCtx<'a> {
    fn new(inst: &'a MiddleboxInstance, mbx_idx: usize, enc_ports: i64, t: u32) -> Self {
        let fields = [
            (Field::Src, format!("psrc{t}")),
            (Field::Dst, format!("pdst{t}")),
            (Field::SrcPort, format!("psp{t}")),
            (Field::DstPort, format!("pdp{t}")),
            (Field::Origin, format!("porig{t}")),
            (Field::Content, format!("pcont{t}")),
        ]
        .into_iter()
        .collect();
        RuleCtx {
            enc_ports,
            inst,
            t,
            fields,
            locals: BTreeMap::new(),
            reg_prefix: format!("m{mbx_idx}"),
            lookups_ok: Vec::new(),
            oracle_uses: Vec::new(),
            class_uses: Vec::new(),
            aux_decls: Vec::new(),
            aux_asserts: Vec::new(),
            aux_seq: 0,
            rule_tag: 0,
        }
    }

    fn flow_terms(&self) -> (String, String) {
        let skey = format!(
            "(+ (* {} {}) {})",
            self.fields[&Field::Src], self.enc_ports, self.fields[&Field::SrcPort]
        );
        let dkey = format!(
            "(+ (* {} {}) {})",
            self.fields[&Field::Dst], self.enc_ports, self.fields[&Field::DstPort]
        );
        let le = format!("(<= {skey} {dkey})");
        (ite(&le, &skey, &dkey), ite(&le, &dkey, &skey))
    }

    fn eval(&mut self, e: &Expr, net: &Network) -> SymVal {
        match e {
            Expr::PktField(f) => SymVal::scalar(self.fields[f].clone()),
            Expr::FlowOfPkt => {
                let (lo, hi) = self.flow_terms();
                SymVal { comps: vec![lo, hi] }
            }
            Expr::Pkt => SymVal {
                comps: Field::ALL.iter().map(|f| self.fields[f].clone()).collect(),
            },
            Expr::Local(name) => self.locals[name].clone(),
            Expr::Param(name) => {
                let cfg = &self.inst.config[name];
                match cfg {
                    ConfigValue::Scalar(v) => SymVal {
                        comps: value_comps(v, self.enc_ports)
                            .into_iter()
                            .map(|i| i.to_string())
                            .collect(),
                    },
                    ConfigValue::Set(_) => unreachable!("sets are not scalar values"),
                }
            }
            Expr::OracleCall { name, args } => {
                let mut comps = Vec::new();
                for a in args {
                    comps.extend(self.eval(a, net).comps);
                }
                self.oracle_uses.push((name.clone(), comps));
                SymVal::scalar(format!("ov_{}_{}_{}", self.reg_prefix, name, self.t))
            }
            Expr::MapGet { register, key } => {
                let key_comps = self.eval(key, net).comps;
                let model = &self.inst.model;
                let ridx = model.register_index(register).expect("declared register");
                let (ksorts, vsorts) = match &model.registers[ridx].shape {
                    RegisterShape::MapOf(k, v) => (k.clone(), v.clone()),
                    _ => unreachable!("sort-checked"),
                };
                let keys = enumerate_tuple(net, &ksorts);
                let vw = tuple_width(&vsorts);
                // Flat encoding via an auxiliary lookup constant per read:
                // each present key pins the value, no key pins it to 0.
                let tag = format!(
                    "lk_{}_{}_r{}_{}_{}",
                    self.reg_prefix, register, self.rule_tag, self.aux_seq, self.t
                );
                self.aux_seq += 1;
                let ok_name = format!("{tag}_ok");
                self.aux_decls.push(format!("(declare-const {ok_name} Bool)"));
                let comp_names: Vec<String> = (0..vw)
                    .map(|c| {
                        let n = format!("{tag}_v{c}");
                        self.aux_decls.push(format!("(declare-const {n} Int)"));
                        n
                    })
                    .collect();
                let mut ok_terms = Vec::new();
                for (ki, kc) in keys.iter().enumerate() {
                    let key_eq = and(key_comps
                        .iter()
                        .zip(kc)
                        .map(|(t, c)| eq(t, c))
                        .collect());
                    let present =
                        format!("mp_{}_{}_{}_{}", self.reg_prefix, register, ki, self.t);
                    let hit = and(vec![present, key_eq]);
                    let vals: Vec<String> = (0..vw)
                        .map(|c| {
                            eq(
                                &comp_names[c],
                                format!(
                                    "mv_{}_{}_{}_{}_{}",
                                    self.reg_prefix, register, ki, c, self.t
                                ),
                            )
                        })
                        .collect();
                    self.aux_asserts.push(implies(&hit, &and(vals)));
                    ok_terms.push(hit);
                }
                let any = or(ok_terms);
                self.aux_asserts.push(eq(&ok_name, &any));
                let zeros: Vec<String> =
                    comp_names.iter().map(|n| eq(n, "0")).collect();
                self.aux_asserts.push(implies(&not(&ok_name), &and(zeros)));
                self.lookups_ok.push(ok_name);
                SymVal { comps: comp_names }
            }
            Expr::TupleIndex(inner, i) => {
                let v = self.eval(inner, net);
                // Components of preceding fields must be skipped using the
                // sort widths; all scalar sorts here are width 1, flows 2.
                // Indexing applies to declared tuples whose members are
                // scalars in this language, so component i is index i.
                SymVal::scalar(v.comps[*i].clone())
            }
            Expr::Tuple(items) => {
                let mut comps = Vec::new();
                for it in items {
                    comps.extend(self.eval(it, net).comps);
                }
                SymVal { comps }
            }
        }
    }

    fn guard(&mut self, g: &Guard, net: &Network, failed_term: &str) -> String {
        match g {
            Guard::True => "true".to_string(),
            Guard::FailSelf => failed_term.to_string(),
            Guard::Eq(a, b) => {
                let va = self.eval(a, net);
                let vb = self.eval(b, net);
                and(va.comps.iter().zip(&vb.comps).map(|(x, y)| eq(x, y)).collect())
            }
            Guard::Ne(a, b) => {
                let va = self.eval(a, net);
                let vb = self.eval(b, net);
                not(&and(va.comps.iter().zip(&vb.comps).map(|(x, y)| eq(x, y)).collect()))
            }
            Guard::Contains { container, kind, arg } => {
                let needle = self.eval(arg, net);
                match kind {
                    ContainerKind::ParamSet => {
                        let ConfigValue::Set(items) = &self.inst.config[container] else {
                            unreachable!("sort-checked")
                        };
                        let mut alts = Vec::new();
                        for item in items {
                            let mut comps = Vec::new();
                            for v in item {
                                comps.extend(value_comps(v, self.enc_ports));
                            }
                            alts.push(and(
                                needle.comps.iter().zip(&comps).map(|(t, c)| eq(t, c)).collect(),
                            ));
                        }
                        or(alts)
                    }
                    ContainerKind::SetRegister => {
                        let model = &self.inst.model;
                        let ridx = model.register_index(container).expect("declared");
                        let RegisterShape::SetOf(sorts) = &model.registers[ridx].shape else {
                            unreachable!()
                        };
                        let elems = enumerate_tuple(net, sorts);
                        let mut alts = Vec::new();
                        for (ei, ec) in elems.iter().enumerate() {
                            let member =
                                format!("sr_{}_{}_{}_{}", self.reg_prefix, container, ei, self.t);
                            let key_eq = and(needle
                                .comps
                                .iter()
                                .zip(ec)
                                .map(|(t, c)| eq(t, c))
                                .collect());
                            alts.push(and(vec![member, key_eq]));
                        }
                        or(alts)
                    }
                    ContainerKind::MapRegisterKey => {
                        let model = &self.inst.model;
                        let ridx = model.register_index(container).expect("declared");
                        let RegisterShape::MapOf(ksorts, _) = &model.registers[ridx].shape else {
                            unreachable!()
                        };
                        let keys = enumerate_tuple(net, ksorts);
                        let mut alts = Vec::new();
                        for (ki, kc) in keys.iter().enumerate() {
                            let present =
                                format!("mp_{}_{}_{}_{}", self.reg_prefix, container, ki, self.t);
                            let key_eq = and(needle
                                .comps
                                .iter()
                                .zip(kc)
                                .map(|(t, c)| eq(t, c))
                                .collect());
                            alts.push(and(vec![present, key_eq]));
                        }
                        or(alts)
                    }
                }
            }
            Guard::Class(name) => {
                self.class_uses.push(name.clone());
                format!("cl_{}_{}", name, self.t)
            }
            Guard::Not(inner) => not(&self.guard(inner, net, failed_term)),
            Guard::And(x, y) => and(vec![
                self.guard(x, net, failed_term),
                self.guard(y, net, failed_term),
            ]),
            Guard::Or(x, y) => or(vec![
                self.guard(x, net, failed_term),
                self.guard(y, net, failed_term),
            ]),
        }
    }
}

/// Encodes the network, bounds and negated invariant as a quantifier-free
/// script. Identical inputs yield byte-identical text.
pub fn encode_bounded(
    net: &Network,
    inv: &Invariant,
    bounds: &Bounds,
) -> Result<SmtScript, EncodeError> {
    let depth = bounds.depth;
    if depth == 0 {
        return Err(EncodeError::ZeroDepth);
    }
    let a = net.universe.addresses().count() as i64;
    let p = net.universe.ports().count() as i64;
    let c = net.universe.contents().count() as i64;
    if (a * p) as usize > MAX_ENDPOINT_KEYS {
        return Err(EncodeError::UniverseTooLarge(format!(
            "{} endpoint keys exceed the cap of {MAX_ENDPOINT_KEYS}",
            a * p
        )));
    }
    let n = net.nodes().count() as i64;
    let budget = bounds.max_failures.unwrap_or(inv.max_failures);

    let mbx: Vec<&MiddleboxInstance> = net.middleboxes().collect();
    let max_out = mbx
        .iter()
        .map(|m| m.model.output_bound())
        .max()
        .unwrap_or(0)
        .max(1);
    let watched: Vec<MbxRef> = inv.predicate.mbx_refs().into_iter().cloned().collect();

    let mut enc = Enc {
        net,
        bounds,
        budget,
        a,
        p,
        c,
        n,
        max_out,
        watched,
        decls: String::new(),
        asserts: String::new(),
        symbols: Vec::new(),
    };

    declare_all(&mut enc, depth, &mbx);
    encode_frames_and_events(&mut enc, depth, &mbx);
    encode_matching(&mut enc, depth);
    encode_invariant(&mut enc, depth, inv);

    let mut text = String::new();
    let _ = writeln!(text, "; bounded event encoding, depth={depth} emits<={} budget={budget}",
        bounds.max_emits);
    let _ = writeln!(text, "(set-logic QF_UFLIA)");
    text.push_str(&enc.decls);
    text.push_str(&enc.asserts);

    Ok(SmtScript {
        text,
        mode: ScriptMode::Bounded { depth },
        symbols: enc.symbols,
    })
}

fn field_names(t: u32) -> [(Field, String); 6] {
    [
        (Field::Src, format!("psrc{t}")),
        (Field::Dst, format!("pdst{t}")),
        (Field::SrcPort, format!("psp{t}")),
        (Field::DstPort, format!("pdp{t}")),
        (Field::Origin, format!("porig{t}")),
        (Field::Content, format!("pcont{t}")),
    ]
}

fn declare_all(enc: &mut Enc, depth: u32, mbx: &[&MiddleboxInstance]) {
    for t in 0..depth {
        for (name, role) in [
            (format!("k{t}"), SymbolRole::EventKind { t }),
            (format!("n{t}"), SymbolRole::EventNode { t }),
            (format!("f{t}"), SymbolRole::EventFrom { t }),
        ] {
            enc.declare_int(&name);
            enc.symbols.push((name, role));
        }
        for (field, name) in field_names(t) {
            enc.declare_int(&name);
            enc.symbols.push((name, SymbolRole::EventField { t, field }));
        }
        // Flow key of the event packet.
        enc.declare_int(&format!("flo{t}"));
        enc.declare_int(&format!("fhi{t}"));
        // Delivery matching.
        enc.declare_int(&format!("mev{t}"));
        enc.declare_int(&format!("mslot{t}"));
        // Output slots.
        for j in 0..enc.max_out {
            enc.declare_bool(&format!("out{t}_{j}_used"));
            enc.declare_int(&format!("out{t}_{j}_to"));
            for f in ["src", "dst", "sp", "dp", "orig", "cont"] {
                enc.declare_int(&format!("out{t}_{j}_{f}"));
            }
            for w in 0..enc.watched.len() {
                enc.declare_bool(&format!("out{t}_{j}_trav{w}"));
            }
        }
        for w in 0..enc.watched.len() {
            enc.declare_bool(&format!("intrav{w}_{t}"));
        }
        // Per-middlebox failure flags and registers; index _t is the state
        // *before* event t, with an extra column at depth for the final
        // state.
    }
    for t in 0..=depth {
        for (mi, m) in mbx.iter().enumerate() {
            enc.declare_bool(&format!("failed_m{mi}_{t}"));
            for reg in &m.model.registers {
                match &reg.shape {
                    RegisterShape::SetOf(sorts) => {
                        let elems = enumerate_tuple(enc.net, sorts);
                        for ei in 0..elems.len() {
                            enc.declare_bool(&format!("sr_m{mi}_{}_{ei}_{t}", reg.name));
                        }
                    }
                    RegisterShape::MapOf(ksorts, vsorts) => {
                        let keys = enumerate_tuple(enc.net, ksorts);
                        let vw = tuple_width(vsorts);
                        for ki in 0..keys.len() {
                            enc.declare_bool(&format!("mp_m{mi}_{}_{ki}_{t}", reg.name));
                            for cc in 0..vw {
                                enc.declare_int(&format!("mv_m{mi}_{}_{ki}_{cc}_{t}", reg.name));
                            }
                        }
                    }
                }
            }
        }
    }
    // Oracle constants and class bits per timestep.
    for t in 0..depth {
        for (mi, m) in mbx.iter().enumerate() {
            for o in &m.model.oracles {
                let used = format!("ou_m{mi}_{}_{t}", o.name);
                let val = format!("ov_m{mi}_{}_{t}", o.name);
                enc.declare_bool(&used);
                enc.declare_int(&val);
                let argw: usize = o.args.iter().map(|(_, s)| sort_width(s)).sum();
                for ac in 0..argw {
                    enc.declare_int(&format!("oa_m{mi}_{}_{t}_{ac}", o.name));
                }
                enc.symbols.push((
                    used,
                    SymbolRole::OracleUsed { instance: m.id, oracle: o.name.clone(), t },
                ));
                enc.symbols.push((
                    val,
                    SymbolRole::OracleValue { instance: m.id, oracle: o.name.clone(), t },
                ));
            }
        }
        let mut class_names: Vec<String> = Vec::new();
        for m in mbx {
            for cl in &m.model.classes {
                if !class_names.contains(&cl.name) {
                    class_names.push(cl.name.clone());
                }
            }
        }
        for cl in class_names {
            let name = format!("cl_{cl}_{t}");
            enc.declare_bool(&name);
            enc.symbols.push((name, SymbolRole::ClassBit { class: cl, t }));
        }
    }
}

fn omega_idx(enc: &Enc) -> i64 {
    enc.net.omega().0 as i64
}

fn encode_frames_and_events(enc: &mut Enc, depth: u32, mbx: &[&MiddleboxInstance]) {
    let omega = omega_idx(enc);
    enc.comment("initial state");
    for (mi, m) in mbx.iter().enumerate() {
        enc.assert(&not(&format!("failed_m{mi}_0")));
        for reg in &m.model.registers {
            match &reg.shape {
                RegisterShape::SetOf(sorts) => {
                    for ei in 0..enumerate_tuple(enc.net, sorts).len() {
                        enc.assert(&not(&format!("sr_m{mi}_{}_{ei}_0", reg.name)));
                    }
                }
                RegisterShape::MapOf(ksorts, _) => {
                    for ki in 0..enumerate_tuple(enc.net, ksorts).len() {
                        enc.assert(&not(&format!("mp_m{mi}_{}_{ki}_0", reg.name)));
                    }
                }
            }
        }
    }

    enc.comment("event shape constraints");
    for t in 0..depth {
        let k = format!("k{t}");
        enc.assert(&format!("(and (>= {k} 0) (<= {k} 4))"));
        // Field ranges for any event that carries a packet.
        let carries = or(vec![eq(&k, kinds::EMIT), eq(&k, kinds::RECV)]);
        let mut ranges = Vec::new();
        for (field, name) in field_names(t) {
            let hi = match field {
                Field::Src | Field::Dst | Field::Origin => enc.a,
                Field::SrcPort | Field::DstPort => enc.p,
                Field::Content => enc.c,
            };
            ranges.push(format!("(and (>= {name} 0) (< {name} {hi}))"));
        }
        enc.assert(&implies(&carries, &and(ranges)));
        enc.assert(&format!("(and (>= n{t} 0) (< n{t} {}))", enc.n));
        enc.assert(&format!("(and (>= f{t} 0) (< f{t} {}))", enc.n));
        // Flow key of the event packet.
        let skey = format!("(+ (* psrc{t} {}) psp{t})", enc.p);
        let dkey = format!("(+ (* pdst{t} {}) pdp{t})", enc.p);
        let le = format!("(<= {skey} {dkey})");
        enc.assert(&eq(&format!("flo{t}"), ite(&le, &skey, &dkey)));
        enc.assert(&eq(&format!("fhi{t}"), ite(&le, &dkey, &skey)));

        // Emissions: by a host, with its own address and origin, declared
        // (and bounds-allowed) field values, destination distinct from the
        // source.
        let is_emit = eq(&k, kinds::EMIT);
        let hosts: Vec<String> = enc
            .net
            .hosts()
            .map(|h| {
                and(vec![
                    eq(&format!("n{t}"), h.id.0),
                    eq(&format!("psrc{t}"), h.address.0),
                ])
            })
            .collect();
        enc.assert(&implies(&is_emit, &or(hosts)));
        enc.assert(&implies(&is_emit, &eq(&format!("porig{t}"), format!("psrc{t}"))));
        enc.assert(&implies(&is_emit, &not(&eq(&format!("pdst{t}"), format!("psrc{t}")))));
        let allowed_addrs: Vec<i64> = enc
            .bounds
            .universe
            .addresses
            .clone()
            .map(|s| s.iter().map(|x| x.0 as i64).collect())
            .unwrap_or_else(|| enc.net.universe.declared_addresses().map(|x| x.0 as i64).collect());
        let allowed_ports: Vec<i64> = enc
            .bounds
            .universe
            .ports
            .clone()
            .map(|s| s.iter().map(|x| x.0 as i64).collect())
            .unwrap_or_else(|| enc.net.universe.declared_ports().map(|x| x.0 as i64).collect());
        let allowed_contents: Vec<i64> = enc
            .bounds
            .universe
            .contents
            .clone()
            .map(|s| s.iter().map(|x| x.0 as i64).collect())
            .unwrap_or_else(|| enc.net.universe.declared_contents().map(|x| x.0 as i64).collect());
        for (name, allowed) in [
            (format!("psrc{t}"), &allowed_addrs),
            (format!("pdst{t}"), &allowed_addrs),
            (format!("psp{t}"), &allowed_ports),
            (format!("pdp{t}"), &allowed_ports),
            (format!("porig{t}"), &allowed_addrs),
            (format!("pcont{t}"), &allowed_contents),
        ] {
            let alts: Vec<String> = allowed.iter().map(|v| eq(&name, v)).collect();
            enc.assert(&implies(&is_emit, &or(alts)));
        }

        // Failure bookkeeping.
        let is_fail = eq(&k, kinds::FAIL);
        let is_recover = eq(&k, kinds::RECOVER);
        if enc.budget == 0 {
            enc.assert(&not(&is_fail));
        }
        if !enc.bounds.allow_recovery {
            enc.assert(&not(&is_recover));
        }
        let mbx_nodes: Vec<String> =
            mbx.iter().map(|m| eq(&format!("n{t}"), m.id.0)).collect();
        enc.assert(&implies(&is_fail, &or(mbx_nodes.clone())));
        enc.assert(&implies(&is_recover, &or(mbx_nodes)));
        for (mi, m) in mbx.iter().enumerate() {
            let this = eq(&format!("n{t}"), m.id.0);
            enc.assert(&implies(
                &and(vec![is_fail.clone(), this.clone()]),
                &not(&format!("failed_m{mi}_{t}")),
            ));
            enc.assert(&implies(
                &and(vec![is_recover.clone(), this]),
                &format!("failed_m{mi}_{t}"),
            ));
        }
    }

    // Emission and failure budgets.
    enc.comment("budgets");
    let emit_sum: Vec<String> = (0..depth)
        .map(|t| ite(&eq(&format!("k{t}"), kinds::EMIT), "1", "0"))
        .collect();
    enc.assert(&format!("(<= (+ 0 {}) {})", emit_sum.join(" "), enc.bounds.max_emits));
    let fail_sum: Vec<String> = (0..depth)
        .map(|t| ite(&eq(&format!("k{t}"), kinds::FAIL), "1", "0"))
        .collect();
    enc.assert(&format!("(<= (+ 0 {}) {})", fail_sum.join(" "), enc.budget));

    // Failure flag transitions.
    enc.comment("failure flag transitions");
    for t in 0..depth {
        for (mi, m) in mbx.iter().enumerate() {
            let this = eq(&format!("n{t}"), m.id.0);
            let set = and(vec![eq(&format!("k{t}"), kinds::FAIL), this.clone()]);
            let clr = and(vec![eq(&format!("k{t}"), kinds::RECOVER), this]);
            let cur = format!("failed_m{mi}_{t}");
            let nxt = format!("failed_m{mi}_{}", t + 1);
            enc.assert(&eq(&nxt, ite(&set, "true", &ite(&clr, "false", &cur))));
        }
    }

    // Per-event processing, output slots, register transitions.
    for t in 0..depth {
        enc.comment(&format!("timestep {t}"));
        encode_step(enc, t, mbx, omega);
    }
}

/// Routing lookup terms for deliveries to omega at time t: whether a route
/// exists and where it goes, as a function of the sender, the destination
/// address, and the current failed set.
fn routing_terms(enc: &Enc, t: u32, mbx: &[&MiddleboxInstance]) -> (String, String) {
    // Scenario condition terms, most specific first; default last.
    let scenarios: Vec<(Vec<usize>, String)> = {
        let mut out = Vec::new();
        for failed in enc.net.topology.declared_scenarios() {
            if failed.len() as u32 > enc.budget {
                continue;
            }
            let cond = and(mbx
                .iter()
                .enumerate()
                .map(|(mi, m)| {
                    if failed.contains(&m.id) {
                        format!("failed_m{mi}_{t}")
                    } else {
                        not(&format!("failed_m{mi}_{t}"))
                    }
                })
                .collect());
            out.push((failed.iter().map(|f| f.0 as usize).collect(), cond));
        }
        out
    };

    let lookup = |failed: Option<&Vec<usize>>| -> (String, String) {
        let failed_set: std::collections::BTreeSet<NodeId> = failed
            .map(|v| v.iter().map(|i| NodeId(*i as u32)).collect())
            .unwrap_or_default();
        let tf = crate::netfunc::compute_transfer(
            enc.net,
            &crate::net::FailureScenario { failed: failed_set },
        );
        let mut ok = "false".to_string();
        let mut to = "0".to_string();
        if let Ok(tf) = tf {
            for (from, dst, next) in tf.entries() {
                let cond = and(vec![
                    eq(&format!("f{t}"), from.0),
                    eq(&format!("pdst{t}"), dst.0),
                ]);
                ok = ite(&cond, "true", &ok);
                to = ite(&cond, &next.0.to_string(), &to);
            }
        }
        (ok, to)
    };

    let (mut ok, mut to) = lookup(None);
    for (failed, cond) in scenarios.iter().rev() {
        let (s_ok, s_to) = lookup(Some(failed));
        ok = ite(cond, &s_ok, &ok);
        to = ite(cond, &s_to, &to);
    }
    (ok, to)
}

fn encode_step(enc: &mut Enc, t: u32, mbx: &[&MiddleboxInstance], omega: i64) {
    let k = format!("k{t}");
    let is_emit = eq(&k, kinds::EMIT);
    let is_recv = eq(&k, kinds::RECV);

    // Default: outputs unused unless the event produces them.
    let mut produce_conditions: Vec<String> = Vec::new();

    // Host emissions: slot 0 carries the event packet to omega.
    {
        let slot_used = format!("out{t}_0_used");
        let cond = is_emit.clone();
        let mut body = vec![
            slot_used.clone(),
            eq(&format!("out{t}_0_to"), omega),
            eq(&format!("out{t}_0_src"), format!("psrc{t}")),
            eq(&format!("out{t}_0_dst"), format!("pdst{t}")),
            eq(&format!("out{t}_0_sp"), format!("psp{t}")),
            eq(&format!("out{t}_0_dp"), format!("pdp{t}")),
            eq(&format!("out{t}_0_orig"), format!("porig{t}")),
            eq(&format!("out{t}_0_cont"), format!("pcont{t}")),
        ];
        for w in 0..enc.watched.len() {
            body.push(not(&format!("out{t}_0_trav{w}")));
        }
        for j in 1..enc.max_out {
            body.push(not(&format!("out{t}_{j}_used")));
        }
        enc.assert(&implies(&cond, &and(body)));
        produce_conditions.push(cond);
    }

    // Deliveries to omega: slot 0 carries the packet onward when a route
    // exists under the current failed set.
    {
        let cond = and(vec![is_recv.clone(), eq(&format!("n{t}"), omega)]);
        let (ok, to) = routing_terms(enc, t, mbx);
        let mut body = vec![
            eq(&format!("out{t}_0_used"), ok),
            eq(&format!("out{t}_0_to"), to),
            eq(&format!("out{t}_0_src"), format!("psrc{t}")),
            eq(&format!("out{t}_0_dst"), format!("pdst{t}")),
            eq(&format!("out{t}_0_sp"), format!("psp{t}")),
            eq(&format!("out{t}_0_dp"), format!("pdp{t}")),
            eq(&format!("out{t}_0_orig"), format!("porig{t}")),
            eq(&format!("out{t}_0_cont"), format!("pcont{t}")),
        ];
        for w in 0..enc.watched.len() {
            body.push(eq(&format!("out{t}_0_trav{w}"), format!("intrav{w}_{t}")));
        }
        for j in 1..enc.max_out {
            body.push(not(&format!("out{t}_{j}_used")));
        }
        enc.assert(&implies(&cond, &and(body)));
        produce_conditions.push(cond);
    }

    // Deliveries to hosts: nothing is forwarded.
    {
        let host_conds: Vec<String> = enc
            .net
            .hosts()
            .map(|h| eq(&format!("n{t}"), h.id.0))
            .collect();
        let cond = and(vec![is_recv.clone(), or(host_conds)]);
        let mut body = Vec::new();
        for j in 0..enc.max_out {
            body.push(not(&format!("out{t}_{j}_used")));
        }
        enc.assert(&implies(&cond, &and(body)));
        produce_conditions.push(cond);
    }

    // Deliveries to middleboxes: fire the first matching rule.
    for (mi, inst) in mbx.iter().enumerate() {
        let cond = and(vec![is_recv.clone(), eq(&format!("n{t}"), inst.id.0)]);
        encode_mbx_step(enc, t, mi, inst, &cond, omega);
        produce_conditions.push(cond);
    }

    // Any other event: no outputs.
    {
        let none_of = not(&or(produce_conditions));
        let mut body = Vec::new();
        for j in 0..enc.max_out {
            body.push(not(&format!("out{t}_{j}_used")));
        }
        enc.assert(&implies(&none_of, &and(body)));
    }

    // Register frames: unchanged unless this middlebox processed or failed;
    // the processing case asserts its own transition inside
    // encode_mbx_step, so here we constrain the complement.
    for (mi, inst) in mbx.iter().enumerate() {
        let processed = and(vec![is_recv.clone(), eq(&format!("n{t}"), inst.id.0)]);
        let failed_now = and(vec![
            eq(&format!("k{t}"), kinds::FAIL),
            eq(&format!("n{t}"), inst.id.0),
        ]);
        let frame = not(&or(vec![processed, failed_now.clone()]));
        let mut frames = Vec::new();
        let mut clears = Vec::new();
        for reg in &inst.model.registers {
            match &reg.shape {
                RegisterShape::SetOf(sorts) => {
                    for ei in 0..enumerate_tuple(enc.net, sorts).len() {
                        let cur = format!("sr_m{mi}_{}_{ei}_{t}", reg.name);
                        let nxt = format!("sr_m{mi}_{}_{ei}_{}", reg.name, t + 1);
                        frames.push(eq(&nxt, &cur));
                        clears.push(not(&nxt));
                    }
                }
                RegisterShape::MapOf(ksorts, vsorts) => {
                    let vw = tuple_width(vsorts);
                    for ki in 0..enumerate_tuple(enc.net, ksorts).len() {
                        let curp = format!("mp_m{mi}_{}_{ki}_{t}", reg.name);
                        let nxtp = format!("mp_m{mi}_{}_{ki}_{}", reg.name, t + 1);
                        frames.push(eq(&nxtp, &curp));
                        clears.push(not(&nxtp));
                        for cc in 0..vw {
                            let curv = format!("mv_m{mi}_{}_{ki}_{cc}_{t}", reg.name);
                            let nxtv = format!("mv_m{mi}_{}_{ki}_{cc}_{}", reg.name, t + 1);
                            frames.push(eq(&nxtv, &curv));
                        }
                    }
                }
            }
        }
        if !frames.is_empty() {
            enc.assert(&implies(&frame, &and(frames)));
            enc.assert(&implies(&failed_now, &and(clears)));
        }
    }
}

/// One middlebox's processing at timestep t, guarded by `cond`.
fn encode_mbx_step(
    enc: &mut Enc,
    t: u32,
    mi: usize,
    inst: &MiddleboxInstance,
    cond: &str,
    omega: i64,
) {
    let failed_term = format!("failed_m{mi}_{t}");
    let model = inst.model.clone();
    let net = enc.net;

    // Evaluate each rule symbolically: guard, lookup-ok, outputs, writes.
    struct RuleEval {
        guard: String,
        lookups_ok: String,
        out_fields: BTreeMap<Field, String>,
        out_count: usize,
        set_writes: Vec<(String, Vec<String>)>, // register, element comps
        map_writes: Vec<(String, Vec<String>, Vec<String>)>, // register, key, value
        oracle_uses: Vec<(String, Vec<String>)>,
    }

    let mut evals: Vec<RuleEval> = Vec::new();
    for (ri, rule) in model.rules.iter().enumerate() {
        let mut ctx = RuleCtx::new(inst, mi, enc.p, t);
        ctx.rule_tag = ri;
        let guard = ctx.guard(&rule.guard, net, &failed_term);
        let mut set_writes = Vec::new();
        let mut map_writes = Vec::new();
        for action in &rule.actions {
            match action {
                Action::Let { name, expr } => {
                    let v = ctx.eval(expr, net);
                    ctx.locals.insert(name.clone(), v);
                }
                Action::FieldAssign { field, expr } => {
                    let v = ctx.eval(expr, net);
                    ctx.fields.insert(*field, v.comps[0].clone());
                }
                Action::SetAdd { register, tuple } => {
                    let v = ctx.eval(tuple, net);
                    set_writes.push((register.clone(), v.comps));
                }
                Action::MapPut { register, key, value } => {
                    let kv = ctx.eval(key, net);
                    let vv = ctx.eval(value, net);
                    map_writes.push((register.clone(), kv.comps, vv.comps));
                }
            }
        }
        let out_count = match rule.terminator {
            Terminator::Forward(nn) => nn,
            Terminator::Drop => 0,
        };
        for d in &ctx.aux_decls {
            let _ = writeln!(enc.decls, "{d}");
        }
        for a in &ctx.aux_asserts {
            enc.assert(a);
        }
        evals.push(RuleEval {
            guard,
            lookups_ok: and(ctx.lookups_ok.clone()),
            out_fields: ctx.fields.clone(),
            out_count,
            set_writes,
            map_writes,
            oracle_uses: ctx.oracle_uses.clone(),
        });
    }

    // Fired condition per rule: first match, gated by failure policy.
    let alive = not(&failed_term);
    let processing_gate = match model.failure {
        FailurePolicy::Closed | FailurePolicy::Open => alive.clone(),
        FailurePolicy::Explicit => "true".to_string(),
    };
    let mut fired: Vec<String> = Vec::new();
    for (ri, ev) in evals.iter().enumerate() {
        let mut terms = vec![processing_gate.clone(), ev.guard.clone()];
        for prev in evals.iter().take(ri) {
            terms.push(not(&prev.guard));
        }
        fired.push(and(terms));
    }

    // Effective rule result (with lookup misses dropping the packet and
    // leaving state unchanged).
    let mut out_used: Vec<String> = vec!["false".to_string(); enc.max_out];
    let mut out_fields: Vec<BTreeMap<Field, String>> = Vec::new();
    for _ in 0..enc.max_out {
        out_fields.push(
            Field::ALL
                .iter()
                .map(|f| (*f, "0".to_string()))
                .collect::<BTreeMap<_, _>>(),
        );
    }
    for (ri, ev) in evals.iter().enumerate() {
        let ok = and(vec![fired[ri].clone(), ev.lookups_ok.clone()]);
        for j in 0..ev.out_count.min(enc.max_out) {
            out_used[j] = ite(&ok, "true", &out_used[j]);
            for f in Field::ALL {
                let cur = out_fields[j][&f].clone();
                out_fields[j].insert(f, ite(&ok, &ev.out_fields[&f], &cur));
            }
        }
    }
    // Fail-open: a failed instance forwards the packet unmodified.
    if matches!(model.failure, FailurePolicy::Open) {
        let failed_fwd = failed_term.clone();
        out_used[0] = ite(&failed_fwd, "true", &out_used[0]);
        for (f, name) in field_names(t) {
            let cur = out_fields[0][&f].clone();
            out_fields[0].insert(f, ite(&failed_fwd, &name, &cur));
        }
    }

    let mut body = Vec::new();
    for j in 0..enc.max_out {
        body.push(eq(&format!("out{t}_{j}_used"), &out_used[j]));
        body.push(eq(&format!("out{t}_{j}_to"), omega));
        for (f, suffix) in [
            (Field::Src, "src"),
            (Field::Dst, "dst"),
            (Field::SrcPort, "sp"),
            (Field::DstPort, "dp"),
            (Field::Origin, "orig"),
            (Field::Content, "cont"),
        ] {
            body.push(eq(&format!("out{t}_{j}_{suffix}"), &out_fields[j][&f]));
        }
        // Traversal bits: input bits, plus this instance if watched.
        for (w, watched) in enc.watched.clone().iter().enumerate() {
            let here = match watched {
                MbxRef::Instance(id) => *id == inst.id,
                MbxRef::Kind(kind) => model.name == *kind,
            };
            let term = if here {
                "true".to_string()
            } else {
                format!("intrav{w}_{t}")
            };
            body.push(eq(&format!("out{t}_{j}_trav{w}"), &term));
        }
    }
    enc.assert(&implies(cond, &and(body)));

    // Register transition under processing.
    let mut reg_terms = Vec::new();
    for reg in &model.registers {
        match &reg.shape {
            RegisterShape::SetOf(sorts) => {
                let elems = enumerate_tuple(net, sorts);
                for (ei, ec) in elems.iter().enumerate() {
                    let cur = format!("sr_m{mi}_{}_{ei}_{t}", reg.name);
                    let nxt = format!("sr_m{mi}_{}_{ei}_{}", reg.name, t + 1);
                    let mut added = Vec::new();
                    for (ri, ev) in evals.iter().enumerate() {
                        for (rname, comps) in &ev.set_writes {
                            if rname == &reg.name {
                                let val_eq = and(comps
                                    .iter()
                                    .zip(ec)
                                    .map(|(term, c)| eq(term, c))
                                    .collect());
                                added.push(and(vec![
                                    fired[ri].clone(),
                                    ev.lookups_ok.clone(),
                                    val_eq,
                                ]));
                            }
                        }
                    }
                    reg_terms.push(eq(&nxt, or(vec![cur, or(added)])));
                }
            }
            RegisterShape::MapOf(ksorts, vsorts) => {
                let keys = enumerate_tuple(net, ksorts);
                let vw = tuple_width(vsorts);
                for (ki, kc) in keys.iter().enumerate() {
                    let curp = format!("mp_m{mi}_{}_{ki}_{t}", reg.name);
                    let nxtp = format!("mp_m{mi}_{}_{ki}_{}", reg.name, t + 1);
                    let mut written = Vec::new();
                    let mut val_terms: Vec<String> = (0..vw)
                        .map(|cc| format!("mv_m{mi}_{}_{ki}_{cc}_{t}", reg.name))
                        .collect();
                    for (ri, ev) in evals.iter().enumerate() {
                        for (rname, kcomps, vcomps) in &ev.map_writes {
                            if rname == &reg.name {
                                let key_eq = and(kcomps
                                    .iter()
                                    .zip(kc)
                                    .map(|(term, c)| eq(term, c))
                                    .collect());
                                let hit = and(vec![
                                    fired[ri].clone(),
                                    ev.lookups_ok.clone(),
                                    key_eq,
                                ]);
                                for (cc, vt) in val_terms.iter_mut().enumerate() {
                                    *vt = ite(&hit, &vcomps[cc], vt);
                                }
                                written.push(hit);
                            }
                        }
                    }
                    reg_terms.push(eq(&nxtp, or(vec![curp, or(written)])));
                    for (cc, vt) in val_terms.iter().enumerate() {
                        let nxtv = format!("mv_m{mi}_{}_{ki}_{cc}_{}", reg.name, t + 1);
                        reg_terms.push(eq(&nxtv, vt));
                    }
                }
            }
        }
    }
    if !reg_terms.is_empty() {
        enc.assert(&implies(cond, &and(reg_terms)));
    }

    // Oracle usage: argument recording, range, and the used flag.
    for o in &model.oracles {
        let used = format!("ou_m{mi}_{}_{t}", o.name);
        let val = format!("ov_m{mi}_{}_{t}", o.name);
        let mut use_conds = Vec::new();
        for (ri, ev) in evals.iter().enumerate() {
            for (oname, args) in &ev.oracle_uses {
                if oname == &o.name {
                    let fire = and(vec![fired[ri].clone(), cond.to_string()]);
                    use_conds.push(fire.clone());
                    let arg_binds: Vec<String> = args
                        .iter()
                        .enumerate()
                        .map(|(ac, term)| eq(&format!("oa_m{mi}_{}_{t}_{ac}", o.name), term))
                        .collect();
                    enc.assert(&implies(&fire, &and(arg_binds)));
                }
            }
        }
        enc.assert(&eq(&used, or(use_conds)));
        // Range constraint.
        let range_vals: Vec<i64> = match &o.range {
            RangeExpr::Sort(Sort::Address) => (0..enc.a).collect(),
            RangeExpr::Sort(Sort::Port) => (0..enc.p).collect(),
            RangeExpr::Sort(Sort::Content) => (0..enc.c).collect(),
            RangeExpr::Sort(_) => vec![],
            RangeExpr::Param(pname) => match &inst.config[pname] {
                ConfigValue::Set(items) => items
                    .iter()
                    .filter_map(|tuple| {
                        let comps = tuple
                            .iter()
                            .flat_map(|v| value_comps(v, enc.p))
                            .collect::<Vec<_>>();
                        comps.first().copied()
                    })
                    .collect(),
                ConfigValue::Scalar(_) => vec![],
            },
        };
        let in_range: Vec<String> = range_vals.iter().map(|v| eq(&val, v)).collect();
        enc.assert(&implies(&used, &or(in_range)));
    }

}

/// Delivery matching, FIFO, no-skip, oracle consistency, class-bit
/// consistency and exclusion.
fn encode_matching(enc: &mut Enc, depth: u32) {
    enc.comment("delivery matching");
    for t in 0..depth {
        let is_recv = eq(&format!("k{t}"), kinds::RECV);
        if t == 0 {
            enc.assert(&not(&is_recv));
            continue;
        }
        enc.assert(&implies(
            &is_recv,
            &format!("(and (>= mev{t} 0) (< mev{t} {t}))"),
        ));
        enc.assert(&implies(
            &is_recv,
            &format!("(and (>= mslot{t} 0) (< mslot{t} {}))", enc.max_out),
        ));
        // The matched output exists, targets this node, has these fields,
        // and came from the claimed sender.
        for u in 0..t {
            for j in 0..enc.max_out {
                let sel = and(vec![
                    is_recv.clone(),
                    eq(&format!("mev{t}"), u),
                    eq(&format!("mslot{t}"), j),
                ]);
                let mut conds = vec![
                    format!("out{u}_{j}_used"),
                    eq(&format!("out{u}_{j}_to"), format!("n{t}")),
                    eq(&format!("f{t}"), format!("n{u}")),
                    eq(&format!("out{u}_{j}_src"), format!("psrc{t}")),
                    eq(&format!("out{u}_{j}_dst"), format!("pdst{t}")),
                    eq(&format!("out{u}_{j}_sp"), format!("psp{t}")),
                    eq(&format!("out{u}_{j}_dp"), format!("pdp{t}")),
                    eq(&format!("out{u}_{j}_orig"), format!("porig{t}")),
                    eq(&format!("out{u}_{j}_cont"), format!("pcont{t}")),
                ];
                for w in 0..enc.watched.len() {
                    conds.push(eq(&format!("intrav{w}_{t}"), format!("out{u}_{j}_trav{w}")));
                }
                enc.assert(&implies(&sel, &and(conds)));
            }
        }
    }

    // Injectivity: two deliveries never consume the same output.
    for t in 1..depth {
        for u in 1..t {
            let both = and(vec![
                eq(&format!("k{t}"), kinds::RECV),
                eq(&format!("k{u}"), kinds::RECV),
            ]);
            let same = and(vec![
                eq(&format!("mev{t}"), format!("mev{u}")),
                eq(&format!("mslot{t}"), format!("mslot{u}")),
            ]);
            enc.assert(&implies(&both, &not(&same)));
        }
    }

    // No-skip FIFO: when a delivery consumes output (u, j), every earlier
    // output on the same link must already have been consumed by an earlier
    // delivery.
    for t in 1..depth {
        let is_recv_t = eq(&format!("k{t}"), kinds::RECV);
        for u in 0..t {
            for j in 0..enc.max_out {
                let sel = and(vec![
                    is_recv_t.clone(),
                    eq(&format!("mev{t}"), u),
                    eq(&format!("mslot{t}"), j),
                ]);
                // Earlier outputs on the same link: (u2, j2) lexicographically
                // before (u, j).
                for u2 in 0..=u {
                    for j2 in 0..enc.max_out {
                        if u2 == u && j2 >= j {
                            continue;
                        }
                        let same_link = and(vec![
                            format!("out{u2}_{j2}_used"),
                            eq(&format!("n{u2}"), format!("n{u}")),
                            eq(&format!("out{u2}_{j2}_to"), format!("out{u}_{j}_to")),
                        ]);
                        let consumed_earlier: Vec<String> = (1..t)
                            .map(|t2| {
                                and(vec![
                                    eq(&format!("k{t2}"), kinds::RECV),
                                    eq(&format!("mev{t2}"), u2),
                                    eq(&format!("mslot{t2}"), j2),
                                ])
                            })
                            .collect();
                        enc.assert(&implies(
                            &and(vec![sel.clone(), same_link]),
                            &or(consumed_earlier),
                        ));
                    }
                }
            }
        }
    }

    // Oracle consistency: same instance, same function, equal arguments,
    // equal results across timesteps.
    enc.comment("oracle consistency");
    let mbx: Vec<&MiddleboxInstance> = enc.net.middleboxes().collect();
    for (mi, m) in mbx.iter().enumerate() {
        for o in &m.model.oracles {
            let argw: usize = o.args.iter().map(|(_, s)| sort_width(s)).sum();
            for t in 0..depth {
                for u in 0..t {
                    let both = and(vec![
                        format!("ou_m{mi}_{}_{t}", o.name),
                        format!("ou_m{mi}_{}_{u}", o.name),
                    ]);
                    let args_eq = and((0..argw)
                        .map(|ac| {
                            eq(
                                &format!("oa_m{mi}_{}_{t}_{ac}", o.name),
                                format!("oa_m{mi}_{}_{u}_{ac}", o.name),
                            )
                        })
                        .collect());
                    enc.assert(&implies(
                        &and(vec![both, args_eq]),
                        &eq(&format!("ov_m{mi}_{}_{t}", o.name), format!("ov_m{mi}_{}_{u}", o.name)),
                    ));
                }
            }
        }
    }

    // Class-bit consistency per flow, plus mutual exclusions.
    enc.comment("classification consistency");
    let mut class_names: Vec<String> = Vec::new();
    let mut exclusions: Vec<(String, String)> = Vec::new();
    for m in &mbx {
        for cl in &m.model.classes {
            if !class_names.contains(&cl.name) {
                class_names.push(cl.name.clone());
            }
            for e in &cl.excludes {
                let pair = if cl.name < *e {
                    (cl.name.clone(), e.clone())
                } else {
                    (e.clone(), cl.name.clone())
                };
                if !exclusions.contains(&pair) {
                    exclusions.push(pair);
                }
            }
        }
    }
    for cl in &class_names {
        for t in 0..depth {
            for u in 0..t {
                let flow_eq = and(vec![
                    eq(&format!("flo{t}"), format!("flo{u}")),
                    eq(&format!("fhi{t}"), format!("fhi{u}")),
                ]);
                enc.assert(&implies(
                    &flow_eq,
                    &eq(&format!("cl_{cl}_{t}"), format!("cl_{cl}_{u}")),
                ));
            }
        }
    }
    for (c1, c2) in &exclusions {
        for t in 0..depth {
            for u in 0..depth {
                let flow_eq = and(vec![
                    eq(&format!("flo{t}"), format!("flo{u}")),
                    eq(&format!("fhi{t}"), format!("fhi{u}")),
                ]);
                enc.assert(&implies(
                    &flow_eq,
                    &not(&and(vec![format!("cl_{c1}_{t}"), format!("cl_{c2}_{u}")])),
                ));
            }
        }
    }
}

fn encode_invariant(enc: &mut Enc, depth: u32, inv: &Invariant) {
    enc.comment("negated invariant");
    let mut cases = Vec::new();
    for t in 0..depth {
        let is_recv = eq(&format!("k{t}"), kinds::RECV);
        let at_target = eq(&format!("n{t}"), inv.target.0);
        let pred = encode_predicate(enc, &inv.predicate, t, inv.target);
        cases.push(and(vec![is_recv, at_target, pred]));
    }
    let violation = or(cases);
    enc.assert(&violation);
}

fn encode_predicate(enc: &Enc, pred: &Predicate, t: u32, target: NodeId) -> String {
    match pred {
        Predicate::SrcEquals(a) => eq(&format!("psrc{t}"), a.0),
        Predicate::OriginEquals(a) => eq(&format!("porig{t}"), a.0),
        Predicate::NoPriorOutboundFlow(src) => {
            let mut terms = vec![eq(&format!("psrc{t}"), src.0)];
            for u in 0..t {
                let emitted_same_flow = and(vec![
                    eq(&format!("k{u}"), kinds::EMIT),
                    eq(&format!("n{u}"), target.0),
                    eq(&format!("flo{u}"), format!("flo{t}")),
                    eq(&format!("fhi{u}"), format!("fhi{t}")),
                ]);
                terms.push(not(&emitted_same_flow));
            }
            and(terms)
        }
        Predicate::NotTraversed(r) => {
            let w = enc
                .watched
                .iter()
                .position(|x| x == r)
                .expect("watched refs collected from the predicate");
            not(&format!("intrav{w}_{t}"))
        }
        Predicate::And(items) => {
            and(items.iter().map(|p| encode_predicate(enc, p, t, target)).collect())
        }
        Predicate::Or(items) => {
            or(items.iter().map(|p| encode_predicate(enc, p, t, target)).collect())
        }
        Predicate::Not(inner) => not(&encode_predicate(enc, inner, t, target)),
    }
}

/// Well-formedness check used by tests: hosts of the network can appear as
/// NodeKind values in the encoding.
#[allow(dead_code)]
fn debug_kinds(net: &Network) -> usize {
    net.nodes().filter(|n| matches!(net.kind(*n), NodeKind::Host)).count()
}
