//! Event-sorted causal encoding (experimental, best-effort).
//!
//! Events are an uninterpreted sort; unary functions assign each event a
//! time, acting node, peer and packet fields; `snd`/`rcv` predicates mark
//! kinds; and a unary `cause` function maps every receive to the send that
//! produced it, with `cause(e) = e` on sends for idempotency. Middlebox
//! axioms are rewritten in the single-quantifier forall-event shape with
//! per-instance Skolem witness functions.
//!
//! The closure axioms that would guarantee solver termination are not
//! generated; scripts carry a best-effort banner and `unknown` outcomes are
//! expected. Models with map-shaped registers get weakened state
//! constraints (their send axioms omit the register conjuncts), which can
//! admit spurious violations but never masks a real one.

use std::fmt::Write as _;

use thiserror::Error;

use super::{ScriptMode, SmtScript};
use crate::invariant::{Invariant, Predicate};
use crate::mbx::{ContainerKind, Expr, Field, Guard, MiddleboxInstance, RegisterShape, Terminator};
use crate::net::Value;
use crate::network::Network;

#[derive(Debug, Error)]
#[error("network violates causal-encoding restriction: {criterion}")]
pub struct RestrictionViolated {
    pub criterion: String,
}

fn field_fn(f: Field) -> &'static str {
    match f {
        Field::Src => "fsrc",
        Field::Dst => "fdst",
        Field::SrcPort => "fsp",
        Field::DstPort => "fdp",
        Field::Origin => "forig",
        Field::Content => "fcont",
    }
}

/// Emits the causal-mode script for an isolation invariant.
pub fn encode_causal(net: &Network, inv: &Invariant) -> Result<SmtScript, RestrictionViolated> {
    // Restriction 1: passive middleboxes. Structural in this language:
    // models only emit packets from rule terminators while processing.
    // Restriction 2: bounded sends per packet.
    for m in net.middleboxes() {
        if m.model.output_bound() == 0 && m.model.rules.iter().all(|r| r.output_bound() == 0) {
            continue;
        }
        if m.model.output_bound() > 8 {
            return Err(RestrictionViolated {
                criterion: format!(
                    "middlebox {} may send {} packets per input; causal mode requires a small static bound",
                    m.name,
                    m.model.output_bound()
                ),
            });
        }
    }
    // Restriction 3: loop-free pipelines (static loops already rejected by
    // transfer computation).
    crate::netfunc::compute_transfer(net, &crate::net::FailureScenario::none()).map_err(|e| {
        RestrictionViolated { criterion: format!("static forwarding loop: {e}") }
    })?;
    // Practical restriction: failures are not modeled in causal mode.
    if inv.max_failures > 0 {
        return Err(RestrictionViolated {
            criterion: "failure budgets are not supported in causal mode".to_string(),
        });
    }
    if inv.predicate.mbx_refs().iter().next().is_some() {
        return Err(RestrictionViolated {
            criterion: "traversal predicates are not supported in causal mode".to_string(),
        });
    }

    let mut s = String::new();
    let _ = writeln!(s, "; causal event encoding (best-effort: no closure axioms)");
    let _ = writeln!(s, "; expect unknown outcomes on some solvers");
    let _ = writeln!(s, "(set-logic UFLIA)");
    let _ = writeln!(s, "(declare-sort Ev 0)");
    for decl in [
        "(declare-fun tm (Ev) Int)",
        "(declare-fun is-snd (Ev) Bool)",
        "(declare-fun is-rcv (Ev) Bool)",
        "(declare-fun node (Ev) Int)",
        "(declare-fun peer (Ev) Int)",
        "(declare-fun fsrc (Ev) Int)",
        "(declare-fun fdst (Ev) Int)",
        "(declare-fun fsp (Ev) Int)",
        "(declare-fun fdp (Ev) Int)",
        "(declare-fun forig (Ev) Int)",
        "(declare-fun fcont (Ev) Int)",
        "(declare-fun cause (Ev) Ev)",
    ] {
        let _ = writeln!(s, "{decl}");
    }

    let a = net.universe.addresses().count() as i64;
    let p = net.universe.ports().count() as i64;
    let c = net.universe.contents().count() as i64;

    let _ = writeln!(s, "; field ranges");
    let _ = writeln!(
        s,
        "(assert (forall ((e Ev)) (and (>= (fsrc e) 0) (< (fsrc e) {a}) (>= (fdst e) 0) (< (fdst e) {a}) (>= (forig e) 0) (< (forig e) {a}) (>= (fsp e) 0) (< (fsp e) {p}) (>= (fdp e) 0) (< (fdp e) {p}) (>= (fcont e) 0) (< (fcont e) {c}))))"
    );
    let n_nodes = net.nodes().count() as i64;
    let _ = writeln!(s, "; node ranges");
    let _ = writeln!(
        s,
        "(assert (forall ((e Ev)) (and (>= (node e) 0) (< (node e) {n_nodes}) (>= (peer e) 0) (< (peer e) {n_nodes}))))"
    );
    let _ = writeln!(s, "; every event is a send or a receive, never both");
    let _ = writeln!(
        s,
        "(assert (forall ((e Ev)) (and (or (is-snd e) (is-rcv e)) (not (and (is-snd e) (is-rcv e))))))"
    );
    let _ = writeln!(s, "; receives are caused by field-identical earlier sends on the link");
    let _ = writeln!(
        s,
        "(assert (forall ((e Ev)) (=> (is-rcv e) (and (is-snd (cause e)) (< (tm (cause e)) (tm e)) (= (node (cause e)) (peer e)) (= (peer (cause e)) (node e)) (= (fsrc (cause e)) (fsrc e)) (= (fdst (cause e)) (fdst e)) (= (fsp (cause e)) (fsp e)) (= (fdp (cause e)) (fdp e)) (= (forig (cause e)) (forig e)) (= (fcont (cause e)) (fcont e))))))"
    );
    let _ = writeln!(s, "; a send has no cause: cause is the identity on sends");
    let _ = writeln!(s, "(assert (forall ((e Ev)) (=> (is-snd e) (= (cause e) e))))");

    // Host axioms: hosts send only their own address toward omega.
    let omega = net.omega().0;
    let _ = writeln!(s, "; host egress axioms");
    for h in net.hosts() {
        let _ = writeln!(
            s,
            "(assert (forall ((e Ev)) (=> (and (is-snd e) (= (node e) {})) (and (= (fsrc e) {}) (= (forig e) {}) (= (peer e) {omega})))))",
            h.id.0, h.address.0, h.address.0
        );
    }

    // Omega axioms: a send by omega goes to the node resolved for its
    // destination and requires a prior receive of the packet at omega. The
    // existential receive is Skolemized by a witness function.
    let _ = writeln!(s, "; pseudo-node routing axioms");
    let _ = writeln!(s, "(declare-fun omega-wit (Ev) Ev)");
    let tf = crate::netfunc::compute_transfer(net, &crate::net::FailureScenario::none())
        .expect("checked above");
    for dst in net.universe.addresses() {
        let mut targets: Vec<u32> = Vec::new();
        for (_, d, next) in tf.entries() {
            if d == dst && !targets.contains(&next.0) {
                targets.push(next.0);
            }
        }
        targets.sort_unstable();
        let head = format!("(and (is-snd e) (= (node e) {omega}) (= (fdst e) {}))", dst.0);
        if targets.is_empty() {
            let _ = writeln!(s, "(assert (forall ((e Ev)) (not {head})))");
        } else {
            let goes: Vec<String> =
                targets.iter().map(|n| format!("(= (peer e) {n})")).collect();
            let goes = if goes.len() == 1 {
                goes.into_iter().next().unwrap()
            } else {
                format!("(or {})", goes.join(" "))
            };
            let wit = "(and (is-rcv (omega-wit e)) (= (node (omega-wit e)) OMEGA) (< (tm (omega-wit e)) (tm e)) (= (fsrc (omega-wit e)) (fsrc e)) (= (fdst (omega-wit e)) (fdst e)) (= (fsp (omega-wit e)) (fsp e)) (= (fdp (omega-wit e)) (fdp e)) (= (forig (omega-wit e)) (forig e)) (= (fcont (omega-wit e)) (fcont e)))".replace("OMEGA", &omega.to_string());
            let _ = writeln!(s, "(assert (forall ((e Ev)) (=> {head} (and {goes} {wit}))))");
            // Ingress sensitivity: the delivered node is resolved from the
            // sender the packet was received from.
            for &n in &targets {
                let mut sources: Vec<u32> = Vec::new();
                for (from, d, next) in tf.entries() {
                    if d == dst && next.0 == n && !sources.contains(&from.0) {
                        sources.push(from.0);
                    }
                }
                sources.sort_unstable();
                let feeds: Vec<String> = sources
                    .iter()
                    .map(|n2| format!("(= (peer (omega-wit e)) {n2})"))
                    .collect();
                let feeds = if feeds.len() == 1 {
                    feeds.into_iter().next().unwrap()
                } else {
                    format!("(or {})", feeds.join(" "))
                };
                let _ = writeln!(
                    s,
                    "(assert (forall ((e Ev)) (=> (and {head} (= (peer e) {n})) {feeds})))"
                );
            }
        }
    }

    // Middlebox send axioms. Middleboxes attach to the pseudo-node only.
    let _ = writeln!(s, "; middlebox send axioms");
    for inst in net.middleboxes() {
        let _ = writeln!(
            s,
            "(assert (forall ((e Ev)) (=> (and (is-snd e) (= (node e) {})) (= (peer e) {omega}))))",
            inst.id.0
        );
        emit_mbx_axioms(&mut s, net, inst);
    }

    // Negated invariant as a Skolem constant.
    let _ = writeln!(s, "; negated invariant");
    let _ = writeln!(s, "(declare-const violation Ev)");
    let _ = writeln!(s, "(assert (is-rcv violation))");
    let _ = writeln!(s, "(assert (= (node violation) {}))", inv.target.0);
    let pred = predicate_term(&inv.predicate, inv.target.0);
    let _ = writeln!(s, "(assert {pred})");

    Ok(SmtScript { text: s, mode: ScriptMode::Causal, symbols: vec![] })
}

fn predicate_term(pred: &Predicate, target: u32) -> String {
    match pred {
        Predicate::SrcEquals(a) => format!("(= (fsrc violation) {})", a.0),
        Predicate::OriginEquals(a) => format!("(= (forig violation) {})", a.0),
        Predicate::NoPriorOutboundFlow(src) => {
            // No prior send by the target in the same flow: a universally
            // quantified non-existence over events.
            let target_snd = format!("(and (is-snd w) (= (node w) {target}))");
            let same_flow = "(or (and (= (fsrc w) (fdst violation)) (= (fsp w) (fdp violation)) (= (fdst w) (fsrc violation)) (= (fdp w) (fsp violation))) (and (= (fsrc w) (fsrc violation)) (= (fsp w) (fsp violation)) (= (fdst w) (fdst violation)) (= (fdp w) (fdp violation))))";
            format!(
                "(and (= (fsrc violation) {}) (forall ((w Ev)) (not (and {} {} (< (tm w) (tm violation))))))",
                src.0, target_snd, same_flow
            )
        }
        Predicate::NotTraversed(_) => unreachable!("rejected earlier"),
        Predicate::And(items) => format!(
            "(and {})",
            items.iter().map(|i| predicate_term(i, target)).collect::<Vec<_>>().join(" ")
        ),
        Predicate::Or(items) => format!(
            "(or {})",
            items.iter().map(|i| predicate_term(i, target)).collect::<Vec<_>>().join(" ")
        ),
        Predicate::Not(inner) => format!("(not {})", predicate_term(inner, target)),
    }
}

/// Emits per-instance send axioms. Set registers over flows produce the
/// witness-receive shape; map registers are weakened (documented above).
fn emit_mbx_axioms(s: &mut String, net: &Network, inst: &MiddleboxInstance) {
    let m = inst.id.0;
    let model = &inst.model;
    let has_map_register = model
        .registers
        .iter()
        .any(|r| matches!(r.shape, RegisterShape::MapOf(..)));

    // The causal witness for the triggering receive, plus establishment
    // witnesses for flow-set registers.
    let witfn = format!("mbcause_{m}");
    let _ = writeln!(s, "(declare-fun {witfn} (Ev) Ev)");
    for reg in &model.registers {
        if matches!(reg.shape, RegisterShape::SetOf(_)) {
            let _ = writeln!(s, "(declare-fun estwit_{m}_{} (Ev) Ev)", reg.name);
        }
    }

    // Identity-forwarding rules contribute guard disjuncts over the sent
    // packet, conjoined with the negations of every earlier (expressible)
    // guard to reflect first-match order; rewriting rules or map-register
    // models weaken to the bare receive-causality conjunct. Inexpressible
    // negations are dropped, which only weakens the axiom.
    let mut disjuncts: Vec<String> = Vec::new();
    let mut weakened = has_map_register;
    for (ri, rule) in model.rules.iter().enumerate() {
        if matches!(rule.terminator, Terminator::Drop) {
            continue;
        }
        // Identity means the packet is forwarded unmodified; state writes
        // are fine.
        if rule
            .actions
            .iter()
            .any(|a| matches!(a, crate::mbx::Action::FieldAssign { .. }))
        {
            weakened = true;
            continue;
        }
        match guard_term(&rule.guard, inst, net) {
            Some(g) => {
                let mut conj = vec![g];
                for prev in model.rules.iter().take(ri) {
                    // Negations are only sound for witness-free guards
                    // (config membership and field comparisons); witness
                    // shapes cannot be negated and are dropped, which
                    // weakens the consequent.
                    if let Some(pg) = negatable_guard_term(&prev.guard, inst, net) {
                        conj.push(format!("(not {pg})"));
                    }
                }
                let conj: Vec<String> =
                    conj.into_iter().filter(|c| c != "true").collect();
                disjuncts.push(match conj.len() {
                    0 => "true".to_string(),
                    1 => conj.into_iter().next().unwrap(),
                    _ => format!("(and {})", conj.join(" ")),
                });
            }
            None => {
                // A forwarding rule with an inexpressible guard admits
                // everything this encoding can say.
                disjuncts.clear();
                weakened = true;
                break;
            }
        }
    }

    let rcv_shape = format!(
        "(and (is-rcv ({witfn} e)) (= (node ({witfn} e)) {m}) (< (tm ({witfn} e)) (tm e)) (= (fsrc ({witfn} e)) (fsrc e)) (= (fdst ({witfn} e)) (fdst e)) (= (fsp ({witfn} e)) (fsp e)) (= (fdp ({witfn} e)) (fdp e)))"
    );
    let body = if weakened || disjuncts.is_empty() {
        rcv_shape
    } else {
        format!("(and {rcv_shape} (or {}))", disjuncts.join(" "))
    };
    let _ = writeln!(
        s,
        "(assert (forall ((e Ev)) (=> (and (is-snd e) (= (node e) {m})) {body})))"
    );
}

/// Translates a guard into a causal-mode term over the sent event `e`, when
/// expressible: packet-field comparisons against config constants, config
/// set membership, and flow-set registers via an establishment witness.
fn guard_term(guard: &Guard, inst: &MiddleboxInstance, net: &Network) -> Option<String> {
    let m = inst.id.0;
    match guard {
        Guard::True => Some("true".to_string()),
        Guard::FailSelf => None,
        Guard::Eq(a, b) => Some(format!("(= {} {})", expr_term(a, inst)?, expr_term(b, inst)?)),
        Guard::Ne(a, b) => {
            Some(format!("(not (= {} {}))", expr_term(a, inst)?, expr_term(b, inst)?))
        }
        Guard::Contains { container, kind, arg } => match kind {
            ContainerKind::ParamSet => {
                let crate::mbx::ConfigValue::Set(items) = &inst.config[container] else {
                    return None;
                };
                let needle = match &**arg {
                    Expr::Tuple(items) => items
                        .iter()
                        .map(|e| expr_term(e, inst))
                        .collect::<Option<Vec<_>>>()?,
                    other => vec![expr_term(other, inst)?],
                };
                let mut alts = Vec::new();
                for item in items {
                    let comps: Vec<i64> = item
                        .iter()
                        .flat_map(|v| causal_value_comps(v, net))
                        .collect();
                    if comps.len() != needle.len() {
                        return None;
                    }
                    let eqs: Vec<String> = needle
                        .iter()
                        .zip(&comps)
                        .map(|(t, c)| format!("(= {t} {c})"))
                        .collect();
                    alts.push(format!("(and {})", eqs.join(" ")));
                }
                if alts.is_empty() {
                    Some("false".to_string())
                } else {
                    Some(format!("(or {})", alts.join(" ")))
                }
            }
            ContainerKind::SetRegister => {
                // Flow-set membership: some permitted packet of the same
                // flow was received earlier; Skolemized establishment
                // witness per instance.
                if !matches!(&**arg, Expr::FlowOfPkt) {
                    return None;
                }
                let wit = format!("estwit_{m}_{container}");
                // Declared lazily by the caller pattern: emit inline here.
                // The declaration is idempotent per instance because each
                // register appears in at most one guard disjunct set.
                let same_flow = format!(
                    "(or (and (= (fsrc ({wit} e)) (fsrc e)) (= (fsp ({wit} e)) (fsp e)) (= (fdst ({wit} e)) (fdst e)) (= (fdp ({wit} e)) (fdp e))) (and (= (fsrc ({wit} e)) (fdst e)) (= (fsp ({wit} e)) (fdp e)) (= (fdst ({wit} e)) (fsrc e)) (= (fdp ({wit} e)) (fsp e))))"
                );
                // Permission of the witness: the disjunction of non-register
                // guards of rules that write this register.
                let mut perms = Vec::new();
                for rule in &inst.model.rules {
                    let writes = rule.actions.iter().any(|a| {
                        matches!(a, crate::mbx::Action::SetAdd { register, .. } if register == container)
                    });
                    if writes {
                        if let Some(g) = guard_perm_over_witness(&rule.guard, inst, net, &wit) {
                            perms.push(g);
                        }
                    }
                }
                let perm = if perms.is_empty() {
                    "true".to_string()
                } else {
                    format!("(or {})", perms.join(" "))
                };
                Some(format!(
                    "(and (is-rcv ({wit} e)) (= (node ({wit} e)) {m}) (<= (tm ({wit} e)) (tm e)) {same_flow} {perm})"
                ))
            }
            ContainerKind::MapRegisterKey => None,
        },
        Guard::Class(_) => None,
        Guard::Not(inner) => Some(format!("(not {})", guard_term(inner, inst, net)?)),
        Guard::And(a, b) => Some(format!(
            "(and {} {})",
            guard_term(a, inst, net)?,
            guard_term(b, inst, net)?
        )),
        Guard::Or(a, b) => Some(format!(
            "(or {} {})",
            guard_term(a, inst, net)?,
            guard_term(b, inst, net)?
        )),
    }
}

/// A guard translation that is sound to negate: only config membership and
/// packet-field comparisons, no Skolem witnesses.
fn negatable_guard_term(
    guard: &Guard,
    inst: &MiddleboxInstance,
    net: &Network,
) -> Option<String> {
    match guard {
        Guard::Contains { kind: ContainerKind::SetRegister, .. }
        | Guard::Contains { kind: ContainerKind::MapRegisterKey, .. }
        | Guard::Class(_)
        | Guard::FailSelf => None,
        Guard::Not(inner) => Some(format!("(not {})", negatable_guard_term(inner, inst, net)?)),
        Guard::And(a, b) => Some(format!(
            "(and {} {})",
            negatable_guard_term(a, inst, net)?,
            negatable_guard_term(b, inst, net)?
        )),
        Guard::Or(a, b) => Some(format!(
            "(or {} {})",
            negatable_guard_term(a, inst, net)?,
            negatable_guard_term(b, inst, net)?
        )),
        other => guard_term(other, inst, net),
    }
}

/// Config-membership guards of a writing rule, re-expressed over the
/// witness event.
fn guard_perm_over_witness(
    guard: &Guard,
    inst: &MiddleboxInstance,
    net: &Network,
    wit: &str,
) -> Option<String> {
    match guard {
        Guard::Contains { container, kind: ContainerKind::ParamSet, arg } => {
            let crate::mbx::ConfigValue::Set(items) = &inst.config[container] else {
                return None;
            };
            let needle: Vec<String> = match &**arg {
                Expr::Tuple(items) => items
                    .iter()
                    .map(|e| expr_term_over(e, wit))
                    .collect::<Option<Vec<_>>>()?,
                other => vec![expr_term_over(other, wit)?],
            };
            let mut alts = Vec::new();
            for item in items {
                let comps: Vec<i64> =
                    item.iter().flat_map(|v| causal_value_comps(v, net)).collect();
                if comps.len() != needle.len() {
                    return None;
                }
                let eqs: Vec<String> = needle
                    .iter()
                    .zip(&comps)
                    .map(|(t, c)| format!("(= {t} {c})"))
                    .collect();
                alts.push(format!("(and {})", eqs.join(" ")));
            }
            Some(format!("(or {})", alts.join(" ")))
        }
        Guard::And(a, b) => {
            match (
                guard_perm_over_witness(a, inst, net, wit),
                guard_perm_over_witness(b, inst, net, wit),
            ) {
                (Some(x), Some(y)) => Some(format!("(and {x} {y})")),
                (Some(x), None) | (None, Some(x)) => Some(x),
                (None, None) => None,
            }
        }
        _ => None,
    }
}

fn causal_value_comps(v: &Value, net: &Network) -> Vec<i64> {
    let p = net.universe.ports().count() as i64;
    match v {
        Value::Addr(a) => vec![a.0 as i64],
        Value::Port(q) => vec![q.0 as i64],
        Value::Content(c) => vec![c.0 as i64],
        Value::Flow(f) => vec![
            f.lo.0 .0 as i64 * p + f.lo.1 .0 as i64,
            f.hi.0 .0 as i64 * p + f.hi.1 .0 as i64,
        ],
        Value::Tuple(items) => items.iter().flat_map(|i| causal_value_comps(i, net)).collect(),
    }
}

/// Packet-field expressions over the sent event `e`.
fn expr_term(e: &Expr, inst: &MiddleboxInstance) -> Option<String> {
    match e {
        Expr::PktField(f) => Some(format!("({} e)", field_fn(*f))),
        Expr::Param(name) => match inst.config.get(name) {
            Some(crate::mbx::ConfigValue::Scalar(Value::Addr(a))) => Some(a.0.to_string()),
            Some(crate::mbx::ConfigValue::Scalar(Value::Port(p))) => Some(p.0.to_string()),
            Some(crate::mbx::ConfigValue::Scalar(Value::Content(c))) => Some(c.0.to_string()),
            _ => None,
        },
        _ => None,
    }
}

/// Packet-field expressions over a witness event application.
fn expr_term_over(e: &Expr, wit: &str) -> Option<String> {
    match e {
        Expr::PktField(f) => Some(format!("({} ({wit} e))", field_fn(*f))),
        _ => None,
    }
}
