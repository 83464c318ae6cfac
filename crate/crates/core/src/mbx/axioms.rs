//! Mechanical derivation of per-instance logical axioms from a model.
//!
//! Two families are derived per instance, with instance-specific symbol
//! names substituted so several instances of one model coexist:
//!
//! * one state-characterization axiom per register: a register can only
//!   contain a value if some packet received since the last failure was
//!   processed by a rule that writes that value, under that rule's guard;
//! * one send axiom: every packet the instance sends was received by it in
//!   the past (possibly rewritten by the fired rule), under that rule's
//!   guard; fail-open instances may instead forward while failed.
//!
//! First-match negations of earlier guards are deliberately omitted from
//! the right-hand sides; dropping conjuncts from a consequent only weakens
//! the statement, so the axioms stay true of the interpreter.

use crate::logic::{Atom, Formula, FormulaTemplate, Term};
use crate::mbx::ast::*;
use crate::net::NodeId;

/// Symbolic value of the packet fields and locals at a program point.
#[derive(Clone)]
struct SymEnv {
    instance: NodeId,
    var: String,
    fields: std::collections::BTreeMap<Field, Term>,
    locals: std::collections::BTreeMap<String, Term>,
}

impl SymEnv {
    fn fresh(instance: NodeId, var: &str) -> SymEnv {
        let fields = Field::ALL
            .iter()
            .map(|f| (*f, Term::PktField { var: var.to_string(), field: *f }))
            .collect();
        SymEnv {
            instance,
            var: var.to_string(),
            fields,
            locals: std::collections::BTreeMap::new(),
        }
    }

    fn term_of(&self, e: &Expr) -> Term {
        match e {
            Expr::PktField(f) => self.fields[f].clone(),
            Expr::FlowOfPkt => {
                // flow() of a rewritten packet has no dedicated term; keep it
                // exact only while all endpoint fields are still original.
                let original = [Field::Src, Field::Dst, Field::SrcPort, Field::DstPort]
                    .iter()
                    .all(|f| {
                        matches!(&self.fields[f],
                            Term::PktField { var, field } if *var == self.var && field == f)
                    });
                if original {
                    Term::FlowOf { var: self.var.clone() }
                } else {
                    Term::Tuple(vec![
                        self.fields[&Field::Src].clone(),
                        self.fields[&Field::SrcPort].clone(),
                        self.fields[&Field::Dst].clone(),
                        self.fields[&Field::DstPort].clone(),
                    ])
                }
            }
            Expr::Pkt => Term::Tuple(Field::ALL.iter().map(|f| self.fields[f].clone()).collect()),
            Expr::Local(name) => self.locals[name].clone(),
            Expr::Param(name) => {
                Term::Param { instance: self.instance, name: name.clone() }
            }
            Expr::OracleCall { name, args } => Term::OracleApp {
                instance: self.instance,
                name: name.clone(),
                args: args.iter().map(|a| self.term_of(a)).collect(),
            },
            Expr::MapGet { register, key } => Term::RegLookup {
                instance: self.instance,
                register: register.clone(),
                key: Box::new(self.term_of(key)),
            },
            Expr::TupleIndex(inner, i) => Term::Proj(Box::new(self.term_of(inner)), *i),
            Expr::Tuple(items) => {
                Term::Tuple(items.iter().map(|i| self.term_of(i)).collect())
            }
        }
    }

    fn apply(&mut self, action: &Action) {
        match action {
            Action::Let { name, expr } => {
                let t = self.term_of(expr);
                self.locals.insert(name.clone(), t);
            }
            Action::FieldAssign { field, expr } => {
                let t = self.term_of(expr);
                self.fields.insert(*field, t);
            }
            Action::SetAdd { .. } | Action::MapPut { .. } => {}
        }
    }
}

fn flatten_term(t: Term) -> Vec<Term> {
    match t {
        Term::Tuple(items) => items,
        other => vec![other],
    }
}

/// Translates a guard into a formula over the given packet variable.
fn guard_formula(inst: &MiddleboxInstance, env: &SymEnv, g: &Guard) -> Option<Formula> {
    match g {
        Guard::True => None,
        Guard::FailSelf => Some(Formula::Atom(Atom::Fail { node: inst.id })),
        Guard::Eq(a, b) => Some(Formula::Atom(Atom::Eq {
            lhs: env.term_of(a),
            rhs: env.term_of(b),
        })),
        Guard::Ne(a, b) => Some(Formula::not(Formula::Atom(Atom::Eq {
            lhs: env.term_of(a),
            rhs: env.term_of(b),
        }))),
        Guard::Contains { container, kind, arg } => {
            let args = flatten_term(env.term_of(arg));
            let atom = match kind {
                ContainerKind::SetRegister | ContainerKind::MapRegisterKey => Atom::RegContains {
                    instance: inst.id,
                    register: container.clone(),
                    args,
                },
                ContainerKind::ParamSet => Atom::ConfigContains {
                    instance: inst.id,
                    param: container.clone(),
                    args,
                },
            };
            Some(Formula::Atom(atom))
        }
        Guard::Class(name) => Some(Formula::Atom(Atom::ClassIs {
            class: name.clone(),
            var: env.var.clone(),
        })),
        Guard::Not(inner) => guard_formula(inst, env, inner).map(Formula::not),
        Guard::And(a, b) => match (guard_formula(inst, env, a), guard_formula(inst, env, b)) {
            (Some(fa), Some(fb)) => Some(Formula::and(vec![fa, fb])),
            (Some(f), None) | (None, Some(f)) => Some(f),
            (None, None) => None,
        },
        Guard::Or(a, b) => {
            let fa = guard_formula(inst, env, a)?;
            let fb = guard_formula(inst, env, b)?;
            Some(Formula::or(vec![fa, fb]))
        }
    }
}

/// `past(!fail(m) && past(rcv(m, var)))`: the packet was received since the
/// instance last failed.
fn received_since_failure(instance: NodeId, var: &str) -> Formula {
    Formula::past(Formula::and(vec![
        Formula::not(Formula::Atom(Atom::Fail { node: instance })),
        Formula::past(Formula::Atom(Atom::Rcv { node: instance, var: var.to_string() })),
    ]))
}

/// Derives the axiom templates for one instance.
pub fn axiom_templates(inst: &MiddleboxInstance) -> Vec<FormulaTemplate> {
    let model = &inst.model;
    let mut out = Vec::new();

    // State characterization, one axiom per register.
    for reg in &model.registers {
        // Writers: (written tuple term under "q", guard formula under "q").
        let mut writers: Vec<(Vec<Term>, Option<Formula>)> = Vec::new();
        for rule in &model.rules {
            let mut env = SymEnv::fresh(inst.id, "q");
            let guard = guard_formula(inst, &env, &rule.guard);
            for action in &rule.actions {
                match action {
                    Action::SetAdd { register, tuple } if *register == reg.name => {
                        writers.push((flatten_term(env.term_of(tuple)), guard.clone()));
                    }
                    Action::MapPut { register, key, value } if *register == reg.name => {
                        let mut args = flatten_term(env.term_of(key));
                        args.extend(flatten_term(env.term_of(value)));
                        writers.push((args, guard.clone()));
                    }
                    _ => {}
                }
                env.apply(action);
            }
        }
        if writers.is_empty() {
            continue;
        }
        // LHS pattern: the first writer's tuple expressed over "p".
        let lhs_pattern: Vec<Term> = {
            let mut env = SymEnv::fresh(inst.id, "p");
            let mut pattern = None;
            for rule in &model.rules {
                for action in &rule.actions {
                    match action {
                        Action::SetAdd { register, tuple } if *register == reg.name => {
                            if pattern.is_none() {
                                pattern = Some(flatten_term(env.term_of(tuple)));
                            }
                        }
                        Action::MapPut { register, key, value } if *register == reg.name => {
                            if pattern.is_none() {
                                let mut args = flatten_term(env.term_of(key));
                                args.extend(flatten_term(env.term_of(value)));
                                pattern = Some(args);
                            }
                        }
                        _ => {}
                    }
                    env.apply(action);
                }
                if pattern.is_some() {
                    break;
                }
            }
            pattern.unwrap()
        };

        let lhs = Formula::Atom(Atom::RegContains {
            instance: inst.id,
            register: reg.name.clone(),
            args: lhs_pattern.clone(),
        });
        let disjuncts: Vec<Formula> = writers
            .iter()
            .map(|(written, guard)| {
                let mut conj = vec![received_since_failure(inst.id, "q")];
                if let Some(g) = guard {
                    conj.push(g.clone());
                }
                // The witness packet wrote exactly the value the register
                // holds.
                for (w, l) in written.iter().zip(&lhs_pattern) {
                    conj.push(Formula::Atom(Atom::Eq { lhs: w.clone(), rhs: l.clone() }));
                }
                Formula::ExistsPkt { var: "q".into(), body: Box::new(Formula::and(conj)) }
            })
            .collect();

        out.push(FormulaTemplate {
            name: format!("{}_{}_characterization", inst.name, reg.name),
            formula: Formula::ForallPkts {
                vars: vec!["p".into()],
                body: Box::new(Formula::Always(Box::new(Formula::implies(
                    lhs,
                    Formula::or(disjuncts),
                )))),
            },
        });
    }

    // Send axiom.
    let mut identity_guards: Vec<Option<Formula>> = Vec::new();
    let mut rewriting: Vec<Formula> = Vec::new();
    let mut all_identity = true;
    for rule in &model.rules {
        if rule.output_bound() == 0 {
            continue;
        }
        let mut env = SymEnv::fresh(inst.id, "q");
        let guard = guard_formula(inst, &env, &rule.guard);
        for action in &rule.actions {
            env.apply(action);
        }
        let is_identity = Field::ALL.iter().all(|f| {
            matches!(&env.fields[f], Term::PktField { var, field } if var == "q" && field == f)
        });
        if is_identity {
            identity_guards.push(guard);
        } else {
            all_identity = false;
            // exists q: past(rcv(m, q)) && guard(q) && field relations
            let mut conj = vec![Formula::past(Formula::Atom(Atom::Rcv {
                node: inst.id,
                var: "q".into(),
            }))];
            if let Some(g) = guard {
                conj.push(g);
            }
            for f in Field::ALL {
                conj.push(Formula::Atom(Atom::Eq {
                    lhs: Term::PktField { var: "p".into(), field: f },
                    rhs: env.fields[&f].clone(),
                }));
            }
            rewriting.push(Formula::ExistsPkt { var: "q".into(), body: Box::new(Formula::and(conj)) });
        }
    }

    let snd = Formula::Atom(Atom::Snd { node: inst.id, var: "p".into() });
    let mut rhs = if all_identity {
        // Matches the classic firewall form: the sent packet itself was
        // received, and one of the forwarding guards held.
        let rcv = Formula::past(Formula::Atom(Atom::Rcv { node: inst.id, var: "p".into() }));
        let identity_env = SymEnv::fresh(inst.id, "p");
        let guards: Vec<Formula> = {
            let mut gs = Vec::new();
            for rule in &model.rules {
                if rule.output_bound() == 0 {
                    continue;
                }
                match guard_formula(inst, &identity_env, &rule.guard) {
                    Some(g) => gs.push(g),
                    // An unconditional forwarding rule admits everything.
                    None => {
                        gs.clear();
                        break;
                    }
                }
            }
            gs
        };
        if guards.is_empty() {
            rcv
        } else {
            Formula::and(vec![rcv, Formula::or(guards)])
        }
    } else {
        // Identity rules keep "p" directly; rewriting rules use a witness.
        let mut disjuncts = Vec::new();
        for guard in identity_guards {
            let mut conj = vec![Formula::past(Formula::Atom(Atom::Rcv {
                node: inst.id,
                var: "p".into(),
            }))];
            if let Some(g) = guard.map(|f| rename_var(f, "q", "p")) {
                conj.push(g);
            }
            disjuncts.push(Formula::and(conj));
        }
        disjuncts.extend(rewriting);
        Formula::or(disjuncts)
    };

    if matches!(model.failure, FailurePolicy::Open) {
        rhs = Formula::or(vec![
            rhs,
            Formula::and(vec![
                Formula::Atom(Atom::Fail { node: inst.id }),
                Formula::past(Formula::Atom(Atom::Rcv { node: inst.id, var: "p".into() })),
            ]),
        ]);
    }

    out.push(FormulaTemplate {
        name: format!("{}_send", inst.name),
        formula: Formula::ForallPkts {
            vars: vec!["p".into()],
            body: Box::new(Formula::Always(Box::new(Formula::implies(snd, rhs)))),
        },
    });

    out
}

fn rename_var(f: Formula, from: &str, to: &str) -> Formula {
    fn term(t: Term, from: &str, to: &str) -> Term {
        match t {
            Term::PktField { var, field } if var == from => {
                Term::PktField { var: to.to_string(), field }
            }
            Term::FlowOf { var } if var == from => Term::FlowOf { var: to.to_string() },
            Term::OracleApp { instance, name, args } => Term::OracleApp {
                instance,
                name,
                args: args.into_iter().map(|a| term(a, from, to)).collect(),
            },
            Term::RegLookup { instance, register, key } => Term::RegLookup {
                instance,
                register,
                key: Box::new(term(*key, from, to)),
            },
            Term::Proj(inner, i) => Term::Proj(Box::new(term(*inner, from, to)), i),
            Term::Tuple(items) => {
                Term::Tuple(items.into_iter().map(|a| term(a, from, to)).collect())
            }
            other => other,
        }
    }
    fn atom(a: Atom, from: &str, to: &str) -> Atom {
        match a {
            Atom::Rcv { node, var } if var == from => Atom::Rcv { node, var: to.to_string() },
            Atom::Snd { node, var } if var == from => Atom::Snd { node, var: to.to_string() },
            Atom::SndTo { node, to: n, var } if var == from => {
                Atom::SndTo { node, to: n, var: to.to_string() }
            }
            Atom::RegContains { instance, register, args } => Atom::RegContains {
                instance,
                register,
                args: args.into_iter().map(|t| term(t, from, to)).collect(),
            },
            Atom::ConfigContains { instance, param, args } => Atom::ConfigContains {
                instance,
                param,
                args: args.into_iter().map(|t| term(t, from, to)).collect(),
            },
            Atom::Eq { lhs, rhs } => {
                Atom::Eq { lhs: term(lhs, from, to), rhs: term(rhs, from, to) }
            }
            Atom::ClassIs { class, var } if var == from => {
                Atom::ClassIs { class, var: to.to_string() }
            }
            other => other,
        }
    }
    match f {
        Formula::Atom(a) => Formula::Atom(atom(a, from, to)),
        Formula::Not(inner) => Formula::not(rename_var(*inner, from, to)),
        Formula::And(items) => {
            Formula::And(items.into_iter().map(|i| rename_var(i, from, to)).collect())
        }
        Formula::Or(items) => {
            Formula::Or(items.into_iter().map(|i| rename_var(i, from, to)).collect())
        }
        Formula::Implies(a, b) => {
            Formula::implies(rename_var(*a, from, to), rename_var(*b, from, to))
        }
        Formula::Always(inner) => Formula::Always(Box::new(rename_var(*inner, from, to))),
        Formula::Past(inner) => Formula::past(rename_var(*inner, from, to)),
        Formula::ForallPkts { vars, body } => {
            Formula::ForallPkts { vars, body: Box::new(rename_var(*body, from, to)) }
        }
        Formula::ExistsPkt { var, body } => {
            Formula::ExistsPkt { var, body: Box::new(rename_var(*body, from, to)) }
        }
    }
}
