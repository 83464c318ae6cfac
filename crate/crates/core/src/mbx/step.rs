//! Concrete execution of one packet through one middlebox instance.
//!
//! `step` is a pure function of (state, packet, oracle environment): rules
//! are tried in source order, the first true guard fires, and its actions
//! run atomically. Guards short-circuit left to right. Failure policy is
//! applied before the rules: a failed fail-closed instance drops, a failed
//! fail-open instance forwards the packet unmodified, and an explicit model
//! sees `fail(self)` as a guard.

use std::collections::BTreeMap;

use thiserror::Error;

use super::ast::*;
use super::oracle::{OracleAnswer, OracleBinding, OracleEnv, OracleQuery};
use crate::net::{flow_of, Packet, Universe, Value};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum StepError {
    /// The oracle environment has no binding for a consulted query. The
    /// caller decides how to branch; `choices` lists the legal answers in
    /// canonical order.
    #[error("unbound oracle query {query:?}")]
    NeedOracle { query: OracleQuery, choices: Vec<OracleAnswer> },
    #[error("oracle value {value:?} outside the declared range of {query:?}")]
    OracleValueOutOfRange { query: OracleQuery, value: Value },
    /// A rule read a map key that is absent. This signals a model bug; the
    /// engines treat the packet as dropped and surface a diagnostic.
    #[error("map lookup miss on register {register:?} key {key:?}")]
    MapLookupMiss { register: String, key: Vec<Value> },
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: MbxState,
    pub forwarded: Vec<Packet>,
    /// Index of the fired rule; `None` when the failure policy decided the
    /// outcome without consulting the rules.
    pub fired_rule: Option<usize>,
    /// Every oracle consultation made while evaluating this packet.
    pub consulted: Vec<OracleBinding>,
}

struct EvalCtx<'a> {
    inst: &'a MiddleboxInstance,
    universe: &'a Universe,
    oracle: &'a OracleEnv,
    state: MbxState,
    pkt: Packet,
    locals: BTreeMap<String, Value>,
    consulted: Vec<OracleBinding>,
    failed_view: bool,
}

impl<'a> EvalCtx<'a> {
    fn model(&self) -> &MiddleboxModel {
        &self.inst.model
    }

    fn config(&self, name: &str) -> &ConfigValue {
        self.inst
            .config
            .get(name)
            .unwrap_or_else(|| panic!("instance {} missing config {name:?}", self.inst.name))
    }

    fn range_values(&self, range: &RangeExpr) -> Vec<Value> {
        match range {
            RangeExpr::Sort(Sort::Address) => {
                self.universe.addresses().map(Value::Addr).collect()
            }
            RangeExpr::Sort(Sort::Port) => self.universe.ports().map(Value::Port).collect(),
            RangeExpr::Sort(Sort::Content) => {
                self.universe.contents().map(Value::Content).collect()
            }
            RangeExpr::Sort(s) => panic!("oracle range over unsupported sort {s}"),
            RangeExpr::Param(p) => match self.config(p) {
                ConfigValue::Set(items) => items.iter().map(|t| tuple_value(t.clone())).collect(),
                ConfigValue::Scalar(_) => panic!("oracle range param {p:?} is not a set"),
            },
        }
    }

    fn consult_fn(&mut self, name: &str, args: Vec<Value>) -> Result<Value, StepError> {
        let query =
            OracleQuery::Fn { instance: self.inst.id, name: name.to_string(), args: args.clone() };
        let decl = self.model().oracle(name).expect("semantic analysis admits only declared fns");
        let range = self.range_values(&decl.range);
        match self.oracle.lookup_fn(self.inst.id, name, &args) {
            Some(v) => {
                if !range.contains(v) {
                    return Err(StepError::OracleValueOutOfRange { query, value: v.clone() });
                }
                self.consulted
                    .push(OracleBinding { query, answer: OracleAnswer::Value(v.clone()) });
                Ok(v.clone())
            }
            None => Err(StepError::NeedOracle {
                query,
                choices: range.into_iter().map(OracleAnswer::Value).collect(),
            }),
        }
    }

    fn consult_class(&mut self, class: &str) -> Result<bool, StepError> {
        let flow = flow_of(&self.pkt);
        let query = OracleQuery::Class { class: class.to_string(), flow };
        match self.oracle.lookup_class(class, flow) {
            Some(b) => {
                self.consulted.push(OracleBinding { query, answer: OracleAnswer::Bool(b) });
                Ok(b)
            }
            None => {
                let exclusions = self.model().exclusions_of(class);
                let conflict = self.oracle.excluded_conflict(exclusions, flow);
                let choices = if conflict {
                    vec![OracleAnswer::Bool(false)]
                } else {
                    vec![OracleAnswer::Bool(false), OracleAnswer::Bool(true)]
                };
                Err(StepError::NeedOracle { query, choices })
            }
        }
    }

    fn eval(&mut self, e: &Expr) -> Result<Value, StepError> {
        match e {
            Expr::PktField(f) => Ok(field_value(&self.pkt, *f)),
            Expr::FlowOfPkt => Ok(Value::Flow(flow_of(&self.pkt))),
            Expr::Pkt => Ok(packet_value(&self.pkt)),
            Expr::Local(name) => Ok(self
                .locals
                .get(name)
                .cloned()
                .unwrap_or_else(|| panic!("unbound local {name:?}"))),
            Expr::Param(name) => match self.config(name) {
                ConfigValue::Scalar(v) => Ok(v.clone()),
                ConfigValue::Set(_) => panic!("config set {name:?} used as scalar"),
            },
            Expr::OracleCall { name, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval(a)?);
                }
                self.consult_fn(name, vals)
            }
            Expr::MapGet { register, key } => {
                let key = to_tuple(self.eval(key)?);
                let idx = self.model().register_index(register).expect("declared register");
                match &self.state.registers[idx] {
                    RegValue::Map(m) => match m.get(&key) {
                        Some(v) => Ok(tuple_value(v.clone())),
                        None => {
                            Err(StepError::MapLookupMiss { register: register.clone(), key })
                        }
                    },
                    RegValue::Set(_) => panic!("indexed lookup on set register"),
                }
            }
            Expr::TupleIndex(inner, i) => match self.eval(inner)? {
                Value::Tuple(items) => Ok(items[*i].clone()),
                other => panic!("projection on non-tuple {other:?}"),
            },
            Expr::Tuple(items) => {
                let mut vals = Vec::with_capacity(items.len());
                for it in items {
                    vals.push(self.eval(it)?);
                }
                Ok(Value::Tuple(vals))
            }
        }
    }

    fn eval_guard(&mut self, g: &Guard) -> Result<bool, StepError> {
        match g {
            Guard::True => Ok(true),
            Guard::FailSelf => Ok(self.failed_view),
            Guard::Eq(a, b) => Ok(self.eval(a)? == self.eval(b)?),
            Guard::Ne(a, b) => Ok(self.eval(a)? != self.eval(b)?),
            Guard::Contains { container, kind, arg } => {
                let needle = to_tuple(self.eval(arg)?);
                match kind {
                    ContainerKind::SetRegister => {
                        let idx = self.model().register_index(container).expect("declared");
                        match &self.state.registers[idx] {
                            RegValue::Set(s) => Ok(s.contains(&needle)),
                            RegValue::Map(_) => panic!("set containment on map register"),
                        }
                    }
                    ContainerKind::MapRegisterKey => {
                        let idx = self.model().register_index(container).expect("declared");
                        match &self.state.registers[idx] {
                            RegValue::Map(m) => Ok(m.contains_key(&needle)),
                            RegValue::Set(_) => panic!("map containment on set register"),
                        }
                    }
                    ContainerKind::ParamSet => match self.config(container) {
                        ConfigValue::Set(s) => Ok(s.contains(&needle)),
                        ConfigValue::Scalar(_) => panic!("containment on scalar config"),
                    },
                }
            }
            Guard::Class(name) => self.consult_class(name),
            Guard::Not(inner) => Ok(!self.eval_guard(inner)?),
            Guard::And(a, b) => Ok(self.eval_guard(a)? && self.eval_guard(b)?),
            Guard::Or(a, b) => Ok(self.eval_guard(a)? || self.eval_guard(b)?),
        }
    }

    fn run_rules(mut self) -> Result<StepOutcome, StepError> {
        let model = self.inst.model.clone();
        for (i, rule) in model.rules.iter().enumerate() {
            self.locals.clear();
            if !self.eval_guard(&rule.guard)? {
                continue;
            }
            for action in &rule.actions {
                match action {
                    Action::Let { name, expr } => {
                        let v = self.eval(expr)?;
                        self.locals.insert(name.clone(), v);
                    }
                    Action::FieldAssign { field, expr } => {
                        let v = self.eval(expr)?;
                        assign_field(&mut self.pkt, *field, v);
                    }
                    Action::SetAdd { register, tuple } => {
                        let v = to_tuple(self.eval(tuple)?);
                        let idx = self.model().register_index(register).expect("declared");
                        match &mut self.state.registers[idx] {
                            RegValue::Set(s) => {
                                s.insert(v);
                            }
                            RegValue::Map(_) => panic!("'+=' on map register"),
                        }
                    }
                    Action::MapPut { register, key, value } => {
                        let k = to_tuple(self.eval(key)?);
                        let v = to_tuple(self.eval(value)?);
                        let idx = self.model().register_index(register).expect("declared");
                        match &mut self.state.registers[idx] {
                            RegValue::Map(m) => {
                                m.insert(k, v);
                            }
                            RegValue::Set(_) => panic!("indexed assignment on set register"),
                        }
                    }
                }
            }
            let forwarded = match rule.terminator {
                Terminator::Forward(n) => vec![self.pkt; n],
                Terminator::Drop => vec![],
            };
            return Ok(StepOutcome {
                state: self.state,
                forwarded,
                fired_rule: Some(i),
                consulted: self.consulted,
            });
        }
        unreachable!("the mandatory otherwise-rule always fires")
    }
}

fn field_value(p: &Packet, f: Field) -> Value {
    match f {
        Field::Src => Value::Addr(p.src),
        Field::Dst => Value::Addr(p.dst),
        Field::SrcPort => Value::Port(p.src_port),
        Field::DstPort => Value::Port(p.dst_port),
        Field::Origin => Value::Addr(p.origin),
        Field::Content => Value::Content(p.content),
    }
}

fn assign_field(p: &mut Packet, f: Field, v: Value) {
    match f {
        Field::Src => p.src = v.as_addr().expect("sort-checked"),
        Field::Dst => p.dst = v.as_addr().expect("sort-checked"),
        Field::SrcPort => p.src_port = v.as_port().expect("sort-checked"),
        Field::DstPort => p.dst_port = v.as_port().expect("sort-checked"),
        Field::Origin => p.origin = v.as_addr().expect("sort-checked"),
        Field::Content => p.content = v.as_content().expect("sort-checked"),
    }
}

/// The canonical value encoding of a whole packet (used as oracle argument).
pub fn packet_value(p: &Packet) -> Value {
    Value::Tuple(vec![
        Value::Addr(p.src),
        Value::Addr(p.dst),
        Value::Port(p.src_port),
        Value::Port(p.dst_port),
        Value::Addr(p.origin),
        Value::Content(p.content),
    ])
}

fn to_tuple(v: Value) -> Vec<Value> {
    match v {
        Value::Tuple(items) => items,
        other => vec![other],
    }
}

fn tuple_value(mut items: Vec<Value>) -> Value {
    if items.len() == 1 {
        items.pop().unwrap()
    } else {
        Value::Tuple(items)
    }
}

/// Runs one packet through one instance.
pub fn step(
    inst: &MiddleboxInstance,
    st: &MbxState,
    pkt: &Packet,
    oracle: &OracleEnv,
    universe: &Universe,
) -> Result<StepOutcome, StepError> {
    if st.failed {
        match inst.model.failure {
            FailurePolicy::Closed => {
                return Ok(StepOutcome {
                    state: st.clone(),
                    forwarded: vec![],
                    fired_rule: None,
                    consulted: vec![],
                });
            }
            FailurePolicy::Open => {
                return Ok(StepOutcome {
                    state: st.clone(),
                    forwarded: vec![*pkt],
                    fired_rule: None,
                    consulted: vec![],
                });
            }
            FailurePolicy::Explicit => {}
        }
    }
    let ctx = EvalCtx {
        inst,
        universe,
        oracle,
        state: st.clone(),
        pkt: *pkt,
        locals: BTreeMap::new(),
        consulted: Vec::new(),
        failed_view: st.failed,
    };
    ctx.run_rules()
}
