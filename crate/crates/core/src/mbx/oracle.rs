//! Classification and value oracles.
//!
//! Oracle functions are consistent per (instance, argument tuple) within a
//! trace: the same call always yields the same value. Abstract class bits
//! are fixed per flow, shared across instances, and respect declared mutual
//! exclusions. Engines branch over the possible answers at first use and
//! record the chosen binding here.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::net::{FlowId, NodeId, Value};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OracleQuery {
    Fn { instance: NodeId, name: String, args: Vec<Value> },
    Class { class: String, flow: FlowId },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OracleAnswer {
    Value(Value),
    Bool(bool),
}

/// One recorded oracle decision.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OracleBinding {
    pub query: OracleQuery,
    pub answer: OracleAnswer,
}

/// All oracle decisions made so far in one execution.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OracleEnv {
    fns: BTreeMap<(NodeId, String, Vec<Value>), Value>,
    classes: BTreeMap<(String, FlowId), bool>,
}

impl OracleEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup_fn(&self, instance: NodeId, name: &str, args: &[Value]) -> Option<&Value> {
        self.fns.get(&(instance, name.to_string(), args.to_vec()))
    }

    pub fn lookup_class(&self, class: &str, flow: FlowId) -> Option<bool> {
        self.classes.get(&(class.to_string(), flow)).copied()
    }

    /// True if some class excluded with `class` is already true for `flow`.
    pub fn excluded_conflict(
        &self,
        exclusions: impl IntoIterator<Item = String>,
        flow: FlowId,
    ) -> bool {
        exclusions.into_iter().any(|e| self.lookup_class(&e, flow) == Some(true))
    }

    pub fn bind(&mut self, binding: &OracleBinding) {
        match (&binding.query, &binding.answer) {
            (OracleQuery::Fn { instance, name, args }, OracleAnswer::Value(v)) => {
                self.fns.insert((*instance, name.clone(), args.clone()), v.clone());
            }
            (OracleQuery::Class { class, flow }, OracleAnswer::Bool(b)) => {
                self.classes.insert((class.clone(), *flow), *b);
            }
            _ => panic!("oracle answer kind does not match query kind"),
        }
    }

    /// Binds everything from `other` into `self`; returns false on conflict.
    pub fn merge(&mut self, bindings: &[OracleBinding]) -> bool {
        for b in bindings {
            match (&b.query, &b.answer) {
                (OracleQuery::Fn { instance, name, args }, OracleAnswer::Value(v)) => {
                    let key = (*instance, name.clone(), args.clone());
                    if let Some(prev) = self.fns.get(&key) {
                        if prev != v {
                            return false;
                        }
                    }
                    self.fns.insert(key, v.clone());
                }
                (OracleQuery::Class { class, flow }, OracleAnswer::Bool(v)) => {
                    let key = (class.clone(), *flow);
                    if let Some(prev) = self.classes.get(&key) {
                        if prev != v {
                            return false;
                        }
                    }
                    self.classes.insert(key, *v);
                }
                _ => return false,
            }
        }
        true
    }

    pub fn bindings(&self) -> Vec<OracleBinding> {
        let mut out = Vec::new();
        for ((instance, name, args), v) in &self.fns {
            out.push(OracleBinding {
                query: OracleQuery::Fn {
                    instance: *instance,
                    name: name.clone(),
                    args: args.clone(),
                },
                answer: OracleAnswer::Value(v.clone()),
            });
        }
        for ((class, flow), b) in &self.classes {
            out.push(OracleBinding {
                query: OracleQuery::Class { class: class.clone(), flow: *flow },
                answer: OracleAnswer::Bool(*b),
            });
        }
        out
    }
}
