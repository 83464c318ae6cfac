//! Bounded semantic classification of middlebox state behavior.
//!
//! A model is flow-parallel when its treatment of any packet depends only on
//! the history restricted to that packet's flow; origin-agnostic when shared
//! state exists but behavior is invariant under renaming the hosts that
//! instantiated it and every behavior is reproducible by some same-flow
//! history. The checks run the concrete interpreter over a tiny synthetic
//! universe, so they are heuristic by construction: declared tags on bundled
//! models stay authoritative and the checker is a consistency gate.
//!
//! History restriction follows flow identity *through rewrites*: when a rule
//! rewrites endpoint fields (NAT, load balancer), the input and output flow
//! ids are unioned, so a translated reply still counts as the same flow as
//! the internal packets that created its state.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::mbx::{
    builtins, step, ConfigValue, MiddleboxInstance, MiddleboxModel, OracleAnswer, OracleEnv,
    ParamSort, Sort, StepError,
};
use crate::net::{flow_of, FlowId, NodeId, Packet, Universe, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StateClassKind {
    FlowParallel,
    OriginAgnostic,
    General,
}

impl std::fmt::Display for StateClassKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateClassKind::FlowParallel => write!(f, "flow-parallel"),
            StateClassKind::OriginAgnostic => write!(f, "origin-agnostic"),
            StateClassKind::General => write!(f, "general"),
        }
    }
}

/// A (probe packet, history) pair on which a definition failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Witness {
    pub packet: Packet,
    pub history: Vec<Packet>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    /// Taken from the model library's declared tag.
    Declared,
    /// Established (up to bounds) by the semantic check.
    Checked { bounds: ClassifyBounds },
    /// The next-stronger class was refuted by this witness.
    Refuted { witness: Witness, bounds: ClassifyBounds },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateClass {
    pub kind: StateClassKind,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifyBounds {
    pub addresses: u16,
    pub ports: u16,
    pub contents: u16,
    pub max_history: usize,
    /// Extra same-flow packets tried when searching for an alternate
    /// history.
    pub erono_extension: usize,
}

impl Default for ClassifyBounds {
    fn default() -> Self {
        ClassifyBounds {
            addresses: 3,
            ports: 2,
            contents: 1,
            max_history: 3,
            erono_extension: 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("classification bounds too small: {0}")]
    BoundsTooSmall(String),
}

/// Declared state-class tags for the bundled models.
pub fn declared_state_class(model_name: &str) -> Option<StateClassKind> {
    match model_name {
        builtins::LEARNING_FIREWALL | builtins::ACL_FIREWALL | builtins::NAT
        | builtins::LOAD_BALANCER => Some(StateClassKind::FlowParallel),
        // Content caches share state across flows but serve it regardless of
        // who cached it. The bundled IDPS is tagged origin-agnostic on the
        // strength of the usual deployment argument, not the bounded check.
        builtins::CONTENT_CACHE | builtins::IDPS => Some(StateClassKind::OriginAgnostic),
        _ => None,
    }
}

/// True when two distinct argument tuples of one oracle function were
/// assigned the same result value.
fn oracle_collision(env: &OracleEnv) -> bool {
    let mut seen: BTreeMap<(crate::net::NodeId, String, crate::mbx::OracleAnswer), Vec<Value>> =
        BTreeMap::new();
    for b in env.bindings() {
        if let crate::mbx::OracleQuery::Fn { instance, name, args } = &b.query {
            let key = (*instance, name.clone(), b.answer.clone());
            if let Some(prev) = seen.get(&key) {
                if prev != args {
                    return true;
                }
            } else {
                seen.insert(key, args.clone());
            }
        }
    }
    false
}

/// Stable small hash for canonical oracle resolution.
fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn value_bytes(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Addr(a) => {
            out.push(1);
            out.extend(a.0.to_le_bytes());
        }
        Value::Port(p) => {
            out.push(2);
            out.extend(p.0.to_le_bytes());
        }
        Value::Content(c) => {
            out.push(3);
            out.extend(c.0.to_le_bytes());
        }
        Value::Flow(f) => {
            out.push(4);
            out.extend(f.lo.0 .0.to_le_bytes());
            out.extend(f.lo.1 .0.to_le_bytes());
            out.extend(f.hi.0 .0.to_le_bytes());
            out.extend(f.hi.1 .0.to_le_bytes());
        }
        Value::Tuple(items) => {
            out.push(5);
            out.push(items.len() as u8);
            for i in items {
                value_bytes(i, out);
            }
        }
    }
}

/// Deterministically answers any oracle query: function results are a stable
/// hash-pick from the range; class bits use endpoint-index parity, which is
/// guaranteed to assign both true and false across the tiny universe. Used
/// to give the classifier one concrete, varied oracle per run.
fn canonical_answer(query: &crate::mbx::OracleQuery, choices: &[OracleAnswer]) -> OracleAnswer {
    match query {
        crate::mbx::OracleQuery::Fn { name, args, .. } => {
            let mut bytes = Vec::new();
            bytes.extend(name.as_bytes());
            for a in args {
                value_bytes(a, &mut bytes);
            }
            let idx = (stable_hash(&bytes) % choices.len() as u64) as usize;
            choices[idx].clone()
        }
        crate::mbx::OracleQuery::Class { flow, .. } => {
            let parity =
                (flow.lo.0 .0 + flow.lo.1 .0 + flow.hi.0 .0 + flow.hi.1 .0) % 2 == 1;
            let wanted = OracleAnswer::Bool(parity);
            if choices.contains(&wanted) {
                wanted
            } else {
                choices[0].clone()
            }
        }
    }
}

/// Union-find over flow ids, unioned when a rule rewrites endpoints.
#[derive(Default, Clone)]
struct FlowUnion {
    parent: BTreeMap<FlowId, FlowId>,
}

impl FlowUnion {
    fn find(&self, f: FlowId) -> FlowId {
        let mut cur = f;
        while let Some(p) = self.parent.get(&cur) {
            if *p == cur {
                break;
            }
            cur = *p;
        }
        cur
    }

    fn union(&mut self, a: FlowId, b: FlowId) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            let (lo, hi) = if ra <= rb { (ra, rb) } else { (rb, ra) };
            self.parent.insert(hi, lo);
        }
    }
}

struct Harness {
    universe: Universe,
    inst: MiddleboxInstance,
    pool: Vec<Packet>,
}

/// Output of running one probe after a history. A lookup miss marks the
/// run as resting on model-undefined behavior; such (probe, history) pairs
/// are vacuous for classification purposes.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Behavior {
    Forwarded(Vec<Packet>),
    LookupMiss,
}

impl Harness {
    fn new(model: Arc<MiddleboxModel>, bounds: &ClassifyBounds) -> Result<Self, ClassifyError> {
        if bounds.addresses < 2 || bounds.max_history == 0 {
            return Err(ClassifyError::BoundsTooSmall(
                "need at least 2 addresses and nonempty histories".into(),
            ));
        }
        let addresses: Vec<String> = (0..bounds.addresses).map(|i| format!("a{i}")).collect();
        let ports: Vec<String> = (0..bounds.ports).map(|i| format!("q{i}")).collect();
        let contents: Vec<String> = (0..bounds.contents).map(|i| format!("c{i}")).collect();
        let universe = Universe::new(addresses, ports, contents)
            .expect("synthetic classifier universe");

        // Canonical config: set parameters get the full cross product so no
        // guard is vacuously false; scalar addresses get the last address
        // (reserved as infrastructure), other scalars the first value.
        let mut config = BTreeMap::new();
        for p in &model.params {
            let v = match &p.sort {
                ParamSort::Scalar(Sort::Address) => ConfigValue::Scalar(Value::Addr(
                    crate::net::Address(bounds.addresses - 1),
                )),
                ParamSort::Scalar(Sort::Port) => {
                    ConfigValue::Scalar(Value::Port(crate::net::Port(0)))
                }
                ParamSort::Scalar(Sort::Content) => {
                    ConfigValue::Scalar(Value::Content(crate::net::ContentId(0)))
                }
                ParamSort::Scalar(s) => {
                    return Err(ClassifyError::BoundsTooSmall(format!(
                        "cannot synthesize config for scalar sort {s}"
                    )))
                }
                ParamSort::SetOf(sorts) => {
                    let mut tuples: Vec<Vec<Value>> = vec![vec![]];
                    for s in sorts {
                        let opts: Vec<Value> = match s {
                            Sort::Address => {
                                universe.declared_addresses().map(Value::Addr).collect()
                            }
                            Sort::Port => universe.declared_ports().map(Value::Port).collect(),
                            Sort::Content => {
                                universe.declared_contents().map(Value::Content).collect()
                            }
                            other => {
                                return Err(ClassifyError::BoundsTooSmall(format!(
                                    "cannot synthesize config set over sort {other}"
                                )))
                            }
                        };
                        tuples = tuples
                            .into_iter()
                            .flat_map(|t| {
                                opts.iter().map(move |o| {
                                    let mut t2 = t.clone();
                                    t2.push(o.clone());
                                    t2
                                })
                            })
                            .collect();
                    }
                    ConfigValue::Set(tuples.into_iter().collect())
                }
            };
            config.insert(p.name.clone(), v);
        }

        let inst = MiddleboxInstance {
            id: NodeId(0),
            name: "m".to_string(),
            model,
            config,
        };

        // Probe/history packet pool: origin equals source (host-shaped).
        let mut pool = Vec::new();
        for src in universe.declared_addresses() {
            for dst in universe.declared_addresses() {
                if src == dst {
                    continue;
                }
                for sp in universe.declared_ports() {
                    for dp in universe.declared_ports() {
                        for content in universe.declared_contents() {
                            pool.push(Packet {
                                src,
                                dst,
                                src_port: sp,
                                dst_port: dp,
                                origin: src,
                                content,
                            });
                        }
                    }
                }
            }
        }

        Ok(Harness { universe, inst, pool })
    }

    /// Runs one packet with canonical oracle resolution, binding any fresh
    /// queries into `env`.
    fn run_one(
        &self,
        state: &crate::mbx::MbxState,
        pkt: &Packet,
        env: &mut OracleEnv,
    ) -> (crate::mbx::MbxState, Behavior) {
        loop {
            match step(&self.inst, state, pkt, env, &self.universe) {
                Ok(out) => return (out.state, Behavior::Forwarded(out.forwarded)),
                Err(StepError::NeedOracle { query, choices }) => {
                    let answer = canonical_answer(&query, &choices);
                    env.bind(&crate::mbx::OracleBinding { query, answer });
                }
                Err(StepError::MapLookupMiss { .. }) => {
                    return (state.clone(), Behavior::LookupMiss)
                }
                Err(StepError::OracleValueOutOfRange { .. }) => {
                    return (state.clone(), Behavior::LookupMiss)
                }
            }
        }
    }

    /// Replays a history, returning final state and the flow-union built
    /// from rewrites.
    fn run_history(
        &self,
        history: &[Packet],
        env: &mut OracleEnv,
    ) -> (crate::mbx::MbxState, FlowUnion) {
        let mut state = crate::mbx::MbxState::initial(&self.inst.model);
        let mut union = FlowUnion::default();
        for h in history {
            let (next, behavior) = self.run_one(&state, h, env);
            if let Behavior::Forwarded(outputs) = &behavior {
                for o in outputs {
                    union.union(flow_of(h), flow_of(o));
                }
            }
            state = next;
        }
        (state, union)
    }

    /// The behavior of the probe after a history.
    fn behavior(&self, history: &[Packet], probe: &Packet, env: &mut OracleEnv) -> Behavior {
        let (state, _) = self.run_history(history, env);
        let (_, outputs) = self.run_one(&state, probe, env);
        outputs
    }

    /// History restricted to packets flow-equivalent (through rewrites) to
    /// the probe.
    fn restrict(&self, history: &[Packet], probe: &Packet, env: &mut OracleEnv) -> Vec<Packet> {
        let (_, union) = self.run_history(history, env);
        let target = union.find(flow_of(probe));
        history
            .iter()
            .filter(|h| union.find(flow_of(h)) == target)
            .copied()
            .collect()
    }
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

/// Classifies a model's state behavior by bounded semantic checks.
pub fn classify_state_class(
    model: Arc<MiddleboxModel>,
    bounds: &ClassifyBounds,
) -> Result<StateClass, ClassifyError> {
    let harness = Harness::new(model.clone(), bounds)?;

    // Stateless models are trivially flow-parallel.
    if model.is_stateless() {
        return Ok(StateClass {
            kind: StateClassKind::FlowParallel,
            provenance: Provenance::Checked { bounds: bounds.clone() },
        });
    }

    // Flow-parallel check: behavior after h equals behavior after the
    // flow-restricted h, for every in-bounds (probe, history). The history
    // replay is shared across probes; restricted replays are memoized by
    // the probe's flow class.
    let all_histories = histories(&harness.pool, bounds.max_history);
    let mut refuting: Vec<(Packet, Vec<Packet>)> = Vec::new();
    for h in &all_histories {
        let mut env = OracleEnv::new();
        let (state_h, union_h) = harness.run_history(h, &mut env);
        // Histories where the value oracle collided (two distinct calls of
        // one function returning the same value, e.g. one external port
        // assigned to two flows) violate the modeled freshness assumption
        // and are skipped as degenerate.
        if oracle_collision(&env) {
            continue;
        }
        let mut restricted_states: BTreeMap<FlowId, crate::mbx::MbxState> = BTreeMap::new();
        for probe in &harness.pool {
            let root = union_h.find(flow_of(probe));
            let restricted_h: Vec<Packet> =
                h.iter().filter(|q| union_h.find(flow_of(q)) == root).copied().collect();
            if restricted_h.len() == h.len() {
                continue; // Restriction removed nothing; trivially equal.
            }
            let (_, full) = harness.run_one(&state_h, probe, &mut env.clone());
            let rstate = restricted_states
                .entry(root)
                .or_insert_with(|| harness.run_history(&restricted_h, &mut OracleEnv::new()).0)
                .clone();
            let (_, restricted) = harness.run_one(&rstate, probe, &mut OracleEnv::new());
            // Pairs where either run aborts on a model-undefined lookup are
            // vacuous: classification must not rest on model bugs.
            if full == Behavior::LookupMiss || restricted == Behavior::LookupMiss {
                continue;
            }
            if full != restricted {
                refuting.push((*probe, h.clone()));
            }
        }
    }

    if refuting.is_empty() {
        return Ok(StateClass {
            kind: StateClassKind::FlowParallel,
            provenance: Provenance::Checked { bounds: bounds.clone() },
        });
    }

    let witness = Witness { packet: refuting[0].0, history: refuting[0].1.clone() };

    // Origin-agnostic check on every refuting pair: renaming invariance
    // plus an alternate same-flow history reproducing the behavior.
    for (probe, h) in &refuting {
        if !renaming_invariant(&harness, probe, h)
            || !erono_reproducible(&harness, probe, h, bounds)
        {
            return Ok(StateClass {
                kind: StateClassKind::General,
                provenance: Provenance::Refuted {
                    witness: Witness { packet: *probe, history: h.clone() },
                    bounds: bounds.clone(),
                },
            });
        }
    }

    Ok(StateClass {
        kind: StateClassKind::OriginAgnostic,
        provenance: Provenance::Refuted { witness, bounds: bounds.clone() },
    })
}

/// Behavior of the probe is unchanged when the non-flow endpoints that
/// populated shared state are renamed. Config-referenced scalar addresses
/// and the probe's own endpoints are fixed; the rest are permuted. Oracle
/// answers from the base run are transported through the renaming so the
/// comparison is about state, not oracle choice.
fn renaming_invariant(harness: &Harness, probe: &Packet, history: &[Packet]) -> bool {
    let mut env = OracleEnv::new();
    let base = harness.behavior(history, probe, &mut env);

    let univ = &harness.universe;
    let mut fixed: BTreeSet<crate::net::Address> = BTreeSet::new();
    fixed.insert(probe.src);
    fixed.insert(probe.dst);
    fixed.insert(probe.origin);
    for cfg in harness.inst.config.values() {
        if let ConfigValue::Scalar(Value::Addr(a)) = cfg {
            fixed.insert(*a);
        }
    }
    let movable: Vec<crate::net::Address> =
        univ.declared_addresses().filter(|a| !fixed.contains(a)).collect();

    // All derangement-ish permutations of the movable addresses.
    for perm in permutations(&movable) {
        if perm == movable {
            continue;
        }
        let rename = |a: crate::net::Address| -> crate::net::Address {
            movable.iter().position(|m| *m == a).map(|i| perm[i]).unwrap_or(a)
        };
        let renamed: Vec<Packet> = history
            .iter()
            .map(|p| Packet {
                src: rename(p.src),
                dst: rename(p.dst),
                origin: rename(p.origin),
                ..*p
            })
            .collect();
        let mut env2 = transported_env(&env, &rename);
        let out = harness.behavior(&renamed, probe, &mut env2);
        if out != base {
            return false;
        }
    }
    true
}

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

fn transported_env(
    base: &OracleEnv,
    rename: &impl Fn(crate::net::Address) -> crate::net::Address,
) -> OracleEnv {
    fn rename_value(
        v: &Value,
        rename: &impl Fn(crate::net::Address) -> crate::net::Address,
    ) -> Value {
        match v {
            Value::Addr(a) => Value::Addr(rename(*a)),
            Value::Flow(f) => {
                let lo = (rename(f.lo.0), f.lo.1);
                let hi = (rename(f.hi.0), f.hi.1);
                let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                Value::Flow(FlowId { lo, hi })
            }
            Value::Tuple(items) => {
                Value::Tuple(items.iter().map(|i| rename_value(i, rename)).collect())
            }
            other => other.clone(),
        }
    }
    let mut out = OracleEnv::new();
    for b in base.bindings() {
        let query = match &b.query {
            crate::mbx::OracleQuery::Fn { instance, name, args } => crate::mbx::OracleQuery::Fn {
                instance: *instance,
                name: name.clone(),
                args: args.iter().map(|a| rename_value(a, rename)).collect(),
            },
            crate::mbx::OracleQuery::Class { class, flow } => {
                let f = match rename_value(&Value::Flow(*flow), rename) {
                    Value::Flow(f) => f,
                    _ => unreachable!(),
                };
                crate::mbx::OracleQuery::Class { class: class.clone(), flow: f }
            }
        };
        let answer = match &b.answer {
            OracleAnswer::Value(v) => OracleAnswer::Value(rename_value(v, rename)),
            OracleAnswer::Bool(x) => OracleAnswer::Bool(*x),
        };
        out.bind(&crate::mbx::OracleBinding { query, answer });
    }
    out
}

/// Searches for a same-flow history reproducing the refuting behavior:
/// the restricted history extended by up to `erono_extension` same-flow
/// packets from the pool.
fn erono_reproducible(
    harness: &Harness,
    probe: &Packet,
    history: &[Packet],
    bounds: &ClassifyBounds,
) -> bool {
    let mut env = OracleEnv::new();
    let base = harness.behavior(history, probe, &mut env);
    let restricted = harness.restrict(history, probe, &mut env);

    let probe_flow = flow_of(probe);
    let same_flow: Vec<Packet> =
        harness.pool.iter().filter(|q| flow_of(q) == probe_flow).copied().collect();

    let mut candidates: Vec<Vec<Packet>> = vec![restricted.clone()];
    let mut frontier = vec![restricted];
    for _ in 0..bounds.erono_extension {
        let mut next = Vec::new();
        for c in &frontier {
            for q in &same_flow {
                let mut c2 = c.clone();
                c2.push(*q);
                next.push(c2);
            }
        }
        candidates.extend(next.iter().cloned());
        frontier = next;
    }

    for cand in candidates {
        let mut env2 = OracleEnv::new();
        let out = harness.behavior(&cand, probe, &mut env2);
        if out == base {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mbx::builtin;
    use crate::net::flow_of;

    #[test]
    fn learning_firewall_is_flow_parallel() {
        let sc =
            classify_state_class(builtin("learning_firewall").unwrap(), &ClassifyBounds::default())
                .unwrap();
        assert_eq!(sc.kind, StateClassKind::FlowParallel);
        assert!(matches!(sc.provenance, Provenance::Checked { .. }));
    }

    #[test]
    fn nat_is_flow_parallel() {
        let sc = classify_state_class(builtin("nat").unwrap(), &ClassifyBounds::default()).unwrap();
        assert_eq!(sc.kind, StateClassKind::FlowParallel);
    }

    #[test]
    fn stateless_models_are_trivially_flow_parallel() {
        for name in ["acl_firewall", "load_balancer"] {
            let sc =
                classify_state_class(builtin(name).unwrap(), &ClassifyBounds::default()).unwrap();
            assert_eq!(sc.kind, StateClassKind::FlowParallel, "{name}");
        }
    }

    #[test]
    fn content_cache_is_origin_agnostic_with_witness() {
        let sc = classify_state_class(builtin("content_cache").unwrap(), &ClassifyBounds::default())
            .unwrap();
        assert_eq!(sc.kind, StateClassKind::OriginAgnostic);
        let Provenance::Refuted { witness, .. } = &sc.provenance else {
            panic!("flow-parallelism must be refuted by a concrete witness")
        };
        // The witness is a cross-flow pair: some history packet belongs to a
        // different flow than the probe.
        assert!(!witness.history.is_empty());
        assert!(
            witness.history.iter().any(|h| flow_of(h) != flow_of(&witness.packet)),
            "witness must involve another flow's state"
        );
    }

    #[test]
    fn idps_checker_refutes_but_declared_tag_is_origin_agnostic() {
        // The bounded check cannot reproduce cross-flow detection state from
        // same-flow histories, so the checker lands on general; the bundled
        // tag stays authoritative for slicing.
        let sc = classify_state_class(builtin("idps").unwrap(), &ClassifyBounds::default()).unwrap();
        assert_eq!(sc.kind, StateClassKind::General);
        assert_eq!(declared_state_class("idps"), Some(StateClassKind::OriginAgnostic));
    }

    #[test]
    fn declared_tags_cover_all_builtins() {
        for name in crate::mbx::builtin_names() {
            assert!(declared_state_class(name).is_some(), "{name} has no declared tag");
        }
    }

    #[test]
    fn too_small_bounds_are_an_advisory_error() {
        let bounds = ClassifyBounds { addresses: 1, ..ClassifyBounds::default() };
        let err = classify_state_class(builtin("learning_firewall").unwrap(), &bounds).unwrap_err();
        assert!(matches!(err, ClassifyError::BoundsTooSmall(_)));
    }
}
