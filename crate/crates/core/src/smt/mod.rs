//! SMT-LIB2 emission and external solver integration.
//!
//! Two emission modes: `Bounded` unrolls the event semantics over K
//! timesteps as a quantifier-free script whose satisfiability matches the
//! explicit-state engine at identical bounds; `Causal` is the event-sorted
//! encoding with a unary cause function, emitted best-effort (closure
//! axioms are not generated). Solvers run as subprocesses speaking
//! SMT-LIB2 on stdin/stdout, one-shot, no incremental state: on sat the
//! script is re-run with `get-value` queries appended.

pub mod bounded;
pub mod causal;

pub use bounded::encode_bounded;
pub use causal::{encode_causal, RestrictionViolated};

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bmc::Bounds;
use crate::invariant::Invariant;
use crate::mbx::{OracleAnswer, OracleBinding, OracleEnv, OracleQuery, StepError};
use crate::net::{Address, ContentId, Link, NodeId, NodeKind, Packet, Port, Value};
use crate::network::Network;
use crate::trace::{Event, Trace, TraceStep};

/// Environment variable consulted for the default solver command.
pub const SOLVER_ENV: &str = "MBOXVERIFY_SOLVER";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptMode {
    Bounded { depth: u32 },
    Causal,
}

/// How one solver symbol maps back onto the network encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SymbolRole {
    EventKind { t: u32 },
    EventNode { t: u32 },
    EventFrom { t: u32 },
    EventField { t: u32, field: crate::mbx::Field },
    OracleUsed { instance: NodeId, oracle: String, t: u32 },
    OracleValue { instance: NodeId, oracle: String, t: u32 },
    ClassBit { class: String, t: u32 },
}

#[derive(Debug, Clone)]
pub struct SmtScript {
    pub text: String,
    pub mode: ScriptMode,
    /// Solver symbols that decoding needs, with their roles.
    pub symbols: Vec<(String, SymbolRole)>,
}

/// Event kind codes shared by the encoder and decoder.
pub(crate) mod kinds {
    pub const IDLE: i64 = 0;
    pub const EMIT: i64 = 1;
    pub const RECV: i64 = 2;
    pub const FAIL: i64 = 3;
    pub const RECOVER: i64 = 4;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmtVal {
    Int(i64),
    Bool(bool),
}

impl SmtVal {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            SmtVal::Int(i) => Some(*i),
            _ => None,
        }
    }
    pub fn as_bool(&self) -> Option<bool> {
        match self {
            SmtVal::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

pub type ModelValues = BTreeMap<String, SmtVal>;

#[derive(Debug)]
pub enum SolverOutcome {
    Sat { values: ModelValues },
    Unsat,
    Unknown { message: String },
    SolverError { message: String },
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("failed to launch solver {cmd:?}: {source}")]
    Spawn { cmd: String, source: std::io::Error },
}

fn run_once(cmd: &str, input: &str, timeout: Duration) -> Result<(String, bool), String> {
    let mut parts = cmd.split_whitespace();
    let program = parts.next().ok_or_else(|| "empty solver command".to_string())?;
    let args: Vec<&str> = parts.collect();
    let mut child = Command::new(program)
        .args(&args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("failed to launch solver {cmd:?}: {e}"))?;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let script = input.to_string();
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(script.as_bytes());
        // stdin drops here, closing the pipe.
    });

    let mut stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = std::sync::mpsc::channel();
    let reader = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stdout.read_to_string(&mut buf);
        let _ = tx.send(buf);
    });

    let deadline = Instant::now() + timeout;
    let output = loop {
        match rx.try_recv() {
            Ok(buf) => break Some(buf),
            Err(std::sync::mpsc::TryRecvError::Empty) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    break None;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(std::sync::mpsc::TryRecvError::Disconnected) => break Some(String::new()),
        }
    };
    let _ = writer.join();
    let _ = reader.join();

    match output {
        None => {
            let _ = child.wait();
            Ok((String::new(), true))
        }
        Some(buf) => {
            let status = child.wait().map_err(|e| format!("solver wait failed: {e}"))?;
            if !status.success() && buf.trim().is_empty() {
                return Err(format!("solver exited with {status} and no output"));
            }
            Ok((buf, false))
        }
    }
}

/// Runs a solver subprocess on the script. The command is split on
/// whitespace; it must read SMT-LIB2 on stdin and print `sat`/`unsat`/
/// `unknown`. On sat a second run fetches values for the script's symbols
/// via `get-value`.
pub fn run_solver(script: &SmtScript, cmd: &str, timeout_s: u64) -> SolverOutcome {
    let timeout = Duration::from_secs(timeout_s.max(1));
    let base = format!("{}(check-sat)\n", script.text);
    let (out, timed_out) = match run_once(cmd, &base, timeout) {
        Ok(x) => x,
        Err(e) => return SolverOutcome::SolverError { message: e },
    };
    if timed_out {
        return SolverOutcome::Unknown { message: "timeout".to_string() };
    }
    let verdict = out.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    match verdict {
        "unsat" => SolverOutcome::Unsat,
        "unknown" => SolverOutcome::Unknown { message: "solver returned unknown".into() },
        "sat" => {
            if script.symbols.is_empty() {
                return SolverOutcome::Sat { values: BTreeMap::new() };
            }
            let mut with_values = base.clone();
            for chunk in script.symbols.chunks(64) {
                with_values.push_str("(get-value (");
                for (name, _) in chunk {
                    with_values.push_str(name);
                    with_values.push(' ');
                }
                with_values.push_str("))\n");
            }
            let (out2, timed_out2) = match run_once(cmd, &with_values, timeout) {
                Ok(x) => x,
                Err(e) => return SolverOutcome::SolverError { message: e },
            };
            if timed_out2 {
                return SolverOutcome::Unknown { message: "timeout fetching model".into() };
            }
            match parse_values(&out2) {
                Ok(values) => SolverOutcome::Sat { values },
                Err(e) => SolverOutcome::SolverError {
                    message: format!("unparseable model output: {e}"),
                },
            }
        }
        other => SolverOutcome::SolverError {
            message: format!("unexpected solver output {other:?}"),
        },
    }
}

/// Parses the concatenated `get-value` responses: sequences of
/// `((name value) (name value) ...)`.
fn parse_values(out: &str) -> Result<ModelValues, String> {
    #[derive(Debug)]
    enum Sexp {
        Atom(String),
        List(Vec<Sexp>),
    }

    fn tokenize(s: &str) -> Vec<String> {
        let mut toks = Vec::new();
        let mut cur = String::new();
        for c in s.chars() {
            match c {
                '(' | ')' => {
                    if !cur.is_empty() {
                        toks.push(std::mem::take(&mut cur));
                    }
                    toks.push(c.to_string());
                }
                c if c.is_whitespace() => {
                    if !cur.is_empty() {
                        toks.push(std::mem::take(&mut cur));
                    }
                }
                c => cur.push(c),
            }
        }
        if !cur.is_empty() {
            toks.push(cur);
        }
        toks
    }

    fn parse(toks: &[String], pos: &mut usize) -> Result<Sexp, String> {
        if *pos >= toks.len() {
            return Err("unexpected end of model output".into());
        }
        let t = &toks[*pos];
        *pos += 1;
        if t == "(" {
            let mut items = Vec::new();
            while *pos < toks.len() && toks[*pos] != ")" {
                items.push(parse(toks, pos)?);
            }
            if *pos >= toks.len() {
                return Err("unbalanced parentheses".into());
            }
            *pos += 1; // consume ')'
            Ok(Sexp::List(items))
        } else if t == ")" {
            Err("unexpected ')'".into())
        } else {
            Ok(Sexp::Atom(t.clone()))
        }
    }

    fn to_val(s: &Sexp) -> Option<SmtVal> {
        match s {
            Sexp::Atom(a) => match a.as_str() {
                "true" => Some(SmtVal::Bool(true)),
                "false" => Some(SmtVal::Bool(false)),
                _ => a.parse::<i64>().ok().map(SmtVal::Int),
            },
            Sexp::List(items) => {
                // Negative integers print as (- n).
                if items.len() == 2 {
                    if let (Sexp::Atom(m), Sexp::Atom(n)) = (&items[0], &items[1]) {
                        if m == "-" {
                            return n.parse::<i64>().ok().map(|v| SmtVal::Int(-v));
                        }
                    }
                }
                None
            }
        }
    }

    // Skip the verdict line; parse every top-level list after it.
    let body: String = out
        .lines()
        .filter(|l| {
            let t = l.trim();
            !t.is_empty() && t != "sat" && !t.starts_with("(error")
        })
        .collect::<Vec<_>>()
        .join(" ");
    let toks = tokenize(&body);
    let mut pos = 0;
    let mut values = BTreeMap::new();
    while pos < toks.len() {
        let sexp = parse(&toks, &mut pos)?;
        let Sexp::List(pairs) = sexp else {
            return Err("expected a list of (name value) pairs".into());
        };
        for p in pairs {
            let Sexp::List(kv) = p else {
                return Err("expected (name value)".into());
            };
            if kv.len() != 2 {
                return Err("expected (name value)".into());
            }
            let Sexp::Atom(name) = &kv[0] else {
                return Err("expected symbol name".into());
            };
            let val = to_val(&kv[1]).ok_or_else(|| format!("bad value for {name}"))?;
            values.insert(name.clone(), val);
        }
    }
    Ok(values)
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("model is incomplete: missing {0}")]
    ModelIncomplete(String),
    #[error("model is inconsistent: {0}")]
    ModelInconsistent(String),
}

/// Reconstructs a trace from a satisfying model of a bounded script. The
/// event skeleton and oracle choices come from the model; emissions and
/// register snapshots are recomputed through the interpreter, so decoded
/// traces validate and replay by construction whenever the encoding and the
/// interpreter agree.
pub fn decode_trace(
    values: &ModelValues,
    script: &SmtScript,
    net: &Network,
) -> Result<Trace, DecodeError> {
    let ScriptMode::Bounded { depth } = script.mode else {
        return Err(DecodeError::ModelInconsistent(
            "decode_trace expects a bounded-mode script".into(),
        ));
    };
    let missing = |name: &str| DecodeError::ModelIncomplete(name.to_string());

    let int = |name: &str| -> Result<i64, DecodeError> {
        values.get(name).and_then(SmtVal::as_int).ok_or_else(|| missing(name))
    };
    let boolean = |name: &str| -> Result<bool, DecodeError> {
        values.get(name).and_then(SmtVal::as_bool).ok_or_else(|| missing(name))
    };

    // Oracle decisions per timestep, from the model.
    let mut fn_values: BTreeMap<(NodeId, String, u32), i64> = BTreeMap::new();
    let mut class_bits: BTreeMap<(String, u32), bool> = BTreeMap::new();
    for (name, role) in &script.symbols {
        match role {
            SymbolRole::OracleValue { instance, oracle, t } => {
                if let Some(v) = values.get(name).and_then(SmtVal::as_int) {
                    fn_values.insert((*instance, oracle.clone(), *t), v);
                }
            }
            SymbolRole::ClassBit { class, t } => {
                if let Some(v) = values.get(name).and_then(SmtVal::as_bool) {
                    class_bits.insert((class.clone(), *t), v);
                }
            }
            _ => {}
        }
    }

    let node_of = |i: i64| -> Result<NodeId, DecodeError> {
        let id = NodeId(i as u32);
        if (id.0 as usize) < net.nodes().count() {
            Ok(id)
        } else {
            Err(DecodeError::ModelInconsistent(format!("node index {i} out of range")))
        }
    };

    let mut steps: Vec<TraceStep> = Vec::new();
    let mut states: BTreeMap<NodeId, crate::mbx::MbxState> =
        net.middleboxes().map(|m| (m.id, crate::mbx::MbxState::initial(&m.model))).collect();
    let mut queues: BTreeMap<Link, std::collections::VecDeque<Packet>> = BTreeMap::new();
    let mut failed: std::collections::BTreeSet<NodeId> = std::collections::BTreeSet::new();
    let mut oracle = OracleEnv::new();

    for t in 0..depth {
        let kind = int(&format!("k{t}"))?;
        if kind == kinds::IDLE {
            continue;
        }
        let time = steps.len() as u64;
        match kind {
            kinds::EMIT => {
                let host = node_of(int(&format!("n{t}"))?)?;
                let packet = Packet {
                    src: Address(int(&format!("psrc{t}"))? as u16),
                    dst: Address(int(&format!("pdst{t}"))? as u16),
                    src_port: Port(int(&format!("psp{t}"))? as u16),
                    dst_port: Port(int(&format!("pdp{t}"))? as u16),
                    origin: Address(int(&format!("porig{t}"))? as u16),
                    content: ContentId(int(&format!("pcont{t}"))? as u16),
                };
                let link = Link { from: host, to: net.omega() };
                queues.entry(link).or_default().push_back(packet);
                steps.push(TraceStep {
                    time,
                    event: Event::HostEmit { host, packet },
                    emitted: vec![(link, packet)],
                    oracle: vec![],
                    registers: None,
                });
            }
            kinds::RECV => {
                let at = node_of(int(&format!("n{t}"))?)?;
                let from = node_of(int(&format!("f{t}"))?)?;
                let packet = Packet {
                    src: Address(int(&format!("psrc{t}"))? as u16),
                    dst: Address(int(&format!("pdst{t}"))? as u16),
                    src_port: Port(int(&format!("psp{t}"))? as u16),
                    dst_port: Port(int(&format!("pdp{t}"))? as u16),
                    origin: Address(int(&format!("porig{t}"))? as u16),
                    content: ContentId(int(&format!("pcont{t}"))? as u16),
                };
                let link = Link { from, to: at };
                let head = queues.get_mut(&link).and_then(|q| q.pop_front());
                if head != Some(packet) {
                    return Err(DecodeError::ModelInconsistent(format!(
                        "recv at t={t} does not match queue head"
                    )));
                }
                match net.kind(at) {
                    NodeKind::Host => {
                        steps.push(TraceStep {
                            time,
                            event: Event::Recv { at, from, packet },
                            emitted: vec![],
                            oracle: vec![],
                            registers: None,
                        });
                    }
                    NodeKind::OmegaSwitch => {
                        let tf = crate::netfunc::compute_transfer(
                            net,
                            &crate::net::FailureScenario { failed: failed.clone() },
                        )
                        .map_err(|e| DecodeError::ModelInconsistent(e.to_string()))?;
                        let mut emitted = vec![];
                        if let Some(next) = tf.next(from, packet.dst) {
                            let out = Link { from: at, to: next };
                            queues.entry(out).or_default().push_back(packet);
                            emitted.push((out, packet));
                        }
                        steps.push(TraceStep {
                            time,
                            event: Event::Recv { at, from, packet },
                            emitted,
                            oracle: vec![],
                            registers: None,
                        });
                    }
                    NodeKind::MiddleboxInstance => {
                        let inst = net.middlebox(at).expect("middlebox");
                        let st = states[&at].clone();
                        let mut step_bindings: Vec<OracleBinding> = Vec::new();
                        let outcome = loop {
                            match crate::mbx::step(inst, &st, &packet, &oracle, &net.universe) {
                                Ok(o) => break Some(o),
                                Err(StepError::NeedOracle { query, .. }) => {
                                    let binding = resolve_query(
                                        &query,
                                        t,
                                        &fn_values,
                                        &class_bits,
                                        net,
                                    )?;
                                    oracle.bind(&binding);
                                    step_bindings.push(binding);
                                }
                                Err(StepError::MapLookupMiss { .. }) => break None,
                                Err(e) => {
                                    return Err(DecodeError::ModelInconsistent(e.to_string()))
                                }
                            }
                        };
                        let (new_state, forwarded, consulted) = match outcome {
                            Some(o) => (o.state, o.forwarded, o.consulted),
                            None => (st.clone(), vec![], vec![]),
                        };
                        let out_link = Link { from: at, to: net.omega() };
                        let mut emitted = Vec::new();
                        for p in &forwarded {
                            emitted.push((out_link, *p));
                            queues.entry(out_link).or_default().push_back(*p);
                        }
                        for c in consulted {
                            if !step_bindings.contains(&c) {
                                step_bindings.push(c);
                            }
                        }
                        let snapshot = crate::trace::RegisterSnapshot {
                            node: at,
                            failed: new_state.failed,
                            registers: inst
                                .model
                                .registers
                                .iter()
                                .zip(&new_state.registers)
                                .map(|(d, v)| (d.name.clone(), v.clone()))
                                .collect(),
                        };
                        states.insert(at, new_state);
                        steps.push(TraceStep {
                            time,
                            event: Event::Recv { at, from, packet },
                            emitted,
                            oracle: step_bindings,
                            registers: Some(snapshot),
                        });
                    }
                }
            }
            kinds::FAIL => {
                let node = node_of(int(&format!("n{t}"))?)?;
                failed.insert(node);
                let inst = net
                    .middlebox(node)
                    .ok_or_else(|| DecodeError::ModelInconsistent("fail of non-middlebox".into()))?;
                let st = states.get_mut(&node).expect("state");
                st.clear_registers(&inst.model);
                st.failed = true;
                let snapshot = crate::trace::RegisterSnapshot {
                    node,
                    failed: true,
                    registers: inst
                        .model
                        .registers
                        .iter()
                        .zip(&st.registers)
                        .map(|(d, v)| (d.name.clone(), v.clone()))
                        .collect(),
                };
                steps.push(TraceStep {
                    time,
                    event: Event::Fail { node },
                    emitted: vec![],
                    oracle: vec![],
                    registers: Some(snapshot),
                });
            }
            kinds::RECOVER => {
                let node = node_of(int(&format!("n{t}"))?)?;
                failed.remove(&node);
                if let Some(st) = states.get_mut(&node) {
                    st.failed = false;
                }
                steps.push(TraceStep {
                    time,
                    event: Event::Recover { node },
                    emitted: vec![],
                    oracle: vec![],
                    registers: None,
                });
            }
            other => {
                return Err(DecodeError::ModelInconsistent(format!(
                    "unknown event kind {other} at t={t}"
                )));
            }
        }
        let _ = boolean; // bools are consumed through the symbol table paths
    }

    // Renumber times densely (idle steps were skipped).
    for (i, s) in steps.iter_mut().enumerate() {
        s.time = i as u64;
    }
    Ok(Trace { steps })
}

/// Maps an interpreter oracle query at timestep `t` to the model's decision.
fn resolve_query(
    query: &OracleQuery,
    t: u32,
    fn_values: &BTreeMap<(NodeId, String, u32), i64>,
    class_bits: &BTreeMap<(String, u32), bool>,
    net: &Network,
) -> Result<OracleBinding, DecodeError> {
    match query {
        OracleQuery::Fn { instance, name, .. } => {
            let v = fn_values.get(&(*instance, name.clone(), t)).ok_or_else(|| {
                DecodeError::ModelIncomplete(format!("oracle {name} at t={t}"))
            })?;
            // Oracle results are scalar sorts encoded as indices.
            let inst = net.middlebox(*instance).expect("instance");
            let decl = inst.model.oracle(name).expect("oracle decl");
            let value = match decl.result {
                crate::mbx::Sort::Address => Value::Addr(Address(*v as u16)),
                crate::mbx::Sort::Port => Value::Port(Port(*v as u16)),
                crate::mbx::Sort::Content => Value::Content(ContentId(*v as u16)),
                _ => {
                    return Err(DecodeError::ModelInconsistent(
                        "oracle result sort not scalar".into(),
                    ))
                }
            };
            Ok(OracleBinding { query: query.clone(), answer: OracleAnswer::Value(value) })
        }
        OracleQuery::Class { class, .. } => {
            let v = class_bits.get(&(class.clone(), t)).ok_or_else(|| {
                DecodeError::ModelIncomplete(format!("class {class} at t={t}"))
            })?;
            Ok(OracleBinding { query: query.clone(), answer: OracleAnswer::Bool(*v) })
        }
    }
}

/// Convenience wrapper: encode, run, decode. Returns the verdict mapped to
/// the bmc vocabulary.
pub fn check_bounded(
    net: &Network,
    inv: &Invariant,
    bounds: &Bounds,
    cmd: &str,
    timeout_s: u64,
) -> crate::invariant::Verdict {
    let script = match encode_bounded(net, inv, bounds) {
        Ok(s) => s,
        Err(e) => return crate::invariant::Verdict::Unknown { reason: e.to_string() },
    };
    match run_solver(&script, cmd, timeout_s) {
        SolverOutcome::Unsat => crate::invariant::Verdict::Holds { bounds: bounds.clone() },
        SolverOutcome::Sat { values } => match decode_trace(&values, &script, net) {
            Ok(trace) => crate::invariant::Verdict::Violated { trace },
            Err(e) => crate::invariant::Verdict::Unknown {
                reason: format!("sat but trace decoding failed: {e}"),
            },
        },
        SolverOutcome::Unknown { message } => {
            crate::invariant::Verdict::Unknown { reason: message }
        }
        SolverOutcome::SolverError { message } => {
            crate::invariant::Verdict::Unknown { reason: format!("solver error: {message}") }
        }
    }
}

/// The default solver command from the environment, if any.
pub fn default_solver() -> Option<String> {
    std::env::var(SOLVER_ENV).ok().filter(|s| !s.trim().is_empty())
}
