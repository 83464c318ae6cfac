//! Verification pipeline: load the network and invariants, classify
//! middlebox state behavior, compute policy equivalence classes and
//! invariant symmetry groups, then verify one representative per group on
//! its slice (or the full network when slicing is off or impossible).
//!
//! Reports are deterministic for fixed inputs except for `wall_ms` timing
//! fields, which consumers must ignore when comparing runs.

pub mod schema;
pub mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde_json::{json, Value};
use thiserror::Error;

use mboxverify_core::bmc::{explore, Bounds, PacketUniverse};
use mboxverify_core::invariant::{symmetry_groups, Invariant, SymmetryGroup, Verdict, VerdictKind};
use mboxverify_core::net::NodeKind;
use mboxverify_core::network::Network;
use mboxverify_core::slicer::{
    build_slice, classify_state_class, declared_state_class, policy_partition, ClassifyBounds,
    PolicyPartition, Slice, SliceError, StateClassKind,
};
use mboxverify_core::smt::{self, encode_causal, run_solver, SolverOutcome};
use mboxverify_core::trace::validate_trace;

use schema::{ClassHint, LoadedNetwork, SchemaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    Bmc,
    SmtBounded,
    SmtCausal,
    Both,
}

impl EngineKind {
    pub fn parse(s: &str) -> Option<EngineKind> {
        match s {
            "bmc" => Some(EngineKind::Bmc),
            "smt-bounded" => Some(EngineKind::SmtBounded),
            "smt-causal" => Some(EngineKind::SmtCausal),
            "both" => Some(EngineKind::Both),
            _ => None,
        }
    }

}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub engine: EngineKind,
    pub depth: u32,
    pub max_emits: u32,
    pub max_failures: Option<u32>,
    pub solver_cmd: Option<String>,
    pub solver_timeout_s: u64,
    pub slicing: bool,
    pub symmetry: bool,
    pub jobs: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            engine: EngineKind::Bmc,
            depth: 8,
            max_emits: 2,
            max_failures: None,
            solver_cmd: smt::default_solver(),
            solver_timeout_s: 60,
            slicing: true,
            symmetry: true,
            jobs: 1,
            out_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Transfer(#[from] mboxverify_core::netfunc::TransferError),
    #[error("engine {0} requires a solver command (--solver-cmd or MBOXVERIFY_SOLVER)")]
    SolverMissing(&'static str),
    #[error("classification failed for model {model}: {msg}")]
    Classify { model: String, msg: String },
    #[error("failed to write output: {0}")]
    Io(#[from] std::io::Error),
}

/// Outcome for one symmetry group.
pub struct GroupResult {
    pub group: SymmetryGroup,
    pub verdict: Verdict,
    pub engine: &'static str,
    pub slice: Option<Slice>,
    pub slice_fallback: Option<String>,
    pub wall_ms: u128,
}

pub struct Report {
    pub groups: Vec<GroupResult>,
    pub classification: BTreeMap<String, (StateClassKind, &'static str)>,
    pub partition: PolicyPartition,
    pub invariant_count: usize,
    pub wall_ms: u128,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        let kinds: Vec<VerdictKind> = self.groups.iter().map(|g| g.verdict.kind()).collect();
        if kinds.iter().any(|k| *k == VerdictKind::Violated) {
            1
        } else if kinds.iter().any(|k| *k == VerdictKind::Unknown) {
            2
        } else {
            0
        }
    }

    pub fn to_json(&self, net: &Network) -> Value {
        let classification: BTreeMap<String, Value> = self
            .classification
            .iter()
            .map(|(m, (k, prov))| (m.clone(), json!({ "class": k.to_string(), "source": prov })))
            .collect();
        let classes: BTreeMap<String, Vec<String>> = self
            .partition
            .classes()
            .map(|(c, members)| {
                (
                    format!("class{c}"),
                    members.iter().map(|h| net.node_name(*h).to_string()).collect(),
                )
            })
            .collect();
        let groups: Vec<Value> = self
            .groups
            .iter()
            .map(|g| {
                let mut obj = serde_json::Map::new();
                obj.insert("representative".into(), json!(g.group.representative.name));
                obj.insert(
                    "members".into(),
                    json!(g.group.members.iter().map(|m| m.name.clone()).collect::<Vec<_>>()),
                );
                obj.insert("verdict".into(), json!(g.verdict.kind().to_string()));
                if let Verdict::Unknown { reason } = &g.verdict {
                    obj.insert("reason".into(), json!(reason));
                }
                obj.insert("engine".into(), json!(g.engine));
                if let Some(slice) = &g.slice {
                    obj.insert(
                        "slice".into(),
                        json!({
                            "rule": match slice.rule {
                                mboxverify_core::slicer::SliceRule::FlowParallel => "flow-parallel",
                                mboxverify_core::slicer::SliceRule::WithRepresentatives => "with-representatives",
                            },
                            "nodes": slice
                                .nodes
                                .iter()
                                .map(|n| net.node_name(*n).to_string())
                                .collect::<Vec<_>>(),
                            "representatives": slice
                                .representatives
                                .iter()
                                .map(|(c, h)| (format!("class{c}"), net.node_name(*h).to_string()))
                                .collect::<BTreeMap<_, _>>(),
                        }),
                    );
                }
                if let Some(fallback) = &g.slice_fallback {
                    obj.insert("slice_fallback".into(), json!(fallback));
                }
                obj.insert("wall_ms".into(), json!(g.wall_ms as u64));
                Value::Object(obj)
            })
            .collect();

        let mut summary = BTreeMap::new();
        for g in &self.groups {
            *summary.entry(g.verdict.kind().to_string()).or_insert(0u64) +=
                g.group.members.len() as u64;
        }

        json!({
            "classification": classification,
            "policy_classes": classes,
            "groups": groups,
            "invariants": self.invariant_count,
            "summary": summary,
            "wall_ms": self.wall_ms as u64,
        })
    }
}

/// Resolves the state class of every model: an explicit hint wins, then the
/// bundled declared tag, then the bounded semantic check.
pub fn classify_models(
    loaded: &LoadedNetwork,
) -> Result<BTreeMap<String, (StateClassKind, &'static str)>, PipelineError> {
    let mut out = BTreeMap::new();
    for (name, model) in &loaded.models {
        let hint = loaded.hints.get(name).copied().unwrap_or(ClassHint::Auto);
        let resolved = match hint {
            ClassHint::FlowParallel => (StateClassKind::FlowParallel, "hint"),
            ClassHint::OriginAgnostic => (StateClassKind::OriginAgnostic, "hint"),
            ClassHint::General => (StateClassKind::General, "hint"),
            ClassHint::Auto => match declared_state_class(name) {
                Some(k) => (k, "declared"),
                None => {
                    let sc = classify_state_class(model.clone(), &ClassifyBounds::default())
                        .map_err(|e| PipelineError::Classify {
                            model: name.clone(),
                            msg: e.to_string(),
                        })?;
                    (sc.kind, "checked")
                }
            },
        };
        out.insert(name.clone(), resolved);
    }
    Ok(out)
}

fn slice_universe(net: &Network, slice: &Slice) -> PacketUniverse {
    // Packets belonging to a slice are exchanged between its hosts;
    // addresses owned by no host (NAT pools and the like) stay visible.
    let mut addresses: BTreeSet<mboxverify_core::net::Address> = net
        .hosts()
        .filter(|h| slice.nodes.contains(&h.id))
        .map(|h| h.address)
        .collect();
    for a in net.universe.declared_addresses() {
        if net.address_owner(a).is_none() {
            addresses.insert(a);
        }
    }
    PacketUniverse { addresses: Some(addresses), ports: None, contents: None }
}

fn run_engine(
    net: &Network,
    inv: &Invariant,
    bounds: &Bounds,
    cfg: &RunConfig,
) -> Result<(Verdict, &'static str), PipelineError> {
    match cfg.engine {
        EngineKind::Bmc => Ok((explore(net, inv, bounds), "bmc")),
        EngineKind::SmtBounded => {
            let cmd = cfg
                .solver_cmd
                .as_deref()
                .ok_or(PipelineError::SolverMissing("smt-bounded"))?;
            Ok((smt::check_bounded(net, inv, bounds, cmd, cfg.solver_timeout_s), "smt-bounded"))
        }
        EngineKind::SmtCausal => {
            let cmd = cfg
                .solver_cmd
                .as_deref()
                .ok_or(PipelineError::SolverMissing("smt-causal"))?;
            let verdict = match encode_causal(net, inv) {
                Err(e) => Verdict::Unknown { reason: e.to_string() },
                Ok(script) => match run_solver(&script, cmd, cfg.solver_timeout_s) {
                    SolverOutcome::Unsat => Verdict::Holds { bounds: bounds.clone() },
                    SolverOutcome::Sat { .. } => Verdict::Unknown {
                        reason: "satisfiable in causal mode (no trace decoding; best-effort)"
                            .to_string(),
                    },
                    SolverOutcome::Unknown { message } => Verdict::Unknown { reason: message },
                    SolverOutcome::SolverError { message } => {
                        Verdict::Unknown { reason: format!("solver error: {message}") }
                    }
                },
            };
            Ok((verdict, "smt-causal"))
        }
        EngineKind::Both => {
            let bmc_verdict = explore(net, inv, bounds);
            let cmd = cfg
                .solver_cmd
                .as_deref()
                .ok_or(PipelineError::SolverMissing("both"))?;
            let smt_verdict =
                smt::check_bounded(net, inv, bounds, cmd, cfg.solver_timeout_s);
            if bmc_verdict.kind() == smt_verdict.kind() {
                Ok((bmc_verdict, "both"))
            } else {
                Ok((
                    Verdict::Unknown {
                        reason: format!(
                            "engine disagreement: bmc={} smt={}",
                            bmc_verdict.kind(),
                            smt_verdict.kind()
                        ),
                    },
                    "both",
                ))
            }
        }
    }
}

/// Verifies one representative invariant, applying the slicing rules.
fn verify_group(
    net: &Network,
    class_table: &BTreeMap<String, StateClassKind>,
    partition: &PolicyPartition,
    group: SymmetryGroup,
    cfg: &RunConfig,
) -> Result<GroupResult, PipelineError> {
    let started = Instant::now();
    let inv = group.representative.clone();
    let mut bounds = Bounds {
        depth: cfg.depth,
        max_emits: cfg.max_emits,
        max_failures: cfg.max_failures,
        ..Bounds::default()
    };

    let mut slice = None;
    let mut slice_fallback = None;
    let mut target_net = net;
    let mut target_inv = inv.clone();
    let restricted;
    if cfg.slicing {
        match build_slice(net, &inv, class_table, partition) {
            Ok(s) => {
                bounds.universe = slice_universe(net, &s);
                restricted = mboxverify_core::slicer::restrict_network(net, &s.nodes);
                target_inv = mboxverify_core::invariant::remap_invariant(&inv, net, &restricted)
                    .expect("slices contain every referenced node");
                target_net = &restricted;
                slice = Some(s);
            }
            Err(SliceError::GeneralMiddleboxPresent(ids)) => {
                slice_fallback = Some(format!(
                    "general middleboxes present ({}); verified on the full network",
                    ids.join(", ")
                ));
            }
            Err(SliceError::Transfer(e)) => return Err(e.into()),
        }
    }

    let (mut verdict, engine) = run_engine(target_net, &target_inv, &bounds, cfg)?;
    // Traces found on a slice are translated back into the full network's
    // node ids; a slice is a subnetwork, so they stay valid there.
    if slice.is_some() {
        if let Verdict::Violated { trace } = &verdict {
            match mboxverify_core::trace::remap_trace(trace, target_net, net) {
                Some(t) => verdict = Verdict::Violated { trace: t },
                None => {
                    verdict = Verdict::Unknown {
                        reason: "counterexample could not be mapped back to the network".into(),
                    }
                }
            }
        }
    }
    Ok(GroupResult {
        group,
        verdict,
        engine,
        slice,
        slice_fallback,
        wall_ms: started.elapsed().as_millis(),
    })
}

/// The full pipeline over network and invariant files.
pub fn verify(
    network_file: &Path,
    invariants_file: &Path,
    cfg: &RunConfig,
) -> Result<(Report, Network), PipelineError> {
    let started = Instant::now();
    let loaded = schema::load_network(network_file)?;
    let invariants = schema::load_invariants(invariants_file, &loaded.net)?;

    // Static loops in the default scenario are a configuration error and
    // are surfaced immediately with the cycle.
    mboxverify_core::netfunc::compute_transfer(
        &loaded.net,
        &mboxverify_core::net::FailureScenario::none(),
    )?;

    let classification = classify_models(&loaded)?;
    let class_table: BTreeMap<String, StateClassKind> =
        classification.iter().map(|(m, (k, _))| (m.clone(), *k)).collect();

    let partition = policy_partition(&loaded.net)?;

    let groups: Vec<SymmetryGroup> = if cfg.symmetry {
        let mut gs = symmetry_groups(&invariants, &partition, &loaded.net);
        gs.sort_by(|a, b| a.representative.name.cmp(&b.representative.name));
        gs
    } else {
        invariants
            .iter()
            .map(|inv| SymmetryGroup {
                representative: inv.clone(),
                members: vec![inv.clone()],
                bijections: vec![BTreeMap::new()],
            })
            .collect()
    };

    // Verify representatives, in parallel up to the jobs limit.
    let jobs = cfg.jobs.max(1);
    let n = groups.len();
    let results: Mutex<Vec<Option<Result<GroupResult, PipelineError>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let group_list: Vec<SymmetryGroup> = groups;
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = verify_group(
                    &loaded.net,
                    &class_table,
                    &partition,
                    group_list[i].clone(),
                    cfg,
                );
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });

    let mut group_results = Vec::with_capacity(n);
    for r in results.into_inner().unwrap() {
        group_results.push(r.expect("worker filled every slot")?);
    }

    let report = Report {
        groups: group_results,
        classification,
        partition,
        invariant_count: invariants.len(),
        wall_ms: started.elapsed().as_millis(),
    };

    // Output files: the report and a replayable counterexample per
    // violated representative.
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        let report_json = report.to_json(&loaded.net);
        std::fs::write(dir.join("report.json"), format!("{:#}\n", report_json))?;
        let cex_dir = dir.join("counterexamples");
        for g in &report.groups {
            if let Verdict::Violated { trace } = &g.verdict {
                std::fs::create_dir_all(&cex_dir)?;
                debug_assert!(validate_trace(trace, &loaded.net).is_empty());
                let name = sanitize(&g.group.representative.name);
                std::fs::write(
                    cex_dir.join(format!("{name}.trace.json")),
                    format!("{:#}\n", trace.to_json(&loaded.net)),
                )?;
            }
        }
    }

    Ok((report, loaded.net))
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes a generated scenario into a directory.
pub fn write_scenario(
    name: &str,
    params: &scenario::ScenarioParams,
    out: &Path,
) -> Result<Vec<PathBuf>, Box<dyn std::error::Error>> {
    let generated = scenario::gen_scenario(name, params)?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (file, contents) in generated.files {
        let path = out.join(file);
        std::fs::write(&path, contents)?;
        written.push(path);
    }
    Ok(written)
}

/// Human-readable one-line-per-group summary.
pub fn print_summary(report: &Report, net: &Network) {
    for g in &report.groups {
        let members = g.group.members.len();
        let slice_note = match (&g.slice, &g.slice_fallback) {
            (Some(s), _) => format!(
                "slice[{}]",
                s.nodes
                    .iter()
                    .filter(|n| !matches!(net.kind(**n), NodeKind::OmegaSwitch))
                    .count()
            ),
            (None, Some(_)) => "full-network".to_string(),
            (None, None) => "full-network".to_string(),
        };
        println!(
            "{:10} {} ({} member{}, {}, {} ms, {})",
            g.verdict.kind().to_string(),
            g.group.representative.name,
            members,
            if members == 1 { "" } else { "s" },
            slice_note,
            g.wall_ms,
            g.engine,
        );
    }
    let code = report.exit_code();
    println!(
        "checked {} invariants in {} groups: {}",
        report.invariant_count,
        report.groups.len(),
        match code {
            0 => "all hold (within bounds)",
            1 => "violations found",
            _ => "some outcomes unknown",
        }
    );
}
