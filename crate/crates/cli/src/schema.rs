//! On-disk file formats: network.json and invariants.json.
//!
//! Switches are not declared explicitly: any link endpoint that is neither a
//! host nor a middlebox id is a switch. Middlebox models are either bundled
//! model names or paths to DSL files, resolved relative to the network file.
//! Schema violations are reported with JSON-pointer-style paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use mboxverify_core::invariant::{Invariant, MbxRef, Predicate};
use mboxverify_core::mbx::{
    builtin, parse_model, ConfigValue, MiddleboxModel, ParamSort, Sort,
};
use mboxverify_core::net::{Universe, Value};
use mboxverify_core::network::{Network, NetworkBuilder};

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("failed to read {file}: {source}")]
    Io { file: PathBuf, source: std::io::Error },
    #[error("failed to parse {file}: {source}")]
    Json { file: PathBuf, source: serde_json::Error },
    #[error("model {file}: {msg}")]
    Model { file: String, msg: String },
    #[error(transparent)]
    Network(#[from] mboxverify_core::network::NetworkError),
    #[error(transparent)]
    Universe(#[from] mboxverify_core::net::UniverseError),
}

fn invalid(path: impl Into<String>, msg: impl Into<String>) -> SchemaError {
    SchemaError::Invalid { path: path.into(), msg: msg.into() }
}

#[derive(Debug, Deserialize)]
pub struct UniverseFile {
    pub addresses: Vec<String>,
    pub ports: Vec<String>,
    #[serde(default)]
    pub contents: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct HostFile {
    pub id: String,
    pub address: String,
}

#[derive(Debug, Deserialize)]
pub struct MiddleboxFile {
    pub id: String,
    pub model: String,
    #[serde(default)]
    pub config: BTreeMap<String, serde_json::Value>,
    #[serde(default = "default_hint")]
    pub class_hint: String,
}

fn default_hint() -> String {
    "auto".to_string()
}

#[derive(Debug, Deserialize)]
pub struct ForwardingRuleFile {
    pub node: String,
    pub dst: String,
    pub next: String,
}

#[derive(Debug, Default, Deserialize)]
pub struct ForwardingFile {
    #[serde(default)]
    pub default: Vec<ForwardingRuleFile>,
    #[serde(default)]
    pub scenarios: BTreeMap<String, Vec<ForwardingRuleFile>>,
}

#[derive(Debug, Deserialize)]
pub struct NetworkFile {
    pub universe: UniverseFile,
    #[serde(default)]
    pub hosts: Vec<HostFile>,
    #[serde(default)]
    pub middleboxes: Vec<MiddleboxFile>,
    #[serde(default)]
    pub links: Vec<(String, String)>,
    #[serde(default)]
    pub forwarding: Option<ForwardingFile>,
}

/// Class hint attached to a middlebox declaration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassHint {
    Auto,
    FlowParallel,
    OriginAgnostic,
    General,
}

impl ClassHint {
    fn parse(s: &str, at: &str) -> Result<ClassHint, SchemaError> {
        match s {
            "auto" => Ok(ClassHint::Auto),
            "flow-parallel" => Ok(ClassHint::FlowParallel),
            "origin-agnostic" => Ok(ClassHint::OriginAgnostic),
            "general" => Ok(ClassHint::General),
            other => Err(invalid(at, format!("unknown class_hint {other:?}"))),
        }
    }
}

/// A loaded network plus sidecar information the pipeline needs.
pub struct LoadedNetwork {
    pub net: Network,
    /// Model name -> parsed model (shared across instances).
    pub models: BTreeMap<String, Arc<MiddleboxModel>>,
    /// Model name -> strongest hint declared for it.
    pub hints: BTreeMap<String, ClassHint>,
}

fn config_value(
    raw: &serde_json::Value,
    sort: &ParamSort,
    u: &Universe,
    at: &str,
) -> Result<ConfigValue, SchemaError> {
    match sort {
        ParamSort::Scalar(s) => Ok(ConfigValue::Scalar(scalar_value(raw, s, u, at)?)),
        ParamSort::SetOf(sorts) => {
            let items = raw
                .as_array()
                .ok_or_else(|| invalid(at, "expected an array for a set parameter"))?;
            let mut out = std::collections::BTreeSet::new();
            for (i, item) in items.iter().enumerate() {
                let at_i = format!("{at}/{i}");
                let tuple: Vec<Value> = if sorts.len() == 1 {
                    vec![scalar_value(item, &sorts[0], u, &at_i)?]
                } else {
                    let parts = item
                        .as_array()
                        .ok_or_else(|| invalid(&at_i, "expected a tuple array"))?;
                    if parts.len() != sorts.len() {
                        return Err(invalid(
                            &at_i,
                            format!("expected {} tuple elements", sorts.len()),
                        ));
                    }
                    parts
                        .iter()
                        .zip(sorts)
                        .enumerate()
                        .map(|(j, (p, s))| scalar_value(p, s, u, &format!("{at_i}/{j}")))
                        .collect::<Result<_, _>>()?
                };
                out.insert(tuple);
            }
            Ok(ConfigValue::Set(out))
        }
    }
}

fn scalar_value(
    raw: &serde_json::Value,
    sort: &Sort,
    u: &Universe,
    at: &str,
) -> Result<Value, SchemaError> {
    let s = raw
        .as_str()
        .ok_or_else(|| invalid(at, "expected a string value"))?;
    match sort {
        Sort::Address => Ok(Value::Addr(
            u.address(s).map_err(|e| invalid(at, e.to_string()))?,
        )),
        Sort::Port => Ok(Value::Port(u.port(s).map_err(|e| invalid(at, e.to_string()))?)),
        Sort::Content => Ok(Value::Content(
            u.content(s).map_err(|e| invalid(at, e.to_string()))?,
        )),
        other => Err(invalid(at, format!("unsupported config sort {other}"))),
    }
}

/// Loads and validates a network file.
pub fn load_network(path: &Path) -> Result<LoadedNetwork, SchemaError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SchemaError::Io { file: path.to_path_buf(), source: e })?;
    let file: NetworkFile = serde_json::from_str(&text)
        .map_err(|e| SchemaError::Json { file: path.to_path_buf(), source: e })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let universe = Universe::new(
        file.universe.addresses.clone(),
        file.universe.ports.clone(),
        file.universe.contents.clone(),
    )?;

    // Models: bundled names or DSL file paths.
    let mut models: BTreeMap<String, Arc<MiddleboxModel>> = BTreeMap::new();
    let mut hints: BTreeMap<String, ClassHint> = BTreeMap::new();
    let mut builder = NetworkBuilder::new(universe.clone());

    for (i, h) in file.hosts.iter().enumerate() {
        if h.id.is_empty() {
            return Err(invalid(format!("/hosts/{i}/id"), "empty id"));
        }
        builder = builder.host(&h.id, &h.address);
    }

    for (i, m) in file.middleboxes.iter().enumerate() {
        let at = format!("/middleboxes/{i}");
        let model: Arc<MiddleboxModel> = if m.model.ends_with(".dsl") {
            let model_path = base.join(&m.model);
            let src = std::fs::read_to_string(&model_path)
                .map_err(|e| SchemaError::Io { file: model_path.clone(), source: e })?;
            Arc::new(parse_model(&src).map_err(|e| SchemaError::Model {
                file: m.model.clone(),
                msg: e.to_string(),
            })?)
        } else {
            builtin(&m.model).map_err(|e| invalid(format!("{at}/model"), e.to_string()))?
        };
        let hint = ClassHint::parse(&m.class_hint, &format!("{at}/class_hint"))?;
        match hints.get(&model.name) {
            Some(prev) if *prev != hint && *prev != ClassHint::Auto && hint != ClassHint::Auto => {
                return Err(invalid(
                    format!("{at}/class_hint"),
                    format!("conflicting hints for model {}", model.name),
                ));
            }
            Some(prev) if *prev == ClassHint::Auto => {
                hints.insert(model.name.clone(), hint);
            }
            Some(_) => {}
            None => {
                hints.insert(model.name.clone(), hint);
            }
        }
        models.insert(model.name.clone(), model.clone());

        // Config bindings coerced by the declared parameter sorts.
        let mut config = BTreeMap::new();
        for p in &model.params {
            let raw = m.config.get(&p.name).ok_or_else(|| {
                invalid(format!("{at}/config/{}", p.name), "missing parameter binding")
            })?;
            config.insert(
                p.name.clone(),
                config_value(raw, &p.sort, &universe, &format!("{at}/config/{}", p.name))?,
            );
        }
        builder = builder.middlebox(&m.id, model, config);
    }

    // Switches: link endpoints that are neither hosts nor middleboxes.
    let known: std::collections::BTreeSet<&str> = file
        .hosts
        .iter()
        .map(|h| h.id.as_str())
        .chain(file.middleboxes.iter().map(|m| m.id.as_str()))
        .collect();
    let mut switches: Vec<&str> = Vec::new();
    for (a, b) in &file.links {
        for end in [a, b] {
            if !known.contains(end.as_str()) && !switches.contains(&end.as_str()) {
                switches.push(end);
            }
        }
    }
    for s in &switches {
        builder = builder.switch(s);
    }
    for (a, b) in &file.links {
        builder = builder.link(a, b);
    }

    if let Some(fw) = &file.forwarding {
        for r in &fw.default {
            builder = builder.route(&r.node, &r.dst, &r.next);
        }
        for (key, rules) in &fw.scenarios {
            let failed: Vec<&str> =
                key.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            let named: Vec<(&str, &str, &str)> = rules
                .iter()
                .map(|r| (r.node.as_str(), r.dst.as_str(), r.next.as_str()))
                .collect();
            builder = builder.scenario(&failed, &named);
        }
    }

    Ok(LoadedNetwork { net: builder.build()?, models, hints })
}

#[derive(Debug, Deserialize)]
struct InvariantFile {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    target: String,
    #[serde(default)]
    src: Option<String>,
    #[serde(default)]
    origin: Option<String>,
    #[serde(default)]
    via: Option<String>,
    #[serde(default)]
    max_failures: u32,
}

/// Loads and validates an invariants file against a network.
pub fn load_invariants(path: &Path, net: &Network) -> Result<Vec<Invariant>, SchemaError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SchemaError::Io { file: path.to_path_buf(), source: e })?;
    let file: Vec<InvariantFile> = serde_json::from_str(&text)
        .map_err(|e| SchemaError::Json { file: path.to_path_buf(), source: e })?;

    let mut out = Vec::new();
    let mut names = std::collections::BTreeSet::new();
    for (i, inv) in file.iter().enumerate() {
        let at = format!("/{i}");
        if !names.insert(inv.name.clone()) {
            return Err(invalid(format!("{at}/name"), "duplicate invariant name"));
        }
        let target = net
            .node_id(&inv.target)
            .ok_or_else(|| invalid(format!("{at}/target"), "unknown node"))?;
        let addr = |field: &Option<String>, fname: &str| -> Result<_, SchemaError> {
            let raw = field
                .as_ref()
                .ok_or_else(|| invalid(format!("{at}/{fname}"), "missing field"))?;
            net.universe
                .address(raw)
                .map_err(|e| invalid(format!("{at}/{fname}"), e.to_string()))
        };
        let predicate = match inv.kind.as_str() {
            "simple-isolation" => Predicate::SrcEquals(addr(&inv.src, "src")?),
            "flow-isolation" => Predicate::NoPriorOutboundFlow(addr(&inv.src, "src")?),
            "data-isolation" => Predicate::OriginEquals(addr(&inv.origin, "origin")?),
            "traversal" => {
                let via = inv
                    .via
                    .as_ref()
                    .ok_or_else(|| invalid(format!("{at}/via"), "missing field"))?;
                let r = match net.node_id(via) {
                    Some(id) if net.middlebox(id).is_some() => MbxRef::Instance(id),
                    Some(_) => {
                        return Err(invalid(format!("{at}/via"), "node is not a middlebox"))
                    }
                    None => MbxRef::Kind(via.clone()),
                };
                // An optional src qualifier scopes the obligation to traffic
                // from one source address.
                match &inv.src {
                    Some(_) => Predicate::And(vec![
                        Predicate::SrcEquals(addr(&inv.src, "src")?),
                        Predicate::NotTraversed(r),
                    ]),
                    None => Predicate::NotTraversed(r),
                }
            }
            other => {
                return Err(invalid(
                    format!("{at}/type"),
                    format!("unknown invariant type {other:?}"),
                ))
            }
        };
        out.push(Invariant {
            name: inv.name.clone(),
            target,
            predicate,
            max_failures: inv.max_failures,
        });
    }
    Ok(out)
}
