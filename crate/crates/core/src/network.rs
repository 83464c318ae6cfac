//! A network under analysis: the value universe, hosts, middlebox instances,
//! the static topology (including switches, which exist only as routing
//! infrastructure), and per-failure-scenario forwarding tables.
//!
//! Verification-level nodes are hosts and middlebox instances plus the
//! single `omega` pseudo-node representing all static switching. Node ids
//! are assigned in name-sorted order, so identical inputs yield identical
//! ids and downstream artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::mbx::{ConfigValue, MiddleboxInstance, MiddleboxModel, ParamSort, Sort};
use crate::net::{Address, NodeId, NodeKind, Universe, Value};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("duplicate node name {0:?}")]
    DuplicateNode(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("link endpoint {0:?} does not exist")]
    BadLink(String),
    #[error("host {host:?} address {addr:?} is not in the universe")]
    BadHostAddress { host: String, addr: String },
    #[error("two hosts share address {0:?}")]
    DuplicateAddress(String),
    #[error("forwarding rule on unknown node {0:?}")]
    RuleNode(String),
    #[error("scenario {0:?} names a non-middlebox node")]
    ScenarioNode(String),
    #[error("instance {instance:?}: missing config for parameter {param:?}")]
    MissingConfig { instance: String, param: String },
    #[error("instance {instance:?}: config {param:?} has the wrong shape")]
    ConfigShape { instance: String, param: String },
    #[error(transparent)]
    Universe(#[from] crate::net::UniverseError),
}

/// Static topology: every physical node (hosts, middleboxes, switches),
/// physical links, and forwarding tables keyed by failure scenario.
#[derive(Debug, Clone)]
pub struct Topology {
    names: Vec<String>,
    switch: Vec<bool>,
    /// Directed adjacency (both directions of each declared link).
    adj: BTreeMap<usize, BTreeSet<usize>>,
    /// (node, dst address) -> next hop, for the default scenario.
    default_table: BTreeMap<(usize, Address), usize>,
    /// Scenario-specific full table overrides, keyed by failed node set.
    scenario_tables: BTreeMap<BTreeSet<NodeId>, BTreeMap<(usize, Address), usize>>,
}

impl Topology {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name_of(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn is_switch(&self, idx: usize) -> bool {
        self.switch[idx]
    }

    pub fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj.get(&idx).into_iter().flatten().copied()
    }
}

/// A host: a verification node owning one address.
#[derive(Debug, Clone)]
pub struct Host {
    pub id: NodeId,
    pub name: String,
    pub address: Address,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub universe: Universe,
    names: Vec<String>,
    kinds: Vec<NodeKind>,
    hosts: BTreeMap<NodeId, Host>,
    middleboxes: BTreeMap<NodeId, MiddleboxInstance>,
    omega: NodeId,
    pub topology: Topology,
}

impl Network {
    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names.iter().position(|n| n == name).map(|i| NodeId(i as u32))
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        self.kinds[id.0 as usize]
    }

    pub fn omega(&self) -> NodeId {
        self.omega
    }

    /// All verification nodes (hosts, middleboxes, omega) in id order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.names.len()).map(|i| NodeId(i as u32))
    }

    pub fn hosts(&self) -> impl Iterator<Item = &Host> {
        self.hosts.values()
    }

    pub fn host(&self, id: NodeId) -> Option<&Host> {
        self.hosts.get(&id)
    }

    pub fn middleboxes(&self) -> impl Iterator<Item = &MiddleboxInstance> {
        self.middleboxes.values()
    }

    pub fn middlebox(&self, id: NodeId) -> Option<&MiddleboxInstance> {
        self.middleboxes.get(&id)
    }

    pub fn address_owner(&self, addr: Address) -> Option<NodeId> {
        self.hosts.values().find(|h| h.address == addr).map(|h| h.id)
    }

    /// Topology index of a verification node.
    pub fn topo_index(&self, id: NodeId) -> usize {
        self.topology
            .index_of(self.node_name(id))
            .expect("every verification node exists in the topology")
    }

    /// Verification node of a topology index, unless it is a switch.
    pub fn node_of_topo(&self, idx: usize) -> Option<NodeId> {
        if self.topology.is_switch(idx) {
            None
        } else {
            self.node_id(self.topology.name_of(idx))
        }
    }
}

/// Builder consumed by the file loaders and the test fixtures.
#[derive(Debug, Default)]
pub struct NetworkBuilder {
    universe: Option<Universe>,
    hosts: Vec<(String, String)>,
    middleboxes: Vec<(String, Arc<MiddleboxModel>, BTreeMap<String, ConfigValue>)>,
    switches: Vec<String>,
    links: Vec<(String, String)>,
    default_rules: Vec<(String, String, String)>,
    scenario_rules: Vec<(Vec<String>, Vec<(String, String, String)>)>,
}

impl NetworkBuilder {
    pub fn new(universe: Universe) -> Self {
        NetworkBuilder { universe: Some(universe), ..Default::default() }
    }

    pub fn host(mut self, name: &str, address: &str) -> Self {
        self.hosts.push((name.to_string(), address.to_string()));
        self
    }

    pub fn middlebox(
        mut self,
        name: &str,
        model: Arc<MiddleboxModel>,
        config: BTreeMap<String, ConfigValue>,
    ) -> Self {
        self.middleboxes.push((name.to_string(), model, config));
        self
    }

    pub fn switch(mut self, name: &str) -> Self {
        self.switches.push(name.to_string());
        self
    }

    pub fn link(mut self, a: &str, b: &str) -> Self {
        self.links.push((a.to_string(), b.to_string()));
        self
    }

    /// Default-scenario forwarding rule: at `node`, packets for `dst` go to
    /// `next`.
    pub fn route(mut self, node: &str, dst: &str, next: &str) -> Self {
        self.default_rules.push((node.to_string(), dst.to_string(), next.to_string()));
        self
    }

    /// Full forwarding table for the scenario where `failed` are down.
    pub fn scenario(mut self, failed: &[&str], rules: &[(&str, &str, &str)]) -> Self {
        self.scenario_rules.push((
            failed.iter().map(|s| s.to_string()).collect(),
            rules
                .iter()
                .map(|(n, d, x)| (n.to_string(), d.to_string(), x.to_string()))
                .collect(),
        ));
        self
    }

    pub fn build(self) -> Result<Network, NetworkError> {
        let universe = self.universe.expect("universe set");

        // Verification node table: hosts and middleboxes, name-sorted, then
        // the omega pseudo-node.
        let mut vnames: Vec<(String, NodeKind)> = Vec::new();
        for (name, _) in &self.hosts {
            vnames.push((name.clone(), NodeKind::Host));
        }
        for (name, _, _) in &self.middleboxes {
            vnames.push((name.clone(), NodeKind::MiddleboxInstance));
        }
        vnames.sort();
        {
            let mut seen = BTreeSet::new();
            for (n, _) in &vnames {
                if !seen.insert(n.clone()) {
                    return Err(NetworkError::DuplicateNode(n.clone()));
                }
            }
            for s in &self.switches {
                if !seen.insert(s.clone()) {
                    return Err(NetworkError::DuplicateNode(s.clone()));
                }
            }
        }
        let mut names: Vec<String> = vnames.iter().map(|(n, _)| n.clone()).collect();
        let mut kinds: Vec<NodeKind> = vnames.iter().map(|(_, k)| *k).collect();
        let omega = NodeId(names.len() as u32);
        names.push("@omega".to_string());
        kinds.push(NodeKind::OmegaSwitch);

        let node_id = |names: &[String], name: &str| -> Option<NodeId> {
            names.iter().position(|n| n == name).map(|i| NodeId(i as u32))
        };

        let mut hosts = BTreeMap::new();
        let mut used_addrs = BTreeSet::new();
        for (name, addr) in &self.hosts {
            let id = node_id(&names, name).unwrap();
            let address = universe.address(addr).map_err(|_| NetworkError::BadHostAddress {
                host: name.clone(),
                addr: addr.clone(),
            })?;
            if !used_addrs.insert(address) {
                return Err(NetworkError::DuplicateAddress(addr.clone()));
            }
            hosts.insert(id, Host { id, name: name.clone(), address });
        }

        let mut middleboxes = BTreeMap::new();
        for (name, model, config) in &self.middleboxes {
            let id = node_id(&names, name).unwrap();
            validate_config(name, model, config)?;
            middleboxes.insert(
                id,
                MiddleboxInstance {
                    id,
                    name: name.clone(),
                    model: model.clone(),
                    config: config.clone(),
                },
            );
        }

        // Topology over hosts + middleboxes + switches.
        let mut tnames: Vec<String> =
            self.hosts.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
        tnames.extend(self.middleboxes.iter().map(|(n, _, _)| n.clone()));
        let switch_start = tnames.len();
        tnames.extend(self.switches.iter().cloned());
        let switch: Vec<bool> = (0..tnames.len()).map(|i| i >= switch_start).collect();
        let tindex = |tnames: &[String], name: &str| -> Result<usize, NetworkError> {
            tnames
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| NetworkError::UnknownNode(name.to_string()))
        };

        let mut adj: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (a, b) in &self.links {
            let ia = tindex(&tnames, a).map_err(|_| NetworkError::BadLink(a.clone()))?;
            let ib = tindex(&tnames, b).map_err(|_| NetworkError::BadLink(b.clone()))?;
            adj.entry(ia).or_default().insert(ib);
            adj.entry(ib).or_default().insert(ia);
        }

        let parse_rules = |tnames: &[String],
                           rules: &[(String, String, String)]|
         -> Result<BTreeMap<(usize, Address), usize>, NetworkError> {
            let mut table = BTreeMap::new();
            for (node, dst, next) in rules {
                let n = tindex(tnames, node).map_err(|_| NetworkError::RuleNode(node.clone()))?;
                let d = universe.address(dst)?;
                let x = tindex(tnames, next).map_err(|_| NetworkError::RuleNode(next.clone()))?;
                table.insert((n, d), x);
            }
            Ok(table)
        };

        let default_table = parse_rules(&tnames, &self.default_rules)?;
        let mut scenario_tables = BTreeMap::new();
        for (failed, rules) in &self.scenario_rules {
            let mut key = BTreeSet::new();
            for f in failed {
                let id = node_id(&names, f).ok_or_else(|| NetworkError::ScenarioNode(f.clone()))?;
                if !matches!(kinds[id.0 as usize], NodeKind::MiddleboxInstance) {
                    return Err(NetworkError::ScenarioNode(f.clone()));
                }
                key.insert(id);
            }
            scenario_tables.insert(key, parse_rules(&tnames, rules)?);
        }

        Ok(Network {
            universe,
            names,
            kinds,
            hosts,
            middleboxes,
            omega,
            topology: Topology {
                names: tnames,
                switch,
                adj,
                default_table,
                scenario_tables,
            },
        })
    }
}

impl Topology {
    /// The forwarding table in effect under a failed set: exact scenario
    /// match if declared, else the default table.
    pub fn effective_table(
        &self,
        failed: &BTreeSet<NodeId>,
    ) -> &BTreeMap<(usize, Address), usize> {
        self.scenario_tables.get(failed).unwrap_or(&self.default_table)
    }

    pub fn declared_scenarios(&self) -> impl Iterator<Item = &BTreeSet<NodeId>> {
        self.scenario_tables.keys()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        0..self.names.len()
    }

    pub fn default_rules(&self) -> impl Iterator<Item = ((usize, Address), usize)> + '_ {
        self.default_table.iter().map(|(k, v)| (*k, *v))
    }

    pub fn scenario_rules(
        &self,
    ) -> impl Iterator<Item = (&BTreeSet<NodeId>, &BTreeMap<(usize, Address), usize>)> {
        self.scenario_tables.iter()
    }
}

/// Expected element sorts of a value, shallowly checked.
fn value_matches(v: &Value, s: &Sort) -> bool {
    matches!(
        (v, s),
        (Value::Addr(_), Sort::Address)
            | (Value::Port(_), Sort::Port)
            | (Value::Content(_), Sort::Content)
            | (Value::Flow(_), Sort::Flow)
    ) || matches!((v, s), (Value::Tuple(items), Sort::Tuple(ts))
            if items.len() == ts.len() && items.iter().zip(ts).all(|(v, s)| value_matches(v, s)))
}

fn tuple_matches(items: &[Value], sorts: &[Sort]) -> bool {
    items.len() == sorts.len() && items.iter().zip(sorts).all(|(v, s)| value_matches(v, s))
}

fn validate_config(
    name: &str,
    model: &MiddleboxModel,
    config: &BTreeMap<String, ConfigValue>,
) -> Result<(), NetworkError> {
    for param in &model.params {
        let Some(v) = config.get(&param.name) else {
            return Err(NetworkError::MissingConfig {
                instance: name.to_string(),
                param: param.name.clone(),
            });
        };
        let ok = match (&param.sort, v) {
            (ParamSort::Scalar(s), ConfigValue::Scalar(val)) => value_matches(val, s),
            (ParamSort::SetOf(sorts), ConfigValue::Set(items)) => {
                items.iter().all(|t| tuple_matches(t, sorts))
            }
            _ => false,
        };
        if !ok {
            return Err(NetworkError::ConfigShape {
                instance: name.to_string(),
                param: param.name.clone(),
            });
        }
    }
    Ok(())
}
