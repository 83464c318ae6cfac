//! Library of bundled middlebox models. Each builtin is defined by a DSL
//! source compiled into the binary and goes through the same parser as user
//! models, so `builtin(name)` and `parse_model(source_of(name))` agree
//! exactly.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use thiserror::Error;

use super::ast::MiddleboxModel;
use super::parse::parse_model;

pub const LEARNING_FIREWALL: &str = "learning_firewall";
pub const ACL_FIREWALL: &str = "acl_firewall";
pub const NAT: &str = "nat";
pub const CONTENT_CACHE: &str = "content_cache";
pub const LOAD_BALANCER: &str = "load_balancer";
pub const IDPS: &str = "idps";

const SOURCES: &[(&str, &str)] = &[
    (LEARNING_FIREWALL, include_str!("models/learning_firewall.dsl")),
    (ACL_FIREWALL, include_str!("models/acl_firewall.dsl")),
    (NAT, include_str!("models/nat.dsl")),
    (CONTENT_CACHE, include_str!("models/content_cache.dsl")),
    (LOAD_BALANCER, include_str!("models/load_balancer.dsl")),
    (IDPS, include_str!("models/idps.dsl")),
];

#[derive(Debug, Error)]
#[error("unknown builtin model {0:?}")]
pub struct UnknownBuiltin(pub String);

fn table() -> &'static BTreeMap<&'static str, Arc<MiddleboxModel>> {
    static TABLE: OnceLock<BTreeMap<&'static str, Arc<MiddleboxModel>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        SOURCES
            .iter()
            .map(|(name, src)| {
                let model = parse_model(src)
                    .unwrap_or_else(|e| panic!("builtin model {name} failed to parse: {e}"));
                (*name, Arc::new(model))
            })
            .collect()
    })
}

/// Names of all bundled models, in stable order.
pub fn builtin_names() -> Vec<&'static str> {
    table().keys().copied().collect()
}

/// The DSL source of a bundled model.
pub fn builtin_source(name: &str) -> Option<&'static str> {
    SOURCES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Looks up a bundled model by name.
pub fn builtin(name: &str) -> Result<Arc<MiddleboxModel>, UnknownBuiltin> {
    table().get(name).cloned().ok_or_else(|| UnknownBuiltin(name.to_string()))
}
