//! AST for the guarded-command middlebox modeling language.
//!
//! Models are loop-free by construction: rule bodies are straight-line
//! statement lists ending in a single `forward(...)` or `drop` terminator,
//! so every model processes a packet in a statically bounded number of steps
//! and emits a statically bounded number of packets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::net::{NodeId, Value};

/// Value sorts usable in declarations and inferred for expressions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sort {
    Address,
    Port,
    Content,
    Flow,
    Packet,
    Tuple(Vec<Sort>),
}

impl std::fmt::Display for Sort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sort::Address => write!(f, "Address"),
            Sort::Port => write!(f, "Port"),
            Sort::Content => write!(f, "Content"),
            Sort::Flow => write!(f, "Flow"),
            Sort::Packet => write!(f, "Packet"),
            Sort::Tuple(ts) => {
                write!(f, "(")?;
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Sort of a config parameter: a scalar or a finite set of tuples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamSort {
    Scalar(Sort),
    SetOf(Vec<Sort>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub sort: ParamSort,
}

/// Register shapes. All registers are volatile: entering the failed state
/// clears them, which is what scopes state to "since it last failed".
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegisterShape {
    SetOf(Vec<Sort>),
    MapOf(Vec<Sort>, Vec<Sort>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterDecl {
    pub name: String,
    pub shape: RegisterShape,
}

/// Range constraint for an oracle function result: either a whole sort of
/// the universe (fresh value included) or the contents of a config set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RangeExpr {
    Sort(Sort),
    Param(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleFnDecl {
    pub name: String,
    pub args: Vec<(String, Sort)>,
    pub result: Sort,
    pub range: RangeExpr,
}

/// Abstract packet class declaration, with pairwise mutual exclusions
/// (at most one of an excluding pair is true for a flow).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDecl {
    pub name: String,
    pub excludes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailurePolicy {
    /// Packets are dropped while the instance is failed.
    Closed,
    /// Packets are forwarded unmodified while the instance is failed.
    Open,
    /// The rules observe `fail(self)` themselves.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    Src,
    Dst,
    SrcPort,
    DstPort,
    Origin,
    Content,
}

impl Field {
    pub fn name(&self) -> &'static str {
        match self {
            Field::Src => "src",
            Field::Dst => "dst",
            Field::SrcPort => "src_port",
            Field::DstPort => "dst_port",
            Field::Origin => "origin",
            Field::Content => "content",
        }
    }

    pub fn sort(&self) -> Sort {
        match self {
            Field::Src | Field::Dst | Field::Origin => Sort::Address,
            Field::SrcPort | Field::DstPort => Sort::Port,
            Field::Content => Sort::Content,
        }
    }

    pub const ALL: [Field; 6] =
        [Field::Src, Field::Dst, Field::SrcPort, Field::DstPort, Field::Origin, Field::Content];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    /// `p.src`, `p.dst_port`, ... of the (possibly already rewritten) packet.
    PktField(Field),
    /// `flow(p)` of the current packet value.
    FlowOfPkt,
    /// The whole current packet (only valid as an oracle argument).
    Pkt,
    /// A `let`-bound local.
    Local(String),
    /// A scalar config parameter.
    Param(String),
    /// Oracle function application.
    OracleCall { name: String, args: Vec<Expr> },
    /// Map register lookup; an absent key is a `MapLookupMiss`.
    MapGet { register: String, key: Box<Expr> },
    /// Tuple projection.
    TupleIndex(Box<Expr>, usize),
    /// Tuple construction.
    Tuple(Vec<Expr>),
}

/// What a `.contains(...)` guard resolves to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    SetRegister,
    MapRegisterKey,
    ParamSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Guard {
    /// The `otherwise` rule.
    True,
    Eq(Expr, Expr),
    Ne(Expr, Expr),
    Contains { container: String, kind: ContainerKind, arg: Box<Expr> },
    Class(String),
    FailSelf,
    Not(Box<Guard>),
    And(Box<Guard>, Box<Guard>),
    Or(Box<Guard>, Box<Guard>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Let { name: String, expr: Expr },
    FieldAssign { field: Field, expr: Expr },
    SetAdd { register: String, tuple: Expr },
    MapPut { register: String, key: Expr, value: Expr },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    /// Forward the listed packet expressions (each is the current packet
    /// value at terminator time). `drop` is `Forward` of nothing.
    Forward(usize),
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub guard: Guard,
    pub actions: Vec<Action>,
    pub terminator: Terminator,
}

impl Rule {
    /// Static bound on the number of packets this rule can emit.
    pub fn output_bound(&self) -> usize {
        match self.terminator {
            Terminator::Forward(n) => n,
            Terminator::Drop => 0,
        }
    }
}

/// A parsed middlebox model. Rules are in source order; the final rule is
/// always the mandatory `otherwise` rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiddleboxModel {
    pub name: String,
    pub params: Vec<ParamDecl>,
    pub registers: Vec<RegisterDecl>,
    pub oracles: Vec<OracleFnDecl>,
    pub classes: Vec<ClassDecl>,
    pub failure: FailurePolicy,
    pub rules: Vec<Rule>,
}

impl MiddleboxModel {
    pub fn register_index(&self, name: &str) -> Option<usize> {
        self.registers.iter().position(|r| r.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn oracle(&self, name: &str) -> Option<&OracleFnDecl> {
        self.oracles.iter().find(|o| o.name == name)
    }

    pub fn class(&self, name: &str) -> Option<&ClassDecl> {
        self.classes.iter().find(|c| c.name == name)
    }

    /// Classes that may not be true together with `name` for the same flow.
    pub fn exclusions_of(&self, name: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for c in &self.classes {
            if c.name == name {
                out.extend(c.excludes.iter().cloned());
            } else if c.excludes.iter().any(|e| e == name) {
                out.insert(c.name.clone());
            }
        }
        out
    }

    /// Static bound on packets emitted for any single processed packet.
    pub fn output_bound(&self) -> usize {
        self.rules.iter().map(Rule::output_bound).max().unwrap_or(0)
    }

    /// True when the model declares no registers (stateless).
    pub fn is_stateless(&self) -> bool {
        self.registers.is_empty()
    }
}

/// A config binding value for one parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConfigValue {
    Scalar(Value),
    Set(BTreeSet<Vec<Value>>),
}

/// A placed middlebox: a model plus a node identity and config bindings.
#[derive(Debug, Clone)]
pub struct MiddleboxInstance {
    pub id: NodeId,
    pub name: String,
    pub model: std::sync::Arc<MiddleboxModel>,
    pub config: BTreeMap<String, ConfigValue>,
}

/// Contents of one register.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegValue {
    Set(BTreeSet<Vec<Value>>),
    Map(BTreeMap<Vec<Value>, Vec<Value>>),
}

impl RegValue {
    pub fn initial(shape: &RegisterShape) -> RegValue {
        match shape {
            RegisterShape::SetOf(_) => RegValue::Set(BTreeSet::new()),
            RegisterShape::MapOf(..) => RegValue::Map(BTreeMap::new()),
        }
    }

    pub fn is_initial(&self) -> bool {
        match self {
            RegValue::Set(s) => s.is_empty(),
            RegValue::Map(m) => m.is_empty(),
        }
    }
}

/// Register valuation plus failed flag for one middlebox instance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MbxState {
    /// One entry per declared register, in declaration order.
    pub registers: Vec<RegValue>,
    pub failed: bool,
}

impl MbxState {
    pub fn initial(model: &MiddleboxModel) -> MbxState {
        MbxState {
            registers: model.registers.iter().map(|r| RegValue::initial(&r.shape)).collect(),
            failed: false,
        }
    }

    /// Clears all registers, as happens on entering the failed state.
    pub fn clear_registers(&mut self, model: &MiddleboxModel) {
        for (slot, decl) in self.registers.iter_mut().zip(&model.registers) {
            *slot = RegValue::initial(&decl.shape);
        }
    }
}
