//! The middlebox modeling language: AST, parser, concrete interpreter,
//! bundled model library, and per-instance logical axiom derivation.

pub mod ast;
pub mod axioms;
pub mod builtins;
pub mod oracle;
pub mod parse;
pub mod step;

pub use ast::{
    Action, ClassDecl, ConfigValue, ContainerKind, Expr, FailurePolicy, Field, Guard, MbxState,
    MiddleboxInstance, MiddleboxModel, OracleFnDecl, ParamDecl, ParamSort, RangeExpr, RegValue,
    RegisterDecl, RegisterShape, Rule, Sort, Terminator,
};
pub use builtins::{builtin, builtin_names, builtin_source, UnknownBuiltin};
pub use oracle::{OracleAnswer, OracleBinding, OracleEnv, OracleQuery};
pub use parse::{parse_model, ModelError};
pub use step::{packet_value, step, StepError, StepOutcome};

#[cfg(test)]
mod tests;
