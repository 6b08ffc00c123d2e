//! Textual RASP dialect and the library of builtin programs.
//!
//! ```text
//! # comments run to the end of the line; `;` between statements is optional
//! is_x = tokens == "x"
//! prevs = select(indices, indices, <=)
//! frac_prevs = numerical(aggregate(prevs, is_x))
//! return frac_prevs
//! ```
//!
//! Calls: `select(keys, queries, pred)`, `aggregate(sel, sop)`,
//! `selector_width(sel)`, `map((x) -> expr, sop)`,
//! `map2((x, y) -> expr, a, b)`, `numerical(sop)`, `categorical(sop)`.
//! A predicate is one of `== != < <= > >= true false` or a function
//! `(k, q) -> expr` of the key and query value. Infix operators on s-ops
//! become maps; `and`/`or`/`not` on selectors combine them (only over the
//! same key and query s-ops). `tokens`, `indices` and `length` are
//! predefined. Without a `return`, the last assignment is the output.

mod builtins;
mod lexer;
mod parser;
mod printer;

use std::fmt;

pub use builtins::{list_builtins, load_builtin, make_frac_prevs, BuiltinInfo, ParamInfo};
pub use parser::parse;
pub use printer::pretty_print;

use crate::rasp::ValidationError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    pub(crate) fn new(line: usize, column: usize, message: impl Into<String>) -> Self {
        ParseError {
            line,
            column,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FrontendError {
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error("invalid program: {}", JoinErrors(.0))]
    Validation(Vec<ValidationError>),
    #[error("unknown builtin `{0}`")]
    UnknownBuiltin(String),
    #[error("builtin `{builtin}` needs parameter `{param}`")]
    MissingParam { builtin: String, param: String },
    #[error("builtin `{builtin}`, parameter `{param}`: {reason}")]
    BadParam {
        builtin: String,
        param: String,
        reason: String,
    },
}

struct JoinErrors<'a>(&'a [ValidationError]);

impl fmt::Display for JoinErrors<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}
