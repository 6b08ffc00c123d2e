//! Runtime values carried by s-ops, and finite value sets used during
//! compilation.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Relative tolerance used to merge numerically equal values in a [`ValueSet`].
pub const VALUE_SET_RTOL: f64 = 1e-9;

/// Reserved token for the beginning-of-sequence position.
pub const BOS_TOKEN: &str = "bos";

/// A single value at one sequence position.
///
/// Booleans behave as 0/1 wherever a number is expected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Num(f64),
    Str(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("cannot compare {lhs} with {rhs}: mixed value types")]
pub struct TypeMismatch {
    pub lhs: String,
    pub rhs: String,
}

impl Value {
    pub fn num(x: f64) -> Value {
        // fold -0.0 into 0.0 so that set membership ignores the sign of zero
        Value::Num(if x == 0.0 { 0.0 } else { x })
    }

    pub fn str(s: impl Into<String>) -> Value {
        Value::Str(s.into())
    }

    /// Parses a vocabulary entry: anything that reads as a finite number is a
    /// number, everything else is a string token.
    pub fn parse_token(s: &str) -> Value {
        match s.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => Value::num(x),
            _ => Value::Str(s.to_string()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            Value::Num(x) => Some(*x),
            Value::Str(_) => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        !matches!(self, Value::Str(_))
    }

    pub fn truthy(&self) -> bool {
        match self {
            Value::Bool(b) => *b,
            Value::Num(x) => *x != 0.0,
            Value::Str(s) => !s.is_empty(),
        }
    }

    /// Semantic comparison: numbers (and booleans) numerically, strings
    /// lexicographically. Mixing a string with a number is an error.
    pub fn compare(&self, other: &Value) -> Result<Ordering, TypeMismatch> {
        match (self, other) {
            (Value::Str(a), Value::Str(b)) => Ok(a.cmp(b)),
            (a, b) => match (a.as_f64(), b.as_f64()) {
                (Some(x), Some(y)) => Ok(x.total_cmp(&y)),
                _ => Err(TypeMismatch {
                    lhs: a.to_string(),
                    rhs: b.to_string(),
                }),
            },
        }
    }

    /// Equality used when comparing interpreter and model outputs: numbers
    /// match within a relative tolerance, everything else exactly.
    pub fn approx_eq(&self, other: &Value, rtol: f64) -> bool {
        match (self, other) {
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Num(a), Value::Num(b)) => num_close(*a, *b, rtol),
            _ => false,
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Value::Bool(_) => 0,
            Value::Num(_) => 1,
            Value::Str(_) => 2,
        }
    }
}

pub(crate) fn num_close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1.0)
}

// Structural order, used only for storage in sorted sets. Different variants
// are ordered by tag.
impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::Num(a), Value::Num(b)) => a.total_cmp(b),
            (Value::Str(a), Value::Str(b)) => a.cmp(b),
            (a, b) => a.tag().cmp(&b.tag()),
        }
    }
}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl std::hash::Hash for Value {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.tag().hash(state);
        match self {
            Value::Bool(b) => b.hash(state),
            Value::Num(x) => x.to_bits().hash(state),
            Value::Str(s) => s.hash(state),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Num(x) => write!(f, "{x}"),
            Value::Str(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::num(x)
    }
}

impl From<i64> for Value {
    fn from(x: i64) -> Self {
        Value::num(x as f64)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

/// A sorted, de-duplicated set of values. Numbers within
/// [`VALUE_SET_RTOL`] of each other are treated as one value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValueSet(Vec<Value>);

impl ValueSet {
    pub fn new() -> Self {
        ValueSet(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Value> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[Value] {
        &self.0
    }

    pub fn contains(&self, v: &Value) -> bool {
        self.position(v).is_some()
    }

    /// Index of `v` in the set, using tolerant numeric matching.
    pub fn position(&self, v: &Value) -> Option<usize> {
        match v {
            Value::Num(x) => self.0.iter().position(|w| match w {
                Value::Num(y) => num_close(*x, *y, VALUE_SET_RTOL),
                _ => false,
            }),
            _ => self.0.binary_search(v).ok(),
        }
    }

    /// Numeric view of the set; `None` if any member is a string.
    pub fn numeric_values(&self) -> Option<Vec<f64>> {
        self.0.iter().map(Value::as_f64).collect()
    }
}

impl FromIterator<Value> for ValueSet {
    fn from_iter<I: IntoIterator<Item = Value>>(iter: I) -> Self {
        let mut vals: Vec<Value> = iter.into_iter().collect();
        vals.sort();
        let mut out: Vec<Value> = Vec::with_capacity(vals.len());
        for v in vals {
            let dup = match (out.last(), &v) {
                (Some(Value::Num(a)), Value::Num(b)) => num_close(*a, *b, VALUE_SET_RTOL),
                (Some(last), v) => last == v,
                (None, _) => false,
            };
            if !dup {
                out.push(v);
            }
        }
        ValueSet(out)
    }
}

impl<'a> IntoIterator for &'a ValueSet {
    type Item = &'a Value;
    type IntoIter = std::slice::Iter<'a, Value>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}
