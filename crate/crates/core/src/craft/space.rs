use std::collections::HashMap;
use std::fmt;

use ndarray::{Array2, ArrayView2};

use super::CraftError;
use crate::value::Value;

/// One labelled axis of a residual (or hidden) space.
///
/// Categorical s-ops own one direction per value (`tokens:x`); numerical
/// s-ops own a single unvalued direction (`frac_prevs`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BasisDirection {
    pub name: String,
    pub value: Option<Value>,
}

impl BasisDirection {
    pub fn new(name: impl Into<String>, value: Option<Value>) -> Self {
        BasisDirection {
            name: name.into(),
            value,
        }
    }

    pub fn numerical(name: impl Into<String>) -> Self {
        Self::new(name, None)
    }

    pub fn categorical(name: impl Into<String>, value: impl Into<Value>) -> Self {
        Self::new(name, Some(value.into()))
    }

    /// The always-one direction used for biases.
    pub fn one() -> Self {
        Self::numerical("one")
    }

    pub fn bos() -> Self {
        Self::categorical("tokens", crate::value::BOS_TOKEN)
    }

    /// Parses the `name:value` label form produced by `Display`.
    pub fn parse_label(label: &str) -> Self {
        match label.split_once(':') {
            Some((n, v)) => Self::new(n, Some(Value::parse_token(v))),
            None => Self::numerical(label),
        }
    }
}

impl fmt::Display for BasisDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.value {
            Some(v) => write!(f, "{}:{}", self.name, v),
            None => f.write_str(&self.name),
        }
    }
}

/// An ordered set of basis directions, each tagged with the component that
/// owns it.
#[derive(Debug, Clone, Default)]
pub struct VectorSpace {
    dirs: Vec<BasisDirection>,
    owners: Vec<String>,
    index: HashMap<BasisDirection, usize>,
}

impl PartialEq for VectorSpace {
    fn eq(&self, other: &Self) -> bool {
        self.dirs == other.dirs
    }
}

impl VectorSpace {
    /// A space whose directions are owned by their group names. Repeated
    /// directions are dropped.
    pub fn new(dirs: impl IntoIterator<Item = BasisDirection>) -> Self {
        let mut s = VectorSpace::default();
        for d in dirs {
            let owner = d.name.clone();
            s.push(d, owner);
        }
        s
    }

    /// A space whose directions all belong to `owner`.
    pub fn owned(owner: &str, dirs: impl IntoIterator<Item = BasisDirection>) -> Self {
        let mut s = VectorSpace::default();
        for d in dirs {
            s.push(d, owner.to_string());
        }
        s
    }

    fn push(&mut self, d: BasisDirection, owner: String) {
        if !self.index.contains_key(&d) {
            self.index.insert(d.clone(), self.dirs.len());
            self.dirs.push(d);
            self.owners.push(owner);
        }
    }

    pub fn dim(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn basis(&self) -> &[BasisDirection] {
        &self.dirs
    }

    pub fn owner(&self, i: usize) -> &str {
        &self.owners[i]
    }

    pub fn index_of(&self, d: &BasisDirection) -> Option<usize> {
        self.index.get(d).copied()
    }

    pub fn contains(&self, d: &BasisDirection) -> bool {
        self.index.contains_key(d)
    }

    pub fn labels(&self) -> Vec<String> {
        self.dirs.iter().map(|d| d.to_string()).collect()
    }

    /// Concatenates spaces in order, merging directions that appear more than
    /// once with the same owner.
    pub fn direct_sum(spaces: &[&VectorSpace]) -> Result<VectorSpace, CraftError> {
        let mut out = VectorSpace::default();
        for s in spaces {
            for (d, owner) in s.dirs.iter().zip(&s.owners) {
                if let Some(i) = out.index_of(d) {
                    if out.owners[i] != *owner {
                        return Err(CraftError::DirectionConflict {
                            direction: d.to_string(),
                            first: out.owners[i].clone(),
                            second: owner.clone(),
                        });
                    }
                } else {
                    out.push(d.clone(), owner.clone());
                }
            }
        }
        Ok(out)
    }

    /// `|self| x |to|` matrix with a 1 wherever the two spaces share a
    /// direction.
    pub fn projection(&self, to: &VectorSpace) -> Array2<f64> {
        let mut p = Array2::zeros((self.dim(), to.dim()));
        for (i, d) in self.dirs.iter().enumerate() {
            if let Some(j) = to.index_of(d) {
                p[[i, j]] = 1.0;
            }
        }
        p
    }

    /// One-hot row vector for direction `d` (all zero if absent).
    pub fn vector(&self, d: &BasisDirection) -> Array2<f64> {
        let mut v = Array2::zeros((1, self.dim()));
        if let Some(i) = self.index_of(d) {
            v[[0, i]] = 1.0;
        }
        v
    }
}

/// A matrix between two labelled spaces, applied to row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub input: VectorSpace,
    pub output: VectorSpace,
    pub matrix: Array2<f64>,
}

impl LinearMap {
    pub fn new(input: VectorSpace, output: VectorSpace, matrix: Array2<f64>) -> Result<Self, CraftError> {
        if matrix.dim() != (input.dim(), output.dim()) {
            return Err(CraftError::Shape {
                expected: (input.dim(), output.dim()),
                found: matrix.dim(),
            });
        }
        Ok(LinearMap {
            input,
            output,
            matrix,
        })
    }

    pub fn zeros(input: VectorSpace, output: VectorSpace) -> Self {
        let matrix = Array2::zeros((input.dim(), output.dim()));
        LinearMap {
            input,
            output,
            matrix,
        }
    }

    /// Builds the matrix entry by entry from labels.
    pub fn from_fn(
        input: VectorSpace,
        output: VectorSpace,
        mut f: impl FnMut(&BasisDirection, &BasisDirection) -> f64,
    ) -> Self {
        let matrix = Array2::from_shape_fn((input.dim(), output.dim()), |(i, j)| {
            f(&input.basis()[i], &output.basis()[j])
        });
        LinearMap {
            input,
            output,
            matrix,
        }
    }

    pub fn add_entry(&mut self, from: &BasisDirection, to: &BasisDirection, value: f64) -> Result<(), CraftError> {
        let i = self
            .input
            .index_of(from)
            .ok_or_else(|| CraftError::UnknownDirection(from.to_string()))?;
        let j = self
            .output
            .index_of(to)
            .ok_or_else(|| CraftError::UnknownDirection(to.to_string()))?;
        self.matrix[[i, j]] += value;
        Ok(())
    }

    /// The same map expressed between two larger spaces; directions missing
    /// from either side contribute zero.
    pub fn embed(&self, input: &VectorSpace, output: &VectorSpace) -> Array2<f64> {
        let mut m = Array2::zeros((input.dim(), output.dim()));
        for (i, di) in self.input.basis().iter().enumerate() {
            let Some(ri) = input.index_of(di) else { continue };
            for (j, dj) in self.output.basis().iter().enumerate() {
                if let Some(rj) = output.index_of(dj) {
                    m[[ri, rj]] += self.matrix[[i, j]];
                }
            }
        }
        m
    }

    /// Applies the map to rows expressed in `space`, returning rows in
    /// `self.output`.
    pub fn apply_in(&self, space: &VectorSpace, rows: ArrayView2<f64>) -> Result<Array2<f64>, CraftError> {
        if rows.ncols() != space.dim() {
            return Err(CraftError::Shape {
                expected: (rows.nrows(), space.dim()),
                found: rows.dim(),
            });
        }
        let m = self.embed(space, &self.output);
        Ok(rows.dot(&m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::strategy::Strategy;

    fn tokens(vals: &[&str]) -> VectorSpace {
        VectorSpace::new(vals.iter().map(|v| BasisDirection::categorical("tokens", *v)))
    }

    #[test]
    fn direct_sum_concatenates() {
        let t = tokens(&["a", "b", "c", "x", "bos"]);
        let one = VectorSpace::new([BasisDirection::one()]);
        let s = VectorSpace::direct_sum(&[&t, &one]).unwrap();
        assert_eq!(s.dim(), 6);
        assert_eq!(s.labels()[5], "one");
        assert_eq!(VectorSpace::direct_sum(&[&s, &t]).unwrap(), s);
    }

    #[test]
    fn conflicting_owners_are_rejected() {
        let a = VectorSpace::owned("node_a", [BasisDirection::numerical("v")]);
        let b = VectorSpace::owned("node_b", [BasisDirection::numerical("v")]);
        assert!(matches!(
            VectorSpace::direct_sum(&[&a, &b]),
            Err(CraftError::DirectionConflict { .. })
        ));
    }

    #[test]
    fn embed_reorders_by_label() {
        let small = tokens(&["a", "b"]);
        let big = tokens(&["b", "z", "a"]);
        let out = VectorSpace::new([BasisDirection::numerical("y")]);
        let m = LinearMap::new(small, out.clone(), ndarray::array![[2.0], [3.0]]).unwrap();
        let e = m.embed(&big, &out);
        assert_eq!(e, ndarray::array![[3.0], [0.0], [2.0]]);
    }

    #[test]
    fn label_round_trip() {
        for l in ["tokens:x", "indices:3", "one", "frac_prevs"] {
            assert_eq!(BasisDirection::parse_label(l).to_string(), l);
        }
    }

    proptest::proptest! {
        #[test]
        fn rendered_labels_parse_back(
            name in "[a-z_][a-z0-9_]{0,8}",
            value in proptest::option::of(proptest::prop_oneof![
                "[a-z(){}_][a-z0-9(){}_]{0,4}".prop_map(Value::str),
                (-1000i32..1000).prop_map(|n| Value::num(n as f64 / 8.0)),
            ]),
        ) {
            let label = BasisDirection::new(name, value).to_string();
            proptest::prop_assert_eq!(BasisDirection::parse_label(&label).to_string(), label);
        }
    }
}
