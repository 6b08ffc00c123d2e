use ndarray::{Array2, ArrayView2};

use super::{BasisDirection, CraftError, LinearMap, VectorSpace};
use crate::numeric::{relu, softmax_rows};

/// `delta = ReLU(x W1) W2`, with no biases (constants come from `one`).
#[derive(Debug, Clone, PartialEq)]
pub struct CraftMLP {
    pub name: String,
    pub w1: LinearMap,
    pub w2: LinearMap,
}

impl CraftMLP {
    pub fn new(name: impl Into<String>, w1: LinearMap, w2: LinearMap) -> Result<Self, CraftError> {
        if w1.output != w2.input {
            return Err(CraftError::HiddenMismatch);
        }
        Ok(CraftMLP {
            name: name.into(),
            w1,
            w2,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.w1.output.dim()
    }

    /// Residual update for rows expressed in `space`.
    pub fn apply(&self, space: &VectorSpace, residual: ArrayView2<f64>) -> Result<Array2<f64>, CraftError> {
        check_cols(space, residual)?;
        let w1 = self.w1.embed(space, &self.w1.output);
        let w2 = self.w2.embed(&self.w2.input, space);
        Ok(relu(&residual.dot(&w1)).dot(&w2))
    }
}

/// One attention head given by its bilinear pattern and its value/output map.
///
/// `direct[q, k]` is the logit between query direction `q` and key direction
/// `k` before the BOS adjustment and temperature scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct CraftAttentionHead {
    pub name: String,
    pub query_space: VectorSpace,
    pub key_space: VectorSpace,
    pub direct: Array2<f64>,
    pub w_ov: LinearMap,
    pub bos_beta: f64,
    pub inv_temperature: f64,
}

impl CraftAttentionHead {
    /// The full logit form `T^-1 (direct + beta * one bos^T)` over
    /// `query_space + {one}` and `key_space + {tokens:bos}`.
    pub fn w_qk(&self) -> LinearMap {
        let one = VectorSpace::new([BasisDirection::one()]);
        let bos = VectorSpace::new([BasisDirection::bos()]);
        let q = VectorSpace::direct_sum(&[&self.query_space, &one]).expect("query space");
        let k = VectorSpace::direct_sum(&[&self.key_space, &bos]).expect("key space");
        let mut m = LinearMap::zeros(q, k);
        let base = LinearMap {
            input: self.query_space.clone(),
            output: self.key_space.clone(),
            matrix: self.direct.clone(),
        };
        m.matrix += &base.embed(&m.input, &m.output);
        m.add_entry(&BasisDirection::one(), &BasisDirection::bos(), self.bos_beta)
            .expect("one and bos are present");
        m.matrix *= self.inv_temperature;
        m
    }

    /// Attention weights (`N x N`) for rows expressed in `space`.
    pub fn pattern(
        &self,
        space: &VectorSpace,
        residual: ArrayView2<f64>,
        causal: bool,
    ) -> Result<Array2<f64>, CraftError> {
        check_cols(space, residual)?;
        let qk = self.w_qk();
        let bilinear = qk.embed(space, space);
        let logits = residual.dot(&bilinear).dot(&residual.t());
        Ok(softmax_rows(logits.view(), causal))
    }

    pub fn apply(
        &self,
        space: &VectorSpace,
        residual: ArrayView2<f64>,
        causal: bool,
    ) -> Result<Array2<f64>, CraftError> {
        let a = self.pattern(space, residual, causal)?;
        let ov = self.w_ov.embed(space, space);
        Ok(a.dot(&residual).dot(&ov))
    }
}

fn check_cols(space: &VectorSpace, residual: ArrayView2<f64>) -> Result<(), CraftError> {
    if residual.ncols() != space.dim() {
        return Err(CraftError::Shape {
            expected: (residual.nrows(), space.dim()),
            found: residual.dim(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum CraftBlock {
    Mlp(CraftMLP),
    Attention(CraftAttentionHead),
}

impl CraftBlock {
    pub fn name(&self) -> &str {
        match self {
            CraftBlock::Mlp(m) => &m.name,
            CraftBlock::Attention(h) => &h.name,
        }
    }

    pub fn is_mlp(&self) -> bool {
        matches!(self, CraftBlock::Mlp(_))
    }
}

/// All blocks sharing one sublayer, merged.
#[derive(Debug, Clone, PartialEq)]
pub enum CraftLayer {
    Mlp(CraftMLP),
    Attention(Vec<CraftAttentionHead>),
}

impl CraftLayer {
    pub fn apply(
        &self,
        space: &VectorSpace,
        residual: ArrayView2<f64>,
        causal: bool,
    ) -> Result<Array2<f64>, CraftError> {
        match self {
            CraftLayer::Mlp(m) => m.apply(space, residual),
            CraftLayer::Attention(heads) => {
                let mut delta = Array2::zeros(residual.raw_dim());
                for h in heads {
                    delta += &h.apply(space, residual, causal)?;
                }
                Ok(delta)
            }
        }
    }
}

/// Merges blocks that run in the same sublayer: MLPs by concatenating their
/// hidden units, attention heads side by side.
pub fn combine_parallel(blocks: Vec<CraftBlock>) -> Result<CraftLayer, CraftError> {
    let Some(first) = blocks.first() else {
        return Err(CraftError::EmptyLayer);
    };
    if first.is_mlp() {
        let mut mlps = Vec::with_capacity(blocks.len());
        for b in blocks {
            match b {
                CraftBlock::Mlp(m) => mlps.push(m),
                CraftBlock::Attention(_) => return Err(CraftError::MixedKinds),
            }
        }
        if mlps.len() == 1 {
            return Ok(CraftLayer::Mlp(mlps.pop().unwrap()));
        }
        let ins: Vec<&VectorSpace> = mlps.iter().map(|m| &m.w1.input).collect();
        let hids: Vec<&VectorSpace> = mlps.iter().map(|m| &m.w1.output).collect();
        let outs: Vec<&VectorSpace> = mlps.iter().map(|m| &m.w2.output).collect();
        let input = VectorSpace::direct_sum(&ins)?;
        let hidden = VectorSpace::direct_sum(&hids)?;
        let output = VectorSpace::direct_sum(&outs)?;
        let mut w1 = LinearMap::zeros(input, hidden.clone());
        let mut w2 = LinearMap::zeros(hidden, output);
        for m in &mlps {
            w1.matrix += &m.w1.embed(&w1.input, &w1.output);
            w2.matrix += &m.w2.embed(&w2.input, &w2.output);
        }
        let name = mlps.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join("+");
        Ok(CraftLayer::Mlp(CraftMLP::new(name, w1, w2)?))
    } else {
        let mut heads = Vec::with_capacity(blocks.len());
        for b in blocks {
            match b {
                CraftBlock::Attention(h) => heads.push(h),
                CraftBlock::Mlp(_) => return Err(CraftError::MixedKinds),
            }
        }
        Ok(CraftLayer::Attention(heads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn dir(n: &str, v: &str) -> BasisDirection {
        BasisDirection::categorical(n, v)
    }

    fn is_x_mlp() -> (VectorSpace, CraftMLP) {
        let toks: Vec<BasisDirection> = ["a", "b", "c", "x"].iter().map(|v| dir("tokens", v)).collect();
        let space = VectorSpace::new(
            toks.iter()
                .cloned()
                .chain([BasisDirection::bos(), BasisDirection::one(), BasisDirection::numerical("is_x")]),
        );
        let input = VectorSpace::new(toks.iter().cloned().chain([BasisDirection::one()]));
        let hidden = VectorSpace::new((0..4).map(|i| BasisDirection::categorical("is_x_hidden", i as i64)));
        let out = VectorSpace::new([BasisDirection::numerical("is_x")]);
        let w1 = LinearMap::from_fn(input, hidden.clone(), |i, h| {
            let k = match &h.value {
                Some(crate::value::Value::Num(k)) => *k as usize,
                _ => unreachable!(),
            };
            if *i == BasisDirection::one() {
                -0.5
            } else if *i == toks[k] {
                1.0
            } else {
                0.0
            }
        });
        let w2 = LinearMap::from_fn(hidden, out, |h, _| {
            if h.value == Some(crate::value::Value::num(3.0)) {
                2.0
            } else {
                0.0
            }
        });
        (space, CraftMLP::new("is_x", w1, w2).unwrap())
    }

    fn row(space: &VectorSpace, on: &[BasisDirection]) -> Array2<f64> {
        let mut r = Array2::zeros((1, space.dim()));
        for d in on {
            r[[0, space.index_of(d).unwrap()]] = 1.0;
        }
        r
    }

    #[test]
    fn lookup_mlp_reads_one_hot() {
        let (space, mlp) = is_x_mlp();
        let is_x = space.index_of(&BasisDirection::numerical("is_x")).unwrap();
        let x = mlp.apply(&space, row(&space, &[dir("tokens", "x"), BasisDirection::one()]).view()).unwrap();
        assert_eq!(x[[0, is_x]], 1.0);
        let a = mlp.apply(&space, row(&space, &[dir("tokens", "a"), BasisDirection::one()]).view()).unwrap();
        assert_eq!(a[[0, is_x]], 0.0);
        let z = mlp.apply(&space, Array2::zeros((2, space.dim())).view()).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn parallel_mlps_concatenate_hidden_units() {
        let (space, a) = is_x_mlp();
        let mut b = a.clone();
        b.name = "copy".into();
        let hidden = VectorSpace::new((0..4).map(|i| BasisDirection::categorical("copy_hidden", i as i64)));
        b.w1.output = hidden.clone();
        b.w2.input = hidden;
        let layer = combine_parallel(vec![CraftBlock::Mlp(a.clone()), CraftBlock::Mlp(b)]).unwrap();
        let CraftLayer::Mlp(m) = &layer else { panic!() };
        assert_eq!(m.hidden_size(), 8);
        let r = row(&space, &[dir("tokens", "x"), BasisDirection::one()]);
        let merged = layer.apply(&space, r.view(), false).unwrap();
        let single = a.apply(&space, r.view()).unwrap();
        assert_eq!(merged, single * 2.0);
    }

    #[test]
    fn mixed_kinds_are_rejected() {
        let (_, m) = is_x_mlp();
        let head = CraftAttentionHead {
            name: "h".into(),
            query_space: VectorSpace::default(),
            key_space: VectorSpace::default(),
            direct: Array2::zeros((0, 0)),
            w_ov: LinearMap::zeros(VectorSpace::default(), VectorSpace::default()),
            bos_beta: 0.5,
            inv_temperature: 100.0,
        };
        assert_eq!(
            combine_parallel(vec![CraftBlock::Mlp(m), CraftBlock::Attention(head)]),
            Err(CraftError::MixedKinds)
        );
    }

    #[test]
    fn empty_selection_attends_to_bos() {
        // query "a" selects nothing among keys "b"
        let q = VectorSpace::new([dir("q", "a")]);
        let k = VectorSpace::new([dir("k", "b")]);
        let v = VectorSpace::new([BasisDirection::numerical("v")]);
        let out = VectorSpace::new([BasisDirection::numerical("out")]);
        let space = VectorSpace::new([
            BasisDirection::bos(),
            BasisDirection::one(),
            dir("q", "a"),
            dir("k", "b"),
            BasisDirection::numerical("v"),
            BasisDirection::numerical("out"),
        ]);
        let head = CraftAttentionHead {
            name: "h".into(),
            query_space: q,
            key_space: k,
            direct: array![[0.0]],
            w_ov: LinearMap::new(v, out, array![[1.0]]).unwrap(),
            bos_beta: 0.5,
            inv_temperature: 100.0,
        };
        let mut r = Array2::zeros((3, space.dim()));
        r[[0, 0]] = 1.0;
        for p in 0..3 {
            r[[p, 1]] = 1.0;
        }
        r[[1, 2]] = 1.0;
        r[[2, 3]] = 1.0;
        r[[2, 4]] = 7.0;
        let a = head.pattern(&space, r.view(), false).unwrap();
        assert!((a[[1, 0]] - 1.0).abs() < 1e-20);
        let d = head.apply(&space, r.view(), false).unwrap();
        assert!(d[[1, 5]].abs() < 1e-20);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
