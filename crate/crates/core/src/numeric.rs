//! Small dense helpers shared by the craft layer, the runtime and the
//! compression harness.

use ndarray::{Array2, ArrayView2, Axis};

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Row-wise softmax with max subtraction. With `causal`, entry `(i, j)` is
/// masked out for `j > i`.
pub fn softmax_rows(logits: ArrayView2<f64>, causal: bool) -> Array2<f64> {
    let mut out = logits.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let visible = if causal { i + 1 } else { row.len() };
        let visible = visible.min(row.len());
        let max = row
            .iter()
            .take(visible)
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < visible {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rows_sum_to_one_and_mask_future() {
        let a = softmax_rows(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [5.0, -1.0, 2.0]].view(), true);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
        assert_eq!(a[[0, 1]], 0.0);
        assert_eq!(a[[0, 0]], 1.0);
        assert!((a[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let a = softmax_rows(array![[1000.0, 1000.0, 0.0]].view(), false);
        assert!((a[[0, 0]] - 0.5).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..6,
            cols in 1usize..6,
            causal: bool,
            seed in proptest::collection::vec(-500.0f64..500.0, 36),
        ) {
            let logits = Array2::from_shape_fn((rows, cols), |(i, j)| seed[i * 6 + j]);
            let a = softmax_rows(logits.view(), causal);
            for (i, row) in a.rows().into_iter().enumerate() {
                proptest::prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                proptest::prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                if causal {
                    proptest::prop_assert!(row.iter().skip(i + 1).all(|&v| v == 0.0));
                }
            }
        }
    }
}
