use super::{Scalar, Tensor};
use crate::error::{param_err, shape_err, Result};

/// Full-precision `a · b`.
pub fn matmul_ref<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row indices of the `k` largest entries of every column, laid out as a
/// `k x cols` row-major table. Within a column the rows come in descending
/// value order; equal values keep the lower row first.
pub fn topk_column_rows<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    let (rows, cols) = x.dims2()?;
    if k > rows {
        return Err(param_err!("top-{k} requested from a column of {rows} rows"));
    }
    let data = x.data();
    let mut out = vec![0usize; k * cols];
    let mut best: Vec<usize> = Vec::with_capacity(k);
    for c in 0..cols {
        best.clear();
        for r in 0..rows {
            let v = data[r * cols + c];
            // Strict comparison keeps earlier rows ahead of later equal ones.
            let pos = best
                .iter()
                .position(|&b| v > data[b * cols + c])
                .unwrap_or(best.len());
            if pos < k {
                if best.len() == k {
                    best.pop();
                }
                best.insert(pos, r);
            }
        }
        for (i, &r) in best.iter().enumerate() {
            out[i * cols + c] = r;
        }
    }
    Ok(out)
}

/// The `k` largest values of each column, descending: a `k x cols` tensor.
pub fn topk_columns<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (_, cols) = x.dims2()?;
    let idx = topk_column_rows(x, k)?;
    let data = idx
        .iter()
        .enumerate()
        .map(|(i, &r)| x.at(r, i % cols))
        .collect();
    Ok(Tensor::from_parts(vec![k, cols], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += f64::from(a.at(i, p)) * f64::from(b.at(p, j));
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let a = Tensor::from_rows(&[[1.0f32, 2.0], [3.0, 4.0]]);
        let eye = Tensor::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]);
        assert_eq!(matmul_ref(&eye, &a).unwrap(), a);
        let c = matmul_ref(&Tensor::from_rows(&[[2.0f32]]), &Tensor::from_rows(&[[3.0f32]]));
        assert_eq!(c.unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (m, k, n) in [(4, 4, 4), (3, 7, 5), (1, 9, 2), (17, 33, 9)] {
            let a = Tensor::new(vec![m, k], (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
            let b = Tensor::new(vec![k, n], (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
            let fast = matmul_ref(&a, &b).unwrap();
            for (x, y) in fast.data().iter().zip(brute_matmul(&a, &b)) {
                assert!((f64::from(*x) - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(matmul_ref(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn topk_examples() {
        let col = Tensor::from_rows(&[[1.0f32], [5.0], [3.0]]);
        assert_eq!(topk_columns(&col, 1).unwrap().data(), &[5.0]);
        assert_eq!(topk_columns(&col, 2).unwrap().data(), &[5.0, 3.0]);
        assert_eq!(topk_columns(&col, 3).unwrap().data(), &[5.0, 3.0, 1.0]);
        assert!(matches!(topk_columns(&col, 4), Err(Error::Param(_))));
    }

    #[test]
    fn topk_ties_prefer_lower_rows() {
        let x = Tensor::from_rows(&[[2.0f32, 0.0], [2.0, 1.0], [2.0, 1.0]]);
        assert_eq!(topk_column_rows(&x, 2).unwrap(), vec![0, 1, 1, 2]);
    }

    proptest! {
        #[test]
        fn topk_is_sorted_sub_multiset(
            rows in 1usize..8, cols in 1usize..5, k in 1usize..8,
            seed in any::<u64>(),
        ) {
            prop_assume!(k <= rows);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Small integer range so ties are common.
            let x = Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.gen_range(-3i32..3) as f32).collect(),
            ).unwrap();
            let top = topk_columns(&x, k).unwrap();
            for c in 0..cols {
                let mut column: Vec<f32> = (0..rows).map(|r| x.at(r, c)).collect();
                column.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let got: Vec<f32> = (0..k).map(|i| top.at(i, c)).collect();
                prop_assert_eq!(&got[..], &column[..k]);
            }
        }
    }
}
