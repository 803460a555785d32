//! Symmetric absmax int8 quantization.
//!
//! Each vector `v` along the chosen axis gets the scale `s = 127 / max|v|`
//! and is stored as `q = round(s · v)` with ties rounded away from zero.
//! Dequantization divides by the scale, so the product of a row-quantized
//! and a column-quantized operand is recovered by dividing by the outer
//! product of the two scale vectors.

use super::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantAxis {
    /// One scale per row (used for hidden states).
    RowWise,
    /// One scale per column (used for weight matrices).
    ColumnWise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    axis: QuantAxis,
    values: Vec<i8>,
    scales: Vec<f32>,
}

/// Scale for a vector whose largest magnitude is `absmax`. Vectors too small
/// to yield a finite scale are treated like the zero vector.
#[inline]
pub(crate) fn absmax_scale(absmax: f32) -> f32 {
    if absmax < f32::MIN_POSITIVE {
        1.0
    } else {
        127.0 / absmax
    }
}

#[inline]
pub(crate) fn quantize_value(v: f32, scale: f32) -> i8 {
    // f32::round ties away from zero.
    (v * scale).round().clamp(-127.0, 127.0) as i8
}

pub fn absmax_quantize(x: &Tensor, axis: QuantAxis) -> Result<QuantizedMatrix> {
    let (rows, cols) = x.dims2()?;
    let data = x.data();
    let mut values = vec![0i8; rows * cols];
    let scales = match axis {
        QuantAxis::RowWise => {
            let mut scales = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &data[r * cols..(r + 1) * cols];
                let s = absmax_scale(row.iter().fold(0.0f32, |m, v| m.max(v.abs())));
                for (q, &v) in values[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *q = quantize_value(v, s);
                }
                scales.push(s);
            }
            scales
        }
        QuantAxis::ColumnWise => {
            let mut absmax = vec![0.0f32; cols];
            for row in data.chunks_exact(cols.max(1)) {
                for (m, v) in absmax.iter_mut().zip(row) {
                    *m = m.max(v.abs());
                }
            }
            let scales: Vec<f32> = absmax.into_iter().map(absmax_scale).collect();
            for r in 0..rows {
                for c in 0..cols {
                    values[r * cols + c] = quantize_value(data[r * cols + c], scales[c]);
                }
            }
            scales
        }
    };
    Ok(QuantizedMatrix {
        rows,
        cols,
        axis,
        values,
        scales,
    })
}

impl QuantizedMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn axis(&self) -> QuantAxis {
        self.axis
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// `q / s` elementwise.
    pub fn dequantize(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                let s = match self.axis {
                    QuantAxis::RowWise => self.scales[r],
                    QuantAxis::ColumnWise => self.scales[c],
                };
                out.push(f32::from(self.values[r * self.cols + c]) / s);
            }
        }
        Tensor::from_parts(vec![self.rows, self.cols], out)
    }
}

/// Recovers a full-precision product from an int32 accumulator:
/// `C[i, j] = P[i, j] / (row_scales[i] · col_scales[j])`.
pub fn dequantize_product(
    product: &[i32],
    row_scales: &[f32],
    col_scales: &[f32],
) -> Result<Tensor> {
    let (rows, cols) = (row_scales.len(), col_scales.len());
    if product.len() != rows * cols {
        return Err(shape_err!(
            "product has {} entries, scales describe {}x{}",
            product.len(),
            rows,
            cols
        ));
    }
    if let Some(bad) = row_scales
        .iter()
        .chain(col_scales)
        .find(|s| !(s.is_finite() && **s > 0.0))
    {
        return Err(Error::Invariant(format!(
            "dequantization scale must be positive and finite, got {bad}"
        )));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for (i, &rs) in row_scales.iter().enumerate() {
        let rs = f64::from(rs);
        for (j, &cs) in col_scales.iter().enumerate() {
            out.push((f64::from(product[i * cols + j]) / (rs * f64::from(cs))) as f32);
        }
    }
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_row_gets_unit_scale() {
        let q = absmax_quantize(&Tensor::from_rows(&[[0.0f32, 0.0, 0.0]]), QuantAxis::RowWise)
            .unwrap();
        assert_eq!(q.values(), &[0, 0, 0]);
        assert_eq!(q.scales(), &[1.0]);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let q = absmax_quantize(&Tensor::from_rows(&[[1.0f32, -2.0, 4.0]]), QuantAxis::RowWise)
            .unwrap();
        assert_eq!(q.scales(), &[31.75]);
        assert_eq!(q.values(), &[32, -64, 127]);
    }

    #[test]
    fn single_element_hits_full_range() {
        for v in [0.003f32, -5.0, 1e6, -1e-3] {
            let q = absmax_quantize(&Tensor::from_rows(&[[v]]), QuantAxis::RowWise).unwrap();
            assert_eq!(q.values()[0].unsigned_abs(), 127);
            assert_eq!(q.values()[0].signum() as f32, v.signum());
        }
    }

    #[test]
    fn column_wise_scales_per_column() {
        let w = Tensor::from_rows(&[[1.0f32, -8.0], [2.0, 4.0]]);
        let q = absmax_quantize(&w, QuantAxis::ColumnWise).unwrap();
        assert_eq!(q.scales(), &[63.5, 15.875]);
        assert_eq!(q.values(), &[64, -127, 127, 64]);
    }

    #[test]
    fn non_matrix_input_is_a_shape_error() {
        let t = Tensor::<f32>::zeros(vec![2, 2, 2]);
        assert!(matches!(
            absmax_quantize(&t, QuantAxis::RowWise),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dequantize_product_examples() {
        let c = dequantize_product(&[0; 4], &[3.0, 5.0], &[1.0, 2.0]).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        // x = 4 -> (127, 31.75); w = 2 -> (127, 63.5)
        let c = dequantize_product(&[127 * 127], &[31.75], &[63.5]).unwrap();
        assert_eq!(c.data(), &[8.0]);

        let c = dequantize_product(&[16129, -254], &[127.0], &[127.0, 127.0]).unwrap();
        assert_eq!(c.data(), &[1.0, -254.0 / 16129.0]);
    }

    #[test]
    fn dequantize_product_rejects_bad_scales() {
        assert!(matches!(
            dequantize_product(&[1], &[0.0], &[1.0]),
            Err(Error::Invariant(_))
        ));
        assert!(matches!(
            dequantize_product(&[1], &[1.0], &[-2.0]),
            Err(Error::Invariant(_))
        ));
        assert!(matches!(
            dequantize_product(&[1, 2], &[1.0], &[1.0]),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(v in proptest::collection::vec(-1e3f32..1e3, 1..40)) {
            let n = v.len();
            let q = absmax_quantize(&Tensor::new(vec![1, n], v.clone()).unwrap(), QuantAxis::RowWise).unwrap();
            let back = q.dequantize();
            let absmax = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
            let bound = absmax / 254.0 * (1.0 + 1e-5) + 1e-30;
            for (a, b) in v.iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= bound, "{a} vs {b}, bound {bound}");
            }
            prop_assert!(q.values().iter().all(|&x| x != i8::MIN));
            prop_assert!(q.scales().iter().all(|&s| s > 0.0));
        }

        #[test]
        fn positive_rescaling_keeps_integer_codes(
            v in proptest::collection::vec(-10.0f32..10.0, 1..20),
            c in prop_oneof![Just(2.0f32), Just(0.5), Just(4.0), Just(0.25)],
        ) {
            // Power-of-two factors keep s·v exact, so ties cannot move.
            let n = v.len();
            let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
            let a = absmax_quantize(&Tensor::new(vec![1, n], v).unwrap(), QuantAxis::RowWise).unwrap();
            let b = absmax_quantize(&Tensor::new(vec![1, n], scaled).unwrap(), QuantAxis::RowWise).unwrap();
            prop_assert_eq!(a.values(), b.values());
        }
    }
}
