//! Outlier-decomposed mixed-precision linear layers.
//!
//! For hidden states `X (s x h)` and weights `W (h x o)`, every feature column
//! of `X` that holds at least one entry above the threshold is multiplied on
//! the emulated half-precision path together with the matching weight rows.
//! All remaining columns go through row-wise int8 quantization of `X`,
//! column-wise int8 quantization of `W`, an int32 product and a
//! dequantization. The two partial products are then summed:
//!
//! ```text
//! C ≈ Σ_{i ∈ O} X[:, i] W[i, :]  +  S · Σ_{i ∉ O} Xq[:, i] Wq[i, :]
//! ```
//!
//! Every call returns a [`MatmulTrace`] with the outlier set and the MAC/byte
//! accounting used by the cost model.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    absmax_quantize, absmax_scale, quantize_value, Scalar, dequantize_product, round_slice_to_half, round_to_half, QuantAxis,
    QuantizedMatrix, Tensor,
};

/// Outlier threshold τ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f32", into = "f32")]
pub struct QuantThreshold(f32);

impl QuantThreshold {
    pub const DEFAULT: QuantThreshold = QuantThreshold(6.0);

    /// Positive infinity is allowed and disables outlier extraction; NaN is
    /// rejected.
    pub fn new(tau: f32) -> Result<Self> {
        if tau.is_nan() {
            return Err(Error::Param("outlier threshold must not be NaN".into()));
        }
        Ok(Self(tau))
    }

    pub fn value(self) -> f32 {
        self.0
    }
}

impl Default for QuantThreshold {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f32> for QuantThreshold {
    type Error = Error;
    fn try_from(v: f32) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantThreshold> for f32 {
    fn from(t: QuantThreshold) -> f32 {
        t.0
    }
}

/// Which statistic of a column is compared against τ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierCriterion {
    /// `max_r |X[r, i]| > τ`.
    #[default]
    Magnitude,
    /// `max_r X[r, i] > τ`, ignoring large negative entries.
    Signed,
}

/// Limits how many columns may take the half-precision path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierPolicy {
    #[default]
    Unlimited,
    /// Keep at most this many outlier columns per matmul, preferring the
    /// columns with the largest magnitude.
    Capped(usize),
}

/// Everything a mixed matmul needs besides its operands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSettings {
    pub tau: QuantThreshold,
    #[serde(default)]
    pub criterion: OutlierCriterion,
    #[serde(default)]
    pub policy: OutlierPolicy,
}

impl QuantSettings {
    pub fn new(tau: f32) -> Result<Self> {
        Ok(Self {
            tau: QuantThreshold::new(tau)?,
            criterion: OutlierCriterion::Magnitude,
            policy: OutlierPolicy::Unlimited,
        })
    }

    pub fn with_policy(mut self, policy: OutlierPolicy) -> Self {
        self.policy = policy;
        self
    }
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self {
            tau: QuantThreshold::DEFAULT,
            criterion: OutlierCriterion::Magnitude,
            policy: OutlierPolicy::Unlimited,
        }
    }
}

fn column_stat(x: &Tensor, criterion: OutlierCriterion) -> Result<Vec<f32>> {
    let (_, h) = x.dims2()?;
    let mut stat = vec![f32::NEG_INFINITY; h];
    for row in x.data().chunks_exact(h.max(1)) {
        for (m, &v) in stat.iter_mut().zip(row) {
            let v = match criterion {
                OutlierCriterion::Magnitude => v.abs(),
                OutlierCriterion::Signed => v,
            };
            if v > *m {
                *m = v;
            }
        }
    }
    Ok(stat)
}

/// Ascending indices of the columns whose largest magnitude exceeds `tau`.
pub fn extract_outliers(x: &Tensor, tau: QuantThreshold) -> Result<Vec<usize>> {
    extract_outliers_with(x, tau, OutlierCriterion::Magnitude)
}

pub fn extract_outliers_with(
    x: &Tensor,
    tau: QuantThreshold,
    criterion: OutlierCriterion,
) -> Result<Vec<usize>> {
    let stat = column_stat(x, criterion)?;
    Ok(stat
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > tau.value())
        .map(|(i, _)| i)
        .collect())
}

/// Applies an [`OutlierPolicy`] to an outlier set extracted from `x`. The
/// result stays sorted ascending.
pub fn apply_policy(outliers: &[usize], policy: OutlierPolicy, x: &Tensor) -> Result<Vec<usize>> {
    let (_, h) = x.dims2()?;
    if let Some(&bad) = outliers.iter().find(|&&i| i >= h) {
        return Err(shape_err!("outlier column {bad} outside [0, {h})"));
    }
    let cap = match policy {
        OutlierPolicy::Unlimited => return Ok(outliers.to_vec()),
        OutlierPolicy::Capped(cap) => cap.min(h),
    };
    if cap >= outliers.len() {
        return Ok(outliers.to_vec());
    }
    let mag = column_stat(x, OutlierCriterion::Magnitude)?;
    let mut ranked = outliers.to_vec();
    // Largest magnitude first, lower index on ties.
    ranked.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
    ranked.truncate(cap);
    ranked.sort_unstable();
    Ok(ranked)
}

/// Identifies a quantized layer inside a model, e.g. `block2.mlp_in`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerId(pub String);

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// A linear layer `y = x W + b` with an int8 copy of `W` kept in sync.
#[derive(Clone, Debug)]
pub struct QuantLinearLayer {
    id: LayerId,
    weights: Tensor,
    qweights: QuantizedMatrix,
    bias: Option<Tensor>,
}

impl QuantLinearLayer {
    pub fn new(id: impl Into<String>, weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (_, o) = weights.dims2()?;
        if let Some(b) = &bias {
            if b.shape() != [o] {
                return Err(shape_err!("bias shape {:?} does not match {o} outputs", b.shape()));
            }
        }
        let qweights = absmax_quantize(&weights, QuantAxis::ColumnWise)?;
        Ok(Self {
            id: LayerId(id.into()),
            weights,
            qweights,
            bias,
        })
    }

    pub fn id(&self) -> &LayerId {
        &self.id
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn qweights(&self) -> &QuantizedMatrix {
        &self.qweights
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Replaces the full-precision weights and rebuilds the int8 cache.
    pub fn set_weights(&mut self, weights: Tensor) -> Result<()> {
        if weights.shape() != self.weights.shape() {
            return Err(shape_err!(
                "weight shape {:?} does not match layer shape {:?}",
                weights.shape(),
                self.weights.shape()
            ));
        }
        self.qweights = absmax_quantize(&weights, QuantAxis::ColumnWise)?;
        self.weights = weights;
        Ok(())
    }

    pub fn set_bias(&mut self, bias: Tensor) -> Result<()> {
        match &self.bias {
            Some(b) if b.shape() == bias.shape() => {
                self.bias = Some(bias);
                Ok(())
            }
            _ => Err(shape_err!("bias shape {:?} does not match layer", bias.shape())),
        }
    }
}

/// Per-call record of one mixed-precision matmul.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatmulTrace {
    pub layer_id: LayerId,
    pub outlier_columns: Vec<usize>,
    pub s_rows: usize,
    pub h: usize,
    pub o: usize,
    pub f16_macs: u64,
    pub int8_macs: u64,
    pub bytes_moved: u64,
}

impl MatmulTrace {
    fn new(layer_id: LayerId, outliers: Vec<usize>, s: usize, h: usize, o: usize) -> Self {
        let (s64, h64, o64) = (s as u64, h as u64, o as u64);
        let n_out = outliers.len() as u64;
        let n_int = h64 - n_out;
        // 1 byte per int8 operand element, 2 per f16 operand element,
        // 2 per output element.
        let bytes_moved = (s64 * n_int + n_int * o64) + 2 * (s64 * n_out + n_out * o64) + 2 * s64 * o64;
        Self {
            layer_id,
            outlier_columns: outliers,
            s_rows: s,
            h,
            o,
            f16_macs: s64 * n_out * o64,
            int8_macs: s64 * n_int * o64,
            bytes_moved,
        }
    }

    pub fn outlier_count(&self) -> usize {
        self.outlier_columns.len()
    }
}

/// Mixed-precision `x · W + b`.
pub fn mixed_matmul(
    x: &Tensor,
    layer: &QuantLinearLayer,
    settings: &QuantSettings,
) -> Result<(Tensor, MatmulTrace)> {
    let (s, h) = x.dims2()?;
    let o = layer.out_features();
    if h != layer.in_features() {
        return Err(shape_err!(
            "layer {} expects {} input features, got {:?}",
            layer.id,
            layer.in_features(),
            x.shape()
        ));
    }
    let outliers = extract_outliers_with(x, settings.tau, settings.criterion)?;
    let outliers = apply_policy(&outliers, settings.policy, x)?;

    let mut is_outlier = vec![false; h];
    for &i in &outliers {
        is_outlier[i] = true;
    }
    let regular: Vec<usize> = (0..h).filter(|&i| !is_outlier[i]).collect();
    let xd = x.data();
    let mut out = vec![0.0f32; s * o];

    if !outliers.is_empty() {
        let n = outliers.len();
        let mut xh = Vec::with_capacity(s * n);
        for r in 0..s {
            xh.extend(outliers.iter().map(|&c| round_to_half(xd[r * h + c])));
        }
        let wd = layer.weights.data();
        let mut wh = Vec::with_capacity(n * o);
        for &c in &outliers {
            wh.extend(wd[c * o..(c + 1) * o].iter().map(|&w| round_to_half(w)));
        }
        f32::gemm(s, n, o, &xh, (n, 1), &wh, (o, 1), &mut out, false);
        round_slice_to_half(&mut out);
    }

    if !regular.is_empty() {
        let n = regular.len();
        let mut xq = vec![0i8; s * n];
        let mut row_scales = Vec::with_capacity(s);
        for r in 0..s {
            let row = &xd[r * h..(r + 1) * h];
            let absmax = regular.iter().fold(0.0f32, |m, &c| m.max(row[c].abs()));
            let scale = absmax_scale(absmax);
            for (q, &c) in xq[r * n..(r + 1) * n].iter_mut().zip(&regular) {
                *q = quantize_value(row[c], scale);
            }
            row_scales.push(scale);
        }
        let acc = int8_product(&xq, &regular, layer.qweights.values(), s, o);
        let dequant = dequantize_product(&acc, &row_scales, layer.qweights.scales())?;
        for (y, d) in out.iter_mut().zip(dequant.data()) {
            *y += d;
        }
    }

    if let Some(b) = &layer.bias {
        for row in out.chunks_exact_mut(o) {
            for (y, &bv) in row.iter_mut().zip(b.data()) {
                *y += bv;
            }
        }
    }
    let trace = MatmulTrace::new(layer.id.clone(), outliers, s, h, o);
    Ok((Tensor::from_parts(vec![s, o], out), trace))
}

/// Largest inner dimension for which every int8 dot product, and every
/// partial sum of one, is an integer below 2^24 and therefore exact in f32.
const EXACT_F32_INNER: usize = (1 << 24) / (127 * 127);

/// `xq · wq[rows, :]` with i32 results. `xq` is `s x rows.len()`; `wq` holds
/// the full `h x o` weight codes.
fn int8_product(xq: &[i8], rows: &[usize], wq: &[i8], s: usize, o: usize) -> Vec<i32> {
    let n = rows.len();
    if n <= EXACT_F32_INNER {
        let xf: Vec<f32> = xq.iter().map(|&v| f32::from(v)).collect();
        let mut wf = Vec::with_capacity(n * o);
        for &c in rows {
            wf.extend(wq[c * o..(c + 1) * o].iter().map(|&v| f32::from(v)));
        }
        let mut accf = vec![0.0f32; s * o];
        f32::gemm(s, n, o, &xf, (n, 1), &wf, (o, 1), &mut accf, false);
        return accf.into_iter().map(|v| v as i32).collect();
    }
    int8_product_i32(xq, rows, wq, s, o)
}

fn int8_product_i32(xq: &[i8], rows: &[usize], wq: &[i8], s: usize, o: usize) -> Vec<i32> {
    let n = rows.len();
    let mut acc = vec![0i32; s * o];
    for r in 0..s {
        let acc_row = &mut acc[r * o..(r + 1) * o];
        for (p, &c) in rows.iter().enumerate() {
            let xv = i32::from(xq[r * n + p]);
            if xv == 0 {
                continue;
            }
            for (a, &w) in acc_row.iter_mut().zip(&wq[c * o..(c + 1) * o]) {
                *a += xv * i32::from(w);
            }
        }
    }
    acc
}

/// Stacks a `B x s x h` batch into `(B·s) x h`; image `b` occupies rows
/// `b·s .. (b+1)·s`.
pub fn batch_flatten(x: &Tensor) -> Result<Tensor> {
    let (b, s, h) = x.dims3()?;
    x.clone().reshape(vec![b * s, h])
}

/// Inverse of [`batch_flatten`].
pub fn batch_unflatten(x: &Tensor, batch: usize) -> Result<Tensor> {
    let (rows, h) = x.dims2()?;
    if batch == 0 || rows % batch != 0 {
        return Err(shape_err!("{rows} rows cannot be split into {batch} images"));
    }
    x.clone().reshape(vec![batch, rows / batch, h])
}
