use crate::error::{param_err, shape_err, Error, Result};
use crate::quantlinear::{mixed_matmul, MatmulTrace, QuantLinearLayer, QuantSettings};
use crate::tensor::{topk_column_rows, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a quantized linear node computes its forward value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearExec {
    /// Plain `x · W + b` in the graph's precision.
    FullPrecision,
    /// The outlier-decomposed int8/f16 kernel, straight-through backward.
    Mixed(QuantSettings),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    SqrtEps(Var),
    Mean(Var),
    Sum(Var),
    MaxConst(Var, T),
    Clamp(Var, T, T),
    Transpose(Var),
    Reshape(Var),
    Narrow {
        src: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    TopKCols {
        src: Var,
        rows: Vec<usize>,
    },
    Patches {
        src: Var,
        patch: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    traces: Vec<MatmulTrace>,
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the root or
    /// does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()))
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            traces: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Traces of every mixed-precision linear node, in execution order.
    pub fn traces(&self) -> &[MatmulTrace] {
        &self.traces
    }

    pub fn take_traces(&mut self) -> Vec<MatmulTrace> {
        std::mem::take(&mut self.traces)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), rg))
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    /// `x[r, :] + row` for every row of a matrix `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(row).shape() != [c] {
            return Err(shape_err!(
                "row broadcast of {:?} onto {r}x{c}",
                self.value(row).shape()
            ));
        }
        let b = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(c.max(1)) {
            for (y, &bv) in chunk.iter_mut().zip(b) {
                *y += bv;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(Op::AddRow(x, row), Tensor::from_parts(vec![r, c], data), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(&[x]);
        self.push(Op::Scale(x, c), v, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a + c);
        let rg = self.rg(&[x]);
        self.push(Op::AddScalar(x), v, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        let rg = self.rg(&[x]);
        self.push(Op::Square(x), v, rg)
    }

    /// `sqrt(x + eps)`; `eps > 0` keeps the derivative finite at zero.
    pub fn sqrt_eps(&mut self, x: Var, eps: T) -> Result<Var> {
        if self.value(x).data().iter().any(|&a| a + eps <= T::zero()) {
            return Err(param_err!("sqrt_eps argument must satisfy x + eps > 0"));
        }
        let v = self.value(x).map(|a| (a + eps).sqrt());
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SqrtEps(x), v, rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_f64(t.len().max(1) as f64);
        let v = Tensor::scalar(t.sum() / n);
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), v, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), v, rg)
    }

    /// Elementwise `max(x, c)`; the gradient flows only where `x > c`.
    pub fn max_const(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| if a > c { a } else { c });
        let rg = self.rg(&[x]);
        self.push(Op::MaxConst(x, c), v, rg)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient flows where
    /// `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        let rg = self.rg(&[x]);
        self.push(Op::Clamp(x, lo, hi), v, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), v, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), v, rg))
    }

    /// Slice `start .. start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(shape_err!(
                "narrow axis {axis} range {start}..{} of shape {:?}",
                start + len,
                t.shape()
            ));
        }
        let (outer, dim, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::Narrow {
                src: x,
                axis,
                start,
            },
            Tensor::from_parts(shape, data),
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| param_err!("concat of zero tensors"))?;
        let ref_shape = self.value(*first).shape().to_vec();
        if axis >= ref_shape.len() {
            return Err(shape_err!("concat axis {axis} on rank {}", ref_shape.len()));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat of {:?} with {:?}", ref_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&ref_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Tensor::from_parts(shape, data),
            rg,
        ))
    }

    /// Row-wise layer normalization with affine parameters of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err!("layer norm parameters must have length {c}"));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let n = T::from_f64(c as f64);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xd.chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            Tensor::from_parts(vec![r, c], out),
            rg,
        ))
    }

    /// Row-wise softmax of a matrix (a vector is treated as one row).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().ok_or_else(|| shape_err!("softmax of a scalar"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Softmax(x), Tensor::from_parts(shape, out), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        let v = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        self.push(Op::Gelu(x), v, rg)
    }

    /// The `k` largest entries of every column (`k x cols`, descending);
    /// gradients route back to the selected positions only.
    pub fn topk_cols(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = t.dims2()?;
        let rows = topk_column_rows(t, k)?;
        let data = rows
            .iter()
            .enumerate()
            .map(|(i, &r)| t.at(r, i % cols))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::TopKCols { src: x, rows },
            Tensor::from_parts(vec![k, cols], data),
            rg,
        ))
    }

    /// Splits a `C x H x W` image into non-overlapping `p x p` patches,
    /// returning `(H/p · W/p) x (C·p·p)`. Patches are in row-major grid
    /// order; each patch vector is ordered channel, row, column.
    pub fn patches(&mut self, x: Var, p: usize) -> Result<Var> {
        let t = self.value(x);
        let (ch, h, w) = t.dims3()?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(shape_err!("image {h}x{w} is not divisible into {p}x{p} patches"));
        }
        let (gh, gw) = (h / p, w / p);
        let d = t.data();
        let mut out = Vec::with_capacity(t.len());
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..ch {
                    for dy in 0..p {
                        let base = (c * h + py * p + dy) * w + px * p;
                        out.extend_from_slice(&d[base..base + p]);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::Patches { src: x, patch: p },
            Tensor::from_parts(vec![gh * gw, ch * p * p], out),
            rg,
        ))
    }

    /// Linear layer node. `w` and `b` must hold the same values as `layer`
    /// (they carry the gradients); `layer` supplies the int8 weight cache for
    /// the mixed-precision forward.
    pub fn quant_linear(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        layer: &QuantLinearLayer,
        exec: LinearExec,
    ) -> Result<Var> {
        let (s, h) = self.value(x).dims2()?;
        let (h2, o) = self.value(w).dims2()?;
        if h != h2 || (h, o) != (layer.in_features(), layer.out_features()) {
            return Err(shape_err!(
                "linear {}: input {s}x{h}, weights {h2}x{o}, layer {}x{}",
                layer.id(),
                layer.in_features(),
                layer.out_features()
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_err!("linear {}: bias shape", layer.id()));
            }
        }
        let value = match exec {
            LinearExec::FullPrecision => {
                let mut out = vec![T::zero(); s * o];
                T::gemm(s, h, o, self.value(x).data(), (h, 1), self.value(w).data(), (o, 1), &mut out, false);
                if let Some(b) = b {
                    let bd = self.value(b).data();
                    for row in out.chunks_exact_mut(o) {
                        for (y, &bv) in row.iter_mut().zip(bd) {
                            *y += bv;
                        }
                    }
                }
                Tensor::from_parts(vec![s, o], out)
            }
            LinearExec::Mixed(settings) => {
                let x32: Tensor<f32> = self.value(x).cast();
                let (y, trace) = mixed_matmul(&x32, layer, &settings)?;
                self.traces.push(trace);
                y.cast()
            }
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Op::Linear { x, w, b }, value, rg))
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2()?;
        if labels.len() != r {
            return Err(shape_err!("{} labels for {r} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(param_err!("label {bad} out of range for {c} classes"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            loss += z.ln() - (row[label].ln());
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let loss = loss / T::from_f64(r as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Adjoints start at zero on every call,
    /// so repeated passes over the same graph give identical results.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::from_parts(
            self.value(root).shape().to_vec(),
            vec![T::one()],
        ));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(delta.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, (n, 1), self.value(*b).data(), (1, n), &mut da, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), (1, k), gd, (n, 1), &mut db, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if self.wants(x) {
                        let other = self.value(y).data();
                        let d = gd.iter().zip(other).map(|(&g, &o)| g * o).collect();
                        self.accumulate(grads, x, Tensor::from_parts(shape_of(x), d));
                    }
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*row) {
                    let c = self.value(*row).len();
                    let mut d = vec![T::zero(); c];
                    for chunk in gd.chunks_exact(c.max(1)) {
                        for (a, &b) in d.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::from_parts(vec![c], d));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * two * v)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), d));
            }
            Op::SqrtEps(x) => {
                let half = T::from_f64(0.5);
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * half / y)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), d));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / T::from_f64(n.max(1) as f64);
                self.accumulate(grads, *x, Tensor::full(shape_of(*x), v));
            }
            Op::Sum(x) => self.accumulate(grads, *x, Tensor::full(shape_of(*x), gd[0])),
            Op::MaxConst(x, c) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > *c { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), d));
            }
            Op::Clamp(x, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), d));
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, g.transpose().expect("transpose of a matrix"))
            }
            Op::Reshape(x) => {
                let t = Tensor::from_parts(shape_of(*x), gd.to_vec());
                self.accumulate(grads, *x, t);
            }
            Op::Narrow { src, axis, start } => {
                if self.wants(*src) {
                    let shape = shape_of(*src);
                    let (outer, dim, inner) = axis_split(&shape, *axis);
                    let len = node.value.shape()[*axis];
                    let mut d = vec![T::zero(); outer * dim * inner];
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        d[dst..dst + len * inner]
                            .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.accumulate(grads, *src, Tensor::from_parts(shape, d));
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let shape = shape_of(*p);
                    let len = shape[*axis];
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(shape, d));
                    }
                    offset += len;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (grow, xrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * xrow[j];
                            db[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], dg));
                    self.accumulate(grads, *beta, Tensor::from_parts(vec![c], db));
                }
                if self.wants(*x) {
                    let n = T::from_f64(c as f64);
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((grow, xrow), &rs) in
                        gd.chunks_exact(c).zip(xhat.chunks_exact(c)).zip(rstd)
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let dxh = grow[j] * gam[j];
                            mean_d += dxh;
                            mean_dx += dxh * xrow[j];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        for j in 0..c {
                            dx.push(rs * (grow[j] * gam[j] - mean_d - xrow[j] * mean_dx));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), dx));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                let mut d = Vec::with_capacity(y.len());
                for (grow, yrow) in gd.chunks_exact(c).zip(y.chunks_exact(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    d.extend(grow.iter().zip(yrow).map(|(&a, &b)| b * (a - dot)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), d));
            }
            Op::Gelu(x) => {
                let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        g * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), d));
            }
            Op::TopKCols { src, rows } => {
                let shape = shape_of(*src);
                let cols = shape[1];
                let mut d = vec![T::zero(); shape[0] * cols];
                for (i, &r) in rows.iter().enumerate() {
                    d[r * cols + i % cols] += gd[i];
                }
                self.accumulate(grads, *src, Tensor::from_parts(shape, d));
            }
            Op::Patches { src, patch } => {
                let shape = shape_of(*src);
                let (ch, h, w) = (shape[0], shape[1], shape[2]);
                let p = *patch;
                let mut d = vec![T::zero(); ch * h * w];
                let mut it = gd.iter();
                for py in 0..h / p {
                    for px in 0..w / p {
                        for c in 0..ch {
                            for dy in 0..p {
                                let base = (c * h + py * p + dy) * w + px * p;
                                for v in &mut d[base..base + p] {
                                    *v += *it.next().unwrap();
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *src, Tensor::from_parts(shape, d));
            }
            Op::Linear { x, w, b } => {
                let (s, h) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[1];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); s * h];
                    T::gemm(s, o, h, gd, (o, 1), self.value(*w).data(), (1, o), &mut dx, false);
                    self.accumulate(grads, *x, Tensor::from_parts(vec![s, h], dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); h * o];
                    T::gemm(h, s, o, self.value(*x).data(), (1, h), gd, (o, 1), &mut dw, false);
                    self.accumulate(grads, *w, Tensor::from_parts(vec![h, o], dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for chunk in gd.chunks_exact(o) {
                            for (a, &v) in db.iter_mut().zip(chunk) {
                                *a += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_parts(vec![o], db));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).shape()[1];
                let scale = gd[0] / T::from_f64(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] = d[r * c + l] - scale;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(shape_of(*logits), d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantlinear::QuantSettings;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        assert_eq!(g.value(y).item().unwrap(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn constant_expression_has_no_gradients() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(2.0));
        let y = g.square(x);
        assert!(!g.requires_grad(y));
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        // max(c - x, 0)^2 with x > c
        let c = 2.0f32;
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(3.0));
        let neg = g.scale(x, -1.0);
        let d = g.add_scalar(neg, c);
        let h = g.max_const(d, 0.0);
        let y = g.square(h);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn topk_gradient_lands_on_selected_entries_only() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_rows(&[[1.0f32, 9.0], [5.0, 2.0], [3.0, 4.0]]));
        let top = g.topk_cols(x, 2).unwrap();
        assert_eq!(g.value(top).data(), &[5.0, 9.0, 3.0, 4.0]);
        let s = g.sum(top);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_is_stateless() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let a = g.param(random(&mut rng, &[3, 4]));
        let b = g.constant(random(&mut rng, &[4, 2]));
        let p = g.matmul(a, b).unwrap();
        let s = g.softmax(p).unwrap();
        let q = g.square(s);
        let m = g.mean(q);
        let g1 = g.backward(m).unwrap();
        let g2 = g.backward(m).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert!(g1.get(b).is_none());
    }

    #[test]
    fn linear_backward_ignores_forward_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, &[5, 4]);
        let layer = QuantLinearLayer::new("l", w.clone(), None).unwrap();
        let mut x = random(&mut rng, &[3, 5]);
        x.data_mut()[0] = -30.0;
        let upstream = random(&mut rng, &[3, 4]);
        let run = |exec| {
            let mut g = Graph::<f32>::new();
            let xv = g.param(x.clone());
            let wv = g.constant(w.clone());
            let y = g.quant_linear(xv, wv, None, &layer, exec).unwrap();
            let u = g.constant(upstream.clone());
            let p = g.mul(y, u).unwrap();
            let s = g.sum(p);
            if exec != LinearExec::FullPrecision {
                assert_eq!(g.traces().len(), 1);
                assert_eq!(g.traces()[0].outlier_columns, vec![0]);
            }
            g.backward(s).unwrap().get(xv).unwrap().clone()
        };
        let full = run(LinearExec::FullPrecision);
        let mixed = run(LinearExec::Mixed(QuantSettings::default()));
        assert_eq!(full, mixed);
    }

    #[test]
    fn narrow_and_concat_round_trip() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f32).collect()).unwrap());
        let a = g.narrow(x, 1, 0, 1).unwrap();
        let b = g.narrow(x, 1, 1, 2).unwrap();
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.narrow(x, 1, 2, 2).is_err());
    }

    #[test]
    fn patches_layout() {
        let mut g = Graph::<f32>::new();
        // 1 channel, 4x4 image, values = index
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let x = g.param(img);
        let p = g.patches(x, 2).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 4]);
        assert_eq!(g.value(p).row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(g.value(p).row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(g.value(p).row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(g.patches(x, 3).is_err());
    }
}
