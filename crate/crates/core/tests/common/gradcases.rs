//! One finite-difference case per autograd primitive. Each case maps a point
//! `x` to a scalar through the primitive, reduced with fixed random weights so
//! no gradient entry is identically zero by symmetry.

use outlier_sponge::autograd::{
    finite_diff_check_excluding, kink_coordinates, FdReport, Graph, LinearExec, Var,
};
use outlier_sponge::quantlinear::QuantLinearLayer;
use outlier_sponge::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = fn(&mut Graph<f64>, Var, &mut ChaCha8Rng) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub shape: &'static [usize],
    pub build: Build,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Σ w ⊙ y with weights drawn from `rng`.
fn weighted(g: &mut Graph<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_t(rng, &shape, 0.5, 1.5));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn konst(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, shape: &[usize]) -> Var {
    g.constant(rand_t(rng, shape, -1.0, 1.0))
}

pub fn primitive_cases() -> Vec<Case> {
    vec![
        Case { name: "matmul_left", shape: &[3, 4], build: |g, x, r| {
            let b = konst(g, r, &[4, 2]);
            let y = g.matmul(x, b)?;
            weighted(g, y, r)
        }},
        Case { name: "matmul_right", shape: &[4, 2], build: |g, x, r| {
            let a = konst(g, r, &[3, 4]);
            let y = g.matmul(a, x)?;
            weighted(g, y, r)
        }},
        Case { name: "add", shape: &[2, 3], build: |g, x, r| {
            let c = konst(g, r, &[2, 3]);
            let y = g.add(x, c)?;
            let y = g.add(y, x)?;
            weighted(g, y, r)
        }},
        Case { name: "sub", shape: &[2, 3], build: |g, x, r| {
            let c = konst(g, r, &[2, 3]);
            let y = g.sub(c, x)?;
            weighted(g, y, r)
        }},
        Case { name: "mul", shape: &[5], build: |g, x, r| {
            let c = konst(g, r, &[5]);
            let y = g.mul(x, c)?;
            let y = g.mul(y, x)?;
            weighted(g, y, r)
        }},
        Case { name: "add_row", shape: &[4], build: |g, x, r| {
            let m = konst(g, r, &[3, 4]);
            let y = g.add_row(m, x)?;
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "scale", shape: &[4], build: |g, x, r| {
            let y = g.scale(x, -2.5);
            weighted(g, y, r)
        }},
        Case { name: "add_scalar", shape: &[4], build: |g, x, r| {
            let y = g.add_scalar(x, 0.7);
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "square", shape: &[2, 2], build: |g, x, r| {
            let y = g.square(x);
            weighted(g, y, r)
        }},
        Case { name: "sqrt_eps", shape: &[6], build: |g, x, r| {
            let s = g.square(x);
            let y = g.sqrt_eps(s, 1e-8)?;
            weighted(g, y, r)
        }},
        Case { name: "mean", shape: &[3, 2], build: |g, x, _| {
            let s = g.square(x);
            Ok(g.mean(s))
        }},
        Case { name: "sum", shape: &[3, 2], build: |g, x, r| {
            let y = g.gelu(x);
            let _ = r;
            Ok(g.sum(y))
        }},
        Case { name: "max_const", shape: &[8], build: |g, x, r| {
            let y = g.max_const(x, 0.1);
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "clamp", shape: &[8], build: |g, x, r| {
            let y = g.clamp(x, -0.4, 0.6);
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "transpose", shape: &[2, 3], build: |g, x, r| {
            let y = g.transpose(x)?;
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "reshape", shape: &[2, 3], build: |g, x, r| {
            let y = g.reshape(x, vec![3, 2])?;
            let b = konst(g, r, &[2, 2]);
            let y = g.matmul(y, b)?;
            weighted(g, y, r)
        }},
        Case { name: "narrow", shape: &[2, 4, 3], build: |g, x, r| {
            let y = g.narrow(x, 1, 1, 2)?;
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "concat", shape: &[2, 3], build: |g, x, r| {
            let c = konst(g, r, &[1, 3]);
            let s = g.square(x);
            let y = g.concat(&[c, x, s], 0)?;
            weighted(g, y, r)
        }},
        Case { name: "layer_norm_input", shape: &[3, 5], build: |g, x, r| {
            let gamma = g.constant(rand_t(r, &[5], 0.5, 1.5));
            let beta = konst(g, r, &[5]);
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            weighted(g, y, r)
        }},
        Case { name: "layer_norm_gamma", shape: &[5], build: |g, x, r| {
            let input = konst(g, r, &[3, 5]);
            let beta = konst(g, r, &[5]);
            let y = g.layer_norm(input, x, beta, 1e-5)?;
            weighted(g, y, r)
        }},
        Case { name: "layer_norm_beta", shape: &[5], build: |g, x, r| {
            let input = konst(g, r, &[3, 5]);
            let gamma = konst(g, r, &[5]);
            let y = g.layer_norm(input, gamma, x, 1e-5)?;
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "softmax", shape: &[2, 5], build: |g, x, r| {
            let y = g.softmax(x)?;
            weighted(g, y, r)
        }},
        Case { name: "gelu", shape: &[7], build: |g, x, r| {
            let y = g.gelu(x);
            weighted(g, y, r)
        }},
        Case { name: "topk_cols", shape: &[5, 3], build: |g, x, r| {
            let y = g.topk_cols(x, 2)?;
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "patches", shape: &[2, 4, 4], build: |g, x, r| {
            let y = g.patches(x, 2)?;
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "linear_input", shape: &[3, 4], build: |g, x, r| {
            let w = rand_t(r, &[4, 2], -1.0, 1.0);
            let b = rand_t(r, &[2], -1.0, 1.0);
            let layer = QuantLinearLayer::new("l", w.cast(), Some(b.cast()))?;
            let (wv, bv) = (g.constant(w), g.constant(b));
            let y = g.quant_linear(x, wv, Some(bv), &layer, LinearExec::FullPrecision)?;
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "linear_weight", shape: &[4, 2], build: |g, x, r| {
            let input = konst(g, r, &[3, 4]);
            let layer = QuantLinearLayer::new("l", g.value(x).cast(), None)?;
            let y = g.quant_linear(input, x, None, &layer, LinearExec::FullPrecision)?;
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "linear_bias", shape: &[2], build: |g, x, r| {
            let input = konst(g, r, &[3, 4]);
            let w = rand_t(r, &[4, 2], -1.0, 1.0);
            let layer = QuantLinearLayer::new("l", w.cast(), Some(g.value(x).cast()))?;
            let wv = g.constant(w);
            let y = g.quant_linear(input, wv, Some(x), &layer, LinearExec::FullPrecision)?;
            let y = g.square(y);
            weighted(g, y, r)
        }},
        Case { name: "cross_entropy", shape: &[3, 4], build: |g, x, _| {
            g.cross_entropy(x, &[0, 3, 1])
        }},
    ]
}

/// Evaluates `case` at a random point drawn from `seed`; returns the
/// finite-difference report with kink coordinates excluded.
pub fn check_case(case: &Case, seed: u64, h: f64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&mut rng, case.shape, -1.0, 1.0);
    let build_seed: u64 = rng.gen();

    let mut g = Graph::<f64>::new();
    let xv = g.param(x.clone());
    let root = (case.build)(&mut g, xv, &mut ChaCha8Rng::seed_from_u64(build_seed)).unwrap();
    let analytic = g
        .backward(root)
        .unwrap()
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let f = |t: &Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let v = g.constant(t.clone());
        let root = (case.build)(&mut g, v, &mut ChaCha8Rng::seed_from_u64(build_seed)).unwrap();
        g.value(root).item().unwrap()
    };
    let kinks = kink_coordinates(f, &x, h, 0.1);
    finite_diff_check_excluding(f, &analytic, &x, h, &kinks)
}
