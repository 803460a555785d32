//! Checks the analytic gradient of a small layer-norm / GELU / softmax
//! graph against central finite differences in f64.

use outlier_sponge::autograd::{finite_diff_check, Graph, Var};
use outlier_sponge::{Result, Tensor};

fn build(g: &mut Graph<f64>, x: &Tensor<f64>, trainable: bool) -> Result<(Var, Var)> {
    let xv = if trainable { g.param(x.clone()) } else { g.constant(x.clone()) };
    let gamma = g.constant(Tensor::new(vec![4], vec![1.0, 0.5, -1.5, 2.0])?);
    let beta = g.constant(Tensor::new(vec![4], vec![0.1, 0.0, -0.2, 0.3])?);
    let w = g.constant(Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?);
    let ln = g.layer_norm(xv, gamma, beta, 1e-5)?;
    let act = g.gelu(ln);
    let z = g.matmul(act, w)?;
    let p = g.softmax(z)?;
    let sq = g.square(p);
    Ok((xv, g.sum(sq)))
}

fn main() -> Result<()> {
    let x = Tensor::new(vec![2, 4], vec![0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 1.4, -0.9])?;
    let mut g = Graph::new();
    let (xv, root) = build(&mut g, &x, true)?;
    let analytic = g.backward(root)?.get(xv).cloned().expect("x is a parameter");
    let f = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let (_, root) = build(&mut g, t, false).unwrap();
        g.value(root).item().unwrap()
    };
    let rel = finite_diff_check(f, &analytic, &x, 1e-5);
    println!("value {:.6}, max relative gradient error {rel:.2e}", g.value(root).item()?);
    Ok(())
}
