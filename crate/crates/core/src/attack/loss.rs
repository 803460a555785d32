//! The three attack objectives and their weighted sum.
//!
//! Every term is written as a quantity to minimize:
//!
//! * the outlier term is `mean(max(x_target - v, 0)^2)` over the `K` largest
//!   entries `v` of every column of each quantized layer's input, summed over
//!   layers. It vanishes once those entries reach `x_target`, so hidden
//!   states that are already outliers are not penalized;
//! * the classification term is the mean squared difference between the
//!   perturbed and clean raw logits;
//! * the total-variation term is the smoothed isotropic variation of `δ`.

use crate::attack::AttackConfig;
use crate::autograd::{Graph, LinearExec, Var};
use crate::error::{param_err, shape_err, Result};
use crate::quantlinear::MatmulTrace;
use crate::tensor::{topk_columns, Scalar, Tensor};
use crate::vit::{CaptureBuffer, VisionTransformer};

/// Smoothing constant inside the total-variation square root.
pub const TV_EPS: f64 = 1e-8;

/// Outlier-inducing loss over captured hidden states.
pub fn quant_loss(captures: &CaptureBuffer, k: usize, x_target: f32) -> Result<f64> {
    let mut total = 0.0;
    for c in &captures.entries {
        let top = topk_columns(&c.hidden, k)?;
        let sum: f64 = top
            .data()
            .iter()
            .map(|&v| {
                let gap = (f64::from(x_target) - f64::from(v)).max(0.0);
                gap * gap
            })
            .sum();
        total += sum / top.len().max(1) as f64;
    }
    Ok(total)
}

/// Mean squared difference of two logit vectors.
pub fn class_loss(adv: &[f32], clean: &[f32]) -> Result<f64> {
    if adv.len() != clean.len() {
        return Err(shape_err!("{} adversarial logits vs {} clean", adv.len(), clean.len()));
    }
    if adv.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = adv
        .iter()
        .zip(clean)
        .map(|(&a, &c)| (f64::from(a) - f64::from(c)).powi(2))
        .sum();
    Ok(sum / adv.len() as f64)
}

/// Smoothed total variation of a `C x H x W` perturbation over the
/// positions that have both a lower and a right neighbour. A constant
/// perturbation scores zero.
pub fn tv_loss(delta: &Tensor) -> Result<f64> {
    let (c, h, w) = delta.dims3()?;
    let d = delta.data();
    let floor = TV_EPS.sqrt();
    let mut total = 0.0;
    for ch in 0..c {
        for i in 0..h.saturating_sub(1) {
            for j in 0..w.saturating_sub(1) {
                let at = |r: usize, col: usize| f64::from(d[(ch * h + r) * w + col]);
                let dx = at(i + 1, j) - at(i, j);
                let dy = at(i, j + 1) - at(i, j);
                total += (dx * dx + dy * dy + TV_EPS).sqrt() - floor;
            }
        }
    }
    Ok(total)
}

/// Graph form of [`quant_loss`] over capture nodes.
pub fn quant_loss_node<T: Scalar>(g: &mut Graph<T>, captures: &[Var], k: usize, x_target: T) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &x in captures {
        let top = g.topk_cols(x, k)?;
        let neg = g.scale(top, -T::one());
        let gap = g.add_scalar(neg, x_target);
        let hinge = g.max_const(gap, T::zero());
        let sq = g.square(hinge);
        let layer = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, layer)?,
            None => layer,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}

/// Graph form of [`class_loss`]; `clean` enters as a constant.
pub fn class_loss_node<T: Scalar>(g: &mut Graph<T>, adv: Var, clean: &Tensor<T>) -> Result<Var> {
    let c = g.constant(clean.clone());
    let diff = g.sub(adv, c)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Graph form of [`tv_loss`].
pub fn tv_loss_node<T: Scalar>(g: &mut Graph<T>, delta: Var) -> Result<Var> {
    let (c, h, w) = g.value(delta).dims3()?;
    if h < 2 || w < 2 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let top = g.narrow(delta, 1, 0, h - 1)?;
    let here = g.narrow(top, 2, 0, w - 1)?;
    let right = g.narrow(top, 2, 1, w - 1)?;
    let low = g.narrow(delta, 1, 1, h - 1)?;
    let below = g.narrow(low, 2, 0, w - 1)?;
    let dx = g.sub(below, here)?;
    let dy = g.sub(right, here)?;
    let dx2 = g.square(dx);
    let dy2 = g.square(dy);
    let s = g.add(dx2, dy2)?;
    let r = g.sqrt_eps(s, T::from_f64(TV_EPS))?;
    let sum = g.sum(r);
    let terms = (c * (h - 1) * (w - 1)) as f64;
    Ok(g.add_scalar(sum, T::from_f64(-terms * TV_EPS.sqrt())))
}

/// Values of the loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub quant: f64,
    pub class: f64,
    pub tv: f64,
    pub total: f64,
}

/// Loss nodes for one image.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub quant: Var,
    pub class: Var,
    pub tv: Var,
    pub logits: Var,
}

/// Builds `λ1·quant + λ2·class + λ3·tv` for `clamp(x + δ, 0, 1)`.
///
/// Terms with a zero weight are still evaluated for reporting but are left
/// out of the total, so they contribute nothing to its gradient.
pub fn total_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    model: &VisionTransformer,
    x: Var,
    delta: Var,
    clean_logits: &Tensor<T>,
    cfg: &AttackConfig,
    exec: LinearExec,
) -> Result<LossNodes> {
    if g.value(x).shape() != g.value(delta).shape() {
        return Err(shape_err!(
            "perturbation {:?} does not match image {:?}",
            g.value(delta).shape(),
            g.value(x).shape()
        ));
    }
    let params = model.bind(g, false);
    let sum = g.add(x, delta)?;
    let input = g.clamp(sum, T::zero(), T::one());
    let fwd = model.forward_graph(g, &params, &[input], exec)?;
    let caps: Vec<Var> = fwd.captures.iter().map(|(_, v)| *v).collect();
    let m = g.value(fwd.logits).len();
    let logits = g.reshape(fwd.logits, vec![m])?;
    let quant = quant_loss_node(g, &caps, cfg.k, T::from_f64(f64::from(cfg.x_target)))?;
    let class = class_loss_node(g, logits, &clean_logits.clone().reshape(vec![m])?)?;
    let tv = tv_loss_node(g, delta)?;

    let mut total: Option<Var> = None;
    for (node, weight) in [(quant, cfg.lambda1), (class, cfg.lambda2), (tv, cfg.lambda3)] {
        if weight == 0.0 {
            continue;
        }
        let term = g.scale(node, T::from_f64(f64::from(weight)));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => return Err(param_err!("all loss weights are zero")),
    };
    Ok(LossNodes {
        total,
        quant,
        class,
        tv,
        logits,
    })
}

/// Logits of a single unperturbed image.
pub fn clean_logits<T: Scalar>(model: &VisionTransformer, x: &Tensor<T>, exec: LinearExec) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::new();
    let params = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = model.forward_graph(&mut g, &params, &[xv], exec)?;
    Ok(g.value(out.logits).clone())
}

/// Loss value and gradient with respect to `δ` for one image.
#[derive(Clone, Debug)]
pub struct LossEval<T: Scalar> {
    pub loss: LossBreakdown,
    pub grad: Tensor<T>,
    pub traces: Vec<MatmulTrace>,
    pub logits: Tensor<T>,
}

pub fn loss_and_gradient<T: Scalar>(
    model: &VisionTransformer,
    x: &Tensor<T>,
    delta: &Tensor<T>,
    clean_logits: &Tensor<T>,
    cfg: &AttackConfig,
    exec: LinearExec,
) -> Result<LossEval<T>> {
    let mut g = Graph::<T>::new();
    let xv = g.constant(x.clone());
    let dv = g.param(delta.clone());
    let nodes = total_loss_node(&mut g, model, xv, dv, clean_logits, cfg, exec)?;
    let value = |v: Var| g.value(v).item().map(|t| t.to_f64());
    let loss = LossBreakdown {
        quant: value(nodes.quant)?,
        class: value(nodes.class)?,
        tv: value(nodes.tv)?,
        total: value(nodes.total)?,
    };
    let logits = g.value(nodes.logits).clone();
    let mut grads = g.backward(nodes.total)?;
    let grad = grads
        .take(dv)
        .unwrap_or_else(|| Tensor::zeros(delta.shape().to_vec()));
    Ok(LossEval {
        loss,
        grad,
        traces: g.take_traces(),
        logits,
    })
}

/// Loss terms of `x + δ` against the clean prediction, on the
/// mixed-precision model.
pub fn total_loss(model: &VisionTransformer, x: &Tensor, delta: &Tensor, cfg: &AttackConfig) -> Result<LossBreakdown> {
    let exec = crate::attack::attack_exec(model)?;
    let clean = clean_logits(model, x, exec)?;
    Ok(loss_and_gradient(model, x, delta, &clean, cfg, exec)?.loss)
}
