use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    check_feasible, clean_logits, cosine_wr_step, loss_and_gradient, pgd_update, AttackConfig, AttackScope,
    LossBreakdown, Perturbation,
};
use crate::autograd::LinearExec;
use crate::error::{param_err, shape_err, Result};
use crate::quantlinear::{OutlierPolicy, QuantSettings};
use crate::tensor::Tensor;
use crate::vit::VisionTransformer;

/// What one iteration saw, before its update was applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Index of the model used this iteration.
    pub model: usize,
    pub alpha: f64,
    /// Mean over the iteration's images.
    pub total_loss: f64,
    pub quant_loss: f64,
    pub class_loss: f64,
    pub tv_loss: f64,
    /// Outlier columns summed over layers and the iteration's images.
    pub outliers: usize,
    /// `‖δ‖∞` after the update.
    pub linf: f32,
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub perturbation: Perturbation,
    pub history: Vec<IterationRecord>,
}

/// The execution mode an attack sees: the model's mixed-precision kernel at
/// its configured threshold, with no outlier cap.
pub fn attack_exec(model: &VisionTransformer) -> Result<LinearExec> {
    Ok(LinearExec::Mixed(
        QuantSettings::new(model.config().tau)?.with_policy(OutlierPolicy::Unlimited),
    ))
}

/// Optimizes a perturbation against one model, or against an ensemble by
/// drawing one model per iteration.
///
/// Every iteration evaluates a mini-batch of scope images (all of them for a
/// single-image scope), sums the gradients of the total loss with respect
/// to `δ`, and takes one projected signed-gradient step. Feasibility of `δ`
/// is checked after every step and a violation aborts the run.
pub fn run_attack(models: &[&VisionTransformer], scope: &AttackScope, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let first = models.first().ok_or_else(|| param_err!("attack needs at least one model"))?;
    if scope.variant() != cfg.variant {
        return Err(param_err!(
            "scope variant {:?} does not match configured {:?}",
            scope.variant(),
            cfg.variant
        ));
    }
    for m in models {
        if m.config().image_shape() != first.config().image_shape()
            || m.config().image_shape() != scope.image_shape()
        {
            return Err(shape_err!(
                "model input {:?} does not match scope images {:?}",
                m.config().image_shape(),
                scope.image_shape()
            ));
        }
        cfg.validate(m.config().tau)?;
    }

    let images = scope.images();
    let execs = models.iter().map(|m| attack_exec(m)).collect::<Result<Vec<_>>>()?;
    let mut clean: Vec<Vec<Option<Tensor>>> = vec![vec![None; images.len()]; models.len()];
    let shape: [usize; 3] = scope.image_shape().try_into().expect("scope images are rank 3");
    let mut delta = Tensor::zeros(shape.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.iterations);

    for t in 0..cfg.iterations {
        let mi = if models.len() > 1 { rng.gen_range(0..models.len()) } else { 0 };
        let (model, exec) = (models[mi], execs[mi]);

        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut grad = Tensor::zeros(shape.to_vec());
        let mut sums = LossBreakdown::default();
        let mut outliers = 0;
        for &i in &batch {
            let x = &images[i];
            if clean[mi][i].is_none() {
                clean[mi][i] = Some(clean_logits(model, x, exec)?);
            }
            let reference = clean[mi][i].as_ref().expect("filled above");
            let eval = loss_and_gradient(model, x, &delta, reference, cfg, exec)?;
            for (a, g) in grad.data_mut().iter_mut().zip(eval.grad.data()) {
                *a += g;
            }
            sums.quant += eval.loss.quant;
            sums.class += eval.loss.class;
            sums.tv += eval.loss.tv;
            sums.total += eval.loss.total;
            outliers += eval.traces.iter().map(|tr| tr.outlier_count()).sum::<usize>();
        }

        let alpha = cosine_wr_step(t, cfg.alpha_max, cfg.alpha_min, cfg.restart_period);
        delta = pgd_update(&delta, &grad, alpha as f32, cfg.epsilon, images)?;
        check_feasible(&delta, cfg.epsilon, images)?;

        let n = batch.len() as f64;
        history.push(IterationRecord {
            iteration: t,
            model: mi,
            alpha,
            total_loss: sums.total / n,
            quant_loss: sums.quant / n,
            class_loss: sums.class / n,
            tv_loss: sums.tv / n,
            outliers,
            linf: delta.max_abs(),
        });
    }

    Ok(AttackOutcome {
        perturbation: Perturbation {
            delta,
            epsilon: cfg.epsilon,
            variant: cfg.variant,
        },
        history,
    })
}
