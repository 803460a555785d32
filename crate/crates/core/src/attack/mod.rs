//! Perturbations that push a quantized model's hidden states past the
//! outlier threshold, so that more of every matmul runs in half precision.
//!
//! The optimizer is projected signed-gradient descent on
//! `λ1·L_quant + λ2·L_class + λ3·L_TV` (see [`loss`] for the terms) with a
//! cosine step schedule and warm restarts. The perturbation is kept inside
//! the L∞ ball of radius `ε` and inside the valid pixel range of every
//! image it is optimized on.
//!
//! ```no_run
//! use outlier_sponge::attack::{run_attack, AttackConfig, AttackScope};
//! use outlier_sponge::vit::{ViTConfig, VisionTransformer};
//! use outlier_sponge::Tensor;
//!
//! let model = VisionTransformer::init_random(&ViTConfig::default(), 0)?;
//! let image = Tensor::full(vec![3, 32, 32], 0.5);
//! let outcome = run_attack(&[&model], &AttackScope::single(image)?, &AttackConfig::default())?;
//! assert!(outcome.perturbation.linf() <= 0.8);
//! # Ok::<(), outlier_sponge::Error>(())
//! ```

mod config;
pub mod loss;
mod perturbation;
mod pgd;
mod run;

pub use config::{AttackConfig, AttackScope, Variant};
pub use loss::{
    class_loss, clean_logits, loss_and_gradient, quant_loss, total_loss, total_loss_node, tv_loss, LossBreakdown,
    LossEval, LossNodes,
};
pub use perturbation::{apply_delta, Perturbation, PERTURBATION_MAGIC, PERTURBATION_VERSION};
pub use pgd::{check_feasible, cosine_wr_step, pgd_update};
pub use run::{attack_exec, run_attack, AttackOutcome, IterationRecord};
