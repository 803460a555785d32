use crate::attack::{run_attack, AttackConfig, AttackScope, IterationRecord, Variant};
use crate::error::{param_err, Result};
use crate::tensor::Tensor;
use crate::vit::{stack_images, Dataset, VisionTransformer};

/// Per-image perturbations from independent single-image attacks.
#[derive(Clone, Debug)]
pub struct SingleAttacks {
    /// `B x C x H x W`, one perturbation per image.
    pub deltas: Tensor,
    pub histories: Vec<Vec<IterationRecord>>,
}

/// Attacks every image of a `B x C x H x W` batch on its own.
pub fn attack_each(models: &[&VisionTransformer], images: &Tensor, cfg: &AttackConfig) -> Result<SingleAttacks> {
    if cfg.variant != Variant::Single {
        return Err(param_err!("attack_each runs the single-image variant"));
    }
    let ds = Dataset::new(images.clone(), vec![0; images.shape().first().copied().unwrap_or(0)], 1)?;
    let mut deltas = Vec::with_capacity(ds.len());
    let mut histories = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let out = run_attack(models, &AttackScope::single(ds.image(i))?, cfg)?;
        deltas.push(out.perturbation.delta);
        histories.push(out.history);
    }
    Ok(SingleAttacks {
        deltas: stack_images(&deltas)?,
        histories,
    })
}

/// One row of the loss ablation: which terms were active and what the
/// resulting perturbations do.
#[derive(Clone, Debug)]
pub struct AblationStage {
    pub name: &'static str,
    pub config: AttackConfig,
}

/// Outlier term only; plus classification; plus total variation.
pub fn ablation_stages(base: &AttackConfig) -> Vec<AblationStage> {
    vec![
        AblationStage {
            name: "quant",
            config: AttackConfig { lambda2: 0.0, lambda3: 0.0, ..base.clone() },
        },
        AblationStage {
            name: "quant+class",
            config: AttackConfig { lambda3: 0.0, ..base.clone() },
        },
        AblationStage {
            name: "quant+class+tv",
            config: base.clone(),
        },
    ]
}
