//! Capping the number of half-precision columns per matmul: attacked cost
//! ratio against fidelity loss on the logits. Usage: `outlier_cap [weights.qtvw]`.

mod common;

use outlier_sponge::attack::AttackConfig;
use outlier_sponge::harness::{attack_each, countermeasure_sweep, policy_label, EvalOptions};
use outlier_sponge::quantlinear::OutlierPolicy;
use outlier_sponge::Result;

fn main() -> Result<()> {
    let (model, test) = common::model_and_test_set(1)?;
    let idx: Vec<usize> = (0..6).collect();
    let images = test.subset(&idx).images().clone();
    let attacks = attack_each(&[&model], &images, &AttackConfig::default())?;
    let h = model.config().hidden_dim;
    let policies: Vec<OutlierPolicy> = [0, 2, h / 16, h / 8, h / 4]
        .into_iter()
        .map(OutlierPolicy::Capped)
        .chain([OutlierPolicy::Unlimited])
        .collect();
    for p in countermeasure_sweep(&model, &images, &attacks.deltas, &policies, &EvalOptions::default())? {
        println!(
            "{:>9}: cost ratio {:.4}, outliers {:3}, max f16 columns {:2}, logit deviation {:.4}, preserved {:.2}",
            policy_label(p.policy),
            p.ratios.cost_units.unwrap_or(f64::NAN),
            p.adversarial.outlier_count,
            p.max_f16_columns,
            p.logit_deviation,
            p.adversarial.accuracy_preserved_fraction
        );
    }
    Ok(())
}
