//! Single-image attack: optimizes a perturbation for one held-out image and
//! compares clean, random-noise and adversarial outlier counts and cost.
//! Usage: `single_attack [weights.qtvw]`.

mod common;

use outlier_sponge::attack::{run_attack, AttackConfig, AttackScope};
use outlier_sponge::harness::{evaluate_baselines, EvalOptions};
use outlier_sponge::vit::stack_images;
use outlier_sponge::Result;

fn main() -> Result<()> {
    let (model, test) = common::model_and_test_set(1)?;
    let image = test.image(0);
    let cfg = AttackConfig::default();
    let outcome = run_attack(&[&model], &AttackScope::single(image.clone())?, &cfg)?;
    for r in outcome.history.iter().step_by(50) {
        println!(
            "iter {:3}: alpha {:.5} loss {:9.2} (quant {:9.2}, class {:.3}, tv {:.3}) outliers {}",
            r.iteration, r.alpha, r.total_loss, r.quant_loss, r.class_loss, r.tv_loss, r.outliers
        );
    }
    let images = stack_images(&[image])?;
    let report = evaluate_baselines(&model, &images, &outcome.perturbation.delta, &EvalOptions::default())?;
    for (name, s) in [("clean", &report.clean), ("random", &report.random), ("adversarial", &report.adversarial)] {
        println!(
            "{name:>11}: outliers {:3}, f16 MACs {:8}, cost {:.0}, prediction kept {}",
            s.outlier_count, s.f16_macs, s.cost_units, s.accuracy_preserved_fraction
        );
    }
    println!("outlier ratio {:?}, cost overhead {:?}", report.ratios.outlier_count, report.ratios.cost_overhead());
    Ok(())
}
