//! One adversarial image inside batches of clean images: the extra
//! half-precision columns it forces are paid by every row of the batch.
//! Usage: `batch_contamination [weights.qtvw]`.

mod common;

use outlier_sponge::attack::{run_attack, AttackConfig, AttackScope};
use outlier_sponge::harness::{batch_contamination, EvalOptions};
use outlier_sponge::Result;

fn main() -> Result<()> {
    let (model, test) = common::model_and_test_set(1)?;
    let image = test.image(0);
    let outcome = run_attack(&[&model], &AttackScope::single(image.clone())?, &AttackConfig::default())?;
    let adv = outcome.perturbation.apply(&image)?;
    let idx: Vec<usize> = (0..16).collect();
    let reports = batch_contamination(&model, test.subset(&idx).images(), &adv, &[1, 2, 4, 8, 16], &EvalOptions::default())?;
    for r in reports {
        println!(
            "B={:2}: outliers {:3} -> {:3}, cost overhead {:+.2}%",
            r.batch_size,
            r.clean.outlier_count,
            r.contaminated.outlier_count,
            100.0 * r.cost_overhead().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
