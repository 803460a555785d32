//! Loss ablation: the outlier term alone, plus the classification term,
//! plus total variation. Reports outlier gain, prediction preservation and
//! perturbation smoothness for each stage. Usage: `loss_ablation [weights.qtvw]`.

mod common;

use outlier_sponge::attack::{tv_loss, AttackConfig};
use outlier_sponge::harness::{ablation_stages, attack_each, evaluate_baselines, EvalOptions};
use outlier_sponge::{Result, Tensor};

fn main() -> Result<()> {
    let (model, test) = common::model_and_test_set(1)?;
    let idx: Vec<usize> = (0..8).collect();
    let images = test.subset(&idx).images().clone();
    for stage in ablation_stages(&AttackConfig::default()) {
        let attacks = attack_each(&[&model], &images, &stage.config)?;
        let r = evaluate_baselines(&model, &images, &attacks.deltas, &EvalOptions::default())?;
        let per: usize = attacks.deltas.shape()[1..].iter().product();
        let mut tv = 0.0;
        for d in attacks.deltas.data().chunks_exact(per) {
            tv += tv_loss(&Tensor::new(attacks.deltas.shape()[1..].to_vec(), d.to_vec())?)?;
        }
        println!(
            "{:>15}: outlier ratio {:?}, preserved {:.2}, mean TV {:.1}",
            stage.name,
            r.ratios.outlier_count,
            r.adversarial.accuracy_preserved_fraction,
            tv / idx.len() as f64
        );
    }
    Ok(())
}
