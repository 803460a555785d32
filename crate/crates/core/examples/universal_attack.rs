//! Universal and class-universal perturbations: one perturbation trained on
//! a set of images, then evaluated on images it was not trained on.
//! Usage: `universal_attack [weights.qtvw]`.

mod common;

use outlier_sponge::attack::{run_attack, AttackConfig, AttackScope, Variant};
use outlier_sponge::harness::{evaluate_baselines, EvalOptions};
use outlier_sponge::Result;

fn main() -> Result<()> {
    let (model, test) = common::model_and_test_set(1)?;
    let train_idx: Vec<usize> = (0..40).collect();
    let eval_idx: Vec<usize> = (40..80).collect();
    let (train, eval) = (test.subset(&train_idx), test.subset(&eval_idx));
    let opts = EvalOptions::default();

    let cfg = AttackConfig { iterations: 300, ..AttackConfig::universal() };
    let images: Vec<_> = (0..train.len()).map(|i| train.image(i)).collect();
    let scope = AttackScope::new(Variant::Universal, images, None)?;
    let uni = run_attack(&[&model], &scope, &cfg)?;
    let r = evaluate_baselines(&model, eval.images(), &uni.perturbation.delta, &opts)?;
    println!(
        "universal: unseen-image outliers {} -> {} (random {}), preserved {:.2}",
        r.clean.outlier_count, r.adversarial.outlier_count, r.random.outlier_count, r.adversarial.accuracy_preserved_fraction
    );

    let class = 0;
    let preds = model.predict(train.images())?;
    let members: Vec<_> = (0..train.len()).filter(|&i| preds[i] == class).map(|i| train.image(i)).collect();
    let labels = vec![class; members.len()];
    let scope = AttackScope::new(Variant::ClassUniversal(class), members, Some(&labels))?;
    let cu = run_attack(&[&model], &scope, &AttackConfig { iterations: 300, ..AttackConfig::class_universal(class) })?;
    let eval_preds = model.predict(eval.images())?;
    let idx: Vec<usize> = (0..eval.len()).filter(|&i| eval_preds[i] == class).collect();
    if idx.is_empty() {
        println!("class-universal: no unseen images of class {class}");
        return Ok(());
    }
    let r = evaluate_baselines(&model, eval.subset(&idx).images(), &cu.perturbation.delta, &opts)?;
    println!(
        "class-universal (class {class}, {} unseen images): outliers {} -> {}",
        idx.len(),
        r.clean.outlier_count,
        r.adversarial.outlier_count
    );
    Ok(())
}
