//! Transferability: perturbations crafted on one model, evaluated on a
//! second differently-seeded model, against perturbations crafted on both.
//! Usage: `transfer_ensemble [weights_a.qtvw weights_b.qtvw]`.

use outlier_sponge::attack::AttackConfig;
use outlier_sponge::harness::{attack_each, evaluate_baselines, generate_toy_dataset, transfer_eval, EvalOptions};
use outlier_sponge::vit::{load_weights, train_toy, ToyDatasetSpec, TrainConfig, ViTConfig, VisionTransformer};
use outlier_sponge::Result;

fn main() -> Result<()> {
    let data = generate_toy_dataset(&ToyDatasetSpec::default())?;
    let (train, test) = data.split(0.8);
    let args: Vec<String> = std::env::args().skip(1).collect();
    let models = if args.len() == 2 {
        vec![load_weights(&args[0])?, load_weights(&args[1])?]
    } else {
        eprintln!("training two quick models (pass two .qtvw paths to skip)");
        let mut v = Vec::new();
        for seed in [1, 2] {
            let mut m = VisionTransformer::init_random(&ViTConfig::default(), seed)?;
            train_toy(&mut m, &train, &TrainConfig { epochs: 4, seed, ..TrainConfig::default() })?;
            v.push(m);
        }
        v
    };
    let (a, b) = (&models[0], &models[1]);
    let idx: Vec<usize> = (0..8).collect();
    let images = test.subset(&idx).images().clone();
    let cfg = AttackConfig::default();
    let opts = EvalOptions::default();

    let single = attack_each(&[a], &images, &cfg)?;
    let ensemble = attack_each(&[a, b], &images, &cfg)?;
    let ratio = |r: outlier_sponge::harness::EvalReport| r.ratios.outlier_count.unwrap_or(f64::NAN);
    println!(
        "single-model delta: own {:.2}x, other model {:.2}x",
        ratio(evaluate_baselines(a, &images, &single.deltas, &opts)?),
        ratio(transfer_eval(&single.deltas, b, &images, &opts)?)
    );
    println!(
        "ensemble delta:     model A {:.2}x, model B {:.2}x",
        ratio(evaluate_baselines(a, &images, &ensemble.deltas, &opts)?),
        ratio(evaluate_baselines(b, &images, &ensemble.deltas, &opts)?)
    );
    Ok(())
}
