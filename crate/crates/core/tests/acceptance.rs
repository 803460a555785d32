//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so every line is printed regardless of outcome;
//! the process exits nonzero if any criterion fails. The shared toy models
//! and attacks are built once and reused across criteria.

mod common;

use std::time::Instant;

use common::gradcases::{check_case, primitive_cases};
use outlier_sponge::attack::{clean_logits, cosine_wr_step, loss_and_gradient, AttackConfig};
use outlier_sponge::autograd::{finite_diff_check_excluding, kink_coordinates, LinearExec};
use outlier_sponge::harness::{
    attack_each, batch_contamination, countermeasure_sweep, evaluate_baselines, evaluate_condition,
    generate_toy_dataset, perturb, transfer_eval, uniform_noise, EvalOptions, SingleAttacks,
};
use outlier_sponge::quantlinear::{
    extract_outliers, mixed_matmul, OutlierPolicy, QuantLinearLayer, QuantSettings, QuantThreshold,
};
use outlier_sponge::tensor::matmul_ref;
use outlier_sponge::vit::{
    predictions, stack_images, train_toy, Dataset, ToyDatasetSpec, TrainConfig, ViTConfig, VisionTransformer,
};
use outlier_sponge::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const ATTACKED_IMAGES: usize = 20;
const MODEL_SEEDS: [u64; 2] = [1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

/// Everything the end-to-end criteria share.
struct Fixture {
    test: Dataset,
    models: Vec<VisionTransformer>,
    /// First `ATTACKED_IMAGES` held-out images.
    images: Tensor,
    /// Single-image attacks on model 0 with the default weights.
    default: SingleAttacks,
    attack_secs: f64,
    /// Same images and model with the classification weight set to zero.
    no_class: SingleAttacks,
    /// Single-image attacks against both models.
    ensemble: SingleAttacks,
}

fn build_fixture() -> Result<Fixture> {
    let data = generate_toy_dataset(&ToyDatasetSpec::default())?;
    let (train, test) = data.split(0.8);
    let mut models = Vec::new();
    for seed in MODEL_SEEDS {
        let t = Instant::now();
        let mut m = VisionTransformer::init_random(&ViTConfig::default(), seed)?;
        train_toy(&mut m, &train, &TrainConfig { seed, ..TrainConfig::default() })?;
        println!("  trained model seed {seed} in {:.0} s", t.elapsed().as_secs_f64());
        models.push(m);
    }
    let idx: Vec<usize> = (0..ATTACKED_IMAGES).collect();
    let images = test.subset(&idx).images().clone();

    let cfg = AttackConfig::default();
    let t = Instant::now();
    let default = attack_each(&[&models[0]], &images, &cfg)?;
    let attack_secs = t.elapsed().as_secs_f64();
    let no_class = attack_each(&[&models[0]], &images, &AttackConfig { lambda2: 0.0, ..cfg.clone() })?;
    let ensemble = attack_each(&[&models[0], &models[1]], &images, &cfg)?;
    println!("  attacks done ({attack_secs:.0} s for the {ATTACKED_IMAGES} default single-image runs)");
    Ok(Fixture {
        test,
        models,
        images,
        default,
        attack_secs,
        no_class,
        ensemble,
    })
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

fn one_image(images: &Tensor, i: usize) -> Result<Tensor> {
    let per: usize = images.shape()[1..].iter().product();
    let x = Tensor::new(images.shape()[1..].to_vec(), images.data()[i * per..(i + 1) * per].to_vec())?;
    stack_images(&[x])
}

/// Outlier count and cost of every image evaluated on its own.
fn per_image(model: &VisionTransformer, images: &Tensor) -> Result<Vec<(u64, f64)>> {
    let opts = EvalOptions::default();
    (0..images.shape()[0])
        .map(|i| {
            let (s, _) = evaluate_condition(model, &one_image(images, i)?, None, &opts)?;
            Ok((s.outlier_count, s.cost_units))
        })
        .collect()
}

fn criterion_1() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let settings = QuantSettings::new(6.0)?;
    let (mut abs_err, mut abs_ref, mut any_outlier) = (0.0f64, 0.0f64, false);
    for t in 0..50 {
        let x = gaussian_tensor(&mut rng, &[64, 64]);
        let w = gaussian_tensor(&mut rng, &[64, 64]).map(|v| v * 0.1);
        let layer = QuantLinearLayer::new(format!("g{t}"), w.clone(), None)?;
        let (y, trace) = mixed_matmul(&x, &layer, &settings)?;
        any_outlier |= trace.outlier_count() > 0;
        let r = matmul_ref(&x, &w)?;
        for (a, b) in y.data().iter().zip(r.data()) {
            abs_err += f64::from((a - b).abs());
            abs_ref += f64::from(b.abs());
        }
    }
    let mare = abs_err / abs_ref;

    // Planted columns: only they are nonzero, so the kernel output is the
    // half-precision segment alone.
    let mut worst_planted = 0.0f64;
    for t in 0..50 {
        let mut xd = vec![0.0f32; 64 * 64];
        let cols: Vec<usize> = (0..3).map(|_| rng.gen_range(0..64)).collect();
        for &c in &cols {
            for r in 0..64 {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                xd[r * 64 + c] = sign * rng.gen_range(0.5f32..1.0) * 50.0;
            }
        }
        let x = Tensor::new(vec![64, 64], xd)?;
        let w = gaussian_tensor(&mut rng, &[64, 64]).map(|v| v * 0.1);
        let layer = QuantLinearLayer::new(format!("p{t}"), w.clone(), None)?;
        let (y, trace) = mixed_matmul(&x, &layer, &settings)?;
        let mut expected = cols.clone();
        expected.sort_unstable();
        expected.dedup();
        if trace.outlier_columns != expected {
            return verdict(false, format!("planted columns {expected:?} detected as {:?}", trace.outlier_columns));
        }
        let r = matmul_ref(&x, &w)?;
        let diff = y.data().iter().zip(r.data()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        worst_planted = worst_planted.max(f64::from(diff / r.max_abs()));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mare <= 0.03 && worst_planted <= 1e-3 && !any_outlier && secs < 10.0,
        format!(
            "mean abs relative error {:.3}% (<= 3%), planted-column error {:.4}% (<= 0.1%), {secs:.2} s (< 10 s)",
            100.0 * mare,
            100.0 * worst_planted
        ),
    )
}

fn criterion_2() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut violations = 0;
    for t in 0..1000 {
        let (s, h, o) = (rng.gen_range(1..9), rng.gen_range(1..17), rng.gen_range(1..9));
        let scale = rng.gen_range(0.5f32..10.0);
        let x = gaussian_tensor(&mut rng, &[s, h]).map(|v| v * scale);
        let tau1 = rng.gen_range(0.1f32..8.0);
        let tau2 = tau1 + rng.gen_range(0.01f32..8.0);
        let o1 = extract_outliers(&x, QuantThreshold::new(tau1)?)?;
        let o2 = extract_outliers(&x, QuantThreshold::new(tau2)?)?;
        if !o2.iter().all(|c| o1.contains(c)) {
            violations += 1;
        }
        let w = gaussian_tensor(&mut rng, &[h, o]);
        let layer = QuantLinearLayer::new(format!("t{t}"), w, None)?;
        let (_, trace) = mixed_matmul(&x, &layer, &QuantSettings::new(tau1)?)?;
        if trace.f16_macs + trace.int8_macs != (s * h * o) as u64 {
            violations += 1;
        }
    }
    verdict(violations == 0, format!("{violations} violations in 1000 trials"))
}

fn criterion_3() -> Result<Verdict> {
    let mut worst = 0.0f64;
    for case in primitive_cases() {
        for seed in 0..10 {
            worst = worst.max(check_case(&case, seed, 1e-5).max_rel);
        }
    }

    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        hidden_dim: 16,
        mlp_dim: 32,
        num_heads: 2,
        num_layers: 2,
        num_classes: 3,
        ..ViTConfig::default()
    };
    let model = VisionTransformer::init_random(&cfg, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let shape = [3, 8, 8];
    let n = 3 * 64;
    let x = Tensor::<f64>::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.2..0.8)).collect())?;
    let delta = Tensor::<f64>::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect())?;
    let acfg = AttackConfig { x_target: 3.0, ..AttackConfig::default() };
    let exec = LinearExec::FullPrecision;
    let clean = clean_logits(&model, &x, exec)?;
    let analytic = loss_and_gradient(&model, &x, &delta, &clean, &acfg, exec)?.grad;
    let f = |d: &Tensor<f64>| loss_and_gradient(&model, &x, d, &clean, &acfg, exec).unwrap().loss.total;
    let kinks = kink_coordinates(f, &delta, 1e-5, 0.1);
    let report = finite_diff_check_excluding(f, &analytic, &delta, 1e-5, &kinks);
    verdict(
        worst <= 1e-4 && report.max_rel <= 1e-4 && report.checked > n / 2,
        format!(
            "primitives {worst:.2e}, end-to-end total loss {:.2e} over {} coordinates ({} kinks excluded), bound 1e-4",
            report.max_rel, report.checked, report.excluded
        ),
    )
}

fn criterion_4(fx: &Fixture) -> Result<Verdict> {
    let mut details = Vec::new();
    let mut pass = true;
    for (m, seed) in fx.models.iter().zip(MODEL_SEEDS) {
        let (mut correct, mut agree) = (0, 0);
        let n = fx.test.len();
        for start in (0..n).step_by(50) {
            let idx: Vec<usize> = (start..(start + 50).min(n)).collect();
            let part = fx.test.subset(&idx);
            let q = m.predict(part.images())?;
            let full = predictions(&m.forward_with(part.images(), false, LinearExec::FullPrecision)?.logits);
            correct += q.iter().zip(part.labels()).filter(|(a, b)| a == b).count();
            agree += q.iter().zip(&full).filter(|(a, b)| a == b).count();
        }
        let (acc, agr) = (correct as f64 / n as f64, agree as f64 / n as f64);
        pass &= acc >= 0.8 && agr >= 0.99;
        details.push(format!("seed {seed}: accuracy {acc:.3} (>= 0.8), agreement {agr:.3} (>= 0.99)"));
    }
    verdict(pass, details.join("; "))
}

fn criterion_5(fx: &Fixture) -> Result<Verdict> {
    let m = &fx.models[0];
    let clean = per_image(m, &fx.images)?;
    let adv = per_image(m, &perturb(&fx.images, &fx.default.deltas)?)?;
    let mut successes = 0;
    let mut cost_violations = 0;
    for ((c, cc), (a, ac)) in clean.iter().zip(&adv) {
        if *a >= 2 * c && a > c {
            successes += 1;
            if ac <= cc {
                cost_violations += 1;
            }
        }
    }
    let frac = successes as f64 / ATTACKED_IMAGES as f64;
    let counts: Vec<String> = clean.iter().zip(&adv).map(|(c, a)| format!("{}->{}", c.0, a.0)).collect();
    verdict(
        frac >= 0.8 && cost_violations == 0 && fx.attack_secs < 1800.0,
        format!(
            "{successes}/{ATTACKED_IMAGES} images at >= 2x outliers (need >= 80%), {cost_violations} without a cost increase, {:.0} s; counts {}",
            fx.attack_secs,
            counts.join(" ")
        ),
    )
}

fn criterion_6(fx: &Fixture) -> Result<Verdict> {
    let m = &fx.models[0];
    let opts = EvalOptions::default();
    let with = evaluate_baselines(m, &fx.images, &fx.default.deltas, &opts)?.adversarial.accuracy_preserved_fraction;
    let without = evaluate_baselines(m, &fx.images, &fx.no_class.deltas, &opts)?.adversarial.accuracy_preserved_fraction;
    verdict(
        with >= 0.7 && without < with,
        format!("preserved {with:.2} with the class term (>= 0.70), {without:.2} without (must be lower)"),
    )
}

fn criterion_7(fx: &Fixture) -> Result<Verdict> {
    let m = &fx.models[0];
    let opts = EvalOptions::default();
    let report = evaluate_baselines(m, &fx.images, &fx.default.deltas, &opts)?;
    let clean = report.clean.outlier_count as f64;
    let change = (report.random.outlier_count as f64 - clean).abs() / clean.max(1.0);
    let noise = uniform_noise(fx.images.shape(), opts.noise_epsilon, opts.noise_seed);
    let random = per_image(m, &perturb(&fx.images, &noise)?)?;
    let adv = per_image(m, &perturb(&fx.images, &fx.default.deltas)?)?;
    let exceed = random.iter().zip(&adv).filter(|(r, a)| r.0 > a.0).count();
    verdict(
        change < 0.1 && exceed == 0,
        format!(
            "random noise changes outliers by {:.1}% (< 10%: {} -> {}), exceeds adversarial on {exceed} images",
            100.0 * change,
            report.clean.outlier_count,
            report.random.outlier_count
        ),
    )
}

fn criterion_8(fx: &Fixture) -> Result<Verdict> {
    // Every attack above ran with the feasibility check after each step; an
    // infeasible iterate would have aborted the fixture.
    let eps = AttackConfig::default().epsilon;
    let histories = fx.default.histories.iter().chain(&fx.no_class.histories).chain(&fx.ensemble.histories);
    let (mut iterations, mut worst) = (0usize, 0.0f32);
    for h in histories {
        for r in h {
            iterations += 1;
            worst = worst.max(r.linf);
        }
    }
    let mut box_ok = true;
    for d in [&fx.default.deltas, &fx.no_class.deltas, &fx.ensemble.deltas] {
        box_ok &= d.max_abs() <= eps;
        for (x, dv) in fx.images.data().iter().zip(d.data()) {
            box_ok &= (0.0..=1.0).contains(&(x + dv));
        }
    }
    let a0 = cosine_wr_step(0, 0.02, 1e-5, 100);
    let at0 = cosine_wr_step(100, 0.02, 1e-5, 100);
    verdict(
        worst <= eps && box_ok && a0 == 0.02 && at0 == 1e-5,
        format!("{iterations} checked iterations, max |delta| {worst:.4} (<= {eps}), alpha(0) = {a0}, alpha(T0) = {at0}"),
    )
}

fn criterion_9(fx: &Fixture) -> Result<Verdict> {
    let m = &fx.models[0];
    let adv = perturb(&one_image(&fx.images, 0)?, &one_image(&fx.default.deltas, 0)?)?;
    let adv = Tensor::new(adv.shape()[1..].to_vec(), adv.data().to_vec())?;
    let idx: Vec<usize> = (0..16).collect();
    let pool = fx.test.subset(&idx);
    let reports = batch_contamination(m, pool.images(), &adv, &[2, 16], &EvalOptions::default())?;
    let (b2, b16) = (reports[0].cost_overhead(), reports[1].cost_overhead());
    let pass = matches!((b2, b16), (Some(a), Some(b)) if a > b);
    verdict(pass, format!("cost overhead B=2 {b2:?}, B=16 {b16:?}"))
}

fn criterion_10(fx: &Fixture) -> Result<Verdict> {
    let m = &fx.models[0];
    let adv = perturb(&fx.images, &fx.default.deltas)?;
    let mut violations = 0;
    let mut checked = 0;
    for cap in [0, 1, 4, 8, 16] {
        for i in 0..ATTACKED_IMAGES {
            for imgs in [&adv, &fx.images] {
                let out = m.forward(&one_image(imgs, i)?, false, OutlierPolicy::Capped(cap))?;
                for t in &out.traces {
                    checked += 1;
                    if t.f16_macs > (t.s_rows * cap * t.o) as u64 {
                        violations += 1;
                    }
                }
            }
        }
    }
    let cap = m.config().hidden_dim / 8;
    let sweep = countermeasure_sweep(
        m,
        &fx.images,
        &fx.default.deltas,
        &[OutlierPolicy::Capped(cap), OutlierPolicy::Unlimited],
        &EvalOptions::default(),
    )?;
    let (capped, unlimited) = (sweep[0].ratios.cost_units, sweep[1].ratios.cost_units);
    let pass = violations == 0 && matches!((capped, unlimited), (Some(c), Some(u)) if c < u);
    verdict(
        pass,
        format!("{violations} of {checked} layer calls over the cap; attacked cost ratio cap {cap}: {capped:?}, unlimited: {unlimited:?}"),
    )
}

fn criterion_11(fx: &Fixture) -> Result<Verdict> {
    let opts = EvalOptions::default();
    let (a, b) = (&fx.models[0], &fx.models[1]);
    let ens_a = evaluate_baselines(a, &fx.images, &fx.ensemble.deltas, &opts)?.ratios.outlier_count;
    let ens_b = evaluate_baselines(b, &fx.images, &fx.ensemble.deltas, &opts)?.ratios.outlier_count;
    let own = evaluate_baselines(a, &fx.images, &fx.default.deltas, &opts)?.ratios.outlier_count;
    let other = transfer_eval(&fx.default.deltas, b, &fx.images, &opts)?.ratios.outlier_count;
    let at_least = |r: Option<f64>| r.is_some_and(|v| v >= 1.5);
    let pass = at_least(ens_a) && at_least(ens_b) && matches!((other, own), (Some(o), Some(s)) if o < s);
    verdict(
        pass,
        format!("ensemble outlier ratio {ens_a:?} / {ens_b:?} (>= 1.5 each); single-model delta own {own:?}, other model {other:?}"),
    )
}

fn report(n: usize, name: &str, result: Result<Verdict>, failures: &mut usize) {
    match result {
        Ok(v) => {
            if !v.pass {
                *failures += 1;
            }
            println!("{} criterion {n} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        }
        Err(e) => {
            *failures += 1;
            println!("FAIL criterion {n} ({name}): error: {e}");
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failures = 0;
    report(1, "quantization fidelity", criterion_1(), &mut failures);
    report(2, "threshold monotonicity and MAC conservation", criterion_2(), &mut failures);
    report(3, "gradient correctness", criterion_3(), &mut failures);

    println!("  building toy models and attacks...");
    match build_fixture() {
        Ok(fx) => {
            report(4, "quantized-model parity", criterion_4(&fx), &mut failures);
            report(5, "attack effectiveness", criterion_5(&fx), &mut failures);
            report(6, "classification preservation", criterion_6(&fx), &mut failures);
            report(7, "random baseline", criterion_7(&fx), &mut failures);
            report(8, "PGD invariants", criterion_8(&fx), &mut failures);
            report(9, "batch contamination", criterion_9(&fx), &mut failures);
            report(10, "outlier cap countermeasure", criterion_10(&fx), &mut failures);
            report(11, "ensemble and transfer", criterion_11(&fx), &mut failures);
        }
        Err(e) => {
            for n in 4..=11 {
                println!("FAIL criterion {n}: fixture error: {e}");
            }
            failures += 8;
        }
    }
    println!("acceptance: {} of 11 criteria passed", 11 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
