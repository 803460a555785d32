use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::apply_delta;
use crate::error::{param_err, shape_err, Result};
use crate::quantlinear::{MatmulTrace, OutlierPolicy};
use crate::tensor::Tensor;
use crate::vit::{predictions, stack_images, VisionTransformer};

/// Analytic stand-in for time and energy: weighted MAC and byte counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub int8_mac_cost: f64,
    pub f16_mac_cost: f64,
    pub byte_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            int8_mac_cost: 1.0,
            f16_mac_cost: 4.0,
            byte_cost: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let costs = [self.int8_mac_cost, self.f16_mac_cost, self.byte_cost];
        if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(param_err!("costs must be finite and non-negative: {costs:?}"));
        }
        Ok(())
    }

    pub fn units(&self, f16_macs: u64, int8_macs: u64, bytes: u64) -> f64 {
        f16_macs as f64 * self.f16_mac_cost + int8_macs as f64 * self.int8_mac_cost + bytes as f64 * self.byte_cost
    }
}

/// Aggregated counters of one evaluation condition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    /// Outlier columns summed over layers and images.
    pub outlier_count: u64,
    pub f16_macs: u64,
    pub int8_macs: u64,
    pub bytes_moved: u64,
    pub cost_units: f64,
    /// Share of images whose prediction matches the clean prediction.
    pub accuracy_preserved_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock_ms: Option<f64>,
}

impl ConditionStats {
    fn add_traces(&mut self, traces: &[MatmulTrace]) {
        for t in traces {
            self.outlier_count += t.outlier_count() as u64;
            self.f16_macs += t.f16_macs;
            self.int8_macs += t.int8_macs;
            self.bytes_moved += t.bytes_moved;
        }
    }

    fn finish(&mut self, cost: &CostModel) {
        self.cost_units = cost.units(self.f16_macs, self.int8_macs, self.bytes_moved);
    }
}

/// `condition / reference` per metric; absent where the reference is zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub outlier_count: Option<f64>,
    pub f16_macs: Option<f64>,
    pub int8_macs: Option<f64>,
    pub bytes_moved: Option<f64>,
    pub cost_units: Option<f64>,
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| a / b)
}

impl Ratios {
    pub fn of(cond: &ConditionStats, reference: &ConditionStats) -> Self {
        Self {
            outlier_count: ratio(cond.outlier_count as f64, reference.outlier_count as f64),
            f16_macs: ratio(cond.f16_macs as f64, reference.f16_macs as f64),
            int8_macs: ratio(cond.int8_macs as f64, reference.int8_macs as f64),
            bytes_moved: ratio(cond.bytes_moved as f64, reference.bytes_moved as f64),
            cost_units: ratio(cond.cost_units, reference.cost_units),
        }
    }

    /// Relative change of the cost, `ratio - 1`.
    pub fn cost_overhead(&self) -> Option<f64> {
        self.cost_units.map(|r| r - 1.0)
    }
}

/// Clean, random-noise and adversarial conditions over one image set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub clean: ConditionStats,
    pub random: ConditionStats,
    pub adversarial: ConditionStats,
    /// Adversarial over clean.
    pub ratios: Ratios,
    /// Random over clean.
    pub random_ratios: Ratios,
}

/// Settings shared by the evaluation routines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub cost: CostModel,
    pub policy: OutlierPolicy,
    /// L∞ budget of the random-noise condition.
    pub noise_epsilon: f32,
    pub noise_seed: u64,
    /// Record wall-clock time per condition. Off by default so reports are
    /// reproducible byte for byte.
    pub timing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cost: CostModel::default(),
            policy: OutlierPolicy::Unlimited,
            noise_epsilon: 0.8,
            noise_seed: 0,
            timing: false,
        }
    }
}

fn split_batch(images: &Tensor) -> Result<Vec<Tensor>> {
    if images.rank() != 4 {
        return Err(shape_err!("expected B x C x H x W images, got {:?}", images.shape()));
    }
    let shape = images.shape()[1..].to_vec();
    let n: usize = shape.iter().product();
    Ok(images
        .data()
        .chunks_exact(n.max(1))
        .map(|c| Tensor::from_parts(shape.clone(), c.to_vec()))
        .collect())
}

/// Applies a shared `C x H x W` perturbation or per-image `B x C x H x W`
/// perturbations, clamping to `[0, 1]`.
pub fn perturb(images: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if delta.rank() == 4 {
        if delta.shape() != images.shape() {
            return Err(shape_err!(
                "per-image perturbations {:?} do not match images {:?}",
                delta.shape(),
                images.shape()
            ));
        }
        let mut out = images.clone();
        for (x, &d) in out.data_mut().iter_mut().zip(delta.data()) {
            *x = (*x + d).clamp(0.0, 1.0);
        }
        return Ok(out);
    }
    apply_delta(images, delta)
}

/// Uniform `U(-1, 1)` noise scaled to `epsilon`, one draw per pixel.
pub fn uniform_noise(shape: &[usize], epsilon: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..=1.0) * epsilon).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Runs every image through the model on its own and aggregates the traces.
/// Returns the stats and the predictions.
pub fn evaluate_condition(
    model: &VisionTransformer,
    images: &Tensor,
    reference: Option<&[usize]>,
    opts: &EvalOptions,
) -> Result<(ConditionStats, Vec<usize>)> {
    let start = Instant::now();
    let mut stats = ConditionStats::default();
    let mut preds = Vec::new();
    for img in split_batch(images)? {
        let x = stack_images(&[img])?;
        let out = model.forward(&x, false, opts.policy)?;
        stats.add_traces(&out.traces);
        preds.extend(predictions(&out.logits));
    }
    stats.finish(&opts.cost);
    stats.accuracy_preserved_fraction = match reference {
        Some(r) if !preds.is_empty() => {
            preds.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64
        }
        _ => 1.0,
    };
    if opts.timing {
        stats.wall_clock_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((stats, preds))
}

/// Compares clean images, images with random noise of the same L∞ budget,
/// and adversarially perturbed images. Predictions on the clean images are
/// the reference labels.
pub fn evaluate_baselines(
    model: &VisionTransformer,
    images: &Tensor,
    delta: &Tensor,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.cost.validate()?;
    let (clean, clean_preds) = evaluate_condition(model, images, None, opts)?;
    let noise = uniform_noise(images.shape(), opts.noise_epsilon, opts.noise_seed);
    let noisy = perturb(images, &noise)?;
    let (random, _) = evaluate_condition(model, &noisy, Some(&clean_preds), opts)?;
    let adv_images = perturb(images, delta)?;
    let (adversarial, _) = evaluate_condition(model, &adv_images, Some(&clean_preds), opts)?;
    Ok(EvalReport {
        images: clean_preds.len(),
        ratios: Ratios::of(&adversarial, &clean),
        random_ratios: Ratios::of(&random, &clean),
        clean,
        random,
        adversarial,
    })
}

/// Evaluates a perturbation crafted on another model. Identical to
/// [`evaluate_baselines`] on the target model; kept as a separate entry
/// point for transfer and ensemble experiments.
pub fn transfer_eval(
    delta: &Tensor,
    target: &VisionTransformer,
    images: &Tensor,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    evaluate_baselines(target, images, delta, opts)
}

/// One batch size of the contamination experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub batch_size: usize,
    pub clean: ConditionStats,
    pub contaminated: ConditionStats,
    /// Contaminated over clean.
    pub ratios: Ratios,
}

impl BatchReport {
    /// Relative cost increase caused by the adversarial image.
    pub fn cost_overhead(&self) -> Option<f64> {
        self.ratios.cost_overhead()
    }
}

fn batch_stats(model: &VisionTransformer, batch: &Tensor, opts: &EvalOptions) -> Result<(ConditionStats, Vec<usize>)> {
    let start = Instant::now();
    let out = model.forward(batch, false, opts.policy)?;
    let mut stats = ConditionStats::default();
    stats.add_traces(&out.traces);
    stats.finish(&opts.cost);
    if opts.timing {
        stats.wall_clock_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((stats, predictions(&out.logits)))
}

/// For each batch size `B`, runs the first `B` clean images as one batch
/// and again with slot 0 replaced by `adv_image`. Pass the clean version of
/// the attacked image first so that `B = 1` reproduces the single-image
/// overhead.
pub fn batch_contamination(
    model: &VisionTransformer,
    clean_images: &Tensor,
    adv_image: &Tensor,
    batch_sizes: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<BatchReport>> {
    opts.cost.validate()?;
    let pool = split_batch(clean_images)?;
    if adv_image.shape() != model.config().image_shape() {
        return Err(shape_err!("adversarial image shape {:?}", adv_image.shape()));
    }
    let mut reports = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        if b == 0 || b > pool.len() {
            return Err(param_err!("batch size {b} outside 1..={}", pool.len()));
        }
        let mut imgs = pool[..b].to_vec();
        let (clean, clean_preds) = batch_stats(model, &stack_images(&imgs)?, opts)?;
        imgs[0] = adv_image.clone();
        let (mut contaminated, preds) = batch_stats(model, &stack_images(&imgs)?, opts)?;
        contaminated.accuracy_preserved_fraction =
            preds.iter().zip(&clean_preds).filter(|(a, c)| a == c).count() as f64 / b as f64;
        let mut clean = clean;
        clean.accuracy_preserved_fraction = 1.0;
        reports.push(BatchReport {
            batch_size: b,
            ratios: Ratios::of(&contaminated, &clean),
            clean,
            contaminated,
        });
    }
    Ok(reports)
}

/// One outlier policy of the countermeasure sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub policy: OutlierPolicy,
    pub clean: ConditionStats,
    pub adversarial: ConditionStats,
    /// Adversarial over clean under this policy.
    pub ratios: Ratios,
    /// Mean absolute logit difference on the adversarial images between
    /// this policy and the uncapped kernel.
    pub logit_deviation: f64,
    /// Largest `f16_macs / (s · o)` over all layer executions, i.e. the
    /// most columns any single matmul sent to half precision.
    pub max_f16_columns: u64,
}

fn all_logits(model: &VisionTransformer, images: &[Tensor], policy: OutlierPolicy) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for img in images {
        let x = stack_images(std::slice::from_ref(img))?;
        out.extend_from_slice(model.forward(&x, false, policy)?.logits.data());
    }
    Ok(out)
}

fn max_f16_columns(model: &VisionTransformer, images: &[Tensor], policy: OutlierPolicy) -> Result<u64> {
    let mut worst = 0;
    for img in images {
        let x = stack_images(std::slice::from_ref(img))?;
        for t in model.forward(&x, false, policy)?.traces {
            if let Some(cols) = t.f16_macs.checked_div((t.s_rows * t.o) as u64) {
                worst = worst.max(cols);
            }
        }
    }
    Ok(worst)
}

/// Re-evaluates clean and adversarial images under each outlier policy.
pub fn countermeasure_sweep(
    model: &VisionTransformer,
    images: &Tensor,
    delta: &Tensor,
    policies: &[OutlierPolicy],
    opts: &EvalOptions,
) -> Result<Vec<SweepPoint>> {
    opts.cost.validate()?;
    let adv = perturb(images, delta)?;
    let adv_list = split_batch(&adv)?;
    let reference = all_logits(model, &adv_list, OutlierPolicy::Unlimited)?;
    let (_, clean_preds) = evaluate_condition(model, images, None, opts)?;
    let mut points = Vec::with_capacity(policies.len());
    for &policy in policies {
        let o = EvalOptions { policy, ..*opts };
        let (clean, _) = evaluate_condition(model, images, None, &o)?;
        let (adversarial, _) = evaluate_condition(model, &adv, Some(&clean_preds), &o)?;
        let logits = all_logits(model, &adv_list, policy)?;
        let logit_deviation = if logits.is_empty() {
            0.0
        } else {
            logits
                .iter()
                .zip(&reference)
                .map(|(a, b)| f64::from((a - b).abs()))
                .sum::<f64>()
                / logits.len() as f64
        };
        points.push(SweepPoint {
            policy,
            ratios: Ratios::of(&adversarial, &clean),
            clean,
            adversarial,
            logit_deviation,
            max_f16_columns: max_f16_columns(model, &adv_list, policy)?,
        });
    }
    Ok(points)
}
