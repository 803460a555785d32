use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, LinearExec};
use crate::error::{param_err, Result};
use crate::quantlinear::QuantSettings;
use crate::tensor::Tensor;

use super::{Dataset, VisionTransformer};

/// Optimizer settings for [`train_toy`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Run the forward pass through the mixed-precision kernel
    /// (straight-through backward). Otherwise train in full precision.
    pub quantized: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
            quantized: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mini-batch cross-entropy, one entry per step.
    pub loss_history: Vec<f32>,
    /// Mean loss of every epoch.
    pub epoch_losses: Vec<f32>,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(model: &VisionTransformer) -> Self {
        let zeros: Vec<Vec<f32>> = (0..model.num_params())
            .map(|i| vec![0.0; model.param(i).len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, model: &mut VisionTransformer, grads: &[Tensor], lr: f32) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut p = model.param(i).clone();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
                *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
            }
            model.set_param(i, p)?;
        }
        Ok(())
    }
}

/// Minimizes cross-entropy on `data` with Adam over shuffled mini-batches.
pub fn train_toy(model: &mut VisionTransformer, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(param_err!("cannot train on an empty dataset"));
    }
    if data.num_classes() > model.config().num_classes {
        return Err(param_err!(
            "dataset has {} classes, model predicts {}",
            data.num_classes(),
            model.config().num_classes
        ));
    }
    if cfg.batch_size == 0 {
        return Err(param_err!("batch size must be positive"));
    }
    let exec = if cfg.quantized {
        LinearExec::Mixed(QuantSettings::new(model.config().tau)?)
    } else {
        LinearExec::FullPrecision
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::<f32>::new();
            let params = model.bind(&mut g, true);
            let imgs: Vec<_> = chunk.iter().map(|&i| g.constant(data.image(i))).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let out = model.forward_graph(&mut g, &params, &imgs, exec)?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            let lv = g.value(loss).item()?;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = params
                .vars()
                .iter()
                .map(|&v| grads.take(v).expect("trainable parameter has a gradient"))
                .collect();
            adam.update(model, &grads, cfg.learning_rate)?;
            report.loss_history.push(lv);
            total += lv;
            batches += 1;
        }
        report.epoch_losses.push(total / batches as f32);
    }
    Ok(report)
}

/// Fraction of `data` classified correctly.
pub fn accuracy(model: &VisionTransformer, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(32) {
        let idx: Vec<usize> = (start..(start + 32).min(data.len())).collect();
        let sub = data.subset(&idx);
        let preds = model.predict(sub.images())?;
        correct += preds.iter().zip(sub.labels()).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f32 / data.len() as f32)
}
