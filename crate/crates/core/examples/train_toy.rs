//! Trains the default toy vision transformer on the shapes dataset and
//! saves its weights. Usage: `train_toy [out.qtvw]`.

use std::time::Instant;

use outlier_sponge::autograd::LinearExec;
use outlier_sponge::harness::generate_toy_dataset;
use outlier_sponge::vit::{
    accuracy, predictions, save_weights, train_toy, ToyDatasetSpec, TrainConfig, ViTConfig, VisionTransformer,
};
use outlier_sponge::Result;

fn main() -> Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "toy.qtvw".into());
    let data = generate_toy_dataset(&ToyDatasetSpec::default())?;
    let (train, test) = data.split(0.8);
    let mut model = VisionTransformer::init_random(&ViTConfig::default(), 1)?;
    let start = Instant::now();
    let report = train_toy(&mut model, &train, &TrainConfig { seed: 1, ..TrainConfig::default() })?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {e}: mean loss {l:.4}");
    }
    let quantized = model.predict(test.images())?;
    let full = predictions(&model.forward_with(test.images(), false, LinearExec::FullPrecision)?.logits);
    let agree = quantized.iter().zip(&full).filter(|(a, b)| a == b).count() as f64 / full.len() as f64;
    println!(
        "trained in {:.0} s: held-out accuracy {:.3}, quantized/full-precision agreement {agree:.3}",
        start.elapsed().as_secs_f64(),
        accuracy(&model, &test)?
    );
    save_weights(&model, &out)?;
    println!("weights written to {out}");
    Ok(())
}
