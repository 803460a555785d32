//! Model setup shared by the examples.

use outlier_sponge::harness::generate_toy_dataset;
use outlier_sponge::vit::{
    accuracy, load_weights, train_toy, Dataset, ToyDatasetSpec, TrainConfig, ViTConfig, VisionTransformer,
};
use outlier_sponge::Result;

/// Held-out toy images and a model: loaded from the first command-line
/// argument if given (as written by the `train_toy` example), otherwise
/// trained briefly with `seed`.
pub fn model_and_test_set(seed: u64) -> Result<(VisionTransformer, Dataset)> {
    let data = generate_toy_dataset(&ToyDatasetSpec::default())?;
    let (train, test) = data.split(0.8);
    let model = match std::env::args().nth(1) {
        Some(path) => load_weights(path)?,
        None => {
            eprintln!("no weights given; training a quick model (pass a .qtvw path to skip)");
            let mut m = VisionTransformer::init_random(&ViTConfig::default(), seed)?;
            train_toy(&mut m, &train, &TrainConfig { epochs: 4, seed, ..TrainConfig::default() })?;
            m
        }
    };
    eprintln!("held-out accuracy {:.3}", accuracy(&model, &test)?);
    Ok((model, test))
}
