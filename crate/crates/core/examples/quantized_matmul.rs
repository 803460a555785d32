//! Mixed-precision matmul on a hidden state with two planted outlier
//! columns: which columns go to half precision, the MAC split, and the
//! error against a full-precision product.

use outlier_sponge::quantlinear::{mixed_matmul, OutlierPolicy, QuantLinearLayer, QuantSettings};
use outlier_sponge::tensor::matmul_ref;
use outlier_sponge::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let (s, h, o) = (16, 64, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut x: Vec<f32> = (0..s * h).map(|_| rng.gen_range(-2.0..2.0)).collect();
    for r in 0..s {
        x[r * h + 5] *= 20.0;
        x[r * h + 40] += 9.0;
    }
    let x = Tensor::new(vec![s, h], x)?;
    let w = Tensor::new(vec![h, o], (0..h * o).map(|_| rng.gen_range(-0.2..0.2)).collect())?;
    let layer = QuantLinearLayer::new("demo", w.clone(), None)?;
    let reference = matmul_ref(&x, &w)?;

    for policy in [OutlierPolicy::Unlimited, OutlierPolicy::Capped(1), OutlierPolicy::Capped(0)] {
        let settings = QuantSettings::new(6.0)?.with_policy(policy);
        let (y, trace) = mixed_matmul(&x, &layer, &settings)?;
        let err = y
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!(
            "{policy:?}: f16 columns {:?}, f16 MACs {}, int8 MACs {}, bytes {}, max abs error {err:.4}",
            trace.outlier_columns, trace.f16_macs, trace.int8_macs, trace.bytes_moved
        );
    }
    Ok(())
}
