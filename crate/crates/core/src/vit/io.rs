use std::path::Path;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{VisionTransformer, ViTConfig};

pub const WEIGHT_MAGIC: &[u8; 4] = b"QTVW";
pub const WEIGHT_VERSION: u32 = 1;

/// Serializes the model: magic, version, the integer config fields in
/// declaration order, then every parameter in canonical order as f32.
///
/// τ is not an integer field and is not stored; see [`decode_weights`].
pub fn encode_weights(model: &VisionTransformer) -> Vec<u8> {
    let c = model.config();
    let mut w = Writer::new(WEIGHT_MAGIC, WEIGHT_VERSION);
    for v in [
        c.image_size,
        c.channels,
        c.patch_size,
        c.hidden_dim,
        c.mlp_dim,
        c.num_heads,
        c.num_layers,
        c.num_classes,
    ] {
        w.u32(v as u32);
    }
    for i in 0..model.num_params() {
        w.f32s(model.param(i).data());
    }
    w.into_bytes()
}

/// Parses [`encode_weights`] output. The model gets the default τ; use
/// [`VisionTransformer::set_tau`] to change it.
pub fn decode_weights(bytes: &[u8]) -> Result<VisionTransformer> {
    let mut r = Reader::open(bytes, WEIGHT_MAGIC, WEIGHT_VERSION)?;
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u32("config")? as usize;
    }
    let [image_size, channels, patch_size, hidden_dim, mlp_dim, num_heads, num_layers, num_classes] = dims;
    let config = ViTConfig {
        image_size,
        channels,
        patch_size,
        hidden_dim,
        mlp_dim,
        num_heads,
        num_layers,
        num_classes,
        ..ViTConfig::default()
    };
    config
        .validate()
        .map_err(|e| Error::Malformed(format!("weight file config: {e}")))?;
    let mut model = VisionTransformer::init_random(&config, 0)?;
    for i in 0..model.num_params() {
        let shape = model.param(i).shape().to_vec();
        let n = model.param(i).len();
        let data = r.f32s(n, "parameters")?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Malformed(format!("parameter {i}: {e}")))?;
        model.set_param(i, t)?;
    }
    r.finish()?;
    Ok(model)
}

pub fn save_weights(model: &VisionTransformer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<VisionTransformer> {
    decode_weights(&read_file(path.as_ref())?)
}
