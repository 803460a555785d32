use std::path::Path;

use crate::attack::Variant;
use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PERTURBATION_MAGIC: &[u8; 4] = b"QTVP";
pub const PERTURBATION_VERSION: u32 = 1;

/// An additive `C x H x W` image perturbation bounded by `epsilon` in L∞.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub epsilon: f32,
    pub variant: Variant,
}

impl Perturbation {
    pub fn zeros(shape: [usize; 3], epsilon: f32, variant: Variant) -> Self {
        Self {
            delta: Tensor::zeros(shape.to_vec()),
            epsilon,
            variant,
        }
    }

    pub fn linf(&self) -> f32 {
        self.delta.max_abs()
    }

    /// `clamp(x + δ, 0, 1)` for a `C x H x W` image or a `B x C x H x W`
    /// batch.
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        apply_delta(images, &self.delta)
    }

    /// Layout: magic, version, C, H, W (u32), ε (f32), variant tag (u32:
    /// 0 single, 1 class-universal followed by the class, 2 universal),
    /// then δ as f32.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let (c, h, w) = self.delta.dims3()?;
        let mut out = Writer::new(PERTURBATION_MAGIC, PERTURBATION_VERSION);
        for v in [c, h, w] {
            out.u32(v as u32);
        }
        out.f32(self.epsilon);
        match self.variant {
            Variant::Single => out.u32(0),
            Variant::ClassUniversal(m) => {
                out.u32(1);
                out.u32(m as u32);
            }
            Variant::Universal => out.u32(2),
        }
        out.f32s(self.delta.data());
        Ok(out.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, PERTURBATION_MAGIC, PERTURBATION_VERSION)?;
        let c = r.u32("shape")? as usize;
        let h = r.u32("shape")? as usize;
        let w = r.u32("shape")? as usize;
        let epsilon = r.f32("epsilon")?;
        let variant = match r.u32("variant")? {
            0 => Variant::Single,
            1 => Variant::ClassUniversal(r.u32("class")? as usize),
            2 => Variant::Universal,
            t => return Err(Error::Malformed(format!("unknown variant tag {t}"))),
        };
        let data = r.f32s(c * h * w, "perturbation")?;
        r.finish()?;
        let delta = Tensor::new(vec![c, h, w], data).map_err(|e| Error::Malformed(e.to_string()))?;
        if !(epsilon > 0.0) || delta.max_abs() > epsilon {
            return Err(Error::Malformed(format!("perturbation exceeds its bound {epsilon}")));
        }
        Ok(Self { delta, epsilon, variant })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_file(path.as_ref())?)
    }
}

/// `clamp(x + δ, 0, 1)`, broadcasting δ over a leading batch axis.
pub fn apply_delta(images: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let n = delta.len();
    let shape = images.shape();
    let ok = match shape.len() {
        3 => shape == delta.shape(),
        4 => &shape[1..] == delta.shape(),
        _ => false,
    };
    if !ok {
        return Err(crate::error::shape_err!(
            "perturbation {:?} does not fit images {:?}",
            delta.shape(),
            shape
        ));
    }
    let mut out = images.clone();
    for chunk in out.data_mut().chunks_exact_mut(n.max(1)) {
        for (x, &d) in chunk.iter_mut().zip(delta.data()) {
            *x = (*x + d).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
