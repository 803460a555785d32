use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::tensor::Tensor;

/// Which images a perturbation is optimized over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "class")]
pub enum Variant {
    /// One perturbation per image.
    Single,
    /// One perturbation shared by all images of a class.
    ClassUniversal(usize),
    /// One perturbation shared by all images.
    Universal,
}

/// Attack hyper-parameters. Defaults are the single-image setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Weight of the outlier-inducing term.
    pub lambda1: f32,
    /// Weight of the classification-preserving term.
    pub lambda2: f32,
    /// Weight of the total-variation term.
    pub lambda3: f32,
    /// L∞ bound on the perturbation.
    pub epsilon: f32,
    pub alpha_max: f64,
    pub alpha_min: f64,
    /// Iterations per cosine cycle.
    pub restart_period: usize,
    pub iterations: usize,
    /// Values taken from the top of each hidden-state column.
    pub k: usize,
    /// Value the selected hidden-state entries are pushed towards.
    pub x_target: f32,
    pub variant: Variant,
    /// Scope images per iteration for the universal variants.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.01,
            lambda3: 50.0,
            epsilon: 0.8,
            alpha_max: 0.02,
            alpha_min: 1e-5,
            restart_period: 100,
            iterations: 300,
            k: 4,
            x_target: 70.0,
            variant: Variant::Single,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Defaults for a shared perturbation: 1000 iterations.
    pub fn universal() -> Self {
        Self {
            variant: Variant::Universal,
            iterations: 1000,
            ..Self::default()
        }
    }

    pub fn class_universal(class: usize) -> Self {
        Self {
            variant: Variant::ClassUniversal(class),
            ..Self::universal()
        }
    }

    /// Checks the parameter ranges against the outlier threshold `tau` of
    /// the attacked model.
    pub fn validate(&self, tau: f32) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(param_err!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.alpha_min >= 0.0 && self.alpha_min <= self.alpha_max && self.alpha_max.is_finite()) {
            return Err(param_err!(
                "step sizes must satisfy 0 <= alpha_min <= alpha_max, got {} and {}",
                self.alpha_min,
                self.alpha_max
            ));
        }
        if self.k == 0 {
            return Err(param_err!("k must be at least 1"));
        }
        if self.restart_period == 0 {
            return Err(param_err!("restart period must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(param_err!("batch size must be at least 1"));
        }
        if !(self.x_target > tau) {
            return Err(param_err!(
                "x_target {} must exceed the outlier threshold {tau}",
                self.x_target
            ));
        }
        let lambdas = [self.lambda1, self.lambda2, self.lambda3];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(param_err!("loss weights must be finite and non-negative: {lambdas:?}"));
        }
        Ok(())
    }
}

/// The images a perturbation is optimized on, checked against the variant.
#[derive(Clone, Debug)]
pub struct AttackScope {
    images: Vec<Tensor>,
    variant: Variant,
}

impl AttackScope {
    /// `labels` are needed only for the class-universal variant and must
    /// all equal its class.
    pub fn new(variant: Variant, images: Vec<Tensor>, labels: Option<&[usize]>) -> Result<Self> {
        if images.is_empty() {
            return Err(param_err!("attack scope is empty"));
        }
        let shape = images[0].shape().to_vec();
        if shape.len() != 3 || images.iter().any(|i| i.shape() != shape.as_slice()) {
            return Err(param_err!("scope images must share one C x H x W shape"));
        }
        match variant {
            Variant::Single if images.len() != 1 => {
                return Err(param_err!("single-image scope holds {} images", images.len()))
            }
            Variant::ClassUniversal(m) => {
                let labels = labels.ok_or_else(|| param_err!("class-universal scope needs labels"))?;
                if labels.len() != images.len() || labels.iter().any(|&l| l != m) {
                    return Err(param_err!("class-universal scope must contain only class {m}"));
                }
            }
            _ => {}
        }
        if images.iter().any(|i| i.data().iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(param_err!("scope pixels must lie in [0, 1]"));
        }
        Ok(Self { images, variant })
    }

    pub fn single(image: Tensor) -> Result<Self> {
        Self::new(Variant::Single, vec![image], None)
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }
}
