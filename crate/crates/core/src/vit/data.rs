use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::tensor::Tensor;

/// Parameters of the procedurally generated shapes dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetSpec {
    pub seed: u64,
    pub samples: usize,
    pub classes: usize,
    pub image_size: usize,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            samples: 1500,
            classes: 10,
            image_size: 32,
        }
    }
}

/// Labelled images, stored as one `N x C x H x W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(shape_err!("dataset images must be N x C x H x W, got {:?}", images.shape()));
        }
        if images.shape()[0] != labels.len() {
            return Err(shape_err!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(param_err!("label {l} out of range for {num_classes} classes"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Image `i` as a `C x H x W` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        Tensor::from_parts(vec![c, h, w], self.images.data()[i * n..(i + 1) * n].to_vec())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        Dataset {
            images: Tensor::from_parts(vec![indices.len(), c, h, w], data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `fraction` of the samples and the remainder.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.len());
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Stacks `C x H x W` images into one `B x C x H x W` tensor.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| param_err!("cannot stack zero images"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(shape_err!("image shapes {:?} and {:?} differ", shape, img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Ok(Tensor::from_parts(full, data))
}
