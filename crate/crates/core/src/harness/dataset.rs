//! Procedural colored-shapes dataset.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{param_err, Error, Result};
use crate::tensor::Tensor;
use crate::vit::{Dataset, ToyDatasetSpec};

pub const DATASET_MAGIC: &[u8; 4] = b"QTVD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Square,
    Frame,
    HorizontalBar,
    VerticalBar,
    Diagonal,
}

const SHAPES: [Shape; 5] = [
    Shape::Square,
    Shape::Frame,
    Shape::HorizontalBar,
    Shape::VerticalBar,
    Shape::Diagonal,
];

const COLORS: [[f32; 3]; 6] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.3, 0.95],
    [0.2, 0.85, 0.25],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.9],
];

/// Largest class count the generator can express.
pub const MAX_CLASSES: usize = SHAPES.len() * COLORS.len();

impl Shape {
    /// Membership test in coordinates normalized by the shape radius.
    fn contains(self, u: f32, v: f32) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            Shape::Square => au.max(av) <= 0.75,
            Shape::Frame => (0.55..=1.0).contains(&au.max(av)),
            Shape::HorizontalBar => au <= 1.0 && av <= 0.3,
            Shape::VerticalBar => av <= 1.0 && au <= 0.3,
            Shape::Diagonal => au.max(av) <= 1.0 && (u - v).abs() <= 0.4,
        }
    }
}

fn render(class: usize, size: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let shape = SHAPES[class % SHAPES.len()];
    let color = COLORS[class / SHAPES.len()];
    let s = size as f32;
    let r = s * rng.gen_range(0.26..0.34);
    let cx = s * (0.5 + rng.gen_range(-0.12..0.12f32));
    let cy = s * (0.5 + rng.gen_range(-0.12..0.12f32));
    let background = rng.gen_range(0.0..0.3f32);
    let start = out.len();
    out.resize(start + 3 * size * size, 0.0);
    let img = &mut out[start..];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5 - cx) / r;
            let v = (y as f32 + 0.5 - cy) / r;
            let inside = shape.contains(u, v);
            for (c, &col) in color.iter().enumerate() {
                let base = if inside { col } else { background };
                let noisy = base + rng.gen_range(-0.08..0.08f32);
                img[(c * size + y) * size + x] = noisy.clamp(0.0, 1.0);
            }
        }
    }
}

/// Colored shapes on a noisy gray background; the class is the
/// (shape, color) combination. Classes are balanced to within one sample
/// and the sample order is shuffled, so a prefix split stays near balanced.
pub fn generate_toy_dataset(spec: &ToyDatasetSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > MAX_CLASSES {
        return Err(param_err!("class count must be in 2..={MAX_CLASSES}, got {}", spec.classes));
    }
    if spec.image_size < 8 {
        return Err(param_err!("image size must be at least 8 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(spec.samples * 3 * spec.image_size * spec.image_size);
    for &l in &labels {
        render(l, spec.image_size, &mut rng, &mut data);
    }
    let images = Tensor::from_parts(vec![spec.samples, 3, spec.image_size, spec.image_size], data);
    Dataset::new(images, labels, spec.classes)
}

/// Binary layout: magic, version, sample count, channels, height, width,
/// class count (u32 each), labels (u32 each), pixels (f32).
pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
    let [c, h, wd] = data.image_shape();
    for v in [data.len(), c, h, wd, data.num_classes()] {
        w.u32(v as u32);
    }
    for &l in data.labels() {
        w.u32(l as u32);
    }
    w.f32s(data.images().data());
    let path = path.as_ref();
    std::fs::write(path, w.into_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = read_file(path.as_ref())?;
    let mut r = Reader::open(&bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32("dataset header")? as usize;
    }
    let [n, c, h, w, classes] = dims;
    let labels = (0..n)
        .map(|_| r.u32("labels").map(|l| l as usize))
        .collect::<Result<Vec<_>>>()?;
    let pixels = r.f32s(n * c * h * w, "pixels")?;
    r.finish()?;
    let images = Tensor::new(vec![n, c, h, w], pixels).map_err(|e| Error::Malformed(e.to_string()))?;
    Dataset::new(images, labels, classes).map_err(|e| Error::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ToyDatasetSpec {
        ToyDatasetSpec {
            seed: 3,
            samples: 53,
            classes: 10,
            image_size: 16,
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_toy_dataset(&spec()).unwrap();
        let b = generate_toy_dataset(&spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_dataset(&ToyDatasetSpec { seed: 4, ..spec() }).unwrap();
        assert_ne!(a, c);
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.images().shape(), [53, 3, 16, 16]);
    }

    #[test]
    fn classes_are_balanced() {
        let d = generate_toy_dataset(&spec()).unwrap();
        let mut hist = [0usize; 10];
        for &l in d.labels() {
            hist[l] += 1;
        }
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1, "{hist:?}");
    }

    #[test]
    fn every_shape_is_visible() {
        for shape in SHAPES {
            let area = (0..400)
                .filter(|i| shape.contains((i % 20) as f32 / 10.0 - 1.0, (i / 20) as f32 / 10.0 - 1.0))
                .count();
            assert!(area > 40, "{shape:?} covers {area} of 400 samples");
        }
    }

    #[test]
    fn rejects_bad_class_counts() {
        assert!(generate_toy_dataset(&ToyDatasetSpec { classes: 1, ..spec() }).is_err());
        assert!(generate_toy_dataset(&ToyDatasetSpec { classes: MAX_CLASSES + 1, ..spec() }).is_err());
    }

    #[test]
    fn file_round_trip() {
        let d = generate_toy_dataset(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.bin");
        save_dataset(&d, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Truncated { .. })));
    }
}
