//! Procedural toy images with class-dependent stripe patterns.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Noise standard deviation added to every pixel.
pub const TOY_NOISE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    /// `[B, in_channels, img, img]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub pattern: String,
}

/// Clean template of class `k`: a cosine along x for even `k`, along y for
/// odd `k`, with `(size / patch) * (1 + k / 2)` cycles per image.
///
/// The period divides `patch`, so every patch of an image sees the same
/// pattern and the class survives pooling over patches. Distinct templates
/// are orthogonal, so `template_a - template_b` separates classes linearly.
pub fn template(k: usize, channels: usize, size: usize, patch: usize) -> Tensor {
    let freq = ((size / patch) * (1 + k / 2)) as f64;
    Tensor::from_fn(&[channels, size, size], |i| {
        let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
        let pos = if k.is_multiple_of(2) { x } else { y } as f64;
        (2.0 * PI * freq * pos / size as f64 + c as f64 * PI / 3.0).cos()
    })
}

impl ToyDataset {
    /// `count` images with balanced labels, amplitude in `[0.5, 1.5]`.
    pub fn generate(cfg: &ModelConfig, count: usize, seed: u64) -> Result<ToyDataset> {
        if count == 0 {
            return Err(Error::Config("toy dataset needs at least one image".into()));
        }
        let top = 1 + (cfg.num_classes.max(1) - 1) / 2;
        if cfg.patch_size < 2 * top {
            return Err(Error::Config(format!(
                "patch size {} too small for {} stripe frequencies",
                cfg.patch_size, cfg.num_classes
            )));
        }
        let (ch, s, p) = (cfg.in_channels, cfg.img_size, cfg.patch_size);
        let templates: Vec<Tensor> = (0..cfg.num_classes)
            .map(|k| template(k, ch, s, p))
            .collect();
        let mut rng = Rng::fork(seed, 0x746f_7964);
        let per = ch * s * s;
        let mut data = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let k = i % cfg.num_classes;
            let a = rng.uniform(0.5, 1.5);
            data.extend(
                templates[k]
                    .data()
                    .iter()
                    .map(|v| a * v + TOY_NOISE * rng.normal()),
            );
            labels.push(k);
        }
        Ok(ToyDataset {
            images: Tensor::new(vec![count, ch, s, s], data)?,
            labels,
            seed,
            pattern: "stripes".into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.images.numel() / self.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Ok((
            Tensor::new(shape, data)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_orthogonal() {
        for (a, b) in [(0, 1), (0, 2), (1, 3), (2, 3)] {
            let d = template(a, 3, 16, 4).dot(&template(b, 3, 16, 4)).unwrap();
            assert!(d.abs() < 1e-9, "{a} {b} {d}");
        }
    }

    #[test]
    fn patches_share_the_pattern() {
        let t = template(0, 1, 16, 4);
        for y in 0..16 {
            for x in 0..16 {
                assert!((t.get(&[0, y, x]) - t.get(&[0, y % 4, x % 4])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_many_classes_for_the_patch() {
        let cfg = ModelConfig {
            num_classes: 5,
            ..ModelConfig::toy()
        };
        assert!(ToyDataset::generate(&cfg, 4, 0).is_err());
    }

    #[test]
    fn balanced_labels_and_shape() {
        let d = ToyDataset::generate(&ModelConfig::toy(), 10, 1).unwrap();
        assert_eq!(d.images.shape(), &[10, 3, 16, 16]);
        assert_eq!(d.labels.iter().filter(|&&l| l == 1).count(), 5);
        assert_eq!(d, ToyDataset::generate(&ModelConfig::toy(), 10, 1).unwrap());
    }

    #[test]
    fn separable_by_template_difference() {
        let cfg = ModelConfig::toy();
        let d = ToyDataset::generate(&cfg, 64, 4).unwrap();
        let w = template(0, 3, 16, 4).sub(&template(1, 3, 16, 4)).unwrap();
        for i in 0..d.len() {
            let (x, y) = d.subset(&[i]).unwrap();
            let s = x.reshape(&[3, 16, 16]).unwrap().dot(&w).unwrap();
            assert_eq!(s > 0.0, y[0] == 0);
        }
    }
}
