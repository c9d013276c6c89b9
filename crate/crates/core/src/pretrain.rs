//! Proxy pretraining of the VGG backbone on procedural textures.
//!
//! Stand-in for ImageNet weights when those cannot be fetched: the backbone
//! learns generic orientation, scale and edge detectors by classifying
//! texture families. No iris imagery and no liveness labels are involved.
//! The result is exported in the torchvision key layout and loaded exactly
//! like real pretrained weights.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_blur_f64;
use crate::image::Image;
use crate::model::{self, EpochStats, ModelConfig, TrainingConfig};
use crate::nn::Network;
use crate::preprocess;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    CoarseGrating,
    FineGrating,
    CoarseNoise,
    FineNoise,
    LargeDiscs,
    SmallDiscs,
    Rings,
    Checkerboard,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 8] = [
        TextureFamily::CoarseGrating,
        TextureFamily::FineGrating,
        TextureFamily::CoarseNoise,
        TextureFamily::FineNoise,
        TextureFamily::LargeDiscs,
        TextureFamily::SmallDiscs,
        TextureFamily::Rings,
        TextureFamily::Checkerboard,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub images_per_family: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            images_per_family: 96,
            epochs: 8,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 16,
            rng_seed: 0,
        }
    }
}

impl ProxyConfig {
    fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            rng_seed: self.rng_seed,
        }
    }
}

/// One texture image of side `size`; lengths scale with `size / 64`.
pub fn texture(family: TextureFamily, size: usize, rng: &mut impl Rng) -> Image {
    let s = size as f64 / 64.0;
    let n = size * size;
    let mut field = vec![0.0f64; n];
    match family {
        TextureFamily::CoarseGrating | TextureFamily::FineGrating => {
            let period = if family == TextureFamily::CoarseGrating {
                rng.random_range(14.0..28.0)
            } else {
                rng.random_range(2.5..5.0)
            } * s;
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            for (i, v) in field.iter_mut().enumerate() {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                *v = (2.0 * PI * (x * theta.cos() + y * theta.sin()) / period + phase).sin();
            }
        }
        TextureFamily::CoarseNoise | TextureFamily::FineNoise => {
            let sigma = if family == TextureFamily::CoarseNoise {
                rng.random_range(3.0..6.0) * s
            } else {
                rng.random_range(0.3..0.8)
            };
            let white: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            field = gaussian_blur_f64(&white, size, size, sigma);
            let peak = field.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            field.iter_mut().for_each(|v| *v /= peak);
        }
        TextureFamily::LargeDiscs | TextureFamily::SmallDiscs => {
            let (count, radius) = if family == TextureFamily::LargeDiscs {
                (rng.random_range(2..5), (8.0, 16.0))
            } else {
                (rng.random_range(20..40), (1.5, 3.5))
            };
            field.iter_mut().for_each(|v| *v = -1.0);
            for _ in 0..count {
                let cx = rng.random_range(0.0..size as f64);
                let cy = rng.random_range(0.0..size as f64);
                let r = rng.random_range(radius.0..radius.1) * s;
                let value = rng.random_range(0.2..1.0);
                for (i, v) in field.iter_mut().enumerate() {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    if (x - cx).hypot(y - cy) <= r {
                        *v = value;
                    }
                }
            }
        }
        TextureFamily::Rings => {
            let cx = rng.random_range(0.0..size as f64);
            let cy = rng.random_range(0.0..size as f64);
            let period = rng.random_range(5.0..12.0) * s;
            for (i, v) in field.iter_mut().enumerate() {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                *v = (2.0 * PI * (x - cx).hypot(y - cy) / period).sin();
            }
        }
        TextureFamily::Checkerboard => {
            let cell = rng.random_range(4.0..12.0) * s;
            let theta = rng.random_range(0.0..PI / 2.0);
            for (i, v) in field.iter_mut().enumerate() {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                let u = (x * theta.cos() + y * theta.sin()) / cell;
                let w = (-x * theta.sin() + y * theta.cos()) / cell;
                *v = if (u.floor() as i64 + w.floor() as i64) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
    }
    let mean = rng.random_range(70.0..170.0);
    let contrast = rng.random_range(25.0..70.0);
    let noise = rng.random_range(0.0..6.0);
    let pixels = field
        .iter()
        .map(|&v| {
            let jitter: f64 = rng.random_range(-1.0..1.0) * noise;
            (mean + contrast * v + jitter).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Image::new(size, size, pixels).expect("square buffer")
}

/// Trains a VGG network of the given topology to classify texture families.
/// The returned network has an eight-way tail; only its backbone is reused.
pub fn pretrain_backbone<T: Scalar>(
    config: &ModelConfig,
    proxy: &ProxyConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Network<T>> {
    config.validate()?;
    if proxy.images_per_family == 0 {
        return Err(Error::Config("images_per_family must be positive".into()));
    }
    let tc = proxy.training_config();
    tc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(proxy.rng_seed);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..proxy.images_per_family {
        for (k, &family) in TextureFamily::ALL.iter().enumerate() {
            let img = texture(family, config.input_size, &mut rng);
            inputs.push(preprocess::prepare_for_network::<T>(&img, config.input_size)?.tensor);
            targets.push(k);
        }
    }
    let proxy_config = ModelConfig {
        num_classes: TextureFamily::ALL.len(),
        ..config.clone()
    };
    let mut network = model::vgg_network(&proxy_config, &mut rng);
    model::fit(&mut network, &inputs, &targets, &tc, &mut on_epoch)?;
    Ok(network)
}

/// [`pretrain_backbone`] followed by export to `path` in torchvision layout.
pub fn pretrain_backbone_to_file<T: Scalar>(
    config: &ModelConfig,
    proxy: &ProxyConfig,
    path: impl AsRef<Path>,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<()> {
    let network = pretrain_backbone::<T>(config, proxy, on_epoch)?;
    model::save_backbone_safetensors(&network, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_varied() {
        for family in TextureFamily::ALL {
            let a = texture(family, 32, &mut ChaCha8Rng::seed_from_u64(4));
            let b = texture(family, 32, &mut ChaCha8Rng::seed_from_u64(4));
            assert_eq!(a, b);
            let lo = a.pixels().iter().min().unwrap();
            let hi = a.pixels().iter().max().unwrap();
            assert!(hi - lo > 20, "{family:?} is nearly flat");
        }
    }

    #[test]
    fn exported_backbone_loads_as_pretrained() {
        let cfg = ModelConfig::reduced(32, 16, 16);
        let proxy = ProxyConfig {
            images_per_family: 2,
            epochs: 1,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proxy.safetensors");
        let net = pretrain_backbone::<f32>(&cfg, &proxy, |_| {}).unwrap();
        model::save_backbone_safetensors(&net, &path).unwrap();
        let m: model::TrainedModel<f32> =
            model::build_model(&cfg, &model::BackboneInit::Pretrained(path), 1).unwrap();
        let i = m.network.layer_index("conv3_1").unwrap();
        assert_eq!(m.network.layers[i], net.layers[i]);
        assert_eq!(m.network.layers.last().unwrap().params().unwrap().0.nrows(), 2);
    }

    #[test]
    fn mismatched_backbone_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proxy.safetensors");
        let proxy = ProxyConfig {
            images_per_family: 1,
            epochs: 1,
            ..Default::default()
        };
        pretrain_backbone_to_file::<f32>(&ModelConfig::reduced(32, 16, 16), &proxy, &path, |_| {}).unwrap();
        let err = model::build_model::<f32>(
            &ModelConfig::reduced(32, 8, 16),
            &model::BackboneInit::Pretrained(path),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err:?}");
    }
}
