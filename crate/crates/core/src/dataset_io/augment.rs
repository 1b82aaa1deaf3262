use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, ImageRef, PairedSample};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub horizontal_flip_prob: f64,
    pub gaussian_noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            gaussian_noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn disabled() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            gaussian_noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) || !(self.gaussian_noise_sigma >= 0.0) {
            return Err(Error::Config(
                "flip probability must lie in [0,1] and noise sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.horizontal_flip_prob == 0.0 && self.gaussian_noise_sigma == 0.0
    }
}

/// The transform drawn for one pair.
#[derive(Clone, Debug, PartialEq)]
pub enum AugmentOp {
    Identity,
    Flip,
    /// Additive noise field, one value per image entry.
    Noise(Vec<f32>),
}

impl AugmentOp {
    /// Flip or noise is chosen uniformly among the enabled operations, then
    /// the flip fires with `horizontal_flip_prob`.
    pub fn draw(spec: &AugmentationSpec, draw_seed: u64, len: usize) -> Self {
        let flip_on = spec.horizontal_flip_prob > 0.0;
        let noise_on = spec.gaussian_noise_sigma > 0.0;
        let mut rng = rng::stream(spec.seed, &[0xA06, draw_seed]);
        let pick_flip = match (flip_on, noise_on) {
            (false, false) => return AugmentOp::Identity,
            (true, false) => true,
            (false, true) => false,
            (true, true) => rng.random_bool(0.5),
        };
        if pick_flip {
            if rng.random_bool(spec.horizontal_flip_prob) {
                AugmentOp::Flip
            } else {
                AugmentOp::Identity
            }
        } else {
            let normal = Normal::new(0.0f64, spec.gaussian_noise_sigma).expect("sigma checked");
            AugmentOp::Noise((0..len).map(|_| normal.sample(&mut rng) as f32).collect())
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        match self {
            AugmentOp::Identity => img.clone(),
            AugmentOp::Flip => {
                let mut out = img.clone();
                let (w, c) = (img.width, img.channels);
                for y in 0..img.height {
                    for x in 0..w {
                        for ch in 0..c {
                            out.data[(y * w + x) * c + ch] = img.data[(y * w + (w - 1 - x)) * c + ch];
                        }
                    }
                }
                out
            }
            AugmentOp::Noise(field) => {
                let mut out = img.clone();
                for (v, n) in out.data.iter_mut().zip(field) {
                    *v = (*v + n).clamp(0.0, 1.0);
                }
                out
            }
        }
    }
}

/// Applies one drawn transform to both images of a pair.
pub fn augment_images(
    target: &Image,
    reference: Option<&Image>,
    spec: &AugmentationSpec,
    draw_seed: u64,
) -> (Image, Option<Image>) {
    let op = AugmentOp::draw(spec, draw_seed, target.data.len());
    (op.apply(target), reference.map(|r| op.apply(r)))
}

/// Pair-level wrapper over [`augment_images`]; images must already be in memory.
pub fn augment_pair(pair: &PairedSample, spec: &AugmentationSpec, draw_seed: u64) -> Result<PairedSample> {
    let target = pair
        .target
        .image
        .memory()
        .ok_or_else(|| Error::Config(format!("image of `{}` is not loaded", pair.id())))?;
    let reference = match &pair.reference {
        Some(r) => Some(
            r.image
                .memory()
                .ok_or_else(|| Error::Config(format!("image of `{}` is not loaded", r.sample_id)))?,
        ),
        None => None,
    };
    let (t, r) = augment_images(target, reference.map(|r| r.as_ref()), spec, draw_seed);
    let mut out = pair.clone();
    out.target.image = ImageRef::Memory(Arc::new(t));
    if let (Some(rec), Some(img)) = (out.reference.as_mut(), r) {
        rec.image = ImageRef::Memory(Arc::new(img));
    }
    Ok(out)
}
