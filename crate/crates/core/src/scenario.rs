//! Localized-edit fixtures for the mixture denoiser.
//!
//! Every component of either condition shares one background attractor per
//! component outside the edit rectangle; inside it the source and target
//! conditions carry different attractors. Because a component is a whole
//! latent, the content of the edit region shifts which component the
//! denoiser favours, and with it the background.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Component, ConditionId, MixtureDenoiser};
use crate::error::{Error, Result};
use crate::grid::{sample_gaussian, LatentGrid, Seed, Shape};
use crate::metrics::{psnr_masked, Rect, SpatialMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub shape: Shape,
    /// Edit region; an empty rectangle gives identical conditions.
    pub mask: Rect,
    pub components: usize,
    pub variance: f64,
    pub background_amplitude: f64,
    pub edit_amplitude: f64,
    pub seed: Seed,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            shape: Shape {
                channels: 4,
                height: 16,
                width: 16,
            },
            mask: Rect {
                row0: 4,
                col0: 4,
                row1: 12,
                col1: 12,
            },
            components: 3,
            variance: 0.05,
            background_amplitude: 1.0,
            edit_amplitude: 1.0,
            seed: Seed(0),
        }
    }
}

/// A source latent, the two-condition model that explains it, and the edit region.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub z0_source: LatentGrid,
    pub model: MixtureDenoiser,
    pub source_cond: ConditionId,
    pub target_cond: ConditionId,
    pub edit_mask: Option<SpatialMask>,
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    let shape = spec.shape;
    let mask = SpatialMask::from_rect(shape.height, shape.width, spec.mask)?;
    if spec.components == 0 {
        return Err(Error::InvalidMixture("need at least one component".into()));
    }
    let weight = 1.0 / spec.components as f64;
    let mut source = Vec::with_capacity(spec.components);
    let mut target = Vec::with_capacity(spec.components);
    for k in 0..spec.components as u64 {
        let draw = |stream: u64, amp: f64| {
            sample_gaussian(shape, spec.seed.derive(3 * k + stream)).scale(amp)
        };
        let background = draw(0, spec.background_amplitude)?;
        let src_edit = draw(1, spec.edit_amplitude)?;
        let tgt_edit = draw(2, spec.edit_amplitude)?;
        let compose = |edit: &LatentGrid| {
            LatentGrid::from_fn(shape, |c, h, w| {
                if mask.contains(h, w) {
                    edit.get(c, h, w)
                } else {
                    background.get(c, h, w)
                }
            })
        };
        source.push(Component {
            weight,
            mean: compose(&src_edit)?,
            variance: spec.variance,
        });
        target.push(Component {
            weight,
            mean: compose(&tgt_edit)?,
            variance: spec.variance,
        });
    }
    // Weights of 1/K may not sum to 1 bit-exactly; renormalize the last one.
    let rest: f64 = source[..spec.components - 1].iter().map(|c| c.weight).sum();
    source[spec.components - 1].weight = 1.0 - rest;
    target[spec.components - 1].weight = 1.0 - rest;

    let noise = sample_gaussian(shape, spec.seed.derive(u64::MAX));
    let z0_source = source[0].mean.axpby(1.0, &noise, spec.variance.sqrt())?;
    let model = MixtureDenoiser::new(shape)
        .with_condition(ConditionId::source(), source)?
        .with_condition(ConditionId::target(), target)?;
    Ok(Scenario {
        z0_source,
        model,
        source_cond: ConditionId::source(),
        target_cond: ConditionId::target(),
        edit_mask: Some(mask),
    })
}

impl Scenario {
    /// Value span of the source latent, used as the PSNR peak and SSIM range.
    pub fn dynamic_range(&self) -> f64 {
        let v = self.z0_source.as_slice();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            hi - lo
        } else {
            1.0
        }
    }

    pub fn background_mask(&self) -> SpatialMask {
        let s = self.z0_source.shape();
        match &self.edit_mask {
            Some(m) => m.complement(),
            None => SpatialMask::full(s.height, s.width),
        }
    }

    /// PSNR restricted to the pixels outside the edit region.
    pub fn background_psnr(&self, a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
        psnr_masked(a, b, self.dynamic_range(), &self.background_mask())
    }

    /// RMS distance over the edit region to the nearest target attractor.
    pub fn edit_distance_to_target(&self, z: &LatentGrid) -> Result<f64> {
        let mask = self
            .edit_mask
            .as_ref()
            .ok_or_else(|| Error::InvalidRegion("scenario has no edit region".into()))?;
        let plane = z.shape().plane();
        let comps = self.model.components(&self.target_cond)?;
        comps
            .iter()
            .map(|comp| {
                z.ensure_same_shape(&comp.mean)?;
                let (mut sum, mut n) = (0.0, 0usize);
                for (i, (x, m)) in z.as_slice().iter().zip(comp.mean.as_slice()).enumerate() {
                    if mask.bits()[i % plane] {
                        sum += (x - m) * (x - m);
                        n += 1;
                    }
                }
                if n == 0 {
                    return Err(Error::InvalidRegion("edit region is empty".into()));
                }
                Ok((sum / n as f64).sqrt())
            })
            .try_fold(f64::INFINITY, |best, d| Ok(best.min(d?)))
    }
}
