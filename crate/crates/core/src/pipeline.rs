//! Similarity-guided latent fusion: the inversion-based editor and the
//! inversion-free variant.
//!
//! Both editors run the same loop. Starting from `z_T`, each step denoises
//! under the target condition to `z_{t-1}`, scores it against the reference
//! `z*_{t-1}` and blends the two with the sharpened similarity map. The
//! blend is applied after every step, the last one included.

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionId, CountingDenoiser, Denoiser};
use crate::error::{Error, Result};
use crate::grid::{lerp, sample_gaussian, LatentGrid, Seed};
use crate::schedule::{invert_trajectory, Sampler, Schedule, Trajectory};
use crate::similarity::{similarity_stack, MapStats, SharpenParams, SimilarityMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Inversion,
    InversionFree,
}

impl EditMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EditMode::Inversion => "inversion",
            EditMode::InversionFree => "inversion_free",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Weight of the per-pixel cosine term against the block term.
    pub alpha_mix: f64,
    pub sharpen: SharpenParams,
    pub block_size: usize,
    /// Weight of the clean latent in the inversion-free starting point.
    pub alpha_init: f64,
    pub sampler: Sampler,
    pub steps: usize,
    pub seed: Seed,
    pub mode: EditMode,
}

impl FusionConfig {
    pub fn new(sampler: Sampler, mode: EditMode) -> Self {
        Self {
            alpha_mix: 0.5,
            sharpen: SharpenParams::default(),
            block_size: 4,
            alpha_init: 0.7,
            sampler,
            steps: sampler.default_steps(),
            seed: Seed(0),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(Error::OutOfDomain {
                    name,
                    value,
                    domain: "[0, 1]",
                })
            }
        };
        unit("alpha_mix", self.alpha_mix)?;
        unit("alpha_init", self.alpha_init)?;
        if self.block_size == 0 {
            return Err(Error::OutOfDomain {
                name: "block_size",
                value: 0.0,
                domain: "[1, inf)",
            });
        }
        if self.steps == 0 {
            return Err(Error::OutOfDomain {
                name: "steps",
                value: 0.0,
                domain: "[1, inf)",
            });
        }
        SharpenParams::new(self.sharpen.gamma, self.sharpen.lambda)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::for_sampler(self.sampler, self.steps)
    }
}

/// Similarity statistics for the fusion into schedule index `index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub mixed: MapStats,
    pub sharpened: MapStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditReport {
    pub edited: LatentGrid,
    pub nfe_inversion: usize,
    pub nfe_denoise: usize,
    /// One record per denoising step, in sampling order (`T-1` down to `0`).
    pub steps: Vec<StepRecord>,
    /// Sharpened map used at each step, same order as `steps`.
    pub maps: Vec<SimilarityMap>,
}

impl EditReport {
    pub fn nfe_total(&self) -> usize {
        self.nfe_inversion + self.nfe_denoise
    }
}

/// `(1 - s) * z + s * z_ref` with `s` broadcast over channels.
pub fn fuse(z: &LatentGrid, z_ref: &LatentGrid, s: &SimilarityMap) -> Result<LatentGrid> {
    z.ensure_same_shape(z_ref)?;
    let shape = z.shape();
    if s.dims() != (shape.height, shape.width) {
        return Err(Error::MapMismatch {
            map: s.dims(),
            latent: (shape.height, shape.width),
        });
    }
    if let Some(&bad) = s.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfDomain {
            name: "similarity",
            value: bad,
            domain: "[0, 1]",
        });
    }
    let plane = shape.plane();
    let weights = s.values();
    let data = z
        .as_slice()
        .iter()
        .zip(z_ref.as_slice())
        .enumerate()
        .map(|(i, (&x, &r))| {
            let s = weights[i % plane];
            ((1.0 - s) * x + s * r).clamp(x.min(r), x.max(r))
        })
        .collect();
    LatentGrid::from_vec(shape, data)
}

/// `alpha * z0 + (1 - alpha) * eps` with `eps` drawn from `seed`.
pub fn init_inversion_free(z0: &LatentGrid, seed: Seed, alpha_init: f64) -> Result<LatentGrid> {
    let eps = sample_gaussian(z0.shape(), seed);
    lerp(z0, &eps, alpha_init)
}

/// Forward-diffuses `z0` to every schedule index with one shared noise draw.
/// No model calls.
pub fn pseudo_reference_chain(
    z0: &LatentGrid,
    schedule: &Schedule,
    seed: Seed,
) -> Result<Trajectory> {
    let eps = sample_gaussian(z0.shape(), seed);
    let entries = (0..=schedule.num_steps())
        .map(|i| schedule.forward_diffuse(z0, &eps, i))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(entries)
}

struct LoopOutput {
    edited: LatentGrid,
    steps: Vec<StepRecord>,
    maps: Vec<SimilarityMap>,
}

fn fusion_loop<D: Denoiser + ?Sized>(
    z_start: &LatentGrid,
    reference: &Trajectory,
    model: &D,
    cond: &ConditionId,
    schedule: &Schedule,
    config: &FusionConfig,
) -> Result<LoopOutput> {
    let n = schedule.num_steps();
    if reference.len() != n + 1 {
        return Err(Error::InvalidSchedule(format!(
            "reference chain has {} entries, schedule needs {}",
            reference.len(),
            n + 1
        )));
    }
    z_start.ensure_same_shape(reference.last())?;
    let mut z = z_start.clone();
    let mut steps = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    for i in (1..=n).rev() {
        let denoised = schedule.denoise_step(&z, i, model, cond)?;
        let z_ref = &reference.entries()[i - 1];
        let stack = similarity_stack(
            &denoised,
            z_ref,
            config.alpha_mix,
            config.block_size,
            config.sharpen,
        )?;
        z = fuse(&denoised, z_ref, &stack.sharpened)?;
        steps.push(StepRecord {
            index: i - 1,
            mixed: stack.mixed.stats(),
            sharpened: stack.sharpened.stats(),
        });
        maps.push(stack.sharpened);
    }
    Ok(LoopOutput {
        edited: z,
        steps,
        maps,
    })
}

fn check_mode(config: &FusionConfig, expected: EditMode) -> Result<()> {
    config.validate()?;
    if config.mode != expected {
        return Err(Error::Config(format!(
            "mode is {}, this editor needs {}",
            config.mode.as_str(),
            expected.as_str()
        )));
    }
    Ok(())
}

/// Inverts the source latent under `source_cond`, then denoises from `z*_T`
/// under `target_cond`, fusing with the inverted chain at every step.
pub fn edit_with_inversion<D: Denoiser + ?Sized>(
    z0_source: &LatentGrid,
    model: &D,
    source_cond: &ConditionId,
    target_cond: &ConditionId,
    config: &FusionConfig,
) -> Result<EditReport> {
    check_mode(config, EditMode::Inversion)?;
    let schedule = config.schedule()?;
    edit_with_inversion_on(
        z0_source,
        model,
        source_cond,
        target_cond,
        config,
        &schedule,
    )
}

/// [`edit_with_inversion`] on an explicit schedule (`config.sampler` and
/// `config.steps` are ignored).
pub fn edit_with_inversion_on<D: Denoiser + ?Sized>(
    z0_source: &LatentGrid,
    model: &D,
    source_cond: &ConditionId,
    target_cond: &ConditionId,
    config: &FusionConfig,
    schedule: &Schedule,
) -> Result<EditReport> {
    let counter = CountingDenoiser::new(model);
    let reference = invert_trajectory(z0_source, &counter, source_cond, schedule)?;
    let nfe_inversion = counter.count();
    counter.reset();
    let out = fusion_loop(
        reference.last(),
        &reference,
        &counter,
        target_cond,
        schedule,
        config,
    )?;
    Ok(EditReport {
        edited: out.edited,
        nfe_inversion,
        nfe_denoise: counter.count(),
        steps: out.steps,
        maps: out.maps,
    })
}

/// Starts from an interpolation of the source latent and seeded noise and
/// fuses against a forward-diffused pseudo-reference chain. No inversion.
pub fn edit_inversion_free<D: Denoiser + ?Sized>(
    z0_source: &LatentGrid,
    model: &D,
    target_cond: &ConditionId,
    config: &FusionConfig,
) -> Result<EditReport> {
    check_mode(config, EditMode::InversionFree)?;
    let schedule = config.schedule()?;
    edit_inversion_free_on(z0_source, model, target_cond, config, &schedule)
}

pub fn edit_inversion_free_on<D: Denoiser + ?Sized>(
    z0_source: &LatentGrid,
    model: &D,
    target_cond: &ConditionId,
    config: &FusionConfig,
    schedule: &Schedule,
) -> Result<EditReport> {
    let z_start = init_inversion_free(z0_source, config.seed, config.alpha_init)?;
    let reference = pseudo_reference_chain(z0_source, schedule, config.seed)?;
    let counter = CountingDenoiser::new(model);
    let out = fusion_loop(
        &z_start,
        &reference,
        &counter,
        target_cond,
        schedule,
        config,
    )?;
    Ok(EditReport {
        edited: out.edited,
        nfe_inversion: 0,
        nfe_denoise: counter.count(),
        steps: out.steps,
        maps: out.maps,
    })
}

/// Runs whichever editor `config.mode` selects.
pub fn edit<D: Denoiser + ?Sized>(
    z0_source: &LatentGrid,
    model: &D,
    source_cond: &ConditionId,
    target_cond: &ConditionId,
    config: &FusionConfig,
) -> Result<EditReport> {
    match config.mode {
        EditMode::Inversion => {
            edit_with_inversion(z0_source, model, source_cond, target_cond, config)
        }
        EditMode::InversionFree => edit_inversion_free(z0_source, model, target_cond, config),
    }
}

/// Starting latent the editor for `config.mode` would use, without fusion:
/// `z*_T` from inversion under `source_cond`, or the interpolated start.
pub fn unfused_start<D: Denoiser + ?Sized>(
    z0_source: &LatentGrid,
    model: &D,
    source_cond: &ConditionId,
    config: &FusionConfig,
    schedule: &Schedule,
) -> Result<LatentGrid> {
    match config.mode {
        EditMode::Inversion => Ok(invert_trajectory(z0_source, model, source_cond, schedule)?
            .last()
            .clone()),
        EditMode::InversionFree => init_inversion_free(z0_source, config.seed, config.alpha_init),
    }
}
