//! DDIM and rectified-flow schedules, single-step transitions and trajectory
//! construction.
//!
//! Both samplers share one index convention: index `0` is clean data and
//! index `T` (resp. `N`) is the noise end. A denoising step moves from `i` to
//! `i - 1`; an inversion step moves from `i - 1` to `i`.

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionId, Denoiser};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;

pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_TRAIN_STEPS: usize = 1000;

/// Cumulative signal rates `alpha_bar[0..=T]` with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimSchedule {
    alpha_bar: Vec<f64>,
    train_timesteps: Vec<usize>,
}

impl DdimSchedule {
    /// Linear beta grid over `num_train_steps` points, cumulative product,
    /// then `num_steps` inference timesteps at a uniform stride ending on the
    /// last training step.
    pub fn build(
        num_steps: usize,
        beta_start: f64,
        beta_end: f64,
        num_train_steps: usize,
    ) -> Result<Self> {
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        if num_steps == 0 || num_steps > num_train_steps {
            return Err(Error::InvalidSchedule(format!(
                "need 1 <= num_steps <= num_train_steps, got {num_steps} / {num_train_steps}"
            )));
        }
        let n = num_train_steps;
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 1.0;
        for i in 0..n {
            let beta = if n == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
            };
            acc *= 1.0 - beta;
            cumulative.push(acc);
        }
        let stride = n / num_steps;
        let train_timesteps: Vec<usize> = (1..=num_steps)
            .map(|j| n - 1 - (num_steps - j) * stride)
            .collect();
        let mut alpha_bar = Vec::with_capacity(num_steps + 1);
        alpha_bar.push(1.0);
        alpha_bar.extend(train_timesteps.iter().map(|&k| cumulative[k]));
        let mut sched = Self::from_alpha_bar(alpha_bar)?;
        sched.train_timesteps = train_timesteps;
        Ok(sched)
    }

    /// The Stable-Diffusion-style default betas with `num_steps` inference steps.
    pub fn with_defaults(num_steps: usize) -> Result<Self> {
        Self::build(
            num_steps,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            DEFAULT_TRAIN_STEPS,
        )
    }

    /// Uses an explicit `alpha_bar` table; entry 0 must be exactly 1.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidSchedule("alpha_bar[0] must be 1".into()));
        }
        for (t, pair) in alpha_bar.windows(2).enumerate() {
            if !(pair[1] < pair[0] && pair[1] > 0.0) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar must decrease strictly and stay positive (index {})",
                    t + 1
                )));
            }
        }
        let train_timesteps = (1..alpha_bar.len()).collect();
        Ok(Self {
            alpha_bar,
            train_timesteps,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidTimestep {
                t: t.to_string(),
                reason: "beyond the end of the schedule",
            })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Training-grid index behind each inference step `1..=T`.
    pub fn train_timesteps(&self) -> &[usize] {
        &self.train_timesteps
    }
}

/// Coefficients `(a, b)` of the deterministic DDIM transition
/// `z_to = a * z_from + b * eps` between two signal rates.
///
/// Covers both the denoising direction and its inversion; only the roles of
/// the two rates change.
pub fn ddim_transition(alpha_from: f64, alpha_to: f64) -> (f64, f64) {
    let a = (alpha_to / alpha_from).sqrt();
    let b = (1.0 - alpha_to).sqrt() - ((1.0 - alpha_from) * alpha_to / alpha_from).sqrt();
    (a, b)
}

/// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn ddim_forward_diffuse(
    z0: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    sched: &DdimSchedule,
) -> Result<LatentGrid> {
    let ab = sched.alpha_bar(t)?;
    z0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

pub fn ddim_denoise_step<D: Denoiser + ?Sized>(
    z_t: &LatentGrid,
    t: usize,
    model: &D,
    cond: &ConditionId,
    sched: &DdimSchedule,
) -> Result<LatentGrid> {
    if t == 0 {
        return Err(Error::InvalidTimestep {
            t: "0".into(),
            reason: "no previous step to denoise into",
        });
    }
    let (a, b) = ddim_transition(sched.alpha_bar(t)?, sched.alpha_bar(t - 1)?);
    let eps = model.predict_noise(z_t, t, sched, cond)?;
    z_t.axpby(a, &eps, b)
}

/// Inverts one DDIM step, evaluating the noise predictor at `(z_{t-1}, t-1)`.
///
/// At `t = 1` the predictor would be queried at the clean endpoint where the
/// noise is undefined, so it is queried at timestep 1 instead.
pub fn ddim_invert_step<D: Denoiser + ?Sized>(
    z_prev: &LatentGrid,
    t: usize,
    model: &D,
    cond: &ConditionId,
    sched: &DdimSchedule,
) -> Result<LatentGrid> {
    if t == 0 {
        return Err(Error::InvalidTimestep {
            t: "0".into(),
            reason: "inversion starts from step 1",
        });
    }
    let (a, b) = ddim_transition(sched.alpha_bar(t - 1)?, sched.alpha_bar(t)?);
    let eval_t = if t == 1 { 1 } else { t - 1 };
    let eps = model.predict_noise(z_prev, eval_t, sched, cond)?;
    z_prev.axpby(a, &eps, b)
}

/// Rectified-flow time grid `t_0 = 0 < t_1 < ... < t_N = 1`, stored ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct RfSchedule {
    times: Vec<f64>,
}

impl RfSchedule {
    pub fn uniform(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("need at least one step".into()));
        }
        let n = num_steps as f64;
        let mut times: Vec<f64> = (0..=num_steps).map(|i| i as f64 / n).collect();
        times[num_steps] = 1.0;
        Self::from_ascending(times)
    }

    /// Takes the sampling-order grid `1 = t_N > ... > t_0 = 0`.
    pub fn from_timesteps(decreasing: &[f64]) -> Result<Self> {
        let mut times = decreasing.to_vec();
        times.reverse();
        Self::from_ascending(times)
    }

    fn from_ascending(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidSchedule("need at least 2 timesteps".into()));
        }
        if times[0] != 0.0 || times[times.len() - 1] != 1.0 {
            return Err(Error::InvalidSchedule(
                "timesteps must run from 1 to 0".into(),
            ));
        }
        if times.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidSchedule(
                "timesteps must be strictly monotone".into(),
            ));
        }
        Ok(Self { times })
    }

    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn time(&self, i: usize) -> Result<f64> {
        self.times
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidTimestep {
                t: i.to_string(),
                reason: "beyond the end of the schedule",
            })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

fn check_unit_time(name: &'static str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfDomain {
            name,
            value: t,
            domain: "[0, 1]",
        });
    }
    Ok(())
}

fn check_rf_interval(t_i: f64, t_prev: f64) -> Result<()> {
    check_unit_time("t_i", t_i)?;
    check_unit_time("t_prev", t_prev)?;
    if t_prev >= t_i {
        return Err(Error::InvalidTimestep {
            t: format!("{t_prev} -> {t_i}"),
            reason: "need t_prev < t_i",
        });
    }
    Ok(())
}

/// `t * eps + (1 - t) * z0`.
pub fn rf_forward_diffuse(z0: &LatentGrid, eps: &LatentGrid, t: f64) -> Result<LatentGrid> {
    check_unit_time("t", t)?;
    eps.axpby(t, z0, 1.0 - t)
}

/// Euler step from `t_i` down to `t_prev`.
pub fn rf_denoise_step<D: Denoiser + ?Sized>(
    z: &LatentGrid,
    t_i: f64,
    t_prev: f64,
    model: &D,
    cond: &ConditionId,
) -> Result<LatentGrid> {
    check_rf_interval(t_i, t_prev)?;
    let v = model.predict_velocity(z, t_i, cond)?;
    z.axpby(1.0, &v, t_prev - t_i)
}

/// Euler step from `t_prev` up to `t_i`, velocity taken at `t_prev`.
///
/// At `t_prev = 0` the velocity is queried at `t_i` instead, since the
/// velocity predictor is undefined on clean data.
pub fn rf_invert_step<D: Denoiser + ?Sized>(
    z: &LatentGrid,
    t_i: f64,
    t_prev: f64,
    model: &D,
    cond: &ConditionId,
) -> Result<LatentGrid> {
    check_rf_interval(t_i, t_prev)?;
    let eval_t = if t_prev == 0.0 { t_i } else { t_prev };
    let v = model.predict_velocity(z, eval_t, cond)?;
    z.axpby(1.0, &v, t_i - t_prev)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Ddim,
    Rf,
}

impl Sampler {
    pub fn default_steps(self) -> usize {
        match self {
            Sampler::Ddim => 15,
            Sampler::Rf => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sampler::Ddim => "ddim",
            Sampler::Rf => "rf",
        }
    }
}

/// Either sampler behind one stepping interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Ddim(DdimSchedule),
    Rf(RfSchedule),
}

impl Schedule {
    /// Default schedule for `sampler` (SD betas for DDIM, uniform grid for RF).
    pub fn for_sampler(sampler: Sampler, steps: usize) -> Result<Self> {
        Ok(match sampler {
            Sampler::Ddim => Schedule::Ddim(DdimSchedule::with_defaults(steps)?),
            Sampler::Rf => Schedule::Rf(RfSchedule::uniform(steps)?),
        })
    }

    pub fn sampler(&self) -> Sampler {
        match self {
            Schedule::Ddim(_) => Sampler::Ddim,
            Schedule::Rf(_) => Sampler::Rf,
        }
    }

    pub fn num_steps(&self) -> usize {
        match self {
            Schedule::Ddim(s) => s.num_steps(),
            Schedule::Rf(s) => s.num_steps(),
        }
    }

    pub fn forward_diffuse(
        &self,
        z0: &LatentGrid,
        eps: &LatentGrid,
        i: usize,
    ) -> Result<LatentGrid> {
        match self {
            Schedule::Ddim(s) => ddim_forward_diffuse(z0, eps, i, s),
            Schedule::Rf(s) => rf_forward_diffuse(z0, eps, s.time(i)?),
        }
    }

    /// `z_i -> z_{i-1}`.
    pub fn denoise_step<D: Denoiser + ?Sized>(
        &self,
        z: &LatentGrid,
        i: usize,
        model: &D,
        cond: &ConditionId,
    ) -> Result<LatentGrid> {
        match self {
            Schedule::Ddim(s) => ddim_denoise_step(z, i, model, cond, s),
            Schedule::Rf(s) => {
                if i == 0 {
                    return Err(Error::InvalidTimestep {
                        t: "0".into(),
                        reason: "no previous step to denoise into",
                    });
                }
                rf_denoise_step(z, s.time(i)?, s.time(i - 1)?, model, cond)
            }
        }
    }

    /// `z_{i-1} -> z_i`.
    pub fn invert_step<D: Denoiser + ?Sized>(
        &self,
        z: &LatentGrid,
        i: usize,
        model: &D,
        cond: &ConditionId,
    ) -> Result<LatentGrid> {
        match self {
            Schedule::Ddim(s) => ddim_invert_step(z, i, model, cond, s),
            Schedule::Rf(s) => {
                if i == 0 {
                    return Err(Error::InvalidTimestep {
                        t: "0".into(),
                        reason: "inversion starts from step 1",
                    });
                }
                rf_invert_step(z, s.time(i)?, s.time(i - 1)?, model, cond)
            }
        }
    }
}

impl From<DdimSchedule> for Schedule {
    fn from(s: DdimSchedule) -> Self {
        Schedule::Ddim(s)
    }
}

impl From<RfSchedule> for Schedule {
    fn from(s: RfSchedule) -> Self {
        Schedule::Rf(s)
    }
}

/// The latent chain `z_0 ... z_T`, one grid per schedule index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    entries: Vec<LatentGrid>,
}

impl Trajectory {
    pub fn new(entries: Vec<LatentGrid>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::InvalidSchedule("empty trajectory".into()))?;
        for e in &entries[1..] {
            first.ensure_same_shape(e)?;
        }
        Ok(Self { entries })
    }

    pub fn get(&self, i: usize) -> Option<&LatentGrid> {
        self.entries.get(i)
    }

    pub fn entries(&self) -> &[LatentGrid] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The noise end `z_T`.
    pub fn last(&self) -> &LatentGrid {
        &self.entries[self.entries.len() - 1]
    }
}

/// Inverts `z0` through every step of `schedule`, one model call per step.
pub fn invert_trajectory<D: Denoiser + ?Sized>(
    z0: &LatentGrid,
    model: &D,
    cond: &ConditionId,
    schedule: &Schedule,
) -> Result<Trajectory> {
    let mut entries = Vec::with_capacity(schedule.num_steps() + 1);
    entries.push(z0.clone());
    for i in 1..=schedule.num_steps() {
        let next = schedule.invert_step(&entries[i - 1], i, model, cond)?;
        entries.push(next);
    }
    Trajectory::new(entries)
}

/// Plain denoising loop from `z_T` to `z_0` without any fusion.
pub fn denoise_loop<D: Denoiser + ?Sized>(
    z_t: &LatentGrid,
    model: &D,
    cond: &ConditionId,
    schedule: &Schedule,
) -> Result<LatentGrid> {
    let mut z = z_t.clone();
    for i in (1..=schedule.num_steps()).rev() {
        z = schedule.denoise_step(&z, i, model, cond)?;
    }
    Ok(z)
}
