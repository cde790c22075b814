//! The denoiser interface and the analytic mixture denoiser used in place of
//! a trained network.
//!
//! [`MixtureDenoiser`] models clean latents as a Gaussian mixture whose
//! components are whole latent grids. Under either forward process
//! `z = s * z0 + n * eps` every component marginal stays Gaussian, so the
//! posterior mean `E[z0 | z]` and hence the optimal noise and velocity
//! predictors are available in closed form.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Shape};
use crate::schedule::DdimSchedule;

/// Selects which conditional behaviour a denoiser exhibits (stands in for a prompt).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionId(String);

impl ConditionId {
    pub fn new(label: impl Into<String>) -> Self {
        Self(label.into())
    }

    pub fn source() -> Self {
        Self::new("source")
    }

    pub fn target() -> Self {
        Self::new("target")
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A conditional noise / velocity predictor. Implementations must be pure:
/// the output depends only on the arguments and has the shape of `z`.
pub trait Denoiser {
    /// Noise prediction for the DDIM transitions at inference step `t`.
    fn predict_noise(
        &self,
        z: &LatentGrid,
        t: usize,
        sched: &DdimSchedule,
        cond: &ConditionId,
    ) -> Result<LatentGrid>;

    /// Velocity prediction for the rectified-flow ODE at time `t`.
    fn predict_velocity(&self, z: &LatentGrid, t: f64, cond: &ConditionId) -> Result<LatentGrid>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_noise(
        &self,
        z: &LatentGrid,
        t: usize,
        sched: &DdimSchedule,
        cond: &ConditionId,
    ) -> Result<LatentGrid> {
        (**self).predict_noise(z, t, sched, cond)
    }

    fn predict_velocity(&self, z: &LatentGrid, t: f64, cond: &ConditionId) -> Result<LatentGrid> {
        (**self).predict_velocity(z, t, cond)
    }
}

/// Returns the same grid for every query, as noise and as velocity.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    value: LatentGrid,
}

impl ConstantDenoiser {
    pub fn new(value: LatentGrid) -> Self {
        Self { value }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(LatentGrid::zeros(shape))
    }
}

impl Denoiser for ConstantDenoiser {
    fn predict_noise(
        &self,
        z: &LatentGrid,
        _t: usize,
        _sched: &DdimSchedule,
        _cond: &ConditionId,
    ) -> Result<LatentGrid> {
        z.ensure_same_shape(&self.value)?;
        Ok(self.value.clone())
    }

    fn predict_velocity(&self, z: &LatentGrid, _t: f64, _cond: &ConditionId) -> Result<LatentGrid> {
        z.ensure_same_shape(&self.value)?;
        Ok(self.value.clone())
    }
}

/// Counts model evaluations (NFEs) of the wrapped denoiser.
#[derive(Debug)]
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> D {
        self.inner
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn predict_noise(
        &self,
        z: &LatentGrid,
        t: usize,
        sched: &DdimSchedule,
        cond: &ConditionId,
    ) -> Result<LatentGrid> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_noise(z, t, sched, cond)
    }

    fn predict_velocity(&self, z: &LatentGrid, t: f64, cond: &ConditionId) -> Result<LatentGrid> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_velocity(z, t, cond)
    }
}

/// One mixture component: `z0 ~ N(mean, variance * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: LatentGrid,
    pub variance: f64,
}

/// Marginal of `z = signal * z0 + noise_std * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marginal {
    pub signal: f64,
    pub noise_std: f64,
}

impl Marginal {
    pub fn ddim(alpha_bar: f64) -> Self {
        Self {
            signal: alpha_bar.sqrt(),
            noise_std: (1.0 - alpha_bar).sqrt(),
        }
    }

    pub fn rf(t: f64) -> Self {
        Self {
            signal: 1.0 - t,
            noise_std: t,
        }
    }
}

/// Gaussian-mixture data model per condition, with closed-form optimal predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDenoiser {
    shape: Shape,
    conditions: BTreeMap<ConditionId, Vec<Component>>,
}

impl MixtureDenoiser {
    pub fn new(shape: Shape) -> Self {
        Self {
            shape,
            conditions: BTreeMap::new(),
        }
    }

    /// Adds (or replaces) the components for `cond`.
    pub fn with_condition(mut self, cond: ConditionId, components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidMixture(format!(
                "condition `{cond}` has no components"
            )));
        }
        let mut total = 0.0;
        for (k, comp) in components.iter().enumerate() {
            if !(comp.weight > 0.0 && comp.weight.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component {k} of `{cond}` has non-positive weight {}",
                    comp.weight
                )));
            }
            if !(comp.variance > 0.0 && comp.variance.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component {k} of `{cond}` has non-positive variance {}",
                    comp.variance
                )));
            }
            if comp.mean.shape() != self.shape {
                return Err(Error::ShapeMismatch {
                    left: self.shape,
                    right: comp.mean.shape(),
                });
            }
            total += comp.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!(
                "weights of `{cond}` sum to {total}, expected 1"
            )));
        }
        self.conditions.insert(cond, components);
        Ok(self)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn conditions(&self) -> impl Iterator<Item = &ConditionId> {
        self.conditions.keys()
    }

    pub fn components(&self, cond: &ConditionId) -> Result<&[Component]> {
        self.conditions
            .get(cond)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCondition(cond.to_string()))
    }

    /// Posterior component probabilities given `z` under `marginal`.
    ///
    /// A component is a whole latent grid, so the weights are shared by every
    /// pixel. Computed in the log domain.
    pub fn responsibilities(
        &self,
        z: &LatentGrid,
        marginal: Marginal,
        cond: &ConditionId,
    ) -> Result<Vec<f64>> {
        let comps = self.components(cond)?;
        z.ensure_same_shape(&comps[0].mean)?;
        let dim = self.shape.len() as f64;
        let logs: Vec<f64> = comps
            .iter()
            .map(|comp| {
                let var = marginal_variance(comp.variance, marginal);
                let sq: f64 = z
                    .as_slice()
                    .iter()
                    .zip(comp.mean.as_slice())
                    .map(|(&x, &m)| {
                        let d = x - marginal.signal * m;
                        d * d
                    })
                    .sum();
                comp.weight.ln() - 0.5 * dim * (std::f64::consts::TAU * var).ln() - sq / (2.0 * var)
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        Ok(unnorm.into_iter().map(|u| u / total).collect())
    }

    /// `E[z0 | z]` for `z = signal * z0 + noise_std * eps`.
    pub fn posterior_mean(
        &self,
        z: &LatentGrid,
        marginal: Marginal,
        cond: &ConditionId,
    ) -> Result<LatentGrid> {
        let resp = self.responsibilities(z, marginal, cond)?;
        let comps = self.components(cond)?;
        let mut out = vec![0.0; z.shape().len()];
        for (comp, &r) in comps.iter().zip(&resp) {
            if r == 0.0 {
                continue;
            }
            let var = marginal_variance(comp.variance, marginal);
            let gain = marginal.signal * comp.variance / var;
            // mu + gain (z - s mu), arranged so gain = 1, s = 1 returns z exactly.
            let keep = 1.0 - gain * marginal.signal;
            for ((o, &x), &m) in out.iter_mut().zip(z.as_slice()).zip(comp.mean.as_slice()) {
                *o += r * (keep * m + gain * x);
            }
        }
        LatentGrid::from_vec(z.shape(), out)
    }

    pub fn posterior_mean_ddim(
        &self,
        z: &LatentGrid,
        t: usize,
        sched: &DdimSchedule,
        cond: &ConditionId,
    ) -> Result<LatentGrid> {
        self.posterior_mean(z, Marginal::ddim(sched.alpha_bar(t)?), cond)
    }

    pub fn posterior_mean_rf(
        &self,
        z: &LatentGrid,
        t: f64,
        cond: &ConditionId,
    ) -> Result<LatentGrid> {
        self.posterior_mean(z, Marginal::rf(t), cond)
    }
}

fn marginal_variance(data_variance: f64, m: Marginal) -> f64 {
    m.signal * m.signal * data_variance + m.noise_std * m.noise_std
}

impl Denoiser for MixtureDenoiser {
    /// `(z - sqrt(alpha_bar) * E[z0|z]) / sqrt(1 - alpha_bar)`; errors at the
    /// clean endpoint.
    fn predict_noise(
        &self,
        z: &LatentGrid,
        t: usize,
        sched: &DdimSchedule,
        cond: &ConditionId,
    ) -> Result<LatentGrid> {
        let ab = sched.alpha_bar(t)?;
        if ab >= 1.0 {
            return Err(Error::InvalidTimestep {
                t: t.to_string(),
                reason: "noise is undefined where alpha_bar = 1",
            });
        }
        let mean = self.posterior_mean(z, Marginal::ddim(ab), cond)?;
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        z.zip_with(&mean, |x, m| (x - s * m) / n)
    }

    /// `(z - E[z0|z]) / t`, the conditional expectation of `eps - z0`.
    fn predict_velocity(&self, z: &LatentGrid, t: f64, cond: &ConditionId) -> Result<LatentGrid> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidTimestep {
                t: t.to_string(),
                reason: "velocity needs t in (0, 1]",
            });
        }
        let mean = self.posterior_mean_rf(z, t, cond)?;
        z.zip_with(&mean, |x, m| (x - m) / t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{sample_gaussian, Seed};

    fn scalar_shape() -> Shape {
        Shape::new(1, 1, 1).unwrap()
    }

    fn single(mean: LatentGrid, variance: f64) -> MixtureDenoiser {
        MixtureDenoiser::new(mean.shape())
            .with_condition(
                ConditionId::source(),
                vec![Component {
                    weight: 1.0,
                    mean,
                    variance,
                }],
            )
            .unwrap()
    }

    #[test]
    fn point_mass_posterior_is_the_mean() {
        let shape = Shape::new(2, 3, 3).unwrap();
        let mu = sample_gaussian(shape, Seed(1));
        let model = single(mu.clone(), 1e-14);
        let sched = DdimSchedule::with_defaults(10).unwrap();
        let z = sample_gaussian(shape, Seed(2)).scale(5.0).unwrap();
        let m = model
            .posterior_mean_ddim(&z, 5, &sched, &ConditionId::source())
            .unwrap();
        for (a, b) in m.as_slice().iter().zip(mu.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn clean_endpoint_returns_input() {
        let shape = Shape::new(2, 3, 3).unwrap();
        let model = single(sample_gaussian(shape, Seed(1)), 0.3);
        let sched = DdimSchedule::with_defaults(10).unwrap();
        let z = sample_gaussian(shape, Seed(2));
        let m = model
            .posterior_mean_ddim(&z, 0, &sched, &ConditionId::source())
            .unwrap();
        assert_eq!(m, z);
        assert!(model
            .predict_noise(&z, 0, &sched, &ConditionId::source())
            .is_err());
        assert!(model
            .predict_velocity(&z, 0.0, &ConditionId::source())
            .is_err());
    }

    #[test]
    fn on_mean_input_predicts_zero_noise() {
        let mu = LatentGrid::filled(scalar_shape(), 1.5);
        let model = single(mu.clone(), 1e-300);
        let sched = DdimSchedule::with_defaults(10).unwrap();
        let ab: f64 = sched.alpha_bar(4).unwrap();
        let z = mu.scale(ab.sqrt()).unwrap();
        let eps = model
            .predict_noise(&z, 4, &sched, &ConditionId::source())
            .unwrap();
        assert!(eps.as_slice()[0].abs() < 1e-12);
    }

    #[test]
    fn velocity_at_unit_time_for_standard_normal_data() {
        // Data N(0, 1): at t = 1, z = eps and E[z0 | z] = 0, so v = z.
        // The frozen golden comes from the scalar Bayes formula with
        // signal 0, noise 1: gain = 0 / 1 = 0.
        let model = single(LatentGrid::zeros(scalar_shape()), 1.0);
        let z = LatentGrid::filled(scalar_shape(), 0.8);
        let v = model
            .predict_velocity(&z, 1.0, &ConditionId::source())
            .unwrap();
        assert!((v.as_slice()[0] - 0.8).abs() < 1e-15);
        // Mid-path t = 0.5: marginal var 0.25 + 0.25, gain 0.5 * 1 / 0.5 = 1,
        // E[z0|z] = z, v = 0.
        let v = model
            .predict_velocity(&z, 0.5, &ConditionId::source())
            .unwrap();
        assert!(v.as_slice()[0].abs() < 1e-15);
    }

    #[test]
    fn point_mass_velocity_reaches_attractor_in_one_step() {
        let shape = Shape::new(1, 2, 2).unwrap();
        let mu = sample_gaussian(shape, Seed(7));
        let model = single(mu.clone(), 1e-300);
        let eps = sample_gaussian(shape, Seed(8));
        for t in [1.0, 0.7, 0.3] {
            let z = crate::schedule::rf_forward_diffuse(&mu, &eps, t).unwrap();
            let v = model
                .predict_velocity(&z, t, &ConditionId::source())
                .unwrap();
            let z0 = z.axpby(1.0, &v, -t).unwrap();
            for (a, b) in z0.as_slice().iter().zip(mu.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_two_component_responsibilities() {
        let shape = scalar_shape();
        let comps = vec![
            Component {
                weight: 0.5,
                mean: LatentGrid::filled(shape, -1.0),
                variance: 0.2,
            },
            Component {
                weight: 0.5,
                mean: LatentGrid::filled(shape, 1.0),
                variance: 0.2,
            },
        ];
        let model = MixtureDenoiser::new(shape)
            .with_condition(ConditionId::source(), comps)
            .unwrap();
        let z = LatentGrid::zeros(shape);
        let m = Marginal::ddim(0.5);
        let r = model
            .responsibilities(&z, m, &ConditionId::source())
            .unwrap();
        assert!((r[0] - 0.5).abs() < 1e-15 && (r[1] - 0.5).abs() < 1e-15);
        // Conditional means are mu_k + gain * (0 - s mu_k) = mu_k (1 - gain s),
        // symmetric around zero, so their average is 0.
        let pm = model.posterior_mean(&z, m, &ConditionId::source()).unwrap();
        assert!(pm.as_slice()[0].abs() < 1e-15);
    }

    #[test]
    fn mixture_validation() {
        let shape = scalar_shape();
        let comp = |w: f64, v: f64| Component {
            weight: w,
            mean: LatentGrid::zeros(shape),
            variance: v,
        };
        let m = MixtureDenoiser::new(shape);
        assert!(m
            .clone()
            .with_condition(ConditionId::source(), vec![])
            .is_err());
        assert!(m
            .clone()
            .with_condition(ConditionId::source(), vec![comp(0.5, 1.0)])
            .is_err());
        assert!(m
            .clone()
            .with_condition(ConditionId::source(), vec![comp(1.0, 0.0)])
            .is_err());
        assert!(m
            .clone()
            .with_condition(ConditionId::source(), vec![comp(-1.0, 1.0), comp(2.0, 1.0)])
            .is_err());
        let bad_shape = Component {
            weight: 1.0,
            mean: LatentGrid::zeros(Shape::new(1, 2, 1).unwrap()),
            variance: 1.0,
        };
        assert!(m
            .with_condition(ConditionId::source(), vec![bad_shape])
            .is_err());
    }

    #[test]
    fn unknown_condition_is_reported() {
        let model = single(LatentGrid::zeros(scalar_shape()), 1.0);
        let z = LatentGrid::zeros(scalar_shape());
        assert!(matches!(
            model.predict_velocity(&z, 0.5, &ConditionId::target()),
            Err(Error::UnknownCondition(_))
        ));
    }

    #[test]
    fn huge_inputs_do_not_overflow_weights() {
        let shape = Shape::new(4, 8, 8).unwrap();
        let comps: Vec<Component> = (0..3)
            .map(|k| Component {
                weight: 1.0 / 3.0,
                mean: sample_gaussian(shape, Seed(k)),
                variance: 0.01,
            })
            .collect();
        let model = MixtureDenoiser::new(shape)
            .with_condition(ConditionId::source(), comps)
            .unwrap();
        let z = sample_gaussian(shape, Seed(99)).scale(1e3).unwrap();
        let r = model
            .responsibilities(&z, Marginal::ddim(0.9), &ConditionId::source())
            .unwrap();
        assert!(r.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
