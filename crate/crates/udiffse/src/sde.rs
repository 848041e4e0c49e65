//! Diffusion schedule: drift and diffusion coefficients, perturbation-kernel
//! statistics, forward sampling, and the Tweedie denoiser.
//!
//! The forward process is `ds_t = -gamma * s_t dt + g(t) dw` on [0, 1] with
//! `g(t) = sigma_min * (sigma_max / sigma_min)^t * sqrt(2 ln(sigma_max / sigma_min))`.
//! Its perturbation kernel is `N_C(delta_t * s, sigma(t)^2 I)` with
//! `delta_t = exp(-gamma * t)` and `sigma(t)^2` the solution of the variance
//! ODE `d sigma^2 / dt = -2 gamma sigma^2 + g(t)^2`, `sigma(0)^2 = 0`:
//!
//! ```text
//! sigma(t)^2 = sigma_min^2 * ((sigma_max/sigma_min)^(2t) - exp(-2 gamma t))
//!              * k / (gamma + k),     k = ln(sigma_max / sigma_min)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::spectral::{sample_complex_gaussian, Spectrogram};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    /// Drift stiffness gamma > 0.
    pub gamma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Reverse-time discretization step count N.
    pub n_steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { gamma: 1.5, sigma_min: 0.05, sigma_max: 0.5, n_steps: 30 }
    }
}

/// Time-dependent coefficients of the schedule at a fixed `t`.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleCoefficients {
    /// Kernel mean scale `delta_t = exp(-gamma t)`.
    pub delta: f64,
    /// Kernel variance `sigma(t)^2`.
    pub sigma_sq: f64,
    /// Diffusion coefficient `g(t)`.
    pub g: f64,
    /// Drift scale, the constant `-gamma`.
    pub drift_scale: f64,
}

impl DiffusionSchedule {
    pub fn new(gamma: f64, sigma_min: f64, sigma_max: f64, n_steps: usize) -> Result<Self> {
        let s = Self { gamma, sigma_min, sigma_max, n_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParam("gamma must be positive".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite())
        {
            return Err(Error::InvalidParam(
                "need 0 < sigma_min < sigma_max".into(),
            ));
        }
        if self.n_steps < 2 {
            return Err(Error::InvalidParam("n_steps must be at least 2".into()));
        }
        Ok(())
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) || t.is_nan() {
            return Err(Error::TimeOutOfRange { t });
        }
        Ok(())
    }

    pub fn coefficients(&self, t: f64) -> Result<ScheduleCoefficients> {
        Self::check_time(t)?;
        let ratio = self.sigma_max / self.sigma_min;
        let k = ratio.ln();
        let delta = (-self.gamma * t).exp();
        let g = self.sigma_min * ratio.powf(t) * (2.0 * k).sqrt();
        let sigma_sq = self.sigma_min * self.sigma_min
            * (ratio.powf(2.0 * t) - (-2.0 * self.gamma * t).exp())
            * k
            / (self.gamma + k);
        Ok(ScheduleCoefficients { delta, sigma_sq, g, drift_scale: -self.gamma })
    }

    pub fn delta(&self, t: f64) -> Result<f64> {
        Ok(self.coefficients(t)?.delta)
    }

    pub fn sigma_sq(&self, t: f64) -> Result<f64> {
        Ok(self.coefficients(t)?.sigma_sq)
    }

    pub fn g(&self, t: f64) -> Result<f64> {
        Ok(self.coefficients(t)?.g)
    }
}

/// Draw from the perturbation kernel: `delta_t * s + sigma(t) * zeta` with
/// `zeta ~ N_C(0, I)`.
pub fn perturb<R: Rng + ?Sized>(
    s: &Spectrogram,
    t: f64,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Spectrogram> {
    let co = sched.coefficients(t)?;
    let mean = Spectrogram::new(s.data.mapv(|z| z * co.delta), s.config)?;
    let var = ndarray::Array2::from_elem(s.data.dim(), co.sigma_sq);
    sample_complex_gaussian(&mean, &var, rng)
}

/// Conditional-mean denoiser: `(s_t + sigma(t)^2 * score) / delta_t`.
pub fn tweedie_estimate(
    s_t: &Spectrogram,
    t: f64,
    sched: &DiffusionSchedule,
    score: &Spectrogram,
) -> Result<Spectrogram> {
    if score.data.dim() != s_t.data.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", s_t.data.dim()),
            got: format!("{:?}", score.data.dim()),
        });
    }
    let co = sched.coefficients(t)?;
    let mut data = s_t.data.clone();
    ndarray::Zip::from(&mut data).and(&score.data).for_each(|z, sc| {
        *z = (*z + sc * co.sigma_sq) / co.delta;
    });
    Spectrogram::new(data, s_t.config)
}
