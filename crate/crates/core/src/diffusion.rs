//! Diffusion chain arithmetic: noise schedules, closed-form forward noising,
//! ancestral reverse steps and truncated chain sampling.
//!
//! Steps are 1-based (`t = 1..=T`). `alpha_bar(0)` is defined as 1 so that
//! noising to step 0 is the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ImageTensor, ValueRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Everything needed to rebuild a schedule; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleParams {
    /// Short identifier used to bind checkpoints to the schedule they were trained with.
    pub fn id(&self) -> String {
        let kind = match self.kind {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        };
        format!(
            "{kind}-T{}-b{:e}-{:e}",
            self.steps, self.beta_start, self.beta_end
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;

/// Builds a schedule of `steps` noise levels.
///
/// The linear kind spaces `beta` evenly from `beta_start` to `beta_end`.
/// The cosine kind follows the squared-cosine `alpha_bar` curve and clips each
/// `beta` into `[beta_start, beta_end]`.
pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleParams {
        steps,
        beta_start,
        beta_end,
        kind,
    })
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            steps,
            beta_start,
            beta_end,
            kind,
        } = params;
        if steps == 0 {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (1..=steps)
                    .map(|t| {
                        let b = 1.0 - f(t as f64) / f((t - 1) as f64);
                        b.clamp(beta_start, beta_end)
                    })
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            params,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn id(&self) -> String {
        self.params.id()
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `0 <= t <= T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance of the true posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    pub fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// Closed-form forward marginal `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
/// Step 0 returns `x0` unchanged.
pub fn forward_sample(
    x0: &ImageTensor,
    t: usize,
    noise: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_step(t, 0)?;
    x0.ensure_same_shape(noise.shape())?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar(t);
    let (signal, spread) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .zip_map(noise, |x, e| signal * x + spread * e)?
        .with_range(ValueRange::Model))
}

/// Inverts the forward marginal for a given noise estimate.
pub fn predict_x0(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    clamp: bool,
) -> Result<ImageTensor> {
    schedule.check_step(t, 1)?;
    x_t.ensure_same_shape(eps_hat.shape())?;
    let ab = schedule.alpha_bar(t);
    let (signal, spread) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| {
        let v = (x - spread * e) / signal;
        if clamp {
            v.clamp(-1.0, 1.0)
        } else {
            v
        }
    })
}

/// Variance used for the noise injected by a reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseVariance {
    /// `beta_t (1 - ab_{t-1}) / (1 - ab_t)`.
    #[default]
    Posterior,
    /// `beta_t`.
    Beta,
}

impl ReverseVariance {
    fn value(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            ReverseVariance::Posterior => schedule.posterior_variance(t),
            ReverseVariance::Beta => schedule.beta(t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub variance: ReverseVariance,
    /// Clamp the implied `x0` estimate to `[-1, 1]` before forming the step mean.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            variance: ReverseVariance::Posterior,
            clip_x0: true,
        }
    }
}

/// One ancestral step from `x_t` towards `x_{t-1}`:
/// mean `(x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t)` plus
/// `sqrt(var_t) * z`. No noise is added at `t = 1`.
pub fn reverse_step(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    z: &ImageTensor,
    variance: ReverseVariance,
) -> Result<ImageTensor> {
    reverse_step_with(
        x_t,
        eps_hat,
        t,
        schedule,
        z,
        &SamplerConfig {
            variance,
            clip_x0: false,
        },
    )
}

/// Reverse step with sampler options. With `clip_x0` the mean is formed from the
/// clamped `x0` estimate through the posterior coefficients; without it this
/// is algebraically the same as [`reverse_step`].
pub fn reverse_step_with(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    z: &ImageTensor,
    config: &SamplerConfig,
) -> Result<ImageTensor> {
    schedule.check_step(t, 1)?;
    x_t.ensure_same_shape(eps_hat.shape())?;
    x_t.ensure_same_shape(z.shape())?;

    let mean = if config.clip_x0 {
        let x0 = predict_x0(x_t, eps_hat, t, schedule, true)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * schedule.beta(t) / (1.0 - ab);
        let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        x0.zip_map(x_t, |a, b| c0 * a + ct * b)?
    } else {
        let scale = 1.0 / schedule.alpha(t).sqrt();
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        x_t.zip_map(eps_hat, |x, e| scale * (x - coef * e))?
    };
    if t == 1 {
        return Ok(mean.with_range(ValueRange::Model));
    }
    let sd = config.variance.value(schedule, t).sqrt();
    Ok(mean.zip_map(z, |m, n| m + sd * n)?.with_range(ValueRange::Model))
}

/// Runs the reverse chain from `x_start` (the noisy state at `t_start`) down
/// to step 1 and returns the `x0` estimate. The injected noise is drawn from a
/// generator seeded with `seed`, so the result is a pure function of the inputs.
pub fn sample_chain<F>(
    mut denoise_fn: F,
    x_start: &ImageTensor,
    t_start: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    config: &SamplerConfig,
) -> Result<ImageTensor>
where
    F: FnMut(&ImageTensor, usize) -> Result<ImageTensor>,
{
    schedule.check_step(t_start, 1)?;
    let mut rng = rng::seeded(seed);
    let mut x = x_start.clone();
    let zeros = ImageTensor::zeros(x.shape(), ValueRange::Model)?;
    for t in (1..=t_start).rev() {
        let eps = denoise_fn(&x, t).map_err(|e| Error::Denoise {
            step: t,
            source: Box::new(e),
        })?;
        x = if t > 1 {
            let z = ImageTensor::standard_normal(x.shape(), &mut rng)?;
            reverse_step_with(&x, &eps, t, schedule, &z, config)?
        } else {
            reverse_step_with(&x, &eps, t, schedule, &zeros, config)?
        };
    }
    Ok(x)
}
