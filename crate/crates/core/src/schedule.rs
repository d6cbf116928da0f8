//! Variance-preserving noise schedules, forward noising, the score/noise
//! relation and the ancestral reverse step.
//!
//! Step indices are 1-based: `t = 1..=T` index the noisy states and `t = 0`
//! is clean data (`alpha_bar(0) = 1`).

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::InvalidArgument(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// The serializable description of a schedule; `alpha_bar` is always
/// recomputed from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, steps: 1000, beta_min: 1e-4, beta_max: 0.02 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "betas must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_min],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Number of noisy steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            Err(Error::StepOutOfRange { t, lo, hi: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Signal scale `sqrt(alpha_bar_t)`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    /// Noise scale `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Posterior variance of `x_{t-1}` given `x_t` and `x_0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Keeps every `stride`-th step, `stride = floor(T / steps)`, and
    /// returns the equivalent shorter schedule together with the original
    /// step index behind each of its steps.
    pub fn respace(&self, steps: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        if steps == 0 || steps > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "cannot respace {} steps into {steps}",
                self.steps()
            )));
        }
        let stride = self.steps() / steps;
        let timesteps: Vec<usize> = (1..=steps).map(|i| i * stride).collect();
        let mut prev = 1.0;
        let betas = timesteps
            .iter()
            .map(|&t| {
                let ab = self.alpha_bar(t);
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Ok((NoiseSchedule::from_betas(betas)?, timesteps))
    }
}

/// A tensor tagged with its diffusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub x: Vec<f64>,
    pub shape: Vec<usize>,
    pub t: usize,
}

impl DiffusionSample {
    pub fn new(x: Vec<f64>, shape: Vec<usize>, t: usize, sched: &NoiseSchedule) -> Result<Self> {
        check_len(shape.iter().product(), x.len())?;
        if t > sched.steps() {
            return Err(Error::StepOutOfRange { t, lo: 0, hi: sched.steps() });
        }
        Ok(Self { x, shape, t })
    }

    pub fn is_clean(&self) -> bool {
        self.t == 0
    }
}

/// `x_t = alpha_t * x0 + sigma_t * eps`
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len(x0.len(), eps.len())?;
    sched.check_t(t, 1)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

pub fn eps_to_score(eps: &[f64], sigma_t: f64) -> Result<Vec<f64>> {
    if !(sigma_t > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_t must be positive, got {sigma_t}")));
    }
    Ok(eps.iter().map(|e| -e / sigma_t).collect())
}

pub fn score_to_eps(score: &[f64], sigma_t: f64) -> Result<Vec<f64>> {
    if !(sigma_t > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_t must be positive, got {sigma_t}")));
    }
    Ok(score.iter().map(|s| -s * sigma_t).collect())
}

/// One ancestral step `x_t -> x_{t-1}` with posterior variance. `noise` must
/// be supplied for `t > 1` and must be absent at `t = 1`, where only the
/// posterior mean is returned.
pub fn reverse_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    check_len(x_t.len(), eps_hat.len())?;
    sched.check_t(t, 1)?;
    let beta = sched.beta(t);
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let coef = beta / sched.sigma(t);
    let mut out: Vec<f64> =
        x_t.iter().zip(eps_hat).map(|(x, e)| inv_sqrt_alpha * (x - coef * e)).collect();
    match (t, noise) {
        (1, Some(_)) => {
            return Err(Error::InvalidArgument("noise must be absent at the final step".into()))
        }
        (1, None) => {}
        (_, Some(z)) => {
            check_len(x_t.len(), z.len())?;
            let std = sched.posterior_variance(t).sqrt();
            out.iter_mut().zip(z).for_each(|(o, zi)| *o += std * zi);
        }
        (_, None) => {
            return Err(Error::InvalidArgument(format!("noise required at step {t}")))
        }
    }
    Ok(out)
}
