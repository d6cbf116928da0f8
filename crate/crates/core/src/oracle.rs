//! Closed-form diffused marginals, scores and optimal noise predictors for
//! Gaussian and Gaussian-mixture data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::PromptSpec;
use crate::error::{check_len, Error, Result};
use crate::guidance::{guided_sample, hmcfg_score_deviation, GuidanceConfig, GuidanceMode, NoisePredictor};
use crate::schedule::{eps_to_score, NoiseSchedule};
use crate::tensor::{dot, Matrix};
use crate::toy_data::{class_token, CLASS_TOKEN_OFFSET};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
    pub label: Option<usize>,
}

impl GaussianSpec {
    pub fn new(mu: Vec<f64>, sigma: Matrix) -> Result<Self> {
        let n = mu.len();
        if sigma.rows != n || sigma.cols != n {
            return Err(Error::ShapeMismatch { expected: n * n, got: sigma.len() });
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (sigma.get(i, j), sigma.get(j, i));
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        // Cholesky succeeds iff the matrix is positive definite.
        cholesky(&sigma).ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
        Ok(Self { mu, sigma, label: None })
    }

    pub fn isotropic(mu: Vec<f64>, var: f64) -> Result<Self> {
        let n = mu.len();
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            s.set(i, i, var);
        }
        Self::new(mu, s)
    }

    pub fn diagonal(mu: Vec<f64>, diag: &[f64]) -> Result<Self> {
        let n = mu.len();
        check_len(n, diag.len())?;
        let mut s = Matrix::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            s.set(i, i, *d);
        }
        Self::new(mu, s)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Log density at `x`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_len(self.dim(), x.len())?;
        let l = cholesky(&self.sigma).ok_or(Error::SingularMatrix)?;
        let diff: Vec<f64> = x.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        let z = forward_substitute(&l, &diff);
        let log_det: f64 = (0..self.dim()).map(|i| l.get(i, i).ln()).sum::<f64>() * 2.0;
        let n = self.dim() as f64;
        Ok(-0.5 * (dot(&z, &z) + log_det + n * (2.0 * std::f64::consts::PI).ln()))
    }

    /// `grad log N(x; mu, Sigma) = -Sigma^{-1} (x - mu)`
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        let diff: Vec<f64> = x.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        Ok(solve(&self.sigma, &diff)?.into_iter().map(|v| -v).collect())
    }
}

fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

fn forward_substitute(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l.get(i, k) * z[k]).sum();
        z[i] = (b[i] - s) / l.get(i, i);
    }
    z
}

/// Solves `A x = b` for a small square matrix: closed forms for 1x1 and
/// 2x2, Gaussian elimination with partial pivoting otherwise.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::InvalidArgument("solve needs a square matrix".into()));
    }
    check_len(n, b.len())?;
    let scale = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tiny = 1e-14 * scale;
    match n {
        1 => {
            if a.get(0, 0).abs() <= tiny {
                return Err(Error::SingularMatrix);
            }
            Ok(vec![b[0] / a.get(0, 0)])
        }
        2 => {
            let det = a.get(0, 0) * a.get(1, 1) - a.get(0, 1) * a.get(1, 0);
            if det.abs() <= tiny * scale {
                return Err(Error::SingularMatrix);
            }
            Ok(vec![
                (a.get(1, 1) * b[0] - a.get(0, 1) * b[1]) / det,
                (a.get(0, 0) * b[1] - a.get(1, 0) * b[0]) / det,
            ])
        }
        _ => {
            let mut m = a.clone();
            let mut x = b.to_vec();
            for col in 0..n {
                let piv = (col..n)
                    .max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))
                    .unwrap();
                if m.get(piv, col).abs() <= tiny {
                    return Err(Error::SingularMatrix);
                }
                if piv != col {
                    for k in 0..n {
                        let tmp = m.get(col, k);
                        m.set(col, k, m.get(piv, k));
                        m.set(piv, k, tmp);
                    }
                    x.swap(col, piv);
                }
                for r in col + 1..n {
                    let f = m.get(r, col) / m.get(col, col);
                    if f != 0.0 {
                        for k in col..n {
                            m.set(r, k, m.get(r, k) - f * m.get(col, k));
                        }
                        x[r] -= f * x[col];
                    }
                }
            }
            for r in (0..n).rev() {
                let s: f64 = (r + 1..n).map(|k| m.get(r, k) * x[k]).sum();
                x[r] = (x[r] - s) / m.get(r, r);
            }
            Ok(x)
        }
    }
}

/// Distribution of `x_t` when `x_0 ~ g`: `N(alpha mu, alpha^2 Sigma + sigma^2 I)`.
pub fn diffused_marginal(g: &GaussianSpec, t: usize, sched: &NoiseSchedule) -> GaussianSpec {
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let mut cov = g.sigma.clone();
    cov.scale(a * a);
    for i in 0..g.dim() {
        cov.set(i, i, cov.get(i, i) + s * s);
    }
    GaussianSpec { mu: g.mu.iter().map(|m| a * m).collect(), sigma: cov, label: g.label }
}

/// The minimum-MSE noise prediction for Gaussian data,
/// `sigma_t (alpha^2 Sigma + sigma^2 I)^{-1} (x_t - alpha mu)`.
pub fn optimal_eps(x_t: &[f64], t: usize, g: &GaussianSpec, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t == 0 || t > sched.steps() {
        return Err(Error::StepOutOfRange { t, lo: 1, hi: sched.steps() });
    }
    let m = diffused_marginal(g, t, sched);
    let s = sched.sigma(t);
    Ok(m.score(x_t)?.into_iter().map(|v| -s * v).collect())
}

/// Score of `sum_k w_k N(x; diffused component k)` at step `t` (`t = 0`
/// scores the clean mixture).
pub fn mixture_score(
    x_t: &[f64],
    t: usize,
    components: &[(f64, GaussianSpec)],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if components.is_empty() {
        return Err(Error::InvalidArgument("mixture has no components".into()));
    }
    let total: f64 = components.iter().map(|(w, _)| *w).sum();
    if components.iter().any(|(w, _)| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("mixture weights must be positive and sum to 1".into()));
    }
    let diffused: Vec<GaussianSpec> = components
        .iter()
        .map(|(_, g)| if t == 0 { g.clone() } else { diffused_marginal(g, t, sched) })
        .collect();
    let logs: Vec<f64> = components
        .iter()
        .zip(&diffused)
        .map(|((w, _), g)| Ok(w.ln() + g.log_density(x_t)?))
        .collect::<Result<_>>()?;
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let norm: f64 = weights.iter().sum();
    let mut score = vec![0.0; x_t.len()];
    for (r, g) in weights.iter().zip(&diffused) {
        crate::tensor::axpy(r / norm, &g.score(x_t)?, &mut score);
    }
    Ok(score)
}

/// Log density of the diffused mixture; the reference for score checks.
pub fn mixture_log_density(
    x_t: &[f64],
    t: usize,
    components: &[(f64, GaussianSpec)],
    sched: &NoiseSchedule,
) -> Result<f64> {
    let logs: Vec<f64> = components
        .iter()
        .map(|(w, g)| {
            let g = if t == 0 { g.clone() } else { diffused_marginal(g, t, sched) };
            Ok(w.ln() + g.log_density(x_t)?)
        })
        .collect::<Result<_>>()?;
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
}

/// Exact noise predictor for labelled Gaussian components. A class prompt
/// selects the component with that label; the null prompt gives the full
/// mixture.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub components: Vec<(f64, GaussianSpec)>,
    pub sched: NoiseSchedule,
}

impl NoisePredictor for OracleModel {
    fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    fn has_personalization(&self) -> bool {
        false
    }

    fn eps(&self, x_t: &[f64], t: usize, prompt: &PromptSpec, _personalized: bool) -> Result<Vec<f64>> {
        if prompt.is_null() {
            let s = self.sched.sigma(t);
            return Ok(mixture_score(x_t, t, &self.components, &self.sched)?.into_iter().map(|v| -s * v).collect());
        }
        let token = *prompt
            .tokens()
            .iter()
            .find(|tok| **tok >= CLASS_TOKEN_OFFSET)
            .ok_or_else(|| Error::InvalidArgument("oracle prompt has no class token".into()))?;
        let (_, g) = self
            .components
            .iter()
            .find(|(_, g)| g.label.map(class_token) == Some(token))
            .ok_or(Error::UnknownToken(token))?;
        optimal_eps(x_t, t, g, &self.sched)
    }
}

/// Sample mean and unbiased covariance.
pub fn sample_moments(samples: &[Vec<f64>]) -> (Vec<f64>, Matrix) {
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for x in samples {
        crate::tensor::axpy(1.0 / n, x, &mut mean);
    }
    let mut cov = Matrix::zeros(d, d);
    for x in samples {
        let c: Vec<f64> = x.iter().zip(&mean).map(|(a, m)| a - m).collect();
        cov.add_outer(1.0 / (n - 1.0), &c, &c);
    }
    (mean, cov)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> OracleCheck {
    OracleCheck { name, passed, detail }
}

fn fd_grad(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut y = x.to_vec();
    for i in 0..x.len() {
        y[i] = x[i] + h;
        let up = f(&y)?;
        y[i] = x[i] - h;
        let down = f(&y)?;
        y[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

fn random_gaussian(rng: &mut ChaCha8Rng, label: usize) -> Result<GaussianSpec> {
    let mu = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let (a, b, c) = (rng.random_range(0.5..2.0), rng.random_range(-0.5..0.5), rng.random_range(0.5..2.0));
    Ok(GaussianSpec::new(mu, Matrix::from_vec(2, 2, vec![a * a + b * b, b * c, b * c, c * c]))?.with_label(label))
}

/// Runs the closed-form invariants plus Monte-Carlo sampling checks with
/// `chains` chains each.
pub fn verify_suite(sched: &NoiseSchedule, chains: usize, seed: u64) -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let one = NoiseSchedule::from_betas(vec![0.28])?;
    let g = GaussianSpec::diagonal(vec![2.0, 0.0], &[4.0, 1.0])?;
    let m = diffused_marginal(&g, 1, &one);
    let err = (m.mu[0] - 2.0 * 0.72f64.sqrt()).abs() + (m.sigma.get(0, 0) - 3.16).abs() + (m.sigma.get(1, 1) - 1.0).abs();
    out.push(check("marginal_closed_form", err < 1e-12, format!("abs error {err:.3e}")));

    let mut worst = 0.0f64;
    let mut worst_inv = 0.0f64;
    for _ in 0..50 {
        let g = random_gaussian(&mut rng, 0)?;
        let t = rng.random_range(1..=sched.steps());
        let x = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let m = diffused_marginal(&g, t, sched);
        let fd = fd_grad(|y| m.log_density(y), &x, 1e-5)?;
        let eps = optimal_eps(&x, t, &g, sched)?;
        let score = eps_to_score(&eps, sched.sigma(t))?;
        worst = worst.max(crate::tensor::max_abs_diff(&score, &fd));
        worst_inv = worst_inv.max(crate::tensor::max_abs_diff(&score, &m.score(&x)?));
    }
    out.push(check("optimal_eps_matches_numeric_score", worst < 1e-6, format!("max abs error {worst:.3e}")));
    out.push(check("eps_score_inverse", worst_inv < 1e-12, format!("max abs error {worst_inv:.3e}")));

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let w = rng.random_range(0.2..0.8);
        let comps = vec![(w, random_gaussian(&mut rng, 0)?), (1.0 - w, random_gaussian(&mut rng, 1)?)];
        let t = rng.random_range(0..=sched.steps());
        let x = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let fd = fd_grad(|y| mixture_log_density(y, t, &comps, sched), &x, 1e-5)?;
        worst = worst.max(crate::tensor::max_abs_diff(&mixture_score(&x, t, &comps, sched)?, &fd));
    }
    out.push(check("mixture_score_matches_numeric_score", worst < 1e-6, format!("max abs error {worst:.3e}")));

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let v = |r: &mut ChaCha8Rng| (0..3).map(|_| r.random_range(-3.0..3.0)).collect::<Vec<f64>>();
        let (a, b, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let sigma = rng.random_range(0.01..1.0);
        let w = rng.random_range(0.0..10.0);
        let kappa = rng.random_range(0.0..=2.0);
        worst = worst.max(hmcfg_score_deviation(&a, &b, &n, sigma, w, kappa)?);
    }
    out.push(check("hmcfg_score_form", worst < 1e-10, format!("max deviation {worst:.3e}")));

    if chains >= 2 {
        let g = GaussianSpec::new(vec![1.0, -0.5], Matrix::from_vec(2, 2, vec![1.5, 0.9, 0.9, 1.0]))?.with_label(0);
        let model = OracleModel { components: vec![(1.0, g.clone())], sched: sched.clone() };
        let prompt = PromptSpec::new(vec![class_token(0)], class_token(0) + 1)?;
        let cfg = GuidanceConfig { mode: GuidanceMode::None, steps: sched.steps(), ..Default::default() };
        let xs = guided_sample(&model, &prompt, &prompt, &cfg, sched, chains, seed)?;
        let (mean, cov) = sample_moments(&xs);
        let n = chains as f64;
        let mean_ok = (0..2).all(|i| (mean[i] - g.mu[i]).abs() <= 3.0 * (g.sigma.get(i, i) / n).sqrt());
        let rel = (0..4)
            .map(|k| ((cov.data[k] - g.sigma.data[k]) / g.sigma.data[k]).abs())
            .fold(0.0, f64::max);
        out.push(check(
            "ancestral_sampling_recovers_gaussian",
            mean_ok && rel < 0.05,
            format!("mean {mean:.4?} (target {:?}), max cov rel error {rel:.4}", g.mu),
        ));

        let (a, b) = mixture_pair()?;
        let model = OracleModel { components: vec![(0.5, a), (0.5, b.clone())], sched: sched.clone() };
        let prompt = PromptSpec::new(vec![class_token(1)], class_token(1) + 1)?;
        let cfg = GuidanceConfig { mode: GuidanceMode::Cfg, w: 2.0, steps: sched.steps(), ..Default::default() };
        let xs = guided_sample(&model, &prompt, &prompt, &cfg, sched, chains, seed)?;
        let along: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        let m = along.iter().sum::<f64>() / n;
        let var = along.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        out.push(check(
            "cfg_moves_beyond_conditional_mean",
            m - b.mu[0] > 3.0 * se,
            format!("guided mean {m:.4} vs conditional mean {} (se {se:.4})", b.mu[0]),
        ));
    }
    Ok(out)
}

/// Two unit-variance classes at `(-1, 0)` (label 0) and `(1, 0)` (label 1).
pub fn mixture_pair() -> Result<(GaussianSpec, GaussianSpec)> {
    Ok((
        GaussianSpec::isotropic(vec![-1.0, 0.0], 1.0)?.with_label(0),
        GaussianSpec::isotropic(vec![1.0, 0.0], 1.0)?.with_label(1),
    ))
}
