//! Classifier-free and hybrid-model guidance, and the guided ancestral
//! sampling loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::denoiser::{denoise, DenoiserParams, PromptSpec};
use crate::error::{check_len, Error, Result};
use crate::lora::LoraAdapterSet;
use crate::schedule::{eps_to_score, reverse_step, NoiseSchedule};
use crate::tensor::standard_normal_vec;
use crate::toy_data::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    None,
    Cfg,
    HmCfg,
}

impl GuidanceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::HmCfg => "hmcfg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(GuidanceMode::None),
            "cfg" => Ok(GuidanceMode::Cfg),
            "hmcfg" | "hm-cfg" => Ok(GuidanceMode::HmCfg),
            other => Err(Error::InvalidArgument(format!("unknown guidance mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Guidance strength; the user-facing guidance scale is `w + 1`.
    pub w: f64,
    pub kappa: f64,
    pub steps: usize,
    /// Use the personalized model for the unconditional branch of HM-CFG.
    pub uncond_personalized: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { mode: GuidanceMode::Cfg, w: 6.5, kappa: 1.0, steps: 30, uncond_personalized: false }
    }
}

impl GuidanceConfig {
    pub fn guidance_scale(&self) -> f64 {
        self.w + 1.0
    }

    pub fn with_guidance_scale(mut self, scale: f64) -> Self {
        self.w = scale - 1.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0) || !self.w.is_finite() {
            return Err(Error::InvalidArgument(format!("w must be >= 0, got {}", self.w)));
        }
        check_kappa(self.kappa)?;
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(0.0..=2.0).contains(&kappa) {
        return Err(Error::InvalidArgument(format!("kappa out of [0,2], got {kappa}")));
    }
    Ok(())
}

/// Weights on `(eps_cond, eps_uncond)`.
pub fn cfg_coefficients(w: f64) -> [f64; 2] {
    [w + 1.0, -w]
}

/// Weights on `(eps_pers_cS, eps_base_cG, eps_base_null)`.
pub fn hmcfg_coefficients(w: f64, kappa: f64) -> [f64; 3] {
    let s = w + 1.0;
    [s * kappa, s * (2.0 - kappa), 1.0 - 2.0 * s]
}

/// `eps(null) + (w + 1) (eps(c) - eps(null))`, evaluated as
/// `eps(c) + w (eps(c) - eps(null))` so that `w = 0` returns `eps(c)` exactly.
pub fn cfg_eps(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_len(eps_cond.len(), eps_uncond.len())?;
    Ok(eps_cond.iter().zip(eps_uncond).map(|(c, u)| c + w * (c - u)).collect())
}

/// `eps0(null) + (w + 1) (kappa eps(c_S) + (2 - kappa) eps0(c_G) - 2 eps0(null))`,
/// evaluated as CFG at scale `2 (w + 1)` around the blended conditional
/// `m = (kappa eps(c_S) + (2 - kappa) eps0(c_G)) / 2`.
pub fn hmcfg_eps(
    eps_pers_cs: &[f64],
    eps_base_cg: &[f64],
    eps_base_null: &[f64],
    w: f64,
    kappa: f64,
) -> Result<Vec<f64>> {
    check_len(eps_pers_cs.len(), eps_base_cg.len())?;
    check_len(eps_pers_cs.len(), eps_base_null.len())?;
    check_kappa(kappa)?;
    let w2 = 2.0 * (w + 1.0) - 1.0;
    Ok(eps_pers_cs
        .iter()
        .zip(eps_base_cg)
        .zip(eps_base_null)
        .map(|((a, b), n)| {
            let m = (kappa * a + (2.0 - kappa) * b) / 2.0;
            m + w2 * (m - n)
        })
        .collect())
}

/// Converts the HM-CFG combination to a score and compares it with the
/// same rule composed directly from the three scores. Returns the max
/// absolute difference.
pub fn hmcfg_score_deviation(
    eps_pers_cs: &[f64],
    eps_base_cg: &[f64],
    eps_base_null: &[f64],
    sigma_t: f64,
    w: f64,
    kappa: f64,
) -> Result<f64> {
    let via_eps = eps_to_score(&hmcfg_eps(eps_pers_cs, eps_base_cg, eps_base_null, w, kappa)?, sigma_t)?;
    let s_s = eps_to_score(eps_pers_cs, sigma_t)?;
    let s_g = eps_to_score(eps_base_cg, sigma_t)?;
    let s_n = eps_to_score(eps_base_null, sigma_t)?;
    let s = w + 1.0;
    Ok(via_eps
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let direct = s_n[i] + s * (kappa * s_s[i] + (2.0 - kappa) * s_g[i] - 2.0 * s_n[i]);
            (v - direct).abs()
        })
        .fold(0.0, f64::max))
}

/// Anything that predicts noise for a prompt at an original-schedule step.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;

    fn has_personalization(&self) -> bool;

    /// `personalized` selects the adapted model when one exists.
    fn eps(&self, x_t: &[f64], t: usize, prompt: &PromptSpec, personalized: bool) -> Result<Vec<f64>>;
}

/// A trained denoiser, optionally with subject adapters.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserModel<'a> {
    pub params: &'a DenoiserParams,
    pub adapters: Option<&'a LoraAdapterSet>,
}

impl NoisePredictor for DenoiserModel<'_> {
    fn dim(&self) -> usize {
        self.params.config.data_dim
    }

    fn has_personalization(&self) -> bool {
        self.adapters.is_some()
    }

    fn eps(&self, x_t: &[f64], t: usize, prompt: &PromptSpec, personalized: bool) -> Result<Vec<f64>> {
        let adapters = if personalized { self.adapters } else { None };
        denoise(x_t, t, prompt, self.params, adapters)
    }
}

/// Model-level form of [`hmcfg_score_deviation`].
#[allow(clippy::too_many_arguments)]
pub fn hmcfg_score_identity_check(
    x_t: &[f64],
    t: usize,
    model: &dyn NoisePredictor,
    prompt_s: &PromptSpec,
    prompt_g: &PromptSpec,
    w: f64,
    kappa: f64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let e_s = model.eps(x_t, t, prompt_s, true)?;
    let e_g = model.eps(x_t, t, prompt_g, false)?;
    let e_n = model.eps(x_t, t, &PromptSpec::null(), false)?;
    hmcfg_score_deviation(&e_s, &e_g, &e_n, sched.sigma(t), w, kappa)
}

fn guided_eps(
    model: &dyn NoisePredictor,
    x: &[f64],
    t: usize,
    prompt_s: &PromptSpec,
    prompt_g: &PromptSpec,
    g: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let pers = model.has_personalization();
    let null = PromptSpec::null();
    match g.mode {
        GuidanceMode::None => model.eps(x, t, prompt_s, pers),
        GuidanceMode::Cfg => {
            let c = model.eps(x, t, prompt_s, pers)?;
            let u = model.eps(x, t, &null, pers)?;
            cfg_eps(&c, &u, g.w)
        }
        GuidanceMode::HmCfg => {
            let a = model.eps(x, t, prompt_s, true)?;
            let b = model.eps(x, t, prompt_g, false)?;
            let n = model.eps(x, t, &null, g.uncond_personalized)?;
            hmcfg_eps(&a, &b, &n, g.w, g.kappa)
        }
    }
}

/// Draws `n` samples with ancestral sampling over `g.steps` strided steps
/// of `sched`. Chain `i` uses its own stream derived from `(seed, i)`, so
/// results do not depend on thread count.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample(
    model: &dyn NoisePredictor,
    prompt_s: &PromptSpec,
    prompt_g: &PromptSpec,
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    g.validate()?;
    if g.mode == GuidanceMode::HmCfg {
        if !model.has_personalization() {
            return Err(Error::AdapterMismatch("hmcfg sampling needs subject adapters".into()));
        }
        if prompt_g.is_subject() {
            return Err(Error::InvalidArgument("generic prompt must not contain the subject token".into()));
        }
    }
    let (respaced, timesteps) = sched.respace(g.steps)?;
    let dim = model.dim();
    (0..n)
        .into_par_iter()
        .map(|chain| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, chain as u64));
            let mut x = standard_normal_vec(dim, &mut rng);
            for i in (1..=timesteps.len()).rev() {
                let eps = guided_eps(model, &x, timesteps[i - 1], prompt_s, prompt_g, g)?;
                let noise = (i > 1).then(|| standard_normal_vec(dim, &mut rng));
                x = reverse_step(&x, &eps, i, &respaced, noise.as_deref())?;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample {chain}")));
            }
            Ok(x)
        })
        .collect()
}

const SAMPLE_MAGIC: &[u8; 4] = b"HSMP";
const SAMPLE_VERSION: u16 = 1;

/// Encodes samples as `HSMP | u16 version | u8 rank | u32 dims.. | f32 data`.
/// The leading dimension is the sample count.
pub fn encode_samples(samples: &[Vec<f64>], item_shape: &[usize]) -> Result<Vec<u8>> {
    let item: usize = item_shape.iter().product();
    let mut out = Vec::with_capacity(16 + samples.len() * item * 4);
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    out.push((item_shape.len() + 1) as u8);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for d in item_shape {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for s in samples {
        check_len(item, s.len())?;
        for v in s {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Inverse of [`encode_samples`]; returns the samples and the item shape.
pub fn decode_samples(bytes: &[u8]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut r = crate::checkpoint::Reader::new(bytes);
    if r.take(4)? != SAMPLE_MAGIC {
        return Err(Error::Format("not a sample file".into()));
    }
    let version = r.u16()?;
    if version != SAMPLE_VERSION {
        return Err(Error::Version { found: version, expected: SAMPLE_VERSION });
    }
    let rank = r.u8()? as usize;
    if rank == 0 {
        return Err(Error::Format("sample file has rank 0".into()));
    }
    let n = r.u32()? as usize;
    let shape: Vec<usize> = (1..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let item: usize = shape.iter().product();
    let samples = (0..n).map(|_| r.f32_vec(item)).collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after samples".into()));
    }
    Ok((samples, shape))
}
