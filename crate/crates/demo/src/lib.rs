//! Browser bindings for a 2-D guidance playground: noise schedule curves,
//! classifier-free guidance on a two-class mixture, and hybrid-model
//! guidance between a personalized subject and its class.
//!
//! Point sets are returned flat as `[x0, y0, x1, y1, ...]`.

use hld::denoiser::{PromptSpec, SUBJECT_TOKEN};
use hld::guidance::{guided_sample, GuidanceConfig, GuidanceMode, NoisePredictor};
use hld::oracle::{mixture_pair, optimal_eps, GaussianSpec, OracleModel};
use hld::schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
use hld::toy_data::class_token;
use wasm_bindgen::prelude::*;

const VOCAB: usize = 4;
const TRAIN_STEPS: usize = 1000;
/// Location of the personalized subject, a tight cluster beside class 1.
pub const SUBJECT_MEAN: [f64; 2] = [1.5, 1.5];
const SUBJECT_VAR: f64 = 0.05;

/// Two-class mixture plus one subject that only the personalized branch knows.
struct Playground {
    base: OracleModel,
    subject: GaussianSpec,
}

impl Playground {
    fn new() -> hld::Result<Self> {
        let sched = ScheduleSpec { steps: TRAIN_STEPS, ..Default::default() }.build()?;
        let (a, b) = mixture_pair()?;
        Ok(Self {
            base: OracleModel { components: vec![(0.5, a), (0.5, b)], sched },
            subject: GaussianSpec::isotropic(SUBJECT_MEAN.to_vec(), SUBJECT_VAR)?,
        })
    }

    fn sched(&self) -> &NoiseSchedule {
        &self.base.sched
    }
}

impl NoisePredictor for Playground {
    fn dim(&self) -> usize {
        2
    }

    fn has_personalization(&self) -> bool {
        true
    }

    fn eps(&self, x_t: &[f64], t: usize, prompt: &PromptSpec, personalized: bool) -> hld::Result<Vec<f64>> {
        if personalized && prompt.is_subject() {
            optimal_eps(x_t, t, &self.subject, self.sched())
        } else {
            self.base.eps(x_t, t, prompt, personalized)
        }
    }
}

fn prompt(with_subject: bool) -> hld::Result<PromptSpec> {
    let mut tokens = vec![class_token(1)];
    if with_subject {
        tokens.insert(0, SUBJECT_TOKEN);
    }
    PromptSpec::new(tokens, VOCAB)
}

fn flatten(points: Vec<Vec<f64>>) -> Vec<f64> {
    points.into_iter().flatten().collect()
}

fn sample(cfg: GuidanceConfig, subject: bool, n: usize, seed: u64) -> hld::Result<Vec<f64>> {
    let pg = Playground::new()?;
    let ps = prompt(subject)?;
    let pg_prompt = prompt(false)?;
    Ok(flatten(guided_sample(&pg, &ps, &pg_prompt, &cfg, pg.sched(), n, seed)?))
}

/// Per-step `beta`, `alpha_bar` and `sigma = sqrt(1 - alpha_bar)`, concatenated.
#[wasm_bindgen]
pub fn schedule_curves(kind: &str, steps: usize, beta_min: f64, beta_max: f64) -> Result<Vec<f64>, String> {
    let kind = ScheduleKind::parse(kind).map_err(|e| e.to_string())?;
    let sched = ScheduleSpec { kind, steps, beta_min, beta_max }.build().map_err(|e| e.to_string())?;
    let sigmas = sched.alpha_bars().iter().map(|ab| (1.0 - ab).sqrt());
    Ok(sched.betas().iter().copied().chain(sched.alpha_bars().iter().copied()).chain(sigmas).collect())
}

/// Samples of class 1 from the two-class mixture under classifier-free
/// guidance. A scale of 1 is plain conditional sampling.
#[wasm_bindgen]
pub fn cfg_samples(guidance_scale: f64, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>, String> {
    let mode = if guidance_scale == 1.0 { GuidanceMode::None } else { GuidanceMode::Cfg };
    let cfg = GuidanceConfig { mode, steps, ..Default::default() }.with_guidance_scale(guidance_scale);
    sample(cfg, false, n, seed).map_err(|e| e.to_string())
}

/// Hybrid-model guidance between the subject and class 1. `kappa` in
/// `[0, 2]` moves weight from the class toward the subject.
#[wasm_bindgen]
pub fn hmcfg_samples(guidance_scale: f64, kappa: f64, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>, String> {
    let cfg = GuidanceConfig { mode: GuidanceMode::HmCfg, kappa, steps, ..Default::default() }
        .with_guidance_scale(guidance_scale);
    sample(cfg, true, n, seed).map_err(|e| e.to_string())
}

/// Mean of a flat point set.
#[wasm_bindgen]
pub fn mean_xy(points: &[f64]) -> Vec<f64> {
    let n = (points.len() / 2).max(1) as f64;
    let (sx, sy) = points.chunks_exact(2).fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    vec![sx / n, sy / n]
}
