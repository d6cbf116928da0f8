//! A small conditional noise predictor.
//!
//! The trunk sees the preconditioned noisy input plus a learned timestep
//! embedding, attends once over the prompt's token embeddings, and runs a
//! two-layer MLP. The query, key and value projections of that attention
//! block are the only matrices that accept low-rank adapters.
//!
//! Output preconditioning (with `s = sigma_t^2 + alpha_t^2 * sigma_data^2`):
//!
//! ```text
//! eps_hat = sigma_t / s * x_t - alpha_t * sigma_data / sqrt(s) * F(x_t / sqrt(s), t, prompt)
//! ```
//!
//! which keeps the trunk's regression target near unit scale at every step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::lora::{adapter_delta, LoraAdapterSet, Target};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::{axpy, dot, silu, silu_grad, softmax_in_place, Matrix};

/// Vocabulary index of the empty-prompt token.
pub const NULL_TOKEN: usize = 0;
/// Vocabulary index of the reserved subject token.
pub const SUBJECT_TOKEN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub width: usize,
    pub mlp_width: usize,
    pub vocab: usize,
    pub sigma_data: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { data_dim: 256, width: 64, mlp_width: 128, vocab: 16, sigma_data: 0.1 }
    }
}

impl DenoiserConfig {
    /// `(d_out, d_in)` of an adapter target.
    pub fn target_dims(&self, _target: Target) -> (usize, usize) {
        (self.width, self.width)
    }
}

/// A token sequence; `is_subject` records whether the subject token is present.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptSpec {
    tokens: Vec<usize>,
    is_subject: bool,
}

impl PromptSpec {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("prompt needs at least one token".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::UnknownToken(bad));
        }
        let is_subject = tokens.contains(&SUBJECT_TOKEN);
        Ok(Self { tokens, is_subject })
    }

    /// The empty prompt, a single `[NULL]` token.
    pub fn null() -> Self {
        Self { tokens: vec![NULL_TOKEN], is_subject: false }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn is_subject(&self) -> bool {
        self.is_subject
    }

    pub fn is_null(&self) -> bool {
        self.tokens == [NULL_TOKEN]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub schedule: ScheduleSpec,
    sched: NoiseSchedule,
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    /// One row per step `0..=T`.
    pub time_emb: Matrix,
    pub token_emb: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

fn sinusoidal(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..width)
        .map(|i| {
            let k = (i % half.max(1)) as f64;
            let freq = (-(10_000f64).ln() * k / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            if i < half {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, schedule: ScheduleSpec, seed: u64) -> Result<Self> {
        if config.width == 0 || config.mlp_width == 0 || config.data_dim == 0 {
            return Err(Error::InvalidArgument("denoiser widths must be positive".into()));
        }
        if config.vocab < 3 {
            return Err(Error::InvalidArgument("vocabulary must hold [NULL], [V] and a class".into()));
        }
        let sched = schedule.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, n) = (config.width, config.mlp_width, config.data_dim);
        let fan = |k: usize| 1.0 / (k as f64).sqrt();
        let mut time_emb = Matrix::zeros(sched.steps() + 1, d);
        for t in 0..=sched.steps() {
            time_emb.data[t * d..(t + 1) * d].copy_from_slice(&sinusoidal(t, d));
        }
        Ok(Self {
            config,
            schedule,
            w_in: Matrix::randn(d, n, fan(n), &mut rng),
            b_in: vec![0.0; d],
            time_emb,
            token_emb: Matrix::randn(config.vocab, d, 1.0, &mut rng),
            w_q: Matrix::randn(d, d, fan(d), &mut rng),
            w_k: Matrix::randn(d, d, fan(d), &mut rng),
            w_v: Matrix::randn(d, d, fan(d), &mut rng),
            w_o: Matrix::randn(d, d, fan(d), &mut rng),
            w1: Matrix::randn(m, d, fan(d), &mut rng),
            b1: vec![0.0; m],
            w2: Matrix::randn(m, m, fan(m), &mut rng),
            b2: vec![0.0; m],
            w_out: Matrix::randn(n, m, 0.1 * fan(m), &mut rng),
            b_out: vec![0.0; n],
            sched,
        })
    }

    pub fn noise_schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Same shapes, all values zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn target(&self, target: Target) -> &Matrix {
        match target {
            Target::Query => &self.w_q,
            Target::Key => &self.w_k,
            Target::Value => &self.w_v,
        }
    }

    fn target_mut(&mut self, target: Target) -> &mut Matrix {
        match target {
            Target::Query => &mut self.w_q,
            Target::Key => &mut self.w_k,
            Target::Value => &mut self.w_v,
        }
    }

    /// Visits every trainable array in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.w_in.data);
        f(&self.b_in);
        f(&self.time_emb.data);
        f(&self.token_emb.data);
        f(&self.w_q.data);
        f(&self.w_k.data);
        f(&self.w_v.data);
        f(&self.w_o.data);
        f(&self.w1.data);
        f(&self.b1);
        f(&self.w2.data);
        f(&self.b2);
        f(&self.w_out.data);
        f(&self.b_out);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.w_in.data);
        f(&mut self.b_in);
        f(&mut self.time_emb.data);
        f(&mut self.token_emb.data);
        f(&mut self.w_q.data);
        f(&mut self.w_k.data);
        f(&mut self.w_v.data);
        f(&mut self.w_o.data);
        f(&mut self.w1.data);
        f(&mut self.b1);
        f(&mut self.w2.data);
        f(&mut self.b2);
        f(&mut self.w_out.data);
        f(&mut self.b_out);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len(self.param_count(), flat.len())?;
        let mut pos = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        });
        Ok(())
    }

    /// Adds `c * other` to every parameter.
    pub fn add_scaled(&mut self, c: f64, other: &Self) {
        let src = other.to_flat();
        let mut pos = 0;
        self.visit_mut(&mut |s| {
            axpy(c, &src[pos..pos + s.len()], s);
            pos += s.len();
        });
    }

    pub fn check_adapters(&self, adapters: &LoraAdapterSet) -> Result<()> {
        for (target, e) in adapters.entries() {
            let (d_out, d_in) = self.config.target_dims(*target);
            if e.d_out() != d_out || e.d_in() != d_in {
                return Err(Error::AdapterMismatch(format!(
                    "{target} adapter is {}x{}, denoiser expects {d_out}x{d_in}",
                    e.d_out(),
                    e.d_in()
                )));
            }
        }
        Ok(())
    }

    /// Preconditioning coefficients `(c_in, c_skip, c_out)` at step `t`.
    pub fn preconditioning(&self, t: usize) -> (f64, f64, f64) {
        let (a, s) = (self.sched.alpha(t), self.sched.sigma(t));
        let sd = self.config.sigma_data;
        let var = s * s + a * a * sd * sd;
        (1.0 / var.sqrt(), s / var, a * sd / var.sqrt())
    }
}

/// Token embedding rows for a prompt, one per token.
pub fn encode_prompt(prompt: &PromptSpec, params: &DenoiserParams) -> Result<Matrix> {
    let d = params.config.width;
    let mut out = Matrix::zeros(prompt.tokens.len(), d);
    for (i, &tok) in prompt.tokens.iter().enumerate() {
        if tok >= params.config.vocab {
            return Err(Error::UnknownToken(tok));
        }
        out.data[i * d..(i + 1) * d].copy_from_slice(params.token_emb.row(tok));
    }
    Ok(out)
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    t: usize,
    tokens: Vec<usize>,
    x_in: Vec<f64>,
    c_out: f64,
    h0: Vec<f64>,
    q: Vec<f64>,
    q_lora: Option<Vec<f64>>,
    emb: Matrix,
    k: Matrix,
    v: Matrix,
    k_lora: Option<Matrix>,
    v_lora: Option<Matrix>,
    p: Vec<f64>,
    a: Vec<f64>,
    h1: Vec<f64>,
    u1: Vec<f64>,
    g1: Vec<f64>,
    u2: Vec<f64>,
    g2: Vec<f64>,
}

/// `W x + B (A x)`; also returns `A x` when an adapter is present.
fn project(w: &Matrix, adapter: Option<&crate::lora::LoraEntry>, x: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut y = w.matvec(x);
    match adapter {
        Some(e) => {
            let ax = e.a.matvec(x);
            let bax = e.b.matvec(&ax);
            crate::tensor::add_into(&mut y, &bax);
            (y, Some(ax))
        }
        None => (y, None),
    }
}

fn project_rows(
    w: &Matrix,
    adapter: Option<&crate::lora::LoraEntry>,
    rows: &Matrix,
) -> (Matrix, Option<Matrix>) {
    let n = rows.rows;
    let mut out = Matrix::zeros(n, w.rows);
    let mut low = adapter.map(|e| Matrix::zeros(n, e.rank()));
    for i in 0..n {
        let (y, ax) = project(w, adapter, rows.row(i));
        out.data[i * w.rows..(i + 1) * w.rows].copy_from_slice(&y);
        if let (Some(l), Some(ax)) = (low.as_mut(), ax) {
            let r = l.cols;
            l.data[i * r..(i + 1) * r].copy_from_slice(&ax);
        }
    }
    (out, low)
}

/// Forward pass that also returns the cache needed by [`backward`].
pub fn forward(
    x_t: &[f64],
    t: usize,
    prompt: &PromptSpec,
    params: &DenoiserParams,
    adapters: Option<&LoraAdapterSet>,
) -> Result<(Vec<f64>, ForwardCache)> {
    let cfg = &params.config;
    check_len(cfg.data_dim, x_t.len())?;
    if t == 0 || t > params.sched.steps() {
        return Err(Error::StepOutOfRange { t, lo: 1, hi: params.sched.steps() });
    }
    if let Some(ad) = adapters {
        params.check_adapters(ad)?;
    }
    let entry = |target| adapters.and_then(|a| a.get(target));
    let (c_in, c_skip, c_out) = params.preconditioning(t);

    let x_in: Vec<f64> = x_t.iter().map(|v| c_in * v).collect();
    let mut h0 = params.w_in.matvec(&x_in);
    axpy(1.0, &params.b_in, &mut h0);
    axpy(1.0, params.time_emb.row(t), &mut h0);

    let (q, q_lora) = project(&params.w_q, entry(Target::Query), &h0);
    let emb = encode_prompt(prompt, params)?;
    let (k, k_lora) = project_rows(&params.w_k, entry(Target::Key), &emb);
    let (v, v_lora) = project_rows(&params.w_v, entry(Target::Value), &emb);

    let scale = 1.0 / (cfg.width as f64).sqrt();
    let mut p: Vec<f64> = (0..emb.rows).map(|j| scale * dot(&q, k.row(j))).collect();
    softmax_in_place(&mut p);
    let mut a = vec![0.0; cfg.width];
    for (j, pj) in p.iter().enumerate() {
        axpy(*pj, v.row(j), &mut a);
    }

    let mut h1 = h0.clone();
    axpy(1.0, &params.w_o.matvec(&a), &mut h1);

    let mut u1 = params.w1.matvec(&h1);
    axpy(1.0, &params.b1, &mut u1);
    let g1: Vec<f64> = u1.iter().map(|v| silu(*v)).collect();
    let mut u2 = params.w2.matvec(&g1);
    axpy(1.0, &params.b2, &mut u2);
    let g2: Vec<f64> = u2.iter().map(|v| silu(*v)).collect();
    let mut net = params.w_out.matvec(&g2);
    axpy(1.0, &params.b_out, &mut net);

    let out = x_t.iter().zip(&net).map(|(x, n)| c_skip * x - c_out * n).collect();
    let cache = ForwardCache {
        t,
        tokens: prompt.tokens.clone(),
        x_in,
        c_out,
        h0,
        q,
        q_lora,
        emb,
        k,
        v,
        k_lora,
        v_lora,
        p,
        a,
        h1,
        u1,
        g1,
        u2,
        g2,
    };
    Ok((out, cache))
}

/// Predicts the noise in `x_t`. Adapters, when present, act as `W + B A`
/// on each targeted projection.
pub fn denoise(
    x_t: &[f64],
    t: usize,
    prompt: &PromptSpec,
    params: &DenoiserParams,
    adapters: Option<&LoraAdapterSet>,
) -> Result<Vec<f64>> {
    forward(x_t, t, prompt, params, adapters).map(|(out, _)| out)
}

fn accumulate_lora(
    grads: &mut LoraAdapterSet,
    target: Target,
    entry: &crate::lora::LoraEntry,
    d_y: &[f64],
    ax: &[f64],
    x: &[f64],
) {
    // y = W x + B (A x)  =>  dB += dy (Ax)^T,  dA += (B^T dy) x^T
    let bt_dy = entry.b.matvec_t(d_y);
    for (t, g) in grads.entries_mut() {
        if t == target {
            g.b.add_outer(1.0, d_y, ax);
            g.a.add_outer(1.0, &bt_dy, x);
        }
    }
}

/// Back-propagates `d_out = dL/d eps_hat` through one cached forward pass,
/// accumulating into `base_grads` and/or `lora_grads` when given.
pub fn backward(
    cache: &ForwardCache,
    d_out: &[f64],
    params: &DenoiserParams,
    adapters: Option<&LoraAdapterSet>,
    mut base_grads: Option<&mut DenoiserParams>,
    mut lora_grads: Option<&mut LoraAdapterSet>,
) {
    let entry = |target| adapters.and_then(|a| a.get(target));
    let d_net: Vec<f64> = d_out.iter().map(|g| -cache.c_out * g).collect();

    if let Some(g) = base_grads.as_deref_mut() {
        g.w_out.add_outer(1.0, &d_net, &cache.g2);
        axpy(1.0, &d_net, &mut g.b_out);
    }
    let d_g2 = params.w_out.matvec_t(&d_net);
    let d_u2: Vec<f64> = d_g2.iter().zip(&cache.u2).map(|(g, u)| g * silu_grad(*u)).collect();
    if let Some(g) = base_grads.as_deref_mut() {
        g.w2.add_outer(1.0, &d_u2, &cache.g1);
        axpy(1.0, &d_u2, &mut g.b2);
    }
    let d_g1 = params.w2.matvec_t(&d_u2);
    let d_u1: Vec<f64> = d_g1.iter().zip(&cache.u1).map(|(g, u)| g * silu_grad(*u)).collect();
    if let Some(g) = base_grads.as_deref_mut() {
        g.w1.add_outer(1.0, &d_u1, &cache.h1);
        axpy(1.0, &d_u1, &mut g.b1);
    }
    let d_h1 = params.w1.matvec_t(&d_u1);

    if let Some(g) = base_grads.as_deref_mut() {
        g.w_o.add_outer(1.0, &d_h1, &cache.a);
    }
    let d_a = params.w_o.matvec_t(&d_h1);

    // attention
    let n_tok = cache.p.len();
    let scale = 1.0 / (params.config.width as f64).sqrt();
    let d_p: Vec<f64> = (0..n_tok).map(|j| dot(&d_a, cache.v.row(j))).collect();
    let mean_dp: f64 = cache.p.iter().zip(&d_p).map(|(p, g)| p * g).sum();
    let d_s: Vec<f64> = cache.p.iter().zip(&d_p).map(|(p, g)| p * (g - mean_dp)).collect();
    let mut d_q = vec![0.0; params.config.width];
    for j in 0..n_tok {
        axpy(d_s[j] * scale, cache.k.row(j), &mut d_q);
    }

    let q_entry = entry(Target::Query);
    let k_entry = entry(Target::Key);
    let v_entry = entry(Target::Value);
    for j in 0..n_tok {
        let e_j = cache.emb.row(j);
        let d_k: Vec<f64> = cache.q.iter().map(|q| d_s[j] * scale * q).collect();
        let d_v: Vec<f64> = d_a.iter().map(|a| cache.p[j] * a).collect();
        if let Some(g) = base_grads.as_deref_mut() {
            g.w_k.add_outer(1.0, &d_k, e_j);
            g.w_v.add_outer(1.0, &d_v, e_j);
            let mut d_e = params.w_k.matvec_t(&d_k);
            axpy(1.0, &params.w_v.matvec_t(&d_v), &mut d_e);
            if let Some(ke) = k_entry {
                axpy(1.0, &ke.a.matvec_t(&ke.b.matvec_t(&d_k)), &mut d_e);
            }
            if let Some(ve) = v_entry {
                axpy(1.0, &ve.a.matvec_t(&ve.b.matvec_t(&d_v)), &mut d_e);
            }
            let tok = cache.tokens[j];
            let d = params.config.width;
            axpy(1.0, &d_e, &mut g.token_emb.data[tok * d..(tok + 1) * d]);
        }
        if let Some(lg) = lora_grads.as_deref_mut() {
            if let (Some(ke), Some(kl)) = (k_entry, cache.k_lora.as_ref()) {
                accumulate_lora(lg, Target::Key, ke, &d_k, kl.row(j), e_j);
            }
            if let (Some(ve), Some(vl)) = (v_entry, cache.v_lora.as_ref()) {
                accumulate_lora(lg, Target::Value, ve, &d_v, vl.row(j), e_j);
            }
        }
    }
    if let Some(lg) = lora_grads.as_deref_mut() {
        if let (Some(qe), Some(ql)) = (q_entry, cache.q_lora.as_ref()) {
            accumulate_lora(lg, Target::Query, qe, &d_q, ql, &cache.h0);
        }
    }

    if let Some(g) = base_grads {
        g.w_q.add_outer(1.0, &d_q, &cache.h0);
        let mut d_h0 = d_h1;
        axpy(1.0, &params.w_q.matvec_t(&d_q), &mut d_h0);
        if let Some(qe) = q_entry {
            axpy(1.0, &qe.a.matvec_t(&qe.b.matvec_t(&d_q)), &mut d_h0);
        }
        g.w_in.add_outer(1.0, &d_h0, &cache.x_in);
        axpy(1.0, &d_h0, &mut g.b_in);
        let d = params.config.width;
        let t = cache.t;
        axpy(1.0, &d_h0, &mut g.time_emb.data[t * d..(t + 1) * d]);
    }
}

/// Returns parameters with each targeted projection replaced by `W + B A`.
pub fn merge_adapters(params: &DenoiserParams, adapters: &LoraAdapterSet) -> Result<DenoiserParams> {
    params.check_adapters(adapters)?;
    let mut merged = params.clone();
    for (target, e) in adapters.entries() {
        merged.target_mut(*target).add_assign(&adapter_delta(e)?);
    }
    Ok(merged)
}

/// Inverse of [`merge_adapters`].
pub fn unmerge_adapters(params: &DenoiserParams, adapters: &LoraAdapterSet) -> Result<DenoiserParams> {
    params.check_adapters(adapters)?;
    let mut base = params.clone();
    for (target, e) in adapters.entries() {
        base.target_mut(*target).sub_assign(&adapter_delta(e)?);
    }
    Ok(base)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::lora::{new_adapter_set, AdapterInit, LoraEntry};
    use crate::tensor::{max_abs_diff, standard_normal_vec};

    pub(crate) fn tiny_config() -> DenoiserConfig {
        DenoiserConfig { data_dim: 6, width: 4, mlp_width: 5, vocab: 6, sigma_data: 0.5 }
    }

    fn tiny_schedule() -> ScheduleSpec {
        ScheduleSpec { steps: 20, ..ScheduleSpec::default() }
    }

    fn random_adapters(cfg: &DenoiserConfig, rank: usize, seed: u64, std: f64) -> LoraAdapterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = new_adapter_set(&Target::ALL, rank, |t| cfg.target_dims(t), AdapterInit::Zero).unwrap();
        for (_, e) in s.entries_mut() {
            e.a = Matrix::randn(e.a.rows, e.a.cols, std, &mut rng);
            e.b = Matrix::randn(e.b.rows, e.b.cols, std, &mut rng);
        }
        s
    }

    fn prompt(tokens: &[usize]) -> PromptSpec {
        PromptSpec::new(tokens.to_vec(), 16).unwrap()
    }

    #[test]
    fn prompt_flags_and_validation() {
        assert!(prompt(&[1, 2]).is_subject());
        assert!(!prompt(&[2]).is_subject());
        assert!(PromptSpec::null().is_null());
        assert!(matches!(PromptSpec::new(vec![16], 16), Err(Error::UnknownToken(16))));
        assert!(PromptSpec::new(vec![], 16).is_err());
    }

    #[test]
    fn encode_prompt_is_a_lookup() {
        let p = DenoiserParams::init(DenoiserConfig::default(), tiny_schedule(), 3).unwrap();
        let null = encode_prompt(&PromptSpec::null(), &p).unwrap();
        assert_eq!(null.rows, 1);
        assert_eq!(null.row(0), p.token_emb.row(NULL_TOKEN));
        let subj = encode_prompt(&prompt(&[1, 2]), &p).unwrap();
        let gen = encode_prompt(&prompt(&[2]), &p).unwrap();
        assert_eq!(subj, encode_prompt(&prompt(&[1, 2]), &p).unwrap());
        assert_eq!(subj.row(0), p.token_emb.row(SUBJECT_TOKEN));
        assert_eq!(subj.row(1), gen.row(0));
    }

    #[test]
    fn zero_adapters_are_bitwise_neutral() {
        let cfg = DenoiserConfig::default();
        let p = DenoiserParams::init(cfg, tiny_schedule(), 11).unwrap();
        let zero = new_adapter_set(&Target::ALL, 3, |t| cfg.target_dims(t), AdapterInit::Zero).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in [1, 7, 20] {
            let x = standard_normal_vec(cfg.data_dim, &mut rng);
            let pr = prompt(&[1, 3]);
            let a = denoise(&x, t, &pr, &p, None).unwrap();
            let b = denoise(&x, t, &pr, &p, Some(&zero)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn init_and_forward_are_deterministic() {
        let cfg = DenoiserConfig::default();
        let p1 = DenoiserParams::init(cfg, tiny_schedule(), 5).unwrap();
        let p2 = DenoiserParams::init(cfg, tiny_schedule(), 5).unwrap();
        assert_eq!(p1, p2);
        let x = vec![0.25; cfg.data_dim];
        let pr = prompt(&[2]);
        let out = denoise(&x, 4, &pr, &p1, None).unwrap();
        assert_eq!(out, denoise(&x, 4, &pr, &p2, None).unwrap());
        assert_eq!(out.len(), cfg.data_dim);
    }

    #[test]
    fn full_rank_factorization_matches_direct_perturbation() {
        let cfg = tiny_config();
        let p = DenoiserParams::init(cfg, tiny_schedule(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Delta W factored exactly as B = Delta W, A = I
        let mut entries = Vec::new();
        let mut perturbed = p.clone();
        for t in Target::ALL {
            let delta = Matrix::randn(cfg.width, cfg.width, 0.3, &mut rng);
            let mut eye = Matrix::zeros(cfg.width, cfg.width);
            for i in 0..cfg.width {
                eye.set(i, i, 1.0);
            }
            perturbed.target_mut(t).add_assign(&delta);
            entries.push((t, LoraEntry { a: eye, b: delta }));
        }
        let set = LoraAdapterSet::from_entries(entries).unwrap();
        for _ in 0..10 {
            let x = standard_normal_vec(cfg.data_dim, &mut rng);
            let pr = prompt(&[1, 2, 4]);
            let a = denoise(&x, 5, &pr, &p, Some(&set)).unwrap();
            let b = denoise(&x, 5, &pr, &perturbed, None).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-10);
        }
    }

    #[test]
    fn merge_equivalence_and_inverse() {
        let cfg = DenoiserConfig::default();
        let p = DenoiserParams::init(cfg, tiny_schedule(), 21).unwrap();
        let set = random_adapters(&cfg, 3, 4, 0.2);
        let merged = merge_adapters(&p, &set).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            let x = standard_normal_vec(cfg.data_dim, &mut rng);
            let pr = if i % 2 == 0 { prompt(&[1, 2]) } else { PromptSpec::null() };
            let t = 1 + i % 20;
            let a = denoise(&x, t, &pr, &p, Some(&set)).unwrap();
            let b = denoise(&x, t, &pr, &merged, None).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-10);
        }
        let back = unmerge_adapters(&merged, &set).unwrap();
        for t in Target::ALL {
            assert!(max_abs_diff(&back.target(t).data, &p.target(t).data) < 1e-12);
        }
        let zero = set.zeros_like();
        assert_eq!(merge_adapters(&p, &zero).unwrap(), p);
    }

    #[test]
    fn mismatched_adapters_are_rejected() {
        let cfg = DenoiserConfig::default();
        let p = DenoiserParams::init(cfg, tiny_schedule(), 1).unwrap();
        let wrong = new_adapter_set(&Target::ALL, 2, |_| (8, 8), AdapterInit::Zero).unwrap();
        assert!(denoise(&vec![0.0; cfg.data_dim], 1, &PromptSpec::null(), &p, Some(&wrong)).is_err());
        assert!(merge_adapters(&p, &wrong).is_err());
        assert!(denoise(&[0.0; 3], 1, &PromptSpec::null(), &p, None).is_err());
        assert!(denoise(&vec![0.0; cfg.data_dim], 0, &PromptSpec::null(), &p, None).is_err());
        assert!(denoise(&vec![0.0; cfg.data_dim], 21, &PromptSpec::null(), &p, None).is_err());
    }

    fn loss_of(p: &DenoiserParams, ad: Option<&LoraAdapterSet>, x: &[f64], w: &[f64], pr: &PromptSpec) -> f64 {
        dot(&denoise(x, 3, pr, p, ad).unwrap(), w)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny_config();
        let mut p = DenoiserParams::init(cfg, tiny_schedule(), 8).unwrap();
        // give biases some signal
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        p.visit_mut(&mut |s| {
            for v in s.iter_mut() {
                *v += 0.1 * crate::tensor::standard_normal_vec(1, &mut rng)[0];
            }
        });
        let ad = random_adapters(&cfg, 2, 6, 0.5);
        let x = standard_normal_vec(cfg.data_dim, &mut rng);
        let w = standard_normal_vec(cfg.data_dim, &mut rng);
        let pr = prompt(&[1, 2, 5]);

        let (_, cache) = forward(&x, 3, &pr, &p, Some(&ad)).unwrap();
        let mut g = p.zeros_like();
        let mut lg = ad.zeros_like();
        backward(&cache, &w, &p, Some(&ad), Some(&mut g), Some(&mut lg));

        let h = 1e-6;
        let mut analytic = Vec::new();
        g.visit(&mut |s| analytic.extend_from_slice(s));
        let n = analytic.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let bump = |delta: f64| {
                let mut q = p.clone();
                let mut k = 0;
                q.visit_mut(&mut |s| {
                    for v in s.iter_mut() {
                        if k == i {
                            *v += delta;
                        }
                        k += 1;
                    }
                });
                loss_of(&q, Some(&ad), &x, &w, &pr)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max((fd - analytic[i]).abs() / denom);
        }
        assert!(worst < 1e-5, "base grad rel err {worst}");

        let flat = ad.to_flat();
        let lflat = lg.to_flat();
        let mut worst: f64 = 0.0;
        for i in 0..flat.len() {
            let bump = |delta: f64| {
                let mut f = flat.clone();
                f[i] += delta;
                let mut a2 = ad.clone();
                a2.set_from_flat(&f).unwrap();
                loss_of(&p, Some(&a2), &x, &w, &pr)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let denom = fd.abs().max(lflat[i].abs()).max(1e-6);
            worst = worst.max((fd - lflat[i]).abs() / denom);
        }
        assert!(worst < 1e-5, "lora grad rel err {worst}");
    }
}
