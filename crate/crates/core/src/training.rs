//! Diffusion objectives, the hypernetwork objective with its output-norm
//! penalty, and the training loops built on them.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::denoiser::{backward, forward, DenoiserParams, PromptSpec};
use crate::error::{Error, Result};
use crate::guidance::NoisePredictor;
use crate::hypernet::{backward_predict, predict_with_cache, HypernetParams};
use crate::lora::{adapter_sq_norm, new_adapter_set, AdapterInit, LoraAdapterSet, Target};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::schedule::{forward_diffuse, NoiseSchedule, ScheduleSpec};
use crate::tensor::standard_normal_vec;
use crate::toy_data::{make_prompt, SubjectImages};

/// Items are split into this many fixed chunks for parallel gradient
/// accumulation, so reductions do not depend on the thread count.
const CHUNKS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Subjects per hypernet step, or items per step for the other loops.
    pub batch_size: usize,
    /// Diffusion draws per subject in a hypernet step.
    pub items_per_subject: usize,
    pub steps: usize,
    pub seed: u64,
    pub prompt_dropout: f64,
    pub schedule: ScheduleSpec,
    pub optimizer: OptimizerSpec,
    pub weight_decay: f64,
    /// Evaluate the class-prior term on the base model instead of the
    /// adapted one.
    pub reg_on_base: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 0.15,
            lr: 1e-3,
            batch_size: 16,
            items_per_subject: 4,
            steps: 1000,
            seed: 0,
            prompt_dropout: 0.1,
            schedule: ScheduleSpec::default(),
            optimizer: OptimizerSpec::default(),
            weight_decay: 1e-4,
            reg_on_base: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.gamma >= 0.0) || !(self.lambda >= 0.0) {
            return bad("gamma and lambda must be >= 0");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be finite and >= 0");
        }
        if self.batch_size == 0 || self.items_per_subject == 0 || self.steps == 0 {
            return bad("batch size, items per subject and steps must be >= 1");
        }
        if !(0.0..1.0).contains(&self.prompt_dropout) {
            return bad("prompt dropout must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be >= 0");
        }
        Ok(())
    }
}

/// A clean example with its prompt and a stored `(t, eps)` draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionItem {
    pub x0: Vec<f64>,
    pub prompt: PromptSpec,
    pub t: usize,
    pub eps: Vec<f64>,
}

impl DiffusionItem {
    pub fn draw<R: Rng + ?Sized>(x0: Vec<f64>, prompt: PromptSpec, sched: &NoiseSchedule, rng: &mut R) -> Self {
        let t = rng.random_range(1..=sched.steps());
        let eps = standard_normal_vec(x0.len(), rng);
        Self { x0, prompt, t, eps }
    }
}

/// One subject's contribution to a hypernet step.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Hypernet inputs.
    pub references: Vec<Vec<f64>>,
    pub subject: Vec<DiffusionItem>,
    pub reg: Vec<DiffusionItem>,
}

impl Batch {
    pub fn new(references: Vec<Vec<f64>>, subject: Vec<DiffusionItem>, reg: Vec<DiffusionItem>) -> Result<Self> {
        if references.is_empty() || subject.is_empty() {
            return Err(Error::InvalidArgument("batch needs references and subject items".into()));
        }
        if subject.iter().any(|i| !i.prompt.is_subject()) {
            return Err(Error::InvalidArgument("subject prompts must contain the subject token".into()));
        }
        if reg.iter().any(|i| i.prompt.is_subject()) {
            return Err(Error::InvalidArgument("class-prior prompts must not contain the subject token".into()));
        }
        Ok(Self { references, subject, reg })
    }
}

fn check_items(items: &[DiffusionItem]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("loss needs at least one item".into()));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

/// `(1/N) sum ||eps_hat(x_t, t, c) - eps||^2` for any noise predictor.
pub fn diffusion_loss(
    items: &[DiffusionItem],
    model: &dyn NoisePredictor,
    personalized: bool,
    sched: &NoiseSchedule,
) -> Result<f64> {
    check_items(items)?;
    let per_item: Vec<f64> = items
        .par_iter()
        .map(|it| {
            let x_t = forward_diffuse(&it.x0, it.t, &it.eps, sched)?;
            let out = model.eps(&x_t, it.t, &it.prompt, personalized)?;
            Ok(crate::tensor::sq_dist(&out, &it.eps))
        })
        .collect::<Result<_>>()?;
    Ok(per_item.iter().sum::<f64>() / items.len() as f64)
}

/// Denoising loss on subject pairs.
pub fn loss_ft(
    items: &[DiffusionItem],
    params: &DenoiserParams,
    adapters: Option<&LoraAdapterSet>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let model = crate::guidance::DenoiserModel { params, adapters };
    diffusion_loss(items, &model, true, sched)
}

/// Denoising loss on class-prior pairs; the same formula as [`loss_ft`].
pub fn loss_reg(
    items: &[DiffusionItem],
    params: &DenoiserParams,
    adapters: Option<&LoraAdapterSet>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    loss_ft(items, params, adapters, sched)
}

fn chunked<T: Send>(
    items: &[DiffusionItem],
    work: impl Fn(&[DiffusionItem]) -> Result<(f64, T)> + Sync + Send,
) -> Result<Vec<(f64, T)>> {
    let size = items.len().div_ceil(CHUNKS).max(1);
    items.par_chunks(size).map(work).collect()
}

/// Loss and its gradient with respect to the adapter factors.
pub fn lora_loss_grad(
    items: &[DiffusionItem],
    params: &DenoiserParams,
    adapters: &LoraAdapterSet,
    sched: &NoiseSchedule,
) -> Result<(f64, LoraAdapterSet)> {
    check_items(items)?;
    let scale = 1.0 / items.len() as f64;
    let parts = chunked(items, |chunk| {
        let mut g = adapters.zeros_like();
        let mut loss = 0.0;
        for it in chunk {
            let x_t = forward_diffuse(&it.x0, it.t, &it.eps, sched)?;
            let (out, cache) = forward(&x_t, it.t, &it.prompt, params, Some(adapters))?;
            let d: Vec<f64> = out.iter().zip(&it.eps).map(|(o, e)| 2.0 * scale * (o - e)).collect();
            loss += crate::tensor::sq_dist(&out, &it.eps);
            backward(&cache, &d, params, Some(adapters), None, Some(&mut g));
        }
        Ok((loss, g))
    })?;
    let mut total = 0.0;
    let mut grad = adapters.zeros_like();
    for (l, g) in parts {
        total += l;
        grad.add_scaled(1.0, &g);
    }
    Ok((total * scale, grad))
}

/// Loss and its gradient with respect to every denoiser parameter.
pub fn base_loss_grad(
    items: &[DiffusionItem],
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<(f64, DenoiserParams)> {
    check_items(items)?;
    let scale = 1.0 / items.len() as f64;
    let parts = chunked(items, |chunk| {
        let mut g = params.zeros_like();
        let mut loss = 0.0;
        for it in chunk {
            let x_t = forward_diffuse(&it.x0, it.t, &it.eps, sched)?;
            let (out, cache) = forward(&x_t, it.t, &it.prompt, params, None)?;
            let d: Vec<f64> = out.iter().zip(&it.eps).map(|(o, e)| 2.0 * scale * (o - e)).collect();
            loss += crate::tensor::sq_dist(&out, &it.eps);
            backward(&cache, &d, params, None, Some(&mut g), None);
        }
        Ok((loss, g))
    })?;
    let mut total = 0.0;
    let mut grad = params.zeros_like();
    for (l, g) in parts {
        total += l;
        grad.add_scaled(1.0, &g);
    }
    Ok((total * scale, grad))
}

/// The terms of the hypernet objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub loss_ft: f64,
    pub loss_reg: f64,
    pub sq_norm: f64,
    pub total: f64,
}

impl LossParts {
    fn new(loss_ft: f64, loss_reg: f64, sq_norm: f64, cfg: &TrainConfig) -> Self {
        let total = loss_ft + cfg.gamma * loss_reg + cfg.lambda * sq_norm;
        Self { loss_ft, loss_reg, sq_norm, total }
    }

    fn add_scaled(&mut self, c: f64, o: &LossParts) {
        self.loss_ft += c * o.loss_ft;
        self.loss_reg += c * o.loss_reg;
        self.sq_norm += c * o.sq_norm;
        self.total += c * o.total;
    }
}

/// `loss_ft + gamma * loss_reg + lambda * ||h(x)||^2` with adapters
/// predicted from the batch references.
pub fn hypernet_loss(
    batch: &Batch,
    hyper: &HypernetParams,
    params: &DenoiserParams,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<LossParts> {
    let adapters = crate::hypernet::predict(&batch.references, hyper)?;
    let ft = loss_ft(&batch.subject, params, Some(&adapters), sched)?;
    let reg = if batch.reg.is_empty() {
        0.0
    } else {
        let a = if cfg.reg_on_base { None } else { Some(&adapters) };
        loss_reg(&batch.reg, params, a, sched)?
    };
    Ok(LossParts::new(ft, reg, adapter_sq_norm(&adapters), cfg))
}

/// [`hypernet_loss`] plus its gradient with respect to the hypernet.
pub fn hypernet_loss_grad(
    batch: &Batch,
    hyper: &HypernetParams,
    params: &DenoiserParams,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<(LossParts, HypernetParams)> {
    let (adapters, caches) = predict_with_cache(&batch.references, hyper)?;
    let (ft, mut d_beta) = lora_loss_grad(&batch.subject, params, &adapters, sched)?;
    let mut reg = 0.0;
    if !batch.reg.is_empty() {
        if cfg.reg_on_base {
            reg = loss_reg(&batch.reg, params, None, sched)?;
        } else {
            let (l, g) = lora_loss_grad(&batch.reg, params, &adapters, sched)?;
            reg = l;
            d_beta.add_scaled(cfg.gamma, &g);
        }
    }
    d_beta.add_scaled(2.0 * cfg.lambda, &adapters);
    let mut grads = hyper.zeros_like();
    backward_predict(&caches, &d_beta, hyper, &mut grads)?;
    Ok((LossParts::new(ft, reg, adapter_sq_norm(&adapters), cfg), grads))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub loss_ft: f64,
    pub loss_reg: f64,
    pub sq_norm: f64,
    pub total: f64,
}

impl LogRecord {
    fn from_parts(step: usize, p: &LossParts) -> Self {
        Self { step, loss_ft: p.loss_ft, loss_reg: p.loss_reg, sq_norm: p.sq_norm, total: p.total }
    }

    /// `{"step":..,"loss_ft":..,"loss_reg":..,"sq_norm":..,"total":..}`
    pub fn to_line(&self) -> String {
        format!(
            "{{\"step\":{},\"loss_ft\":{:e},\"loss_reg\":{:e},\"sq_norm\":{:e},\"total\":{:e}}}",
            self.step, self.loss_ft, self.loss_reg, self.sq_norm, self.total
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad log record `{line}`"));
        let body = line.trim().strip_prefix('{').and_then(|s| s.strip_suffix('}')).ok_or_else(bad)?;
        let mut vals = [None; 5];
        for field in body.split(',') {
            let (k, v) = field.split_once(':').ok_or_else(bad)?;
            let idx = match k.trim().trim_matches('"') {
                "step" => 0,
                "loss_ft" => 1,
                "loss_reg" => 2,
                "sq_norm" => 3,
                "total" => 4,
                _ => return Err(bad()),
            };
            vals[idx] = Some(v.trim().parse::<f64>().map_err(|_| bad())?);
        }
        let get = |i: usize| vals[i].ok_or_else(bad);
        Ok(Self { step: get(0)? as usize, loss_ft: get(1)?, loss_reg: get(2)?, sq_norm: get(3)?, total: get(4)? })
    }
}

/// Subjects with images plus a class-prior pool per class.
#[derive(Debug, Clone)]
pub struct HypernetDataset {
    pub subjects: Vec<SubjectImages>,
    pub prior: Vec<Vec<Vec<f64>>>,
    pub vocab: usize,
}

impl HypernetDataset {
    pub fn new(subjects: Vec<SubjectImages>, prior: Vec<Vec<Vec<f64>>>, vocab: usize) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InvalidArgument("dataset has no subjects".into()));
        }
        for s in &subjects {
            if s.images.is_empty() {
                return Err(Error::InvalidArgument("subject without images".into()));
            }
            if prior.get(s.spec.class_id).is_none_or(|p| p.is_empty()) {
                return Err(Error::InvalidArgument(format!("no class-prior pool for class {}", s.spec.class_id)));
            }
        }
        Ok(Self { subjects, prior, vocab })
    }

    pub fn num_classes(&self) -> usize {
        self.prior.len()
    }
}

/// Draws one subject's batch: one reference image, and
/// `cfg.items_per_subject` subject and class-prior items.
pub fn sample_batch<R: Rng + ?Sized>(
    subject: &SubjectImages,
    prior: &[Vec<f64>],
    num_classes: usize,
    vocab: usize,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Batch> {
    let class = subject.spec.class_id;
    let c_s = make_prompt(class, true, num_classes, vocab)?;
    let c_g = make_prompt(class, false, num_classes, vocab)?;
    let reference = subject.images.choose(rng).expect("non-empty").clone();
    let subject_items = (0..cfg.items_per_subject)
        .map(|_| {
            let x = subject.images.choose(rng).expect("non-empty").clone();
            DiffusionItem::draw(x, c_s.clone(), sched, rng)
        })
        .collect();
    let reg_items = if cfg.gamma > 0.0 {
        (0..cfg.items_per_subject)
            .map(|_| {
                let x = prior.choose(rng).expect("non-empty").clone();
                DiffusionItem::draw(x, c_g.clone(), sched, rng)
            })
            .collect()
    } else {
        Vec::new()
    };
    Batch::new(vec![reference], subject_items, reg_items)
}

/// Minimizes the hypernet objective with the denoiser frozen. `on_record`
/// sees every log record as it is produced.
pub fn train_hypernet(
    data: &HypernetDataset,
    params: &DenoiserParams,
    init: HypernetParams,
    cfg: &TrainConfig,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<(HypernetParams, Vec<LogRecord>)> {
    cfg.validate()?;
    let sched = params.noise_schedule().clone();
    let mut hyper = init;
    let mut flat = hyper.to_flat();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batches: Vec<Batch> = (0..cfg.batch_size)
            .map(|_| {
                let s = data.subjects.choose(&mut rng).expect("non-empty");
                sample_batch(s, &data.prior[s.spec.class_id], data.num_classes(), data.vocab, cfg, &sched, &mut rng)
            })
            .collect::<Result<_>>()?;
        let results: Vec<(LossParts, HypernetParams)> = batches
            .par_iter()
            .map(|b| hypernet_loss_grad(b, &hyper, params, cfg, &sched))
            .collect::<Result<_>>()?;
        let inv = 1.0 / results.len() as f64;
        let mut parts = LossParts { loss_ft: 0.0, loss_reg: 0.0, sq_norm: 0.0, total: 0.0 };
        let mut grad = vec![0.0; flat.len()];
        for (p, g) in &results {
            parts.add_scaled(inv, p);
            crate::tensor::axpy(inv, &g.to_flat(), &mut grad);
        }
        finite(parts.total, &format!("hypernet loss at step {step}"))?;
        let record = LogRecord::from_parts(step, &parts);
        on_record(&record);
        log.push(record);
        opt.update(&mut flat, &grad)?;
        hyper.set_from_flat(&flat)?;
    }
    Ok((hyper, log))
}

/// Trains the base denoiser on `(image, class)` pairs with generic prompts;
/// each prompt is replaced by the empty prompt with probability
/// `cfg.prompt_dropout`.
pub fn pretrain_base(
    data: &[(Vec<f64>, usize)],
    init: DenoiserParams,
    num_classes: usize,
    cfg: &TrainConfig,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<(DenoiserParams, Vec<LogRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no pretraining data".into()));
    }
    let vocab = init.config.vocab;
    let prompts: Vec<PromptSpec> =
        (0..num_classes).map(|c| make_prompt(c, false, num_classes, vocab)).collect::<Result<_>>()?;
    let sched = init.noise_schedule().clone();
    let mut params = init;
    let mut flat = params.to_flat();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let items: Vec<DiffusionItem> = (0..cfg.batch_size)
            .map(|_| {
                let (x, c) = data.choose(&mut rng).expect("non-empty");
                let p = if rng.random::<f64>() < cfg.prompt_dropout { PromptSpec::null() } else { prompts[*c].clone() };
                DiffusionItem::draw(x.clone(), p, &sched, &mut rng)
            })
            .collect();
        let (loss, grad) = base_loss_grad(&items, &params, &sched)?;
        finite(loss, &format!("pretraining loss at step {step}"))?;
        let record = LogRecord { step, loss_ft: loss, loss_reg: 0.0, sq_norm: 0.0, total: loss };
        on_record(&record);
        log.push(record);
        opt.update(&mut flat, &grad.to_flat())?;
        params.set_from_flat(&flat)?;
    }
    Ok((params, log))
}

/// Per-subject adapter finetuning with the denoiser frozen, minimizing
/// `loss_ft + gamma * loss_reg` over the LoRA factors. Returns a snapshot
/// at every requested step mark (mark 0 is the initialization).
#[allow(clippy::too_many_arguments)]
pub fn finetune_subject(
    subject_images: &[Vec<f64>],
    class_id: usize,
    prior: &[Vec<f64>],
    params: &DenoiserParams,
    num_classes: usize,
    targets: &[Target],
    rank: usize,
    cfg: &TrainConfig,
    marks: &[usize],
) -> Result<Vec<(usize, LoraAdapterSet)>> {
    cfg.validate()?;
    if subject_images.is_empty() {
        return Err(Error::InvalidArgument("finetuning needs subject images".into()));
    }
    if cfg.gamma > 0.0 && prior.is_empty() {
        return Err(Error::InvalidArgument("class-prior term needs prior images".into()));
    }
    let mut marks: Vec<usize> = marks.to_vec();
    marks.sort_unstable();
    marks.dedup();
    let Some(&last) = marks.last() else {
        return Ok(Vec::new());
    };
    let vocab = params.config.vocab;
    let c_s = make_prompt(class_id, true, num_classes, vocab)?;
    let c_g = make_prompt(class_id, false, num_classes, vocab)?;
    let sched = params.noise_schedule().clone();
    let mut adapters = new_adapter_set(
        targets,
        rank,
        |t| params.config.target_dims(t),
        AdapterInit::BZeroARandom { seed: cfg.seed },
    )?;
    let mut flat = adapters.to_flat();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(crate::toy_data::mix_seed(cfg.seed, 1));
    let mut snapshots = Vec::with_capacity(marks.len());
    let mut next = 0;
    for step in 0..=last {
        if marks[next] == step {
            snapshots.push((step, adapters.clone()));
            next += 1;
            if next == marks.len() {
                break;
            }
        }
        let subject_items: Vec<DiffusionItem> = (0..cfg.batch_size)
            .map(|_| {
                let x = subject_images.choose(&mut rng).expect("non-empty").clone();
                DiffusionItem::draw(x, c_s.clone(), &sched, &mut rng)
            })
            .collect();
        let (ft, mut grad) = lora_loss_grad(&subject_items, params, &adapters, &sched)?;
        let mut total = ft;
        if cfg.gamma > 0.0 {
            let reg_items: Vec<DiffusionItem> = (0..cfg.batch_size)
                .map(|_| {
                    let x = prior.choose(&mut rng).expect("non-empty").clone();
                    DiffusionItem::draw(x, c_g.clone(), &sched, &mut rng)
                })
                .collect();
            let (reg, g) = lora_loss_grad(&reg_items, params, &adapters, &sched)?;
            total += cfg.gamma * reg;
            grad.add_scaled(cfg.gamma, &g);
        }
        finite(total, &format!("finetuning loss at step {}", step + 1))?;
        opt.update(&mut flat, &grad.to_flat())?;
        adapters.set_from_flat(&flat)?;
    }
    Ok(snapshots)
}

/// Largest relative difference between an analytic gradient and central
/// differences, `max_i |g_i - fd_i| / max(|g_i|, |fd_i|, 1e-8)`.
/// `f` returns the loss and its analytic gradient.
pub fn grad_check(f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>, params: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let (v, analytic) = f(params)?;
    finite(v, "loss")?;
    crate::error::check_len(params.len(), analytic.len())?;
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        p[i] = params[i] + h;
        let up = finite(f(&p)?.0, "loss")?;
        p[i] = params[i] - h;
        let dn = finite(f(&p)?.0, "loss")?;
        p[i] = params[i];
        let fd = (up - dn) / (2.0 * h);
        let g = finite(analytic[i], "gradient")?;
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-8));
    }
    Ok(worst)
}
