use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hld::checkpoint::{decode_metric_suite, encode_metric_suite, Checkpoint, RngSummary, CHECKPOINT_MAGIC};
use hld::config::RunConfig;
use hld::denoiser::{DenoiserParams, PromptSpec};
use hld::guidance::{encode_samples, guided_sample, DenoiserModel, GuidanceConfig, GuidanceMode};
use hld::hypernet::{predict, HypernetConfig, HypernetParams};
use hld::lora::{adapter_sq_norm, deserialize_adapters, serialize_adapters, LoraAdapterSet};
use hld::metrics::{evaluate, kappa_sweep, spearman, sweep_csv, EvalTask, MetricSuite};
use hld::oracle::verify_suite;
use hld::schedule::ScheduleSpec;
use hld::toy_data::{gen_class_prior, make_prompt, mix_seed, to_pgm, CorpusSpec, SubjectImages, CLASS_TOKEN_OFFSET};
use hld::training::{finetune_subject, pretrain_base, train_hypernet, HypernetDataset, LogRecord, TrainConfig};
use hld::Error;

#[derive(Parser)]
#[command(name = "hld", version, about = "Toy diffusion personalization: training, sampling and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base denoiser on class-prior images.
    Pretrain(TrainArgs),
    /// Train a hypernetwork against a frozen base checkpoint.
    TrainHypernet(HypernetArgs),
    /// Finetune adapters for one subject, saving snapshots at the given steps.
    Finetune(FinetuneArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Sample for one subject and score subject and prompt fidelity.
    Eval(EvalArgs),
    /// Evaluate one subject over a list of kappa values.
    Sweep(SweepArgs),
    /// Check the closed-form oracle invariants and oracle-driven sampling.
    OracleVerify(OracleArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Seed; drawn from system entropy and recorded when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HypernetArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    base: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    base: PathBuf,
    /// `train-<index>` or `held-<index>` into the configured corpus.
    #[arg(long)]
    subject: String,
    /// Total steps; defaults to the largest mark.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "100,400,1600")]
    marks: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Cfg,
    Hmcfg,
}

impl From<ModeArg> for GuidanceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => GuidanceMode::None,
            ModeArg::Cfg => GuidanceMode::Cfg,
            ModeArg::Hmcfg => GuidanceMode::HmCfg,
        }
    }
}

#[derive(Args)]
struct GuidanceArgs {
    #[arg(long, value_enum, default_value = "cfg")]
    mode: ModeArg,
    /// `w + 1`.
    #[arg(long, default_value_t = 7.5)]
    guidance_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    /// Sampling steps (strided over the training schedule).
    #[arg(long, default_value_t = 30)]
    steps: usize,
    /// Use the personalized model for the unconditional branch of hmcfg.
    #[arg(long)]
    uncond_personalized: bool,
}

impl GuidanceArgs {
    fn build(&self) -> Result<GuidanceConfig, CliError> {
        let g = GuidanceConfig {
            mode: self.mode.into(),
            kappa: self.kappa,
            steps: self.steps,
            uncond_personalized: self.uncond_personalized,
            ..GuidanceConfig::default()
        }
        .with_guidance_scale(self.guidance_scale);
        g.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(g)
    }
}

#[derive(Args)]
struct AdapterArgs {
    /// Adapter file, or a checkpoint holding adapter sets (with --adapter-id).
    #[arg(long)]
    adapters: Option<PathBuf>,
    #[arg(long)]
    adapter_id: Option<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    adapter: AdapterArgs,
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// Class for the subject prompt `[V, class]`.
    #[arg(long)]
    subject_class: Option<usize>,
    /// Class for the generic prompt `[class]`.
    #[arg(long)]
    generic_class: Option<usize>,
    #[arg(short = 'n', long = "num-samples", default_value_t = 8)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus and metric settings; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    adapter: AdapterArgs,
    #[command(flatten)]
    guidance: GuidanceArgs,
    /// `train-<index>` or `held-<index>`.
    #[arg(long)]
    subject: String,
    /// Class named in the prompts; defaults to the subject's class.
    #[arg(long)]
    target_class: Option<usize>,
    /// Metric artifact file; built and saved to the output directory when absent.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(short = 'n', long = "num-samples", default_value_t = 16)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.8,1.0,1.2,1.6")]
    kappas: Vec<f64>,
}

#[derive(Args)]
struct OracleArgs {
    /// Monte-Carlo chains per sampling check; 0 skips them.
    #[arg(long, default_value_t = 10_000)]
    chains: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) | Error::SingularMatrix => 3,
            Error::Format(_) | Error::Version { .. } | Error::Checksum { .. } => 4,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".hld.lock");
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|_| {
            CliError::usage(format!(
                "output directory {} is in use (remove {} if no other run is active)",
                dir.display(),
                path.display()
            ))
        })?;
        Ok(Self(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> u64 {
    let seed = flag.or(config).unwrap_or_else(rand::random);
    println!("seed: {seed}");
    seed
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::from_bytes(&read(path)?).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

fn load_adapters(args: &AdapterArgs, params: &DenoiserParams) -> CliResult<Option<LoraAdapterSet>> {
    let Some(path) = &args.adapters else {
        if args.adapter_id.is_some() {
            return Err(CliError::usage("--adapter-id needs --adapters"));
        }
        return Ok(None);
    };
    let bytes = read(path)?;
    let set = if bytes.starts_with(CHECKPOINT_MAGIC) {
        let id = args
            .adapter_id
            .as_ref()
            .ok_or_else(|| CliError::usage(format!("{} is a checkpoint; pass --adapter-id", path.display())))?;
        let mut ck = Checkpoint::from_bytes(&bytes)?;
        ck.adapters
            .remove(id)
            .ok_or_else(|| CliError::usage(format!("no adapter set `{id}` in {}", path.display())))?
    } else {
        deserialize_adapters(&bytes)?
    };
    params.check_adapters(&set)?;
    Ok(Some(set))
}

fn num_classes(params: &DenoiserParams) -> usize {
    params.config.vocab - CLASS_TOKEN_OFFSET
}

fn side_of(params: &DenoiserParams) -> CliResult<usize> {
    let d = params.config.data_dim;
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(CliError::usage(format!("data dimension {d} is not a square image")));
    }
    Ok(side)
}

fn subject(corpus: &CorpusSpec, id: &str) -> CliResult<SubjectImages> {
    let bad = || CliError::usage(format!("bad subject id `{id}` (expected train-<i> or held-<i>)"));
    let (set, idx) = id.split_once('-').ok_or_else(bad)?;
    let idx: usize = idx.parse().map_err(|_| bad())?;
    let mut all = match set {
        "train" => corpus.train_set()?,
        "held" => corpus.held_out_set()?,
        _ => return Err(bad()),
    };
    if idx >= all.len() {
        return Err(CliError::usage(format!("subject `{id}` out of range ({} subjects)", all.len())));
    }
    Ok(all.swap_remove(idx))
}

fn write_log(path: &Path, records: &[LogRecord]) -> CliResult<()> {
    let text: String = records.iter().map(|r| r.to_line() + "\n").collect();
    write(path, text)
}

fn print_final(records: &[LogRecord]) {
    let tail = &records[records.len().saturating_sub(100)..];
    let n = tail.len().max(1) as f64;
    let mean = |f: fn(&LogRecord) -> f64| tail.iter().map(f).sum::<f64>() / n;
    println!(
        "final (mean of last {} steps): loss_ft {:.6} loss_reg {:.6} sq_norm {:.6} total {:.6}",
        tail.len(),
        mean(|r| r.loss_ft),
        mean(|r| r.loss_reg),
        mean(|r| r.sq_norm),
        mean(|r| r.total)
    );
}

fn prior_images(corpus: &CorpusSpec, seed: u64, per_class: usize, exclude: &[hld::toy_data::SubjectSpec]) -> CliResult<Vec<Vec<Vec<f64>>>> {
    (0..corpus.num_classes)
        .map(|c| gen_class_prior(c, per_class, seed, corpus.side, exclude).map_err(CliError::from))
        .collect()
}

fn cmd_pretrain(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    let seed = resolve_seed(args.seed, cfg.seed);
    cfg.seed = Some(seed);
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let _lock = DirLock::acquire(&out)?;
    let prior = prior_images(&cfg.corpus, mix_seed(seed, 2), cfg.pretrain.images_per_class, &[])?;
    let data: Vec<(Vec<f64>, usize)> =
        prior.into_iter().enumerate().flat_map(|(c, v)| v.into_iter().map(move |x| (x, c))).collect();
    let train = TrainConfig {
        steps: cfg.pretrain.steps,
        lr: cfg.pretrain.lr,
        batch_size: cfg.pretrain.batch_size,
        seed,
        ..cfg.train
    };
    let init = DenoiserParams::init(cfg.model, cfg.schedule(), mix_seed(seed, 1))?;
    let (params, log) = pretrain_base(&data, init, cfg.corpus.num_classes, &train, &mut |_| {})?;
    let mut ck = Checkpoint::new(params);
    ck.train_config = cfg.to_text();
    ck.rng = RngSummary { seed, steps: train.steps as u64 };
    write(&out.join("base.ckpt"), ck.to_bytes())?;
    write_log(&out.join("pretrain.log"), &log)?;
    print_final(&log);
    println!("wrote {}", out.join("base.ckpt").display());
    Ok(())
}

fn cmd_train_hypernet(args: &HypernetArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&args.train.config)?;
    let base = load_checkpoint(&args.base)?;
    let seed = resolve_seed(args.train.seed, cfg.seed);
    cfg.seed = Some(seed);
    let out = args.train.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let _lock = DirLock::acquire(&out)?;
    let den = base.denoiser;
    if den.config.data_dim != cfg.corpus.data_dim() {
        return Err(CliError::usage("base checkpoint image size does not match the corpus"));
    }
    let h = &cfg.hypernet;
    let mut hc = HypernetConfig::for_denoiser(&den.config, &h.targets, h.rank, h.feat, h.enc_hidden)?;
    hc.iterations = h.iterations;
    hc.a_init_std = h.a_init_std;
    let init = HypernetParams::init(hc, mix_seed(seed, 1))?;
    let train_set = cfg.corpus.train_set()?;
    let prior = prior_images(&cfg.corpus, mix_seed(seed, 3), 256, &[])?;
    let data = HypernetDataset::new(train_set, prior, den.config.vocab)?;
    let train = TrainConfig { seed, ..cfg.train };
    let (hyper, log) = train_hypernet(&data, &den, init, &train, &mut |_| {})?;
    let mut ck = Checkpoint::new(den);
    for (name, set) in [("train", &data.subjects), ("held", &cfg.corpus.held_out_set()?)] {
        for (i, s) in set.iter().enumerate() {
            ck.adapters.insert(format!("{name}-{i}"), predict(&s.images[..1], &hyper)?);
        }
    }
    ck.hypernet = Some(hyper);
    ck.train_config = cfg.to_text();
    ck.rng = RngSummary { seed, steps: train.steps as u64 };
    write(&out.join("hypernet.ckpt"), ck.to_bytes())?;
    write_log(&out.join("train_hypernet.log"), &log)?;
    print_final(&log);
    println!("wrote {} ({} predicted adapter sets)", out.join("hypernet.ckpt").display(), ck.adapters.len());
    Ok(())
}

fn cmd_finetune(args: &FinetuneArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&args.train.config)?;
    let mut marks = args.marks.clone();
    let steps = args.steps.unwrap_or_else(|| marks.iter().copied().max().unwrap_or(0));
    if steps == 0 {
        return Err(CliError::usage("finetuning needs --steps >= 1 or a positive mark"));
    }
    if let Some(m) = marks.iter().find(|m| **m > steps) {
        return Err(CliError::usage(format!("mark {m} exceeds --steps {steps}")));
    }
    marks.push(steps);
    marks.sort_unstable();
    marks.dedup();
    let base = load_checkpoint(&args.base)?;
    let s = subject(&cfg.corpus, &args.subject)?;
    let seed = resolve_seed(args.train.seed, cfg.seed);
    cfg.seed = Some(seed);
    let out = args.train.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let _lock = DirLock::acquire(&out)?;
    let den = base.denoiser;
    let k = s.spec.class_id;
    let prior = gen_class_prior(k, 256, mix_seed(seed, 3), cfg.corpus.side, &[s.spec])?;
    let train = TrainConfig { seed, steps, ..cfg.train };
    let snaps = finetune_subject(
        &s.images,
        k,
        &prior,
        &den,
        cfg.corpus.num_classes,
        &cfg.hypernet.targets,
        cfg.hypernet.rank,
        &train,
        &marks,
    )?;
    for (mark, set) in &snaps {
        let path = out.join(format!("{}_step{mark:05}.hlra", args.subject));
        write(&path, serialize_adapters(set))?;
        println!("step {mark}: sq_norm {:.6} -> {}", adapter_sq_norm(set), path.display());
    }
    Ok(())
}

/// Resolves `(c_S, c_G)` for a command; with a single prompt both are equal.
fn prompts(
    mode: GuidanceMode,
    params: &DenoiserParams,
    subject_class: Option<usize>,
    generic_class: Option<usize>,
    has_adapters: bool,
) -> CliResult<(PromptSpec, PromptSpec)> {
    let nc = num_classes(params);
    let vocab = params.config.vocab;
    let mk = |c: usize, v: bool| make_prompt(c, v, nc, vocab).map_err(|e| CliError::usage(e.to_string()));
    match mode {
        GuidanceMode::HmCfg => {
            let (Some(s), Some(g)) = (subject_class, generic_class) else {
                return Err(CliError::usage("--mode hmcfg needs both --subject-class and --generic-class"));
            };
            if !has_adapters {
                return Err(CliError::usage("--mode hmcfg needs --adapters"));
            }
            Ok((mk(s, true)?, mk(g, false)?))
        }
        _ => {
            let p = match (subject_class, generic_class) {
                (Some(s), None) => mk(s, true)?,
                (None, Some(g)) => mk(g, false)?,
                _ => return Err(CliError::usage("give exactly one of --subject-class or --generic-class")),
            };
            Ok((p.clone(), p))
        }
    }
}

fn cmd_sample(args: &SampleArgs) -> CliResult<()> {
    let g = args.guidance.build()?;
    if args.n == 0 {
        return Err(CliError::usage("-n must be >= 1"));
    }
    if g.mode == GuidanceMode::HmCfg && args.adapter.adapters.is_none() {
        return Err(CliError::usage("--mode hmcfg needs --adapters"));
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    let params = &ck.denoiser;
    let side = side_of(params)?;
    let adapters = load_adapters(&args.adapter, params)?;
    let (c_s, c_g) = prompts(g.mode, params, args.subject_class, args.generic_class, adapters.is_some())?;
    let seed = resolve_seed(args.seed, None);
    let _lock = DirLock::acquire(&args.out)?;
    let model = DenoiserModel { params, adapters: adapters.as_ref() };
    let samples = guided_sample(&model, &c_s, &c_g, &g, params.noise_schedule(), args.n, seed)?;
    write(&args.out.join("samples.hsmp"), encode_samples(&samples, &[side, side])?)?;
    for (i, x) in samples.iter().enumerate() {
        write(&args.out.join(format!("sample_{i:03}.pgm")), to_pgm(x, side, side))?;
    }
    let meta = format!(
        "seed = {seed}\nmode = {}\nguidance_scale = {}\nkappa = {}\nsteps = {}\nn = {}\nprompt_s = {:?}\nprompt_g = {:?}\n",
        g.mode.as_str(),
        g.guidance_scale(),
        g.kappa,
        g.steps,
        args.n,
        c_s.tokens(),
        c_g.tokens()
    );
    write(&args.out.join("sample_meta.txt"), meta)?;
    println!("wrote {} samples to {}", args.n, args.out.display());
    Ok(())
}

struct EvalSetup {
    ck: Checkpoint,
    adapters: Option<LoraAdapterSet>,
    subject: SubjectImages,
    suite: MetricSuite,
    target: usize,
    guidance: GuidanceConfig,
    seed: u64,
    lambda: Option<f64>,
}

fn eval_setup(args: &EvalArgs, mode_override: Option<GuidanceMode>) -> CliResult<EvalSetup> {
    let mut guidance = args.guidance.build()?;
    if let Some(m) = mode_override {
        guidance.mode = m;
    }
    if args.n == 0 {
        return Err(CliError::usage("-n must be >= 1"));
    }
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ck = load_checkpoint(&args.checkpoint)?;
    if ck.denoiser.config.data_dim != cfg.corpus.data_dim() {
        return Err(CliError::usage("checkpoint image size does not match the corpus"));
    }
    let subject = subject(&cfg.corpus, &args.subject)?;
    let mut adapters = load_adapters(&args.adapter, &ck.denoiser)?;
    if adapters.is_none() {
        if let Some(h) = &ck.hypernet {
            adapters = Some(predict(&subject.images[..1], h)?);
        }
    }
    if guidance.mode == GuidanceMode::HmCfg && adapters.is_none() {
        return Err(CliError::usage("hmcfg evaluation needs --adapters or a hypernet checkpoint"));
    }
    let target = args.target_class.unwrap_or(subject.spec.class_id);
    if target >= num_classes(&ck.denoiser) {
        return Err(CliError::usage(format!("target class {target} out of range")));
    }
    let metrics_path = args.metrics.clone().or(cfg.metrics_path.clone());
    let seed = resolve_seed(args.seed, cfg.seed);
    fs::create_dir_all(&args.out).map_err(|e| CliError::usage(format!("cannot create {}: {e}", args.out.display())))?;
    let suite = match metrics_path {
        Some(p) => decode_metric_suite(&read(&p)?)?,
        None => {
            let suite = MetricSuite::for_classes(cfg.corpus.num_classes, cfg.corpus.side, 400, 64, 0)?;
            write(&args.out.join("metrics.bin"), encode_metric_suite(&suite))?;
            suite
        }
    };
    let lambda = RunConfig::parse(&ck.train_config, Path::new("")).ok().map(|c| c.train.lambda);
    Ok(EvalSetup { ck, adapters, subject, suite, target, guidance, seed, lambda })
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let _lock = DirLock::acquire(&args.out)?;
    let s = eval_setup(args, None)?;
    let params = &s.ck.denoiser;
    let (nc, vocab) = (num_classes(params), params.config.vocab);
    let c_s = make_prompt(s.target, s.adapters.is_some(), nc, vocab)?;
    let c_g = make_prompt(s.target, false, nc, vocab)?;
    let model = DenoiserModel { params, adapters: s.adapters.as_ref() };
    let task =
        EvalTask { prompt_s: &c_s, prompt_g: &c_g, target_class: s.target, reference: &s.subject.images, n: args.n, seed: s.seed };
    let (mut report, samples) = evaluate(&model, &s.suite, &task, &s.guidance, params.noise_schedule())?;
    report.config.push(("subject".into(), args.subject.clone()));
    if let Some(l) = s.lambda {
        report.config.push(("lambda".into(), l.to_string()));
    }
    let side = side_of(params)?;
    write(&args.out.join("eval_samples.hsmp"), encode_samples(&samples, &[side, side])?)?;
    let text = report.to_text();
    write(&args.out.join("report.txt"), &text)?;
    print!("{}", text.split("\n\n").next().unwrap_or(""));
    println!();
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    if args.kappas.iter().any(|k| !(0.0..=2.0).contains(k)) {
        return Err(CliError::usage("kappa out of [0,2]"));
    }
    let _lock = DirLock::acquire(&args.eval.out)?;
    let s = eval_setup(&args.eval, Some(GuidanceMode::HmCfg))?;
    let params = &s.ck.denoiser;
    let (nc, vocab) = (num_classes(params), params.config.vocab);
    let c_s = make_prompt(s.target, true, nc, vocab)?;
    let c_g = make_prompt(s.target, false, nc, vocab)?;
    let model = DenoiserModel { params, adapters: s.adapters.as_ref() };
    let task = EvalTask {
        prompt_s: &c_s,
        prompt_g: &c_g,
        target_class: s.target,
        reference: &s.subject.images,
        n: args.eval.n,
        seed: s.seed,
    };
    let rows = kappa_sweep(&model, &s.suite, &task, &s.guidance, &args.kappas, params.noise_schedule())?;
    let csv = sweep_csv(&rows);
    write(&args.eval.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    if rows.len() >= 2 {
        let sf: Vec<f64> = rows.iter().map(|r| r.subject_fidelity).collect();
        let pf: Vec<f64> = rows.iter().map(|r| r.prompt_fidelity).collect();
        println!("spearman(kappa, subject_fidelity) = {:.3}", spearman(&args.kappas, &sf)?);
        println!("spearman(kappa, prompt_fidelity) = {:.3}", spearman(&args.kappas, &pf)?);
    }
    Ok(())
}

fn cmd_oracle_verify(args: &OracleArgs) -> CliResult<()> {
    let seed = resolve_seed(args.seed, None);
    let sched = ScheduleSpec::default().build()?;
    let checks = verify_suite(&sched, args.chains, seed)?;
    let mut failed = 0;
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(CliError { code: 3, message: format!("{failed} oracle check(s) failed") });
    }
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("HLD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::usage(format!("HLD_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot configure thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::TrainHypernet(a) => cmd_train_hypernet(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::OracleVerify(a) => cmd_oracle_verify(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
