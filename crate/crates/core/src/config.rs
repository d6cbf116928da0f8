//! Run configuration files.
//!
//! Line-oriented `key = value` text grouped under `[section]` headers.
//! Blank lines and lines starting with `#` or `;` are ignored. Unknown
//! sections or keys are errors. Relative paths resolve against the
//! directory holding the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::lora::Target;
use crate::optim::OptimizerSpec;
use crate::schedule::{ScheduleKind, ScheduleSpec};
use crate::toy_data::{CorpusSpec, CLASS_TOKEN_OFFSET};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Class-prior images generated per class for the base training set.
    pub images_per_class: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 6000, lr: 2e-3, batch_size: 32, images_per_class: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypernetSettings {
    pub rank: usize,
    pub feat: usize,
    pub enc_hidden: usize,
    pub iterations: usize,
    pub a_init_std: f64,
    pub targets: Vec<Target>,
}

impl Default for HypernetSettings {
    fn default() -> Self {
        Self { rank: 3, feat: 32, enc_hidden: 64, iterations: 1, a_init_std: 0.02, targets: Target::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub metrics_path: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub hypernet: HypernetSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            seed: None,
            metrics_path: None,
            corpus: CorpusSpec::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            hypernet: HypernetSettings::default(),
        }
    }
}

type Sections = BTreeMap<String, BTreeMap<String, (usize, String)>>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {lineno}: unterminated section header")))?
                .trim()
                .to_string();
            out.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {lineno}: expected `key = value`")))?;
        let section = current
            .as_ref()
            .ok_or_else(|| Error::Config(format!("line {lineno}: key outside of any section")))?;
        let key = k.trim().to_string();
        let entries = out.get_mut(section).unwrap();
        if entries.insert(key.clone(), (lineno, v.trim().to_string())).is_some() {
            return Err(Error::Config(format!("line {lineno}: duplicate key `{section}.{key}`")));
        }
    }
    Ok(out)
}

struct Fields<'a> {
    section: &'a str,
    entries: BTreeMap<String, (usize, String)>,
}

impl Fields<'_> {
    fn get<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some((line, v)) = self.entries.remove(key) {
            *slot = v.parse().map_err(|_| {
                Error::Config(format!("line {line}: cannot parse `{}.{key}` from `{v}`", self.section))
            })?;
        }
        Ok(())
    }

    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn done(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key `{}.{k}`", self.section))),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut sections = parse_sections(text)?;
        let mut cfg = RunConfig::default();
        let mut take = |name: &'static str| Fields { section: name, entries: sections.remove(name).unwrap_or_default() };

        let mut f = take("run");
        if let Some((_, v)) = f.raw("output_dir") {
            cfg.output_dir = base_dir.join(v);
        } else {
            cfg.output_dir = base_dir.join(&cfg.output_dir);
        }
        if let Some((line, v)) = f.raw("seed") {
            cfg.seed = Some(v.parse().map_err(|_| Error::Config(format!("line {line}: bad seed `{v}`")))?);
        }
        if let Some((_, v)) = f.raw("metrics") {
            cfg.metrics_path = Some(base_dir.join(v));
        }
        f.done()?;

        let mut f = take("corpus");
        let c = &mut cfg.corpus;
        f.get("num_classes", &mut c.num_classes)?;
        f.get("train_subjects", &mut c.train_subjects)?;
        f.get("images_per_subject", &mut c.images_per_subject)?;
        f.get("held_out_subjects", &mut c.held_out_subjects)?;
        f.get("side", &mut c.side)?;
        f.get("noise_seed", &mut c.noise_seed)?;
        f.done()?;

        let mut f = take("model");
        let m = &mut cfg.model;
        f.get("width", &mut m.width)?;
        f.get("mlp_width", &mut m.mlp_width)?;
        f.get("vocab", &mut m.vocab)?;
        f.get("sigma_data", &mut m.sigma_data)?;
        f.done()?;
        cfg.model.data_dim = cfg.corpus.side * cfg.corpus.side;

        let mut f = take("schedule");
        let s = &mut cfg.train.schedule;
        if let Some((line, v)) = f.raw("kind") {
            s.kind = ScheduleKind::parse(&v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        f.get("steps", &mut s.steps)?;
        f.get("beta_min", &mut s.beta_min)?;
        f.get("beta_max", &mut s.beta_max)?;
        f.done()?;

        let mut f = take("train");
        let t = &mut cfg.train;
        f.get("gamma", &mut t.gamma)?;
        f.get("lambda", &mut t.lambda)?;
        f.get("lr", &mut t.lr)?;
        f.get("batch_size", &mut t.batch_size)?;
        f.get("items_per_subject", &mut t.items_per_subject)?;
        f.get("steps", &mut t.steps)?;
        f.get("prompt_dropout", &mut t.prompt_dropout)?;
        f.get("weight_decay", &mut t.weight_decay)?;
        f.get("reg_on_base", &mut t.reg_on_base)?;
        f.done()?;

        let mut f = take("optimizer");
        let (mut beta1, mut beta2, mut eps) = (0.9, 0.999, 1e-8);
        let mut kind = String::from("adam");
        f.get("kind", &mut kind)?;
        f.get("beta1", &mut beta1)?;
        f.get("beta2", &mut beta2)?;
        f.get("eps", &mut eps)?;
        f.done()?;
        cfg.train.optimizer = match kind.as_str() {
            "adam" => OptimizerSpec::Adam { beta1, beta2, eps },
            "sgd" => OptimizerSpec::Sgd,
            other => return Err(Error::Config(format!("unknown optimizer `{other}` (expected adam or sgd)"))),
        };

        let mut f = take("pretrain");
        let p = &mut cfg.pretrain;
        f.get("steps", &mut p.steps)?;
        f.get("lr", &mut p.lr)?;
        f.get("batch_size", &mut p.batch_size)?;
        f.get("images_per_class", &mut p.images_per_class)?;
        f.done()?;

        let mut f = take("hypernet");
        let h = &mut cfg.hypernet;
        f.get("rank", &mut h.rank)?;
        f.get("feat", &mut h.feat)?;
        f.get("enc_hidden", &mut h.enc_hidden)?;
        f.get("iterations", &mut h.iterations)?;
        f.get("a_init_std", &mut h.a_init_std)?;
        if let Some((line, v)) = f.raw("targets") {
            h.targets = v
                .split(',')
                .map(|t| Target::parse(t.trim()))
                .collect::<Result<_>>()
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        f.done()?;

        if let Some(name) = sections.keys().next() {
            return Err(Error::Config(format!("unknown section [{name}]")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let c = &self.corpus;
        if c.num_classes < 2 || c.side < 2 || c.images_per_subject == 0 || c.train_subjects == 0 {
            return bad("corpus needs >= 2 classes, side >= 2 and at least one training subject with images".into());
        }
        if self.model.vocab < c.num_classes + CLASS_TOKEN_OFFSET {
            return bad(format!(
                "vocab {} too small for {} classes plus reserved tokens",
                self.model.vocab, c.num_classes
            ));
        }
        if self.model.width < 2 || self.model.mlp_width == 0 {
            return bad("model widths must be positive (width >= 2)".into());
        }
        if !(self.model.sigma_data > 0.0) || !self.model.sigma_data.is_finite() {
            return bad("sigma_data must be positive".into());
        }
        let s = &self.train.schedule;
        if s.build().is_err() {
            return bad(format!("invalid schedule: steps {} beta [{}, {}]", s.steps, s.beta_min, s.beta_max));
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let OptimizerSpec::Adam { beta1, beta2, eps } = self.train.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
            }
        }
        let p = &self.pretrain;
        if p.steps == 0 || p.batch_size == 0 || p.images_per_class == 0 || !(p.lr >= 0.0) {
            return bad("pretrain steps, batch size and images per class must be >= 1, lr >= 0".into());
        }
        let h = &self.hypernet;
        if h.rank == 0 || h.feat == 0 || h.enc_hidden == 0 || h.iterations == 0 || h.targets.is_empty() {
            return bad("hypernet rank, widths, iterations and targets must be non-empty".into());
        }
        if let Some(m) = &self.metrics_path {
            if !m.is_file() {
                return bad(format!("metrics artifact {} does not exist", m.display()));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields the same configuration.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let c = &self.corpus;
        let t = &self.train;
        let s = &t.schedule;
        let p = &self.pretrain;
        let h = &self.hypernet;
        let _ = writeln!(o, "[run]\noutput_dir = {}", self.output_dir.display());
        if let Some(seed) = self.seed {
            let _ = writeln!(o, "seed = {seed}");
        }
        if let Some(m) = &self.metrics_path {
            let _ = writeln!(o, "metrics = {}", m.display());
        }
        let _ = writeln!(
            o,
            "\n[corpus]\nnum_classes = {}\ntrain_subjects = {}\nimages_per_subject = {}\nheld_out_subjects = {}\nside = {}\nnoise_seed = {}",
            c.num_classes, c.train_subjects, c.images_per_subject, c.held_out_subjects, c.side, c.noise_seed
        );
        let _ = writeln!(
            o,
            "\n[model]\nwidth = {}\nmlp_width = {}\nvocab = {}\nsigma_data = {}",
            self.model.width, self.model.mlp_width, self.model.vocab, self.model.sigma_data
        );
        let _ = writeln!(
            o,
            "\n[schedule]\nkind = {}\nsteps = {}\nbeta_min = {}\nbeta_max = {}",
            s.kind.as_str(),
            s.steps,
            s.beta_min,
            s.beta_max
        );
        let _ = writeln!(
            o,
            "\n[train]\ngamma = {}\nlambda = {}\nlr = {}\nbatch_size = {}\nitems_per_subject = {}\nsteps = {}\nprompt_dropout = {}\nweight_decay = {}\nreg_on_base = {}",
            t.gamma, t.lambda, t.lr, t.batch_size, t.items_per_subject, t.steps, t.prompt_dropout, t.weight_decay, t.reg_on_base
        );
        match t.optimizer {
            OptimizerSpec::Sgd => {
                let _ = writeln!(o, "\n[optimizer]\nkind = sgd");
            }
            OptimizerSpec::Adam { beta1, beta2, eps } => {
                let _ = writeln!(o, "\n[optimizer]\nkind = adam\nbeta1 = {beta1}\nbeta2 = {beta2}\neps = {eps}");
            }
        }
        let _ = writeln!(
            o,
            "\n[pretrain]\nsteps = {}\nlr = {}\nbatch_size = {}\nimages_per_class = {}",
            p.steps, p.lr, p.batch_size, p.images_per_class
        );
        let targets: Vec<&str> = h.targets.iter().map(|t| t.name()).collect();
        let _ = writeln!(
            o,
            "\n[hypernet]\nrank = {}\nfeat = {}\nenc_hidden = {}\niterations = {}\na_init_std = {}\ntargets = {}",
            h.rank,
            h.feat,
            h.enc_hidden,
            h.iterations,
            h.a_init_std,
            targets.join(",")
        );
        o
    }

    /// Schedule used for training and sampling.
    pub fn schedule(&self) -> ScheduleSpec {
        self.train.schedule
    }
}
