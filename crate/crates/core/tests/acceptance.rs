//! Acceptance criteria. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 5`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hld::checkpoint::Checkpoint;
use hld::denoiser::{denoise, merge_adapters, DenoiserConfig, DenoiserParams, PromptSpec};
use hld::guidance::{
    cfg_eps, guided_sample, hmcfg_coefficients, hmcfg_eps, hmcfg_score_identity_check, DenoiserModel,
    GuidanceConfig, GuidanceMode,
};
use hld::hypernet::{predict, HypernetConfig, HypernetParams};
use hld::lora::{adapter_sq_norm, deserialize_adapters, new_adapter_set, serialize_adapters, AdapterInit, LoraAdapterSet, Target};
use hld::metrics::{evaluate, kappa_sweep, spearman, EvalTask, MetricSuite};
use hld::oracle::{mixture_pair, GaussianSpec, OracleModel};
use hld::schedule::{NoiseSchedule, ScheduleSpec};
use hld::tensor::Matrix;
use hld::toy_data::{class_token, gen_class_prior, gen_subject_images, make_prompt, CorpusSpec, SubjectSpec};
use hld::training::{
    finetune_subject, grad_check, hypernet_loss, hypernet_loss_grad, loss_ft, loss_reg, pretrain_base, train_hypernet,
    Batch, DiffusionItem, HypernetDataset, TrainConfig,
};

const NUM_CLASSES: usize = 4;
const SIDE: usize = 16;
const VOCAB: usize = 16;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn base_model() -> &'static DenoiserParams {
    static BASE: OnceLock<DenoiserParams> = OnceLock::new();
    BASE.get_or_init(|| {
        let t0 = Instant::now();
        let data: Vec<(Vec<f64>, usize)> = (0..NUM_CLASSES)
            .flat_map(|c| gen_class_prior(c, 1024, 100, SIDE, &[]).unwrap().into_iter().map(move |x| (x, c)))
            .collect();
        let init = DenoiserParams::init(DenoiserConfig::default(), ScheduleSpec::default(), 0).unwrap();
        let cfg = TrainConfig { steps: 6000, lr: 2e-3, batch_size: 32, ..Default::default() };
        let (p, _) = pretrain_base(&data, init, NUM_CLASSES, &cfg, &mut |_| {}).unwrap();
        println!("      (shared base model pretrained in {:.1}s)", t0.elapsed().as_secs_f64());
        p
    })
}

fn metric_suite() -> &'static MetricSuite {
    static SUITE: OnceLock<MetricSuite> = OnceLock::new();
    SUITE.get_or_init(|| MetricSuite::for_classes(NUM_CLASSES, SIDE, 400, 64, 0).unwrap())
}

/// Per-subject finetuning snapshots at steps 100, 400 and 1600.
fn finetuned() -> &'static Vec<(SubjectSpec, Vec<Vec<f64>>, Vec<(usize, LoraAdapterSet)>)> {
    static RUNS: OnceLock<Vec<(SubjectSpec, Vec<Vec<f64>>, Vec<(usize, LoraAdapterSet)>)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let p = base_model();
        (0..8)
            .map(|si| {
                let k = si % NUM_CLASSES;
                let s = SubjectSpec::train(k, si);
                let imgs = gen_subject_images(&s, 8, 0, SIDE).unwrap();
                let prior = gen_class_prior(k, 256, 3, SIDE, &[s]).unwrap();
                let cfg = TrainConfig { lr: 5e-3, gamma: 1.0, batch_size: 8, seed: si as u64, ..Default::default() };
                let snaps =
                    finetune_subject(&imgs, k, &prior, p, NUM_CLASSES, &Target::ALL, 3, &cfg, &[100, 400, 1600]).unwrap();
                (s, imgs, snaps)
            })
            .collect()
    })
}

/// Compositional prompts for a subject of class `k`: `[V, j]` and `[j]` with
/// `j = (k + 1) mod 4`.
fn compositional(k: usize) -> (usize, PromptSpec, PromptSpec) {
    let j = (k + 1) % NUM_CLASSES;
    (j, make_prompt(j, true, NUM_CLASSES, VOCAB).unwrap(), make_prompt(j, false, NUM_CLASSES, VOCAB).unwrap())
}

fn tiny_denoiser(width: usize, seed: u64) -> DenoiserParams {
    let cfg = DenoiserConfig { data_dim: 9, width, mlp_width: 5, vocab: 6, sigma_data: 0.5 };
    DenoiserParams::init(cfg, ScheduleSpec { steps: 50, ..Default::default() }, seed).unwrap()
}

fn random_adapters(p: &DenoiserParams, rank: usize, scale: f64, rng: &mut ChaCha8Rng) -> LoraAdapterSet {
    let mut set = new_adapter_set(&Target::ALL, rank, |t| p.config.target_dims(t), AdapterInit::Zero).unwrap();
    let flat: Vec<f64> = (0..set.param_count()).map(|_| rng.random_range(-scale..scale)).collect();
    set.set_from_flat(&flat).unwrap();
    set
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut worst_sum = 0.0f64;
    for _ in 0..10_000 {
        let d = rng.random_range(1..16);
        let a = rand_vec(d, &mut rng);
        let n = rand_vec(d, &mut rng);
        let w = rng.random_range(0.0..20.0);
        let hm = hmcfg_eps(&a, &a, &n, w, 1.0).unwrap();
        let cfg = cfg_eps(&a, &n, 2.0 * (w + 1.0) - 1.0).unwrap();
        for (x, y) in hm.iter().zip(&cfg) {
            worst = worst.max((x - y).abs());
        }
        let kappa = rng.random_range(0.0..=2.0);
        let s: f64 = hmcfg_coefficients(w, kappa).iter().sum();
        worst_sum = worst_sum.max((s - 1.0).abs());
    }

    // Same check through the sampler: zero adapters make the personalized
    // model identical to the base model.
    let p = tiny_denoiser(6, 3);
    let zero = new_adapter_set(&Target::ALL, 2, |t| p.config.target_dims(t), AdapterInit::Zero).unwrap();
    let model = DenoiserModel { params: &p, adapters: Some(&zero) };
    let prompt = PromptSpec::new(vec![class_token(1)], 6).unwrap();
    let sched = p.noise_schedule().clone();
    let w = 1.7;
    let hm = GuidanceConfig { mode: GuidanceMode::HmCfg, w, kappa: 1.0, steps: 20, uncond_personalized: false };
    let cf = GuidanceConfig { mode: GuidanceMode::Cfg, w: 2.0 * (w + 1.0) - 1.0, ..hm };
    let a = guided_sample(&model, &prompt, &prompt, &hm, &sched, 4, 5).unwrap();
    let b = guided_sample(&model, &prompt, &prompt, &cf, &sched, 4, 5).unwrap();
    let sample_diff = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    outcome(
        worst <= 1e-12 && worst_sum <= 1e-12 && sample_diff <= 1e-12,
        format!("max |hmcfg - cfg| {worst:.1e}, max |sum(coeffs) - 1| {worst_sum:.1e}, sampler diff {sample_diff:.1e} over 10^4 draws"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = tiny_denoiser(6, 4);
    let sched = p.noise_schedule().clone();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let adapters = random_adapters(&p, 2, 0.5, &mut rng);
        let model = DenoiserModel { params: &p, adapters: Some(&adapters) };
        let x = rand_vec(9, &mut rng);
        let t = rng.random_range(1..=sched.steps());
        let cs = make_prompt(rng.random_range(0..4), true, 4, 6).unwrap();
        let cg = make_prompt(rng.random_range(0..4), false, 4, 6).unwrap();
        let w = rng.random_range(0.0..10.0);
        let kappa = rng.random_range(0.0..=2.0);
        worst = worst.max(hmcfg_score_identity_check(&x, t, &model, &cs, &cg, w, kappa, &sched).unwrap());
    }
    outcome(worst < 1e-10, format!("max score/eps deviation {worst:.2e} over 10^3 draws"))
}

fn moments(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mean: Vec<f64> = (0..d).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    (mean, cov)
}

fn criterion_3() -> Outcome {
    let sched = ScheduleSpec::default().build().unwrap();
    let sigma = Matrix::from_vec(2, 2, vec![1.5, 0.9, 0.9, 1.0]);
    let g = GaussianSpec::new(vec![1.0, -0.5], sigma.clone()).unwrap().with_label(0);
    let model = OracleModel { components: vec![(1.0, g.clone())], sched: sched.clone() };
    let prompt = PromptSpec::new(vec![class_token(0)], class_token(0) + 1).unwrap();
    let cfg = GuidanceConfig { mode: GuidanceMode::None, steps: sched.steps(), ..Default::default() };
    let chains = 10_000;
    let xs = guided_sample(&model, &prompt, &prompt, &cfg, &sched, chains, 33).unwrap();
    let (mean, cov) = moments(&xs);
    let n = chains as f64;
    let z: Vec<f64> = (0..2).map(|i| (mean[i] - g.mu[i]) / (sigma.get(i, i) / n).sqrt()).collect();
    let rel: Vec<f64> = (0..4).map(|k| (cov[k] - sigma.data[k]).abs() / sigma.data[k].abs()).collect();
    let max_rel = rel.iter().cloned().fold(0.0, f64::max);
    outcome(
        z.iter().all(|v| v.abs() <= 3.0) && max_rel <= 0.05,
        format!("T=1000, 10k chains: mean {mean:.4?} (z {z:.2?}), max cov rel error {:.2}%", 100.0 * max_rel),
    )
}

fn criterion_4() -> Outcome {
    let p = tiny_denoiser(4, 5);
    let sched = p.noise_schedule().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hc = HypernetConfig::for_denoiser(&p.config, &Target::ALL, 1, 4, 4).unwrap();
    let mut h = HypernetParams::init(hc, 6).unwrap();
    let flat: Vec<f64> = h.to_flat().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    h.set_from_flat(&flat).unwrap();
    let item = |prompt: PromptSpec, rng: &mut ChaCha8Rng| DiffusionItem::draw(rand_vec(9, rng), prompt, &sched, rng);
    let batch = Batch::new(
        vec![rand_vec(9, &mut rng), rand_vec(9, &mut rng)],
        (0..3).map(|_| item(make_prompt(1, true, 4, 6).unwrap(), &mut rng)).collect(),
        (0..3).map(|_| item(make_prompt(1, false, 4, 6).unwrap(), &mut rng)).collect(),
    )
    .unwrap();
    let cfg = TrainConfig { gamma: 0.8, lambda: 0.4, ..Default::default() };
    let hyper_err = grad_check(
        |f| {
            let mut q = h.clone();
            q.set_from_flat(f)?;
            let (parts, g) = hypernet_loss_grad(&batch, &q, &p, &cfg, &sched)?;
            Ok((parts.total, g.to_flat()))
        },
        &h.to_flat(),
        1e-5,
    )
    .unwrap();

    let mut quad_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..8);
        let m = Matrix::from_vec(n, n, rand_vec(n * n, &mut rng));
        let a = m.transpose().matmul(&m);
        let b = rand_vec(n, &mut rng);
        let f = |x: &[f64]| {
            let ax = a.matvec(x);
            let v = 0.5 * x.iter().zip(&ax).map(|(u, w)| u * w).sum::<f64>() + b.iter().zip(x).map(|(u, w)| u * w).sum::<f64>();
            Ok((v, ax.iter().zip(&b).map(|(u, w)| u + w).collect()))
        };
        quad_err = quad_err.max(grad_check(f, &rand_vec(n, &mut rng), 1e-3).unwrap());
    }
    outcome(
        hyper_err < 1e-4 && quad_err < 1e-9,
        format!("hypernet loss (d=4, f=4, r=1) max rel error {hyper_err:.2e}; quadratics {quad_err:.2e}"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let p = tiny_denoiser(rng.random_range(2..7), i);
        let sched = p.noise_schedule().clone();
        let rank = rng.random_range(1..3);
        let hc = HypernetConfig::for_denoiser(&p.config, &Target::ALL[..rng.random_range(1..4)], rank, 3, 4).unwrap();
        let mut h = HypernetParams::init(hc, i).unwrap();
        let flat: Vec<f64> = h.to_flat().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        h.set_from_flat(&flat).unwrap();
        let class = rng.random_range(0..4);
        let n_reg = rng.random_range(0..3);
        let batch = Batch::new(
            (0..rng.random_range(1..4)).map(|_| rand_vec(9, &mut rng)).collect(),
            (0..rng.random_range(1..4))
                .map(|_| DiffusionItem::draw(rand_vec(9, &mut rng), make_prompt(class, true, 4, 6).unwrap(), &sched, &mut rng))
                .collect(),
            (0..n_reg)
                .map(|_| DiffusionItem::draw(rand_vec(9, &mut rng), make_prompt(class, false, 4, 6).unwrap(), &sched, &mut rng))
                .collect(),
        )
        .unwrap();
        let cfg = TrainConfig {
            gamma: rng.random_range(0.0..3.0),
            lambda: rng.random_range(0.0..100.0),
            reg_on_base: rng.random_bool(0.5),
            ..Default::default()
        };
        let parts = hypernet_loss(&batch, &h, &p, &cfg, &sched).unwrap();
        let adapters = predict(&batch.references, &h).unwrap();
        let ft = loss_ft(&batch.subject, &p, Some(&adapters), &sched).unwrap();
        let reg = if n_reg == 0 {
            0.0
        } else {
            loss_reg(&batch.reg, &p, if cfg.reg_on_base { None } else { Some(&adapters) }, &sched).unwrap()
        };
        let expect = ft + cfg.gamma * reg + cfg.lambda * adapter_sq_norm(&adapters);
        worst = worst.max((parts.total - expect).abs());
    }
    outcome(worst <= 1e-10, format!("max |total - (ft + gamma reg + lambda norm)| {worst:.2e} over 100 configurations"))
}

fn criterion_6() -> Outcome {
    let p = base_model();
    let suite = metric_suite();
    let sched = p.noise_schedule();
    let corpus = CorpusSpec::default();
    let prior: Vec<Vec<Vec<f64>>> = (0..NUM_CLASSES).map(|c| gen_class_prior(c, 256, 3, SIDE, &[]).unwrap()).collect();
    let data = HypernetDataset::new(corpus.train_set().unwrap(), prior, VOCAB).unwrap();
    let held = corpus.held_out_set().unwrap();
    let guidance = GuidanceConfig { mode: GuidanceMode::Cfg, ..Default::default() }.with_guidance_scale(3.0);
    let mut rows = Vec::new();
    for lambda in [0.0, 0.15] {
        let hc = HypernetConfig::for_denoiser(&p.config, &Target::ALL, 3, 32, 64).unwrap();
        let init = HypernetParams::init(hc, 1).unwrap();
        let cfg = TrainConfig { lr: 3e-3, gamma: 0.0, lambda, steps: 4000, batch_size: 8, seed: 2, ..Default::default() };
        let (h, _) = train_hypernet(&data, p, init, &cfg, &mut |_| {}).unwrap();
        let (mut pf, mut sf, mut norm) = (0.0, 0.0, 0.0);
        let m = 8;
        for s in held.iter().take(m) {
            let adapters = predict(&s.images[..1], &h).unwrap();
            norm += adapter_sq_norm(&adapters) / m as f64;
            let (j, cs, cg) = compositional(s.spec.class_id);
            let model = DenoiserModel { params: p, adapters: Some(&adapters) };
            let task = EvalTask { prompt_s: &cs, prompt_g: &cg, target_class: j, reference: &s.images, n: 16, seed: 9 };
            let (r, _) = evaluate(&model, suite, &task, &guidance, sched).unwrap();
            pf += r.prompt_fidelity / m as f64;
            sf += r.subject_fidelity / m as f64;
        }
        rows.push((lambda, pf, sf, norm));
    }
    let (_, pf0, sf0, n0) = rows[0];
    let (l1, pf1, sf1, n1) = rows[1];
    outcome(
        pf1 - pf0 >= 0.05 && n1 < n0,
        format!(
            "lambda=0: prompt {pf0:.3} subject {sf0:.3} norm {n0:.2}; lambda={l1}: prompt {pf1:.3} subject {sf1:.3} norm {n1:.2}; gap {:.3}",
            pf1 - pf0
        ),
    )
}

fn criterion_7() -> Outcome {
    let p = base_model();
    let suite = metric_suite();
    let guidance = GuidanceConfig { mode: GuidanceMode::Cfg, ..Default::default() }.with_guidance_scale(3.0);
    let runs = finetuned();
    let mut sf = [0.0; 3];
    let mut pf = [0.0; 3];
    for (s, imgs, snaps) in runs {
        let (j, cs, cg) = compositional(s.class_id);
        for (i, (_, adapters)) in snaps.iter().enumerate() {
            let model = DenoiserModel { params: p, adapters: Some(adapters) };
            let task = EvalTask { prompt_s: &cs, prompt_g: &cg, target_class: j, reference: imgs, n: 32, seed: 9 };
            let (r, _) = evaluate(&model, suite, &task, &guidance, p.noise_schedule()).unwrap();
            sf[i] += r.subject_fidelity / runs.len() as f64;
            pf[i] += r.prompt_fidelity / runs.len() as f64;
        }
    }
    let sf_ok = sf.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let pf_ok = pf.windows(2).all(|w| w[1] <= w[0] + 0.02);
    outcome(sf_ok && pf_ok, format!("steps 100/400/1600: subject {sf:.3?}, prompt {pf:.3?} (8 subjects)"))
}

fn criterion_8() -> Outcome {
    let p = base_model();
    let suite = metric_suite();
    let kappas = [0.4, 0.8, 1.0, 1.2, 1.6];
    let guidance = GuidanceConfig { mode: GuidanceMode::HmCfg, ..Default::default() }.with_guidance_scale(2.0);
    let runs = finetuned();
    let mut sf = vec![0.0; kappas.len()];
    let mut pf = vec![0.0; kappas.len()];
    for (s, imgs, snaps) in runs {
        let (j, cs, cg) = compositional(s.class_id);
        let adapters = &snaps.last().unwrap().1;
        let model = DenoiserModel { params: p, adapters: Some(adapters) };
        let task = EvalTask { prompt_s: &cs, prompt_g: &cg, target_class: j, reference: imgs, n: 32, seed: 9 };
        for (i, row) in kappa_sweep(&model, suite, &task, &guidance, &kappas, p.noise_schedule()).unwrap().iter().enumerate() {
            sf[i] += row.subject_fidelity / runs.len() as f64;
            pf[i] += row.prompt_fidelity / runs.len() as f64;
        }
    }
    let rho_s = spearman(&kappas, &sf).unwrap();
    let rho_p = spearman(&kappas, &pf).unwrap();
    outcome(
        rho_s >= 0.8 && rho_p <= -0.8,
        format!("rho(kappa, subject) {rho_s:+.2}, rho(kappa, prompt) {rho_p:+.2}; subject {sf:.3?}, prompt {pf:.3?}"),
    )
}

const TINY_CONFIG: &str = "[corpus]\ntrain_subjects = 2\nheld_out_subjects = 1\nimages_per_subject = 3\nside = 8\n\n\
[model]\nwidth = 8\nmlp_width = 16\nvocab = 8\n\n[schedule]\nsteps = 100\n\n\
[train]\nsteps = 15\nbatch_size = 4\nitems_per_subject = 2\n\n\
[pretrain]\nsteps = 25\nbatch_size = 8\nimages_per_class = 16\n\n\
[hypernet]\nrank = 1\nfeat = 4\nenc_hidden = 8\n";

fn run_cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hld")).args(args).current_dir(dir).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn cli_determinism() -> Result<usize, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    fs::write(d.join("run.ini"), TINY_CONFIG).map_err(|e| e.to_string())?;
    run_cli(d, &["pretrain", "--config", "run.ini", "--seed", "1", "--out", "base"])?;
    run_cli(d, &["train-hypernet", "--config", "run.ini", "--base", "base/base.ckpt", "--seed", "1", "--out", "hyper"])?;
    let commands: [&[&str]; 7] = [
        &["pretrain", "--config", "run.ini", "--seed", "3"],
        &["train-hypernet", "--config", "run.ini", "--base", "base/base.ckpt", "--seed", "3"],
        &["finetune", "--config", "run.ini", "--base", "base/base.ckpt", "--subject", "train-2", "--marks", "4,8", "--seed", "3"],
        &["sample", "--checkpoint", "hyper/hypernet.ckpt", "--adapters", "hyper/hypernet.ckpt", "--adapter-id", "held-0",
          "--mode", "hmcfg", "--subject-class", "1", "--generic-class", "1", "-n", "3", "--steps", "8", "--seed", "3"],
        &["eval", "--checkpoint", "hyper/hypernet.ckpt", "--config", "run.ini", "--subject", "held-1", "-n", "3", "--steps", "8", "--seed", "3"],
        &["sweep", "--checkpoint", "hyper/hypernet.ckpt", "--config", "run.ini", "--subject", "held-1", "-n", "2", "--steps", "6", "--seed", "3"],
        &["oracle-verify", "--chains", "200", "--seed", "3"],
    ];
    for (i, cmd) in commands.iter().enumerate() {
        let mut results = Vec::new();
        for rep in 0..2 {
            let out = format!("c{i}_{rep}");
            let mut args: Vec<&str> = cmd.to_vec();
            if cmd[0] != "oracle-verify" {
                args.extend(["--out", out.as_str()]);
            }
            let stdout = match run_cli(d, &args) {
                Ok(s) => s,
                // oracle-verify at 200 chains may miss the 5% covariance bar; its output is still compared.
                Err(e) if cmd[0] == "oracle-verify" => e,
                Err(e) => return Err(e),
            };
            let files = if d.join(&out).is_dir() { dir_bytes(&d.join(&out)) } else { Vec::new() };
            results.push((stdout.replace(&out, "OUT"), files));
        }
        if results[0] != results[1] {
            return Err(format!("`{}` is not reproducible", cmd[0]));
        }
    }
    Ok(commands.len())
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = tiny_denoiser(6, 9);
    let x = rand_vec(9, &mut rng);
    let prompt = make_prompt(2, true, 4, 6).unwrap();
    let zero = new_adapter_set(&Target::ALL, 2, |t| p.config.target_dims(t), AdapterInit::Zero).unwrap();
    let plain = denoise(&x, 17, &prompt, &p, None).unwrap();
    let neutral = denoise(&x, 17, &prompt, &p, Some(&zero)).unwrap();
    let neutral_diff = plain.iter().zip(&neutral).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut merge_diff = 0.0f64;
    let mut ser_ok = true;
    for _ in 0..20 {
        let ad = random_adapters(&p, 2, 0.4, &mut rng);
        let merged = merge_adapters(&p, &ad).unwrap();
        let t = rng.random_range(1..=50);
        let x = rand_vec(9, &mut rng);
        let inj = denoise(&x, t, &prompt, &p, Some(&ad)).unwrap();
        let mer = denoise(&x, t, &prompt, &merged, None).unwrap();
        merge_diff = merge_diff.max(inj.iter().zip(&mer).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let bytes = serialize_adapters(&ad);
        let back = deserialize_adapters(&bytes).unwrap();
        ser_ok &= serialize_adapters(&back) == bytes && back == ad.to_f32_precision();
    }

    let mut ck = Checkpoint::new(p.clone());
    let hc = HypernetConfig::for_denoiser(&p.config, &Target::ALL, 2, 3, 4).unwrap();
    ck.hypernet = Some(HypernetParams::init(hc, 2).unwrap());
    ck.adapters.insert("train-0".into(), random_adapters(&p, 2, 0.4, &mut rng));
    ck.train_config = "[train]\nlambda = 0.15\n".into();
    let bytes = ck.to_bytes();
    let ck_ok = Checkpoint::from_bytes(&bytes).map(|c| c.to_bytes() == bytes).unwrap_or(false);

    let cli = cli_determinism();
    let passed = neutral_diff == 0.0 && merge_diff < 1e-10 && ser_ok && ck_ok && cli.is_ok();
    outcome(
        passed,
        format!(
            "zero-adapter diff {neutral_diff:.1e}, merge diff {merge_diff:.1e}, adapter bytes round trip {ser_ok}, checkpoint round trip {ck_ok}, CLI determinism {}",
            match &cli {
                Ok(n) => format!("ok ({n} commands)"),
                Err(e) => format!("FAILED: {e}"),
            }
        ),
    )
}

fn criterion_10() -> Outcome {
    let sched: NoiseSchedule = ScheduleSpec::default().build().unwrap();
    let (a, b) = mixture_pair().unwrap();
    let model = OracleModel { components: vec![(0.5, a), (0.5, b.clone())], sched: sched.clone() };
    let prompt = PromptSpec::new(vec![class_token(1)], class_token(1) + 1).unwrap();
    let chains = 4000;
    let stats = |mode: GuidanceMode, w: f64| {
        let g = GuidanceConfig { mode, w, steps: sched.steps(), ..Default::default() };
        let xs = guided_sample(&model, &prompt, &prompt, &g, &sched, chains, 10).unwrap();
        let v: Vec<f64> = xs.iter().map(|x| x[0]).collect();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    };
    let (mg, seg) = stats(GuidanceMode::Cfg, 2.0);
    let (mu, seu) = stats(GuidanceMode::None, 0.0);
    let analytic = b.mu[0];
    let passed = mg - analytic > 3.0 * seg && mg - mu > 3.0 * (seg * seg + seu * seu).sqrt();
    outcome(
        passed,
        format!("guided mean {mg:.4} (se {seg:.4}) vs conditional mean {analytic} (sampled {mu:.4}, se {seu:.4}) along the class axis"),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Duration, fn() -> Outcome); 10] = [
        (1, "hm-cfg algebra", Duration::from_secs(1), criterion_1),
        (2, "score/eps commutation", Duration::from_secs(1), criterion_2),
        (3, "oracle sampling", Duration::from_secs(120), criterion_3),
        (4, "gradient correctness", Duration::from_secs(30), criterion_4),
        (5, "loss decomposition", Duration::from_secs(10), criterion_5),
        (6, "output-norm regularizer effect", Duration::from_secs(900), criterion_6),
        (7, "early-stopping trend", Duration::from_secs(600), criterion_7),
        (8, "kappa trade-off", Duration::from_secs(600), criterion_8),
        (9, "neutrality, round trips, determinism", Duration::from_secs(60), criterion_9),
        (10, "guidance direction", Duration::from_secs(60), criterion_10),
    ];
    let mut failed = Vec::new();
    for (id, name, budget, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        // The shared base model is built outside the timed region.
        if matches!(id, 6..=8) {
            base_model();
            metric_suite();
        }
        if id == 8 {
            finetuned();
        }
        let t0 = Instant::now();
        let out = run();
        let elapsed = t0.elapsed();
        let in_budget = elapsed <= budget;
        let passed = out.passed && in_budget;
        println!(
            "[{}] criterion {id:>2} {name}: {} ({:.2}s, budget {}s{})",
            if passed { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_budget { "" } else { ", over budget" }
        );
        if !passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
