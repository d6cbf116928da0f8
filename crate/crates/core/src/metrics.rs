//! Subject and prompt fidelity measures, the kappa sweep, and rank
//! correlation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::denoiser::PromptSpec;
use crate::error::{check_len, Error, Result};
use crate::guidance::{guided_sample, GuidanceConfig, NoisePredictor};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::schedule::NoiseSchedule;
use crate::toy_data::{gen_class_prior, mix_seed};
use crate::tensor::{axpy, dot, silu, silu_grad, softmax_in_place, Matrix};

/// Cosine similarity of frozen random-projection features.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMetric {
    pub projection: Matrix,
    pub center: Vec<f64>,
}

impl SubjectMetric {
    /// `features` rows of a Gaussian projection drawn from `seed`; inputs
    /// are centered by `center` before projecting.
    pub fn new(data_dim: usize, features: usize, center: Vec<f64>, seed: u64) -> Result<Self> {
        check_len(data_dim, center.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Matrix::randn(features, data_dim, 1.0 / (data_dim as f64).sqrt(), &mut rng);
        Ok(Self { projection, center })
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.center.len(), x.len())?;
        let c: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        Ok(self.projection.matvec(&c))
    }

    /// Per-image cosine between each generated image's features and the
    /// centroid of the reference features.
    pub fn per_sample(&self, generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Vec<f64>> {
        let g = generated.iter().map(|x| self.features(x)).collect::<Result<Vec<_>>>()?;
        let r = reference.iter().map(|x| self.features(x)).collect::<Result<Vec<_>>>()?;
        per_sample_cosine(&g, &r)
    }

    pub fn subject_fidelity(&self, generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
        let s = self.per_sample(generated, reference)?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine of every generated feature vector with the reference centroid.
pub fn per_sample_cosine(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Vec<f64>> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("fidelity needs generated and reference images".into()));
    }
    let mut centroid = vec![0.0; reference[0].len()];
    for r in reference {
        check_len(centroid.len(), r.len())?;
        axpy(1.0 / reference.len() as f64, r, &mut centroid);
    }
    generated
        .iter()
        .map(|g| {
            check_len(centroid.len(), g.len())?;
            Ok(cosine(g, &centroid))
        })
        .collect()
}

/// One-hidden-layer classifier used to score prompt adherence.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeTraining {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of each batch made of uniform-noise images with uniform
    /// targets.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeTraining {
    fn default() -> Self {
        Self { hidden: 32, steps: 1500, batch_size: 32, lr: 3e-3, noise_fraction: 0.2, seed: 0 }
    }
}

impl Probe {
    pub fn num_classes(&self) -> usize {
        self.w2.rows
    }

    pub fn data_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.data_dim(), x.len())?;
        let mut u = self.w1.matvec(x);
        axpy(1.0, &self.b1, &mut u);
        let g: Vec<f64> = u.iter().map(|v| silu(*v)).collect();
        let mut z = self.w2.matvec(&g);
        axpy(1.0, &self.b2, &mut z);
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Probability assigned to `class_id`, one value per image.
    pub fn per_sample(&self, images: &[Vec<f64>], class_id: usize) -> Result<Vec<f64>> {
        if class_id >= self.num_classes() {
            return Err(Error::InvalidArgument(format!("class {class_id} unknown to the probe")));
        }
        images.iter().map(|x| self.probabilities(x).map(|p| p[class_id])).collect()
    }

    pub fn prompt_fidelity(&self, images: &[Vec<f64>], class_id: usize) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("prompt fidelity needs images".into()));
        }
        let p = self.per_sample(images, class_id)?;
        Ok(p.iter().sum::<f64>() / p.len() as f64)
    }

    pub fn accuracy(&self, data: &[(Vec<f64>, usize)]) -> Result<f64> {
        let mut hits = 0;
        for (x, c) in data {
            let p = self.probabilities(x)?;
            let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            hits += usize::from(best == *c);
        }
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.w1.data);
        f(&mut self.b1);
        f(&mut self.w2.data);
        f(&mut self.b2);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [&self.w1.data[..], &self.b1, &self.w2.data, &self.b2].concat()
    }

    fn set_from_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        });
    }

    /// Cross-entropy gradient for one example with soft target `y`.
    fn accumulate_grad(&self, x: &[f64], y: &[f64], scale: f64, g: &mut Probe) -> f64 {
        let mut u = self.w1.matvec(x);
        axpy(1.0, &self.b1, &mut u);
        let h: Vec<f64> = u.iter().map(|v| silu(*v)).collect();
        let mut p = self.w2.matvec(&h);
        axpy(1.0, &self.b2, &mut p);
        softmax_in_place(&mut p);
        let loss = -y.iter().zip(&p).map(|(t, q)| if *t > 0.0 { t * q.max(1e-300).ln() } else { 0.0 }).sum::<f64>();
        let dz: Vec<f64> = p.iter().zip(y).map(|(q, t)| scale * (q - t)).collect();
        g.w2.add_outer(1.0, &dz, &h);
        axpy(1.0, &dz, &mut g.b2);
        let dh = self.w2.matvec_t(&dz);
        let du: Vec<f64> = dh.iter().zip(&u).map(|(d, v)| d * silu_grad(*v)).collect();
        g.w1.add_outer(1.0, &du, x);
        axpy(1.0, &du, &mut g.b1);
        loss
    }

    /// Trains on labelled images plus uniform-noise images whose target is
    /// the uniform distribution.
    pub fn train(data: &[(Vec<f64>, usize)], num_classes: usize, cfg: &ProbeTraining) -> Result<Self> {
        let first = data.first().ok_or_else(|| Error::InvalidArgument("probe needs training data".into()))?;
        let d = first.0.len();
        if num_classes < 2 || data.iter().any(|(x, c)| x.len() != d || *c >= num_classes) {
            return Err(Error::InvalidArgument("probe data has inconsistent shapes or labels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut probe = Probe {
            w1: Matrix::randn(cfg.hidden, d, 1.0 / (d as f64).sqrt(), &mut rng),
            b1: vec![0.0; cfg.hidden],
            w2: Matrix::randn(num_classes, cfg.hidden, 1.0 / (cfg.hidden as f64).sqrt(), &mut rng),
            b2: vec![0.0; num_classes],
        };
        let mut flat = probe.to_flat();
        let mut opt = Optimizer::new(OptimizerSpec::default(), cfg.lr, 0.0, flat.len());
        let uniform = vec![1.0 / num_classes as f64; num_classes];
        let n_noise = (cfg.batch_size as f64 * cfg.noise_fraction).round() as usize;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        for _ in 0..cfg.steps {
            let mut g = probe.clone();
            g.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v = 0.0));
            let scale = 1.0 / cfg.batch_size as f64;
            for k in 0..cfg.batch_size {
                if k < n_noise {
                    let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
                    probe.accumulate_grad(&x, &uniform, scale, &mut g);
                } else {
                    if cursor == order.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    let (x, c) = &data[order[cursor]];
                    cursor += 1;
                    let mut y = vec![0.0; num_classes];
                    y[*c] = 1.0;
                    probe.accumulate_grad(x, &y, scale, &mut g);
                }
            }
            opt.update(&mut flat, &g.to_flat())?;
            probe.set_from_flat(&flat);
        }
        Ok(probe)
    }
}

/// Frozen evaluation artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSuite {
    pub subject: SubjectMetric,
    pub probe: Probe,
}

impl MetricSuite {
    /// Probe trained on `per_class` class-prior images per class, subject
    /// features centered on the same pool.
    pub fn for_classes(num_classes: usize, side: usize, per_class: usize, features: usize, seed: u64) -> Result<Self> {
        let data: Vec<(Vec<f64>, usize)> = (0..num_classes)
            .map(|c| gen_class_prior(c, per_class, mix_seed(seed, 7), side, &[]).map(|v| (c, v)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flat_map(|(c, v)| v.into_iter().map(move |x| (x, c)))
            .collect();
        let dim = side * side;
        let mut center = vec![0.0; dim];
        for (x, _) in &data {
            axpy(1.0 / data.len() as f64, x, &mut center);
        }
        let probe = Probe::train(&data, num_classes, &ProbeTraining { seed, ..Default::default() })?;
        Ok(Self { subject: SubjectMetric::new(dim, features, center, mix_seed(seed, 11))?, probe })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub subject_fidelity: f64,
    pub prompt_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub subject_fidelity: f64,
    pub prompt_fidelity: f64,
    pub samples: Vec<SampleScore>,
    /// Configuration echo as ordered `key: value` pairs.
    pub config: Vec<(String, String)>,
}

impl MetricReport {
    pub fn score(
        suite: &MetricSuite,
        generated: &[Vec<f64>],
        reference: &[Vec<f64>],
        target_class: usize,
        config: Vec<(String, String)>,
    ) -> Result<Self> {
        let s = suite.subject.per_sample(generated, reference)?;
        let p = suite.probe.per_sample(generated, target_class)?;
        let n = s.len() as f64;
        Ok(Self {
            subject_fidelity: s.iter().sum::<f64>() / n,
            prompt_fidelity: p.iter().sum::<f64>() / n,
            samples: s
                .into_iter()
                .zip(p)
                .map(|(subject_fidelity, prompt_fidelity)| SampleScore { subject_fidelity, prompt_fidelity })
                .collect(),
            config,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("subject_fidelity: {:.6}\n", self.subject_fidelity));
        out.push_str(&format!("prompt_fidelity: {:.6}\n", self.prompt_fidelity));
        out.push_str(&format!("samples: {}\n", self.samples.len()));
        for (k, v) in &self.config {
            out.push_str(&format!("{k}: {v}\n"));
        }
        out.push_str("\n[samples]\nindex,subject_fidelity,prompt_fidelity\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!("{i},{:.6},{:.6}\n", s.subject_fidelity, s.prompt_fidelity));
        }
        out
    }
}

/// What to sample and how to score it.
#[derive(Debug, Clone)]
pub struct EvalTask<'a> {
    pub prompt_s: &'a PromptSpec,
    pub prompt_g: &'a PromptSpec,
    pub target_class: usize,
    pub reference: &'a [Vec<f64>],
    pub n: usize,
    pub seed: u64,
}

pub fn evaluate(
    model: &dyn NoisePredictor,
    suite: &MetricSuite,
    task: &EvalTask,
    guidance: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<(MetricReport, Vec<Vec<f64>>)> {
    let samples = guided_sample(model, task.prompt_s, task.prompt_g, guidance, sched, task.n, task.seed)?;
    let config = vec![
        ("mode".to_string(), guidance.mode.as_str().to_string()),
        ("guidance_scale".to_string(), guidance.guidance_scale().to_string()),
        ("kappa".to_string(), guidance.kappa.to_string()),
        ("steps".to_string(), guidance.steps.to_string()),
        ("seed".to_string(), task.seed.to_string()),
        ("target_class".to_string(), task.target_class.to_string()),
    ];
    let report = MetricReport::score(suite, &samples, task.reference, task.target_class, config)?;
    Ok((report, samples))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub kappa: f64,
    pub subject_fidelity: f64,
    pub prompt_fidelity: f64,
}

/// Samples and scores once per kappa, reusing `task.seed` for every row.
pub fn kappa_sweep(
    model: &dyn NoisePredictor,
    suite: &MetricSuite,
    task: &EvalTask,
    guidance: &GuidanceConfig,
    kappas: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<SweepRow>> {
    kappas
        .par_iter()
        .map(|&kappa| {
            let g = GuidanceConfig { kappa, ..*guidance };
            let (r, _) = evaluate(model, suite, task, &g, sched)?;
            Ok(SweepRow { kappa, subject_fidelity: r.subject_fidelity, prompt_fidelity: r.prompt_fidelity })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("kappa,subject_fidelity,prompt_fidelity\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.kappa, r.subject_fidelity, r.prompt_fidelity));
    }
    out
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::InvalidArgument("rank correlation needs two points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_data::{gen_class_prior, gen_subject_images, SubjectSpec};
    use proptest::prelude::{prop, prop_assert, proptest};

    fn probe_data(per_class: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
        (0..4)
            .flat_map(|c| gen_class_prior(c, per_class, seed, 16, &[]).unwrap().into_iter().map(move |x| (x, c)))
            .collect()
    }

    #[test]
    fn cosine_examples() {
        let r = vec![vec![1.0, 2.0, -0.5]];
        assert!((per_sample_cosine(&r, &r).unwrap()[0] - 1.0).abs() < 1e-12);
        let neg = vec![vec![-1.0, -2.0, 0.5]];
        assert!((per_sample_cosine(&neg, &r).unwrap()[0] + 1.0).abs() < 1e-12);
        assert!(per_sample_cosine(&[], &r).is_err());
        assert!(per_sample_cosine(&r, &[]).is_err());
    }

    #[test]
    fn subject_metric_examples() {
        let m = SubjectMetric::new(256, 64, vec![0.1; 256], 3).unwrap();
        let s = SubjectSpec::train(2, 5);
        let imgs = gen_subject_images(&s, 4, 0, 16).unwrap();
        assert!((m.subject_fidelity(&imgs[..1], &imgs[..1]).unwrap() - 1.0).abs() < 1e-12);
        let mut rev = imgs.clone();
        rev.reverse();
        let a = m.subject_fidelity(&imgs[..2], &imgs).unwrap();
        let b = m.subject_fidelity(&[imgs[1].clone(), imgs[0].clone()], &rev).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(m, SubjectMetric::new(256, 64, vec![0.1; 256], 3).unwrap());
    }

    #[test]
    fn probe_is_accurate_and_calibrated_on_noise() {
        let train = probe_data(200, 1);
        let cfg = ProbeTraining { steps: 800, ..Default::default() };
        let probe = Probe::train(&train, 4, &cfg).unwrap();
        let val = probe_data(50, 2);
        assert!(probe.accuracy(&val).unwrap() > 0.95);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise: Vec<Vec<f64>> = (0..50).map(|_| (0..256).map(|_| rng.random::<f64>()).collect()).collect();
        for c in 0..4 {
            assert!((probe.prompt_fidelity(&noise, c).unwrap() - 0.25).abs() < 0.1);
        }
        let p = probe.probabilities(&val[0].0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(probe.prompt_fidelity(&noise, 4).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // ties: ranks (1.5, 1.5, 3) against (1, 2, 3) give 0.866...
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 3f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn report_text_layout() {
        let r = MetricReport {
            subject_fidelity: 0.5,
            prompt_fidelity: 0.25,
            samples: vec![SampleScore { subject_fidelity: 0.5, prompt_fidelity: 0.25 }],
            config: vec![("kappa".into(), "1".into())],
        };
        let t = r.to_text();
        assert!(t.starts_with("subject_fidelity: 0.500000\nprompt_fidelity: 0.250000\n"));
        assert!(t.contains("kappa: 1\n"));
        assert!(t.ends_with("index,subject_fidelity,prompt_fidelity\n0,0.500000,0.250000\n"));
        let csv = sweep_csv(&[SweepRow { kappa: 0.4, subject_fidelity: 0.1, prompt_fidelity: 0.9 }]);
        assert_eq!(csv, "kappa,subject_fidelity,prompt_fidelity\n0.4,0.100000,0.900000\n");
    }

    proptest! {
        #[test]
        fn spearman_is_bounded_and_rank_invariant(v in prop::collection::vec(-10.0f64..10.0, 3..12)) {
            let y: Vec<f64> = v.iter().map(|x| x.powi(3) + 1.0).collect();
            let r = spearman(&v, &y).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let distinct = v.iter().enumerate().all(|(i, a)| v[..i].iter().all(|b| b != a));
            if distinct {
                prop_assert!((r - 1.0).abs() < 1e-12);
            }
        }
    }
}
