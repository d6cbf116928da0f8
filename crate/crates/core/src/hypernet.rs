//! Image-conditioned generator of LoRA factors.
//!
//! An MLP encoder maps a flattened image to a feature vector, a shared MLP
//! trunk refines it (`iterations` times, with tied weights), and one linear
//! head per target emits that target's `B | A` factors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::DenoiserConfig;
use crate::error::{check_len, Error, Result};
use crate::lora::{average_adapters, LoraAdapterSet, LoraEntry, Target};
use crate::tensor::{axpy, silu, silu_grad, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct HypernetConfig {
    pub data_dim: usize,
    pub enc_hidden: usize,
    pub feat: usize,
    pub rank: usize,
    pub iterations: usize,
    /// Scale of the initial `A`-part head bias.
    pub a_init_std: f64,
    /// `(target, (d_out, d_in))`, sorted by target.
    pub targets: Vec<(Target, (usize, usize))>,
}

impl HypernetConfig {
    pub fn for_denoiser(
        denoiser: &DenoiserConfig,
        targets: &[Target],
        rank: usize,
        feat: usize,
        enc_hidden: usize,
    ) -> Result<Self> {
        let mut ts: Vec<(Target, (usize, usize))> =
            targets.iter().map(|t| (*t, denoiser.target_dims(*t))).collect();
        ts.sort_by_key(|(t, _)| *t);
        ts.dedup_by_key(|(t, _)| *t);
        let cfg = Self { data_dim: denoiser.data_dim, enc_hidden, feat, rank, iterations: 1, a_init_std: 0.02, targets: ts };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.enc_hidden == 0 || self.feat == 0 || self.rank == 0 {
            return Err(Error::InvalidArgument("hypernet widths and rank must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("hypernet needs at least one trunk iteration".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidArgument("hypernet needs at least one target".into()));
        }
        if !(self.a_init_std >= 0.0) {
            return Err(Error::InvalidArgument("a_init_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn head_size(&self, idx: usize) -> usize {
        let (d_out, d_in) = self.targets[idx].1;
        self.rank * (d_in + d_out)
    }

    pub fn output_size(&self) -> usize {
        (0..self.targets.len()).map(|i| self.head_size(i)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypernetParams {
    pub config: HypernetConfig,
    pub enc_w1: Matrix,
    pub enc_b1: Vec<f64>,
    pub enc_w2: Matrix,
    pub enc_b2: Vec<f64>,
    pub trunk_w1: Matrix,
    pub trunk_b1: Vec<f64>,
    pub trunk_w2: Matrix,
    pub trunk_b2: Vec<f64>,
    /// One `(weight, bias)` per target, in target order.
    pub heads: Vec<(Matrix, Vec<f64>)>,
}

impl HypernetParams {
    /// Random encoder and trunk. Head weights start at zero; head biases
    /// are zero on the `B` part and `N(0, a_init_std^2)` on the `A` part, so
    /// every predicted `B A` starts at zero while both factors still
    /// receive gradient.
    pub fn init(config: HypernetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, f) = (config.data_dim, config.enc_hidden, config.feat);
        let heads = config
            .targets
            .iter()
            .enumerate()
            .map(|(i, &(_, (d_out, d_in)))| {
                let split = d_out * config.rank;
                let mut bias = vec![0.0; config.head_size(i)];
                let a = Matrix::randn(config.rank, d_in, config.a_init_std, &mut rng);
                bias[split..].copy_from_slice(&a.data);
                (Matrix::zeros(config.head_size(i), f), bias)
            })
            .collect();
        Ok(Self {
            enc_w1: Matrix::randn(h, d, 1.0 / (d as f64).sqrt(), &mut rng),
            enc_b1: vec![0.0; h],
            enc_w2: Matrix::randn(f, h, 1.0 / (h as f64).sqrt(), &mut rng),
            enc_b2: vec![0.0; f],
            trunk_w1: Matrix::randn(f, f, 1.0 / (f as f64).sqrt(), &mut rng),
            trunk_b1: vec![0.0; f],
            trunk_w2: Matrix::randn(f, f, 1.0 / (f as f64).sqrt(), &mut rng),
            trunk_b2: vec![0.0; f],
            heads,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.enc_w1.data);
        f(&self.enc_b1);
        f(&self.enc_w2.data);
        f(&self.enc_b2);
        f(&self.trunk_w1.data);
        f(&self.trunk_b1);
        f(&self.trunk_w2.data);
        f(&self.trunk_b2);
        for (w, b) in &self.heads {
            f(&w.data);
            f(b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.enc_w1.data);
        f(&mut self.enc_b1);
        f(&mut self.enc_w2.data);
        f(&mut self.enc_b2);
        f(&mut self.trunk_w1.data);
        f(&mut self.trunk_b1);
        f(&mut self.trunk_w2.data);
        f(&mut self.trunk_b2);
        for (w, b) in &mut self.heads {
            f(&mut w.data);
            f(b);
        }
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

    /// Zeroes every head, restoring the zero-output state.
    pub fn zero_heads(&mut self) {
        for (w, b) in &mut self.heads {
            w.data.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Intermediates of one image's forward pass.
#[derive(Debug, Clone)]
pub struct HypernetCache {
    x: Vec<f64>,
    enc_u: Vec<f64>,
    enc_g: Vec<f64>,
    /// Trunk inputs and pre-activations, one per iteration.
    trunk_in: Vec<Vec<f64>>,
    trunk_u: Vec<Vec<f64>>,
    trunk_g: Vec<Vec<f64>>,
    z: Vec<f64>,
}

fn affine(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = w.matvec(x);
    axpy(1.0, b, &mut y);
    y
}

/// Feature vector of one image.
pub fn encode_image(x: &[f64], params: &HypernetParams) -> Result<Vec<f64>> {
    check_len(params.config.data_dim, x.len())?;
    let g: Vec<f64> = affine(&params.enc_w1, &params.enc_b1, x).into_iter().map(silu).collect();
    Ok(affine(&params.enc_w2, &params.enc_b2, &g))
}

fn trunk_forward(feat: &[f64], params: &HypernetParams) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut z = feat.to_vec();
    let (mut ins, mut us, mut gs) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..params.config.iterations {
        let u = affine(&params.trunk_w1, &params.trunk_b1, &z);
        let g: Vec<f64> = u.iter().map(|v| silu(*v)).collect();
        let next = affine(&params.trunk_w2, &params.trunk_b2, &g);
        ins.push(std::mem::replace(&mut z, next));
        us.push(u);
        gs.push(g);
    }
    (z, ins, us, gs)
}

fn heads_to_adapters(z: &[f64], params: &HypernetParams) -> Result<LoraAdapterSet> {
    let r = params.config.rank;
    let entries = params
        .config
        .targets
        .iter()
        .zip(&params.heads)
        .map(|(&(target, (d_out, d_in)), (w, b))| {
            let out = affine(w, b, z);
            let split = d_out * r;
            let entry = LoraEntry {
                b: Matrix::from_vec(d_out, r, out[..split].to_vec()),
                a: Matrix::from_vec(r, d_in, out[split..].to_vec()),
            };
            (target, entry)
        })
        .collect();
    LoraAdapterSet::from_entries(entries)
}

/// Runs the trunk and heads; each head's output is split into `B`
/// (first `d_out * r` values, row-major) and then `A`.
pub fn decode_weights(feat: &[f64], params: &HypernetParams) -> Result<LoraAdapterSet> {
    check_len(params.config.feat, feat.len())?;
    let (z, ..) = trunk_forward(feat, params);
    heads_to_adapters(&z, params)
}

/// Adapters for one image plus the cache needed by [`backward_image`].
pub fn forward_image(x: &[f64], params: &HypernetParams) -> Result<(LoraAdapterSet, HypernetCache)> {
    check_len(params.config.data_dim, x.len())?;
    let enc_u = affine(&params.enc_w1, &params.enc_b1, x);
    let enc_g: Vec<f64> = enc_u.iter().map(|v| silu(*v)).collect();
    let feat = affine(&params.enc_w2, &params.enc_b2, &enc_g);
    let (z, trunk_in, trunk_u, trunk_g) = trunk_forward(&feat, params);
    let set = heads_to_adapters(&z, params)?;
    Ok((set, HypernetCache { x: x.to_vec(), enc_u, enc_g, trunk_in, trunk_u, trunk_g, z }))
}

/// Mean of the per-image predictions, taken factor-wise.
pub fn predict(images: &[Vec<f64>], params: &HypernetParams) -> Result<LoraAdapterSet> {
    predict_with_cache(images, params).map(|(set, _)| set)
}

pub fn predict_with_cache(
    images: &[Vec<f64>],
    params: &HypernetParams,
) -> Result<(LoraAdapterSet, Vec<HypernetCache>)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("predict needs at least one image".into()));
    }
    let (sets, caches): (Vec<_>, Vec<_>) =
        images.iter().map(|x| forward_image(x, params)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok((average_adapters(&sets)?, caches))
}

/// Accumulates `scale * d(adapters)/d(params)^T d_adapters` into `grads`.
pub fn backward_image(
    cache: &HypernetCache,
    d_adapters: &LoraAdapterSet,
    scale: f64,
    params: &HypernetParams,
    grads: &mut HypernetParams,
) -> Result<()> {
    let f = params.config.feat;
    let mut d_z = vec![0.0; f];
    for (i, &(target, _)) in params.config.targets.iter().enumerate() {
        let e = d_adapters
            .get(target)
            .ok_or_else(|| Error::AdapterMismatch(format!("missing gradient for {target}")))?;
        let mut d_out = Vec::with_capacity(params.config.head_size(i));
        d_out.extend(e.b.data.iter().map(|v| scale * v));
        d_out.extend(e.a.data.iter().map(|v| scale * v));
        check_len(params.config.head_size(i), d_out.len())?;
        let (gw, gb) = &mut grads.heads[i];
        gw.add_outer(1.0, &d_out, &cache.z);
        axpy(1.0, &d_out, gb);
        axpy(1.0, &params.heads[i].0.matvec_t(&d_out), &mut d_z);
    }
    for k in (0..params.config.iterations).rev() {
        grads.trunk_w2.add_outer(1.0, &d_z, &cache.trunk_g[k]);
        axpy(1.0, &d_z, &mut grads.trunk_b2);
        let d_g = params.trunk_w2.matvec_t(&d_z);
        let d_u: Vec<f64> = d_g.iter().zip(&cache.trunk_u[k]).map(|(g, u)| g * silu_grad(*u)).collect();
        grads.trunk_w1.add_outer(1.0, &d_u, &cache.trunk_in[k]);
        axpy(1.0, &d_u, &mut grads.trunk_b1);
        d_z = params.trunk_w1.matvec_t(&d_u);
    }
    grads.enc_w2.add_outer(1.0, &d_z, &cache.enc_g);
    axpy(1.0, &d_z, &mut grads.enc_b2);
    let d_g = params.enc_w2.matvec_t(&d_z);
    let d_u: Vec<f64> = d_g.iter().zip(&cache.enc_u).map(|(g, u)| g * silu_grad(*u)).collect();
    grads.enc_w1.add_outer(1.0, &d_u, &cache.x);
    axpy(1.0, &d_u, &mut grads.enc_b1);
    Ok(())
}

/// Back-propagates a gradient on the averaged prediction through every image.
pub fn backward_predict(
    caches: &[HypernetCache],
    d_adapters: &LoraAdapterSet,
    params: &HypernetParams,
    grads: &mut HypernetParams,
) -> Result<()> {
    let scale = 1.0 / caches.len() as f64;
    for c in caches {
        backward_image(c, d_adapters, scale, params, grads)?;
    }
    Ok(())
}
