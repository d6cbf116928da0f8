//! Deterministic synthetic subjects on a small grayscale grid.
//!
//! A class is a shape archetype (disk, square outline, plus, diagonal cross).
//! A subject is one instance of its class: position, size, stroke width and
//! brightness are fixed by `subject_seed`. Each rendering adds a little
//! seeded jitter so a subject's images are similar but not identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{PromptSpec, SUBJECT_TOKEN};
use crate::error::{Error, Result};

pub const DEFAULT_SIDE: usize = 16;
pub const CLASS_TOKEN_OFFSET: usize = 2;

const HELD_OUT_BASE: u64 = 1 << 32;
const PRIOR_BASE: u64 = 1 << 40;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix_seed(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubjectSpec {
    pub class_id: usize,
    pub subject_seed: u64,
}

/// Appearance parameters derived from a subject seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub stroke: f64,
    pub intensity: f64,
}

impl SubjectSpec {
    pub fn new(class_id: usize, subject_seed: u64) -> Self {
        Self { class_id, subject_seed }
    }

    /// Training subjects use seeds `0..n`.
    pub fn train(class_id: usize, index: usize) -> Self {
        Self::new(class_id, index as u64)
    }

    /// Held-out subjects live in a disjoint seed range.
    pub fn held_out(class_id: usize, index: usize) -> Self {
        Self::new(class_id, HELD_OUT_BASE + index as u64)
    }

    pub fn appearance(&self, side: usize) -> Appearance {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.subject_seed, self.class_id as u64));
        let scale = side as f64 / DEFAULT_SIDE as f64;
        let mid = side as f64 / 2.0;
        Appearance {
            cx: mid + scale * rng.random_range(-2.5..2.5),
            cy: mid + scale * rng.random_range(-2.5..2.5),
            radius: scale * rng.random_range(3.2..5.8),
            stroke: scale * rng.random_range(1.4..2.6),
            intensity: rng.random_range(0.55..1.0),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Signed distance (negative inside) from a point to the class shape.
fn shape_distance(class_id: usize, dx: f64, dy: f64, app: &Appearance) -> f64 {
    let half = app.stroke / 2.0;
    let bars = |u: f64, v: f64| {
        let horiz = (v.abs() - half).max(u.abs() - app.radius);
        let vert = (u.abs() - half).max(v.abs() - app.radius);
        horiz.min(vert)
    };
    match class_id % 4 {
        0 => (dx * dx + dy * dy).sqrt() - app.radius,
        1 => (dx.abs().max(dy.abs()) - app.radius * 0.85).abs() - half,
        2 => bars(dx, dy),
        _ => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            bars(s * (dx + dy), s * (dx - dy))
        }
    }
}

/// Renders one image of a class at the given appearance, row-major in `[0, 1]`.
pub fn render(class_id: usize, app: &Appearance, side: usize) -> Vec<f64> {
    let softness = 0.5 * side as f64 / DEFAULT_SIDE as f64;
    let mut img = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 + 0.5 - app.cx;
            let dy = y as f64 + 0.5 - app.cy;
            let d = shape_distance(class_id, dx, dy, app);
            img.push(app.intensity * sigmoid(-d / softness));
        }
    }
    img
}

fn jittered(s: &SubjectSpec, side: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut app = s.appearance(side);
    let scale = side as f64 / DEFAULT_SIDE as f64;
    app.cx += scale * rng.random_range(-0.4..0.4);
    app.cy += scale * rng.random_range(-0.4..0.4);
    app.intensity = (app.intensity + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    let mut img = render(s.class_id, &app, side);
    for v in img.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v + 0.02 * n).clamp(0.0, 1.0);
    }
    img
}

/// `n` renderings of a subject; image `i` depends only on `(s, noise_seed, i)`.
pub fn gen_subject_images(s: &SubjectSpec, n: usize, noise_seed: u64, side: usize) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one image".into()));
    }
    let base = mix_seed(mix_seed(s.subject_seed, s.class_id as u64), noise_seed);
    Ok((0..n).map(|i| jittered(s, side, mix_seed(base, i as u64))).collect())
}

/// `m` generic members of a class, each from a fresh subject seed. Seeds in
/// `exclude` are skipped so a held subject never appears in its prior pool.
pub fn gen_class_prior(
    class_id: usize,
    m: usize,
    seed: u64,
    side: usize,
    exclude: &[SubjectSpec],
) -> Result<Vec<Vec<f64>>> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one prior image".into()));
    }
    let mut out = Vec::with_capacity(m);
    let mut k = 0u64;
    while out.len() < m {
        let subject_seed = PRIOR_BASE | (mix_seed(seed, k) >> 24);
        k += 1;
        let spec = SubjectSpec::new(class_id, subject_seed);
        if exclude.iter().any(|e| *e == spec) {
            continue;
        }
        out.push(gen_subject_images(&spec, 1, seed, side)?.remove(0));
    }
    Ok(out)
}

/// Vocabulary index of a class token.
pub fn class_token(class_id: usize) -> usize {
    CLASS_TOKEN_OFFSET + class_id
}

/// `[V, class]` when `with_subject`, otherwise `[class]`.
pub fn make_prompt(class_id: usize, with_subject: bool, num_classes: usize, vocab: usize) -> Result<PromptSpec> {
    if class_id >= num_classes || class_token(class_id) >= vocab {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} out of range for {num_classes} classes"
        )));
    }
    let tokens = if with_subject {
        vec![SUBJECT_TOKEN, class_token(class_id)]
    } else {
        vec![class_token(class_id)]
    };
    PromptSpec::new(tokens, vocab)
}

/// Corpus layout used by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub train_subjects: usize,
    pub images_per_subject: usize,
    pub held_out_subjects: usize,
    pub side: usize,
    pub noise_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_subjects: 64,
            images_per_subject: 8,
            held_out_subjects: 16,
            side: DEFAULT_SIDE,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubjectImages {
    pub spec: SubjectSpec,
    pub images: Vec<Vec<f64>>,
}

impl CorpusSpec {
    pub fn data_dim(&self) -> usize {
        self.side * self.side
    }

    pub fn train_set(&self) -> Result<Vec<SubjectImages>> {
        self.collect(SubjectSpec::train, self.train_subjects)
    }

    pub fn held_out_set(&self) -> Result<Vec<SubjectImages>> {
        self.collect(SubjectSpec::held_out, self.held_out_subjects)
    }

    fn collect(&self, make: fn(usize, usize) -> SubjectSpec, per_class: usize) -> Result<Vec<SubjectImages>> {
        let mut out = Vec::with_capacity(self.num_classes * per_class);
        for i in 0..per_class {
            for c in 0..self.num_classes {
                let spec = make(c, i);
                let images = gen_subject_images(&spec, self.images_per_subject, self.noise_seed, self.side)?;
                out.push(SubjectImages { spec, images });
            }
        }
        Ok(out)
    }
}

/// Binary (`P5`) 8-bit PGM of an image with values clamped to `[0, 1]`.
pub fn to_pgm(img: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn from_pgm(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize)> {
    let bad = || Error::Format("malformed PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let maxval: f64 = fields[3].parse().map_err(|_| bad())?;
    let data = bytes.get(pos..pos + w * h).ok_or_else(bad)?;
    Ok((data.iter().map(|b| *b as f64 / maxval).collect(), w, h))
}

/// Writes every training and held-out image as PGM plus a `manifest.txt`
/// with one `class_id subject_seed index file` record per line.
pub fn export_corpus(spec: &CorpusSpec, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let mut manifest = fs::File::create(dir.join("manifest.txt"))?;
    let mut count = 0;
    for set in [spec.train_set()?, spec.held_out_set()?] {
        for subject in set {
            for (i, img) in subject.images.iter().enumerate() {
                let name = format!("c{}_s{}_{}.pgm", subject.spec.class_id, subject.spec.subject_seed, i);
                fs::write(dir.join(&name), to_pgm(img, spec.side, spec.side))?;
                writeln!(manifest, "{} {} {} {}", subject.spec.class_id, subject.spec.subject_seed, i, name)?;
                count += 1;
            }
        }
    }
    Ok(count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub spec: SubjectSpec,
    pub index: usize,
    pub image: Vec<f64>,
}

pub fn import_corpus(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("manifest line {}: `{line}`", lineno + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let class_id = parts[0].parse().map_err(|_| bad())?;
        let subject_seed = parts[1].parse().map_err(|_| bad())?;
        let index = parts[2].parse().map_err(|_| bad())?;
        let (image, _, _) = from_pgm(&fs::read(dir.join(parts[3]))?)?;
        out.push(ManifestRecord { spec: SubjectSpec::new(class_id, subject_seed), index, image });
    }
    Ok(out)
}
