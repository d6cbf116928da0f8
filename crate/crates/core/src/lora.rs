//! Low-rank adapter sets for the cross-attention projections.
//!
//! An entry holds `A` (`r x d_in`) and `B` (`d_out x r`); the weight update
//! it contributes is `B * A`. The regularizer and averaging both act on the
//! factors themselves, never on the product.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"HLRA";
const VERSION: u16 = 1;

/// Projection matrices of the cross-attention block that accept adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Query,
    Key,
    Value,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Query, Target::Key, Target::Value];

    pub fn name(&self) -> &'static str {
        match self {
            Target::Query => "W_Q",
            Target::Key => "W_K",
            Target::Value => "W_V",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "W_Q" | "Q" | "q" => Ok(Target::Query),
            "W_K" | "K" | "k" => Ok(Target::Key),
            "W_V" | "V" | "v" => Ok(Target::Value),
            other => Err(Error::UnknownTarget(other.to_string())),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraEntry {
    pub fn zeros(d_out: usize, d_in: usize, rank: usize) -> Self {
        Self { a: Matrix::zeros(rank, d_in), b: Matrix::zeros(d_out, rank) }
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    pub fn d_in(&self) -> usize {
        self.a.cols
    }

    pub fn d_out(&self) -> usize {
        self.b.rows
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `Delta W = B * A`
pub fn adapter_delta(entry: &LoraEntry) -> Result<Matrix> {
    if entry.b.cols != entry.a.rows {
        return Err(Error::AdapterMismatch(format!(
            "B is {}x{} but A is {}x{}",
            entry.b.rows, entry.b.cols, entry.a.rows, entry.a.cols
        )));
    }
    Ok(entry.b.matmul(&entry.a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterInit {
    Zero,
    /// `B = 0`, `A ~ N(0, 0.02^2)` from the given seed.
    BZeroARandom { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet {
    rank: usize,
    entries: Vec<(Target, LoraEntry)>,
}

pub fn new_adapter_set(
    targets: &[Target],
    rank: usize,
    dims: impl Fn(Target) -> (usize, usize),
    init: AdapterInit,
) -> Result<LoraAdapterSet> {
    if rank == 0 {
        return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("adapter set needs at least one target".into()));
    }
    let mut sorted = targets.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut rng = match init {
        AdapterInit::BZeroARandom { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        AdapterInit::Zero => None,
    };
    let entries = sorted
        .into_iter()
        .map(|t| {
            let (d_out, d_in) = dims(t);
            let mut e = LoraEntry::zeros(d_out, d_in, rank);
            if let Some(rng) = rng.as_mut() {
                e.a = Matrix::randn(rank, d_in, 0.02, rng);
            }
            (t, e)
        })
        .collect();
    Ok(LoraAdapterSet { rank, entries })
}

impl LoraAdapterSet {
    /// Builds a set from explicit entries, checking that ranks agree.
    pub fn from_entries(mut entries: Vec<(Target, LoraEntry)>) -> Result<Self> {
        let rank = entries
            .first()
            .map(|(_, e)| e.rank())
            .ok_or_else(|| Error::InvalidArgument("adapter set needs at least one target".into()))?;
        entries.sort_by_key(|(t, _)| *t);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::AdapterMismatch(format!("duplicate target {}", w[0].0)));
            }
        }
        for (t, e) in &entries {
            if e.rank() != rank || e.b.cols != rank {
                return Err(Error::AdapterMismatch(format!("{t} does not have rank {rank}")));
            }
        }
        Ok(Self { rank, entries })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn entries(&self) -> &[(Target, LoraEntry)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (Target, &mut LoraEntry)> {
        self.entries.iter_mut().map(|(t, e)| (*t, e))
    }

    pub fn targets(&self) -> Vec<Target> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    pub fn get(&self, target: Target) -> Option<&LoraEntry> {
        self.entries.iter().find(|(t, _)| *t == target).map(|(_, e)| e)
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, e)| e.param_count()).sum()
    }

    /// A set with the same structure and all factors zero.
    pub fn zeros_like(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(t, e)| (*t, LoraEntry::zeros(e.d_out(), e.d_in(), self.rank)))
            .collect();
        Self { rank: self.rank, entries }
    }

    /// Flattened factors, `B` then `A` for each target in order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, e) in &self.entries {
            out.extend_from_slice(&e.b.data);
            out.extend_from_slice(&e.a.data);
        }
        out
    }

    /// Overwrites the factors from a vector laid out as in [`to_flat`](Self::to_flat).
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        crate::error::check_len(self.param_count(), flat.len())?;
        let mut off = 0;
        for (_, e) in self.entries.iter_mut() {
            let nb = e.b.len();
            e.b.data.copy_from_slice(&flat[off..off + nb]);
            off += nb;
            let na = e.a.len();
            e.a.data.copy_from_slice(&flat[off..off + na]);
            off += na;
        }
        Ok(())
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.rank == other.rank
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ta, ea), (tb, eb))| {
                ta == tb && ea.d_in() == eb.d_in() && ea.d_out() == eb.d_out()
            })
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for (_, e) in out.entries.iter_mut() {
            e.a.scale(c);
            e.b.scale(c);
        }
        out
    }

    pub fn add_scaled(&mut self, c: f64, other: &Self) {
        debug_assert!(self.same_structure(other));
        for ((_, e), (_, o)) in self.entries.iter_mut().zip(&other.entries) {
            crate::tensor::axpy(c, &o.a.data, &mut e.a.data);
            crate::tensor::axpy(c, &o.b.data, &mut e.b.data);
        }
    }

    /// Rounds every factor to the nearest `f32`, the precision of the file format.
    pub fn to_f32_precision(&self) -> Self {
        let mut out = self.clone();
        for (_, e) in out.entries.iter_mut() {
            for v in e.a.data.iter_mut().chain(e.b.data.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
        out
    }
}

/// Sum of squares of every factor entry.
pub fn adapter_sq_norm(set: &LoraAdapterSet) -> f64 {
    set.entries.iter().map(|(_, e)| e.a.sq_norm() + e.b.sq_norm()).sum()
}

/// Factor-wise mean of several sets with identical structure.
pub fn average_adapters(sets: &[LoraAdapterSet]) -> Result<LoraAdapterSet> {
    let first = sets.first().ok_or_else(|| Error::InvalidArgument("no adapter sets to average".into()))?;
    let mut acc = first.zeros_like();
    for s in sets {
        if !s.same_structure(first) {
            return Err(Error::AdapterMismatch("sets differ in targets, rank or shape".into()));
        }
        acc.add_scaled(1.0, s);
    }
    let inv = 1.0 / sets.len() as f64;
    for (_, e) in acc.entries.iter_mut() {
        e.a.scale(inv);
        e.b.scale(inv);
    }
    Ok(acc)
}

pub fn serialize_adapters(set: &LoraAdapterSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.entries.len() as u16).to_le_bytes());
    for (t, e) in &set.entries {
        let name = t.name().as_bytes();
        out.push(name.len() as u8);
        out.extend_from_slice(name);
        out.extend_from_slice(&(e.d_out() as u32).to_le_bytes());
        out.extend_from_slice(&(e.d_in() as u32).to_le_bytes());
        out.extend_from_slice(&(e.rank() as u32).to_le_bytes());
    }
    let payload_start = out.len();
    for (_, e) in &set.entries {
        for v in e.b.data.iter().chain(&e.a.data) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn deserialize_adapters(bytes: &[u8]) -> Result<LoraAdapterSet> {
    let mut r = crate::checkpoint::Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an adapter file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let count = r.u16()? as usize;
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u8()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("target name is not UTF-8".into()))?;
        let target = Target::parse(name)?;
        let (d_out, d_in, rank) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        header.push((target, d_out, d_in, rank));
    }
    let payload_start = r.pos();
    let mut entries = Vec::with_capacity(count);
    for (target, d_out, d_in, rank) in header {
        let b = Matrix::from_vec(d_out, rank, r.f32_vec(d_out * rank)?);
        let a = Matrix::from_vec(rank, d_in, r.f32_vec(rank * d_in)?);
        entries.push((target, LoraEntry { a, b }));
    }
    let computed = crc32fast::hash(&bytes[payload_start..r.pos()]);
    let stored = r.u32()?;
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after adapter payload".into()));
    }
    LoraAdapterSet::from_entries(entries)
}
