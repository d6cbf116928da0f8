//! Binary codecs and the checkpoint container.
//!
//! A container is `magic (4) | version u16 | section count u16`, then
//! sections of `tag (4) | length u32 | payload`, then a CRC32 of every byte
//! after the header. Tensors are stored as little-endian f32; configuration
//! scalars as f64.

use std::collections::BTreeMap;

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::hypernet::{HypernetConfig, HypernetParams};
use crate::lora::{deserialize_adapters, serialize_adapters, LoraAdapterSet, Target};
use crate::metrics::{MetricSuite, Probe, SubjectMetric};
use crate::schedule::{ScheduleKind, ScheduleSpec};
use crate::tensor::Matrix;

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated input: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Little-endian byte sink mirroring [`Reader`].
#[derive(Debug, Default)]
pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    /// Length-prefixed f32 tensor.
    pub(crate) fn f32_vec(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        for x in v {
            self.buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
}

impl<'a> Reader<'a> {
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub(crate) fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub(crate) fn tensor(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        self.f32_vec(n)
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HLDC";
pub const METRICS_MAGIC: &[u8; 4] = b"HLDM";
pub const CONTAINER_VERSION: u16 = 1;

pub type Section = ([u8; 4], Vec<u8>);

pub fn encode_container(magic: &[u8; 4], sections: &[Section]) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(magic);
    w.u16(CONTAINER_VERSION);
    w.u16(sections.len() as u16);
    for (tag, payload) in sections {
        w.buf.extend_from_slice(tag);
        w.bytes(payload);
    }
    let crc = crc32fast::hash(&w.buf[8..]);
    w.u32(crc);
    w.buf
}

pub fn decode_container(magic: &[u8; 4], bytes: &[u8]) -> Result<Vec<Section>> {
    let mut r = Reader::new(bytes);
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u16()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Version { found: version, expected: CONTAINER_VERSION });
    }
    if bytes.len() < 12 {
        return Err(Error::Format("container is truncated".into()));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[8..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let count = r.u16()? as usize;
    let mut r = Reader::new(&bytes[..body_end]);
    r.take(8)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        out.push((tag, r.bytes()?.to_vec()));
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes before checksum".into()));
    }
    Ok(out)
}

fn section<'a>(sections: &'a [Section], tag: &[u8; 4]) -> Option<&'a [u8]> {
    sections.iter().find(|(t, _)| t == tag).map(|(_, p)| p.as_slice())
}

fn required<'a>(sections: &'a [Section], tag: &[u8; 4]) -> Result<&'a [u8]> {
    section(sections, tag)
        .ok_or_else(|| Error::Format(format!("missing section {}", String::from_utf8_lossy(tag))))
}

fn finish(r: &Reader, tag: &str) -> Result<()> {
    if r.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!("trailing bytes in section {tag}")))
    }
}

fn write_schedule(w: &mut Writer, s: &ScheduleSpec) {
    w.str(s.kind.as_str());
    w.u32(s.steps as u32);
    w.f64(s.beta_min);
    w.f64(s.beta_max);
}

fn read_schedule(r: &mut Reader) -> Result<ScheduleSpec> {
    Ok(ScheduleSpec {
        kind: ScheduleKind::parse(&r.str()?).map_err(|e| Error::Format(e.to_string()))?,
        steps: r.usize()?,
        beta_min: r.f64()?,
        beta_max: r.f64()?,
    })
}

fn encode_denoiser(p: &DenoiserParams) -> Vec<u8> {
    let c = &p.config;
    let mut w = Writer::default();
    for v in [c.data_dim, c.width, c.mlp_width, c.vocab] {
        w.u32(v as u32);
    }
    w.f64(c.sigma_data);
    w.f32_vec(&p.to_flat());
    w.buf
}

fn decode_denoiser(bytes: &[u8], schedule: ScheduleSpec) -> Result<DenoiserParams> {
    let mut r = Reader::new(bytes);
    let config = DenoiserConfig {
        data_dim: r.usize()?,
        width: r.usize()?,
        mlp_width: r.usize()?,
        vocab: r.usize()?,
        sigma_data: r.f64()?,
    };
    let flat = r.tensor()?;
    finish(&r, "DNSR")?;
    let mut p = DenoiserParams::init(config, schedule, 0).map_err(|e| Error::Format(e.to_string()))?;
    p.set_from_flat(&flat).map_err(|e| Error::Format(format!("denoiser tensor: {e}")))?;
    Ok(p)
}

fn encode_hypernet(h: &HypernetParams) -> Vec<u8> {
    let c = &h.config;
    let mut w = Writer::default();
    for v in [c.data_dim, c.enc_hidden, c.feat, c.rank, c.iterations] {
        w.u32(v as u32);
    }
    w.f64(c.a_init_std);
    w.u16(c.targets.len() as u16);
    for (t, (d_out, d_in)) in &c.targets {
        w.str(t.name());
        w.u32(*d_out as u32);
        w.u32(*d_in as u32);
    }
    w.f32_vec(&h.to_flat());
    w.buf
}

fn decode_hypernet(bytes: &[u8]) -> Result<HypernetParams> {
    let mut r = Reader::new(bytes);
    let (data_dim, enc_hidden, feat, rank, iterations) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let a_init_std = r.f64()?;
    let n = r.u16()? as usize;
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let t = Target::parse(&r.str()?).map_err(|e| Error::Format(e.to_string()))?;
        targets.push((t, (r.usize()?, r.usize()?)));
    }
    let flat = r.tensor()?;
    finish(&r, "HYPN")?;
    let config = HypernetConfig { data_dim, enc_hidden, feat, rank, iterations, a_init_std, targets };
    let mut h = HypernetParams::init(config, 0).map_err(|e| Error::Format(e.to_string()))?;
    h.set_from_flat(&flat).map_err(|e| Error::Format(format!("hypernet tensor: {e}")))?;
    Ok(h)
}

/// Seed and progress of the run that produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngSummary {
    pub seed: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub denoiser: DenoiserParams,
    pub hypernet: Option<HypernetParams>,
    pub adapters: BTreeMap<String, LoraAdapterSet>,
    /// Text rendering of the run configuration.
    pub train_config: String,
    pub rng: RngSummary,
}

impl Checkpoint {
    pub fn new(denoiser: DenoiserParams) -> Self {
        Self { denoiser, hypernet: None, adapters: BTreeMap::new(), train_config: String::new(), rng: RngSummary::default() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<Section> = Vec::new();
        let mut w = Writer::default();
        write_schedule(&mut w, &self.denoiser.schedule);
        sections.push((*b"SCHD", w.buf));
        sections.push((*b"DNSR", encode_denoiser(&self.denoiser)));
        if let Some(h) = &self.hypernet {
            sections.push((*b"HYPN", encode_hypernet(h)));
        }
        if !self.adapters.is_empty() {
            let mut w = Writer::default();
            w.u32(self.adapters.len() as u32);
            for (id, set) in &self.adapters {
                w.str(id);
                w.bytes(&serialize_adapters(set));
            }
            sections.push((*b"ADPT", w.buf));
        }
        let mut w = Writer::default();
        w.str(&self.train_config);
        sections.push((*b"TCFG", w.buf));
        let mut w = Writer::default();
        w.u64(self.rng.seed);
        w.u64(self.rng.steps);
        sections.push((*b"RNGS", w.buf));
        encode_container(CHECKPOINT_MAGIC, &sections)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = decode_container(CHECKPOINT_MAGIC, bytes)?;
        let mut r = Reader::new(required(&sections, b"SCHD")?);
        let schedule = read_schedule(&mut r)?;
        finish(&r, "SCHD")?;
        let denoiser = decode_denoiser(required(&sections, b"DNSR")?, schedule)?;
        let hypernet = section(&sections, b"HYPN").map(decode_hypernet).transpose()?;
        if let Some(h) = &hypernet {
            let consistent = h.config.data_dim == denoiser.config.data_dim
                && h.config.targets.iter().all(|(t, dims)| denoiser.config.target_dims(*t) == *dims);
            if !consistent {
                return Err(Error::Format("hypernet shapes do not match the denoiser".into()));
            }
        }
        let mut adapters = BTreeMap::new();
        if let Some(payload) = section(&sections, b"ADPT") {
            let mut r = Reader::new(payload);
            for _ in 0..r.u32()? {
                let id = r.str()?;
                let set = deserialize_adapters(r.bytes()?)?;
                denoiser.check_adapters(&set).map_err(|e| Error::Format(format!("adapters `{id}`: {e}")))?;
                adapters.insert(id, set);
            }
            finish(&r, "ADPT")?;
        }
        let mut r = Reader::new(required(&sections, b"TCFG")?);
        let train_config = r.str()?;
        finish(&r, "TCFG")?;
        let mut r = Reader::new(required(&sections, b"RNGS")?);
        let rng = RngSummary { seed: r.u64()?, steps: r.u64()? };
        finish(&r, "RNGS")?;
        Ok(Self { denoiser, hypernet, adapters, train_config, rng })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_matrix(w: &mut Writer, m: &Matrix) {
    w.u32(m.rows as u32);
    w.u32(m.cols as u32);
    w.f32_vec(&m.data);
}

fn read_matrix(r: &mut Reader) -> Result<Matrix> {
    let (rows, cols) = (r.usize()?, r.usize()?);
    let data = r.tensor()?;
    if data.len() != rows * cols {
        return Err(Error::Format(format!("matrix {rows}x{cols} holds {} values", data.len())));
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn encode_metric_suite(suite: &MetricSuite) -> Vec<u8> {
    let mut w = Writer::default();
    write_matrix(&mut w, &suite.subject.projection);
    w.f32_vec(&suite.subject.center);
    let subj = w.buf;
    let mut w = Writer::default();
    let p = &suite.probe;
    write_matrix(&mut w, &p.w1);
    w.f32_vec(&p.b1);
    write_matrix(&mut w, &p.w2);
    w.f32_vec(&p.b2);
    encode_container(METRICS_MAGIC, &[(*b"SUBJ", subj), (*b"PROB", w.buf)])
}

pub fn decode_metric_suite(bytes: &[u8]) -> Result<MetricSuite> {
    let sections = decode_container(METRICS_MAGIC, bytes)?;
    let mut r = Reader::new(required(&sections, b"SUBJ")?);
    let subject = SubjectMetric { projection: read_matrix(&mut r)?, center: r.tensor()? };
    finish(&r, "SUBJ")?;
    let mut r = Reader::new(required(&sections, b"PROB")?);
    let probe = Probe { w1: read_matrix(&mut r)?, b1: r.tensor()?, w2: read_matrix(&mut r)?, b2: r.tensor()? };
    finish(&r, "PROB")?;
    let consistent = subject.projection.cols == subject.center.len()
        && probe.b1.len() == probe.w1.rows
        && probe.w2.cols == probe.w1.rows
        && probe.b2.len() == probe.w2.rows
        && probe.w1.cols == subject.center.len();
    if !consistent {
        return Err(Error::Format("metric artifact shapes are inconsistent".into()));
    }
    Ok(MetricSuite { subject, probe })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::tiny_config;
    use crate::lora::{new_adapter_set, AdapterInit};

    fn sample_checkpoint() -> Checkpoint {
        let den = DenoiserParams::init(tiny_config(), ScheduleSpec { steps: 50, ..Default::default() }, 3).unwrap();
        let hc = HypernetConfig::for_denoiser(&den.config, &Target::ALL, 2, 3, 4).unwrap();
        let mut ck = Checkpoint::new(den.clone());
        ck.hypernet = Some(HypernetParams::init(hc, 4).unwrap());
        let mut ad = new_adapter_set(&[Target::Key], 2, |t| den.config.target_dims(t), AdapterInit::Zero).unwrap();
        let flat: Vec<f64> = (0..ad.param_count()).map(|i| (i as f64 * 0.37).sin()).collect();
        ad.set_from_flat(&flat).unwrap();
        ck.adapters.insert("held-1".into(), ad);
        ck.train_config = "[train]\nlambda = 0.15\n".into();
        ck.rng = RngSummary { seed: 42, steps: 7 };
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = sample_checkpoint().to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.rng, RngSummary { seed: 42, steps: 7 });
        assert_eq!(loaded.adapters.len(), 1);
        assert!(loaded.hypernet.is_some());
    }

    #[test]
    fn loaded_tensors_are_f32_rounded() {
        let ck = sample_checkpoint();
        let loaded = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        for (a, b) in ck.denoiser.to_flat().iter().zip(loaded.denoiser.to_flat()) {
            assert_eq!(*a as f32 as f64, b);
        }
        assert_eq!(loaded.denoiser.config, ck.denoiser.config);
        assert_eq!(loaded.denoiser.schedule, ck.denoiser.schedule);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample_checkpoint().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn metric_suite_round_trip() {
        let suite = MetricSuite::for_classes(2, 4, 20, 5, 1).unwrap();
        let bytes = encode_metric_suite(&suite);
        let back = decode_metric_suite(&bytes).unwrap();
        assert_eq!(encode_metric_suite(&back), bytes);
        assert_eq!(back.probe.num_classes(), 2);
    }

    #[test]
    fn missing_section_is_a_format_error() {
        let bytes = encode_container(CHECKPOINT_MAGIC, &[(*b"TCFG", vec![0, 0, 0, 0])]);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
