//! Binary checkpoint format.
//!
//! ```text
//! "COLANET1"                     magic, 8 bytes
//! u16 version                    = 1
//! u32 len, len bytes             model config text (UTF-8, key=value lines)
//! u32 count                      tensors: parameters, then buffers
//! per tensor:
//!   u16 len, len bytes           name
//!   u8 rank, rank × u32          dims
//!   numel × f32                  values
//! u8 optimizer flag              0 = absent, 1 = present
//! optimizer section:
//!   u64 step
//!   per tensor: u8 flag, then (if 1) numel × f32 first moment, numel × f32 second moment
//!   32 bytes seed, u64 stream, u128 word position, u8 flag + f64 cached Gaussian
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::config;
use crate::degradation::RngState;
use crate::error::{Error, Result};
use crate::network::ModelWeights;
use crate::tensor::{ParamTensor, Tensor};

pub const MAGIC: &[u8; 8] = b"COLANET1";
pub const VERSION: u16 = 1;

/// Step counter and batch-composition generator of an interrupted run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub rng: RngState,
}

/// Weights (with their Adam moments) plus optional optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights<f32>,
    pub optimizer: Option<OptimizerState>,
}

/// The file contents before they are matched against a model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub config_text: String,
    pub tensors: Vec<ParamTensor<f32>>,
    pub optimizer: Option<OptimizerState>,
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: Vec<ParamTensor<f32>> =
            self.weights.params().iter().chain(self.weights.buffers()).cloned().collect();
        let raw = RawCheckpoint {
            config_text: config::model_to_text(&self.weights.config),
            tensors,
            optimizer: self.optimizer,
        };
        encode(&raw)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = decode(bytes)?;
        let model = config::model_from_text(&raw.config_text).map_err(|e| Error::Format(format!("config section: {e}")))?;
        let (buffers, params): (Vec<_>, Vec<_>) = raw.tensors.into_iter().partition(|p| is_buffer(&p.name));
        let weights = ModelWeights::from_parts(model, params, buffers)?;
        Ok(Self { weights, optimizer: raw.optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn len_u16(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::Format(format!("{what} too long ({n} bytes)")))
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} too large ({n})")))
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(raw: &RawCheckpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(raw.config_text.len(), "config text")?.to_le_bytes());
    out.extend_from_slice(raw.config_text.as_bytes());
    out.extend_from_slice(&len_u32(raw.tensors.len(), "tensor count")?.to_le_bytes());
    for p in &raw.tensors {
        out.extend_from_slice(&len_u16(p.name.len(), "tensor name")?.to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
        }
        put_f32s(&mut out, p.value.data());
    }
    match &raw.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for p in &raw.tensors {
                match p.moments() {
                    None => out.push(0),
                    Some((m, v)) => {
                        out.push(1);
                        put_f32s(&mut out, m.data());
                        put_f32s(&mut out, v.data());
                    }
                }
            }
            out.extend_from_slice(&opt.rng.seed);
            out.extend_from_slice(&opt.rng.stream.to_le_bytes());
            out.extend_from_slice(&opt.rng.word_pos.to_le_bytes());
            match opt.rng.spare {
                None => out.extend_from_slice(&[0; 9]),
                Some(z) => {
                    out.push(1);
                    out.extend_from_slice(&z.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("file ends inside a field at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            f => Err(Error::Corrupt(format!("invalid flag byte {f} at {}", self.pos - 1))),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint> {
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != &MAGIC[..head.len()] {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    if bytes.len() < MAGIC.len() + 2 {
        return Err(Error::Corrupt("file truncated inside the header".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(Error::Unsupported(format!("checkpoint version {version}, this build reads {VERSION}")));
    }
    if bytes.len() < MAGIC.len() + 2 + 4 {
        return Err(Error::Corrupt("file truncated before the checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("CRC-32 mismatch (truncated or damaged file)".into()));
    }

    let mut r = Reader { buf: body, pos: MAGIC.len() + 2 };
    let len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Corrupt(format!("tensor '{name}' size overflows")))?;
        let data = r.f32s(numel)?;
        let value = Tensor::new(&shape, data).map_err(|e| Error::Corrupt(format!("tensor '{name}': {e}")))?;
        tensors.push(ParamTensor::new(name, value));
    }
    let optimizer = if r.flag()? {
        let step = r.u64()?;
        for p in tensors.iter_mut() {
            if r.flag()? {
                let n = p.value.numel();
                let shape = p.value.shape().to_vec();
                let m = Tensor::new(&shape, r.f32s(n)?)?;
                let v = Tensor::new(&shape, r.f32s(n)?)?;
                p.set_moments(m, v)?;
            }
        }
        let seed = r.array::<32>()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        let has_spare = r.flag()?;
        let z = f64::from_le_bytes(r.array()?);
        let spare = has_spare.then_some(z);
        Some(OptimizerState { step, rng: RngState { seed, stream, word_pos, spare } })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} unexpected trailing bytes", body.len() - r.pos)));
    }
    Ok(RawCheckpoint { config_text, tensors, optimizer })
}
