//! Versioned binary checkpoints for denoisers and projectors.
//!
//! Layout (little-endian): magic `ACCORDCK`, `u32` version, `u8` kind, a
//! length-prefixed UTF-8 metadata string, the kind-specific body, and a
//! SHA-256 digest of everything before it. Floats are stored as raw bits, so
//! a round trip is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::denoiser::{ConditionEmbeddingTable, DenoiserArch, DenoiserParams, Linear};
use crate::error::{Error, Result};
use crate::projector::{Projector, Tower};
use crate::world::ConceptId;

const MAGIC: &[u8; 8] = b"ACCORDCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Denoiser = 1,
    Projector = 2,
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: Kind, meta: &str) -> Self {
        let mut w = Self(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.0.push(kind as u8);
        w.u64(meta.len() as u64);
        w.0.extend_from_slice(meta.as_bytes());
        w
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    fn tensor(&mut self, t: &Array2<f64>) {
        self.u64(t.nrows() as u64);
        self.u64(t.ncols() as u64);
        for v in t.iter() {
            self.f64(*v);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.0);
        self.0.extend_from_slice(&digest);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflows"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn tensor(&mut self) -> Result<Array2<f64>> {
        let (r, c) = (self.usize()?, self.usize()?);
        let n = r.checked_mul(c).ok_or_else(|| corrupt("tensor shape overflows"))?;
        if n.checked_mul(8).is_none_or(|bytes| bytes > self.buf.len() - self.pos) {
            return Err(corrupt("tensor larger than the file"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Array2::from_shape_vec((r, c), data).map_err(|e| corrupt(e.to_string()))
    }
}

/// Checks framing and digest; returns the kind, the metadata and a reader at the body.
fn open(bytes: &[u8], expected: Kind) -> Result<(String, Reader<'_>)> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    if bytes.len() < 12 + 1 + 8 + DIGEST_LEN {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let kind = r.u8()?;
    if kind != expected as u8 {
        return Err(corrupt(format!("expected a {expected:?} checkpoint, found kind {kind}")));
    }
    let len = r.usize()?;
    let meta = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("metadata is not UTF-8"))?;
    Ok((meta, r))
}

fn done(r: &Reader<'_>) -> Result<()> {
    if r.pos == r.buf.len() {
        Ok(())
    } else {
        Err(corrupt("trailing bytes after body"))
    }
}

pub fn encode_denoiser(params: &DenoiserParams, meta: &str) -> Vec<u8> {
    let mut w = Writer::new(Kind::Denoiser, meta);
    let a = &params.arch;
    for v in [a.dim, a.embed_dim, a.hidden, a.depth, a.time_dim] {
        w.u64(v as u64);
    }
    w.u32(params.table.null().0);
    w.u64(params.table.trainable.len() as u64);
    w.0.extend(params.table.trainable.iter().map(|t| u8::from(*t)));
    let tensors = params.tensors();
    w.u64(tensors.len() as u64);
    for t in tensors {
        w.tensor(t);
    }
    w.finish()
}

pub fn decode_denoiser(bytes: &[u8]) -> Result<(DenoiserParams, String)> {
    let (meta, mut r) = open(bytes, Kind::Denoiser)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let arch = DenoiserArch { dim: dims[0], embed_dim: dims[1], hidden: dims[2], depth: dims[3], time_dim: dims[4] };
    let null = ConceptId(r.u32()?);
    let n = r.usize()?;
    let trainable = r.take(n)?.iter().map(|b| *b != 0).collect();
    let count = r.usize()?;
    if count != 1 + 2 * (arch.depth + 1) {
        return Err(corrupt(format!("{count} tensors do not match depth {}", arch.depth)));
    }
    let embeddings = r.tensor()?;
    let mut layers = Vec::with_capacity(arch.depth + 1);
    for _ in 0..=arch.depth {
        layers.push(Linear { weight: r.tensor()?, bias: r.tensor()? });
    }
    done(&r)?;
    let table = ConditionEmbeddingTable::new(embeddings, trainable, null).map_err(|e| corrupt(e.to_string()))?;
    Ok((DenoiserParams { arch, table, layers }, meta))
}

pub fn encode_projector(proj: &Projector, meta: &str) -> Vec<u8> {
    let mut w = Writer::new(Kind::Projector, meta);
    w.f64(proj.temperature);
    for t in proj.tensors() {
        w.tensor(t);
    }
    w.finish()
}

pub fn decode_projector(bytes: &[u8]) -> Result<(Projector, String)> {
    let (meta, mut r) = open(bytes, Kind::Projector)?;
    let temperature = r.f64()?;
    let tower = |r: &mut Reader<'_>| -> Result<Tower> {
        let l0 = Linear { weight: r.tensor()?, bias: r.tensor()? };
        let l1 = Linear { weight: r.tensor()?, bias: r.tensor()? };
        Ok(Tower { layers: [l0, l1] })
    };
    let concept = tower(&mut r)?;
    let data = tower(&mut r)?;
    done(&r)?;
    Ok((Projector { concept, data, temperature }, meta))
}

pub fn save_checkpoint(params: &DenoiserParams, meta: &str, path: &Path) -> Result<()> {
    fs::write(path, encode_denoiser(params, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserParams, String)> {
    decode_denoiser(&fs::read(path)?)
}

pub fn save_projector(proj: &Projector, meta: &str, path: &Path) -> Result<()> {
    fs::write(path, encode_projector(proj, meta))?;
    Ok(())
}

pub fn load_projector(path: &Path) -> Result<(Projector, String)> {
    decode_projector(&fs::read(path)?)
}
