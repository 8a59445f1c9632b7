//! Text encoders and the precomputed per-class embedding table.

use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Mutex;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::taxonomy::{ClassIndex, LabelTaxonomy, NUM_CLASSES};

pub const DEFAULT_TEXT_DIM: usize = 1024;

/// A text encoder producing fixed-length vectors.
pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Vec<f32>>;

    /// Whether `encode` may be called from several threads at once.
    fn reentrant(&self) -> bool {
        true
    }
}

/// Serializes calls into a non-reentrant encoder; passes reentrant ones through.
pub struct EncoderHandle<'a> {
    inner: &'a dyn TextEncoder,
    lock: Mutex<()>,
}

impl<'a> EncoderHandle<'a> {
    pub fn new(inner: &'a dyn TextEncoder) -> Self {
        EncoderHandle {
            inner,
            lock: Mutex::new(()),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f32>> {
        if self.inner.reentrant() {
            self.inner.encode(text)
        } else {
            let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
            self.inner.encode(text)
        }
    }
}

impl TextEncoder for EncoderHandle<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>> {
        EncoderHandle::encode(self, text)
    }
}

/// Weight-free stand-in for a CLIP text encoder: each string is hashed into a
/// seed that drives a Gaussian draw, normalized to unit length. The empty
/// string maps to the zero vector.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    dim: usize,
    seed: u64,
    name: String,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashTextEncoder {
            dim,
            seed,
            name: format!("hash-stub-v1/seed={seed}"),
        }
    }
}

impl Default for HashTextEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_TEXT_DIM, 0)
    }
}

impl TextEncoder for HashTextEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>> {
        if text.is_empty() {
            return Ok(vec![0.0; self.dim]);
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let raw: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(raw.into_iter().map(|v| (v / norm) as f32).collect())
    }
}

/// Out-of-process encoder: the text is written to the command's stdin and
/// `dim` whitespace-separated floats are read from stdout.
#[derive(Debug, Clone)]
pub struct ExternalTextEncoder {
    program: String,
    args: Vec<String>,
    dim: usize,
    name: String,
}

impl ExternalTextEncoder {
    pub fn new(program: impl Into<String>, args: Vec<String>, dim: usize) -> Self {
        let program = program.into();
        let name = format!("external:{program}");
        ExternalTextEncoder {
            program,
            args,
            dim,
            name,
        }
    }
}

impl TextEncoder for ExternalTextEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>> {
        let fail = |msg: String| Error::backend(self.name.clone(), msg);
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("could not run `{}`: {e}", self.program)))?;
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(text.as_bytes())
            .map_err(|e| fail(e.to_string()))?;
        let output = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !output.status.success() {
            return Err(fail(format!(
                "exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let values = String::from_utf8_lossy(&output.stdout)
            .split_whitespace()
            .map(|t| t.parse::<f32>().map_err(|_| fail(format!("bad float `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != self.dim {
            return Err(fail(format!(
                "expected {} values, got {}",
                self.dim,
                values.len()
            )));
        }
        Ok(values)
    }
}

const TABLE_MAGIC: &[u8; 4] = b"SCET";
const TABLE_VERSION: u32 = 1;

/// One embedding row per class plus a final row for the unlabeled class.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    backend: String,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub const ROWS: usize = NUM_CLASSES + 1;

    pub fn build(taxonomy: &LabelTaxonomy, encoder: &dyn TextEncoder) -> Result<Self> {
        let dim = encoder.dim();
        let handle = EncoderHandle::new(encoder);
        let mut data = Vec::with_capacity(Self::ROWS * dim);
        for name in taxonomy.row_names() {
            let v = handle.encode(name)?;
            if v.len() != dim {
                return Err(Error::backend(
                    encoder.name(),
                    format!("returned {} values for dim {dim}", v.len()),
                ));
            }
            data.extend_from_slice(&v);
        }
        Ok(EmbeddingTable {
            backend: encoder.name().to_string(),
            dim,
            data,
        })
    }

    pub fn backend(&self) -> &str {
        &self.backend
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn lookup(&self, label: ClassIndex) -> &[f32] {
        self.row(label.row())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// The table as a `(rows, dim)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.rows(), self.dim), device)?.to_dtype(dtype)?)
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TABLE_MAGIC);
        out.write_u32::<LittleEndian>(TABLE_VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.rows() as u32).unwrap();
        out.write_u32::<LittleEndian>(self.dim as u32).unwrap();
        out.write_u32::<LittleEndian>(self.backend.len() as u32).unwrap();
        out.extend_from_slice(self.backend.as_bytes());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header_bytes();
        out.reserve(self.data.len() * 4);
        for &v in &self.data {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Validation(format!("embedding table: {msg}"));
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != TABLE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut next_u32 = || r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"));
        let version = next_u32()?;
        if version != TABLE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let rows = next_u32()? as usize;
        let dim = next_u32()? as usize;
        let name_len = next_u32()? as usize;
        if rows != Self::ROWS || dim == 0 {
            return Err(bad(&format!("unexpected shape {rows}x{dim}")));
        }
        if r.len() < name_len {
            return Err(bad("truncated backend name"));
        }
        let (name, mut payload) = r.split_at(name_len);
        let backend = String::from_utf8(name.to_vec()).map_err(|_| bad("backend name is not UTF-8"))?;
        if payload.len() != rows * dim * 4 {
            return Err(bad(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                rows * dim * 4
            )));
        }
        let mut data = vec![0f32; rows * dim];
        payload
            .read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| bad("truncated payload"))?;
        Ok(EmbeddingTable { backend, dim, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 over the serialized table, recorded in checkpoints to catch a
    /// model being paired with embeddings from a different encoder.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
