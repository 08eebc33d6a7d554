//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "BST1"            magic
//! u32               format version
//! u64, bytes        config JSON
//! u64               step
//! [u8; 32]          ChaCha seed
//! u64               ChaCha stream
//! u128              ChaCha word position
//! u32               tensor count, then per tensor a blob:
//!   u32, bytes        name
//!   u8                dtype tag (0 = f32, 1 = f64)
//!   u32, u64 x rank   shape
//!   bytes             data, numel x dtype size
//! u8                optimizer present
//!   u64               AdamW step
//!   f64 x 5           lr, beta1, beta2, eps, weight decay
//!   u32               slot count, then per slot: u8 decay flag, m blob, v blob
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{AdamWConfig, AdamWState, DType, Float, Tensor};

pub const MAGIC: [u8; 4] = *b"BST1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}; not a checkpoint")]
    BadMagic([u8; 4]),
    #[error("checkpoint format version {found}, this build reads {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("unknown dtype tag {tag} for tensor {tensor}")]
    BadDtype { tensor: String, tag: u8 },
    #[error("tensor {tensor} stored as {found:?}, expected {expected:?}")]
    DtypeMismatch { tensor: String, found: DType, expected: DType },
    #[error("invalid utf-8 in {0}")]
    BadUtf8(String),
    #[error("{0} trailing bytes after the last section")]
    TrailingBytes(usize),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config_json: String,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<AdamWState<T>>,
}

fn put_blob<T: Float>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

impl<T: Float> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_blob(&mut out, name, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.t.to_le_bytes());
                let c = opt.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
                for (k, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                    out.push(u8::from(opt.decay[k]));
                    let name = self.tensors.get(k).map_or_else(|| k.to_string(), |t| t.0.clone());
                    put_blob(&mut out, &format!("adam.m.{name}"), m);
                    put_blob(&mut out, &format!("adam.v.{name}"), v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, supported: FORMAT_VERSION });
        }
        let n = r.u64("config length")? as usize;
        let config_json = String::from_utf8(r.take(n, "config")?.to_vec())
            .map_err(|_| CheckpointError::BadUtf8("config".into()))?;
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for k in 0..count {
            tensors.push(r.blob::<T>(k)?);
        }
        let optimizer = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            _ => {
                let t = r.u64("optimizer step")?;
                let mut f = [0.0; 5];
                for v in &mut f {
                    *v = r.f64("optimizer config")?;
                }
                let config = AdamWConfig { lr: f[0], beta1: f[1], beta2: f[2], eps: f[3], weight_decay: f[4] };
                let slots = r.u32("optimizer slot count")?;
                let (mut m, mut v, mut decay) = (Vec::new(), Vec::new(), Vec::new());
                for k in 0..slots {
                    decay.push(r.take(1, "optimizer decay flag")?[0] != 0);
                    m.push(r.blob::<T>(k)?.1);
                    v.push(r.blob::<T>(k)?.1);
                }
                Some(AdamWState { config, m, v, decay, t })
            }
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { config_json, step, rng: RngState { seed, stream, word_pos }, tensors, optimizer })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn blob<T: Float>(&mut self, index: u32) -> Result<(String, Tensor<T>), CheckpointError> {
        let header = format!("header of tensor #{index}");
        let n = self.u32(&header)? as usize;
        let name = String::from_utf8(self.take(n, &header)?.to_vec()).map_err(|_| CheckpointError::BadUtf8(header))?;
        let what = format!("tensor {name}");
        let tag = self.take(1, &what)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::BadDtype { tensor: name.clone(), tag })?;
        if dtype != T::DTYPE {
            return Err(CheckpointError::DtypeMismatch { tensor: name, found: dtype, expected: T::DTYPE });
        }
        let rank = self.u32(&what)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(&what)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.saturating_mul(dtype.size_of()), &what)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::of_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::of_f64(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Mismatch(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint<T: Float>(ck: &Checkpoint<T>, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&ck.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
