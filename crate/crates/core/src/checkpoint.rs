//! Binary checkpoints with a SHA-256 trailer and atomic replacement.
//!
//! Layout (little endian): magic `PTCK`, format version `u32`, the run
//! config as length-prefixed UTF-8 text, the step, the loss EMA (NaN when
//! absent), the AdamW hyper-parameters and step, then three parameter
//! stores (parameters, first moments, second moments). The final 32 bytes
//! are the SHA-256 of everything before them.
//!
//! [`Checkpoint::save`] also writes a plain-text manifest next to the
//! binary (`<file>.manifest`) with the step counts and the checksum. The
//! manifest is informational; loading reads only the binary.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{AdamW, AdamWConfig, ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PTCK";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Everything needed to continue training bitwise-identically. Per-step
/// randomness is derived from `(seed, step)`, so the step counter is the
/// complete RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub loss_ema: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u64(buf, b.len() as u64);
    buf.extend_from_slice(b);
}

fn put_store(buf: &mut Vec<u8>, store: &ParamStore) {
    put_u64(buf, store.len() as u64);
    for (name, t) in store.iter() {
        put_bytes(buf, name.as_bytes());
        put_u32(buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(buf, d as u64);
        }
        for &v in t.data() {
            put_f64(buf, v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::InvalidData("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::InvalidData(format!("implausible length {n} in checkpoint")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::InvalidData("checkpoint string is not UTF-8".into()))
    }

    fn store(&mut self) -> Result<ParamStore> {
        let count = self.len()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n > self.buf.len() / 8 {
                return Err(Error::InvalidData("tensor larger than checkpoint".into()));
            }
            let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_bytes(&mut buf, self.config.to_text().as_bytes());
        let s = &self.state;
        put_u64(&mut buf, s.step);
        put_f64(&mut buf, s.loss_ema.unwrap_or(f64::NAN));
        let c = s.optimizer.cfg;
        for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
            put_f64(&mut buf, v);
        }
        put_u64(&mut buf, s.optimizer.step);
        put_store(&mut buf, &s.params);
        put_store(&mut buf, &s.optimizer.first_moment);
        put_store(&mut buf, &s.optimizer.second_moment);
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    /// Verifies the trailer before decoding anything else.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN {
            return Err(Error::Checksum("checkpoint shorter than its checksum".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::InvalidData("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::InvalidData(format!("unsupported checkpoint version {version}")));
        }
        let config = RunConfig::parse(&r.string()?)?;
        let step = r.u64()?;
        let ema = r.f64()?;
        let cfg = AdamWConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()?, weight_decay: r.f64()? };
        let opt_step = r.u64()?;
        let params = r.store()?;
        let first_moment = r.store()?;
        let second_moment = r.store()?;
        if r.pos != body.len() {
            return Err(Error::InvalidData("trailing bytes in checkpoint".into()));
        }
        let optimizer = AdamW { cfg, step: opt_step, first_moment, second_moment };
        let loss_ema = (!ema.is_nan()).then_some(ema);
        Ok(Self { config, state: TrainState { step, params, optimizer, loss_ema } })
    }

    /// `key=value` lines describing the binary encoding `bytes` of `self`.
    pub fn manifest(&self, bytes: &[u8]) -> String {
        let digest: String = bytes[bytes.len() - DIGEST_LEN..].iter().map(|b| format!("{b:02x}")).collect();
        let s = &self.state;
        format!(
            "format=PTCK/{VERSION}\nstep={}\noptimizer_step={}\ntensors={}\nscalars={}\nrun_hash={}\nsha256={digest}\n",
            s.step,
            s.optimizer.step,
            s.params.len(),
            s.params.num_scalars(),
            self.config.run_hash(),
        )
    }

    /// Writes the binary and then its manifest, each to a temporary file in
    /// the destination directory that is synced and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        let mut manifest_path = path.as_os_str().to_owned();
        manifest_path.push(".manifest");
        write_atomic(Path::new(&manifest_path), self.manifest(&bytes).as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
