//! Versioned little-endian checkpoint container.
//!
//! Layout: magic `FSMCCKPT`, `u32` version, 32-byte config hash, then the
//! fields of [`Checkpoint`] in declaration order. Vectors are a `u64`
//! length followed by `f64` values; optional vectors carry a leading flag
//! byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FSMCCKPT";

/// Enough to reconstruct a ChaCha stream at its exact position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub chain_index: u64,
    pub seed: u64,
    pub acceptance_count: u64,
    pub proposal_count: u64,
    pub post_burn_in_accepted: u64,
    pub post_burn_in_proposed: u64,
    pub non_finite_count: u64,
    pub window_accepted: u64,
    pub window_count: u64,
    pub log_lik: f64,
    pub state: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub mh_rng: RngState,
    pub completion_rng: RngState,
    pub acceptance_series: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub elapsed: f64,
}

fn put_vec(buf: &mut Vec<u8>, v: &[f64]) {
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_rng(buf: &mut Vec<u8>, r: &RngState) {
    buf.extend_from_slice(&r.seed);
    buf.extend_from_slice(&r.stream.to_le_bytes());
    buf.extend_from_slice(&r.word_pos.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::Checkpoint("vector length exceeds file size".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn rng(&mut self) -> Result<RngState> {
        Ok(RngState {
            seed: self.array()?,
            stream: self.u64()?,
            word_pos: u128::from_le_bytes(self.array()?),
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(128 + 8 * self.state.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.config_hash);
        for v in [
            self.step,
            self.chain_index,
            self.seed,
            self.acceptance_count,
            self.proposal_count,
            self.post_burn_in_accepted,
            self.post_burn_in_proposed,
            self.non_finite_count,
            self.window_accepted,
            self.window_count,
        ] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.log_lik.to_le_bytes());
        put_vec(&mut b, &self.state);
        match &self.grad {
            Some(g) => {
                b.push(1);
                put_vec(&mut b, g);
            }
            None => b.push(0),
        }
        put_rng(&mut b, &self.mh_rng);
        put_rng(&mut b, &self.completion_rng);
        put_vec(&mut b, &self.acceptance_series);
        b.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            put_vec(&mut b, s);
        }
        b.extend_from_slice(&self.elapsed.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config_hash = r.array()?;
        let mut ints = [0u64; 10];
        for v in &mut ints {
            *v = r.u64()?;
        }
        let log_lik = r.f64()?;
        let state = r.vec()?;
        let grad = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.vec()?),
            f => return Err(Error::Checkpoint(format!("bad gradient flag {f}"))),
        };
        let mh_rng = r.rng()?;
        let completion_rng = r.rng()?;
        let acceptance_series = r.vec()?;
        let n_samples = r.u64()? as usize;
        if n_samples > bytes.len() / 8 {
            return Err(Error::Checkpoint("sample count exceeds file size".into()));
        }
        let samples = (0..n_samples).map(|_| r.vec()).collect::<Result<_>>()?;
        let elapsed = r.f64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        let [step, chain_index, seed, acceptance_count, proposal_count, post_burn_in_accepted, post_burn_in_proposed, non_finite_count, window_accepted, window_count] =
            ints;
        Ok(Self {
            config_hash,
            step,
            chain_index,
            seed,
            acceptance_count,
            proposal_count,
            post_burn_in_accepted,
            post_burn_in_proposed,
            non_finite_count,
            window_accepted,
            window_count,
            log_lik,
            state,
            grad,
            mh_rng,
            completion_rng,
            acceptance_series,
            samples,
            elapsed,
        })
    }

    /// Writes to a sibling temporary file and renames it over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = tmp_path(path);
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}
