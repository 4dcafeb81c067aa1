//! On-disk chain records and atomic file writes.
//!
//! A chain file is the magic `FSMCCHN1`, a `u64` header length, a JSON
//! header with everything except the samples, then `u64` rows, `u64`
//! columns and the samples as row-major little-endian `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::samplers::tmp_path;
use crate::samplers::{Chain, SamplerConfig};

const MAGIC: &[u8; 8] = b"FSMCCHN1";

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: SamplerConfig,
    chain_index: u64,
    monitored: Option<Vec<usize>>,
    acceptance_count: u64,
    proposal_count: u64,
    post_burn_in_accepted: u64,
    post_burn_in_proposed: u64,
    non_finite_count: u64,
    acceptance_series: Vec<f64>,
    target_descriptor: String,
    config_hash: String,
    final_state: Vec<f64>,
    steps_done: usize,
    wall_time: f64,
}

/// Writes `bytes` to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn chain_to_bytes(chain: &Chain) -> Vec<u8> {
    let header = Header {
        config: chain.config.clone(),
        chain_index: chain.chain_index,
        monitored: chain.monitored.clone(),
        acceptance_count: chain.acceptance_count,
        proposal_count: chain.proposal_count,
        post_burn_in_accepted: chain.post_burn_in_accepted,
        post_burn_in_proposed: chain.post_burn_in_proposed,
        non_finite_count: chain.non_finite_count,
        acceptance_series: chain.acceptance_series.clone(),
        target_descriptor: chain.target_descriptor.clone(),
        config_hash: hex::encode(chain.config_hash),
        final_state: chain.final_state.clone(),
        steps_done: chain.steps_done,
        wall_time: chain.wall_time,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let rows = chain.samples.len();
    let cols = chain.samples.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(32 + json.len() + 8 * rows * cols);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for s in &chain.samples {
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn chain_from_bytes(bytes: &[u8]) -> Result<Chain> {
    let bad = |m: &str| Error::Format(format!("chain file: {m}"));
    let take_u64 = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| bad("truncated"))
    };
    if bytes.get(..8) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let hlen = take_u64(8)? as usize;
    let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(&e.to_string()))?;
    let rows = take_u64(hend)? as usize;
    let cols = take_u64(hend + 8)? as usize;
    let body = &bytes[hend + 16..];
    if rows.checked_mul(cols).and_then(|c| c.checked_mul(8)) != Some(body.len()) {
        return Err(bad("sample block has the wrong size"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let samples = if cols == 0 {
        vec![Vec::new(); rows]
    } else {
        values.chunks(cols).map(<[f64]>::to_vec).collect()
    };
    let mut hash = [0u8; 32];
    hex::decode_to_slice(&header.config_hash, &mut hash).map_err(|e| bad(&e.to_string()))?;
    Ok(Chain {
        config: header.config,
        chain_index: header.chain_index,
        samples,
        monitored: header.monitored,
        acceptance_count: header.acceptance_count,
        proposal_count: header.proposal_count,
        post_burn_in_accepted: header.post_burn_in_accepted,
        post_burn_in_proposed: header.post_burn_in_proposed,
        non_finite_count: header.non_finite_count,
        acceptance_series: header.acceptance_series,
        target_descriptor: header.target_descriptor,
        config_hash: hash,
        final_state: header.final_state,
        steps_done: header.steps_done,
        wall_time: header.wall_time,
    })
}

pub fn save_chain(path: &Path, chain: &Chain) -> Result<()> {
    write_atomic(path, &chain_to_bytes(chain))
}

pub fn load_chain(path: &Path) -> Result<Chain> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    chain_from_bytes(&bytes)
}
