//! FBZ1 binary snapshots.
//!
//! Layout, all little-endian: magic `FBZ1`, `u32` dx, Nx, Nv, Nomega, `f64`
//! Lx, vmax, time, then `Nx^dx · Nv²` values with x outer and v inner.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::phase_space::{DistributionFunction, PhaseGrid};

pub const MAGIC: [u8; 4] = *b"FBZ1";
const HEADER: usize = 4 + 4 * 4 + 3 * 8;

/// Encodes `f` at time `t`.
pub fn encode(f: &DistributionFunction, time: f64) -> Vec<u8> {
    let g = f.grid();
    let mut out = Vec::with_capacity(HEADER + 8 * f.values().len());
    out.extend_from_slice(&MAGIC);
    for n in [g.dim_x(), g.nx(), g.nv(), g.nomega()] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for x in [g.length(), g.vmax(), time] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for v in f.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a snapshot, validating the header and the payload length.
pub fn decode(bytes: &[u8]) -> Result<(DistributionFunction, f64)> {
    if bytes.len() < HEADER {
        return Err(Error::Snapshot(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let d = |i: usize| f64::from_le_bytes(bytes[20 + 8 * i..28 + 8 * i].try_into().unwrap());
    let (dim_x, nx, nv, nomega) = (u(0), u(1), u(2), u(3));
    let (length, vmax, time) = (d(0), d(1), d(2));
    let grid = PhaseGrid::new(dim_x, length, nx, vmax, nv, nomega)
        .map_err(|e| Error::Snapshot(format!("header: {e}")))?;
    let expected = HEADER + 8 * grid.len();
    if bytes.len() != expected {
        return Err(Error::Snapshot(format!(
            "payload length {} does not match header (expected {expected})",
            bytes.len()
        )));
    }
    let values = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let f = DistributionFunction::new(Arc::new(grid), values)
        .map_err(|e| Error::Snapshot(e.to_string()))?;
    Ok((f, time))
}

pub fn write(path: impl AsRef<Path>, f: &DistributionFunction, time: f64) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(f, time)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<(DistributionFunction, f64)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
