//! Binary solution tables (layout in `docs/solution-format.md`).

use std::path::Path;

use crate::digest::{self, Digest};
use crate::error::{Error, Result};
use crate::hjb::{ReducedValueFunction, SolveFlags, TensorGrid};

pub const MAGIC: &[u8; 6] = b"DHJBVF";
pub const VERSION: u8 = 1;

pub fn encode(vf: &ReducedValueFunction, setup_hash: &Digest) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [vf.n, vf.m, vf.tau.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for a in 0..vf.n {
        out.extend_from_slice(&(vf.grid.nodes[a] as u32).to_le_bytes());
        out.extend_from_slice(&vf.grid.lo[a].to_le_bytes());
        out.extend_from_slice(&vf.grid.hi[a].to_le_bytes());
    }
    out.extend_from_slice(&vf.model_hash);
    out.extend_from_slice(&vf.cost_hash);
    out.extend_from_slice(setup_hash);
    out.push(vf.flags.to_byte());
    for table in [&vf.tau, &vf.values, &vf.gradients, &vf.head_b] {
        for v in table.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let check = digest::hash_bytes(&out);
    out.extend_from_slice(&check);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("solution file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn digest(&mut self) -> Result<Digest> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::Format("table size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Returns the tables and the setup hash they were solved for.
pub fn decode(bytes: &[u8]) -> Result<(ReducedValueFunction, Digest)> {
    if bytes.len() < MAGIC.len() + 1 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a solution file (bad magic)".into()));
    }
    let (body, check) = bytes.split_at(bytes.len() - 32);
    if digest::hash_bytes(body) != check {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let m = r.u32()?;
    let levels = r.u32()?;
    if n == 0 || m == 0 || levels < 2 {
        return Err(Error::Format("degenerate dimensions".into()));
    }
    let mut grid = TensorGrid {
        lo: Vec::with_capacity(n),
        hi: Vec::with_capacity(n),
        nodes: Vec::with_capacity(n),
    };
    for _ in 0..n {
        grid.nodes.push(r.u32()?);
        grid.lo.push(r.f64()?);
        grid.hi.push(r.f64()?);
    }
    let model_hash = r.digest()?;
    let cost_hash = r.digest()?;
    let setup_hash = r.digest()?;
    let flags = SolveFlags::from_byte(r.u8()?);
    let p = grid.len();
    let tau = r.f64s(levels)?;
    let values = r.f64s(levels * p)?;
    let gradients = r.f64s(levels * p * n)?;
    let head_b = r.f64s(levels * n * m)?;
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after tables".into()));
    }
    Ok((
        ReducedValueFunction {
            n,
            m,
            tau,
            grid,
            values,
            gradients,
            head_b,
            model_hash,
            cost_hash,
            flags,
        },
        setup_hash,
    ))
}

pub fn write(path: &Path, vf: &ReducedValueFunction, setup_hash: &Digest) -> Result<()> {
    std::fs::write(path, encode(vf, setup_hash))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(ReducedValueFunction, Digest)> {
    decode(&std::fs::read(path)?)
}

/// Reads a solution and rejects it unless it was solved for `setup_hash`.
pub fn read_for(path: &Path, setup_hash: &Digest) -> Result<ReducedValueFunction> {
    let (vf, found) = read(path)?;
    if &found != setup_hash {
        return Err(Error::HashMismatch {
            what: "configuration",
            expected: digest::to_hex(setup_hash),
            found: digest::to_hex(&found),
        });
    }
    Ok(vf)
}
