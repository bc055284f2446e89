//! Binary adapter container (`.lcra`).
//!
//! All fields little-endian:
//!
//! ```text
//! magic        4 bytes  "LCRA"
//! version      u16      1
//! name_len     u16      followed by name_len bytes of UTF-8 layer name
//! d_out        u32      full (unpruned) output dimension
//! d_in         u32      full (unpruned) input dimension
//! rank         u32
//! alpha        f64
//! seed         u64      initialisation seed
//! n_rows       u32      followed by n_rows retained row indices (u32 each)
//! n_cols       u32      followed by n_cols retained column indices (u32 each)
//! B            f64 × n_rows·rank, row-major
//! A            f64 × rank·n_cols, row-major
//! crc32        u32      over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::matrix::DenseMatrix;
use crate::pruning::LayerPrune;

pub const MAGIC: &[u8; 4] = b"LCRA";
pub const VERSION: u16 = 1;

/// Decoded contents of one adapter file.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFile {
    pub adapter: LoraAdapter,
    pub prune: LayerPrune,
    pub full_dims: (usize, usize),
    pub seed: u64,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn encode_adapter(adapter: &LoraAdapter, prune: &LayerPrune, full_dims: (usize, usize), seed: u64) -> Result<Vec<u8>> {
    if prune.pruned_dims() != (adapter.d_out(), adapter.d_in()) {
        return Err(Error::Input(format!(
            "adapter `{}` is {}x{} but its map retains {}x{}",
            adapter.layer_name(),
            adapter.d_out(),
            adapter.d_in(),
            prune.rows.len(),
            prune.cols.len()
        )));
    }
    prune.validate(full_dims)?;
    let name = adapter.layer_name().as_bytes();
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::Format("layer name longer than 65535 bytes".into()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&name_len.to_le_bytes());
    buf.extend_from_slice(name);
    buf.extend_from_slice(&to_u32(full_dims.0, "d_out")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(full_dims.1, "d_in")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(adapter.rank(), "rank")?.to_le_bytes());
    buf.extend_from_slice(&adapter.alpha().to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    for idx in [&prune.rows, &prune.cols] {
        buf.extend_from_slice(&to_u32(idx.len(), "index count")?.to_le_bytes());
        for &i in idx.iter() {
            buf.extend_from_slice(&to_u32(i, "index")?.to_le_bytes());
        }
    }
    for v in adapter.b().data().iter().chain(adapter.a().data()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("file truncated while reading {what}")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn indices(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.u32(what)? as usize;
        if n.saturating_mul(4) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("{what} count {n} exceeds file length")));
        }
        (0..n).map(|_| Ok(self.u32(what)? as usize)).collect()
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("file truncated while reading {what}")));
        }
        (0..n).map(|_| self.f64(what)).collect()
    }
}

pub fn decode_adapter(bytes: &[u8]) -> Result<AdapterFile> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic: expected \"LCRA\"".into()));
    }
    if bytes.len() < 6 {
        return Err(Error::Format("file truncated while reading version".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Version { found: version });
    }
    if bytes.len() < 10 {
        return Err(Error::Integrity(format!("file too short ({} bytes) to carry a checksum", bytes.len())));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }

    let mut r = Reader { buf: payload, pos: 6 };
    let name_len = r.u16("name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "layer name")?)
        .map_err(|_| Error::Format("layer name is not valid UTF-8".into()))?
        .to_string();
    let d_out = r.u32("d_out")? as usize;
    let d_in = r.u32("d_in")? as usize;
    let rank = r.u32("rank")? as usize;
    let alpha = r.f64("alpha")?;
    let seed = r.u64("seed")?;
    let rows = r.indices("row indices")?;
    let cols = r.indices("column indices")?;
    let b = r.floats(rows.len().saturating_mul(rank), "B")?;
    let a = r.floats(rank.saturating_mul(cols.len()), "A")?;
    if r.pos != payload.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after A",
            payload.len() - r.pos
        )));
    }

    let prune = LayerPrune {
        name: name.clone(),
        rows,
        cols,
    };
    prune.validate((d_out, d_in))?;
    let b = DenseMatrix::new(prune.rows.len(), rank, b)?;
    let a = DenseMatrix::new(rank, prune.cols.len(), a)?;
    let adapter = LoraAdapter::new(name, b, a, alpha)?;
    Ok(AdapterFile {
        adapter,
        prune,
        full_dims: (d_out, d_in),
        seed,
    })
}

/// Atomically write an adapter file (temporary file in the same directory,
/// then rename).
pub fn write_adapter(
    path: &Path,
    adapter: &LoraAdapter,
    prune: &LayerPrune,
    full_dims: (usize, usize),
    seed: u64,
) -> Result<()> {
    let bytes = encode_adapter(adapter, prune, full_dims, seed)?;
    write_atomic(path, &bytes)
}

pub fn read_adapter(path: &Path) -> Result<AdapterFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_adapter(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
