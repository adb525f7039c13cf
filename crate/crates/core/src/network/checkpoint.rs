//! Binary checkpoint format.
//!
//! ```text
//! "LMII" | version u32 | config length u32 | canonical config JSON
//! | entry count u32
//! | per entry (parameters and buffers, sorted by name):
//! |   name length u32 | name | rank u32 | dims u32 × rank | f32 LE × numel
//! | CRC32 of all preceding bytes, u32
//! ```
//!
//! All integers are little-endian.

use std::io::Write;
use std::path::Path;

use super::config::NetworkConfig;
use super::model::Lmiinet;
use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LMII";
pub const VERSION: u32 = 1;

pub fn encode(net: &Lmiinet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = net.config.to_canonical_json();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());

    let mut entries: Vec<(&str, &Tensor<f32>)> = net
        .params
        .params()
        .iter()
        .map(|p| (p.name.as_str(), &p.value))
        .chain(
            net.params
                .buffers()
                .iter()
                .map(|b| (b.name.as_str(), &b.value)),
        )
        .collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity(format!(
                "truncated checkpoint: need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parses and verifies a checkpoint. Nothing is returned unless every check passes.
pub fn decode(bytes: &[u8]) -> Result<Lmiinet<f32>> {
    if bytes.len() < 4 {
        return Err(Error::Integrity(format!(
            "truncated checkpoint: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"LMII\"",
            &bytes[..4]
        )));
    }
    if bytes.len() < 12 {
        return Err(Error::Integrity(format!(
            "truncated checkpoint: {} bytes",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x} (file truncated or corrupted)"
        )));
    }

    let mut r = Reader { buf: body, pos: 8 };
    let clen = r.u32("config length")? as usize;
    let cjson = std::str::from_utf8(r.take(clen, "config")?)
        .map_err(|e| Error::Format(format!("config is not UTF-8: {e}")))?;
    let config: NetworkConfig =
        serde_json::from_str(cjson).map_err(|e| Error::Format(format!("config: {e}")))?;
    let mut net = Lmiinet::<f32>::build(&config)
        .map_err(|e| Error::Format(format!("stored config does not build: {e}")))?;

    let count = r.u32("entry count")? as usize;
    let expected = net.params.params().len() + net.params.buffers().len();
    if count != expected {
        return Err(Error::Format(format!(
            "checkpoint has {count} entries, network needs {expected}"
        )));
    }
    let mut seen = vec![false; expected];
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Format(format!("{name}: rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "values")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        let (slot, target) = if let Some(id) = net.params.find(&name) {
            (id.0, &mut net.params.get_mut(id).value)
        } else if let Some(id) = net.params.find_buffer(&name) {
            (
                net.params.params().len() + id.0,
                net.params.buffer_value_mut(id),
            )
        } else {
            return Err(Error::Format(format!("unknown entry {name:?}")));
        };
        if target.shape() != value.shape() {
            return Err(Error::Format(format!(
                "{name}: shape {:?} does not match network {:?}",
                value.shape(),
                target.shape()
            )));
        }
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::Format(format!("duplicate entry {name:?}")));
        }
        *target = value;
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after entries",
            body.len() - r.pos
        )));
    }
    Ok(net)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save(net: &Lmiinet<f32>, path: &Path) -> Result<()> {
    let bytes = encode(net);
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Lmiinet<f32>> {
    decode(&std::fs::read(path)?)
}
