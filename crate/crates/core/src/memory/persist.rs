//! Snapshot file format, little-endian throughout:
//!
//! ```text
//! magic "RVLM" | format u32 | d u32 | c u32 | corpora u32 | count u32 x corpora
//! per entry: id_len u16 | id utf-8 | corpus u32 | key f32 x d | value f32 x c*d
//! trailer:   version u32 | shards u32 | encoded_at u32 x entries
//! ```
//!
//! Entries are written in snapshot order. Values are stored at `f32`
//! resolution and widened on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{MemoryEntry, MemorySnapshot};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"RVLM";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_snapshot<T: Scalar>(s: &MemorySnapshot<T>) -> Result<Vec<u8>> {
    let (d, c) = s.dims();
    let mut buf = Vec::with_capacity(32 + s.len() * (4 * (d + c * d) + 32));
    buf.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, d as u32, c as u32, s.num_corpora() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for n in s.corpus_counts() {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for e in s.entries() {
        let id = e.item_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::InvalidArgument(format!("item id too long: {} bytes", id.len())))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&(e.corpus_id as u32).to_le_bytes());
        for v in e.key.iter().chain(e.value.data()) {
            buf.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    buf.extend_from_slice(&s.version().to_le_bytes());
    buf.extend_from_slice(&(s.num_shards() as u32).to_le_bytes());
    for e in s.entries() {
        buf.extend_from_slice(&e.encoded_at_version.to_le_bytes());
    }
    Ok(buf)
}

pub fn save_snapshot<T: Scalar>(s: &MemorySnapshot<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_snapshot(s)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s<T: Scalar>(&mut self, n: usize, what: &'static str) -> Result<Vec<T>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| <T as Scalar>::from_f32(f32::from_le_bytes(b.try_into().unwrap())))
            .collect())
    }
}

/// Header fields, readable without decoding entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub format: u32,
    pub d: usize,
    pub c: usize,
    pub corpus_counts: Vec<usize>,
}

fn read_header(r: &mut Reader<'_>) -> Result<SnapshotHeader> {
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let format = r.u32("format version")?;
    if format != FORMAT_VERSION {
        return Err(Error::UnsupportedFormat(format));
    }
    let d = r.u32("d")? as usize;
    let c = r.u32("c")? as usize;
    let s = r.u32("corpus count")? as usize;
    let corpus_counts = (0..s)
        .map(|_| r.u32("corpus entry counts").map(|v| v as usize))
        .collect::<Result<_>>()?;
    Ok(SnapshotHeader {
        format,
        d,
        c,
        corpus_counts,
    })
}

pub fn decode_snapshot<T: Scalar>(bytes: &[u8]) -> Result<MemorySnapshot<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let h = read_header(&mut r)?;
    let total: usize = h.corpus_counts.iter().sum();
    let mut pending = Vec::with_capacity(total);
    for _ in 0..total {
        let len = r.u16("id length")? as usize;
        let id = std::str::from_utf8(r.take(len, "id")?)
            .map_err(|e| Error::InvalidArgument(format!("id is not utf-8: {e}")))?
            .to_string();
        let corpus_id = r.u32("corpus id")? as usize;
        if corpus_id >= h.corpus_counts.len() {
            return Err(Error::InvalidArgument(format!("entry {id:?} has corpus {corpus_id} out of range")));
        }
        let key = r.f32s(h.d, "key")?;
        let value = Tensor::new(vec![h.c, h.d], r.f32s(h.c * h.d, "value")?)?;
        pending.push((id, corpus_id, key, value));
    }
    let version = r.u32("snapshot version")?;
    let shards = r.u32("shard count")? as usize;
    let mut entries = Vec::with_capacity(total);
    for (item_id, corpus_id, key, value) in pending {
        entries.push(MemoryEntry {
            key,
            value,
            item_id,
            corpus_id,
            encoded_at_version: r.u32("entry versions")?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after snapshot",
            bytes.len() - r.pos
        )));
    }
    let snap = MemorySnapshot::from_entries(version, h.d, h.c, h.corpus_counts.len(), shards.max(1), entries)?;
    if snap.corpus_counts() != h.corpus_counts {
        return Err(Error::InvalidArgument("corpus counts disagree with entries".into()));
    }
    Ok(snap)
}

pub fn load_snapshot<T: Scalar>(path: impl AsRef<Path>) -> Result<MemorySnapshot<T>> {
    decode_snapshot(&fs::read(path)?)
}

/// Loads and checks `(d, c)` against the running configuration.
pub fn load_snapshot_for<T: Scalar>(path: impl AsRef<Path>, d: usize, c: usize) -> Result<MemorySnapshot<T>> {
    let bytes = fs::read(path)?;
    let h = read_header(&mut Reader { buf: &bytes, pos: 0 })?;
    if h.d != d {
        return Err(Error::DimensionMismatch {
            what: "d",
            expected: d,
            found: h.d,
        });
    }
    if h.c != c {
        return Err(Error::DimensionMismatch {
            what: "c",
            expected: c,
            found: h.c,
        });
    }
    decode_snapshot(&bytes)
}

pub fn read_header_from(path: impl AsRef<Path>) -> Result<SnapshotHeader> {
    let bytes = fs::read(path)?;
    read_header(&mut Reader { buf: &bytes, pos: 0 })
}
