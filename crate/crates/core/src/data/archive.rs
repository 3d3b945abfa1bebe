//! CFE1 binary archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CFE1" | u32 version | u32 d_t | u32 d_v | u32 M | u64 record_count
//! per record:
//!   u32 id_len | id (UTF-8) | u8 label | u32 N | N x u8 token_mask
//!   N*d_t f32 word embeddings (row-major) | M*d_v f32 region embeddings (row-major)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Label, PostRecord};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"CFE1";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub version: u32,
    pub text_dim: usize,
    pub region_dim: usize,
    pub n_regions: usize,
    pub record_count: u64,
}

/// A fully loaded archive. Immutable once built, so it can be shared across
/// threads freely.
#[derive(Clone, Debug)]
pub struct EmbeddingArchive {
    header: ArchiveHeader,
    records: Vec<PostRecord>,
    index: HashMap<String, usize>,
}

impl EmbeddingArchive {
    /// Builds an in-memory archive, enforcing the same invariants as the file format.
    pub fn from_records(records: Vec<PostRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Empty("archive needs at least one record".into()))?;
        let header = ArchiveHeader {
            version: ARCHIVE_VERSION,
            text_dim: first.text_dim(),
            region_dim: first.region_dim(),
            n_regions: first.n_regions(),
            record_count: records.len() as u64,
        };
        let mut index = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            check_dims(&header, rec)?;
            if index.insert(rec.post_id().to_string(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate post id `{}`",
                    rec.post_id()
                )));
            }
        }
        Ok(Self {
            header,
            records,
            index,
        })
    }

    pub fn header(&self) -> &ArchiveHeader {
        &self.header
    }

    pub fn records(&self) -> &[PostRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, post_id: &str) -> Result<&PostRecord> {
        self.index
            .get(post_id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::UnknownId(post_id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(PostRecord::post_id)
    }

    pub fn into_records(self) -> Vec<PostRecord> {
        self.records
    }
}

fn check_dims(header: &ArchiveHeader, rec: &PostRecord) -> Result<()> {
    if rec.text_dim() != header.text_dim
        || rec.region_dim() != header.region_dim
        || rec.n_regions() != header.n_regions
    {
        return Err(Error::DimensionMismatch(format!(
            "post `{}` has (d_t={}, d_v={}, M={}), archive expects (d_t={}, d_v={}, M={})",
            rec.post_id(),
            rec.text_dim(),
            rec.region_dim(),
            rec.n_regions(),
            header.text_dim,
            header.region_dim,
            header.n_regions
        )));
    }
    Ok(())
}

fn u32_field(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Validation(format!("{what} {value} exceeds u32")))
}

pub fn encode_archive(records: &[PostRecord]) -> Result<Vec<u8>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Empty("cannot write an archive with no records".into()))?;
    let header = ArchiveHeader {
        version: ARCHIVE_VERSION,
        text_dim: first.text_dim(),
        region_dim: first.region_dim(),
        n_regions: first.n_regions(),
        record_count: records.len() as u64,
    };
    for rec in records {
        check_dims(&header, rec)?;
    }

    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&header.version.to_le_bytes());
    out.extend_from_slice(&u32_field(header.text_dim, "d_t")?.to_le_bytes());
    out.extend_from_slice(&u32_field(header.region_dim, "d_v")?.to_le_bytes());
    out.extend_from_slice(&u32_field(header.n_regions, "M")?.to_le_bytes());
    out.extend_from_slice(&header.record_count.to_le_bytes());

    for rec in records {
        let id = rec.post_id().as_bytes();
        out.extend_from_slice(&u32_field(id.len(), "id length")?.to_le_bytes());
        out.extend_from_slice(id);
        out.push(rec.label().as_byte());
        out.extend_from_slice(&u32_field(rec.n_tokens(), "N")?.to_le_bytes());
        out.extend(rec.token_mask().iter().map(|&m| u8::from(m)));
        for v in rec.word_embeddings().as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in rec.region_embeddings().as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes `records` in CFE1 format. Output is byte-deterministic.
pub fn write_archive(records: &[PostRecord], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_archive(records)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<EmbeddingArchive> {
    let bytes = fs::read(path)?;
    decode_archive(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "truncated while reading {what} at byte {} ({} bytes available)",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::Corrupt(format!("{what}: size overflow")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<EmbeddingArchive> {
    if bytes.len() < 4 || &bytes[..4] != ARCHIVE_MAGIC {
        return Err(Error::Format("missing CFE1 magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32("version")?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(format!(
            "unsupported archive version {version}"
        )));
    }
    let text_dim = cur.u32("d_t")? as usize;
    let region_dim = cur.u32("d_v")? as usize;
    let n_regions = cur.u32("M")? as usize;
    let record_count = cur.u64("record_count")?;

    let mut records = Vec::new();
    for r in 0..record_count {
        let id_len = cur.u32("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "post id")?)
            .map_err(|e| Error::Corrupt(format!("record {r}: id is not UTF-8: {e}")))?
            .to_string();
        let label_byte = cur.u8("label")?;
        let label = Label::from_byte(label_byte)
            .ok_or_else(|| Error::Corrupt(format!("record {r}: bad label byte {label_byte}")))?;
        let n_tokens = cur.u32("token count")? as usize;
        let mask = cur
            .take(n_tokens, "token mask")?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Corrupt(format!("record {r}: bad mask byte {other}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let words = cur.f32s(n_tokens.saturating_mul(text_dim), "word embeddings")?;
        let regions = cur.f32s(n_regions.saturating_mul(region_dim), "region embeddings")?;
        let words = Matrix::from_vec(n_tokens, text_dim, words)?;
        let regions = Matrix::from_vec(n_regions, region_dim, regions)?;
        records.push(PostRecord::new(id, label, words, regions, mask)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after {record_count} records",
            bytes.len() - cur.pos
        )));
    }
    if records.is_empty() {
        return Err(Error::Empty("archive declares zero records".into()));
    }
    let archive = EmbeddingArchive::from_records(records)?;
    // the header dims must agree with every record, not just the first
    if archive.header.text_dim != text_dim
        || archive.header.region_dim != region_dim
        || archive.header.n_regions != n_regions
    {
        return Err(Error::DimensionMismatch(
            "header dims disagree with records".into(),
        ));
    }
    Ok(archive)
}
