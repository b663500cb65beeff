//! TFRB token-feature files and batch iteration.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "TFRB"
//! version u16      1
//! dim     u32      D, embedding width shared by every record
//! count   u64      number of records
//! record* :
//!   label   u8     0 = real, 1 = generated / inpainted
//!   tag_len u8     L <= 64
//!   tag     L bytes UTF-8
//!   n       u32    token count N >= 1 (cls row + N-1 patch rows)
//!   tokens  N*D f32, row-major, cls row first
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

pub const MAGIC: [u8; 4] = *b"TFRB";
pub const VERSION: u16 = 1;
pub const MAX_TAG_LEN: usize = 64;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Real = 0,
    Generated = 1,
}

impl Label {
    pub fn from_u8(value: u8) -> Option<Self> {
        match value {
            0 => Some(Label::Real),
            1 => Some(Label::Generated),
            _ => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Generated
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }
}

/// One image's frozen-encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatureRecord {
    pub label: Label,
    pub tag: String,
    /// Token count N, `cls` included.
    pub n_tokens: usize,
    /// N x D row-major; row 0 is the `cls` token.
    pub tokens: Vec<f32>,
}

impl TokenFeatureRecord {
    pub fn new(label: Label, tag: impl Into<String>, n_tokens: usize, tokens: Vec<f32>) -> Self {
        TokenFeatureRecord {
            label,
            tag: tag.into(),
            n_tokens,
            tokens,
        }
    }

    pub fn dim(&self) -> usize {
        self.tokens.len().checked_div(self.n_tokens).unwrap_or(0)
    }

    pub fn cls(&self) -> &[f32] {
        &self.tokens[..self.dim()]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.tokens[i * d..(i + 1) * d]
    }

    /// Tokens widened to f64 for the training path.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.n_tokens,
            self.dim(),
            self.tokens.iter().map(|&x| x as f64).collect(),
        )
        .expect("record shape is consistent")
    }

    fn validate(&self, index: u64, dim: usize) -> Result<()> {
        if self.n_tokens == 0 {
            return Err(Error::dim(format!("record {index} token count"), 1, 0));
        }
        if self.tokens.len() != self.n_tokens * dim {
            return Err(Error::dim(
                format!("record {index} token values"),
                self.n_tokens * dim,
                self.tokens.len(),
            ));
        }
        if self.tag.len() > MAX_TAG_LEN {
            return Err(Error::InvalidTag {
                index,
                reason: format!("{} bytes exceeds {MAX_TAG_LEN}", self.tag.len()),
            });
        }
        if let Some(pos) = self.tokens.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "record {index} token {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(())
    }
}

/// Ordered records sharing one embedding width. Token counts may differ.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    records: Vec<TokenFeatureRecord>,
}

impl FeatureDataset {
    pub fn new(dim: usize, records: Vec<TokenFeatureRecord>) -> Result<Self> {
        let ds = FeatureDataset { dim, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(dim: usize) -> Self {
        FeatureDataset {
            dim,
            records: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            r.validate(i as u64, self.dim)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TokenFeatureRecord] {
        &self.records
    }

    pub fn push(&mut self, record: TokenFeatureRecord) -> Result<()> {
        record.validate(self.records.len() as u64, self.dim)?;
        self.records.push(record);
        Ok(())
    }

    /// Appends all records of `other`; widths must agree.
    pub fn extend(&mut self, other: FeatureDataset) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::dim("dataset merge", self.dim, other.dim));
        }
        self.records.extend(other.records);
        Ok(())
    }

    /// Distinct tags in order of first appearance.
    pub fn tags(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.tag.as_str()) {
                seen.push(&r.tag);
            }
        }
        seen
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let payload: usize = self
            .records
            .iter()
            .map(|r| 1 + 1 + r.tag.len() + 4 + 4 * r.tokens.len())
            .sum();
        let mut out = Vec::with_capacity(HEADER_LEN + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.dim).map_err(|_| too_large("dim"))?.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.push(r.label as u8);
            out.push(r.tag.len() as u8);
            out.extend_from_slice(r.tag.as_bytes());
            let n = u32::try_from(r.n_tokens).map_err(|_| too_large("token count"))?;
            out.extend_from_slice(&n.to_le_bytes());
            for v in &r.tokens {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4).ok_or(Error::TruncatedHeader)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = cur.u16().ok_or(Error::TruncatedHeader)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let dim = cur.u32().ok_or(Error::TruncatedHeader)? as usize;
        let count = cur.u64().ok_or(Error::TruncatedHeader)?;
        if dim == 0 {
            return Err(Error::InvalidConfig("file declares dimension 0".into()));
        }

        let mut records = Vec::new();
        for index in 0..count {
            let truncated = || Error::TruncatedRecord { index };
            let raw_label = cur.u8().ok_or_else(truncated)?;
            let label = Label::from_u8(raw_label).ok_or(Error::InvalidLabel {
                index,
                value: raw_label,
            })?;
            let tag_len = cur.u8().ok_or_else(truncated)? as usize;
            if tag_len > MAX_TAG_LEN {
                return Err(Error::InvalidTag {
                    index,
                    reason: format!("{tag_len} bytes exceeds {MAX_TAG_LEN}"),
                });
            }
            let tag_bytes = cur.take(tag_len).ok_or_else(truncated)?;
            let tag = std::str::from_utf8(tag_bytes)
                .map_err(|e| Error::InvalidTag {
                    index,
                    reason: e.to_string(),
                })?
                .to_owned();
            let n = cur.u32().ok_or_else(truncated)? as usize;
            if n == 0 {
                return Err(Error::dim(format!("record {index} token count"), 1, 0));
            }
            let n_values = n.checked_mul(dim).ok_or_else(truncated)?;
            let raw = cur
                .take(n_values.checked_mul(4).ok_or_else(truncated)?)
                .ok_or_else(truncated)?;
            let mut tokens = Vec::with_capacity(n_values);
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::non_finite(format!(
                        "record {index} token {} column {}",
                        i / dim,
                        i % dim
                    )));
                }
                tokens.push(v);
            }
            records.push(TokenFeatureRecord {
                label,
                tag,
                n_tokens: n,
                tokens,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::TrailingBytes {
                count: bytes.len() - cur.pos,
            });
        }
        Ok(FeatureDataset { dim, records })
    }
}

fn too_large(what: &str) -> Error {
    Error::InvalidConfig(format!("{what} does not fit the file format"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(len)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Validates `dataset`, then writes it. Nothing is created on validation failure.
pub fn write_feature_file(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = dataset.encode()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    FeatureDataset::decode(&bytes)
}

/// Header fields only, for inspection without decoding the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileHeader {
    pub version: u16,
    pub dim: u32,
    pub count: u64,
}

pub fn read_header(bytes: &[u8]) -> Result<FileHeader> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(Error::TruncatedHeader);
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    Ok(FileHeader {
        version: u16::from_le_bytes(bytes[4..6].try_into().unwrap()),
        dim: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
        count: u64::from_le_bytes(bytes[10..18].try_into().unwrap()),
    })
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub indices: Vec<usize>,
    pub records: Vec<&'a TokenFeatureRecord>,
    pub labels: Vec<Label>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One epoch over `dataset` in chunks of `batch_size`; see [`rng`] for the
/// shuffle. The final batch may be short.
pub struct BatchIter<'a> {
    dataset: &'a FeatureDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let records: Vec<_> = indices.iter().map(|&i| &self.dataset.records[i]).collect();
        let labels = records.iter().map(|r| r.label).collect();
        Some(Batch {
            indices,
            records,
            labels,
        })
    }
}

pub fn batch_iter(dataset: &FeatureDataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(BatchIter {
        dataset,
        order: rng::epoch_order(dataset.len(), shuffle_seed),
        batch_size,
        pos: 0,
    })
}
