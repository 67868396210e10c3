//! The VESC container: a versioned little-endian file of token matrices with
//! optional masks and opaque label bytes.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VESC"
//! 4       4     version (u32) = 1
//! 8       4     dtype (u32): 1 = f32, 2 = f64
//! 12      8     record count N (u64)
//! 20      32·N  index entries:
//!                 offset    u64  absolute byte offset of the payload
//!                 rows      u64
//!                 cols      u64
//!                 flags     u32  bit 0 = mask present
//!                 label_len u32
//! ...           payloads, in index order, each:
//!                 rows·cols elements, row-major
//!                 rows mask bytes (0 or 1), if flagged
//!                 label_len label bytes
//! ```
//!
//! Readers validate magic, version, dtype and every index range against the
//! file length before touching any payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CacheCheck, Error, Result};
use crate::tensor::{DType, MaskVector, Matrix, Real};

pub const MAGIC: &[u8; 4] = b"VESC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const ENTRY_LEN: usize = 32;
const FLAG_MASK: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord<T> {
    pub matrix: Matrix<T>,
    pub mask: Option<MaskVector>,
    pub label: Vec<u8>,
}

impl<T: Real> CacheRecord<T> {
    pub fn new(matrix: Matrix<T>, mask: Option<MaskVector>, label: impl Into<Vec<u8>>) -> Self {
        Self {
            matrix,
            mask,
            label: label.into(),
        }
    }

    fn payload_len(&self) -> usize {
        self.matrix.as_slice().len() * T::DTYPE.size() + self.mask.as_ref().map_or(0, |m| m.len()) + self.label.len()
    }
}

/// Index entry as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub offset: u64,
    pub rows: u64,
    pub cols: u64,
    pub has_mask: bool,
    pub label_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheHeader {
    pub version: u32,
    pub dtype: DType,
    pub entries: Vec<IndexEntry>,
}

/// Serializes `records` into the container byte layout.
pub fn encode<T: Real>(records: &[CacheRecord<T>]) -> Result<Vec<u8>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cache needs at least one record".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if let Some(m) = &r.mask {
            if m.len() != r.matrix.rows() {
                return Err(Error::shape(
                    "write_cache",
                    format!("mask of length {} for record {i}", r.matrix.rows()),
                    format!("mask of length {}", m.len()),
                ));
            }
        }
        if u32::try_from(r.label.len()).is_err() {
            return Err(Error::InvalidArgument(format!("record {i}: label too long")));
        }
    }
    let index_end = HEADER_LEN + ENTRY_LEN * records.len();
    let total = index_end + records.iter().map(CacheRecord::payload_len).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    let mut offset = index_end as u64;
    for r in records {
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(r.matrix.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(r.matrix.cols() as u64).to_le_bytes());
        let flags = if r.mask.is_some() { FLAG_MASK } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(r.label.len() as u32).to_le_bytes());
        offset += r.payload_len() as u64;
    }
    for r in records {
        for &x in r.matrix.as_slice() {
            x.write_le(&mut out);
        }
        if let Some(m) = &r.mask {
            out.extend_from_slice(m.bits());
        }
        out.extend_from_slice(&r.label);
    }
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

pub fn write_cache<T: Real>(records: &[CacheRecord<T>], path: &Path) -> Result<()> {
    let bytes = encode(records)?;
    write_bytes(&bytes, path)
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partial file. Missing parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    if let Err(e) = write_bytes(bytes, &tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` in chunks so a failure reports the byte position reached.
pub(crate) fn write_bytes(bytes: &[u8], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut position = 0u64;
    for chunk in bytes.chunks(1 << 16) {
        file.write_all(chunk).map_err(|source| Error::WriteAt {
            path: path.to_path_buf(),
            position,
            source,
        })?;
        position += chunk.len() as u64;
    }
    file.sync_all().map_err(|source| Error::WriteAt {
        path: path.to_path_buf(),
        position,
        source,
    })
}

fn reject(path: &Path, check: CacheCheck, detail: impl Into<String>) -> Error {
    Error::Cache {
        path: path.to_path_buf(),
        check,
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

/// Validates the header and index of `bytes` without reading payloads.
pub fn decode_header(bytes: &[u8], path: &Path) -> Result<CacheHeader> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(reject(path, CacheCheck::BadMagic, "expected \"VESC\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(reject(path, CacheCheck::Bounds, format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(reject(path, CacheCheck::UnsupportedVersion, format!("version {version}, expected {VERSION}")));
    }
    let code = read_u32(bytes, 8);
    let dtype = DType::from_code(code).ok_or_else(|| reject(path, CacheCheck::UnknownDtype, format!("code {code}")))?;
    let count = read_u64(bytes, 12);
    let index_end = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(ENTRY_LEN))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| reject(path, CacheCheck::Bounds, format!("index for {count} records exceeds file of {} bytes", bytes.len())))?;

    let mut entries = Vec::with_capacity(count as usize);
    let mut prev_end = index_end as u64;
    for i in 0..count as usize {
        let at = HEADER_LEN + i * ENTRY_LEN;
        let entry = IndexEntry {
            offset: read_u64(bytes, at),
            rows: read_u64(bytes, at + 8),
            cols: read_u64(bytes, at + 16),
            has_mask: read_u32(bytes, at + 24) & FLAG_MASK != 0,
            label_len: read_u32(bytes, at + 28),
        };
        if entry.offset < prev_end {
            return Err(reject(
                path,
                CacheCheck::Offsets,
                format!("record {i} starts at byte {} before byte {prev_end}", entry.offset),
            ));
        }
        let len = entry
            .rows
            .checked_mul(entry.cols)
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .and_then(|n| n.checked_add(if entry.has_mask { entry.rows } else { 0 }))
            .and_then(|n| n.checked_add(entry.label_len as u64));
        let end = len.and_then(|l| entry.offset.checked_add(l)).filter(|&e| e <= bytes.len() as u64);
        let end = end.ok_or_else(|| {
            reject(
                path,
                CacheCheck::Bounds,
                format!("record {i} at byte {} overruns file of {} bytes", entry.offset, bytes.len()),
            )
        })?;
        prev_end = end;
        entries.push(entry);
    }
    Ok(CacheHeader { version, dtype, entries })
}

/// Parses a full container held in memory.
pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Vec<CacheRecord<T>>> {
    let header = decode_header(bytes, path)?;
    if header.dtype != T::DTYPE {
        return Err(reject(
            path,
            CacheCheck::DtypeMismatch,
            format!("file holds {:?}, reader expects {:?}", header.dtype, T::DTYPE),
        ));
    }
    let size = T::DTYPE.size();
    let mut records = Vec::with_capacity(header.entries.len());
    for (i, e) in header.entries.iter().enumerate() {
        // Ranges were bounds-checked in decode_header.
        let (rows, cols) = (e.rows as usize, e.cols as usize);
        let mut at = e.offset as usize;
        let n = rows * cols;
        let data: Vec<T> = bytes[at..at + n * size].chunks_exact(size).map(T::read_le).collect();
        at += n * size;
        let mask = if e.has_mask {
            let bits = bytes[at..at + rows].to_vec();
            at += rows;
            Some(MaskVector::new(bits).map_err(|err| reject(path, CacheCheck::MaskValue, format!("record {i}: {err}")))?)
        } else {
            None
        };
        let label = bytes[at..at + e.label_len as usize].to_vec();
        records.push(CacheRecord {
            matrix: Matrix::from_vec(rows, cols, data)?,
            mask,
            label,
        });
    }
    Ok(records)
}

pub fn read_cache<T: Real>(path: &Path) -> Result<Vec<CacheRecord<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads only the dtype code of an existing container.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&bytes, path).map(|h| h.dtype)
}
