//! The ICMF artifact container: named numeric sections with explicit
//! dtype and shape, an integrity checksum, and bit-exact round-trips.
//!
//! Layout, all integers little-endian:
//! magic "ICMF" | version u32 | section count u64 | per section
//! (name length u64, UTF-8 name, dtype tag u8, rank u64, dims u64 each,
//! absolute byte offset u64, byte length u64) | contiguous payloads |
//! CRC-64 of all prior bytes, u64.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use crate::config::Precision;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 4] = *b"ICMF";
pub const CONTAINER_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// One named tensor. Values are held as f64 in memory; `dtype` controls
/// on-disk storage width.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub dims: Vec<usize>,
    pub dtype: Precision,
    pub data: Vec<f64>,
}

impl Section {
    pub fn new(dims: Vec<usize>, dtype: Precision, data: Vec<f64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::DimMismatch(format!(
                "section dims {:?} imply {} values, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(Section { dims, dtype, data })
    }

    pub fn vector(data: Vec<f64>, dtype: Precision) -> Self {
        let dims = vec![data.len()];
        Section { dims, dtype, data }
    }

    fn byte_len(&self) -> usize {
        self.data.len() * self.elem_size()
    }

    fn elem_size(&self) -> usize {
        match self.dtype {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// CRC-64 with the ECMA-182 polynomial in reflected form
/// (init and final xor all-ones); crc64("123456789") is the standard
/// check value 0x995DC9BBDF1939FA.
pub fn crc64(bytes: &[u8]) -> u64 {
    static TABLE: OnceLock<[u64; 256]> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let poly: u64 = 0xC96C_5795_D787_0F42;
        let mut table = [0u64; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut crc = i as u64;
            for _ in 0..8 {
                crc = if crc & 1 == 1 {
                    (crc >> 1) ^ poly
                } else {
                    crc >> 1
                };
            }
            *slot = crc;
        }
        table
    });
    let mut crc = u64::MAX;
    for &b in bytes {
        let idx = ((crc ^ b as u64) & 0xFF) as usize;
        crc = (crc >> 8) ^ table[idx];
    }
    crc ^ u64::MAX
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes the sections to the container byte format.
pub fn encode_container(sections: &BTreeMap<String, Section>) -> Result<Vec<u8>> {
    let mut table_len = 0usize;
    for (name, section) in sections {
        if name.is_empty() {
            return Err(Error::InvalidInput("section names must be non-empty".into()));
        }
        let expect: usize = section.dims.iter().product();
        if expect != section.data.len() {
            return Err(Error::DimMismatch(format!(
                "section {name}: dims {:?} imply {} values, got {}",
                section.dims,
                expect,
                section.data.len()
            )));
        }
        table_len += 8 + name.len() + 1 + 8 + 8 * section.dims.len() + 8 + 8;
    }
    let header_len = 4 + 4 + 8;
    let payload_start = header_len + table_len;

    let mut buf = Vec::with_capacity(payload_start + 64);
    buf.extend_from_slice(&CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    push_u64(&mut buf, sections.len() as u64);
    let mut offset = payload_start;
    for (name, section) in sections {
        push_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        buf.push(match section.dtype {
            Precision::F32 => DTYPE_F32,
            Precision::F64 => DTYPE_F64,
        });
        push_u64(&mut buf, section.dims.len() as u64);
        for &d in &section.dims {
            push_u64(&mut buf, d as u64);
        }
        push_u64(&mut buf, offset as u64);
        push_u64(&mut buf, section.byte_len() as u64);
        offset += section.byte_len();
    }
    debug_assert_eq!(buf.len(), payload_start);
    for section in sections.values() {
        match section.dtype {
            Precision::F32 => {
                for &v in &section.data {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for &v in &section.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let checksum = crc64(&buf);
    push_u64(&mut buf, checksum);
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| Error::ContainerFormat("section span overflows".into()))?;
        if end > self.bytes.len() {
            return Err(Error::ContainerFormat(format!(
                "truncated container: needed {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64> {
        let raw = self.take(8)?;
        Ok(u64::from_le_bytes(raw.try_into().expect("slice length checked")))
    }

    fn take_usize(&mut self) -> Result<usize> {
        let v = self.take_u64()?;
        usize::try_from(v)
            .map_err(|_| Error::ContainerFormat(format!("size field {v} overflows usize")))
    }
}

/// Parses and validates container bytes.
pub fn decode_container(bytes: &[u8]) -> Result<BTreeMap<String, Section>> {
    if bytes.len() < 4 || bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::ContainerFormat(
            "missing ICMF magic: not a container file".into(),
        ));
    }
    if bytes.len() < 8 {
        return Err(Error::ContainerFormat("truncated container header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("fixed-size header"));
    if version != CONTAINER_VERSION {
        return Err(Error::ContainerVersion {
            expected: CONTAINER_VERSION,
            found: version,
        });
    }
    if bytes.len() < 16 + 8 {
        return Err(Error::ContainerFormat("truncated container header".into()));
    }
    let body_end = bytes.len() - 8;
    let mut cursor = Cursor {
        bytes: &bytes[..body_end],
        pos: 8,
    };
    let count = cursor.take_usize()?;
    struct Entry {
        name: String,
        dtype: Precision,
        dims: Vec<usize>,
        offset: usize,
        length: usize,
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cursor.take_usize()?;
        let name = String::from_utf8(cursor.take(name_len)?.to_vec())
            .map_err(|_| Error::ContainerFormat("section name is not UTF-8".into()))?;
        let dtype = match cursor.take(1)?[0] {
            DTYPE_F32 => Precision::F32,
            DTYPE_F64 => Precision::F64,
            tag => {
                return Err(Error::ContainerFormat(format!(
                    "unknown dtype tag {tag} for section {name}"
                )))
            }
        };
        let rank = cursor.take_usize()?;
        let mut dims = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            dims.push(cursor.take_usize()?);
        }
        let offset = cursor.take_usize()?;
        let length = cursor.take_usize()?;
        entries.push(Entry {
            name,
            dtype,
            dims,
            offset,
            length,
        });
    }
    let table_end = cursor.pos;

    let mut spans: Vec<(usize, usize, usize)> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.offset, e.length, i))
        .collect();
    spans.sort();
    let mut prev_end = table_end;
    for &(offset, length, _) in &spans {
        if offset < prev_end {
            return Err(Error::ContainerFormat(format!(
                "section payload at offset {offset} overlaps preceding bytes"
            )));
        }
        let end = offset
            .checked_add(length)
            .ok_or_else(|| Error::ContainerFormat("section span overflows".into()))?;
        if end > body_end {
            return Err(Error::ContainerFormat(format!(
                "section payload [{}..{}) exceeds file body {}",
                offset, end, body_end
            )));
        }
        prev_end = end;
    }

    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("fixed-size trailer"));
    let computed = crc64(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut sections = BTreeMap::new();
    for entry in entries {
        let elem = match entry.dtype {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let expect: usize = entry.dims.iter().product();
        if expect * elem != entry.length {
            return Err(Error::ContainerFormat(format!(
                "section {}: dims {:?} disagree with byte length {}",
                entry.name, entry.dims, entry.length
            )));
        }
        let raw = &bytes[entry.offset..entry.offset + entry.length];
        let data: Vec<f64> = match entry.dtype {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunked")) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunked")))
                .collect(),
        };
        let section = Section {
            dims: entry.dims,
            dtype: entry.dtype,
            data,
        };
        if sections.insert(entry.name.clone(), section).is_some() {
            return Err(Error::ContainerFormat(format!(
                "duplicate section name {}",
                entry.name
            )));
        }
    }
    Ok(sections)
}

/// Writes sections to a container file.
pub fn save_container(path: &Path, sections: &BTreeMap<String, Section>) -> Result<()> {
    let bytes = encode_container(sections)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a container file back into sections.
pub fn load_container(path: &Path) -> Result<BTreeMap<String, Section>> {
    if !path.exists() {
        return Err(Error::MissingInput(format!(
            "container not found: {}",
            path.display()
        )));
    }
    let bytes = std::fs::read(path)?;
    decode_container(&bytes)
}
