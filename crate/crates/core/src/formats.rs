//! On-disk encodings: base64 f64 blocks for JSON documents, the `SBIF`
//! binary snapshot format, round-trip CSV and content hashes.

use std::io::{BufRead, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::numkit::Matrix;

/// Little-endian bytes of `values`, base64 encoded.
pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(text).map_err(|e| format!("invalid base64: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err(format!("base64 block holds {} bytes, not a multiple of 8", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Serde adapter storing `Vec<f64>` as one base64 block.
pub mod b64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::encode_f64s(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        super::decode_f64s(&text).map_err(D::Error::custom)
    }
}

/// Serde adapter storing `Vec<Vec<f64>>` as a list of base64 blocks.
pub mod b64_nested {
    use serde::{de::Error as _, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for inner in v {
            seq.serialize_element(&super::encode_f64s(inner))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let blocks = Vec::<String>::deserialize(d)?;
        blocks
            .iter()
            .map(|b| super::decode_f64s(b).map_err(D::Error::custom))
            .collect()
    }
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental SHA-256 over f64 payloads.
#[derive(Default)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new() -> Self {
        Self(Sha256::new())
    }

    pub fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.0.update(v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Byte offset of a 1-based (line, column) position in `text`.
pub fn offset_of(text: &str, line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let mut offset = 0usize;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len()) as u64;
        }
        offset += l.len();
    }
    text.len() as u64
}

/// Converts a JSON parse failure into a [`Error::Format`] with a byte offset.
pub fn json_error(text: &str, e: serde_json::Error) -> Error {
    Error::Format {
        offset: offset_of(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

pub const SNAP_MAGIC: &[u8; 4] = b"SBIF";
pub const SNAP_VERSION: u32 = 1;
const SNAP_HEADER: usize = 4 + 4 + 8 + 8;

/// `SBIF` file image: magic, u32 version, u64 rows, u64 cols, row-major f64
/// payload, CRC32 of the payload. All integers little-endian.
pub fn encode_snap(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(SNAP_HEADER + m.as_slice().len() * 8 + 4);
    out.extend_from_slice(SNAP_MAGIC);
    out.extend_from_slice(&SNAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    let start = out.len();
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_snap(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 4 || &bytes[..4] != SNAP_MAGIC {
        return Err(format_err(0, "missing SBIF magic"));
    }
    if bytes.len() < SNAP_HEADER {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SNAP_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: SNAP_VERSION.to_string(),
        });
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let count = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .filter(|&c| c <= (bytes.len() - SNAP_HEADER) as u64)
        .ok_or_else(|| format_err(bytes.len(), format!("payload for {rows}x{cols} runs past end of file")))?
        as usize;
    let end = SNAP_HEADER + count;
    if bytes.len() < end + 4 {
        return Err(format_err(bytes.len(), "truncated before checksum"));
    }
    if bytes.len() > end + 4 {
        return Err(format_err(end + 4, "trailing bytes after checksum"));
    }
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[SNAP_HEADER..end]);
    if stored != actual {
        return Err(format_err(
            end,
            format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
        ));
    }
    let data: Vec<f64> = bytes[SNAP_HEADER..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows as usize, cols as usize, data)
}

pub fn write_snap(path: &Path, m: &Matrix) -> Result<()> {
    std::fs::write(path, encode_snap(m))?;
    Ok(())
}

pub fn read_snap(path: &Path) -> Result<Matrix> {
    decode_snap(&std::fs::read(path)?)
}

/// CSV with a header row; numbers use Rust's shortest round-trip formatting.
pub fn write_csv<W: Write>(mut w: W, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Reads a numeric CSV written by [`write_csv`].
pub fn read_csv<R: BufRead>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(h) => h?.split(',').map(str::to_string).collect::<Vec<_>>(),
        None => return Err(invalid("empty CSV")),
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.parse::<f64>().map_err(|e| invalid(format!("CSV row {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(invalid(format!("CSV row {} has {} cells, header has {}", i + 1, row.len(), header.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}
