//! On-disk embedding formats.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "RAHPEMB1"            8 bytes magic
//! version: u16          = 1
//! flags: u8             bit0 = normalized
//! reserved: u8          = 0
//! dim: u32
//! count: u32
//! values: f32 * count * dim, row-major
//! trailer_len: u32
//! trailer: trailer_len bytes of UTF-8 JSON {"labels": [...]}
//! ```
//!
//! The JSON fixture format is `{"dim", "normalized", "labels", "vectors"}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingError, EmbeddingMatrix};

pub const BINARY_MAGIC: &[u8; 8] = b"RAHPEMB1";
pub const BINARY_VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 1 + 1 + 4 + 4;
const FLAG_NORMALIZED: u8 = 0b1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Binary,
    Json,
}

impl EmbeddingFormat {
    /// Guesses the format from the file extension; anything but `.json` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Self::Json,
            _ => Self::Binary,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonFixture {
    dim: usize,
    normalized: bool,
    labels: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbeddingError + '_ {
    move |source| EmbeddingError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    match format {
        EmbeddingFormat::Binary => decode_binary(&bytes),
        EmbeddingFormat::Json => decode_json(&bytes),
    }
}

pub fn save_embeddings(
    m: &EmbeddingMatrix,
    path: &Path,
    format: EmbeddingFormat,
) -> Result<(), EmbeddingError> {
    let bytes = match format {
        EmbeddingFormat::Binary => encode_binary(m),
        EmbeddingFormat::Json => encode_json(m),
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

pub(crate) fn encode_binary(m: &EmbeddingMatrix) -> Vec<u8> {
    let trailer = serde_json::to_vec(&Trailer {
        labels: m.labels().to_vec(),
    })
    .expect("labels serialize");
    let mut out = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * 4 + 4 + trailer.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.push(if m.is_normalized() { FLAG_NORMALIZED } else { 0 });
    out.push(0);
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(m.count() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
    out.extend_from_slice(&trailer);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EmbeddingError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            EmbeddingError::MalformedHeader(format!("truncated file while reading {what}"))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, EmbeddingError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub(crate) fn decode_binary(bytes: &[u8]) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8, "magic")? != BINARY_MAGIC {
        return Err(EmbeddingError::MalformedHeader("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(EmbeddingError::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let flags = cur.take(1, "flags")?[0];
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(EmbeddingError::MalformedHeader(format!("unknown flags {flags:#04x}")));
    }
    if cur.take(1, "reserved")?[0] != 0 {
        return Err(EmbeddingError::MalformedHeader("reserved byte is not zero".into()));
    }
    let dim = cur.u32("dim")? as usize;
    let count = cur.u32("count")? as usize;
    if dim == 0 {
        return Err(EmbeddingError::MalformedHeader("dim must be positive".into()));
    }
    let n_values = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| EmbeddingError::MalformedHeader("count * dim overflows".into()))?;
    let body = cur.take(n_values, "vector data")?;
    let trailer_len = cur.u32("trailer length")? as usize;
    let trailer_bytes = cur.take(trailer_len, "trailer")?;
    if cur.pos != bytes.len() {
        return Err(EmbeddingError::MalformedHeader(format!(
            "{} trailing bytes after trailer",
            bytes.len() - cur.pos
        )));
    }
    let trailer: Trailer = serde_json::from_slice(trailer_bytes)
        .map_err(|e| EmbeddingError::MalformedHeader(format!("trailer: {e}")))?;
    if trailer.labels.len() != count {
        return Err(EmbeddingError::MalformedHeader(format!(
            "trailer declares {} labels but header declares {} rows",
            trailer.labels.len(),
            count
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingMatrix::new(dim, trailer.labels, data, flags & FLAG_NORMALIZED != 0)
}

fn encode_json(m: &EmbeddingMatrix) -> Vec<u8> {
    let fixture = JsonFixture {
        dim: m.dim(),
        normalized: m.is_normalized(),
        labels: m.labels().to_vec(),
        vectors: m.rows().map(<[f64]>::to_vec).collect(),
    };
    serde_json::to_vec(&fixture).expect("fixture serializes")
}

fn decode_json(bytes: &[u8]) -> Result<EmbeddingMatrix, EmbeddingError> {
    // serde_json rejects NaN/Inf literals, so non-finite values surface here
    let fixture: JsonFixture = serde_json::from_slice(bytes)
        .map_err(|e| EmbeddingError::MalformedHeader(format!("json: {e}")))?;
    if fixture.labels.len() != fixture.vectors.len() {
        return Err(EmbeddingError::MalformedHeader(format!(
            "{} labels but {} vectors",
            fixture.labels.len(),
            fixture.vectors.len()
        )));
    }
    EmbeddingMatrix::from_rows(fixture.dim, fixture.labels, fixture.vectors, fixture.normalized)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            4,
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                vec![1.0, 0.0, 0.0, 0.5],
                vec![0.0, -2.0, 0.25, 0.0],
                vec![3.0, 3.0, 3.0, 3.0],
            ],
            false,
        )
        .unwrap()
    }

    #[test]
    fn binary_layout_is_bit_exact() {
        let m = EmbeddingMatrix::from_rows(1, vec!["x".into()], vec![vec![0.5]], false).unwrap();
        let bytes = encode_binary(&m);
        let mut expected = b"RAHPEMB1".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&0.5f32.to_le_bytes());
        let trailer = br#"{"labels":["x"]}"#;
        expected.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
        expected.extend_from_slice(trailer);
        assert_eq!(bytes, expected);
        let back = decode_binary(&bytes).unwrap();
        assert_eq!(back.row(0), &[0.5]);
    }

    #[test]
    fn binary_round_trip() {
        let m = sample();
        let back = decode_binary(&encode_binary(&m)).unwrap();
        assert_eq!((back.count(), back.dim()), (3, 4));
        assert_eq!(back.labels(), m.labels());
        assert_eq!(back.as_slice(), m.as_slice());
    }

    #[test]
    fn json_round_trip() {
        let m = sample();
        let back = decode_json(&encode_json(&m)).unwrap();
        assert_eq!(back.as_slice(), m.as_slice());
    }

    #[test]
    fn trailer_count_mismatch_is_malformed() {
        let m = sample();
        let mut bytes = encode_binary(&m);
        let trailer = br#"{"labels":["a","b"]}"#;
        let body_end = HEADER_LEN + 3 * 4 * 4;
        bytes.truncate(body_end);
        bytes.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
        bytes.extend_from_slice(trailer);
        assert!(matches!(decode_binary(&bytes), Err(EmbeddingError::MalformedHeader(_))));
    }

    #[test]
    fn json_row_length_mismatch() {
        let raw = br#"{"dim":2,"normalized":false,"labels":["a"],"vectors":[[1.0,2.0,3.0]]}"#;
        assert!(matches!(
            decode_json(raw),
            Err(EmbeddingError::DimensionMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(EmbeddingFormat::from_path(Path::new("x.JSON")), EmbeddingFormat::Json);
        assert_eq!(EmbeddingFormat::from_path(Path::new("x.bin")), EmbeddingFormat::Binary);
    }
}
