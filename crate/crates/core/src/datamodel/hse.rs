//! HSE embedding exchange format.
//!
//! Little-endian layout:
//!
//! ```text
//! "HSE1"                     magic, 4 bytes
//! u32 version = 1
//! u32 d
//! u32 L
//! L × (u32 len, UTF-8 bytes) label names
//! L × d f32                  label embeddings
//! u32 sample count
//! per sample:
//!   u32 len, UTF-8 bytes     id
//!   u32 n_text
//!   u32 n_video
//!   u32 label index
//!   (n_text + n_video) × d f32, text tokens first
//! ```
//!
//! Values are widened to `f64` on ingestion, so an export of an ingested
//! dataset reproduces every `f32` bit pattern.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{Dataset, LabelSet, Sample, Split, TokenSequence};

pub const MAGIC: &[u8; 4] = b"HSE1";
pub const VERSION: u32 = 1;

/// Serializes `dataset` to HSE bytes. Values are narrowed to `f32`.
pub fn encode_hse(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(dataset.dim(), "d")?);
    let labels = dataset.labels();
    put_u32(&mut out, to_u32(labels.len(), "label count")?);
    for name in labels.names() {
        put_str(&mut out, name)?;
    }
    put_f32s(&mut out, labels.embeddings().data());
    put_u32(&mut out, to_u32(dataset.len(), "sample count")?);
    for s in dataset.samples() {
        put_str(&mut out, &s.id)?;
        put_u32(&mut out, to_u32(s.sequence.n_text(), "n_text")?);
        put_u32(&mut out, to_u32(s.sequence.n_video(), "n_video")?);
        put_u32(&mut out, to_u32(s.label, "label")?);
        put_f32s(&mut out, s.sequence.tokens().data());
    }
    Ok(out)
}

pub fn write_hse(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_hse(dataset)?)?;
    Ok(())
}

/// Parses HSE bytes. The whole file is validated; any defect rejects it.
pub fn decode_hse(bytes: &[u8], split: Split) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"HSE1\""),
        });
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: version_at as u64,
            message: format!("unsupported version {version}"),
        });
    }
    let d = r.u32("d")? as usize;
    if d == 0 {
        return Err(r.error("d must be positive"));
    }
    let n_labels = r.u32("label count")? as usize;
    let mut names = Vec::with_capacity(n_labels.min(1 << 16));
    for _ in 0..n_labels {
        names.push(r.string("label name")?);
    }
    let label_data = r.f32s(n_labels * d, "label embeddings")?;
    if label_data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSample {
            id: "<labels>".into(),
            reason: "non-finite label embedding".into(),
        });
    }
    let labels = LabelSet::new(names, Tensor::new(n_labels, d, label_data)?)?;

    let n_samples = r.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(n_samples.min(1 << 16));
    for _ in 0..n_samples {
        let id = r.string("sample id")?;
        let n_text = r.u32("n_text")? as usize;
        let n_video = r.u32("n_video")? as usize;
        let label = r.u32("label index")? as usize;
        let n = n_text + n_video;
        let data = r.f32s(n * d, "token matrix")?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSample {
                id,
                reason: format!("non-finite value at token {} dim {}", pos / d, pos % d),
            });
        }
        let tokens = Tensor::new(n, d, data)?;
        let sequence = TokenSequence::new(tokens, n_text, n_video).map_err(|e| Error::InvalidSample {
            id: id.clone(),
            reason: e.to_string(),
        })?;
        samples.push(Sample { id, sequence, label });
    }
    if r.pos != bytes.len() {
        return Err(r.error(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Dataset::new(samples, labels, split)
}

pub fn read_hse(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_hse(&fs::read(path)?, Split::Test)
}

/// Reads an HSE file, or its JSON-Lines mirror when the extension is `.jsonl`.
pub fn ingest_embeddings(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        read_jsonl(path)
    } else {
        read_hse(path)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    format: String,
    version: u32,
    d: usize,
    labels: Vec<JsonLabel>,
}

#[derive(Serialize, Deserialize)]
struct JsonLabel {
    name: String,
    embedding: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct JsonSample {
    id: String,
    label: usize,
    n_text: usize,
    n_video: usize,
    tokens: Vec<Vec<f32>>,
}

const JSONL_FORMAT: &str = "hse-jsonl";

/// Human-readable mirror: a header line with `d` and the labels, then one
/// sample object per line. Values are written as `f32`, like the binary form.
pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let labels = dataset.labels();
    let header = JsonHeader {
        format: JSONL_FORMAT.into(),
        version: VERSION,
        d: dataset.dim(),
        labels: labels
            .names()
            .iter()
            .zip(labels.embeddings().iter_rows())
            .map(|(name, row)| JsonLabel {
                name: name.clone(),
                embedding: row.iter().map(|&v| v as f32).collect(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for s in dataset.samples() {
        let line = JsonSample {
            id: s.id.clone(),
            label: s.label,
            n_text: s.sequence.n_text(),
            n_video: s.sequence.n_video(),
            tokens: s
                .sequence
                .tokens()
                .iter_rows()
                .map(|r| r.iter().map(|&v| v as f32).collect())
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header: JsonHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Parse { offset: 0, message: "empty file".into() }),
    };
    if header.format != JSONL_FORMAT || header.version != VERSION {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unsupported header {} v{}", header.format, header.version),
        });
    }
    let d = header.d;
    let mut names = Vec::new();
    let mut emb = Vec::new();
    for l in header.labels {
        if l.embedding.len() != d {
            return Err(Error::invalid(format!("label {:?} has width {}", l.name, l.embedding.len())));
        }
        names.push(l.name);
        emb.extend(l.embedding.iter().map(|&v| f64::from(v)));
    }
    let labels = LabelSet::new(names, Tensor::new(emb.len() / d.max(1), d, emb)?)?;
    let mut samples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: JsonSample = serde_json::from_str(&line)?;
        let reject = |reason: String| Error::InvalidSample { id: s.id.clone(), reason };
        let mut data = Vec::with_capacity(s.tokens.len() * d);
        for row in &s.tokens {
            if row.len() != d {
                return Err(reject(format!("token width {} differs from d = {d}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(reject("non-finite token value".into()));
            }
            data.extend(row.iter().map(|&v| f64::from(v)));
        }
        let tokens = Tensor::new(s.tokens.len(), d, data)?;
        let sequence = TokenSequence::new(tokens, s.n_text, s.n_video).map_err(|e| reject(e.to_string()))?;
        samples.push(Sample {
            id: s.id,
            sequence,
            label: s.label,
        });
    }
    Dataset::new(samples, labels, Split::Test)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit in u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, to_u32(s.len(), "string length")?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.error(format!(
                "truncated while reading {what}: need {n} bytes, {remaining} left"
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Parse {
            offset: at as u64,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let n_bytes = count
            .checked_mul(4)
            .ok_or_else(|| self.error(format!("{what} size overflows")))?;
        let b = self.take(n_bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::generate_synthetic;

    fn tiny() -> Dataset {
        generate_synthetic(3, 2, 4, 3, 0.2, 5).unwrap()
    }

    #[test]
    fn round_trip_preserves_f32_bits() {
        let original = decode_hse(&encode_hse(&tiny()).unwrap(), Split::Test).unwrap();
        let bytes = encode_hse(&original).unwrap();
        let again = decode_hse(&bytes, Split::Test).unwrap();
        assert_eq!(original, again);
        assert_eq!(bytes, encode_hse(&again).unwrap());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_hse(&tiny()).unwrap();
        let cut = bytes.len() - 3;
        match decode_hse(&bytes[..cut], Split::Test) {
            Err(Error::Parse { offset, message }) => {
                assert!(offset as usize <= cut, "offset {offset}");
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn magic_and_version_checked() {
        let mut bytes = encode_hse(&tiny()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_hse(&bytes, Split::Test), Err(Error::Parse { offset: 0, .. })));
        let mut bytes = encode_hse(&tiny()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_hse(&bytes, Split::Test), Err(Error::Parse { offset: 4, .. })));
    }

    #[test]
    fn nan_token_rejected_with_sample_id() {
        let ds = tiny();
        let mut bytes = encode_hse(&ds).unwrap();
        // last f32 of the file belongs to the last sample's token matrix
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_hse(&bytes, Split::Test) {
            Err(Error::InvalidSample { id, .. }) => assert_eq!(id, ds.samples().last().unwrap().id),
            other => panic!("expected sample rejection, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_mirror_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = decode_hse(&encode_hse(&tiny()).unwrap(), Split::Test).unwrap();
        let path = dir.path().join("data.jsonl");
        write_jsonl(&ds, &path).unwrap();
        let back = ingest_embeddings(&path).unwrap();
        assert_eq!(ds, back);
    }
}
