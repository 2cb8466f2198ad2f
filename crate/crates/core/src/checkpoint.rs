//! Binary weight files and plain CSV matrices.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! "SPSW" | u32 version word | u64 n | u64 m | n*m f32 (W, row-major) | n f32 (b)
//! ```
//!
//! The low 24 bits of the version word hold the format version (1). Bit 24,
//! the lowest bit of its high byte, is set when the file has no bias section.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"SPSW";
pub const VERSION: u32 = 1;
pub const NO_BIAS_FLAG: u32 = 1 << 24;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// A weight matrix with an optional bias, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredMatrix {
    pub w: Array2<f32>,
    pub b: Option<Array1<f32>>,
}

pub fn encode<F: Real>(w: &Array2<F>, b: Option<&Array1<F>>) -> Result<Vec<u8>> {
    let (n, m) = w.dim();
    if let Some(b) = b {
        if b.len() != n {
            return Err(Error::dims(format!("bias of length {n}"), b.len()));
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (n * m + n));
    out.extend_from_slice(MAGIC);
    let word = if b.is_some() { VERSION } else { VERSION | NO_BIAS_FLAG };
    out.extend_from_slice(&word.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(m as u64).to_le_bytes());
    for &v in w.iter() {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    if let Some(b) = b {
        for &v in b.iter() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<StoredMatrix> {
    let bad = |offset: usize, reason: String| Error::MalformedFile {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad(0, "missing SPSW magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(bad(bytes.len(), format!("header truncated ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    let word = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let version = word & 0x00ff_ffff;
    if version != VERSION {
        return Err(bad(4, format!("unsupported version {version}")));
    }
    if word & !0x00ff_ffff & !NO_BIAS_FLAG != 0 {
        return Err(bad(4, format!("unknown flags in version word {word:#010x}")));
    }
    let has_bias = word & NO_BIAS_FLAG == 0;
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let m = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = n
        .checked_mul(m)
        .and_then(|nm| nm.checked_add(if has_bias { n } else { 0 }))
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| bad(8, format!("dimensions {n} x {m} overflow")))?;
    let expected = HEADER_LEN as u64 + count;
    if bytes.len() as u64 != expected {
        return Err(bad(
            bytes.len().min(expected as usize),
            format!("expected {expected} bytes for {n} x {m}, file has {}", bytes.len()),
        ));
    }
    let (n, m) = (n as usize, m as usize);
    let floats = |start: usize, len: usize| -> Vec<f32> {
        bytes[start..start + 4 * len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let w = Array2::from_shape_vec((n, m), floats(HEADER_LEN, n * m)).expect("length checked");
    let b = has_bias.then(|| Array1::from(floats(HEADER_LEN + 4 * n * m, n)));
    Ok(StoredMatrix { w, b })
}

pub fn write_spsw<F: Real>(path: &Path, w: &Array2<F>, b: Option<&Array1<F>>) -> Result<()> {
    let bytes = encode(w, b)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn save_model<F: Real>(path: &Path, model: &ToyModel<F>) -> Result<()> {
    write_spsw(path, &model.w, Some(&model.b))
}

pub fn load_model(path: &Path) -> Result<ToyModel<f32>> {
    let bytes = fs::read(path)?;
    let stored = decode(&bytes, path)?;
    let b = stored.b.ok_or_else(|| Error::MalformedFile {
        path: path.to_path_buf(),
        offset: 4,
        reason: "file has no bias section".into(),
    })?;
    ToyModel::new(stored.w, b)
}

/// Headerless CSV, one matrix row per line.
pub fn parse_csv_matrix(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    let mut record = csv::StringRecord::new();
    loop {
        let offset = reader.position().byte();
        let more = reader.read_record(&mut record).map_err(|e| Error::MalformedFile {
            path: path.to_path_buf(),
            offset: e.position().map_or(offset, |p| p.byte()),
            reason: e.to_string(),
        })?;
        if !more {
            break;
        }
        let start = record.position().map_or(offset, |p| p.byte());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::MalformedFile {
                    path: path.to_path_buf(),
                    offset: start,
                    reason: format!("row {} has {} columns, expected {c}", rows + 1, record.len()),
                })
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f32 = field.parse().map_err(|_| Error::MalformedFile {
                path: path.to_path_buf(),
                offset: start,
                reason: format!("row {}: cannot parse {field:?} as a number", rows + 1),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::MalformedFile {
        path: path.to_path_buf(),
        offset: 0,
        reason: "empty matrix".into(),
    })?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("rectangular"))
}

/// Reads either format, telling them apart by the magic bytes.
pub fn read_matrix(path: &Path) -> Result<StoredMatrix> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        decode(&bytes, path)
    } else {
        Ok(StoredMatrix {
            w: parse_csv_matrix(&bytes, path)?,
            b: None,
        })
    }
}
