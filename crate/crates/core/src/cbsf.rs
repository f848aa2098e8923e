//! CBSF feature files.
//!
//! Layout, little-endian throughout:
//!
//! | bytes            | content                                              |
//! |------------------|------------------------------------------------------|
//! | 0..4             | magic `CBSF`                                         |
//! | 4                | version, `1`                                         |
//! | 5..9             | header length `L` as `u32`                           |
//! | 9..9+L           | UTF-8 JSON `{"count","C","H","W","d","has_labels"}`  |
//! | per instance     | `H*W*d` `f32` values (row-major), then `C` label bytes in `{0,1}` iff `has_labels` |
//!
//! Features are stored as `f32`; values that are exactly representable in
//! `f32` survive a round trip bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CbsaError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CBSF";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureHeader {
    pub count: usize,
    #[serde(rename = "C")]
    pub n_classes: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub d: usize,
    pub has_labels: bool,
}

impl FeatureHeader {
    fn block_len(&self) -> usize {
        self.height * self.width * self.d * 4 + if self.has_labels { self.n_classes } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    /// `HW x d` feature map.
    pub features: Tensor,
    pub labels: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub header: FeatureHeader,
    pub records: Vec<FeatureRecord>,
}

/// Rounds every element through `f32`, the precision stored on disk.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

pub fn encode(file: &FeatureFile) -> Result<Vec<u8>> {
    let h = &file.header;
    if h.count != file.records.len() {
        return Err(CbsaError::Contract(format!(
            "header count {} but {} records",
            h.count,
            file.records.len()
        )));
    }
    let header_json = serde_json::to_vec(h)?;
    let mut out = Vec::with_capacity(9 + header_json.len() + h.count * h.block_len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    let hw = h.height * h.width;
    for (i, rec) in file.records.iter().enumerate() {
        if rec.features.dims() != (hw, h.d) {
            return Err(CbsaError::dim(format!(
                "record {i} features {:?}, header expects [{hw}, {}]",
                rec.features.shape(),
                h.d
            )));
        }
        for &v in rec.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        match (&rec.labels, h.has_labels) {
            (Some(y), true) if y.len() == h.n_classes && y.iter().all(|&b| b <= 1) => {
                out.extend_from_slice(y)
            }
            (None, false) => {}
            _ => {
                return Err(CbsaError::Contract(format!(
                    "record {i} labels do not match the header"
                )))
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<FeatureFile> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CbsaError::format(0, "missing CBSF magic"));
    }
    match bytes.get(4) {
        Some(&VERSION) => {}
        Some(v) => return Err(CbsaError::format(4, format!("unsupported version {v}"))),
        None => return Err(CbsaError::format(4, "truncated before version byte")),
    }
    let len_bytes: [u8; 4] = bytes
        .get(5..9)
        .ok_or_else(|| CbsaError::format(5, "truncated header length"))?
        .try_into()
        .expect("four bytes");
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(9..9 + header_len)
        .ok_or_else(|| CbsaError::format(9, format!("header of {header_len} bytes is truncated")))?;
    let header: FeatureHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| CbsaError::format(9, format!("bad header: {e}")))?;
    if header.n_classes == 0 || header.height == 0 || header.width == 0 || header.d == 0 {
        return Err(CbsaError::format(9, "header declares a zero dimension"));
    }

    let hw = header.height * header.width;
    let n_floats = hw * header.d;
    let block = header.block_len();
    let mut offset = 9 + header_len;
    let mut records = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let chunk = bytes.get(offset..offset + block).ok_or_else(|| {
            CbsaError::format(
                offset,
                format!("instance {i} of {} is truncated", header.count),
            )
        })?;
        let data: Vec<f64> = chunk[..n_floats * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")) as f64)
            .collect();
        let labels = if header.has_labels {
            let y = chunk[n_floats * 4..].to_vec();
            if let Some(pos) = y.iter().position(|&b| b > 1) {
                return Err(CbsaError::format(
                    offset + n_floats * 4 + pos,
                    format!("label byte {} is not 0 or 1", y[pos]),
                ));
            }
            Some(y)
        } else {
            None
        };
        records.push(FeatureRecord {
            features: Tensor::matrix(hw, header.d, data)?,
            labels,
        });
        offset += block;
    }
    if offset != bytes.len() {
        return Err(CbsaError::format(
            offset,
            format!("{} trailing bytes after the last instance", bytes.len() - offset),
        ));
    }
    Ok(FeatureFile { header, records })
}

pub fn write_features(path: &Path, file: &FeatureFile) -> Result<()> {
    let bytes = encode(file)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Loads a CBSF file from disk.
pub fn ingest_features(path: &Path) -> Result<FeatureFile> {
    decode(&fs::read(path)?)
}
