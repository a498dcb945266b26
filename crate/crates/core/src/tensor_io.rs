//! On-disk attention container ("ATN1") and token metadata.
//!
//! Layout of an ATN1 file, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic  41 54 4E 31 ("ATN1")
//! 4       16    dims   L, H, T, S as u32
//! 20      1     flags  bit0 = rows claim to be row-stochastic
//! 21      4*N   values f32, row-major (layer, head, gen row, ctx col)
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"ATN1";
pub const HEADER_LEN: usize = 21;
pub const MAX_DIM: u32 = 1 << 20;
pub const FLAG_ROW_STOCHASTIC: u8 = 0x01;
/// Allowed deviation of a row sum from 1 when the stochastic flag is set.
pub const ROW_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("bad magic: expected ATN1, found {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("dimension {name}={value} out of range (must be in 1..=2^20)")]
    DimOverflow { name: &'static str, value: u64 },
    #[error("payload holds {found} values, header declares {expected}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("non-finite or negative value {value} at flat index {index}")]
    NonFiniteValue { index: usize, value: f32 },
    #[error("row (layer {layer}, head {head}, row {row}) sums to {sum}, not 1")]
    NotRowStochastic {
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
    },
    #[error("unknown modality label {0:?} (expected 'v' or 'l')")]
    UnknownModalityLabel(char),
    #[error("length mismatch: {what} has {found}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("malformed token metadata: {0}")]
    BadMeta(#[from] serde_json::Error),
    #[error("I/O failure on {path}")]
    IoFailure {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path, source: io::Error) -> TensorIoError {
    TensorIoError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

/// Dense L x H x T x S stack of attention maps over a generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    gen_len: usize,
    ctx_len: usize,
    row_stochastic: bool,
    values: Vec<f32>,
}

impl AttentionTensor {
    /// Builds a tensor, enforcing every container invariant.
    pub fn new(
        layers: usize,
        heads: usize,
        gen_len: usize,
        ctx_len: usize,
        values: Vec<f32>,
        row_stochastic: bool,
    ) -> Result<Self, TensorIoError> {
        for (name, v) in [("L", layers), ("H", heads), ("T", gen_len), ("S", ctx_len)] {
            if v == 0 || v as u64 > MAX_DIM as u64 {
                return Err(TensorIoError::DimOverflow {
                    name,
                    value: v as u64,
                });
            }
        }
        let expected = (layers * heads * gen_len * ctx_len) as u64;
        if values.len() as u64 != expected {
            return Err(TensorIoError::TruncatedPayload {
                expected,
                found: values.len() as u64,
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(TensorIoError::NonFiniteValue { index, value });
        }
        let tensor = Self {
            layers,
            heads,
            gen_len,
            ctx_len,
            row_stochastic,
            values,
        };
        if row_stochastic {
            tensor.check_row_sums()?;
        }
        Ok(tensor)
    }

    /// All-zero tensor (never row-stochastic).
    pub fn zeros(layers: usize, heads: usize, gen_len: usize, ctx_len: usize) -> Result<Self, TensorIoError> {
        let n = layers * heads * gen_len * ctx_len;
        Self::new(layers, heads, gen_len, ctx_len, vec![0.0; n], false)
    }

    fn check_row_sums(&self) -> Result<(), TensorIoError> {
        for layer in 0..self.layers {
            for head in 0..self.heads {
                for row in 0..self.gen_len {
                    let sum: f64 = self.row(layer, head, row).iter().map(|&v| v as f64).sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(TensorIoError::NotRowStochastic {
                            layer,
                            head,
                            row,
                            sum,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn gen_len(&self) -> usize {
        self.gen_len
    }

    pub fn ctx_len(&self) -> usize {
        self.ctx_len
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.row_stochastic
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Shape as `[L, H, T, S]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.layers, self.heads, self.gen_len, self.ctx_len]
    }

    /// One attention row `A^l_h[i, :]`.
    pub fn row(&self, layer: usize, head: usize, row: usize) -> &[f32] {
        let start = ((layer * self.heads + head) * self.gen_len + row) * self.ctx_len;
        &self.values[start..start + self.ctx_len]
    }

    pub fn get(&self, layer: usize, head: usize, row: usize, col: usize) -> f32 {
        self.row(layer, head, row)[col]
    }

    /// Multiplies every entry by `factor >= 0`. The stochastic claim is dropped
    /// unless the factor is exactly one.
    pub fn scaled(&self, factor: f32) -> Result<Self, TensorIoError> {
        let values = self.values.iter().map(|v| v * factor).collect();
        Self::new(
            self.layers,
            self.heads,
            self.gen_len,
            self.ctx_len,
            values,
            self.row_stochastic && factor == 1.0,
        )
    }

    /// Serializes into the ATN1 byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&MAGIC);
        for d in self.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(if self.row_stochastic { FLAG_ROW_STOCHASTIC } else { 0 });
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the ATN1 byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorIoError> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(TensorIoError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(TensorIoError::TruncatedPayload {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let mut dims = [0u32; 4];
        for (k, d) in dims.iter_mut().enumerate() {
            let off = 4 + 4 * k;
            *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        }
        for (name, value) in ["L", "H", "T", "S"].into_iter().zip(dims) {
            if value == 0 || value > MAX_DIM {
                return Err(TensorIoError::DimOverflow {
                    name,
                    value: value as u64,
                });
            }
        }
        let flags = bytes[20];
        let expected: u64 = dims.iter().map(|&d| d as u64).product();
        let payload = &bytes[HEADER_LEN..];
        if !payload.len().is_multiple_of(4) || payload.len() as u64 / 4 != expected {
            return Err(TensorIoError::TruncatedPayload {
                expected,
                found: payload.len() as u64 / 4,
            });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let [l, h, t, s] = dims.map(|d| d as usize);
        Self::new(l, h, t, s, values, flags & FLAG_ROW_STOCHASTIC != 0)
    }
}

pub fn load_attention(path: impl AsRef<Path>) -> Result<AttentionTensor, TensorIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    AttentionTensor::from_bytes(&bytes)
}

pub fn save_attention(tensor: &AttentionTensor, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&tensor.to_bytes()).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Language,
}

impl Modality {
    fn from_label(c: char) -> Result<Self, TensorIoError> {
        match c {
            'v' => Ok(Modality::Vision),
            'l' => Ok(Modality::Language),
            other => Err(TensorIoError::UnknownModalityLabel(other)),
        }
    }

    fn label(self) -> char {
        match self {
            Modality::Vision => 'v',
            Modality::Language => 'l',
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    ctx_modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gen_text: Option<Vec<String>>,
}

/// Per-position modality labels for the context plus optional token strings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMeta {
    pub ctx_modality: Vec<Modality>,
    pub gen_text: Option<Vec<String>>,
}

impl TokenMeta {
    /// Parses a modality string such as `"vvlll"`.
    pub fn from_labels(labels: &str, gen_text: Option<Vec<String>>) -> Result<Self, TensorIoError> {
        let ctx_modality = labels
            .chars()
            .map(Modality::from_label)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            ctx_modality,
            gen_text,
        })
    }

    pub fn labels(&self) -> String {
        self.ctx_modality.iter().map(|m| m.label()).collect()
    }

    /// Positions labeled as vision. May be empty.
    pub fn visual_index_set(&self) -> BTreeSet<usize> {
        self.ctx_modality
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == Modality::Vision)
            .map(|(j, _)| j)
            .collect()
    }

    /// Checks that this metadata matches a tensor's T and S.
    pub fn check_against(&self, tensor: &AttentionTensor) -> Result<(), TensorIoError> {
        if self.ctx_modality.len() != tensor.ctx_len() {
            return Err(TensorIoError::LengthMismatch {
                what: "ctx_modality",
                expected: tensor.ctx_len(),
                found: self.ctx_modality.len(),
            });
        }
        if let Some(text) = &self.gen_text {
            if text.len() != tensor.gen_len() {
                return Err(TensorIoError::LengthMismatch {
                    what: "gen_text",
                    expected: tensor.gen_len(),
                    found: text.len(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = MetaFile {
            ctx_modality: self.labels(),
            gen_text: self.gen_text.clone(),
        };
        serde_json::to_string_pretty(&file).expect("metadata serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TensorIoError> {
        let file: MetaFile = serde_json::from_str(text)?;
        Self::from_labels(&file.ctx_modality, file.gen_text)
    }
}

pub fn load_token_meta(path: impl AsRef<Path>) -> Result<TokenMeta, TensorIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    TokenMeta::from_json(&text)
}

/// Loads metadata and validates it against a tensor already in hand.
pub fn load_token_meta_for(path: impl AsRef<Path>, tensor: &AttentionTensor) -> Result<TokenMeta, TensorIoError> {
    let meta = load_token_meta(path)?;
    meta.check_against(tensor)?;
    Ok(meta)
}

pub fn save_token_meta(meta: &TokenMeta, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    fs::write(path, meta.to_json()).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dims: [u32; 4], flags: u8) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b.push(flags);
        b
    }

    fn sample() -> AttentionTensor {
        let values = (0..60).map(|k| k as f32 * 0.01).collect();
        AttentionTensor::new(2, 2, 3, 5, values, false).unwrap()
    }

    #[test]
    fn header_dims_are_echoed() {
        let mut b = header([2, 2, 3, 5], 0);
        for k in 0..60 {
            b.extend_from_slice(&(k as f32).to_le_bytes());
        }
        let t = AttentionTensor::from_bytes(&b).unwrap();
        assert_eq!(t.shape(), [2, 2, 3, 5]);
        assert_eq!(t.get(1, 1, 2, 4), 59.0);
        assert_eq!(t.get(0, 1, 0, 0), 15.0);
    }

    #[test]
    fn short_payload_is_truncated() {
        let mut b = header([2, 2, 3, 5], 0);
        for _ in 0..59 {
            b.extend_from_slice(&0.5f32.to_le_bytes());
        }
        match AttentionTensor::from_bytes(&b) {
            Err(TensorIoError::TruncatedPayload { expected: 60, found: 59 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        // a dangling partial value is also truncation
        b.extend_from_slice(&[0, 0]);
        assert!(matches!(
            AttentionTensor::from_bytes(&b),
            Err(TensorIoError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn nan_is_rejected() {
        let mut b = header([1, 1, 1, 3], 0);
        for v in [0.1f32, f32::NAN, 0.2] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            AttentionTensor::from_bytes(&b),
            Err(TensorIoError::NonFiniteValue { index: 1, .. })
        ));
    }

    #[test]
    fn negative_and_infinite_rejected() {
        assert!(AttentionTensor::new(1, 1, 1, 2, vec![-0.1, 0.0], false).is_err());
        assert!(AttentionTensor::new(1, 1, 1, 2, vec![f32::INFINITY, 0.0], false).is_err());
    }

    #[test]
    fn bad_magic_and_dims() {
        assert!(matches!(
            AttentionTensor::from_bytes(b"NOPE\0\0\0"),
            Err(TensorIoError::BadMagic(_))
        ));
        assert!(matches!(
            AttentionTensor::from_bytes(&header([1, (1 << 20) + 1, 1, 1], 0)),
            Err(TensorIoError::DimOverflow { name: "H", .. })
        ));
        assert!(matches!(
            AttentionTensor::from_bytes(&header([1, 1, 0, 1], 0)),
            Err(TensorIoError::DimOverflow { name: "T", .. })
        ));
    }

    #[test]
    fn stochastic_flag_is_enforced() {
        let ok = AttentionTensor::new(1, 1, 2, 2, vec![0.5, 0.5, 0.25, 0.75], true);
        assert!(ok.is_ok());
        let bad = AttentionTensor::new(1, 1, 2, 2, vec![0.5, 0.5, 0.25, 0.5], true);
        assert!(matches!(bad, Err(TensorIoError::NotRowStochastic { row: 1, .. })));
        // the same values without the claim are fine
        assert!(AttentionTensor::new(1, 1, 2, 2, vec![0.5, 0.5, 0.25, 0.5], false).is_ok());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.atn");
        let t = sample();
        save_attention(&t, &path).unwrap();
        assert_eq!(load_attention(&path).unwrap(), t);

        let z = AttentionTensor::zeros(1, 2, 3, 4).unwrap();
        save_attention(&z, &path).unwrap();
        assert!(load_attention(&path).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("a.atn");
        assert!(matches!(
            save_attention(&sample(), path),
            Err(TensorIoError::IoFailure { .. })
        ));
    }

    #[test]
    fn meta_labels() {
        let m = TokenMeta::from_labels("vvlll", None).unwrap();
        assert_eq!(m.visual_index_set().into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert!(matches!(
            TokenMeta::from_labels("vvx", None),
            Err(TensorIoError::UnknownModalityLabel('x'))
        ));
        let all_l = TokenMeta::from_labels("lll", None).unwrap();
        assert!(all_l.visual_index_set().is_empty());
    }

    #[test]
    fn meta_json_and_length_check() {
        let text = r#"{"ctx_modality": "vvlll", "gen_text": ["a", "b", "c"]}"#;
        let m = TokenMeta::from_json(text).unwrap();
        assert_eq!(m.gen_text.as_ref().unwrap().len(), 3);
        assert_eq!(TokenMeta::from_json(&m.to_json()).unwrap(), m);
        assert!(m.check_against(&sample()).is_ok());

        let wrong = TokenMeta::from_labels("vvll", None).unwrap();
        assert!(matches!(
            wrong.check_against(&sample()),
            Err(TensorIoError::LengthMismatch { what: "ctx_modality", .. })
        ));
        assert!(TokenMeta::from_json("not json").is_err());
    }
}
