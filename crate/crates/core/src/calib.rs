//! Layer/head aggregation, positional bias correction and connectivity density.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor_io::AttentionTensor;

/// Floor applied to every bias-curve entry.
pub const BIAS_FLOOR: f64 = 1e-6;

/// Default number of final decoder layers averaged.
pub const DEFAULT_TOP_LAYERS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum CalibError {
    #[error("top_layers={requested} out of range 1..={available}")]
    TopLayersOutOfRange { requested: usize, available: usize },
    #[error("invalid bias parameters: {0}")]
    BadParams(String),
    #[error("bias vector has length {found}, axis needs {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("bias entry {index} = {value} below floor {BIAS_FLOOR}")]
    BiasBelowFloor { index: usize, value: f64 },
    #[error("visual index set is empty")]
    EmptyVisualSet,
    #[error("visual index {index} out of range for context length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Shape of the positional bias curve: exponential decay plus a cosine term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasParams {
    lambda_exp: f64,
    gamma: f64,
    lambda_cos: f64,
}

impl Default for BiasParams {
    fn default() -> Self {
        Self {
            lambda_exp: 0.15,
            gamma: 4.0,
            lambda_cos: 0.05,
        }
    }
}

impl BiasParams {
    pub fn new(lambda_exp: f64, gamma: f64, lambda_cos: f64) -> Result<Self, CalibError> {
        if !(lambda_exp.is_finite() && lambda_exp >= 0.0) {
            return Err(CalibError::BadParams(format!("lambda_exp={lambda_exp} must be >= 0")));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(CalibError::BadParams(format!("gamma={gamma} must be > 0")));
        }
        if !(lambda_cos.is_finite() && lambda_cos >= 0.0) {
            return Err(CalibError::BadParams(format!("lambda_cos={lambda_cos} must be >= 0")));
        }
        Ok(Self {
            lambda_exp,
            gamma,
            lambda_cos,
        })
    }

    pub fn lambda_exp(&self) -> f64 {
        self.lambda_exp
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda_cos(&self) -> f64 {
        self.lambda_cos
    }
}

/// Which axis of the aggregated matrix the bias curve divides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasAxis {
    /// Row `i` (generated position) is divided by `b_i`; curve has length T.
    #[default]
    Gen,
    /// Column `j` (context position) is divided by `b_j`; curve has length S.
    Ctx,
}

impl FromStr for BiasAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gen" => Ok(BiasAxis::Gen),
            "ctx" => Ok(BiasAxis::Ctx),
            other => Err(format!("unknown bias axis {other:?} (expected gen|ctx)")),
        }
    }
}

impl BiasAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasAxis::Gen => "gen",
            BiasAxis::Ctx => "ctx",
        }
    }
}

/// Dense T x S matrix of (aggregated or calibrated) attention, row-major f64.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedMatrix {
    gen_len: usize,
    ctx_len: usize,
    values: Vec<f64>,
}

impl CalibratedMatrix {
    /// # Panics
    /// If `values.len() != gen_len * ctx_len` or any value is negative or non-finite.
    pub fn from_vec(gen_len: usize, ctx_len: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), gen_len * ctx_len, "matrix size mismatch");
        assert!(
            values.iter().all(|v| v.is_finite() && *v >= 0.0),
            "calibrated values must be finite and non-negative"
        );
        Self {
            gen_len,
            ctx_len,
            values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let ctx_len = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == ctx_len), "ragged rows");
        Self::from_vec(rows.len(), ctx_len, rows.concat())
    }

    pub fn gen_len(&self) -> usize {
        self.gen_len
    }

    pub fn ctx_len(&self) -> usize {
        self.ctx_len
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.ctx_len..(i + 1) * self.ctx_len]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ctx_len + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.ctx_len.max(1)).take(self.gen_len)
    }

    /// Stores the matrix as a single-layer, single-head ATN1 tensor.
    pub fn to_tensor(&self) -> AttentionTensor {
        let values = self.values.iter().map(|&v| v as f32).collect();
        AttentionTensor::new(1, 1, self.gen_len, self.ctx_len, values, false)
            .expect("calibrated matrix is a valid tensor")
    }
}

/// Per generated token visual connectivity density `C_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityVector(pub Vec<f64>);

impl ConnectivityVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `min(4, L)`: the default number of final layers to average.
pub fn default_top_layers(layers: usize) -> usize {
    DEFAULT_TOP_LAYERS.min(layers)
}

/// Mean over the last `top_layers` layers and all heads.
pub fn aggregate(tensor: &AttentionTensor, top_layers: usize) -> Result<CalibratedMatrix, CalibError> {
    let [layers, heads, t, s] = tensor.shape();
    if top_layers == 0 || top_layers > layers {
        return Err(CalibError::TopLayersOutOfRange {
            requested: top_layers,
            available: layers,
        });
    }
    let mut acc = vec![0.0f64; t * s];
    let block = t * s;
    let vals = tensor.values();
    for l in layers - top_layers..layers {
        for h in 0..heads {
            let start = (l * heads + h) * block;
            for (a, &v) in acc.iter_mut().zip(&vals[start..start + block]) {
                *a += v as f64;
            }
        }
    }
    let scale = 1.0 / (top_layers * heads) as f64;
    acc.iter_mut().for_each(|a| *a *= scale);
    Ok(CalibratedMatrix::from_vec(t, s, acc))
}

/// Mean-normalized positional bias curve of length `len`, with `p_j = j/len`
/// for `j = 1..=len`.
pub fn bias_curve(len: usize, params: &BiasParams) -> Vec<f64> {
    assert!(len >= 1, "bias curve needs at least one position");
    let raw: Vec<f64> = (1..=len)
        .map(|j| {
            let p = j as f64 / len as f64;
            1.0 + params.lambda_exp * (-p * params.gamma).exp() + params.lambda_cos * (PI * p).cos()
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / len as f64;
    let mut b: Vec<f64> = raw.iter().map(|r| r / mean).collect();
    if b.iter().any(|&v| v < BIAS_FLOOR) {
        // only reachable for extreme parameters; renormalize after the clamp
        for v in &mut b {
            *v = v.max(BIAS_FLOOR);
        }
        let m = b.iter().sum::<f64>() / len as f64;
        for v in &mut b {
            *v = (*v / m).max(BIAS_FLOOR);
        }
    }
    b
}

/// Divides the aggregated matrix by the bias curve along `axis`.
pub fn debias(agg: &CalibratedMatrix, bias: &[f64], axis: BiasAxis) -> Result<CalibratedMatrix, CalibError> {
    let expected = match axis {
        BiasAxis::Gen => agg.gen_len,
        BiasAxis::Ctx => agg.ctx_len,
    };
    if bias.len() != expected {
        return Err(CalibError::LengthMismatch {
            expected,
            found: bias.len(),
        });
    }
    if let Some((index, &value)) = bias.iter().enumerate().find(|(_, b)| !(**b >= BIAS_FLOOR)) {
        return Err(CalibError::BiasBelowFloor { index, value });
    }
    let s = agg.ctx_len;
    let values = agg
        .values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let b = match axis {
                BiasAxis::Gen => bias[k / s],
                BiasAxis::Ctx => bias[k % s],
            };
            v / b
        })
        .collect();
    Ok(CalibratedMatrix::from_vec(agg.gen_len, agg.ctx_len, values))
}

/// Aggregate then debias with a curve sized for `axis`.
pub fn calibrate(
    tensor: &AttentionTensor,
    top_layers: usize,
    params: &BiasParams,
    axis: BiasAxis,
) -> Result<CalibratedMatrix, CalibError> {
    let agg = aggregate(tensor, top_layers)?;
    let len = match axis {
        BiasAxis::Gen => agg.gen_len,
        BiasAxis::Ctx => agg.ctx_len,
    };
    debias(&agg, &bias_curve(len, params), axis)
}

/// `C_i = sum over visual columns j of calibrated[i, j]`.
pub fn connectivity(calibrated: &CalibratedMatrix, visual: &BTreeSet<usize>) -> Result<ConnectivityVector, CalibError> {
    if visual.is_empty() {
        return Err(CalibError::EmptyVisualSet);
    }
    if let Some(&index) = visual.iter().next_back().filter(|&&j| j >= calibrated.ctx_len) {
        return Err(CalibError::IndexOutOfRange {
            index,
            len: calibrated.ctx_len,
        });
    }
    let c = calibrated
        .rows()
        .map(|row| visual.iter().map(|&j| row[j]).sum())
        .collect();
    Ok(ConnectivityVector(c))
}
