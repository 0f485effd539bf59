//! Uniform affine fake quantization.
//!
//! `Q(x) = (clamp(round(x / S) + z, q_min, q_max) - z) * S`, evaluated in
//! `f64` with round-half-away-from-zero. Scales and zero points are computed
//! per tensor, per column ("channel") or per row ("token").

use serde::{Deserialize, Serialize};

use crate::error::{Result, SplitqError};
use crate::tensor::Matrix;

/// Bit floor applied to outlier paths and low-rank branch factors.
pub const AUX_BITS_FLOOR: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Integer grid with the given bit width, 2..=16.
    Int(u8),
    /// Pass-through quantizer (infinite bit width). Used as a test mode in
    /// which every cancellation identity of the layer holds exactly.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One group per column.
    PerChannel,
    /// One group per row.
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub precision: Precision,
    pub symmetric: bool,
    pub granularity: Granularity,
}

impl QuantSpec {
    pub fn new(bits: u8, symmetric: bool, granularity: Granularity) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(SplitqError::config(format!(
                "bit width {bits} outside [2, 16]"
            )));
        }
        Ok(Self {
            precision: Precision::Int(bits),
            symmetric,
            granularity,
        })
    }

    /// Default activation quantizer: asymmetric, one group per token.
    pub fn activation(bits: u8) -> Result<Self> {
        Self::new(bits, false, Granularity::PerToken)
    }

    /// Default weight quantizer: symmetric, one group per output channel.
    pub fn weight(bits: u8) -> Result<Self> {
        Self::new(bits, true, Granularity::PerChannel)
    }

    pub fn identity(granularity: Granularity) -> Self {
        Self {
            precision: Precision::Full,
            symmetric: true,
            granularity,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.precision == Precision::Full
    }

    pub fn bits(&self) -> Option<u8> {
        match self.precision {
            Precision::Int(b) => Some(b),
            Precision::Full => None,
        }
    }

    /// Same spec with at least `floor` bits.
    pub fn with_floor(self, floor: u8) -> Self {
        match self.precision {
            Precision::Int(b) if b < floor => Self {
                precision: Precision::Int(floor),
                ..self
            },
            _ => self,
        }
    }

    /// Integer range `[q_min, q_max]`. Symmetric specs use the restricted
    /// range `[-2^(b-1) + 1, 2^(b-1) - 1]`.
    pub fn range(&self) -> (f64, f64) {
        match self.precision {
            Precision::Int(b) => {
                if self.symmetric {
                    let h = (1i64 << (b - 1)) - 1;
                    (-h as f64, h as f64)
                } else {
                    (0.0, ((1i64 << b) - 1) as f64)
                }
            }
            Precision::Full => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Precision::Int(b) = self.precision {
            if !(2..=16).contains(&b) {
                return Err(SplitqError::config(format!(
                    "bit width {b} outside [2, 16]"
                )));
            }
        }
        Ok(())
    }
}

/// Scale and zero point for every quantization group.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    granularity: Granularity,
    scales: Vec<f64>,
    zero_points: Vec<i64>,
}

impl QuantParams {
    pub fn new(granularity: Granularity, scales: Vec<f64>, zero_points: Vec<i64>) -> Result<Self> {
        if scales.len() != zero_points.len() {
            return Err(SplitqError::dims("scale and zero-point counts differ"));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(SplitqError::config(format!("non-positive scale {s}")));
        }
        Ok(Self {
            granularity,
            scales,
            zero_points,
        })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i64] {
        &self.zero_points
    }

    pub fn max_scale(&self) -> f64 {
        self.scales.iter().copied().fold(0.0, f64::max)
    }
}

fn group_count(m: &Matrix, g: Granularity) -> usize {
    match g {
        Granularity::PerTensor => 1,
        Granularity::PerChannel => m.cols(),
        Granularity::PerToken => m.rows(),
    }
}

#[inline]
fn group_of(g: Granularity, cols: usize, flat: usize) -> usize {
    match g {
        Granularity::PerTensor => 0,
        Granularity::PerChannel => flat % cols,
        Granularity::PerToken => flat / cols,
    }
}

fn params_for_group(lo: f64, hi: f64, spec: &QuantSpec) -> (f64, i64) {
    let (q_min, q_max) = spec.range();
    if spec.is_identity() || lo > hi {
        return (1.0, 0);
    }
    if lo == hi {
        // Constant group: pick the grid so the constant itself is a grid point.
        let c = lo;
        if c == 0.0 {
            return (1.0, 0);
        }
        let z = if !spec.symmetric && c < 0.0 { 1 } else { 0 };
        return (c.abs(), z);
    }
    let (scale, zero) = if spec.symmetric {
        (lo.abs().max(hi.abs()) / q_max, 0)
    } else {
        // The grid always contains zero, which keeps z inside [q_min, q_max].
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        let s = (hi - lo) / (q_max - q_min);
        let z = (-lo / s).round().clamp(q_min, q_max) as i64;
        (s, z)
    };
    if scale > 0.0 && scale.is_finite() {
        (scale, zero)
    } else {
        (1.0, 0)
    }
}

/// Scale and zero point for each group of `m`.
///
/// Asymmetric groups use `S = (max - min) / (q_max - q_min)` over a range
/// widened to include zero and `z = round(-min / S)`; symmetric groups use
/// `S = max|x| / q_max`, `z = 0`. A constant group `c` gets `S = |c|` (or
/// `S = 1` when `c = 0`) so the constant reconstructs exactly.
pub fn compute_params(m: &Matrix, spec: &QuantSpec) -> QuantParams {
    let g = spec.granularity;
    let n = group_count(m, g);
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for (flat, &v) in m.as_slice().iter().enumerate() {
        let k = group_of(g, m.cols(), flat);
        lo[k] = lo[k].min(v);
        hi[k] = hi[k].max(v);
    }
    let (scales, zero_points) = lo
        .iter()
        .zip(&hi)
        .map(|(&l, &h)| params_for_group(l, h, spec))
        .unzip();
    QuantParams {
        granularity: g,
        scales,
        zero_points,
    }
}

fn check_params(m: &Matrix, params: &QuantParams, spec: &QuantSpec) -> Result<()> {
    if params.granularity != spec.granularity {
        return Err(SplitqError::dims(format!(
            "params computed {:?}, spec is {:?}",
            params.granularity, spec.granularity
        )));
    }
    let n = group_count(m, spec.granularity);
    if params.scales.len() != n {
        return Err(SplitqError::dims(format!(
            "{} quantization groups for a tensor with {n}",
            params.scales.len()
        )));
    }
    Ok(())
}

/// Quantize-dequantize round trip, also returning the straight-through mask:
/// 1 where `round(x / S) + z` fell inside the clamp range, 0 where clipped.
pub fn fake_quantize_masked(
    m: &Matrix,
    params: &QuantParams,
    spec: &QuantSpec,
) -> Result<(Matrix, Matrix)> {
    check_params(m, params, spec)?;
    let mut mask = Matrix::zeros(m.rows(), m.cols());
    if spec.is_identity() {
        mask.as_mut_slice().fill(1.0);
        return Ok((m.clone(), mask));
    }
    let (q_min, q_max) = spec.range();
    let mut out = m.clone();
    let cols = m.cols();
    for (flat, (v, keep)) in out
        .as_mut_slice()
        .iter_mut()
        .zip(mask.as_mut_slice())
        .enumerate()
    {
        let k = group_of(spec.granularity, cols, flat);
        let s = params.scales[k];
        let z = params.zero_points[k] as f64;
        let q = (*v / s).round() + z;
        if (q_min..=q_max).contains(&q) {
            *keep = 1.0;
        }
        *v = (q.clamp(q_min, q_max) - z) * s;
    }
    Ok((out, mask))
}

pub fn fake_quantize(m: &Matrix, params: &QuantParams, spec: &QuantSpec) -> Result<Matrix> {
    fake_quantize_masked(m, params, spec).map(|(q, _)| q)
}

/// `Δ(M) = M - Q(M)`.
pub fn quant_error(m: &Matrix, params: &QuantParams, spec: &QuantSpec) -> Result<Matrix> {
    m.sub(&fake_quantize(m, params, spec)?)
}

/// Computes fresh parameters for `m` and applies them.
pub fn quantize(m: &Matrix, spec: &QuantSpec) -> Matrix {
    let params = compute_params(m, spec);
    fake_quantize(m, &params, spec).expect("parameters computed for this tensor")
}

pub(crate) fn quantize_masked(m: &Matrix, spec: &QuantSpec) -> (Matrix, Matrix) {
    let params = compute_params(m, spec);
    fake_quantize_masked(m, &params, spec).expect("parameters computed for this tensor")
}
