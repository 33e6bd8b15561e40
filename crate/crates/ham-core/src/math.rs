//! Dense f64 primitives shared by every other module.
//!
//! Vectors are plain slices. Matrices are row-major [`Matrix`] values and
//! projections are applied as row vectors: `y = x · W`, so a weight that maps
//! `d_in -> d_out` has shape `d_in × d_out`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, HamError, Result};

pub const RMS_NORM_EPS: f64 = 1e-6;
pub const COSINE_EPS: f64 = 1e-8;
pub const ROPE_BASE: f64 = 500_000.0;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `x · self`, where `x` has length `rows`.
    pub fn left_mul(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("left_mul", self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
        Ok(out)
    }

    /// `self · y`, where `y` has length `cols`.
    pub fn right_mul(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("right_mul", self.cols, y.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), y)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(z: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * z * (1.0 + (C * (z + 0.044_715 * z * z * z)).tanh())
}

/// Inverse of [`sigmoid`].
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let n = norm(x);
    if n == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|v| v / n).collect()
}

/// `gain_i · x_i / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_len("rms_norm gain", x.len(), gain.len())?;
    if x.is_empty() {
        return Err(HamError::Empty("rms_norm input"));
    }
    let ms = dot(x, x) / x.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        // x is all zeros and eps = 0
        return Ok(vec![0.0; x.len()]);
    }
    Ok(x.iter().zip(gain).map(|(v, g)| g * v / denom).collect())
}

/// RMSNorm followed by a SiLU output gate.
pub fn gated_rms_norm(x: &[f64], gain: &[f64], gate_pre: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_len("gated_rms_norm gate", x.len(), gate_pre.len())?;
    let mut out = rms_norm(x, gain, eps)?;
    for (o, &g) in out.iter_mut().zip(gate_pre) {
        *o *= silu(g);
    }
    Ok(out)
}

/// `1 − ⟨a,b⟩ / (‖a‖‖b‖ + eps)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let d = 1.0 - dot(a, b) / (norm(a) * norm(b) + eps);
    d.clamp(0.0, 2.0)
}

/// Rotary embedding. Dimension pairs `(2i, 2i+1)` rotate by
/// `position · base^(−2i/len)`.
pub fn rope_apply(x: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    if x.len() % 2 != 0 {
        return Err(HamError::Dimension {
            context: "rope (length must be even)",
            expected: x.len() + 1,
            got: x.len(),
        });
    }
    let len = x.len() as f64;
    let pos = position as f64;
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() / 2 {
        let freq = base.powf(-((2 * i) as f64) / len);
        let (s, c) = (pos * freq).sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        out[2 * i] = a * c - b * s;
        out[2 * i + 1] = a * s + b * c;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    #[default]
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::None => z,
            Activation::Silu => silu(z),
        }
    }
}

/// Causal depthwise 1-D convolution with zero left-padding.
///
/// `kernel` is `channels × width`; tap `width − 1` multiplies the current
/// step, tap 0 the step `width − 1` positions back.
pub fn causal_depthwise_conv(
    seq: &[Vec<f64>],
    kernel: &Matrix,
    activation: Activation,
) -> Result<Vec<Vec<f64>>> {
    let channels = kernel.rows();
    let width = kernel.cols();
    if width == 0 {
        return Err(HamError::Config("convolution width must be ≥ 1".into()));
    }
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        check_len("conv channels", channels, seq[t].len())?;
        let mut row = vec![0.0; channels];
        for (c, o) in row.iter_mut().enumerate() {
            let taps = kernel.row(c);
            let mut acc = 0.0;
            for (j, &w) in taps.iter().enumerate() {
                // source index t − width + 1 + j
                if let Some(src) = (t + j + 1).checked_sub(width) {
                    acc += w * seq[src][c];
                }
            }
            *o = activation.apply(acc);
        }
        out.push(row);
    }
    Ok(out)
}
