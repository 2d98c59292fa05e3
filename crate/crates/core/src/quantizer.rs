//! Soft (sigmoid staircase) and hard (nearest-center) quantizers.
//!
//! The soft quantizer with sharpness `P` maps each coordinate to
//!
//! ```text
//! Q~(x)_i = c_1 + sum_{j=2..m} (c_j - c_{j-1}) * sigmoid(P * (x_i - (c_j + c_{j-1}) / 2))
//! ```
//!
//! and converges pointwise to the hard quantizer as `P -> inf` away from the
//! midpoints. In the hard-limit mode the x-gradient of the composite loss is
//! taken as zero and the c-gradient is the indicator sum of [`hard_grad_c`].

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, QupelError, Result};

/// Default bound on `|c_j|`.
pub const DEFAULT_C_MAX: f64 = 10.0;

/// Strictly ascending quantization centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CenterVector {
    values: Vec<f64>,
}

impl CenterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::with_bound(values, DEFAULT_C_MAX)
    }

    pub fn with_bound(values: Vec<f64>, c_max: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(QupelError::config("centers", "at least one center is required"));
        }
        ensure_finite(&values, "centers")?;
        for (index, pair) in values.windows(2).enumerate() {
            if pair[0] >= pair[1] {
                return Err(QupelError::UnsortedCenters {
                    index: index + 1,
                    prev: pair[0],
                    next: pair[1],
                });
            }
        }
        if let Some(index) = values.iter().position(|v| v.abs() > c_max) {
            return Err(QupelError::CenterOutOfBounds {
                index,
                value: values[index],
                c_max,
            });
        }
        Ok(CenterVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `c_m - c_1`.
    pub fn span(&self) -> f64 {
        self.values[self.values.len() - 1] - self.values[0]
    }

    /// Bits per parameter, `log2 m`.
    pub fn bits(&self) -> f64 {
        (self.values.len() as f64).log2()
    }

    /// Index of the nearest center; ties go to the lower index (smaller value).
    pub fn nearest(&self, x: f64) -> usize {
        let c = &self.values;
        let upper = c.partition_point(|&v| v < x);
        if upper == 0 {
            0
        } else if upper == c.len() {
            c.len() - 1
        } else if (x - c[upper - 1]) <= (c[upper] - x) {
            upper - 1
        } else {
            upper
        }
    }
}

impl TryFrom<Vec<f64>> for CenterVector {
    type Error = QupelError;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        CenterVector::new(values)
    }
}

impl From<CenterVector> for Vec<f64> {
    fn from(c: CenterVector) -> Vec<f64> {
        c.values
    }
}

/// Soft-quantizer sharpness and hard-limit switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub sharpness: f64,
    #[serde(default)]
    pub hard_limit: bool,
}

impl QuantConfig {
    pub fn soft(sharpness: f64) -> Self {
        QuantConfig {
            sharpness,
            hard_limit: false,
        }
    }

    pub fn hard() -> Self {
        QuantConfig {
            sharpness: 0.0,
            hard_limit: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.hard_limit && !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(QupelError::config(
                "sharpness",
                format!("must be a positive finite number, got {}", self.sharpness),
            ));
        }
        Ok(())
    }

    fn require_soft(&self) -> Result<f64> {
        if self.hard_limit {
            return Err(QupelError::config(
                "hard_limit",
                "soft quantizer evaluated in hard-limit mode",
            ));
        }
        self.validate()?;
        Ok(self.sharpness)
    }
}

/// Logistic sigmoid, evaluated without overflow for any finite argument.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid'(z) = sigmoid(z) * sigmoid(-z)`; keeps full relative precision in the tails.
#[inline]
pub fn sigmoid_prime(z: f64) -> f64 {
    sigmoid(z) * sigmoid(-z)
}

#[inline]
fn soft_scalar(x: f64, c: &[f64], p: f64) -> f64 {
    let mut acc = 0.0;
    for j in 1..c.len() {
        let mid = 0.5 * (c[j] + c[j - 1]);
        acc += (c[j] - c[j - 1]) * sigmoid(p * (x - mid));
    }
    acc + c[0]
}

#[inline]
fn soft_scalar_dx(x: f64, c: &[f64], p: f64) -> f64 {
    let mut acc = 0.0;
    for j in 1..c.len() {
        let mid = 0.5 * (c[j] + c[j - 1]);
        acc += (c[j] - c[j - 1]) * sigmoid_prime(p * (x - mid));
    }
    p * acc
}

/// Writes `dQ~(x)/dc_k` for `k = 0..m` into `out`.
#[inline]
fn soft_scalar_dc(x: f64, c: &[f64], p: f64, out: &mut [f64]) {
    let m = c.len();
    out[0] = 1.0;
    for slot in out.iter_mut().skip(1) {
        *slot = 0.0;
    }
    // Term j couples (c_{j-1}, c_j): w * sigmoid(s) with w = c_j - c_{j-1},
    // s = P (x - (c_j + c_{j-1}) / 2).
    for j in 1..m {
        let w = c[j] - c[j - 1];
        let s = p * (x - 0.5 * (c[j] + c[j - 1]));
        let sig = sigmoid(s);
        let slope = 0.5 * p * w * sigmoid_prime(s);
        out[j] += sig - slope;
        out[j - 1] += -sig - slope;
    }
}

pub fn soft_quantize(x: &[f64], c: &CenterVector, cfg: QuantConfig) -> Result<Vec<f64>> {
    let p = cfg.require_soft()?;
    ensure_finite(x, "x")?;
    Ok(x.iter().map(|&xi| soft_scalar(xi, &c.values, p)).collect())
}

pub fn hard_quantize(x: &[f64], c: &CenterVector) -> Result<Vec<f64>> {
    ensure_finite(x, "x")?;
    Ok(x.iter().map(|&xi| c.values[c.nearest(xi)]).collect())
}

/// Nearest-center index per coordinate, with the lower-index tie-break.
pub fn assignments(x: &[f64], c: &CenterVector) -> Result<Vec<usize>> {
    ensure_finite(x, "x")?;
    Ok(x.iter().map(|&xi| c.nearest(xi)).collect())
}

/// Diagonal of the x-Jacobian of the soft quantizer (off-diagonal entries are zero).
pub fn grad_soft_quantize_x(x: &[f64], c: &CenterVector, cfg: QuantConfig) -> Result<Vec<f64>> {
    let p = cfg.require_soft()?;
    ensure_finite(x, "x")?;
    Ok(x.iter().map(|&xi| soft_scalar_dx(xi, &c.values, p)).collect())
}

/// Full c-Jacobian: `jac[j][i] = dQ~(x)_i / dc_j`, shape `m x d`.
pub fn grad_soft_quantize_c(
    x: &[f64],
    c: &CenterVector,
    cfg: QuantConfig,
) -> Result<Vec<Vec<f64>>> {
    let p = cfg.require_soft()?;
    ensure_finite(x, "x")?;
    let m = c.len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    let mut col = vec![0.0; m];
    for (i, &xi) in x.iter().enumerate() {
        soft_scalar_dc(xi, &c.values, p, &mut col);
        for (row, &v) in jac.iter_mut().zip(&col) {
            row[i] = v;
        }
    }
    Ok(jac)
}

/// `J_x^T u` for the soft quantizer: elementwise product of the diagonal and `upstream`.
pub fn soft_vjp_x(
    x: &[f64],
    c: &CenterVector,
    cfg: QuantConfig,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    ensure_dim("upstream gradient", x.len(), upstream.len())?;
    let p = cfg.require_soft()?;
    Ok(x
        .iter()
        .zip(upstream)
        .map(|(&xi, &u)| soft_scalar_dx(xi, &c.values, p) * u)
        .collect())
}

/// `J_c u` for the soft quantizer, accumulated in coordinate order.
pub fn soft_vjp_c(
    x: &[f64],
    c: &CenterVector,
    cfg: QuantConfig,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    ensure_dim("upstream gradient", x.len(), upstream.len())?;
    let p = cfg.require_soft()?;
    let m = c.len();
    let mut out = vec![0.0; m];
    let mut col = vec![0.0; m];
    for (&xi, &u) in x.iter().zip(upstream) {
        soft_scalar_dc(xi, &c.values, p, &mut col);
        for (o, &v) in out.iter_mut().zip(&col) {
            *o += v * u;
        }
    }
    Ok(out)
}

/// c-gradient of `f(Q_c(x))` in the hard limit: component `j` sums `upstream`
/// over the coordinates assigned to center `j`.
pub fn hard_grad_c(assigned: &[usize], upstream: &[f64], m: usize) -> Result<Vec<f64>> {
    ensure_dim("upstream gradient", assigned.len(), upstream.len())?;
    let mut out = vec![0.0; m];
    for (&j, &u) in assigned.iter().zip(upstream) {
        if j >= m {
            return Err(QupelError::DimensionMismatch {
                what: "center assignment",
                expected: m,
                got: j + 1,
            });
        }
        out[j] += u;
    }
    Ok(out)
}
