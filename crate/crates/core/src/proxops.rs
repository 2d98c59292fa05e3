//! The quantization regularizer `R(x, c) = 1/2 sum_i min_j |x_i - c_j|` and
//! its two proximal maps.
//!
//! The x-prox is exact: soft thresholding toward the nearest center. The
//! c-prox is the first-order surrogate around the previous centers, using
//! the assignments of the freshly updated weights to those centers.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, QupelError, Result};
use crate::quantizer::{assignments, CenterVector};

/// Step size and regularization weight for one prox call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxParams {
    pub eta: f64,
    pub lambda: f64,
}

impl ProxParams {
    pub fn new(eta: f64, lambda: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(QupelError::config("eta", format!("must be > 0, got {eta}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(QupelError::config("lambda", format!("must be >= 0, got {lambda}")));
        }
        Ok(ProxParams { eta, lambda })
    }

    /// Soft-threshold width `lambda * eta / 2`.
    pub fn threshold(&self) -> f64 {
        0.5 * self.lambda * self.eta
    }
}

/// Direction of the regularizer pull inside the center prox.
///
/// `TowardMedian` is the subgradient-consistent surrogate: a center moves up
/// when more of its assigned weights lie above it than below. `AwayFromMedian`
/// applies the opposite sign (`mu_j - (lambda eta / 2)(A_j - B_j)`) for
/// side-by-side comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterPull {
    #[default]
    TowardMedian,
    AwayFromMedian,
}

pub fn regularizer(x: &[f64], c: &CenterVector) -> Result<f64> {
    ensure_finite(x, "x")?;
    let values = c.values();
    let mut acc = 0.0;
    for &xi in x {
        acc += (xi - values[c.nearest(xi)]).abs();
    }
    Ok(0.5 * acc)
}

#[inline]
pub(crate) fn soft_threshold_to(y: f64, q: f64, t: f64) -> f64 {
    if y >= q + t {
        y - t
    } else if y <= q - t {
        y + t
    } else {
        q
    }
}

/// `argmin_x (1/2 eta) |x - y|^2 + lambda R(x, c)`: each coordinate is soft
/// thresholded toward its nearest center by `lambda eta / 2`.
pub fn prox_x(y: &[f64], c: &CenterVector, p: ProxParams) -> Result<Vec<f64>> {
    ensure_finite(y, "y")?;
    if p.lambda == 0.0 {
        return Ok(y.to_vec());
    }
    let t = p.threshold();
    let values = c.values();
    Ok(y.iter()
        .map(|&yi| soft_threshold_to(yi, values[c.nearest(yi)], t))
        .collect())
}

/// Result of a center prox: the sorted, clipped centers and whether the
/// update permuted their order.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterUpdate {
    pub centers: CenterVector,
    pub reordered: bool,
}

/// Per-center counts `(A_j, B_j)` of assigned weights strictly above and
/// strictly below `c_prev_j`.
pub fn side_counts(x_new: &[f64], c_prev: &CenterVector) -> Result<Vec<(usize, usize)>> {
    let assigned = assignments(x_new, c_prev)?;
    let values = c_prev.values();
    let mut counts = vec![(0usize, 0usize); c_prev.len()];
    for (&j, &xi) in assigned.iter().zip(x_new) {
        if xi > values[j] {
            counts[j].0 += 1;
        } else if xi < values[j] {
            counts[j].1 += 1;
        }
    }
    Ok(counts)
}

/// Linearized center prox evaluated at the gradient-step point `mu`.
pub fn prox_c(
    mu: &[f64],
    x_new: &[f64],
    c_prev: &CenterVector,
    p: ProxParams,
    pull: CenterPull,
    c_max: f64,
) -> Result<CenterUpdate> {
    ensure_dim("center step", c_prev.len(), mu.len())?;
    ensure_finite(mu, "mu")?;
    let t = p.threshold();
    let mut raw = mu.to_vec();
    if t > 0.0 {
        let counts = side_counts(x_new, c_prev)?;
        for (cj, &(above, below)) in raw.iter_mut().zip(&counts) {
            let net = above as f64 - below as f64;
            match pull {
                CenterPull::TowardMedian => *cj += t * net,
                CenterPull::AwayFromMedian => *cj -= t * net,
            }
        }
    }
    settle_centers(raw, c_max)
}

/// Clip to `[-c_max, c_max]`, sort, and separate collisions so the result is
/// strictly ascending. Warns when sorting changed the order.
pub fn settle_centers(mut raw: Vec<f64>, c_max: f64) -> Result<CenterUpdate> {
    ensure_finite(&raw, "centers")?;
    for v in raw.iter_mut() {
        *v = v.clamp(-c_max, c_max);
    }
    let reordered = raw.windows(2).any(|w| w[0] > w[1]);
    if reordered {
        warn!("center update crossed neighbouring centers; keeping sorted order");
        raw.sort_by(f64::total_cmp);
    }
    separate(&mut raw, c_max);
    Ok(CenterUpdate {
        centers: CenterVector::with_bound(raw, c_max)?,
        reordered,
    })
}

fn separate(values: &mut [f64], c_max: f64) {
    let gap = |v: f64| 1e-9 * v.abs().max(1.0);
    for j in 1..values.len() {
        if values[j] <= values[j - 1] {
            values[j] = values[j - 1] + gap(values[j - 1]);
        }
    }
    let m = values.len();
    if m > 0 && values[m - 1] > c_max {
        values[m - 1] = c_max;
        for j in (0..m - 1).rev() {
            if values[j] >= values[j + 1] {
                values[j] = values[j + 1] - gap(values[j + 1]);
            }
        }
    }
}

/// Exact center-prox objective `(1/2 eta)|c - mu|^2 + (lambda/2)|Q_c(x) - x|_1`,
/// reported for monitoring the quality of the linearized update.
pub fn prox_c_objective(c: &CenterVector, mu: &[f64], x: &[f64], p: ProxParams) -> Result<f64> {
    ensure_dim("center step", c.len(), mu.len())?;
    let dist: f64 = c
        .values()
        .iter()
        .zip(mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(dist / (2.0 * p.eta) + p.lambda * regularizer(x, c)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv(v: &[f64]) -> CenterVector {
        CenterVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(regularizer(&[0.0, 1.0, 1.0], &cv(&[0.0, 1.0])).unwrap(), 0.0);
        let r = regularizer(&[0.2, 0.9], &cv(&[0.0, 1.0])).unwrap();
        assert!((r - 0.15).abs() < 1e-15);
        assert_eq!(regularizer(&[5.0], &cv(&[0.0, 1.0])).unwrap(), 2.0);
    }

    #[test]
    fn prox_x_examples() {
        let c = cv(&[0.0, 1.0]);
        let y = [0.3, -2.0, 0.77];
        assert_eq!(prox_x(&y, &c, ProxParams::new(0.5, 0.0).unwrap()).unwrap(), y.to_vec());
        let out = prox_x(&[0.3], &c, ProxParams::new(1.0, 0.2).unwrap()).unwrap();
        assert!((out[0] - 0.2).abs() < 1e-15);
        let out = prox_x(&[0.05], &cv(&[0.0]), ProxParams::new(1.0, 0.2).unwrap()).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn prox_c_examples() {
        let c_prev = cv(&[0.0, 1.0]);
        let x_new = [0.2, 0.3, 0.9];
        let p = ProxParams::new(1.0, 0.1).unwrap();
        let lit = prox_c(&[0.1, 0.95], &x_new, &c_prev, p, CenterPull::AwayFromMedian, 10.0).unwrap();
        assert!((lit.centers.values()[0] - 0.0).abs() < 1e-15);
        assert!((lit.centers.values()[1] - 1.0).abs() < 1e-15);
        let med = prox_c(&[0.1, 0.95], &x_new, &c_prev, p, CenterPull::TowardMedian, 10.0).unwrap();
        assert!((med.centers.values()[0] - 0.2).abs() < 1e-15);
        assert!((med.centers.values()[1] - 0.9).abs() < 1e-15);

        // Center with nothing assigned keeps mu.
        let out = prox_c(&[0.0, 5.0], &[0.1, 0.2], &cv(&[0.0, 5.0]), p, CenterPull::TowardMedian, 10.0)
            .unwrap();
        assert_eq!(out.centers.values()[1], 5.0);

        let zero = ProxParams::new(1.0, 0.0).unwrap();
        let out = prox_c(&[0.1, 0.95], &x_new, &c_prev, zero, CenterPull::TowardMedian, 10.0).unwrap();
        assert_eq!(out.centers.values(), &[0.1, 0.95]);
    }

    #[test]
    fn prox_c_median_fixed_point() {
        let c_prev = cv(&[0.0, 1.0]);
        let p = ProxParams::new(0.3, 0.7).unwrap();
        let out = prox_c(&[0.05, 1.0], &[-0.1, 0.1, 0.0], &c_prev, p, CenterPull::TowardMedian, 10.0)
            .unwrap();
        assert_eq!(out.centers.values()[0], 0.05);
    }

    #[test]
    fn settle_reorders_and_clips() {
        let out = settle_centers(vec![0.5, 0.2, 30.0], 10.0).unwrap();
        assert!(out.reordered);
        assert_eq!(out.centers.values(), &[0.2, 0.5, 10.0]);
        let out = settle_centers(vec![20.0, 30.0], 10.0).unwrap();
        assert!(out.centers.values()[0] < out.centers.values()[1]);
        assert_eq!(out.centers.values()[1], 10.0);
        assert!(!settle_centers(vec![0.0, 1.0], 10.0).unwrap().reordered);
    }

    #[test]
    fn prox_c_objective_matches_hand_value() {
        let c = cv(&[0.0, 1.0]);
        let p = ProxParams::new(0.5, 0.2).unwrap();
        // |c - mu|^2 = 0.01 + 0.01 ; R = 0.5 * (0.2 + 0.1)
        let v = prox_c_objective(&c, &[0.1, 0.9], &[0.2, 0.9], p).unwrap();
        assert!((v - (0.02 / 1.0 + 0.2 * 0.15)).abs() < 1e-15);
    }
}
