//! Layer-wise quantization: one center vector per quantized parameter group.
//! Coordinates outside every group pass through unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, QupelError, Result};
use crate::losses::ParamLayout;
use crate::proxops::{self, CenterPull, ProxParams};
use crate::quantizer::{self, CenterVector, QuantConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub group: String,
    pub start: usize,
    pub len: usize,
    pub centers: CenterVector,
}

impl CodebookEntry {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    dim: usize,
    entries: Vec<CodebookEntry>,
}

impl Codebook {
    /// One center vector shared by every coordinate.
    pub fn single(dim: usize, centers: CenterVector) -> Self {
        Codebook {
            dim,
            entries: vec![CodebookEntry {
                group: "params".into(),
                start: 0,
                len: dim,
                centers,
            }],
        }
    }

    pub fn new(dim: usize, entries: Vec<CodebookEntry>) -> Result<Self> {
        let mut end = 0;
        for e in &entries {
            if e.start < end || e.start + e.len > dim {
                return Err(QupelError::config(
                    "centers",
                    format!("group `{}` overlaps another group or exceeds dimension {dim}", e.group),
                ));
            }
            end = e.start + e.len;
        }
        Ok(Codebook { dim, entries })
    }

    /// One entry per quantized group of `layout`, in layout order.
    pub fn from_layout(layout: &ParamLayout, centers: Vec<CenterVector>) -> Result<Self> {
        let groups: Vec<_> = layout.groups().iter().filter(|g| g.quantized).collect();
        ensure_dim("center vectors", groups.len(), centers.len())?;
        let entries = groups
            .into_iter()
            .zip(centers)
            .map(|(g, c)| CodebookEntry {
                group: g.name.clone(),
                start: g.start,
                len: g.len,
                centers: c,
            })
            .collect();
        Self::new(layout.dim(), entries)
    }

    /// `m` centers per quantized group at the empirical quantiles
    /// `(j + 1/2) / m` of the group's entries in `x`.
    pub fn init_quantiles(layout: &ParamLayout, x: &[f64], m: usize, c_max: f64) -> Result<Self> {
        ensure_dim("x", layout.dim(), x.len())?;
        ensure_finite(x, "x")?;
        if m == 0 {
            return Err(QupelError::config("m", "at least one center is required"));
        }
        let mut centers = Vec::new();
        for g in layout.groups().iter().filter(|g| g.quantized) {
            centers.push(quantile_centers(&x[g.range()], m, c_max)?);
        }
        Self::from_layout(layout, centers)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[CodebookEntry] {
        &self.entries
    }

    pub fn center_values(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.centers.values().to_vec()).collect()
    }

    /// Same groups with replaced centers.
    pub fn with_centers(&self, centers: Vec<CenterVector>) -> Result<Self> {
        ensure_dim("center vectors", self.entries.len(), centers.len())?;
        let entries = self
            .entries
            .iter()
            .zip(centers)
            .map(|(e, c)| CodebookEntry {
                centers: c,
                ..e.clone()
            })
            .collect();
        Ok(Codebook {
            dim: self.dim,
            entries,
        })
    }

    pub fn quantized_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.dim];
        for e in &self.entries {
            mask[e.range()].iter_mut().for_each(|b| *b = true);
        }
        mask
    }

    /// Total number of centers across groups.
    pub fn num_centers(&self) -> usize {
        self.entries.iter().map(|e| e.centers.len()).sum()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        ensure_dim("parameter vector", self.dim, x.len())?;
        ensure_finite(x, "x")
    }

    /// Soft quantization, or hard quantization in hard-limit mode.
    pub fn quantize(&self, x: &[f64], cfg: QuantConfig) -> Result<Vec<f64>> {
        if cfg.hard_limit {
            return self.hard_quantize(x);
        }
        self.check(x)?;
        let mut out = x.to_vec();
        for e in &self.entries {
            let q = quantizer::soft_quantize(&x[e.range()], &e.centers, cfg)?;
            out[e.range()].copy_from_slice(&q);
        }
        Ok(out)
    }

    pub fn hard_quantize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut out = x.to_vec();
        for e in &self.entries {
            let q = quantizer::hard_quantize(&x[e.range()], &e.centers)?;
            out[e.range()].copy_from_slice(&q);
        }
        Ok(out)
    }

    pub fn assignments(&self, x: &[f64]) -> Result<Vec<Vec<usize>>> {
        self.check(x)?;
        self.entries
            .iter()
            .map(|e| quantizer::assignments(&x[e.range()], &e.centers))
            .collect()
    }

    /// `J_x^T upstream`. Pass-through coordinates have unit Jacobian;
    /// quantized coordinates have zero Jacobian in hard-limit mode.
    pub fn vjp_x(&self, x: &[f64], cfg: QuantConfig, upstream: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        ensure_dim("upstream gradient", self.dim, upstream.len())?;
        let mut out = upstream.to_vec();
        for e in &self.entries {
            if cfg.hard_limit {
                out[e.range()].iter_mut().for_each(|v| *v = 0.0);
            } else {
                let v = quantizer::soft_vjp_x(&x[e.range()], &e.centers, cfg, &upstream[e.range()])?;
                out[e.range()].copy_from_slice(&v);
            }
        }
        Ok(out)
    }

    /// `J_c upstream` per group.
    pub fn vjp_c(&self, x: &[f64], cfg: QuantConfig, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check(x)?;
        ensure_dim("upstream gradient", self.dim, upstream.len())?;
        self.entries
            .iter()
            .map(|e| {
                let xs = &x[e.range()];
                let us = &upstream[e.range()];
                if cfg.hard_limit {
                    let a = quantizer::assignments(xs, &e.centers)?;
                    quantizer::hard_grad_c(&a, us, e.centers.len())
                } else {
                    quantizer::soft_vjp_c(xs, &e.centers, cfg, us)
                }
            })
            .collect()
    }

    /// Hard-limit center gradient for fixed assignments.
    pub fn hard_grad_c_fixed(&self, assigned: &[Vec<usize>], upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
        ensure_dim("assignment groups", self.entries.len(), assigned.len())?;
        ensure_dim("upstream gradient", self.dim, upstream.len())?;
        self.entries
            .iter()
            .zip(assigned)
            .map(|(e, a)| quantizer::hard_grad_c(a, &upstream[e.range()], e.centers.len()))
            .collect()
    }

    pub fn regularizer(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let mut acc = 0.0;
        for e in &self.entries {
            acc += proxops::regularizer(&x[e.range()], &e.centers)?;
        }
        Ok(acc)
    }

    /// Soft thresholding toward the group's centers; pass-through
    /// coordinates are unregularized and returned unchanged.
    pub fn prox_x(&self, y: &[f64], p: ProxParams) -> Result<Vec<f64>> {
        self.check(y)?;
        let mut out = y.to_vec();
        for e in &self.entries {
            let v = proxops::prox_x(&y[e.range()], &e.centers, p)?;
            out[e.range()].copy_from_slice(&v);
        }
        Ok(out)
    }

    /// Center prox per group. Returns the new codebook and whether any group
    /// had its centers reordered.
    pub fn prox_c(
        &self,
        mu: &[Vec<f64>],
        x_new: &[f64],
        p: ProxParams,
        pull: CenterPull,
        c_max: f64,
    ) -> Result<(Codebook, bool)> {
        self.check(x_new)?;
        ensure_dim("center steps", self.entries.len(), mu.len())?;
        let mut reordered = false;
        let mut centers = Vec::with_capacity(self.entries.len());
        for (e, m) in self.entries.iter().zip(mu) {
            let upd = proxops::prox_c(m, &x_new[e.range()], &e.centers, p, pull, c_max)?;
            reordered |= upd.reordered;
            centers.push(upd.centers);
        }
        Ok((self.with_centers(centers)?, reordered))
    }

    /// Clip, sort and separate raw center proposals per group.
    pub fn settle(&self, raw: Vec<Vec<f64>>, c_max: f64) -> Result<(Codebook, bool)> {
        ensure_dim("center steps", self.entries.len(), raw.len())?;
        let mut reordered = false;
        let mut centers = Vec::with_capacity(raw.len());
        for r in raw {
            let upd = proxops::settle_centers(r, c_max)?;
            reordered |= upd.reordered;
            centers.push(upd.centers);
        }
        Ok((self.with_centers(centers)?, reordered))
    }

    /// `|x - Q_c(x)|_1` over quantized coordinates.
    pub fn quant_error(&self, x: &[f64]) -> Result<f64> {
        Ok(2.0 * self.regularizer(x)?)
    }

    /// Subgradient of `R` in `x`: `1/2 sign(x_i - Q(x)_i)`, zero on centers
    /// and on pass-through coordinates.
    pub fn subgrad_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        let q = self.hard_quantize(x)?;
        let mask = self.quantized_mask();
        Ok(x.iter()
            .zip(&q)
            .zip(&mask)
            .map(|((&xi, &qi), &m)| if m { 0.5 * sign(xi - qi) } else { 0.0 })
            .collect())
    }

    /// Subgradient of `R` in `c`: `1/2 (B_j - A_j)` per center.
    pub fn subgrad_c(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check(x)?;
        self.entries
            .iter()
            .map(|e| {
                let counts = proxops::side_counts(&x[e.range()], &e.centers)?;
                Ok(counts
                    .into_iter()
                    .map(|(above, below)| 0.5 * (below as f64 - above as f64))
                    .collect())
            })
            .collect()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `m` linearly interpolated quantiles at `(j + 1/2) / m`, separated when
/// ties would make them non-increasing.
pub fn quantile_centers(values: &[f64], m: usize, c_max: f64) -> Result<CenterVector> {
    if values.is_empty() {
        return Err(QupelError::EmptyDataset("cannot place centers on an empty group".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let raw = (0..m)
        .map(|j| {
            let pos = (j as f64 + 0.5) / m as f64 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        })
        .collect();
    Ok(proxops::settle_centers(raw, c_max)?.centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ParamGroup;

    fn two_group_layout() -> ParamLayout {
        ParamLayout::new(
            5,
            vec![
                ParamGroup { name: "a".into(), start: 0, len: 3, quantized: true },
                ParamGroup { name: "b".into(), start: 3, len: 2, quantized: false },
            ],
        )
        .unwrap()
    }

    #[test]
    fn passthrough_coordinates_untouched() {
        let layout = two_group_layout();
        let cb = Codebook::from_layout(&layout, vec![CenterVector::new(vec![0.0, 1.0]).unwrap()]).unwrap();
        let x = [0.2, 0.8, 0.4, 3.5, -7.0];
        assert_eq!(cb.hard_quantize(&x).unwrap(), vec![0.0, 1.0, 0.0, 3.5, -7.0]);
        assert!((cb.regularizer(&x).unwrap() - 0.5 * (0.2 + 0.2 + 0.4)).abs() < 1e-15);
        let up = [1.0, 2.0, 3.0, 4.0, 5.0];
        let vx = cb.vjp_x(&x, QuantConfig::hard(), &up).unwrap();
        assert_eq!(vx, vec![0.0, 0.0, 0.0, 4.0, 5.0]);
        let vc = cb.vjp_c(&x, QuantConfig::hard(), &up).unwrap();
        assert_eq!(vc, vec![vec![4.0, 2.0]]);
        assert_eq!(cb.quantized_mask(), vec![true, true, true, false, false]);
        let px = cb.prox_x(&x, ProxParams::new(1.0, 10.0).unwrap()).unwrap();
        assert_eq!(px, vec![0.0, 1.0, 0.0, 3.5, -7.0]);
    }

    #[test]
    fn quantile_init_is_sorted_and_inside_range() {
        let c = quantile_centers(&[0.0, 1.0, 2.0, 3.0, 4.0], 2, 10.0).unwrap();
        assert_eq!(c.values(), &[1.0, 3.0]);
        let tied = quantile_centers(&[0.5; 4], 3, 10.0).unwrap();
        assert!(tied.values().windows(2).all(|w| w[0] < w[1]));
        assert!(quantile_centers(&[], 2, 10.0).is_err());
    }

    #[test]
    fn subgradients() {
        let cb = Codebook::single(3, CenterVector::new(vec![0.0, 1.0]).unwrap());
        let x = [0.2, 0.0, 0.9];
        assert_eq!(cb.subgrad_x(&x).unwrap(), vec![0.5, 0.0, -0.5]);
        assert_eq!(cb.subgrad_c(&x).unwrap(), vec![vec![-0.5, 0.5]]);
    }

    #[test]
    fn rejects_overlap() {
        let c = CenterVector::new(vec![0.0]).unwrap();
        let e = |s| CodebookEntry { group: "g".into(), start: s, len: 2, centers: c.clone() };
        assert!(Codebook::new(4, vec![e(0), e(1)]).is_err());
        assert!(Codebook::new(3, vec![e(2)]).is_err());
        assert!(Codebook::new(4, vec![e(0), e(2)]).is_ok());
    }
}
