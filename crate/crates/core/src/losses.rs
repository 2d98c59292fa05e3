//! Smooth loss models with analytic gradients, the flattened-parameter layout
//! used for layer-wise quantization, and the composed objectives
//! `F_lambda(x, c) = f(x) + f(Q~_c(x)) + lambda R(x, c)` and its federated
//! extension with the proximity penalty `(lambda_p / 2)|x - w|^2`.

use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::data::Dataset;
use crate::error::{ensure_dim, ensure_finite, QupelError, Result};
use crate::quantizer::{sigmoid, QuantConfig};

/// A named contiguous block of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub quantized: bool,
}

impl ParamGroup {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Partition of `0..dim` into ordered, contiguous groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    dim: usize,
    groups: Vec<ParamGroup>,
}

impl ParamLayout {
    pub fn single(dim: usize) -> Self {
        ParamLayout {
            dim,
            groups: vec![ParamGroup {
                name: "params".into(),
                start: 0,
                len: dim,
                quantized: true,
            }],
        }
    }

    pub fn new(dim: usize, groups: Vec<ParamGroup>) -> Result<Self> {
        let mut next = 0;
        for g in &groups {
            if g.start != next || g.len == 0 {
                return Err(QupelError::config(
                    "layout",
                    format!("group `{}` does not continue the partition at {next}", g.name),
                ));
            }
            next += g.len;
        }
        ensure_dim("layout", dim, next)?;
        Ok(ParamLayout { dim, groups })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Marks the groups of the first and last layer as unquantized. Group
    /// names are expected to look like `layer{k}.weight` / `layer{k}.bias`.
    pub fn exempt_first_last(mut self) -> Self {
        let layer_of = |name: &str| -> Option<usize> {
            name.strip_prefix("layer")?.split('.').next()?.parse().ok()
        };
        let layers: Vec<usize> = self.groups.iter().filter_map(|g| layer_of(&g.name)).collect();
        if let (Some(&first), Some(&last)) = (layers.iter().min(), layers.iter().max()) {
            for g in &mut self.groups {
                if matches!(layer_of(&g.name), Some(l) if l == first || l == last) {
                    g.quantized = false;
                }
            }
        }
        self
    }

    pub fn with_biases_quantized(mut self, quantize: bool) -> Self {
        for g in &mut self.groups {
            if g.name.ends_with(".bias") {
                g.quantized = quantize;
            }
        }
        self
    }
}

/// A loss `f: R^d -> R` with its gradient.
///
/// Implementations are immutable after construction, so value and gradient
/// calls may run concurrently.
pub trait LossModel: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    fn layout(&self) -> ParamLayout {
        ParamLayout::single(self.dim())
    }

    /// Number of samples for minibatch mode; zero for data-free losses.
    fn num_samples(&self) -> usize {
        0
    }

    /// Gradient of the loss restricted to the given samples. Data-free losses
    /// return the full gradient.
    fn batch_gradient(&self, x: &[f64], _batch: &[usize]) -> Vec<f64> {
        self.gradient(x)
    }

    /// Predicted class for one feature row, for classifiers.
    fn predict(&self, _x: &[f64], _features: &[f64]) -> Option<usize> {
        None
    }

    /// Estimate of the smoothness constant `L`, when one is computable.
    fn smoothness(&self) -> Option<f64> {
        None
    }

    /// Bound on `|grad f(q)|` over the box `q in [lo, hi]^d`, when computable.
    fn gradient_bound(&self, _lo: f64, _hi: f64) -> Option<f64> {
        None
    }
}

/// `f(x) = 1/2 sum_i h_i (x_i - a_i)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    target: Vec<f64>,
    curvature: Vec<f64>,
}

impl QuadraticLoss {
    pub fn new(target: Vec<f64>, curvature: Vec<f64>) -> Result<Self> {
        ensure_dim("curvature", target.len(), curvature.len())?;
        ensure_finite(&target, "target")?;
        if let Some(i) = curvature.iter().position(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(QupelError::config(
                "curvature",
                format!("entry {i} must be positive, got {}", curvature[i]),
            ));
        }
        if target.is_empty() {
            return Err(QupelError::config("target", "dimension must be positive"));
        }
        Ok(QuadraticLoss { target, curvature })
    }

    pub fn isotropic(target: Vec<f64>, h: f64) -> Result<Self> {
        let n = target.len();
        Self::new(target, vec![h; n])
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }
}

impl LossModel for QuadraticLoss {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim());
        let mut acc = 0.0;
        for ((&xi, &ai), &hi) in x.iter().zip(&self.target).zip(&self.curvature) {
            acc += hi * (xi - ai) * (xi - ai);
        }
        0.5 * acc
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim());
        x.iter()
            .zip(&self.target)
            .zip(&self.curvature)
            .map(|((&xi, &ai), &hi)| hi * (xi - ai))
            .collect()
    }

    fn smoothness(&self) -> Option<f64> {
        // Diagonal Hessian: the top eigenvalue is exact.
        self.curvature.iter().copied().reduce(f64::max)
    }

    fn gradient_bound(&self, lo: f64, hi: f64) -> Option<f64> {
        let sq: f64 = self
            .target
            .iter()
            .zip(&self.curvature)
            .map(|(&a, &h)| {
                let r = h * (lo - a).abs().max((hi - a).abs());
                r * r
            })
            .sum();
        Some(sq.sqrt())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + exp(u))` without overflow.
#[inline]
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Binary logistic regression with labels in `{-1, +1}` and an l2 term:
/// `f(x) = (1/N) sum_n log(1 + exp(-y_n <x, z_n>)) + (l2 / 2)|x|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticLoss {
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
    l2: f64,
    bias: bool,
}

impl LogisticLoss {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<f64>, l2: f64) -> Result<Self> {
        if features.is_empty() {
            return Err(QupelError::EmptyDataset("logistic loss needs at least one sample".into()));
        }
        ensure_dim("labels", features.len(), labels.len())?;
        let dim = features[0].len();
        if dim == 0 {
            return Err(QupelError::config("features", "feature dimension must be positive"));
        }
        if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(QupelError::config("labels", format!("label {i} is not +-1")));
        }
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(QupelError::config("l2", "must be nonnegative"));
        }
        let mut flat = Vec::with_capacity(features.len() * dim);
        for row in &features {
            ensure_dim("feature row", dim, row.len())?;
            ensure_finite(row, "features")?;
            flat.extend_from_slice(row);
        }
        Ok(LogisticLoss {
            features: flat,
            labels,
            dim,
            l2,
            bias: false,
        })
    }

    /// Two-class dataset restricted to `indices`; label `1` maps to `+1`,
    /// label `0` to `-1`. With `bias`, a constant feature is appended.
    pub fn from_dataset(ds: &Dataset, indices: &[usize], l2: f64, bias: bool) -> Result<Self> {
        if ds.num_classes() > 2 {
            return Err(QupelError::config(
                "model",
                format!("logistic loss needs 2 classes, dataset has {}", ds.num_classes()),
            ));
        }
        let mut rows = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let mut row = ds.row(i).to_vec();
            if bias {
                row.push(1.0);
            }
            rows.push(row);
            labels.push(if ds.labels[i] == 1 { 1.0 } else { -1.0 });
        }
        let mut loss = Self::new(rows, labels, l2)?;
        loss.bias = bias;
        Ok(loss)
    }

    fn row(&self, n: usize) -> &[f64] {
        &self.features[n * self.dim..(n + 1) * self.dim]
    }

    fn samples(&self) -> usize {
        self.labels.len()
    }

    fn accumulate_gradient(&self, x: &[f64], rows: impl Iterator<Item = usize>, count: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for n in rows {
            let z = self.row(n);
            let y = self.labels[n];
            let coef = -y * sigmoid(-y * dot(x, z));
            for (gi, &zi) in g.iter_mut().zip(z) {
                *gi += coef * zi;
            }
        }
        let inv = 1.0 / count as f64;
        for (gi, &xi) in g.iter_mut().zip(x) {
            *gi = *gi * inv + self.l2 * xi;
        }
        g
    }
}

impl LossModel for LogisticLoss {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let mut acc = 0.0;
        for n in 0..self.samples() {
            acc += softplus(-self.labels[n] * dot(x, self.row(n)));
        }
        acc / self.samples() as f64 + 0.5 * self.l2 * dot(x, x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        self.accumulate_gradient(x, 0..self.samples(), self.samples())
    }

    fn num_samples(&self) -> usize {
        self.samples()
    }

    fn batch_gradient(&self, x: &[f64], batch: &[usize]) -> Vec<f64> {
        if batch.is_empty() {
            return self.gradient(x);
        }
        self.accumulate_gradient(x, batch.iter().copied(), batch.len())
    }

    fn predict(&self, x: &[f64], features: &[f64]) -> Option<usize> {
        let mut score = dot(&x[..features.len()], features);
        if self.bias {
            score += x[self.dim - 1];
        }
        Some(usize::from(score > 0.0))
    }

    fn smoothness(&self) -> Option<f64> {
        // Hessian <= Z^T Z / (4N) + l2 I; top eigenvalue by power iteration.
        let n = self.samples() as f64;
        let top = power_iteration(self.dim, 200, |v| {
            let mut out = vec![0.0; self.dim];
            for k in 0..self.samples() {
                let z = self.row(k);
                let s = dot(z, v);
                for (o, &zi) in out.iter_mut().zip(z) {
                    *o += s * zi;
                }
            }
            out
        });
        Some(1.01 * top / (4.0 * n) + self.l2)
    }

    fn gradient_bound(&self, lo: f64, hi: f64) -> Option<f64> {
        let mean_norm = (0..self.samples()).map(|k| dot(self.row(k), self.row(k)).sqrt()).sum::<f64>()
            / self.samples() as f64;
        let radius = (self.dim as f64).sqrt() * lo.abs().max(hi.abs());
        Some(mean_norm + self.l2 * radius)
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite operator.
pub fn power_iteration(dim: usize, iters: usize, apply: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut estimate = 0.0;
    for _ in 0..iters {
        let w = apply(&v);
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = dot(&v, &w);
        v = w.into_iter().map(|wi| wi / norm).collect();
    }
    estimate.max(dot(&v, &apply(&v)))
}

/// Fully connected tanh network with a softmax cross-entropy head.
///
/// Parameters are flattened layer by layer as `W_l` (row-major,
/// `out x in`) followed by `b_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLoss {
    sizes: Vec<usize>,
    features: Vec<f64>,
    labels: Vec<usize>,
    l2: f64,
    dim: usize,
}

impl MlpLoss {
    pub fn new(sizes: Vec<usize>, features: Vec<Vec<f64>>, labels: Vec<usize>, l2: f64) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(QupelError::config("hidden", "an MLP needs at least one hidden layer"));
        }
        if sizes.contains(&0) {
            return Err(QupelError::config("hidden", "layer sizes must be positive"));
        }
        if features.is_empty() {
            return Err(QupelError::EmptyDataset("MLP loss needs at least one sample".into()));
        }
        ensure_dim("labels", features.len(), labels.len())?;
        let classes = sizes[sizes.len() - 1];
        if let Some(i) = labels.iter().position(|&y| y >= classes) {
            return Err(QupelError::config("labels", format!("label of sample {i} exceeds {classes}")));
        }
        let mut flat = Vec::with_capacity(features.len() * sizes[0]);
        for row in &features {
            ensure_dim("feature row", sizes[0], row.len())?;
            ensure_finite(row, "features")?;
            flat.extend_from_slice(row);
        }
        let dim = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(MlpLoss {
            sizes,
            features: flat,
            labels,
            l2,
            dim,
        })
    }

    pub fn from_dataset(ds: &Dataset, indices: &[usize], hidden: &[usize], l2: f64) -> Result<Self> {
        let mut sizes = vec![ds.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(ds.num_classes().max(2));
        let rows = indices.iter().map(|&i| ds.row(i).to_vec()).collect();
        let labels = indices.iter().map(|&i| ds.labels[i]).collect();
        Self::new(sizes, rows, labels, l2)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn samples(&self) -> usize {
        self.labels.len()
    }

    fn row(&self, n: usize) -> &[f64] {
        let d = self.sizes[0];
        &self.features[n * d..(n + 1) * d]
    }

    /// Offsets of `(W_l, b_l)` for each layer.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.sizes.len() - 1);
        let mut at = 0;
        for w in self.sizes.windows(2) {
            out.push((at, at + w[0] * w[1]));
            at += w[0] * w[1] + w[1];
        }
        out
    }

    /// Activations per layer; the last entry holds logits.
    fn forward(&self, x: &[f64], input: &[f64], offsets: &[(usize, usize)]) -> Vec<Vec<f64>> {
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        for l in 0..layers {
            let (wi, bi) = offsets[l];
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let prev = &acts[l];
            let mut next = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &x[wi + o * fan_in..wi + (o + 1) * fan_in];
                let z = dot(row, prev) + x[bi + o];
                next.push(if l + 1 < layers { z.tanh() } else { z });
            }
            acts.push(next);
        }
        acts
    }

    fn sample_loss(logits: &[f64], label: usize) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
        lse - logits[label]
    }

    fn accumulate(&self, x: &[f64], rows: impl Iterator<Item = usize>, count: usize) -> Vec<f64> {
        let offsets = self.offsets();
        let layers = self.sizes.len() - 1;
        let mut g = vec![0.0; self.dim];
        for n in rows {
            let acts = self.forward(x, self.row(n), &offsets);
            let logits = &acts[layers];
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut delta: Vec<f64> = exps.iter().map(|e| e / total).collect();
            delta[self.labels[n]] -= 1.0;
            for l in (0..layers).rev() {
                let (wi, bi) = offsets[l];
                let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
                let prev = &acts[l];
                for o in 0..fan_out {
                    let d = delta[o];
                    g[bi + o] += d;
                    let grow = &mut g[wi + o * fan_in..wi + (o + 1) * fan_in];
                    for (gw, &a) in grow.iter_mut().zip(prev) {
                        *gw += d * a;
                    }
                }
                if l > 0 {
                    let mut back = vec![0.0; fan_in];
                    for o in 0..fan_out {
                        let row = &x[wi + o * fan_in..wi + (o + 1) * fan_in];
                        for (b, &w) in back.iter_mut().zip(row) {
                            *b += delta[o] * w;
                        }
                    }
                    // prev holds tanh activations of layer l.
                    for (b, &a) in back.iter_mut().zip(prev) {
                        *b *= 1.0 - a * a;
                    }
                    delta = back;
                }
            }
        }
        let inv = 1.0 / count as f64;
        for (gi, &xi) in g.iter_mut().zip(x) {
            *gi = *gi * inv + self.l2 * xi;
        }
        g
    }
}

impl LossModel for MlpLoss {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let offsets = self.offsets();
        let layers = self.sizes.len() - 1;
        let mut acc = 0.0;
        for n in 0..self.samples() {
            let acts = self.forward(x, self.row(n), &offsets);
            acc += Self::sample_loss(&acts[layers], self.labels[n]);
        }
        acc / self.samples() as f64 + 0.5 * self.l2 * dot(x, x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        self.accumulate(x, 0..self.samples(), self.samples())
    }

    fn layout(&self) -> ParamLayout {
        let mut groups = Vec::new();
        for (l, w) in self.sizes.windows(2).enumerate() {
            let start = groups.iter().map(|g: &ParamGroup| g.len).sum();
            groups.push(ParamGroup {
                name: format!("layer{l}.weight"),
                start,
                len: w[0] * w[1],
                quantized: true,
            });
            groups.push(ParamGroup {
                name: format!("layer{l}.bias"),
                start: start + w[0] * w[1],
                len: w[1],
                quantized: false,
            });
        }
        ParamLayout::new(self.dim, groups).expect("MLP layout covers all parameters")
    }

    fn num_samples(&self) -> usize {
        self.samples()
    }

    fn batch_gradient(&self, x: &[f64], batch: &[usize]) -> Vec<f64> {
        if batch.is_empty() {
            return self.gradient(x);
        }
        self.accumulate(x, batch.iter().copied(), batch.len())
    }

    fn predict(&self, x: &[f64], features: &[f64]) -> Option<usize> {
        let offsets = self.offsets();
        let acts = self.forward(x, features, &offsets);
        let logits = &acts[self.sizes.len() - 1];
        let mut best = 0;
        for (k, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = k;
            }
        }
        Some(best)
    }
}

/// Parts of an evaluated objective; `total` is their sum in field order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEval {
    pub f_x: f64,
    pub f_q: f64,
    pub reg: f64,
    pub prox_penalty: f64,
    pub total: f64,
}

impl ObjectiveEval {
    fn from_parts(f_x: f64, f_q: f64, reg: f64, prox_penalty: f64) -> Self {
        ObjectiveEval {
            f_x,
            f_q,
            reg,
            prox_penalty,
            total: f_x + f_q + reg + prox_penalty,
        }
    }
}

/// `F_lambda(x, c) = f(x) + f(Q~_c(x)) + lambda R(x, c)`; the hard quantizer
/// replaces the soft one in hard-limit mode.
#[allow(non_snake_case)]
pub fn eval_F_lambda(
    loss: &dyn LossModel,
    x: &[f64],
    codebook: &Codebook,
    cfg: QuantConfig,
    lambda: f64,
) -> Result<ObjectiveEval> {
    ensure_dim("x", loss.dim(), x.len())?;
    ensure_finite(x, "x")?;
    let q = codebook.quantize(x, cfg)?;
    let f_x = loss.value(x);
    let f_q = loss.value(&q);
    let reg = lambda * codebook.regularizer(x)?;
    Ok(ObjectiveEval::from_parts(f_x, f_q, reg, 0.0))
}

/// Client objective `F_i(x, c, w) = F_lambda(x, c) + (lambda_p / 2)|x - w|^2`.
#[allow(non_snake_case, clippy::too_many_arguments)]
pub fn eval_F_i(
    loss: &dyn LossModel,
    x: &[f64],
    codebook: &Codebook,
    w: &[f64],
    cfg: QuantConfig,
    lambda: f64,
    lambda_p: f64,
) -> Result<ObjectiveEval> {
    ensure_dim("global model", x.len(), w.len())?;
    let base = eval_F_lambda(loss, x, codebook, cfg, lambda)?;
    let penalty = 0.5 * lambda_p * squared_distance(x, w);
    Ok(ObjectiveEval::from_parts(base.f_x, base.f_q, base.reg, penalty))
}

/// Gradient of the proximity penalty with respect to the global model,
/// `lambda_p (w - x)`.
pub fn prox_penalty_grad_w(x: &[f64], w: &[f64], lambda_p: f64) -> Vec<f64> {
    w.iter().zip(x).map(|(&wi, &xi)| lambda_p * (wi - xi)).collect()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `grad_x f(Q~_c(x))` by the chain rule (zero on quantized groups in hard-limit mode).
pub fn composite_grad_x(
    loss: &dyn LossModel,
    x: &[f64],
    codebook: &Codebook,
    cfg: QuantConfig,
) -> Result<Vec<f64>> {
    let q = codebook.quantize(x, cfg)?;
    let upstream = loss.gradient(&q);
    codebook.vjp_x(x, cfg, &upstream)
}

/// `grad_c f(Q~_c(x))`, one vector per codebook entry.
pub fn composite_grad_c(
    loss: &dyn LossModel,
    x: &[f64],
    codebook: &Codebook,
    cfg: QuantConfig,
) -> Result<Vec<Vec<f64>>> {
    let q = codebook.quantize(x, cfg)?;
    let upstream = loss.gradient(&q);
    codebook.vjp_c(x, cfg, &upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::CenterVector;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[i] += h;
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn quadratic_examples() {
        let q = QuadraticLoss::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(q.value(&[1.0]), 0.0);
        assert_eq!(q.gradient(&[1.0]), vec![0.0]);
        assert_eq!(q.value(&[0.5]), 0.125);
        assert_eq!(q.gradient(&[0.5]), vec![-0.5]);
        assert_eq!(q.smoothness(), Some(1.0));
        assert!(QuadraticLoss::new(vec![1.0], vec![0.0]).is_err());
        assert!(QuadraticLoss::new(vec![1.0], vec![-1.0]).is_err());
    }

    #[test]
    fn logistic_at_origin() {
        let feats = vec![vec![1.0, 2.0], vec![-0.5, 1.0], vec![3.0, 0.0]];
        let labels = vec![1.0, -1.0, 1.0];
        let loss = LogisticLoss::new(feats.clone(), labels.clone(), 0.0).unwrap();
        assert!((loss.value(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        let g = loss.gradient(&[0.0, 0.0]);
        for k in 0..2 {
            let expect = -(0..3).map(|n| labels[n] * feats[n][k]).sum::<f64>() / 3.0 / 2.0;
            assert!((g[k] - expect).abs() < 1e-15);
        }
        assert!(LogisticLoss::new(vec![], vec![], 0.0).is_err());
        assert!(LogisticLoss::new(vec![vec![1.0]], vec![0.5], 0.0).is_err());
    }

    #[test]
    fn logistic_smoothness_bounds_curvature() {
        let feats = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let loss = LogisticLoss::new(feats, vec![1.0, -1.0], 0.1).unwrap();
        // Z^T Z = diag(1, 4); top eigenvalue 4 -> 4 / (4 * 2) + 0.1
        let l = loss.smoothness().unwrap();
        assert!((0.6..0.61).contains(&l), "{l}");
    }

    #[test]
    fn mlp_zero_weights_give_log2() {
        let feats = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![-1.0, 2.0]];
        let loss = MlpLoss::new(vec![2, 4, 2], feats, vec![0, 1, 0, 1], 0.0).unwrap();
        let zero = vec![0.0; loss.dim()];
        assert!((loss.value(&zero) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(loss.dim(), 2 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let feats = vec![vec![1.0, -0.3], vec![0.2, 0.9], vec![-0.7, 0.4]];
        let loss = MlpLoss::new(vec![2, 4, 2], feats, vec![0, 1, 1], 0.01).unwrap();
        let x: Vec<f64> = (0..loss.dim()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect();
        let g = loss.gradient(&x);
        let fd = central_diff(|p| loss.value(p), &x, 1e-6);
        for (a, n) in g.iter().zip(&fd) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-3) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn mlp_hidden_permutation_is_symmetric() {
        let feats = vec![vec![1.0, -0.3], vec![0.2, 0.9]];
        let loss = MlpLoss::new(vec![2, 3, 2], feats, vec![0, 1], 0.0).unwrap();
        let x: Vec<f64> = (0..loss.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        // Swap hidden units 0 and 2: rows of W0, entries of b0, columns of W1.
        let mut y = x.clone();
        let (w0, b0, w1) = (0usize, 6usize, 9usize);
        for k in 0..2 {
            y.swap(w0 + k, w0 + 2 * 2 + k);
        }
        y.swap(b0, b0 + 2);
        for o in 0..2 {
            y.swap(w1 + o * 3, w1 + o * 3 + 2);
        }
        assert!((loss.value(&x) - loss.value(&y)).abs() < 1e-14);
    }

    #[test]
    fn layout_exemptions() {
        let feats = vec![vec![1.0, -0.3]];
        let loss = MlpLoss::new(vec![2, 3, 3, 2], feats, vec![0], 0.0).unwrap();
        let layout = loss.layout();
        assert_eq!(layout.groups().len(), 6);
        let ex = layout.clone().exempt_first_last();
        let q: Vec<_> = ex.groups().iter().map(|g| g.quantized).collect();
        assert_eq!(q, vec![false, false, true, false, false, false]);
        let with_b = layout.with_biases_quantized(true);
        assert!(with_b.groups().iter().all(|g| g.quantized));
        assert!(ParamLayout::new(
            3,
            vec![ParamGroup { name: "a".into(), start: 0, len: 2, quantized: true }]
        )
        .is_err());
    }

    #[test]
    fn objective_examples() {
        let loss = QuadraticLoss::new(vec![1.0], vec![1.0]).unwrap();
        let cb = Codebook::single(1, CenterVector::new(vec![0.0, 1.0]).unwrap());
        let e = eval_F_lambda(&loss, &[0.6], &cb, QuantConfig::hard(), 0.1).unwrap();
        assert!((e.f_x - 0.08).abs() < 1e-15);
        assert_eq!(e.f_q, 0.0);
        assert!((e.reg - 0.02).abs() < 1e-15);
        assert!((e.total - 0.10).abs() < 1e-15);
        assert_eq!(e.total, e.f_x + e.f_q + e.reg + e.prox_penalty);

        let on = eval_F_lambda(&loss, &[1.0], &cb, QuantConfig::hard(), 0.0).unwrap();
        assert_eq!(on.total, 2.0 * loss.value(&[1.0]));

        let fi = eval_F_i(&loss, &[0.6], &cb, &[0.8], QuantConfig::hard(), 0.1, 0.5).unwrap();
        assert!((fi.prox_penalty - 0.01).abs() < 1e-15);
        assert!((fi.total - 0.11).abs() < 1e-15);
        let same = eval_F_i(&loss, &[0.6], &cb, &[0.6], QuantConfig::hard(), 0.1, 0.5).unwrap();
        assert_eq!(same.prox_penalty, 0.0);
        assert!(eval_F_i(&loss, &[0.6], &cb, &[0.6, 1.0], QuantConfig::hard(), 0.1, 0.5).is_err());
    }

    #[test]
    fn prox_penalty_w_gradient_matches_finite_differences() {
        let x = [0.3, -1.2, 2.0];
        let w = [0.1, 0.4, -0.5];
        let lp = 0.7;
        let g = prox_penalty_grad_w(&x, &w, lp);
        let fd = central_diff(|wv| 0.5 * lp * squared_distance(&x, wv), &w, 1e-5);
        for (a, n) in g.iter().zip(&fd) {
            assert!((a - n).abs() / a.abs().max(1e-12) < 1e-8, "{a} vs {n}");
        }
    }
}
