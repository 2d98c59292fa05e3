//! Metrics records and their text formats, plus verification tooling: a
//! central-difference gradient checker, a grid-search prox oracle and the
//! gradient-check suite run by `qupel gradcheck`.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codebook::Codebook;
use crate::data::Dataset;
use crate::error::{QupelError, Result};
use crate::losses::{self, LogisticLoss, LossModel, MlpLoss, ObjectiveEval, QuadraticLoss};
use crate::proxops::{self, ProxParams};
use crate::quantizer::{self, CenterVector, QuantConfig};
use crate::rng::Rng;

/// Per-step measurements for one model (a client, or the centralized run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub step: usize,
    pub client_id: Option<usize>,
    pub objective: ObjectiveEval,
    /// `|z^{t+1} - z^t|^2 / min(eta1, eta2)^2`.
    pub stationarity_gap: f64,
    /// Squared norm of the subgradient-based stationarity vector, when computed.
    pub gap_subgrad: Option<f64>,
    /// `|w_i - w|^2` for federated clients, zero otherwise.
    pub w_drift: f64,
    /// `|x - Q_c(x)|_1` over quantized coordinates.
    pub quant_error: f64,
    /// Test accuracy of the hard-quantized model.
    pub test_acc: Option<f64>,
    pub kappa_round: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Jsonl,
    Csv,
}

/// Fixed 17-significant-digit rendering; non-finite values become `null`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".into()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".into(), fmt_f64)
}

impl RoundMetrics {
    pub fn to_json_line(&self) -> String {
        let o = &self.objective;
        format!(
            "{{\"round\":{},\"client_id\":{},\"F_total\":{},\"parts\":{{\"f_x\":{},\"f_q\":{},\"reg\":{},\"prox_penalty\":{}}},\"stationarity_gap\":{},\"stationarity_gap_subgrad\":{},\"w_drift\":{},\"test_acc\":{},\"quant_error\":{},\"kappa_round\":{}}}",
            self.step,
            self.client_id.map_or_else(|| "null".into(), |c| c.to_string()),
            fmt_f64(o.total),
            fmt_f64(o.f_x),
            fmt_f64(o.f_q),
            fmt_f64(o.reg),
            fmt_f64(o.prox_penalty),
            fmt_f64(self.stationarity_gap),
            fmt_opt(self.gap_subgrad),
            fmt_f64(self.w_drift),
            fmt_opt(self.test_acc),
            fmt_f64(self.quant_error),
            fmt_opt(self.kappa_round),
        )
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(line)?;
        let num = |v: &Value, key: &str| -> Result<f64> {
            match &v[key] {
                Value::Null => Ok(f64::NAN),
                x => x
                    .as_f64()
                    .ok_or_else(|| QupelError::Parse { line: 0, message: format!("field `{key}` is not a number") }),
            }
        };
        let opt = |v: &Value, key: &str| v[key].as_f64();
        let parts = &v["parts"];
        let objective = ObjectiveEval {
            f_x: num(parts, "f_x")?,
            f_q: num(parts, "f_q")?,
            reg: num(parts, "reg")?,
            prox_penalty: num(parts, "prox_penalty")?,
            total: num(&v, "F_total")?,
        };
        Ok(RoundMetrics {
            step: v["round"]
                .as_u64()
                .ok_or_else(|| QupelError::Parse { line: 0, message: "missing round".into() })? as usize,
            client_id: v["client_id"].as_u64().map(|c| c as usize),
            objective,
            stationarity_gap: num(&v, "stationarity_gap")?,
            gap_subgrad: opt(&v, "stationarity_gap_subgrad"),
            w_drift: num(&v, "w_drift")?,
            quant_error: num(&v, "quant_error")?,
            test_acc: opt(&v, "test_acc"),
            kappa_round: opt(&v, "kappa_round"),
        })
    }
}

pub const CSV_HEADER: &str = "round,client_id,F_total,f_x,f_q,reg,prox_penalty,stationarity_gap,stationarity_gap_subgrad,w_drift,test_acc,quant_error,kappa_round";

fn csv_line(m: &RoundMetrics) -> String {
    let o = &m.objective;
    let opt = |v: Option<f64>| v.map_or_else(String::new, fmt_f64);
    [
        m.step.to_string(),
        m.client_id.map_or_else(String::new, |c| c.to_string()),
        fmt_f64(o.total),
        fmt_f64(o.f_x),
        fmt_f64(o.f_q),
        fmt_f64(o.reg),
        fmt_f64(o.prox_penalty),
        fmt_f64(m.stationarity_gap),
        opt(m.gap_subgrad),
        fmt_f64(m.w_drift),
        opt(m.test_acc),
        fmt_f64(m.quant_error),
        opt(m.kappa_round),
    ]
    .join(",")
}

/// Appends `history` to `path`. CSV files get a header when created empty.
pub fn export_metrics(history: &[RoundMetrics], path: &Path, format: MetricsFormat) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let fresh = file.metadata()?.len() == 0;
    let mut out = String::new();
    if format == MetricsFormat::Csv && fresh {
        out.push_str(CSV_HEADER);
        out.push('\n');
    }
    for m in history {
        match format {
            MetricsFormat::Jsonl => out.push_str(&m.to_json_line()),
            MetricsFormat::Csv => out.push_str(&csv_line(m)),
        }
        out.push('\n');
    }
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RoundMetrics>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(RoundMetrics::from_json_line(&line).map_err(|e| QupelError::Parse {
            line: i as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`;
/// keeps near-zero gradient entries from amplifying rounding noise.
pub const FD_FLOOR: f64 = 1e-3;

/// Central differences with step `step` on every coordinate of `point`.
pub fn finite_diff_check(
    f: impl Fn(&[f64]) -> f64,
    grad: &[f64],
    point: &[f64],
    step: f64,
    tol: f64,
) -> FdReport {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: None,
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe);
        probe[i] = point[i] - step;
        let down = f(&probe);
        probe[i] = point[i];
        let numeric = (up - down) / (2.0 * step);
        let a = grad[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        if err > report.max_rel_err || !err.is_finite() {
            report = FdReport {
                max_rel_err: err,
                worst_index: Some(i),
                analytic: a,
                numeric,
                passed: true,
            };
        }
    }
    report.passed = report.max_rel_err < tol;
    report
}

/// Grid argmin of `1/2 (u - y)^2 + eta_lambda R(u, c)` over
/// `[min(c_1, y) - |y| - 1, max(c_m, y) + |y| + 1]`.
pub fn prox_oracle_1d(y: f64, c: &CenterVector, eta_lambda: f64, grid_step: f64) -> f64 {
    let v = c.values();
    let lo = v[0].min(y) - y.abs() - 1.0;
    let hi = v[v.len() - 1].max(y) + y.abs() + 1.0;
    let n = ((hi - lo) / grid_step).ceil() as usize;
    let mut best = (f64::INFINITY, lo);
    for k in 0..=n {
        let u = lo + k as f64 * grid_step;
        let dist = (u - v[c.nearest(u)]).abs();
        let obj = 0.5 * (u - y) * (u - y) + eta_lambda * 0.5 * dist;
        if obj < best.0 {
            best = (obj, u);
        }
    }
    best.1
}

/// Fraction of `test` classified correctly by `model` at `params`.
pub fn evaluate_accuracy(model: &dyn LossModel, params: &[f64], test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(QupelError::EmptyDataset("test set".into()));
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        let pred = model
            .predict(params, test.row(i))
            .ok_or_else(|| QupelError::config("model", "model does not predict class labels"))?;
        if pred == test.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Worst-case result of one family of checks.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    /// Tolerance for finite-difference families; `None` uses each family's default.
    pub tol: Option<f64>,
    pub seed: u64,
    pub step: f64,
    /// Negates the quadratic-loss gradient, for testing the detector.
    pub inject_wrong_sign: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            instances: 1000,
            tol: None,
            seed: 0,
            step: 1e-6,
            inject_wrong_sign: false,
        }
    }
}

fn random_centers(rng: &mut Rng, m: usize) -> CenterVector {
    let mut v = Vec::with_capacity(m);
    let mut at = rng.uniform_range(-2.0, 0.0);
    for _ in 0..m {
        v.push(at);
        at += rng.uniform_range(0.1, 1.0);
    }
    CenterVector::new(v).expect("generated centers are sorted")
}

fn random_vec(rng: &mut Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d).map(|_| rng.uniform_range(lo, hi)).collect()
}

fn random_vec_upto(rng: &mut Rng, max_len: usize, lo: f64, hi: f64) -> Vec<f64> {
    let d = 1 + rng.below(max_len);
    random_vec(rng, d, lo, hi)
}

fn random_logistic(rng: &mut Rng, d: usize) -> LogisticLoss {
    let n = 2 + rng.below(6);
    let feats = (0..n).map(|_| random_vec(rng, d, -2.0, 2.0)).collect();
    let labels = (0..n).map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect();
    LogisticLoss::new(feats, labels, rng.uniform_range(0.0, 0.5)).expect("valid logistic instance")
}

fn random_mlp(rng: &mut Rng) -> MlpLoss {
    let d_in = 2 + rng.below(2);
    let hidden = 3 + rng.below(3);
    let classes = 2 + rng.below(2);
    let n = 2 + rng.below(4);
    let feats = (0..n).map(|_| random_vec(rng, d_in, -1.5, 1.5)).collect();
    let labels = (0..n).map(|_| rng.below(classes)).collect();
    MlpLoss::new(vec![d_in, hidden, classes], feats, labels, 0.01).expect("valid MLP instance")
}

fn random_loss(rng: &mut Rng, d: usize) -> Box<dyn LossModel> {
    if rng.uniform() < 0.5 {
        let a = random_vec(rng, d, -2.0, 2.0);
        let h = random_vec(rng, d, 0.1, 3.0);
        Box::new(QuadraticLoss::new(a, h).expect("valid quadratic"))
    } else {
        Box::new(random_logistic(rng, d))
    }
}

/// Runs every gradient family plus the prox oracle on seeded random instances.
pub fn gradcheck_suite(opts: GradcheckOptions) -> Vec<CheckResult> {
    let mut rng = Rng::seed_from(opts.seed);
    let n = opts.instances;
    let h = opts.step;
    let mut results = Vec::new();
    // `fd` marks finite-difference families, the only ones `opts.tol` overrides.
    let mut family = |name: &'static str, default_tol: f64, fd: bool, rng: &mut Rng, one: &mut dyn FnMut(&mut Rng) -> f64| {
        let tol = if fd { opts.tol.unwrap_or(default_tol) } else { default_tol };
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            let e = one(rng);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        results.push(CheckResult {
            name,
            instances: n,
            max_err: worst,
            tol,
            passed: worst < tol,
        });
    };

    family("quadratic gradient", 1e-8, true, &mut rng, &mut |rng| {
        let d = 1 + rng.below(10);
        let loss = QuadraticLoss::new(random_vec(rng, d, -2.0, 2.0), random_vec(rng, d, 0.1, 3.0)).unwrap();
        let x = random_vec(rng, d, -3.0, 3.0);
        let mut g = loss.gradient(&x);
        if opts.inject_wrong_sign {
            g.iter_mut().for_each(|v| *v = -*v);
        }
        // Central differences are exact on quadratics, so a wide step only trims rounding.
        finite_diff_check(|p| loss.value(p), &g, &x, 100.0 * h, 1.0).max_rel_err
    });
    family("logistic gradient", 1e-6, true, &mut rng, &mut |rng| {
        let d = 1 + rng.below(6);
        let loss = random_logistic(rng, d);
        let x = random_vec(rng, d, -2.0, 2.0);
        finite_diff_check(|p| loss.value(p), &loss.gradient(&x), &x, h, 1.0).max_rel_err
    });
    family("mlp gradient", 1e-5, true, &mut rng, &mut |rng| {
        let loss = random_mlp(rng);
        let x = random_vec(rng, loss.dim(), -1.0, 1.0);
        finite_diff_check(|p| loss.value(p), &loss.gradient(&x), &x, h, 1.0).max_rel_err
    });
    family("soft quantizer x-jacobian", 1e-5, true, &mut rng, &mut |rng| {
        let m = 1 + rng.below(5);
        let c = random_centers(rng, m);
        let cfg = QuantConfig::soft(rng.uniform_range(0.5, 10.0));
        let x = random_vec_upto(rng, 6, -3.0, 3.0);
        let diag = quantizer::grad_soft_quantize_x(&x, &c, cfg).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let f = |p: &[f64]| quantizer::soft_quantize(p, &c, cfg).unwrap()[0];
            let r = finite_diff_check(f, &[diag[i]], &[x[i]], h, 1.0);
            worst = worst.max(r.max_rel_err);
        }
        worst
    });
    family("soft quantizer c-jacobian", 1e-5, true, &mut rng, &mut |rng| {
        let m = 1 + rng.below(5);
        let c = random_centers(rng, m);
        let cfg = QuantConfig::soft(rng.uniform_range(0.5, 10.0));
        let x = random_vec_upto(rng, 4, -3.0, 3.0);
        let jac = quantizer::grad_soft_quantize_c(&x, &c, cfg).unwrap();
        let mut worst: f64 = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            let col: Vec<f64> = jac.iter().map(|row| row[i]).collect();
            let f = |cv: &[f64]| {
                let cc = CenterVector::new(cv.to_vec()).unwrap();
                quantizer::soft_quantize(&[xi], &cc, cfg).unwrap()[0]
            };
            worst = worst.max(finite_diff_check(f, &col, c.values(), h, 1.0).max_rel_err);
        }
        worst
    });
    family("composite x-gradient", 1e-5, true, &mut rng, &mut |rng| {
        let d = 1 + rng.below(6);
        let loss = random_loss(rng, d);
        let m = 1 + rng.below(4);
        let c = random_centers(rng, m);
        let cb = Codebook::single(d, c);
        let cfg = QuantConfig::soft(rng.uniform_range(0.5, 10.0));
        let x = random_vec(rng, d, -2.5, 2.5);
        let g = losses::composite_grad_x(loss.as_ref(), &x, &cb, cfg).unwrap();
        let f = |p: &[f64]| loss.value(&cb.quantize(p, cfg).unwrap());
        finite_diff_check(f, &g, &x, h, 1.0).max_rel_err
    });
    family("composite c-gradient", 1e-5, true, &mut rng, &mut |rng| {
        let d = 1 + rng.below(6);
        let loss = random_loss(rng, d);
        let m = 1 + rng.below(4);
        let c = random_centers(rng, m);
        let cb = Codebook::single(d, c.clone());
        let cfg = QuantConfig::soft(rng.uniform_range(0.5, 10.0));
        let x = random_vec(rng, d, -2.5, 2.5);
        let g = losses::composite_grad_c(loss.as_ref(), &x, &cb, cfg).unwrap();
        let f = |cv: &[f64]| {
            let cc = Codebook::single(d, CenterVector::new(cv.to_vec()).unwrap());
            loss.value(&cc.quantize(&x, cfg).unwrap())
        };
        finite_diff_check(f, &g[0], c.values(), h, 1.0).max_rel_err
    });
    family("prox_x vs grid oracle", 2e-4, false, &mut rng, &mut |rng| {
        let m = 1 + rng.below(4);
        let c = random_centers(rng, m);
        let y = rng.uniform_range(-3.0, 3.0);
        let el = rng.uniform_range(0.0, 1.0);
        let p = ProxParams::new(1.0, el).unwrap();
        let got = proxops::prox_x(&[y], &c, p).unwrap()[0];
        (got - prox_oracle_1d(y, &c, el, 1e-4)).abs()
    });
    family("large-lambda collapse", f64::MIN_POSITIVE, false, &mut rng, &mut |rng| {
        let m = 1 + rng.below(4);
        let c = random_centers(rng, m);
        let y = random_vec_upto(rng, 6, -3.0, 3.0);
        let q = quantizer::hard_quantize(&y, &c).unwrap();
        let gap = y.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let p = ProxParams::new(1.0, 2.0 * gap + 1e-9).unwrap();
        let out = proxops::prox_x(&y, &c, p).unwrap();
        if out == q {
            0.0
        } else {
            1.0
        }
    });
    results
}
