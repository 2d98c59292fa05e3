//! Declarative experiment setups: dataset, model family, client partition
//! and centers, plus a runner for each training mode.

use serde::{Deserialize, Serialize};

use crate::centralized::{self, init_weights, safe_step_sizes, RunOptions, TrainResult};
use crate::codebook::Codebook;
use crate::data::{self, BlobSpec, Dataset, Partition};
use crate::diagnostics::{evaluate_accuracy, RoundMetrics};
use crate::error::{QupelError, Result};
use crate::federated::{self, Client, ClientState, FederatedOptions};
use crate::losses::{LogisticLoss, LossModel, MlpLoss, QuadraticLoss};
use crate::quantizer::CenterVector;
use crate::schedule::HyperParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    /// Without `test`, the training file is split 80/20 by class.
    Csv { train: String, test: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Data-free quadratic; client `i` uses `targets[i]`.
    Quadratic {
        targets: Vec<Vec<f64>>,
        #[serde(default)]
        curvature: Option<Vec<f64>>,
    },
    Logistic {
        #[serde(default)]
        l2: f64,
        #[serde(default = "yes")]
        bias: bool,
    },
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        l2: f64,
        #[serde(default)]
        quantize_biases: bool,
        #[serde(default)]
        exempt_first_last: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub k: usize,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterSpec {
    /// Centers per quantized group, shared by all clients.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Per-client center counts; overrides `m`.
    #[serde(default)]
    pub per_client: Option<Vec<usize>>,
    /// Explicit initial centers for every quantized group; overrides quantile init.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

fn default_m() -> usize {
    4
}

impl Default for CenterSpec {
    fn default() -> Self {
        CenterSpec { m: default_m(), per_client: None, values: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Centralized,
    Qupel,
    Fedavg,
    Local,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Centralized => "centralized",
            Mode::Qupel => "qupel",
            Mode::Fedavg => "fedavg",
            Mode::Local => "local",
        }
    }
}

fn default_record_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    pub model: ModelSpec,
    #[serde(default)]
    pub partition: Option<PartitionSpec>,
    pub hyper: HyperParams,
    #[serde(default)]
    pub centers: CenterSpec,
    #[serde(default)]
    pub seed: u64,
    /// Give every client its own initial weights instead of a shared draw.
    #[serde(default)]
    pub per_client_init: bool,
    /// Replace `eta1`/`eta2` by the estimated safe step sizes.
    #[serde(default)]
    pub safe_steps: bool,
    /// Interval assumed to contain the centers when estimating safe steps.
    #[serde(default)]
    pub safe_region: Option<(f64, f64)>,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub subgradient_gap: bool,
}

/// Built clients and the data they came from.
pub struct Setup {
    pub clients: Vec<Client>,
    pub init: Vec<ClientState>,
    pub partition: Option<Partition>,
    pub hyper: HyperParams,
}

fn build_model(model: &ModelSpec, ds: &Dataset, idx: &[usize]) -> Result<(Box<dyn LossModel>, crate::losses::ParamLayout)> {
    match model {
        ModelSpec::Logistic { l2, bias } => {
            let m = LogisticLoss::from_dataset(ds, idx, *l2, *bias)?;
            let layout = m.layout();
            Ok((Box::new(m), layout))
        }
        ModelSpec::Mlp { hidden, l2, quantize_biases, exempt_first_last } => {
            let m = MlpLoss::from_dataset(ds, idx, hidden, *l2)?;
            let mut layout = m.layout().with_biases_quantized(*quantize_biases);
            if *exempt_first_last {
                layout = layout.exempt_first_last();
            }
            Ok((Box::new(m), layout))
        }
        ModelSpec::Quadratic { .. } => unreachable!("quadratic models carry no data"),
    }
}

fn load_data(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Blobs(b) => {
            let s = data::make_blobs_split(*b, seed)?;
            Ok((s.train, s.test))
        }
        DatasetSpec::Csv { train, test } => {
            let tr = data::load_csv(std::path::Path::new(train))?;
            match test {
                Some(t) => Ok((tr, data::load_csv(std::path::Path::new(t))?)),
                None => {
                    let (a, b) = tr.stratified_split(0.8, seed)?;
                    Ok((tr.subset(&a)?, tr.subset(&b)?))
                }
            }
        }
    }
}

impl ExperimentSpec {
    /// Clients for `mode`: one client on the pooled training data for
    /// centralized runs, otherwise one per partition cell (or quadratic target).
    pub fn build(&self, mode: Mode) -> Result<Setup> {
        self.hyper.validate()?;
        let (clients, layouts, partition): (Vec<Client>, Vec<crate::losses::ParamLayout>, Option<Partition>) =
            match &self.model {
                ModelSpec::Quadratic { targets, curvature } => {
                    if targets.is_empty() {
                        return Err(QupelError::config("targets", "at least one target is required"));
                    }
                    let used = if mode == Mode::Centralized { &targets[..1] } else { &targets[..] };
                    let mut clients = Vec::new();
                    let mut layouts = Vec::new();
                    for (id, a) in used.iter().enumerate() {
                        let h = curvature.clone().unwrap_or_else(|| vec![1.0; a.len()]);
                        let loss = QuadraticLoss::new(a.clone(), h)?;
                        layouts.push(loss.layout());
                        clients.push(Client { id, loss: Box::new(loss), test: None });
                    }
                    (clients, layouts, None)
                }
                model => {
                    let ds = self
                        .dataset
                        .as_ref()
                        .ok_or_else(|| QupelError::config("dataset", "required for this model"))?;
                    let (train, test) = load_data(ds, self.seed)?;
                    if mode == Mode::Centralized {
                        let all: Vec<usize> = (0..train.len()).collect();
                        let (loss, layout) = build_model(model, &train, &all)?;
                        (vec![Client { id: 0, loss, test: Some(test) }], vec![layout], None)
                    } else {
                        let p = self
                            .partition
                            .as_ref()
                            .ok_or_else(|| QupelError::config("partition", "required for federated modes"))?;
                        let part = data::partition_noniid(&train, p.n_clients, p.k, p.seed.unwrap_or(self.seed))?;
                        let tests = part.test_indices(&test);
                        let mut clients = Vec::new();
                        let mut layouts = Vec::new();
                        for (id, (idx, tidx)) in part.client_indices.iter().zip(&tests).enumerate() {
                            let (loss, layout) = build_model(model, &train, idx)?;
                            let t = if tidx.is_empty() { None } else { Some(test.subset(tidx)?) };
                            layouts.push(layout);
                            clients.push(Client { id, loss, test: t });
                        }
                        (clients, layouts, Some(part))
                    }
                }
            };

        let n = clients.len();
        let ms: Vec<usize> = match &self.centers.per_client {
            Some(list) if mode != Mode::Centralized => {
                if list.len() != n {
                    return Err(QupelError::config(
                        "centers.per_client",
                        format!("has {} entries for {n} clients", list.len()),
                    ));
                }
                list.clone()
            }
            _ => vec![self.centers.m; n],
        };
        let dim = clients[0].loss.dim();
        let shared = init_weights(dim, self.seed);
        let mut init = Vec::with_capacity(n);
        for (k, c) in clients.iter().enumerate() {
            let x0 = if self.per_client_init {
                init_weights(dim, crate::rng::derive_seed(self.seed, crate::rng::stream::INIT, c.id as u64 + 1))
            } else {
                shared.clone()
            };
            let cb = match &self.centers.values {
                Some(v) => {
                    let cv = CenterVector::with_bound(v.clone(), self.hyper.c_max)?;
                    let groups = layouts[k].groups().iter().filter(|g| g.quantized).count();
                    Codebook::from_layout(&layouts[k], vec![cv; groups])?
                }
                None => Codebook::init_quantiles(&layouts[k], &x0, ms[k], self.hyper.c_max)?,
            };
            init.push(ClientState::new(c.id, x0, cb, self.seed)?);
        }

        let mut hyper = self.hyper.clone();
        if self.safe_steps {
            let mut eta1 = f64::INFINITY;
            let mut eta2 = f64::INFINITY;
            for (c, s) in clients.iter().zip(&init) {
                let lp = if mode == Mode::Qupel { hyper.lambda_p } else { 0.0 };
                let st = safe_step_sizes(c.loss.as_ref(), &s.train.codebook, hyper.quant, lp, self.safe_region)?;
                eta1 = eta1.min(st.eta1);
                eta2 = eta2.min(st.eta2);
            }
            hyper.eta1 = eta1;
            if hyper.eta2 > 0.0 {
                hyper.eta2 = eta2;
            }
        }
        if mode != Mode::Qupel {
            hyper.lambda_p = 0.0;
        }
        Ok(Setup { clients, init, partition, hyper })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentSpec { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub bits: f64,
    pub acc_fp_eval: Option<f64>,
    pub acc_quantized: Option<f64>,
}

/// Everything a mode run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeOutcome {
    pub mode: Mode,
    pub seed: u64,
    pub summaries: Vec<ClientSummary>,
    /// Mean over clients of the deployed model's test accuracy: quantized
    /// for personalized modes, full precision for FedAvg.
    pub avg_test_acc: Option<f64>,
    pub metrics: Vec<RoundMetrics>,
    pub final_gap: Option<f64>,
    pub results: Vec<TrainResult>,
    pub w_final: Option<Vec<f64>>,
    pub average_drift: Option<f64>,
    pub partition: Option<Partition>,
    pub hyper: HyperParams,
}

fn acc(c: &Client, params: &[f64]) -> Result<Option<f64>> {
    match &c.test {
        Some(t) => evaluate_accuracy(c.loss.as_ref(), params, t).map(Some),
        None => Ok(None),
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn run_mode(spec: &ExperimentSpec, mode: Mode) -> Result<ModeOutcome> {
    let setup = spec.build(mode)?;
    let hp = setup.hyper.clone();
    let opts = RunOptions {
        seed: spec.seed,
        test: None,
        record_every: spec.record_every,
        subgradient_gap: spec.subgradient_gap,
        checkpoint: None,
    };
    let clients = &setup.clients;
    let (results, metrics, w_final, drift) = match mode {
        Mode::Centralized => {
            let c = &clients[0];
            let s = setup.init.into_iter().next().expect("one client");
            let copts = RunOptions { test: c.test.as_ref(), ..opts };
            let mut r = centralized::run_centralized(c.loss.as_ref(), s.train.x, s.train.codebook, &hp, &copts)?;
            for m in &mut r.history {
                m.client_id = Some(0);
            }
            let metrics = r.history.clone();
            (vec![r], metrics, None, None)
        }
        Mode::Local => {
            let rs = federated::run_local_only(clients, setup.init, &hp, &opts)?;
            let mut metrics: Vec<RoundMetrics> = rs.iter().flat_map(|r| r.history.clone()).collect();
            metrics.sort_by_key(|m| (m.step, m.client_id));
            (rs, metrics, None, None)
        }
        Mode::Qupel => {
            let r = federated::run_qupel(clients, setup.init, &hp, &opts, FederatedOptions::default())?;
            let metrics = r.client_metrics();
            let drift = r.average_drift();
            (r.clients, metrics, Some(r.w_final), Some(drift))
        }
        Mode::Fedavg => {
            let w0 = setup.init[0].train.x.clone();
            let r = federated::run_fedavg(clients, w0, &hp, &opts)?;
            let mut summaries = Vec::new();
            for c in clients {
                let a = acc(c, &r.w_final)?;
                summaries.push(ClientSummary { client_id: c.id, bits: 64.0, acc_fp_eval: a, acc_quantized: None });
            }
            let avg = mean_of(summaries.iter().map(|s| s.acc_fp_eval));
            let final_gap = r.history.last().map(|m| m.stationarity_gap);
            return Ok(ModeOutcome {
                mode,
                seed: spec.seed,
                summaries,
                avg_test_acc: avg,
                metrics: r.history,
                final_gap,
                results: Vec::new(),
                w_final: Some(r.w_final),
                average_drift: None,
                partition: setup.partition,
                hyper: hp,
            });
        }
    };
    let mut summaries = Vec::new();
    for (c, r) in clients.iter().zip(&results) {
        let bits = r.c_final.entries().first().map_or(64.0, |e| e.centers.bits());
        summaries.push(ClientSummary {
            client_id: c.id,
            bits,
            acc_fp_eval: acc(c, &r.x_final)?,
            acc_quantized: acc(c, &r.x_hard)?,
        });
    }
    let avg = mean_of(summaries.iter().map(|s| s.acc_quantized));
    let final_gap = results
        .iter()
        .filter_map(|r| r.history.last().map(|m| m.stationarity_gap))
        .reduce(f64::max);
    Ok(ModeOutcome {
        mode,
        seed: spec.seed,
        summaries,
        avg_test_acc: avg,
        metrics,
        final_gap,
        results,
        w_final,
        average_drift: drift,
        partition: setup.partition,
        hyper: hp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_spec() -> ExperimentSpec {
        serde_json::from_str(
            r#"{"model": {"kind": "quadratic", "targets": [[0.1, 0.9], [0.2, 0.7]]},
                "hyper": {"eta1": 0.2, "eta2": 0.1, "steps": 50},
                "centers": {"m": 2, "values": [0.0, 1.0]}}"#,
        )
        .unwrap()
    }

    #[test]
    fn quadratic_modes_run() {
        let spec = quad_spec();
        let c = run_mode(&spec, Mode::Centralized).unwrap();
        assert_eq!(c.results.len(), 1);
        let q = run_mode(&spec, Mode::Qupel).unwrap();
        assert_eq!(q.results.len(), 2);
        assert!(q.avg_test_acc.is_none());
        let f = run_mode(&spec, Mode::Fedavg).unwrap();
        assert!(f.w_final.is_some());
    }

    #[test]
    fn per_client_m_length_checked() {
        let mut spec = quad_spec();
        spec.centers = CenterSpec { m: 2, per_client: Some(vec![2]), values: None };
        let err = spec.build(Mode::Qupel).err().unwrap();
        assert!(err.to_string().contains("centers.per_client"));
    }

    #[test]
    fn blob_mlp_setup() {
        let spec: ExperimentSpec = serde_json::from_str(
            r#"{"dataset": {"kind": "blobs", "classes": 4, "dim": 3, "per_class": 30, "spread": 0.5},
                "model": {"kind": "mlp", "hidden": [5]},
                "partition": {"n_clients": 3, "k": 2},
                "hyper": {"eta1": 0.1, "eta2": 0.01, "steps": 5},
                "centers": {"per_client": [2, 4, 2]}}"#,
        )
        .unwrap();
        let s = spec.build(Mode::Qupel).unwrap();
        assert_eq!(s.clients.len(), 3);
        assert_eq!(s.init[1].num_centers(), 4);
        assert!(s.clients.iter().all(|c| c.test.is_some()));
        let out = run_mode(&spec, Mode::Qupel).unwrap();
        assert_eq!(out.summaries.len(), 3);
        assert_eq!(out.summaries[0].bits, 1.0);
    }
}
