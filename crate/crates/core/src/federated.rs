//! Simulated federated training with personalized quantized models.
//!
//! Each client keeps `(x_i, c_i)` and a local copy `w_i` of the global model.
//! A step runs every client's local update concurrently; every `tau` steps
//! (starting at step 0) the server first averages the `w_i` in ascending
//! client-id order and broadcasts the mean, which the clients then use for
//! that step's update in place of a local `w` step.

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centralized::{
    self, advance, check_divergence, measure, objective, write_checkpoint, Anchor, Checkpoint, RunOptions,
    TrainResult, TrainState,
};
use crate::codebook::Codebook;
use crate::data::Dataset;
use crate::diagnostics::{evaluate_accuracy, RoundMetrics};
use crate::error::{ensure_dim, QupelError, Result};
use crate::losses::{self, LossModel, ObjectiveEval};
use crate::schedule::HyperParams;

/// A participant's fixed data: its loss and optional test set.
pub struct Client {
    pub id: usize,
    pub loss: Box<dyn LossModel>,
    pub test: Option<Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub train: TrainState,
    pub w_local: Vec<f64>,
}

impl ClientState {
    /// Starts with `w_i = x_i`.
    pub fn new(id: usize, x: Vec<f64>, codebook: Codebook, seed: u64) -> Result<Self> {
        let w_local = x.clone();
        Ok(ClientState {
            id,
            train: TrainState::new(x, codebook, seed, id as u64)?,
            w_local,
        })
    }

    pub fn num_centers(&self) -> usize {
        self.train.codebook.entries().first().map_or(0, |e| e.centers.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub w_global: Vec<f64>,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityEstimate {
    pub kappa_i: Vec<f64>,
    pub kappa: f64,
}

/// Local update for one step: weights and centers by the anchored
/// alternating prox step, then `w_i + eta3 lambda_p (x_i' - w_i)`.
pub fn client_local_step(cs: &ClientState, loss: &dyn LossModel, hp: &HyperParams) -> Result<ClientState> {
    let anchor = Anchor {
        w: &cs.w_local,
        lambda_p: hp.lambda_p,
    };
    let train = advance(&cs.train, loss, hp, Some(anchor))?;
    let rate = hp.eta3 * hp.lambda_p;
    let sign = if hp.w_update_away_from_x { -1.0 } else { 1.0 };
    let w_local = if rate == 0.0 {
        cs.w_local.clone()
    } else {
        cs.w_local
            .iter()
            .zip(&train.x)
            .map(|(&w, &x)| w + sign * rate * (x - w))
            .collect()
    };
    Ok(ClientState {
        id: cs.id,
        train,
        w_local,
    })
}

/// Ordered mean of equally long vectors.
fn ordered_mean<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for v in vectors {
        ensure_dim("client model", dim, v.len())?;
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    if n == 0 {
        return Err(QupelError::config("clients", "at least one client is required"));
    }
    let inv = n as f64;
    Ok(sum.into_iter().map(|s| s / inv).collect())
}

/// Averages `w_i` in ascending id order and broadcasts the mean.
pub fn sync_round(clients: &mut [ClientState], server: &mut ServerState) -> Result<()> {
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i].id);
    let dim = server.w_global.len();
    let w = ordered_mean(order.iter().map(|&i| clients[i].w_local.as_slice()), dim)?;
    for c in clients.iter_mut() {
        c.w_local.clone_from(&w);
    }
    server.w_global = w;
    server.round += 1;
    Ok(())
}

/// `kappa_i = |grad_w F_i - mean_j grad_w F_j|^2` with `grad_w F_i = lambda_p (w - x_i)`.
pub fn estimate_diversity(clients: &[ClientState], w: &[f64], lambda_p: f64) -> Result<DiversityEstimate> {
    let grads: Vec<Vec<f64>> = clients
        .iter()
        .map(|c| losses::prox_penalty_grad_w(&c.train.x, w, lambda_p))
        .collect();
    if grads.is_empty() {
        return Ok(DiversityEstimate { kappa_i: vec![], kappa: 0.0 });
    }
    let mean = ordered_mean(grads.iter().map(Vec::as_slice), w.len())?;
    let kappa_i: Vec<f64> = grads.iter().map(|g| losses::squared_distance(g, &mean)).collect();
    let kappa = kappa_i.iter().sum::<f64>() / kappa_i.len() as f64;
    Ok(DiversityEstimate { kappa_i, kappa })
}

/// Server-level record for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalMetrics {
    pub step: usize,
    /// Mean over clients of the hard-quantized test accuracy, when every client has a test set.
    pub avg_test_acc: Option<f64>,
    /// `(1/n) sum_i |w_bar - w_i|^2` with `w_bar` the mean of the local copies.
    pub mean_drift: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedResult {
    pub clients: Vec<TrainResult>,
    pub w_final: Vec<f64>,
    pub history: Vec<GlobalMetrics>,
    pub kappa_max: f64,
    /// Per-step client states, recorded only when requested.
    #[serde(skip)]
    pub trace: Vec<Vec<ClientState>>,
}

impl FederatedResult {
    /// Client records ordered by `(step, client_id)`.
    pub fn client_metrics(&self) -> Vec<RoundMetrics> {
        let mut all: Vec<RoundMetrics> = self.clients.iter().flat_map(|r| r.history.iter().cloned()).collect();
        all.sort_by_key(|m| (m.step, m.client_id));
        all
    }

    /// Time average of the recorded mean drift.
    pub fn average_drift(&self) -> f64 {
        if self.history.is_empty() {
            return 0.0;
        }
        self.history.iter().map(|h| h.mean_drift).sum::<f64>() / self.history.len() as f64
    }
}

fn validate_clients(clients: &[Client], init: &[ClientState], hp: &HyperParams) -> Result<usize> {
    hp.validate()?;
    if clients.is_empty() {
        return Err(QupelError::config("clients", "at least one client is required"));
    }
    ensure_dim("client states", clients.len(), init.len())?;
    if hp.steps > 0 && hp.tau > hp.steps {
        return Err(QupelError::config("tau", format!("{} exceeds steps = {}", hp.tau, hp.steps)));
    }
    let dim = clients[0].loss.dim();
    for (k, (c, s)) in clients.iter().zip(init).enumerate() {
        if c.id != s.id || (k > 0 && clients[k - 1].id >= c.id) {
            return Err(QupelError::config("clients", "client ids must be unique, ascending and match their states"));
        }
        ensure_dim("client model", dim, c.loss.dim())?;
        ensure_dim("client model", dim, s.train.x.len())?;
        ensure_dim("local global model", dim, s.w_local.len())?;
    }
    Ok(dim)
}

fn client_test_acc(client: &Client, params: &[f64]) -> Result<Option<f64>> {
    match &client.test {
        Some(t) => evaluate_accuracy(client.loss.as_ref(), params, t).map(Some),
        None => Ok(None),
    }
}

fn mean_drift(states: &[ClientState]) -> Result<f64> {
    let dim = states[0].w_local.len();
    let w_bar = ordered_mean(states.iter().map(|s| s.w_local.as_slice()), dim)?;
    Ok(states.iter().map(|s| losses::squared_distance(&w_bar, &s.w_local)).sum::<f64>() / states.len() as f64)
}

fn average(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Options for [`run_qupel`] beyond those of a single run.
#[derive(Debug, Clone, Copy, Default)]
pub struct FederatedOptions {
    /// Keep every step's client states in the result.
    pub keep_trace: bool,
}

pub fn run_qupel(
    clients: &[Client],
    init: Vec<ClientState>,
    hp: &HyperParams,
    opts: &RunOptions<'_>,
    fed: FederatedOptions,
) -> Result<FederatedResult> {
    let dim = validate_clients(clients, &init, hp)?;
    let mut states = init;
    let mut server = ServerState {
        w_global: vec![0.0; dim],
        round: 0,
    };
    let initial: Vec<ObjectiveEval> = clients
        .iter()
        .zip(&states)
        .map(|(c, s)| {
            let anchor = Anchor { w: &s.w_local, lambda_p: hp.lambda_p };
            objective(c.loss.as_ref(), &s.train.x, &s.train.codebook, hp.quant, hp.lambda_at(0), Some(anchor))
        })
        .collect::<Result<_>>()?;
    let mut histories: Vec<Vec<RoundMetrics>> = vec![Vec::new(); clients.len()];
    let mut history = Vec::new();
    let mut trace = Vec::new();
    let mut kappa_max: f64 = 0.0;

    for t in 0..hp.steps {
        let sync = t % hp.tau == 0;
        if sync {
            sync_round(&mut states, &mut server)?;
        }
        let next: Vec<ClientState> = clients
            .par_iter()
            .zip(states.par_iter())
            .map(|(c, s)| {
                let mut n = client_local_step(s, c.loss.as_ref(), hp)?;
                if sync {
                    // The broadcast value stands in for this step's local w update.
                    n.w_local.clone_from(&s.w_local);
                }
                Ok(n)
            })
            .collect::<Result<_>>()?;

        let record = opts.records(t + 1, hp.steps);
        if record {
            let drift_bar = ordered_mean(next.iter().map(|s| s.w_local.as_slice()), dim)?;
            let per_client: Vec<RoundMetrics> = clients
                .par_iter()
                .zip(states.par_iter().zip(next.par_iter()))
                .map(|(c, (prev, n))| {
                    let anchor = Anchor { w: &prev.w_local, lambda_p: hp.lambda_p };
                    let mut m = measure(
                        c.loss.as_ref(),
                        &prev.train,
                        &n.train,
                        hp,
                        Some(anchor),
                        c.test.as_ref(),
                        Some(c.id),
                        opts.subgradient_gap,
                    )?;
                    m.w_drift = losses::squared_distance(&n.w_local, &drift_bar);
                    Ok(m)
                })
                .collect::<Result<_>>()?;
            let div = estimate_diversity(&next, &server.w_global, hp.lambda_p)?;
            kappa_max = kappa_max.max(div.kappa);
            let accs: Vec<Option<f64>> = per_client.iter().map(|m| m.test_acc).collect();
            for (k, mut m) in per_client.into_iter().enumerate() {
                check_divergence(t, m.objective.total, initial[k].total)?;
                m.kappa_round = Some(div.kappa_i[k]);
                histories[k].push(m);
            }
            let g = GlobalMetrics {
                step: t + 1,
                avg_test_acc: average(&accs),
                mean_drift: mean_drift(&next)?,
                kappa: div.kappa,
            };
            debug!("step {} drift {:e} kappa {:e}", g.step, g.mean_drift, g.kappa);
            history.push(g);
        }
        if let Some(spec) = &opts.checkpoint {
            if spec.every > 0 && (t + 1) % spec.every == 0 {
                for s in &next {
                    write_checkpoint(spec, &format!("client{}", s.id), &Checkpoint::of(&s.train, hp))?;
                }
            }
        }
        if fed.keep_trace {
            trace.push(next.clone());
        }
        states = next;
    }

    let w_final = ordered_mean(states.iter().map(|s| s.w_local.as_slice()), dim)?;
    let results = states
        .into_iter()
        .zip(histories)
        .zip(initial)
        .map(|((s, h), init)| centralized::finish(s.train, init, h))
        .collect::<Result<_>>()?;
    Ok(FederatedResult {
        clients: results,
        w_final,
        history,
        kappa_max,
        trace,
    })
}

/// Independent centralized runs, one per client, on each client's own data.
pub fn run_local_only(
    clients: &[Client],
    init: Vec<ClientState>,
    hp: &HyperParams,
    opts: &RunOptions<'_>,
) -> Result<Vec<TrainResult>> {
    if clients.is_empty() {
        return Ok(Vec::new());
    }
    validate_clients(clients, &init, hp)?;
    clients
        .par_iter()
        .zip(init.into_par_iter())
        .map(|(c, s)| {
            let client_opts = RunOptions {
                seed: opts.seed,
                test: c.test.as_ref(),
                record_every: opts.record_every,
                subgradient_gap: opts.subgradient_gap,
                checkpoint: None,
            };
            let mut r = run_single(c.loss.as_ref(), s.train, hp, &client_opts)?;
            for m in &mut r.history {
                m.client_id = Some(c.id);
            }
            Ok(r)
        })
        .collect()
}

fn run_single(loss: &dyn LossModel, mut state: TrainState, hp: &HyperParams, opts: &RunOptions<'_>) -> Result<TrainResult> {
    let initial = objective(loss, &state.x, &state.codebook, hp.quant, hp.lambda_at(0), None)?;
    let mut history = Vec::new();
    for _ in 0..hp.steps {
        let next = centralized::centralized_step(&state, loss, hp)?;
        if opts.records(next.step, hp.steps) {
            let m = measure(loss, &state, &next, hp, None, opts.test, None, opts.subgradient_gap)?;
            check_divergence(state.step, m.objective.total, initial.total)?;
            history.push(m);
        }
        state = next;
    }
    centralized::finish(state, initial, history)
}

/// Result of federated averaging: one full-precision global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedAvgResult {
    pub w_final: Vec<f64>,
    /// Per-client records of `f_i` at the client's current iterate.
    pub history: Vec<RoundMetrics>,
    pub global: Vec<GlobalMetrics>,
}

/// Local gradient steps on the plain `f_i`, with the models replaced by
/// their ordered mean every `tau` steps (starting at step 0).
pub fn run_fedavg(clients: &[Client], init_w: Vec<f64>, hp: &HyperParams, opts: &RunOptions<'_>) -> Result<FedAvgResult> {
    hp.validate()?;
    if clients.is_empty() {
        return Err(QupelError::config("clients", "at least one client is required"));
    }
    let dim = clients[0].loss.dim();
    ensure_dim("initial global model", dim, init_w.len())?;
    for c in clients {
        ensure_dim("client model", dim, c.loss.dim())?;
    }
    let mut xs: Vec<Vec<f64>> = vec![init_w; clients.len()];
    let initial: Vec<f64> = clients.iter().zip(&xs).map(|(c, x)| c.loss.value(x)).collect();
    let mut history = Vec::new();
    let mut global = Vec::new();
    for t in 0..hp.steps {
        if t % hp.tau == 0 {
            let w = ordered_mean(xs.iter().map(Vec::as_slice), dim)?;
            xs.iter_mut().for_each(|x| x.clone_from(&w));
        }
        let next: Vec<Vec<f64>> = clients
            .par_iter()
            .zip(xs.par_iter())
            .map(|(c, x)| {
                let g = c.loss.gradient(x);
                x.iter().zip(&g).map(|(xi, gi)| xi - hp.eta1 * gi).collect()
            })
            .collect();
        if opts.records(t + 1, hp.steps) {
            let mut accs = Vec::with_capacity(clients.len());
            for (k, (c, x)) in clients.iter().zip(&next).enumerate() {
                let f = c.loss.value(x);
                check_divergence(t, f, initial[k])?;
                let acc = client_test_acc(c, x)?;
                accs.push(acc);
                history.push(RoundMetrics {
                    step: t + 1,
                    client_id: Some(c.id),
                    objective: ObjectiveEval { f_x: f, f_q: 0.0, reg: 0.0, prox_penalty: 0.0, total: f },
                    stationarity_gap: losses::squared_distance(&xs[k], x) / (hp.eta1 * hp.eta1),
                    gap_subgrad: None,
                    w_drift: 0.0,
                    quant_error: 0.0,
                    test_acc: acc,
                    kappa_round: None,
                });
            }
            global.push(GlobalMetrics {
                step: t + 1,
                avg_test_acc: average(&accs),
                mean_drift: 0.0,
                kappa: 0.0,
            });
        }
        xs = next;
    }
    let w_final = ordered_mean(xs.iter().map(Vec::as_slice), dim)?;
    Ok(FedAvgResult { w_final, history, global })
}

/// Mean test accuracy of `params_i` over clients with test sets.
pub fn average_accuracy<'a>(clients: &[Client], params: impl Iterator<Item = &'a [f64]>) -> Result<Option<f64>> {
    let accs: Vec<Option<f64>> = clients
        .iter()
        .zip(params)
        .map(|(c, p)| client_test_acc(c, p))
        .collect::<Result<_>>()?;
    Ok(average(&accs))
}
