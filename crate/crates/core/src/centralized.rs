//! Alternating proximal gradient over weights and centers, with a
//! fine-tuning phase that ties quantized weights to their centers.

use std::path::PathBuf;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::data::Dataset;
use crate::diagnostics::{evaluate_accuracy, RoundMetrics};
use crate::error::{ensure_dim, ensure_finite, QupelError, Result};
use crate::losses::{self, LossModel, ObjectiveEval};
use crate::proxops::ProxParams;
use crate::quantizer::QuantConfig;
use crate::rng::{derive_seed, stream, Rng};
use crate::schedule::HyperParams;

/// Iterate of one model: weights, centers and minibatch generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub x: Vec<f64>,
    pub codebook: Codebook,
    /// Assignments frozen at the start of fine-tuning.
    pub frozen: Option<Vec<Vec<usize>>>,
    pub rng: Rng,
    /// Center updates that had to be re-sorted so far.
    pub reorders: usize,
}

impl TrainState {
    pub fn new(x: Vec<f64>, codebook: Codebook, seed: u64, client: u64) -> Result<Self> {
        ensure_dim("initial x", codebook.dim(), x.len())?;
        ensure_finite(&x, "initial x")?;
        Ok(TrainState {
            step: 0,
            x,
            codebook,
            frozen: None,
            rng: Rng::seed_from(derive_seed(seed, stream::MINIBATCH, client)),
            reorders: 0,
        })
    }
}

/// Proximity term `(lambda_p / 2)|x - w|^2` pulling a client toward its copy of the global model.
#[derive(Debug, Clone, Copy)]
pub struct Anchor<'a> {
    pub w: &'a [f64],
    pub lambda_p: f64,
}

impl Anchor<'_> {
    fn add_grad(&self, x: &[f64], g: &mut [f64]) {
        if self.lambda_p != 0.0 {
            for ((gi, &xi), &wi) in g.iter_mut().zip(x).zip(self.w) {
                *gi += self.lambda_p * (xi - wi);
            }
        }
    }
}

fn loss_grad(loss: &dyn LossModel, x: &[f64], batch: Option<&[usize]>) -> Vec<f64> {
    match batch {
        Some(b) => loss.batch_gradient(x, b),
        None => loss.gradient(x),
    }
}

fn draw_batch(loss: &dyn LossModel, hp: &HyperParams, rng: &mut Rng) -> Option<Vec<usize>> {
    let b = hp.minibatch?;
    let n = loss.num_samples();
    if n == 0 || b >= n {
        return None;
    }
    let mut batch = rng.choose_distinct(n, b);
    batch.sort_unstable();
    Some(batch)
}

/// One iteration at step `state.step`: the alternating prox update, or the
/// tied update once fine-tuning has started.
pub fn advance(
    state: &TrainState,
    loss: &dyn LossModel,
    hp: &HyperParams,
    anchor: Option<Anchor<'_>>,
) -> Result<TrainState> {
    let t = state.step;
    let mut next = state.clone();
    let batch = draw_batch(loss, hp, &mut next.rng);
    let batch = batch.as_deref();
    if hp.in_fine_tune(t) {
        fine_tune_update(&mut next, loss, hp, anchor, batch)?;
    } else {
        prox_update(&mut next, loss, hp, anchor, batch)?;
    }
    next.step = t + 1;
    if let Some(i) = next.x.iter().position(|v| !v.is_finite()) {
        return Err(QupelError::Diverged {
            step: t,
            detail: format!("x[{i}] = {}; previous x[{i}] = {}", next.x[i], state.x[i]),
        });
    }
    Ok(next)
}

fn prox_update(
    s: &mut TrainState,
    loss: &dyn LossModel,
    hp: &HyperParams,
    anchor: Option<Anchor<'_>>,
    batch: Option<&[usize]>,
) -> Result<()> {
    let t = s.step;
    let cfg = hp.quant;
    let lambda = hp.lambda_at(t);

    // x-step: gradient of f(x) + f(Q~_c(x)) (+ proximity), then soft thresholding.
    let q = s.codebook.quantize(&s.x, cfg)?;
    let mut g = loss_grad(loss, &s.x, batch);
    let through = s.codebook.vjp_x(&s.x, cfg, &loss_grad(loss, &q, batch))?;
    for (gi, v) in g.iter_mut().zip(&through) {
        *gi += v;
    }
    if let Some(a) = anchor {
        a.add_grad(&s.x, &mut g);
    }
    let y: Vec<f64> = s.x.iter().zip(&g).map(|(xi, gi)| xi - hp.eta1 * gi).collect();
    let x_new = s.codebook.prox_x(&y, ProxParams::new(hp.eta1, lambda)?)?;

    // c-step at the new weights and old centers.
    let eta2 = hp.eta2_at(t);
    if eta2 > 0.0 {
        let q_new = s.codebook.quantize(&x_new, cfg)?;
        let h = s.codebook.vjp_c(&x_new, cfg, &loss_grad(loss, &q_new, batch))?;
        let mu: Vec<Vec<f64>> = s
            .codebook
            .center_values()
            .into_iter()
            .zip(&h)
            .map(|(c, hc)| c.iter().zip(hc).map(|(cj, hj)| cj - eta2 * hj).collect())
            .collect();
        let (cb, reordered) =
            s.codebook
                .prox_c(&mu, &x_new, ProxParams::new(eta2, lambda)?, hp.center_pull, hp.c_max)?;
        s.codebook = cb;
        s.reorders += usize::from(reordered);
    }
    s.x = x_new;
    Ok(())
}

fn tie_to_centers(x: &mut [f64], codebook: &Codebook, assigned: &[Vec<usize>]) {
    for (e, a) in codebook.entries().iter().zip(assigned) {
        let c = e.centers.values();
        for (xi, &j) in x[e.range()].iter_mut().zip(a) {
            *xi = c[j];
        }
    }
}

fn fine_tune_update(
    s: &mut TrainState,
    loss: &dyn LossModel,
    hp: &HyperParams,
    anchor: Option<Anchor<'_>>,
    batch: Option<&[usize]>,
) -> Result<()> {
    if s.frozen.is_none() {
        let a = s.codebook.assignments(&s.x)?;
        tie_to_centers(&mut s.x, &s.codebook, &a);
        s.frozen = Some(a);
    }
    let assigned = s.frozen.clone().expect("assignments frozen above");
    // With tied weights Q_c(x) = x, so the smooth part is 2 f(x) (+ proximity).
    let mut g: Vec<f64> = loss_grad(loss, &s.x, batch).into_iter().map(|v| 2.0 * v).collect();
    if let Some(a) = anchor {
        a.add_grad(&s.x, &mut g);
    }
    let eta2 = hp.fine_tune_eta2.unwrap_or_else(|| hp.eta2_at(s.step));
    if eta2 > 0.0 {
        let hc = s.codebook.hard_grad_c_fixed(&assigned, &g)?;
        let raw: Vec<Vec<f64>> = s
            .codebook
            .center_values()
            .into_iter()
            .zip(&hc)
            .map(|(c, h)| c.iter().zip(h).map(|(cj, hj)| cj - eta2 * hj).collect())
            .collect();
        let (cb, reordered) = s.codebook.settle(raw, hp.c_max)?;
        s.codebook = cb;
        s.reorders += usize::from(reordered);
    }
    let mask = s.codebook.quantized_mask();
    for ((xi, gi), &quantized) in s.x.iter_mut().zip(&g).zip(&mask) {
        if !quantized {
            *xi -= hp.eta1 * gi;
        }
    }
    tie_to_centers(&mut s.x, &s.codebook, &assigned);
    Ok(())
}

/// One step of the centralized scheme.
pub fn centralized_step(state: &TrainState, loss: &dyn LossModel, hp: &HyperParams) -> Result<TrainState> {
    advance(state, loss, hp, None)
}

/// Prox-residual stationarity measure `|z' - z|^2 / min(eta1, eta2)^2`,
/// where the center part is dropped when centers are frozen.
pub fn stationarity_gap(
    x_prev: &[f64],
    x_next: &[f64],
    c_prev: &Codebook,
    c_next: &Codebook,
    hp: &HyperParams,
    t: usize,
) -> f64 {
    let dx = losses::squared_distance(x_prev, x_next);
    let eta2 = hp.eta2_at(t);
    if eta2 == 0.0 {
        return dx / (hp.eta1 * hp.eta1);
    }
    let dc: f64 = c_prev
        .center_values()
        .iter()
        .zip(c_next.center_values())
        .map(|(a, b)| losses::squared_distance(a, &b))
        .sum();
    let eta = hp.eta1.min(eta2);
    (dx + dc) / (eta * eta)
}

/// Squared norm of `[grad_x F(x', c), grad_c F(x', c')]` with the
/// regularizer replaced by its sign-convention subgradient.
pub fn subgradient_gap(
    loss: &dyn LossModel,
    x_next: &[f64],
    c_prev: &Codebook,
    c_next: &Codebook,
    hp: &HyperParams,
    t: usize,
    anchor: Option<Anchor<'_>>,
) -> Result<f64> {
    let cfg = hp.quant;
    let lambda = hp.lambda_at(t);
    let mut gx = losses::composite_grad_x(loss, x_next, c_prev, cfg)?;
    for (gi, v) in gx.iter_mut().zip(loss.gradient(x_next)) {
        *gi += v;
    }
    for (gi, s) in gx.iter_mut().zip(c_prev.subgrad_x(x_next)?) {
        *gi += lambda * s;
    }
    if let Some(a) = anchor {
        a.add_grad(x_next, &mut gx);
    }
    let mut total: f64 = gx.iter().map(|v| v * v).sum();
    if hp.eta2_at(t) > 0.0 && !hp.in_fine_tune(t) {
        let gc = losses::composite_grad_c(loss, x_next, c_next, cfg)?;
        for (g, s) in gc.iter().zip(c_next.subgrad_c(x_next)?) {
            total += g.iter().zip(&s).map(|(a, b)| (a + lambda * b).powi(2)).sum::<f64>();
        }
    }
    Ok(total)
}

/// Objective of a single model at `lambda(t)`, including the proximity term when anchored.
pub fn objective(
    loss: &dyn LossModel,
    x: &[f64],
    codebook: &Codebook,
    cfg: QuantConfig,
    lambda: f64,
    anchor: Option<Anchor<'_>>,
) -> Result<ObjectiveEval> {
    match anchor {
        Some(a) => losses::eval_F_i(loss, x, codebook, a.w, cfg, lambda, a.lambda_p),
        None => losses::eval_F_lambda(loss, x, codebook, cfg, lambda),
    }
}

/// Metrics for the transition `prev -> next`.
#[allow(clippy::too_many_arguments)]
pub fn measure(
    loss: &dyn LossModel,
    prev: &TrainState,
    next: &TrainState,
    hp: &HyperParams,
    anchor: Option<Anchor<'_>>,
    test: Option<&Dataset>,
    client_id: Option<usize>,
    with_subgradient: bool,
) -> Result<RoundMetrics> {
    let t = prev.step;
    let objective = objective(loss, &next.x, &next.codebook, hp.quant, hp.lambda_at(t), anchor)?;
    let gap_subgrad = if with_subgradient {
        Some(subgradient_gap(loss, &next.x, &prev.codebook, &next.codebook, hp, t, anchor)?)
    } else {
        None
    };
    let test_acc = match test {
        Some(ds) => Some(evaluate_accuracy(loss, &next.codebook.hard_quantize(&next.x)?, ds)?),
        None => None,
    };
    Ok(RoundMetrics {
        step: next.step,
        client_id,
        objective,
        stationarity_gap: stationarity_gap(&prev.x, &next.x, &prev.codebook, &next.codebook, hp, t),
        gap_subgrad,
        w_drift: 0.0,
        quant_error: next.codebook.quant_error(&next.x)?,
        test_acc,
        kappa_round: None,
    })
}

/// Snapshot written every `every` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub x: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub rng_state: Rng,
    pub hyperparams_hash: String,
}

impl Checkpoint {
    pub fn of(state: &TrainState, hp: &HyperParams) -> Self {
        Checkpoint {
            step: state.step,
            x: state.x.clone(),
            c: state.codebook.center_values(),
            rng_state: state.rng.clone(),
            hyperparams_hash: hp.hash(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CheckpointSpec {
    pub every: usize,
    pub dir: PathBuf,
}

/// Run-level options that do not affect the iterates.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub seed: u64,
    pub test: Option<&'a Dataset>,
    /// Record metrics every this many steps (and at the last step); 0 means 1.
    pub record_every: usize,
    pub subgradient_gap: bool,
    pub checkpoint: Option<CheckpointSpec>,
}

impl RunOptions<'_> {
    pub(crate) fn records(&self, step: usize, total: usize) -> bool {
        step.is_multiple_of(self.record_every.max(1)) || step == total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub x_final: Vec<f64>,
    pub c_final: Codebook,
    /// `Q_{c_final}(x_final)`.
    pub x_hard: Vec<f64>,
    pub initial_objective: ObjectiveEval,
    pub history: Vec<RoundMetrics>,
    pub reorders: usize,
}

/// Objective growth beyond this factor of the initial value aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

pub(crate) fn check_divergence(step: usize, total: f64, initial: f64) -> Result<()> {
    if !total.is_finite() || total > DIVERGENCE_FACTOR * initial.abs().max(1e-12) {
        return Err(QupelError::Diverged {
            step,
            detail: format!("objective {total} against initial {initial}"),
        });
    }
    Ok(())
}

pub(crate) fn write_checkpoint(spec: &CheckpointSpec, name: &str, ck: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(&spec.dir)?;
    let path = spec.dir.join(format!("{name}_step{:08}.json", ck.step));
    std::fs::write(path, serde_json::to_string(ck)?)?;
    Ok(())
}

pub fn run_centralized(
    loss: &dyn LossModel,
    init_x: Vec<f64>,
    init_c: Codebook,
    hp: &HyperParams,
    opts: &RunOptions<'_>,
) -> Result<TrainResult> {
    hp.validate()?;
    ensure_dim("initial x", loss.dim(), init_x.len())?;
    let mut state = TrainState::new(init_x, init_c, opts.seed, 0)?;
    let initial = objective(loss, &state.x, &state.codebook, hp.quant, hp.lambda_at(0), None)?;
    let mut history = Vec::new();
    for _ in 0..hp.steps {
        let next = centralized_step(&state, loss, hp)?;
        if opts.records(next.step, hp.steps) {
            let m = measure(loss, &state, &next, hp, None, opts.test, None, opts.subgradient_gap)?;
            check_divergence(state.step, m.objective.total, initial.total)?;
            debug!("step {} F = {:e} gap = {:e}", m.step, m.objective.total, m.stationarity_gap);
            history.push(m);
        }
        if let Some(spec) = &opts.checkpoint {
            if spec.every > 0 && next.step % spec.every == 0 {
                write_checkpoint(spec, "centralized", &Checkpoint::of(&next, hp))?;
            }
        }
        state = next;
    }
    finish(state, initial, history)
}

pub(crate) fn finish(state: TrainState, initial: ObjectiveEval, history: Vec<RoundMetrics>) -> Result<TrainResult> {
    let x_hard = state.codebook.hard_quantize(&state.x)?;
    Ok(TrainResult {
        x_final: state.x,
        c_final: state.codebook,
        x_hard,
        initial_objective: initial,
        history,
        reorders: state.reorders,
    })
}

/// Step sizes from the smoothness and boundedness constants of the
/// composed objective, estimated for the current centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeSteps {
    pub eta1: f64,
    pub eta2: f64,
    /// Smoothness estimate of the x-block, `1 / (2 eta1)`.
    pub l_x: f64,
    /// Smoothness estimate of the c-block, `1 / (2 eta2)`.
    pub l_c: f64,
}

/// Requires a loss that reports its smoothness and gradient bound.
/// `region` is the interval assumed to contain every center during the
/// run; it defaults to the hull of the current centers.
///
/// Soft mode uses, with span `s = c_m - c_1`, sharpness `P` and `n`
/// quantized coordinates: `l_Q1 = P s / 4`, `G_Q1 = sqrt(n) l_Q1`,
/// `L_Q1 = P^2 s / (6 sqrt 3)`, `b = 1 + P s / 4`, `G_Q2 = l_Q2 = sqrt(n) b`,
/// `L_Q2 = sqrt(n) ((m - 1) P / 4 + 0.0481 s P^2)`. Then
/// `eta1 = 1 / (2 (L + G L_Q1 + G_Q1 L l_Q1 + 2 lambda_p))` and
/// `eta2 = 1 / (2 (G L_Q2 + G_Q2 L l_Q2))`. Hard mode uses
/// `eta1 = 1 / (2 (L + lambda_p))` and `eta2 = 1 / (2 L n)`.
pub fn safe_step_sizes(
    loss: &dyn LossModel,
    codebook: &Codebook,
    cfg: QuantConfig,
    lambda_p: f64,
    region: Option<(f64, f64)>,
) -> Result<SafeSteps> {
    let l = loss
        .smoothness()
        .ok_or_else(|| QupelError::config("safe_steps", "loss does not report a smoothness constant"))?;
    let n = codebook.entries().iter().map(|e| e.len).sum::<usize>().max(1) as f64;
    let (mut lo, mut hi, mut span, mut m) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 1usize);
    for e in codebook.entries() {
        let v = e.centers.values();
        lo = lo.min(v[0]);
        hi = hi.max(v[v.len() - 1]);
        span = span.max(e.centers.span());
        m = m.max(v.len());
    }
    if !lo.is_finite() {
        lo = -1.0;
        hi = 1.0;
    }
    if let Some((a, b)) = region {
        lo = a.min(lo);
        hi = b.max(hi);
        span = span.max(hi - lo);
    }
    let (eta1, eta2) = if cfg.hard_limit {
        (1.0 / (2.0 * (l + lambda_p)), 1.0 / (2.0 * l * n))
    } else {
        let g = loss
            .gradient_bound(lo, hi)
            .ok_or_else(|| QupelError::config("safe_steps", "loss does not report a gradient bound"))?;
        let p = cfg.sharpness;
        let root_n = n.sqrt();
        let l_q1 = p * span / 4.0;
        let g_q1 = root_n * l_q1;
        let big_l_q1 = p * p * span / (6.0 * 3f64.sqrt());
        let b = 1.0 + p * span / 4.0;
        let g_q2 = root_n * b;
        let big_l_q2 = root_n * ((m as f64 - 1.0) * p / 4.0 + 0.0481 * span * p * p);
        let eta1 = 1.0 / (2.0 * (l + g * big_l_q1 + g_q1 * l * l_q1 + 2.0 * lambda_p));
        let denom2 = g * big_l_q2 + g_q2 * l * g_q2;
        let eta2 = if denom2 > 0.0 { 1.0 / (2.0 * denom2) } else { 1.0 / (2.0 * l * n) };
        (eta1, eta2)
    };
    Ok(SafeSteps {
        eta1,
        eta2,
        l_x: 1.0 / (2.0 * eta1),
        l_c: 1.0 / (2.0 * eta2),
    })
}

/// `m` quantile centers per quantized group of the loss's layout.
pub fn init_codebook(loss: &dyn LossModel, x: &[f64], m: usize, c_max: f64) -> Result<Codebook> {
    Codebook::init_quantiles(&loss.layout(), x, m, c_max)
}

/// Seeded `uniform(-0.5, 0.5)` initial weights.
pub fn init_weights(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::seed_from(derive_seed(seed, stream::INIT, 0));
    (0..dim).map(|_| rng.uniform_range(-0.5, 0.5)).collect()
}
