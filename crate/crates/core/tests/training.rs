use qupel::centralized::{init_codebook, init_weights, run_centralized, safe_step_sizes};
use qupel::data::{make_blobs_split, partition_noniid, BlobSpec};
use qupel::diagnostics::{export_metrics, read_jsonl, MetricsFormat};
use qupel::federated::{run_local_only, run_qupel, Client, ClientState, FederatedOptions};
use qupel::losses::{eval_F_i, MlpLoss, QuadraticLoss};
use qupel::rng::derive_seed;
use qupel::{Codebook, HyperParams, LambdaSchedule, QuantConfig, Rng, RunOptions};

fn opts(seed: u64) -> RunOptions<'static> {
    RunOptions { seed, test: None, record_every: 1, subgradient_gap: true, checkpoint: None }
}

fn mlp_clients(n: usize, seed: u64) -> (Vec<Client>, Vec<ClientState>) {
    let spec = BlobSpec { classes: 6, dim: 4, per_class: 30, spread: 0.9, center_scale: 1.0 };
    let split = make_blobs_split(spec, seed).unwrap();
    let part = partition_noniid(&split.train, n, 3, seed).unwrap();
    let tests = part.test_indices(&split.test);
    let mut clients = Vec::new();
    for (id, (idx, t)) in part.client_indices.iter().zip(&tests).enumerate() {
        let loss = MlpLoss::from_dataset(&split.train, idx, &[6], 0.01).unwrap();
        clients.push(Client { id, loss: Box::new(loss), test: Some(split.test.subset(t).unwrap()) });
    }
    let x0 = init_weights(clients[0].loss.dim(), seed);
    let states = clients
        .iter()
        .map(|c| {
            let cb = Codebook::init_quantiles(&c.loss.layout(), &x0, 4, 10.0).unwrap();
            ClientState::new(c.id, x0.clone(), cb, seed).unwrap()
        })
        .collect();
    (clients, states)
}

fn mlp_hyper() -> HyperParams {
    let mut hp = HyperParams::new(0.2, 0.02, 60);
    hp.quant = QuantConfig::soft(8.0);
    hp.lambda = LambdaSchedule::Linear { slope: 1e-3, cap: Some(0.05) };
    hp.lambda_p = 0.3;
    hp.tau = 4;
    hp.fine_tune_start = Some(45);
    hp
}

#[test]
fn centralized_run_is_deterministic() {
    let loss = QuadraticLoss::new(vec![0.1, 0.9, -0.4, 0.6], vec![1.0, 2.0, 0.5, 1.5]).unwrap();
    let x0 = init_weights(4, 3);
    let cb = init_codebook(&loss, &x0, 2, 10.0).unwrap();
    let mut hp = HyperParams::new(0.1, 0.05, 200);
    hp.quant = QuantConfig::soft(6.0);
    hp.lambda = LambdaSchedule::Linear { slope: 1e-3, cap: None };
    hp.fine_tune_start = Some(150);
    let a = run_centralized(&loss, x0.clone(), cb.clone(), &hp, &opts(3)).unwrap();
    let b = run_centralized(&loss, x0, cb, &hp, &opts(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fine_tuning_leaves_weights_on_centers() {
    let (clients, states) = mlp_clients(1, 5);
    let hp = mlp_hyper();
    let s = states.into_iter().next().unwrap();
    let r = run_centralized(clients[0].loss.as_ref(), s.train.x, s.train.codebook, &hp, &opts(5)).unwrap();
    let hard = r.c_final.hard_quantize(&r.x_final).unwrap();
    let mask = r.c_final.quantized_mask();
    let l1: f64 = (0..hard.len()).filter(|&i| mask[i]).map(|i| (hard[i] - r.x_final[i]).abs()).sum();
    assert_eq!(l1, 0.0);
    assert!(mask.iter().any(|q| !q), "biases stay exempt");
}

#[test]
fn single_client_qupel_matches_centralized() {
    let (clients, states) = mlp_clients(1, 8);
    let mut hp = mlp_hyper();
    hp.lambda_p = 0.0;
    let s = states[0].clone();
    let c = run_centralized(clients[0].loss.as_ref(), s.train.x.clone(), s.train.codebook.clone(), &hp, &opts(8)).unwrap();
    let q = run_qupel(&clients, states, &hp, &opts(8), FederatedOptions::default()).unwrap();
    assert_eq!(q.clients[0].x_final, c.x_final);
    assert_eq!(q.clients[0].c_final, c.c_final);
}

#[test]
fn zero_coupling_matches_local_training() {
    let (clients, states) = mlp_clients(3, 2);
    let mut hp = mlp_hyper();
    hp.lambda_p = 0.0;
    let q = run_qupel(&clients, states.clone(), &hp, &opts(2), FederatedOptions::default()).unwrap();
    let l = run_local_only(&clients, states, &hp, &opts(2)).unwrap();
    for (a, b) in q.clients.iter().zip(&l) {
        assert_eq!(a.x_final, b.x_final);
        assert_eq!(a.c_final, b.c_final);
        assert_eq!(a.x_hard, b.x_hard);
    }
}

#[test]
fn relabelling_clients_permutes_outputs() {
    // Two clients: the ordered mean of two vectors is exactly symmetric.
    let (clients, states) = mlp_clients(2, 4);
    let hp = mlp_hyper();
    let base = run_qupel(&clients, states.clone(), &hp, &opts(4), FederatedOptions::default()).unwrap();
    let mut swapped: Vec<Client> = clients.into_iter().rev().collect();
    let mut swapped_states: Vec<ClientState> = states.into_iter().rev().collect();
    for (k, (c, s)) in swapped.iter_mut().zip(swapped_states.iter_mut()).enumerate() {
        c.id = k;
        s.id = k;
    }
    let perm = run_qupel(&swapped, swapped_states, &hp, &opts(4), FederatedOptions::default()).unwrap();
    assert_eq!(perm.w_final, base.w_final);
    assert_eq!(perm.clients[0].x_final, base.clients[1].x_final);
    assert_eq!(perm.clients[1].c_final, base.clients[0].c_final);
    let objectives = |r: &qupel::federated::FederatedResult, k: usize| {
        r.clients[k].history.iter().map(|m| m.objective.total).collect::<Vec<_>>()
    };
    assert_eq!(objectives(&perm, 0), objectives(&base, 1));
}

#[test]
fn per_client_decrease_on_quadratics() {
    let mut rng = Rng::seed_from(21);
    let n = 4;
    let d = 5;
    let mut clients = Vec::new();
    let mut states = Vec::new();
    let cfg = QuantConfig::hard();
    let lambda_p = 0.05;
    let mut eta1 = f64::INFINITY;
    let mut eta2 = f64::INFINITY;
    for id in 0..n {
        let a: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let h: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.5, 2.0)).collect();
        let loss = QuadraticLoss::new(a, h).unwrap();
        let x0 = init_weights(d, derive_seed(21, 3, id as u64 + 1));
        let cb = init_codebook(&loss, &x0, 2, 10.0).unwrap();
        let st = safe_step_sizes(&loss, &cb, cfg, lambda_p, None).unwrap();
        eta1 = eta1.min(st.eta1);
        eta2 = eta2.min(st.eta2);
        states.push(ClientState::new(id, x0, cb, 21).unwrap());
        clients.push(Client { id, loss: Box::new(loss), test: None });
    }
    let mut hp = HyperParams::new(eta1, eta2, 300);
    hp.quant = cfg;
    hp.lambda = LambdaSchedule::Constant { value: 1e-3 };
    hp.lambda_p = lambda_p;
    hp.tau = 5;
    let init = states.clone();
    let r = run_qupel(&clients, states, &hp, &opts(21), FederatedOptions { keep_trace: true }).unwrap();
    let mut prev = init;
    let mut checked = 0;
    for step in &r.trace {
        let w_bar: Vec<f64> = (0..d).map(|j| prev.iter().map(|s| s.w_local[j]).sum::<f64>() / n as f64).collect();
        for (k, c) in clients.iter().enumerate() {
            let (p, s) = (&prev[k], &step[k]);
            let lam = 1e-3;
            let before = eval_F_i(c.loss.as_ref(), &p.train.x, &p.train.codebook, &w_bar, cfg, lam, lambda_p).unwrap().total;
            let after = eval_F_i(c.loss.as_ref(), &s.train.x, &s.train.codebook, &w_bar, cfg, lam, lambda_p).unwrap().total;
            let slack = 0.5 * lambda_p * qupel::losses::squared_distance(&p.w_local, &w_bar);
            assert!(after <= before + slack + 1e-12, "client {k}: {after} > {before} + {slack}");
            checked += 1;
        }
        prev = step.clone();
    }
    assert_eq!(checked, n * hp.steps);
}

#[test]
fn metrics_round_trip_and_append() {
    let (clients, states) = mlp_clients(2, 6);
    let hp = mlp_hyper();
    let r = run_qupel(&clients, states, &hp, &opts(6), FederatedOptions::default()).unwrap();
    let metrics = r.client_metrics();
    assert!(metrics.windows(2).all(|w| (w[0].step, w[0].client_id) < (w[1].step, w[1].client_id)));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    export_metrics(&metrics[..10], &path, MetricsFormat::Jsonl).unwrap();
    export_metrics(&metrics[10..], &path, MetricsFormat::Jsonl).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), metrics);
}

#[test]
fn smaller_k_means_less_label_overlap() {
    let spec = BlobSpec { classes: 10, dim: 2, per_class: 40, spread: 1.0, center_scale: 1.0 };
    let ds = qupel::data::make_blobs(spec, 0).unwrap();
    let overlap = |k: usize| {
        let mut total = 0.0;
        for seed in 0..100 {
            let p = partition_noniid(&ds, 10, k, seed).unwrap();
            let mut pairs = 0.0;
            let mut shared = 0.0;
            for a in 0..10 {
                for b in a + 1..10 {
                    shared += p.assignments[a].iter().filter(|c| p.assignments[b].contains(c)).count() as f64;
                    pairs += 1.0;
                }
            }
            total += shared / pairs;
        }
        total / 100.0
    };
    let o: Vec<f64> = [2, 4, 6, 8].iter().map(|&k| overlap(k)).collect();
    assert!(o.windows(2).all(|w| w[0] < w[1]), "{o:?}");
}
