//! Shared fixtures for the criterion benches.

use qupel::centralized::init_weights;
use qupel::data::{make_blobs_split, partition_noniid, BlobSpec};
use qupel::federated::{Client, ClientState};
use qupel::{Codebook, HyperParams, LambdaSchedule, QuantConfig, Rng};

/// Sorted, evenly spaced centers in `[-1, 1]`.
pub fn even_centers(m: usize) -> qupel::CenterVector {
    let v = (0..m).map(|j| -1.0 + 2.0 * j as f64 / (m.max(2) - 1) as f64).collect();
    qupel::CenterVector::new(v).expect("ascending centers")
}

pub fn random_weights(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::seed_from(seed);
    (0..d).map(|_| rng.uniform_range(-1.5, 1.5)).collect()
}

/// MLP clients on a non-IID blob partition, with quantile-initialized codebooks.
pub fn mlp_clients(n: usize, hidden: usize, seed: u64) -> (Vec<Client>, Vec<ClientState>) {
    let spec = BlobSpec { classes: 10, dim: 10, per_class: 60, spread: 1.4, center_scale: 1.0 };
    let split = make_blobs_split(spec, seed).expect("blobs");
    let part = partition_noniid(&split.train, n, 4, seed).expect("partition");
    let tests = part.test_indices(&split.test);
    let clients: Vec<Client> = part
        .client_indices
        .iter()
        .zip(&tests)
        .enumerate()
        .map(|(id, (idx, t))| Client {
            id,
            loss: Box::new(qupel::losses::MlpLoss::from_dataset(&split.train, idx, &[hidden], 0.0).expect("mlp")),
            test: Some(split.test.subset(t).expect("test subset")),
        })
        .collect();
    let x0 = init_weights(clients[0].loss.dim(), seed);
    let states = clients
        .iter()
        .map(|c| {
            let cb = Codebook::init_quantiles(&c.loss.layout(), &x0, 4, 10.0).expect("codebook");
            ClientState::new(c.id, x0.clone(), cb, seed).expect("state")
        })
        .collect();
    (clients, states)
}

pub fn federated_hyper(steps: usize) -> HyperParams {
    let mut hp = HyperParams::new(0.2, 0.01, steps);
    hp.quant = QuantConfig::soft(10.0);
    hp.lambda = LambdaSchedule::Linear { slope: 5e-5, cap: Some(0.05) };
    hp.lambda_p = 0.2;
    hp.tau = 10;
    hp
}
