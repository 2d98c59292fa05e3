//! Subcommand implementations and their output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use qupel::diagnostics::{export_metrics, gradcheck_suite, GradcheckOptions, MetricsFormat};
use qupel::experiment::{run_mode, ClientSummary, Mode, ModeOutcome};

use crate::config::{CompareConfig, RunConfig};
use crate::error::CliError;

pub const SEED_ENV: &str = "QUPEL_SEED";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}: expected an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

#[derive(Serialize)]
struct Summary<'a> {
    mode: &'static str,
    seed: u64,
    avg_test_acc: Option<f64>,
    final_gap: Option<f64>,
    average_drift: Option<f64>,
    hyperparams_hash: String,
    clients: &'a [ClientSummary],
}

fn summary_csv(rows: &[ClientSummary]) -> String {
    let mut s = String::from("client_id,bits,acc_fp_eval,acc_quantized\n");
    for r in rows {
        let _ = writeln!(s, "{},{:?},{},{}", r.client_id, r.bits, opt(r.acc_fp_eval), opt(r.acc_quantized));
    }
    s
}

fn manifest(cfg: &RunConfig, out: &ModeOutcome) -> Value {
    let mut v = cfg.to_value();
    let m_i: Vec<usize> = out.results.iter().map(|r| r.c_final.num_centers()).collect();
    v["run_info"] = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "effective_hyper": out.hyper,
        "hyperparams_hash": out.hyper.hash(),
        "clients": out.summaries.len(),
        "m_i": m_i,
        "partition": out.partition,
    });
    v
}

/// Runs one experiment and writes `manifest.json`, `metrics.jsonl`,
/// `summary.csv` and `summary.json` into the output directory.
pub fn run(config: &Path, out_flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed_override()? {
        info!("seed {} overridden by {SEED_ENV}={seed}", cfg.experiment.seed);
        cfg.experiment.seed = seed;
    }
    let dir = out_flag
        .or_else(|| cfg.out.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("qupel-out/{}-seed{}", cfg.mode.name(), cfg.experiment.seed)));
    info!("running mode {} with seed {}", cfg.mode.name(), cfg.experiment.seed);
    let outcome = run_mode(&cfg.experiment, cfg.mode)?;
    prepare_dir(&dir)?;

    let manifest = serde_json::to_string_pretty(&manifest(&cfg, &outcome)).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), &manifest)?;
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| io_err(&metrics, e))?;
    }
    export_metrics(&outcome.metrics, &metrics, MetricsFormat::Jsonl)?;
    write_file(&dir.join("summary.csv"), &summary_csv(&outcome.summaries))?;
    let summary = Summary {
        mode: outcome.mode.name(),
        seed: outcome.seed,
        avg_test_acc: outcome.avg_test_acc,
        final_gap: outcome.final_gap,
        average_drift: outcome.average_drift,
        hyperparams_hash: outcome.hyper.hash(),
        clients: &outcome.summaries,
    };
    write_file(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;

    println!(
        "mode {} seed {}: avg_test_acc {} final_gap {} -> {}",
        outcome.mode.name(),
        outcome.seed,
        outcome.avg_test_acc.map_or("n/a".into(), |a| format!("{a:.4}")),
        outcome.final_gap.map_or("n/a".into(), |g| format!("{g:.3e}")),
        dir.display()
    );
    Ok(dir)
}

pub fn gradcheck(tol: Option<f64>, instances: usize, inject_wrong_sign: bool) -> Result<(), CliError> {
    let opts = GradcheckOptions { instances, tol, inject_wrong_sign, ..GradcheckOptions::default() };
    let results = gradcheck_suite(opts);
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{} {:<28} n={} max_err={:.3e} tol={:.1e}",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.instances,
            r.max_err,
            r.tol
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed checks: {}", failed.join(", "))))
    }
}

/// Accuracies for every (mode, seed), with the verdict that the listed
/// mode order is strictly decreasing in accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// `accuracy[s][k]` for seed `s` and mode `k`.
    pub accuracy: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub ordering_holds: Vec<bool>,
    pub verdict: String,
}

fn compare_verdict(modes: &[Mode], seeds: &[u64], accuracy: Vec<Vec<f64>>) -> Comparison {
    let holds: Vec<bool> = accuracy.iter().map(|row| row.windows(2).all(|w| w[0] > w[1])).collect();
    let means: Vec<f64> = (0..modes.len())
        .map(|k| accuracy.iter().map(|row| row[k]).sum::<f64>() / accuracy.len() as f64)
        .collect();
    let order = modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(" > ");
    let verdict = format!(
        "ordering {order} held in {}/{} seeds",
        holds.iter().filter(|h| **h).count(),
        seeds.len()
    );
    Comparison { modes: modes.to_vec(), seeds: seeds.to_vec(), accuracy, means, ordering_holds: holds, verdict }
}

/// Runs every listed mode on every seed (identical partitions per seed) and
/// writes `comparison.csv` and `comparison.json`.
pub fn compare(config: &Path, out_flag: Option<PathBuf>) -> Result<Comparison, CliError> {
    let (cfg, spec) = CompareConfig::load(config)?;
    let dir = out_flag
        .or_else(|| cfg.out.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("qupel-out/compare"));
    let mut accuracy = Vec::new();
    let mut csv = String::from("mode,seed,avg_test_acc\n");
    for &seed in &cfg.seeds {
        let s = spec.with_seed(seed);
        let mut row = Vec::new();
        for &mode in &cfg.modes {
            let o = run_mode(&s, mode)?;
            let acc = o.avg_test_acc.ok_or_else(|| {
                CliError::Config("compare needs a dataset with test data for every client".into())
            })?;
            info!("seed {seed} {}: {acc:.4}", mode.name());
            let _ = writeln!(csv, "{},{seed},{acc:?}", mode.name());
            row.push(acc);
        }
        accuracy.push(row);
    }
    let cmp = compare_verdict(&cfg.modes, &cfg.seeds, accuracy);
    prepare_dir(&dir)?;
    write_file(&dir.join("comparison.csv"), &csv)?;
    write_file(&dir.join("comparison.json"), &serde_json::to_string_pretty(&cmp).expect("comparison serializes"))?;
    for (k, m) in cmp.modes.iter().enumerate() {
        println!("{:<12} mean avg_test_acc {:.4}", m.name(), cmp.means[k]);
    }
    println!("{}", cmp.verdict);
    Ok(cmp)
}
