//! JSON run and compare configurations.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use qupel::experiment::{ExperimentSpec, Mode};

use crate::error::CliError;

/// Keys a run config may carry besides the experiment itself.
const RUN_KEYS: [&str; 3] = ["mode", "out", "run_info"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub experiment: ExperimentSpec,
    /// Output directory; the `--out` flag takes precedence.
    pub out: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub base: Value,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<String>,
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn parse_experiment(value: Value) -> Result<ExperimentSpec, CliError> {
    let spec: ExperimentSpec = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    spec.hyper.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

impl RunConfig {
    pub fn from_value(mut value: Value) -> Result<Self, CliError> {
        let obj = value
            .as_object_mut()
            .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        let mode = obj
            .remove("mode")
            .ok_or_else(|| CliError::Config("missing field `mode`".into()))?;
        let mode: Mode = serde_json::from_value(mode).map_err(|e| CliError::Config(format!("mode: {e}")))?;
        let out = match obj.remove("out") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(CliError::Config("out: expected a string".into())),
        };
        for key in RUN_KEYS {
            obj.remove(key);
        }
        let experiment = parse_experiment(value)?;
        check_mode_fields(mode, &experiment)?;
        Ok(RunConfig { mode, experiment, out })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_value(read_json(path)?)
    }

    /// The config as JSON, with the experiment fields at top level.
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.experiment).expect("experiment spec serializes");
        let obj = v.as_object_mut().expect("experiment spec is an object");
        obj.insert("mode".into(), serde_json::to_value(self.mode).expect("mode serializes"));
        v
    }
}

fn check_mode_fields(mode: Mode, spec: &ExperimentSpec) -> Result<(), CliError> {
    let data_model = !matches!(spec.model, qupel::experiment::ModelSpec::Quadratic { .. });
    if data_model && spec.dataset.is_none() {
        return Err(CliError::Config("invalid value for `dataset`: required for this model".into()));
    }
    if data_model && mode != Mode::Centralized && spec.partition.is_none() {
        return Err(CliError::Config(format!(
            "invalid value for `partition`: required for mode {}",
            mode.name()
        )));
    }
    if let (Some(list), Some(p)) = (&spec.centers.per_client, &spec.partition) {
        if mode != Mode::Centralized && list.len() != p.n_clients {
            return Err(CliError::Config(format!(
                "invalid value for `centers.per_client`: has {} entries for {} clients",
                list.len(),
                p.n_clients
            )));
        }
    }
    Ok(())
}

impl CompareConfig {
    pub fn load(path: &Path) -> Result<(Self, ExperimentSpec), CliError> {
        let cfg: CompareConfig =
            serde_json::from_value(read_json(path)?).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.modes.is_empty() {
            return Err(CliError::Config("invalid value for `modes`: at least one mode is required".into()));
        }
        if cfg.seeds.is_empty() {
            return Err(CliError::Config("invalid value for `seeds`: at least one seed is required".into()));
        }
        let spec = parse_experiment(cfg.base.clone())?;
        for &m in &cfg.modes {
            check_mode_fields(m, &spec)?;
        }
        Ok((cfg, spec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({"mode": "centralized",
               "model": {"kind": "quadratic", "targets": [[0.1, 0.9]]},
               "hyper": {"eta1": 0.5, "eta2": 0.25, "steps": 10}})
    }

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::from_value(minimal()).unwrap();
        assert_eq!(cfg.mode, Mode::Centralized);
        let again = RunConfig::from_value(cfg.to_value()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn missing_eta1_names_field() {
        let mut v = minimal();
        v["hyper"].as_object_mut().unwrap().remove("eta1");
        let err = RunConfig::from_value(v).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("eta1"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let mut v = minimal();
        v["hyper"]["eta_one"] = json!(0.1);
        assert!(RunConfig::from_value(v).unwrap_err().to_string().contains("eta_one"));
    }

    #[test]
    fn federated_mode_needs_partition() {
        let v = json!({"mode": "qupel",
                       "dataset": {"kind": "blobs", "classes": 3, "dim": 2, "per_class": 10, "spread": 0.5},
                       "model": {"kind": "logistic"},
                       "hyper": {"eta1": 0.5, "eta2": 0.25, "steps": 10}});
        assert!(RunConfig::from_value(v).unwrap_err().to_string().contains("partition"));
    }

    #[test]
    fn per_client_length_must_match() {
        let v = json!({"mode": "qupel",
                       "dataset": {"kind": "blobs", "classes": 3, "dim": 2, "per_class": 10, "spread": 0.5},
                       "model": {"kind": "mlp", "hidden": [3]},
                       "partition": {"n_clients": 3, "k": 2},
                       "centers": {"per_client": [2, 4]},
                       "hyper": {"eta1": 0.5, "eta2": 0.25, "steps": 10}});
        assert!(RunConfig::from_value(v).unwrap_err().to_string().contains("centers.per_client"));
    }
}
