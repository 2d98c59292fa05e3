//! Datasets: seeded Gaussian blobs, CSV ingestion and label-skewed
//! partitioning across clients.
//!
//! All randomness comes from [`crate::rng::Rng`] with seeds derived per
//! purpose, so a dataset or partition is a pure function of its seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, QupelError, Result};
use crate::rng::{derive_seed, stream, Rng};

/// Row-major features with class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    features: Vec<f64>,
    dim: usize,
    pub labels: Vec<usize>,
    num_classes: usize,
    /// Original label value of each class id.
    pub label_values: Vec<i64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, rows: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            ensure_dim("feature row", dim, row.len())?;
            features.extend_from_slice(row);
        }
        Self::from_flat(name, features, dim, labels, num_classes)
    }

    pub fn from_flat(
        name: impl Into<String>,
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if labels.is_empty() {
            return Err(QupelError::EmptyDataset(name));
        }
        if dim == 0 {
            return Err(QupelError::config("dataset", "feature dimension must be positive"));
        }
        ensure_dim("features", labels.len() * dim, features.len())?;
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(QupelError::NonFinite { what: "features", index: i });
        }
        if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
            return Err(QupelError::config(
                "labels",
                format!("sample {i} has label {} outside 0..{num_classes}", labels[i]),
            ));
        }
        Ok(Dataset {
            name,
            features,
            dim,
            labels,
            num_classes,
            label_values: (0..num_classes as i64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Samples at `indices`, in that order, keeping the class space.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut out = Self::from_flat(self.name.clone(), features, self.dim, labels, self.num_classes)?;
        out.label_values = self.label_values.clone();
        Ok(out)
    }

    /// Indices of samples whose label is in `classes`, ascending.
    pub fn indices_of_classes(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Stratified split: within each class a seeded shuffle puts
    /// `round(train_frac * n_c)` samples in the training part. Both index
    /// lists are ascending.
    pub fn stratified_split(&self, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(QupelError::config("train_frac", "must lie strictly between 0 and 1"));
        }
        let mut rng = Rng::seed_from(derive_seed(seed, stream::SPLIT, 0));
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in 0..self.num_classes {
            let mut idx = self.indices_of_classes(&[class]);
            rng.shuffle(&mut idx);
            let cut = (train_frac * idx.len() as f64).round() as usize;
            train.extend_from_slice(&idx[..cut]);
            test.extend_from_slice(&idx[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    /// Standard deviation of the class means around the origin.
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
}

fn default_center_scale() -> f64 {
    1.0
}

/// Train and test parts of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub train: Dataset,
    pub test: Dataset,
}

/// `classes` isotropic Gaussian clusters of `per_class` points each, samples
/// grouped by class in order. Class means are drawn first, one class at a
/// time, from `N(0, center_scale^2 I)`; each point is its mean plus
/// `spread * N(0, I)`.
pub fn make_blobs(spec: BlobSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(QupelError::config("classes", "need at least 2 classes"));
    }
    if !(spec.spread > 0.0 && spec.spread.is_finite()) {
        return Err(QupelError::config("spread", format!("must be > 0, got {}", spec.spread)));
    }
    if spec.per_class == 0 || spec.dim == 0 {
        return Err(QupelError::config("per_class", "dataset would be empty"));
    }
    let mut rng = Rng::seed_from(derive_seed(seed, stream::DATA, 0));
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| spec.center_scale * rng.normal()).collect())
        .collect();
    let mut features = Vec::with_capacity(spec.classes * spec.per_class * spec.dim);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            features.extend(mean.iter().map(|&mu| mu + spec.spread * rng.normal()));
            labels.push(class);
        }
    }
    Dataset::from_flat("blobs", features, spec.dim, labels, spec.classes)
}

/// Blobs with an 80/20 stratified train/test split.
pub fn make_blobs_split(spec: BlobSpec, seed: u64) -> Result<SplitData> {
    let ds = make_blobs(spec, seed)?;
    let (train, test) = ds.stratified_split(0.8, seed)?;
    Ok(SplitData {
        train: ds.subset(&train)?,
        test: ds.subset(&test)?,
    })
}

/// Class assignments and training indices per client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub seed: u64,
    pub k: usize,
    pub assignments: Vec<Vec<usize>>,
    #[serde(rename = "indices")]
    pub client_indices: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// Per-client test indices: the samples of `test` whose class the client holds.
    pub fn test_indices(&self, test: &Dataset) -> Vec<Vec<usize>> {
        self.assignments.iter().map(|a| test.indices_of_classes(a)).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Each client draws `k` distinct classes uniformly at random. Within a
/// class, shuffled samples are dealt in consecutive blocks to its holders in
/// ascending client id. Every client takes the same number `q` of samples
/// from each held class, where `q` is the smallest per-holder quota
/// `floor(n_c / holders_c)` over held classes, so all clients hold exactly
/// `k * q` samples. Leftovers are discarded.
pub fn partition_noniid(ds: &Dataset, n_clients: usize, k: usize, seed: u64) -> Result<Partition> {
    let classes = ds.num_classes();
    if k == 0 || k > classes {
        return Err(QupelError::config("k", format!("must be in 1..={classes}, got {k}")));
    }
    if n_clients == 0 {
        return Err(QupelError::config("n_clients", "must be positive"));
    }
    let mut rng = Rng::seed_from(derive_seed(seed, stream::PARTITION, 0));
    let assignments: Vec<Vec<usize>> = (0..n_clients)
        .map(|_| {
            let mut a = rng.choose_distinct(classes, k);
            a.sort_unstable();
            a
        })
        .collect();

    let mut holders: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (client, a) in assignments.iter().enumerate() {
        for &c in a {
            holders.entry(c).or_default().push(client);
        }
    }
    let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut quota = usize::MAX;
    let mut limiting = 0;
    for (&class, who) in &holders {
        let mut idx = ds.indices_of_classes(&[class]);
        rng.shuffle(&mut idx);
        let q = idx.len() / who.len();
        if q < quota {
            quota = q;
            limiting = class;
        }
        pools.insert(class, idx);
    }
    if quota == 0 {
        return Err(QupelError::InfeasiblePartition(format!(
            "class {limiting} has {} samples for {} clients",
            pools[&limiting].len(),
            holders[&limiting].len()
        )));
    }

    let mut client_indices = vec![Vec::with_capacity(k * quota); n_clients];
    for (class, who) in &holders {
        let pool = &pools[class];
        for (slot, &client) in who.iter().enumerate() {
            client_indices[client].extend_from_slice(&pool[slot * quota..(slot + 1) * quota]);
        }
    }
    for idx in &mut client_indices {
        idx.sort_unstable();
    }
    Ok(Partition {
        seed,
        k,
        assignments,
        client_indices,
    })
}

/// Reads `f0,...,f{d-1},label` with a header row. Integer labels are
/// remapped to `0..K` in ascending order of their value.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| QupelError::Parse { line: 1, message: e.to_string() })?;
    let header = reader
        .headers()
        .map_err(|e| QupelError::Parse { line: 1, message: e.to_string() })?
        .clone();
    let cols = header.len();
    if cols < 2 || &header[cols - 1] != "label" {
        return Err(QupelError::Parse {
            line: 1,
            message: "header must be f0,...,f{d-1},label".into(),
        });
    }
    for (j, name) in header.iter().take(cols - 1).enumerate() {
        if name != format!("f{j}") {
            return Err(QupelError::Parse {
                line: 1,
                message: format!("column {j} should be named f{j}, found `{name}`"),
            });
        }
    }
    let dim = cols - 1;
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| QupelError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != cols {
            return Err(QupelError::Parse {
                line,
                message: format!("expected {cols} columns, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().take(dim).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| QupelError::Parse {
                line,
                message: format!("column f{j}: `{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(QupelError::Parse { line, message: format!("column f{j} is not finite") });
            }
            features.push(v);
        }
        let cell = record[dim].trim();
        let label: i64 = cell.parse().map_err(|_| QupelError::Parse {
            line,
            message: format!("label `{cell}` is not an integer"),
        })?;
        raw_labels.push(label);
    }
    let mut values = raw_labels.clone();
    values.sort_unstable();
    values.dedup();
    let labels = raw_labels
        .iter()
        .map(|v| values.binary_search(v).expect("label present"))
        .collect();
    let name = path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
    let mut ds = Dataset::from_flat(name, features, dim, labels, values.len())?;
    ds.label_values = values;
    Ok(ds)
}

/// Writes the format read by [`load_csv`], using original label values.
/// Floats use the shortest representation that parses back exactly.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| QupelError::Io(e.into()))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| QupelError::Io(e.into()))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.label_values[ds.labels[i]].to_string());
        w.write_record(&rec).map_err(|e| QupelError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
