//! Datasets, synthetic Gaussian blobs, and client partitioning.

use std::collections::HashSet;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::Batch;
use crate::rng::{self, tag, SimRng};
use crate::{io, Error, Matrix, Result};

/// Labeled examples with stable ids (used to join against logits tables).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    ids: Vec<u64>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, ids: Vec<u64>) -> Result<Self> {
        if features.rows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Shape(format!(
                "{} feature rows, {} labels, {} ids",
                features.rows(),
                labels.len(),
                ids.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Validation(format!("num_classes must be at least 2, got {num_classes}")));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Validation(format!(
                "example {i} has class {l}, but num_classes is {num_classes}"
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Validation(format!("duplicate example id {dup}")));
        }
        if !features.is_finite() {
            return Err(Error::Validation("features contain non-finite values".into()));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Rows at `indices`, in that order, as a training batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::with_ids(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.ids[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Validation(format!(
                "index {i} out of range for {} examples",
                self.len()
            )));
        }
        Dataset::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            indices.iter().map(|&i| self.ids[i]).collect(),
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Example indices grouped by class, each in ascending order.
    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

/// Isotropic unit-variance Gaussian blobs around per-class means.
///
/// Each class mean is a random direction scaled to norm `class_separation`,
/// so larger separations make the classes more linearly separable.
#[derive(Debug, Clone)]
pub struct SyntheticBlobs {
    means: Vec<Vec<f64>>,
    seed: u64,
}

impl SyntheticBlobs {
    pub fn new(n_classes: usize, input_dim: usize, class_separation: f64, seed: u64) -> Result<Self> {
        if n_classes < 2 || input_dim == 0 {
            return Err(Error::Validation(
                "synthetic data needs at least 2 classes and 1 feature".into(),
            ));
        }
        if !(class_separation.is_finite() && class_separation > 0.0) {
            return Err(Error::Validation(format!(
                "class separation must be positive, got {class_separation}"
            )));
        }
        let mut rng = rng::stream(&[tag::SYNTHETIC, seed, 0]);
        let means = (0..n_classes)
            .map(|_| {
                let mut v: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                for x in &mut v {
                    *x *= class_separation / norm;
                }
                v
            })
            .collect();
        Ok(SyntheticBlobs { means, seed })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Draws `n_per_class` examples per class, class-major, with ids
    /// `first_id..`. Distinct `stream` values give independent samples.
    pub fn sample(&self, n_per_class: usize, stream: u64, first_id: u64) -> Result<Dataset> {
        if n_per_class == 0 {
            return Err(Error::Validation("n_per_class must be positive".into()));
        }
        let mut rng = rng::stream(&[tag::SYNTHETIC, self.seed, 1, stream]);
        let n_classes = self.means.len();
        let dim = self.means[0].len();
        let n = n_classes * n_per_class;
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for (c, mean) in self.means.iter().enumerate() {
            for _ in 0..n_per_class {
                data.extend(mean.iter().map(|m| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m + noise
                }));
                labels.push(c);
            }
        }
        let ids = (first_id..first_id + n as u64).collect();
        Dataset::new(Matrix::from_vec(n, dim, data)?, labels, n_classes, ids)
    }
}

/// Balanced Gaussian-blob dataset, deterministic in its arguments.
pub fn generate_synthetic(
    n_classes: usize,
    n_per_class: usize,
    input_dim: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    SyntheticBlobs::new(n_classes, input_dim, class_separation, seed)?.sample(n_per_class, 0, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Csv,
    Binary,
}

impl DatasetFormat {
    /// `.csv` files are CSV; everything else is the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Binary,
        }
    }
}

/// Loads a dataset.
///
/// CSV layout: a header row, then one example per row as `label,f0,f1,...`.
/// If the first header field is `id`, rows are `id,label,f0,...`; otherwise
/// ids are the zero-based row numbers. `num_classes` defaults to the largest
/// label plus one (at least 2) for CSV; binary files carry their own.
pub fn load_dataset(path: &Path, format: DatasetFormat, num_classes: Option<usize>) -> Result<Dataset> {
    let ds = match format {
        DatasetFormat::Binary => io::read_dataset(path)?,
        DatasetFormat::Csv => load_csv(path, num_classes)?,
    };
    if let Some(k) = num_classes {
        if k != ds.num_classes {
            return Err(Error::Validation(format!(
                "{} declares {} classes, expected {k}",
                path.display(),
                ds.num_classes
            )));
        }
    }
    Ok(ds)
}

fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let has_id = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .get(0)
        .is_some_and(|h| h.eq_ignore_ascii_case("id"));
    let skip = usize::from(has_id);

    let parse_err = |line: u64, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut dim = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(row as u64 + 2, |p| p.line());
        if record.len() < skip + 2 {
            return Err(parse_err(line, record.len() + 1, "expected a label and at least one feature".into()));
        }
        let width = record.len() - skip - 1;
        if *dim.get_or_insert(width) != width {
            return Err(parse_err(
                line,
                record.len(),
                format!("row has {width} features, earlier rows have {}", dim.unwrap()),
            ));
        }
        if has_id {
            let id = record[0]
                .parse::<u64>()
                .map_err(|e| parse_err(line, 1, format!("bad id {:?}: {e}", &record[0])))?;
            ids.push(id);
        } else {
            ids.push(row as u64);
        }
        let label = record[skip]
            .parse::<usize>()
            .map_err(|e| parse_err(line, skip + 1, format!("bad label {:?}: {e}", &record[skip])))?;
        labels.push(label);
        for col in skip + 1..record.len() {
            let v = record[col]
                .parse::<f64>()
                .map_err(|e| parse_err(line, col + 1, format!("bad feature {:?}: {e}", &record[col])))?;
            data.push(v);
        }
    }
    let dim = dim.ok_or_else(|| Error::Validation(format!("{} has no examples", path.display())))?;
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    Dataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels, k, ids)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            column: 0,
            message: format!("{kind:?}"),
        },
    }
}

/// Writes the CSV layout read by [`load_dataset`], including the id column.
pub fn write_dataset_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dataset.input_dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..dataset.len() {
        let mut rec = vec![dataset.ids[i].to_string(), dataset.labels[i].to_string()];
        // `{:?}` prints the shortest repr that parses back to the same f64
        rec.extend(dataset.features.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet { alpha: f64 },
    ClassSplit { classes_per_client: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub n_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("partition.n_clients", "must be positive"));
        }
        match self.kind {
            PartitionKind::Iid => {}
            PartitionKind::Dirichlet { alpha } => {
                if !(alpha.is_finite() && alpha > 0.0) {
                    return Err(Error::config("partition.alpha", format!("must be positive, got {alpha}")));
                }
            }
            PartitionKind::ClassSplit { classes_per_client: k } => {
                if k == 0 || k > num_classes {
                    return Err(Error::config(
                        "partition.classes_per_client",
                        format!("must lie in 1..={num_classes}, got {k}"),
                    ));
                }
                if !(self.n_clients * k).is_multiple_of(num_classes) {
                    return Err(Error::config(
                        "partition.classes_per_client",
                        format!(
                            "{} clients x {k} classes is not a multiple of {num_classes} classes",
                            self.n_clients
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Short label such as `iid`, `dir0.1` or `split2`.
    pub fn label(&self) -> String {
        match self.kind {
            PartitionKind::Iid => "iid".into(),
            PartitionKind::Dirichlet { alpha } => format!("dir{alpha}"),
            PartitionKind::ClassSplit { classes_per_client } => format!("split{classes_per_client}"),
        }
    }
}

/// Disjoint, exhaustive, non-empty per-client example index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionAssignment {
    pub per_client: Vec<Vec<usize>>,
}

impl PartitionAssignment {
    pub fn n_clients(&self) -> usize {
        self.per_client.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.per_client.iter().map(Vec::len).collect()
    }

    /// Checks disjointness, exhaustiveness over `0..n_examples`, and non-emptiness.
    pub fn validate(&self, n_examples: usize) -> Result<()> {
        let mut seen = vec![false; n_examples];
        for (c, list) in self.per_client.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Validation(format!("client {c} holds no examples")));
            }
            for &i in list {
                if i >= n_examples {
                    return Err(Error::Validation(format!(
                        "client {c} references example {i}, dataset has {n_examples}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Validation(format!("example {i} assigned twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("example {i} is not assigned")));
        }
        Ok(())
    }
}

const DIRICHLET_RETRIES: u64 = 100;

/// Splits `dataset` across clients according to `spec`.
///
/// - `Iid`: global shuffle, then contiguous chunks whose sizes differ by at most one.
/// - `Dirichlet`: per class, shares `p ~ Dir(alpha * 1)` over clients; the
///   shuffled class examples are cut by cumulative share with largest-remainder
///   rounding. If any client ends up empty the whole draw is repeated with a
///   fresh sub-seed, at most 100 times.
/// - `ClassSplit(k)`: client `i` holds classes `(k*i + j) mod C` for `j < k`;
///   each class is split evenly among its holders.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<PartitionAssignment> {
    spec.validate(dataset.num_classes())?;
    let n_clients = spec.n_clients;
    let assignment = match spec.kind {
        PartitionKind::Iid => {
            if dataset.len() < n_clients {
                return Err(Error::Partition(format!(
                    "{} examples cannot fill {n_clients} clients",
                    dataset.len()
                )));
            }
            let mut rng = rng::stream(&[tag::IID, spec.seed]);
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            PartitionAssignment {
                per_client: even_chunks(&order, n_clients),
            }
        }
        PartitionKind::Dirichlet { alpha } => dirichlet_partition(dataset, n_clients, alpha, spec.seed)?,
        PartitionKind::ClassSplit { classes_per_client } => {
            class_split(dataset, n_clients, classes_per_client, spec.seed)?
        }
    };
    assignment.validate(dataset.len())?;
    Ok(assignment)
}

/// Contiguous chunks; the first `len % parts` chunks get one extra element.
fn even_chunks(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Log of a `Gamma(alpha, 1)` draw. Small shapes use the boost
/// `G(a) = G(a + 1) * U^(1/a)` in log space so that they never underflow.
fn log_gamma_sample(alpha: f64, rng: &mut SimRng) -> f64 {
    if alpha >= 1.0 {
        let g: f64 = Gamma::new(alpha, 1.0).expect("valid gamma shape").sample(rng);
        return g.ln();
    }
    let g: f64 = Gamma::new(alpha + 1.0, 1.0).expect("valid gamma shape").sample(rng);
    // (0, 1]: avoid ln(0)
    let u: f64 = 1.0 - Uniform::new(0.0, 1.0).expect("unit interval").sample(rng);
    g.ln() + u.ln() / alpha
}

/// Symmetric Dirichlet draw computed through normalized log-gamma variates.
pub(crate) fn sample_dirichlet(alpha: f64, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let logs: Vec<f64> = (0..k).map(|_| log_gamma_sample(alpha, rng)).collect();
    let max = logs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Integer counts summing to `total` that follow `shares` with
/// largest-remainder rounding; ties go to the lower index.
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet_partition(dataset: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<PartitionAssignment> {
    let by_class = dataset.indices_by_class();
    for attempt in 0..DIRICHLET_RETRIES {
        let mut rng = rng::stream(&[tag::DIRICHLET, seed, attempt]);
        let mut per_client = vec![Vec::new(); n_clients];
        for class_indices in &by_class {
            let mut idx = class_indices.clone();
            idx.shuffle(&mut rng);
            let shares = sample_dirichlet(alpha, n_clients, &mut rng);
            let counts = largest_remainder(&shares, idx.len());
            let mut start = 0;
            for (client, &c) in counts.iter().enumerate() {
                per_client[client].extend_from_slice(&idx[start..start + c]);
                start += c;
            }
        }
        if per_client.iter().all(|c| !c.is_empty()) {
            for c in &mut per_client {
                c.sort_unstable();
            }
            return Ok(PartitionAssignment { per_client });
        }
    }
    Err(Error::Partition(format!(
        "Dirichlet(alpha={alpha}) left a client empty in all {DIRICHLET_RETRIES} attempts \
         ({} examples, {n_clients} clients)",
        dataset.len()
    )))
}

fn class_split(dataset: &Dataset, n_clients: usize, k: usize, seed: u64) -> Result<PartitionAssignment> {
    let num_classes = dataset.num_classes();
    let mut holders = vec![Vec::new(); num_classes];
    for client in 0..n_clients {
        for j in 0..k {
            holders[(k * client + j) % num_classes].push(client);
        }
    }
    let mut per_client = vec![Vec::new(); n_clients];
    for (class, mut idx) in dataset.indices_by_class().into_iter().enumerate() {
        let owners = &holders[class];
        if idx.len() < owners.len() {
            return Err(Error::Partition(format!(
                "class {class} has {} examples for {} clients",
                idx.len(),
                owners.len()
            )));
        }
        let mut rng = rng::stream(&[tag::CLASS_SPLIT, seed, class as u64]);
        idx.shuffle(&mut rng);
        for (owner, chunk) in owners.iter().zip(even_chunks(&idx, owners.len())) {
            per_client[*owner].extend(chunk);
        }
    }
    for c in &mut per_client {
        c.sort_unstable();
    }
    Ok(PartitionAssignment { per_client })
}

/// Per-client sizes and class histograms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionStats {
    pub sizes: Vec<usize>,
    pub histograms: Vec<Vec<usize>>,
}

impl PartitionStats {
    /// Mean over clients of the L1 distance between the client's class
    /// distribution and the pooled distribution.
    pub fn heterogeneity(&self) -> f64 {
        let k = self.histograms.first().map_or(0, Vec::len);
        let mut global = vec![0usize; k];
        for h in &self.histograms {
            for (g, c) in global.iter_mut().zip(h) {
                *g += c;
            }
        }
        let total: usize = global.iter().sum();
        let mut sum = 0.0;
        for (h, &size) in self.histograms.iter().zip(&self.sizes) {
            if size == 0 {
                continue;
            }
            sum += h
                .iter()
                .zip(&global)
                .map(|(&c, &g)| (c as f64 / size as f64 - g as f64 / total as f64).abs())
                .sum::<f64>();
        }
        sum / self.histograms.len() as f64
    }
}

pub fn partition_stats(dataset: &Dataset, assignment: &PartitionAssignment) -> Result<PartitionStats> {
    let mut histograms = Vec::with_capacity(assignment.n_clients());
    for (c, list) in assignment.per_client.iter().enumerate() {
        let mut h = vec![0; dataset.num_classes()];
        for &i in list {
            let label = dataset.labels.get(i).ok_or_else(|| {
                Error::Validation(format!("client {c} references example {i}, dataset has {}", dataset.len()))
            })?;
            h[*label] += 1;
        }
        histograms.push(h);
    }
    Ok(PartitionStats {
        sizes: assignment.sizes(),
        histograms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced(n_classes: usize, per_class: usize) -> Dataset {
        generate_synthetic(n_classes, per_class, 4, 3.0, 7).unwrap()
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let a = generate_synthetic(10, 100, 8, 10.0, 1).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a.class_histogram(), vec![100; 10]);
        let b = generate_synthetic(10, 100, 8, 10.0, 1).unwrap();
        assert_eq!(a, b);
        assert!(a
            .features()
            .as_slice()
            .iter()
            .zip(b.features().as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, generate_synthetic(10, 100, 8, 10.0, 2).unwrap());
    }

    #[test]
    fn blob_means_have_requested_norm() {
        let blobs = SyntheticBlobs::new(3, 5, 4.0, 0).unwrap();
        for m in blobs.means() {
            let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_rejects_bad_rows() {
        let f = Matrix::zeros(2, 1);
        assert!(Dataset::new(f.clone(), vec![0, 2], 2, vec![0, 1]).is_err());
        assert!(Dataset::new(f.clone(), vec![0, 1], 2, vec![3, 3]).is_err());
        assert!(Dataset::new(f, vec![0], 2, vec![0]).is_err());
    }

    #[test]
    fn csv_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.csv");
        std::fs::write(&ok, "label,f0,f1\n0,1.0,2.0\n1,0.5,-1\n2,3,4\n").unwrap();
        let ds = load_dataset(&ok, DatasetFormat::Csv, None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.ids(), &[0, 1, 2]);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "label,f0,f1\n0,1.0,2.0\n1,abc,2\n").unwrap();
        match load_dataset(&bad, DatasetFormat::Csv, None) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, 2);
            }
            other => panic!("unexpected {other:?}"),
        }

        match load_dataset(&ok, DatasetFormat::Csv, Some(2)) {
            Err(Error::Validation(msg)) => assert!(msg.contains("class 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_roundtrip_with_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = SyntheticBlobs::new(3, 2, 2.0, 4).unwrap().sample(4, 0, 100).unwrap();
        write_dataset_csv(&ds, &path).unwrap();
        let back = load_dataset(&path, DatasetFormat::Csv, Some(3)).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn iid_divisible_case() {
        let ds = balanced(2, 5);
        let spec = PartitionSpec {
            kind: PartitionKind::Iid,
            n_clients: 2,
            seed: 0,
        };
        let a = partition(&ds, &spec).unwrap();
        assert_eq!(a.sizes(), vec![5, 5]);
        let all: HashSet<usize> = a.per_client.iter().flatten().copied().collect();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn class_split_is_cyclic() {
        let ds = balanced(10, 20);
        let spec = PartitionSpec {
            kind: PartitionKind::ClassSplit { classes_per_client: 2 },
            n_clients: 10,
            seed: 3,
        };
        let a = partition(&ds, &spec).unwrap();
        let stats = partition_stats(&ds, &a).unwrap();
        let mut per_class = vec![0; 10];
        for (client, h) in stats.histograms.iter().enumerate() {
            let present: Vec<usize> = (0..10).filter(|&c| h[c] > 0).collect();
            assert_eq!(present.len(), 2, "client {client}: {h:?}");
            assert!(present.contains(&(2 * client % 10)));
            for c in present {
                per_class[c] += 1;
            }
        }
        assert_eq!(per_class, vec![2; 10]);
        assert_eq!(stats.sizes, vec![20; 10]);
    }

    #[test]
    fn class_split_rejects_uneven_cover() {
        let ds = balanced(10, 5);
        let spec = PartitionSpec {
            kind: PartitionKind::ClassSplit { classes_per_client: 3 },
            n_clients: 4,
            seed: 0,
        };
        assert!(matches!(partition(&ds, &spec), Err(Error::Config { .. })));
    }

    #[test]
    fn dirichlet_large_alpha_is_near_uniform() {
        let ds = balanced(10, 200);
        for seed in 0..3 {
            let spec = PartitionSpec {
                kind: PartitionKind::Dirichlet { alpha: 1e6 },
                n_clients: 10,
                seed,
            };
            let a = partition(&ds, &spec).unwrap();
            let stats = partition_stats(&ds, &a).unwrap();
            for (h, &size) in stats.histograms.iter().zip(&stats.sizes) {
                for &c in h {
                    assert!((c as f64 / size as f64 - 0.1).abs() <= 0.05, "{h:?}");
                }
            }
        }
    }

    #[test]
    fn dirichlet_reports_unsatisfiable() {
        // 3 examples can never cover 5 clients
        let ds = Dataset::new(Matrix::zeros(3, 1), vec![0, 1, 0], 2, vec![0, 1, 2]).unwrap();
        let spec = PartitionSpec {
            kind: PartitionKind::Dirichlet { alpha: 0.5 },
            n_clients: 5,
            seed: 0,
        };
        assert!(matches!(partition(&ds, &spec), Err(Error::Partition(_))));
    }

    #[test]
    fn largest_remainder_sums_to_total() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 3), vec![1, 1, 1]);
        // remainders tie at 0.5; the lower index wins
        assert_eq!(largest_remainder(&[0.625, 0.25, 0.125], 4), vec![3, 1, 0]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
    }

    #[test]
    fn tiny_alpha_dirichlet_is_finite() {
        let mut rng = rng::stream(&[1]);
        for _ in 0..100 {
            let p = sample_dirichlet(0.01, 10, &mut rng);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_out_of_range() {
        let ds = balanced(2, 2);
        let a = PartitionAssignment {
            per_client: vec![vec![0, 9]],
        };
        assert!(partition_stats(&ds, &a).is_err());
    }

    #[test]
    fn histograms_sum_to_global() {
        let ds = balanced(10, 30);
        let spec = PartitionSpec {
            kind: PartitionKind::Dirichlet { alpha: 0.1 },
            n_clients: 10,
            seed: 11,
        };
        let stats = partition_stats(&ds, &partition(&ds, &spec).unwrap()).unwrap();
        let mut total = vec![0; 10];
        for (h, &s) in stats.histograms.iter().zip(&stats.sizes) {
            assert_eq!(h.iter().sum::<usize>(), s);
            for (t, c) in total.iter_mut().zip(h) {
                *t += c;
            }
        }
        assert_eq!(total, ds.class_histogram());
    }

    fn kind_strategy() -> impl Strategy<Value = PartitionKind> {
        prop_oneof![
            Just(PartitionKind::Iid),
            prop_oneof![Just(0.01), Just(0.05), Just(0.1), Just(0.5), Just(1.0)]
                .prop_map(|alpha| PartitionKind::Dirichlet { alpha }),
            Just(PartitionKind::ClassSplit { classes_per_client: 2 }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn partitions_are_valid_and_deterministic(kind in kind_strategy(), seed in any::<u64>()) {
            let ds = balanced(10, 50);
            let spec = PartitionSpec { kind, n_clients: 10, seed };
            let a = partition(&ds, &spec).unwrap();
            prop_assert!(a.validate(ds.len()).is_ok());
            prop_assert_eq!(a, partition(&ds, &spec).unwrap());
        }
    }
}
