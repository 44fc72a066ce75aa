//! Trial summaries: final-round accuracy mean and sample standard deviation
//! per `(group, algorithm)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::io::read_metrics;
use crate::{Error, Result};

/// Suffix of per-trial metrics files.
pub const METRICS_SUFFIX: &str = ".metrics.csv";
pub const SUMMARY_HEADER: &str = "group,algorithm,trials,mean_accuracy,std_accuracy";

/// Mean and sample standard deviation (`n - 1` denominator; 0 when `n = 1`).
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Validation("mean of an empty sample".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub file: PathBuf,
    /// Run tag: the file name up to `.trial`, or its stem without the suffix.
    pub group: String,
    pub algorithm: String,
    pub seed: u64,
    pub final_round: usize,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub group: String,
    pub algorithm: String,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
}

/// Reads the last evaluated round of one metrics file.
pub fn read_trial(path: &Path) -> Result<TrialResult> {
    let rows = read_metrics(path)?;
    let last = rows
        .iter()
        .max_by_key(|r| r.round)
        .ok_or_else(|| Error::Validation(format!("{} has no rows", path.display())))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix(METRICS_SUFFIX).unwrap_or(name);
    let group = stem.split(".trial").next().unwrap_or(stem).to_string();
    Ok(TrialResult {
        file: path.to_path_buf(),
        group,
        algorithm: last.algorithm.clone(),
        seed: last.seed,
        final_round: last.round,
        final_accuracy: last.accuracy,
    })
}

/// All `*.metrics.csv` files directly under `dir`, in file-name order.
pub fn collect_trials(dir: &Path) -> Result<Vec<TrialResult>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| {
        p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(METRICS_SUFFIX))
    });
    if files.is_empty() {
        return Err(Error::Validation(format!("no metrics files in {}", dir.display())));
    }
    files.sort();
    files.iter().map(|p| read_trial(p)).collect()
}

/// One row per `(group, algorithm)`, sorted by that key.
pub fn summarize(trials: &[TrialResult]) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for t in trials {
        groups
            .entry((t.group.as_str(), t.algorithm.as_str()))
            .or_default()
            .push(t.final_accuracy);
    }
    groups
        .into_iter()
        .map(|((group, algorithm), accs)| {
            let (mean, std) = mean_std(&accs)?;
            Ok(SummaryRow {
                group: group.to_string(),
                algorithm: algorithm.to_string(),
                trials: accs.len(),
                mean,
                std,
            })
        })
        .collect()
}

pub fn format_table(rows: &[SummaryRow]) -> String {
    let gw = rows.iter().map(|r| r.group.len()).max().unwrap_or(0).max(5);
    let aw = rows.iter().map(|r| r.algorithm.len()).max().unwrap_or(0).max(9);
    let mut out = format!("{:<gw$}  {:<aw$}  {:>6}  {:>8}  {:>8}\n", "group", "algorithm", "trials", "mean", "std");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<gw$}  {:<aw$}  {:>6}  {:>8.6}  {:>8.6}",
            r.group, r.algorithm, r.trials, r.mean, r.std
        );
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.6},{:.6}", r.group, r.algorithm, r.trials, r.mean, r.std);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{append_metrics, MetricsRow};

    fn write_trial(dir: &Path, name: &str, algorithm: &str, accs: &[f64]) {
        for (i, &accuracy) in accs.iter().enumerate() {
            let row = MetricsRow {
                round: (i + 1) * 10,
                algorithm: algorithm.into(),
                seed: 0,
                clients: vec![0, 1],
                accuracy,
                train_loss: 0.5,
                lr: 0.01,
                duration_ms: 1,
            };
            append_metrics(&row, &dir.join(name)).unwrap();
        }
    }

    #[test]
    fn sample_std_of_three_trials() {
        let (m, s) = mean_std(&[0.80, 0.82, 0.84]).unwrap();
        assert_eq!(format!("{m:.6} {s:.6}"), "0.820000 0.020000");
        assert_eq!(mean_std(&[0.7]).unwrap(), (0.7, 0.0));
        assert!(mean_std(&[]).is_err());
    }

    #[test]
    fn groups_by_tag_and_algorithm_using_last_round() {
        let dir = tempfile::tempdir().unwrap();
        write_trial(dir.path(), "split.trial0.metrics.csv", "fedavg", &[0.1, 0.80]);
        write_trial(dir.path(), "split.trial1.metrics.csv", "fedavg", &[0.2, 0.84]);
        write_trial(dir.path(), "lpfm.trial0.metrics.csv", "fed_lpfm", &[0.9]);
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let rows = summarize(&collect_trials(dir.path()).unwrap()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].group.as_str(), rows[0].algorithm.as_str()), ("lpfm", "fed_lpfm"));
        assert_eq!(rows[0].std, 0.0);
        assert_eq!(rows[1].trials, 2);
        assert!((rows[1].mean - 0.82).abs() < 1e-12);
        let csv = summary_csv(&rows);
        assert!(csv.starts_with(SUMMARY_HEADER));
        assert!(csv.contains("split,fedavg,2,0.820000,0.028284"));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(collect_trials(dir.path()).is_err());
    }
}
