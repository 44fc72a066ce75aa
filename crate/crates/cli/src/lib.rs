//! Experiment lifecycle commands behind the `fedlpfm` binary.
//!
//! Output layout of `run` under `--out`:
//!
//! ```text
//! {name}.resolved.toml          config with every default filled in
//! {name}.trial{k}.metrics.csv   one row per evaluated round
//! {name}.trial{k}.ckpt          final global proxy
//! ```
//!
//! Trial `k` adds `k` to both the federation and the partition seed; the
//! partition seed defaults to the federation seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedlpfm_core::config::{load_run_config, PolicyName, RunConfig};
use fedlpfm_core::data::{
    load_dataset, partition, partition_stats, write_dataset_csv, Dataset, DatasetFormat,
    PartitionAssignment, PartitionKind, PartitionSpec, SyntheticBlobs,
};
use fedlpfm_core::federation::{evaluate, run_federation_with, Execution, FederationRun, RoundReport};
use fedlpfm_core::io::{
    self, append_metrics, read_checkpoint, read_logits_table, write_checkpoint, MetricsRow,
};
use fedlpfm_core::nn::{init_params, ArchDescriptor, Norm};
use fedlpfm_core::report::{collect_trials, format_table, summarize, summary_csv};
use fedlpfm_core::rng::{derive_seed, tag};
use fedlpfm_core::teachers::{
    assign_teachers, finetune_teacher_locally, pretrain_teacher, teacher_from_logits_table,
    ClientTeacherSet, LogitsTable, ModelTeacher, SharedTeacher, TeacherPolicy,
};
use fedlpfm_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "fedlpfm", version, about = "Federated learning simulator with frozen-teacher distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Gaussian-blob dataset.
    GenData(GenDataArgs),
    /// Partition a dataset across clients and print the assignment as JSON.
    Partition(PartitionArgs),
    /// Train a teacher centrally and save it as a checkpoint.
    PretrainTeacher(PretrainArgs),
    /// Run federated training trials from a config file.
    Run(RunArgs),
    /// Print the accuracy of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Summarize final accuracies of all metrics files in a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training set path; `.csv` selects CSV, anything else the binary format.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional held-out set drawn from the same class means.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionKindArg {
    Iid,
    Dirichlet,
    ClassSplit,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub kind: PartitionKindArg,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub classes_per_client: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub clients: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub hidden: Vec<usize>,
    /// Group-norm groups per hidden layer; omit for no normalization.
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    /// Replace existing metrics and checkpoints.
    #[arg(long)]
    pub overwrite: bool,
    /// Base seed; overrides `federation.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding `*.metrics.csv` files.
    #[arg(long)]
    pub dir: PathBuf,
    /// Summary CSV path; defaults to `summary.csv` inside `--dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::Partition(a) => cmd_partition(&a, out),
        Command::PretrainTeacher(a) => cmd_pretrain_teacher(&a, out),
        Command::Run(a) => cmd_run(&a, out).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a.checkpoint, &a.data, out).map(|_| ()),
        Command::Report(a) => cmd_report(&a.dir, a.out.as_deref(), out),
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    match DatasetFormat::from_path(path) {
        DatasetFormat::Csv => write_dataset_csv(dataset, path),
        DatasetFormat::Binary => io::write_dataset(dataset, path),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let blobs = SyntheticBlobs::new(a.classes, a.dim, a.separation, a.seed)?;
    let train = blobs.sample(a.per_class, 0, 0)?;
    let test = match &a.test_out {
        Some(_) => Some(blobs.sample(a.test_per_class, 1, train.len() as u64)?),
        None => None,
    };
    save_dataset(&train, &a.out)?;
    writeln!(out, "wrote {} examples to {}", train.len(), a.out.display())?;
    if let (Some(test), Some(path)) = (test, &a.test_out) {
        save_dataset(&test, path)?;
        writeln!(out, "wrote {} examples to {}", test.len(), path.display())?;
    }
    Ok(())
}

pub fn cmd_partition(a: &PartitionArgs, out: &mut dyn Write) -> Result<()> {
    let kind = match a.kind {
        PartitionKindArg::Iid => PartitionKind::Iid,
        PartitionKindArg::Dirichlet => PartitionKind::Dirichlet {
            alpha: a.alpha.ok_or_else(|| Error::config("--alpha", "required for dirichlet"))?,
        },
        PartitionKindArg::ClassSplit => PartitionKind::ClassSplit {
            classes_per_client: a
                .classes_per_client
                .ok_or_else(|| Error::config("--classes-per-client", "required for class-split"))?,
        },
    };
    let spec = PartitionSpec {
        kind,
        n_clients: a.clients,
        seed: a.seed,
    };
    let dataset = load_dataset(&a.data, DatasetFormat::from_path(&a.data), None)?;
    let assignment = partition(&dataset, &spec)?;
    let stats = partition_stats(&dataset, &assignment)?;
    let doc = serde_json::json!({
        "spec": spec,
        "sizes": stats.sizes,
        "histograms": stats.histograms,
        "heterogeneity": stats.heterogeneity(),
        "per_client": assignment.per_client,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Validation(e.to_string()))?;
    match &a.out {
        Some(path) => fs::write(path, text + "\n")?,
        None => writeln!(out, "{text}")?,
    }
    Ok(())
}

pub fn cmd_pretrain_teacher(a: &PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let dataset = load_dataset(&a.data, DatasetFormat::from_path(&a.data), None)?;
    let norm = a.groups.map_or(Norm::None, |groups| Norm::GroupNorm { groups });
    let arch = ArchDescriptor::new(dataset.input_dim(), a.hidden.clone(), dataset.num_classes(), norm)?;
    let trained = pretrain_teacher(&dataset, &arch, a.epochs, a.lr, a.seed)?;
    write_checkpoint(trained.teacher.params(), &a.out)?;
    writeln!(out, "train accuracy {:.6}", trained.train_accuracy)?;
    Ok(())
}

pub fn cmd_evaluate(checkpoint: &Path, data: &Path, out: &mut dyn Write) -> Result<f64> {
    let params = read_checkpoint(checkpoint)?;
    let dataset = load_dataset(data, DatasetFormat::from_path(data), Some(params.arch().num_classes))?;
    if dataset.input_dim() != params.arch().input_dim {
        return Err(Error::Shape(format!(
            "checkpoint expects {} input features, {} has {}",
            params.arch().input_dim,
            data.display(),
            dataset.input_dim()
        )));
    }
    let acc = evaluate(&params, &dataset)?;
    writeln!(out, "{acc:.6}")?;
    Ok(acc)
}

pub fn cmd_report(dir: &Path, summary: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let rows = summarize(&collect_trials(dir)?)?;
    write!(out, "{}", format_table(&rows))?;
    let path = summary.map_or_else(|| dir.join("summary.csv"), Path::to_path_buf);
    fs::write(path, summary_csv(&rows))?;
    Ok(())
}

/// A teacher-pool file loaded once and shared across trials.
#[derive(Debug, Clone)]
pub enum PoolEntry {
    Model(ModelTeacher),
    Table(Arc<LogitsTable>),
}

/// Loads a `.ckpt` checkpoint or a logits table, recognized by magic bytes.
pub fn load_pool_entry(path: &Path) -> Result<PoolEntry> {
    let head = fs::read(path)?;
    if head.starts_with(&io::LOGITS_MAGIC) {
        Ok(PoolEntry::Table(Arc::new(read_logits_table(path)?)))
    } else {
        Ok(PoolEntry::Model(ModelTeacher::pretrained(read_checkpoint(path)?)))
    }
}

/// Data and teachers shared by all trials of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    /// Equal to `train` when the config names no test set.
    pub test: Dataset,
    pub pool: Vec<PoolEntry>,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let format = |p: &Path| d.format.unwrap_or_else(|| DatasetFormat::from_path(p));
        let train = load_dataset(&d.train, format(&d.train), d.num_classes)?;
        let test = match &d.test {
            Some(p) => load_dataset(p, format(p), Some(train.num_classes()))?,
            None => train.clone(),
        };
        if test.input_dim() != train.input_dim() {
            return Err(Error::Shape(format!(
                "train has {} features, test has {}",
                train.input_dim(),
                test.input_dim()
            )));
        }
        let mut pool = Vec::new();
        for path in cfg.teachers.iter().flat_map(|t| &t.pool) {
            let entry = load_pool_entry(path)?;
            let (inputs, classes) = match &entry {
                PoolEntry::Model(m) => (Some(m.params().arch().input_dim), m.params().arch().num_classes),
                PoolEntry::Table(t) => (None, t.num_classes()),
            };
            if classes != train.num_classes() || inputs.is_some_and(|i| i != train.input_dim()) {
                return Err(Error::Shape(format!(
                    "teacher {} does not match the training data ({} features, {} classes)",
                    path.display(),
                    train.input_dim(),
                    train.num_classes()
                )));
            }
            pool.push(entry);
        }
        Ok(Prepared { train, test, pool })
    }

    pub fn from_parts(train: Dataset, test: Dataset, pool: Vec<PoolEntry>) -> Self {
        Prepared { train, test, pool }
    }

    fn shared(&self, i: usize) -> SharedTeacher {
        match &self.pool[i] {
            PoolEntry::Model(m) => Arc::new(m.clone()),
            PoolEntry::Table(t) => Arc::new(teacher_from_logits_table((**t).clone())),
        }
    }
}

fn teacher_sets(
    cfg: &RunConfig,
    prepared: &Prepared,
    assignment: &PartitionAssignment,
    seed: u64,
) -> Result<ClientTeacherSet> {
    let n = cfg.federation.n_clients;
    let Some(t) = &cfg.teachers else {
        return Ok(ClientTeacherSet::empty(n));
    };
    let policy = match t.policy {
        PolicyName::None => TeacherPolicy::None,
        PolicyName::Uniform => TeacherPolicy::Uniform { teacher: t.teacher },
        PolicyName::PerClient => TeacherPolicy::PerClientList(t.assignment.clone().unwrap_or_default()),
        PolicyName::RandomChoice => TeacherPolicy::RandomChoice,
    };
    if prepared.pool.is_empty() {
        return Ok(ClientTeacherSet::empty(n));
    }
    let indices = assign_teachers(&policy, n, prepared.pool.len(), seed)?;
    let mut per_client = Vec::with_capacity(n);
    for (c, list) in indices.iter().enumerate() {
        let mut teachers = Vec::with_capacity(list.len());
        for &i in list {
            if t.finetune_epochs == 0 {
                teachers.push(prepared.shared(i));
                continue;
            }
            let PoolEntry::Model(base) = &prepared.pool[i] else {
                return Err(Error::config(
                    "teachers.finetune_epochs",
                    format!("pool entry {i} is a logits table and cannot be fine-tuned"),
                ));
            };
            let local = prepared.train.subset(&assignment.per_client[c])?;
            let ft_seed = derive_seed(&[tag::TEACHER_CHOICE, seed, c as u64, i as u64]);
            let tuned = finetune_teacher_locally(base, &local, t.finetune_epochs, t.finetune_lr, ft_seed)?;
            teachers.push(Arc::new(tuned) as SharedTeacher);
        }
        per_client.push(teachers);
    }
    Ok(ClientTeacherSet::new(per_client))
}

/// Partitions, builds teachers, initializes the proxy and runs one trial
/// with the seeds already in `cfg`.
pub fn run_trial(
    cfg: &RunConfig,
    prepared: &Prepared,
    execution: Execution,
    on_round: impl FnMut(&RoundReport),
) -> Result<FederationRun> {
    let train = &prepared.train;
    let spec = cfg.partition_spec()?;
    spec.validate(train.num_classes())?;
    let assignment = partition(train, &spec)?;
    let fed = cfg.federation_config();
    let arch = cfg.arch(train.input_dim(), train.num_classes())?;
    let init = init_params(&arch, derive_seed(&[tag::INIT, fed.seed]))?;
    let teachers = teacher_sets(cfg, prepared, &assignment, fed.seed)?;
    run_federation_with(&fed, init, train, &prepared.test, &assignment, &teachers, execution, on_round)
}

#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub seed: u64,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub final_accuracy: f64,
}

pub fn trial_paths(out_dir: &Path, name: &str, trial: u64) -> (PathBuf, PathBuf) {
    (
        out_dir.join(format!("{name}.trial{trial}.metrics.csv")),
        out_dir.join(format!("{name}.trial{trial}.ckpt")),
    )
}

pub fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<Vec<TrialOutput>> {
    let mut cfg = load_run_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.federation.seed = seed;
    }
    cfg.partition.seed.get_or_insert(cfg.federation.seed);
    let paths: Vec<(PathBuf, PathBuf)> = (0..a.trials).map(|k| trial_paths(&a.out, &cfg.name, k)).collect();
    if !a.overwrite {
        if let Some(existing) = paths.iter().flat_map(|(m, c)| [m, c]).find(|p| p.exists()) {
            return Err(Error::Validation(format!(
                "{} already exists; pass --overwrite to replace it",
                existing.display()
            )));
        }
    }
    let prepared = Prepared::load(&cfg)?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(format!("{}.resolved.toml", cfg.name)), cfg.to_toml())?;
    let algorithm = cfg.federation_config().algorithm.name();
    let mut outputs = Vec::new();
    for (k, (metrics_path, ckpt_path)) in (0..a.trials).zip(paths) {
        for p in [&metrics_path, &ckpt_path] {
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        let mut trial_cfg = cfg.clone();
        trial_cfg.offset_seeds(k);
        let seed = trial_cfg.federation.seed;
        let mut write_err = None;
        let run = run_trial(&trial_cfg, &prepared, Execution::Parallel, |r| {
            let Some(m) = r.metrics() else { return };
            let row = MetricsRow {
                round: m.round,
                algorithm: algorithm.to_string(),
                seed,
                clients: m.clients,
                accuracy: m.accuracy,
                train_loss: m.train_loss,
                lr: m.lr,
                duration_ms: m.duration.as_millis(),
            };
            if write_err.is_none() {
                write_err = append_metrics(&row, &metrics_path).err();
            }
        })?;
        if let Some(e) = write_err {
            return Err(e);
        }
        write_checkpoint(&run.final_params, &ckpt_path)?;
        let final_accuracy = run.metrics.last().map_or(f64::NAN, |m| m.accuracy);
        writeln!(out, "trial {k} seed {seed}: final accuracy {final_accuracy:.6}")?;
        outputs.push(TrialOutput {
            seed,
            metrics: metrics_path,
            checkpoint: ckpt_path,
            final_accuracy,
        });
    }
    Ok(outputs)
}
