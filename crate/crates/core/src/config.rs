//! TOML run configuration.
//!
//! ```toml
//! name = "split2"
//!
//! [data]
//! train = "train.csv"
//! test = "test.csv"
//!
//! [partition]
//! kind = "class_split"
//! classes_per_client = 2
//!
//! [federation]
//! algorithm = "fed_lpfm"
//! rounds = 100
//!
//! [distill]
//! lambda = 0.5
//!
//! [teachers]
//! pool = ["teacher.ckpt"]
//! ```
//!
//! Omitted keys take their defaults; unknown keys are rejected. Relative
//! paths are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetFormat, PartitionKind, PartitionSpec};
use crate::federation::{Algorithm, FederationConfig};
use crate::losses::DistillConfig;
use crate::nn::{ArchDescriptor, Norm};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Tag used in output file names and report groups.
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataSection,
    pub partition: PartitionSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teachers: Option<TeachersSection>,
}

fn default_name() -> String {
    "run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    /// Evaluation set; the training set is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Inferred from the file extension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<DatasetFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionName {
    Iid,
    Dirichlet,
    ClassSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub kind: PartitionName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes_per_client: Option<usize>,
    /// Defaults to `federation.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PartitionSection {
    pub fn kind(&self) -> Result<PartitionKind> {
        match self.kind {
            PartitionName::Iid => Ok(PartitionKind::Iid),
            PartitionName::Dirichlet => self
                .alpha
                .map(|alpha| PartitionKind::Dirichlet { alpha })
                .ok_or_else(|| Error::config("partition.alpha", "required for dirichlet partitions")),
            PartitionName::ClassSplit => self
                .classes_per_client
                .map(|classes_per_client| PartitionKind::ClassSplit { classes_per_client })
                .ok_or_else(|| {
                    Error::config("partition.classes_per_client", "required for class_split partitions")
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    FedLpfm,
    Fedavg,
    Fedprox,
    Fml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub algorithm: AlgorithmName,
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_milestone: usize,
    pub lr_factor: f64,
    pub client_fraction: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// FedProx proximal weight.
    pub mu: f64,
    /// FML cross-entropy weight.
    pub beta: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        let d = FederationConfig::default();
        FederationSection {
            algorithm: AlgorithmName::FedLpfm,
            n_clients: d.n_clients,
            rounds: d.rounds,
            local_epochs: d.local_epochs,
            batch_size: d.batch_size,
            lr: d.base_lr,
            weight_decay: d.weight_decay,
            lr_milestone: d.lr_milestone,
            lr_factor: d.lr_factor,
            client_fraction: d.client_fraction,
            seed: d.seed,
            eval_every: d.eval_every,
            mu: 0.01,
            beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormName {
    None,
    GroupNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub norm: NormName,
    pub groups: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_dims: vec![64],
            norm: NormName::GroupNorm,
            groups: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    None,
    #[default]
    Uniform,
    PerClient,
    RandomChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeachersSection {
    pub policy: PolicyName,
    /// Teacher files: `.ckpt` checkpoints or logits tables.
    pub pool: Vec<PathBuf>,
    /// Pool index used by the `uniform` policy.
    pub teacher: usize,
    /// Pool indices per client for the `per_client` policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assignment: Option<Vec<Vec<usize>>>,
    /// When positive, each assigned checkpoint teacher is fine-tuned on the
    /// client's own data before the run.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for TeachersSection {
    fn default() -> Self {
        TeachersSection {
            policy: PolicyName::Uniform,
            pool: Vec::new(),
            teacher: 0,
            assignment: None,
            finetune_epochs: 0,
            finetune_lr: 0.05,
        }
    }
}

impl RunConfig {
    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        let algorithm = match f.algorithm {
            AlgorithmName::FedLpfm => Algorithm::FedLpfm,
            AlgorithmName::Fedavg => Algorithm::FedAvg,
            AlgorithmName::Fedprox => Algorithm::FedProx { mu: f.mu },
            AlgorithmName::Fml => Algorithm::Fml { beta: f.beta },
        };
        FederationConfig {
            algorithm,
            n_clients: f.n_clients,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            base_lr: f.lr,
            weight_decay: f.weight_decay,
            lr_milestone: f.lr_milestone,
            lr_factor: f.lr_factor,
            client_fraction: f.client_fraction,
            distill: self.distill,
            seed: f.seed,
            eval_every: f.eval_every,
        }
    }

    pub fn partition_spec(&self) -> Result<PartitionSpec> {
        Ok(PartitionSpec {
            kind: self.partition.kind()?,
            n_clients: self.federation.n_clients,
            seed: self.partition.seed.unwrap_or(self.federation.seed),
        })
    }

    pub fn norm(&self) -> Norm {
        match self.model.norm {
            NormName::None => Norm::None,
            NormName::GroupNorm => Norm::GroupNorm { groups: self.model.groups },
        }
    }

    pub fn arch(&self, input_dim: usize, num_classes: usize) -> Result<ArchDescriptor> {
        ArchDescriptor::new(input_dim, self.model.hidden_dims.clone(), num_classes, self.norm())
    }

    /// Whether the run needs teachers at all.
    pub fn needs_teachers(&self) -> bool {
        self.federation.algorithm == AlgorithmName::FedLpfm && self.distill.lambda < 1.0
    }

    /// Shifts the federation seed, and the partition seed when set, by `offset`.
    pub fn offset_seeds(&mut self, offset: u64) {
        self.federation.seed = self.federation.seed.wrapping_add(offset);
        if let Some(s) = self.partition.seed.as_mut() {
            *s = s.wrapping_add(offset);
        }
    }

    /// Checks every invariant that does not depend on the data files.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file-name-safe tag"));
        }
        if let Some(c) = self.data.num_classes {
            if c < 2 {
                return Err(Error::config("data.num_classes", "must be at least 2"));
            }
        }
        let spec = self.partition_spec()?;
        if let PartitionKind::Dirichlet { alpha } = spec.kind {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::config("partition.alpha", format!("must be positive, got {alpha}")));
            }
        }
        self.federation_config().validate()?;
        if self.model.hidden_dims.contains(&0) {
            return Err(Error::config("model.hidden_dims", "widths must be positive"));
        }
        if self.model.norm == NormName::GroupNorm {
            let g = self.model.groups;
            if g == 0 || self.model.hidden_dims.iter().any(|h| h % g != 0) {
                return Err(Error::config(
                    "model.groups",
                    format!("{g} groups do not divide hidden widths {:?}", self.model.hidden_dims),
                ));
            }
        }
        match &self.teachers {
            None if self.needs_teachers() => Err(Error::config(
                "teachers",
                format!("fed_lpfm with lambda {} needs a [teachers] section", self.distill.lambda),
            )),
            None => Ok(()),
            Some(t) => self.validate_teachers(t),
        }
    }

    fn validate_teachers(&self, t: &TeachersSection) -> Result<()> {
        if self.needs_teachers() && (t.policy == PolicyName::None || t.pool.is_empty()) {
            return Err(Error::config(
                "teachers.pool",
                format!("lambda {} < 1 needs a non-empty teacher pool", self.distill.lambda),
            ));
        }
        match t.policy {
            PolicyName::Uniform if !t.pool.is_empty() && t.teacher >= t.pool.len() => Err(Error::config(
                "teachers.teacher",
                format!("index {} out of range for a pool of {}", t.teacher, t.pool.len()),
            )),
            PolicyName::PerClient => {
                let lists = t
                    .assignment
                    .as_ref()
                    .ok_or_else(|| Error::config("teachers.assignment", "required for the per_client policy"))?;
                if lists.len() != self.federation.n_clients {
                    return Err(Error::config(
                        "teachers.assignment",
                        format!("{} lists for {} clients", lists.len(), self.federation.n_clients),
                    ));
                }
                if let Some(&i) = lists.iter().flatten().find(|&&i| i >= t.pool.len()) {
                    return Err(Error::config(
                        "teachers.assignment",
                        format!("index {i} out of range for a pool of {}", t.pool.len()),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }?;
        if t.finetune_epochs > 0 && !(t.finetune_lr.is_finite() && t.finetune_lr > 0.0) {
            return Err(Error::config("teachers.finetune_lr", "must be positive"));
        }
        Ok(())
    }

    /// Makes every relative path absolute with respect to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train);
        if let Some(p) = self.data.test.as_mut() {
            fix(p);
        }
        if let Some(t) = self.teachers.as_mut() {
            t.pool.iter_mut().for_each(fix);
        }
    }

    /// The configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }
}

/// Parses and validates a config document. `origin` only labels errors.
pub fn parse_run_config(text: &str, origin: &Path) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| syntax_error(&e, text, origin))?;
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = match e.path().to_string() {
            p if p == "." => "<root>".to_string(),
            p => p,
        };
        Error::config(key, e.inner().message())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, parses and validates a config file, resolving relative paths
/// against its directory.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let mut cfg = parse_run_config(&text, path)?;
    let full = fs::canonicalize(path)?;
    cfg.resolve_paths(full.parent().unwrap_or(Path::new("/")));
    Ok(cfg)
}

fn syntax_error(e: &toml::de::Error, text: &str, origin: &Path) -> Error {
    let offset = e.span().map_or(0, |s| s.start).min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() as u64 + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    Error::Parse {
        path: origin.to_path_buf(),
        line,
        column,
        message: e.message().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
train = "train.csv"

[partition]
kind = "iid"

[federation]
algorithm = "fedavg"
"#;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_run_config(text, Path::new("test.toml"))
    }

    fn key_of(r: Result<RunConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        let fed = cfg.federation_config();
        assert_eq!(fed.algorithm, Algorithm::FedAvg);
        assert_eq!(fed.client_fraction, 1.0);
        assert_eq!(fed.local_epochs, 1);
        assert_eq!(fed.base_lr, 0.01);
        assert_eq!(cfg.distill.lambda, 0.5);
        assert_eq!(cfg.partition_spec().unwrap().seed, 0);
        assert!(cfg.teachers.is_none());
    }

    #[test]
    fn resolved_dump_roundtrips() {
        let cfg = parse(MINIMAL).unwrap();
        let dump = cfg.to_toml();
        assert!(dump.contains("client_fraction = 1.0"));
        assert_eq!(parse(&dump).unwrap(), cfg);
    }

    #[test]
    fn lambda_out_of_range_names_key() {
        let text = format!("{MINIMAL}\n[distill]\nlambda = 1.5\n");
        assert_eq!(key_of(parse(&text)), "distill.lambda");
    }

    #[test]
    fn fed_lpfm_without_teachers_is_rejected() {
        let text = MINIMAL.replace("fedavg", "fed_lpfm");
        assert_eq!(key_of(parse(&text)), "teachers");
        let with_pool = format!("{text}\n[teachers]\npool = [\"t.ckpt\"]\n");
        parse(&with_pool).unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_types_carry_paths() {
        let text = MINIMAL.replace("algorithm = \"fedavg\"", "algorithm = \"fedavg\"\nlamda = 0.3");
        assert!(key_of(parse(&text)).starts_with("federation"));
        let text = MINIMAL.replace("algorithm = \"fedavg\"", "rounds = \"many\"");
        assert_eq!(key_of(parse(&text)), "federation.rounds");
    }

    #[test]
    fn syntax_errors_report_position() {
        match parse("[data\ntrain = 1") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partition_parameters_are_required() {
        let text = MINIMAL.replace("kind = \"iid\"", "kind = \"dirichlet\"");
        assert_eq!(key_of(parse(&text)), "partition.alpha");
        let text = MINIMAL.replace("kind = \"iid\"", "kind = \"class_split\"");
        assert_eq!(key_of(parse(&text)), "partition.classes_per_client");
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut cfg = parse(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/runs/a"));
        assert_eq!(cfg.data.train, Path::new("/runs/a/train.csv"));
    }

    #[test]
    fn seed_offset_moves_both_seeds() {
        let text = MINIMAL.replace("kind = \"iid\"", "kind = \"iid\"\nseed = 5");
        let mut cfg = parse(&text).unwrap();
        cfg.offset_seeds(2);
        assert_eq!(cfg.federation.seed, 2);
        assert_eq!(cfg.partition_spec().unwrap().seed, 7);
    }

    #[test]
    fn group_count_must_divide_widths() {
        let text = format!("{MINIMAL}\n[model]\nhidden_dims = [12]\ngroups = 8\n");
        assert_eq!(key_of(parse(&text)), "model.groups");
    }
}
