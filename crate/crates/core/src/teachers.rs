//! Frozen teacher models.
//!
//! A teacher maps a batch to raw class logits. Teachers are immutable once
//! built and are shared across clients behind `Arc`; nothing in the
//! federation loop can modify or transmit them.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Dataset, PartitionAssignment};
use crate::losses::cross_entropy;
use crate::nn::{self, init_params, ArchDescriptor, ModelParams, OptimizerState};
use crate::rng::{self, tag};
use crate::{Error, Matrix, Result};

/// Mini-batch size used for central pretraining and local fine-tuning.
pub const CENTRAL_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    Pretrained,
    LocalFinetuned,
    LogitsTable,
}

pub trait Teacher: Debug + Send + Sync {
    fn kind(&self) -> TeacherKind;

    fn num_classes(&self) -> usize;

    /// Raw logits, `batch.len() x num_classes`.
    fn logits(&self, batch: &nn::Batch) -> Result<Matrix>;
}

pub type SharedTeacher = Arc<dyn Teacher>;

/// A teacher backed by a frozen network.
#[derive(Debug, Clone)]
pub struct ModelTeacher {
    kind: TeacherKind,
    params: ModelParams,
}

impl ModelTeacher {
    /// Wraps parameters, e.g. a checkpoint produced elsewhere, as a pretrained teacher.
    pub fn pretrained(params: ModelParams) -> Self {
        ModelTeacher {
            kind: TeacherKind::Pretrained,
            params,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
}

impl Teacher for ModelTeacher {
    fn kind(&self) -> TeacherKind {
        self.kind
    }

    fn num_classes(&self) -> usize {
        self.params.arch().num_classes
    }

    fn logits(&self, batch: &nn::Batch) -> Result<Matrix> {
        nn::forward(&self.params, batch)
    }
}

/// Precomputed logits keyed by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsTable {
    num_classes: usize,
    entries: BTreeMap<u64, Vec<f32>>,
    source: String,
}

impl LogitsTable {
    pub fn new(num_classes: usize, entries: BTreeMap<u64, Vec<f32>>, source: String) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "logits table needs at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((id, v)) = entries.iter().find(|(_, v)| v.len() != num_classes) {
            return Err(Error::Validation(format!(
                "example {id} has {} logits, table has {num_classes} classes",
                v.len()
            )));
        }
        if let Some((id, _)) = entries.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Validation(format!("example {id} has non-finite logits")));
        }
        Ok(LogitsTable {
            num_classes,
            entries,
            source,
        })
    }

    /// Table of a model's logits on every example of `dataset`, rounded to f32.
    pub fn from_model(params: &ModelParams, dataset: &Dataset, source: String) -> Result<Self> {
        let all: Vec<usize> = (0..dataset.len()).collect();
        let logits = nn::forward(params, &dataset.batch(&all)?)?;
        let entries = dataset
            .ids()
            .iter()
            .zip(logits.iter_rows())
            .map(|(&id, row)| (id, row.iter().map(|&v| v as f32).collect()))
            .collect();
        LogitsTable::new(params.arch().num_classes, entries, source)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.entries.iter().map(|(&id, v)| (id, v.as_slice()))
    }
}

/// Teacher answering by id lookup in a [`LogitsTable`].
#[derive(Debug, Clone)]
pub struct TableTeacher {
    table: Arc<LogitsTable>,
}

impl Teacher for TableTeacher {
    fn kind(&self) -> TeacherKind {
        TeacherKind::LogitsTable
    }

    fn num_classes(&self) -> usize {
        self.table.num_classes
    }

    fn logits(&self, batch: &nn::Batch) -> Result<Matrix> {
        let k = self.table.num_classes;
        let mut out = Vec::with_capacity(batch.len() * k);
        for &id in &batch.ids {
            let row = self.table.get(id).ok_or(Error::UnknownExampleId(id))?;
            out.extend(row.iter().map(|&v| f64::from(v)));
        }
        Matrix::from_vec(batch.len(), k, out)
    }
}

pub fn teacher_from_logits_table(table: LogitsTable) -> TableTeacher {
    TableTeacher {
        table: Arc::new(table),
    }
}

/// Runs cross-entropy SGD over `dataset`. With `last_layer_only`, gradients
/// of every tensor but the output layer are dropped.
fn train_centrally(
    mut params: ModelParams,
    dataset: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
    last_layer_only: bool,
) -> Result<ModelParams> {
    let opt = OptimizerState::constant(lr)?;
    let frozen = if last_layer_only {
        params.arch().layout().last().map_or(0, |l| l.weight)
    } else {
        0
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..epochs {
        let mut rng = rng::stream(&[tag::CENTRAL, seed, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(CENTRAL_BATCH_SIZE) {
            let batch = dataset.batch(chunk)?;
            let trace = nn::forward_with_trace(&params, &batch.inputs)?;
            let loss = cross_entropy(trace.logits(), &batch.labels)?;
            if !loss.value.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}")));
            }
            let mut grads = nn::backward_with_trace(&params, &trace, &loss.grad)?;
            grads[..frozen].fill(0.0);
            nn::sgd_step_in_place(&mut params, &grads, &opt, 0)?;
        }
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct PretrainedTeacher {
    pub teacher: ModelTeacher,
    pub train_accuracy: f64,
}

/// Trains a teacher from scratch on `dataset` with plain cross-entropy.
pub fn pretrain_teacher(
    dataset: &Dataset,
    arch: &ArchDescriptor,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<PretrainedTeacher> {
    check_compatible(arch, dataset)?;
    let params = train_centrally(init_params(arch, seed)?, dataset, epochs, lr, seed, false)?;
    let train_accuracy = nn::accuracy(&params, dataset.features(), dataset.labels())?;
    Ok(PretrainedTeacher {
        teacher: ModelTeacher::pretrained(params),
        train_accuracy,
    })
}

fn check_compatible(arch: &ArchDescriptor, dataset: &Dataset) -> Result<()> {
    if arch.input_dim != dataset.input_dim() || arch.num_classes != dataset.num_classes() {
        return Err(Error::Shape(format!(
            "architecture is {}->{}, dataset is {}->{}",
            arch.input_dim,
            arch.num_classes,
            dataset.input_dim(),
            dataset.num_classes()
        )));
    }
    Ok(())
}

/// Linear-probing analog: a copy of `base` whose output layer only is
/// retrained on `client_data`. `base` is left untouched.
pub fn finetune_teacher_locally(
    base: &ModelTeacher,
    client_data: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelTeacher> {
    if base.kind != TeacherKind::Pretrained {
        return Err(Error::Validation(format!(
            "only pretrained teachers can be fine-tuned, got {:?}",
            base.kind
        )));
    }
    if client_data.is_empty() {
        return Err(Error::Validation("cannot fine-tune on an empty client slice".into()));
    }
    check_compatible(base.params.arch(), client_data)?;
    let params = train_centrally(base.params.clone(), client_data, epochs, lr, seed, true)?;
    Ok(ModelTeacher {
        kind: TeacherKind::LocalFinetuned,
        params,
    })
}

/// Per-client teacher lists.
#[derive(Debug, Clone, Default)]
pub struct ClientTeacherSet {
    per_client: Vec<Vec<SharedTeacher>>,
}

impl ClientTeacherSet {
    pub fn new(per_client: Vec<Vec<SharedTeacher>>) -> Self {
        ClientTeacherSet { per_client }
    }

    /// Every client without teachers.
    pub fn empty(n_clients: usize) -> Self {
        ClientTeacherSet {
            per_client: vec![Vec::new(); n_clients],
        }
    }

    pub fn n_clients(&self) -> usize {
        self.per_client.len()
    }

    pub fn client(&self, i: usize) -> &[SharedTeacher] {
        &self.per_client[i]
    }

    /// Checks the list count and, when distillation is active, that no client is empty.
    pub fn validate(&self, n_clients: usize, lambda: f64) -> Result<()> {
        if self.per_client.len() != n_clients {
            return Err(Error::Validation(format!(
                "teacher lists for {} clients, federation has {n_clients}",
                self.per_client.len()
            )));
        }
        if lambda < 1.0 {
            if let Some(i) = self.per_client.iter().position(Vec::is_empty) {
                return Err(Error::config(
                    "teachers",
                    format!("client {i} has no teacher but lambda is {lambda}"),
                ));
            }
        }
        Ok(())
    }
}

/// How teachers from a pool are handed out to clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TeacherPolicy {
    /// No client has a teacher.
    None,
    /// Every client references the same pool entry.
    Uniform { teacher: usize },
    /// Explicit pool indices per client.
    PerClientList(Vec<Vec<usize>>),
    /// Each client independently draws one pool entry uniformly at random.
    RandomChoice,
}

/// Pool indices each client receives under `policy`.
pub fn assign_teachers(policy: &TeacherPolicy, n_clients: usize, pool_len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let check = |i: usize| -> Result<usize> {
        if i < pool_len {
            Ok(i)
        } else {
            Err(Error::Validation(format!("teacher index {i} out of range for pool of {pool_len}")))
        }
    };
    match policy {
        TeacherPolicy::None => Ok(vec![Vec::new(); n_clients]),
        TeacherPolicy::Uniform { teacher } => {
            let t = check(*teacher)?;
            Ok(vec![vec![t]; n_clients])
        }
        TeacherPolicy::PerClientList(lists) => {
            if lists.len() != n_clients {
                return Err(Error::Validation(format!(
                    "per-client teacher list has {} entries for {n_clients} clients",
                    lists.len()
                )));
            }
            lists.iter().map(|l| l.iter().map(|&i| check(i)).collect()).collect()
        }
        TeacherPolicy::RandomChoice if pool_len == 0 => Ok(vec![Vec::new(); n_clients]),
        TeacherPolicy::RandomChoice => Ok((0..n_clients)
            .map(|c| {
                let mut rng = rng::stream(&[tag::TEACHER_CHOICE, seed, c as u64]);
                vec![rng.random_range(0..pool_len)]
            })
            .collect()),
    }
}

pub fn build_client_teacher_sets(
    policy: &TeacherPolicy,
    n_clients: usize,
    pool: &[SharedTeacher],
    seed: u64,
    lambda: f64,
) -> Result<ClientTeacherSet> {
    if lambda < 1.0 && (pool.is_empty() || *policy == TeacherPolicy::None) {
        return Err(Error::config(
            "teachers",
            format!("lambda {lambda} < 1 needs a non-empty teacher pool"),
        ));
    }
    let per_client = assign_teachers(policy, n_clients, pool.len(), seed)?
        .into_iter()
        .map(|l| l.into_iter().map(|i| pool[i].clone()).collect())
        .collect();
    let set = ClientTeacherSet { per_client };
    set.validate(n_clients, lambda)?;
    Ok(set)
}

/// One locally fine-tuned copy of `base` per client, each trained on that
/// client's slice of `train`.
pub fn finetuned_teacher_sets(
    base: &ModelTeacher,
    train: &Dataset,
    assignment: &PartitionAssignment,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ClientTeacherSet> {
    let per_client = assignment
        .per_client
        .iter()
        .enumerate()
        .map(|(c, idx)| {
            let slice = train.subset(idx)?;
            let t = finetune_teacher_locally(base, &slice, epochs, lr, rng::derive_seed(&[seed, c as u64]))?;
            Ok(vec![Arc::new(t) as SharedTeacher])
        })
        .collect::<Result<_>>()?;
    Ok(ClientTeacherSet { per_client })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticBlobs};
    use crate::losses::softmax;
    use crate::nn::{Batch, Norm};

    fn table_7() -> LogitsTable {
        LogitsTable::new(2, BTreeMap::from([(7, vec![1.0, 2.0])]), "t".into()).unwrap()
    }

    fn id_batch(ids: Vec<u64>) -> Batch {
        let n = ids.len();
        Batch::with_ids(Matrix::zeros(n, 1), vec![0; n], ids).unwrap()
    }

    #[test]
    fn table_lookup() {
        let t = teacher_from_logits_table(table_7());
        let logits = t.logits(&id_batch(vec![7])).unwrap();
        assert_eq!(logits.row(0), &[1.0, 2.0]);
        match t.logits(&id_batch(vec![7, 8])) {
            Err(e @ Error::UnknownExampleId(8)) => assert!(e.to_string().contains('8')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn table_validation() {
        assert!(LogitsTable::new(3, BTreeMap::from([(1, vec![0.0; 2])]), String::new()).is_err());
        assert!(LogitsTable::new(2, BTreeMap::from([(1, vec![f32::NAN, 0.0])]), String::new()).is_err());
    }

    #[test]
    fn table_roundtrip_gives_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fflt");
        crate::io::write_logits_table(&table_7(), &path).unwrap();
        let a = teacher_from_logits_table(table_7());
        let b = teacher_from_logits_table(crate::io::read_logits_table(&path).unwrap());
        let batch = id_batch(vec![7, 7]);
        assert_eq!(a.logits(&batch).unwrap(), b.logits(&batch).unwrap());
    }

    fn arch() -> ArchDescriptor {
        ArchDescriptor::new(8, vec![32], 10, Norm::GroupNorm { groups: 8 }).unwrap()
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let ds = generate_synthetic(10, 10, 8, 10.0, 0).unwrap();
        let t = pretrain_teacher(&ds, &arch(), 0, 0.1, 5).unwrap();
        assert!(t.teacher.params().bit_eq(&init_params(&arch(), 5).unwrap()));
    }

    #[test]
    fn pretraining_fits_separable_blobs_deterministically() {
        let ds = generate_synthetic(10, 100, 8, 10.0, 0).unwrap();
        let a = pretrain_teacher(&ds, &arch(), 50, 0.05, 1).unwrap();
        assert!(a.train_accuracy >= 0.95, "train accuracy {}", a.train_accuracy);
        let b = pretrain_teacher(&ds, &arch(), 50, 0.05, 1).unwrap();
        assert!(a.teacher.params().bit_eq(b.teacher.params()));
    }

    #[test]
    fn finetuning_biases_towards_local_class() {
        let blobs = SyntheticBlobs::new(10, 8, 3.0, 2).unwrap();
        let train = blobs.sample(50, 0, 0).unwrap();
        let held_out = blobs.sample(20, 1, 10_000).unwrap();
        let base = pretrain_teacher(&train, &arch(), 20, 0.05, 0).unwrap().teacher;
        let before = base.params().clone();

        let class3: Vec<usize> = (0..train.len()).filter(|&i| train.labels()[i] == 3).collect();
        let slice = train.subset(&class3).unwrap();

        let same = finetune_teacher_locally(&base, &slice, 0, 0.05, 0).unwrap();
        let all: Vec<usize> = (0..held_out.len()).collect();
        let probe = held_out.batch(&all).unwrap();
        assert_eq!(same.logits(&probe).unwrap(), base.logits(&probe).unwrap());
        assert_eq!(same.kind(), TeacherKind::LocalFinetuned);

        let tuned = finetune_teacher_locally(&base, &slice, 10, 0.05, 0).unwrap();
        assert!(base.params().bit_eq(&before));
        let mean_p3 = |t: &ModelTeacher| {
            let l = t.logits(&probe).unwrap();
            l.iter_rows().map(|r| softmax(r, 1.0)[3]).sum::<f64>() / l.rows() as f64
        };
        assert!(mean_p3(&tuned) > mean_p3(&base));

        // hidden layers frozen
        let last = base.params().arch().layout().last().unwrap().weight;
        assert_eq!(&tuned.params().values()[..last], &base.params().values()[..last]);

        assert!(finetune_teacher_locally(&tuned, &slice, 1, 0.05, 0).is_err());
        let empty = train.subset(&[]).unwrap();
        assert!(finetune_teacher_locally(&base, &empty, 1, 0.05, 0).is_err());
    }

    fn pool() -> Vec<SharedTeacher> {
        vec![
            Arc::new(teacher_from_logits_table(table_7())),
            Arc::new(teacher_from_logits_table(
                LogitsTable::new(2, BTreeMap::from([(7, vec![0.0, 0.0])]), "b".into()).unwrap(),
            )),
        ]
    }

    #[test]
    fn uniform_policy_shares_one_teacher() {
        let pool = pool();
        let set = build_client_teacher_sets(&TeacherPolicy::Uniform { teacher: 1 }, 4, &pool, 0, 0.5).unwrap();
        for c in 0..4 {
            assert_eq!(set.client(c).len(), 1);
            assert!(Arc::ptr_eq(&set.client(c)[0], &pool[1]));
        }
    }

    #[test]
    fn random_choice_is_reproducible() {
        let pool = pool();
        let pick = |seed| {
            let set = build_client_teacher_sets(&TeacherPolicy::RandomChoice, 10, &pool, seed, 0.5).unwrap();
            (0..10)
                .map(|c| usize::from(Arc::ptr_eq(&set.client(c)[0], &pool[1])))
                .collect::<Vec<_>>()
        };
        assert_eq!(pick(3), pick(3));
        let draws = pick(3);
        assert!(draws.contains(&0) && draws.contains(&1), "{draws:?}");
    }

    #[test]
    fn policy_errors() {
        let pool = pool();
        let wrong_len = TeacherPolicy::PerClientList(vec![vec![0]; 3]);
        assert!(matches!(
            build_client_teacher_sets(&wrong_len, 4, &pool, 0, 0.5),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            build_client_teacher_sets(&TeacherPolicy::RandomChoice, 4, &[], 0, 0.5),
            Err(Error::Config { .. })
        ));
        let one_empty = TeacherPolicy::PerClientList(vec![vec![0], vec![]]);
        assert!(build_client_teacher_sets(&one_empty, 2, &pool, 0, 0.5).is_err());
        assert!(build_client_teacher_sets(&one_empty, 2, &pool, 0, 1.0).is_ok());
        assert!(build_client_teacher_sets(&TeacherPolicy::None, 2, &[], 0, 1.0).is_ok());
    }
}
