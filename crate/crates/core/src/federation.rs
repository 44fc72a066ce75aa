//! Server round loop, client local updates, and size-weighted aggregation.
//!
//! Each round the server samples clients, broadcasts the global proxy
//! parameters, runs every sampled client's local update (optionally in
//! parallel), and replaces the global model by the size-weighted average of
//! the returned proxies. Client randomness is keyed by `(seed, round, client)`
//! so results do not depend on execution order.

use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PartitionAssignment};
use crate::losses::{combined_loss, cross_entropy, mutual_learning_losses, proximal_penalty, DistillConfig};
use crate::nn::{self, init_params, ModelParams, OptimizerState, StepSchedule};
use crate::rng::{self, tag};
use crate::teachers::{ClientTeacherSet, SharedTeacher};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Algorithm {
    /// Cross-entropy plus KL distillation from the client's frozen teachers.
    FedLpfm,
    FedAvg,
    /// FedAvg with a `(mu / 2) * ||theta - theta_global||^2` local penalty.
    FedProx { mu: f64 },
    /// Mutual learning between the shared proxy and a private local model.
    Fml { beta: f64 },
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedLpfm => "fed_lpfm",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx { .. } => "fedprox",
            Algorithm::Fml { .. } => "fml",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub n_clients: usize,
    /// Communication rounds `T`.
    pub rounds: usize,
    /// Local epochs `Q` per round.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Rounds between learning-rate decays.
    pub lr_milestone: usize,
    pub lr_factor: f64,
    pub client_fraction: f64,
    pub distill: DistillConfig,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            algorithm: Algorithm::FedLpfm,
            n_clients: 10,
            rounds: 600,
            local_epochs: 1,
            batch_size: 32,
            base_lr: 0.01,
            weight_decay: 5e-4,
            lr_milestone: 200,
            lr_factor: 0.1,
            client_fraction: 1.0,
            distill: DistillConfig::default(),
            seed: 0,
            eval_every: 10,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("federation.{key}"), "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("n_clients", self.n_clients)?;
        positive("rounds", self.rounds)?;
        positive("local_epochs", self.local_epochs)?;
        positive("batch_size", self.batch_size)?;
        positive("eval_every", self.eval_every)?;
        positive("lr_milestone", self.lr_milestone)?;
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::config(
                "federation.client_fraction",
                format!("must lie in (0, 1], got {}", self.client_fraction),
            ));
        }
        match self.algorithm {
            Algorithm::FedProx { mu } if !(mu.is_finite() && mu >= 0.0) => {
                return Err(Error::config("federation.mu", format!("must be non-negative, got {mu}")));
            }
            Algorithm::Fml { beta } if !(0.0..=1.0).contains(&beta) => {
                return Err(Error::config("federation.beta", format!("must lie in [0, 1], got {beta}")));
            }
            _ => {}
        }
        self.optimizer().map_err(|e| Error::config("federation.lr", e.to_string()))?;
        self.distill.validate()
    }

    pub fn optimizer(&self) -> Result<OptimizerState> {
        OptimizerState::new(
            self.base_lr,
            self.weight_decay,
            StepSchedule {
                milestone: self.lr_milestone,
                factor: self.lr_factor,
            },
        )
    }

    /// `max(1, round(client_fraction * n_clients))`.
    pub fn participants_per_round(&self) -> usize {
        participants(self.n_clients, self.client_fraction)
    }

    /// Whether the teachers' outputs enter the local objective.
    pub fn uses_teachers(&self) -> bool {
        self.algorithm == Algorithm::FedLpfm && self.distill.lambda < 1.0
    }
}

fn participants(n_clients: usize, fraction: f64) -> usize {
    ((fraction * n_clients as f64).round() as usize).clamp(1, n_clients)
}

/// Uniform sample without replacement, returned in ascending id order.
pub fn sample_clients(n_clients: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let m = participants(n_clients, fraction);
    if m == n_clients {
        return (0..n_clients).collect();
    }
    let mut rng = rng::stream(&[tag::SAMPLE_CLIENTS, seed, round as u64]);
    let mut ids = index::sample(&mut rng, n_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Everything a client keeps locally. Only proxy parameters ever leave it.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Indices into the training set.
    pub indices: Vec<usize>,
    pub teachers: Vec<SharedTeacher>,
    /// FML private model; persists across rounds and is never aggregated.
    pub private: Option<ModelParams>,
    /// Key of the client's random stream; equals `id` unless overridden.
    pub stream_id: u64,
    /// Teacher logits over `indices`, computed once on first use.
    teacher_logits: Option<Vec<Matrix>>,
}

impl ClientState {
    pub fn new(id: usize, indices: Vec<usize>, teachers: Vec<SharedTeacher>) -> Self {
        ClientState {
            id,
            indices,
            teachers,
            private: None,
            stream_id: id as u64,
            teacher_logits: None,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn cached_teacher_logits(&mut self, train: &Dataset) -> Result<&[Matrix]> {
        if self.teacher_logits.is_none() {
            let batch = train.batch(&self.indices)?;
            let logits = self
                .teachers
                .iter()
                .map(|t| t.logits(&batch))
                .collect::<Result<Vec<_>>>()?;
            self.teacher_logits = Some(logits);
        }
        Ok(self.teacher_logits.as_deref().unwrap_or_default())
    }
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Mean over mini-batches of the local objective.
    pub mean_loss: f64,
}

/// Runs `Q` epochs of mini-batch SGD from `global` on the client's data.
/// Batches are reshuffled each epoch; the last short batch is kept.
pub fn local_update(
    global: &ModelParams,
    client: &mut ClientState,
    train: &Dataset,
    cfg: &FederationConfig,
    round: usize,
) -> Result<LocalOutcome> {
    let id = client.id;
    run_local(global, client, train, cfg, round).map_err(|e| Error::Client {
        round,
        client: id,
        source: Box::new(e),
    })
}

fn run_local(
    global: &ModelParams,
    client: &mut ClientState,
    train: &Dataset,
    cfg: &FederationConfig,
    round: usize,
) -> Result<LocalOutcome> {
    if client.is_empty() {
        return Err(Error::Validation("client holds no examples".into()));
    }
    let opt = cfg.optimizer()?;
    let mut params = global.clone();
    let mut rng = rng::stream(&[tag::LOCAL_UPDATE, cfg.seed, round as u64, client.stream_id]);
    let mut order: Vec<usize> = (0..client.len()).collect();
    let use_teachers = cfg.uses_teachers();
    if use_teachers {
        client.cached_teacher_logits(train)?;
    }
    if let Algorithm::Fml { .. } = cfg.algorithm {
        if client.private.is_none() {
            let seed = rng::derive_seed(&[tag::PRIVATE_MODEL, cfg.seed, client.id as u64]);
            client.private = Some(init_params(global.arch(), seed)?);
        }
    }

    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<usize> = chunk.iter().map(|&p| client.indices[p]).collect();
            let batch = train.batch(&rows)?;
            let trace = nn::forward_with_trace(&params, &batch.inputs)?;
            let (value, grads) = match cfg.algorithm {
                Algorithm::FedAvg => {
                    let loss = cross_entropy(trace.logits(), &batch.labels)?;
                    (loss.value, nn::backward_with_trace(&params, &trace, &loss.grad)?)
                }
                Algorithm::FedLpfm => {
                    let teacher_rows: Vec<Matrix> = if use_teachers {
                        client
                            .teacher_logits
                            .as_deref()
                            .unwrap_or_default()
                            .iter()
                            .map(|m| m.select_rows(chunk))
                            .collect()
                    } else {
                        Vec::new()
                    };
                    let loss = combined_loss(trace.logits(), &batch.labels, &teacher_rows, &cfg.distill)?;
                    (loss.value, nn::backward_with_trace(&params, &trace, &loss.grad)?)
                }
                Algorithm::FedProx { mu } => {
                    let loss = cross_entropy(trace.logits(), &batch.labels)?;
                    let mut grads = nn::backward_with_trace(&params, &trace, &loss.grad)?;
                    let mut value = loss.value;
                    if mu > 0.0 {
                        let (penalty, prox) = proximal_penalty(&params, global, mu)?;
                        value += penalty;
                        for (g, p) in grads.iter_mut().zip(prox) {
                            *g += p;
                        }
                    }
                    (value, grads)
                }
                Algorithm::Fml { beta } => {
                    let private = client.private.as_mut().expect("private model initialized above");
                    let private_trace = nn::forward_with_trace(private, &batch.inputs)?;
                    let (proxy_loss, private_loss) =
                        mutual_learning_losses(trace.logits(), private_trace.logits(), &batch.labels, beta)?;
                    let private_grads = nn::backward_with_trace(private, &private_trace, &private_loss.grad)?;
                    nn::sgd_step_in_place(private, &private_grads, &opt, round)?;
                    (proxy_loss.value, nn::backward_with_trace(&params, &trace, &proxy_loss.grad)?)
                }
            };
            if !value.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in local epoch {epoch}")));
            }
            nn::sgd_step_in_place(&mut params, &grads, &opt, round)?;
            loss_sum += value;
            batches += 1;
        }
    }
    Ok(LocalOutcome {
        params,
        mean_loss: loss_sum / batches as f64,
    })
}

/// Size-weighted average `sum_i (|D_i| / sum_j |D_j|) * theta_i`.
///
/// Computed as `theta_0 + sum_i p_i (theta_i - theta_0)`, which equals the
/// weighted mean but returns identical inputs unchanged bit for bit. Each
/// coordinate is clamped to the inputs' range to absorb rounding.
pub fn aggregate(models: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::Validation("cannot aggregate an empty model list".into()))?;
    if models.len() != sizes.len() {
        return Err(Error::Validation(format!(
            "{} models with {} sizes",
            models.len(),
            sizes.len()
        )));
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Validation(format!("model {i} has dataset size 0")));
    }
    if let Some(i) = models.iter().position(|m| m.arch() != first.arch()) {
        return Err(Error::Validation(format!(
            "model {i} has a different architecture from model 0"
        )));
    }
    let weights = aggregation_weights(sizes);
    let anchor = first.values();
    let mut out = anchor.to_vec();
    for (m, &p) in models.iter().zip(&weights).skip(1) {
        for ((o, &v), &a) in out.iter_mut().zip(m.values()).zip(anchor) {
            *o += p * (v - a);
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        let (lo, hi) = models.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
            let v = m.values()[j];
            (lo.min(v), hi.max(v))
        });
        *o = o.clamp(lo, hi);
    }
    ModelParams::new(first.arch().clone(), out)
}

/// `|D_i| / sum_j |D_j|` in f64.
pub fn aggregation_weights(sizes: &[usize]) -> Vec<f64> {
    let total = sizes.iter().map(|&s| s as u64).sum::<u64>() as f64;
    sizes.iter().map(|&s| s as f64 / total).collect()
}

/// Top-1 accuracy on `test`; ties in the logits go to the lowest class.
pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty test set".into()));
    }
    nn::accuracy(params, test.features(), test.labels())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Client updates of a round run on the rayon thread pool.
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// Number of completed rounds, `1..=T`.
    pub round: usize,
    pub clients: Vec<usize>,
    pub accuracy: f64,
    pub train_loss: f64,
    pub lr: f64,
    pub duration: Duration,
}

/// Outcome of one server round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<usize>,
    pub train_loss: f64,
    pub lr: f64,
    pub duration: Duration,
    /// Present on evaluation rounds.
    pub accuracy: Option<f64>,
}

impl RoundReport {
    pub fn metrics(&self) -> Option<RoundMetrics> {
        self.accuracy.map(|accuracy| RoundMetrics {
            round: self.round,
            clients: self.clients.clone(),
            accuracy,
            train_loss: self.train_loss,
            lr: self.lr,
            duration: self.duration,
        })
    }
}

/// Stepwise driver of a federated run.
pub struct Simulation<'a> {
    cfg: FederationConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    clients: Vec<ClientState>,
    global: ModelParams,
    round: usize,
    execution: Execution,
}

impl<'a> Simulation<'a> {
    pub fn new(
        cfg: FederationConfig,
        init: ModelParams,
        train: &'a Dataset,
        test: &'a Dataset,
        assignment: &PartitionAssignment,
        teachers: &ClientTeacherSet,
    ) -> Result<Self> {
        cfg.validate()?;
        if assignment.n_clients() != cfg.n_clients {
            return Err(Error::config(
                "federation.n_clients",
                format!(
                    "config has {} clients, partition has {}",
                    cfg.n_clients,
                    assignment.n_clients()
                ),
            ));
        }
        assignment.validate(train.len())?;
        let lambda = if cfg.uses_teachers() { cfg.distill.lambda } else { 1.0 };
        teachers.validate(cfg.n_clients, lambda)?;
        let arch = init.arch();
        if arch.input_dim != train.input_dim() || arch.num_classes != train.num_classes() {
            return Err(Error::Shape(format!(
                "proxy is {}->{}, training data is {}->{}",
                arch.input_dim,
                arch.num_classes,
                train.input_dim(),
                train.num_classes()
            )));
        }
        let clients = assignment
            .per_client
            .iter()
            .enumerate()
            .map(|(i, idx)| ClientState::new(i, idx.clone(), teachers.client(i).to_vec()))
            .collect();
        Ok(Simulation {
            cfg,
            train,
            test,
            clients,
            global: init,
            round: 0,
            execution: Execution::default(),
        })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    /// Completed rounds.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.cfg.rounds
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [ClientState] {
        &mut self.clients
    }

    /// Sample, broadcast, train locally, aggregate, and evaluate if due.
    pub fn step(&mut self) -> Result<RoundReport> {
        let start = Instant::now();
        let t = self.round;
        let selected = sample_clients(self.cfg.n_clients, self.cfg.client_fraction, t, self.cfg.seed);
        let mut mask = vec![false; self.clients.len()];
        for &i in &selected {
            mask[i] = true;
        }
        let (cfg, train, global) = (&self.cfg, self.train, &self.global);
        let participants: Vec<&mut ClientState> = self
            .clients
            .iter_mut()
            .filter(|c| mask[c.id])
            .collect();
        let run = |c: &mut ClientState| -> Result<(LocalOutcome, usize)> {
            local_update(global, c, train, cfg, t).map(|o| (o, c.len()))
        };
        let outcomes: Vec<(LocalOutcome, usize)> = match self.execution {
            Execution::Sequential => participants.into_iter().map(run).collect::<Result<_>>()?,
            Execution::Parallel => participants.into_par_iter().map(run).collect::<Result<_>>()?,
        };
        let sizes: Vec<usize> = outcomes.iter().map(|(_, n)| *n).collect();
        let train_loss = outcomes.iter().map(|(o, _)| o.mean_loss).sum::<f64>() / outcomes.len() as f64;
        let models: Vec<ModelParams> = outcomes.into_iter().map(|(o, _)| o.params).collect();
        self.global = aggregate(&models, &sizes)?;
        self.round += 1;

        let due = self.round.is_multiple_of(self.cfg.eval_every) || self.round == self.cfg.rounds;
        let accuracy = if due { Some(evaluate(&self.global, self.test)?) } else { None };
        Ok(RoundReport {
            round: self.round,
            clients: selected,
            train_loss,
            lr: self.cfg.optimizer()?.lr_at(t),
            duration: start.elapsed(),
            accuracy,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FederationRun {
    pub metrics: Vec<RoundMetrics>,
    pub final_params: ModelParams,
}

/// Runs all `cfg.rounds` rounds from `init` and returns the evaluated-round
/// metrics together with `theta_T`.
pub fn run_federation(
    cfg: &FederationConfig,
    init: ModelParams,
    train: &Dataset,
    test: &Dataset,
    assignment: &PartitionAssignment,
    teachers: &ClientTeacherSet,
) -> Result<FederationRun> {
    run_federation_with(cfg, init, train, test, assignment, teachers, Execution::default(), |_| {})
}

/// [`run_federation`] with an explicit execution mode and a per-round observer.
#[allow(clippy::too_many_arguments)]
pub fn run_federation_with(
    cfg: &FederationConfig,
    init: ModelParams,
    train: &Dataset,
    test: &Dataset,
    assignment: &PartitionAssignment,
    teachers: &ClientTeacherSet,
    execution: Execution,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<FederationRun> {
    let mut sim = Simulation::new(cfg.clone(), init, train, test, assignment, teachers)?.with_execution(execution);
    let mut metrics = Vec::new();
    while !sim.is_finished() {
        let report = sim.step()?;
        on_round(&report);
        metrics.extend(report.metrics());
    }
    Ok(FederationRun {
        metrics,
        final_params: sim.global,
    })
}
