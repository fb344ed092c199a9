//! Per-task training loop, task-boundary bookkeeping and full runs.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{BufferPolicy, ReplayBuffer};
use crate::data::{Batch, LabeledDataset};
use crate::error::{config_err, Error, Result};
use crate::losses::{
    l_ce, l_ice, l_ider, l_rep_ice, Gradients, LossBreakdown, LossConfig, ObjectiveInputs,
    Projection,
};
use crate::metrics::{
    confidence_records, ece, faa, final_forgetting, idempotence_distances,
    probability_mass_from_logits, reliability_table, AccuracyMatrix, ConfidenceRecord,
    ReliabilityBin,
};
use crate::nn::{empty_batch, snapshot, Architecture, CheckpointFile, FrozenCheckpoint, Network};
use crate::optim::{clip_global_norm, MultiStep, Sgd};
use crate::streams::{Protocol, TaskSpec, TaskStream};
use crate::tensor::Tensor;

/// Training objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Cross-entropy on the current task only.
    Finetune,
    /// Cross-entropy on the current batch plus a replayed batch.
    Er,
    /// Two-pass cross-entropy on the current batch plus a replayed batch.
    ErIce,
    /// Two-pass cross-entropy, checkpoint distillation and replay.
    ErId,
    /// `ErId` plus the projected feature-distance term.
    BfpId,
    /// `ErId` with the live network as its own distillation teacher.
    NaiveId,
}

impl Method {
    pub fn uses_buffer(self) -> bool {
        !matches!(self, Method::Finetune)
    }

    pub fn default_policy(self) -> BufferPolicy {
        match self {
            Method::BfpId => BufferPolicy::ClassBalanced,
            _ => BufferPolicy::Reservoir,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(
            match s.to_ascii_lowercase().replace(['_', '+'], "-").as_str() {
                "finetune" => Method::Finetune,
                "er" => Method::Er,
                "er-ice" => Method::ErIce,
                "er-id" | "ider" => Method::ErId,
                "bfp-id" => Method::BfpId,
                "naive-id" => Method::NaiveId,
                other => return Err(config_err(format!("unknown method `{other}`"))),
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs (0-based) at which the learning rate decays; `None` places
    /// them at 60% and 90% of the epoch budget.
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling per step.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub method: Method,
    pub loss: LossConfig,
    pub buffer_capacity: usize,
    /// Defaults to the method's preferred policy.
    pub buffer_policy: Option<BufferPolicy>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 5,
            batch_size: 32,
            learning_rate: 0.03,
            lr_decay_epochs: None,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            grad_clip: Some(5.0),
            seed: 0,
            method: Method::ErId,
            loss: LossConfig::default(),
            buffer_capacity: 200,
            buffer_policy: None,
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_task < 1 {
            return Err(config_err("epochs_per_task must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning_rate must be positive"));
        }
        if self.method.uses_buffer() && self.buffer_capacity == 0 {
            return Err(config_err("replay methods need a positive buffer capacity"));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(config_err("grad_clip must be positive"));
            }
        }
        if self.eval_batch == 0 {
            return Err(config_err("eval_batch must be positive"));
        }
        self.loss.validate()
    }

    pub fn schedule(&self) -> MultiStep {
        MultiStep {
            base: self.learning_rate,
            milestones: self
                .lr_decay_epochs
                .clone()
                .unwrap_or_else(|| MultiStep::default_milestones(self.epochs_per_task)),
            factor: self.lr_decay_factor,
        }
    }

    pub fn policy(&self) -> BufferPolicy {
        self.buffer_policy.unwrap_or(self.method.default_policy())
    }
}

/// Objective values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Phase {
    Ready,
    Trained,
}

/// All mutable state of one run.
#[derive(Debug, Clone)]
pub struct TrainerState {
    net: Network,
    checkpoint: Option<FrozenCheckpoint>,
    buffer: ReplayBuffer<Vec<f64>>,
    projection: Option<Projection>,
    current_task: usize,
    phase: Phase,
    rng: ChaCha8Rng,
    steps: Vec<StepRecord>,
}

impl TrainerState {
    /// Fresh state with the network initialized from `config.seed`.
    pub fn new(arch: Architecture, config: &TrainConfig) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = Network::init(arch, &mut init_rng)?;
        Self::with_network(net, config)
    }

    /// Fresh state around an already-built network.
    pub fn with_network(net: Network, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            net,
            checkpoint: None,
            buffer: ReplayBuffer::new(config.buffer_capacity.max(1), config.policy())?,
            projection: None,
            current_task: 0,
            phase: Phase::Ready,
            rng,
            steps: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn checkpoint(&self) -> Option<&FrozenCheckpoint> {
        self.checkpoint.as_ref()
    }

    pub fn buffer(&self) -> &ReplayBuffer<Vec<f64>> {
        &self.buffer
    }

    pub fn current_task(&self) -> usize {
        self.current_task
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Trains on `task` for the configured number of epochs.
    pub fn train_task(
        &mut self,
        task: &TaskSpec,
        train: &LabeledDataset,
        config: &TrainConfig,
    ) -> Result<()> {
        if task.task_id != self.current_task {
            return Err(Error::Sequencing(format!(
                "task {} offered while task {} is current",
                task.task_id, self.current_task
            )));
        }
        if task.train_samples.is_empty() {
            return Err(config_err(format!(
                "task {} has no training samples",
                task.task_id
            )));
        }
        config.validate()?;
        let method = config.method;
        let replay_active = self.checkpoint.is_some() && method.uses_buffer();
        if method == Method::BfpId && self.checkpoint.is_some() {
            self.projection = Some(Projection::identity(self.net.feature_dim()));
        }
        let schedule = config.schedule();
        let mut opt = Sgd::new(self.net.n_params(), config.momentum);
        let proj_dim = self.projection.as_ref().map_or(0, Projection::dim);
        let mut proj_opt = Sgd::new(proj_dim * proj_dim, config.momentum);
        let mut grads = Gradients::zeros(self.net.n_params(), proj_dim);
        let shape = train.shape();
        let mut order = task.train_samples.clone();
        let mut step = 0;
        for epoch in 0..config.epochs_per_task {
            let lr = schedule.lr_at(epoch);
            order.shuffle(&mut self.rng);
            for idx in order.chunks(config.batch_size) {
                let current = train.gather(idx)?;
                grads.clear();
                let loss = self.objective(&current, replay_active, shape, config, &mut grads)?;
                if !loss.total.is_finite() {
                    return Err(Error::Config(format!(
                        "objective diverged at task {} epoch {epoch} step {step}; lower the learning rate or set grad_clip",
                        task.task_id
                    )));
                }
                if let Some(c) = config.grad_clip {
                    clip_global_norm(&mut [&mut grads.net, &mut grads.projection], c);
                }
                opt.step(self.net.params_mut(), &grads.net, lr);
                if let Some(p) = self.projection.as_mut() {
                    proj_opt.step(p.weights_mut(), &grads.projection, lr);
                }
                if epoch == 0 && method.uses_buffer() {
                    for &i in idx {
                        self.buffer
                            .offer(train.input(i).to_vec(), train.label(i), &mut self.rng);
                    }
                }
                self.steps.push(StepRecord {
                    task: task.task_id,
                    epoch,
                    step,
                    loss,
                });
                step += 1;
            }
        }
        self.phase = Phase::Trained;
        Ok(())
    }

    fn objective(
        &mut self,
        current: &Batch,
        replay_active: bool,
        shape: [usize; 3],
        config: &TrainConfig,
        grads: &mut Gradients,
    ) -> Result<LossBreakdown> {
        let n = config.batch_size;
        let c = self.net.n_classes();
        let lc = &config.loss;
        let empty_replay = || Batch {
            x: Tensor::zeros(&[0, shape[0], shape[1], shape[2]]),
            labels: Vec::new(),
        };
        let draw = |state: &mut Self| -> Result<Batch> {
            if replay_active {
                state.buffer.sample_tensor_batch(n, shape, &mut state.rng)
            } else {
                Ok(empty_replay())
            }
        };
        match config.method {
            Method::Finetune | Method::Er => {
                let ce = l_ce(
                    &self.net,
                    current,
                    &empty_batch(current.len(), c)?,
                    Some(&mut grads.net),
                    1.0,
                )?;
                let mut out = LossBreakdown {
                    ice: ce,
                    total: ce,
                    ..Default::default()
                };
                if config.method == Method::Er {
                    let b2 = draw(self)?;
                    if !b2.is_empty() {
                        let r = l_ce(
                            &self.net,
                            &b2,
                            &empty_batch(b2.len(), c)?,
                            Some(&mut grads.net),
                            1.0,
                        )?;
                        out.rep_ice = Some(r);
                        out.total += r;
                    }
                }
                Ok(out)
            }
            Method::ErIce => {
                let b2 = draw(self)?;
                let ice = l_ice(
                    &self.net,
                    current,
                    lc.p_empty,
                    lc.stop_inner,
                    &mut self.rng,
                    Some(&mut grads.net),
                    1.0,
                )?;
                let r = l_rep_ice(
                    &self.net,
                    &b2,
                    lc.p_empty,
                    lc.stop_inner,
                    &mut self.rng,
                    Some(&mut grads.net),
                    1.0,
                )?;
                Ok(LossBreakdown {
                    ice,
                    rep_ice: (!b2.is_empty()).then_some(r),
                    total: ice + r,
                    ..Default::default()
                })
            }
            Method::ErId | Method::BfpId | Method::NaiveId => {
                let b1 = draw(self)?;
                let b2 = draw(self)?;
                let naive = config.method == Method::NaiveId;
                let inputs = ObjectiveInputs {
                    net: &self.net,
                    checkpoint: if naive {
                        None
                    } else {
                        self.checkpoint.as_ref()
                    },
                    current,
                    union_part: &b1,
                    replay: &b2,
                    projection: self.projection.as_ref(),
                    naive: naive && replay_active,
                };
                l_ider(&inputs, lc, &mut self.rng, Some(grads))
            }
        }
    }

    /// Freezes the current network as the distillation teacher and advances
    /// to the next task.
    pub fn end_of_task(&mut self) -> Result<()> {
        if self.phase != Phase::Trained {
            return Err(Error::Sequencing(format!(
                "task {} has not been trained since the last boundary",
                self.current_task
            )));
        }
        self.checkpoint = Some(snapshot(&self.net, self.current_task));
        self.current_task += 1;
        self.phase = Phase::Ready;
        Ok(())
    }
}

/// Accuracy of argmax predictions at the empty signal on each of `tasks`,
/// restricted to the test samples of that task's classes.
pub fn evaluate_tasks(
    net: &Network,
    test: &LabeledDataset,
    tasks: &[TaskSpec],
    eval_batch: usize,
) -> Result<Vec<f64>> {
    let logits = predict(net, test, &(0..test.len()).collect::<Vec<_>>(), eval_batch)?;
    let pred: Vec<usize> = (0..logits.batch()).map(|i| argmax(logits.row(i))).collect();
    tasks
        .iter()
        .map(|t| {
            let idx: Vec<usize> = (0..test.len())
                .filter(|&i| t.contains(test.label(i)))
                .collect();
            if idx.is_empty() {
                return Err(config_err(format!(
                    "no test samples for the classes of task {}",
                    t.task_id
                )));
            }
            let hits = idx.iter().filter(|&&i| pred[i] == test.label(i)).count();
            Ok(hits as f64 / idx.len() as f64)
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Logits at the empty signal for the selected test samples.
pub fn predict(
    net: &Network,
    data: &LabeledDataset,
    indices: &[usize],
    eval_batch: usize,
) -> Result<Tensor> {
    let c = net.n_classes();
    let mut out = Vec::with_capacity(indices.len() * c);
    for idx in indices.chunks(eval_batch.max(1)) {
        let b = data.gather(idx)?;
        out.extend_from_slice(net.forward(&b.x, &empty_batch(b.len(), c)?)?.data());
    }
    Tensor::from_vec(&[indices.len(), c], out)
}

/// Per-sample idempotence distances on the final test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdempotenceLog {
    pub sample_task: Vec<usize>,
    /// The final network re-processing its own prediction.
    pub self_distance: Vec<f64>,
    /// The previous-task checkpoint re-processing the final prediction.
    pub cross_distance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub method: Method,
    pub matrix: AccuracyMatrix,
    pub faa: f64,
    pub final_forgetting: Option<f64>,
    pub ece: f64,
    pub reliability: Vec<ReliabilityBin>,
    /// Mean softmax mass per task after the last task (CIL streams only).
    pub task_mass: Option<Vec<f64>>,
    pub wall_clock_secs: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub confidence: Vec<ConfidenceRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub idempotence: Option<IdempotenceLog>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub steps: Vec<StepRecord>,
}

/// Number of calibration bins used in run summaries.
pub const ECE_BINS: usize = 10;

/// Test samples whose class has been seen by task `t`, with their owning task
/// (the first task showing the class).
fn seen_test_samples(
    stream: &TaskStream,
    test: &LabeledDataset,
    t: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut first = vec![None; stream.n_classes()];
    for spec in &stream.tasks()[..=t] {
        for &c in &spec.classes {
            first[c].get_or_insert(spec.task_id);
        }
    }
    (0..test.len())
        .filter_map(|i| first[test.label(i)].map(|task| (i, task)))
        .unzip()
}

/// Saved progress of a run: everything needed to continue after the last
/// finished task.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    finished_tasks: usize,
    current_task: usize,
    phase: Phase,
    matrix: AccuracyMatrix,
    wall_clock_secs: Vec<f64>,
    buffer: ReplayBuffer<Vec<f64>>,
    rng: ChaCha8Rng,
    projection: Option<Projection>,
    steps: Vec<StepRecord>,
}

/// Restored state, finished task count, accuracy matrix and per-task times.
type Resumed = (TrainerState, usize, AccuracyMatrix, Vec<f64>);

const NET_FILE: &str = "network.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const STATE_FILE: &str = "state.json";

impl TrainerState {
    fn save_progress(
        &self,
        dir: &Path,
        finished_tasks: usize,
        matrix: &AccuracyMatrix,
        clock: &[f64],
    ) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        CheckpointFile::from_network(&self.net).save(&dir.join(NET_FILE))?;
        if let Some(ck) = &self.checkpoint {
            CheckpointFile::from_network(ck.network()).save(&dir.join(CHECKPOINT_FILE))?;
        }
        let state = ResumeState {
            finished_tasks,
            current_task: self.current_task,
            phase: self.phase,
            matrix: matrix.clone(),
            wall_clock_secs: clock.to_vec(),
            buffer: self.buffer.clone(),
            rng: self.rng.clone(),
            projection: self.projection.clone(),
            steps: self.steps.clone(),
        };
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec(&state)?)?;
        std::fs::rename(tmp, dir.join(STATE_FILE))?;
        Ok(())
    }

    fn load_progress(dir: &Path, config: &TrainConfig) -> Result<Option<Resumed>> {
        let path = dir.join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let state: ResumeState = serde_json::from_slice(&std::fs::read(path)?)?;
        let net = CheckpointFile::load(&dir.join(NET_FILE))?.to_network()?;
        let checkpoint = if state.current_task > 0 {
            let ck = CheckpointFile::load(&dir.join(CHECKPOINT_FILE))?.to_network()?;
            Some(FrozenCheckpoint::from_parts(ck, state.current_task - 1))
        } else {
            None
        };
        let mut me = Self::with_network(net, config)?;
        me.checkpoint = checkpoint;
        me.buffer = state.buffer;
        me.rng = state.rng;
        me.projection = state.projection;
        me.current_task = state.current_task;
        me.phase = state.phase;
        me.steps = state.steps;
        Ok(Some((
            me,
            state.finished_tasks,
            state.matrix,
            state.wall_clock_secs,
        )))
    }
}

/// Options that do not change the training trajectory.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Persist progress after every task and resume from it when present.
    pub run_dir: Option<&'a Path>,
    /// Keep per-sample confidence and idempotence logs in the result.
    pub keep_logs: bool,
    /// Keep the per-step objective values in the result.
    pub keep_steps: bool,
}

/// Trains through the whole stream, evaluating every seen task after each
/// task, and summarizes the final model.
pub fn run_experiment(
    stream: &TaskStream,
    train: &LabeledDataset,
    test: &LabeledDataset,
    arch: &Architecture,
    config: &TrainConfig,
    options: &RunOptions<'_>,
) -> Result<(RunResult, TrainerState)> {
    config.validate()?;
    if stream.is_empty() {
        return Err(config_err("stream has no tasks"));
    }
    if arch.n_classes != stream.n_classes() {
        return Err(config_err(format!(
            "network head has {} classes but the stream spans {}",
            arch.n_classes,
            stream.n_classes()
        )));
    }
    let t_total = stream.len();
    let resumed = match options.run_dir {
        Some(dir) => TrainerState::load_progress(dir, config)?,
        None => None,
    };
    let (mut state, finished, mut matrix, mut clock) = match resumed {
        Some(r) => r,
        None => (
            TrainerState::new(arch.clone(), config)?,
            0,
            AccuracyMatrix::new(t_total),
            Vec::new(),
        ),
    };
    if finished > t_total || matrix.n_tasks() != t_total {
        return Err(config_err("saved progress belongs to a different stream"));
    }
    for spec in &stream.tasks()[finished..] {
        let t = spec.task_id;
        let started = Instant::now();
        state.train_task(spec, train, config)?;
        let accs = evaluate_tasks(&state.net, test, &stream.tasks()[..=t], config.eval_batch)?;
        for (i, a) in accs.into_iter().enumerate() {
            matrix.set(i, t, a)?;
        }
        clock.push(started.elapsed().as_secs_f64());
        if t + 1 < t_total {
            state.end_of_task()?;
        }
        if let Some(dir) = options.run_dir {
            state.save_progress(dir, t + 1, &matrix, &clock)?;
        }
    }
    let result = summarize(&state, stream, test, config, matrix, clock, options)?;
    Ok((result, state))
}

fn summarize(
    state: &TrainerState,
    stream: &TaskStream,
    test: &LabeledDataset,
    config: &TrainConfig,
    matrix: AccuracyMatrix,
    clock: Vec<f64>,
    options: &RunOptions<'_>,
) -> Result<RunResult> {
    let last = stream.len() - 1;
    let (idx, owner_task) = seen_test_samples(stream, test, last);
    let logits = predict(&state.net, test, &idx, config.eval_batch)?;
    let labels: Vec<usize> = idx.iter().map(|&i| test.label(i)).collect();
    let confidence = confidence_records(&logits, &labels, &owner_task);
    let task_mass = match stream.protocol() {
        Protocol::Cil => Some(probability_mass_from_logits(
            &logits,
            &stream.class_to_task()?,
            stream.len(),
        )),
        _ => None,
    };
    let idempotence = if options.keep_logs {
        let mut self_distance = Vec::with_capacity(idx.len());
        let mut cross = state
            .checkpoint
            .as_ref()
            .map(|_| Vec::with_capacity(idx.len()));
        for chunk in idx.chunks(config.eval_batch) {
            let b = test.gather(chunk)?;
            self_distance.extend(idempotence_distances(&state.net, None, &b.x)?);
            if let (Some(ck), Some(c)) = (state.checkpoint.as_ref(), cross.as_mut()) {
                c.extend(idempotence_distances(&state.net, Some(ck), &b.x)?);
            }
        }
        Some(IdempotenceLog {
            sample_task: owner_task.clone(),
            self_distance,
            cross_distance: cross,
        })
    } else {
        None
    };
    Ok(RunResult {
        seed: config.seed,
        method: config.method,
        faa: faa(&matrix)?,
        final_forgetting: if stream.len() >= 2 {
            Some(final_forgetting(&matrix)?)
        } else {
            None
        },
        ece: ece(&confidence, ECE_BINS)?,
        reliability: reliability_table(&confidence, ECE_BINS)?,
        matrix,
        task_mass,
        wall_clock_secs: clock,
        confidence: if options.keep_logs {
            confidence
        } else {
            Vec::new()
        },
        idempotence,
        steps: if options.keep_steps {
            state.steps.clone()
        } else {
            Vec::new()
        },
    })
}
