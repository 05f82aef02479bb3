//! The collective model: an expandable network trained over a task stream,
//! with an append-only class registry and open-world flagging.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{ClassId, Loader, SampleRef, Task, TensorCache};
use crate::error::{Error, Result};
use crate::fisher::{
    add_retain_grad, conv_tensors, estimate_fisher, retain_loss, FisherConfig, FisherDiag,
};
use crate::learngene::{GradientLedger, StorageMode};
use crate::netgraph::{ExpansionEvent, HeadSpec, LayerSpec, NetworkGraph};
use crate::nn::{softmax_cross_entropy, ImageShape, Optimizer, OptimizerKind};
use crate::seed::{rng_for, sha256_hex};

/// Thirteen 3×3 conv layers; pooling after layers 2, 5 and 9 takes a 32×32
/// input down to 4×4.
pub fn ladder13() -> Vec<LayerSpec> {
    [
        (8, false),
        (8, true),
        (16, false),
        (16, false),
        (16, true),
        (32, false),
        (32, false),
        (32, false),
        (32, true),
        (32, false),
        (32, false),
        (32, false),
        (32, false),
    ]
    .iter()
    .map(|&(w, p)| LayerSpec::conv3(w, p))
    .collect()
}

/// `depth` conv layers of constant width, pooling after the given 1-based
/// positions.
pub fn uniform_stack(depth: usize, width: usize, pool_after: &[usize]) -> Vec<LayerSpec> {
    (1..=depth)
        .map(|i| LayerSpec::conv3(width, pool_after.contains(&i)))
        .collect()
}

/// When the collective grows. Counters refer to the 1-based index of the
/// task about to be trained; 0 disables a rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionSchedule {
    pub widen_every: u32,
    pub deepen_every: u32,
    /// The deepest `protect_top` layers are never widened or duplicated, so
    /// the learngene keeps its shape.
    pub protect_top: usize,
    /// Consumer-weight split jitter for widening (see
    /// [`NetworkGraph::widen_jittered`]).
    pub widen_jitter: f32,
}

impl Default for ExpansionSchedule {
    fn default() -> Self {
        ExpansionSchedule {
            widen_every: 10,
            deepen_every: 25,
            protect_top: 3,
            widen_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectiveConfig {
    pub layers: Vec<LayerSpec>,
    pub head_hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    /// Exemplars kept per class and mixed into later tasks; 0 disables replay.
    pub replay_per_class: usize,
    /// Weight of the Fisher retain penalty between tasks; 0 disables it.
    pub retain_lambda: f32,
    pub fisher: FisherConfig,
    pub expansion: ExpansionSchedule,
    pub lambda_open: f64,
    pub integrate_epochs: usize,
    pub grad_storage: StorageMode,
    pub seed: u64,
}

impl Default for CollectiveConfig {
    fn default() -> Self {
        CollectiveConfig {
            layers: ladder13(),
            head_hidden: vec![256],
            optimizer: OptimizerKind::default(),
            lr: 0.001,
            batch_size: 32,
            epochs_per_task: 5,
            replay_per_class: 20,
            retain_lambda: 0.0,
            fisher: FisherConfig::default(),
            expansion: ExpansionSchedule::default(),
            lambda_open: 0.9587,
            integrate_epochs: 3,
            grad_storage: StorageMode::Histogram,
            seed: 0,
        }
    }
}

impl CollectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config(
                "collective needs at least one conv layer".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.retain_lambda < 0.0 {
            return Err(Error::Config("retain_lambda must be non-negative".into()));
        }
        if !(self.lambda_open > 0.0 && self.lambda_open < 1.0) {
            return Err(Error::Config(format!(
                "lambda_open {} must lie in (0,1)",
                self.lambda_open
            )));
        }
        Ok(())
    }
}

/// Label given to a sample by the open-world rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabel {
    Open,
    Known(usize),
}

/// `1 − max softmax(logits)`.
pub fn open_world_probability(logits: &[f32]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Inference(format!(
            "open-world probability needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    // f64 so uniform logits give 1 - 1/N to double precision
    let top = logits.iter().copied().fold(f32::MIN, f32::max) as f64;
    let z: f64 = logits.iter().map(|&v| (v as f64 - top).exp()).sum();
    Ok(1.0 - 1.0 / z)
}

/// `Open` when `p_open > lambda_open`, otherwise the closed-set prediction.
pub fn assign_pseudo_label(p_open: f64, lambda_open: f64, close_label: usize) -> PseudoLabel {
    if p_open > lambda_open {
        PseudoLabel::Open
    } else {
        PseudoLabel::Known(close_label)
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendingUnknown {
    pub sample: SampleRef,
    pub p_open: f64,
    pub close_label: usize,
}

/// Append-only mapping from classes to head outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRegistry {
    classes: Vec<ClassId>,
    pub lambda_open: f64,
    pub pending: Vec<PendingUnknown>,
}

impl ClassRegistry {
    pub fn new(lambda_open: f64) -> Result<Self> {
        if !(lambda_open > 0.0 && lambda_open < 1.0) {
            return Err(Error::Config(format!(
                "lambda_open {lambda_open} must lie in (0,1)"
            )));
        }
        Ok(ClassRegistry {
            classes: Vec::new(),
            lambda_open,
            pending: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.classes.contains(&class)
    }

    pub fn index_of(&self, class: ClassId) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::Registry(format!("class {} is not registered", class.0)))
    }

    /// Append `class`; returns its head index.
    pub fn register(&mut self, class: ClassId) -> Result<usize> {
        if self.contains(class) {
            return Err(Error::Registry(format!(
                "class {} is already registered",
                class.0
            )));
        }
        self.classes.push(class);
        Ok(self.classes.len() - 1)
    }

    pub fn labels_for(&self, samples: &[SampleRef]) -> Result<Vec<usize>> {
        samples.iter().map(|s| self.index_of(s.class)).collect()
    }
}

/// Per-task training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: u32,
    pub new_classes: usize,
    pub total_classes: usize,
    pub train_samples: usize,
    pub final_loss: f64,
    pub final_train_accuracy: f64,
    pub val_accuracy: f64,
    pub retain_loss: f64,
    pub depth: usize,
    pub param_count: usize,
    pub expansions: Vec<ExpansionEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReplaySlot {
    class: ClassId,
    seen: u64,
    exemplars: Vec<SampleRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EwcState {
    anchors: Vec<Vec<f32>>,
    fisher: FisherDiag,
}

/// Open-world verdict for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenDecision {
    pub sample: SampleRef,
    pub p_open: f64,
    pub close_label: usize,
    pub label: PseudoLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrateReport {
    pub added_classes: Vec<ClassId>,
    pub final_loss: f64,
    pub train_samples: usize,
}

struct FitStats {
    final_loss: f64,
    final_accuracy: f64,
    retain: f64,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Expandable network, class registry, gradient ledger and replay memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Collective {
    pub config: CollectiveConfig,
    pub graph: NetworkGraph,
    pub registry: ClassRegistry,
    pub ledger: GradientLedger,
    pub records: Vec<TaskRecord>,
    replay: Vec<ReplaySlot>,
    ewc: Option<EwcState>,
    tasks_seen: u32,
    #[serde(skip)]
    optimizer: Option<Optimizer>,
}

impl Collective {
    /// Build a collective whose head starts with one output per class in
    /// `initial_classes`.
    pub fn new(
        config: CollectiveConfig,
        input: ImageShape,
        initial_classes: &[ClassId],
    ) -> Result<Self> {
        config.validate()?;
        if initial_classes.is_empty() {
            return Err(Error::Config(
                "collective needs at least one initial class".into(),
            ));
        }
        let mut registry = ClassRegistry::new(config.lambda_open)?;
        for &c in initial_classes {
            registry.register(c)?;
        }
        let mut rng = rng_for(config.seed, "collective-init");
        let head = HeadSpec {
            hidden: config.head_hidden.clone(),
            classes: initial_classes.len(),
        };
        let graph = NetworkGraph::new(input, &config.layers, &head, &mut rng)?;
        Ok(Collective {
            ledger: GradientLedger::new(config.grad_storage),
            config,
            graph,
            registry,
            records: Vec::new(),
            replay: Vec::new(),
            ewc: None,
            tasks_seen: 0,
            optimizer: None,
        })
    }

    pub fn tasks_seen(&self) -> u32 {
        self.tasks_seen
    }

    pub fn replay_len(&self) -> usize {
        self.replay.iter().map(|s| s.exemplars.len()).sum()
    }

    fn apply_schedule(&mut self, t: u32) -> Result<()> {
        let sched = self.config.expansion.clone();
        let depth = self.graph.depth();
        let limit = depth.saturating_sub(sched.protect_top);
        if sched.widen_every > 0 && t.is_multiple_of(sched.widen_every) && limit > 0 {
            let mut rng = rng_for(self.config.seed, &format!("widen/{t}"));
            self.graph
                .widen_jittered(limit, t, sched.widen_jitter, &mut rng)?;
            info!("task {t}: widened layer {limit}");
        }
        if sched.deepen_every > 0 && t.is_multiple_of(sched.deepen_every) {
            let convs = &self.graph.net.convs;
            let limit = self.graph.depth().saturating_sub(sched.protect_top);
            match (0..limit)
                .rev()
                .find(|&i| convs[i].in_channels == convs[i].out_channels)
            {
                Some(i) => {
                    self.graph.deepen(i + 1, t)?;
                    info!("task {t}: duplicated layer {}", i + 1);
                }
                None => warn!("task {t}: no layer eligible for deepening"),
            }
        }
        Ok(())
    }

    fn register_new(&mut self, classes: &[ClassId], task_id: u32) -> Result<usize> {
        let mut added = 0;
        for &c in classes {
            if !self.registry.contains(c) {
                self.registry.register(c)?;
                added += 1;
            }
        }
        if added > 0 {
            self.graph.expand_head(added, task_id)?;
        }
        Ok(added)
    }

    fn replay_samples(&self) -> Vec<SampleRef> {
        self.replay
            .iter()
            .flat_map(|s| s.exemplars.iter().copied())
            .collect()
    }

    fn update_replay(&mut self, samples: &[SampleRef], tag: &str) {
        let cap = self.config.replay_per_class;
        if cap == 0 {
            return;
        }
        let mut rng = rng_for(self.config.seed, &format!("replay/{tag}"));
        for s in samples {
            let pos = match self.replay.iter().position(|r| r.class == s.class) {
                Some(p) => p,
                None => {
                    self.replay.push(ReplaySlot {
                        class: s.class,
                        seen: 0,
                        exemplars: Vec::new(),
                    });
                    self.replay.len() - 1
                }
            };
            let slot = &mut self.replay[pos];
            if slot.exemplars.contains(s) {
                continue;
            }
            slot.seen += 1;
            if slot.exemplars.len() < cap {
                slot.exemplars.push(*s);
            } else {
                let j = rng.random_range(0..slot.seen) as usize;
                if j < cap {
                    slot.exemplars[j] = *s;
                }
            }
        }
    }

    /// Mini-batch training over `data`. When `record_task` is set, the mean
    /// per-parameter |gradient| of each conv layer over the final epoch is
    /// written to the ledger.
    fn fit(
        &mut self,
        data: &TensorCache,
        labels: &[usize],
        epochs: usize,
        tag: &str,
        record_task: Option<u32>,
    ) -> Result<FitStats> {
        let n = data.len();
        let classes = self.graph.num_classes();
        let nconv = self.graph.depth();
        let batch = self.config.batch_size;
        let lambda = self.config.retain_lambda;
        let ewc = match self.ewc.take() {
            Some(e) if lambda > 0.0 => {
                let params = self.graph.net.params();
                let fits = e
                    .anchors
                    .iter()
                    .zip(&params[e.fisher.tensors.clone()])
                    .all(|(a, p)| a.len() == p.len());
                if fits {
                    Some(e)
                } else {
                    warn!("network shape changed since the retain anchors were taken; penalty dropped");
                    None
                }
            }
            other => other,
        };
        let mut grad_sum: Vec<Vec<f64>> = self
            .graph
            .net
            .convs
            .iter()
            .map(|c| vec![0.0; c.param_count()])
            .collect();
        let mut batches_in_last = 0usize;
        let mut stats = FitStats {
            final_loss: 0.0,
            final_accuracy: 0.0,
            retain: 0.0,
        };
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..epochs {
            let mut rng = rng_for(self.config.seed, &format!("{tag}/epoch{epoch}"));
            order.shuffle(&mut rng);
            let last = epoch + 1 == epochs;
            let (mut loss_sum, mut correct, mut retain_sum, mut nb) =
                (0.0f64, 0usize, 0.0f64, 0usize);
            for chunk in order.chunks(batch) {
                let x = data.gather(chunk);
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let cache = self.graph.net.forward_train(&x)?;
                let (loss, dl) = softmax_cross_entropy(&cache.logits, &y, classes);
                if !loss.is_finite() {
                    return Err(Error::TrainingAborted(format!(
                        "{tag}: non-finite loss at epoch {epoch}"
                    )));
                }
                for (row, &t) in cache.logits.chunks(classes).zip(&y) {
                    if argmax(row) == t {
                        correct += 1;
                    }
                }
                let mut grads = self.graph.net.backward(&cache, &dl, 0);
                if let Some(e) = &ewc {
                    let params = self.graph.net.params();
                    add_retain_grad(&mut grads, &params, &e.anchors, &e.fisher, lambda);
                    retain_sum += retain_loss(&params, &e.anchors, &e.fisher);
                }
                if grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(Error::TrainingAborted(format!(
                        "{tag}: non-finite gradient at epoch {epoch}"
                    )));
                }
                if last && record_task.is_some() {
                    for (l, acc) in grad_sum.iter_mut().enumerate() {
                        let w = &grads[2 * l];
                        let b = &grads[2 * l + 1];
                        for (a, g) in acc.iter_mut().zip(w.iter().chain(b.iter())) {
                            *a += g.abs() as f64;
                        }
                    }
                    batches_in_last += 1;
                }
                let opt = self
                    .optimizer
                    .get_or_insert_with(|| Optimizer::new(self.config.optimizer, self.config.lr));
                opt.step(self.graph.net.params_mut(), &grads);
                loss_sum += loss as f64;
                nb += 1;
            }
            if last {
                stats.final_loss = loss_sum / nb.max(1) as f64;
                stats.final_accuracy = correct as f64 / n.max(1) as f64;
                stats.retain = retain_sum / nb.max(1) as f64;
            }
        }
        if let Some(task) = record_task {
            if batches_in_last > 0 {
                for (sums, &id) in grad_sum.iter().zip(&self.graph.layer_ids).take(nconv) {
                    let mean: Vec<f32> = sums
                        .iter()
                        .map(|s| (s / batches_in_last as f64) as f32)
                        .collect();
                    self.ledger.record_gradients(id, task, mean.len(), &mean)?;
                }
            }
        }
        self.ewc = ewc;
        Ok(stats)
    }

    /// Train on one task: expand per the schedule, register the task's new
    /// classes, fit on task data plus replay, record gradients and metrics.
    /// On failure the model is left as it was before the call.
    pub fn train_task(&mut self, task: &Task, loader: &Loader<'_>) -> Result<TaskRecord> {
        if task.train_samples.is_empty() {
            return Err(Error::Data(format!(
                "task {} has no training samples",
                task.task_id
            )));
        }
        let before = self.clone();
        let result = self.train_task_inner(task, loader);
        if result.is_err() {
            *self = before;
        }
        result
    }

    fn train_task_inner(&mut self, task: &Task, loader: &Loader<'_>) -> Result<TaskRecord> {
        let t = self.tasks_seen + 1;
        let log_start = self.graph.expansion_log.len();
        self.apply_schedule(t)?;
        let added = self.register_new(&task.class_ids, task.task_id)?;
        for s in &task.train_samples {
            if !task.class_ids.contains(&s.class) {
                return Err(Error::Registry(format!(
                    "task {} sample of class {} outside the task's classes",
                    task.task_id, s.class.0
                )));
            }
        }

        let mut refs = task.train_samples.clone();
        refs.extend(self.replay_samples());
        let labels = self.registry.labels_for(&refs)?;
        let data = TensorCache::build(loader, &refs)?;
        let stats = self.fit(
            &data,
            &labels,
            self.config.epochs_per_task,
            &format!("task{}", task.task_id),
            Some(task.task_id),
        )?;

        let val_accuracy = if task.val_samples.is_empty() {
            0.0
        } else {
            let vdata = TensorCache::build(loader, &task.val_samples)?;
            self.accuracy(&vdata, &self.registry.labels_for(&task.val_samples)?)?
        };

        if self.config.retain_lambda > 0.0 {
            let tensors = conv_tensors(0..self.graph.depth());
            let mut rng = rng_for(self.config.seed, &format!("task{}/fisher", task.task_id));
            let fisher = estimate_fisher(
                &self.graph.net,
                &data.pixels,
                &labels,
                tensors.clone(),
                &self.config.fisher,
                &mut rng,
            )?;
            let anchors = self.graph.net.params()[tensors]
                .iter()
                .map(|p| p.to_vec())
                .collect();
            self.ewc = Some(EwcState { anchors, fisher });
        }
        self.update_replay(&task.train_samples, &format!("task{}", task.task_id));
        self.tasks_seen = t;

        let record = TaskRecord {
            task_id: task.task_id,
            new_classes: added,
            total_classes: self.registry.len(),
            train_samples: refs.len(),
            final_loss: stats.final_loss,
            final_train_accuracy: stats.final_accuracy,
            val_accuracy,
            retain_loss: stats.retain,
            depth: self.graph.depth(),
            param_count: self.graph.param_count(),
            expansions: self.graph.expansion_log[log_start..].to_vec(),
        };
        info!(
            "task {} ({} classes): loss {:.4} train acc {:.3} val acc {:.3}",
            task.task_id,
            record.total_classes,
            record.final_loss,
            record.final_train_accuracy,
            record.val_accuracy
        );
        self.records.push(record.clone());
        Ok(record)
    }

    /// Logits for every sample in `data`, `[n, classes]`.
    pub fn logits(&self, data: &TensorCache) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(data.len() * self.graph.num_classes());
        let rows: Vec<usize> = (0..data.len()).collect();
        for chunk in rows.chunks(128) {
            out.extend(self.graph.net.forward(&data.gather(chunk))?);
        }
        Ok(out)
    }

    pub fn accuracy(&self, data: &TensorCache, labels: &[usize]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let k = self.graph.num_classes();
        let logits = self.logits(data)?;
        let correct = logits
            .chunks(k)
            .zip(labels)
            .filter(|(row, &t)| argmax(row) == t)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Open-world verdicts at the registry's `lambda_open`.
    pub fn score_open(&self, data: &TensorCache) -> Result<Vec<OpenDecision>> {
        self.score_open_at(data, self.registry.lambda_open)
    }

    /// Open-world verdicts at an explicit threshold in `[0, 1]`.
    pub fn score_open_at(&self, data: &TensorCache, lambda_open: f64) -> Result<Vec<OpenDecision>> {
        if !(0.0..=1.0).contains(&lambda_open) {
            return Err(Error::Config(format!(
                "lambda_open {lambda_open} outside [0,1]"
            )));
        }
        let k = self.graph.num_classes();
        let logits = self.logits(data)?;
        logits
            .chunks(k)
            .zip(&data.refs)
            .map(|(row, &sample)| {
                let p_open = open_world_probability(row)?;
                let close_label = argmax(row);
                Ok(OpenDecision {
                    sample,
                    p_open,
                    close_label,
                    label: assign_pseudo_label(p_open, lambda_open, close_label),
                })
            })
            .collect()
    }

    /// Score `samples` and append the ones flagged open to the registry's
    /// pending buffer.
    pub fn flag_unknowns(
        &mut self,
        samples: &[SampleRef],
        loader: &Loader<'_>,
    ) -> Result<Vec<OpenDecision>> {
        let data = TensorCache::build(loader, samples)?;
        let decisions = self.score_open(&data)?;
        for d in &decisions {
            if let PseudoLabel::Known(_) = d.label {
                continue;
            }
            self.registry.pending.push(PendingUnknown {
                sample: d.sample,
                p_open: d.p_open,
                close_label: d.close_label,
            });
        }
        Ok(decisions)
    }

    /// Add labelled open classes to the head and fine-tune on their samples
    /// plus replay. Empty input is a no-op.
    pub fn integrate_open_classes(
        &mut self,
        new: &[(ClassId, Vec<SampleRef>)],
        loader: &Loader<'_>,
    ) -> Result<IntegrateReport> {
        if new.is_empty() {
            return Ok(IntegrateReport {
                added_classes: Vec::new(),
                final_loss: 0.0,
                train_samples: 0,
            });
        }
        for (i, (c, samples)) in new.iter().enumerate() {
            if self.registry.contains(*c) || new[..i].iter().any(|(d, _)| d == c) {
                return Err(Error::Registry(format!("class {} is already known", c.0)));
            }
            if samples.iter().any(|s| s.class != *c) {
                return Err(Error::Registry(format!(
                    "samples listed under class {} carry other labels",
                    c.0
                )));
            }
            if samples.is_empty() {
                return Err(Error::Data(format!("no samples for open class {}", c.0)));
            }
        }
        let before = self.clone();
        let result = self.integrate_inner(new, loader);
        if result.is_err() {
            *self = before;
        }
        result
    }

    fn integrate_inner(
        &mut self,
        new: &[(ClassId, Vec<SampleRef>)],
        loader: &Loader<'_>,
    ) -> Result<IntegrateReport> {
        let marker = self.tasks_seen;
        let classes: Vec<ClassId> = new.iter().map(|(c, _)| *c).collect();
        self.register_new(&classes, marker)?;
        let fresh: Vec<SampleRef> = new.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        self.registry
            .pending
            .retain(|p| !classes.contains(&p.sample.class));
        let mut refs = fresh.clone();
        refs.extend(self.replay_samples());
        let labels = self.registry.labels_for(&refs)?;
        let data = TensorCache::build(loader, &refs)?;
        let tag = format!("integrate{}", marker);
        let stats = self.fit(&data, &labels, self.config.integrate_epochs, &tag, None)?;
        self.update_replay(&fresh, &tag);
        Ok(IntegrateReport {
            added_classes: classes,
            final_loss: stats.final_loss,
            train_samples: refs.len(),
        })
    }

    /// Hash of the configuration, used to name artifacts.
    pub fn config_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.config).expect("config serializes"))[..12].to_string()
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct File<'a> {
            format_version: u32,
            collective: &'a Collective,
        }
        Ok(serde_json::to_vec(&File {
            format_version: CHECKPOINT_FORMAT_VERSION,
            collective: self,
        })?)
    }

    /// Restore a checkpoint; the expansion log must replay to the stored
    /// shape. Optimizer state is not persisted.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            format_version: u32,
            collective: Collective,
        }
        let f: File = serde_json::from_slice(bytes)
            .map_err(|e| Error::Data(format!("unreadable checkpoint: {e}")))?;
        if f.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format version {} unsupported (expected {})",
                f.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        f.collective.graph.net.validate()?;
        f.collective.graph.replay_check()?;
        if f.collective.registry.len() != f.collective.graph.num_classes() {
            return Err(Error::Data(
                "checkpoint registry and head size disagree".into(),
            ));
        }
        Ok(f.collective)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Normalization, SyntheticConfig, SyntheticGlyphs};

    #[test]
    fn uniform_logits_give_one_minus_one_over_n() {
        for n in 2..=10 {
            let p = open_world_probability(&vec![0.37; n]).unwrap();
            assert!((p - (1.0 - 1.0 / n as f64)).abs() < 1e-6, "n={n}: {p}");
        }
        assert!(matches!(
            open_world_probability(&[1.0]),
            Err(Error::Inference(_))
        ));
        assert!(matches!(
            open_world_probability(&[1.0, f32::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn pseudo_label_threshold_is_strict() {
        assert_eq!(assign_pseudo_label(0.5, 0.5, 3), PseudoLabel::Known(3));
        assert_eq!(assign_pseudo_label(0.51, 0.5, 3), PseudoLabel::Open);
        assert_eq!(assign_pseudo_label(0.0, 0.0, 1), PseudoLabel::Known(1));
        assert_eq!(assign_pseudo_label(1e-9, 0.0, 1), PseudoLabel::Open);
        assert_eq!(assign_pseudo_label(0.9, 1.0, 2), PseudoLabel::Known(2));
    }

    #[test]
    fn registry_is_append_only() {
        let mut r = ClassRegistry::new(0.9).unwrap();
        assert_eq!(r.register(ClassId(4)).unwrap(), 0);
        assert_eq!(r.register(ClassId(2)).unwrap(), 1);
        assert!(matches!(r.register(ClassId(4)), Err(Error::Registry(_))));
        assert_eq!(r.index_of(ClassId(2)).unwrap(), 1);
        assert!(r.index_of(ClassId(9)).is_err());
        assert!(ClassRegistry::new(1.0).is_err());
        assert!(ClassRegistry::new(0.0).is_err());
    }

    fn tiny_setup() -> (SyntheticGlyphs, Normalization, CollectiveConfig) {
        let src = SyntheticGlyphs::new(SyntheticConfig {
            num_classes: 8,
            samples_per_class: 20,
            image_size: 8,
            ..Default::default()
        })
        .unwrap();
        let cfg = CollectiveConfig {
            layers: uniform_stack(4, 4, &[2]),
            head_hidden: vec![8],
            epochs_per_task: 2,
            replay_per_class: 3,
            expansion: ExpansionSchedule {
                widen_every: 2,
                deepen_every: 3,
                protect_top: 1,
                widen_jitter: 0.1,
            },
            ..Default::default()
        };
        (src, Normalization::default(), cfg)
    }

    fn task(id: u32, classes: &[u32]) -> Task {
        Task {
            task_id: id,
            class_ids: classes.iter().map(|&c| ClassId(c)).collect(),
            train_samples: classes
                .iter()
                .flat_map(|&c| (0..6).map(move |i| SampleRef::new(c, i)))
                .collect(),
            val_samples: classes
                .iter()
                .flat_map(|&c| (15..18).map(move |i| SampleRef::new(c, i)))
                .collect(),
        }
    }

    #[test]
    fn task_stream_grows_head_records_gradients_and_expands() {
        let (src, norm, cfg) = tiny_setup();
        let loader = Loader::new(&src, &norm);
        let mut col = Collective::new(cfg, src_shape(&src), &[ClassId(0), ClassId(1)]).unwrap();
        let r1 = col.train_task(&task(1, &[0, 1]), &loader).unwrap();
        assert_eq!(r1.new_classes, 0);
        let r2 = col.train_task(&task(2, &[1, 2, 3]), &loader).unwrap();
        assert_eq!(r2.new_classes, 2);
        assert_eq!(col.graph.num_classes(), 4);
        assert!(r2
            .expansions
            .iter()
            .any(|e| e.kind == crate::netgraph::ExpansionKind::Widen));
        let r3 = col.train_task(&task(3, &[0, 4]), &loader).unwrap();
        assert!(r3
            .expansions
            .iter()
            .any(|e| e.kind == crate::netgraph::ExpansionKind::Deepen));
        assert_eq!(col.graph.depth(), 5);
        col.graph.replay_check().unwrap();
        // every layer present during a task has a record for it
        for (i, id) in col.graph.layer_ids.iter().enumerate() {
            let rec = col.ledger.get(*id, 3).unwrap();
            assert_eq!(rec.len(), col.graph.net.convs[i].param_count());
        }
        assert_eq!(col.replay_len(), 5 * 3);
    }

    fn src_shape(src: &SyntheticGlyphs) -> ImageShape {
        use crate::datasets::ImageSource;
        src.shape()
    }

    #[test]
    fn integrate_rejects_known_classes_and_accepts_empty() {
        let (src, norm, cfg) = tiny_setup();
        let loader = Loader::new(&src, &norm);
        let mut col = Collective::new(cfg, src_shape(&src), &[ClassId(0), ClassId(1)]).unwrap();
        col.train_task(&task(1, &[0, 1]), &loader).unwrap();
        let snapshot = col.graph.clone();
        assert!(col
            .integrate_open_classes(&[], &loader)
            .unwrap()
            .added_classes
            .is_empty());
        assert_eq!(col.graph, snapshot);
        let dup = vec![(ClassId(1), vec![SampleRef::new(1, 0)])];
        assert!(matches!(
            col.integrate_open_classes(&dup, &loader),
            Err(Error::Registry(_))
        ));
        assert_eq!(col.graph, snapshot);
        let fresh = vec![(ClassId(6), (0..5).map(|i| SampleRef::new(6, i)).collect())];
        let rep = col.integrate_open_classes(&fresh, &loader).unwrap();
        assert_eq!(rep.added_classes, vec![ClassId(6)]);
        assert_eq!(col.graph.num_classes(), 3);
    }

    #[test]
    fn open_world_boundaries_are_exact() {
        let (src, norm, cfg) = tiny_setup();
        let loader = Loader::new(&src, &norm);
        let mut col =
            Collective::new(cfg, src_shape(&src), &[ClassId(0), ClassId(1), ClassId(2)]).unwrap();
        col.train_task(&task(1, &[0, 1, 2]), &loader).unwrap();
        let data = TensorCache::build(
            &loader,
            &(0..10).map(|i| SampleRef::new(5, i)).collect::<Vec<_>>(),
        )
        .unwrap();
        let all = col.score_open_at(&data, 0.0).unwrap();
        assert!(all.iter().all(|d| d.label == PseudoLabel::Open));
        let none = col.score_open_at(&data, 1.0).unwrap();
        assert!(none
            .iter()
            .all(|d| matches!(d.label, PseudoLabel::Known(_))));
        let flagged = col.flag_unknowns(&data.refs, &loader).unwrap();
        let n_open = flagged
            .iter()
            .filter(|d| d.label == PseudoLabel::Open)
            .count();
        assert_eq!(col.registry.pending.len(), n_open);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let (src, norm, cfg) = tiny_setup();
        let loader = Loader::new(&src, &norm);
        let run = || {
            let mut col =
                Collective::new(cfg.clone(), src_shape(&src), &[ClassId(0), ClassId(1)]).unwrap();
            col.train_task(&task(1, &[0, 1]), &loader).unwrap();
            col.train_task(&task(2, &[2, 3]), &loader).unwrap();
            col
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_checkpoint().unwrap(), b.to_checkpoint().unwrap());
        let restored = Collective::from_checkpoint(&a.to_checkpoint().unwrap()).unwrap();
        assert_eq!(restored.graph, a.graph);
        assert_eq!(restored.ledger, a.ledger);
        let mut bad: serde_json::Value =
            serde_json::from_slice(&a.to_checkpoint().unwrap()).unwrap();
        bad["collective"]["graph"]["expansion_log"] = serde_json::json!([]);
        assert!(Collective::from_checkpoint(&serde_json::to_vec(&bad).unwrap()).is_err());
    }
}
