//! Experiment configuration, shared collective runs, metrics tables,
//! checkpoints and report rendering.

mod experiments;
mod metrics;
mod report;

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::collective::{uniform_stack, Collective, CollectiveConfig};
use crate::datasets::{
    make_task_stream, ClassSplit, DataConfig, ImageSource, Loader, Normalization, TaskStream,
};
use crate::error::{Error, Result};
use crate::individual::{AdaptConfig, IndividualConfig};
use crate::learngene::{select_learngene, CriterionConfig, LearngeneSelection, Placement};
use crate::seed::sha256_hex;

pub use experiments::{
    run_evolution, run_gradient_trends, run_open_world_eval, run_position_ablation,
    run_sample_sweep, run_scratch_compare, samples_to_reach, ExperimentKind,
};
pub use metrics::{spearman, MetricRow, MetricsTable, METRICS_SCHEMA_VERSION};
pub use report::{render_report, render_summary, ReportFiles};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PositionConfig {
    /// Collective trained for the ablation; `None` reuses the main one.
    pub collective: Option<CollectiveConfig>,
    pub placements: Vec<Placement>,
}

impl Default for PositionConfig {
    fn default() -> Self {
        PositionConfig {
            collective: Some(CollectiveConfig {
                layers: uniform_stack(13, 16, &[1, 2, 3]),
                ..Default::default()
            }),
            placements: vec![Placement::Front, Placement::Middle, Placement::Top],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenEvalConfig {
    pub lambdas: Vec<f64>,
    /// Held-out samples scored per class in each pool.
    pub samples_per_class: usize,
}

impl Default for OpenEvalConfig {
    fn default() -> Self {
        OpenEvalConfig {
            lambdas: vec![0.0, 0.5, 0.9, 0.9587, 0.9733, 1.0],
            samples_per_class: 50,
        }
    }
}

/// Everything an experiment depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub collective: CollectiveConfig,
    pub criterion: CriterionConfig,
    /// Learngene size (layers).
    pub k: usize,
    pub individual: IndividualConfig,
    pub adapt: AdaptConfig,
    pub seeds: Vec<u64>,
    pub episodes_per_seed: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    /// Epoch at which individual and scratch models are compared.
    pub compare_epoch: usize,
    /// Number of evenly spaced collective snapshots for the evolution study.
    pub snapshots: usize,
    pub position: PositionConfig,
    pub open: OpenEvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            collective: CollectiveConfig::default(),
            criterion: CriterionConfig::default(),
            k: 3,
            individual: IndividualConfig::default(),
            adapt: AdaptConfig::default(),
            seeds: (0..5).collect(),
            episodes_per_seed: 5,
            n_way: 5,
            k_shot: 20,
            query_per_class: 20,
            compare_epoch: 10,
            snapshots: 5,
            position: PositionConfig::default(),
            open: OpenEvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Load from `.toml` or `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `dotted.key=value` overrides; values are TOML literals, and
    /// anything that does not parse as one is taken as a string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self)
            .map_err(|e| Error::Config(format!("config does not serialize: {e}")))?;
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {set:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node.as_table_mut().ok_or_else(|| {
                    Error::Config(format!("override {key:?}: {part:?} is not inside a table"))
                })?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table.get_mut(*part).ok_or_else(|| {
                    Error::Config(format!("override {key:?}: no section {part:?}"))
                })?;
            }
        }
        let cfg: ExperimentConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("overrides rejected: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config does not serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.collective.validate()?;
        self.criterion.validate()?;
        self.adapt.validate()?;
        if self.k == 0 || self.k > self.collective.layers.len() {
            return Err(Error::Config(format!(
                "k={} must be in 1..={}",
                self.k,
                self.collective.layers.len()
            )));
        }
        if self.seeds.is_empty() || self.episodes_per_seed == 0 {
            return Err(Error::Config(
                "at least one seed and one episode are required".into(),
            ));
        }
        if self.n_way < 2 || self.k_shot == 0 || self.query_per_class == 0 {
            return Err(Error::Config(
                "episodes need n_way >= 2, k_shot >= 1 and query_per_class >= 1".into(),
            ));
        }
        if self.compare_epoch == 0 || self.compare_epoch > self.adapt.epochs {
            return Err(Error::Config(format!(
                "compare_epoch {} must be in 1..={}",
                self.compare_epoch, self.adapt.epochs
            )));
        }
        Ok(())
    }

    /// Short content hash; embedded in artifact file names.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))[..12].to_string()
    }

    /// Hash of the settings that determine the main collective run (data
    /// minus the sweep caps, collective, criterion, k and snapshot count).
    /// Collective checkpoints are named and validated with it, so
    /// experiment-only settings can change without retraining.
    pub fn collective_hash(&self) -> String {
        let data = DataConfig {
            sample_caps: Vec::new(),
            ..self.data.clone()
        };
        let key = serde_json::json!({
            "data": data,
            "collective": self.collective,
            "criterion": self.criterion,
            "k": self.k,
            "snapshots": self.snapshots,
        });
        sha256_hex(&serde_json::to_vec(&key).expect("config serializes"))[..12].to_string()
    }
}

/// `dir/{stem}-{hash}.{ext}`.
pub fn artifact_path(dir: &Path, stem: &str, config_hash: &str, ext: &str) -> PathBuf {
    dir.join(format!("{stem}-{config_hash}.{ext}"))
}

/// Opened image source plus the class split.
pub struct DataEnv {
    pub source: Box<dyn ImageSource>,
    pub split: ClassSplit,
    pub norm: Normalization,
    pub cfg: DataConfig,
}

impl DataEnv {
    pub fn open(cfg: &DataConfig) -> Result<Self> {
        let source = cfg.source.open()?;
        let split = cfg.split(source.as_ref())?;
        Ok(DataEnv {
            source,
            split,
            norm: cfg.normalization.clone(),
            cfg: cfg.clone(),
        })
    }

    pub fn loader(&self) -> Loader<'_> {
        Loader::new(self.source.as_ref(), &self.norm)
    }

    pub fn stream(&self) -> Result<TaskStream> {
        make_task_stream(
            &self.split,
            &self.cfg.stream,
            &self.cfg.pools,
            self.source.as_ref(),
            self.cfg.split_seed,
        )
    }

    pub fn split_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.split).expect("split serializes"))[..12].to_string()
    }
}

/// Learngene taken from the collective after a given task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub task: u32,
    pub selection: LearngeneSelection,
}

/// A trained collective plus learngene snapshots taken along the stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectiveRun {
    pub collective: Collective,
    pub snapshots: Vec<Snapshot>,
}

impl CollectiveRun {
    /// Learngene of the final collective.
    pub fn learngene(&self, criterion: &CriterionConfig, k: usize) -> Result<LearngeneSelection> {
        select_learngene(
            &self.collective.graph,
            &self.collective.ledger,
            criterion,
            k,
        )
    }
}

/// Task indices (1-based) of `count` evenly spaced snapshots over `tasks`.
pub fn snapshot_tasks(tasks: usize, count: usize) -> Vec<u32> {
    if count == 0 || tasks == 0 {
        return Vec::new();
    }
    let mut out: Vec<u32> = (1..=count)
        .map(|i| ((i * tasks) as f64 / count as f64).round().max(1.0) as u32)
        .collect();
    out.dedup();
    out
}

/// Train a collective over the configured stream, taking `k`-layer
/// learngene snapshots after the listed tasks.
pub fn train_collective(
    env: &DataEnv,
    cfg: &CollectiveConfig,
    criterion: &CriterionConfig,
    k: usize,
    snapshot_at: &[u32],
) -> Result<CollectiveRun> {
    let stream = env.stream()?;
    let first = stream
        .tasks
        .first()
        .ok_or_else(|| Error::Config("task stream is empty".into()))?;
    let loader = env.loader();
    let mut collective = Collective::new(cfg.clone(), env.source.shape(), &first.class_ids)?;
    let mut snapshots = Vec::new();
    for task in &stream.tasks {
        collective.train_task(task, &loader)?;
        if snapshot_at.contains(&task.task_id) {
            let selection = select_learngene(&collective.graph, &collective.ledger, criterion, k)?;
            snapshots.push(Snapshot {
                task: task.task_id,
                selection,
            });
        }
    }
    info!(
        "collective trained on {} tasks: {} classes, depth {}, {} parameters",
        stream.tasks.len(),
        collective.registry.len(),
        collective.graph.depth(),
        collective.graph.param_count()
    );
    Ok(CollectiveRun {
        collective,
        snapshots,
    })
}

pub const RUN_FORMAT_VERSION: u32 = 1;

/// Write a checkpoint of `run`; the file name carries `config_hash`.
pub fn save_run(run: &CollectiveRun, dir: &Path, stem: &str, config_hash: &str) -> Result<PathBuf> {
    #[derive(Serialize)]
    struct File<'a> {
        format_version: u32,
        config_hash: &'a str,
        run: &'a CollectiveRun,
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = artifact_path(dir, stem, config_hash, "json");
    let bytes = serde_json::to_vec(&File {
        format_version: RUN_FORMAT_VERSION,
        config_hash,
        run,
    })?;
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load a run checkpoint, validating its version and expansion history.
/// With `expect_hash` set, a checkpoint made under another configuration is
/// rejected.
pub fn load_run(path: &Path, expect_hash: Option<&str>) -> Result<CollectiveRun> {
    #[derive(Deserialize)]
    struct File {
        format_version: u32,
        config_hash: String,
        run: CollectiveRun,
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let f: File = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: unreadable checkpoint: {e}", path.display())))?;
    if f.format_version != RUN_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: checkpoint format {} unsupported (expected {})",
            path.display(),
            f.format_version,
            RUN_FORMAT_VERSION
        )));
    }
    if let Some(h) = expect_hash {
        if h != f.config_hash {
            return Err(Error::Config(format!(
                "{}: checkpoint was made with config {} but {} is in use",
                path.display(),
                f.config_hash,
                h
            )));
        }
    }
    f.run.collective.graph.replay_check()?;
    Ok(f.run)
}
