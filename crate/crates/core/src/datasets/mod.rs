//! Label-space partitioning, task streams and few-shot episodes.

mod cifar;
mod manifest;
mod source;
mod synthetic;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use cifar::Cifar100;
pub use manifest::{parse_manifest, ManifestEntry, ManifestImages};
pub use source::{ImageSource, Loader, Normalization, TensorCache};
pub use synthetic::{SyntheticConfig, SyntheticGlyphs};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

/// One sample of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub class: ClassId,
    pub index: u32,
}

impl SampleRef {
    pub fn new(class: u32, index: u32) -> Self {
        SampleRef {
            class: ClassId(class),
            index,
        }
    }
}

pub const SPLIT_FORMAT_VERSION: u32 = 1;

/// Disjoint base / open-world / novel class pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base_classes: Vec<ClassId>,
    pub open_classes: Vec<ClassId>,
    pub novel_classes: Vec<ClassId>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    version: u32,
    #[serde(flatten)]
    split: ClassSplit,
}

impl ClassSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&SplitFile {
            version: SPLIT_FORMAT_VERSION,
            split: self.clone(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SplitFile = serde_json::from_str(&text)?;
        if file.version != SPLIT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "split file version {} unsupported (expected {})",
                file.version, SPLIT_FORMAT_VERSION
            )));
        }
        file.split.check_disjoint()?;
        Ok(file.split)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in self
            .base_classes
            .iter()
            .chain(&self.open_classes)
            .chain(&self.novel_classes)
        {
            if !seen.insert(*c) {
                return Err(Error::Config(format!(
                    "class {} appears in more than one pool",
                    c.0
                )));
            }
        }
        Ok(())
    }
}

/// Partition `label_space` into base/open/novel pools of the given sizes.
pub fn split_classes(
    label_space: &[ClassId],
    base_count: usize,
    open_count: usize,
    novel_count: usize,
    seed: u64,
) -> Result<ClassSplit> {
    let mut classes: Vec<ClassId> = label_space
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let need = base_count + open_count + novel_count;
    if need > classes.len() {
        return Err(Error::Config(format!(
            "split needs {} classes ({} base + {} open + {} novel) but the label space has {}; short by {}",
            need,
            base_count,
            open_count,
            novel_count,
            classes.len(),
            need - classes.len()
        )));
    }
    if need == 0 {
        return Err(Error::Config("split requests zero classes".into()));
    }
    classes.shuffle(&mut rng_for(seed, "split-classes"));
    let novel = classes.split_off(base_count + open_count);
    let open = classes.split_off(base_count);
    let mut split = ClassSplit {
        base_classes: classes,
        open_classes: open,
        novel_classes: novel.into_iter().take(novel_count).collect(),
        seed,
    };
    split.base_classes.sort();
    split.open_classes.sort();
    split.novel_classes.sort();
    Ok(split)
}

/// How each base/open class's samples divide into a training pool and a
/// held-out pool. Novel classes are never split; episodes draw from all of
/// their samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePools {
    pub train_fraction: f32,
}

impl Default for SamplePools {
    fn default() -> Self {
        SamplePools {
            train_fraction: 0.75,
        }
    }
}

impl SamplePools {
    pub fn train_len(&self, class_len: usize) -> usize {
        ((class_len as f32) * self.train_fraction).floor() as usize
    }

    pub fn train(&self, class: ClassId, class_len: usize) -> Vec<SampleRef> {
        (0..self.train_len(class_len) as u32)
            .map(|index| SampleRef { class, index })
            .collect()
    }

    pub fn heldout(&self, class: ClassId, class_len: usize) -> Vec<SampleRef> {
        (self.train_len(class_len) as u32..class_len as u32)
            .map(|index| SampleRef { class, index })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: u32,
    pub class_ids: Vec<ClassId>,
    pub train_samples: Vec<SampleRef>,
    pub val_samples: Vec<SampleRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub classes_per_task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub classes_per_task: usize,
    pub num_tasks: usize,
    /// Training samples drawn per class per task.
    pub train_per_class: usize,
    /// Validation samples drawn per class per task (from the held-out pool).
    pub val_per_class: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            classes_per_task: 5,
            num_tasks: 20,
            train_per_class: 60,
            val_per_class: 20,
        }
    }
}

fn draw(
    pool: &[SampleRef],
    n: usize,
    rng: &mut impl rand::Rng,
    what: &str,
) -> Result<Vec<SampleRef>> {
    if n > pool.len() {
        let class = pool.first().map_or(u32::MAX, |s| s.class.0);
        return Err(Error::Data(format!(
            "class {class}: {what} needs {n} samples but only {} are available",
            pool.len()
        )));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let (chosen, _) = idx.partial_shuffle(rng, n);
    let mut out: Vec<SampleRef> = chosen.iter().map(|&i| pool[i]).collect();
    out.sort();
    Ok(out)
}

/// Build a stream of tasks, each sampling `classes_per_task` distinct base
/// classes (classes may recur across tasks).
pub fn make_task_stream(
    split: &ClassSplit,
    cfg: &StreamConfig,
    pools: &SamplePools,
    source: &dyn ImageSource,
    seed: u64,
) -> Result<TaskStream> {
    if cfg.classes_per_task == 0 || cfg.classes_per_task > split.base_classes.len() {
        return Err(Error::Config(format!(
            "classes_per_task {} must be in 1..={} (base pool size)",
            cfg.classes_per_task,
            split.base_classes.len()
        )));
    }
    let mut rng = rng_for(seed, "task-stream");
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for t in 0..cfg.num_tasks {
        let mut classes = split.base_classes.clone();
        let (chosen, _) = classes.partial_shuffle(&mut rng, cfg.classes_per_task);
        let mut class_ids = chosen.to_vec();
        class_ids.sort();
        let mut train_samples = Vec::new();
        let mut val_samples = Vec::new();
        for &c in &class_ids {
            let len = source.class_len(c);
            train_samples.extend(draw(
                &pools.train(c, len),
                cfg.train_per_class,
                &mut rng,
                "task training",
            )?);
            val_samples.extend(draw(
                &pools.heldout(c, len),
                cfg.val_per_class,
                &mut rng,
                "task validation",
            )?);
        }
        tasks.push(Task {
            task_id: t as u32 + 1,
            class_ids,
            train_samples,
            val_samples,
        });
    }
    Ok(TaskStream {
        tasks,
        classes_per_task: cfg.classes_per_task,
    })
}

/// An n-way k-shot support/query episode over novel classes. Labels are the
/// positions of the classes in `class_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub class_ids: Vec<ClassId>,
    /// Class-major: `k_shot` samples of class 0, then class 1, ...
    pub support: Vec<SampleRef>,
    pub query: Vec<SampleRef>,
}

impl Episode {
    pub fn label_of(&self, s: &SampleRef) -> usize {
        self.class_ids
            .iter()
            .position(|c| *c == s.class)
            .expect("episode sample outside its classes")
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| self.label_of(s)).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| self.label_of(s)).collect()
    }

    /// Keep only the first `k` support samples of every class; the query set
    /// is unchanged. Nested truncations of one episode share everything but
    /// support size.
    pub fn with_support(&self, k: usize) -> Result<Episode> {
        if k == 0 || k > self.k_shot {
            return Err(Error::Config(format!(
                "support size {k} must be in 1..={}",
                self.k_shot
            )));
        }
        let support = self
            .support
            .chunks(self.k_shot)
            .flat_map(|c| c[..k].iter().copied())
            .collect();
        Ok(Episode {
            k_shot: k,
            support,
            ..self.clone()
        })
    }
}

pub fn sample_episode(
    split: &ClassSplit,
    n_way: usize,
    k_shot: usize,
    query_per_class: usize,
    source: &dyn ImageSource,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || n_way > split.novel_classes.len() {
        return Err(Error::Config(format!(
            "n_way {} must be in 1..={} (novel pool size)",
            n_way,
            split.novel_classes.len()
        )));
    }
    if k_shot == 0 {
        return Err(Error::Config("k_shot must be positive".into()));
    }
    let mut rng = rng_for(seed, "episode");
    let mut classes = split.novel_classes.clone();
    let (chosen, _) = classes.partial_shuffle(&mut rng, n_way);
    let class_ids = chosen.to_vec();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * query_per_class);
    for &c in &class_ids {
        let len = source.class_len(c);
        if len < k_shot + query_per_class {
            return Err(Error::Data(format!(
                "class {} has {} samples; episode needs {} support + {} query",
                c.0, len, k_shot, query_per_class
            )));
        }
        let mut idx: Vec<u32> = (0..len as u32).collect();
        let (picked, _) = idx.partial_shuffle(&mut rng, k_shot + query_per_class);
        support.extend(
            picked[..k_shot]
                .iter()
                .map(|&index| SampleRef { class: c, index }),
        );
        query.extend(
            picked[k_shot..]
                .iter()
                .map(|&index| SampleRef { class: c, index }),
        );
    }
    Ok(Episode {
        n_way,
        k_shot,
        class_ids,
        support,
        query,
    })
}

/// Assert that every sample's label lies in `allowed`; returns the first
/// offending sample otherwise.
pub fn audit_labels<'a>(
    samples: impl IntoIterator<Item = &'a SampleRef>,
    allowed: &BTreeSet<ClassId>,
) -> Result<()> {
    for s in samples {
        if !allowed.contains(&s.class) {
            return Err(Error::Registry(format!(
                "label audit: sample {:?} carries class {} outside the permitted set",
                s, s.class.0
            )));
        }
    }
    Ok(())
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    Synthetic(SyntheticConfig),
    Manifest {
        root: PathBuf,
        manifest: PathBuf,
        image_size: usize,
    },
    Cifar100 {
        dir: PathBuf,
        image_size: usize,
    },
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Synthetic(SyntheticConfig::default())
    }
}

impl SourceConfig {
    pub fn open(&self) -> Result<Box<dyn ImageSource>> {
        Ok(match self {
            SourceConfig::Synthetic(cfg) => Box::new(SyntheticGlyphs::new(cfg.clone())?),
            SourceConfig::Manifest {
                root,
                manifest,
                image_size,
            } => Box::new(ManifestImages::open(root, manifest, *image_size)?),
            SourceConfig::Cifar100 { dir, image_size } => {
                Box::new(Cifar100::open(dir, *image_size)?)
            }
        })
    }
}

/// Dataset, split and sampling configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: SourceConfig,
    pub normalization: Normalization,
    pub base_count: usize,
    pub open_count: usize,
    pub novel_count: usize,
    pub split_seed: u64,
    pub pools: SamplePools,
    pub stream: StreamConfig,
    /// Per-class support counts for the sample-efficiency sweep.
    pub sample_caps: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: SourceConfig::default(),
            normalization: Normalization::default(),
            base_count: 30,
            open_count: 8,
            novel_count: 10,
            split_seed: 0,
            pools: SamplePools::default(),
            stream: StreamConfig::default(),
            sample_caps: vec![25, 50, 100, 200, 300],
        }
    }
}

impl DataConfig {
    /// CIFAR-100 class split: 60/16/20 classes, five per task.
    pub fn cifar100(dir: PathBuf) -> Self {
        DataConfig {
            source: SourceConfig::Cifar100 {
                dir,
                image_size: 32,
            },
            base_count: 60,
            open_count: 16,
            novel_count: 20,
            ..Default::default()
        }
    }

    pub fn split(&self, source: &dyn ImageSource) -> Result<ClassSplit> {
        split_classes(
            &source.label_space(),
            self.base_count,
            self.open_count,
            self.novel_count,
            self.split_seed,
        )
    }
}
