//! Per-layer gradient bookkeeping, the large-gradient fraction ρ, layer
//! scenario classification and the portable learngene package.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{LayerId, NetworkGraph};
use crate::nn::Conv2d;
use crate::seed::sha256_hex;

/// Histogram geometry: 128 log-spaced bins on `[LO, HI)`, plus one underflow
/// bin (which also holds exact zeros) and one overflow bin.
pub const HIST_BINS: usize = 128;
const HIST_LO: f64 = 1e-10;
const HIST_HI: f64 = 1e2;

fn hist_edge(j: usize) -> f64 {
    HIST_LO * (HIST_HI / HIST_LO).powf(j as f64 / HIST_BINS as f64)
}

/// Slot in the `HIST_BINS + 2` counts array.
fn hist_slot(v: f64) -> usize {
    if v < HIST_LO {
        0
    } else if v >= HIST_HI {
        HIST_BINS + 1
    } else {
        let t = (v / HIST_LO).ln() / (HIST_HI / HIST_LO).ln();
        1 + ((t * HIST_BINS as f64).floor() as usize).min(HIST_BINS - 1)
    }
}

/// Index of the bin edge nearest to `sigma` in log space.
fn snap_edge(sigma: f64) -> usize {
    if sigma <= HIST_LO {
        return 0;
    }
    if sigma >= HIST_HI {
        return HIST_BINS;
    }
    let t = (sigma / HIST_LO).ln() / (HIST_HI / HIST_LO).ln();
    (t * HIST_BINS as f64).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageMode {
    Exact,
    #[default]
    Histogram,
}

/// Summary of one layer's per-parameter absolute gradients on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradSummary {
    Exact { values: Vec<f32> },
    Histogram { counts: Vec<u64>, n: usize },
}

impl GradSummary {
    pub fn len(&self) -> usize {
        match self {
            GradSummary::Exact { values } => values.len(),
            GradSummary::Histogram { n, .. } => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of entries strictly above `sigma` (histogram mode: at or
    /// above the bin edge nearest to `sigma`).
    pub fn fraction_above(&self, sigma: f64) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        match self {
            GradSummary::Exact { values } => {
                let s = sigma as f32;
                values.iter().filter(|&&g| g > s).count() as f64 / n as f64
            }
            GradSummary::Histogram { counts, .. } => {
                let e = snap_edge(sigma);
                counts[e + 1..].iter().sum::<u64>() as f64 / n as f64
            }
        }
    }
}

/// Per-layer, per-task gradient magnitude records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientLedger {
    pub mode: StorageMode,
    records: BTreeMap<LayerId, BTreeMap<u32, GradSummary>>,
    pub task_order: Vec<u32>,
}

impl GradientLedger {
    pub fn new(mode: StorageMode) -> Self {
        GradientLedger {
            mode,
            ..Default::default()
        }
    }

    /// Store `|∇|` for every parameter of `layer` on `task`. `expected_len`
    /// is the layer's parameter count at task time.
    pub fn record_gradients(
        &mut self,
        layer: LayerId,
        task: u32,
        expected_len: usize,
        abs_grads: &[f32],
    ) -> Result<()> {
        if abs_grads.len() != expected_len {
            return Err(Error::Numeric(format!(
                "layer {} task {}: {} gradient magnitudes for a layer of {} parameters",
                layer.0,
                task,
                abs_grads.len(),
                expected_len
            )));
        }
        if let Some(bad) = abs_grads.iter().find(|g| !g.is_finite() || **g < 0.0) {
            return Err(Error::Numeric(format!(
                "layer {} task {}: invalid gradient magnitude {}",
                layer.0, task, bad
            )));
        }
        let summary = match self.mode {
            StorageMode::Exact => GradSummary::Exact {
                values: abs_grads.to_vec(),
            },
            StorageMode::Histogram => {
                let mut counts = vec![0u64; HIST_BINS + 2];
                for &g in abs_grads {
                    counts[hist_slot(g as f64)] += 1;
                }
                GradSummary::Histogram {
                    counts,
                    n: abs_grads.len(),
                }
            }
        };
        if self
            .records
            .entry(layer)
            .or_default()
            .insert(task, summary)
            .is_some()
        {
            warn!(
                "gradient record for layer {} task {} overwritten",
                layer.0, task
            );
        }
        if !self.task_order.contains(&task) {
            self.task_order.push(task);
        }
        Ok(())
    }

    pub fn get(&self, layer: LayerId, task: u32) -> Option<&GradSummary> {
        self.records.get(&layer).and_then(|m| m.get(&task))
    }

    pub fn layers(&self) -> Vec<LayerId> {
        self.records.keys().copied().collect()
    }

    /// Tasks recorded for `layer`, in stream order.
    pub fn tasks_for(&self, layer: LayerId) -> Vec<u32> {
        let Some(m) = self.records.get(&layer) else {
            return Vec::new();
        };
        self.task_order
            .iter()
            .copied()
            .filter(|t| m.contains_key(t))
            .collect()
    }

    /// Large-gradient fraction of `layer` on `task` for threshold `sigma`.
    pub fn rho(&self, layer: LayerId, task: u32, sigma: f64) -> Result<f64> {
        if sigma.is_nan() || sigma < 0.0 {
            return Err(Error::Config(format!(
                "sigma must be non-negative, got {sigma}"
            )));
        }
        let rec = self.get(layer, task).ok_or_else(|| {
            Error::Lookup(format!(
                "no gradient record for layer {} task {}",
                layer.0, task
            ))
        })?;
        Ok(rec.fraction_above(sigma))
    }

    /// Threshold for `layer` under `rule`.
    pub fn sigma_for(&self, layer: LayerId, rule: &SigmaRule, early_window: usize) -> Result<f64> {
        match *rule {
            SigmaRule::Absolute(s) => {
                if s > 0.0 {
                    Ok(s)
                } else {
                    Err(Error::Config(format!(
                        "absolute sigma must be positive, got {s}"
                    )))
                }
            }
            SigmaRule::EarlyMedian => {
                let tasks = self.tasks_for(layer);
                if tasks.is_empty() {
                    return Err(Error::Lookup(format!(
                        "no gradient records for layer {}",
                        layer.0
                    )));
                }
                let early: Vec<&GradSummary> = tasks
                    .iter()
                    .take(early_window.max(1))
                    .filter_map(|&t| self.get(layer, t))
                    .collect();
                Ok(pooled_median(&early))
            }
        }
    }

    /// `(task, ρ)` for every recorded task of `layer`, with `sigma` from `cfg`.
    pub fn rho_series(&self, layer: LayerId, cfg: &CriterionConfig) -> Result<Vec<(u32, f64)>> {
        let sigma = self.sigma_for(layer, &cfg.sigma, cfg.early_window)?;
        self.tasks_for(layer)
            .into_iter()
            .map(|t| Ok((t, self.rho(layer, t, sigma)?)))
            .collect()
    }

    /// `layer_id,task_id,rho` table for every layer.
    pub fn rho_table(&self, cfg: &CriterionConfig) -> Result<String> {
        let mut out = String::from("layer_id,task_id,rho\n");
        for layer in self.layers() {
            for (t, r) in self.rho_series(layer, cfg)? {
                let _ = writeln!(out, "{},{},{:.6}", layer.0, t, r);
            }
        }
        Ok(out)
    }
}

fn pooled_median(records: &[&GradSummary]) -> f64 {
    let total: usize = records.iter().map(|r| r.len()).sum();
    if total == 0 {
        return 0.0;
    }
    if records
        .iter()
        .all(|r| matches!(r, GradSummary::Exact { .. }))
    {
        let mut all: Vec<f32> = records
            .iter()
            .flat_map(|r| match r {
                GradSummary::Exact { values } => values.iter().copied(),
                GradSummary::Histogram { .. } => unreachable!(),
            })
            .collect();
        all.sort_by(f32::total_cmp);
        let mid = all.len() / 2;
        return if all.len() % 2 == 1 {
            all[mid] as f64
        } else {
            (all[mid - 1] as f64 + all[mid] as f64) / 2.0
        };
    }
    let mut counts = vec![0u64; HIST_BINS + 2];
    for r in records {
        match r {
            GradSummary::Histogram { counts: c, .. } => {
                for (a, b) in counts.iter_mut().zip(c) {
                    *a += b;
                }
            }
            GradSummary::Exact { values } => {
                for &v in values {
                    counts[hist_slot(v as f64)] += 1;
                }
            }
        }
    }
    let half = total as u64 / 2;
    let mut acc = 0u64;
    for (slot, c) in counts.iter().enumerate() {
        acc += c;
        if acc > half {
            return match slot {
                0 => 0.0,
                s if s > HIST_BINS => HIST_HI,
                // lower edge of the median bin
                s => hist_edge(s - 1),
            };
        }
    }
    HIST_HI
}

/// How σ is chosen per layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum SigmaRule {
    /// Fixed threshold in gradient-magnitude units.
    Absolute(f64),
    /// Median per-parameter magnitude of the layer over its first
    /// `early_window` recorded tasks.
    EarlyMedian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriterionConfig {
    pub sigma: SigmaRule,
    pub early_window: usize,
    pub late_window: usize,
    pub decrease_margin: f64,
    pub stability_eps: f64,
}

impl Default for CriterionConfig {
    fn default() -> Self {
        CriterionConfig {
            sigma: SigmaRule::EarlyMedian,
            early_window: 5,
            late_window: 5,
            decrease_margin: 0.1,
            stability_eps: 0.05,
        }
    }
}

impl CriterionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.early_window == 0 || self.late_window == 0 {
            return Err(Error::Config("criterion windows must be at least 1".into()));
        }
        for (name, v) in [
            ("decrease_margin", self.decrease_margin),
            ("stability_eps", self.stability_eps),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        if let SigmaRule::Absolute(s) = self.sigma {
            if s <= 0.0 {
                return Err(Error::Config(format!(
                    "absolute sigma must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    AlwaysSmall,
    AlwaysLarge,
    DecreasingThenStable,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Mean ρ over the first `early` and the last `late` entries.
pub fn window_means(series: &[f64], early: usize, late: usize) -> Option<(f64, f64)> {
    if early == 0 || late == 0 || series.len() < early.max(late) {
        return None;
    }
    Some((mean(&series[..early]), mean(&series[series.len() - late..])))
}

/// Assign a ρ series to exactly one scenario.
///
/// Rules are tried in order: all entries ≤ ε → always small; a drop of at
/// least the margin with a flat late window → decreasing then stable;
/// otherwise a late mean above ε → always large, and anything left (a late
/// window that has settled near zero without a full drop) → always small.
pub fn classify_series(series: &[f64], cfg: &CriterionConfig) -> Result<Scenario> {
    if series.len() < cfg.early_window + cfg.late_window {
        return Err(Error::InsufficientHistory(format!(
            "ρ series has {} entries; classification needs {} + {}",
            series.len(),
            cfg.early_window,
            cfg.late_window
        )));
    }
    if series.iter().all(|&r| r <= cfg.stability_eps) {
        return Ok(Scenario::AlwaysSmall);
    }
    let (early, late) =
        window_means(series, cfg.early_window, cfg.late_window).expect("length checked");
    let late_std = std_dev(&series[series.len() - cfg.late_window..]);
    if early - late >= cfg.decrease_margin && late_std <= cfg.stability_eps {
        return Ok(Scenario::DecreasingThenStable);
    }
    if late > cfg.stability_eps {
        Ok(Scenario::AlwaysLarge)
    } else {
        Ok(Scenario::AlwaysSmall)
    }
}

pub fn classify_layer(
    ledger: &GradientLedger,
    layer: LayerId,
    cfg: &CriterionConfig,
) -> Result<Scenario> {
    let series: Vec<f64> = ledger
        .rho_series(layer, cfg)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    classify_series(&series, cfg)
}

/// Which contiguous block of conv layers to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// The deepest `k` layers.
    Top,
    /// Centered in the stack.
    Middle,
    /// The first `k` layers whose input width equals their output width
    /// (skips a channel-changing stem).
    Front,
    /// Starting at this 1-based position.
    At(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub collective_hash: String,
    pub task_horizon: u32,
    /// ρ series (task, ρ) per selected layer; empty when history is missing.
    pub rho_series: Vec<Vec<(u32, f64)>>,
    pub scenarios: Vec<Option<Scenario>>,
}

/// The `k` selected layers with frozen parameter copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearngeneSelection {
    pub k: usize,
    /// Deepest last.
    pub layer_ids: Vec<LayerId>,
    /// 1-based positions in the collective at selection time.
    pub positions: Vec<usize>,
    pub layers: Vec<Conv2d>,
    /// Spatial size of the map the first selected layer consumed.
    pub input_hw: (usize, usize),
    pub provenance: Provenance,
}

impl LearngeneSelection {
    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().expect("k >= 1").out_channels
    }
}

/// Content hash of a collective network's parameters and shape.
pub fn network_hash(net: &NetworkGraph) -> String {
    let bytes = serde_json::to_vec(&net.net).expect("network serializes");
    sha256_hex(&bytes)
}

fn placement_start(net: &NetworkGraph, k: usize, placement: Placement) -> Result<usize> {
    let depth = net.depth();
    let start = match placement {
        Placement::Top => depth - k,
        Placement::Middle => (depth - k) / 2,
        Placement::Front => net
            .net
            .convs
            .iter()
            .position(|c| c.in_channels == c.out_channels)
            .unwrap_or(0)
            .min(depth - k),
        Placement::At(p) => {
            if p == 0 || p - 1 + k > depth {
                return Err(Error::Selection(format!(
                    "placement at {p} with k={k} exceeds depth {depth}"
                )));
            }
            p - 1
        }
    };
    Ok(start)
}

/// Select the deepest `k` conv layers (the learngene).
pub fn select_learngene(
    net: &NetworkGraph,
    ledger: &GradientLedger,
    cfg: &CriterionConfig,
    k: usize,
) -> Result<LearngeneSelection> {
    select_learngene_at(net, ledger, cfg, k, Placement::Top)
}

/// Select `k` contiguous conv layers at `placement`. Layers that the
/// criterion does not classify as decreasing-then-stable are reported as a
/// warning, never rejected.
pub fn select_learngene_at(
    net: &NetworkGraph,
    ledger: &GradientLedger,
    cfg: &CriterionConfig,
    k: usize,
    placement: Placement,
) -> Result<LearngeneSelection> {
    let depth = net.depth();
    if k == 0 || k > depth {
        return Err(Error::Selection(format!(
            "k={k} must be in 1..={depth} (conv depth)"
        )));
    }
    let start = placement_start(net, k, placement)?;
    let idx: Vec<usize> = (start..start + k).collect();
    let layer_ids: Vec<LayerId> = idx.iter().map(|&i| net.layer_ids[i]).collect();
    let mut rho_series = Vec::with_capacity(k);
    let mut scenarios = Vec::with_capacity(k);
    let mut disagreements = Vec::new();
    for &id in &layer_ids {
        let series = ledger.rho_series(id, cfg).unwrap_or_default();
        let rhos: Vec<f64> = series.iter().map(|&(_, r)| r).collect();
        let scenario = classify_series(&rhos, cfg).ok();
        if scenario != Some(Scenario::DecreasingThenStable) {
            disagreements.push(format!("{}:{:?}", id.0, scenario));
        }
        rho_series.push(series);
        scenarios.push(scenario);
    }
    if !disagreements.is_empty() {
        warn!(
            "selected learngene layers not classified decreasing-then-stable: {}",
            disagreements.join(", ")
        );
    }
    let input_hw = if start == 0 {
        (net.net.input.height, net.net.input.width)
    } else {
        net.net.spatial_sizes()[start - 1]
    };
    Ok(LearngeneSelection {
        k,
        layer_ids,
        positions: idx.iter().map(|i| i + 1).collect(),
        layers: idx.iter().map(|&i| net.net.convs[i].clone()).collect(),
        input_hw,
        provenance: Provenance {
            collective_hash: network_hash(net),
            task_horizon: ledger.task_order.last().copied().unwrap_or(0),
            rho_series,
            scenarios,
        },
    })
}

pub const PACKAGE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PackageBody {
    format_version: u32,
    selection: LearngeneSelection,
}

#[derive(Serialize, Deserialize)]
struct PackageFile {
    format_version: u32,
    content_hash: String,
    selection: LearngeneSelection,
}

fn body_hash(sel: &LearngeneSelection) -> Result<String> {
    let body = serde_json::to_vec(&PackageBody {
        format_version: PACKAGE_FORMAT_VERSION,
        selection: sel.clone(),
    })?;
    Ok(sha256_hex(&body))
}

/// Serialize a learngene package to bytes.
pub fn encode_learngene(sel: &LearngeneSelection) -> Result<Vec<u8>> {
    let file = PackageFile {
        format_version: PACKAGE_FORMAT_VERSION,
        content_hash: body_hash(sel)?,
        selection: sel.clone(),
    };
    Ok(serde_json::to_vec_pretty(&file)?)
}

pub fn decode_learngene(bytes: &[u8]) -> Result<LearngeneSelection> {
    let file: PackageFile = serde_json::from_slice(bytes)
        .map_err(|e| Error::Package(format!("unreadable learngene package: {e}")))?;
    if file.format_version != PACKAGE_FORMAT_VERSION {
        return Err(Error::Package(format!(
            "package format version {} unsupported (expected {})",
            file.format_version, PACKAGE_FORMAT_VERSION
        )));
    }
    let sel = file.selection;
    if body_hash(&sel)? != file.content_hash {
        return Err(Error::Package(
            "learngene package hash mismatch (file modified?)".into(),
        ));
    }
    if sel.k != sel.layers.len() || sel.k != sel.layer_ids.len() || sel.k == 0 {
        return Err(Error::Package(
            "learngene package layer count inconsistent with k".into(),
        ));
    }
    for w in sel.layers.windows(2) {
        if w[0].out_channels != w[1].in_channels {
            return Err(Error::Package(
                "learngene layers are not channel-compatible".into(),
            ));
        }
    }
    Ok(sel)
}

pub fn export_learngene(sel: &LearngeneSelection, path: &Path) -> Result<()> {
    std::fs::write(path, encode_learngene(sel)?).map_err(|e| Error::io(path, e))
}

pub fn import_learngene(path: &Path) -> Result<LearngeneSelection> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_learngene(&bytes)
}
