use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::metrics::{spearman, MetricsTable};
use super::{CollectiveRun, DataEnv, ExperimentConfig};
use crate::collective::PseudoLabel;
use crate::datasets::{sample_episode, Episode, TensorCache};
use crate::error::{Error, Result};
use crate::individual::{adapt_cached, reconstruct, reconstruct_scratch, AdaptConfig, AdaptReport};
use crate::learngene::{
    encode_learngene, network_hash, select_learngene_at, window_means, LearngeneSelection,
    Placement,
};
use crate::seed::{derive_seed, rng_for, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ScratchCompare,
    SampleSweep,
    Evolution,
    PositionAblation,
    GradientTrends,
    OpenWorld,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::GradientTrends,
        ExperimentKind::ScratchCompare,
        ExperimentKind::SampleSweep,
        ExperimentKind::Evolution,
        ExperimentKind::PositionAblation,
        ExperimentKind::OpenWorld,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ScratchCompare => "scratch-compare",
            ExperimentKind::SampleSweep => "sample-sweep",
            ExperimentKind::Evolution => "evolution",
            ExperimentKind::PositionAblation => "position-ablation",
            ExperimentKind::GradientTrends => "gradient-trends",
            ExperimentKind::OpenWorld => "open-world",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind {s:?}")))
    }
}

/// Support and query tensors of one episode.
struct EpisodeData {
    support: TensorCache,
    support_labels: Vec<usize>,
    query: TensorCache,
    query_labels: Vec<usize>,
}

impl EpisodeData {
    fn build(env: &DataEnv, ep: &Episode) -> Result<Self> {
        let loader = env.loader();
        Ok(EpisodeData {
            support: TensorCache::build(&loader, &ep.support)?,
            support_labels: ep.support_labels(),
            query: TensorCache::build(&loader, &ep.query)?,
            query_labels: ep.query_labels(),
        })
    }
}

fn episode(
    env: &DataEnv,
    cfg: &ExperimentConfig,
    k_shot: usize,
    seed: u64,
    e: usize,
) -> Result<Episode> {
    sample_episode(
        &env.split,
        cfg.n_way,
        k_shot,
        cfg.query_per_class,
        env.source.as_ref(),
        derive_seed(seed, &format!("episode/{e}")),
    )
}

/// Reconstruct (or build from scratch) and adapt one model. Individual and
/// scratch runs with the same `(seed, tag)` share front-layer and head
/// initialization, batch order and Fisher draws.
#[allow(clippy::too_many_arguments)]
fn adapt_model(
    sel: &LearngeneSelection,
    scratch: bool,
    data: &EpisodeData,
    env: &DataEnv,
    cfg: &ExperimentConfig,
    seed: u64,
    tag: &str,
    episode_id: u64,
) -> Result<AdaptReport> {
    let mut rng = rng_for(seed, &format!("init/{tag}"));
    let shape = env.source.shape();
    let mut model = if scratch {
        reconstruct_scratch(sel, shape, cfg.n_way, &cfg.individual, &mut rng)?
    } else {
        reconstruct(sel, shape, cfg.n_way, &cfg.individual, &mut rng)?
    };
    let adapt_cfg = AdaptConfig {
        seed: derive_seed(seed, &format!("adapt/{tag}")),
        ..cfg.adapt.clone()
    };
    adapt_cached(
        &mut model,
        &data.support,
        &data.support_labels,
        &data.query,
        &data.query_labels,
        episode_id,
        &adapt_cfg,
    )
}

fn learngene_hash(sel: &LearngeneSelection) -> Result<String> {
    Ok(sha256_hex(&encode_learngene(sel)?)[..12].to_string())
}

fn base_table(run: &CollectiveRun, env: &DataEnv, cfg: &ExperimentConfig) -> MetricsTable {
    let mut t = MetricsTable::new();
    t.provenance.insert("config".into(), cfg.hash());
    t.provenance.insert("split".into(), env.split_hash());
    t.provenance.insert(
        "collective".into(),
        network_hash(&run.collective.graph)[..12].to_string(),
    );
    t
}

/// Individual (learngene) versus scratch query accuracy per epoch, averaged
/// over `episodes_per_seed` episodes for every seed.
pub fn run_scratch_compare(
    run: &CollectiveRun,
    env: &DataEnv,
    cfg: &ExperimentConfig,
) -> Result<MetricsTable> {
    let sel = run.learngene(&cfg.criterion, cfg.k)?;
    let mut table = base_table(run, env, cfg);
    table
        .provenance
        .insert("learngene".into(), learngene_hash(&sel)?);
    let epochs = cfg.adapt.epochs;
    for &seed in &cfg.seeds {
        let mut sums = [vec![0.0f64; epochs], vec![0.0f64; epochs]];
        for e in 0..cfg.episodes_per_seed {
            let ep = episode(env, cfg, cfg.k_shot, seed, e)?;
            let data = EpisodeData::build(env, &ep)?;
            for (ci, scratch) in [false, true].into_iter().enumerate() {
                let rep = adapt_model(
                    &sel,
                    scratch,
                    &data,
                    env,
                    cfg,
                    seed,
                    &format!("compare/{e}"),
                    e as u64,
                )?;
                for row in &rep.rows {
                    sums[ci][row.epoch - 1] += row.query_accuracy;
                }
            }
        }
        for (ci, name) in ["individual", "scratch"].iter().enumerate() {
            for (i, s) in sums[ci].iter().enumerate() {
                table.push(
                    "scratch_compare",
                    seed,
                    name,
                    (i + 1) as f64,
                    "query_accuracy",
                    s / cfg.episodes_per_seed as f64,
                );
            }
        }
        info!(
            "scratch-compare seed {seed}: individual {:.3} scratch {:.3} at epoch {}",
            sums[0][cfg.compare_epoch - 1] / cfg.episodes_per_seed as f64,
            sums[1][cfg.compare_epoch - 1] / cfg.episodes_per_seed as f64,
            cfg.compare_epoch
        );
    }
    Ok(table)
}

/// Final query accuracy against support samples per class. Each seed draws
/// one episode at the largest cap; smaller caps are nested truncations of it.
pub fn run_sample_sweep(
    run: &CollectiveRun,
    env: &DataEnv,
    cfg: &ExperimentConfig,
) -> Result<MetricsTable> {
    let caps = &env.cfg.sample_caps;
    let max = *caps
        .iter()
        .max()
        .ok_or_else(|| Error::Config("sample sweep needs at least one cap".into()))?;
    let sel = run.learngene(&cfg.criterion, cfg.k)?;
    let mut table = base_table(run, env, cfg);
    table
        .provenance
        .insert("learngene".into(), learngene_hash(&sel)?);
    for &seed in &cfg.seeds {
        let full = episode(env, cfg, max, seed, 0)?;
        for &cap in caps {
            let ep = full.with_support(cap)?;
            let data = EpisodeData::build(env, &ep)?;
            for (name, scratch) in [("individual", false), ("scratch", true)] {
                let rep = adapt_model(
                    &sel,
                    scratch,
                    &data,
                    env,
                    cfg,
                    seed,
                    &format!("sweep/{cap}"),
                    cap as u64,
                )?;
                let acc = rep.final_accuracy().unwrap_or(0.0);
                table.push(
                    "sample_sweep",
                    seed,
                    name,
                    cap as f64,
                    "final_accuracy",
                    acc,
                );
            }
        }
        info!("sample-sweep seed {seed} done");
    }
    Ok(table)
}

/// Smallest support size at which `curve` (sorted by x) reaches `target`,
/// interpolating linearly between measured points.
pub fn samples_to_reach(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    let first = curve.first()?;
    if first.1 >= target {
        return Some(first.0);
    }
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if y1 >= target {
            return Some(x0 + (x1 - x0) * (target - y0) / (y1 - y0));
        }
    }
    None
}

/// Individual accuracy using learngenes taken at successive points of the
/// collective's training.
pub fn run_evolution(
    run: &CollectiveRun,
    env: &DataEnv,
    cfg: &ExperimentConfig,
) -> Result<MetricsTable> {
    if run.snapshots.len() < 2 {
        return Err(Error::Config(format!(
            "evolution needs at least 2 snapshots, the run has {}",
            run.snapshots.len()
        )));
    }
    let mut table = base_table(run, env, cfg);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let mut sums = vec![0.0; run.snapshots.len()];
        for e in 0..cfg.episodes_per_seed {
            let ep = episode(env, cfg, cfg.k_shot, seed, e)?;
            let data = EpisodeData::build(env, &ep)?;
            for (i, snap) in run.snapshots.iter().enumerate() {
                let rep = adapt_model(
                    &snap.selection,
                    false,
                    &data,
                    env,
                    cfg,
                    seed,
                    &format!("evolution/{e}"),
                    e as u64,
                )?;
                sums[i] += rep.final_accuracy().unwrap_or(0.0);
            }
        }
        for (snap, sum) in run.snapshots.iter().zip(sums) {
            let acc = sum / cfg.episodes_per_seed as f64;
            table.push(
                "evolution",
                seed,
                "individual",
                snap.task as f64,
                "final_accuracy",
                acc,
            );
            xs.push(snap.task as f64);
            ys.push(acc);
        }
    }
    if let Some(r) = spearman(&xs, &ys) {
        table.push("evolution_summary", 0, "all", 0.0, "spearman", r);
    }
    Ok(table)
}

fn placement_name(p: Placement) -> String {
    match p {
        Placement::Top => "top".into(),
        Placement::Middle => "middle".into(),
        Placement::Front => "front".into(),
        Placement::At(i) => format!("at{i}"),
    }
}

/// Individual accuracy for learngenes taken at different depths of one
/// collective.
pub fn run_position_ablation(
    run: &CollectiveRun,
    env: &DataEnv,
    cfg: &ExperimentConfig,
) -> Result<MetricsTable> {
    let depth = run.collective.graph.depth();
    if depth < 9 {
        return Err(Error::Config(format!(
            "position ablation needs a collective of depth >= 9, got {depth}"
        )));
    }
    let mut table = base_table(run, env, cfg);
    let sels: Vec<(String, LearngeneSelection)> = cfg
        .position
        .placements
        .iter()
        .map(|&p| {
            Ok((
                placement_name(p),
                select_learngene_at(
                    &run.collective.graph,
                    &run.collective.ledger,
                    &cfg.criterion,
                    cfg.k,
                    p,
                )?,
            ))
        })
        .collect::<Result<_>>()?;
    for &seed in &cfg.seeds {
        let mut sums = vec![0.0; sels.len()];
        for e in 0..cfg.episodes_per_seed {
            let ep = episode(env, cfg, cfg.k_shot, seed, e)?;
            let data = EpisodeData::build(env, &ep)?;
            for (i, (_, sel)) in sels.iter().enumerate() {
                let rep = adapt_model(
                    sel,
                    false,
                    &data,
                    env,
                    cfg,
                    seed,
                    &format!("position/{e}"),
                    e as u64,
                )?;
                sums[i] += rep.final_accuracy().unwrap_or(0.0);
            }
        }
        for ((name, sel), sum) in sels.iter().zip(sums) {
            let acc = sum / cfg.episodes_per_seed as f64;
            table.push(
                "position_ablation",
                seed,
                name,
                sel.positions[0] as f64,
                "final_accuracy",
                acc,
            );
        }
    }
    Ok(table)
}

/// ρ per layer and task, plus early/late window means, for the final
/// collective. Layers are named by their 1-based position.
pub fn run_gradient_trends(run: &CollectiveRun, cfg: &ExperimentConfig) -> Result<MetricsTable> {
    let col = &run.collective;
    let mut table = MetricsTable::new();
    table.provenance.insert("config".into(), cfg.hash());
    table.provenance.insert(
        "collective".into(),
        network_hash(&col.graph)[..12].to_string(),
    );
    let seed = col.config.seed;
    for (pos, &id) in col.graph.layer_ids.iter().enumerate() {
        let cond = format!("layer{}", pos + 1);
        let series = col.ledger.rho_series(id, &cfg.criterion)?;
        for &(task, rho) in &series {
            table.push("gradient_trends", seed, &cond, task as f64, "rho", rho);
        }
        let rhos: Vec<f64> = series.iter().map(|&(_, r)| r).collect();
        if let Some((early, late)) =
            window_means(&rhos, cfg.criterion.early_window, cfg.criterion.late_window)
        {
            table.push("gradient_summary", seed, &cond, 0.0, "early_mean", early);
            table.push("gradient_summary", seed, &cond, 0.0, "late_mean", late);
        }
    }
    Ok(table)
}

/// Fraction of held-out base-class and open-class samples flagged open at
/// each threshold.
pub fn run_open_world_eval(
    run: &CollectiveRun,
    env: &DataEnv,
    cfg: &ExperimentConfig,
) -> Result<MetricsTable> {
    let col = &run.collective;
    let mut table = base_table(run, env, cfg);
    let loader = env.loader();
    let n = cfg.open.samples_per_class;
    let pool = |classes: &[crate::datasets::ClassId]| {
        classes
            .iter()
            .flat_map(|&c| {
                let len = env.source.class_len(c);
                env.cfg.pools.heldout(c, len).into_iter().take(n)
            })
            .collect::<Vec<_>>()
    };
    let pools = [
        ("base", pool(col.registry.classes())),
        ("open", pool(&env.split.open_classes)),
    ];
    let seed = col.config.seed;
    for (name, refs) in &pools {
        if refs.is_empty() {
            continue;
        }
        let data = TensorCache::build(&loader, refs)?;
        let scores = col.score_open_at(&data, 0.0)?;
        let mean_p = scores.iter().map(|d| d.p_open).sum::<f64>() / scores.len() as f64;
        table.push("open_world", seed, name, 0.0, "mean_p_open", mean_p);
        for &lambda in &cfg.open.lambdas {
            let decisions = col.score_open_at(&data, lambda)?;
            let flagged = decisions
                .iter()
                .filter(|d| d.label == PseudoLabel::Open)
                .count();
            table.push(
                "open_world",
                seed,
                name,
                lambda,
                "flag_rate",
                flagged as f64 / decisions.len() as f64,
            );
        }
    }
    Ok(table)
}
