//! Individual models: fresh front layers stacked under an inherited
//! learngene, adapted to a novel task with a Fisher-weighted retain penalty.

use std::ops::Range;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Episode, Loader, TensorCache};
use crate::error::{Error, Result};
use crate::fisher::{
    add_retain_grad, conv_tensors, estimate_fisher, retain_loss, FisherConfig, FisherDiag,
};
use crate::learngene::LearngeneSelection;
use crate::netgraph::LayerId;
use crate::nn::{
    softmax_cross_entropy, Conv2d, ConvNet, Dense, ImageShape, Optimizer, OptimizerKind,
};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndividualConfig {
    /// Widths of the fresh front layers before the last one.
    pub front_widths: Vec<usize>,
    /// Width of the last front layer; `None` matches the learngene input.
    pub front_out: Option<usize>,
    pub head_hidden: Vec<usize>,
}

impl Default for IndividualConfig {
    fn default() -> Self {
        IndividualConfig {
            front_widths: vec![16, 32, 32],
            front_out: None,
            head_hidden: vec![256],
        }
    }
}

/// Fresh front layers, inherited layers and a new head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualModel {
    pub net: ConvNet,
    /// Conv indices holding the inherited layers (empty for a scratch model).
    inherited: Range<usize>,
    /// Source layer ids in the collective.
    pub learngene_ids: Vec<LayerId>,
    /// Parameter tensors of the inherited layers at reconstruction time.
    anchors: Vec<Vec<f32>>,
    pub fisher: Option<FisherDiag>,
}

fn pool_plan(input: ImageShape, target: (usize, usize), front_depth: usize) -> Result<usize> {
    let mut h = input.height;
    let mut w = input.width;
    let mut pools = 0;
    while (h, w) != target {
        if h < 2 || w < 2 || h / 2 < target.0 || w / 2 < target.1 {
            return Err(Error::Reconstruction(format!(
                "input {}x{} cannot be pooled down to the learngene's {}x{}",
                input.height, input.width, target.0, target.1
            )));
        }
        h /= 2;
        w /= 2;
        pools += 1;
    }
    if pools > front_depth {
        return Err(Error::Reconstruction(format!(
            "{pools} poolings needed but only {front_depth} front layers"
        )));
    }
    Ok(pools)
}

fn build<R: Rng + ?Sized>(
    sel: &LearngeneSelection,
    input: ImageShape,
    n_way: usize,
    cfg: &IndividualConfig,
    inherit: bool,
    rng: &mut R,
) -> Result<IndividualModel> {
    if n_way < 2 {
        return Err(Error::Config(format!(
            "n_way must be at least 2, got {n_way}"
        )));
    }
    let lg_in = sel.input_channels();
    let front_out = cfg.front_out.unwrap_or(lg_in);
    if front_out != lg_in {
        return Err(Error::Reconstruction(format!(
            "front layers end with {front_out} channels but the learngene expects {lg_in}"
        )));
    }
    let mut widths = cfg.front_widths.clone();
    widths.push(front_out);
    let pools = pool_plan(input, sel.input_hw, widths.len())?;
    let mut convs = Vec::new();
    let mut c_in = input.channels;
    for (i, &w) in widths.iter().enumerate() {
        convs.push(Conv2d::new(c_in, w, 3, true, i < pools, rng));
        c_in = w;
    }
    let start = convs.len();
    for layer in &sel.layers {
        if inherit {
            convs.push(layer.clone());
        } else {
            convs.push(Conv2d::new(
                layer.in_channels,
                layer.out_channels,
                layer.kernel,
                layer.relu,
                layer.pool,
                rng,
            ));
        }
    }
    let inherited = if inherit {
        start..convs.len()
    } else {
        start..start
    };
    let mut net = ConvNet {
        input,
        convs,
        dense: Vec::new(),
    };
    let mut f = net.feature_dim();
    for &hdim in &cfg.head_hidden {
        net.dense.push(Dense::new(f, hdim, true, rng));
        f = hdim;
    }
    net.dense.push(Dense::new(f, n_way, false, rng));
    net.validate()?;
    let anchors = net.params()[conv_tensors(inherited.clone())]
        .iter()
        .map(|p| p.to_vec())
        .collect();
    Ok(IndividualModel {
        net,
        inherited,
        learngene_ids: if inherit {
            sel.layer_ids.clone()
        } else {
            Vec::new()
        },
        anchors,
        fisher: None,
    })
}

/// Stack fresh front layers under the learngene and add an `n_way` head.
pub fn reconstruct<R: Rng + ?Sized>(
    sel: &LearngeneSelection,
    input: ImageShape,
    n_way: usize,
    cfg: &IndividualConfig,
    rng: &mut R,
) -> Result<IndividualModel> {
    build(sel, input, n_way, cfg, true, rng)
}

/// The same architecture as [`reconstruct`], with every layer freshly
/// initialized and nothing to retain.
pub fn reconstruct_scratch<R: Rng + ?Sized>(
    sel: &LearngeneSelection,
    input: ImageShape,
    n_way: usize,
    cfg: &IndividualConfig,
    rng: &mut R,
) -> Result<IndividualModel> {
    build(sel, input, n_way, cfg, false, rng)
}

impl IndividualModel {
    pub fn inherited_layers(&self) -> Range<usize> {
        self.inherited.clone()
    }

    pub fn anchors(&self) -> &[Vec<f32>] {
        &self.anchors
    }

    pub fn is_scratch(&self) -> bool {
        self.inherited.is_empty()
    }

    /// Re-estimate the Fisher diagonal of the inherited layers on `inputs`.
    pub fn estimate_fisher<R: Rng + ?Sized>(
        &mut self,
        inputs: &[f32],
        labels: &[usize],
        cfg: &FisherConfig,
        rng: &mut R,
    ) -> Result<()> {
        if self.is_scratch() {
            return Ok(());
        }
        let f = estimate_fisher(
            &self.net,
            inputs,
            labels,
            conv_tensors(self.inherited.clone()),
            cfg,
            rng,
        )?;
        self.fisher = Some(f);
        Ok(())
    }

    /// `Σ ½·F·(θ − θ*)²` over the inherited layers; zero without a Fisher estimate.
    pub fn retain_loss(&self) -> f64 {
        match &self.fisher {
            Some(f) => retain_loss(&self.net.params(), &self.anchors, f),
            None => 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

/// `ce + λ·retain`.
pub fn total_loss(ce: f64, lambda: f64, retain: f64) -> f64 {
    ce + lambda * retain
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherRefresh {
    /// Estimate once before the first epoch.
    Once,
    PerEpoch,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f32,
    pub fisher: FisherConfig,
    pub fisher_refresh: FisherRefresh,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        // Adam: with λ = 1000 the retain term is too stiff for plain SGD at
        // this learning rate (lr·λ·F exceeds the stability bound).
        AdaptConfig {
            optimizer: OptimizerKind::default(),
            lr: 0.005,
            batch_size: 32,
            epochs: 30,
            lambda: 1000.0,
            fisher: FisherConfig::default(),
            fisher_refresh: FisherRefresh::PerEpoch,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        // lr 0 is allowed: a zero step leaves the model untouched
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be non-negative",
                self.lr
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda {} must be non-negative",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRow {
    pub episode_id: u64,
    pub epoch: usize,
    pub support_loss: f64,
    pub ce: f64,
    pub retain: f64,
    pub query_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdaptReport {
    pub rows: Vec<AdaptRow>,
}

impl AdaptReport {
    pub fn accuracy_at(&self, epoch: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch)
            .map(|r| r.query_accuracy)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.query_accuracy)
    }
}

fn accuracy(net: &ConvNet, data: &TensorCache, labels: &[usize]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let k = net.num_classes();
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in rows.chunks(128) {
        let logits = net.forward(&data.gather(chunk))?;
        for (row, &i) in logits.chunks(k).zip(chunk) {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            if best == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Adapt `model` to `episode`: mini-batch training on the support set under
/// `ce + λ·retain`, reporting query accuracy after every epoch. Returns an
/// error on non-finite losses; the model then holds the last finite state.
pub fn adapt(
    model: &mut IndividualModel,
    episode: &Episode,
    episode_id: u64,
    loader: &Loader<'_>,
    cfg: &AdaptConfig,
) -> Result<AdaptReport> {
    cfg.validate()?;
    if model.net.num_classes() != episode.n_way {
        return Err(Error::Config(format!(
            "model has {} outputs but the episode is {}-way",
            model.net.num_classes(),
            episode.n_way
        )));
    }
    let support = TensorCache::build(loader, &episode.support)?;
    let support_labels = episode.support_labels();
    let query = TensorCache::build(loader, &episode.query)?;
    let query_labels = episode.query_labels();
    adapt_cached(
        model,
        &support,
        &support_labels,
        &query,
        &query_labels,
        episode_id,
        cfg,
    )
}

/// [`adapt`] on pre-built tensors.
pub fn adapt_cached(
    model: &mut IndividualModel,
    support: &TensorCache,
    support_labels: &[usize],
    query: &TensorCache,
    query_labels: &[usize],
    episode_id: u64,
    cfg: &AdaptConfig,
) -> Result<AdaptReport> {
    cfg.validate()?;
    let n = support.len();
    if n == 0 {
        return Err(Error::Data("empty support set".into()));
    }
    let classes = model.net.num_classes();
    if let Some(&bad) = support_labels
        .iter()
        .chain(query_labels)
        .find(|&&y| y >= classes)
    {
        return Err(Error::Registry(format!(
            "label {bad} outside the {classes}-way head"
        )));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut report = AdaptReport::default();
    let mut fisher_rng = rng_for(cfg.seed, &format!("episode{episode_id}/fisher"));
    let lambda = if model.is_scratch() { 0.0 } else { cfg.lambda };
    let use_retain = lambda > 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        let refresh_epoch = match cfg.fisher_refresh {
            FisherRefresh::Once => epoch == 1,
            FisherRefresh::PerEpoch => true,
            FisherRefresh::PerBatch => false,
        };
        if use_retain && refresh_epoch {
            model.estimate_fisher(
                &support.pixels,
                support_labels,
                &cfg.fisher,
                &mut fisher_rng,
            )?;
        }
        let mut rng = rng_for(cfg.seed, &format!("episode{episode_id}/epoch{epoch}"));
        order.shuffle(&mut rng);
        let (mut ce_sum, mut retain_sum, mut nb) = (0.0f64, 0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if use_retain && cfg.fisher_refresh == FisherRefresh::PerBatch {
                model.estimate_fisher(
                    &support.pixels,
                    support_labels,
                    &cfg.fisher,
                    &mut fisher_rng,
                )?;
            }
            let x = support.gather(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| support_labels[i]).collect();
            let cache = model.net.forward_train(&x)?;
            let (ce, dl) = softmax_cross_entropy(&cache.logits, &y, classes);
            let mut grads = model.net.backward(&cache, &dl, 0);
            let mut retain = 0.0;
            if use_retain {
                if let Some(f) = &model.fisher {
                    let params = model.net.params();
                    retain = retain_loss(&params, &model.anchors, f);
                    add_retain_grad(&mut grads, &params, &model.anchors, f, lambda);
                }
            }
            let total = total_loss(ce as f64, lambda as f64, retain);
            if !total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "episode {episode_id} epoch {epoch}: non-finite loss or gradient"
                )));
            }
            opt.step(model.net.params_mut(), &grads);
            ce_sum += ce as f64;
            retain_sum += retain;
            nb += 1;
        }
        let ce = ce_sum / nb as f64;
        let retain = retain_sum / nb as f64;
        let row = AdaptRow {
            episode_id,
            epoch,
            support_loss: total_loss(ce, lambda as f64, retain),
            ce,
            retain,
            query_accuracy: accuracy(&model.net, query, query_labels)?,
        };
        debug!(
            "episode {episode_id} epoch {epoch}: ce {:.4} retain {:.3e} acc {:.3}",
            row.ce, row.retain, row.query_accuracy
        );
        report.rows.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learngene::{select_learngene, CriterionConfig, GradientLedger, StorageMode};
    use crate::netgraph::{HeadSpec, LayerSpec, NetworkGraph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn collective() -> NetworkGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers: Vec<LayerSpec> = [
            (4, false),
            (6, true),
            (6, true),
            (6, false),
            (6, false),
            (6, false),
        ]
        .iter()
        .map(|&(w, p)| LayerSpec::conv3(w, p))
        .collect();
        NetworkGraph::new(
            ImageShape::new(3, 16, 16),
            &layers,
            &HeadSpec {
                hidden: vec![],
                classes: 4,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn selection(net: &NetworkGraph) -> LearngeneSelection {
        select_learngene(
            net,
            &GradientLedger::new(StorageMode::Exact),
            &CriterionConfig::default(),
            3,
        )
        .unwrap()
    }

    fn batch(n: usize, shape: ImageShape, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * shape.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    #[test]
    fn reconstruct_places_learngene_on_top() {
        let col = collective();
        let sel = selection(&col);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = IndividualConfig {
            front_widths: vec![5, 5, 5],
            front_out: None,
            head_hidden: vec![16],
        };
        let m = reconstruct(&sel, col.net.input, 5, &cfg, &mut rng).unwrap();
        assert_eq!(m.net.convs.len(), 7);
        assert_eq!(m.inherited_layers(), 4..7);
        assert_eq!(m.net.num_classes(), 5);
        assert_eq!(&m.net.convs[4..], &col.net.convs[3..]);
        // two pools in the front reach the learngene's 4x4 input
        assert_eq!(m.net.spatial_sizes()[3], (4, 4));

        // inherited layers compute exactly what they computed in the collective
        let feats = batch(3, ImageShape::new(6, 4, 4), 7);
        let (a, _) = col.net.apply_convs(3..6, &feats, (4, 4)).unwrap();
        let (b, _) = m.net.apply_convs(4..7, &feats, (4, 4)).unwrap();
        assert_eq!(a, b);

        let s = reconstruct_scratch(&sel, col.net.input, 5, &cfg, &mut rng).unwrap();
        assert!(s.is_scratch());
        assert_eq!(s.net.param_count(), m.net.param_count());
        assert_ne!(s.net.convs[4].weight, m.net.convs[4].weight);
    }

    #[test]
    fn channel_mismatch_names_both_widths() {
        let col = collective();
        let sel = selection(&col);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = IndividualConfig {
            front_out: Some(9),
            ..Default::default()
        };
        let err = reconstruct(&sel, col.net.input, 5, &cfg, &mut rng).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Reconstruction(_)));
        assert!(msg.contains('9') && msg.contains('6'), "{msg}");
        // too few front layers to pool 16 -> 4
        let shallow = IndividualConfig {
            front_widths: vec![],
            ..Default::default()
        };
        assert!(matches!(
            reconstruct(&sel, col.net.input, 5, &shallow, &mut rng),
            Err(Error::Reconstruction(_))
        ));
    }

    #[test]
    fn retain_is_zero_at_anchors_and_penalizes_drift() {
        let col = collective();
        let sel = selection(&col);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = reconstruct(
            &sel,
            col.net.input,
            3,
            &IndividualConfig::default(),
            &mut rng,
        )
        .unwrap();
        let x = batch(6, m.net.input, 4);
        m.estimate_fisher(&x, &[], &FisherConfig::default(), &mut rng)
            .unwrap();
        let f = m.fisher.as_ref().unwrap();
        assert_eq!(f.tensors, conv_tensors(m.inherited_layers()));
        assert!(f.values.iter().flatten().all(|v| *v >= 0.0));
        assert_eq!(m.retain_loss(), 0.0);
        // front-layer changes are not penalized
        m.net.convs[0].weight[0] += 1.0;
        assert_eq!(m.retain_loss(), 0.0);
        let i = m.inherited_layers().start;
        let fpos = m.fisher.as_ref().unwrap().values[0]
            .iter()
            .position(|v| *v > 0.0)
            .unwrap();
        m.net.convs[i].weight[fpos] += 0.5;
        assert!(m.retain_loss() > 0.0);
        assert_eq!(total_loss(1.5, 2.0, 0.25), 2.0);
    }
}
