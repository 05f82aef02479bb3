//! The expandable collective network: a conv stack with stable layer ids,
//! three structural expansion operations and a replayable expansion log.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvNet, Dense, ImageShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub u32);

/// Shape of one conv block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub relu: bool,
    pub pool: bool,
}

impl LayerSpec {
    pub fn conv3(out_channels: usize, pool: bool) -> Self {
        LayerSpec {
            out_channels,
            kernel: 3,
            relu: true,
            pool,
        }
    }
}

/// Dense layers after the conv stack: hidden widths then the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionKind {
    Deepen,
    Widen,
    HeadExpand,
}

/// One structural change. `target_layer` is the 1-based conv position at
/// event time (0 for head expansions); `units` is the number of added
/// channels or classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    pub kind: ExpansionKind,
    pub target_layer: usize,
    pub task_id: u32,
    pub params_added: usize,
    pub units: usize,
}

/// Shape-only summary of a network, used for replay checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSummary {
    /// `(in, out, kernel, relu, pool)` per conv block.
    pub convs: Vec<(usize, usize, usize, bool, bool)>,
    /// `(in, out)` per dense layer.
    pub dense: Vec<(usize, usize)>,
}

impl ShapeSummary {
    pub fn of(net: &ConvNet) -> Self {
        ShapeSummary {
            convs: net
                .convs
                .iter()
                .map(|c| (c.in_channels, c.out_channels, c.kernel, c.relu, c.pool))
                .collect(),
            dense: net
                .dense
                .iter()
                .map(|d| (d.in_features, d.out_features))
                .collect(),
        }
    }

    /// Parameter count implied by the shapes alone.
    pub fn param_count(&self) -> usize {
        self.convs
            .iter()
            .map(|&(i, o, k, _, _)| i * o * k * k + o)
            .sum::<usize>()
            + self.dense.iter().map(|&(i, o)| i * o + o).sum::<usize>()
    }

    /// Apply one logged event structurally.
    pub fn apply(&mut self, ev: &ExpansionEvent, input: ImageShape) -> Result<()> {
        match ev.kind {
            ExpansionKind::Deepen => {
                let i = ev
                    .target_layer
                    .checked_sub(1)
                    .filter(|&i| i < self.convs.len())
                    .ok_or_else(|| {
                        Error::Expansion(format!(
                            "replay: deepen target {} out of range",
                            ev.target_layer
                        ))
                    })?;
                let (_, o, k, relu, _) = self.convs[i];
                self.convs.insert(i + 1, (o, o, k, relu, false));
            }
            ExpansionKind::Widen => {
                let i = ev
                    .target_layer
                    .checked_sub(1)
                    .filter(|&i| i < self.convs.len())
                    .ok_or_else(|| {
                        Error::Expansion(format!(
                            "replay: widen target {} out of range",
                            ev.target_layer
                        ))
                    })?;
                let add = ev.units;
                self.convs[i].1 += add;
                if i + 1 < self.convs.len() {
                    self.convs[i + 1].0 += add;
                } else if let Some(d) = self.dense.first_mut() {
                    let (h, w) = spatial_after(&self.convs, input);
                    d.0 += add * h * w;
                }
            }
            ExpansionKind::HeadExpand => {
                let d = self
                    .dense
                    .last_mut()
                    .ok_or_else(|| Error::Expansion("replay: no head to expand".into()))?;
                d.1 += ev.units;
            }
        }
        Ok(())
    }
}

fn spatial_after(convs: &[(usize, usize, usize, bool, bool)], input: ImageShape) -> (usize, usize) {
    convs.iter().fold((input.height, input.width), |hw, c| {
        if c.4 {
            (hw.0 / 2, hw.1 / 2)
        } else {
            hw
        }
    })
}

/// Expandable convolutional classifier with stable per-layer ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub net: ConvNet,
    pub layer_ids: Vec<LayerId>,
    next_layer_id: u32,
    pub expansion_log: Vec<ExpansionEvent>,
    /// Shape at construction; replaying `expansion_log` on it must give the
    /// current shape.
    pub initial_shape: ShapeSummary,
    /// Whether widening the last conv layer may rewire the head's inputs.
    pub allow_head_rewire: bool,
}

impl NetworkGraph {
    pub fn new<R: Rng + ?Sized>(
        input: ImageShape,
        layers: &[LayerSpec],
        head: &HeadSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers.len());
        let mut ch = input.channels;
        for l in layers {
            convs.push(Conv2d::new(
                ch,
                l.out_channels,
                l.kernel,
                l.relu,
                l.pool,
                rng,
            ));
            ch = l.out_channels;
        }
        let mut net = ConvNet {
            input,
            convs,
            dense: Vec::new(),
        };
        let mut feat = net.feature_dim();
        for &h in &head.hidden {
            net.dense.push(Dense::new(feat, h, true, rng));
            feat = h;
        }
        net.dense.push(Dense::new(feat, head.classes, false, rng));
        Self::from_net(net)
    }

    /// Wrap an existing network, assigning fresh ids `1..=depth`.
    pub fn from_net(net: ConvNet) -> Result<Self> {
        net.validate()?;
        if net.dense.is_empty() {
            return Err(Error::Config("network needs at least a head layer".into()));
        }
        let depth = net.convs.len() as u32;
        Ok(NetworkGraph {
            initial_shape: ShapeSummary::of(&net),
            net,
            layer_ids: (1..=depth).map(LayerId).collect(),
            next_layer_id: depth + 1,
            expansion_log: Vec::new(),
            allow_head_rewire: true,
        })
    }

    pub fn depth(&self) -> usize {
        self.net.convs.len()
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn layer_index(&self, id: LayerId) -> Option<usize> {
        self.layer_ids.iter().position(|&l| l == id)
    }

    pub fn forward(&self, batch: &[f32]) -> Result<Vec<f32>> {
        self.net.forward(batch)
    }

    /// Replay the expansion log on the initial shape and compare.
    pub fn replay_check(&self) -> Result<()> {
        let mut shape = self.initial_shape.clone();
        for ev in &self.expansion_log {
            shape.apply(ev, self.net.input)?;
        }
        if shape != ShapeSummary::of(&self.net) {
            return Err(Error::Expansion(
                "expansion log does not replay to the current shape".into(),
            ));
        }
        Ok(())
    }

    /// Insert a copy of conv layer `source_layer` (1-based) directly after it.
    /// The copy never pools, so spatial sizes downstream are unchanged.
    pub fn deepen(&mut self, source_layer: usize, task_id: u32) -> Result<()> {
        let i = self.check_layer(source_layer)?;
        let src = &self.net.convs[i];
        if src.in_channels != src.out_channels {
            return Err(Error::Expansion(format!(
                "layer {} maps {} to {} channels; a duplicate cannot follow it",
                source_layer, src.in_channels, src.out_channels
            )));
        }
        let mut copy = src.clone();
        copy.pool = false;
        let added = copy.param_count();
        self.net.convs.insert(i + 1, copy);
        self.layer_ids.insert(i + 1, LayerId(self.next_layer_id));
        self.next_layer_id += 1;
        self.expansion_log.push(ExpansionEvent {
            kind: ExpansionKind::Deepen,
            target_layer: source_layer,
            task_id,
            params_added: added,
            units: 1,
        });
        Ok(())
    }

    /// Double the output channels of conv layer `layer` (1-based) by
    /// duplicating its kernels, and halve the consumer weights that read the
    /// original and duplicated channels so the network function is unchanged.
    pub fn widen(&mut self, layer: usize, task_id: u32) -> Result<()> {
        self.widen_split(layer, task_id, || 0.5)
    }

    /// Like [`NetworkGraph::widen`], but each consumer weight is split as
    /// `(a, 1 - a)` with `a` drawn from `0.5 ± jitter`. The function is still
    /// preserved (the two channels are identical), while the duplicated
    /// channels stop receiving identical gradients.
    pub fn widen_jittered<R: Rng + ?Sized>(
        &mut self,
        layer: usize,
        task_id: u32,
        jitter: f32,
        rng: &mut R,
    ) -> Result<()> {
        if !(0.0..0.5).contains(&jitter) {
            return Err(Error::Expansion(format!(
                "widen jitter {jitter} outside [0, 0.5)"
            )));
        }
        if jitter == 0.0 {
            return self.widen(layer, task_id);
        }
        self.widen_split(layer, task_id, || {
            rng.random_range(0.5 - jitter..0.5 + jitter)
        })
    }

    fn widen_split(
        &mut self,
        layer: usize,
        task_id: u32,
        mut split: impl FnMut() -> f32,
    ) -> Result<()> {
        let i = self.check_layer(layer)?;
        let last = i + 1 == self.net.convs.len();
        if last && !self.allow_head_rewire {
            return Err(Error::Expansion(format!(
                "layer {layer} feeds the head and head rewiring is disabled"
            )));
        }
        let before = self.net.param_count();
        let c = self.net.convs[i].out_channels;
        {
            let conv = &mut self.net.convs[i];
            let w = conv.weight.clone();
            conv.weight.extend_from_slice(&w);
            let b = conv.bias.clone();
            conv.bias.extend_from_slice(&b);
            conv.out_channels = 2 * c;
        }
        if !last {
            let next = &mut self.net.convs[i + 1];
            let kk = next.kernel * next.kernel;
            let old_in = next.in_channels;
            let mut w = Vec::with_capacity(next.out_channels * 2 * old_in * kk);
            for o in 0..next.out_channels {
                let row = &next.weight[o * old_in * kk..(o + 1) * old_in * kk];
                let a: Vec<f32> = row.iter().map(|_| split()).collect();
                w.extend(row.iter().zip(&a).map(|(v, a)| v * a));
                w.extend(row.iter().zip(&a).map(|(v, a)| v * (1.0 - a)));
            }
            next.weight = w;
            next.in_channels = 2 * old_in;
        } else {
            let (h, wd) = *self.net.spatial_sizes().last().expect("non-empty");
            let block = c * h * wd;
            let head = &mut self.net.dense[0];
            let mut w = Vec::with_capacity(head.out_features * 2 * block);
            for o in 0..head.out_features {
                let row = &head.weight[o * block..(o + 1) * block];
                let a: Vec<f32> = row.iter().map(|_| split()).collect();
                w.extend(row.iter().zip(&a).map(|(v, a)| v * a));
                w.extend(row.iter().zip(&a).map(|(v, a)| v * (1.0 - a)));
            }
            head.weight = w;
            head.in_features = 2 * block;
        }
        self.net.validate()?;
        self.expansion_log.push(ExpansionEvent {
            kind: ExpansionKind::Widen,
            target_layer: layer,
            task_id,
            params_added: self.net.param_count() - before,
            units: c,
        });
        Ok(())
    }

    /// Append `new_classes` zero-initialized output units to the head.
    pub fn expand_head(&mut self, new_classes: usize, task_id: u32) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::Expansion(
                "expand_head requires at least one new class".into(),
            ));
        }
        let head = self.net.dense.last_mut().expect("validated head");
        head.weight
            .extend(std::iter::repeat_n(0.0, new_classes * head.in_features));
        head.bias.extend(std::iter::repeat_n(0.0, new_classes));
        head.out_features += new_classes;
        let added = new_classes * (head.in_features + 1);
        self.expansion_log.push(ExpansionEvent {
            kind: ExpansionKind::HeadExpand,
            target_layer: 0,
            task_id,
            params_added: added,
            units: new_classes,
        });
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<usize> {
        if layer == 0 || layer > self.net.convs.len() {
            return Err(Error::Expansion(format!(
                "layer {} out of range 1..={}",
                layer,
                self.net.convs.len()
            )));
        }
        Ok(layer - 1)
    }
}
