use serde::{Deserialize, Serialize};

use super::kernels::{col2im, gemm, im2col, maxpool2, relu_inplace};
use super::layers::{Conv2d, Dense};
use crate::error::{Error, Result};

/// Input geometry of one sample: channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A plain (non-residual) convolutional classifier: a stack of conv blocks
/// followed by a stack of dense layers. The last dense layer is the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub input: ImageShape,
    pub convs: Vec<Conv2d>,
    pub dense: Vec<Dense>,
}

/// Per-layer gradients, ordered like [`ConvNet::params`]: weight then bias
/// for every conv layer, then weight then bias for every dense layer.
pub type Grads = Vec<Vec<f32>>;

struct ConvCache {
    cols: Vec<f32>,
    /// Post-activation, pre-pool output (`[C, N, H, W]`).
    act: Vec<f32>,
    pool_idx: Vec<u32>,
    h: usize,
    w: usize,
}

struct DenseCache {
    input: Vec<f32>,
    act: Vec<f32>,
}

/// Activations kept from a training forward pass.
pub struct ForwardCache {
    batch: usize,
    convs: Vec<ConvCache>,
    dense: Vec<DenseCache>,
    /// Spatial size of the last conv output.
    last_hw: (usize, usize),
    pub logits: Vec<f32>,
}

impl ConvNet {
    pub fn num_classes(&self) -> usize {
        self.dense.last().map_or(0, |d| d.out_features)
    }

    /// Spatial size after each conv block, starting from the input.
    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        let mut hw = (self.input.height, self.input.width);
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            if c.pool {
                hw = (hw.0 / 2, hw.1 / 2);
            }
            out.push(hw);
        }
        out
    }

    /// Flattened size of the last conv block's output.
    pub fn feature_dim(&self) -> usize {
        match (self.convs.last(), self.spatial_sizes().last()) {
            (Some(c), Some(&(h, w))) => c.out_channels * h * w,
            _ => self.input.len(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum::<usize>()
            + self.dense.iter().map(Dense::param_count).sum::<usize>()
    }

    /// Check that every layer's input matches its producer's output.
    pub fn validate(&self) -> Result<()> {
        let mut ch = self.input.channels;
        let mut hw = (self.input.height, self.input.width);
        for (i, c) in self.convs.iter().enumerate() {
            if c.in_channels != ch {
                return Err(Error::Expansion(format!(
                    "conv layer {} expects {} input channels but receives {}",
                    i + 1,
                    c.in_channels,
                    ch
                )));
            }
            if c.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "conv layer {} has even kernel {}",
                    i + 1,
                    c.kernel
                )));
            }
            if c.weight.len() != c.out_channels * c.fan_in() || c.bias.len() != c.out_channels {
                return Err(Error::Expansion(format!(
                    "conv layer {} parameter shape mismatch",
                    i + 1
                )));
            }
            if c.pool {
                if hw.0 < 2 || hw.1 < 2 {
                    return Err(Error::Config(format!(
                        "conv layer {} pools a {}x{} map",
                        i + 1,
                        hw.0,
                        hw.1
                    )));
                }
                hw = (hw.0 / 2, hw.1 / 2);
            }
            ch = c.out_channels;
        }
        let mut feat = ch * hw.0 * hw.1;
        for (j, d) in self.dense.iter().enumerate() {
            if d.in_features != feat {
                return Err(Error::Expansion(format!(
                    "dense layer {} expects {} inputs but receives {}",
                    j + 1,
                    d.in_features,
                    feat
                )));
            }
            if d.weight.len() != d.in_features * d.out_features || d.bias.len() != d.out_features {
                return Err(Error::Expansion(format!(
                    "dense layer {} parameter shape mismatch",
                    j + 1
                )));
            }
            feat = d.out_features;
        }
        Ok(())
    }

    /// Borrow all parameter buffers in gradient order.
    pub fn params(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = Vec::with_capacity(2 * (self.convs.len() + self.dense.len()));
        for c in &self.convs {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        for d in &self.dense {
            v.push(&d.weight);
            v.push(&d.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = Vec::with_capacity(2 * (self.convs.len() + self.dense.len()));
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        for d in &mut self.dense {
            v.push(&mut d.weight);
            v.push(&mut d.bias);
        }
        v
    }

    pub fn zero_grads(&self) -> Grads {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn check_batch(&self, batch: &[f32]) -> Result<usize> {
        let per = self.input.len();
        if per == 0 || !batch.len().is_multiple_of(per) {
            return Err(Error::Inference(format!(
                "batch of {} values is not a multiple of the sample size {}",
                batch.len(),
                per
            )));
        }
        Ok(batch.len() / per)
    }

    /// Evaluation forward pass; `batch` is `[N, C, H, W]`. Returns `[N, classes]`.
    pub fn forward(&self, batch: &[f32]) -> Result<Vec<f32>> {
        Ok(self.run(batch, false)?.logits)
    }

    /// Forward pass keeping the activations needed by [`ConvNet::backward`].
    pub fn forward_train(&self, batch: &[f32]) -> Result<ForwardCache> {
        self.run(batch, true)
    }

    /// Output of the conv stack only (before flattening), `[N, C, H, W]`.
    pub fn conv_features(&self, batch: &[f32], upto: usize) -> Result<Vec<f32>> {
        let n = self.check_batch(batch)?;
        let mut x = nchw_to_cnhw(
            batch,
            n,
            self.input.channels,
            self.input.height * self.input.width,
        );
        let (mut h, mut w) = (self.input.height, self.input.width);
        let mut ch = self.input.channels;
        for conv in self.convs.iter().take(upto) {
            let (y, _) = conv_forward(conv, &x, n, h, w, false);
            x = y;
            if conv.pool {
                h /= 2;
                w /= 2;
            }
            ch = conv.out_channels;
        }
        Ok(nchw_to_cnhw(&x, ch, n, h * w))
    }

    /// Apply conv layers `layers` to an `[N, C, H, W]` feature map of spatial
    /// size `hw`. Returns the output map and its spatial size.
    pub fn apply_convs(
        &self,
        layers: std::ops::Range<usize>,
        features: &[f32],
        hw: (usize, usize),
    ) -> Result<(Vec<f32>, (usize, usize))> {
        let (mut h, mut w) = hw;
        let Some(first) = self.convs.get(layers.start) else {
            return Err(Error::Inference(format!(
                "conv layer {} out of range",
                layers.start
            )));
        };
        let per = first.in_channels * h * w;
        if per == 0 || !features.len().is_multiple_of(per) || layers.end > self.convs.len() {
            return Err(Error::Inference(format!(
                "feature map of {} values does not fit layers {:?}",
                features.len(),
                layers
            )));
        }
        let n = features.len() / per;
        let mut ch = first.in_channels;
        let mut x = nchw_to_cnhw(features, n, ch, h * w);
        for conv in &self.convs[layers] {
            let (y, _) = conv_forward(conv, &x, n, h, w, false);
            x = y;
            if conv.pool {
                h /= 2;
                w /= 2;
            }
            ch = conv.out_channels;
        }
        Ok((nchw_to_cnhw(&x, ch, n, h * w), (h, w)))
    }

    fn run(&self, batch: &[f32], keep: bool) -> Result<ForwardCache> {
        let n = self.check_batch(batch)?;
        let classes = self.num_classes();
        let mut cache = ForwardCache {
            batch: n,
            convs: Vec::new(),
            dense: Vec::new(),
            last_hw: (self.input.height, self.input.width),
            logits: Vec::new(),
        };
        if n == 0 {
            return Ok(cache);
        }
        let mut x = nchw_to_cnhw(
            batch,
            n,
            self.input.channels,
            self.input.height * self.input.width,
        );
        let (mut h, mut w) = (self.input.height, self.input.width);
        let mut ch = self.input.channels;
        for conv in &self.convs {
            let (y, c) = conv_forward(conv, &x, n, h, w, keep);
            if let Some(c) = c {
                cache.convs.push(c);
            }
            x = y;
            if conv.pool {
                h /= 2;
                w /= 2;
            }
            ch = conv.out_channels;
        }
        cache.last_hw = (h, w);
        // [C, N, HW] -> [N, C·HW]
        let mut feat = nchw_to_cnhw(&x, ch, n, h * w);
        for d in &self.dense {
            let mut y = vec![0.0f32; n * d.out_features];
            for row in y.chunks_mut(d.out_features) {
                row.copy_from_slice(&d.bias);
            }
            gemm(
                n,
                d.in_features,
                d.out_features,
                &feat,
                (d.in_features, 1),
                &d.weight,
                (1, d.in_features),
                1.0,
                &mut y,
                (d.out_features, 1),
            );
            if d.relu {
                relu_inplace(&mut y);
            }
            if keep {
                cache.dense.push(DenseCache {
                    input: feat,
                    act: y.clone(),
                });
            }
            feat = y;
        }
        debug_assert_eq!(feat.len(), n * classes);
        cache.logits = feat;
        Ok(cache)
    }

    /// Backpropagate `dlogits` through the cached pass. Gradients are only
    /// computed for conv layers with index `>= first_conv`; earlier conv
    /// layers receive zero gradients.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f32], first_conv: usize) -> Grads {
        let n = cache.batch;
        let mut grads = self.zero_grads();
        if n == 0 {
            return grads;
        }
        let nconv = self.convs.len();
        let mut delta = dlogits.to_vec();
        for (j, d) in self.dense.iter().enumerate().rev() {
            let dc = &cache.dense[j];
            if d.relu {
                for (g, a) in delta.iter_mut().zip(&dc.act) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let gi = 2 * (nconv + j);
            // dW[out, in] = δᵀ[out, N] · X[N, in]
            gemm(
                d.out_features,
                n,
                d.in_features,
                &delta,
                (1, d.out_features),
                &dc.input,
                (d.in_features, 1),
                0.0,
                &mut grads[gi],
                (d.in_features, 1),
            );
            for row in delta.chunks(d.out_features) {
                for (b, g) in grads[gi + 1].iter_mut().zip(row) {
                    *b += *g;
                }
            }
            if j == 0 && first_conv >= nconv {
                return grads;
            }
            let mut dx = vec![0.0f32; n * d.in_features];
            gemm(
                n,
                d.out_features,
                d.in_features,
                &delta,
                (d.out_features, 1),
                &d.weight,
                (d.in_features, 1),
                0.0,
                &mut dx,
                (d.in_features, 1),
            );
            delta = dx;
        }
        if nconv == 0 {
            return grads;
        }
        let sizes = self.spatial_sizes();
        let (lh, lw) = cache.last_hw;
        // [N, C·HW] -> [C, N, HW]
        let mut delta = nchw_to_cnhw(&delta, n, self.convs[nconv - 1].out_channels, lh * lw);
        for l in (first_conv..nconv).rev() {
            let conv = &self.convs[l];
            let cc = &cache.convs[l];
            let (h, w) = (cc.h, cc.w);
            let m = n * h * w;
            // undo pooling
            let mut dz = if conv.pool {
                let mut full = vec![0.0f32; conv.out_channels * m];
                for (g, &ix) in delta.iter().zip(&cc.pool_idx) {
                    full[ix as usize] += *g;
                }
                full
            } else {
                delta
            };
            if conv.relu {
                for (g, a) in dz.iter_mut().zip(&cc.act) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let kk = conv.fan_in();
            gemm(
                conv.out_channels,
                m,
                kk,
                &dz,
                (m, 1),
                &cc.cols,
                (1, m),
                0.0,
                &mut grads[2 * l],
                (kk, 1),
            );
            for (o, b) in grads[2 * l + 1].iter_mut().enumerate() {
                *b = dz[o * m..(o + 1) * m].iter().sum();
            }
            if l == first_conv {
                break;
            }
            let mut dcols = vec![0.0f32; kk * m];
            gemm(
                kk,
                conv.out_channels,
                m,
                &conv.weight,
                (1, kk),
                &dz,
                (m, 1),
                0.0,
                &mut dcols,
                (m, 1),
            );
            dz.clear();
            delta = col2im(&dcols, conv.in_channels, n, h, w, conv.kernel);
            debug_assert_eq!(if l > 0 { sizes[l - 1] } else { (h, w) }, (h, w));
        }
        grads
    }
}

fn conv_forward(
    conv: &Conv2d,
    x: &[f32],
    n: usize,
    h: usize,
    w: usize,
    keep: bool,
) -> (Vec<f32>, Option<ConvCache>) {
    let m = n * h * w;
    let cols = im2col(x, conv.in_channels, n, h, w, conv.kernel);
    let mut z = vec![0.0f32; conv.out_channels * m];
    for (o, row) in z.chunks_mut(m).enumerate() {
        row.fill(conv.bias[o]);
    }
    let kk = conv.fan_in();
    gemm(
        conv.out_channels,
        kk,
        m,
        &conv.weight,
        (kk, 1),
        &cols,
        (m, 1),
        1.0,
        &mut z,
        (m, 1),
    );
    if conv.relu {
        relu_inplace(&mut z);
    }
    let (out, pool_idx) = if conv.pool {
        let (o, idx) = maxpool2(&z, conv.out_channels * n, h, w);
        (Some(o), idx)
    } else {
        (None, Vec::new())
    };
    let cache = keep.then(|| ConvCache {
        cols,
        act: z.clone(),
        pool_idx,
        h,
        w,
    });
    (out.unwrap_or(z), cache)
}

/// Swap the two leading axes of an `[a, b, inner]` tensor.
pub(crate) fn nchw_to_cnhw(x: &[f32], a: usize, b: usize, inner: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for i in 0..a {
        for j in 0..b {
            let src = &x[(i * b + j) * inner..(i * b + j + 1) * inner];
            out[(j * a + i) * inner..(j * a + i + 1) * inner].copy_from_slice(src);
        }
    }
    out
}
