use serde::{Deserialize, Serialize};

use super::{ClassId, SampleRef};
use crate::error::{Error, Result};
use crate::nn::ImageShape;

/// Anything that can serve normalized image tensors by `(class, index)`.
///
/// Implementations must be deterministic: the same reference always yields
/// the same pixels.
pub trait ImageSource: Send + Sync {
    /// Shape of every served sample (`[C, H, W]`).
    fn shape(&self) -> ImageShape;

    /// All class ids present, ascending.
    fn label_space(&self) -> Vec<ClassId>;

    /// Number of samples available for `class`.
    fn class_len(&self, class: ClassId) -> usize;

    /// Raw pixels in `[0, 1]`, `[C, H, W]` layout, before normalization.
    fn raw(&self, sample: SampleRef) -> Result<Vec<f32>>;

    fn name(&self) -> &str {
        "images"
    }
}

/// Per-channel affine normalization applied to raw `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: vec![0.5; 3],
            std: vec![0.25; 3],
        }
    }
}

impl Normalization {
    pub fn apply(&self, pixels: &mut [f32], shape: ImageShape) {
        let plane = shape.height * shape.width;
        for c in 0..shape.channels {
            let m = self.mean.get(c).copied().unwrap_or(0.0);
            let s = self.std.get(c).copied().unwrap_or(1.0);
            for v in &mut pixels[c * plane..(c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
    }
}

/// A normalized view over an [`ImageSource`] that assembles batches.
pub struct Loader<'a> {
    pub source: &'a dyn ImageSource,
    pub norm: &'a Normalization,
}

impl<'a> Loader<'a> {
    pub fn new(source: &'a dyn ImageSource, norm: &'a Normalization) -> Self {
        Loader { source, norm }
    }

    pub fn shape(&self) -> ImageShape {
        self.source.shape()
    }

    pub fn load(&self, sample: SampleRef) -> Result<Vec<f32>> {
        let shape = self.source.shape();
        let mut px = self.source.raw(sample)?;
        if px.len() != shape.len() {
            return Err(Error::Data(format!(
                "sample {:?} has {} values, expected {}",
                sample,
                px.len(),
                shape.len()
            )));
        }
        self.norm.apply(&mut px, shape);
        Ok(px)
    }

    /// Concatenate samples into one `[N, C, H, W]` buffer.
    pub fn batch(&self, samples: &[SampleRef]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(samples.len() * self.source.shape().len());
        for &s in samples {
            out.extend(self.load(s)?);
        }
        Ok(out)
    }
}

/// Eagerly materialized, normalized samples; used when the same small set is
/// read many times (episodes, replay buffers).
#[derive(Debug, Clone, Default)]
pub struct TensorCache {
    pub refs: Vec<SampleRef>,
    pub pixels: Vec<f32>,
    pub sample_len: usize,
}

impl TensorCache {
    pub fn build(loader: &Loader<'_>, refs: &[SampleRef]) -> Result<Self> {
        Ok(TensorCache {
            refs: refs.to_vec(),
            pixels: loader.batch(refs)?,
            sample_len: loader.shape().len(),
        })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.pixels[i * self.sample_len..(i + 1) * self.sample_len]
    }

    /// Gather the given rows into a contiguous batch.
    pub fn gather(&self, rows: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(rows.len() * self.sample_len);
        for &r in rows {
            out.extend_from_slice(self.sample(r));
        }
        out
    }
}
