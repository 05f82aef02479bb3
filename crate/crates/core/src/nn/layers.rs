use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A same-padded, stride-1 convolution block: conv → optional ReLU →
/// optional 2×2 max pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub relu: bool,
    pub pool: bool,
    /// `[out_channels, in_channels, kernel, kernel]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        relu: bool,
        pool: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = he_normal(out_channels * fan_in, fan_in, rng);
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            relu,
            pool,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Weight and bias flattened in that order.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut v = self.weight.clone();
        v.extend_from_slice(&self.bias);
        v
    }
}

/// Fully connected layer `y = W x + b` with optional ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub relu: bool,
    /// `[out_features, in_features]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        let weight = if relu {
            he_normal(in_features * out_features, in_features, rng)
        } else {
            // Glorot-style scale for the linear output layer.
            let std = (1.0 / in_features.max(1) as f32).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..in_features * out_features)
                .map(|_| normal.sample(rng))
                .collect()
        };
        Dense {
            in_features,
            out_features,
            relu,
            weight,
            bias: vec![0.0; out_features],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

fn he_normal<R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<f32> {
    let std = (2.0 / fan_in.max(1) as f32).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng)).collect()
}
