//! Diagonal Fisher information and the quadratic retain penalty.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_cross_entropy, ConvNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FisherConfig {
    /// Number of per-sample gradients averaged (η).
    pub samples: usize,
    /// Draw inputs with replacement, so `samples` may exceed the data size.
    pub with_replacement: bool,
    /// Use the observed labels instead of labels sampled from the model.
    pub empirical: bool,
}

impl Default for FisherConfig {
    fn default() -> Self {
        FisherConfig {
            samples: 128,
            with_replacement: true,
            empirical: false,
        }
    }
}

/// Diagonal Fisher over the parameter tensors `tensors` of a network (index
/// into [`ConvNet::params`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiag {
    pub tensors: Range<usize>,
    pub values: Vec<Vec<f32>>,
}

impl FisherDiag {
    pub fn zeros(net: &ConvNet, tensors: Range<usize>) -> Self {
        let params = net.params();
        FisherDiag {
            values: params[tensors.clone()]
                .iter()
                .map(|p| vec![0.0; p.len()])
                .collect(),
            tensors,
        }
    }

    pub fn len(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        self.values.iter().flatten().map(|&v| v as f64).sum::<f64>() / n as f64
    }
}

/// Tensor range covering conv layers `layers` (weights and biases).
pub fn conv_tensors(layers: Range<usize>) -> Range<usize> {
    2 * layers.start..2 * layers.end
}

/// Monte-Carlo diagonal Fisher: the mean over `cfg.samples` single-input
/// passes of the squared log-likelihood gradient. Labels come from the
/// model's own predictive distribution unless `cfg.empirical` is set.
///
/// `inputs` holds `n` samples of `sample_len` values each; `labels` is only
/// read in empirical mode.
pub fn estimate_fisher<R: Rng + ?Sized>(
    net: &ConvNet,
    inputs: &[f32],
    labels: &[usize],
    tensors: Range<usize>,
    cfg: &FisherConfig,
    rng: &mut R,
) -> Result<FisherDiag> {
    let sample_len = net.input.len();
    if sample_len == 0 || !inputs.len().is_multiple_of(sample_len) {
        return Err(Error::Data(format!(
            "Fisher inputs of length {} are not a whole number of {}-value samples",
            inputs.len(),
            sample_len
        )));
    }
    let n = inputs.len() / sample_len;
    if n == 0 {
        return Err(Error::Sampling(
            "Fisher estimation needs at least one input".into(),
        ));
    }
    if cfg.samples == 0 {
        return Err(Error::Config("Fisher sample count must be positive".into()));
    }
    if !cfg.with_replacement && cfg.samples > n {
        return Err(Error::Sampling(format!(
            "{} Fisher samples requested without replacement from {} inputs",
            cfg.samples, n
        )));
    }
    if cfg.empirical && labels.len() != n {
        return Err(Error::Data(format!(
            "{} labels for {} Fisher inputs",
            labels.len(),
            n
        )));
    }
    let total = net.params().len();
    if tensors.end > total || tensors.start >= tensors.end {
        return Err(Error::Config(format!(
            "tensor range {tensors:?} invalid for {total} tensors"
        )));
    }
    let first_conv = (tensors.start / 2).min(net.convs.len());
    let classes = net.num_classes();

    let order: Vec<usize> = if cfg.with_replacement {
        (0..cfg.samples).map(|_| rng.random_range(0..n)).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..cfg.samples {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(cfg.samples);
        idx
    };

    let mut fisher = FisherDiag::zeros(net, tensors.clone());
    for &i in &order {
        let x = &inputs[i * sample_len..(i + 1) * sample_len];
        let cache = net.forward_train(x)?;
        if cache.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "non-finite logits during Fisher estimation".into(),
            ));
        }
        let y = if cfg.empirical {
            labels[i]
        } else {
            let p = softmax(&cache.logits);
            let u: f32 = rng.random();
            let mut acc = 0.0;
            let mut pick = classes - 1;
            for (c, pc) in p.iter().enumerate() {
                acc += pc;
                if u < acc {
                    pick = c;
                    break;
                }
            }
            pick
        };
        let (_, dlogits) = softmax_cross_entropy(&cache.logits, &[y], classes);
        let grads = net.backward(&cache, &dlogits, first_conv);
        for (f, g) in fisher.values.iter_mut().zip(&grads[tensors.clone()]) {
            for (fi, gi) in f.iter_mut().zip(g) {
                *fi += gi * gi;
            }
        }
    }
    let scale = 1.0 / order.len() as f32;
    for v in fisher.values.iter_mut().flatten() {
        *v *= scale;
    }
    Ok(fisher)
}

/// `Σ ½·F·(θ − θ*)²` over the tensors covered by `fisher`.
pub fn retain_loss(params: &[&[f32]], anchors: &[Vec<f32>], fisher: &FisherDiag) -> f64 {
    let mut total = 0.0f64;
    for ((p, a), f) in params[fisher.tensors.clone()]
        .iter()
        .zip(anchors)
        .zip(&fisher.values)
    {
        for ((pi, ai), fi) in p.iter().zip(a).zip(f) {
            let d = (pi - ai) as f64;
            total += 0.5 * *fi as f64 * d * d;
        }
    }
    total
}

/// Add `scale · ∂retain/∂θ = scale · F·(θ − θ*)` into `grads`.
pub fn add_retain_grad(
    grads: &mut [Vec<f32>],
    params: &[&[f32]],
    anchors: &[Vec<f32>],
    fisher: &FisherDiag,
    scale: f32,
) {
    let r = fisher.tensors.clone();
    for (((g, p), a), f) in grads[r.clone()]
        .iter_mut()
        .zip(&params[r])
        .zip(anchors)
        .zip(&fisher.values)
    {
        for (((gi, pi), ai), fi) in g.iter_mut().zip(p.iter()).zip(a).zip(f) {
            *gi += scale * fi * (pi - ai);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, ImageShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two-logit linear model on `d` features: a logistic regression.
    fn logistic(d: usize, rng: &mut ChaCha8Rng) -> ConvNet {
        let mut dense = Dense::new(d, 2, false, rng);
        for w in &mut dense.weight {
            *w *= 2.0;
        }
        let net = ConvNet {
            input: ImageShape::new(d, 1, 1),
            convs: vec![],
            dense: vec![dense],
        };
        net.validate().unwrap();
        net
    }

    #[test]
    fn monte_carlo_fisher_matches_logistic_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let net = logistic(d, &mut rng);
        let n = 20;
        let xs: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        // closed form: F[c, j] = mean_x p_c (1 - p_c) x_j², F_bias[c] = mean_x p_c (1 - p_c)
        let mut fw = vec![0.0f64; 2 * d];
        let mut fb = vec![0.0f64; 2];
        for x in xs.chunks(d) {
            let p = softmax(&net.forward(x).unwrap());
            for c in 0..2 {
                let v = (p[c] * (1.0 - p[c])) as f64;
                fb[c] += v / n as f64;
                for j in 0..d {
                    fw[c * d + j] += v * (x[j] * x[j]) as f64 / n as f64;
                }
            }
        }
        let cfg = FisherConfig {
            samples: 10_000,
            ..Default::default()
        };
        let est = estimate_fisher(&net, &xs, &[], 0..2, &cfg, &mut rng).unwrap();
        for (e, a) in est.values[0]
            .iter()
            .zip(&fw)
            .chain(est.values[1].iter().zip(&fb))
        {
            let rel = ((*e as f64) - a).abs() / a;
            assert!(rel < 0.05, "estimate {e} vs closed form {a} (rel {rel})");
        }
    }

    #[test]
    fn fisher_is_non_negative_and_validates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = logistic(2, &mut rng);
        let xs = [0.3f32, -0.7, 1.0, 0.2];
        let f =
            estimate_fisher(&net, &xs, &[0, 1], 0..2, &FisherConfig::default(), &mut rng).unwrap();
        assert!(f.values.iter().flatten().all(|v| *v >= 0.0));
        let emp = FisherConfig {
            empirical: true,
            ..Default::default()
        };
        assert!(estimate_fisher(&net, &xs, &[0, 1], 0..2, &emp, &mut rng).is_ok());
        assert!(estimate_fisher(&net, &xs, &[0], 0..2, &emp, &mut rng).is_err());
        let no_rep = FisherConfig {
            with_replacement: false,
            ..Default::default()
        };
        assert!(matches!(
            estimate_fisher(&net, &xs, &[], 0..2, &no_rep, &mut rng),
            Err(Error::Sampling(_))
        ));
        assert!(estimate_fisher(&net, &[], &[], 0..2, &FisherConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn retain_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = logistic(4, &mut rng);
        let anchors: Vec<Vec<f32>> = net.params().iter().map(|p| p.to_vec()).collect();
        let fisher = FisherDiag {
            tensors: 0..2,
            values: anchors
                .iter()
                .map(|a| a.iter().map(|_| rng.random_range(0.1..3.0)).collect())
                .collect(),
        };
        let params = net.params();
        assert_eq!(retain_loss(&params, &anchors, &fisher), 0.0);

        let moved: Vec<Vec<f32>> = anchors
            .iter()
            .map(|a| a.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect())
            .collect();
        let view: Vec<&[f32]> = moved.iter().map(|v| v.as_slice()).collect();
        let mut grads: Vec<Vec<f32>> = moved.iter().map(|v| vec![0.0; v.len()]).collect();
        add_retain_grad(&mut grads, &view, &anchors, &fisher, 1.0);
        let h = 1e-3f32;
        for t in 0..2 {
            for i in 0..moved[t].len() {
                let mut plus = moved.clone();
                plus[t][i] += h;
                let mut minus = moved.clone();
                minus[t][i] -= h;
                let vp: Vec<&[f32]> = plus.iter().map(|v| v.as_slice()).collect();
                let vm: Vec<&[f32]> = minus.iter().map(|v| v.as_slice()).collect();
                let fd = (retain_loss(&vp, &anchors, &fisher)
                    - retain_loss(&vm, &anchors, &fisher))
                    / (plus[t][i] as f64 - minus[t][i] as f64);
                let an = grads[t][i] as f64;
                let rel = (fd - an).abs() / an.abs().max(1e-8);
                assert!(
                    rel <= 1e-4 || (fd - an).abs() < 1e-7,
                    "tensor {t} idx {i}: fd {fd} vs {an}"
                );
            }
        }
    }
}
