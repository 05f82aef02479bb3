use serde::{Deserialize, Serialize};

/// Which update rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Stateful first-order optimizer over a list of parameter buffers.
///
/// State is sized lazily on the first step and reset whenever the buffer
/// layout changes (e.g. after a network expansion).
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f32,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_state(&mut self, params: &[&mut [f32]]) {
        let same = self.m.len() == params.len()
            && self.m.iter().zip(params).all(|(m, p)| m.len() == p.len());
        if !same {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = match self.kind {
                OptimizerKind::Adam { .. } => params.iter().map(|p| vec![0.0; p.len()]).collect(),
                OptimizerKind::Sgd { .. } => Vec::new(),
            };
            self.step = 0;
        }
    }

    pub fn step(&mut self, mut params: Vec<&mut [f32]>, grads: &[Vec<f32>]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient count mismatch"
        );
        self.ensure_state(&params);
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for ((pi, gi), mi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gi;
                        *pi -= lr * *mi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let step_size = lr / bc1;
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for (((pi, gi), mi), vi) in
                        p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *pi -= step_size * *mi / ((*vi / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
