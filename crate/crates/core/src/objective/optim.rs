use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AdamW => "adamw",
            Self::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adamw" => Some(Self::AdamW),
            "sgd" => Some(Self::Sgd),
            _ => None,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer state over a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let v = if kind == OptimizerKind::AdamW {
            zeros()
        } else {
            Vec::new()
        };
        Self {
            kind,
            weight_decay,
            m: zeros(),
            v,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. AdamW decays weights decoupled from the moments;
    /// SGD uses momentum-free `p ← p − η(g + λp)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter and gradient counts differ"
        );
        self.steps += 1;
        let t = self.steps as i32;
        let wd = self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let p = p.data_mut();
            assert_eq!(p.len(), g.len(), "gradient length mismatch");
            match self.kind {
                OptimizerKind::AdamW => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.len() {
                        p[j] -= lr * wd * p[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::Sgd => {
                    for j in 0..p.len() {
                        p[j] -= lr * (g[j] + wd * p[j]);
                    }
                }
            }
        }
    }
}

/// `η_t = η₀ · ½(1 + cos(π t / T))`; `t` counts completed steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + libm::cos(std::f64::consts::PI * step as f64 / total as f64))
}
