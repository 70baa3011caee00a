use crate::diffcore::{Matrix, Parameters};
use crate::error::{Error, Result};

/// Moment accumulators, one pair per parameter array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One decoupled-weight-decay Adam update over every array of `params`,
/// visited in [`Parameters`] order.
pub fn adamw_step(
    params: &mut impl Parameters,
    grads: &[Matrix],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    let mut shapes = Vec::new();
    params.visit("", &mut |_, m| shapes.push(m.dim()));
    if grads.len() != shapes.len() || grads.iter().zip(&shapes).any(|(g, s)| g.dim() != *s) {
        return Err(Error::Usage(format!(
            "optimizer: {} gradients for {} parameter arrays, or shapes differ",
            grads.len(),
            shapes.len()
        )));
    }
    if state.step == 0 && state.first.is_empty() {
        state.first = shapes.iter().map(|&s| Matrix::zeros(s)).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != shapes.len() || state.first.iter().zip(&shapes).any(|(m, s)| m.dim() != *s) {
        return Err(Error::Usage("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut k = 0;
    params.visit_mut(&mut |theta| {
        let (m, v, g) = (&mut state.first[k], &mut state.second[k], &grads[k]);
        ndarray::Zip::from(theta)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
            });
        k += 1;
    });
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
    }
    norm
}

/// Learning-rate reduction when validation loss stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
