//! Training loss, evaluation metrics and embedding projection.

mod pca;

pub use pca::{pca2, symmetric_eigen, Pca2};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossRegion {
    /// Only the rolled-out steps `n+1..t_EOD`.
    #[default]
    PredictedOnly,
    /// Steps `1..t_EOD`; the measured prefix has zero error but carries
    /// schedule weight.
    FullSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub huber_beta: f64,
    pub w_start: f64,
    pub w_end: f64,
    pub w_last_bonus: f64,
    pub region: LossRegion,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            huber_beta: 0.1,
            w_start: 10.0,
            w_end: 1.0,
            w_last_bonus: 30.0,
            region: LossRegion::PredictedOnly,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_beta > 0.0) {
            return Err(Error::validation("loss.huber_beta", "must be positive"));
        }
        if !(self.w_end > 0.0 && self.w_start >= self.w_end) {
            return Err(Error::validation("loss.w_start", "need w_start >= w_end > 0"));
        }
        if !(self.w_last_bonus >= 0.0) {
            return Err(Error::validation("loss.w_last_bonus", "must be non-negative"));
        }
        Ok(())
    }
}

/// Huber loss of one residual.
pub fn huber(pred: f64, truth: f64, beta: f64) -> f64 {
    let d = (truth - pred).abs();
    if d < beta {
        d * d / (2.0 * beta)
    } else {
        d - 0.5 * beta
    }
}

/// Per-step weights: a linear ramp from `w_start` to `w_end`, a bonus on the
/// final step, all halved. A single step gets `(w_start + bonus) / 2`.
pub fn weight_schedule(t_eod: usize, cfg: &LossConfig) -> Vec<f64> {
    match t_eod {
        0 => Vec::new(),
        1 => vec![0.5 * (cfg.w_start + cfg.w_last_bonus)],
        _ => (0..t_eod)
            .map(|i| {
                let ramp = cfg.w_start - (cfg.w_start - cfg.w_end) * i as f64 / (t_eod - 1) as f64;
                let bonus = if i + 1 == t_eod { cfg.w_last_bonus } else { 0.0 };
                0.5 * (ramp + bonus)
            })
            .collect(),
    }
}

/// Length of the valid prefix of a mask row (index of the last 1, plus one).
fn valid_len<'a>(mask: impl IntoIterator<Item = &'a f64>) -> usize {
    mask.into_iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(i, _)| i + 1)
        .last()
        .unwrap_or(0)
}

/// Weight matrix `a ⊙ w` for a `B×L` mask over predicted steps. In
/// full-sequence mode each row's schedule spans `prefix + valid` steps and
/// the prefix share is returned separately, since those entries have zero
/// error but still enter the normalizer.
pub fn loss_weights(mask: &Matrix, prefix: usize, cfg: &LossConfig) -> (Matrix, f64) {
    let (rows, cols) = mask.dim();
    let mut w = Array2::zeros((rows, cols));
    let mut prefix_mass = 0.0;
    for (r, mrow) in mask.rows().into_iter().enumerate() {
        let valid = valid_len(mrow.iter());
        if valid == 0 {
            continue;
        }
        let offset = match cfg.region {
            LossRegion::PredictedOnly => 0,
            LossRegion::FullSequence => prefix,
        };
        let sched = weight_schedule(offset + valid, cfg);
        prefix_mass += sched[..offset].iter().sum::<f64>();
        for c in 0..valid {
            w[[r, c]] = mrow[c] * sched[offset + c];
        }
    }
    (w, prefix_mass)
}

/// Masked, schedule-weighted Huber loss over a padded `B×L` prediction,
/// normalized by the pooled weight mass of the batch.
pub fn weighted_loss_batch<'t>(
    pred: Var<'t>,
    truth: &Matrix,
    mask: &Matrix,
    prefix: usize,
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    if pred.shape() != truth.dim() || mask.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "loss: prediction {:?}, target {:?}, mask {:?}",
            pred.shape(),
            truth.dim(),
            mask.dim()
        )));
    }
    let (w, prefix_mass) = loss_weights(mask, prefix, cfg);
    let total = w.sum() + prefix_mass;
    if !(total > 0.0) {
        return Err(Error::Input("loss mask selects no entries".into()));
    }
    let tape = pred.tape();
    let per_step = pred.huber(truth, cfg.huber_beta)?;
    Ok(per_step.try_mul(tape.leaf(w))?.sum().scale(1.0 / total))
}

/// Plain-value counterpart of [`weighted_loss_batch`] for one sequence.
pub fn weighted_loss(pred: &[f64], truth: &[f64], mask: &[f64], cfg: &LossConfig) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "loss: lengths {} / {} / {}",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    let sched = weight_schedule(valid_len(mask.iter()), cfg);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, w) in sched.iter().enumerate() {
        let aw = mask[i] * w;
        num += aw * huber(pred[i], truth[i], cfg.huber_beta);
        den += aw;
    }
    if !(den > 0.0) {
        return Err(Error::Input("loss mask selects no entries".into()));
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Mean absolute percentage error, already multiplied by 100.
    pub mape: f64,
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Input(format!(
            "metrics need equal nonzero lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    if truth.iter().any(|&t| t == 0.0) {
        return Err(Error::Domain("MAPE undefined for a zero target".into()));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae, mut pe) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        let d = (t - p).abs();
        se += d * d;
        ae += d;
        pe += d / t.abs();
    }
    Ok(Metrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        mape: 100.0 * pe / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn huber_examples() {
        assert_eq!(huber(1.0, 1.0, 0.1), 0.0);
        assert_abs_diff_eq!(huber(3.05, 3.0, 0.1), 0.0125, epsilon = 1e-15);
        assert_abs_diff_eq!(huber(3.3, 3.0, 0.1), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn schedule_examples() {
        let cfg = LossConfig::default();
        assert_eq!(weight_schedule(4, &cfg), vec![5.0, 3.5, 2.0, 15.5]);
        assert_eq!(weight_schedule(2, &cfg), vec![5.0, 15.5]);
        assert_eq!(weight_schedule(1, &cfg), vec![20.0]);
    }

    #[test]
    fn loss_examples() {
        let cfg = LossConfig::default();
        let truth = [3.0, 3.0, 3.0, 3.0];
        assert_eq!(weighted_loss(&truth, &truth, &[1.0; 4], &cfg).unwrap(), 0.0);
        let one = weighted_loss(&[3.2, 0.0], &[3.0, 0.0], &[1.0, 0.0], &cfg).unwrap();
        assert_abs_diff_eq!(one, huber(3.2, 3.0, 0.1), epsilon = 1e-15);
        let pred = [3.05, 3.0, 3.0, 3.05];
        let l = weighted_loss(&pred, &truth, &[1.0; 4], &cfg).unwrap();
        assert_abs_diff_eq!(l, 0.25625 / 26.0, epsilon = 1e-15);
        assert!(matches!(weighted_loss(&pred, &truth, &[0.0; 4], &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn batch_loss_matches_sequence_loss() {
        let cfg = LossConfig::default();
        let tape = Tape::new();
        let pred = tape.leaf(array![[3.05, 3.0, 3.0, 3.05]]);
        let l = weighted_loss_batch(pred, &array![[3.0; 4]], &array![[1.0; 4]], 0, &cfg).unwrap();
        assert_abs_diff_eq!(l.item(), 0.25625 / 26.0, epsilon = 1e-15);
    }

    #[test]
    fn full_sequence_region_dilutes_with_prefix() {
        let cfg = LossConfig { region: LossRegion::FullSequence, ..LossConfig::default() };
        let tape = Tape::new();
        let pred = tape.leaf(array![[3.05, 3.05]]);
        let l = weighted_loss_batch(pred, &array![[3.0, 3.0]], &array![[1.0, 1.0]], 2, &cfg).unwrap();
        // Schedule over four steps; the two measured ones have zero error.
        assert_abs_diff_eq!(l.item(), (2.0 + 15.5) * 0.0125 / 26.0, epsilon = 1e-15);
    }

    #[test]
    fn metrics_examples() {
        let m = metrics(&[3.0, 3.0], &[3.0, 3.0]).unwrap();
        assert_eq!((m.rmse, m.mae, m.mape), (0.0, 0.0, 0.0));
        let m = metrics(&[3.1, 2.9], &[3.0, 3.0]).unwrap();
        assert_abs_diff_eq!(m.rmse, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mae, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mape, 100.0 * 0.1 / 3.0, epsilon = 1e-10);
        assert!(matches!(metrics(&[1.0], &[0.0]), Err(Error::Domain(_))));
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let truth = array![[3.0, 3.1, 2.9, 3.3], [3.0, 3.2, 0.0, 0.0]];
        let mask = array![[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0]];
        let p0 = array![[3.02, 3.4, 2.95, 3.1], [2.7, 3.25, 0.0, 0.0]];
        let tape = Tape::new();
        let pred = tape.leaf(p0.clone());
        let loss = weighted_loss_batch(pred, &truth, &mask, 0, &cfg).unwrap();
        let grad = tape.backward(loss).unwrap().get_or_zeros(pred);
        let eval = |p: &Matrix| {
            let t = Tape::new();
            weighted_loss_batch(t.leaf(p.clone()), &truth, &mask, 0, &cfg).unwrap().item()
        };
        let h = 1e-6;
        for ((r, c), &g) in grad.indexed_iter() {
            let mut up = p0.clone();
            up[[r, c]] += h;
            let mut dn = p0.clone();
            dn[[r, c]] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-6), "({r},{c}) {fd} vs {g}");
        }
    }

    proptest! {
        #[test]
        fn huber_smooth_at_threshold(beta in 1e-3f64..1.0, sign in prop::bool::ANY) {
            let s = if sign { 1.0 } else { -1.0 };
            let eps = beta * 1e-9;
            let inner = huber(s * (beta - eps), 0.0, beta);
            let outer = huber(s * (beta + eps), 0.0, beta);
            prop_assert!((inner - beta / 2.0).abs() < 1e-8);
            prop_assert!((outer - beta / 2.0).abs() < 1e-8);
            let slope_in = (beta - eps) / beta;
            prop_assert!((slope_in - 1.0).abs() < 1e-8);
        }

        #[test]
        fn padding_never_changes_loss(
            len in 1usize..20,
            pad in 0usize..10,
            seed in any::<u64>(),
        ) {
            use rand::Rng as _;
            let mut rng = crate::rng::seeded(seed);
            let truth: Vec<f64> = (0..len).map(|_| rng.gen_range(3.0..4.0)).collect();
            let pred: Vec<f64> = truth.iter().map(|t| t + rng.gen_range(-0.3..0.3)).collect();
            let cfg = LossConfig::default();
            let base = weighted_loss(&pred, &truth, &vec![1.0; len], &cfg).unwrap();
            let mut p2 = pred.clone();
            let mut t2 = truth.clone();
            let mut m2 = vec![1.0; len];
            for _ in 0..pad {
                p2.push(rng.gen_range(-5.0..5.0));
                t2.push(0.0);
                m2.push(0.0);
            }
            prop_assert_eq!(weighted_loss(&p2, &t2, &m2, &cfg).unwrap(), base);
        }

        #[test]
        fn schedule_positive_and_decreasing(t in 1usize..500) {
            let w = weight_schedule(t, &LossConfig::default());
            prop_assert_eq!(w.len(), t);
            prop_assert!(w.iter().all(|&x| x > 0.0));
            if t >= 3 {
                prop_assert!(w[..t - 1].windows(2).all(|p| p[0] > p[1]));
            }
        }

        #[test]
        fn rmse_bounds_mae(v in prop::collection::vec((2.0f64..4.0, -1.0f64..1.0), 1..50)) {
            let truth: Vec<f64> = v.iter().map(|p| p.0).collect();
            let pred: Vec<f64> = v.iter().map(|p| p.0 + p.1).collect();
            let m = metrics(&pred, &truth).unwrap();
            prop_assert!(m.rmse + 1e-12 >= m.mae);
        }
    }
}
