//! Optimization loop, evaluation and run averaging.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_FORMAT};
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, OptimizerState, PlateauScheduler};

use std::io::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch_refs, Batch, CycleRecord};
use crate::decoder::{truncate_at_cutoff, BatteryConfig, PredictionResult, RolloutMode};
use crate::diffcore::{Matrix, Tape};
use crate::encoder::HrmConfig;
use crate::error::{Error, Result};
use crate::model::SeqBattNet;
use crate::objective::{loss_weights, metrics, weighted_loss_batch, LossConfig, Metrics};
use crate::rng::{derive, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub num_runs: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 128,
            lr_init: 2e-3,
            lr_factor: 0.8,
            lr_patience: 5,
            lr_min: 1e-4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            num_runs: 5,
            seed: 0,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, path: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(path, msg))
            }
        };
        check(self.epochs >= 1, "train.epochs", "must be at least 1")?;
        check(self.batch_size >= 1, "train.batch_size", "must be at least 1")?;
        check(
            self.lr_min > 0.0 && self.lr_min <= self.lr_init,
            "train.lr_min",
            "need 0 < lr_min <= lr_init",
        )?;
        check(self.lr_factor > 0.0 && self.lr_factor < 1.0, "train.lr_factor", "must lie in (0, 1)")?;
        check(self.lr_patience >= 1, "train.lr_patience", "must be at least 1")?;
        check(self.weight_decay >= 0.0, "train.weight_decay", "must be non-negative")?;
        check((0.0..1.0).contains(&self.adam_beta1), "train.adam_beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.adam_beta2), "train.adam_beta2", "must lie in [0, 1)")?;
        check(self.adam_eps > 0.0, "train.adam_eps", "must be positive")?;
        check(self.num_runs >= 1, "train.num_runs", "must be at least 1")?;
        check(
            self.grad_clip.is_none_or(|c| c > 0.0),
            "train.grad_clip",
            "must be positive when set",
        )?;
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Seed of ensemble member `run`.
    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

/// Everything that configures one training job.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub hrm: HrmConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.hrm.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub fn write_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for h in history {
        out += &format!("{},{},{},{}\n", h.epoch, h.train_loss, h.val_loss, h.lr);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
}

fn batch_loss<'t>(
    model: &SeqBattNet,
    net: &crate::model::BoundNet<'t>,
    batch: &Batch,
    loss: &LossConfig,
    training: bool,
    rng: &mut crate::rng::Rng,
) -> Result<(crate::diffcore::Var<'t>, f64)> {
    let fwd = model.forward_batch(net, batch, training, rng)?;
    let pred = fwd.rollout.stacked_voltage()?;
    let prefix = model.battery.n;
    let (w, prefix_mass) = loss_weights(&batch.masks, prefix, loss);
    let value = weighted_loss_batch(pred, &batch.voltages, &batch.masks, prefix, loss)?;
    Ok((value, w.sum() + prefix_mass))
}

/// Pooled eval-mode loss over a set of cycles.
pub fn dataset_loss(
    model: &SeqBattNet,
    cycles: &[CycleRecord],
    loss: &LossConfig,
    batch_size: usize,
) -> Result<f64> {
    let refs: Vec<&CycleRecord> = cycles.iter().collect();
    let batches = make_batch_refs(&refs, model.battery.n, batch_size)?;
    let (mut num, mut den) = (0.0, 0.0);
    let mut rng = seeded(0);
    for batch in &batches {
        let tape = Tape::new();
        let net = model.bind(&tape);
        let (value, mass) = batch_loss(model, &net, batch, loss, false, &mut rng)?;
        num += value.item() * mass;
        den += mass;
    }
    if !(den > 0.0) {
        return Err(Error::Input("no cycles to evaluate".into()));
    }
    Ok(num / den)
}

/// Trains one model from `seed`. Each epoch shuffles the training cycles,
/// takes one AdamW step per batch, evaluates the validation loss, steps the
/// plateau scheduler and keeps the best weights.
pub fn train(
    train_cycles: &[CycleRecord],
    val_cycles: &[CycleRecord],
    battery: &BatteryConfig,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    battery.validate()?;
    if train_cycles.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if val_cycles.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    let tc = &cfg.train;
    let mut model = SeqBattNet::init(cfg.hrm.clone(), battery.clone(), &mut seeded(seed))?;
    let mut state = OptimizerState::default();
    let mut sched = PlateauScheduler::new(tc.lr_init, tc.lr_factor, tc.lr_patience, tc.lr_min);
    let adamw = tc.adamw();
    let mut order: Vec<&CycleRecord> = train_cycles.iter().collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=tc.epochs {
        let mut rng = derive(seed, epoch as u64);
        order.shuffle(&mut rng);
        let batches = make_batch_refs(&order, battery.n, tc.batch_size)?;
        let lr = sched.lr;
        let (mut num, mut den) = (0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let tape = Tape::new();
            let net = model.bind(&tape);
            let (value, mass) = batch_loss(&model, &net, batch, &cfg.loss, true, &mut rng)?;
            let l = value.item();
            if !l.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1, loss: l });
            }
            let grads = tape.backward(value)?;
            let mut g: Vec<Matrix> = net.leaves.iter().map(|&v| grads.get_or_zeros(v)).collect();
            if g.iter().any(|m| m.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence { epoch, batch: b + 1, loss: f64::NAN });
            }
            if let Some(max_norm) = tc.grad_clip {
                clip_global_norm(&mut g, max_norm);
            }
            adamw_step(&mut model, &g, &mut state, &adamw, lr)?;
            num += l * mass;
            den += mass;
        }
        let train_loss = num / den;
        let val_loss = dataset_loss(&model, val_cycles, &cfg.loss, tc.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0, loss: val_loss });
        }
        history.push(HistoryRow { epoch, train_loss, val_loss, lr });
        debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e} lr {lr:.3e}");
        if best.as_ref().is_none_or(|c| val_loss < c.best_val_loss) {
            best = Some(Checkpoint::capture(&model, &cfg.loss, tc, seed, epoch, val_loss));
        }
        sched.step(val_loss);
    }
    let checkpoint = best.expect("at least one epoch ran");
    info!(
        "seed {seed}: best validation loss {:.6e} at epoch {}",
        checkpoint.best_val_loss, checkpoint.epoch
    );
    Ok(TrainOutcome { checkpoint, history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_cycle: Vec<CycleMetrics>,
    /// Unweighted means over cycles.
    pub mean: Metrics,
}

fn mean_metrics(rows: &[CycleMetrics]) -> Metrics {
    let n = rows.len() as f64;
    Metrics {
        rmse: rows.iter().map(|r| r.metrics.rmse).sum::<f64>() / n,
        mae: rows.iter().map(|r| r.metrics.mae).sum::<f64>() / n,
        mape: rows.iter().map(|r| r.metrics.mape).sum::<f64>() / n,
    }
}

/// Metrics over the predicted region of each cycle, using any predictor.
pub fn evaluate_with(
    cycles: &[CycleRecord],
    n: usize,
    predict: impl Fn(&CycleRecord) -> Result<PredictionResult>,
) -> Result<EvalReport> {
    if cycles.is_empty() {
        return Err(Error::Input("no cycles to evaluate".into()));
    }
    let mut per_cycle = Vec::with_capacity(cycles.len());
    for c in cycles {
        let p = predict(c)?;
        per_cycle.push(CycleMetrics {
            cycle: c.cycle_index,
            metrics: metrics(p.predicted(), &c.voltage[n..])?,
        });
    }
    let mean = mean_metrics(&per_cycle);
    Ok(EvalReport { per_cycle, mean })
}

pub fn evaluate(model: &SeqBattNet, cycles: &[CycleRecord]) -> Result<EvalReport> {
    evaluate_with(cycles, model.battery.n, |c| model.predict(c, RolloutMode::TrainFull))
}

/// Averages the voltages (and states) predicted by several models. In stop
/// mode the averaged trajectory is cut at its first cutoff crossing.
pub fn ensemble_predict(
    models: &[SeqBattNet],
    cycle: &CycleRecord,
    mode: RolloutMode,
) -> Result<PredictionResult> {
    let first = models
        .first()
        .ok_or_else(|| Error::Usage("ensemble needs at least one model".into()))?;
    if models.iter().any(|m| m.hrm != first.hrm || m.battery != first.battery) {
        return Err(Error::Usage("ensemble members have different configurations".into()));
    }
    let runs: Vec<PredictionResult> = models
        .iter()
        .map(|m| m.predict(cycle, RolloutMode::TrainFull))
        .collect::<Result<_>>()?;
    let k = runs.len() as f64;
    let mut out = runs[0].clone();
    for i in 0..out.len() {
        out.voltage[i] = runs.iter().map(|r| r.voltage[i]).sum::<f64>() / k;
        if out.soc_traj[i].is_some() {
            out.soc_traj[i] = Some(runs.iter().map(|r| r.soc_traj[i].unwrap_or(0.0)).sum::<f64>() / k);
            let width = runs[0].v_rc_traj[i].as_ref().map_or(0, Vec::len);
            out.v_rc_traj[i] = Some(
                (0..width)
                    .map(|j| runs.iter().map(|r| r.v_rc_traj[i].as_ref().map_or(0.0, |v| v[j])).sum::<f64>() / k)
                    .collect(),
            );
        }
    }
    // The measured prefix is copied, not averaged, so it stays exact.
    out.voltage[..out.prefix_len].copy_from_slice(&runs[0].voltage[..out.prefix_len]);
    if mode == RolloutMode::InferStop {
        truncate_at_cutoff(&mut out, first.battery.v_eod);
    }
    Ok(out)
}

/// Ensemble evaluation: metrics of the averaged prediction, plus the mean of
/// each member's own metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub averaged: EvalReport,
    pub members: Vec<EvalReport>,
    pub member_mean: Metrics,
}

pub fn evaluate_ensemble(models: &[SeqBattNet], cycles: &[CycleRecord]) -> Result<EnsembleReport> {
    let first = models
        .first()
        .ok_or_else(|| Error::Usage("ensemble needs at least one model".into()))?;
    let averaged = evaluate_with(cycles, first.battery.n, |c| {
        ensemble_predict(models, c, RolloutMode::TrainFull)
    })?;
    let members: Vec<EvalReport> = models.iter().map(|m| evaluate(m, cycles)).collect::<Result<_>>()?;
    let all: Vec<CycleMetrics> = members
        .iter()
        .map(|r| CycleMetrics { cycle: 0, metrics: r.mean })
        .collect();
    Ok(EnsembleReport {
        averaged,
        member_mean: mean_metrics(&all),
        members,
    })
}

/// Trains `num_runs` members with seeds `seed, seed+1, ...`.
pub fn train_ensemble(
    train_cycles: &[CycleRecord],
    val_cycles: &[CycleRecord],
    battery: &BatteryConfig,
    cfg: &ExperimentConfig,
) -> Result<Vec<TrainOutcome>> {
    (0..cfg.train.num_runs)
        .map(|r| train(train_cycles, val_cycles, battery, cfg, cfg.train.run_seed(r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, OracleConfig};

    fn tiny() -> (Vec<CycleRecord>, BatteryConfig, ExperimentConfig) {
        let oracle = OracleConfig { num_cycles: 4, ..OracleConfig::desk() };
        let cycles = synth_generate(&oracle).unwrap();
        let cfg = ExperimentConfig {
            hrm: HrmConfig { d_emb: 4, d_low: 8, d_high: 6, ..HrmConfig::default() },
            train: TrainConfig { epochs: 2, batch_size: 2, num_runs: 2, ..TrainConfig::default() },
            ..ExperimentConfig::default()
        };
        (cycles, oracle.battery, cfg)
    }

    #[test]
    fn history_length_and_determinism() {
        let (c, b, cfg) = tiny();
        let a = train(&c[..3], &c[3..], &b, &cfg, 7).unwrap();
        let r = train(&c[..3], &c[3..], &b, &cfg, 7).unwrap();
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.history, r.history);
        assert_eq!(a.checkpoint, r.checkpoint);
        assert!(a.history.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn empty_sets_rejected() {
        let (c, b, cfg) = tiny();
        assert!(matches!(train(&[], &c, &b, &cfg, 0), Err(Error::Input(_))));
        assert!(matches!(train(&c, &[], &b, &cfg, 0), Err(Error::Input(_))));
    }

    #[test]
    fn aggregate_is_mean_of_cycles() {
        let (c, b, cfg) = tiny();
        let model = SeqBattNet::init(cfg.hrm, b, &mut seeded(1)).unwrap();
        let r = evaluate(&model, &c).unwrap();
        let mean = r.per_cycle.iter().map(|m| m.metrics.rmse).sum::<f64>() / c.len() as f64;
        assert!((r.mean.rmse - mean).abs() < 1e-12);
        assert_eq!(r.per_cycle.len(), c.len());
    }

    #[test]
    fn single_member_ensemble_is_identity() {
        let (c, b, cfg) = tiny();
        let model = SeqBattNet::init(cfg.hrm, b, &mut seeded(1)).unwrap();
        for mode in [RolloutMode::TrainFull, RolloutMode::InferStop] {
            let e = ensemble_predict(std::slice::from_ref(&model), &c[0], mode).unwrap();
            let mut own = model.predict(&c[0], RolloutMode::TrainFull).unwrap();
            if mode == RolloutMode::InferStop {
                truncate_at_cutoff(&mut own, model.battery.v_eod);
            }
            assert_eq!(e, own);
        }
    }

    #[test]
    fn ensemble_rejects_mismatched_configs() {
        let (c, b, cfg) = tiny();
        let a = SeqBattNet::init(cfg.hrm.clone(), b.clone(), &mut seeded(1)).unwrap();
        let hrm = HrmConfig { d_high: 7, ..cfg.hrm };
        let other = SeqBattNet::init(hrm, b, &mut seeded(1)).unwrap();
        assert!(matches!(
            ensemble_predict(&[a, other], &c[0], RolloutMode::TrainFull),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (c, b, cfg) = tiny();
        let model = SeqBattNet::init(cfg.hrm.clone(), b, &mut seeded(5)).unwrap();
        let ck = Checkpoint::capture(&model, &cfg.loss, &cfg.train, 5, 1, 0.123);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.model().unwrap();
        assert_eq!(restored, model);
        let p1 = model.predict(&c[0], RolloutMode::TrainFull).unwrap();
        let p2 = restored.predict(&c[0], RolloutMode::TrainFull).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn gradients_finite_after_one_batch() {
        let (c, b, cfg) = tiny();
        let model = SeqBattNet::init(cfg.hrm.clone(), b.clone(), &mut seeded(2)).unwrap();
        let batch = &crate::data::make_batch(&c, b.n, 4).unwrap()[0];
        let tape = Tape::new();
        let net = model.bind(&tape);
        let (loss, _) = batch_loss(&model, &net, batch, &cfg.loss, true, &mut seeded(3)).unwrap();
        let g = tape.backward(loss).unwrap();
        for v in &net.leaves {
            let grad = g.get(*v).expect("every parameter reaches the loss");
            assert!(grad.iter().all(|x| x.is_finite()));
        }
    }
}
