//! Discrete-state equivalent-circuit rollout.
//!
//! Starting from the adaptation parameters predicted for a cycle, each step
//! evaluates the learned OCV curve, relaxes the RC branch voltages toward
//! `r·I`, coulomb-counts SOC for the next step and emits the terminal voltage
//! `OCV − R0·I − Σ v_rc`. Everything runs on the tape so the whole rollout is
//! differentiable end to end.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffcore::{concat_cols, fnn_forward, FnnVars, Matrix, Tape, Var};
use crate::encoder::{AdaptationParams, AdaptationVars};
use crate::error::{Error, Result};

/// Physical constants of a cell family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    /// Rated capacity (Ah).
    #[serde(alias = "C_rated")]
    pub c_rated: f64,
    /// End-of-life capacity (Ah).
    #[serde(alias = "C_EOL")]
    pub c_eol: f64,
    /// Nominal full-charge open-circuit voltage (V).
    #[serde(alias = "V0")]
    pub v0: f64,
    /// End-of-discharge cutoff voltage (V).
    #[serde(alias = "V_EOD")]
    pub v_eod: f64,
    /// Fractional capacity threshold applied to `c_eol`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_e_rc")]
    pub e_rc: usize,
    /// Encoder window length in samples.
    pub n: usize,
    /// Sampling interval (s).
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_r_min")]
    pub r_min: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
}

fn default_beta() -> f64 {
    0.8
}
fn default_e_rc() -> usize {
    2
}
fn default_dt() -> f64 {
    1.0
}
fn default_r_min() -> f64 {
    1e-4
}
fn default_r_max() -> f64 {
    1.0
}

impl BatteryConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, path: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(path, msg))
            }
        };
        check(self.v_eod > 0.0, "v_eod", "must be positive")?;
        check(self.v0 > self.v_eod, "v0", "must exceed v_eod")?;
        check(self.c_rated > 0.0, "c_rated", "must be positive")?;
        check(
            self.c_eol > 0.0 && self.c_eol <= self.c_rated,
            "c_eol",
            "must lie in (0, c_rated]",
        )?;
        check(self.beta > 0.0 && self.beta <= 1.0, "beta", "must lie in (0, 1]")?;
        check(self.e_rc >= 1, "e_rc", "must be at least 1")?;
        check(self.n >= 1, "n", "must be at least 1")?;
        check(self.dt > 0.0 && self.dt.is_finite(), "dt", "must be positive")?;
        check(self.r_min > 0.0, "r_min", "must be positive")?;
        check(self.r_max > self.r_min, "r_max", "must exceed r_min")?;
        Ok(())
    }

    pub fn with_dt(&self, dt: f64) -> Self {
        Self { dt, ..self.clone() }
    }

    pub fn voltage_span(&self) -> f64 {
        self.v0 - self.v_eod
    }
}

/// The two learned state maps of the decoder: `g(SOC)` feeding the OCV curve
/// and `f(SOC, SOH)` feeding the RC resistances. Both return pre-sigmoid
/// values; the decoder applies the range-safe affine sigmoid.
pub trait StateMaps<'t> {
    fn ocv_logit(&self, soc: Var<'t>) -> Result<Var<'t>>;
    fn resistance_logit(&self, soc: Var<'t>, soh: Var<'t>) -> Result<Var<'t>>;
}

/// The trained feedforward networks bound to a tape.
pub struct Networks<'t> {
    pub g: FnnVars<'t>,
    pub f: FnnVars<'t>,
}

impl<'t> StateMaps<'t> for Networks<'t> {
    fn ocv_logit(&self, soc: Var<'t>) -> Result<Var<'t>> {
        fnn_forward(&self.g, soc)
    }

    fn resistance_logit(&self, soc: Var<'t>, soh: Var<'t>) -> Result<Var<'t>> {
        fnn_forward(&self.f, concat_cols(&[soc, soh])?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Run the whole current sequence (training, evaluation).
    TrainFull,
    /// Stop at the first predicted voltage below cutoff, inclusive.
    InferStop,
}

/// `α_k = exp(−dt / τ_k)`.
pub fn decay_coeff(tau: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    tau.iter()
        .map(|&t| {
            if t > 0.0 {
                Ok((-dt / t).exp())
            } else {
                Err(Error::Domain(format!("time constant must be positive, got {t}")))
            }
        })
        .collect()
}

/// `C_eff = β·C_EOL + (C_rated − β·C_EOL)·SOH`.
pub fn effective_capacity(soh: f64, battery: &BatteryConfig) -> f64 {
    let floor = battery.beta * battery.c_eol;
    floor + (battery.c_rated - floor) * soh
}

/// `OCV = V_EOD + (V0 − V_EOD)·σ(g(SOC))`.
pub fn ocv<'t>(soc: Var<'t>, battery: &BatteryConfig, maps: &impl StateMaps<'t>) -> Result<Var<'t>> {
    Ok(maps
        .ocv_logit(soc)?
        .sigmoid()
        .scale(battery.voltage_span())
        .offset(battery.v_eod))
}

/// `r = r_min + (r_max − r_min)·σ(f(SOC, SOH))`, one column per RC branch.
pub fn rc_resistance<'t>(
    soc: Var<'t>,
    soh: Var<'t>,
    battery: &BatteryConfig,
    maps: &impl StateMaps<'t>,
) -> Result<Var<'t>> {
    Ok(maps
        .resistance_logit(soc, soh)?
        .sigmoid()
        .scale(battery.r_max - battery.r_min)
        .offset(battery.r_min))
}

/// `v = α ⊙ v_prev + (1 − α) ⊙ r · I`.
pub fn rc_step<'t>(v_prev: Var<'t>, alpha: Var<'t>, r: Var<'t>, current: Var<'t>) -> Result<Var<'t>> {
    let relaxed = alpha.try_mul(v_prev)?;
    let driven = alpha.rsub(1.0).try_mul(r)?.try_mul(current)?;
    relaxed.try_add(driven)
}

/// `SOC' = Π[0,1](SOC − I·dt / (3600·C_eff))`.
pub fn soc_step<'t>(soc: Var<'t>, current: Var<'t>, dt: Var<'t>, c_eff: Var<'t>) -> Result<Var<'t>> {
    if c_eff.with_value(|c| c.iter().any(|&v| !(v > 0.0))) {
        return Err(Error::Domain("effective capacity must be positive".into()));
    }
    let drawn = current.try_mul(dt)?.try_div(c_eff.scale(3600.0))?;
    Ok(soc.try_sub(drawn)?.clip(0.0, 1.0))
}

/// `V̂ = OCV − R0·I − Σ_k v_rc,k`.
pub fn terminal_voltage<'t>(ocv: Var<'t>, r0: Var<'t>, current: Var<'t>, v_rc: Var<'t>) -> Result<Var<'t>> {
    ocv.try_sub(r0.try_mul(current)?)?.try_sub(v_rc.sum_cols())
}

/// Per-step outputs of a batched rollout; every entry is `B×1` (`B×e_rc` for
/// the branch voltages).
pub struct BatchRollout<'t> {
    pub voltage: Vec<Var<'t>>,
    pub soc: Vec<Var<'t>>,
    pub v_rc: Vec<Var<'t>>,
}

impl<'t> BatchRollout<'t> {
    pub fn len(&self) -> usize {
        self.voltage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltage.is_empty()
    }

    /// Predicted voltages as one `B×L` tensor.
    pub fn stacked_voltage(&self) -> Result<Var<'t>> {
        concat_cols(&self.voltage)
    }
}

/// Rolls the circuit forward over `currents` (`B×L`, column `j` is step
/// `n+1+j`) with per-sample sampling intervals `dt` (`B×1`).
///
/// With `stop_at_cutoff` the loop ends after the first step whose voltage is
/// below `V_EOD`; that requires a batch of one.
pub fn rollout_batch<'t>(
    params: &AdaptationVars<'t>,
    currents: &Matrix,
    dt: &Matrix,
    battery: &BatteryConfig,
    maps: &impl StateMaps<'t>,
    stop_at_cutoff: bool,
) -> Result<BatchRollout<'t>> {
    let tape = params.r0.tape();
    let (batch, steps) = currents.dim();
    if steps == 0 {
        return Err(Error::Input("empty current sequence".into()));
    }
    if dt.dim() != (batch, 1) || params.r0.shape() != (batch, 1) {
        return Err(Error::Shape(format!(
            "rollout: currents {:?}, dt {:?}, R0 {:?}",
            currents.dim(),
            dt.dim(),
            params.r0.shape()
        )));
    }
    if stop_at_cutoff && batch != 1 {
        return Err(Error::Usage("cutoff stopping needs a batch of one".into()));
    }
    if dt.iter().any(|&v| !(v > 0.0)) || params.tau.with_value(|t| t.iter().any(|&v| !(v > 0.0))) {
        return Err(Error::Domain("dt and time constants must be positive".into()));
    }

    let dt_var = tape.leaf(dt.clone());
    let alpha = dt_var.try_div(params.tau)?.neg().exp();
    let floor = battery.beta * battery.c_eol;
    let c_eff = params.soh.scale(battery.c_rated - floor).offset(floor);

    let mut soc = params.soc0;
    let mut v_rc = params.v_rc0;
    let mut out = BatchRollout {
        voltage: Vec::with_capacity(steps),
        soc: Vec::with_capacity(steps),
        v_rc: Vec::with_capacity(steps),
    };
    for j in 0..steps {
        let current = tape.leaf(currents.column(j).to_owned().insert_axis(ndarray::Axis(1)));
        let open_circuit = ocv(soc, battery, maps)?;
        let r = rc_resistance(soc, params.soh, battery, maps)?;
        v_rc = rc_step(v_rc, alpha, r, current)?;
        let v_hat = terminal_voltage(open_circuit, params.r0, current, v_rc)?;
        out.voltage.push(v_hat);
        out.soc.push(soc);
        out.v_rc.push(v_rc);
        if stop_at_cutoff && v_hat.item() < battery.v_eod {
            break;
        }
        soc = soc_step(soc, current, dt_var, c_eff)?;
    }
    Ok(out)
}

/// Predicted trajectory for a single cycle: the measured window followed by
/// the rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    pub voltage: Vec<f64>,
    pub mask: Vec<u8>,
    /// SOC used at each step; `None` over the measured prefix.
    pub soc_traj: Vec<Option<f64>>,
    /// RC branch voltages after each step; `None` over the measured prefix.
    pub v_rc_traj: Vec<Option<Vec<f64>>>,
    /// Number of measured samples at the start of `voltage`.
    pub prefix_len: usize,
    /// Number of predicted steps emitted. In stop mode this is the 1-based
    /// step of the first cutoff crossing (or the full plan if none).
    pub stop_index: usize,
}

impl PredictionResult {
    pub fn predicted(&self) -> &[f64] {
        &self.voltage[self.prefix_len..]
    }

    pub fn len(&self) -> usize {
        self.voltage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltage.is_empty()
    }
}

fn row_values(v: Var<'_>) -> Vec<f64> {
    v.with_value(|m| m.row(0).to_vec())
}

/// Single-cycle rollout. `currents` covers steps `n+1..`; `battery.dt` is the
/// cycle's sampling interval.
pub fn rollout<'t>(
    tape: &'t Tape,
    params: &AdaptationParams,
    currents: &[f64],
    battery: &BatteryConfig,
    maps: &impl StateMaps<'t>,
    mode: RolloutMode,
    measured_prefix: &[f64],
) -> Result<PredictionResult> {
    if currents.is_empty() {
        return Err(Error::Input("empty current sequence".into()));
    }
    let vars = params.to_vars(tape);
    let currents_m = Array2::from_shape_vec((1, currents.len()), currents.to_vec())
        .expect("row shape");
    let dt = Array2::from_elem((1, 1), battery.dt);
    let rolled = rollout_batch(
        &vars,
        &currents_m,
        &dt,
        battery,
        maps,
        mode == RolloutMode::InferStop,
    )?;
    Ok(assemble(&rolled, measured_prefix))
}

pub(crate) fn assemble(rolled: &BatchRollout<'_>, measured_prefix: &[f64]) -> PredictionResult {
    let prefix_len = measured_prefix.len();
    let steps = rolled.len();
    let mut voltage = measured_prefix.to_vec();
    voltage.extend(rolled.voltage.iter().map(|v| v.item()));
    let mut soc_traj = vec![None; prefix_len];
    soc_traj.extend(rolled.soc.iter().map(|v| Some(v.item())));
    let mut v_rc_traj = vec![None; prefix_len];
    v_rc_traj.extend(rolled.v_rc.iter().map(|&v| Some(row_values(v))));
    PredictionResult {
        mask: vec![1; voltage.len()],
        voltage,
        soc_traj,
        v_rc_traj,
        prefix_len,
        stop_index: steps,
    }
}

/// Truncates a full-horizon trajectory at the first predicted voltage below
/// `v_eod` (inclusive), matching stop-mode semantics.
pub fn truncate_at_cutoff(result: &mut PredictionResult, v_eod: f64) {
    if let Some(k) = result.predicted().iter().position(|&v| v < v_eod) {
        let keep = result.prefix_len + k + 1;
        result.voltage.truncate(keep);
        result.mask.truncate(keep);
        result.soc_traj.truncate(keep);
        result.v_rc_traj.truncate(keep);
        result.stop_index = k + 1;
    }
}
