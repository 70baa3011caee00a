//! Hierarchical two-level GRU encoder.
//!
//! The measured `(I, V)` window is embedded step by step. Before each step
//! consumes its embedding, the low/high states take `N·T − 1` preparatory
//! updates that carry no gradient; a single main update then integrates the
//! embedding with gradients. The final high-level state goes through dropout,
//! layer normalization and a linear head, and the raw head output is mapped
//! into physically valid adaptation parameters.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::decoder::{BatteryConfig, StateMaps};
use crate::diffcore::nn::uniform_init;
use crate::diffcore::{
    affine, dropout, gru_cell, Binder, GruParams, GruVars, Matrix, Parameters, Tape, Var,
    LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const R0_RANGE: (f64, f64) = (1e-3, 0.5);
pub const TAU_RANGE: (f64, f64) = (1e-2, 1e5);

/// Optional affine rescaling of the raw window before embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub current_offset: f64,
    pub current_scale: f64,
    pub voltage_offset: f64,
    pub voltage_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HrmConfig {
    /// Reasoning layers `N`.
    pub n_layers: usize,
    /// Update steps per layer `T`.
    pub steps_per_layer: usize,
    pub d_emb: usize,
    pub d_low: usize,
    pub d_high: usize,
    pub dropout_rate: f64,
    pub e_rc: usize,
    pub input_scaling: Option<InputScaling>,
}

impl Default for HrmConfig {
    fn default() -> Self {
        Self {
            n_layers: 1,
            steps_per_layer: 2,
            d_emb: 32,
            d_low: 128,
            d_high: 64,
            dropout_rate: 0.1,
            e_rc: 2,
            input_scaling: None,
        }
    }
}

impl HrmConfig {
    /// Number of gradient-free micro-updates per step, `N·T − 1`.
    pub fn micro_steps(&self) -> usize {
        self.n_layers * self.steps_per_layer - 1
    }

    pub fn d_out(&self) -> usize {
        2 * self.e_rc + 3
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("steps_per_layer", self.steps_per_layer),
            ("d_emb", self.d_emb),
            ("d_low", self.d_low),
            ("d_high", self.d_high),
            ("e_rc", self.e_rc),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    /// `d_emb × 2`
    pub w_emb: Matrix,
    pub b_emb: Matrix,
    /// Input `d_emb + d_high`, hidden `d_low`.
    pub gru_low: GruParams,
    /// Input `d_low`, hidden `d_high`.
    pub gru_high: GruParams,
    pub norm_gamma: Matrix,
    pub norm_beta: Matrix,
    /// `d_out × d_high`
    pub w_out: Matrix,
    pub b_out: Matrix,
}

pub struct EncoderVars<'t> {
    pub w_emb: Var<'t>,
    pub b_emb: Var<'t>,
    pub gru_low: GruVars<'t>,
    pub gru_high: GruVars<'t>,
    pub norm_gamma: Var<'t>,
    pub norm_beta: Var<'t>,
    pub w_out: Var<'t>,
    pub b_out: Var<'t>,
}

impl EncoderWeights {
    pub fn init(cfg: &HrmConfig, rng: &mut Rng) -> Self {
        Self {
            w_emb: uniform_init(cfg.d_emb, 2, 2, rng),
            b_emb: Array2::zeros((1, cfg.d_emb)),
            gru_low: GruParams::init(cfg.d_emb + cfg.d_high, cfg.d_low, rng),
            gru_high: GruParams::init(cfg.d_low, cfg.d_high, rng),
            norm_gamma: Array2::ones((1, cfg.d_high)),
            norm_beta: Array2::zeros((1, cfg.d_high)),
            w_out: uniform_init(cfg.d_out(), cfg.d_high, cfg.d_high, rng),
            b_out: Array2::zeros((1, cfg.d_out())),
        }
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> EncoderVars<'t> {
        EncoderVars {
            w_emb: b.bind(&self.w_emb),
            b_emb: b.bind(&self.b_emb),
            gru_low: self.gru_low.bind(b),
            gru_high: self.gru_high.bind(b),
            norm_gamma: b.bind(&self.norm_gamma),
            norm_beta: b.bind(&self.norm_beta),
            w_out: b.bind(&self.w_out),
            b_out: b.bind(&self.b_out),
        }
    }

    pub fn check(&self, cfg: &HrmConfig) -> Result<()> {
        let expect = |name: &str, m: &Matrix, shape: (usize, usize)| {
            if m.dim() == shape {
                Ok(())
            } else {
                Err(Error::Shape(format!(
                    "encoder.{name}: expected {shape:?}, found {:?}",
                    m.dim()
                )))
            }
        };
        expect("w_emb", &self.w_emb, (cfg.d_emb, 2))?;
        expect("gru_low.wz", &self.gru_low.wz, (cfg.d_low, cfg.d_emb + cfg.d_high))?;
        expect("gru_high.wz", &self.gru_high.wz, (cfg.d_high, cfg.d_low))?;
        expect("w_out", &self.w_out, (cfg.d_out(), cfg.d_high))?;
        Ok(())
    }
}

impl Parameters for EncoderWeights {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        let name = |n: &str| crate::diffcore::nn::join(prefix, n);
        f(name("w_emb"), &self.w_emb);
        f(name("b_emb"), &self.b_emb);
        self.gru_low.visit(&name("gru_low"), f);
        self.gru_high.visit(&name("gru_high"), f);
        f(name("norm_gamma"), &self.norm_gamma);
        f(name("norm_beta"), &self.norm_beta);
        f(name("w_out"), &self.w_out);
        f(name("b_out"), &self.b_out);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.w_emb);
        f(&mut self.b_emb);
        self.gru_low.visit_mut(f);
        self.gru_high.visit_mut(f);
        f(&mut self.norm_gamma);
        f(&mut self.norm_beta);
        f(&mut self.w_out);
        f(&mut self.b_out);
    }
}

/// Per-cycle adaptation parameters handed to the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationParams {
    /// Ohmic resistance (Ω).
    pub r0: f64,
    /// RC time constants (s).
    pub tau: Vec<f64>,
    pub soc0: f64,
    pub soh: f64,
    /// Branch split of the initial polarization, on the simplex.
    pub weights: Vec<f64>,
    /// Initial RC branch voltages (V).
    pub v_rc0: Vec<f64>,
}

impl AdaptationParams {
    /// Records the parameters as constant `1×·` leaves.
    pub fn to_vars<'t>(&self, tape: &'t Tape) -> AdaptationVars<'t> {
        AdaptationVars {
            r0: tape.scalar(self.r0),
            tau: tape.row(&self.tau),
            soc0: tape.scalar(self.soc0),
            soh: tape.scalar(self.soh),
            weights: tape.row(&self.weights),
            v_rc0: tape.row(&self.v_rc0),
        }
    }
}

/// Batched adaptation parameters on the tape: `B×1` scalars, `B×e_rc`
/// vectors.
#[derive(Clone, Copy)]
pub struct AdaptationVars<'t> {
    pub r0: Var<'t>,
    pub tau: Var<'t>,
    pub soc0: Var<'t>,
    pub soh: Var<'t>,
    pub weights: Var<'t>,
    pub v_rc0: Var<'t>,
}

impl AdaptationVars<'_> {
    pub fn batch_len(&self) -> usize {
        self.r0.shape().0
    }

    pub fn sample(&self, b: usize) -> AdaptationParams {
        let row = |v: Var<'_>| v.with_value(|m| m.row(b).to_vec());
        let scalar = |v: Var<'_>| v.with_value(|m| m[[b, 0]]);
        AdaptationParams {
            r0: scalar(self.r0),
            tau: row(self.tau),
            soc0: scalar(self.soc0),
            soh: scalar(self.soh),
            weights: row(self.weights),
            v_rc0: row(self.v_rc0),
        }
    }
}

/// GRU invocation counts for one encoder pass, summed over steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeStats {
    pub steps: usize,
    pub gru_low_calls: usize,
    pub gru_high_calls: usize,
}

/// Row-wise embedding of an `n×2` window (or of one `B×2` time slice).
pub fn embed<'t>(window: Var<'t>, w: &EncoderVars<'t>) -> Result<Var<'t>> {
    if window.shape().1 != 2 {
        return Err(Error::Shape(format!(
            "embed: expected (current, voltage) columns, got {:?}",
            window.shape()
        )));
    }
    affine(window, w.w_emb, w.b_emb)
}

fn concat_values(a: &Matrix, b: &Matrix) -> Matrix {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).expect("row counts agree")
}

/// Gradient-free preparatory updates. The low state updates every
/// micro-step; the high state only when `q ≡ 0 (mod T)`.
pub fn micro_update(
    z_low: &Matrix,
    z_high: &Matrix,
    e_s: &Matrix,
    cfg: &HrmConfig,
    w: &EncoderWeights,
    stats: &mut EncodeStats,
) -> (Matrix, Matrix) {
    let mut low = z_low.clone();
    let mut high = z_high.clone();
    for q in 1..=cfg.micro_steps() {
        low = w.gru_low.step_values(&concat_values(e_s, &high), &low);
        stats.gru_low_calls += 1;
        if q % cfg.steps_per_layer == 0 {
            high = w.gru_high.step_values(&low, &high);
            stats.gru_high_calls += 1;
        }
    }
    (low, high)
}

/// Gradient-carrying update that integrates the current embedding.
pub fn main_update<'t>(
    z_low_pre: Var<'t>,
    z_high_pre: Var<'t>,
    e_s: Var<'t>,
    w: &EncoderVars<'t>,
    stats: &mut EncodeStats,
) -> Result<(Var<'t>, Var<'t>)> {
    let input = crate::diffcore::concat_cols(&[e_s, z_high_pre])?;
    let low = gru_cell(input, z_low_pre, &w.gru_low)?;
    let high = gru_cell(low, z_high_pre, &w.gru_high)?;
    stats.gru_low_calls += 1;
    stats.gru_high_calls += 1;
    Ok((low, high))
}

/// Head on the final high-level state. Returns the raw `B×d_out` output and
/// the normalized state (the embedding used for aging analysis).
pub fn head<'t>(
    z_high: Var<'t>,
    w: &EncoderVars<'t>,
    cfg: &HrmConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<(Var<'t>, Var<'t>)> {
    let dropped = dropout(z_high, cfg.dropout_rate, training, rng)?;
    let normed = dropped.layer_norm(w.norm_gamma, w.norm_beta, LAYER_NORM_EPS)?;
    let raw = affine(normed, w.w_out, w.b_out)?;
    Ok((raw, normed))
}

/// Range-mapped head output, before the initial RC voltages are derived.
#[derive(Clone, Copy)]
pub struct MappedHead<'t> {
    pub r0: Var<'t>,
    pub tau: Var<'t>,
    pub soc0: Var<'t>,
    pub soh: Var<'t>,
    pub weights: Var<'t>,
}

fn affine_sigmoid(x: Var<'_>, (lo, hi): (f64, f64)) -> Var<'_> {
    x.sigmoid().scale(hi - lo).offset(lo)
}

/// Layout `[R0, τ(e_rc), SOC0, SOH, w(e_rc)]`.
pub fn range_map(raw: Var<'_>, e_rc: usize) -> Result<MappedHead<'_>> {
    if raw.shape().1 != 2 * e_rc + 3 {
        return Err(Error::Shape(format!(
            "range_map: {} columns for e_rc = {e_rc}",
            raw.shape().1
        )));
    }
    Ok(MappedHead {
        r0: affine_sigmoid(raw.slice_cols(0, 1)?, R0_RANGE),
        tau: affine_sigmoid(raw.slice_cols(1, e_rc)?, TAU_RANGE),
        soc0: raw.slice_cols(1 + e_rc, 1)?.sigmoid(),
        soh: raw.slice_cols(2 + e_rc, 1)?.sigmoid(),
        weights: raw.slice_cols(3 + e_rc, e_rc)?.softmax(),
    })
}

/// `OCV0 = V_EOD + (V0 − V_EOD)·σ(g(SOC0))`, `s0 = OCV0 − R0·I_last − V_last`,
/// `v_rc0 = w·s0`.
pub fn init_rc_voltages<'t>(
    r0: Var<'t>,
    soc0: Var<'t>,
    weights: Var<'t>,
    i_last: Var<'t>,
    v_last: Var<'t>,
    battery: &BatteryConfig,
    maps: &impl StateMaps<'t>,
) -> Result<Var<'t>> {
    let ocv0 = crate::decoder::ocv(soc0, battery, maps)?;
    let s0 = ocv0.try_sub(r0.try_mul(i_last)?)?.try_sub(v_last)?;
    weights.try_mul(s0)
}

pub struct EncoderOutput<'t> {
    pub params: AdaptationVars<'t>,
    /// Normalized final high-level state, `B×d_high`.
    pub embedding: Var<'t>,
    pub stats: EncodeStats,
}

fn scale_window(window: &Matrix, scaling: Option<InputScaling>) -> Matrix {
    match scaling {
        None => window.clone(),
        Some(s) => {
            let mut out = window.clone();
            out.column_mut(0)
                .mapv_inplace(|i| (i - s.current_offset) * s.current_scale);
            out.column_mut(1)
                .mapv_inplace(|v| (v - s.voltage_offset) * s.voltage_scale);
            out
        }
    }
}

/// Encodes a batch of windows (`B×n×2`, current then voltage).
#[allow(clippy::too_many_arguments)]
pub fn encode_batch<'t>(
    windows: &Array3<f64>,
    weights: &EncoderWeights,
    vars: &EncoderVars<'t>,
    cfg: &HrmConfig,
    battery: &BatteryConfig,
    maps: &impl StateMaps<'t>,
    training: bool,
    rng: &mut Rng,
) -> Result<EncoderOutput<'t>> {
    let tape = vars.w_emb.tape();
    let (batch, n, features) = windows.dim();
    if features != 2 {
        return Err(Error::Shape(format!("window has {features} features, expected 2")));
    }
    if n != battery.n {
        return Err(Error::Input(format!(
            "window length {n} does not match configured n = {}",
            battery.n
        )));
    }
    if batch == 0 {
        return Err(Error::Input("empty batch".into()));
    }

    let mut stats = EncodeStats::default();
    let mut z_low = tape.leaf(Array2::zeros((batch, cfg.d_low)));
    let mut z_high = tape.leaf(Array2::zeros((batch, cfg.d_high)));
    let micro = cfg.micro_steps();
    for step in 0..n {
        let x = scale_window(&windows.slice(s![.., step, ..]).to_owned(), cfg.input_scaling);
        let e_s = embed(tape.leaf(x), vars)?;
        if micro > 0 {
            let (low, high) = z_low.with_value(|l| {
                z_high.with_value(|h| e_s.with_value(|e| micro_update(l, h, e, cfg, weights, &mut stats)))
            });
            z_low = tape.leaf(low);
            // The high state only leaves the micro phase detached if it was
            // actually updated there.
            if micro >= cfg.steps_per_layer {
                z_high = tape.leaf(high);
            }
        }
        (z_low, z_high) = main_update(z_low, z_high, e_s, vars, &mut stats)?;
        stats.steps += 1;
    }

    let (raw, embedding) = head(z_high, vars, cfg, training, rng)?;
    let mapped = range_map(raw, cfg.e_rc)?;
    let i_last = tape.leaf(windows.slice(s![.., n - 1, 0..1]).to_owned());
    let v_last = tape.leaf(windows.slice(s![.., n - 1, 1..2]).to_owned());
    let v_rc0 = init_rc_voltages(
        mapped.r0,
        mapped.soc0,
        mapped.weights,
        i_last,
        v_last,
        battery,
        maps,
    )?;
    Ok(EncoderOutput {
        params: AdaptationVars {
            r0: mapped.r0,
            tau: mapped.tau,
            soc0: mapped.soc0,
            soh: mapped.soh,
            weights: mapped.weights,
            v_rc0,
        },
        embedding,
        stats,
    })
}

/// Lifts an `n×2` window (rows beyond `n` ignored) into a batch of one.
pub fn window_batch(window: &Matrix, n: usize) -> Result<Array3<f64>> {
    if window.ncols() != 2 {
        return Err(Error::Shape(format!("window has {} columns, expected 2", window.ncols())));
    }
    if window.nrows() < n {
        return Err(Error::Input(format!(
            "window has {} samples, need {n}",
            window.nrows()
        )));
    }
    Ok(window
        .slice(s![..n, ..])
        .to_owned()
        .insert_axis(ndarray::Axis(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Networks;
    use crate::diffcore::FnnParams;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> HrmConfig {
        HrmConfig {
            d_emb: 4,
            d_low: 6,
            d_high: 5,
            ..HrmConfig::default()
        }
    }

    fn battery(n: usize) -> BatteryConfig {
        BatteryConfig {
            c_rated: 2.22,
            c_eol: 1.33,
            v0: 4.2,
            v_eod: 3.2,
            beta: 0.8,
            e_rc: 2,
            n,
            dt: 1.0,
            r_min: 1e-4,
            r_max: 1.0,
        }
    }

    #[test]
    fn defaults_follow_table() {
        let cfg = HrmConfig::default();
        assert_eq!((cfg.n_layers, cfg.steps_per_layer), (1, 2));
        assert_eq!((cfg.d_emb, cfg.d_low, cfg.d_high), (32, 128, 64));
        assert_eq!(cfg.d_out(), 7);
        assert_eq!(cfg.micro_steps(), 1);
    }

    #[test]
    fn embed_examples() {
        let tape = Tape::new();
        let cfg = small_cfg();
        let mut w = EncoderWeights::init(&cfg, &mut seeded(1));
        let mut b = Binder::new(&tape);
        let vars = w.bind(&mut b);
        let window = ndarray::array![[1.0, 4.1], [2.0, 4.0], [0.5, 3.9]];
        let e = embed(tape.leaf(window.clone()), &vars).unwrap().value();
        for (r, row) in window.rows().into_iter().enumerate() {
            let direct = w.w_emb.dot(&row) + w.b_emb.row(0);
            for c in 0..cfg.d_emb {
                assert_abs_diff_eq!(e[[r, c]], direct[c], epsilon = 1e-14);
            }
        }
        w.w_emb.fill(0.0);
        let vars = w.bind(&mut b);
        let e = embed(tape.leaf(window), &vars).unwrap().value();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn micro_update_counts() {
        let w = EncoderWeights::init(&small_cfg(), &mut seeded(2));
        let zl = Array2::zeros((1, 6));
        let zh = Array2::zeros((1, 5));
        let e = Array2::ones((1, 4));

        let cfg = HrmConfig { n_layers: 1, steps_per_layer: 1, ..small_cfg() };
        let mut stats = EncodeStats::default();
        let (l, h) = micro_update(&zl, &zh, &e, &cfg, &w, &mut stats);
        assert_eq!((l, h), (zl.clone(), zh.clone()));
        assert_eq!(stats, EncodeStats::default());

        let mut stats = EncodeStats::default();
        micro_update(&zl, &zh, &e, &small_cfg(), &w, &mut stats);
        assert_eq!((stats.gru_low_calls, stats.gru_high_calls), (1, 0));

        let cfg = HrmConfig { n_layers: 2, steps_per_layer: 2, ..small_cfg() };
        let w2 = EncoderWeights::init(&cfg, &mut seeded(2));
        let mut stats = EncodeStats::default();
        micro_update(&zl, &zh, &e, &cfg, &w2, &mut stats);
        assert_eq!((stats.gru_low_calls, stats.gru_high_calls), (3, 1));
    }

    #[test]
    fn main_update_zero_weights_halves_high_state() {
        let cfg = small_cfg();
        let mut w = EncoderWeights::init(&cfg, &mut seeded(3));
        w.gru_low = GruParams::zeros(cfg.d_emb + cfg.d_high, cfg.d_low);
        w.gru_high = GruParams::zeros(cfg.d_low, cfg.d_high);
        let tape = Tape::new();
        let mut b = Binder::new(&tape);
        let vars = w.bind(&mut b);
        let zh_pre = tape.row(&[0.2, -0.4, 0.6, 0.0, 1.0]);
        let zl_pre = tape.row(&[0.1; 6]);
        let mut stats = EncodeStats::default();
        let (_, zh) = main_update(zl_pre, zh_pre, tape.row(&[1.0; 4]), &vars, &mut stats).unwrap();
        assert_eq!(zh.value(), zh_pre.value() * 0.5);
    }

    #[test]
    fn head_examples() {
        let cfg = small_cfg();
        let mut w = EncoderWeights::init(&cfg, &mut seeded(4));
        w.w_out.fill(0.0);
        w.b_out = Array2::from_shape_fn((1, 7), |(_, j)| j as f64);
        let tape = Tape::new();
        let mut b = Binder::new(&tape);
        let vars = w.bind(&mut b);
        let zh = tape.row(&[0.2, -0.4, 0.6, 0.0, 1.0]);
        let (raw, _) = head(zh, &vars, &cfg, true, &mut seeded(9)).unwrap();
        assert_eq!(raw.value(), w.b_out);

        let w = EncoderWeights::init(&cfg, &mut seeded(4));
        let vars = w.bind(&mut b);
        let (a, _) = head(zh, &vars, &cfg, false, &mut seeded(1)).unwrap();
        let (c, _) = head(zh, &vars, &cfg, false, &mut seeded(2)).unwrap();
        assert_eq!(a.value(), c.value());
    }

    #[test]
    fn range_map_examples() {
        let tape = Tape::new();
        let m = range_map(tape.row(&[0.0, 800.0, -800.0, 0.0, 0.0, 1.3, 1.3]), 2).unwrap();
        assert_abs_diff_eq!(m.r0.item(), 0.2505, epsilon = 1e-15);
        assert_eq!(m.tau.value()[[0, 0]], 1e5);
        assert_eq!(m.tau.value()[[0, 1]], 1e-2);
        assert_eq!(m.soc0.item(), 0.5);
        assert_eq!(m.weights.value(), ndarray::array![[0.5, 0.5]]);
        assert!(range_map(tape.row(&[0.0; 6]), 2).is_err());
    }

    struct FixedOcv(f64);

    impl<'t> StateMaps<'t> for FixedOcv {
        fn ocv_logit(&self, soc: Var<'t>) -> Result<Var<'t>> {
            let c = self.0;
            Ok(soc.map(move |_| c, |_| 0.0))
        }
        fn resistance_logit(&self, soc: Var<'t>, _soh: Var<'t>) -> Result<Var<'t>> {
            Ok(soc)
        }
    }

    #[test]
    fn init_rc_examples() {
        let tape = Tape::new();
        let b = BatteryConfig { v0: 3.6, v_eod: 2.0, ..battery(3) };
        // σ(g) chosen so that OCV0 = 3.4 V.
        let frac: f64 = (3.4 - 2.0) / 1.6;
        let maps = FixedOcv((frac / (1.0 - frac)).ln());
        let v = init_rc_voltages(
            tape.scalar(0.05),
            tape.scalar(0.7),
            tape.row(&[0.5, 0.5]),
            tape.scalar(2.0),
            tape.scalar(3.2),
            &b,
            &maps,
        )
        .unwrap()
        .value();
        assert_abs_diff_eq!(v[[0, 0]], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(v[[0, 1]], 0.05, epsilon = 1e-12);

        let ocv0 = 2.0 + 1.6 * frac;
        let v = init_rc_voltages(
            tape.scalar(0.05),
            tape.scalar(0.7),
            tape.row(&[0.3, 0.7]),
            tape.scalar(2.0),
            tape.scalar(ocv0 - 0.1),
            &b,
            &maps,
        )
        .unwrap()
        .value();
        assert!(v.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn encode_is_deterministic_and_counts() {
        let cfg = small_cfg();
        let mut rng = seeded(5);
        let w = EncoderWeights::init(&cfg, &mut rng);
        let g = FnnParams::ocv_net(&mut rng);
        let f = FnnParams::resistance_net(2, &mut rng);
        let window = Array3::from_shape_fn((2, 6, 2), |(b, s, c)| {
            if c == 0 { 1.0 + b as f64 } else { 4.1 - 0.01 * s as f64 }
        });
        let run = |seed| {
            let tape = Tape::new();
            let mut b = Binder::new(&tape);
            let vars = w.bind(&mut b);
            let nets = Networks { g: g.bind(&mut b), f: f.bind(&mut b) };
            let out = encode_batch(&window, &w, &vars, &cfg, &battery(6), &nets, false, &mut seeded(seed)).unwrap();
            (out.params.sample(0), out.params.sample(1), out.stats)
        };
        let (a0, a1, stats) = run(1);
        let (b0, b1, _) = run(2);
        assert_eq!((a0, a1), (b0, b1));
        assert_eq!(stats.steps, 6);
        assert_eq!(stats.gru_low_calls, 2 * 6);
        assert_eq!(stats.gru_high_calls, 6);
    }

    #[test]
    fn short_window_rejected() {
        let w = Array2::zeros((3, 2));
        assert!(matches!(window_batch(&w, 4), Err(Error::Input(_))));
        assert_eq!(window_batch(&w, 2).unwrap().dim(), (1, 2, 2));
    }
}
