//! The full network: encoder plus the decoder's two state maps.

use ndarray::{Array2, Array3};

use crate::data::{Batch, CycleRecord};
use crate::decoder::{
    assemble, rollout_batch, BatchRollout, BatteryConfig, Networks, PredictionResult, RolloutMode,
};
use crate::diffcore::{Binder, FnnParams, Matrix, Parameters, Tape, Var};
use crate::encoder::{
    encode_batch, window_batch, AdaptationParams, AdaptationVars, EncodeStats, EncoderVars,
    EncoderWeights, HrmConfig,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SeqBattNet {
    pub hrm: HrmConfig,
    pub battery: BatteryConfig,
    pub encoder: EncoderWeights,
    /// OCV map `g(SOC)`.
    pub g: FnnParams,
    /// Resistance map `f(SOC, SOH)`.
    pub f: FnnParams,
}

/// All trainable weights bound to one tape, in [`Parameters`] order.
pub struct BoundNet<'t> {
    pub encoder: EncoderVars<'t>,
    pub maps: Networks<'t>,
    pub leaves: Vec<Var<'t>>,
}

pub struct Forward<'t> {
    pub params: AdaptationVars<'t>,
    pub rollout: BatchRollout<'t>,
    pub embedding: Var<'t>,
    pub stats: EncodeStats,
}

impl SeqBattNet {
    pub fn init(hrm: HrmConfig, battery: BatteryConfig, rng: &mut Rng) -> Result<Self> {
        hrm.validate()?;
        battery.validate()?;
        if hrm.e_rc != battery.e_rc {
            return Err(Error::Config(format!(
                "encoder e_rc = {} but battery e_rc = {}",
                hrm.e_rc, battery.e_rc
            )));
        }
        let encoder = EncoderWeights::init(&hrm, rng);
        let g = FnnParams::ocv_net(rng);
        let f = FnnParams::resistance_net(hrm.e_rc, rng);
        Ok(Self { hrm, battery, encoder, g, f })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundNet<'t> {
        let mut b = Binder::new(tape);
        let encoder = self.encoder.bind(&mut b);
        let g = self.g.bind(&mut b);
        let f = self.f.bind(&mut b);
        BoundNet {
            encoder,
            maps: Networks { g, f },
            leaves: b.vars().to_vec(),
        }
    }

    fn encode_windows<'t>(
        &self,
        windows: &Array3<f64>,
        net: &BoundNet<'t>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<crate::encoder::EncoderOutput<'t>> {
        encode_batch(
            windows,
            &self.encoder,
            &net.encoder,
            &self.hrm,
            &self.battery,
            &net.maps,
            training,
            rng,
        )
    }

    /// Encodes every window of a batch and rolls all samples out over the
    /// padded horizon.
    pub fn forward_batch<'t>(
        &self,
        net: &BoundNet<'t>,
        batch: &Batch,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Forward<'t>> {
        let enc = self.encode_windows(&batch.windows, net, training, rng)?;
        let rollout = rollout_batch(
            &enc.params,
            &batch.currents,
            &batch.dt,
            &self.battery,
            &net.maps,
            false,
        )?;
        Ok(Forward {
            params: enc.params,
            rollout,
            embedding: enc.embedding,
            stats: enc.stats,
        })
    }

    /// Eval-mode adaptation parameters and normalized embedding of one
    /// measured `n×2` window.
    pub fn encode(&self, window: &Matrix) -> Result<(AdaptationParams, Vec<f64>)> {
        let tape = Tape::new();
        let net = self.bind(&tape);
        let windows = window_batch(window, self.battery.n)?;
        let enc = self.encode_windows(&windows, &net, false, &mut crate::rng::seeded(0))?;
        let embedding = enc.embedding.with_value(|m| m.row(0).to_vec());
        Ok((enc.params.sample(0), embedding))
    }

    /// Eval-mode prediction for a measured window and a current plan that
    /// covers the steps after it, sampled every `dt` seconds.
    pub fn predict_plan(
        &self,
        window: &Matrix,
        plan: &[f64],
        dt: f64,
        mode: RolloutMode,
    ) -> Result<PredictionResult> {
        if plan.is_empty() {
            return Err(Error::Input("empty current plan".into()));
        }
        let tape = Tape::new();
        let net = self.bind(&tape);
        let windows = window_batch(window, self.battery.n)?;
        let enc = self.encode_windows(&windows, &net, false, &mut crate::rng::seeded(0))?;
        let currents = Array2::from_shape_vec((1, plan.len()), plan.to_vec()).expect("row shape");
        let rolled = rollout_batch(
            &enc.params,
            &currents,
            &Array2::from_elem((1, 1), dt),
            &self.battery,
            &net.maps,
            mode == RolloutMode::InferStop,
        )?;
        let prefix: Vec<f64> = window.column(1).iter().take(self.battery.n).copied().collect();
        Ok(assemble(&rolled, &prefix))
    }

    /// Prediction over a recorded cycle: the first `n` samples are the
    /// window, the remaining currents form the plan.
    pub fn predict(&self, cycle: &CycleRecord, mode: RolloutMode) -> Result<PredictionResult> {
        let n = self.battery.n;
        cycle.validate(n)?;
        self.predict_plan(&cycle.window(n), &cycle.current[n..], cycle.dt, mode)
    }
}

impl Parameters for SeqBattNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        let join = |n: &str| crate::diffcore::nn::join(prefix, n);
        self.encoder.visit(&join("encoder"), f);
        self.g.visit(&join("g"), f);
        self.f.visit(&join("f"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.encoder.visit_mut(f);
        self.g.visit_mut(f);
        self.f.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{preset, synth_generate, OracleConfig};
    use crate::rng::seeded;

    fn small() -> SeqBattNet {
        let hrm = HrmConfig { d_emb: 4, d_low: 6, d_high: 5, ..HrmConfig::default() };
        SeqBattNet::init(hrm, preset("nasa").unwrap(), &mut seeded(3)).unwrap()
    }

    #[test]
    fn bind_order_matches_visit() {
        let net = small();
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let named = net.named_params("");
        assert_eq!(bound.leaves.len(), named.len());
        for (v, (_, m)) in bound.leaves.iter().zip(&named) {
            assert_eq!(&v.value(), *m);
        }
        assert!(named.iter().any(|(n, _)| n == "encoder.gru_low.wz"));
        assert!(named.iter().any(|(n, _)| n == "g.0.weight"));
    }

    #[test]
    fn predict_keeps_measured_prefix() {
        let net = small();
        let cfg = OracleConfig { num_cycles: 1, ..OracleConfig::desk() };
        let cycle = &synth_generate(&cfg).unwrap()[0];
        let full = net.predict(cycle, RolloutMode::TrainFull).unwrap();
        assert_eq!(full.len(), cycle.t_eod());
        assert_eq!(&full.voltage[..30], &cycle.voltage[..30]);
    }

    #[test]
    fn mismatched_branch_count_rejected() {
        let hrm = HrmConfig { e_rc: 3, ..HrmConfig::default() };
        assert!(SeqBattNet::init(hrm, preset("tri").unwrap(), &mut seeded(0)).is_err());
    }
}
