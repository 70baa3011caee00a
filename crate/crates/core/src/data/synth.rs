//! Ground-truth second-order circuit with a closed-form OCV curve.
//!
//! This simulator is written independently of the decoder so that the two
//! can be checked against each other.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{preset, CycleRecord};
use crate::decoder::BatteryConfig;
use crate::error::{Error, Result};
use crate::rng::{derive, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    /// Fixed C-rate.
    Constant,
    /// 3 to 6 random stages repeated until cutoff.
    Multistage,
    /// A fresh uniform draw at every step.
    Randomized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub r0_true: f64,
    pub r_true: Vec<f64>,
    pub tau_true: Vec<f64>,
    pub ocv_exponent: f64,
    pub soh_fade_per_cycle: f64,
    pub num_cycles: usize,
    pub profile_kind: ProfileKind,
    pub seed: u64,
    pub battery: BatteryConfig,
    /// C-rate of the constant profile.
    pub c_rate: f64,
    /// Current range (A) of multistage and randomized profiles.
    pub current_min: f64,
    pub current_max: f64,
    /// Duration range (s) of one multistage stage.
    pub stage_min_s: f64,
    pub stage_max_s: f64,
    pub step_cap: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            r0_true: 0.03,
            r_true: vec![0.02, 0.04],
            tau_true: vec![15.0, 200.0],
            ocv_exponent: 0.9,
            soh_fade_per_cycle: 0.002,
            num_cycles: 10,
            profile_kind: ProfileKind::Constant,
            seed: 0,
            battery: preset("tri").expect("known preset"),
            c_rate: 1.0,
            current_min: 0.5,
            current_max: 4.0,
            stage_min_s: 300.0,
            stage_max_s: 1200.0,
            step_cap: 50_000,
        }
    }
}

impl OracleConfig {
    /// 96 multistage cycles of a NASA-like cell sampled every 10 s.
    pub fn desk() -> Self {
        Self {
            num_cycles: 96,
            profile_kind: ProfileKind::Multistage,
            battery: preset("nasa").expect("known preset").with_dt(10.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.battery.validate().map_err(|e| match e {
            Error::Validation { path, message } => Error::Validation {
                path: format!("battery.{path}"),
                message,
            },
            other => other,
        })?;
        let check = |ok: bool, path: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(path, msg))
            }
        };
        check(self.r0_true > 0.0, "r0_true", "must be positive")?;
        check(!self.r_true.is_empty(), "r_true", "needs at least one branch")?;
        check(
            self.tau_true.len() == self.r_true.len(),
            "tau_true",
            "must have one entry per r_true entry",
        )?;
        for (k, &r) in self.r_true.iter().enumerate() {
            check(r > 0.0, &format!("r_true[{k}]"), "must be positive")?;
        }
        for (k, &t) in self.tau_true.iter().enumerate() {
            check(t > 0.0, &format!("tau_true[{k}]"), "must be positive")?;
        }
        check(self.ocv_exponent > 0.0, "ocv_exponent", "must be positive")?;
        check(self.soh_fade_per_cycle >= 0.0, "soh_fade_per_cycle", "must be non-negative")?;
        let last_soh = 1.0 - self.soh_fade_per_cycle * self.num_cycles.saturating_sub(1) as f64;
        check(last_soh >= 0.5, "soh_fade_per_cycle", "final SOH would drop below 0.5")?;
        check(self.c_rate > 0.0, "c_rate", "must be positive")?;
        check(
            self.current_min > 0.0 && self.current_max >= self.current_min,
            "current_min",
            "need 0 < current_min <= current_max",
        )?;
        check(
            self.stage_min_s > 0.0 && self.stage_max_s >= self.stage_min_s,
            "stage_min_s",
            "need 0 < stage_min_s <= stage_max_s",
        )?;
        check(self.step_cap > 0, "step_cap", "must be positive")?;
        Ok(())
    }

    pub fn soh(&self, k: usize) -> f64 {
        1.0 - self.soh_fade_per_cycle * k as f64
    }

    fn open_circuit(&self, soc: f64) -> f64 {
        let b = &self.battery;
        b.v_eod + (b.v0 - b.v_eod) * soc.powf(self.ocv_exponent)
    }
}

/// A generated cycle plus the internal state entering every step.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTrace {
    pub record: CycleRecord,
    pub soh: f64,
    pub soc_before: Vec<f64>,
    pub v_rc_before: Vec<Vec<f64>>,
}

/// Current source for one cycle.
enum Profile {
    Constant(f64),
    Stages(Vec<(f64, usize)>),
    Random { lo: f64, hi: f64 },
}

impl Profile {
    fn draw(cfg: &OracleConfig, rng: &mut Rng) -> Self {
        let dt = cfg.battery.dt;
        match cfg.profile_kind {
            ProfileKind::Constant => Profile::Constant(cfg.c_rate * cfg.battery.c_rated),
            ProfileKind::Multistage => {
                let count = rng.gen_range(3..=6);
                Profile::Stages(
                    (0..count)
                        .map(|_| {
                            let amps = rng.gen_range(cfg.current_min..=cfg.current_max);
                            let secs = rng.gen_range(cfg.stage_min_s..=cfg.stage_max_s);
                            (amps, ((secs / dt).round() as usize).max(1))
                        })
                        .collect(),
                )
            }
            ProfileKind::Randomized => Profile::Random {
                lo: cfg.current_min,
                hi: cfg.current_max,
            },
        }
    }

    fn current(&self, step: usize, rng: &mut Rng) -> f64 {
        match self {
            Profile::Constant(i) => *i,
            Profile::Stages(stages) => {
                let period: usize = stages.iter().map(|s| s.1).sum();
                let mut t = step % period;
                for &(amps, len) in stages {
                    if t < len {
                        return amps;
                    }
                    t -= len;
                }
                unreachable!("step reduced modulo the period")
            }
            Profile::Random { lo, hi } => rng.gen_range(*lo..=*hi),
        }
    }
}

fn simulate(cfg: &OracleConfig, k: usize) -> Result<OracleTrace> {
    let b = &cfg.battery;
    let dt = b.dt;
    let soh = cfg.soh(k);
    let floor = b.beta * b.c_eol;
    let capacity = floor + (b.c_rated - floor) * soh;
    let decay: Vec<f64> = cfg.tau_true.iter().map(|tau| (-dt / tau).exp()).collect();

    let mut rng = derive(cfg.seed, k as u64);
    let profile = Profile::draw(cfg, &mut rng);
    let mut soc = 1.0_f64;
    let mut v = vec![0.0; cfg.r_true.len()];
    let mut trace = OracleTrace {
        record: CycleRecord {
            cycle_index: k,
            dt,
            time_s: Vec::new(),
            current: Vec::new(),
            voltage: Vec::new(),
        },
        soh,
        soc_before: Vec::new(),
        v_rc_before: Vec::new(),
    };
    for step in 0..cfg.step_cap {
        let amps = profile.current(step, &mut rng);
        trace.soc_before.push(soc);
        trace.v_rc_before.push(v.clone());
        let ocv = cfg.open_circuit(soc);
        let mut polarization = 0.0;
        for ((vk, &a), &r) in v.iter_mut().zip(&decay).zip(&cfg.r_true) {
            *vk = a * *vk + (1.0 - a) * r * amps;
            polarization += *vk;
        }
        let terminal = ocv - cfg.r0_true * amps - polarization;
        trace.record.time_s.push(step as f64 * dt);
        trace.record.current.push(amps);
        trace.record.voltage.push(terminal);
        if terminal < b.v_eod {
            return Ok(trace);
        }
        soc = (soc - amps * dt / (3600.0 * capacity)).clamp(0.0, 1.0);
    }
    Err(Error::Generation(format!(
        "cycle {k} did not reach the cutoff voltage within {} steps",
        cfg.step_cap
    )))
}

/// Generates cycles together with their internal state traces.
pub fn synth_generate_traced(cfg: &OracleConfig) -> Result<Vec<OracleTrace>> {
    cfg.validate()?;
    (0..cfg.num_cycles).map(|k| simulate(cfg, k)).collect()
}

pub fn synth_generate(cfg: &OracleConfig) -> Result<Vec<CycleRecord>> {
    Ok(synth_generate_traced(cfg)?.into_iter().map(|t| t.record).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_fade_constant_profile_repeats() {
        let cfg = OracleConfig { soh_fade_per_cycle: 0.0, num_cycles: 3, ..OracleConfig::default() };
        let c = synth_generate(&cfg).unwrap();
        assert_eq!(c[0].voltage, c[1].voltage);
        assert_eq!(c[1].current, c[2].current);
        assert!(c[0].t_eod() > 2000);
    }

    #[test]
    fn fade_shortens_cycles() {
        let cfg = OracleConfig { soh_fade_per_cycle: 0.02, num_cycles: 4, ..OracleConfig::default() };
        let c = synth_generate(&cfg).unwrap();
        assert!(c.windows(2).all(|w| w[1].t_eod() < w[0].t_eod()));
    }

    #[test]
    fn unreachable_cutoff_is_generation_error() {
        let cfg = OracleConfig { c_rate: 1e-6, step_cap: 1000, num_cycles: 1, ..OracleConfig::default() };
        assert!(matches!(synth_generate(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn voltages_stay_in_band() {
        for kind in [ProfileKind::Constant, ProfileKind::Multistage, ProfileKind::Randomized] {
            let cfg = OracleConfig {
                profile_kind: kind,
                num_cycles: 3,
                battery: preset("nasa").unwrap().with_dt(10.0),
                ..OracleConfig::default()
            };
            let i_max = cfg.current_max.max(cfg.c_rate * cfg.battery.c_rated);
            let r_sum = cfg.r0_true + cfg.r_true.iter().sum::<f64>();
            for c in synth_generate(&cfg).unwrap() {
                let (last, body) = c.voltage.split_last().unwrap();
                assert!(*last < cfg.battery.v_eod);
                assert!(body.iter().all(|&v| v >= cfg.battery.v_eod && v <= cfg.battery.v0));
                assert!(*last >= cfg.battery.v_eod - i_max * r_sum - 0.05);
            }
        }
    }

    #[test]
    fn validation_reports_field_paths() {
        let cfg = OracleConfig { tau_true: vec![1.0], ..OracleConfig::default() };
        match cfg.validate() {
            Err(Error::Validation { path, .. }) => assert_eq!(path, "tau_true"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = OracleConfig::default();
        cfg.battery.v0 = 1.0;
        match cfg.validate() {
            Err(Error::Validation { path, .. }) => assert_eq!(path, "battery.v0"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = OracleConfig { soh_fade_per_cycle: 0.1, num_cycles: 10, ..OracleConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_preset_sizes() {
        let c = synth_generate(&OracleConfig { num_cycles: 6, ..OracleConfig::desk() }).unwrap();
        for cycle in &c {
            assert!(cycle.t_eod() > 31, "cycle too short: {}", cycle.t_eod());
            assert_eq!(cycle.dt, 10.0);
        }
    }
}
