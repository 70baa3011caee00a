//! Cycle records, dataset presets, batching and the synthetic battery.

mod io;
mod synth;

pub use io::{load_cycles, load_manifest, save_cycles, save_manifest, CellManifest, MANIFEST_FILE};
pub use synth::{synth_generate, synth_generate_traced, OracleConfig, OracleTrace, ProfileKind};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::decoder::BatteryConfig;
use crate::error::{Error, Result};

/// One discharge segment sampled at a uniform interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle_index: usize,
    /// Sampling interval (s).
    pub dt: f64,
    /// Sample timestamps (s), as read or generated.
    pub time_s: Vec<f64>,
    /// Current (A), positive for discharge.
    pub current: Vec<f64>,
    /// Terminal voltage (V).
    pub voltage: Vec<f64>,
}

impl CycleRecord {
    pub fn t_eod(&self) -> usize {
        self.voltage.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.current.len() != self.voltage.len() || self.time_s.len() != self.voltage.len() {
            return Err(Error::Input(format!(
                "cycle {}: column lengths differ",
                self.cycle_index
            )));
        }
        if self.t_eod() < n + 1 {
            return Err(Error::Input(format!(
                "cycle {}: {} samples, need at least {}",
                self.cycle_index,
                self.t_eod(),
                n + 1
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Input(format!("cycle {}: dt must be positive", self.cycle_index)));
        }
        if self.voltage.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Input(format!(
                "cycle {}: voltages must be finite and positive",
                self.cycle_index
            )));
        }
        Ok(())
    }

    /// Measured `(I, V)` window over the first `n` samples, as `n×2`.
    pub fn window(&self, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 2), |(s, c)| if c == 0 { self.current[s] } else { self.voltage[s] })
    }
}

pub const PRESET_NAMES: [&str; 3] = ["tri", "rt-batt", "nasa"];

/// Cell constants of the published dataset families.
pub fn preset(name: &str) -> Result<BatteryConfig> {
    let (c_rated, c_eol, v0, v_eod, n) = match name.to_ascii_lowercase().as_str() {
        "tri" => (1.1, 0.88, 3.6, 2.0, 80),
        "rt-batt" | "rt_batt" | "rtbatt" => (1.1, 0.88, 3.6, 2.0, 80),
        "nasa" => (2.22, 1.33, 4.2, 3.2, 30),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset `{name}`; known presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(BatteryConfig {
        c_rated,
        c_eol,
        v0,
        v_eod,
        beta: 0.8,
        e_rc: 2,
        n,
        dt: 1.0,
        r_min: 1e-4,
        r_max: 1.0,
    })
}

/// A padded group of cycles that share one sampling interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B×n×2` measured windows (current, voltage).
    pub windows: Array3<f64>,
    /// `B×L` currents for steps `n+1..`, zero-padded.
    pub currents: Array2<f64>,
    /// `B×L` measured voltages for steps `n+1..`, zero-padded.
    pub voltages: Array2<f64>,
    /// `B×L`, 1 on valid entries.
    pub masks: Array2<f64>,
    /// `B×1` sampling intervals.
    pub dt: Array2<f64>,
    pub cycle_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.cycle_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycle_indices.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.currents.ncols()
    }
}

fn build_batch(cycles: &[&CycleRecord], n: usize) -> Batch {
    let b = cycles.len();
    let l = cycles.iter().map(|c| c.t_eod() - n).max().unwrap_or(0);
    let mut batch = Batch {
        windows: Array3::zeros((b, n, 2)),
        currents: Array2::zeros((b, l)),
        voltages: Array2::zeros((b, l)),
        masks: Array2::zeros((b, l)),
        dt: Array2::zeros((b, 1)),
        cycle_indices: cycles.iter().map(|c| c.cycle_index).collect(),
    };
    for (r, c) in cycles.iter().enumerate() {
        for s in 0..n {
            batch.windows[[r, s, 0]] = c.current[s];
            batch.windows[[r, s, 1]] = c.voltage[s];
        }
        for j in 0..c.t_eod() - n {
            batch.currents[[r, j]] = c.current[n + j];
            batch.voltages[[r, j]] = c.voltage[n + j];
            batch.masks[[r, j]] = 1.0;
        }
        batch.dt[[r, 0]] = c.dt;
    }
    batch
}

/// Groups cycles by sampling interval (in order of first appearance) and
/// splits each group into padded batches of at most `max_batch`.
pub fn make_batch(cycles: &[CycleRecord], n: usize, max_batch: usize) -> Result<Vec<Batch>> {
    let refs: Vec<&CycleRecord> = cycles.iter().collect();
    make_batch_refs(&refs, n, max_batch)
}

pub fn make_batch_refs(cycles: &[&CycleRecord], n: usize, max_batch: usize) -> Result<Vec<Batch>> {
    if max_batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    for c in cycles {
        c.validate(n)?;
    }
    let mut groups: Vec<(u64, Vec<&CycleRecord>)> = Vec::new();
    for &c in cycles {
        let key = c.dt.to_bits();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(c),
            None => groups.push((key, vec![c])),
        }
    }
    Ok(groups
        .iter()
        .flat_map(|(_, g)| g.chunks(max_batch).map(|chunk| build_batch(chunk, n)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle(idx: usize, len: usize, dt: f64) -> CycleRecord {
        CycleRecord {
            cycle_index: idx,
            dt,
            time_s: (0..len).map(|k| k as f64 * dt).collect(),
            current: vec![1.0 + idx as f64; len],
            voltage: (0..len).map(|k| 4.0 - 0.001 * k as f64).collect(),
        }
    }

    #[test]
    fn presets_match_published_constants() {
        let t = preset("tri").unwrap();
        assert_eq!((t.c_rated, t.c_eol, t.v0, t.v_eod, t.n), (1.1, 0.88, 3.6, 2.0, 80));
        assert_eq!(preset("RT-Batt").unwrap().n, 80);
        let n = preset("nasa").unwrap();
        assert_eq!((n.c_rated, n.c_eol, n.v0, n.v_eod, n.n), (2.22, 1.33, 4.2, 3.2, 30));
        let err = preset("lfp").unwrap_err().to_string();
        assert!(err.contains("tri") && err.contains("rt-batt") && err.contains("nasa"));
    }

    #[test]
    fn single_cycle_batch() {
        let b = make_batch(&[cycle(0, 15, 1.0)], 10, 4).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].horizon(), 5);
        assert!(b[0].masks.iter().all(|&m| m == 1.0));
        assert_eq!(b[0].windows[[0, 9, 1]], 4.0 - 0.009);
        assert_eq!(b[0].voltages[[0, 0]], 4.0 - 0.010);
    }

    #[test]
    fn padded_pair() {
        let b = make_batch(&[cycle(0, 13, 1.0), cycle(1, 17, 1.0)], 10, 4).unwrap();
        assert_eq!(b[0].horizon(), 7);
        assert_eq!(b[0].masks.row(0).to_vec(), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(b[0].currents.row(0).iter().skip(3).all(|&v| v == 0.0));
        assert!(b[0].voltages.row(0).iter().skip(3).all(|&v| v == 0.0));
    }

    #[test]
    fn batches_never_mix_intervals() {
        let cycles = vec![cycle(0, 20, 1.0), cycle(1, 20, 2.0), cycle(2, 20, 1.0), cycle(3, 20, 2.0)];
        let b = make_batch(&cycles, 10, 8).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].cycle_indices, vec![0, 2]);
        assert_eq!(b[1].cycle_indices, vec![1, 3]);
        for batch in &b {
            assert!(batch.dt.iter().all(|&d| d == batch.dt[[0, 0]]));
        }
        let b = make_batch(&cycles, 10, 1).unwrap();
        assert_eq!(b.len(), 4);
    }

    #[test]
    fn short_cycle_rejected() {
        assert!(matches!(make_batch(&[cycle(0, 10, 1.0)], 10, 4), Err(Error::Input(_))));
    }
}
