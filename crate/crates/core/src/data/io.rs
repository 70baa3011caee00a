use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{preset, CycleRecord};
use crate::decoder::BatteryConfig;
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 5] = ["cycle", "step", "time_s", "current_a", "voltage_v"];
pub const MANIFEST_FILE: &str = "manifest.json";

/// Cell description stored next to the data: a preset name or explicit
/// constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellManifest {
    Preset { preset: String },
    Explicit(BatteryConfig),
}

impl CellManifest {
    pub fn resolve(&self) -> Result<BatteryConfig> {
        let cfg = match self {
            CellManifest::Preset { preset: name } => preset(name)?,
            CellManifest::Explicit(cfg) => cfg.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads `manifest.json` from a data directory, if present.
pub fn load_manifest(dir: &Path) -> Result<Option<CellManifest>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::json(&path, e))
}

pub fn save_manifest(dir: &Path, manifest: &CellManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn csv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

struct Row {
    step: usize,
    time: f64,
    current: f64,
    voltage: f64,
}

fn parse_file(path: &Path) -> Result<BTreeMap<usize, Vec<Row>>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(COLUMNS) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            file: path.to_path_buf(),
            column: name.to_string(),
        })?;
    }

    let mut cycles: BTreeMap<usize, Vec<Row>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse {
            file: path.to_path_buf(),
            line,
            message,
        };
        let field = |k: usize| record.get(idx[k]).unwrap_or("");
        let int = |k: usize| {
            field(k)
                .parse::<usize>()
                .map_err(|_| bad(format!("{}: `{}` is not a non-negative integer", COLUMNS[k], field(k))))
        };
        let real = |k: usize| {
            field(k)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("{}: `{}` is not a finite number", COLUMNS[k], field(k))))
        };
        let row = Row {
            step: int(1)?,
            time: real(2)?,
            current: real(3)?,
            voltage: real(4)?,
        };
        if !(row.voltage > 0.0) {
            return Err(bad(format!("voltage_v must be positive, got {}", row.voltage)));
        }
        cycles.entry(int(0)?).or_default().push(row);
    }
    Ok(cycles)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

fn to_record(file: &Path, cycle_index: usize, mut rows: Vec<Row>, n: usize) -> Option<CycleRecord> {
    rows.sort_by_key(|r| r.step);
    if rows.len() < n + 1 {
        warn!(
            "{}: skipping cycle {cycle_index}: {} samples, need at least {}",
            file.display(),
            rows.len(),
            n + 1
        );
        return None;
    }
    let diffs: Vec<f64> = rows.windows(2).map(|w| w[1].time - w[0].time).collect();
    let dt = median(&mut diffs.clone());
    let jitter = diffs.iter().any(|d| (*d - dt).abs() > 0.01 * dt.abs());
    if !(dt > 0.0) || jitter {
        warn!(
            "{}: skipping cycle {cycle_index}: sampling interval is not uniform within 1%",
            file.display()
        );
        return None;
    }
    Some(CycleRecord {
        cycle_index,
        dt,
        time_s: rows.iter().map(|r| r.time).collect(),
        current: rows.iter().map(|r| r.current).collect(),
        voltage: rows.iter().map(|r| r.voltage).collect(),
    })
}

/// Loads every cycle CSV under `path` (a file or a directory), keeping
/// cycles with at least `n + 1` uniformly sampled rows.
pub fn load_cycles(path: &Path, n: usize) -> Result<Vec<CycleRecord>> {
    let mut out = Vec::new();
    for file in csv_files(path)? {
        for (idx, rows) in parse_file(&file)? {
            out.extend(to_record(&file, idx, rows, n));
        }
    }
    out.sort_by_key(|c| c.cycle_index);
    Ok(out)
}

/// Writes cycles in the canonical layout. Numbers use the shortest
/// representation that parses back to the same value.
pub fn save_cycles(path: &Path, cycles: &[CycleRecord]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io_err = |e: csv::Error| Error::io(path, e.into());
    writer.write_record(COLUMNS).map_err(io_err)?;
    for c in cycles {
        for k in 0..c.t_eod() {
            writer
                .write_record([
                    c.cycle_index.to_string(),
                    (k + 1).to_string(),
                    c.time_s[k].to_string(),
                    c.current[k].to_string(),
                    c.voltage[k].to_string(),
                ])
                .map_err(io_err)?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn sample_csv(len: usize) -> String {
        let mut s = String::from("cycle,step,time_s,current_a,voltage_v\n");
        for k in 0..len {
            s += &format!("0,{},{},1.1,{}\n", k + 1, k, 4.1 - 0.003 * k as f64);
        }
        s
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_cycles(dir.path(), 5).unwrap().is_empty());
    }

    #[test]
    fn one_cycle() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "cell.csv", &sample_csv(100));
        let cycles = load_cycles(dir.path(), 30).unwrap();
        assert_eq!(cycles.len(), 1);
        assert_eq!(cycles[0].t_eod(), 100);
        assert_eq!(cycles[0].dt, 1.0);
    }

    #[test]
    fn rows_sorted_by_step_and_short_cycles_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let body = "voltage_v,cycle,step,time_s,current_a\n\
                    3.9,1,2,2,1\n4.0,1,1,0,1\n3.8,1,3,4,1\n4.0,0,1,0,1\n";
        write(dir.path(), "a.csv", body);
        let cycles = load_cycles(dir.path(), 2).unwrap();
        assert_eq!(cycles.len(), 1);
        assert_eq!(cycles[0].cycle_index, 1);
        assert_eq!(cycles[0].voltage, vec![4.0, 3.9, 3.8]);
        assert_eq!(cycles[0].dt, 2.0);
    }

    #[test]
    fn jittery_interval_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let body = "cycle,step,time_s,current_a,voltage_v\n0,1,0,1,4\n0,2,1,1,4\n0,3,2,1,4\n0,4,3.5,1,4\n";
        write(dir.path(), "a.csv", body);
        assert!(load_cycles(dir.path(), 2).unwrap().is_empty());
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "cycle,step,time_s,current_a,voltage_v\n0,1,0,1,4\n0,2,1,abc,4\n";
        write(dir.path(), "a.csv", body);
        match load_cycles(dir.path(), 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", "cycle,step,time_s,current_a\n0,1,0,1\n");
        match load_cycles(dir.path(), 1) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "voltage_v"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("cycle,step,time_s,current_a,voltage_v\n");
        for k in 0..40 {
            let v = 4.1 - (k as f64).sqrt() * 0.0137;
            body += &format!("3,{},{},{},{}\n", k + 1, k as f64 * 0.1, 1.0 / 3.0, v);
        }
        let src = write(dir.path(), "a.csv", &body);
        let cycles = load_cycles(&src, 10).unwrap();
        let out = dir.path().join("b").join("b.csv");
        save_cycles(&out, &cycles).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), body);
        assert_eq!(load_cycles(&out, 10).unwrap(), cycles);
    }

    #[test]
    fn manifest_forms() {
        let m: CellManifest = serde_json::from_str(r#"{"preset": "nasa"}"#).unwrap();
        assert_eq!(m.resolve().unwrap().n, 30);
        let m: CellManifest =
            serde_json::from_str(r#"{"C_rated": 2.0, "C_EOL": 1.6, "V0": 4.2, "V_EOD": 3.0, "n": 20}"#).unwrap();
        let b = m.resolve().unwrap();
        assert_eq!((b.c_rated, b.n, b.e_rc), (2.0, 20, 2));
        let dir = tempfile::tempdir().unwrap();
        save_manifest(dir.path(), &m).unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap(), Some(m));
    }
}
