//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_cycles, load_manifest, preset, save_cycles, save_manifest, synth_generate, CellManifest,
    CycleRecord, OracleConfig,
};
use crate::decoder::{BatteryConfig, PredictionResult, RolloutMode};
use crate::error::{Error, Result};
use crate::model::SeqBattNet;
use crate::objective::pca2;
use crate::trainer::{
    ensemble_predict, evaluate_with, train, write_history, Checkpoint, ExperimentConfig,
    CHECKPOINT_FORMAT,
};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SEQBATTNET_OUT";
pub const ENSEMBLE_FORMAT: &str = "seqbattnet-ensemble-v1";

#[derive(Debug, Parser)]
#[command(name = "seqbattnet", version, about = "Physics-informed battery discharge prediction")]
pub struct Cli {
    /// Overrides the seed of any configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic cycles from a ground-truth circuit.
    Synth {
        /// Oracle configuration (JSON). Defaults to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write train/val/test subdirectories (cycle index mod 6:
        /// 0-3 train, 4 val, 5 test).
        #[arg(long)]
        split: bool,
    },
    /// Train `num_runs` seeded models.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Preset name (tri, rt-batt, nasa) or a cell manifest JSON file.
        /// Defaults to the manifest stored with the training data.
        #[arg(long)]
        preset: Option<String>,
        /// Experiment configuration (JSON with `hrm`, `loss`, `train`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-cycle metrics of a checkpoint or ensemble.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Voltage trajectory for one cycle.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cycle: PathBuf,
        /// Cycle index inside the file; defaults to the first cycle.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long, value_enum, default_value_t = Mode::Full)]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-component PCA of encoder embeddings.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Stop,
    Full,
}

impl From<Mode> for RolloutMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Stop => RolloutMode::InferStop,
            Mode::Full => RolloutMode::TrainFull,
        }
    }
}

/// Written before any work starts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub output: PathBuf,
    pub started_unix_s: f64,
    pub finished_unix_s: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format: String,
    /// Member checkpoint paths, relative to the manifest.
    pub members: Vec<PathBuf>,
    pub seeds: Vec<u64>,
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn default_output(name: &str) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

struct Run {
    path: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(
        command: &str,
        dir: &Path,
        config_path: Option<&Path>,
        config: &impl Serialize,
        seed: Option<u64>,
        output: &Path,
    ) -> Result<Self> {
        create_dir(dir)?;
        let manifest = RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: serde_json::to_value(config).map_err(|e| Error::json(dir, e))?,
            seed,
            output: output.to_path_buf(),
            started_unix_s: now_unix(),
            finished_unix_s: None,
        };
        let path = dir.join(format!("run_manifest_{command}.json"));
        write_json(&path, &manifest)?;
        Ok(Self { path, manifest })
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.finished_unix_s = Some(now_unix());
        write_json(&self.path, &self.manifest)
    }
}

fn parent_dir(file: &Path) -> PathBuf {
    file.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Resolves `--preset`: an existing file is read as a cell manifest,
/// anything else as a preset name.
pub fn resolve_battery(spec: &str) -> Result<BatteryConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        let m: CellManifest = read_json(path)?;
        m.resolve()
    } else {
        preset(spec)
    }
}

/// Loads a single checkpoint or every member of an ensemble manifest.
pub fn load_models(path: &Path) -> Result<Vec<SeqBattNet>> {
    let value: serde_json::Value = read_json(path)?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(CHECKPOINT_FORMAT) => {
            let ck: Checkpoint = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
            Ok(vec![ck.model()?])
        }
        Some(ENSEMBLE_FORMAT) => {
            let m: EnsembleManifest = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
            let base = parent_dir(path);
            m.members
                .iter()
                .map(|p| Checkpoint::load(&base.join(p))?.model())
                .collect()
        }
        other => Err(Error::Config(format!(
            "{}: unrecognised model file format {other:?}",
            path.display()
        ))),
    }
}

fn predict_with(models: &[SeqBattNet], cycle: &CycleRecord, mode: RolloutMode) -> Result<PredictionResult> {
    match models {
        [single] => single.predict(cycle, mode),
        _ => ensemble_predict(models, cycle, mode),
    }
}

fn check_data_battery(data: &Path, model: &BatteryConfig) -> Result<()> {
    if let Some(manifest) = load_manifest(data)? {
        let b = manifest.resolve()?;
        let fields = [
            ("c_rated", b.c_rated, model.c_rated),
            ("c_eol", b.c_eol, model.c_eol),
            ("v0", b.v0, model.v0),
            ("v_eod", b.v_eod, model.v_eod),
            ("n", b.n as f64, model.n as f64),
        ];
        for (name, data_v, model_v) in fields {
            if data_v != model_v {
                return Err(Error::validation(
                    format!("battery.{name}"),
                    format!("data manifest has {data_v}, model was trained with {model_v}"),
                ));
            }
        }
    }
    Ok(())
}

fn load_nonempty(dir: &Path, n: usize, what: &str) -> Result<Vec<CycleRecord>> {
    let cycles = load_cycles(dir, n)?;
    if cycles.is_empty() {
        return Err(Error::Input(format!("{what}: no usable cycles under {}", dir.display())));
    }
    Ok(cycles)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, split } => cmd_synth(config.as_deref(), out, split, cli.seed),
        Command::Train { train, val, preset, config, out } => {
            cmd_train(&train, &val, preset.as_deref(), config.as_deref(), out, cli.seed)
        }
        Command::Eval { model, data, out } => cmd_eval(&model, &data, out),
        Command::Predict { model, cycle, index, mode, out } => {
            cmd_predict(&model, &cycle, index, mode.into(), out)
        }
        Command::Embed { model, data, out } => cmd_embed(&model, &data, out),
    }
}

fn cmd_synth(config: Option<&Path>, out: Option<PathBuf>, split: bool, seed: Option<u64>) -> Result<()> {
    let mut cfg: OracleConfig = match config {
        Some(p) => read_json(p)?,
        None => OracleConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = out.unwrap_or_else(|| default_output("synth"));
    let run = Run::start("synth", &out, config, &cfg, Some(cfg.seed), &out)?;
    let cycles = synth_generate(&cfg)?;
    let manifest = CellManifest::Explicit(cfg.battery.clone());
    save_cycles(&out.join("cycles.csv"), &cycles)?;
    save_manifest(&out, &manifest)?;
    if split {
        for (name, keep) in [("train", 0..4), ("val", 4..5), ("test", 5..6)] {
            let part: Vec<CycleRecord> = cycles
                .iter()
                .filter(|c| keep.contains(&(c.cycle_index % 6)))
                .cloned()
                .collect();
            let dir = out.join(name);
            create_dir(&dir)?;
            save_cycles(&dir.join("cycles.csv"), &part)?;
            save_manifest(&dir, &manifest)?;
        }
    }
    info!("wrote {} cycles to {}", cycles.len(), out.display());
    run.finish()
}

fn cmd_train(
    train_dir: &Path,
    val_dir: &Path,
    preset_spec: Option<&str>,
    config: Option<&Path>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg: ExperimentConfig = match config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let battery = match preset_spec {
        Some(spec) => resolve_battery(spec)?,
        None => load_manifest(train_dir)?
            .ok_or_else(|| {
                Error::Config(format!(
                    "no --preset given and no {} in {}; known presets: tri, rt-batt, nasa",
                    crate::data::MANIFEST_FILE,
                    train_dir.display()
                ))
            })?
            .resolve()?,
    };
    let mut cfg_battery = battery.clone();
    cfg_battery.e_rc = cfg.hrm.e_rc;
    let battery = cfg_battery;
    let out = out.unwrap_or_else(|| default_output("train"));
    #[derive(Serialize)]
    struct Resolved<'a> {
        experiment: &'a ExperimentConfig,
        battery: &'a BatteryConfig,
        train_data: &'a Path,
        val_data: &'a Path,
    }
    let resolved = Resolved {
        experiment: &cfg,
        battery: &battery,
        train_data: train_dir,
        val_data: val_dir,
    };
    let run = Run::start("train", &out, config, &resolved, Some(cfg.train.seed), &out)?;

    let train_cycles = load_nonempty(train_dir, battery.n, "training data")?;
    let val_cycles = load_nonempty(val_dir, battery.n, "validation data")?;
    let mut members = Vec::new();
    let mut seeds = Vec::new();
    for r in 0..cfg.train.num_runs {
        let s = cfg.train.run_seed(r);
        info!("run {}/{} (seed {s})", r + 1, cfg.train.num_runs);
        let outcome = train(&train_cycles, &val_cycles, &battery, &cfg, s)?;
        let dir = out.join(format!("run_{r}"));
        create_dir(&dir)?;
        outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
        write_history(&dir.join("history.csv"), &outcome.history)?;
        members.push(PathBuf::from(format!("run_{r}")).join("checkpoint.json"));
        seeds.push(s);
    }
    write_json(
        &out.join("ensemble.json"),
        &EnsembleManifest {
            format: ENSEMBLE_FORMAT.to_string(),
            members,
            seeds,
        },
    )?;
    run.finish()
}

fn cmd_eval(model_path: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let models = load_models(model_path)?;
    let battery = models[0].battery.clone();
    check_data_battery(data, &battery)?;
    let cycles = load_nonempty(data, battery.n, "evaluation data")?;
    let out = out.unwrap_or_else(|| default_output("eval").join("metrics.csv"));
    let dir = parent_dir(&out);
    let run = Run::start("eval", &dir, None, &serde_json::json!({"model": model_path, "data": data}), None, &out)?;

    let started = Instant::now();
    let report = evaluate_with(&cycles, battery.n, |c| predict_with(&models, c, RolloutMode::TrainFull))?;
    let elapsed = started.elapsed().as_secs_f64();

    let mut csv = String::from("cycle,rmse,mae,mape\n");
    for row in &report.per_cycle {
        csv += &format!("{},{},{},{}\n", row.cycle, row.metrics.rmse, row.metrics.mae, row.metrics.mape);
    }
    fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
    write_json(
        &out.with_extension("json"),
        &serde_json::json!({
            "cycles": report.per_cycle.len(),
            "members": models.len(),
            "rmse": report.mean.rmse,
            "mae": report.mean.mae,
            "mape": report.mean.mape,
            "time_s": elapsed,
        }),
    )?;
    run.finish()
}

fn cmd_predict(
    model_path: &Path,
    cycle_path: &Path,
    index: Option<usize>,
    mode: RolloutMode,
    out: Option<PathBuf>,
) -> Result<()> {
    let models = load_models(model_path)?;
    let n = models[0].battery.n;
    let cycles = load_cycles(cycle_path, 0)?;
    let cycle = match index {
        Some(i) => cycles.iter().find(|c| c.cycle_index == i),
        None => cycles.first(),
    }
    .ok_or_else(|| Error::Input(format!("no matching cycle in {}", cycle_path.display())))?;
    if cycle.t_eod() < n + 1 {
        return Err(Error::Input(format!(
            "cycle {} has {} samples; the window needs {n} plus at least one planned step",
            cycle.cycle_index,
            cycle.t_eod()
        )));
    }
    let out = out.unwrap_or_else(|| default_output("predict").join("trajectory.csv"));
    let dir = parent_dir(&out);
    let run = Run::start(
        "predict",
        &dir,
        None,
        &serde_json::json!({"model": model_path, "cycle": cycle_path, "index": cycle.cycle_index, "mode": mode}),
        None,
        &out,
    )?;
    let p = predict_with(&models, cycle, mode)?;
    let mut csv = String::from("step,time_s,current_a,voltage_pred_v,soc,source\n");
    for k in 0..p.len() {
        let (soc, source) = match p.soc_traj[k] {
            Some(s) => (s.to_string(), "predicted"),
            None => (String::new(), "measured"),
        };
        csv += &format!(
            "{},{},{},{},{},{}\n",
            k + 1,
            cycle.time_s[k],
            cycle.current[k],
            p.voltage[k],
            soc,
            source
        );
    }
    fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
    run.finish()
}

fn cmd_embed(model_path: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let models = load_models(model_path)?;
    if models.len() > 1 {
        warn!("embedding with the first of {} ensemble members", models.len());
    }
    let model = &models[0];
    check_data_battery(data, &model.battery)?;
    let cycles = load_cycles(data, model.battery.n)?;
    if cycles.len() < 2 {
        return Err(Error::Input(format!(
            "embedding needs at least 2 cycles, found {}",
            cycles.len()
        )));
    }
    let out = out.unwrap_or_else(|| default_output("embed").join("embedding.csv"));
    let dir = parent_dir(&out);
    let run = Run::start("embed", &dir, None, &serde_json::json!({"model": model_path, "data": data}), None, &out)?;
    let mut embeddings = Vec::with_capacity(cycles.len());
    for c in &cycles {
        embeddings.push(model.encode(&c.window(model.battery.n))?.1);
    }
    let labels: Vec<usize> = cycles.iter().map(|c| c.cycle_index).collect();
    let pca = pca2(&embeddings, &labels)?;
    let mut csv = String::from("cycle,pc1,pc2\n");
    for (pc1, pc2, cycle) in &pca.points {
        csv += &format!("{cycle},{pc1},{pc2}\n");
    }
    fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
    run.finish()
}
