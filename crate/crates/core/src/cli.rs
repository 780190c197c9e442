//! Command implementations behind the `platewave` binary; kept in the library
//! so runs are scriptable and testable without spawning processes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{
    baseline_equivariance_error, first_arrival_sample, input_equivariance_field,
    learned_equivariance_field, symmetry_weight_report,
};
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, save_checkpoint, Model, ModelSpec, Task, Variant};
use crate::signals::{
    balance_detection, curate, generate_dataset, load_dataset, save_dataset, split,
    CurationThresholds, PlateConfig, SymmetryBreakSpec,
};
use crate::training::{
    ablate_windows, evaluate_prepared_detector, evaluate_prepared_locator, prepare, train,
    window_to_samples, HistoryRecord, OneCycleSchedule, TrainConfig, ABLATION_WINDOWS_MS,
};

/// Model scale: reference widths or a small configuration for quick runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::InvalidArgument(format!("unknown scale {other}"))),
        }
    }
}

impl Scale {
    pub fn spec(self, variant: Variant, task: Task, seed: u64) -> ModelSpec {
        match self {
            Scale::Full => ModelSpec::full_scale(variant, task, seed),
            Scale::Desk => ModelSpec::desk_scale(variant, task, seed),
        }
    }
}

fn variant_label(v: Variant) -> &'static str {
    match v {
        Variant::Ordinary => "ordinary",
        Variant::Exact => "exact",
        Variant::Approximate => "approx",
    }
}

fn task_label(t: Task) -> &'static str {
    match t {
        Task::Locate => "locate",
        Task::Detect => "detect",
    }
}

/// Parse a `t0:t1` window in ms.
pub fn parse_window(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("window '{s}' is not t0:t1")))?;
    let parse = |x: &str| {
        x.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad window bound '{x}'")))
    };
    Ok((parse(a)?, parse(b)?))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn emit(record: &serde_json::Value) {
    println!("{record}");
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub out: PathBuf,
    pub grid: Option<usize>,
    pub seed: u64,
    pub sym_break: Option<PathBuf>,
    pub noise: Option<f64>,
    pub span: Option<f64>,
}

pub fn cmd_synth(cfg: &SynthConfig) -> Result<()> {
    let mut plate = PlateConfig::default();
    if let Some(n) = cfg.grid {
        if n < 1 {
            return Err(Error::InvalidArgument("grid must be at least 1".into()));
        }
        plate.grid_n = n;
    }
    if let Some(noise) = cfg.noise {
        if noise < 0.0 {
            return Err(Error::InvalidArgument("noise must be non-negative".into()));
        }
        plate.noise = noise;
    }
    if let Some(span) = cfg.span {
        if !(0.0 < span && span < plate.side_mm) {
            return Err(Error::InvalidArgument("span must fit inside the plate".into()));
        }
        plate.grid_span_mm = span;
    }
    let sym: SymmetryBreakSpec = match &cfg.sym_break {
        Some(path) => serde_json::from_reader(std::fs::File::open(path)?)?,
        None => SymmetryBreakSpec::default(),
    };
    let ds = generate_dataset(&plate, &sym, cfg.seed)?;
    let ds = curate(ds, &CurationThresholds::default())?;
    save_dataset(&ds, &cfg.out)?;
    emit(&json!({
        "record": "synth",
        "out": cfg.out,
        "examples": ds.examples.len(),
        "baselines": ds.baselines.len(),
        "grid": plate.grid_n,
        "seed": cfg.seed,
        "symmetric": sym.is_zero(),
        "curation": {
            "removed_spectral": ds.curation.removed_spectral,
            "removed_received": ds.curation.removed_received,
            "removed_amplitude": ds.curation.removed_amplitude,
        },
    }));
    Ok(())
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub task: Task,
    pub variant: Variant,
    pub scale: Scale,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub out: PathBuf,
    pub window: Option<(f64, f64)>,
    pub split_ratio: f64,
    pub batch_size: usize,
    pub balance: bool,
    pub average_logits: bool,
}

/// Everything needed to rebuild the evaluation of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub dataset: PathBuf,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub balance: bool,
    pub average_logits: bool,
    pub window: Option<(usize, usize)>,
    pub final_record: HistoryRecord,
}

pub fn artifact(out: &Path, kind: &str, cfg: &RunConfig, seed: u64, ext: &str) -> PathBuf {
    out.join(format!(
        "{kind}_{}_{}_seed{seed}.{ext}",
        task_label(cfg.task),
        variant_label(cfg.variant)
    ))
}

fn window_samples(cfg_window: Option<(f64, f64)>, plate: &PlateConfig) -> Result<Option<(usize, usize)>> {
    cfg_window
        .map(|(t0, t1)| window_to_samples(t0, t1, plate.window_ms, plate.trim, plate.compressed_len()))
        .transpose()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed required".into()));
    }
    if !(0.0 < cfg.split_ratio && cfg.split_ratio < 1.0) {
        return Err(Error::InvalidArgument("split ratio must be in (0, 1)".into()));
    }
    if cfg.balance && cfg.task != Task::Detect {
        return Err(Error::InvalidArgument("--balance applies to detection only".into()));
    }
    ensure_dir(&cfg.out)?;
    let base = load_dataset(&cfg.dataset)?;
    let window = window_samples(cfg.window, &base.plate)?;

    let mut finals: Vec<HistoryRecord> = Vec::new();
    for &seed in &cfg.seeds {
        let ds = if cfg.balance {
            balance_detection(base.clone(), seed)?
        } else {
            base.clone()
        };
        let (train_ds, test_ds) = split(&ds, cfg.split_ratio, seed)?;
        let mut model = Model::build(cfg.scale.spec(cfg.variant, cfg.task, seed))?;
        let history_path = artifact(&cfg.out, "history", cfg, seed, "jsonl");
        let tcfg = TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed,
            schedule: OneCycleSchedule::for_task(cfg.task),
            average_logits: cfg.average_logits,
            history_path: Some(history_path.clone()),
            window,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &train_ds, &test_ds, &tcfg)?;
        let last = history
            .last()
            .ok_or_else(|| Error::InvalidArgument("epochs must be positive".into()))?
            .clone();
        let ckpt = artifact(&cfg.out, "ckpt", cfg, seed, "pwck");
        save_checkpoint(&model, None, &ckpt)?;
        let meta = RunMeta {
            dataset: cfg.dataset.clone(),
            split_ratio: cfg.split_ratio,
            split_seed: seed,
            balance: cfg.balance,
            average_logits: cfg.average_logits,
            window,
            final_record: last.clone(),
        };
        let meta_path = meta_path_for(&ckpt);
        serde_json::to_writer_pretty(std::fs::File::create(&meta_path)?, &meta)?;
        emit(&json!({
            "record": "train",
            "seed": seed,
            "checkpoint": ckpt,
            "history": history_path,
            "final": last,
        }));
        finals.push(last);
    }

    let mean_spread = |f: &dyn Fn(&HistoryRecord) -> Option<f64>| -> Option<(f64, f64)> {
        let vals: Vec<f64> = finals.iter().filter_map(|r| f(r)).collect();
        if vals.len() != finals.len() {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        Some((mean, var.sqrt()))
    };
    let mut summary = json!({
        "record": "summary",
        "task": task_label(cfg.task),
        "variant": variant_label(cfg.variant),
        "seeds": cfg.seeds,
    });
    if let Some((m, s)) = mean_spread(&|r| r.test_mde) {
        summary["test_mde_mm"] = json!({"mean": m, "spread": s});
    }
    if let Some((m, s)) = mean_spread(&|r| r.test_accuracy) {
        summary["test_accuracy"] = json!({"mean": m, "spread": s});
    }
    if let Some((m, s)) = mean_spread(&|r| Some(r.test_loss)) {
        summary["test_loss"] = json!({"mean": m, "spread": s});
    }
    emit(&summary);
    Ok(())
}

pub fn meta_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("meta.json")
}

/// Re-evaluate a checkpoint on its recorded test split; reproduces the final
/// history-row test metrics exactly.
pub fn cmd_eval(checkpoint: &Path, dataset_override: Option<&Path>) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let meta_path = meta_path_for(checkpoint);
    let meta: RunMeta = serde_json::from_reader(std::fs::File::open(&meta_path).map_err(|_| {
        Error::Data(format!("missing run metadata {}", meta_path.display()))
    })?)?;
    let ds_path = dataset_override.unwrap_or(&meta.dataset);
    let ds = load_dataset(ds_path)?;
    let ds = if meta.balance {
        balance_detection(ds, meta.split_seed)?
    } else {
        ds
    };
    let (_, test_ds) = split(&ds, meta.split_ratio, meta.split_seed)?;
    let test_set = prepare(&model, &test_ds, meta.window)?;
    let report = match model.spec().task {
        Task::Locate => {
            let m = evaluate_prepared_locator(&model, &test_set, &TrainConfig::default().loss)?;
            json!({
                "record": "eval",
                "task": "locate",
                "test_loss": m.rmse * m.rmse,
                "test_mde": m.mde,
                "var": m.var,
                "std": m.std,
                "rmse": m.rmse,
                "matches_final_history_row":
                    m.mde == meta.final_record.test_mde.unwrap_or(f64::NAN)
                        && m.rmse * m.rmse == meta.final_record.test_loss,
            })
        }
        Task::Detect => {
            let m = evaluate_prepared_detector(&model, &test_set, meta.average_logits)?;
            json!({
                "record": "eval",
                "task": "detect",
                "test_loss": m.bce,
                "test_accuracy": m.accuracy,
                "perplexity": m.perplexity,
                "matches_final_history_row":
                    m.accuracy == meta.final_record.test_accuracy.unwrap_or(f64::NAN)
                        && m.bce == meta.final_record.test_loss,
            })
        }
    };
    emit(&report);
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    if cfg.task != Task::Locate {
        return Err(Error::InvalidArgument("ablation is a localization study".into()));
    }
    ensure_dir(&cfg.out)?;
    let seed = *cfg.seeds.first().unwrap_or(&0);
    let ds = load_dataset(&cfg.dataset)?;
    let (train_ds, test_ds) = split(&ds, cfg.split_ratio, seed)?;
    let spec = cfg.scale.spec(cfg.variant, cfg.task, seed);
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed,
        schedule: OneCycleSchedule::for_task(cfg.task),
        ..TrainConfig::default()
    };
    let rows = ablate_windows(&spec, &train_ds, &test_ds, &tcfg, &ABLATION_WINDOWS_MS)?;
    let mut csv = String::from("t0_ms,t1_ms,lo,hi,mde_mm,rmse_mm\n");
    for r in &rows {
        emit(&json!({"record": "ablation", "row": r}));
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.t0_ms, r.t1_ms, r.samples.0, r.samples.1, r.mde, r.rmse
        ));
    }
    std::fs::write(cfg.out.join("ablation.csv"), csv)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// equivariance / weights
// ---------------------------------------------------------------------------

pub fn cmd_equivariance(
    dataset: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    cutoff: Option<usize>,
) -> Result<()> {
    ensure_dir(out)?;
    let ds = load_dataset(dataset)?;
    let cutoff = cutoff.unwrap_or_else(|| first_arrival_sample(&ds.plate));
    let (r0, spread) = baseline_equivariance_error(&ds.baselines, cutoff)?;
    emit(&json!({
        "record": "baseline_equivariance",
        "r0_mean": r0,
        "r0_spread": spread,
        "cutoff_sample": cutoff,
    }));
    let field = input_equivariance_field(&ds)?;
    std::fs::write(out.join("input_field.csv"), field.to_csv())?;
    emit(&json!({"record": "input_field", "csv": out.join("input_field.csv")}));
    if let Some(ckpt) = checkpoint {
        let (model, _) = load_checkpoint(ckpt)?;
        let learned = learned_equivariance_field(&model, &ds)?;
        std::fs::write(out.join("learned_field_raw.csv"), learned.raw.to_csv())?;
        std::fs::write(
            out.join("learned_field_normalized.csv"),
            learned.normalized.to_csv(),
        )?;
        let mut max_q = 0.0f64;
        for iy in 0..learned.raw.n {
            for ix in 0..learned.raw.n {
                if let Some(v) = learned.raw.value(ix, iy) {
                    max_q = max_q.max(v);
                }
            }
        }
        emit(&json!({
            "record": "learned_field",
            "max_q": max_q,
            "raw_csv": out.join("learned_field_raw.csv"),
            "normalized_csv": out.join("learned_field_normalized.csv"),
        }));
    }
    Ok(())
}

pub fn cmd_weights(checkpoint: &Path) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let report = symmetry_weight_report(&model)?;
    for l in &report.layers {
        emit(&json!({
            "record": "omega",
            "layer": l.layer,
            "omega": l.omega,
            "max_deviation": l.max_deviation,
        }));
    }
    emit(&json!({
        "record": "omega_trend",
        "monotone_decreasing": report.monotone_decreasing,
    }));
    Ok(())
}

/// Exit code for an error per the command contract.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}
