//! The `fcrn` pipeline: simulate, train, predict and evaluate, driven by a
//! single JSON run configuration with dotted-path overrides.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use fcrn_core::data::{censoring_survival, load_dataset, Dataset, TimeGrid};
use fcrn_core::eval::{score_curve, ScoreCurve};
use fcrn_core::model::{self, FcrnModel, HazardPrediction, Head, TrainConfig, TrainOutcome};
use fcrn_core::mvi::write_imputation_audit;
use fcrn_core::synth::{simulate, write_simulation, SimConfig};
use fcrn_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_COMPAT: i32 = 5;

/// Process exit code for a core error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IO,
        Error::Csv(e) if e.is_io_error() => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Compatibility(_) | Error::OutOfRange { .. } | Error::State(_) => EXIT_COMPAT,
        _ => EXIT_SCHEMA,
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train_subjects: Option<PathBuf>,
    pub train_curves: Option<PathBuf>,
    pub test_subjects: Option<PathBuf>,
    pub test_curves: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub width: f64,
    pub max_time: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            width: 5.0,
            max_time: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Csm,
    Sdm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Target cause for the sub-distribution head.
    pub cause: usize,
    /// Number of causes for the cause-specific head; inferred when absent.
    pub causes: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Csm,
            cause: 1,
            causes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Integration horizons in time units; empty means the grid end.
    pub horizons: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![100.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub grid: GridConfig,
    pub head: HeadConfig,
    /// Imputation-regularized training for data with missing cells.
    pub mvi: bool,
    pub train: TrainConfig,
    pub simulate: SimConfig,
    pub evaluate: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("fcrn-out"),
            data: DataPaths::default(),
            grid: GridConfig::default(),
            head: HeadConfig::default(),
            mvi: true,
            train: TrainConfig::default(),
            simulate: SimConfig::default(),
            evaluate: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then `key=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("run config: {e}")))?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<TimeGrid, Error> {
        TimeGrid::new(self.grid.max_time, self.grid.width)
    }

    pub fn head_for(&self, ds: &Dataset) -> Result<Head, Error> {
        match self.head.kind {
            HeadKind::Csm => {
                let causes = self.head.causes.unwrap_or_else(|| ds.max_cause().max(1));
                if causes == 0 || causes < ds.max_cause() {
                    return Err(Error::Config(format!(
                        "head.causes = {causes} but the data contain cause {}",
                        ds.max_cause()
                    )));
                }
                Ok(Head::CauseSpecific { causes })
            }
            HeadKind::Sdm => {
                if self.head.cause == 0 {
                    return Err(Error::Config("head.cause must be >= 1".into()));
                }
                Ok(Head::SubDistribution {
                    cause: self.head.cause,
                })
            }
        }
    }

    /// Training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            ..self.simulate.clone()
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path such as `train.batch_size=32`. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), Error> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (k, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{path}`: `{key}` is not inside an object")))?;
        if k + 1 == keys.len() {
            if !obj.contains_key(*key) {
                return Err(Error::Config(format!("unknown config key `{path}`")));
            }
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
    }
    unreachable!("split always yields at least one key")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf, Error> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set")))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), Error> {
    let sim = simulate(&cfg.sim_config())?;
    write_simulation(&sim, &cfg.output_dir)?;
    write_json(&cfg.output_dir.join("simulate_config.json"), cfg)?;
    log::info!(
        "wrote {} train and {} test subjects to {}",
        sim.train.len(),
        sim.test.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

pub fn load_train(cfg: &RunConfig) -> Result<Dataset, Error> {
    let subjects = require(&cfg.data.train_subjects, "data.train_subjects")?;
    load_dataset(&subjects, cfg.data.train_curves.as_deref())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, Error> {
    let ds = load_train(cfg)?;
    let grid = cfg.grid()?;
    let head = cfg.head_for(&ds)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let missing = ds.missing_count();
    if missing > 0 && !cfg.mvi {
        return Err(Error::Config(format!(
            "{missing} missing covariate cells but mvi is disabled"
        )));
    }
    let outcome = model::train(&ds, grid, head, &cfg.train_config())?;
    let dir = &cfg.output_dir;
    write_json(&dir.join("model.json"), &outcome.model)?;

    let mut w = csv::Writer::from_path(dir.join("epochs.csv")).map_err(Error::from)?;
    w.write_record([
        "basis_count",
        "epoch",
        "train_loss",
        "train_total",
        "val_loss",
        "impute_lr",
    ])?;
    for e in &outcome.epochs {
        w.write_record([
            e.basis_count.to_string(),
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.train_total.to_string(),
            e.val_loss.to_string(),
            e.impute_lr.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut log = csv::Writer::from_path(dir.join("train_log.csv"))?;
    log.write_record(["key", "value"])?;
    log.write_record(["subjects", &ds.len().to_string()])?;
    log.write_record(["missing_cells", &missing.to_string()])?;
    if missing == 0 {
        log.write_record(["mvi", "skipped: no missing cells"])?;
        log::info!("no missing cells; imputation skipped");
    } else {
        log.write_record(["mvi", "ran"])?;
    }
    for (d, loss) in &outcome.search {
        log.write_record([
            "validation_loss_d".to_string() + &d.to_string(),
            loss.to_string(),
        ])?;
    }
    log.write_record([
        "selected_basis_count",
        &outcome.model.basis_count().to_string(),
    ])?;
    log.write_record(["epochs_run", &outcome.epochs.len().to_string()])?;
    log.flush()?;

    if let Some(imp) = &outcome.imputed {
        write_imputation_audit(
            imp,
            fs::File::create(dir.join("imputed.csv"))?,
            fs::File::create(dir.join("imputed_mask.csv"))?,
        )?;
    }
    write_json(&dir.join("train_config.json"), cfg)?;
    Ok(outcome)
}

pub fn load_model(path: &Path) -> Result<FcrnModel, Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Compatibility(format!("{}: not a model file: {e}", path.display())))
}

/// Header and rows of the prediction CSV for one model.
pub fn prediction_table(
    model: &FcrnModel,
    preds: &[HazardPrediction],
) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = vec!["id".into(), "interval".into(), "time".into()];
    if matches!(model.head, Head::CauseSpecific { .. }) {
        header.push("survival".into());
    }
    header.extend(
        model
            .head
            .modelled_causes()
            .iter()
            .map(|c| format!("cif_{c}")),
    );
    let mut rows = Vec::new();
    for p in preds {
        for l in 0..=model.grid.len() {
            let mut r = vec![p.id.clone(), l.to_string(), model.grid.cut(l).to_string()];
            if let Some(s) = &p.survival {
                r.push(s[l].to_string());
            }
            r.extend(p.cif.iter().map(|f| f[l].to_string()));
            rows.push(r);
        }
    }
    (header, rows)
}

pub fn cmd_predict(
    model_path: &Path,
    subjects: &Path,
    curves: Option<&Path>,
    out: &Path,
) -> Result<Vec<HazardPrediction>, Error> {
    let model = load_model(model_path)?;
    let ds = load_dataset(subjects, curves)?;
    let preds = model.predict(&ds)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (header, rows) = prediction_table(&model, &preds);
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(preds)
}

/// Predictions read back from CSV: per subject id, CIF curves by cause over
/// intervals `0..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub width: f64,
    pub intervals: usize,
    pub causes: Vec<usize>,
    pub cif: HashMap<String, Vec<Vec<f64>>>,
}

pub fn read_predictions(path: &Path) -> Result<PredictionFile, Error> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 4 || &header[0] != "id" || &header[1] != "interval" || &header[2] != "time" {
        return Err(Error::Schema {
            row: 0,
            column: "header".into(),
            message: "expected id,interval,time,...".into(),
        });
    }
    let mut causes = Vec::new();
    let mut cols = Vec::new();
    for (k, name) in header.iter().enumerate().skip(3) {
        if let Some(c) = name.strip_prefix("cif_") {
            let c: usize = c.parse().map_err(|_| Error::Schema {
                row: 0,
                column: name.into(),
                message: "bad cause label".into(),
            })?;
            causes.push(c);
            cols.push(k);
        }
    }
    if causes.is_empty() {
        return Err(Error::Schema {
            row: 0,
            column: "header".into(),
            message: "no cif_ columns".into(),
        });
    }
    let mut cif: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    let mut width = f64::NAN;
    let mut intervals = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let num = |k: usize| -> Result<f64, Error> {
            rec[k].parse::<f64>().map_err(|_| Error::Schema {
                row,
                column: header[k].to_string(),
                message: format!("`{}` is not a number", &rec[k]),
            })
        };
        let l: usize = rec[1].parse().map_err(|_| Error::Schema {
            row,
            column: "interval".into(),
            message: format!("`{}` is not an interval index", &rec[1]),
        })?;
        if l == 1 {
            width = num(2)?;
        }
        intervals = intervals.max(l);
        let entry = cif
            .entry(rec[0].to_string())
            .or_insert_with(|| vec![Vec::new(); causes.len()]);
        for (slot, &k) in entry.iter_mut().zip(&cols) {
            if slot.len() != l {
                return Err(Error::Schema {
                    row,
                    column: "interval".into(),
                    message: "intervals must run 0, 1, 2, ... per subject".into(),
                });
            }
            slot.push(num(k)?);
        }
    }
    Ok(PredictionFile {
        width,
        intervals,
        causes,
        cif,
    })
}

/// One score curve per (horizon, cause).
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub blocks: Vec<(f64, ScoreCurve)>,
}

pub fn evaluate_predictions(
    preds: &PredictionFile,
    ds: &Dataset,
    horizons: &[f64],
) -> Result<Scores, Error> {
    if preds.intervals == 0 || !preds.width.is_finite() {
        return Err(Error::Compatibility(
            "predictions carry no intervals".into(),
        ));
    }
    let grid = TimeGrid::new(preds.width * preds.intervals as f64, preds.width)?;
    let g = censoring_survival(ds, &grid)?;
    let horizons: Vec<f64> = if horizons.is_empty() {
        vec![grid.max_time()]
    } else {
        horizons.to_vec()
    };
    let mut blocks = Vec::new();
    for &h in &horizons {
        if !(h > 0.0) {
            return Err(Error::Config(format!("horizon {h} must be positive")));
        }
        let l = grid.assign_interval(h).map_err(|_| {
            Error::Compatibility(format!(
                "horizon {h} beyond predictions ending at {}",
                grid.max_time()
            ))
        })?;
        for (k, &cause) in preds.causes.iter().enumerate() {
            let cif = ds
                .subjects
                .iter()
                .map(|s| {
                    preds
                        .cif
                        .get(&s.id)
                        .map(|c| c[k].as_slice())
                        .ok_or_else(|| {
                            Error::Compatibility(format!("no predictions for subject {}", s.id))
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            blocks.push((h, score_curve(&grid, l, &cif, ds, cause, &g)?));
        }
    }
    Ok(Scores { blocks })
}

pub fn cmd_evaluate(
    predictions: &Path,
    subjects: &Path,
    curves: Option<&Path>,
    horizons: &[f64],
    out_dir: &Path,
) -> Result<Scores, Error> {
    let preds = read_predictions(predictions)?;
    let ds = load_dataset(subjects, curves)?;
    let scores = evaluate_predictions(&preds, &ds, horizons)?;
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("scores.csv"))?;
    w.write_record(["horizon", "cause", "time", "bs", "cumulative_ibs"])?;
    let mut s = csv::Writer::from_path(out_dir.join("summary.csv"))?;
    s.write_record(["horizon", "cause", "ibs"])?;
    for (h, curve) in &scores.blocks {
        for ((t, bs), cum) in curve
            .times
            .iter()
            .zip(&curve.bs)
            .zip(curve.cumulative_ibs())
        {
            w.write_record([
                h.to_string(),
                curve.cause.to_string(),
                t.to_string(),
                bs.to_string(),
                cum.to_string(),
            ])?;
        }
        s.write_record([
            h.to_string(),
            curve.cause.to_string(),
            curve.ibs.to_string(),
        ])?;
        log::info!("horizon {h} cause {}: IBS {:.4}", curve.cause, curve.ibs);
    }
    w.flush()?;
    s.flush()?;
    Ok(scores)
}
