//! Subject records, the discrete time grid, person-period augmentation for
//! both hazard families, and the censoring survival used for IPCW weights.
//!
//! Times are grouped into half-open intervals `(t_{l-1}, t_l]` of equal
//! width, indexed `1..=L`. A time of exactly zero belongs to interval 1.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to the censoring survival before it is used as a
/// denominator.
pub const CENSORING_FLOOR: f64 = 1e-4;

/// A sampled functional covariate on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalCurve {
    pub name: String,
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
}

impl FunctionalCurve {
    pub fn new(name: impl Into<String>, taus: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if taus.len() != values.len() {
            return Err(Error::Data(format!(
                "curve '{name}': {} sample points but {} values",
                taus.len(),
                values.len()
            )));
        }
        if taus.len() < 2 {
            return Err(Error::Data(format!(
                "curve '{name}' needs at least 2 samples"
            )));
        }
        if taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Data(format!(
                "curve '{name}' has sample points outside [0, 1]"
            )));
        }
        if taus.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "curve '{name}' sample points are not strictly increasing"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("curve '{name}' has non-finite values")));
        }
        Ok(Self { name, taus, values })
    }

    /// Piecewise-linear interpolation, flat beyond the sampled range.
    pub fn interpolate(&self, tau: f64) -> f64 {
        let n = self.taus.len();
        if tau <= self.taus[0] {
            return self.values[0];
        }
        if tau >= self.taus[n - 1] {
            return self.values[n - 1];
        }
        let hi = self.taus.partition_point(|&t| t < tau);
        let lo = hi - 1;
        let (t0, t1) = (self.taus[lo], self.taus[hi]);
        let frac = (tau - t0) / (t1 - t0);
        self.values[lo] + frac * (self.values[hi] - self.values[lo])
    }
}

/// One subject: tabular covariates with a missingness mask, functional
/// curves, the observed time `min(T, C)` and the observed cause (0 = censored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Missing entries hold `NaN`.
    pub x: Vec<f64>,
    pub missing: Vec<bool>,
    pub curves: Vec<FunctionalCurve>,
    pub time: f64,
    pub cause: usize,
}

impl SubjectRecord {
    pub fn new(
        id: impl Into<String>,
        x: Vec<Option<f64>>,
        curves: Vec<FunctionalCurve>,
        time: f64,
        cause: usize,
    ) -> Result<Self> {
        let id = id.into();
        if !(time >= 0.0) || !time.is_finite() {
            return Err(Error::Data(format!("subject '{id}': invalid time {time}")));
        }
        let missing: Vec<bool> = x.iter().map(Option::is_none).collect();
        let x: Vec<f64> = x.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        if x.iter().zip(&missing).any(|(v, &m)| !m && !v.is_finite()) {
            return Err(Error::Data(format!("subject '{id}': non-finite covariate")));
        }
        Ok(Self {
            id,
            x,
            missing,
            curves,
            time,
            cause,
        })
    }

    pub fn is_event(&self) -> bool {
        self.cause >= 1
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }
}

/// A collection of subjects sharing covariate names and functional signals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub covariate_names: Vec<String>,
    pub subjects: Vec<SubjectRecord>,
}

impl Dataset {
    pub fn new(covariate_names: Vec<String>, subjects: Vec<SubjectRecord>) -> Result<Self> {
        let ds = Self {
            covariate_names,
            subjects,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.covariate_names.len();
        let signals = self.signal_names();
        for s in &self.subjects {
            if s.x.len() != p || s.missing.len() != p {
                return Err(Error::Data(format!(
                    "subject '{}' has {} covariates, expected {p}",
                    s.id,
                    s.x.len()
                )));
            }
            let names: Vec<&str> = s.curves.iter().map(|c| c.name.as_str()).collect();
            if names != signals.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::Data(format!(
                    "subject '{}' has signals {names:?}, expected {signals:?}",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Signal names, taken from the first subject.
    pub fn signal_names(&self) -> Vec<String> {
        self.subjects
            .first()
            .map(|s| s.curves.iter().map(|c| c.name.clone()).collect())
            .unwrap_or_default()
    }

    pub fn max_cause(&self) -> usize {
        self.subjects.iter().map(|s| s.cause).max().unwrap_or(0)
    }

    pub fn missing_count(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| s.missing.iter().filter(|&&m| m).count())
            .sum()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            covariate_names: self.covariate_names.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }
}

/// Equal-width cut points `0 = t_0 < t_1 < ... < t_L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    width: f64,
    intervals: usize,
}

/// Ratio `a / b` rounded up, ignoring floating-point dust just above an integer.
fn ceil_ratio(a: f64, b: f64) -> f64 {
    let q = a / b;
    let r = q.round();
    if (q - r).abs() <= 1e-9 * q.abs().max(1.0) {
        r
    } else {
        q.ceil()
    }
}

impl TimeGrid {
    pub fn new(max_time: f64, width: f64) -> Result<Self> {
        if !(max_time > 0.0 && max_time.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "max_time must be positive, got {max_time}"
            )));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "width must be positive, got {width}"
            )));
        }
        let intervals = ceil_ratio(max_time, width) as usize;
        Ok(Self {
            width,
            intervals: intervals.max(1),
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// Number of intervals `L`.
    pub fn len(&self) -> usize {
        self.intervals
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cut point `t_l` for `l` in `0..=L`.
    pub fn cut(&self, l: usize) -> f64 {
        l as f64 * self.width
    }

    pub fn cuts(&self) -> Vec<f64> {
        (0..=self.intervals).map(|l| self.cut(l)).collect()
    }

    pub fn max_time(&self) -> f64 {
        self.cut(self.intervals)
    }

    /// Smallest `l` with `time <= t_l`; zero maps to interval 1.
    pub fn assign_interval(&self, time: f64) -> Result<usize> {
        let max = self.max_time();
        if !(time >= 0.0) || time > max * (1.0 + 1e-12) {
            return Err(Error::OutOfRange { time, max });
        }
        let l = ceil_ratio(time, self.width) as usize;
        Ok(l.clamp(1, self.intervals))
    }
}

pub fn build_time_grid(max_time: f64, width: f64) -> Result<TimeGrid> {
    TimeGrid::new(max_time, width)
}

/// Which model family a person-period table was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TableKind {
    /// Multinomial targets in `0..=causes`.
    CauseSpecific { causes: usize },
    /// Binary targets for one cause with IPCW weights.
    SubDistribution { cause: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersonPeriodRow {
    /// Index into the dataset the table was built from.
    pub subject: usize,
    /// Interval index, 1-based.
    pub interval: usize,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonPeriodTable {
    pub kind: TableKind,
    pub intervals: usize,
    pub rows: Vec<PersonPeriodRow>,
}

impl PersonPeriodTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of rows per interval, i.e. `|R_l|` for `l = 1..=L` (index 0 unused).
    pub fn risk_set_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.intervals + 1];
        for r in &self.rows {
            sizes[r.interval] += 1;
        }
        sizes
    }
}

/// Long-format rows for the cause-specific model: category 0 while at risk,
/// the observed cause in the event interval, 0 in a censoring interval.
pub fn augment_cause_specific(
    ds: &Dataset,
    grid: &TimeGrid,
    causes: usize,
) -> Result<PersonPeriodTable> {
    let mut rows = Vec::new();
    for (i, s) in ds.subjects.iter().enumerate() {
        if s.cause > causes {
            return Err(Error::InvalidArgument(format!(
                "subject '{}' has cause {} but only {causes} causes are modelled",
                s.id, s.cause
            )));
        }
        let last = grid.assign_interval(s.time)?;
        for t in 1..=last {
            let target = if t == last { s.cause } else { 0 };
            rows.push(PersonPeriodRow {
                subject: i,
                interval: t,
                target,
                weight: 1.0,
            });
        }
    }
    Ok(PersonPeriodTable {
        kind: TableKind::CauseSpecific { causes },
        intervals: grid.len(),
        rows,
    })
}

/// Kaplan–Meier estimate of `G(t) = P(C > t)` at the interval endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoringSurvival {
    /// `g[l]` for `l = 0..=L`, `g[0] = 1`, floored at [`CENSORING_FLOOR`].
    pub g: Vec<f64>,
}

impl CensoringSurvival {
    /// `Ĝ(l)`; indices past the end carry the last value forward.
    pub fn at(&self, l: usize) -> f64 {
        self.g[l.min(self.g.len() - 1)]
    }

    pub fn intervals(&self) -> usize {
        self.g.len() - 1
    }
}

/// Censoring is the "event" here; a subject with an event counts as censored
/// for this estimator. Events and censorings never tie within a subject
/// because each subject carries one cause.
pub fn censoring_survival(ds: &Dataset, grid: &TimeGrid) -> Result<CensoringSurvival> {
    let l_max = grid.len();
    let mut exits = vec![0usize; l_max + 2];
    let mut censored = vec![0usize; l_max + 1];
    for s in &ds.subjects {
        let l = grid.assign_interval(s.time)?;
        exits[l] += 1;
        if s.cause == 0 {
            censored[l] += 1;
        }
    }
    let mut at_risk = ds.len();
    let mut g = Vec::with_capacity(l_max + 1);
    let mut cur = 1.0;
    g.push(cur);
    for l in 1..=l_max {
        if at_risk > 0 {
            cur *= 1.0 - censored[l] as f64 / at_risk as f64;
        }
        at_risk -= exits[l];
        g.push(cur.max(CENSORING_FLOOR));
    }
    Ok(CensoringSurvival { g })
}

/// IPCW weight `w_it` for interval `t` of a subject whose observed time falls
/// in interval `subject_interval` with observed cause `cause`, when `target`
/// is the modelled cause.
pub fn subdistribution_weight(
    t: usize,
    subject_interval: usize,
    cause: usize,
    target: usize,
    g: &CensoringSurvival,
) -> f64 {
    let at_risk = t <= subject_interval;
    let competing_past = subject_interval < t && cause != 0 && cause != target;
    if !(at_risk || competing_past) {
        return 0.0;
    }
    let denom_at = t.min(subject_interval) - 1;
    g.at(t - 1) / g.at(denom_at)
}

/// Long-format rows for the sub-distribution model of cause `target`:
/// intervals `1..L-1` per subject, zero-weight rows dropped.
pub fn augment_subdistribution(
    ds: &Dataset,
    grid: &TimeGrid,
    target: usize,
    g: &CensoringSurvival,
) -> Result<PersonPeriodTable> {
    if target == 0 {
        return Err(Error::InvalidArgument(
            "sub-distribution target cause must be >= 1".into(),
        ));
    }
    let mut rows = Vec::new();
    for (i, s) in ds.subjects.iter().enumerate() {
        let li = grid.assign_interval(s.time)?;
        for t in 1..grid.len() {
            let weight = subdistribution_weight(t, li, s.cause, target, g);
            if weight == 0.0 {
                continue;
            }
            let y = usize::from(t == li && s.cause == target);
            rows.push(PersonPeriodRow {
                subject: i,
                interval: t,
                target: y,
                weight,
            });
        }
    }
    Ok(PersonPeriodTable {
        kind: TableKind::SubDistribution { cause: target },
        intervals: grid.len(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// CSV formats
// ---------------------------------------------------------------------------

const SUBJECT_FIXED: [&str; 3] = ["id", "time", "cause"];
const CURVE_HEADER: [&str; 4] = ["id", "signal_name", "tau", "value"];

fn schema(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

fn parse_f64(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| schema(row, column, format!("cannot parse '{cell}' as a number")))?;
    if !v.is_finite() {
        return Err(schema(row, column, format!("non-finite value '{cell}'")));
    }
    Ok(v)
}

/// Tabular part of a subject CSV: covariate names and subjects without curves.
pub fn read_subjects<R: Read>(reader: R) -> Result<(Vec<String>, Vec<SubjectRecord>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 3 || header.iter().take(3).ne(SUBJECT_FIXED) {
        return Err(schema(
            1,
            "header",
            "expected leading columns id,time,cause",
        ));
    }
    let names: Vec<String> = header.iter().skip(3).map(str::to_string).collect();
    let mut subjects = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(schema(
                row,
                "*",
                format!("{} cells, expected {}", rec.len(), header.len()),
            ));
        }
        let id = rec[0].to_string();
        let time = parse_f64(&rec[1], row, "time")?;
        if time < 0.0 {
            return Err(schema(row, "time", "negative time"));
        }
        let cause: usize = rec[2].trim().parse().map_err(|_| {
            schema(
                row,
                "cause",
                format!("cannot parse '{}' as a cause", &rec[2]),
            )
        })?;
        let mut x = Vec::with_capacity(names.len());
        for (j, name) in names.iter().enumerate() {
            let cell = &rec[j + 3];
            x.push(if cell.trim().is_empty() {
                None
            } else {
                Some(parse_f64(cell, row, name)?)
            });
        }
        subjects.push(SubjectRecord::new(id, x, Vec::new(), time, cause)?);
    }
    Ok((names, subjects))
}

/// Long-format curves keyed by subject id, signals in first-seen order.
pub fn read_curves<R: Read>(
    reader: R,
) -> Result<(Vec<String>, HashMap<String, Vec<FunctionalCurve>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CURVE_HEADER) {
        return Err(schema(
            1,
            "header",
            "expected columns id,signal_name,tau,value",
        ));
    }
    let mut signals: Vec<String> = Vec::new();
    // id -> signal -> (taus, values)
    let mut samples: HashMap<String, HashMap<String, (Vec<f64>, Vec<f64>)>> = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        if rec.len() != 4 {
            return Err(schema(row, "*", format!("{} cells, expected 4", rec.len())));
        }
        let signal = rec[1].to_string();
        if !signals.contains(&signal) {
            signals.push(signal.clone());
        }
        let tau = parse_f64(&rec[2], row, "tau")?;
        let value = parse_f64(&rec[3], row, "value")?;
        let entry = samples
            .entry(rec[0].to_string())
            .or_default()
            .entry(signal)
            .or_default();
        entry.0.push(tau);
        entry.1.push(value);
    }
    let mut curves = HashMap::new();
    for (id, mut by_signal) in samples {
        let mut list = Vec::with_capacity(signals.len());
        for name in &signals {
            let (taus, values) = by_signal.remove(name).ok_or_else(|| {
                Error::Data(format!("subject '{id}' has no samples for signal '{name}'"))
            })?;
            list.push(FunctionalCurve::new(name.clone(), taus, values)?);
        }
        curves.insert(id, list);
    }
    Ok((signals, curves))
}

/// Joins a subject CSV with an optional curve CSV.
pub fn load_dataset(subjects: &Path, curves: Option<&Path>) -> Result<Dataset> {
    let (names, mut records) = read_subjects(std::fs::File::open(subjects)?)?;
    if let Some(path) = curves {
        let (_, mut by_id) = read_curves(std::fs::File::open(path)?)?;
        for s in &mut records {
            s.curves = by_id
                .remove(&s.id)
                .ok_or_else(|| Error::Data(format!("no curves for subject '{}'", s.id)))?;
        }
    }
    Dataset::new(names, records)
}

pub fn write_subjects<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<&str> = SUBJECT_FIXED
        .iter()
        .copied()
        .chain(ds.covariate_names.iter().map(String::as_str))
        .collect();
    w.write_record(&header)?;
    for s in &ds.subjects {
        let mut rec = vec![s.id.clone(), s.time.to_string(), s.cause.to_string()];
        rec.extend(s.x.iter().zip(&s.missing).map(
            |(v, &m)| {
                if m {
                    String::new()
                } else {
                    v.to_string()
                }
            },
        ));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curves<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CURVE_HEADER)?;
    for s in &ds.subjects {
        for c in &s.curves {
            for (tau, v) in c.taus.iter().zip(&c.values) {
                w.write_record([s.id.as_str(), &c.name, &tau.to_string(), &v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
