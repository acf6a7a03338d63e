//! Brier scores for cumulative incidence predictions at grid endpoints.

use serde::{Deserialize, Serialize};

use crate::data::{CensoringSurvival, Dataset, TimeGrid, CENSORING_FLOOR};
use crate::error::{Error, Result};

fn check_inputs(grid: &TimeGrid, l: usize, preds: &[f64], ds: &Dataset) -> Result<()> {
    if l > grid.len() {
        return Err(Error::InvalidArgument(format!(
            "evaluation interval {l} beyond grid of {} intervals",
            grid.len()
        )));
    }
    if preds.len() != ds.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} subjects",
            preds.len(),
            ds.len()
        )));
    }
    Ok(())
}

/// Uncensored Brier score at `t_l`: mean of `(1{T ≤ t_l, cause = m} − F̂)²`.
/// `preds[i]` is `F̂_m(t_l | x_i)`.
pub fn brier(grid: &TimeGrid, l: usize, preds: &[f64], ds: &Dataset, cause: usize) -> Result<f64> {
    check_inputs(grid, l, preds, ds)?;
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, &f) in ds.subjects.iter().zip(preds) {
        let li = grid.assign_interval(s.time)?;
        let y = f64::from(u8::from(li <= l && s.cause == cause));
        total += (y - f).powi(2);
    }
    Ok(total / ds.len() as f64)
}

/// IPCW Brier score at `t_l`. Subjects still under observation are weighted
/// by `1/Ĝ(t_l)`, subjects with an event by `t_l` by `1/Ĝ(T_i−)`, and
/// subjects censored by `t_l` contribute nothing.
pub fn brier_ipcw(
    grid: &TimeGrid,
    l: usize,
    preds: &[f64],
    ds: &Dataset,
    cause: usize,
    g: &CensoringSurvival,
) -> Result<f64> {
    check_inputs(grid, l, preds, ds)?;
    if ds.is_empty() {
        return Ok(0.0);
    }
    let weight = |k: usize| {
        let v = g.at(k);
        if v <= CENSORING_FLOOR {
            log::warn!("censoring survival at interval {k} is at the floor {CENSORING_FLOOR}");
        }
        v.max(CENSORING_FLOOR)
    };
    let g_t = weight(l);
    let mut total = 0.0;
    for (s, &f) in ds.subjects.iter().zip(preds) {
        let li = grid.assign_interval(s.time)?;
        if li > l {
            total += f * f / g_t;
        } else if s.is_event() {
            let y = f64::from(u8::from(s.cause == cause));
            total += (y - f).powi(2) / weight(li - 1);
        }
    }
    Ok(total / ds.len() as f64)
}

/// Trapezoidal average of `values` over `times`.
pub fn ibs(times: &[f64], values: &[f64]) -> Result<f64> {
    if times.len() < 2 || times.len() != values.len() {
        return Err(Error::InvalidArgument(
            "integrated score needs >= 2 matching evaluation times".into(),
        ));
    }
    let (t0, t_max) = (times[0], times[times.len() - 1]);
    if t_max <= t0 {
        return Err(Error::InvalidArgument(format!(
            "integration range [{t0}, {t_max}] is empty"
        )));
    }
    Ok(trapezoid(times, values) / (t_max - t0))
}

fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (v[0] + v[1]) * (t[1] - t[0]))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCurve {
    pub cause: usize,
    pub times: Vec<f64>,
    pub bs: Vec<f64>,
    pub t0: f64,
    pub t_max: f64,
    pub ibs: f64,
}

impl ScoreCurve {
    pub fn new(cause: usize, times: Vec<f64>, bs: Vec<f64>) -> Result<Self> {
        let ibs = ibs(&times, &bs)?;
        Ok(Self {
            cause,
            t0: times[0],
            t_max: times[times.len() - 1],
            times,
            bs,
            ibs,
        })
    }

    /// Running average `∫_{t0}^{t_k} BS / (t_k − t0)`; the first entry is `BS(t0)`.
    pub fn cumulative_ibs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.times.len());
        out.push(self.bs[0]);
        let mut area = 0.0;
        for k in 1..self.times.len() {
            area += 0.5 * (self.bs[k - 1] + self.bs[k]) * (self.times[k] - self.times[k - 1]);
            out.push(area / (self.times[k] - self.t0));
        }
        out
    }
}

/// IPCW Brier curve over grid endpoints `t_0..=t_horizon`. `cif[i][l]` is
/// subject `i`'s predicted `F̂_m(t_l)`.
pub fn score_curve(
    grid: &TimeGrid,
    horizon: usize,
    cif: &[&[f64]],
    ds: &Dataset,
    cause: usize,
    g: &CensoringSurvival,
) -> Result<ScoreCurve> {
    if horizon == 0 || horizon > grid.len() {
        return Err(Error::InvalidArgument(format!(
            "horizon interval {horizon} outside 1..={}",
            grid.len()
        )));
    }
    if cif.iter().any(|c| c.len() <= horizon) {
        return Err(Error::Compatibility(format!(
            "predictions do not reach horizon interval {horizon}"
        )));
    }
    let mut times = Vec::with_capacity(horizon + 1);
    let mut bs = Vec::with_capacity(horizon + 1);
    let mut preds = vec![0.0; cif.len()];
    for l in 0..=horizon {
        for (p, c) in preds.iter_mut().zip(cif) {
            *p = c[l];
        }
        times.push(grid.cut(l));
        bs.push(brier_ipcw(grid, l, &preds, ds, cause, g)?);
    }
    ScoreCurve::new(cause, times, bs)
}
