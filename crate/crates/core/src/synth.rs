//! Synthetic competing-risks datasets: tabular covariates with hidden
//! nonlinear features, B-spline functional covariates, a latent race between
//! a lognormal and a Weibull event time under frailties, uniform censoring
//! and MAR masking.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{write_curves, write_subjects, Dataset, FunctionalCurve, SubjectRecord};
use crate::error::{Error, Result};
use crate::tensor::sigmoid;

/// Clamped B-spline basis on `[0, 1]` with uniform interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    pub degree: usize,
    pub knots: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(count: usize, degree: usize) -> Result<Self> {
        if count <= degree {
            return Err(Error::InvalidArgument(format!(
                "{count} basis functions cannot carry degree {degree}"
            )));
        }
        let segments = count - degree;
        let mut knots = vec![0.0; degree];
        knots.extend((0..=segments).map(|i| i as f64 / segments as f64));
        knots.extend(std::iter::repeat_n(1.0, degree));
        Ok(Self { degree, knots })
    }

    pub fn count(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    fn check(&self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
        }
        Ok(())
    }

    /// Basis functions of every degree up to `degree` at `tau`, via the
    /// Cox–de Boor recursion. `out[p][i]` is `B_{i,p}(tau)`.
    fn table(&self, tau: f64, degree: usize) -> Vec<Vec<f64>> {
        let t = &self.knots;
        let m = t.len() - 1;
        // The right end belongs to the last non-empty span.
        let span = if tau >= 1.0 {
            (0..m).rev().find(|&i| t[i] < t[i + 1]).unwrap()
        } else {
            (0..m).find(|&i| t[i] <= tau && tau < t[i + 1]).unwrap()
        };
        let mut levels = Vec::with_capacity(degree + 1);
        let mut cur: Vec<f64> = (0..m).map(|i| f64::from(u8::from(i == span))).collect();
        levels.push(cur.clone());
        for p in 1..=degree {
            let next: Vec<f64> = (0..m - p)
                .map(|i| {
                    let mut v = 0.0;
                    let d1 = t[i + p] - t[i];
                    if d1 > 0.0 {
                        v += (tau - t[i]) / d1 * cur[i];
                    }
                    let d2 = t[i + p + 1] - t[i + 1];
                    if d2 > 0.0 {
                        v += (t[i + p + 1] - tau) / d2 * cur[i + 1];
                    }
                    v
                })
                .collect();
            levels.push(next.clone());
            cur = next;
        }
        levels
    }

    pub fn eval(&self, tau: f64) -> Result<Vec<f64>> {
        self.check(tau)?;
        Ok(self.table(tau, self.degree).pop().unwrap())
    }

    /// First derivatives of every basis function at `tau`.
    pub fn derivative(&self, tau: f64) -> Result<Vec<f64>> {
        self.check(tau)?;
        let p = self.degree;
        let lower = &self.table(tau, p - 1)[p - 1];
        let t = &self.knots;
        Ok((0..self.count())
            .map(|i| {
                let mut v = 0.0;
                let d1 = t[i + p] - t[i];
                if d1 > 0.0 {
                    v += p as f64 / d1 * lower[i];
                }
                let d2 = t[i + p + 1] - t[i + 1];
                if d2 > 0.0 {
                    v -= p as f64 / d2 * lower[i + 1];
                }
                v
            })
            .collect())
    }
}

/// `Σ_k c_k B_k(τ_j)` on each sample point.
pub fn curve_values(basis: &BSplineBasis, coefs: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
    taus.iter()
        .map(|&tau| Ok(basis.eval(tau)?.iter().zip(coefs).map(|(b, c)| b * c).sum()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HiddenFeature {
    Square { column: usize },
    Product { left: usize, right: usize },
}

impl HiddenFeature {
    fn value(&self, x: &[f64]) -> f64 {
        match *self {
            HiddenFeature::Square { column } => x[column] * x[column],
            HiddenFeature::Product { left, right } => x[left] * x[right],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FunctionalSpec {
    pub signals: usize,
    pub basis_count: usize,
    pub points: usize,
    /// Correlation between spline coefficients and the linked covariates.
    pub link: f64,
    /// Visible covariates linked to the first signals, one per signal.
    pub link_columns: Vec<usize>,
}

impl Default for FunctionalSpec {
    fn default() -> Self {
        Self {
            signals: 3,
            basis_count: 15,
            points: 51,
            link: 0.5,
            link_columns: vec![1, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeSpec {
    pub lognormal_mu: f64,
    pub lognormal_sigma: f64,
    pub weibull_scale: f64,
    pub weibull_shape: f64,
    /// Coefficients on the visible covariates for each cause.
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    /// Coefficients on the hidden features for each cause.
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub frailty: bool,
    pub gamma_shape: f64,
    pub gamma_scale: f64,
    pub exp_rate: f64,
}

impl Default for OutcomeSpec {
    fn default() -> Self {
        Self {
            lognormal_mu: 3.5,
            lognormal_sigma: 0.8,
            weibull_scale: 50.0,
            weibull_shape: 1.5,
            beta1: vec![0.6, -0.4, 0.3, 0.0, 0.0, 0.5, 0.0, -0.3, 0.0, 0.0],
            beta2: vec![0.0, 0.3, 0.0, 0.5, -0.4, 0.0, 0.6, 0.0, 0.3, 0.0],
            gamma1: vec![0.3, 0.0, -0.3, 0.4, 0.0],
            gamma2: vec![0.0, -0.2, 0.0, 0.0, 0.4],
            frailty: true,
            gamma_shape: 2.0,
            gamma_scale: 0.5,
            exp_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// `(mean, sd)` of the normal covariates.
    pub normals: Vec<(f64, f64)>,
    /// `(low, high)` of the uniform covariates.
    pub uniforms: Vec<(f64, f64)>,
    pub hidden: Vec<HiddenFeature>,
    pub functional: FunctionalSpec,
    pub outcome: OutcomeSpec,
    pub c_max: f64,
    /// Administrative end of follow-up.
    pub max_time: f64,
    pub missing_rate: f64,
    /// Always-observed covariates driving the MAR mechanism.
    pub mar_anchors: Vec<usize>,
    pub mar_slope: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            n_train: 800,
            n_test: 200,
            seed: 0,
            normals: vec![(0.2, 1.0), (1.5, 1.2), (0.0, 1.0), (-0.5, 0.8), (1.0, 1.5)],
            uniforms: vec![(-1.0, 1.0), (0.2, 2.0), (0.0, 1.0), (-2.0, 0.0), (0.5, 1.5)],
            hidden: vec![
                HiddenFeature::Square { column: 0 },
                HiddenFeature::Square { column: 1 },
                HiddenFeature::Square { column: 5 },
                HiddenFeature::Product { left: 0, right: 5 },
                HiddenFeature::Product { left: 2, right: 6 },
            ],
            functional: FunctionalSpec::default(),
            outcome: OutcomeSpec::default(),
            c_max: 300.0,
            max_time: 100.0,
            missing_rate: 0.0,
            mar_anchors: vec![4, 9],
            mar_slope: 1.0,
        }
    }
}

impl SimConfig {
    pub fn covariate_count(&self) -> usize {
        self.normals.len() + self.uniforms.len()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.normals.len())
            .map(|k| format!("norm{k}"))
            .chain((1..=self.uniforms.len()).map(|k| format!("unif{k}")))
            .collect()
    }

    pub fn signal_names(&self) -> Vec<String> {
        (1..=self.functional.signals)
            .map(|k| format!("f{k}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.covariate_count();
        if self.n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if self.n_train + self.n_test != self.n {
            return Err(Error::Config(format!(
                "split sizes {} + {} do not sum to n = {}",
                self.n_train, self.n_test, self.n
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!(
                "missing rate {} outside [0, 1)",
                self.missing_rate
            )));
        }
        let o = &self.outcome;
        if o.beta1.len() != p || o.beta2.len() != p {
            return Err(Error::Config(format!(
                "outcome coefficients need {p} visible entries"
            )));
        }
        if o.gamma1.len() != self.hidden.len() || o.gamma2.len() != self.hidden.len() {
            return Err(Error::Config(
                "hidden-feature coefficients do not match features".into(),
            ));
        }
        let in_range = |c: usize| c < p;
        let hidden_ok = self.hidden.iter().all(|h| match *h {
            HiddenFeature::Square { column } => in_range(column),
            HiddenFeature::Product { left, right } => in_range(left) && in_range(right),
        });
        if !hidden_ok
            || !self.mar_anchors.iter().all(|&c| in_range(c))
            || !self.functional.link_columns.iter().all(|&c| in_range(c))
        {
            return Err(Error::Config("covariate index out of range".into()));
        }
        if !(self.c_max >= 0.0 && self.max_time > 0.0) {
            return Err(Error::Config("c_max must be >= 0 and max_time > 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.functional.link) {
            return Err(Error::Config("functional link must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

/// Independent random stream for one pipeline stage.
fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

fn dist_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tabular {
    /// `n` rows of visible covariates.
    pub visible: Vec<Vec<f64>>,
    /// `n` rows of hidden nonlinear features.
    pub hidden: Vec<Vec<f64>>,
}

pub fn gen_tabular<R: Rng + ?Sized>(cfg: &SimConfig, n: usize, rng: &mut R) -> Result<Tabular> {
    let normals = cfg
        .normals
        .iter()
        .map(|&(m, s)| Normal::new(m, s).map_err(dist_err))
        .collect::<Result<Vec<_>>>()?;
    let uniforms = cfg
        .uniforms
        .iter()
        .map(|&(a, b)| Uniform::new(a, b).map_err(dist_err))
        .collect::<Result<Vec<_>>>()?;
    let mut visible = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x: Vec<f64> = normals.iter().map(|d| d.sample(rng)).collect();
        x.extend(uniforms.iter().map(|d| d.sample(rng)));
        hidden.push(cfg.hidden.iter().map(|h| h.value(&x)).collect());
        visible.push(x);
    }
    Ok(Tabular { visible, hidden })
}

/// Spline-coefficient curves for each subject: `out[i][k]` holds the samples
/// of signal `k` on the uniform grid.
pub fn gen_functional<R: Rng + ?Sized>(
    cfg: &SimConfig,
    visible: &[Vec<f64>],
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<Vec<Vec<f64>>>)> {
    let spec = &cfg.functional;
    if spec.signals == 0 {
        return Ok((Vec::new(), vec![Vec::new(); visible.len()]));
    }
    if spec.points < 2 {
        return Err(Error::Config(
            "functional signals need >= 2 sample points".into(),
        ));
    }
    let basis = BSplineBasis::new(spec.basis_count, 3)?;
    let taus: Vec<f64> = (0..spec.points)
        .map(|j| j as f64 / (spec.points - 1) as f64)
        .collect();
    let table: Vec<Vec<f64>> = taus.iter().map(|&t| basis.eval(t)).collect::<Result<_>>()?;
    // Standardize linked covariates by their configured moments.
    let standardize = |col: usize, v: f64| -> f64 {
        if col < cfg.normals.len() {
            let (m, s) = cfg.normals[col];
            (v - m) / s
        } else {
            let (a, b) = cfg.uniforms[col - cfg.normals.len()];
            (v - 0.5 * (a + b)) / ((b - a) / 12f64.sqrt())
        }
    };
    let rest = (1.0 - spec.link * spec.link).sqrt();
    let mut out = Vec::with_capacity(visible.len());
    for x in visible {
        let mut curves = Vec::with_capacity(spec.signals);
        for k in 0..spec.signals {
            let anchor = spec.link_columns.get(k).map(|&c| standardize(c, x[c]));
            let coefs: Vec<f64> = (0..spec.basis_count)
                .map(|_| {
                    let e: f64 = rng.sample(StandardNormal);
                    match anchor {
                        Some(a) => spec.link * a + rest * e,
                        None => e,
                    }
                })
                .collect();
            curves.push(
                table
                    .iter()
                    .map(|b| b.iter().zip(&coefs).map(|(u, c)| u * c).sum())
                    .collect(),
            );
        }
        out.push(curves);
    }
    Ok((taus, out))
}

/// Latent race of a lognormal and a Weibull event time against uniform and
/// administrative censoring. Returns `(time, cause)` per subject.
pub fn gen_outcomes<R: Rng + ?Sized>(
    cfg: &SimConfig,
    tab: &Tabular,
    rng: &mut R,
) -> Result<Vec<(f64, usize)>> {
    let o = &cfg.outcome;
    let gamma = Gamma::new(o.gamma_shape, o.gamma_scale).map_err(dist_err)?;
    let expo = Exp::new(o.exp_rate).map_err(dist_err)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let mut out = Vec::with_capacity(tab.visible.len());
    for (x, h) in tab.visible.iter().zip(&tab.hidden) {
        let eta1 = dot(&o.beta1, x) + dot(&o.gamma1, h);
        let eta2 = dot(&o.beta2, x) + dot(&o.gamma2, h);
        let z: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(rand_distr::Exp1);
        let (u1, u2) = if o.frailty {
            (gamma.sample(rng), expo.sample(rng))
        } else {
            (1.0, 1.0)
        };
        let t1 = (o.lognormal_mu - eta1 + o.lognormal_sigma * z).exp() / u1;
        let t2 = o.weibull_scale * (e / (eta2.exp() * u2)).powf(1.0 / o.weibull_shape);
        let c = if cfg.c_max > 0.0 {
            rng.random_range(0.0..cfg.c_max)
        } else {
            0.0
        };
        let c = c.min(cfg.max_time);
        out.push(if t1 <= t2 && t1 < c {
            (t1, 1)
        } else if t2 < t1 && t2 < c {
            (t2, 2)
        } else {
            (c, 0)
        });
    }
    Ok(out)
}

/// MAR mask over the `n × p` visible matrix. Non-anchor cells go missing
/// with probability `sigmoid(α + s (z_a + z_b))`, where `z` are the
/// standardized anchors and `α` is bisected to hit the overall `rate`.
pub fn apply_mar<R: Rng + ?Sized>(
    visible: &[Vec<f64>],
    rate: f64,
    anchors: &[usize],
    slope: f64,
    rng: &mut R,
) -> Result<Vec<Vec<bool>>> {
    let n = visible.len();
    let p = visible.first().map_or(0, Vec::len);
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("missing rate {rate} outside [0, 1)")));
    }
    let uniforms: Vec<f64> = (0..n * p).map(|_| rng.random::<f64>()).collect();
    if rate == 0.0 || n == 0 {
        return Ok(vec![vec![false; p]; n]);
    }
    let maskable: Vec<usize> = (0..p).filter(|j| !anchors.contains(j)).collect();
    let ceiling = maskable.len() as f64 / p as f64;
    if rate >= ceiling {
        return Err(Error::Config(format!(
            "missing rate {rate} unreachable: only {:.3} of cells are maskable",
            ceiling
        )));
    }
    let score: Vec<f64> = visible
        .iter()
        .map(|x| anchors.iter().map(|&a| x[a]).sum::<f64>())
        .collect();
    let z = {
        let m = score.iter().sum::<f64>() / n as f64;
        let sd = (score.iter().map(|s| (s - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        score.iter().map(|s| (s - m) / sd).collect::<Vec<_>>()
    };
    let target = (rate * (n * p) as f64).round() as usize;
    let count = |alpha: f64| -> usize {
        (0..n)
            .map(|i| {
                let pr = sigmoid(alpha + slope * z[i]);
                maskable
                    .iter()
                    .filter(|&&j| uniforms[i * p + j] < pr)
                    .count()
            })
            .sum()
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if count(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = if target.abs_diff(count(lo)) <= target.abs_diff(count(hi)) {
        lo
    } else {
        hi
    };
    let realized = count(alpha) as f64 / (n * p) as f64;
    if (realized - rate).abs() > 0.01 {
        log::warn!("realized missing rate {realized:.4} misses target {rate} by more than 0.01");
    }
    let mask = (0..n)
        .map(|i| {
            let pr = sigmoid(alpha + slope * z[i]);
            (0..p)
                .map(|j| maskable.contains(&j) && uniforms[i * p + j] < pr)
                .collect()
        })
        .collect();
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SimConfig,
    pub seed: u64,
    pub covariates: Vec<String>,
    pub signals: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
    pub realized_missing_rate: f64,
    /// Subjects per cause `0, 1, 2` over the full sample.
    pub cause_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub train: Dataset,
    pub test: Dataset,
    pub manifest: Manifest,
}

/// Full pipeline: covariates, curves, outcomes, mask, shuffle and split.
pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let n = cfg.n;
    let tab = gen_tabular(cfg, n, &mut stage_rng(cfg.seed, 1))?;
    let (taus, curves) = gen_functional(cfg, &tab.visible, &mut stage_rng(cfg.seed, 2))?;
    let outcomes = gen_outcomes(cfg, &tab, &mut stage_rng(cfg.seed, 3))?;
    let mask = apply_mar(
        &tab.visible,
        cfg.missing_rate,
        &cfg.mar_anchors,
        cfg.mar_slope,
        &mut stage_rng(cfg.seed, 4),
    )?;
    let names = cfg.covariate_names();
    let signals = cfg.signal_names();
    let width = n.to_string().len().max(4);
    let mut subjects = Vec::with_capacity(n);
    let mut cause_counts = vec![0usize; 3];
    for i in 0..n {
        let x = tab.visible[i]
            .iter()
            .zip(&mask[i])
            .map(|(&v, &m)| if m { None } else { Some(v) })
            .collect();
        let fc = curves[i]
            .iter()
            .zip(&signals)
            .map(|(vals, name)| FunctionalCurve::new(name.clone(), taus.clone(), vals.clone()))
            .collect::<Result<Vec<_>>>()?;
        let (time, cause) = outcomes[i];
        cause_counts[cause] += 1;
        subjects.push(SubjectRecord::new(
            format!("s{i:0width$}"),
            x,
            fc,
            time,
            cause,
        )?);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stage_rng(cfg.seed, 5));
    let pick = |idx: &[usize]| -> Result<Dataset> {
        Dataset::new(
            names.clone(),
            idx.iter().map(|&i| subjects[i].clone()).collect(),
        )
    };
    let train = pick(&order[..cfg.n_train])?;
    let test = pick(&order[cfg.n_train..])?;
    let missing: usize = mask.iter().flatten().filter(|&&m| m).count();
    let cells = n * cfg.covariate_count();
    let manifest = Manifest {
        config: cfg.clone(),
        seed: cfg.seed,
        covariates: names,
        signals,
        train_size: cfg.n_train,
        test_size: cfg.n_test,
        realized_missing_rate: if cells > 0 {
            missing as f64 / cells as f64
        } else {
            0.0
        },
        cause_counts,
    };
    Ok(Simulation {
        train,
        test,
        manifest,
    })
}

/// Writes `{train,test}_subjects.csv`, `{train,test}_curves.csv` (when curves
/// exist) and `manifest.json` into `dir`, creating it if needed.
pub fn write_simulation(sim: &Simulation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (label, ds) in [("train", &sim.train), ("test", &sim.test)] {
        write_subjects(
            ds,
            fs::File::create(dir.join(format!("{label}_subjects.csv")))?,
        )?;
        if !sim.manifest.signals.is_empty() {
            write_curves(
                ds,
                fs::File::create(dir.join(format!("{label}_curves.csv")))?,
            )?;
        }
    }
    let mut json = serde_json::to_string_pretty(&sim.manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}
