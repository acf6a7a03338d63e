//! Imputation-regularized optimization: SGLD imputation steps driven by a
//! Gaussian graphical prior and the network loss, alternated with Adam epochs
//! and refits of the graphical model.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PersonPeriodRow, TimeGrid};
use crate::error::{Error, Result};
use crate::model::{
    BestTracker, EpochRecord, Head, ImputedMatrix, TrainConfig, TrainOutcome, Trainer,
};

/// Stream offset so imputation noise never shares a sequence with training.
const SGLD_STREAM: u64 = 0x5EED_1A6E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeConfig {
    pub learning_rate: f64,
    /// Multiplicative decay applied at each milestone epoch.
    pub decay: f64,
    pub milestones: Vec<usize>,
    pub corr_threshold: f64,
    pub k_max: usize,
    pub ridge: f64,
    /// Weight on the prediction-loss gradient; 0 disables it.
    pub pred_weight: f64,
    pub noise: bool,
    /// SGLD passes over the missing entries per epoch.
    pub repeats: usize,
    /// Epochs discarded before averaging the chain.
    pub burn_in: usize,
    pub tolerance: f64,
    pub convergence_window: usize,
    pub divergence_factor: f64,
    /// Conditional-mean sweeps used to fill new data at prediction time.
    pub fill_sweeps: usize,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            decay: 0.1,
            milestones: vec![50, 100],
            corr_threshold: 0.2,
            k_max: 5,
            ridge: 1e-3,
            pred_weight: 1.0,
            noise: true,
            repeats: 1,
            burn_in: 20,
            tolerance: 1e-4,
            convergence_window: 5,
            divergence_factor: 10.0,
            fill_sweeps: 20,
        }
    }
}

impl ImputeConfig {
    /// Step size for a 1-based epoch.
    pub fn eta(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.learning_rate * self.decay.powi(hits as i32)
    }
}

fn median(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Fills each missing cell of the row-major `n × p` matrix with its column's
/// observed median and returns the medians.
pub fn median_init(values: &mut [f64], mask: &[bool], n: usize, p: usize) -> Result<Vec<f64>> {
    let mut medians = Vec::with_capacity(p);
    for j in 0..p {
        let mut obs: Vec<f64> = (0..n)
            .filter(|&i| !mask[i * p + j])
            .map(|i| values[i * p + j])
            .collect();
        if obs.is_empty() {
            return Err(Error::Config(format!("column {j} has no observed values")));
        }
        let m = median(&mut obs);
        for i in 0..n {
            if mask[i * p + j] {
                values[i * p + j] = m;
            }
        }
        medians.push(m);
    }
    Ok(medians)
}

/// Neighbourhood-restricted Gaussian model of the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianGraphicalModel {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub neighbors: Vec<Vec<usize>>,
    /// Regression of `x_j` on its neighbours: `Σ_ωω⁻¹ Σ_ωj`.
    pub coef: Vec<Vec<f64>>,
    pub cond_variance: Vec<f64>,
    /// Ridge actually used per column after any increases.
    pub ridge: Vec<f64>,
}

impl GaussianGraphicalModel {
    pub fn fit(
        values: &[f64],
        n: usize,
        p: usize,
        corr_threshold: f64,
        k_max: usize,
        ridge: f64,
    ) -> Result<Self> {
        if p < 2 {
            return Err(Error::InvalidArgument(
                "graphical model needs >= 2 columns".into(),
            ));
        }
        if n < 2 || values.len() != n * p {
            return Err(Error::Shape(format!(
                "expected {n} x {p} matrix with n >= 2"
            )));
        }
        let mean: Vec<f64> = (0..p)
            .map(|j| (0..n).map(|i| values[i * p + j]).sum::<f64>() / n as f64)
            .collect();
        let mut cov = vec![0.0; p * p];
        for i in 0..n {
            let row = &values[i * p..(i + 1) * p];
            for a in 0..p {
                let da = row[a] - mean[a];
                for b in a..p {
                    cov[a * p + b] += da * (row[b] - mean[b]);
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                cov[a * p + b] /= (n - 1) as f64;
                cov[b * p + a] = cov[a * p + b];
            }
        }
        let variance: Vec<f64> = (0..p).map(|j| cov[j * p + j].max(1e-12)).collect();
        let mut neighbors = Vec::with_capacity(p);
        let mut coef = Vec::with_capacity(p);
        let mut cond_variance = Vec::with_capacity(p);
        let mut ridges = Vec::with_capacity(p);
        for j in 0..p {
            let mut cand: Vec<(usize, f64)> = (0..p)
                .filter(|&k| k != j)
                .map(|k| {
                    (
                        k,
                        (cov[j * p + k] / (variance[j] * variance[k]).sqrt()).abs(),
                    )
                })
                .filter(|&(_, r)| r >= corr_threshold)
                .collect();
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cand.truncate(k_max);
            let mut nb: Vec<usize> = cand.into_iter().map(|c| c.0).collect();
            nb.sort_unstable();
            let k = nb.len();
            if k == 0 {
                neighbors.push(nb);
                coef.push(Vec::new());
                cond_variance.push(variance[j]);
                ridges.push(ridge);
                continue;
            }
            let s_jw = DVector::from_iterator(k, nb.iter().map(|&b| cov[j * p + b]));
            let mut lam = ridge.max(0.0);
            let beta = loop {
                let s_ww = DMatrix::from_fn(k, k, |r, c| {
                    cov[nb[r] * p + nb[c]] + if r == c { lam } else { 0.0 }
                });
                match s_ww.cholesky() {
                    Some(ch) => break ch.solve(&s_jw),
                    None => {
                        let next = if lam > 0.0 { lam * 10.0 } else { 1e-8 };
                        log::warn!("neighbour block of column {j} singular at ridge {lam}; retrying with {next}");
                        lam = next;
                    }
                }
            };
            let cv = (variance[j] - s_jw.dot(&beta)).max(1e-12);
            neighbors.push(nb);
            coef.push(beta.iter().copied().collect());
            cond_variance.push(cv);
            ridges.push(lam);
        }
        Ok(Self {
            mean,
            variance,
            neighbors,
            coef,
            cond_variance,
            ridge: ridges,
        })
    }

    pub fn columns(&self) -> usize {
        self.mean.len()
    }

    /// Conditional mean and variance of column `j` given the rest of `row`.
    pub fn conditional(&self, j: usize, row: &[f64]) -> (f64, f64) {
        let m = self.mean[j]
            + self.neighbors[j]
                .iter()
                .zip(&self.coef[j])
                .map(|(&k, b)| b * (row[k] - self.mean[k]))
                .sum::<f64>();
        (m, self.cond_variance[j])
    }
}

/// `∂/∂x_j log p(x_j | x_ω(j)) = −(x_j − m_j) / v_j`.
pub fn grad_log_prior(j: usize, row: &[f64], ggm: &GaussianGraphicalModel) -> f64 {
    let (m, v) = ggm.conditional(j, row);
    -(row[j] - m) / v
}

/// `−∂(Σ loss)/∂x` over each listed subject's rows, `subjects.len() × p`.
/// Subjects without rows get zeros.
pub fn grad_log_pred(
    trainer: &Trainer,
    subjects: &[usize],
    rows_by_subject: &[Vec<PersonPeriodRow>],
) -> Result<Vec<f64>> {
    let p = trainer.enc.p;
    let present: Vec<usize> = subjects
        .iter()
        .copied()
        .filter(|&i| !rows_by_subject[i].is_empty())
        .collect();
    let mut out = vec![0.0; subjects.len() * p];
    if present.is_empty() {
        return Ok(out);
    }
    let rows: Vec<PersonPeriodRow> = present
        .iter()
        .flat_map(|&i| rows_by_subject[i].iter().copied())
        .collect();
    let grads = trainer.input_gradients(&present, &rows)?;
    let mut k = 0;
    for (pos, &i) in subjects.iter().enumerate() {
        if !rows_by_subject[i].is_empty() {
            for j in 0..p {
                out[pos * p + j] = -grads[k * p + j];
            }
            k += 1;
        }
    }
    Ok(out)
}

/// Current imputations plus the running chain average.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationState {
    pub n: usize,
    pub p: usize,
    /// Row-major `n × p`; only cells flagged in `mask` are ever written.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub medians: Vec<f64>,
    pub eta: f64,
    pub epoch: usize,
    sum: Vec<f64>,
    samples: usize,
}

impl ImputationState {
    /// Median-initialized state; `values` holds observed cells, missing cells
    /// may be anything.
    pub fn new(mut values: Vec<f64>, mask: Vec<bool>, n: usize, p: usize) -> Result<Self> {
        if values.len() != n * p || mask.len() != n * p {
            return Err(Error::Shape(format!("expected {n} x {p} values and mask")));
        }
        let medians = median_init(&mut values, &mask, n, p)?;
        Ok(Self {
            n,
            p,
            sum: vec![0.0; n * p],
            values,
            mask,
            medians,
            eta: 0.0,
            epoch: 0,
            samples: 0,
        })
    }

    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Subjects with at least one missing cell.
    pub fn incomplete_subjects(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| self.mask[i * self.p..(i + 1) * self.p].iter().any(|&m| m))
            .collect()
    }

    pub fn begin_epoch(&mut self, epoch: usize, cfg: &ImputeConfig) {
        self.epoch = epoch;
        self.eta = cfg.eta(epoch);
    }

    pub fn record_sample(&mut self) {
        for (s, v) in self.sum.iter_mut().zip(&self.values) {
            *s += v;
        }
        self.samples += 1;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Average of recorded samples on missing cells, or the current values if
    /// nothing has been recorded.
    pub fn chain_mean(&self) -> Vec<f64> {
        if self.samples == 0 {
            return self.values.clone();
        }
        let k = self.samples as f64;
        self.values
            .iter()
            .zip(&self.sum)
            .zip(&self.mask)
            .map(|((&v, &s), &m)| if m { s / k } else { v })
            .collect()
    }
}

/// One SGLD update of every missing cell of `subjects`:
/// `x ← x + η (∇log p(x) + w ∇log p(y|x)) + √(2η) e`.
///
/// `pred` holds `∇log p(y|x)` for the listed subjects (`subjects.len() × p`).
/// Prior gradients are evaluated at the pre-update row. Returns the number
/// of rejected non-finite updates.
pub fn i_step<R: Rng + ?Sized>(
    state: &mut ImputationState,
    ggm: &GaussianGraphicalModel,
    subjects: &[usize],
    pred: Option<&[f64]>,
    cfg: &ImputeConfig,
    rng: &mut R,
) -> usize {
    let p = state.p;
    let eta = state.eta;
    let noise_sd = (2.0 * eta).sqrt();
    let mut rejected = 0;
    for (pos, &i) in subjects.iter().enumerate() {
        let row: Vec<f64> = state.values[i * p..(i + 1) * p].to_vec();
        for j in 0..p {
            if !state.mask[i * p + j] {
                continue;
            }
            let mut g = grad_log_prior(j, &row, ggm);
            if let Some(pred) = pred {
                g += cfg.pred_weight * pred[pos * p + j];
            }
            let e: f64 = if cfg.noise {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            let next = row[j] + eta * g + noise_sd * e;
            if next.is_finite() {
                state.values[i * p + j] = next;
            } else {
                log::warn!("rejected non-finite imputation update for subject {i}, column {j}");
                rejected += 1;
            }
        }
    }
    rejected
}

/// Stored imputer for filling new data: medians followed by conditional-mean
/// sweeps through the final graphical model. Works on the standardized scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationModel {
    pub medians: Vec<f64>,
    pub ggm: GaussianGraphicalModel,
    pub sweeps: usize,
}

impl ImputationModel {
    pub fn fill(&self, row: &mut [f64], missing: &[bool]) {
        for j in 0..row.len() {
            if missing[j] {
                row[j] = self.medians[j];
            }
        }
        for _ in 0..self.sweeps {
            for j in 0..row.len() {
                if missing[j] {
                    row[j] = self.ggm.conditional(j, row).0;
                }
            }
        }
    }
}

/// Imputation driven by the graphical prior alone, matching the IRO loop with
/// the prediction gradient switched off. Returns the chain-mean matrix.
pub fn impute_prior_only(
    values: Vec<f64>,
    mask: Vec<bool>,
    n: usize,
    p: usize,
    cfg: &ImputeConfig,
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut state = ImputationState::new(values, mask, n, p)?;
    let mut ggm = GaussianGraphicalModel::fit(
        &state.values,
        n,
        p,
        cfg.corr_threshold,
        cfg.k_max,
        cfg.ridge,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SGLD_STREAM);
    let subjects = state.incomplete_subjects();
    for epoch in 1..=epochs {
        state.begin_epoch(epoch, cfg);
        for _ in 0..cfg.repeats {
            i_step(&mut state, &ggm, &subjects, None, cfg, &mut rng);
        }
        ggm = GaussianGraphicalModel::fit(
            &state.values,
            n,
            p,
            cfg.corr_threshold,
            cfg.k_max,
            cfg.ridge,
        )?;
        if epoch > cfg.burn_in {
            state.record_sample();
        }
    }
    Ok(state.chain_mean())
}

/// IRO training for one basis count. Falls back to plain training when the
/// dataset is complete.
pub fn iro_fit(
    ds: &Dataset,
    grid: TimeGrid,
    head: Head,
    config: &TrainConfig,
    basis_count: usize,
) -> Result<TrainOutcome> {
    let cfg = &config.imputation;
    let mut trainer = Trainer::new(ds, grid, head, config, basis_count)?;
    let (n, p) = (trainer.enc.n, trainer.enc.p);
    let mut state =
        ImputationState::new(trainer.enc.tab.clone(), trainer.enc.missing.clone(), n, p)?;
    trainer.enc.tab.copy_from_slice(&state.values);
    let mut ggm = GaussianGraphicalModel::fit(
        &state.values,
        n,
        p,
        cfg.corr_threshold,
        cfg.k_max,
        cfg.ridge,
    )?;
    let mut rows_by_subject: Vec<Vec<PersonPeriodRow>> = vec![Vec::new(); n];
    for r in trainer.all_rows() {
        rows_by_subject[r.subject].push(*r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SGLD_STREAM);
    let mut subjects = state.incomplete_subjects();
    log::info!(
        "imputing {} missing cells across {} subjects",
        state.missing_count(),
        subjects.len()
    );

    let mut tracker = BestTracker::new();
    let mut best_model = trainer.model.clone();
    let mut best_train = f64::INFINITY;
    let mut prev_train: Option<f64> = None;
    let mut calm = 0usize;
    let mut epochs = Vec::new();
    for epoch in 1..=config.max_epochs {
        state.begin_epoch(epoch, cfg);
        for _ in 0..cfg.repeats {
            subjects.shuffle(&mut rng);
            for batch in subjects.chunks(config.batch_size) {
                let pred = if cfg.pred_weight != 0.0 {
                    Some(grad_log_pred(&trainer, batch, &rows_by_subject)?)
                } else {
                    None
                };
                i_step(&mut state, &ggm, batch, pred.as_deref(), cfg, &mut rng);
            }
            trainer.enc.tab.copy_from_slice(&state.values);
        }
        let (train_loss, train_total) = trainer.run_epoch()?;
        ggm = GaussianGraphicalModel::fit(
            &state.values,
            n,
            p,
            cfg.corr_threshold,
            cfg.k_max,
            cfg.ridge,
        )?;
        let val_loss = trainer.validation_loss()?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch} (learning rate {}, impute rate {})",
                config.learning_rate, state.eta
            )));
        }
        if epoch > cfg.burn_in {
            state.record_sample();
        }
        epochs.push(EpochRecord {
            basis_count,
            epoch,
            train_loss,
            train_total,
            val_loss,
            impute_lr: Some(state.eta),
        });
        log::debug!(
            "D={basis_count} epoch {epoch}: train {train_loss:.6} val {val_loss:.6} eta {}",
            state.eta
        );
        best_train = best_train.min(train_loss);
        if train_loss >= cfg.divergence_factor * best_train {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {epoch}: loss {train_loss:.6} vs best {best_train:.6} \
                 (learning rate {}, impute rate {})",
                config.learning_rate, state.eta
            )));
        }
        if tracker.update(val_loss) {
            best_model = trainer.model.clone();
        }
        if let Some(prev) = prev_train {
            let rel = (train_loss - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
            calm = if rel < cfg.tolerance { calm + 1 } else { 0 };
        }
        prev_train = Some(train_loss);
        if calm >= cfg.convergence_window || tracker.since >= config.patience {
            break;
        }
    }

    let final_z = state.chain_mean();
    best_model.imputer = Some(ImputationModel {
        medians: state.medians.clone(),
        ggm,
        sweeps: cfg.fill_sweeps,
    });
    let mut values = Vec::with_capacity(n * p);
    for (i, s) in ds.subjects.iter().enumerate() {
        for j in 0..p {
            values.push(if s.missing[j] {
                best_model.tabular.invert(j, final_z[i * p + j])
            } else {
                s.x[j]
            });
        }
    }
    let imputed = ImputedMatrix {
        ids: ds.subjects.iter().map(|s| s.id.clone()).collect(),
        names: ds.covariate_names.clone(),
        values,
        missing: state.mask,
    };
    Ok(TrainOutcome {
        model: best_model,
        epochs,
        search: vec![(basis_count, tracker.best)],
        best_val_loss: tracker.best,
        imputed: Some(imputed),
    })
}

/// Full training entry point with imputation; identical to
/// [`crate::model::train`], which dispatches here when cells are missing.
pub fn iro_train(
    ds: &Dataset,
    grid: TimeGrid,
    head: Head,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    crate::model::train(ds, grid, head, config)
}

/// Writes the imputed matrix and a 0/1 mask with the same layout.
pub fn write_imputation_audit<W1: Write, W2: Write>(
    m: &ImputedMatrix,
    values: W1,
    mask: W2,
) -> Result<()> {
    let mut vw = csv::Writer::from_writer(values);
    let mut mw = csv::Writer::from_writer(mask);
    let header: Vec<&str> = std::iter::once("id")
        .chain(m.names.iter().map(String::as_str))
        .collect();
    vw.write_record(&header)?;
    mw.write_record(&header)?;
    let p = m.names.len();
    for (i, id) in m.ids.iter().enumerate() {
        let mut vr = vec![id.clone()];
        let mut mr = vec![id.clone()];
        for j in 0..p {
            vr.push(m.values[i * p + j].to_string());
            mr.push(u8::from(m.missing[i * p + j]).to_string());
        }
        vw.write_record(&vr)?;
        mw.write_record(&mr)?;
    }
    vw.flush()?;
    mw.flush()?;
    Ok(())
}
