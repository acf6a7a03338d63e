//! The full network: standardized tabular covariates, basis-layer
//! coefficients for each functional signal and a time feature feed an MLP
//! that ends in either a multinomial (cause-specific) or a logistic
//! (sub-distribution) hazard head.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{canonical_grid, BasisLayer, BoundDense, DenseLayer};
use crate::data::{
    augment_cause_specific, augment_subdistribution, censoring_survival, Dataset, PersonPeriodRow,
    TimeGrid,
};
use crate::error::{Error, Result};
use crate::mvi::{ImputationModel, ImputeConfig};
use crate::tensor::{AdamState, Graph, Tensor, Var, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    /// Softmax over "no event" and causes `1..=causes`.
    CauseSpecific { causes: usize },
    /// Sigmoid hazard of one target cause.
    SubDistribution { cause: usize },
}

impl Head {
    pub fn outputs(&self) -> usize {
        match self {
            Head::CauseSpecific { causes } => causes + 1,
            Head::SubDistribution { .. } => 1,
        }
    }

    /// Causes whose incidence the head predicts.
    pub fn modelled_causes(&self) -> Vec<usize> {
        match *self {
            Head::CauseSpecific { causes } => (1..=causes).collect(),
            Head::SubDistribution { cause } => vec![cause],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeEncoding {
    /// `t / L`
    #[default]
    Scalar,
    OneHot,
}

impl TimeEncoding {
    pub fn width(&self, intervals: usize) -> usize {
        match self {
            TimeEncoding::Scalar => 1,
            TimeEncoding::OneHot => intervals,
        }
    }

    fn encode(&self, t: usize, intervals: usize, out: &mut Vec<f64>) {
        match self {
            TimeEncoding::Scalar => out.push(t as f64 / intervals as f64),
            TimeEncoding::OneHot => {
                out.extend((1..=intervals).map(|s| f64::from(u8::from(s == t))))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn scale(&self, rows: usize) -> f64 {
        match self {
            Reduction::Mean if rows > 0 => 1.0 / rows as f64,
            Reduction::Mean => 0.0,
            Reduction::Sum => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub time_encoding: TimeEncoding,
    /// Candidate basis counts `D`; searched only when curves are present.
    pub basis_counts: Vec<usize>,
    pub basis_hidden: Vec<usize>,
    pub normalize_curves: bool,
    pub curve_grid_cap: usize,
    pub imputation: ImputeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 64, 32],
            learning_rate: 0.001,
            batch_size: 64,
            max_epochs: 500,
            patience: 20,
            validation_fraction: 0.1,
            seed: 0,
            time_encoding: TimeEncoding::Scalar,
            basis_counts: (2..=8).collect(),
            basis_hidden: vec![16, 16],
            normalize_curves: true,
            curve_grid_cap: 101,
            imputation: ImputeConfig::default(),
        }
    }
}

/// Column means and standard deviations over observed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let p = ds.n_covariates();
        let mut mean = vec![0.0; p];
        let mut sd = vec![1.0; p];
        for j in 0..p {
            let vals: Vec<f64> = ds
                .subjects
                .iter()
                .filter(|s| !s.missing[j])
                .map(|s| s.x[j])
                .collect();
            let (m, s) = mean_sd(&vals);
            mean[j] = m;
            sd[j] = s;
        }
        Self { mean, sd }
    }

    pub fn apply(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.sd[j]
    }

    pub fn invert(&self, j: usize, z: f64) -> f64 {
        z * self.sd[j] + self.mean[j]
    }
}

/// Mean and population SD; an SD of zero (or no data) becomes 1.
fn mean_sd(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 1.0);
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    let s = var.sqrt();
    (m, if s > 1e-12 { s } else { 1.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalEncoder {
    pub name: String,
    pub normalize: bool,
    pub mean: f64,
    pub sd: f64,
}

/// A dataset mapped onto the network's input scale.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub n: usize,
    pub p: usize,
    /// `n × p` standardized covariates; missing entries hold `NaN` until imputed.
    pub tab: Vec<f64>,
    pub missing: Vec<bool>,
    /// Per signal, `n × J` quadrature-weighted samples `w_j x(τ_j)`.
    pub curves: Vec<Vec<f64>>,
}

impl Encoded {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.tab[i * self.p..(i + 1) * self.p]
    }
}

/// Bound graph variables for every model parameter.
#[derive(Debug, Clone)]
pub struct BoundModel {
    basis: Vec<Vec<Vec<BoundDense>>>,
    layers: Vec<BoundDense>,
}

impl BoundModel {
    /// Variables in the same order as [`FcrnModel::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.basis {
            for net in layer {
                for d in net {
                    out.push(d.w);
                    out.push(d.b);
                }
            }
        }
        for d in &self.layers {
            out.push(d.w);
            out.push(d.b);
        }
        out
    }
}

/// Output of a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `rows × outputs` head probabilities.
    pub probs: Var,
    /// `subjects × p` tabular input leaf.
    pub tab: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcrnModel {
    pub grid: TimeGrid,
    pub head: Head,
    pub time_encoding: TimeEncoding,
    pub covariate_names: Vec<String>,
    pub tabular: Standardizer,
    pub signals: Vec<SignalEncoder>,
    pub basis: Vec<BasisLayer>,
    /// Hidden layers followed by the output layer.
    pub layers: Vec<DenseLayer>,
    pub imputer: Option<ImputationModel>,
    pub config: TrainConfig,
}

impl FcrnModel {
    /// Fresh parameters for data shaped like `ds`.
    pub fn init(
        ds: &Dataset,
        grid: TimeGrid,
        head: Head,
        config: &TrainConfig,
        basis_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let names = ds.signal_names();
        if !names.is_empty() && basis_count == 0 {
            return Err(Error::Config(
                "functional signals need a basis count >= 1".into(),
            ));
        }
        let mut signals = Vec::with_capacity(names.len());
        let mut basis = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            let taus = canonical_grid(
                ds.subjects.iter().map(|s| &s.curves[k]),
                config.curve_grid_cap,
            );
            let layer = BasisLayer::init(basis_count, &config.basis_hidden, taus, rng)?;
            let vals: Vec<f64> = ds
                .subjects
                .iter()
                .flat_map(|s| layer.align(&s.curves[k]))
                .collect();
            let (mean, sd) = if config.normalize_curves {
                mean_sd(&vals)
            } else {
                (0.0, 1.0)
            };
            signals.push(SignalEncoder {
                name: name.clone(),
                normalize: config.normalize_curves,
                mean,
                sd,
            });
            basis.push(layer);
        }
        let input = ds.n_covariates()
            + basis.iter().map(BasisLayer::size).sum::<usize>()
            + config.time_encoding.width(grid.len());
        let mut widths = vec![input];
        widths.extend_from_slice(&config.hidden);
        widths.push(head.outputs());
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::init(w[0], w[1], rng))
            .collect();
        Ok(Self {
            grid,
            head,
            time_encoding: config.time_encoding,
            covariate_names: ds.covariate_names.clone(),
            tabular: Standardizer::fit(ds),
            signals,
            basis,
            layers,
            imputer: None,
            config: config.clone(),
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn basis_count(&self) -> usize {
        self.basis.first().map_or(0, BasisLayer::size)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.basis
            .iter()
            .flat_map(BasisLayer::params)
            .chain(self.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.basis
            .iter_mut()
            .flat_map(BasisLayer::params_mut)
            .chain(
                self.layers
                    .iter_mut()
                    .flat_map(|l| [&mut l.weight, &mut l.bias]),
            )
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        BoundModel {
            basis: self.basis.iter().map(|b| b.bind(g, trainable)).collect(),
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }

    /// Standardizes covariates and aligns curves; missing entries stay `NaN`.
    pub fn encode(&self, ds: &Dataset) -> Result<Encoded> {
        if ds.covariate_names != self.covariate_names {
            return Err(Error::Compatibility(format!(
                "dataset covariates {:?} differ from the model's {:?}",
                ds.covariate_names, self.covariate_names
            )));
        }
        let names: Vec<String> = self.signals.iter().map(|s| s.name.clone()).collect();
        if !ds.is_empty() && ds.signal_names() != names {
            return Err(Error::Compatibility(format!(
                "dataset signals {:?} differ from the model's {names:?}",
                ds.signal_names()
            )));
        }
        let p = ds.n_covariates();
        let mut tab = Vec::with_capacity(ds.len() * p);
        let mut missing = Vec::with_capacity(ds.len() * p);
        for s in &ds.subjects {
            for j in 0..p {
                missing.push(s.missing[j]);
                tab.push(if s.missing[j] {
                    f64::NAN
                } else {
                    self.tabular.apply(j, s.x[j])
                });
            }
        }
        let curves = self
            .basis
            .iter()
            .zip(&self.signals)
            .enumerate()
            .map(|(k, (layer, enc))| {
                let mut out = Vec::with_capacity(ds.len() * layer.taus.len());
                for s in &ds.subjects {
                    for (v, w) in layer.align(&s.curves[k]).iter().zip(&layer.weights) {
                        out.push(w * (v - enc.mean) / enc.sd);
                    }
                }
                out
            })
            .collect();
        Ok(Encoded {
            n: ds.len(),
            p,
            tab,
            missing,
            curves,
        })
    }

    /// Encodes and fills any missing entries with the stored imputation model.
    pub fn encode_for_prediction(&self, ds: &Dataset) -> Result<Encoded> {
        let mut enc = self.encode(ds)?;
        if enc.missing.iter().any(|&m| m) {
            let imputer = self.imputer.as_ref().ok_or_else(|| {
                Error::State("dataset has missing covariates but the model has no imputer".into())
            })?;
            for i in 0..enc.n {
                let range = i * enc.p..(i + 1) * enc.p;
                imputer.fill(&mut enc.tab[range.clone()], &enc.missing[range]);
            }
        }
        Ok(enc)
    }

    /// Batched forward pass. `subjects` lists dataset indices; each row is
    /// `(position in subjects, interval)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        enc: &Encoded,
        subjects: &[usize],
        rows: &[(usize, usize)],
        input_grad: bool,
    ) -> Result<Forward> {
        let p = enc.p;
        let mut tab = Vec::with_capacity(subjects.len() * p);
        for &i in subjects {
            let row = enc.row(i);
            if row.iter().any(|v| v.is_nan()) {
                return Err(Error::State(format!(
                    "subject {i} has unimputed missing covariates"
                )));
            }
            tab.extend_from_slice(row);
        }
        let tab = Tensor::matrix(subjects.len(), p, tab)?;
        let tab = if input_grad {
            g.variable(tab)
        } else {
            g.constant(tab)
        };
        let local: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let mut parts = Vec::with_capacity(2 + self.basis.len());
        if p > 0 {
            parts.push(g.gather_rows(tab, local.clone())?);
        }
        for (k, layer) in self.basis.iter().enumerate() {
            let j = layer.taus.len();
            let mut w = Vec::with_capacity(subjects.len() * j);
            for &i in subjects {
                w.extend_from_slice(&enc.curves[k][i * j..(i + 1) * j]);
            }
            let w = g.constant(Tensor::matrix(subjects.len(), j, w)?);
            let coef = layer.project_weighted(g, &bound.basis[k], w)?;
            parts.push(g.gather_rows(coef, local.clone())?);
        }
        let l = self.grid.len();
        let tw = self.time_encoding.width(l);
        let mut time = Vec::with_capacity(rows.len() * tw);
        for &(_, t) in rows {
            self.time_encoding.encode(t, l, &mut time);
        }
        parts.push(g.constant(Tensor::matrix(rows.len(), tw, time)?));
        let z = g.concat_cols(&parts)?;
        let probs = self.network(g, &bound.layers, z)?;
        Ok(Forward { probs, tab })
    }

    /// `h_1 = FC_1(z)`, `h_i = ReLU(FC_i(h_{i-1}))`, then the head.
    fn network(&self, g: &mut Graph, layers: &[BoundDense], z: Var) -> Result<Var> {
        let last = layers.len() - 1;
        let mut h = z;
        for (k, layer) in layers.iter().enumerate() {
            h = g.dense(h, layer.w, layer.b)?;
            if k > 0 && k < last {
                h = g.relu(h);
            }
        }
        match self.head {
            Head::CauseSpecific { .. } => g.softmax_rows(h),
            Head::SubDistribution { .. } => Ok(g.sigmoid(h)),
        }
    }

    /// Loss node for `rows` given head probabilities.
    pub fn loss(
        &self,
        g: &mut Graph,
        probs: Var,
        rows: &[PersonPeriodRow],
        reduction: Reduction,
    ) -> Result<Var> {
        let targets = rows.iter().map(|r| r.target).collect();
        let weights = rows.iter().map(|r| r.weight).collect();
        let scale = reduction.scale(rows.len());
        match self.head {
            Head::CauseSpecific { .. } => g.cross_entropy(probs, targets, weights, scale),
            Head::SubDistribution { .. } => g.binary_cross_entropy(probs, targets, weights, scale),
        }
    }

    fn network_values(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_width() {
            return Err(Error::Shape(format!(
                "feature vector has width {}, model expects {}",
                z.len(),
                self.input_width()
            )));
        }
        let mut g = Graph::new();
        let layers: Vec<BoundDense> = self.layers.iter().map(|l| l.bind(&mut g, false)).collect();
        let z = g.constant(Tensor::vector(z.to_vec()));
        let out = self.network(&mut g, &layers, z)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Cause-specific head: `(1 − λ, λ_1, …, λ_M)` for an assembled input.
    pub fn forward_hazard_cs(&self, z: &[f64]) -> Result<Vec<f64>> {
        if !matches!(self.head, Head::CauseSpecific { .. }) {
            return Err(Error::State("model head is not cause-specific".into()));
        }
        self.network_values(z)
    }

    /// Sub-distribution head: `ξ` for an assembled input.
    pub fn forward_hazard_sd(&self, z: &[f64]) -> Result<f64> {
        if !matches!(self.head, Head::SubDistribution { .. }) {
            return Err(Error::State("model head is not sub-distribution".into()));
        }
        Ok(self.network_values(z)?[0])
    }

    /// Basis coefficients of every signal for subject `i` of `enc`.
    pub fn basis_coefficients(&self, enc: &Encoded, i: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.basis.len());
        for (k, layer) in self.basis.iter().enumerate() {
            let j = layer.taus.len();
            let mut g = Graph::new();
            let bound = layer.bind(&mut g, false);
            let w = g.constant(Tensor::matrix(
                1,
                j,
                enc.curves[k][i * j..(i + 1) * j].to_vec(),
            )?);
            let a = layer.project_weighted(&mut g, &bound, w)?;
            out.push(g.value(a).data().to_vec());
        }
        Ok(out)
    }

    /// Head outputs for every interval `1..=L` of every subject.
    pub fn head_outputs(&self, enc: &Encoded) -> Result<Vec<Vec<Vec<f64>>>> {
        let l = self.grid.len();
        let k = self.head.outputs();
        let chunk = (4096 / l).max(1);
        let mut out = Vec::with_capacity(enc.n);
        let all: Vec<usize> = (0..enc.n).collect();
        for subjects in all.chunks(chunk) {
            let rows: Vec<(usize, usize)> = (0..subjects.len())
                .flat_map(|s| (1..=l).map(move |t| (s, t)))
                .collect();
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let fwd = self.forward(&mut g, &bound, enc, subjects, &rows, false)?;
            let probs = g.value(fwd.probs);
            for s in 0..subjects.len() {
                out.push((0..l).map(|t| probs.row(s * l + t)[..k].to_vec()).collect());
            }
        }
        Ok(out)
    }

    /// Hazards, survival and cumulative incidence for every subject.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<HazardPrediction>> {
        let enc = self.encode_for_prediction(ds)?;
        let outputs = self.head_outputs(&enc)?;
        Ok(ds
            .subjects
            .iter()
            .zip(outputs)
            .map(|(s, probs)| HazardPrediction::from_head(s.id.clone(), self.head, probs))
            .collect())
    }
}

/// Feature vector `z = [x, a_1, …, a_K, time]` for one person-period row.
pub fn assemble_input(
    x: &[f64],
    coefficients: &[Vec<f64>],
    t: usize,
    intervals: usize,
    encoding: TimeEncoding,
) -> Result<Vec<f64>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::State(
            "covariate vector has unimputed missing entries".into(),
        ));
    }
    if t == 0 || t > intervals {
        return Err(Error::InvalidArgument(format!(
            "interval {t} outside 1..={intervals}"
        )));
    }
    let mut z = x.to_vec();
    for a in coefficients {
        z.extend_from_slice(a);
    }
    encoding.encode(t, intervals, &mut z);
    Ok(z)
}

/// Negative multinomial log-likelihood of person-period rows; `probs[r]`
/// holds the head outputs for row `r`.
pub fn loss_cs(probs: &[Vec<f64>], rows: &[PersonPeriodRow], reduction: Reduction) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(rows)
        .map(|(p, r)| -p[r.target].max(PROB_FLOOR).ln())
        .sum();
    total * reduction.scale(rows.len())
}

/// Weighted binary cross-entropy of sub-distribution rows.
pub fn loss_sub(xi: &[f64], rows: &[PersonPeriodRow], reduction: Reduction) -> f64 {
    let total: f64 = xi
        .iter()
        .zip(rows)
        .map(|(&p, r)| {
            let l = if r.target == 1 {
                -p.max(PROB_FLOOR).ln()
            } else {
                -(1.0 - p).max(PROB_FLOOR).ln()
            };
            r.weight * l
        })
        .sum();
    total * reduction.scale(rows.len())
}

/// `S(t) = Π_{s≤t} (1 − λ(s))` and `F_m(t) = Σ_{s≤t} λ_m(s) S(s−1)`.
///
/// `probs[s]` is the head output `(1 − λ, λ_1, …, λ_M)` for interval `s+1`.
/// Returns `S(0..=L)` and `F_m(0..=L)` for `m = 1..=M`.
pub fn cif_cause_specific(probs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let causes = probs.first().map_or(0, |p| p.len() - 1);
    let mut surv = Vec::with_capacity(probs.len() + 1);
    let mut cif = vec![Vec::with_capacity(probs.len() + 1); causes];
    surv.push(1.0);
    for f in &mut cif {
        f.push(0.0);
    }
    for p in probs {
        let prev = *surv.last().unwrap();
        for (m, f) in cif.iter_mut().enumerate() {
            let last = *f.last().unwrap();
            f.push(last + p[m + 1] * prev);
        }
        surv.push(prev * p[0]);
    }
    (surv, cif)
}

/// `F(t) = 1 − Π_{s≤t} (1 − ξ(s))` for `t = 0..=L`.
pub fn cif_subdistribution(xi: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(xi.len() + 1);
    let mut surv = 1.0;
    out.push(0.0);
    for &x in xi {
        surv *= 1.0 - x;
        out.push(1.0 - surv);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardPrediction {
    pub id: String,
    pub head: Head,
    /// Head outputs for intervals `1..=L`.
    pub probs: Vec<Vec<f64>>,
    /// `S(0..=L)`, cause-specific head only.
    pub survival: Option<Vec<f64>>,
    /// `F_m(0..=L)` for each cause in `head.modelled_causes()`.
    pub cif: Vec<Vec<f64>>,
}

impl HazardPrediction {
    pub fn from_head(id: String, head: Head, probs: Vec<Vec<f64>>) -> Self {
        match head {
            Head::CauseSpecific { .. } => {
                let (s, f) = cif_cause_specific(&probs);
                Self {
                    id,
                    head,
                    probs,
                    survival: Some(s),
                    cif: f,
                }
            }
            Head::SubDistribution { .. } => {
                let xi: Vec<f64> = probs.iter().map(|p| p[0]).collect();
                let f = cif_subdistribution(&xi);
                Self {
                    id,
                    head,
                    probs,
                    survival: None,
                    cif: vec![f],
                }
            }
        }
    }

    /// CIF curve for `cause`, if the head models it.
    pub fn cif_for(&self, cause: usize) -> Option<&[f64]> {
        self.head
            .modelled_causes()
            .iter()
            .position(|&c| c == cause)
            .map(|k| self.cif[k].as_slice())
    }
}

/// Covariate-free discrete hazard fitted by per-interval maximum likelihood
/// (the life-table estimator). Returns head outputs for intervals `1..=L`;
/// intervals with no rows get a zero hazard.
pub fn intercept_only(ds: &Dataset, grid: &TimeGrid, head: Head) -> Result<Vec<Vec<f64>>> {
    let l = grid.len();
    match head {
        Head::CauseSpecific { causes } => {
            let table = augment_cause_specific(ds, grid, causes)?;
            let mut counts = vec![vec![0.0; causes + 1]; l];
            for r in &table.rows {
                counts[r.interval - 1][r.target] += 1.0;
            }
            Ok(counts
                .into_iter()
                .map(|c| {
                    let n: f64 = c.iter().sum();
                    if n > 0.0 {
                        c.iter().map(|v| v / n).collect()
                    } else {
                        let mut p = vec![0.0; causes + 1];
                        p[0] = 1.0;
                        p
                    }
                })
                .collect())
        }
        Head::SubDistribution { cause } => {
            let g = censoring_survival(ds, grid)?;
            let table = augment_subdistribution(ds, grid, cause, &g)?;
            let mut num = vec![0.0; l];
            let mut den = vec![0.0; l];
            for r in &table.rows {
                den[r.interval - 1] += r.weight;
                if r.target == 1 {
                    num[r.interval - 1] += r.weight;
                }
            }
            Ok(num
                .iter()
                .zip(&den)
                .map(|(&a, &b)| vec![if b > 0.0 { a / b } else { 0.0 }])
                .collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub basis_count: usize,
    pub epoch: usize,
    /// Batch-mean loss averaged over the epoch.
    pub train_loss: f64,
    /// Summed loss over all training rows.
    pub train_total: f64,
    pub val_loss: f64,
    /// Imputation step size; `None` when no imputation ran.
    pub impute_lr: Option<f64>,
}

/// Final imputed covariates on the original scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedMatrix {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    /// `n × p`, observed entries copied through bit-for-bit.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FcrnModel,
    pub epochs: Vec<EpochRecord>,
    /// `(D, best validation loss)` per candidate basis count.
    pub search: Vec<(usize, f64)>,
    pub best_val_loss: f64,
    pub imputed: Option<ImputedMatrix>,
}

/// Mini-batch Adam over person-period rows of one model.
pub struct Trainer {
    pub model: FcrnModel,
    pub enc: Encoded,
    pub train_rows: Vec<PersonPeriodRow>,
    pub val_rows: Vec<PersonPeriodRow>,
    adam: AdamState,
    rng: ChaCha8Rng,
    basis_count: usize,
}

impl Trainer {
    /// Splits subjects into training and validation parts, augments and
    /// encodes `ds`, and initializes the model.
    pub fn new(
        ds: &Dataset,
        grid: TimeGrid,
        head: Head,
        config: &TrainConfig,
        basis_count: usize,
    ) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot train on an empty dataset".into(),
            ));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = FcrnModel::init(ds, grid, head, config, basis_count, &mut rng)?;
        let table = match head {
            Head::CauseSpecific { causes } => augment_cause_specific(ds, &grid, causes)?,
            Head::SubDistribution { cause } => {
                let g = censoring_survival(ds, &grid)?;
                augment_subdistribution(ds, &grid, cause, &g)?
            }
        };
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let n_val = if ds.len() >= 2 {
            ((ds.len() as f64 * config.validation_fraction).round() as usize).min(ds.len() - 1)
        } else {
            0
        };
        let mut is_val = vec![false; ds.len()];
        for &i in &order[..n_val] {
            is_val[i] = true;
        }
        let (val_rows, train_rows): (Vec<_>, Vec<_>) =
            table.rows.into_iter().partition(|r| is_val[r.subject]);
        let enc = model.encode(ds)?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            model,
            enc,
            train_rows,
            val_rows,
            adam,
            rng,
            basis_count,
        })
    }

    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    /// All rows (training then validation).
    pub fn all_rows(&self) -> impl Iterator<Item = &PersonPeriodRow> {
        self.train_rows.iter().chain(&self.val_rows)
    }

    /// One shuffled pass of Adam. Returns `(mean batch loss, summed loss)`.
    pub fn run_epoch(&mut self) -> Result<(f64, f64)> {
        let mut idx: Vec<usize> = (0..self.train_rows.len()).collect();
        idx.shuffle(&mut self.rng);
        let lr = self.model.config.learning_rate;
        let bs = self.model.config.batch_size;
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut mean_acc = 0.0;
        for (b, chunk) in idx.chunks(bs).enumerate() {
            let rows: Vec<PersonPeriodRow> = chunk.iter().map(|&k| self.train_rows[k]).collect();
            let (subjects, local) = local_rows(&rows);
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g, true);
            let fwd = self
                .model
                .forward(&mut g, &bound, &self.enc, &subjects, &local, false)?;
            let loss = self.model.loss(&mut g, fwd.probs, &rows, Reduction::Mean)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at batch {b} (learning rate {lr})"
                )));
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.get(v)).collect();
            self.adam.step(self.model.params_mut(), &grads, lr)?;
            mean_acc += value;
            total += value * rows.len() as f64;
            batches += 1;
        }
        let mean = if batches > 0 {
            mean_acc / batches as f64
        } else {
            0.0
        };
        Ok((mean, total))
    }

    /// Mean loss over `rows` with the current parameters.
    pub fn mean_loss(&self, rows: &[PersonPeriodRow]) -> Result<f64> {
        if rows.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for chunk in rows.chunks(2048) {
            let (subjects, local) = local_rows(chunk);
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g, false);
            let fwd = self
                .model
                .forward(&mut g, &bound, &self.enc, &subjects, &local, false)?;
            let loss = self.model.loss(&mut g, fwd.probs, chunk, Reduction::Sum)?;
            total += g.value(loss).item();
        }
        Ok(total / rows.len() as f64)
    }

    /// Loss used for early stopping: validation rows, or training rows when
    /// there is no validation split.
    pub fn validation_loss(&self) -> Result<f64> {
        if self.val_rows.is_empty() {
            self.mean_loss(&self.train_rows)
        } else {
            self.mean_loss(&self.val_rows)
        }
    }

    /// `∂(Σ loss)/∂x` for the listed subjects over the given rows
    /// (`subjects.len() × p`, row-major).
    pub fn input_gradients(
        &self,
        subjects: &[usize],
        rows: &[PersonPeriodRow],
    ) -> Result<Vec<f64>> {
        let pos: HashMap<usize, usize> =
            subjects.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let local: Vec<(usize, usize)> =
            rows.iter().map(|r| (pos[&r.subject], r.interval)).collect();
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, false);
        let fwd = self
            .model
            .forward(&mut g, &bound, &self.enc, subjects, &local, true)?;
        let loss = self.model.loss(&mut g, fwd.probs, rows, Reduction::Sum)?;
        let grads = g.backward(loss)?;
        Ok(grads.get(fwd.tab).into_data())
    }
}

/// Distinct subjects of `rows` in first-seen order and the per-row
/// `(position, interval)` pairs.
pub fn local_rows(rows: &[PersonPeriodRow]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut pos: HashMap<usize, usize> = HashMap::new();
    let mut subjects = Vec::new();
    let local = rows
        .iter()
        .map(|r| {
            let k = *pos.entry(r.subject).or_insert_with(|| {
                subjects.push(r.subject);
                subjects.len() - 1
            });
            (k, r.interval)
        })
        .collect();
    (subjects, local)
}

/// Early-stopping bookkeeping shared by plain and imputation training.
#[derive(Debug, Clone)]
pub(crate) struct BestTracker {
    pub best: f64,
    pub since: usize,
}

impl BestTracker {
    pub fn new() -> Self {
        Self {
            best: f64::INFINITY,
            since: 0,
        }
    }

    /// Records `loss`; returns true when it is a new best.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since = 0;
            true
        } else {
            self.since += 1;
            false
        }
    }
}

/// Trains on complete data for one basis count.
fn fit_complete(
    ds: &Dataset,
    grid: TimeGrid,
    head: Head,
    config: &TrainConfig,
    basis_count: usize,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(ds, grid, head, config, basis_count)?;
    let mut tracker = BestTracker::new();
    let mut best = trainer.model.clone();
    let mut epochs = Vec::new();
    for epoch in 1..=config.max_epochs {
        let (train_loss, train_total) = trainer.run_epoch()?;
        let val_loss = trainer.validation_loss()?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch} (learning rate {})",
                config.learning_rate
            )));
        }
        epochs.push(EpochRecord {
            basis_count,
            epoch,
            train_loss,
            train_total,
            val_loss,
            impute_lr: None,
        });
        log::debug!("D={basis_count} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if tracker.update(val_loss) {
            best = trainer.model.clone();
        }
        if tracker.since >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        epochs,
        search: vec![(basis_count, tracker.best)],
        best_val_loss: tracker.best,
        imputed: None,
    })
}

/// Fits the network, searching the basis count when curves are present and
/// switching to imputation-regularized training when covariates are missing.
pub fn train(
    ds: &Dataset,
    grid: TimeGrid,
    head: Head,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let counts = if ds.signal_names().is_empty() {
        vec![0]
    } else {
        config.basis_counts.clone()
    };
    if counts.is_empty() {
        return Err(Error::Config("basis_counts is empty".into()));
    }
    let missing = ds.missing_count() > 0;
    let mut best: Option<TrainOutcome> = None;
    let mut search = Vec::new();
    let mut epochs = Vec::new();
    for d in counts {
        let outcome = if missing {
            crate::mvi::iro_fit(ds, grid, head, config, d)?
        } else {
            fit_complete(ds, grid, head, config, d)?
        };
        log::info!(
            "basis count {d}: best validation loss {:.6}",
            outcome.best_val_loss
        );
        search.push((d, outcome.best_val_loss));
        epochs.extend(outcome.epochs.iter().cloned());
        if best
            .as_ref()
            .is_none_or(|b| outcome.best_val_loss < b.best_val_loss)
        {
            best = Some(outcome);
        }
    }
    let mut best = best.unwrap();
    best.search = search;
    best.epochs = epochs;
    Ok(best)
}
