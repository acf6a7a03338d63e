//! Learnable basis functions for functional covariates.
//!
//! Each basis function `B_d(τ)` is a small network of scalar input and
//! output. A curve is reduced to `D` coefficients by the quadrature
//! `a_d = Σ_j w_j B_d(τ_j) x(τ_j)` on the layer's sample grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FunctionalCurve;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Composite trapezoid weights for strictly increasing sample points.
pub fn trapezoid_weights(taus: &[f64]) -> Result<Vec<f64>> {
    let n = taus.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "trapezoid rule needs at least 2 points".into(),
        ));
    }
    if taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "sample points must be strictly increasing".into(),
        ));
    }
    let mut w = vec![0.0; n];
    w[0] = (taus[1] - taus[0]) / 2.0;
    w[n - 1] = (taus[n - 1] - taus[n - 2]) / 2.0;
    for j in 1..n - 1 {
        w[j] = (taus[j + 1] - taus[j - 1]) / 2.0;
    }
    Ok(w)
}

/// Fully connected layer with weight `out × in` and bias `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A [`DenseLayer`] whose tensors have been placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub w: Var,
    pub b: Var,
}

impl DenseLayer {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::glorot(outputs, inputs, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "dense layer weight {:?} and bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDense {
        if trainable {
            BoundDense {
                w: g.variable(self.weight.clone()),
                b: g.variable(self.bias.clone()),
            }
        } else {
            BoundDense {
                w: g.constant(self.weight.clone()),
                b: g.constant(self.bias.clone()),
            }
        }
    }
}

/// One basis function: `tanh` hidden sublayers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroNetwork {
    pub layers: Vec<DenseLayer>,
}

impl MicroNetwork {
    pub fn init<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer::init(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::InvalidArgument("micro-network needs a layer".into()));
        };
        if first.inputs() != 1 || layers.last().unwrap().outputs() != 1 {
            return Err(Error::Shape(
                "micro-network must map a scalar to a scalar".into(),
            ));
        }
        if layers.windows(2).any(|w| w[0].outputs() != w[1].inputs()) {
            return Err(Error::Shape(
                "micro-network layer widths do not chain".into(),
            ));
        }
        Ok(Self { layers })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<BoundDense> {
        self.layers.iter().map(|l| l.bind(g, trainable)).collect()
    }

    /// Evaluates the network on a column of sample points `taus` (`J × 1`).
    pub fn forward(g: &mut Graph, bound: &[BoundDense], taus: Var) -> Result<Var> {
        let mut h = taus;
        for (k, layer) in bound.iter().enumerate() {
            h = g.dense(h, layer.w, layer.b)?;
            if k + 1 < bound.len() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// `B_d(τ)` for a single point.
pub fn micro_forward(tau: f64, net: &MicroNetwork) -> Result<f64> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let x = g.constant(Tensor::matrix(1, 1, vec![tau])?);
    let out = MicroNetwork::forward(&mut g, &bound, x)?;
    Ok(g.value(out).item())
}

/// `D` micro-networks sharing one quadrature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisLayer {
    pub nets: Vec<MicroNetwork>,
    pub taus: Vec<f64>,
    pub weights: Vec<f64>,
}

impl BasisLayer {
    pub fn new(nets: Vec<MicroNetwork>, taus: Vec<f64>) -> Result<Self> {
        if nets.is_empty() {
            return Err(Error::InvalidArgument("basis layer needs D >= 1".into()));
        }
        if taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument(
                "basis grid must lie in [0, 1]".into(),
            ));
        }
        let weights = trapezoid_weights(&taus)?;
        Ok(Self {
            nets,
            taus,
            weights,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        count: usize,
        hidden: &[usize],
        taus: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let nets = (0..count)
            .map(|_| MicroNetwork::init(hidden, rng))
            .collect();
        Self::new(nets, taus)
    }

    /// Number of basis functions `D`.
    pub fn size(&self) -> usize {
        self.nets.len()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Vec<BoundDense>> {
        self.nets.iter().map(|n| n.bind(g, trainable)).collect()
    }

    /// `J × D` matrix of basis values on the layer grid.
    pub fn basis_matrix(&self, g: &mut Graph, bound: &[Vec<BoundDense>]) -> Result<Var> {
        let taus = g.constant(Tensor::matrix(self.taus.len(), 1, self.taus.clone())?);
        let cols = bound
            .iter()
            .map(|b| MicroNetwork::forward(g, b, taus))
            .collect::<Result<Vec<_>>>()?;
        g.concat_cols(&cols)
    }

    /// Coefficients for a batch of curves given as quadrature-weighted samples
    /// (`S × J`, entry `w_j x_s(τ_j)`); returns `S × D`.
    pub fn project_weighted(
        &self,
        g: &mut Graph,
        bound: &[Vec<BoundDense>],
        weighted: Var,
    ) -> Result<Var> {
        let basis = self.basis_matrix(g, bound)?;
        g.matmul(weighted, basis)
    }

    /// Curve values on this layer's grid, interpolating when the sample
    /// points differ.
    pub fn align(&self, curve: &FunctionalCurve) -> Vec<f64> {
        let same = curve.taus.len() == self.taus.len()
            && curve
                .taus
                .iter()
                .zip(&self.taus)
                .all(|(a, b)| (a - b).abs() <= 1e-12);
        if same {
            curve.values.clone()
        } else {
            self.taus.iter().map(|&t| curve.interpolate(t)).collect()
        }
    }

    /// Coefficient vector `a ∈ R^D` for one curve sampled on the layer grid.
    pub fn project(&self, curve: &FunctionalCurve) -> Result<Vec<f64>> {
        let matches = curve.taus.len() == self.taus.len()
            && curve
                .taus
                .iter()
                .zip(&self.taus)
                .all(|(a, b)| (a - b).abs() <= 1e-9);
        if !matches {
            return Err(Error::Data(format!(
                "curve '{}' is not sampled on the basis grid",
                curve.name
            )));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let weighted: Vec<f64> = curve
            .values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .collect();
        let x = g.constant(Tensor::matrix(1, weighted.len(), weighted)?);
        let a = self.project_weighted(&mut g, &bound, x)?;
        Ok(g.value(a).data().to_vec())
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.nets.iter().flat_map(MicroNetwork::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.nets.iter_mut().flat_map(MicroNetwork::params_mut)
    }
}

/// Common sample grid for a set of curves: the shared grid when all agree,
/// otherwise the sorted union, replaced by a uniform grid of `cap` points
/// when the union is larger than `cap`.
pub fn canonical_grid<'a>(
    curves: impl IntoIterator<Item = &'a FunctionalCurve>,
    cap: usize,
) -> Vec<f64> {
    let mut union: Vec<f64> = Vec::new();
    for c in curves {
        union.extend_from_slice(&c.taus);
    }
    union.sort_by(f64::total_cmp);
    union.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    if union.len() > cap {
        let cap = cap.max(2);
        (0..cap).map(|j| j as f64 / (cap - 1) as f64).collect()
    } else {
        union
    }
}
