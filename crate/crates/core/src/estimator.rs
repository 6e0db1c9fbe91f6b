//! Prior-belief estimators: a graph-agnostic MLP and a Chebyshev graph
//! convolution. Both map features to per-class logits whose row softmax
//! gives the prior beliefs `B_p`.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{row_softmax_values, Tape, Var};
use crate::error::{Error, Result};
use crate::features::Features;
use crate::rng::Rng;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Mlp,
    Cheby,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Widths of the hidden layers. Empty means a single linear layer.
    pub hidden_dims: Vec<usize>,
    pub cheby_order: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Mlp,
            hidden_dims: vec![64],
            cheby_order: 2,
            dropout: 0.0,
            activation: Activation::Relu,
        }
    }
}

impl EstimatorConfig {
    pub fn mlp() -> Self {
        Self::default()
    }

    pub fn cheby() -> Self {
        Self {
            kind: EstimatorKind::Cheby,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == EstimatorKind::Cheby && self.cheby_order == 0 {
            return Err(Error::Input("cheby_order must be at least 1".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Input("hidden layer width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Input(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn weights_per_layer(&self) -> usize {
        match self.kind {
            EstimatorKind::Mlp => 1,
            EstimatorKind::Cheby => self.cheby_order + 1,
        }
    }
}

/// Uniform Glorot initialization on `±sqrt(6 / (rows + cols))`.
pub fn glorot_init(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Trainable estimator parameters `Θ_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorEstimator {
    config: EstimatorConfig,
    /// `layers[k][i]` is `W_i^(k)`; MLP layers hold one matrix.
    layers: Vec<Vec<Array2<f64>>>,
}

/// Tape handles for one forward pass of an estimator.
#[derive(Debug, Clone)]
pub struct EstimatorVars {
    layers: Vec<Vec<Var>>,
}

impl EstimatorVars {
    pub fn flat(&self) -> Vec<Var> {
        self.layers.iter().flatten().copied().collect()
    }

    /// Regroups handles listed in `PriorEstimator::params` order.
    pub fn from_flat(est: &PriorEstimator, flat: &[Var]) -> Result<Self> {
        if flat.len() != est.params().len() {
            return Err(Error::Input(format!(
                "expected {} weight handles, got {}",
                est.params().len(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        let layers = est
            .layers
            .iter()
            .map(|l| l.iter().map(|_| it.next().unwrap()).collect())
            .collect();
        Ok(Self { layers })
    }
}

impl PriorEstimator {
    pub fn new(config: EstimatorConfig, in_dim: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![in_dim];
        dims.extend(&config.hidden_dims);
        dims.push(num_classes);
        let per_layer = config.weights_per_layer();
        let layers = dims
            .windows(2)
            .map(|w| (0..per_layer).map(|_| glorot_init(w[0], w[1], rng)).collect())
            .collect();
        Ok(Self { config, layers })
    }

    /// Builds an estimator from explicit weights.
    pub fn from_weights(config: EstimatorConfig, layers: Vec<Vec<Array2<f64>>>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.hidden_dims.len() + 1 {
            return Err(Error::Input(format!(
                "expected {} layers, got {}",
                config.hidden_dims.len() + 1,
                layers.len()
            )));
        }
        if layers.iter().any(|l| l.len() != config.weights_per_layer()) {
            return Err(Error::Input("wrong number of weight matrices per layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0][0].ncols() != pair[1][0].nrows() {
                return Err(Error::Shape {
                    op: "estimator layers",
                    lhs: pair[0][0].dim(),
                    rhs: pair[1][0].dim(),
                });
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0][0].nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap()[0].ncols()
    }

    pub fn layers(&self) -> &[Vec<Array2<f64>>] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flatten().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers.iter_mut().flatten().collect()
    }

    /// Registers the weights as trainable leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<EstimatorVars> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.iter().map(|w| tape.param(w.clone())).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(EstimatorVars { layers })
    }

    /// Records the forward pass and returns the final logits `R^(K)`.
    ///
    /// `laplacian` is `L̃` and is required for the Chebyshev estimator.
    /// Dropout is applied to hidden representations only when `dropout_rng`
    /// is given and the configured rate is positive.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &EstimatorVars,
        input: &Features,
        laplacian: Option<&Arc<CsrMatrix>>,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        if input.dim() != self.input_dim() {
            return Err(Error::Shape {
                op: "estimator input",
                lhs: (input.num_rows(), input.dim()),
                rhs: self.layers[0][0].dim(),
            });
        }
        let last = vars.layers.len() - 1;
        let mut hidden: Option<Var> = None;
        for (k, weights) in vars.layers.iter().enumerate() {
            let out = match self.config.kind {
                EstimatorKind::Mlp => project(tape, input, hidden, weights[0])?,
                EstimatorKind::Cheby => {
                    let lap = laplacian
                        .ok_or_else(|| Error::Input("Chebyshev estimator needs the graph Laplacian".into()))?;
                    let mut acc: Option<Var> = None;
                    for (order, &w) in weights.iter().enumerate() {
                        let z = project(tape, input, hidden, w)?;
                        let term = chebyshev_apply(tape, lap, z, order)?;
                        acc = Some(match acc {
                            None => term,
                            Some(a) => tape.add(a, term)?,
                        });
                    }
                    acc.expect("at least one Chebyshev term")
                }
            };
            if k == last {
                return Ok(out);
            }
            let mut act = self.config.activation.apply(tape, out)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                if self.config.dropout > 0.0 {
                    act = dropout(tape, act, self.config.dropout, rng)?;
                }
            }
            hidden = Some(act);
        }
        unreachable!("estimator has at least one layer")
    }

    /// Inference-only logits.
    pub fn logits(&self, input: &Features, laplacian: Option<&Arc<CsrMatrix>>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let out = self.forward(&mut tape, &vars, input, laplacian, None)?;
        Ok(tape.value(out).clone())
    }

    /// Inference-only prior beliefs `B_p`.
    pub fn prior_beliefs(&self, input: &Features, laplacian: Option<&Arc<CsrMatrix>>) -> Result<Array2<f64>> {
        Ok(prior_beliefs(&self.logits(input, laplacian)?))
    }
}

/// `B_p = softmax(R^(K))`, row-wise.
pub fn prior_beliefs(logits: &Array2<f64>) -> Array2<f64> {
    row_softmax_values(logits)
}

fn project(tape: &mut Tape, input: &Features, hidden: Option<Var>, w: Var) -> Result<Var> {
    match hidden {
        None => input.project(tape, w),
        Some(h) => tape.matmul(h, w),
    }
}

/// `T_order(L̃) · z` via `T_i = 2 L̃ T_{i-1} − T_{i-2}`.
fn chebyshev_apply(tape: &mut Tape, lap: &Arc<CsrMatrix>, z: Var, order: usize) -> Result<Var> {
    if order == 0 {
        return Ok(z);
    }
    let mut prev = z;
    let mut cur = tape.spmm(lap, z)?;
    for _ in 2..=order {
        let lt = tape.spmm(lap, cur)?;
        let lt2 = tape.scale(lt, 2.0)?;
        let next = tape.sub(lt2, prev)?;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
    let keep = 1.0 - rate;
    let mask = Array2::from_shape_fn(tape.value(x).dim(), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = tape.constant(mask)?;
    tape.hadamard(x, m)
}
