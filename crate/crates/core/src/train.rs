//! Training schedule: estimator pretraining, compatibility initialization,
//! joint optimization with co-training, and validation-based early stopping.

use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::estimator::{glorot_init, EstimatorConfig, EstimatorKind, EstimatorVars, PriorEstimator};
use crate::propagation::{
    final_beliefs, h_estimation_error, init_hbar, propagate, propagate_values, recover_h, CompatParam,
    PropagationConfig, PropagationGraph,
};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Start `H̄` from glorot noise instead of the training-set estimate.
    pub no_hbar_init: bool,
    /// Drop the `Φ(H̄)` regularizer.
    pub no_hbar_reg: bool,
    /// Set the co-training weight to zero.
    pub no_cotrain: bool,
    /// Skip estimator pretraining.
    pub no_pretrain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pretrain_iters: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// `λ_p`, weight of the squared norm of the estimator parameters.
    pub weight_decay: f64,
    /// `η`, weight of the co-training loss.
    pub cotrain_weight: f64,
    pub seed: u64,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_iters: 400,
            max_epochs: 2000,
            patience: 200,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            cotrain_weight: 1.0,
            seed: 0,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("cotrain_weight", self.cotrain_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Input(format!("{name} = {v} must be a nonnegative number")));
            }
        }
        if self.patience > self.max_epochs {
            return Err(Error::Input(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }

    pub fn effective_pretrain_iters(&self) -> usize {
        if self.ablations.no_pretrain {
            0
        } else {
            self.pretrain_iters
        }
    }

    pub fn effective_cotrain_weight(&self) -> f64 {
        if self.ablations.no_cotrain {
            0.0
        } else {
            self.cotrain_weight
        }
    }
}

/// Adam with `β = (0.9, 0.999)` and `ε = 1e-8`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Input(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.dim() != g.dim() || self.m[i].dim() != g.dim() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.dim(),
                    rhs: g.dim(),
                });
            }
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Disjoint sorted node index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class stratified split. Each class gets `max(1, ⌊train_frac·size⌋)`
/// training nodes and `max(1, ⌊val_frac·size⌋)` validation nodes (none when
/// `val_frac` is 0); the rest go to test.
pub fn make_splits(labels: &[usize], num_classes: usize, train_frac: f64, val_frac: f64, seed: u64) -> Result<Splits> {
    if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&val_frac) || train_frac + val_frac > 1.0 + 1e-12 {
        return Err(Error::Split(format!(
            "fractions {train_frac} + {val_frac} must lie in [0, 1]"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for c in 0..num_classes {
        let mut nodes: Vec<usize> = (0..labels.len()).filter(|&v| labels[v] == c).collect();
        let size = nodes.len();
        let n_train = ((train_frac * size as f64 + 1e-9).floor() as usize).max(1);
        let n_val = if val_frac > 0.0 {
            ((val_frac * size as f64 + 1e-9).floor() as usize).max(1)
        } else {
            0
        };
        if n_train + n_val > size {
            return Err(Error::Split(format!(
                "class {c} has {size} nodes, needs {n_train} train + {n_val} validation"
            )));
        }
        nodes.shuffle(&mut rng);
        splits.train.extend(&nodes[..n_train]);
        splits.val.extend(&nodes[n_train..n_train + n_val]);
        splits.test.extend(&nodes[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

/// Row argmax, first maximum on ties.
pub fn predictions(beliefs: &Array2<f64>) -> Vec<usize> {
    beliefs
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of `mask` whose argmax matches `labels`; 0 for an empty mask.
pub fn accuracy(beliefs: &Array2<f64>, labels: &[usize], mask: &[usize]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let pred = predictions(beliefs);
    mask.iter().filter(|&&v| pred[v] == labels[v]).count() as f64 / mask.len() as f64
}

/// Graph operators shared by every forward pass on one dataset.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub propagation: PropagationGraph,
    pub laplacian: Arc<CsrMatrix>,
}

impl GraphContext {
    pub fn new(ds: &LabeledDataset) -> Self {
        Self {
            propagation: PropagationGraph::new(&ds.graph),
            laplacian: Arc::new(ds.graph.normalized_laplacian_tilde()),
        }
    }

    fn laplacian_for(&self, est: &PriorEstimator) -> Option<&Arc<CsrMatrix>> {
        (est.config().kind == EstimatorKind::Cheby).then_some(&self.laplacian)
    }
}

fn divergence(epoch: usize, phase: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Divergence { epoch, phase },
        other => other,
    }
}

fn collect_grads(grads: &Gradients, vars: &[Var], shapes: &[(usize, usize)]) -> Vec<Array2<f64>> {
    vars.iter()
        .zip(shapes)
        .map(|(&v, &s)| grads.get_or_zeros(v, s))
        .collect()
}

fn check_masks(ds: &LabeledDataset, splits: &Splits) -> Result<()> {
    let n = ds.num_nodes();
    let mut seen = vec![false; n];
    for &v in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        if v >= n {
            return Err(Error::NodeOutOfRange { id: v, n });
        }
        if seen[v] {
            return Err(Error::Split(format!("node {v} appears in more than one mask")));
        }
        seen[v] = true;
    }
    if splits.train.is_empty() {
        return Err(Error::EmptyMask("training"));
    }
    if splits.val.is_empty() {
        return Err(Error::EmptyMask("validation"));
    }
    Ok(())
}

/// `β₁` Adam steps on masked cross-entropy plus `λ_p`-weighted squared norm.
/// Returns the per-step loss.
pub fn pretrain(
    est: &mut PriorEstimator,
    ds: &LabeledDataset,
    ctx: &GraphContext,
    train_mask: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if train_mask.is_empty() {
        return Err(Error::EmptyMask("pretrain"));
    }
    let iters = cfg.effective_pretrain_iters();
    let shapes: Vec<_> = est.params().iter().map(|p| p.dim()).collect();
    let mut opt = Adam::new(cfg.learning_rate, &shapes);
    let mut losses = Vec::with_capacity(iters);
    for it in 0..iters {
        let mut step = || -> Result<(f64, Vec<Array2<f64>>)> {
            let mut tape = Tape::new();
            let vars = est.bind(&mut tape)?;
            let logits = est.forward(&mut tape, &vars, &ds.features, ctx.laplacian_for(est), Some(rng))?;
            let probs = tape.row_softmax(logits)?;
            let ce = tape.masked_cross_entropy(probs, ds.labels.labels(), train_mask)?;
            let flat = vars.flat();
            let l2 = tape.l2_penalty(&flat)?;
            let l2 = tape.scale(l2, cfg.weight_decay)?;
            let loss = tape.add(ce, l2)?;
            let grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), collect_grads(&grads, &flat, &shapes)))
        };
        let (loss, grads) = step().map_err(divergence(it, "pretrain"))?;
        losses.push(loss);
        opt.step(&mut est.params_mut(), &grads)
            .map_err(divergence(it, "pretrain"))?;
    }
    Ok(losses)
}

/// A trained model: estimator plus compatibility parameter.
#[derive(Debug, Clone)]
pub struct CpgnnModel {
    pub estimator: PriorEstimator,
    pub compat: CompatParam,
    pub propagation: PropagationConfig,
}

impl CpgnnModel {
    pub fn prior_beliefs(&self, ds: &LabeledDataset, ctx: &GraphContext) -> Result<Array2<f64>> {
        self.estimator
            .prior_beliefs(&ds.features, ctx.laplacian_for(&self.estimator))
    }

    /// `B_f` for every node.
    pub fn final_beliefs(&self, ds: &LabeledDataset, ctx: &GraphContext) -> Result<Array2<f64>> {
        let bp = self.prior_beliefs(ds, ctx)?;
        let b0 = crate::propagation::center_beliefs(&bp);
        let bk = propagate_values(&ctx.propagation, &b0, &self.compat.hbar, &self.propagation)?;
        Ok(final_beliefs(&bk))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub ce_final: f64,
    /// `η·L_p`; identically 0 when co-training is off.
    pub cotrain: f64,
    pub phi: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// `δ̄_H` of the current recovered `Ĥ` against the supplied truth.
    pub h_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub pretrain_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
    /// Recovered `Ĥ` at initialization and at the best epoch; `None` when
    /// Sinkhorn could not scale the clamped parameter.
    pub initial_h: Option<Vec<Vec<f64>>>,
    pub final_h: Option<Vec<Vec<f64>>>,
    pub initial_h_error: Option<f64>,
    pub final_h_error: Option<f64>,
    #[serde(skip)]
    pub wall_clock: Duration,
}

fn h_error_of(hhat: Option<&Array2<f64>>, truth: Option<&Array2<f64>>) -> Option<f64> {
    h_estimation_error(hhat?, truth?).ok()
}

pub(crate) fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Loss terms of one joint forward pass.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub ce_final: f64,
    pub cotrain: f64,
    pub phi: f64,
    pub final_beliefs: Var,
}

/// Records `CE_final + η·(CE_prior + λ_p·‖Θ_p‖²) + Φ(H̄)` on `tape`, with
/// the co-training and `Φ` terms omitted as the ablations dictate.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    tape: &mut Tape,
    est: &PriorEstimator,
    vars: &EstimatorVars,
    hv: Var,
    ds: &LabeledDataset,
    ctx: &GraphContext,
    train_mask: &[usize],
    prop_cfg: &PropagationConfig,
    cfg: &TrainConfig,
    dropout_rng: Option<&mut Rng>,
) -> Result<JointLoss> {
    let labels = ds.labels.labels();
    let k = ds.num_classes() as f64;
    let logits = est.forward(tape, vars, &ds.features, ctx.laplacian_for(est), dropout_rng)?;
    let bp = tape.row_softmax(logits)?;
    let b0 = tape.broadcast_sub_scalar(bp, 1.0 / k)?;
    let bk = propagate(tape, &ctx.propagation, b0, hv, prop_cfg)?;
    let bf = tape.row_softmax(bk)?;
    let ce_final = tape.masked_cross_entropy(bf, labels, train_mask)?;
    let mut total = ce_final;
    let mut cotrain = 0.0;
    let eta = cfg.effective_cotrain_weight();
    if eta > 0.0 {
        let ce_prior = tape.masked_cross_entropy(bp, labels, train_mask)?;
        let l2 = tape.l2_penalty(&vars.flat())?;
        let l2 = tape.scale(l2, cfg.weight_decay)?;
        let lp = tape.add(ce_prior, l2)?;
        let lp = tape.scale(lp, eta)?;
        cotrain = tape.scalar(lp);
        total = tape.add(total, lp)?;
    }
    let mut phi = 0.0;
    if !cfg.ablations.no_hbar_reg {
        let reg = tape.row_sum_abs(hv)?;
        phi = tape.scalar(reg);
        total = tape.add(total, reg)?;
    }
    Ok(JointLoss {
        total,
        ce_final: tape.scalar(ce_final),
        cotrain,
        phi,
        final_beliefs: bf,
    })
}

/// Pretraining, `H̄` initialization, then joint training of
/// `CE_final + η·(CE_prior + λ_p·‖Θ_p‖²) + Φ(H̄)` with early stopping on
/// validation accuracy. The best snapshot is restored before returning.
pub fn train_full(
    ds: &LabeledDataset,
    splits: &Splits,
    est_cfg: &EstimatorConfig,
    prop_cfg: &PropagationConfig,
    cfg: &TrainConfig,
    true_h: Option<&Array2<f64>>,
) -> Result<(TrainReport, CpgnnModel)> {
    let start = Instant::now();
    cfg.validate()?;
    check_masks(ds, splits)?;
    let ctx = GraphContext::new(ds);
    let labels = ds.labels.labels();
    let k = ds.num_classes();

    let mut init_rng = rng_from_seed(derive_seed(cfg.seed, 0));
    let mut dropout_rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let mut est = PriorEstimator::new(est_cfg.clone(), ds.features.dim(), k, &mut init_rng)?;
    let pretrain_losses = pretrain(&mut est, ds, &ctx, &splits.train, cfg, &mut dropout_rng)?;

    let mut compat = if cfg.ablations.no_hbar_init {
        CompatParam::new(glorot_init(k, k, &mut init_rng))
    } else {
        let bp = est.prior_beliefs(&ds.features, ctx.laplacian_for(&est))?;
        init_hbar(&ds.graph, &ds.labels, &splits.train, &bp)?
    };
    // Recovery is diagnostic only; a matrix Sinkhorn cannot scale is reported
    // as missing rather than aborting the run.
    let initial_h = compat.initial_estimate().ok();
    let initial_h_error = h_error_of(initial_h.as_ref(), true_h);

    let mut shapes: Vec<_> = est.params().iter().map(|p| p.dim()).collect();
    shapes.push((k, k));
    let mut opt = Adam::new(cfg.learning_rate, &shapes);

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, f64, PriorEstimator, Array2<f64>)> = None;
    for epoch in 0..cfg.max_epochs {
        let step = |rng: &mut Rng| -> Result<(EpochRecord, Vec<Array2<f64>>)> {
            let mut tape = Tape::new();
            let vars = est.bind(&mut tape)?;
            let hv = tape.param(compat.hbar.clone())?;
            let terms = joint_loss(
                &mut tape,
                &est,
                &vars,
                hv,
                ds,
                &ctx,
                &splits.train,
                prop_cfg,
                cfg,
                Some(rng),
            )?;
            let JointLoss {
                total,
                ce_final,
                cotrain,
                phi,
                final_beliefs: bf,
            } = terms;
            let flat = vars.flat();
            let grads = tape.backward(total)?;

            let beliefs = if est.config().dropout > 0.0 {
                CpgnnModel {
                    estimator: est.clone(),
                    compat: compat.clone(),
                    propagation: prop_cfg.clone(),
                }
                .final_beliefs(ds, &ctx)?
            } else {
                tape.value(bf).clone()
            };
            let h_error = match true_h {
                Some(_) => h_error_of(recover_h(&compat.hbar).ok().as_ref(), true_h),
                None => None,
            };
            let mut vars_all = flat;
            vars_all.push(hv);
            let record = EpochRecord {
                epoch,
                total: tape.scalar(total),
                ce_final,
                cotrain,
                phi,
                val_acc: accuracy(&beliefs, labels, &splits.val),
                test_acc: accuracy(&beliefs, labels, &splits.test),
                h_error,
            };
            Ok((record, collect_grads(&grads, &vars_all, &shapes)))
        };
        let (record, grads) = step(&mut dropout_rng).map_err(divergence(epoch, "joint"))?;

        if best.as_ref().is_none_or(|b| record.val_acc > b.1) {
            best = Some((epoch, record.val_acc, record.test_acc, est.clone(), compat.hbar.clone()));
        }
        epochs.push(record);

        let mut params = est.params_mut();
        params.push(&mut compat.hbar);
        opt.step(&mut params, &grads).map_err(divergence(epoch, "joint"))?;

        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    let (best_epoch, best_val_acc, test_acc) = match best.take() {
        Some((e, v, t, snap_est, snap_h)) => {
            est = snap_est;
            compat.hbar = snap_h;
            (e, v, t)
        }
        None => {
            let model = CpgnnModel {
                estimator: est.clone(),
                compat: compat.clone(),
                propagation: prop_cfg.clone(),
            };
            let b = model.final_beliefs(ds, &ctx)?;
            (0, accuracy(&b, labels, &splits.val), accuracy(&b, labels, &splits.test))
        }
    };
    let final_h = recover_h(&compat.hbar).ok();
    let final_h_error = h_error_of(final_h.as_ref(), true_h);
    compat.recovered = final_h.clone();

    let report = TrainReport {
        pretrain_losses,
        epochs,
        best_epoch,
        best_val_acc,
        test_acc,
        initial_h: initial_h.as_ref().map(rows_of),
        final_h: final_h.as_ref().map(rows_of),
        initial_h_error,
        final_h_error,
        wall_clock: start.elapsed(),
    };
    let model = CpgnnModel {
        estimator: est,
        compat,
        propagation: prop_cfg.clone(),
    };
    Ok((report, model))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub val_acc: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
}

/// Which graph-aware forward pass a baseline uses.
#[derive(Debug, Clone)]
pub enum BaselineModel {
    /// The estimator alone: a plain MLP, or the Chebyshev network.
    Estimator(PriorEstimator),
    /// `softmax((A + I)·X·Θ)`.
    SimplifiedGcn(Array2<f64>),
}

/// `softmax((A + I)·X·Θ)` on arrays.
pub fn simplified_gcn_forward(
    g: &crate::graph::SparseGraph,
    x: &crate::features::Features,
    theta: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let t = tape.constant(theta.clone())?;
    let a_hat = Arc::new(g.adjacency().add_identity(1.0));
    let xt = x.project(&mut tape, t)?;
    let z = tape.spmm(&a_hat, xt)?;
    Ok(crate::autodiff::row_softmax_values(tape.value(z)))
}

/// Trains a non-propagating baseline on `CE + λ_p·‖Θ‖²` with the same
/// optimizer and early stopping as the joint phase.
pub fn train_baseline(
    ds: &LabeledDataset,
    splits: &Splits,
    model: BaselineModel,
    cfg: &TrainConfig,
) -> Result<(BaselineReport, BaselineModel)> {
    cfg.validate()?;
    check_masks(ds, splits)?;
    let ctx = GraphContext::new(ds);
    let a_hat = Arc::new(ds.graph.adjacency().add_identity(1.0));
    let labels = ds.labels.labels();
    let mut dropout_rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let mut model = model;
    let shapes: Vec<(usize, usize)> = match &model {
        BaselineModel::Estimator(e) => e.params().iter().map(|p| p.dim()).collect(),
        BaselineModel::SimplifiedGcn(t) => vec![t.dim()],
    };
    let mut opt = Adam::new(cfg.learning_rate, &shapes);
    let mut val_curve = Vec::new();
    let mut best: Option<(usize, f64, f64, BaselineModel)> = None;
    for epoch in 0..cfg.max_epochs {
        let step = |rng: &mut Rng| -> Result<(f64, f64, Vec<Array2<f64>>)> {
            let mut tape = Tape::new();
            let (logits, flat) = match &model {
                BaselineModel::Estimator(est) => {
                    let vars = est.bind(&mut tape)?;
                    let out = est.forward(&mut tape, &vars, &ds.features, ctx.laplacian_for(est), Some(rng))?;
                    (out, vars.flat())
                }
                BaselineModel::SimplifiedGcn(theta) => {
                    let t = tape.param(theta.clone())?;
                    let xt = ds.features.project(&mut tape, t)?;
                    (tape.spmm(&a_hat, xt)?, vec![t])
                }
            };
            let probs = tape.row_softmax(logits)?;
            let ce = tape.masked_cross_entropy(probs, labels, &splits.train)?;
            let l2 = tape.l2_penalty(&flat)?;
            let l2 = tape.scale(l2, cfg.weight_decay)?;
            let loss = tape.add(ce, l2)?;
            let grads = tape.backward(loss)?;
            let beliefs = match &model {
                BaselineModel::Estimator(est) if est.config().dropout > 0.0 => {
                    est.prior_beliefs(&ds.features, ctx.laplacian_for(est))?
                }
                _ => tape.value(probs).clone(),
            };
            Ok((
                accuracy(&beliefs, labels, &splits.val),
                accuracy(&beliefs, labels, &splits.test),
                collect_grads(&grads, &flat, &shapes),
            ))
        };
        let (val, test, grads) = step(&mut dropout_rng).map_err(divergence(epoch, "baseline"))?;
        val_curve.push(val);
        if best.as_ref().is_none_or(|b| val > b.1) {
            best = Some((epoch, val, test, model.clone()));
        }
        let res = match &mut model {
            BaselineModel::Estimator(est) => opt.step(&mut est.params_mut(), &grads),
            BaselineModel::SimplifiedGcn(theta) => opt.step(&mut [theta], &grads),
        };
        res.map_err(divergence(epoch, "baseline"))?;
        if epoch - best.as_ref().map_or(0, |b| b.0) >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_val_acc, test_acc, model) = best.ok_or_else(|| Error::Input("max_epochs is 0".into()))?;
    Ok((
        BaselineReport {
            val_acc: val_curve,
            best_epoch,
            best_val_acc,
            test_acc,
        },
        model,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Features;
    use crate::graph::{LabelAssignment, SparseGraph};
    use ndarray::array;

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut p = array![[1.0, -2.0]];
        let mut opt = Adam::new(0.1, &[(1, 2)]);
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[Array2::zeros((1, 2))]).unwrap();
        }
        assert_eq!(p, array![[1.0, -2.0]]);
    }

    #[test]
    fn adam_constant_grad_matches_hand_recurrence() {
        let (lr, g) = (0.01, 0.5);
        let mut p = array![[0.0]];
        let mut opt = Adam::new(lr, &[(1, 1)]);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            opt.step(&mut [&mut p], &[array![[g]]]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((p[[0, 0]] - x).abs() < 1e-15);
        }
        // A constant gradient moves every step by almost exactly lr.
        assert!((x + 3.0 * lr).abs() < 1e-6);
    }

    #[test]
    fn splits_exact_counts() {
        let labels: Vec<usize> = (0..1000).map(|v| v % 10).collect();
        let s = make_splits(&labels, 10, 0.1, 0.1, 7).unwrap();
        for c in 0..10 {
            let count = |m: &[usize]| m.iter().filter(|&&v| labels[v] == c).count();
            assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (10, 10, 80));
        }
        assert_eq!(s, make_splits(&labels, 10, 0.1, 0.1, 7).unwrap());
        assert_ne!(s, make_splits(&labels, 10, 0.1, 0.1, 8).unwrap());
    }

    #[test]
    fn splits_minimum_one_and_too_small() {
        let labels = vec![0, 0, 0, 1, 1, 1];
        let s = make_splits(&labels, 2, 0.1, 0.1, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2, 2, 2));
        let labels = vec![0, 1, 1];
        assert!(matches!(make_splits(&labels, 2, 0.1, 0.1, 0), Err(Error::Split(_))));
        assert!(make_splits(&labels, 2, 0.7, 0.5, 0).is_err());
    }

    #[test]
    fn accuracy_uses_first_max() {
        let b = array![[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]];
        assert_eq!(predictions(&b), vec![0, 1, 0]);
        assert_eq!(accuracy(&b, &[0, 0, 0], &[0, 1, 2]), 2.0 / 3.0);
        assert_eq!(accuracy(&b, &[0, 0, 0], &[]), 0.0);
    }

    fn blobs() -> LabeledDataset {
        // Two separable clusters along the first coordinate.
        let n = 40;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 {
                sign * (1.0 + (i as f64) * 0.01)
            } else {
                ((i * 7) % 5) as f64 * 0.1
            }
        });
        let y = LabelAssignment::new((0..n).map(|i| i % 2).collect(), 2).unwrap();
        let g = SparseGraph::build(n, (0..n - 1).map(|i| (i, i + 1))).unwrap();
        LabeledDataset::new("blobs", g, y, Features::dense(x)).unwrap()
    }

    #[test]
    fn pretrain_fits_separable_blobs() {
        let ds = blobs();
        let ctx = GraphContext::new(&ds);
        let train: Vec<usize> = (0..20).collect();
        let cfg = TrainConfig {
            pretrain_iters: 200,
            ..Default::default()
        };
        let mut rng = rng_from_seed(1);
        let mut est = PriorEstimator::new(EstimatorConfig::mlp(), 2, 2, &mut rng).unwrap();
        let losses = pretrain(&mut est, &ds, &ctx, &train, &cfg, &mut rng).unwrap();
        assert_eq!(losses.len(), 200);
        let bp = est.prior_beliefs(&ds.features, None).unwrap();
        let ce: f64 = train.iter().map(|&v| -bp[[v, ds.labels.labels()[v]]].ln()).sum::<f64>() / 20.0;
        assert!(ce < 0.1, "train CE {ce}");
        for w in losses.chunks(10).collect::<Vec<_>>().windows(2) {
            let (a, b): (f64, f64) = (w[0].iter().sum(), w[1].iter().sum());
            assert!(b <= a + 1e-9, "window loss rose from {a} to {b}");
        }
    }

    #[test]
    fn no_pretrain_returns_initial_estimator() {
        let ds = blobs();
        let ctx = GraphContext::new(&ds);
        let cfg = TrainConfig {
            ablations: Ablations {
                no_pretrain: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut rng = rng_from_seed(1);
        let mut est = PriorEstimator::new(EstimatorConfig::mlp(), 2, 2, &mut rng).unwrap();
        let before = est.clone();
        assert!(pretrain(&mut est, &ds, &ctx, &[0, 1], &cfg, &mut rng)
            .unwrap()
            .is_empty());
        assert_eq!(est, before);
    }

    #[test]
    fn validation_mask_required() {
        let ds = blobs();
        let splits = Splits {
            train: vec![0, 1],
            val: vec![],
            test: vec![2, 3],
        };
        let res = train_full(
            &ds,
            &splits,
            &EstimatorConfig::mlp(),
            &PropagationConfig::default(),
            &TrainConfig::default(),
            None,
        );
        assert!(matches!(res, Err(Error::EmptyMask("validation"))));
        let overlap = Splits {
            train: vec![0, 1],
            val: vec![1],
            test: vec![],
        };
        assert!(train_base_err(&ds, &overlap));
    }

    fn train_base_err(ds: &LabeledDataset, s: &Splits) -> bool {
        let est = PriorEstimator::new(EstimatorConfig::mlp(), 2, 2, &mut rng_from_seed(0)).unwrap();
        train_baseline(ds, s, BaselineModel::Estimator(est), &TrainConfig::default()).is_err()
    }

    #[test]
    fn early_stopping_restores_best_validation() {
        let ds = blobs();
        let splits = make_splits(ds.labels.labels(), 2, 0.2, 0.2, 3).unwrap();
        let cfg = TrainConfig {
            pretrain_iters: 20,
            max_epochs: 60,
            patience: 15,
            ..Default::default()
        };
        let (report, model) = train_full(
            &ds,
            &splits,
            &EstimatorConfig::mlp(),
            &PropagationConfig::default(),
            &cfg,
            None,
        )
        .unwrap();
        let max = report.epochs.iter().map(|e| e.val_acc).fold(f64::MIN, f64::max);
        assert_eq!(report.best_val_acc, max);
        let ctx = GraphContext::new(&ds);
        let b = model.final_beliefs(&ds, &ctx).unwrap();
        assert_eq!(accuracy(&b, ds.labels.labels(), &splits.val), max);
        assert_eq!(accuracy(&b, ds.labels.labels(), &splits.test), report.test_acc);
    }
}
