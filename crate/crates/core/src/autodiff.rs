//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes in reverse insertion
//! order and accumulates adjoints additively, so a value used twice receives
//! the sum of both contributions. Sparse matrices only ever appear as
//! constant left factors ([`Tape::spmm`]); they carry no gradient.
//!
//! All shapes are explicit. The only broadcasting is by a scalar constant.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Probabilities below this floor are clamped inside the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Hadamard(Var, Var),
    Transpose(Var),
    Relu(Var),
    RowSoftmax(Var),
    /// Mean negative log-likelihood over `(node, class)` targets.
    CrossEntropy {
        probs: Var,
        targets: Vec<(usize, usize)>,
    },
    SumSquares(Var),
    RowSumAbs(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(x: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), x)
}

fn check_same(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            op,
            lhs: a.dim(),
            rhs: b.dim(),
        });
    }
    Ok(())
}

pub fn row_softmax_values(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Array2<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.dim(),
                rhs: vb.dim(),
            });
        }
        let out = va.dot(vb);
        let rg = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    /// Product of a constant sparse matrix with a tensor.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, b: Var) -> Result<Var> {
        let out = s.mul_dense(self.value(b))?;
        let rg = self.needs(b);
        self.push("spmm", out, Op::SpMM(Arc::clone(s), b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        let rg = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        let rg = self.needs(a) || self.needs(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a) * s;
        let rg = self.needs(a);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    /// Adds the scalar `s` to every entry.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a) + s;
        let rg = self.needs(a);
        self.push("add_scalar", out, Op::AddScalar(a), rg)
    }

    /// Subtracts the scalar `s` from every entry.
    pub fn broadcast_sub_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.add_scalar(a, -s)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("hadamard", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        let rg = self.needs(a) || self.needs(b);
        self.push("hadamard", out, Op::Hadamard(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).t().to_owned();
        let rg = self.needs(a);
        self.push("transpose", out, Op::Transpose(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let rg = self.needs(a);
        self.push("relu", out, Op::Relu(a), rg)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let out = row_softmax_values(self.value(a));
        let rg = self.needs(a);
        self.push("row_softmax", out, Op::RowSoftmax(a), rg)
    }

    /// Mean over `mask` of `−ln probs[v, labels[v]]`, with probabilities
    /// clamped at [`PROB_FLOOR`].
    pub fn masked_cross_entropy(&mut self, probs: Var, labels: &[usize], mask: &[usize]) -> Result<Var> {
        if mask.is_empty() {
            return Err(Error::EmptyMask("masked_cross_entropy"));
        }
        let p = self.value(probs);
        if labels.len() != p.nrows() {
            return Err(Error::Shape {
                op: "masked_cross_entropy",
                lhs: p.dim(),
                rhs: (labels.len(), 1),
            });
        }
        let mut targets = Vec::with_capacity(mask.len());
        let mut total = 0.0;
        for &v in mask {
            let row = p.row(v);
            if (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!(
                    "cross-entropy input row {v} sums to {}, expected 1",
                    row.sum()
                )));
            }
            let c = labels[v];
            if c >= p.ncols() {
                return Err(Error::Input(format!(
                    "label {c} of node {v} exceeds width {}",
                    p.ncols()
                )));
            }
            total -= row[c].max(PROB_FLOOR).ln();
            targets.push((v, c));
        }
        let out = scalar(total / mask.len() as f64);
        let rg = self.needs(probs);
        self.push("masked_cross_entropy", out, Op::CrossEntropy { probs, targets }, rg)
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let out = scalar(self.value(a).iter().map(|v| v * v).sum());
        let rg = self.needs(a);
        self.push("sum_squares", out, Op::SumSquares(a), rg)
    }

    /// Squared-norm penalty summed over several tensors.
    pub fn l2_penalty(&mut self, params: &[Var]) -> Result<Var> {
        let mut acc = self.constant(scalar(0.0))?;
        for &p in params {
            let sq = self.sum_squares(p)?;
            acc = self.add(acc, sq)?;
        }
        Ok(acc)
    }

    /// `Σ_i |Σ_j a_ij|`.
    pub fn row_sum_abs(&mut self, a: Var) -> Result<Var> {
        let out = scalar(self.value(a).sum_axis(Axis(1)).iter().map(|s| s.abs()).sum());
        let rg = self.needs(a);
        self.push("row_sum_abs", out, Op::RowSumAbs(a), rg)
    }

    /// Reverse pass from a scalar node. Forward values are left untouched.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).dim();
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: shape,
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::SpMM(s, b) => {
                    let gb = s.transpose_mul_dense(&g)?;
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, -g);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g * *s),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Hadamard(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    let dots = ga.sum_axis(Axis(1));
                    Zip::from(ga.rows_mut())
                        .and(y.rows())
                        .and(&dots)
                        .for_each(|mut row, yrow, &d| row.zip_mut_with(&yrow, |gi, &yi| *gi -= yi * d));
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy { probs, targets } => {
                    let p = self.value(*probs);
                    let upstream = g[[0, 0]] / targets.len() as f64;
                    let mut gp = Array2::zeros(p.dim());
                    for &(v, c) in targets {
                        let pv = p[[v, c]];
                        if pv > PROB_FLOOR {
                            gp[[v, c]] -= upstream / pv;
                        }
                    }
                    accumulate(&mut grads, *probs, gp);
                }
                Op::SumSquares(a) => {
                    let ga = self.value(*a) * (2.0 * g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSumAbs(a) => {
                    let va = self.value(*a);
                    let signs = va.sum_axis(Axis(1)).mapv(|s| {
                        if s > 0.0 {
                            1.0
                        } else if s < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    let up = g[[0, 0]];
                    let ga = Array2::from_shape_fn(va.dim(), |(i, _)| signs[i] * up);
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints of leaf nodes after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, with zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Worst relative error over all entries of all parameters.
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor.
    pub per_param: Vec<f64>,
}

/// Differences smaller than this are treated as exact agreement.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-9;

/// Checks the gradient of the scalar produced by `build` with respect to each
/// tensor in `params` using central differences with step `eps`.
///
/// `build` receives a fresh tape and one param handle per tensor, and must
/// return the scalar loss node. It must be deterministic.
pub fn finite_diff_check<F>(params: &[Array2<f64>], eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array2<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| tape.param(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|v| tape.param(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Array2<f64>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (k, (&var, param)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.get_or_zeros(var, param.dim());
        let mut worst = 0.0f64;
        for idx in 0..param.len() {
            let (r, c) = (idx / param.ncols(), idx % param.ncols());
            let orig = param[[r, c]];
            work[k][[r, c]] = orig + eps;
            let plus = eval(&work)?;
            work[k][[r, c]] = orig - eps;
            let minus = eval(&work)?;
            work[k][[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[[r, c]];
            let diff = (a - numeric).abs();
            let rel = if diff <= GRAD_CHECK_ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(numeric.abs())
            };
            worst = worst.max(rel);
        }
        per_param.push(worst);
    }
    Ok(GradCheck {
        max_rel_error: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
    })
}
