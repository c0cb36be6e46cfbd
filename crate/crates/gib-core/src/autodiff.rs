//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every intermediate value lives on a [`Tape`] as an `Array2<f64>` (scalars
//! are 1x1, row vectors 1xd). Operations record enough state to push
//! gradients back to their parents in a single reverse sweep. The op set is
//! deliberately small: exactly what the extractor, channels, quantizer and
//! estimator need, each with a hand-derived adjoint that is checked against
//! central finite differences in the test suite.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(usize);

enum Op {
    /// Input, parameter or constant. Backward stops here.
    Leaf,
    Add(VarId, VarId),
    /// `m x d` plus a `1 x d` bias row broadcast over rows.
    AddBias(VarId, VarId),
    Sub(VarId, VarId),
    /// Elementwise product of same-shape matrices.
    Mul(VarId, VarId),
    Scale(VarId, f64),
    /// Elementwise `x + c`; the shift does not enter the adjoint.
    Offset(VarId),
    /// A 1x1 scalar node broadcast-multiplied over a matrix.
    ScalarMul(VarId, VarId),
    MatMul(VarId, VarId),
    Transpose(VarId),
    Relu(VarId),
    Tanh(VarId),
    SoftmaxRows(VarId),
    LogSoftmaxRows(VarId),
    SumAll(VarId),
    MeanAll(VarId),
    Square(VarId),
    /// Row `i` of the parent as a `1 x d` node.
    Row(VarId, usize),
    /// Horizontal concatenation of two single-row nodes.
    ConcatCols(VarId, VarId),
    /// Column means: `m x d` -> `1 x d`.
    MeanRows(VarId),
    /// Divide each row by its sum plus `eps`.
    RowNormalize(VarId, f64),
    /// `sqrt(sum of squares)` as a 1x1 node.
    FrobeniusNorm(VarId),
    /// `x * sqrt(d) / ||x||_2` for a single-row node.
    PowerNormalize(VarId),
    /// `log(sum(exp(entries)))` over all entries, as a 1x1 node.
    LogSumExp(VarId),
    /// Stack 1x1 nodes into a `k x 1` column.
    StackScalars(Vec<VarId>),
    /// `-value[0, class]` of a single-row node, as a 1x1 node.
    NegPick(VarId, usize),
}

struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
}

/// Computation tape. Build a graph forward, then call [`Tape::backward`]
/// once on a scalar node; gradients accumulate into every node's `grad`.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> VarId {
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node { value, grad, op });
        VarId(self.nodes.len() - 1)
    }

    /// Register an input/parameter/constant node.
    pub fn leaf(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// 1x1 constant node.
    pub fn scalar_leaf(&mut self, v: f64) -> VarId {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, x: VarId) -> &Array2<f64> {
        &self.nodes[x.0].value
    }

    pub fn grad(&self, x: VarId) -> &Array2<f64> {
        &self.nodes[x.0].grad
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, x: VarId) -> f64 {
        let v = self.value(x);
        assert_eq!(v.dim(), (1, 1), "scalar_value on a {:?} node", v.dim());
        v[(0, 0)]
    }

    /// Copy a node's value into a fresh leaf. Gradients do not flow past it.
    pub fn detach(&mut self, x: VarId) -> VarId {
        let v = self.value(x).clone();
        self.leaf(v)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add: {:?} vs {:?}", va.dim(), vb.dim());
        let out = va + vb;
        self.push(out, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> VarId {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert_eq!(vb.nrows(), 1, "add_bias: bias must be a single row");
        assert_eq!(vx.ncols(), vb.ncols(), "add_bias: {} vs {}", vx.ncols(), vb.ncols());
        let out = vx + &vb.row(0);
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "sub: {:?} vs {:?}", va.dim(), vb.dim());
        let out = va - vb;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul: {:?} vs {:?}", va.dim(), vb.dim());
        let out = va * vb;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: VarId, c: f64) -> VarId {
        let out = self.value(a) + c;
        self.push(out, Op::Offset(a))
    }

    /// Broadcast-multiply a 1x1 node over a matrix node.
    pub fn scalar_mul(&mut self, scalar: VarId, a: VarId) -> VarId {
        let sv = self.scalar_value(scalar);
        let out = self.value(a) * sv;
        self.push(out, Op::ScalarMul(scalar, a))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul: {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        // f64::max would silently turn NaN into 0; keep NaN so a poisoned
        // forward pass stays visibly non-finite
        let out = self.value(a).mapv(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let mut out = v.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        let out = self.value(a).mapv(|v| v * v);
        self.push(out, Op::Square(a))
    }

    pub fn row(&mut self, a: VarId, i: usize) -> VarId {
        let v = self.value(a);
        assert!(i < v.nrows(), "row {} of {} rows", i, v.nrows());
        let out = v.row(i).insert_axis(Axis(0)).to_owned();
        self.push(out, Op::Row(a, i))
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), 1, "concat_cols expects single-row nodes");
        assert_eq!(vb.nrows(), 1, "concat_cols expects single-row nodes");
        let mut out = Array2::zeros((1, va.ncols() + vb.ncols()));
        out.slice_mut(s![0, ..va.ncols()]).assign(&va.row(0));
        out.slice_mut(s![0, va.ncols()..]).assign(&vb.row(0));
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let out = (v.sum_axis(Axis(0)) / v.nrows() as f64).insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    /// Divide each row by its sum plus `eps`.
    pub fn row_normalize(&mut self, a: VarId, eps: f64) -> VarId {
        let v = self.value(a);
        let mut out = v.clone();
        for mut row in out.rows_mut() {
            let denom = row.sum() + eps;
            row.mapv_inplace(|x| x / denom);
        }
        self.push(out, Op::RowNormalize(a, eps))
    }

    pub fn frobenius_norm(&mut self, a: VarId) -> VarId {
        let n = self.value(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Array2::from_elem((1, 1), n), Op::FrobeniusNorm(a))
    }

    /// Scale a single-row vector to unit mean per-entry power:
    /// `x * sqrt(d) / ||x||_2`. The caller must rule out the zero vector.
    pub fn power_normalize(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        assert_eq!(v.nrows(), 1, "power_normalize expects a single row");
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "power_normalize on a zero vector");
        let c = (v.ncols() as f64).sqrt();
        let out = v * (c / norm);
        self.push(out, Op::PowerNormalize(a))
    }

    pub fn log_sum_exp(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = if max.is_finite() {
            v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max
        } else {
            max
        };
        self.push(Array2::from_elem((1, 1), out), Op::LogSumExp(a))
    }

    pub fn stack_scalars(&mut self, xs: &[VarId]) -> VarId {
        assert!(!xs.is_empty(), "stack_scalars on an empty slice");
        let mut out = Array2::zeros((xs.len(), 1));
        for (i, &x) in xs.iter().enumerate() {
            out[(i, 0)] = self.scalar_value(x);
        }
        self.push(out, Op::StackScalars(xs.to_vec()))
    }

    /// Negative log-probability of `class` from a single-row of log-probs.
    pub fn neg_pick(&mut self, log_probs: VarId, class: usize) -> VarId {
        let v = self.value(log_probs);
        assert_eq!(v.nrows(), 1, "neg_pick expects a single row");
        assert!(class < v.ncols(), "class {} of {} columns", class, v.ncols());
        let out = -v[(0, class)];
        self.push(Array2::from_elem((1, 1), out), Op::NegPick(log_probs, class))
    }

    /// Mean of a list of 1x1 nodes.
    pub fn mean_scalars(&mut self, xs: &[VarId]) -> VarId {
        let stacked = self.stack_scalars(xs);
        self.mean_all(stacked)
    }

    /// Reverse sweep from a 1x1 loss node. Gradients accumulate; call once
    /// per tape.
    pub fn backward(&mut self, loss: VarId) {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward requires a scalar loss node"
        );
        self.nodes[loss.0].grad[(0, 0)] = 1.0;

        for i in (0..=loss.0).rev() {
            // Take the node's grad; ops below only touch parents (< i).
            let g = std::mem::replace(&mut self.nodes[i].grad, Array2::zeros((0, 0)));
            match &self.nodes[i].op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    self.nodes[a.0].grad += &g;
                    self.nodes[b.0].grad += &g;
                }
                &Op::AddBias(x, bias) => {
                    self.nodes[x.0].grad += &g;
                    let col_sums = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.nodes[bias.0].grad += &col_sums;
                }
                &Op::Sub(a, b) => {
                    self.nodes[a.0].grad += &g;
                    self.nodes[b.0].grad -= &g;
                }
                &Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.nodes[a.0].grad += &da;
                    self.nodes[b.0].grad += &db;
                }
                &Op::Scale(a, c) => {
                    self.nodes[a.0].grad.scaled_add(c, &g);
                }
                &Op::Offset(a) => {
                    self.nodes[a.0].grad += &g;
                }
                &Op::ScalarMul(scalar, a) => {
                    let sv = self.nodes[scalar.0].value[(0, 0)];
                    let ds = (&g * &self.nodes[a.0].value).sum();
                    self.nodes[scalar.0].grad[(0, 0)] += ds;
                    self.nodes[a.0].grad.scaled_add(sv, &g);
                }
                &Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.nodes[a.0].grad += &da;
                    self.nodes[b.0].grad += &db;
                }
                &Op::Transpose(a) => {
                    let da = g.t().to_owned();
                    self.nodes[a.0].grad += &da;
                }
                &Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let da = &g * &mask;
                    self.nodes[a.0].grad += &da;
                }
                &Op::Tanh(a) => {
                    let da = &g * &self.nodes[i].value.mapv(|y| 1.0 - y * y);
                    self.nodes[a.0].grad += &da;
                }
                &Op::SoftmaxRows(a) => {
                    // d/dx softmax row: s * (g - <g, s>)
                    let sm = &self.nodes[i].value;
                    let mut da = Array2::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let dot: f64 = g.row(r).iter().zip(sm.row(r)).map(|(gi, si)| gi * si).sum();
                        for c in 0..g.ncols() {
                            da[(r, c)] = sm[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    self.nodes[a.0].grad += &da;
                }
                &Op::LogSoftmaxRows(a) => {
                    // d/dx log-softmax: g - softmax(x) * rowsum(g)
                    let lsm = &self.nodes[i].value;
                    let mut da = g.clone();
                    for r in 0..g.nrows() {
                        let row_sum: f64 = g.row(r).sum();
                        for c in 0..g.ncols() {
                            da[(r, c)] -= lsm[(r, c)].exp() * row_sum;
                        }
                    }
                    self.nodes[a.0].grad += &da;
                }
                &Op::SumAll(a) => {
                    let g0 = g[(0, 0)];
                    self.nodes[a.0].grad += g0;
                }
                &Op::MeanAll(a) => {
                    let g0 = g[(0, 0)] / self.nodes[a.0].value.len() as f64;
                    self.nodes[a.0].grad += g0;
                }
                &Op::Square(a) => {
                    let da = 2.0 * &self.nodes[a.0].value * &g;
                    self.nodes[a.0].grad += &da;
                }
                &Op::Row(a, r) => {
                    let mut parent_row = self.nodes[a.0].grad.row_mut(r);
                    parent_row += &g.row(0);
                }
                &Op::ConcatCols(a, b) => {
                    let na = self.nodes[a.0].value.ncols();
                    let ga = g.slice(s![.., ..na]).to_owned();
                    let gb = g.slice(s![.., na..]).to_owned();
                    self.nodes[a.0].grad += &ga;
                    self.nodes[b.0].grad += &gb;
                }
                &Op::MeanRows(a) => {
                    let m = self.nodes[a.0].value.nrows() as f64;
                    let contrib = g.row(0).mapv(|v| v / m);
                    for mut row in self.nodes[a.0].grad.rows_mut() {
                        row += &contrib;
                    }
                }
                &Op::RowNormalize(a, eps) => {
                    let va = &self.nodes[a.0].value;
                    let out = &self.nodes[i].value;
                    let mut da = Array2::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let denom = va.row(r).sum() + eps;
                        let dot: f64 =
                            g.row(r).iter().zip(out.row(r)).map(|(gi, oi)| gi * oi).sum();
                        for c in 0..g.ncols() {
                            da[(r, c)] = (g[(r, c)] - dot) / denom;
                        }
                    }
                    self.nodes[a.0].grad += &da;
                }
                &Op::FrobeniusNorm(a) => {
                    let n = self.nodes[i].value[(0, 0)].max(1e-12);
                    let da = &self.nodes[a.0].value * (g[(0, 0)] / n);
                    self.nodes[a.0].grad += &da;
                }
                &Op::PowerNormalize(a) => {
                    let x = &self.nodes[a.0].value;
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let c = (x.ncols() as f64).sqrt();
                    let gx_dot: f64 = g.iter().zip(x.iter()).map(|(gi, xi)| gi * xi).sum();
                    let da = g.mapv(|gi| gi * c / norm)
                        - x.mapv(|xi| xi * c * gx_dot / (norm * norm * norm));
                    self.nodes[a.0].grad += &da;
                }
                &Op::LogSumExp(a) => {
                    let va = &self.nodes[a.0].value;
                    let lse = self.nodes[i].value[(0, 0)];
                    let da = va.mapv(|x| (x - lse).exp() * g[(0, 0)]);
                    self.nodes[a.0].grad += &da;
                }
                Op::StackScalars(xs) => {
                    let xs = xs.clone();
                    for (k, x) in xs.iter().enumerate() {
                        self.nodes[x.0].grad[(0, 0)] += g[(k, 0)];
                    }
                }
                &Op::NegPick(a, class) => {
                    self.nodes[a.0].grad[(0, class)] -= g[(0, 0)];
                }
            }
            self.nodes[i].grad = g;
        }
    }
}

/// Row-wise softmax of a plain matrix (shared by tape and inference paths).
pub fn softmax_rows(v: &Array2<f64>) -> Array2<f64> {
    let mut out = v.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grad, random_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_arithmetic_values() {
        let mut t = Tape::new();
        let a = t.scalar_leaf(2.0);
        let b = t.scalar_leaf(3.0);
        let c = t.add(a, b);
        let d = t.scale(c, 2.0);
        assert_eq!(t.scalar_value(d), 10.0);
    }

    #[test]
    fn backward_through_matmul_chain() {
        // loss = sum(A B); dA = 1 B^T, dB = A^T 1
        let mut t = Tape::new();
        let a = t.leaf(ndarray::array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.leaf(ndarray::array![[5.0], [6.0]]);
        let c = t.matmul(a, b);
        let l = t.sum_all(c);
        t.backward(l);
        assert_eq!(t.grad(a), &ndarray::array![[5.0, 6.0], [5.0, 6.0]]);
        assert_eq!(t.grad(b), &ndarray::array![[4.0], [6.0]]);
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(ndarray::array![[2.0, -1.0]]);
        let d = t.detach(a);
        let sq = t.square(d);
        let l = t.sum_all(sq);
        t.backward(l);
        assert_eq!(t.grad(a), &ndarray::array![[0.0, 0.0]]);
        assert_eq!(t.grad(d), &ndarray::array![[4.0, -2.0]]);
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let mut t = Tape::new();
        let a = t.leaf(ndarray::array![[1000.0], [1000.0]]);
        let l = t.log_sum_exp(a);
        let v = t.scalar_value(l);
        assert!((v - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn op_adjoints_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        for trial in 0..20 {
            let m = 2 + (trial % 3);
            let d = 2 + (trial % 4);

            let x0 = random_matrix(&mut rng, m, d);
            check_grad(&x0, |t, x| {
                let y = t.tanh(x);
                let z = t.square(y);
                t.sum_all(z)
            });

            let x1 = random_matrix(&mut rng, m, d).mapv(|v| v + 0.5 * v.signum());
            check_grad(&x1, |t, x| {
                let y = t.relu(x);
                t.mean_all(y)
            });

            let x2 = random_matrix(&mut rng, m, d);
            check_grad(&x2, |t, x| {
                let sm = t.softmax_rows(x);
                let sq = t.square(sm);
                t.sum_all(sq)
            });

            let x3 = random_matrix(&mut rng, m, d);
            check_grad(&x3, |t, x| {
                let lsm = t.log_softmax_rows(x);
                t.neg_pick_sum(lsm)
            });

            let x4 = random_matrix(&mut rng, m, d).mapv(|v| v.abs() + 0.2);
            check_grad(&x4, |t, x| {
                let rn = t.row_normalize(x, 1e-10);
                let sq = t.square(rn);
                t.sum_all(sq)
            });

            // weight the normalized entries; the plain power is constant
            let w5 = random_matrix(&mut rng, 1, d);
            let x5 = random_matrix(&mut rng, 1, d).mapv(|v| v + 0.3 * v.signum());
            check_grad(&x5, |t, x| {
                let pn = t.power_normalize(x);
                let w = t.leaf(w5.clone());
                let weighted = t.mul(pn, w);
                t.sum_all(weighted)
            });

            let x6 = random_matrix(&mut rng, m, 1);
            check_grad(&x6, |t, x| t.log_sum_exp(x));

            let x7 = random_matrix(&mut rng, m, d).mapv(|v| v + 0.2 * v.signum());
            check_grad(&x7, |t, x| t.frobenius_norm(x));

            let x8 = random_matrix(&mut rng, m, d);
            check_grad(&x8, |t, x| {
                let tr = t.transpose(x);
                let prod = t.matmul(tr, x);
                let mr = t.mean_rows(prod);
                let sq = t.square(mr);
                t.sum_all(sq)
            });
        }
    }

    impl Tape {
        /// Test helper: sum of neg_pick over columns 0.. of each row.
        fn neg_pick_sum(&mut self, log_probs: VarId) -> VarId {
            let rows = self.value(log_probs).nrows();
            let cols = self.value(log_probs).ncols();
            let mut picks = Vec::new();
            for r in 0..rows {
                let row = self.row(log_probs, r);
                picks.push(self.neg_pick(row, r % cols));
            }
            self.mean_scalars(&picks)
        }
    }
}
