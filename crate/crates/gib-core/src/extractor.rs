//! Transmitter-side feature extraction: soft assignment of nodes into a
//! task subgraph vs. its complement, aggregation of the selected side into
//! a single embedding, and the connectivity penalty that ties assignments
//! to topology.

use crate::autodiff::{Tape, VarId};
use crate::backbone::{linear_forward, Linear, LinearBound, ModelError};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Additive guard in the row normalization of the connectivity loss.
pub const ROW_NORM_GUARD: f64 = 1e-10;

/// Two-layer assignment head: FC + tanh, then FC to two logits per node.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct AssignmentMlpBound {
    pub fc1: LinearBound,
    pub fc2: LinearBound,
}

impl AssignmentMlp {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AssignmentMlp { fc1: Linear::init(dim, dim, rng), fc2: Linear::init(dim, 2, rng) }
    }

    pub fn bind(&self, tape: &mut Tape) -> AssignmentMlpBound {
        AssignmentMlpBound { fc1: self.fc1.bind(tape), fc2: self.fc2.bind(tape) }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ndarray::Array2<f64>> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}

impl AssignmentMlpBound {
    pub fn ids(&self) -> Vec<crate::autodiff::VarId> {
        let mut ids = self.fc1.ids();
        ids.extend(self.fc2.ids());
        ids
    }
}

impl crate::backbone::ParamSet for AssignmentMlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

/// Row-stochastic `m x 2` assignment matrix from node features:
/// `softmax(fc2(tanh(fc1(X))))` row-wise. Column 0 is the probability of
/// membership in the selected subgraph.
pub fn assign_nodes(
    tape: &mut Tape,
    node_features: VarId,
    mlp: &AssignmentMlpBound,
) -> Result<VarId, ModelError> {
    let dim = tape.value(node_features).ncols();
    if dim != tape.value(mlp.fc1.weight).nrows() {
        return Err(ModelError::Shape(format!(
            "node feature dim {dim} != assignment input dim {}",
            tape.value(mlp.fc1.weight).nrows()
        )));
    }
    let hidden = linear_forward(tape, node_features, &mlp.fc1);
    let hidden = tape.tanh(hidden);
    let logits = linear_forward(tape, hidden, &mlp.fc2);
    Ok(tape.softmax_rows(logits))
}

/// First row of `S^T X`: the embedding of the selected subgraph,
/// `sum_i S[i,0] * X[i,:]` as a `1 x dim` node.
pub fn aggregate_subgraph(
    tape: &mut Tape,
    assignment: VarId,
    node_features: VarId,
) -> Result<VarId, ModelError> {
    let (sm, sn) = tape.value(assignment).dim();
    let fm = tape.value(node_features).nrows();
    if sm != fm || sn != 2 {
        return Err(ModelError::Shape(format!(
            "assignment {sm}x{sn} vs features {fm} rows"
        )));
    }
    let st = tape.transpose(assignment);
    let pooled = tape.matmul(st, node_features);
    Ok(tape.row(pooled, 0))
}

/// Connectivity loss `|| RowNorm(S^T A S) - I_2 ||_F` with the row sums
/// guarded by [`ROW_NORM_GUARD`]. Zero exactly when the normalized
/// block-connectivity matrix is the identity.
pub fn connectivity_loss(
    tape: &mut Tape,
    assignment: VarId,
    adjacency: VarId,
) -> Result<VarId, ModelError> {
    let (sm, sn) = tape.value(assignment).dim();
    let (am, an) = tape.value(adjacency).dim();
    if sn != 2 || am != an || am != sm {
        return Err(ModelError::Shape(format!(
            "assignment {sm}x{sn} vs adjacency {am}x{an}"
        )));
    }
    let st = tape.transpose(assignment);
    let sta = tape.matmul(st, adjacency);
    let stas = tape.matmul(sta, assignment);
    let normed = tape.row_normalize(stas, ROW_NORM_GUARD);
    let identity = tape.leaf(Array2::eye(2));
    let diff = tape.sub(normed, identity);
    Ok(tape.frobenius_norm(diff))
}

/// Hard membership mask for reporting only: `S[i,0] > 0.5`.
pub fn hard_subgraph_mask(assignment: &Array2<f64>) -> Vec<bool> {
    assignment.column(0).iter().map(|&p| p > 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grad, random_matrix};
    use ndarray::array;
    use rand::{Rng as _, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_give_uniform_assignment() {
        let mut t = Tape::new();
        let mlp = AssignmentMlp {
            fc1: Linear { weight: Array2::zeros((3, 3)), bias: Array2::zeros((1, 3)) },
            fc2: Linear { weight: Array2::zeros((3, 2)), bias: Array2::zeros((1, 2)) },
        };
        let bound = mlp.bind(&mut t);
        let x = t.leaf(random_matrix(&mut rng(0), 4, 3));
        let s = assign_nodes(&mut t, x, &bound).unwrap();
        for row in t.value(s).rows() {
            assert!((row[0] - 0.5).abs() < 1e-12);
            assert!((row[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_rows_sum_to_one() {
        let mut r = rng(1);
        let mlp = AssignmentMlp::init(5, &mut r);
        let mut t = Tape::new();
        let bound = mlp.bind(&mut t);
        let x = t.leaf(random_matrix(&mut r, 7, 5));
        let s = assign_nodes(&mut t, x, &bound).unwrap();
        for row in t.value(s).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn hand_set_logits_match_softmax_table() {
        // logits [[3,1],[0,0]] -> rows [softmax(3,1), softmax(0,0)]
        let mut t = Tape::new();
        let logits = t.leaf(array![[3.0, 1.0], [0.0, 0.0]]);
        let s = t.softmax_rows(logits);
        let v = t.value(s);
        assert!((v[(0, 0)] - 0.8808).abs() < 1e-4);
        assert!((v[(0, 1)] - 0.1192).abs() < 1e-4);
        assert!((v[(1, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aggregation_selects_one_hot_row() {
        let mut t = Tape::new();
        let s = t.leaf(array![[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let x = t.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let agg = aggregate_subgraph(&mut t, s, x).unwrap();
        assert_eq!(t.value(agg), &array![[3.0, 4.0]]);
    }

    #[test]
    fn aggregation_with_uniform_assignment_halves_the_sum() {
        let mut t = Tape::new();
        let s = t.leaf(Array2::from_elem((3, 2), 0.5));
        let x = t.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let agg = aggregate_subgraph(&mut t, s, x).unwrap();
        assert_eq!(t.value(agg), &array![[4.5, 6.0]]);
    }

    #[test]
    fn aggregation_matches_matrix_product_oracle() {
        let mut r = rng(3);
        for _ in 0..10 {
            let s_val = {
                let logits = random_matrix(&mut r, 4, 2);
                crate::autodiff::softmax_rows(&logits)
            };
            let x_val = random_matrix(&mut r, 4, 3);
            let mut t = Tape::new();
            let s = t.leaf(s_val.clone());
            let x = t.leaf(x_val.clone());
            let agg = aggregate_subgraph(&mut t, s, x).unwrap();
            // independent oracle: explicit loop over the first column
            let mut expected: Array2<f64> = Array2::zeros((1, 3));
            for i in 0..4 {
                for j in 0..3 {
                    expected[(0, j)] += s_val[(i, 0)] * x_val[(i, j)];
                }
            }
            let diff = (t.value(agg) - &expected)
                .iter()
                .map(|d| d.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn aggregation_is_linear_in_features() {
        let mut r = rng(5);
        let s_val = crate::autodiff::softmax_rows(&random_matrix(&mut r, 5, 2));
        let x1 = random_matrix(&mut r, 5, 3);
        let x2 = random_matrix(&mut r, 5, 3);
        let run = |x_val: &Array2<f64>| {
            let mut t = Tape::new();
            let s = t.leaf(s_val.clone());
            let x = t.leaf(x_val.clone());
            let agg = aggregate_subgraph(&mut t, s, x).unwrap();
            t.value(agg).clone()
        };
        let lhs = run(&(2.0 * &x1 + &x2));
        let rhs = 2.0 * &run(&x1) + &run(&x2);
        assert!((lhs - rhs).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn perfect_partition_of_disconnected_triangles_is_zero() {
        // two triangles, no cross edges; S assigns them to opposite columns
        let adj = array![
            [0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 0.0, 1.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 1.0, 1.0, 0.0]
        ];
        let mut s_val = Array2::zeros((6, 2));
        for i in 0..3 {
            s_val[(i, 0)] = 1.0;
            s_val[(i + 3, 1)] = 1.0;
        }
        let mut t = Tape::new();
        let s = t.leaf(s_val);
        let a = t.leaf(adj);
        let loss = connectivity_loss(&mut t, s, a).unwrap();
        assert!(t.scalar_value(loss).abs() <= 1e-9);
    }

    #[test]
    fn uniform_assignment_on_any_edged_graph_gives_one() {
        let graphs = [
            array![[0.0, 1.0], [1.0, 0.0]],
            array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
        ];
        for adj in graphs {
            let m = adj.nrows();
            let mut t = Tape::new();
            let s = t.leaf(Array2::from_elem((m, 2), 0.5));
            let a = t.leaf(adj);
            let loss = connectivity_loss(&mut t, s, a).unwrap();
            assert!(
                (t.scalar_value(loss) - 1.0).abs() <= 1e-9,
                "loss {}",
                t.scalar_value(loss)
            );
        }
    }

    #[test]
    fn edgeless_graph_falls_back_to_sqrt_two() {
        let mut t = Tape::new();
        let s = t.leaf(Array2::from_elem((4, 2), 0.5));
        let a = t.leaf(Array2::zeros((4, 4)));
        let loss = connectivity_loss(&mut t, s, a).unwrap();
        assert!((t.scalar_value(loss) - 2.0f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn connectivity_loss_is_nonnegative_and_permutation_invariant() {
        let mut r = rng(7);
        for _ in 0..10 {
            let m = 5;
            let adj = {
                let mut a = Array2::zeros((m, m));
                for i in 0..m {
                    for j in (i + 1)..m {
                        if r.random_range(0.0..1.0) < 0.5 {
                            a[(i, j)] = 1.0;
                            a[(j, i)] = 1.0;
                        }
                    }
                }
                a
            };
            let s_val = crate::autodiff::softmax_rows(&random_matrix(&mut r, m, 2));
            let run = |adj: &Array2<f64>, s_val: &Array2<f64>| {
                let mut t = Tape::new();
                let s = t.leaf(s_val.clone());
                let a = t.leaf(adj.clone());
                let loss = connectivity_loss(&mut t, s, a).unwrap();
                t.scalar_value(loss)
            };
            let base = run(&adj, &s_val);
            assert!(base >= 0.0);

            // permute nodes simultaneously in S and A
            let perm = [2usize, 0, 4, 1, 3];
            let mut p = Array2::zeros((m, m));
            for (i, &j) in perm.iter().enumerate() {
                p[(i, j)] = 1.0;
            }
            let permuted = run(&p.dot(&adj).dot(&p.t()), &p.dot(&s_val));
            assert!((base - permuted).abs() < 1e-10);
        }
    }

    #[test]
    fn connectivity_gradient_matches_finite_differences() {
        let mut r = rng(9);
        let adj = array![
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 0.0, 1.0, 0.0]
        ];
        for _ in 0..10 {
            let s_val = crate::autodiff::softmax_rows(&random_matrix(&mut r, 4, 2));
            check_grad(&s_val, |t, s| {
                let a = t.leaf(adj.clone());
                connectivity_loss(t, s, a).unwrap()
            });
        }
    }

    #[test]
    fn assignment_gradient_matches_finite_differences() {
        let mut r = rng(11);
        let mlp = AssignmentMlp::init(3, &mut r);
        let x_val = random_matrix(&mut r, 4, 3);
        check_grad(&x_val, |t, x| {
            let bound = mlp.bind(t);
            let s = assign_nodes(t, x, &bound).unwrap();
            let sq = t.square(s);
            t.sum_all(sq)
        });
        check_grad(&mlp.fc1.weight.clone(), |t, w| {
            let b1 = t.leaf(mlp.fc1.bias.clone());
            let fc2 = mlp.fc2.bind(t);
            let bound = AssignmentMlpBound { fc1: LinearBound { weight: w, bias: b1 }, fc2 };
            let x = t.leaf(x_val.clone());
            let s = assign_nodes(t, x, &bound).unwrap();
            let sq = t.square(s);
            t.sum_all(sq)
        });
    }

    #[test]
    fn aggregation_gradient_matches_finite_differences() {
        let mut r = rng(13);
        let s_val = crate::autodiff::softmax_rows(&random_matrix(&mut r, 4, 2));
        let x_val = random_matrix(&mut r, 4, 3);
        check_grad(&x_val, |t, x| {
            let s = t.leaf(s_val.clone());
            let agg = aggregate_subgraph(t, s, x).unwrap();
            let sq = t.square(agg);
            t.sum_all(sq)
        });
        check_grad(&s_val, |t, s| {
            let x = t.leaf(x_val.clone());
            let agg = aggregate_subgraph(t, s, x).unwrap();
            let sq = t.square(agg);
            t.sum_all(sq)
        });
    }

    #[test]
    fn hard_mask_thresholds_first_column() {
        let s = array![[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]];
        assert_eq!(hard_subgraph_mask(&s), vec![true, false, false]);
    }
}
