//! Central-finite-difference verification of tape gradients.
//!
//! `check_grad` rebuilds the computation at perturbed inputs, so it is
//! independent of the reverse sweep it validates. Tolerance follows the
//! usual 64-bit recipe: relative error below 1e-4 on the gradient vector.

use crate::autodiff::{Tape, VarId};
use ndarray::Array2;
use rand::Rng;

/// Relative error threshold for gradient agreement.
pub const GRAD_RTOL: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Numerical gradient of `f` (a scalar-valued tape program) w.r.t. `input`,
/// by central differences with step `h`.
pub fn numerical_grad<F>(input: &Array2<f64>, h: f64, mut f: F) -> Array2<f64>
where
    F: FnMut(&mut Tape, VarId) -> VarId,
{
    let mut grad = Array2::zeros(input.raw_dim());
    for idx in 0..input.len() {
        let (r, c) = (idx / input.ncols(), idx % input.ncols());
        let mut plus = input.clone();
        plus[(r, c)] += h;
        let mut minus = input.clone();
        minus[(r, c)] -= h;

        let fp = {
            let mut t = Tape::new();
            let x = t.leaf(plus);
            let l = f(&mut t, x);
            t.scalar_value(l)
        };
        let fm = {
            let mut t = Tape::new();
            let x = t.leaf(minus);
            let l = f(&mut t, x);
            t.scalar_value(l)
        };
        grad[(r, c)] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative difference between two gradient blocks:
/// `||a - b|| / max(||a||, ||b||, floor)`. The floor absorbs central-
/// difference rounding noise when the true gradient is (near) zero.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Assert the tape gradient of `f` w.r.t. `input` matches central finite
/// differences within [`GRAD_RTOL`]. `f` must build the same scalar program
/// every call. Panics with a diagnostic on mismatch.
pub fn check_grad<F>(input: &Array2<f64>, mut f: F)
where
    F: FnMut(&mut Tape, VarId) -> VarId,
{
    let analytic = {
        let mut t = Tape::new();
        let x = t.leaf(input.clone());
        let l = f(&mut t, x);
        t.backward(l);
        t.grad(x).clone()
    };
    let numeric = numerical_grad(input, FD_STEP, &mut f);
    let rel = relative_error(&analytic, &numeric);
    assert!(
        rel < GRAD_RTOL,
        "gradient mismatch: rel err {rel:.3e}\nanalytic:\n{analytic:?}\nnumeric:\n{numeric:?}"
    );
}

/// Uniform random matrix in [-1, 1), for gradient-check instances.
pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}
