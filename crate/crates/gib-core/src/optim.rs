//! Adam optimizer over flat lists of parameter matrices.

use ndarray::Array2;

/// Adam state for one parameter group. Parameters are addressed by their
/// position in the (stable) list the caller passes to every step.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Array2<f64>>,
    second_moment: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// One update. `params` and `grads` must be parallel lists with stable
    /// order and shapes across steps.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
            self.second_moment = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        }
        assert_eq!(self.first_moment.len(), params.len(), "parameter count changed");
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            assert_eq!(param.dim(), grad.dim(), "gradient shape mismatch");
            *m = self.beta1 * &*m + (1.0 - self.beta1) * grad;
            *v = self.beta2 * &*v + (1.0 - self.beta2) * &grad.mapv(|g| g * g);
            let m_hat = m.mapv(|x| x / bias1);
            let v_hat = v.mapv(|x| x / bias2);
            **param = &**param
                - &(self.learning_rate * &m_hat / &(v_hat.mapv(f64::sqrt) + self.eps));
        }
    }
}
