use super::{Gradients, Matrix, ParamSet};
use crate::error::Result;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self::with_hyperparams(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(
        params: &ParamSet,
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            lr,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        grads.check_matches(params)?;
        if self.m.len() != params.len() {
            return Err(crate::Error::Config(format!(
                "optimizer state tracks {} tensors, parameter set holds {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamRole;
    use approx::assert_abs_diff_eq;

    fn scalar_set(x: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("x", ParamRole::Weight, Matrix::scalar(x));
        ps
    }

    fn grad_of(ps: &ParamSet, g: f64) -> Gradients {
        let mut grads = ps.zeros_like();
        *grads.get_mut(ps.id("x").unwrap()) = Matrix::scalar(g);
        grads
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02] {
            let mut ps = scalar_set(1.0);
            let mut adam = AdamState::new(&ps, 1e-3);
            let grads = grad_of(&ps, g);
            adam.step(&mut ps, &grads).unwrap();
            let moved = ps.by_name("x").unwrap().item() - 1.0;
            assert_abs_diff_eq!(moved, -1e-3 * g.signum(), epsilon = 1e-8);
            assert_eq!(adam.step_count(), 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut ps = scalar_set(0.7);
        let mut adam = AdamState::new(&ps, 1e-3);
        let grads = grad_of(&ps, 0.0);
        adam.step(&mut ps, &grads).unwrap();
        assert_eq!(ps.by_name("x").unwrap().item(), 0.7);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let (lr, b1, b2, eps, g) = (1e-3, 0.9, 0.999, 1e-8, 0.5);
        let mut ps = scalar_set(2.0);
        let mut adam = AdamState::new(&ps, lr);
        for _ in 0..2 {
            let grads = grad_of(&ps, g);
            adam.step(&mut ps, &grads).unwrap();
        }
        // hand-unrolled
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let x1 = 2.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert_abs_diff_eq!(ps.by_name("x").unwrap().item(), x2, epsilon = 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut ps = scalar_set(-4.0);
        let mut adam = AdamState::new(&ps, 0.0);
        for g in [1.0, -2.0, 0.3] {
            let grads = grad_of(&ps, g);
            adam.step(&mut ps, &grads).unwrap();
        }
        assert_eq!(ps.by_name("x").unwrap().item(), -4.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ps = scalar_set(1.0);
        let mut adam = AdamState::new(&ps, 1e-3);
        let other = {
            let mut o = ParamSet::new();
            o.insert("x", ParamRole::Weight, Matrix::zeros(2, 2));
            o.zeros_like()
        };
        assert!(adam.step(&mut ps, &other).is_err());
    }
}
