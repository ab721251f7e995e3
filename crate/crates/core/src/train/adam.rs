use crate::backbone::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first/second moment estimates and the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments for parameters of the given shapes.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, hyper: AdamHyper) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        Self { hyper, step: 0, v: m.clone(), m }
    }

    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Param>, hyper: AdamHyper) -> Self {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|p| p.value.shape().to_vec()).collect();
        Self::new(shapes.iter().map(Vec::as_slice), hyper)
    }

    /// One bias-corrected Adam update. Parameters with `trainable == false`
    /// are left untouched, moments included; the step counter still advances.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.value.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::State(format!(
                    "parameter {} has shape {:?}, gradient {:?}, optimizer state {:?}",
                    p.name,
                    p.value.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.step += 1;
        let AdamHyper { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.hyper;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let theta = p.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Param {
        Param { name: "p".into(), value: Tensor::from_vec(values.to_vec()), trainable: true }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = param(&[0.3, -1.7, 0.0]);
        let before = p.value.clone();
        let mut adam = AdamState::for_params([&p], AdamHyper::default());
        for _ in 0..3 {
            adam.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
        }
        assert!(p.value.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(&[1.0]);
        let mut adam = AdamState::for_params([&p], AdamHyper::default());
        adam.step(&mut [&mut p], &[Tensor::from_vec(vec![0.5])]).unwrap();
        let delta = p.value.data()[0] - 1.0;
        let want = -1e-4 * (0.5 / (0.5 + 1e-8));
        assert!((delta - want).abs() < 1e-15, "{delta}");
    }

    #[test]
    fn two_constant_gradient_steps_match_hand_unrolled_recurrence() {
        let mut p = param(&[0.0]);
        let mut adam = AdamState::for_params([&p], AdamHyper::default());
        let g = [Tensor::from_vec(vec![1.0])];
        adam.step(&mut [&mut p], &g).unwrap();
        let after1 = p.value.data()[0];
        adam.step(&mut [&mut p], &g).unwrap();
        let after2 = p.value.data()[0];
        // t=1: m=0.1, v=0.001, m̂=1, v̂=1
        let want1 = -1e-4 * 1.0 / (1.0 + 1e-8);
        // t=2: m=0.19, v=0.001999, m̂=0.19/0.19, v̂=0.001999/0.001999
        let m2: f64 = 0.9 * 0.1 + 0.1;
        let v2: f64 = 0.999 * 0.001 + 0.001;
        let step2 = -1e-4 * (m2 / 0.19) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((after1 - want1).abs() < 1e-18);
        assert!((after2 - after1 - step2).abs() < 1e-18);
        assert!((step2 + 1e-4).abs() < 1e-11);
        assert_eq!(adam.step, 2);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut a = param(&[1.0, 2.0]);
        let mut b = param(&[3.0]);
        b.trainable = false;
        let mut adam = AdamState::for_params([&a, &b], AdamHyper::default());
        adam.step(&mut [&mut a, &mut b], &[Tensor::ones(&[2]), Tensor::ones(&[1])]).unwrap();
        assert_eq!(b.value.data(), &[3.0]);
        assert_ne!(a.value.data(), &[1.0, 2.0]);
        assert_eq!(adam.v[1].data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_is_state_error() {
        let mut p = param(&[1.0, 2.0]);
        let mut adam = AdamState::new([&[3usize][..]], AdamHyper::default());
        assert!(matches!(adam.step(&mut [&mut p], &[Tensor::zeros(&[2])]), Err(Error::State(_))));
    }

    #[test]
    fn decreases_a_convex_quadratic() {
        // f(θ) = ‖θ‖², ∇f = 2θ
        let mut p = param(&[0.8, -0.4, 1.3]);
        let f = |p: &Param| p.value.data().iter().map(|v| v * v).sum::<f64>();
        let mut adam = AdamState::for_params([&p], AdamHyper { learning_rate: 1e-3, ..AdamHyper::default() });
        let before = f(&p);
        let g = p.value.map(|v| 2.0 * v);
        adam.step(&mut [&mut p], &[g]).unwrap();
        assert!(f(&p) < before);
        assert!(adam.v[0].data().iter().all(|&v| v >= 0.0));
    }
}
