use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Moments are created on the first call
    /// and must match parameter shapes afterwards.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::Training("non-finite gradient".into()));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(Tensor::zeros_like).collect();
            self.second = params.iter().map(Tensor::zeros_like).collect();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(TensorError::Contract(
                "parameter layout changed between Adam steps".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * gj;
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = md[j] / c1;
                let vhat = vd[j] / c2;
                pd[j] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(factor));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor> {
        vec![Tensor::vector(vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = AdamState::new(1e-4);
        let mut p = vec![Tensor::vector(vec![0.3, -1.2]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::vector(vec![0.0, 0.0]).unwrap()];
        for _ in 0..5 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g|+ε).
        let mut adam = AdamState::new(1e-4);
        let mut p = scalar_param(0.0);
        adam.step(&mut p, &scalar_param(1.0)).unwrap();
        let expected = -1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] + 1e-4).abs() < 1e-9);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn constant_positive_gradient_decreases_monotonically() {
        let mut adam = AdamState::new(1e-2);
        let mut p = scalar_param(1.0);
        let g = scalar_param(0.5);
        let mut last = 1.0;
        for _ in 0..200 {
            adam.step(&mut p, &g).unwrap();
            let now = p[0].data()[0];
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn nan_gradient_is_surfaced() {
        let mut adam = AdamState::new(1e-4);
        let mut p = scalar_param(1.0);
        let err = adam.step(&mut p, &scalar_param(f64::NAN)).unwrap_err();
        assert!(matches!(err, TensorError::Training(_)));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0]).unwrap()];
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.3, 0.4]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }
}
