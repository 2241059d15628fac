use crate::autodiff::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[Tensor], learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// Restores saved state; moment shapes must match the current ones.
    pub fn restore(&mut self, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<(), String> {
        let same = |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&first, &self.first_moment) || !same(&second, &self.second_moment) {
            return Err("optimizer moments do not match the parameter shapes".into());
        }
        self.step = step;
        self.first_moment = first;
        self.second_moment = second;
        Ok(())
    }

    /// One update `p -= lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        // f(x) = 0.5 a (x - b)^2
        let (a, b) = (3.0, -1.5);
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut p = vec![Tensor::vector(vec![2.0])];
        let mut opt = Adam::new(&p, lr, b1, b2, eps);
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = a * (x - b);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);

            let grad = vec![Tensor::vector(vec![a * (p[0].data()[0] - b)])];
            opt.update(&mut p, &grad);
            assert!((p[0].data()[0] - x).abs() <= 1e-12, "step {t}");
        }
        assert!((x - b).abs() < 3.5);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let init = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let mut p = init.clone();
        let mut opt = Adam::new(&p, 0.0, 0.9, 0.999, 1e-8);
        for _ in 0..5 {
            opt.update(&mut p, &[Tensor::vector(vec![0.3, -7.0, 1e3])]);
        }
        assert_eq!(p, init);
    }
}
