//! Adam optimizer with bias correction.

use super::tensor::Tensor;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    slots: Vec<(Tensor, Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let slots = params
            .into_iter()
            .map(|p| {
                let n = p.len();
                (p, vec![0.0; n], vec![0.0; n])
            })
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            slots,
        }
    }

    pub fn zero_grad(&self) {
        for (p, _, _) in &self.slots {
            p.zero_grad();
        }
    }

    /// One update from the gradients currently stored on the parameters.
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, m, v) in &mut self.slots {
            let g = p.grad().clone();
            p.apply_to_data(|data| {
                for i in 0..data.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::tensor::{mul, sum_all, Shape, Tensor};
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize x^2 from x = 1.
        let x = Tensor::leaf(Shape::scalar(), vec![1.0]);
        let mut opt = Adam::new(vec![x.clone()], 0.05, 0.9, 0.999);
        for _ in 0..400 {
            opt.zero_grad();
            let loss = sum_all(&mul(&x, &x));
            loss.backward();
            opt.step();
        }
        assert!(x.value().abs() < 1e-2, "x = {}", x.value());
    }
}
