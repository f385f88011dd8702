use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Adam with bias correction, state kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam { lr, beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, params: &mut [Tensor<f64>], grads: &[Tensor<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} slots, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *w -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut p = vec![Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()];
        let g = vec![Tensor::from_f64(&[3], &[0.5, -4.0, 0.0]).unwrap()];
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8, &p);
        adam.update(&mut p, &g).unwrap();
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-7 && (d[1] - 2.1).abs() < 1e-7 && d[2] == 3.0);
    }

    #[test]
    fn matches_hand_rolled_recurrence() {
        let mut p = vec![Tensor::from_f64(&[1], &[0.0]).unwrap()];
        let mut adam = Adam::new(0.01, 0.9, 0.999, 1e-8, &p);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = (t as f64 * 0.3).sin();
            adam.update(&mut p, &[Tensor::from_f64(&[1], &[g]).unwrap()]).unwrap();
            m = 0.9 * m + (1.0 - 0.9) * g;
            v = 0.999 * v + (1.0 - 0.999) * g * g;
            w -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert_eq!(p[0].data()[0], w);
        }
    }
}
