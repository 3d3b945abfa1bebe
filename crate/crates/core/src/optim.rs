use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::tensor::{lit, Scalar};

/// Adam with L2 weight decay added to the gradient before the moment updates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut flat = params.flatten();
        let g = grads.flatten();
        if g.len() != flat.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} gradients for {} parameters",
                g.len(),
                flat.len()
            )));
        }
        if self.m.is_empty() {
            self.m = vec![T::zero(); flat.len()];
            self.v = vec![T::zero(); flat.len()];
        }
        self.step += 1;
        let (b1, b2): (T, T) = (lit(self.beta1), lit(self.beta2));
        let wd: T = lit(self.weight_decay);
        let eps: T = lit(self.eps);
        let t = self.step as i32;
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        let lr: T = lit(self.lr);
        for k in 0..flat.len() {
            let grad = g[k] + wd * flat[k];
            self.m[k] = b1 * self.m[k] + (T::one() - b1) * grad;
            self.v[k] = b2 * self.v[k] + (T::one() - b2) * grad * grad;
            let m_hat = self.m[k] / bias1;
            let v_hat = self.v[k] / bias2;
            flat[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        params.load_flat(&flat)
    }
}
