//! Selection head: one shared affine gate scores both part representations,
//! a softmax turns the two scores into mixing weights, and a two-layer
//! perceptron classifies the mixture.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Parameters};
use crate::tensor::{axpy, dot, softmax, softmax_backward, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionParams<T> {
    /// `d -> 1`, shared between both parts.
    pub gate: Linear<T>,
    /// `d -> d_f`
    pub classifier_hidden: Linear<T>,
    /// `d_f -> 2`
    pub classifier_output: Linear<T>,
}

impl<T: Scalar> SelectionParams<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Self {
            gate: Linear::init(rng, dim, 1),
            classifier_hidden: Linear::init(rng, dim, hidden),
            classifier_output: Linear::init(rng, hidden, 2),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            gate: Linear::zeros(dim, 1),
            classifier_hidden: Linear::zeros(dim, hidden),
            classifier_output: Linear::zeros(hidden, 2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.classifier_hidden.output_dim())
    }

    pub fn dim(&self) -> usize {
        self.gate.input_dim()
    }

    pub fn cast<U: Scalar>(&self) -> SelectionParams<U> {
        SelectionParams {
            gate: self.gate.cast(),
            classifier_hidden: self.classifier_hidden.cast(),
            classifier_output: self.classifier_output.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for SelectionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.gate.visit(&join(prefix, "gate"), f);
        self.classifier_hidden
            .visit(&join(prefix, "classifier_hidden"), f);
        self.classifier_output
            .visit(&join(prefix, "classifier_output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.gate.visit_mut(&join(prefix, "gate"), f);
        self.classifier_hidden
            .visit_mut(&join(prefix, "classifier_hidden"), f);
        self.classifier_output
            .visit_mut(&join(prefix, "classifier_output"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection<T> {
    /// Raw gate scores `[w_m, w_c]`.
    pub gate_scores: [T; 2],
    /// `softmax([w_m, w_c])`: weight of the consistent part, then the candidate part.
    pub w_mc: [T; 2],
    pub z: Vec<T>,
}

pub fn select<T: Scalar>(
    z_m: &[T],
    z_c: &[T],
    params: &SelectionParams<T>,
) -> Result<Selection<T>> {
    params.gate.check_input(z_m.len(), "z_m")?;
    params.gate.check_input(z_c.len(), "z_c")?;
    let w_m = params.gate.forward(z_m)[0];
    let w_c = params.gate.forward(z_c)[0];
    let w = softmax(&[w_m, w_c]);
    let z = z_m
        .iter()
        .zip(z_c)
        .map(|(&a, &b)| w[0] * a + w[1] * b)
        .collect();
    Ok(Selection {
        gate_scores: [w_m, w_c],
        w_mc: [w[0], w[1]],
        z,
    })
}

/// Returns `(dL/dz_m, dL/dz_c)`.
pub fn select_backward<T: Scalar>(
    z_m: &[T],
    z_c: &[T],
    params: &SelectionParams<T>,
    sel: &Selection<T>,
    grad_z: &[T],
    grad_w_mc: [T; 2],
    grads: &mut SelectionParams<T>,
) -> (Vec<T>, Vec<T>) {
    let grad_w = [
        dot(grad_z, z_m) + grad_w_mc[0],
        dot(grad_z, z_c) + grad_w_mc[1],
    ];
    let grad_scores = softmax_backward(&sel.w_mc, &grad_w);
    let mut grad_zm = params
        .gate
        .backward(z_m, &[grad_scores[0]], &mut grads.gate);
    let mut grad_zc = params
        .gate
        .backward(z_c, &[grad_scores[1]], &mut grads.gate);
    axpy(sel.w_mc[0], grad_z, &mut grad_zm);
    axpy(sel.w_mc[1], grad_z, &mut grad_zc);
    (grad_zm, grad_zc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification<T> {
    pub pre_hidden: Vec<T>,
    pub hidden: Vec<T>,
    pub logits: [T; 2],
    pub prob_fake: T,
}

impl<T: Scalar> Classification<T> {
    pub fn relu_margin(&self) -> T {
        self.pre_hidden
            .iter()
            .fold(T::infinity(), |acc, x| acc.min(x.abs()))
    }
}

/// `logits = W_f2 ReLU(W_f1 z + b_f1) + b_f2`, `prob_fake = softmax(logits)[FAKE]`.
pub fn classify<T: Scalar>(z: &[T], params: &SelectionParams<T>) -> Result<Classification<T>> {
    params
        .classifier_hidden
        .check_input(z.len(), "classifier input")?;
    if params.classifier_output.output_dim() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "classifier must emit 2 logits, emits {}",
            params.classifier_output.output_dim()
        )));
    }
    let pre_hidden = params.classifier_hidden.forward(z);
    let hidden: Vec<T> = pre_hidden.iter().map(|&x| x.max(T::zero())).collect();
    let out = params.classifier_output.forward(&hidden);
    let logits = [out[0], out[1]];
    let prob_fake = softmax(&logits)[1];
    Ok(Classification {
        pre_hidden,
        hidden,
        logits,
        prob_fake,
    })
}

/// Returns `dL/dz` given `dL/dlogits`.
pub fn classify_backward<T: Scalar>(
    z: &[T],
    params: &SelectionParams<T>,
    cls: &Classification<T>,
    grad_logits: [T; 2],
    grads: &mut SelectionParams<T>,
) -> Vec<T> {
    let grad_hidden =
        params
            .classifier_output
            .backward(&cls.hidden, &grad_logits, &mut grads.classifier_output);
    let grad_pre: Vec<T> = grad_hidden
        .iter()
        .zip(&cls.pre_hidden)
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    params
        .classifier_hidden
        .backward(z, &grad_pre, &mut grads.classifier_hidden)
}

/// Gradient of `prob_fake` with respect to the two logits.
pub fn prob_fake_grad<T: Scalar>(prob_fake: T) -> [T; 2] {
    let d = prob_fake * (T::one() - prob_fake);
    [-d, d]
}
