//! Affine layers and the parameter-visiting machinery used by the optimizer,
//! the checkpoint format and the gradient checker.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{cast, lit, Matrix, Scalar};

/// Anything that owns named trainable tensors.
///
/// Visiting order is fixed; the flattened layout, checkpoints and Adam state
/// all depend on it.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, data| n += data.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, _, data| out.extend_from_slice(data));
        out
    }

    fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "flat parameter vector has {} entries, model has {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut("", &mut |_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        Ok(())
    }

    /// Named tensor ranges into the flattened vector.
    fn layout(&self) -> Vec<(String, Vec<usize>, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit("", &mut |name, shape, data| {
            out.push((
                name.to_string(),
                shape.to_vec(),
                offset..offset + data.len(),
            ));
            offset += data.len();
        });
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, data| {
            ok &= data.iter().all(|x| x.is_finite())
        });
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len)
        .map(|_| lit(rng.gen_range(-bound..bound)))
        .collect()
}

/// Row-vector affine map `y = W x + b` with `W` stored as `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        let weight = glorot(rng, input * output, input, output);
        Self {
            weight: Matrix::from_vec(output, input, weight).expect("sized by construction"),
            bias: vec![T::zero(); output],
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![T::zero(); output],
        }
    }

    pub fn from_parts(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::DimensionMismatch(format!(
                "bias has {} entries for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias })
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|x| cast(*x)).collect(),
        }
    }

    pub fn check_input(&self, len: usize, what: &str) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{what}: expected input width {}, got {len}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.input_dim());
        self.weight
            .row_iter()
            .zip(&self.bias)
            .map(|(w, &b)| crate::tensor::dot(w, x) + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[T], grad_out: &[T], grad: &mut Linear<T>) -> Vec<T> {
        let mut grad_x = vec![T::zero(); x.len()];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            grad.bias[o] += g;
            crate::tensor::axpy(g, x, grad.weight.row_mut(o));
            crate::tensor::axpy(g, self.weight.row(o), &mut grad_x);
        }
        grad_x
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(
            &join(prefix, "weight"),
            &[self.weight.rows(), self.weight.cols()],
            self.weight.as_slice(),
        );
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "weight"), self.weight.as_mut_slice());
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
