//! Trainable projection of encoder features into the shared space.
//!
//! Words pass through three same-length 1-D convolutions (window widths 1, 2
//! and 3, zero padding, ReLU each), whose outputs are concatenated channel-wise
//! and mapped by one affine layer. Regions pass through a single affine layer.
//! No nonlinearity follows either output layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{glorot, join, Linear, Parameters};
use crate::tensor::{axpy, cast, dot, Matrix, Scalar};

pub const CONV_WIDTHS: [usize; 3] = [1, 2, 3];

/// Same-length 1-D convolution. Output position `i` reads input rows
/// `i - (w-1)/2 ..= i + w/2`; rows outside the sequence read as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    pub width: usize,
    /// `out x (width * in)`; tap `k` occupies columns `k*in..(k+1)*in`.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv1d<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, width: usize, input: usize, output: usize) -> Self {
        let weight = glorot(rng, output * width * input, width * input, width * output);
        Self {
            width,
            weight: Matrix::from_vec(output, width * input, weight).expect("sized by construction"),
            bias: vec![T::zero(); output],
        }
    }

    pub fn zeros(width: usize, input: usize, output: usize) -> Self {
        Self {
            width,
            weight: Matrix::zeros(output, width * input),
            bias: vec![T::zero(); output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols() / self.width
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    fn left(&self) -> usize {
        (self.width - 1) / 2
    }

    /// Input row feeding tap `k` at output position `i`, if inside the sequence.
    #[inline]
    fn source(&self, i: usize, k: usize, len: usize) -> Option<usize> {
        (i + k).checked_sub(self.left()).filter(|&r| r < len)
    }

    /// Pre-activation outputs, `N x out`.
    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let input = self.input_dim();
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            row.copy_from_slice(&self.bias);
            for k in 0..self.width {
                let Some(r) = self.source(i, k, x.rows()) else {
                    continue;
                };
                let xr = x.row(r);
                for (o, acc) in row.iter_mut().enumerate() {
                    *acc += dot(&self.weight.row(o)[k * input..(k + 1) * input], xr);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and adds `dL/dx` into `grad_x`.
    pub fn backward(
        &self,
        x: &Matrix<T>,
        grad_out: &Matrix<T>,
        grad: &mut Conv1d<T>,
        grad_x: &mut Matrix<T>,
    ) {
        let input = self.input_dim();
        for i in 0..x.rows() {
            for (o, &g) in grad_out.row(i).iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                grad.bias[o] += g;
                for k in 0..self.width {
                    let Some(r) = self.source(i, k, x.rows()) else {
                        continue;
                    };
                    let seg = k * input..(k + 1) * input;
                    axpy(g, x.row(r), &mut grad.weight.row_mut(o)[seg.clone()]);
                    axpy(g, &self.weight.row(o)[seg], grad_x.row_mut(r));
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Conv1d<U> {
        Conv1d {
            width: self.width,
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|x| cast(*x)).collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Conv1d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        let input = self.input_dim();
        f(
            &join(prefix, "weight"),
            &[self.output_dim(), self.width, input],
            self.weight.as_slice(),
        );
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&join(prefix, "weight"), self.weight.as_mut_slice());
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<T> {
    pub convs: [Conv1d<T>; 3],
    /// `3c -> d`
    pub word_fc: Linear<T>,
    /// `d_v -> d`
    pub region_fc: Linear<T>,
}

impl<T: Scalar> ProjectionParams<T> {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        text_dim: usize,
        region_dim: usize,
        channels: usize,
        dim: usize,
    ) -> Self {
        let convs = CONV_WIDTHS.map(|w| Conv1d::init(rng, w, text_dim, channels));
        Self {
            convs,
            word_fc: Linear::init(rng, 3 * channels, dim),
            region_fc: Linear::init(rng, region_dim, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self
                .convs
                .clone()
                .map(|c| Conv1d::zeros(c.width, c.input_dim(), c.output_dim())),
            word_fc: self.word_fc.zeros_like(),
            region_fc: self.region_fc.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionParams<U> {
        ProjectionParams {
            convs: [
                self.convs[0].cast(),
                self.convs[1].cast(),
                self.convs[2].cast(),
            ],
            word_fc: self.word_fc.cast(),
            region_fc: self.region_fc.cast(),
        }
    }

    pub fn text_dim(&self) -> usize {
        self.convs[0].input_dim()
    }

    pub fn region_dim(&self) -> usize {
        self.region_fc.input_dim()
    }

    pub fn dim(&self) -> usize {
        self.word_fc.output_dim()
    }

    pub fn channels(&self) -> usize {
        self.convs[0].output_dim()
    }
}

impl<T: Scalar> Parameters<T> for ProjectionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for conv in &self.convs {
            conv.visit(&join(prefix, &format!("conv{}", conv.width)), f);
        }
        self.word_fc.visit(&join(prefix, "word_fc"), f);
        self.region_fc.visit(&join(prefix, "region_fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for conv in &mut self.convs {
            let name = join(prefix, &format!("conv{}", conv.width));
            conv.visit_mut(&name, f);
        }
        self.word_fc.visit_mut(&join(prefix, "word_fc"), f);
        self.region_fc.visit_mut(&join(prefix, "region_fc"), f);
    }
}

/// Intermediates of [`project_words`] kept for the backward pass.
#[derive(Clone, Debug)]
pub struct WordTrace<T> {
    /// Conv pre-activations, one `N x c` matrix per window width.
    pub pre_activations: Vec<Matrix<T>>,
    /// ReLU outputs concatenated channel-wise, `N x 3c`.
    pub hidden: Matrix<T>,
    pub output: Matrix<T>,
}

impl<T: Scalar> WordTrace<T> {
    /// Smallest |pre-activation| over all ReLU units.
    pub fn relu_margin(&self) -> T {
        self.pre_activations
            .iter()
            .flat_map(|m| m.as_slice().iter())
            .fold(T::infinity(), |acc, x| acc.min(x.abs()))
    }
}

pub fn project_words_traced<T: Scalar>(
    words: &Matrix<T>,
    params: &ProjectionParams<T>,
) -> Result<WordTrace<T>> {
    if words.cols() != params.text_dim() {
        return Err(Error::DimensionMismatch(format!(
            "word embeddings have width {}, projection expects {}",
            words.cols(),
            params.text_dim()
        )));
    }
    let c = params.channels();
    let pre_activations: Vec<Matrix<T>> = params.convs.iter().map(|k| k.forward(words)).collect();
    let mut hidden = Matrix::zeros(words.rows(), 3 * c);
    for i in 0..words.rows() {
        let row = hidden.row_mut(i);
        for (b, pre) in pre_activations.iter().enumerate() {
            for (dst, &x) in row[b * c..(b + 1) * c].iter_mut().zip(pre.row(i)) {
                *dst = x.max(T::zero());
            }
        }
    }
    let mut output = Matrix::zeros(words.rows(), params.dim());
    for i in 0..words.rows() {
        output
            .row_mut(i)
            .copy_from_slice(&params.word_fc.forward(hidden.row(i)));
    }
    Ok(WordTrace {
        pre_activations,
        hidden,
        output,
    })
}

/// `T = word_fc(concat_w ReLU(conv_w(E_t)))`, `N x d`.
pub fn project_words<T: Scalar>(
    words: &Matrix<T>,
    params: &ProjectionParams<T>,
) -> Result<Matrix<T>> {
    Ok(project_words_traced(words, params)?.output)
}

/// Returns `dL/dE_t`; parameter gradients accumulate into `grads`.
pub fn project_words_backward<T: Scalar>(
    words: &Matrix<T>,
    params: &ProjectionParams<T>,
    trace: &WordTrace<T>,
    grad_output: &Matrix<T>,
    grads: &mut ProjectionParams<T>,
) -> Matrix<T> {
    let c = params.channels();
    let mut grad_pre: Vec<Matrix<T>> = (0..3).map(|_| Matrix::zeros(words.rows(), c)).collect();
    for i in 0..words.rows() {
        let grad_hidden =
            params
                .word_fc
                .backward(trace.hidden.row(i), grad_output.row(i), &mut grads.word_fc);
        for (b, gp) in grad_pre.iter_mut().enumerate() {
            let pre = trace.pre_activations[b].row(i);
            for ((dst, &g), &x) in gp
                .row_mut(i)
                .iter_mut()
                .zip(&grad_hidden[b * c..(b + 1) * c])
                .zip(pre)
            {
                *dst = if x > T::zero() { g } else { T::zero() };
            }
        }
    }
    let mut grad_words = Matrix::zeros(words.rows(), words.cols());
    for ((conv, grad_conv), gp) in params
        .convs
        .iter()
        .zip(grads.convs.iter_mut())
        .zip(&grad_pre)
    {
        conv.backward(words, gp, grad_conv, &mut grad_words);
    }
    grad_words
}

/// `V = region_fc(E_v)`, `M x d`.
pub fn project_regions<T: Scalar>(
    regions: &Matrix<T>,
    params: &ProjectionParams<T>,
) -> Result<Matrix<T>> {
    params
        .region_fc
        .check_input(regions.cols(), "region embeddings")?;
    let mut out = Matrix::zeros(regions.rows(), params.dim());
    for j in 0..regions.rows() {
        out.row_mut(j)
            .copy_from_slice(&params.region_fc.forward(regions.row(j)));
    }
    Ok(out)
}

/// Returns `dL/dE_v`.
pub fn project_regions_backward<T: Scalar>(
    regions: &Matrix<T>,
    params: &ProjectionParams<T>,
    grad_output: &Matrix<T>,
    grads: &mut ProjectionParams<T>,
) -> Matrix<T> {
    let mut grad_regions = Matrix::zeros(regions.rows(), regions.cols());
    for j in 0..regions.rows() {
        let g = params
            .region_fc
            .backward(regions.row(j), grad_output.row(j), &mut grads.region_fc);
        grad_regions.row_mut(j).copy_from_slice(&g);
    }
    grad_regions
}
