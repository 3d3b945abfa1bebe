//! Fine-grained fusion: cosine relevance between projected words and regions,
//! the threshold partition into a consistent part and an
//! inconsistency-candidate part, the evidence each part contributes, and the
//! plain cross-attention baseline used when the partition is disabled.
//!
//! Backward passes treat partition membership as constant. Gradients still
//! reach the relevance scores through the consistent-part softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Parameters};
use crate::tensor::{
    add, axpy, dot, lit, norm, sigmoid, softmax, softmax_backward, Matrix, Scalar,
};

/// Content rows and regions below this norm make cosine undefined.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMatrix<T> {
    /// `N x M` cosine scores; rows of padding tokens are zero and invalid.
    pub scores: Matrix<T>,
    pub valid_rows: Vec<bool>,
    pub word_norms: Vec<T>,
    pub region_norms: Vec<T>,
}

impl<T: Scalar> RelevanceMatrix<T> {
    pub fn n_words(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_regions(&self) -> usize {
        self.scores.cols()
    }

    /// Largest score over valid pairs.
    pub fn max_valid(&self) -> Option<T> {
        (0..self.n_words())
            .filter(|&i| self.valid_rows[i])
            .flat_map(|i| self.scores.row(i).iter().copied())
            .reduce(T::max)
    }
}

/// `S_ij = t_i . v_j / (|t_i| |v_j|)` for content tokens.
pub fn relevance<T: Scalar>(
    words: &Matrix<T>,
    regions: &Matrix<T>,
    token_mask: &[bool],
) -> Result<RelevanceMatrix<T>> {
    if words.cols() != regions.cols() {
        return Err(Error::DimensionMismatch(format!(
            "word width {} != region width {}",
            words.cols(),
            regions.cols()
        )));
    }
    if token_mask.len() != words.rows() {
        return Err(Error::DimensionMismatch(format!(
            "token mask length {} != word count {}",
            token_mask.len(),
            words.rows()
        )));
    }
    let floor: T = lit(MIN_NORM);
    let word_norms: Vec<T> = words.row_iter().map(norm).collect();
    let region_norms: Vec<T> = regions.row_iter().map(norm).collect();
    if let Some(j) = region_norms.iter().position(|&n| n < floor) {
        return Err(Error::Degenerate(format!("region {j} has zero norm")));
    }
    let mut scores = Matrix::zeros(words.rows(), regions.rows());
    for (i, &valid) in token_mask.iter().enumerate() {
        if !valid {
            continue;
        }
        if word_norms[i] < floor {
            return Err(Error::Degenerate(format!(
                "content token {i} has zero norm"
            )));
        }
        for j in 0..regions.rows() {
            let s = dot(words.row(i), regions.row(j)) / (word_norms[i] * region_norms[j]);
            scores.set(i, j, s);
        }
    }
    Ok(RelevanceMatrix {
        scores,
        valid_rows: token_mask.to_vec(),
        word_norms,
        region_norms,
    })
}

/// Adds `dL/dS` into the word and region gradients.
pub fn relevance_backward<T: Scalar>(
    words: &Matrix<T>,
    regions: &Matrix<T>,
    rel: &RelevanceMatrix<T>,
    grad_scores: &Matrix<T>,
    grad_words: &mut Matrix<T>,
    grad_regions: &mut Matrix<T>,
) {
    for i in 0..words.rows() {
        if !rel.valid_rows[i] {
            continue;
        }
        let tn = rel.word_norms[i];
        for j in 0..regions.rows() {
            let g = grad_scores.get(i, j);
            if g == T::zero() {
                continue;
            }
            let vn = rel.region_norms[j];
            let s = rel.scores.get(i, j);
            let inv = T::one() / (tn * vn);
            // ds/dt = v/(|t||v|) - s t/|t|^2, and symmetrically for v
            axpy(g * inv, regions.row(j), grad_words.row_mut(i));
            axpy(-g * s / (tn * tn), words.row(i), grad_words.row_mut(i));
            axpy(g * inv, words.row(i), grad_regions.row_mut(j));
            axpy(-g * s / (vn * vn), regions.row(j), grad_regions.row_mut(j));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub lambda: f64,
    pub n_words: usize,
    pub n_regions: usize,
    /// Row-major `N x M`; true iff the pair belongs to the consistent part.
    pub consistent: Vec<bool>,
    /// Row-major `N x M`; false on padding-token rows.
    pub valid: Vec<bool>,
}

impl Partition {
    #[inline]
    pub fn is_consistent(&self, i: usize, j: usize) -> bool {
        self.consistent[i * self.n_regions + j]
    }

    #[inline]
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.n_regions + j]
    }

    #[inline]
    pub fn is_candidate(&self, i: usize, j: usize) -> bool {
        self.is_valid(i, j) && !self.is_consistent(i, j)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn consistent_count(&self) -> usize {
        self.consistent.iter().filter(|&&v| v).count()
    }

    pub fn candidate_count(&self) -> usize {
        self.valid_count() - self.consistent_count()
    }

    pub fn consistent_columns(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_regions).filter(move |&j| self.is_consistent(i, j))
    }

    pub fn consistent_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_words).flat_map(move |i| self.consistent_columns(i).map(move |j| (i, j)))
    }

    /// Candidate pairs in row-major order.
    pub fn candidate_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_words)
            .flat_map(move |i| (0..self.n_regions).map(move |j| (i, j)))
            .filter(move |&(i, j)| self.is_candidate(i, j))
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "lambda must be in [0, 1), got {lambda}"
        )));
    }
    Ok(())
}

/// `S_m = {S_ij > lambda}`, `S_c = {S_ij <= lambda}` over valid pairs; ties go to `S_c`.
pub fn partition<T: Scalar>(rel: &RelevanceMatrix<T>, lambda: f64) -> Result<Partition> {
    check_lambda(lambda)?;
    let (n, m) = (rel.n_words(), rel.n_regions());
    let mut consistent = vec![false; n * m];
    let mut valid = vec![false; n * m];
    for i in 0..n {
        if !rel.valid_rows[i] {
            continue;
        }
        for j in 0..m {
            valid[i * m + j] = true;
            let s = rel.scores.get(i, j).to_f64().unwrap_or(f64::NAN);
            consistent[i * m + j] = s > lambda;
        }
    }
    Ok(Partition {
        lambda,
        n_words: n,
        n_regions: m,
        consistent,
        valid,
    })
}

/// One word of the consistent part after attending over its consistent regions.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedWord<T> {
    pub word: usize,
    /// `(region, attention weight)` over the word's consistent columns.
    pub attention: Vec<(usize, T)>,
    pub vector: Vec<T>,
}

/// `t_hat_i = sum_j softmax_j(S_ij) v_j + t_i` over the word's consistent
/// columns only. Words with no consistent region are omitted.
pub fn fuse_consistent<T: Scalar>(
    words: &Matrix<T>,
    regions: &Matrix<T>,
    rel: &RelevanceMatrix<T>,
    part: &Partition,
) -> Result<Vec<FusedWord<T>>> {
    check_shapes(words, regions, part)?;
    let mut out = Vec::new();
    for i in 0..part.n_words {
        let cols: Vec<usize> = part.consistent_columns(i).collect();
        if cols.is_empty() {
            continue;
        }
        let logits: Vec<T> = cols.iter().map(|&j| rel.scores.get(i, j)).collect();
        let weights = softmax(&logits);
        let mut vector = words.row(i).to_vec();
        for (&j, &w) in cols.iter().zip(&weights) {
            axpy(w, regions.row(j), &mut vector);
        }
        out.push(FusedWord {
            word: i,
            attention: cols.into_iter().zip(weights).collect(),
            vector,
        });
    }
    Ok(out)
}

/// Backward of [`fuse_consistent`] for one fused word.
pub fn fuse_consistent_backward<T: Scalar>(
    regions: &Matrix<T>,
    fused: &FusedWord<T>,
    grad_vector: &[T],
    grad_words: &mut Matrix<T>,
    grad_regions: &mut Matrix<T>,
    grad_scores: &mut Matrix<T>,
) {
    axpy(T::one(), grad_vector, grad_words.row_mut(fused.word));
    let weights: Vec<T> = fused.attention.iter().map(|&(_, w)| w).collect();
    let grad_weights: Vec<T> = fused
        .attention
        .iter()
        .map(|&(j, w)| {
            axpy(w, grad_vector, grad_regions.row_mut(j));
            dot(grad_vector, regions.row(j))
        })
        .collect();
    let grad_logits = softmax_backward(&weights, &grad_weights);
    for (&(j, _), g) in fused.attention.iter().zip(grad_logits) {
        let cur = grad_scores.get(fused.word, j);
        grad_scores.set(fused.word, j, cur + g);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate<T> {
    pub word: usize,
    pub region: usize,
    pub vector: Vec<T>,
}

/// `c_ij = t_i + v_j` for every candidate pair, row-major.
pub fn candidate_reps<T: Scalar>(
    words: &Matrix<T>,
    regions: &Matrix<T>,
    part: &Partition,
) -> Result<Vec<Candidate<T>>> {
    check_shapes(words, regions, part)?;
    Ok(part
        .candidate_pairs()
        .map(|(i, j)| Candidate {
            word: i,
            region: j,
            vector: add(words.row(i), regions.row(j)),
        })
        .collect())
}

fn check_shapes<T: Scalar>(words: &Matrix<T>, regions: &Matrix<T>, part: &Partition) -> Result<()> {
    if words.rows() != part.n_words
        || regions.rows() != part.n_regions
        || words.cols() != regions.cols()
    {
        return Err(Error::DimensionMismatch(format!(
            "partition is {}x{}, features are {}x{} and {}x{}",
            part.n_words,
            part.n_regions,
            words.rows(),
            words.cols(),
            regions.rows(),
            regions.cols()
        )));
    }
    Ok(())
}

/// `sigmoid(w2 . tanh(W1 x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringMlp<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTrace<T> {
    pub hidden: Vec<T>,
    pub score: T,
}

impl<T: Scalar> ScoringMlp<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::init(rng, dim, hidden),
            output: Linear::init(rng, hidden, 1),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::zeros(dim, hidden),
            output: Linear::zeros(hidden, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hidden.input_dim(), self.hidden.output_dim())
    }

    pub fn cast<U: Scalar>(&self) -> ScoringMlp<U> {
        ScoringMlp {
            hidden: self.hidden.cast(),
            output: self.output.cast(),
        }
    }

    pub fn forward(&self, rep: &[T]) -> ScoreTrace<T> {
        let hidden: Vec<T> = self.hidden.forward(rep).into_iter().map(T::tanh).collect();
        let score = sigmoid(self.output.forward(&hidden)[0]);
        ScoreTrace { hidden, score }
    }

    /// Returns `dL/drep` given `dL/dscore`.
    pub fn backward(
        &self,
        rep: &[T],
        trace: &ScoreTrace<T>,
        grad_score: T,
        grads: &mut Self,
    ) -> Vec<T> {
        let s = trace.score;
        let grad_logit = grad_score * s * (T::one() - s);
        let grad_hidden = self
            .output
            .backward(&trace.hidden, &[grad_logit], &mut grads.output);
        let grad_pre: Vec<T> = grad_hidden
            .iter()
            .zip(&trace.hidden)
            .map(|(&g, &h)| g * (T::one() - h * h))
            .collect();
        self.hidden.backward(rep, &grad_pre, &mut grads.hidden)
    }
}

impl<T: Scalar> Parameters<T> for ScoringMlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Per-representation scores in `(0, 1)`.
pub fn score<T: Scalar, V: AsRef<[T]>>(reps: &[V], mlp: &ScoringMlp<T>) -> Result<Vec<T>> {
    reps.iter()
        .map(|r| {
            mlp.hidden.check_input(r.as_ref().len(), "scoring MLP")?;
            Ok(mlp.forward(r.as_ref()).score)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub inconsistency_mlp: ScoringMlp<T>,
    pub consistency_mlp: ScoringMlp<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Self {
            inconsistency_mlp: ScoringMlp::init(rng, dim, hidden),
            consistency_mlp: ScoringMlp::init(rng, dim, hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            inconsistency_mlp: self.inconsistency_mlp.zeros_like(),
            consistency_mlp: self.consistency_mlp.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FusionParams<U> {
        FusionParams {
            inconsistency_mlp: self.inconsistency_mlp.cast(),
            consistency_mlp: self.consistency_mlp.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for FusionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.inconsistency_mlp
            .visit(&join(prefix, "inconsistency_mlp"), f);
        self.consistency_mlp
            .visit(&join(prefix, "consistency_mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.inconsistency_mlp
            .visit_mut(&join(prefix, "inconsistency_mlp"), f);
        self.consistency_mlp
            .visit_mut(&join(prefix, "consistency_mlp"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartRepresentation<T> {
    pub z_m: Vec<T>,
    pub z_c: Vec<T>,
    /// Words contributing to `z_m`.
    pub consistent_count: usize,
    /// Pairs contributing to `z_c`.
    pub candidate_count: usize,
}

/// `z_m = sum_i s_i^m t_hat_i`, `z_c = sum_ij s_ij^c c_ij`, unnormalized; an
/// empty part yields the zero vector.
pub fn aggregate_parts<T: Scalar, A: AsRef<[T]>, B: AsRef<[T]>>(
    dim: usize,
    fused: &[A],
    consistency_scores: &[T],
    candidates: &[B],
    inconsistency_scores: &[T],
) -> Result<PartRepresentation<T>> {
    if fused.len() != consistency_scores.len() || candidates.len() != inconsistency_scores.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} fused words with {} scores, {} candidates with {} scores",
            fused.len(),
            consistency_scores.len(),
            candidates.len(),
            inconsistency_scores.len()
        )));
    }
    let weighted_sum = |reps: &mut dyn Iterator<Item = (&[T], T)>| -> Result<Vec<T>> {
        let mut acc = vec![T::zero(); dim];
        for (rep, s) in reps {
            if rep.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "representation width {} != {dim}",
                    rep.len()
                )));
            }
            axpy(s, rep, &mut acc);
        }
        Ok(acc)
    };
    let z_m = weighted_sum(
        &mut fused
            .iter()
            .map(AsRef::as_ref)
            .zip(consistency_scores.iter().copied()),
    )?;
    let z_c = weighted_sum(
        &mut candidates
            .iter()
            .map(AsRef::as_ref)
            .zip(inconsistency_scores.iter().copied()),
    )?;
    Ok(PartRepresentation {
        z_m,
        z_c,
        consistent_count: fused.len(),
        candidate_count: candidates.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention<T> {
    /// `N x M` softmax weights over all regions.
    pub weights: Matrix<T>,
    /// `N x d`
    pub output: Matrix<T>,
}

/// Plain word-to-region attention over every region: softmax of raw dot
/// products, weighted sum of region vectors, no residual.
pub fn cross_attention_traced<T: Scalar>(
    words: &Matrix<T>,
    regions: &Matrix<T>,
) -> Result<CrossAttention<T>> {
    if words.cols() != regions.cols() {
        return Err(Error::DimensionMismatch(format!(
            "word width {} != region width {}",
            words.cols(),
            regions.cols()
        )));
    }
    let mut weights = Matrix::zeros(words.rows(), regions.rows());
    let mut output = Matrix::zeros(words.rows(), words.cols());
    for i in 0..words.rows() {
        let logits: Vec<T> = regions.row_iter().map(|v| dot(words.row(i), v)).collect();
        let a = softmax(&logits);
        for (j, &w) in a.iter().enumerate() {
            axpy(w, regions.row(j), output.row_mut(i));
        }
        weights.row_mut(i).copy_from_slice(&a);
    }
    Ok(CrossAttention { weights, output })
}

pub fn cross_attention_baseline<T: Scalar>(
    words: &Matrix<T>,
    regions: &Matrix<T>,
) -> Result<Matrix<T>> {
    Ok(cross_attention_traced(words, regions)?.output)
}

/// Rows of `grad_output` for tokens that did not feed the loss should be zero.
pub fn cross_attention_backward<T: Scalar>(
    words: &Matrix<T>,
    regions: &Matrix<T>,
    attn: &CrossAttention<T>,
    grad_output: &Matrix<T>,
    grad_words: &mut Matrix<T>,
    grad_regions: &mut Matrix<T>,
) {
    for i in 0..words.rows() {
        let g = grad_output.row(i);
        if g.iter().all(|&x| x == T::zero()) {
            continue;
        }
        let a = attn.weights.row(i);
        let grad_a: Vec<T> = regions.row_iter().map(|v| dot(g, v)).collect();
        for (j, &w) in a.iter().enumerate() {
            axpy(w, g, grad_regions.row_mut(j));
        }
        let grad_logits = softmax_backward(a, &grad_a);
        for (j, &gl) in grad_logits.iter().enumerate() {
            axpy(gl, regions.row(j), grad_words.row_mut(i));
            axpy(gl, words.row(i), grad_regions.row_mut(j));
        }
    }
}
