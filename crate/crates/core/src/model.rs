//! The full detector: parameters, per-post forward pass with its trace, and
//! the matching backward pass.

use rand::Rng;

use crate::config::{AblationVariant, ModelDims};
use crate::data::{Label, PostRecord};
use crate::error::{Error, Result};
use crate::fusion::{
    self, candidate_reps, cross_attention_backward, cross_attention_traced, fuse_consistent,
    fuse_consistent_backward, partition, relevance, relevance_backward, Candidate, CrossAttention,
    FusedWord, FusionParams, PartRepresentation, Partition, RelevanceMatrix, ScoreTrace,
};
use crate::nn::{join, Parameters};
use crate::objective::{
    clamp_margin, detection_loss, detection_loss_grad, partition_loss, partition_loss_grad,
};
use crate::projection::{
    project_regions, project_regions_backward, project_words_backward, project_words_traced,
    ProjectionParams, WordTrace,
};
use crate::selection::{
    classify, classify_backward, prob_fake_grad, select, select_backward, Classification,
    Selection, SelectionParams,
};
use crate::tensor::{axpy, cast, dot, lit, Matrix, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub projection: ProjectionParams<T>,
    pub fusion: FusionParams<T>,
    pub selection: SelectionParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        text_dim: usize,
        region_dim: usize,
        dims: &ModelDims,
    ) -> Self {
        Self {
            projection: ProjectionParams::init(rng, text_dim, region_dim, dims.channels(), dims.d),
            fusion: FusionParams::init(rng, dims.d, dims.d_m),
            selection: SelectionParams::init(rng, dims.d, dims.d_f),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            projection: self.projection.zeros_like(),
            fusion: self.fusion.zeros_like(),
            selection: self.selection.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            projection: self.projection.cast(),
            fusion: self.fusion.cast(),
            selection: self.selection.cast(),
        }
    }

    pub fn text_dim(&self) -> usize {
        self.projection.text_dim()
    }

    pub fn region_dim(&self) -> usize {
        self.projection.region_dim()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d: self.projection.dim(),
            d_m: self.fusion.consistency_mlp.hidden.output_dim(),
            d_f: self.selection.classifier_hidden.output_dim(),
            c: Some(self.projection.channels()),
        }
    }

    pub fn check_record(&self, post: &PostRecord) -> Result<()> {
        if post.text_dim() != self.text_dim() || post.region_dim() != self.region_dim() {
            return Err(Error::DimensionMismatch(format!(
                "post `{}` has (d_t={}, d_v={}), model expects (d_t={}, d_v={})",
                post.post_id(),
                post.text_dim(),
                post.region_dim(),
                self.text_dim(),
                self.region_dim()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for ModelParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.projection.visit(&join(prefix, "projection"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.selection.visit(&join(prefix, "selection"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.projection.visit_mut(&join(prefix, "projection"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.selection.visit_mut(&join(prefix, "selection"), f);
    }
}

/// Everything the partitioned branch computed for one post.
#[derive(Clone, Debug)]
pub struct PartitionedTrace<T> {
    pub relevance: RelevanceMatrix<T>,
    pub partition: Partition,
    pub fused: Vec<FusedWord<T>>,
    pub consistency_scores: Vec<ScoreTrace<T>>,
    pub candidates: Vec<Candidate<T>>,
    pub inconsistency_scores: Vec<ScoreTrace<T>>,
    /// Part representations after the variant has zeroed any disabled part.
    pub parts: PartRepresentation<T>,
    pub selection: Selection<T>,
}

#[derive(Clone, Debug)]
pub struct BaselineTrace<T> {
    pub attention: CrossAttention<T>,
    pub pooled: Vec<T>,
}

#[derive(Clone, Debug)]
pub enum Branch<T> {
    Partitioned(Box<PartitionedTrace<T>>),
    Baseline(BaselineTrace<T>),
}

/// Forward pass of one post, with every intermediate needed by `backward`.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub variant: AblationVariant,
    pub label: Label,
    pub token_mask: Vec<bool>,
    pub word_inputs: Matrix<T>,
    pub region_inputs: Matrix<T>,
    pub words: WordTrace<T>,
    pub regions: Matrix<T>,
    pub branch: Branch<T>,
    pub classification: Classification<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn prob_fake(&self) -> T {
        self.classification.prob_fake
    }

    pub fn logits(&self) -> [T; 2] {
        self.classification.logits
    }

    pub fn predicted(&self) -> Label {
        Label::from_prob_fake(cast(self.prob_fake()))
    }

    pub fn partitioned(&self) -> Option<&PartitionedTrace<T>> {
        match &self.branch {
            Branch::Partitioned(p) => Some(p),
            Branch::Baseline(_) => None,
        }
    }

    pub fn w_mc(&self) -> Option<[T; 2]> {
        self.partitioned().map(|p| p.selection.w_mc)
    }

    pub fn partition(&self) -> Option<&Partition> {
        self.partitioned().map(|p| &p.partition)
    }

    pub fn parts(&self) -> Option<&PartRepresentation<T>> {
        self.partitioned().map(|p| &p.parts)
    }

    /// `(L_d, L_p)`; `L_p` is zero when the partition is disabled.
    pub fn losses(&self) -> (T, T) {
        let l_d = detection_loss(self.prob_fake(), self.label);
        let l_p = self
            .w_mc()
            .map_or(T::zero(), |w| partition_loss(w, self.label));
        (l_d, l_p)
    }

    pub fn total_loss(&self, beta: f64) -> T {
        let (l_d, l_p) = self.losses();
        l_d + lit::<T>(beta) * l_p
    }

    /// Distance to the nearest non-differentiable point: a relevance score at
    /// the threshold, a ReLU at zero, or the probability clamp boundary.
    pub fn kink_margin(&self) -> f64 {
        let mut margin: f64 = cast(self.words.relu_margin());
        margin = margin.min(cast(self.classification.relu_margin()));
        margin = margin.min(cast::<T, f64>(clamp_margin(self.prob_fake())).abs());
        if let Some(p) = self.partitioned() {
            for i in 0..p.partition.n_words {
                for j in 0..p.partition.n_regions {
                    if p.partition.is_valid(i, j) {
                        let s: f64 = cast(p.relevance.scores.get(i, j));
                        margin = margin.min((s - p.partition.lambda).abs());
                    }
                }
            }
        }
        margin
    }

    /// Which side of every kink the pass sits on. Two passes with equal
    /// signatures share one smooth piece of the loss.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig: Vec<bool> = self
            .words
            .pre_activations
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|&x| x > T::zero()))
            .collect();
        sig.extend(
            self.classification
                .pre_hidden
                .iter()
                .map(|&x| x > T::zero()),
        );
        sig.push(clamp_margin(self.prob_fake()) > T::zero());
        if let Some(p) = self.partitioned() {
            sig.extend_from_slice(&p.partition.consistent);
        }
        sig
    }
}

pub fn forward<T: Scalar>(
    post: &PostRecord,
    params: &ModelParams<T>,
    lambda: f64,
    variant: AblationVariant,
) -> Result<ForwardTrace<T>> {
    params.check_record(post)?;
    let word_inputs: Matrix<T> = post.word_embeddings().cast();
    let region_inputs: Matrix<T> = post.region_embeddings().cast();
    let words = project_words_traced(&word_inputs, &params.projection)?;
    let regions = project_regions(&region_inputs, &params.projection)?;
    let mask = post.token_mask();
    let dim = params.projection.dim();

    let (branch, z) = if variant.uses_partition() {
        let rel = relevance(&words.output, &regions, mask)?;
        let part = partition(&rel, lambda)?;
        let fused = fuse_consistent(&words.output, &regions, &rel, &part)?;
        let candidates = candidate_reps(&words.output, &regions, &part)?;
        let consistency_scores: Vec<ScoreTrace<T>> = fused
            .iter()
            .map(|f| params.fusion.consistency_mlp.forward(&f.vector))
            .collect();
        let inconsistency_scores: Vec<ScoreTrace<T>> = candidates
            .iter()
            .map(|c| params.fusion.inconsistency_mlp.forward(&c.vector))
            .collect();
        let sm: Vec<T> = consistency_scores.iter().map(|s| s.score).collect();
        let sc: Vec<T> = inconsistency_scores.iter().map(|s| s.score).collect();
        let fused_vecs: Vec<&[T]> = fused.iter().map(|f| f.vector.as_slice()).collect();
        let cand_vecs: Vec<&[T]> = candidates.iter().map(|c| c.vector.as_slice()).collect();
        let mut parts = fusion::aggregate_parts(dim, &fused_vecs, &sm, &cand_vecs, &sc)?;
        if variant == AblationVariant::NoConsistent {
            parts.z_m = vec![T::zero(); dim];
        }
        if variant == AblationVariant::NoInconsistent {
            parts.z_c = vec![T::zero(); dim];
        }
        let selection = select(&parts.z_m, &parts.z_c, &params.selection)?;
        let z = selection.z.clone();
        let trace = PartitionedTrace {
            relevance: rel,
            partition: part,
            fused,
            consistency_scores,
            candidates,
            inconsistency_scores,
            parts,
            selection,
        };
        (Branch::Partitioned(Box::new(trace)), z)
    } else {
        let attention = cross_attention_traced(&words.output, &regions)?;
        let n_content: T = lit(post.n_content_tokens() as f64);
        let mut pooled = vec![T::zero(); dim];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            axpy(T::one() / n_content, attention.output.row(i), &mut pooled);
        }
        let z = pooled.clone();
        (Branch::Baseline(BaselineTrace { attention, pooled }), z)
    };

    let classification = classify(&z, &params.selection)?;
    Ok(ForwardTrace {
        variant,
        label: post.label(),
        token_mask: mask.to_vec(),
        word_inputs,
        region_inputs,
        words,
        regions,
        branch,
        classification,
    })
}

/// Accumulates `d(L_d + beta * L_p)/dparams` into `grads`.
pub fn backward<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &ModelParams<T>,
    beta: f64,
    grads: &mut ModelParams<T>,
) {
    let p = trace.prob_fake();
    let g_p = detection_loss_grad(p, trace.label);
    let dp = prob_fake_grad(p);
    let grad_logits = [g_p * dp[0], g_p * dp[1]];

    let z = match &trace.branch {
        Branch::Partitioned(pt) => &pt.selection.z,
        Branch::Baseline(bt) => &bt.pooled,
    };
    let grad_z = classify_backward(
        z,
        &params.selection,
        &trace.classification,
        grad_logits,
        &mut grads.selection,
    );

    let t = &trace.words.output;
    let v = &trace.regions;
    let mut grad_t = Matrix::zeros(t.rows(), t.cols());
    let mut grad_v = Matrix::zeros(v.rows(), v.cols());

    match &trace.branch {
        Branch::Partitioned(pt) => {
            let b: T = lit(beta);
            let gl = partition_loss_grad(pt.selection.w_mc, trace.label);
            let grad_w = [b * gl[0], b * gl[1]];
            let (mut g_zm, mut g_zc) = select_backward(
                &pt.parts.z_m,
                &pt.parts.z_c,
                &params.selection,
                &pt.selection,
                &grad_z,
                grad_w,
                &mut grads.selection,
            );
            // a forced-zero part is a constant
            if trace.variant == AblationVariant::NoConsistent {
                g_zm.fill(T::zero());
            }
            if trace.variant == AblationVariant::NoInconsistent {
                g_zc.fill(T::zero());
            }

            let mut grad_s = Matrix::zeros(pt.relevance.n_words(), pt.relevance.n_regions());
            if g_zm.iter().any(|&x| x != T::zero()) {
                for (f, st) in pt.fused.iter().zip(&pt.consistency_scores) {
                    let g_score = dot(&g_zm, &f.vector);
                    let mut g_vec = params.fusion.consistency_mlp.backward(
                        &f.vector,
                        st,
                        g_score,
                        &mut grads.fusion.consistency_mlp,
                    );
                    axpy(st.score, &g_zm, &mut g_vec);
                    fuse_consistent_backward(v, f, &g_vec, &mut grad_t, &mut grad_v, &mut grad_s);
                }
            }
            if g_zc.iter().any(|&x| x != T::zero()) {
                for (c, st) in pt.candidates.iter().zip(&pt.inconsistency_scores) {
                    let g_score = dot(&g_zc, &c.vector);
                    let mut g_vec = params.fusion.inconsistency_mlp.backward(
                        &c.vector,
                        st,
                        g_score,
                        &mut grads.fusion.inconsistency_mlp,
                    );
                    axpy(st.score, &g_zc, &mut g_vec);
                    axpy(T::one(), &g_vec, grad_t.row_mut(c.word));
                    axpy(T::one(), &g_vec, grad_v.row_mut(c.region));
                }
            }
            relevance_backward(t, v, &pt.relevance, &grad_s, &mut grad_t, &mut grad_v);
        }
        Branch::Baseline(bt) => {
            let n_content = trace.token_mask.iter().filter(|&&m| m).count();
            let scale = T::one() / lit(n_content as f64);
            let mut grad_out = Matrix::zeros(t.rows(), t.cols());
            for (i, _) in trace.token_mask.iter().enumerate().filter(|(_, &m)| m) {
                axpy(scale, &grad_z, grad_out.row_mut(i));
            }
            cross_attention_backward(t, v, &bt.attention, &grad_out, &mut grad_t, &mut grad_v);
        }
    }

    project_words_backward(
        &trace.word_inputs,
        &params.projection,
        &trace.words,
        &grad_t,
        &mut grads.projection,
    );
    project_regions_backward(
        &trace.region_inputs,
        &params.projection,
        &grad_v,
        &mut grads.projection,
    );
}
