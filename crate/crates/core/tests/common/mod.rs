//! Test-side oracles and reusable suites. Everything here is written with
//! plain loops over `Vec<Vec<f64>>` and shares no code with the library's
//! numerics.

#![allow(dead_code)]

use cffn::config::{AblationVariant, ModelDims};
use cffn::data::{Label, PostRecord};
use cffn::fusion::{
    aggregate_parts, candidate_reps, cross_attention_baseline, fuse_consistent, partition,
    relevance, RelevanceMatrix,
};
use cffn::model::{forward, ModelParams};
use cffn::objective::{detection_loss, partition_loss, LossBreakdown};
use cffn::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn to_matrix(rows: &Rows) -> Matrix<f64> {
    Matrix::from_rows(rows).unwrap()
}

pub fn to_rows<T: cffn::tensor::Scalar + Into<f64>>(m: &Matrix<T>) -> Rows {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|&x| x.into()).collect())
        .collect()
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Random mask with at least one content token.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.75)).collect();
    let keep = rng.gen_range(0..n);
    mask[keep] = true;
    mask
}

pub fn oracle_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    oracle_dot(a, b) / (oracle_dot(a, a).sqrt() * oracle_dot(b, b).sqrt())
}

fn oracle_softmax(x: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Cosine for content rows, `None` for padding rows.
pub fn relevance_oracle(t: &Rows, v: &Rows, mask: &[bool]) -> Vec<Vec<Option<f64>>> {
    let mut out = Vec::new();
    for i in 0..t.len() {
        let mut row = Vec::new();
        for j in 0..v.len() {
            row.push(if mask[i] {
                Some(oracle_cosine(&t[i], &v[j]))
            } else {
                None
            });
        }
        out.push(row);
    }
    out
}

/// (word index, fused vector) for every word with at least one consistent
/// region.
pub fn fuse_oracle(
    t: &Rows,
    v: &Rows,
    s: &[Vec<Option<f64>>],
    lambda: f64,
) -> Vec<(usize, Vec<f64>)> {
    let mut out = Vec::new();
    for i in 0..t.len() {
        let mut cols = Vec::new();
        let mut logits = Vec::new();
        for j in 0..v.len() {
            if let Some(x) = s[i][j] {
                if x > lambda {
                    cols.push(j);
                    logits.push(x);
                }
            }
        }
        if cols.is_empty() {
            continue;
        }
        let a = oracle_softmax(&logits);
        let mut vec = t[i].clone();
        for (k, &j) in cols.iter().enumerate() {
            for c in 0..vec.len() {
                vec[c] += a[k] * v[j][c];
            }
        }
        out.push((i, vec));
    }
    out
}

pub fn candidate_oracle(
    t: &Rows,
    v: &Rows,
    s: &[Vec<Option<f64>>],
    lambda: f64,
) -> Vec<(usize, usize, Vec<f64>)> {
    let mut out = Vec::new();
    for i in 0..t.len() {
        for j in 0..v.len() {
            if let Some(x) = s[i][j] {
                if x <= lambda {
                    let sum = (0..t[i].len()).map(|c| t[i][c] + v[j][c]).collect();
                    out.push((i, j, sum));
                }
            }
        }
    }
    out
}

pub fn weighted_sum_oracle(dim: usize, reps: &Rows, scores: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for (r, s) in reps.iter().zip(scores) {
        for c in 0..dim {
            acc[c] += s * r[c];
        }
    }
    acc
}

pub fn cross_attention_oracle(t: &Rows, v: &Rows) -> Rows {
    let mut out = Vec::new();
    for ti in t {
        let logits: Vec<f64> = v.iter().map(|vj| oracle_dot(ti, vj)).collect();
        let a = oracle_softmax(&logits);
        let mut row = vec![0.0; ti.len()];
        for (j, vj) in v.iter().enumerate() {
            for c in 0..row.len() {
                row[c] += a[j] * vj[c];
            }
        }
        out.push(row);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// FAKE iff some word-region pair has cosine <= `cos_max` and a sum whose
/// projection onto `q` exceeds 0.5.
pub fn rule_based_label(post: &PostRecord, q: &[f64], cos_max: f64) -> Label {
    let t = to_rows(post.word_embeddings());
    let v = to_rows(post.region_embeddings());
    for (i, ti) in t.iter().enumerate() {
        if !post.token_mask()[i] {
            continue;
        }
        for vj in &v {
            let sum: Vec<f64> = ti.iter().zip(vj).map(|(a, b)| a + b).collect();
            if oracle_cosine(ti, vj) <= cos_max && oracle_dot(&sum, q) > 0.5 {
                return Label::Fake;
            }
        }
    }
    Label::Real
}

/// Random relevance matrix with some entries placed exactly on `lambda`.
pub fn random_relevance(rng: &mut ChaCha8Rng, lambda: f64) -> RelevanceMatrix<f64> {
    let n = rng.gen_range(1..9);
    let m = rng.gen_range(1..9);
    let mask = random_mask(rng, n);
    let mut scores = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            if mask[i] {
                let x = if rng.gen_bool(0.1) {
                    lambda
                } else {
                    rng.gen_range(-1.0..=1.0)
                };
                scores.set(i, j, x);
            }
        }
    }
    RelevanceMatrix {
        scores,
        valid_rows: mask,
        word_norms: vec![1.0; n],
        region_norms: vec![1.0; m],
    }
}

pub fn partition_suite(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let lambda = if case % 10 == 0 {
            0.0
        } else {
            rng.gen_range(0.0..1.0)
        };
        let rel = random_relevance(&mut rng, lambda);
        let part = partition(&rel, lambda).unwrap();
        let (n, m) = (rel.n_words(), rel.n_regions());
        for i in 0..n {
            for j in 0..m {
                let valid = rel.valid_rows[i];
                let want = valid && rel.scores.get(i, j) > lambda;
                let (c, k) = (part.is_consistent(i, j), part.is_candidate(i, j));
                if c && k {
                    return Outcome::new(false, format!("case {case}: ({i},{j}) in both parts"));
                }
                if (c || k) != valid {
                    return Outcome::new(false, format!("case {case}: ({i},{j}) cover mismatch"));
                }
                if c != want {
                    return Outcome::new(
                        false,
                        format!("case {case}: ({i},{j}) membership differs from S > lambda"),
                    );
                }
            }
        }
        let higher = rng.gen_range(lambda..1.0);
        let tighter = partition(&rel, higher).unwrap();
        for (i, j) in tighter.consistent_pairs() {
            if !part.is_consistent(i, j) {
                return Outcome::new(
                    false,
                    format!("case {case}: S_m grew from lambda {lambda} to {higher}"),
                );
            }
        }
    }
    Outcome::new(
        true,
        format!("{cases} cases: disjoint, covering, elementwise, monotone in lambda"),
    )
}

pub fn fusion_suite(cases: usize, seed: u64, tol: f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    for case in 0..cases {
        let n = rng.gen_range(1..9);
        let m = rng.gen_range(1..9);
        let d = rng.gen_range(1..11);
        let lambda = rng.gen_range(0.0..0.5);
        let t = gaussian_rows(&mut rng, n, d);
        let v = gaussian_rows(&mut rng, m, d);
        let mask = random_mask(&mut rng, n);
        let (tm, vm) = (to_matrix(&t), to_matrix(&v));
        let rel = relevance(&tm, &vm, &mask).unwrap();
        let part = partition(&rel, lambda).unwrap();
        let s = relevance_oracle(&t, &v, &mask);

        let fused = fuse_consistent(&tm, &vm, &rel, &part).unwrap();
        let want = fuse_oracle(&t, &v, &s, lambda);
        if fused.len() != want.len() {
            return Outcome::new(
                false,
                format!(
                    "case {case}: {} fused words, oracle {}",
                    fused.len(),
                    want.len()
                ),
            );
        }
        for (f, (i, w)) in fused.iter().zip(&want) {
            if f.word != *i {
                return Outcome::new(false, format!("case {case}: fused word {} vs {i}", f.word));
            }
            worst[0] = worst[0].max(max_abs_diff(&f.vector, w));
        }

        let cands = candidate_reps(&tm, &vm, &part).unwrap();
        let want_c = candidate_oracle(&t, &v, &s, lambda);
        if cands.len() != want_c.len() {
            return Outcome::new(
                false,
                format!(
                    "case {case}: {} candidates, oracle {}",
                    cands.len(),
                    want_c.len()
                ),
            );
        }
        for (c, (i, j, w)) in cands.iter().zip(&want_c) {
            if (c.word, c.region) != (*i, *j) {
                return Outcome::new(false, format!("case {case}: candidate order differs"));
            }
            worst[1] = worst[1].max(max_abs_diff(&c.vector, w));
        }

        let sm: Vec<f64> = (0..fused.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sc: Vec<f64> = (0..cands.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fused_rows: Rows = want.iter().map(|(_, w)| w.clone()).collect();
        let cand_rows: Rows = want_c.iter().map(|(_, _, w)| w.clone()).collect();
        let parts = aggregate_parts(d, &fused_rows, &sm, &cand_rows, &sc).unwrap();
        worst[2] = worst[2]
            .max(max_abs_diff(
                &parts.z_m,
                &weighted_sum_oracle(d, &fused_rows, &sm),
            ))
            .max(max_abs_diff(
                &parts.z_c,
                &weighted_sum_oracle(d, &cand_rows, &sc),
            ));

        let att = cross_attention_baseline(&tm, &vm).unwrap();
        let want_a = cross_attention_oracle(&t, &v);
        for i in 0..n {
            worst[3] = worst[3].max(max_abs_diff(att.row(i), &want_a[i]));
        }
    }
    let pass = worst.iter().all(|&w| w <= tol);
    Outcome::new(
        pass,
        format!(
            "{cases} cases, max |diff|: fuse {:.1e}, candidates {:.1e}, aggregate {:.1e}, cross-attention {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

pub fn small_dims() -> ModelDims {
    ModelDims {
        d: 8,
        d_m: 4,
        d_f: 4,
        c: None,
    }
}

/// A random valid post with arbitrary (non-synthetic) embeddings.
pub fn random_post(rng: &mut ChaCha8Rng, id: &str, d_t: usize, d_v: usize) -> PostRecord {
    let n = rng.gen_range(1..8);
    let m = rng.gen_range(1..6);
    let to_f32 = |rows: Rows| {
        let flat: Vec<f32> = rows.into_iter().flatten().map(|x| x as f32).collect();
        flat
    };
    let t = Matrix::from_vec(n, d_t, to_f32(gaussian_rows(rng, n, d_t))).unwrap();
    let v = Matrix::from_vec(m, d_v, to_f32(gaussian_rows(rng, m, d_v))).unwrap();
    let label = if rng.gen_bool(0.5) {
        Label::Fake
    } else {
        Label::Real
    };
    PostRecord::new(id, label, t, v, random_mask(rng, n)).unwrap()
}

pub fn loss_suite(forwards: usize, seed: u64) -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    for label in [Label::Real, Label::Fake] {
        let l = detection_loss(0.5f64, label);
        if (l - ln2).abs() > 1e-9 {
            return Outcome::new(false, format!("detection_loss(0.5, {label}) = {l}"));
        }
        let p = partition_loss([0.5f64, 0.5], label);
        if (p - 0.5).abs() > 1e-12 {
            return Outcome::new(false, format!("partition_loss([.5,.5], {label}) = {p}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let (l_d, l_p, beta) = (
            rng.gen_range(0.0..20.0),
            rng.gen_range(0.0..2.0),
            rng.gen_range(1e-6..=1.0),
        );
        let b = LossBreakdown::new(l_d, l_p, beta);
        if (b.total - (l_d + beta * l_p)).abs() > 1e-12 {
            return Outcome::new(false, format!("total {} != {l_d} + {beta}*{l_p}", b.total));
        }
    }
    let mut worst = 0.0f64;
    let mut evaluated = 0;
    let mut degenerate = 0;
    for k in 0..forwards {
        let (d_t, d_v) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let post = random_post(&mut rng, &format!("p{k}"), d_t, d_v);
        let params: ModelParams<f64> = ModelParams::init(&mut rng, d_t, d_v, &small_dims());
        let lambda = rng.gen_range(0.0..1.0);
        let variant = [
            AblationVariant::Full,
            AblationVariant::NoConsistent,
            AblationVariant::NoInconsistent,
            AblationVariant::NoPartitionLoss,
        ][k % 4];
        let trace = match forward(&post, &params, lambda, variant) {
            Ok(t) => t,
            // a ReLU bank can zero a whole projected row on tiny random models
            Err(cffn::Error::Degenerate(_)) => {
                degenerate += 1;
                continue;
            }
            Err(e) => return Outcome::new(false, format!("forward {k}: {e}")),
        };
        let w = trace.w_mc().expect("partitioned variants expose w_mc");
        if w[0] < 0.0 || w[1] < 0.0 {
            return Outcome::new(false, format!("forward {k}: negative w_mc {w:?}"));
        }
        worst = worst.max((w[0] + w[1] - 1.0).abs());
        evaluated += 1;
    }
    let pass = worst <= 1e-12 && evaluated * 10 >= forwards * 9;
    Outcome::new(
        pass,
        format!(
            "ln2 and 0.5 identities hold; total identity on 1000 draws; w_mc simplex over {evaluated} forwards (max |sum-1| {worst:.1e}, {degenerate} degenerate inputs skipped)"
        ),
    )
}
