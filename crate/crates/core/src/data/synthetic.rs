//! Synthetic posts with planted cross-modal inconsistencies.
//!
//! Every post gets a random unit "topic" direction `u`. Ordinary word and
//! region vectors are unit-norm perturbations of `u` carrying a small negative
//! component `-gamma` along a global inconsistency direction `q`. A fake post
//! additionally has `k` word-region pairs replaced by
//!
//! ```text
//! word   = alpha * q + sqrt(1 - alpha^2) * p
//! region = alpha * q - sqrt(1 - alpha^2) * p
//! ```
//!
//! with `p` orthogonal to `q` and `u`. The planted pair then has cosine
//! `2 alpha^2 - 1` (low relevance) while its sum projects `2 alpha` onto `q`.
//! Any sum that involves an ordinary vector projects at most `alpha - gamma`.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Label, PostRecord};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Upper bound on `alpha`; keeps planted vectors mostly off-axis.
const MAX_ALPHA: f64 = 0.4;
/// Planted sums must project strictly above this onto `q`.
const PLANTED_PROJECTION: f64 = 0.5;
/// Ordinary sums project `alpha - gamma` onto `q`; this is that gap.
const ORDINARY_GAP: f64 = 0.05;

/// Missing JSON fields take their default values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_real: usize,
    pub n_fake: usize,
    #[serde(rename = "N")]
    pub n_tokens: usize,
    #[serde(rename = "M")]
    pub n_regions: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub consistent_cos_min: f64,
    pub planted_pairs_per_fake: usize,
    pub planted_cos_max: f64,
    pub inconsistency_direction_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_real: 10,
            n_fake: 10,
            n_tokens: 6,
            n_regions: 8,
            d_t: 32,
            d_v: 32,
            consistent_cos_min: 0.6,
            planted_pairs_per_fake: 1,
            planted_cos_max: 0.0,
            inconsistency_direction_seed: 1,
        }
    }
}

struct Geometry {
    alpha: f64,
    gamma: f64,
    /// weight of the topic direction inside the off-`q` part of ordinary vectors
    topic: f64,
}

impl SyntheticConfig {
    fn geometry(&self) -> Result<Geometry> {
        let fail = |msg: String| Err(Error::Generation(msg));
        if self.n_tokens == 0 || self.n_regions == 0 {
            return fail("N and M must be at least 1".into());
        }
        if self.d_t != self.d_v {
            return fail(format!(
                "planted sums need d_t == d_v (got {} and {})",
                self.d_t, self.d_v
            ));
        }
        let k = self.planted_pairs_per_fake;
        if k == 0 {
            return fail("planted_pairs_per_fake must be >= 1".into());
        }
        if self.n_fake > 0 && k > self.n_tokens.min(self.n_regions) {
            return fail(format!(
                "cannot plant {k} pairs in a {}x{} post",
                self.n_tokens, self.n_regions
            ));
        }
        // q, the topic, k planted directions and at least one noise direction
        if self.d_t < k + 3 {
            return fail(format!(
                "dimension {} too small for orthogonality margins (need >= {})",
                self.d_t,
                k + 3
            ));
        }
        let c = self.consistent_cos_min;
        if !(c > 0.0 && c <= 1.0) {
            return fail(format!("consistent_cos_min must be in (0, 1], got {c}"));
        }
        if self.planted_cos_max >= c {
            return fail(format!(
                "planted_cos_max {} must be below consistent_cos_min {c}",
                self.planted_cos_max
            ));
        }
        let alpha = MAX_ALPHA.min(((1.0 + self.planted_cos_max) / 2.0).max(0.0).sqrt());
        if 2.0 * alpha <= PLANTED_PROJECTION + 0.01 {
            return fail(format!(
                "planted_cos_max {} leaves no room for a planted projection above {PLANTED_PROJECTION}",
                self.planted_cos_max
            ));
        }
        let gamma = alpha - ORDINARY_GAP;
        // cos between ordinary vectors >= gamma^2 + (1 - gamma^2) * (a^2 - b^2)
        let needed = ((c - gamma * gamma) / (1.0 - gamma * gamma)).max(0.0);
        let spread = (1.0 + needed) / 2.0;
        Ok(Geometry {
            alpha,
            gamma,
            topic: ((1.0 + spread) / 2.0).sqrt(),
        })
    }
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gram-Schmidt against `basis` (assumed orthonormal), then normalize.
fn orthonormal_to(rng: &mut impl Rng, dim: usize, basis: &[&[f64]]) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, dim);
        for b in basis {
            let proj = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b.iter()) {
                *x -= proj * y;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// The global unit direction that planted pair sums point along.
pub fn inconsistency_direction(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    orthonormal_to(&mut rng, dim, &[])
}

fn combine(terms: &[(f64, &[f64])]) -> Vec<f32> {
    let dim = terms[0].1.len();
    (0..dim)
        .map(|i| terms.iter().map(|(w, v)| w * v[i]).sum::<f64>() as f32)
        .collect()
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<PostRecord>> {
    let geo = config.geometry()?;
    let dim = config.d_t;
    let q = inconsistency_direction(config.inconsistency_direction_seed, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Real, config.n_real)
        .chain(std::iter::repeat_n(Label::Fake, config.n_fake))
        .collect();
    labels.shuffle(&mut rng);

    let off_q = (1.0 - geo.gamma * geo.gamma).sqrt();
    let noise = (1.0 - geo.topic * geo.topic).max(0.0).sqrt();
    let planted_off = (1.0 - geo.alpha * geo.alpha).sqrt();

    let mut records = Vec::with_capacity(labels.len());
    for (idx, label) in labels.into_iter().enumerate() {
        let topic = orthonormal_to(&mut rng, dim, &[&q]);
        let ordinary = |rng: &mut ChaCha8Rng| {
            let n = orthonormal_to(rng, dim, &[&q, &topic]);
            combine(&[
                (-geo.gamma, &q),
                (off_q * geo.topic, &topic),
                (off_q * noise, &n),
            ])
        };
        let mut words: Vec<Vec<f32>> = (0..config.n_tokens).map(|_| ordinary(&mut rng)).collect();
        let mut regions: Vec<Vec<f32>> =
            (0..config.n_regions).map(|_| ordinary(&mut rng)).collect();

        if label == Label::Fake {
            let k = config.planted_pairs_per_fake;
            let word_idx = sample(&mut rng, config.n_tokens, k);
            let region_idx = sample(&mut rng, config.n_regions, k);
            let mut planted_dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
            for (wi, ri) in word_idx.iter().zip(region_idx.iter()) {
                let p = {
                    let mut basis: Vec<&[f64]> = vec![&q, &topic];
                    basis.extend(planted_dirs.iter().map(Vec::as_slice));
                    orthonormal_to(&mut rng, dim, &basis)
                };
                words[wi] = combine(&[(geo.alpha, &q), (planted_off, &p)]);
                regions[ri] = combine(&[(geo.alpha, &q), (-planted_off, &p)]);
                planted_dirs.push(p);
            }
        }

        let word_m = Matrix::from_vec(config.n_tokens, dim, words.concat())?;
        let region_m = Matrix::from_vec(config.n_regions, dim, regions.concat())?;
        records.push(PostRecord::new(
            format!("synth-{idx:06}"),
            label,
            word_m,
            region_m,
            vec![true; config.n_tokens],
        )?);
    }
    Ok(records)
}
