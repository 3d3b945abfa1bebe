//! Per-post breakdown of which word-region pairs the model treated as
//! consistent, which as inconsistency candidates, and how it scored them.

use serde::{Deserialize, Serialize};

use crate::config::AblationVariant;
use crate::data::{Label, PostRecord};
use crate::error::Result;
use crate::fusion::{partition, relevance};
use crate::model::{forward, ModelParams};
use crate::tensor::{cast, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PairPart {
    Consistent,
    Candidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub i: usize,
    pub j: usize,
    pub relevance: f64,
    pub part: PairPart,
    /// Consistency score of word `i` for consistent rows, inconsistency score
    /// of the pair for candidate rows. Absent when the variant computes none.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub i: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub post_id: String,
    pub label: Label,
    pub prediction: Label,
    pub prob_fake: f64,
    pub lambda: f64,
    pub variant: AblationVariant,
    pub rows: Vec<PairRow>,
    pub w_mc: Option<[f64; 2]>,
    pub top_inconsistent_pairs: Vec<PairRow>,
    pub top_consistent_words: Vec<WordScore>,
}

pub fn explain<T: Scalar>(
    params: &ModelParams<T>,
    post: &PostRecord,
    lambda: f64,
    variant: AblationVariant,
    top_k: usize,
) -> Result<ExplainReport> {
    let trace = forward(post, params, lambda, variant)?;
    let mut rows = Vec::new();
    let mut word_scores = Vec::new();

    if let Some(pt) = trace.partitioned() {
        let mut consistent_score = vec![None; pt.partition.n_words];
        for (f, s) in pt.fused.iter().zip(&pt.consistency_scores) {
            let score: f64 = cast(s.score);
            consistent_score[f.word] = Some(score);
            word_scores.push(WordScore { i: f.word, score });
        }
        let mut candidate_score = std::collections::HashMap::new();
        for (c, s) in pt.candidates.iter().zip(&pt.inconsistency_scores) {
            candidate_score.insert((c.word, c.region), cast::<T, f64>(s.score));
        }
        for i in 0..pt.partition.n_words {
            for j in 0..pt.partition.n_regions {
                if !pt.partition.is_valid(i, j) {
                    continue;
                }
                let consistent = pt.partition.is_consistent(i, j);
                rows.push(PairRow {
                    i,
                    j,
                    relevance: cast(pt.relevance.scores.get(i, j)),
                    part: if consistent {
                        PairPart::Consistent
                    } else {
                        PairPart::Candidate
                    },
                    score: if consistent {
                        consistent_score[i]
                    } else {
                        candidate_score.get(&(i, j)).copied()
                    },
                });
            }
        }
    } else {
        // the baseline never partitions; report the split it would have used
        let rel = relevance(&trace.words.output, &trace.regions, &trace.token_mask)?;
        let part = partition(&rel, lambda)?;
        for (i, j) in (0..part.n_words).flat_map(|i| (0..part.n_regions).map(move |j| (i, j))) {
            if part.is_valid(i, j) {
                rows.push(PairRow {
                    i,
                    j,
                    relevance: cast(rel.scores.get(i, j)),
                    part: if part.is_consistent(i, j) {
                        PairPart::Consistent
                    } else {
                        PairPart::Candidate
                    },
                    score: None,
                });
            }
        }
    }

    let mut top_inconsistent_pairs: Vec<PairRow> = rows
        .iter()
        .filter(|r| r.part == PairPart::Candidate && r.score.is_some())
        .cloned()
        .collect();
    top_inconsistent_pairs.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    top_inconsistent_pairs.truncate(top_k);
    word_scores.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    word_scores.truncate(top_k);

    Ok(ExplainReport {
        post_id: post.post_id().to_string(),
        label: post.label(),
        prediction: trace.predicted(),
        prob_fake: cast(trace.prob_fake()),
        lambda,
        variant,
        rows,
        w_mc: trace.w_mc().map(|w| [cast(w[0]), cast(w[1])]),
        top_inconsistent_pairs,
        top_consistent_words: word_scores,
    })
}
