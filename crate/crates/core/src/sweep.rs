//! Grid search over the partition-loss weight and the relevance threshold.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{DatasetSplit, EmbeddingArchive, SplitPart};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::training::{evaluate, train};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub beta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub epochs_run: usize,
    pub metrics: Option<Metrics>,
    pub fake_prediction_rate: Option<f64>,
    pub error: Option<String>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub eval_split: SplitPart,
    pub base: TrainConfig,
    pub cells: Vec<SweepCell>,
}

/// Inclusive `start:stop:step` range, e.g. `0.0:0.3:0.1`. A bare number is a
/// one-element grid.
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let nums = text
        .split(':')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{p}` in range `{text}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (start, stop, step) = match nums.as_slice() {
        [x] => return Ok(vec![*x]),
        [a, b, s] => (*a, *b, *s),
        _ => {
            return Err(Error::Config(format!(
                "range `{text}` is not start:stop:step"
            )))
        }
    };
    if !(step > 0.0 && step.is_finite() && start.is_finite() && stop.is_finite()) || stop < start {
        return Err(Error::Config(format!(
            "range `{text}` is empty or ill-formed"
        )));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    // rounding keeps 0.1 * 3 printing as 0.3
    Ok((0..count)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// Trains and evaluates one model per (beta, lambda) cell. Cells are visited
/// beta-major; cell `k` trains with seed `base.seed + k`. A failing cell keeps
/// its error message and the sweep moves on.
pub fn sweep(
    archive: &EmbeddingArchive,
    split: &DatasetSplit,
    base: &TrainConfig,
    betas: &[f64],
    lambdas: &[f64],
    eval_split: SplitPart,
) -> Result<SweepTable> {
    if betas.is_empty() || lambdas.is_empty() {
        return Err(Error::Empty("sweep grid".into()));
    }
    if split.part(eval_split).is_empty() {
        return Err(Error::Empty(format!("{eval_split:?} split")));
    }
    let mut cells = Vec::with_capacity(betas.len() * lambdas.len());
    for &beta in betas {
        for &lambda in lambdas {
            let index = cells.len();
            let config = TrainConfig {
                beta,
                lambda,
                seed: base.seed.wrapping_add(index as u64),
                ..base.clone()
            };
            let start = Instant::now();
            let outcome = train(archive, split, &config).and_then(|out| {
                let m = evaluate(
                    &out.params,
                    archive,
                    split.part(eval_split),
                    lambda,
                    config.variant,
                )?;
                Ok((out.history.len(), m))
            });
            let wall_clock_secs = start.elapsed().as_secs_f64();
            let mut cell = SweepCell {
                index,
                beta,
                lambda,
                seed: config.seed,
                epochs_run: 0,
                metrics: None,
                fake_prediction_rate: None,
                error: None,
                wall_clock_secs,
            };
            match outcome {
                Ok((epochs, m)) => {
                    cell.epochs_run = epochs;
                    cell.fake_prediction_rate = Some(m.fake_prediction_rate());
                    cell.metrics = Some(m);
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cells.push(cell);
        }
    }
    Ok(SweepTable {
        eval_split,
        base: base.clone(),
        cells,
    })
}
