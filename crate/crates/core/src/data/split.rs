use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingArchive;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// Seeded shuffle, then floor-rounded val/test sizes; the remainder goes to train.
pub fn split_dataset(
    archive: &EmbeddingArchive,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (r_train, r_val, r_test) = ratios;
    let all = [r_train, r_val, r_test];
    if all.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be >= 0, got {ratios:?}"
        )));
    }
    if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let n = archive.len();
    let nonzero = all.iter().filter(|r| **r > 0.0).count();
    if n < nonzero {
        return Err(Error::Config(format!(
            "{n} records cannot fill {nonzero} non-empty split parts"
        )));
    }

    let mut ids: Vec<String> = archive.ids().map(str::to_string).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    // the epsilon absorbs products like 0.3 * 10 = 2.9999999999999996
    let n_val = (r_val * n as f64 + 1e-9).floor() as usize;
    let n_test = (r_test * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;

    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(DatasetSplit {
        train: ids,
        val,
        test,
    })
}
