use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fusion::check_lambda;
use crate::objective::check_beta;

/// Training modes; everything except `Full` disables one component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    #[default]
    Full,
    /// `z_m` forced to zero.
    NoConsistent,
    /// `z_c` forced to zero.
    NoInconsistent,
    /// Full forward pass, partition loss weight treated as zero.
    NoPartitionLoss,
    /// Plain cross-attention over all pairs, mean-pooled over content words,
    /// classified directly.
    NoSeparation,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoConsistent,
        AblationVariant::NoInconsistent,
        AblationVariant::NoPartitionLoss,
        AblationVariant::NoSeparation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "FULL",
            AblationVariant::NoConsistent => "NO_CONSISTENT",
            AblationVariant::NoInconsistent => "NO_INCONSISTENT",
            AblationVariant::NoPartitionLoss => "NO_PARTITION_LOSS",
            AblationVariant::NoSeparation => "NO_SEPARATION",
        }
    }

    pub fn uses_partition(self) -> bool {
        self != AblationVariant::NoSeparation
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    /// Accepts a single name or `+`-joined names. Joined names are rejected
    /// unless they reduce to one variant.
    fn from_str(s: &str) -> Result<Self> {
        let single = |name: &str| {
            AblationVariant::ALL
                .into_iter()
                .find(|v| v.as_str().eq_ignore_ascii_case(name.trim()))
                .ok_or_else(|| Error::Config(format!("unknown ablation variant `{name}`")))
        };
        let parts: Vec<&str> = s.split('+').collect();
        if parts.len() == 1 {
            return single(parts[0]);
        }
        let mut variants = parts.into_iter().map(single).collect::<Result<Vec<_>>>()?;
        variants.sort_by_key(|v| v.as_str());
        variants.dedup();
        if variants.contains(&AblationVariant::NoConsistent)
            && variants.contains(&AblationVariant::NoInconsistent)
        {
            return Err(Error::Config(
                "NO_CONSISTENT and NO_INCONSISTENT together leave no evidence to classify".into(),
            ));
        }
        match variants.as_slice() {
            [one] => Ok(*one),
            _ => Err(Error::Config(format!(
                "ablation variants cannot be combined: `{s}`"
            ))),
        }
    }
}

impl Serialize for AblationVariant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for AblationVariant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Shared embedding width.
    pub d: usize,
    /// Hidden width of both scoring MLPs.
    pub d_m: usize,
    /// Hidden width of the classifier.
    pub d_f: usize,
    /// Channels per convolution bank; defaults to `d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d: 256,
            d_m: 128,
            d_f: 64,
            c: None,
        }
    }
}

impl ModelDims {
    pub fn channels(&self) -> usize {
        self.c.unwrap_or(self.d)
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    128
}
fn default_beta() -> f64 {
    0.8
}

/// Hyperparameters for one training run. The JSON form uses these field
/// names; `epochs` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub variant: AblationVariant,
    #[serde(default)]
    pub dims: ModelDims,
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            epochs,
            beta: default_beta(),
            lambda: 0.0,
            seed: 0,
            variant: AblationVariant::Full,
            dims: ModelDims::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        check_beta(self.beta)?;
        check_lambda(self.lambda)?;
        let d = &self.dims;
        if d.d == 0 || d.d_m == 0 || d.d_f == 0 || d.channels() == 0 {
            return Err(Error::Config(format!(
                "model dims must be positive, got {d:?}"
            )));
        }
        Ok(())
    }

    /// Weight of the partition loss actually applied during training.
    pub fn effective_beta(&self) -> f64 {
        match self.variant {
            AblationVariant::NoPartitionLoss | AblationVariant::NoSeparation => 0.0,
            _ => self.beta,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::new(3);
        assert_eq!((c.lr, c.weight_decay, c.batch_size), (1e-3, 1e-4, 128));
        assert_eq!(
            (c.dims.d, c.dims.d_m, c.dims.d_f, c.dims.channels()),
            (256, 128, 64, 256)
        );
        c.validate().unwrap();
    }

    #[test]
    fn json_requires_epochs() {
        assert!(TrainConfig::from_json(r#"{"lr": 0.01}"#).is_err());
        let c =
            TrainConfig::from_json(r#"{"epochs": 2, "variant": "NO_SEPARATION", "lambda": 0.1}"#)
                .unwrap();
        assert_eq!(c.variant, AblationVariant::NoSeparation);
        assert_eq!(c.lambda, 0.1);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let base = TrainConfig::new(1);
        for bad in [
            TrainConfig {
                beta: 0.0,
                ..base.clone()
            },
            TrainConfig {
                beta: 1.1,
                ..base.clone()
            },
            TrainConfig {
                lambda: 1.0,
                ..base.clone()
            },
            TrainConfig {
                lambda: -0.5,
                ..base.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..base.clone()
            },
            TrainConfig {
                epochs: 0,
                ..base.clone()
            },
            TrainConfig {
                lr: f64::NAN,
                ..base.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn both_part_ablations_together_are_rejected() {
        assert!("NO_CONSISTENT+NO_INCONSISTENT"
            .parse::<AblationVariant>()
            .is_err());
        assert!(TrainConfig::from_json(
            r#"{"epochs": 1, "variant": "NO_INCONSISTENT+NO_CONSISTENT"}"#
        )
        .is_err());
        assert!("NO_CONSISTENT+NO_SEPARATION"
            .parse::<AblationVariant>()
            .is_err());
        assert_eq!(
            "full".parse::<AblationVariant>().unwrap(),
            AblationVariant::Full
        );
        assert!("NOPE".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn partition_loss_ablation_zeroes_beta() {
        let c = TrainConfig {
            variant: AblationVariant::NoPartitionLoss,
            ..TrainConfig::new(1)
        };
        assert_eq!(c.effective_beta(), 0.0);
        assert_eq!(TrainConfig::new(1).effective_beta(), 0.8);
    }
}
