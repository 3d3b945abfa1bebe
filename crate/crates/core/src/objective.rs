//! Detection loss, partition loss and their combination.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_p: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_d: f64, l_p: f64, beta: f64) -> Self {
        Self {
            l_d,
            l_p,
            beta,
            total: combine(l_d, l_p, beta),
        }
    }
}

/// Target selection weights: `[1, 0]` for real news, `[0, 1]` for fake news.
pub fn partition_label<T: Scalar>(label: Label) -> [T; 2] {
    match label {
        Label::Real => [T::one(), T::zero()],
        Label::Fake => [T::zero(), T::one()],
    }
}

fn clamped<T: Scalar>(prob_fake: T) -> (T, bool) {
    let lo: T = lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if prob_fake < lo {
        (lo, true)
    } else if prob_fake > hi {
        (hi, true)
    } else {
        (prob_fake, false)
    }
}

/// Binary cross-entropy with `y = 1` for FAKE.
pub fn detection_loss<T: Scalar>(prob_fake: T, label: Label) -> T {
    let (p, _) = clamped(prob_fake);
    match label {
        Label::Fake => -p.ln(),
        Label::Real => -(T::one() - p).ln(),
    }
}

/// `dL_d / dprob_fake`; zero where the clamp is active.
pub fn detection_loss_grad<T: Scalar>(prob_fake: T, label: Label) -> T {
    let (p, hit) = clamped(prob_fake);
    if hit {
        return T::zero();
    }
    match label {
        Label::Fake => -T::one() / p,
        Label::Real => T::one() / (T::one() - p),
    }
}

/// Distance of `prob_fake` from the nearest clamp boundary; negative inside the clamp.
pub fn clamp_margin<T: Scalar>(prob_fake: T) -> T {
    let lo: T = lit(PROB_CLAMP);
    (prob_fake - lo).min(T::one() - lo - prob_fake)
}

/// `||y_p - w_mc||^2`
pub fn partition_loss<T: Scalar>(w_mc: [T; 2], label: Label) -> T {
    let y = partition_label::<T>(label);
    let d0 = y[0] - w_mc[0];
    let d1 = y[1] - w_mc[1];
    d0 * d0 + d1 * d1
}

pub fn partition_loss_grad<T: Scalar>(w_mc: [T; 2], label: Label) -> [T; 2] {
    let y = partition_label::<T>(label);
    let two: T = lit(2.0);
    [two * (w_mc[0] - y[0]), two * (w_mc[1] - y[1])]
}

pub fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("beta must be in (0, 1], got {beta}")));
    }
    Ok(())
}

/// `L = L_d + beta * L_p` with `beta` in `(0, 1]`.
pub fn total_loss(l_d: f64, l_p: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(combine(l_d, l_p, beta))
}

/// Unchecked combination; ablations use `beta = 0`.
#[inline]
pub fn combine(l_d: f64, l_p: f64, beta: f64) -> f64 {
    l_d + beta * l_p
}
