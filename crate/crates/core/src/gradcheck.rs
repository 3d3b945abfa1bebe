//! Finite-difference verification of the analytic backward pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AblationVariant;
use crate::data::PostRecord;
use crate::error::Result;
use crate::model::{backward, forward, ModelParams};
use crate::nn::Parameters;

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients from
/// turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub samples_per_group: usize,
    pub max_retries: usize,
    /// Distance to a ReLU, clamp or threshold boundary treated as "on" it.
    pub kink_eps: f64,
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            samples_per_group: 100,
            max_retries: 10,
            kink_eps: 1e-6,
            rel_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub size: usize,
    pub checked: usize,
    pub resampled: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub status: CheckStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub post_id: String,
    pub variant: AblationVariant,
    pub lambda: f64,
    pub beta: f64,
    pub loss: f64,
    pub base_kink_margin: f64,
    pub groups: Vec<GroupReport>,
    pub status: CheckStatus,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Group key: the first two components of a parameter name, e.g.
/// `projection.conv2`.
fn group_of(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

struct Group {
    name: String,
    /// (tensor name, flat range)
    tensors: Vec<(String, std::ops::Range<usize>)>,
    size: usize,
}

impl Group {
    fn locate(&self, mut k: usize) -> (usize, String) {
        for (name, range) in &self.tensors {
            if k < range.len() {
                return (range.start + k, format!("{name}[{k}]"));
            }
            k -= range.len();
        }
        unreachable!("index beyond group size")
    }
}

fn groups(params: &ModelParams<f64>) -> Vec<Group> {
    let mut out: Vec<Group> = Vec::new();
    for (name, _, range) in params.layout() {
        let key = group_of(&name);
        match out.last_mut() {
            Some(g) if g.name == key => {
                g.size += range.len();
                g.tensors.push((name, range));
            }
            _ => out.push(Group {
                name: key,
                size: range.len(),
                tensors: vec![(name, range)],
            }),
        }
    }
    out
}

/// Compares analytic gradients of `L_d + beta * L_p` with central differences
/// on sampled scalars of every parameter group. Groups smaller than
/// `samples_per_group` are checked exhaustively.
pub fn grad_check(
    params: &ModelParams<f64>,
    post: &PostRecord,
    lambda: f64,
    beta: f64,
    variant: AblationVariant,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let base = forward(post, params, lambda, variant)?;
    let mut grads = params.zeros_like();
    backward(&base, params, beta, &mut grads);
    compare(params, post, lambda, beta, variant, opts, &grads.flatten())
}

fn compare(
    params: &ModelParams<f64>,
    post: &PostRecord,
    lambda: f64,
    beta: f64,
    variant: AblationVariant,
    opts: &GradCheckOptions,
    analytic: &[f64],
) -> Result<GradCheckReport> {
    let base = forward(post, params, lambda, variant)?;
    let loss = base.total_loss(beta);
    let margin = base.kink_margin();
    let signature = base.kink_signature();
    let flat = params.flatten();

    let mut report = GradCheckReport {
        post_id: post.post_id().to_string(),
        variant,
        lambda,
        beta,
        loss,
        base_kink_margin: margin,
        groups: Vec::new(),
        status: CheckStatus::Pass,
    };
    if margin < opts.kink_eps {
        report.status = CheckStatus::Inconclusive;
        return Ok(report);
    }

    let mut probe = params.clone();
    let mut eval = |index: usize, value: f64| -> Result<(f64, bool)> {
        let mut v = flat.clone();
        v[index] = value;
        probe.load_flat(&v)?;
        let tr = forward(post, &probe, lambda, variant)?;
        Ok((tr.total_loss(beta), tr.kink_signature() == signature))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for group in groups(params) {
        let exhaustive = group.size <= opts.samples_per_group;
        // every index once in random order; entries past the target serve as
        // replacements for probes that straddle a kink
        let order: Vec<usize> = if exhaustive {
            (0..group.size).collect()
        } else {
            sample(&mut rng, group.size, group.size).into_vec()
        };
        let target = group.size.min(opts.samples_per_group);
        let mut g = GroupReport {
            group: group.name.clone(),
            size: group.size,
            checked: 0,
            resampled: 0,
            max_rel_error: 0.0,
            worst: None,
            status: CheckStatus::Pass,
        };
        let mut retries = 0;
        for &k in &order {
            if g.checked == target {
                break;
            }
            let (index, label) = group.locate(k);
            let x = flat[index];
            let (plus, same_plus) = eval(index, x + opts.step)?;
            let (minus, same_minus) = eval(index, x - opts.step)?;
            if !(same_plus && same_minus) {
                g.resampled += 1;
                retries += 1;
                // small groups have no replacements, so their budget is global
                let used = if exhaustive { g.resampled } else { retries };
                if used > opts.max_retries {
                    g.status = CheckStatus::Inconclusive;
                    break;
                }
                continue;
            }
            retries = 0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[index], numeric, opts.rel_floor);
            if g.worst.is_none() || err > g.max_rel_error {
                g.max_rel_error = err;
                g.worst = Some(label);
            }
            g.checked += 1;
        }
        if !exhaustive && g.checked < target {
            g.status = CheckStatus::Inconclusive;
        }
        if g.status == CheckStatus::Pass && g.max_rel_error > opts.tolerance {
            g.status = CheckStatus::Fail;
        }
        report.groups.push(g);
    }
    report.status = if report.groups.iter().any(|g| g.status == CheckStatus::Fail) {
        CheckStatus::Fail
    } else if report
        .groups
        .iter()
        .any(|g| g.status == CheckStatus::Inconclusive)
    {
        CheckStatus::Inconclusive
    } else {
        CheckStatus::Pass
    };
    Ok(report)
}
