//! α-quantile confidence scores over token-probability sequences.
//!
//! A low quantile of a response's token probabilities signals an uncertain,
//! and therefore hard, sub-task. Scores are generic over the float type.

use std::collections::BTreeMap;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaConfig<F = f64> {
    pub alpha: F,
}

impl<F: Float> AlphaConfig<F> {
    pub fn new(alpha: F) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(AlphaConfig { alpha })
    }
}

impl Default for AlphaConfig<f64> {
    fn default() -> Self {
        AlphaConfig { alpha: DEFAULT_ALPHA }
    }
}

fn check_alpha<F: Float>(alpha: F) -> Result<()> {
    if alpha >= F::zero() && alpha <= F::one() {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha.to_f64().unwrap_or(f64::NAN)))
    }
}

/// α-quantile of `probs` by linear interpolation between order statistics
/// at rank `(n - 1) * alpha`. `alpha = 0` gives the minimum, `alpha = 1`
/// the maximum.
pub fn alpha_quantile<F: Float>(probs: &[F], alpha: F) -> Result<F> {
    check_alpha(alpha)?;
    if probs.is_empty() {
        return Err(Error::Empty("token probability sequence"));
    }
    if let Some(p) = probs.iter().find(|p| !(**p > F::zero() && **p <= F::one())) {
        return Err(Error::InvalidProbability(p.to_f64().unwrap_or(f64::NAN)));
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("probabilities are not NaN"));

    let last = sorted.len() - 1;
    let rank = F::from(last).expect("length fits the float type") * alpha;
    let lower = rank.floor();
    let frac = rank - lower;
    let lo = lower.to_usize().unwrap_or(0).min(last);
    let hi = (lo + 1).min(last);
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Sub-task indices from hardest (lowest score) to easiest; ties go to the
/// lower index first.
pub fn rank_by_difficulty<F: Float>(scores: &BTreeMap<usize, F>) -> Vec<usize> {
    let mut order: Vec<(usize, F)> = scores.iter().map(|(i, s)| (*i, *s)).collect();
    // BTreeMap iteration is ascending by index, and the sort is stable.
    order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    order.into_iter().map(|(i, _)| i).collect()
}
