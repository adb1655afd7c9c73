//! Top-k channel selection with a deterministic tie rule.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Number of channels kept out of `c` at `ratio`: `ceil(ratio * c)`.
pub fn keep_count(c: usize, ratio: f64) -> Result<usize> {
    if c == 0 {
        return Err(Error::Dimension("cannot select from zero channels".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("keep ratio {ratio} not in (0, 1]")));
    }
    // The slack absorbs binary rounding in products like 0.7 * 10.
    let k = (ratio * c as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1, c))
}

/// Indices ordered by descending weight; equal weights keep ascending index order.
pub fn stable_argsort_desc<T: Real>(weights: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// The `k` largest entries, returned in ascending index order.
pub fn top_k<T: Real>(weights: &[T], k: usize) -> Vec<usize> {
    let mut kept = stable_argsort_desc(weights);
    kept.truncate(k);
    kept.sort_unstable();
    kept
}

/// Channels kept for one sample and the weights that ranked them.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSelection {
    pub kept: Vec<usize>,
    pub ranking_weights: Vec<f32>,
}

impl ChannelSelection {
    pub fn from_weights<T: Real>(weights: &[T], ratio: f64) -> Result<Self> {
        let k = keep_count(weights.len(), ratio)?;
        Ok(ChannelSelection {
            kept: top_k(weights, k),
            ranking_weights: weights.iter().map(|w| w.as_f64() as f32).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_counts_match_integer_ceiling() {
        for c in 1..=256 {
            assert_eq!(keep_count(c, 0.7).unwrap(), (7 * c).div_ceil(10), "c={c}");
            assert_eq!(keep_count(c, 0.5).unwrap(), c.div_ceil(2), "c={c}");
        }
        assert_eq!(keep_count(10, 0.7).unwrap(), 7);
    }

    #[test]
    fn hand_examples() {
        assert_eq!(top_k(&[0.1f32, 0.9, 0.5, 0.4], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.3f32; 6], 4), vec![0, 1, 2, 3]);
        assert_eq!(stable_argsort_desc(&[0.9f32, 0.1, 0.5]), vec![0, 2, 1]);
    }

    #[test]
    fn bad_ratio_and_empty_input() {
        assert!(matches!(keep_count(0, 0.5), Err(Error::Dimension(_))));
        assert!(matches!(keep_count(4, 0.0), Err(Error::Config(_))));
        assert!(matches!(keep_count(4, 1.5), Err(Error::Config(_))));
    }
}
