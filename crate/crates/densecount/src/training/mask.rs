//! Random token masking for the pre-training stage.

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;

/// Split `m` token indices into a kept (visible) set of ⌊m·(1−ratio)⌋ and
/// its masked complement, both sorted ascending. Deterministic under `seed`.
pub fn random_mask(m: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!(
            "mask ratio {ratio} must lie strictly between 0 and 1"
        )));
    }
    if m == 0 {
        return Err(Error::Invalid("cannot mask an empty token grid".into()));
    }
    let n_visible = ((m as f64) * (1.0 - ratio)).floor() as usize;
    let n_visible = n_visible.max(1).min(m - 1);
    let mut order: Vec<usize> = (0..m).collect();
    let mut r = rng::substream(seed, "mask");
    order.shuffle(&mut r);
    let mut keep: Vec<usize> = order[..n_visible].to_vec();
    let mut masked: Vec<usize> = order[n_visible..].to_vec();
    keep.sort_unstable();
    masked.sort_unstable();
    Ok((keep, masked))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ratio_halves_the_grid() {
        let (keep, masked) = random_mask(576, 0.5, 0).unwrap();
        assert_eq!(keep.len(), 288);
        assert_eq!(masked.len(), 288);
        let mut all: Vec<usize> = keep.iter().chain(&masked).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..576).collect::<Vec<_>>());
    }

    #[test]
    fn floor_rule_on_tiny_grids() {
        let (keep, masked) = random_mask(2, 0.5, 3).unwrap();
        assert_eq!(keep.len(), 1);
        assert_eq!(masked.len(), 1);
    }

    #[test]
    fn same_seed_same_mask() {
        let a = random_mask(64, 0.5, 42).unwrap();
        let b = random_mask(64, 0.5, 42).unwrap();
        assert_eq!(a, b);
        let c = random_mask(64, 0.5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_ratios_rejected() {
        assert!(random_mask(16, 0.0, 0).is_err());
        assert!(random_mask(16, 1.0, 0).is_err());
        assert!(random_mask(0, 0.5, 0).is_err());
    }
}
