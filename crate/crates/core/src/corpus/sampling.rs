//! Negative sampling and rating discretization.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CorpusError;

/// A rating on the tenths grid between 1.0 and 5.0 (41 distinct values).
///
/// Stored as integer tenths (10..=50) so grid membership is exact and the
/// rendered form (`"3.7"`) is canonical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RatingTenths(u8);

impl RatingTenths {
    pub const MIN: RatingTenths = RatingTenths(10);
    pub const MAX: RatingTenths = RatingTenths(50);
    /// Number of grid values: 1.0, 1.1, ..., 5.0.
    pub const GRID_SIZE: usize = 41;

    pub fn from_tenths(tenths: u8) -> Option<RatingTenths> {
        (10..=50).contains(&tenths).then_some(RatingTenths(tenths))
    }

    /// Snap an arbitrary value onto the grid: clamp to [1, 5], round to one
    /// decimal place.
    pub fn snap(value: f64) -> RatingTenths {
        let clamped = value.clamp(1.0, 5.0);
        let tenths = (clamped * 10.0).round() as u8;
        RatingTenths(tenths.clamp(10, 50))
    }

    /// Exact integer score as a grid value.
    pub fn from_score(score: u8) -> RatingTenths {
        RatingTenths((score.clamp(1, 5)) * 10)
    }

    pub fn tenths(self) -> u8 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 10.0
    }

    /// Parse a decoded model output if it lies exactly on the grid.
    pub fn parse(text: &str) -> Option<RatingTenths> {
        let value: f64 = text.trim().parse().ok()?;
        if !(1.0..=5.0).contains(&value) {
            return None;
        }
        let tenths = value * 10.0;
        if (tenths - tenths.round()).abs() > 1e-9 {
            return None;
        }
        RatingTenths::from_tenths(tenths.round() as u8)
    }
}

impl fmt::Display for RatingTenths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

/// Perturb an integer score with Gaussian noise and snap to the tenths grid.
///
/// The result is `snap(score + N(0, sigma^2))`: out-of-range draws are
/// clamped (not resampled), so mass accumulates at 1.0 and 5.0. With
/// `sigma = 0` the integer score is returned exactly.
pub fn perturb_rating<R: Rng>(
    score: u8,
    sigma: f64,
    rng: &mut R,
) -> Result<RatingTenths, CorpusError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(CorpusError::BadSigma { sigma });
    }
    if sigma == 0.0 {
        return Ok(RatingTenths::from_score(score));
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| CorpusError::BadSigma { sigma })?;
    let noise: f64 = normal.sample(rng);
    Ok(RatingTenths::snap(f64::from(score) + noise))
}

/// Draw `n` distinct items uniformly (without replacement) from the catalog
/// minus the interacted set.
///
/// The candidate pool is the sorted complement, so the draw depends only on
/// the RNG state, not on catalog ordering. Errors if fewer than `n`
/// non-interacted items exist, reporting the deficit.
pub fn sample_negatives<R: Rng>(
    catalog: &[String],
    interacted: &BTreeSet<String>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<String>, CorpusError> {
    let mut pool: Vec<&String> = catalog
        .iter()
        .filter(|item| !interacted.contains(item.as_str()))
        .collect();
    pool.sort_unstable();
    pool.dedup();
    if pool.len() < n {
        return Err(CorpusError::PoolTooSmall {
            needed: n,
            available: pool.len(),
        });
    }
    // partial Fisher-Yates: the first n slots end up a uniform sample
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    Ok(pool[..n].iter().map(|s| (*s).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use statrs::distribution::{ContinuousCDF, Normal as StatNormal};
    use std::collections::BTreeMap;

    #[test]
    fn snap_grid_examples() {
        assert_eq!(RatingTenths::snap(3.64).to_string(), "3.6");
        assert_eq!(RatingTenths::snap(3.66).to_string(), "3.7");
        assert_eq!(RatingTenths::snap(0.2).to_string(), "1.0");
        assert_eq!(RatingTenths::snap(9.9).to_string(), "5.0");
        assert_eq!(RatingTenths::snap(5.0).to_string(), "5.0");
        assert_eq!(RatingTenths::from_score(4).to_string(), "4.0");
    }

    #[test]
    fn parse_accepts_grid_and_rejects_off_grid() {
        assert_eq!(RatingTenths::parse(" 4.3 "), RatingTenths::from_tenths(43));
        assert_eq!(RatingTenths::parse("5"), RatingTenths::from_tenths(50));
        assert_eq!(RatingTenths::parse("4.35"), None);
        assert_eq!(RatingTenths::parse("0.9"), None);
        assert_eq!(RatingTenths::parse("5.1"), None);
        assert_eq!(RatingTenths::parse("four"), None);
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for score in 1..=5u8 {
            let r = perturb_rating(score, 0.0, &mut rng).unwrap();
            assert_eq!(r, RatingTenths::from_score(score));
        }
    }

    #[test]
    fn perturb_is_deterministic_given_seed() {
        let a: Vec<RatingTenths> = {
            let mut rng = ChaCha20Rng::seed_from_u64(9);
            (0..50)
                .map(|_| perturb_rating(3, 0.3, &mut rng).unwrap())
                .collect()
        };
        let b: Vec<RatingTenths> = {
            let mut rng = ChaCha20Rng::seed_from_u64(9);
            (0..50)
                .map(|_| perturb_rating(3, 0.3, &mut rng).unwrap())
                .collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_rejects_bad_sigma() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(perturb_rating(3, -0.1, &mut rng).is_err());
        assert!(perturb_rating(3, f64::NAN, &mut rng).is_err());
    }

    /// Clamp-mass oracle: for score 5 and sigma 0.5, the result stays 5.0
    /// exactly when the draw is >= -0.05, i.e. with probability
    /// Phi(0.05/0.5) under the normal CDF. Monte-Carlo within 1%.
    #[test]
    fn perturb_boundary_mass_matches_normal_tail() {
        let sigma = 0.5;
        let n = 200_000;
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        let mut at_max = 0u32;
        for _ in 0..n {
            let r = perturb_rating(5, sigma, &mut rng).unwrap();
            assert!(r >= RatingTenths::MIN && r <= RatingTenths::MAX);
            if r == RatingTenths::MAX {
                at_max += 1;
            }
        }
        let observed = f64::from(at_max) / f64::from(n as u32);
        let normal = StatNormal::new(0.0, sigma).unwrap();
        let expected = 1.0 - normal.cdf(-0.05);
        assert!(
            (observed - expected).abs() < 0.01,
            "observed {observed:.4}, expected {expected:.4}"
        );
    }

    /// Interior-cell oracle: P(result == 3.2 | score 3) equals the normal
    /// mass of the interval [0.15, 0.25).
    #[test]
    fn perturb_interior_mass_matches_normal_interval() {
        let sigma = 0.3;
        let n = 200_000;
        let mut rng = ChaCha20Rng::seed_from_u64(321);
        let target = RatingTenths::from_tenths(32).unwrap();
        let mut hits = 0u32;
        for _ in 0..n {
            if perturb_rating(3, sigma, &mut rng).unwrap() == target {
                hits += 1;
            }
        }
        let observed = f64::from(hits) / f64::from(n as u32);
        let normal = StatNormal::new(0.0, sigma).unwrap();
        let expected = normal.cdf(0.25) - normal.cdf(0.15);
        assert!(
            (observed - expected).abs() < 0.01,
            "observed {observed:.4}, expected {expected:.4}"
        );
    }

    fn catalog(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i}")).collect()
    }

    #[test]
    fn negatives_are_distinct_and_non_interacted() {
        let cat = catalog(50);
        let interacted: BTreeSet<String> =
            ["3", "7", "11"].iter().map(|s| s.to_string()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let negs = sample_negatives(&cat, &interacted, 20, &mut rng).unwrap();
        assert_eq!(negs.len(), 20);
        let set: BTreeSet<&String> = negs.iter().collect();
        assert_eq!(set.len(), 20, "negatives must be distinct");
        for item in &negs {
            assert!(!interacted.contains(item), "{item} was interacted");
        }
    }

    #[test]
    fn negatives_error_reports_deficit() {
        let cat = catalog(10);
        let interacted: BTreeSet<String> = (0..8).map(|i| format!("{i}")).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        match sample_negatives(&cat, &interacted, 5, &mut rng) {
            Err(CorpusError::PoolTooSmall { needed, available }) => {
                assert_eq!((needed, available), (5, 2));
            }
            other => panic!("expected PoolTooSmall, got {other:?}"),
        }
    }

    /// Uniformity oracle: drawing without replacement includes each eligible
    /// item with probability n/N (hypergeometric marginal). Monte-Carlo
    /// against that closed form.
    #[test]
    fn negatives_are_uniform_without_replacement() {
        let cat = catalog(30);
        let interacted: BTreeSet<String> = ["0"].iter().map(|s| s.to_string()).collect();
        let pool_size = 29.0;
        let n = 5;
        let trials = 60_000;
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let mut hits: BTreeMap<String, u32> = BTreeMap::new();
        for _ in 0..trials {
            for item in sample_negatives(&cat, &interacted, n, &mut rng).unwrap() {
                *hits.entry(item).or_insert(0) += 1;
            }
        }
        let expected = n as f64 / pool_size;
        for (item, count) in hits {
            let observed = f64::from(count) / trials as f64;
            assert!(
                (observed - expected).abs() < 0.01,
                "item {item}: observed {observed:.4}, expected {expected:.4}"
            );
        }
    }

    #[test]
    fn negatives_independent_of_catalog_order() {
        let cat = catalog(40);
        let mut reversed = cat.clone();
        reversed.reverse();
        let interacted = BTreeSet::new();
        let a = sample_negatives(&cat, &interacted, 6, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        let b =
            sample_negatives(&reversed, &interacted, 6, &mut ChaCha20Rng::seed_from_u64(3))
                .unwrap();
        assert_eq!(a, b);
    }
}
