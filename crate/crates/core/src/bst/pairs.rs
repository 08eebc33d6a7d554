use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BstError;

/// Prefix `x[..i]` and suffix `x[j-1..]` in 1-based terms: the prefix is
/// `x_{1:i}`, the suffix `x_{j:T}`. `i = 0` is the empty prefix and
/// `j = T + 1` the empty suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
}

/// All `(i, j)` with `0 <= i <= T-1`, `i + 2 <= j <= T + 1`, in lexicographic order.
pub fn enumerate_pairs(t: usize) -> Result<Vec<Pair>, BstError> {
    if t == 0 {
        return Err(BstError::EmptySequence);
    }
    let mut out = Vec::with_capacity(t * (t + 1) / 2);
    for i in 0..t {
        for j in i + 2..=t + 1 {
            out.push(Pair { i, j });
        }
    }
    Ok(out)
}

/// Uniform sample without replacement of `max(1, round(fraction * len))`
/// pairs, returned in their original order.
pub fn subsample_pairs<R: Rng + ?Sized>(pairs: &[Pair], fraction: f64, rng: &mut R) -> Result<Vec<Pair>, BstError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(BstError::BadFraction(fraction));
    }
    if pairs.is_empty() {
        return Err(BstError::NoPairs);
    }
    let k = ((fraction * pairs.len() as f64).round() as usize).clamp(1, pairs.len());
    if k == pairs.len() {
        return Ok(pairs.to_vec());
    }
    let mut idx = rand::seq::index::sample(rng, pairs.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pairs[i]).collect())
}

/// A sequence together with the pairs scored on it and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x: Vec<usize>,
    pub pairs: Vec<Pair>,
    /// `x_{i+1}` per pair.
    pub next: Vec<usize>,
    /// `x_{j-1}` per pair.
    pub prev: Vec<usize>,
}

impl PairBatch {
    pub fn new(x: &[usize], pairs: Vec<Pair>, vocab: usize) -> Result<Self, BstError> {
        let t = x.len();
        if t == 0 {
            return Err(BstError::EmptySequence);
        }
        if let Some(&label) = x.iter().find(|&&v| v >= vocab) {
            return Err(BstError::LabelOutOfRange { label, vocab });
        }
        let mut next = Vec::with_capacity(pairs.len());
        let mut prev = Vec::with_capacity(pairs.len());
        for p in &pairs {
            if p.i >= t || p.j < p.i + 2 || p.j > t + 1 {
                return Err(BstError::InvalidPair { i: p.i, j: p.j, len: t });
            }
            next.push(x[p.i]);
            prev.push(x[p.j - 2]);
        }
        Ok(PairBatch { x: x.to_vec(), pairs, next, prev })
    }

    pub fn full(x: &[usize], vocab: usize) -> Result<Self, BstError> {
        Self::new(x, enumerate_pairs(x.len())?, vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_enumerations() {
        assert_eq!(enumerate_pairs(1).unwrap(), vec![Pair { i: 0, j: 2 }]);
        let two: Vec<(usize, usize)> = enumerate_pairs(2).unwrap().iter().map(|p| (p.i, p.j)).collect();
        assert_eq!(two, vec![(0, 2), (0, 3), (1, 3)]);
        assert_eq!(enumerate_pairs(100).unwrap().len(), 5050);
        assert!(enumerate_pairs(0).is_err());
    }

    #[test]
    fn single_token_labels() {
        let b = PairBatch::full(&[5], 8).unwrap();
        assert_eq!((b.next[0], b.prev[0]), (5, 5));
    }

    #[test]
    fn subsample_sizes() {
        let pairs = enumerate_pairs(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(subsample_pairs(&pairs, 0.02, &mut rng).unwrap().len(), 101);
        assert_eq!(subsample_pairs(&pairs, 1.0, &mut rng).unwrap(), pairs);
        assert_eq!(subsample_pairs(&pairs[..3], 0.01, &mut rng).unwrap().len(), 1);
        assert!(subsample_pairs(&pairs, 0.0, &mut rng).is_err());
        assert!(subsample_pairs(&pairs, 1.5, &mut rng).is_err());
        assert!(matches!(subsample_pairs(&[], 0.5, &mut rng), Err(BstError::NoPairs)));
    }

    #[test]
    fn invalid_pairs_rejected() {
        assert!(PairBatch::new(&[1, 2], vec![Pair { i: 0, j: 1 }], 4).is_err());
        assert!(PairBatch::new(&[1, 2], vec![Pair { i: 2, j: 4 }], 4).is_err());
        assert!(PairBatch::new(&[1, 9], vec![Pair { i: 0, j: 2 }], 4).is_err());
    }
}
