//! Exact tabular checks of belief-state properties.
//!
//! Distributions are explicit tables over fixed-length sequences of small
//! alphabets, so every conditional is an exact finite sum.

mod counterexamples;

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

pub use counterexamples::{counterexample_multitoken, counterexample_next, CounterexampleReport};

pub const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("negative or non-finite probability {0}")]
    BadProbability(f64),
    #[error("sequence {0:?} has the wrong length or an unknown symbol")]
    BadSequence(Vec<usize>),
    #[error("empty distribution")]
    Empty,
    #[error("prefix {0:?} has probability zero")]
    UnsupportedPrefix(Vec<usize>),
    #[error("prefix {0:?} has no encoding")]
    MissingEncoding(Vec<usize>),
}

/// Explicit distribution over sequences of length `t` on `symbols`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabularDist {
    pub symbols: Vec<char>,
    pub len: usize,
    /// Support only; every value is positive.
    pub probs: BTreeMap<Vec<usize>, f64>,
}

impl TabularDist {
    pub fn new(symbols: Vec<char>, len: usize, entries: Vec<(Vec<usize>, f64)>) -> Result<Self, OracleError> {
        let mut probs = BTreeMap::new();
        let mut total = 0.0;
        for (seq, p) in entries {
            if !(p.is_finite() && p >= 0.0) {
                return Err(OracleError::BadProbability(p));
            }
            if seq.len() != len || seq.iter().any(|&s| s >= symbols.len()) {
                return Err(OracleError::BadSequence(seq));
            }
            total += p;
            if p > 0.0 {
                *probs.entry(seq).or_insert(0.0) += p;
            }
        }
        if probs.is_empty() {
            return Err(OracleError::Empty);
        }
        if (total - 1.0).abs() > TOLERANCE {
            return Err(OracleError::NotNormalized(total));
        }
        Ok(TabularDist { symbols, len, probs })
    }

    /// Uniform over the given strings; the alphabet is their sorted characters.
    pub fn uniform(words: &[&str]) -> Result<Self, OracleError> {
        let mut symbols: Vec<char> = words.iter().flat_map(|w| w.chars()).collect();
        symbols.sort_unstable();
        symbols.dedup();
        let len = words.first().map_or(0, |w| w.chars().count());
        let p = 1.0 / words.len() as f64;
        let entries = words.iter().map(|w| (w.chars().map(|c| symbols.binary_search(&c).unwrap()).collect(), p)).collect();
        Self::new(symbols, len, entries)
    }

    /// Random weights on a random nonempty subset of all sequences.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, alphabet: usize, len: usize) -> Self {
        let symbols: Vec<char> = (0..alphabet).map(|i| (b'a' + i as u8) as char).collect();
        let all = all_sequences(alphabet, len);
        let keep = rng.random_range(0.2..=1.0);
        let mut weights: Vec<(Vec<usize>, f64)> = Vec::new();
        for s in all {
            if rng.random_bool(keep) {
                weights.push((s, rng.random_range(0.05..1.0)));
            }
        }
        if weights.is_empty() {
            weights.push((vec![0; len], 1.0));
        }
        let total: f64 = weights.iter().map(|w| w.1).sum();
        for w in &mut weights {
            w.1 /= total;
        }
        // Push the rounding residue onto the last entry so the sum is exact to 1e-12.
        let residue = 1.0 - weights.iter().map(|w| w.1).sum::<f64>();
        weights.last_mut().unwrap().1 += residue;
        Self::new(symbols, len, weights).expect("normalized by construction")
    }

    pub fn alphabet(&self) -> usize {
        self.symbols.len()
    }

    pub fn render(&self, seq: &[usize]) -> String {
        seq.iter().map(|&s| self.symbols[s]).collect()
    }

    pub fn parse(&self, word: &str) -> Vec<usize> {
        word.chars().map(|c| self.symbols.iter().position(|&s| s == c).expect("known symbol")).collect()
    }

    /// `P(x starts with prefix and ends with suffix)`.
    pub fn mass(&self, prefix: &[usize], suffix: &[usize]) -> f64 {
        if prefix.len() + suffix.len() > self.len {
            return 0.0;
        }
        self.probs.iter().filter(|(x, _)| x.starts_with(prefix) && x.ends_with(suffix)).map(|(_, &p)| p).sum()
    }

    /// `Pr(x_{t+1:T} | x_{1:t} = prefix)` over the support.
    pub fn completions(&self, prefix: &[usize]) -> Result<BTreeMap<Vec<usize>, f64>, OracleError> {
        let z = self.mass(prefix, &[]);
        if z <= 0.0 {
            return Err(OracleError::UnsupportedPrefix(prefix.to_vec()));
        }
        Ok(self
            .probs
            .iter()
            .filter(|(x, _)| x.starts_with(prefix))
            .map(|(x, &p)| (x[prefix.len()..].to_vec(), p / z))
            .collect())
    }

    /// Proper prefixes of supported sequences, shortest first, including the empty one.
    pub fn supported_prefixes(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for t in 0..self.len {
            let mut level: Vec<Vec<usize>> = self.probs.keys().map(|x| x[..t].to_vec()).collect();
            level.dedup();
            out.extend(level);
        }
        out
    }
}

/// Every sequence of length `len` over `alphabet` symbols, lexicographic.
pub fn all_sequences(alphabet: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..alphabet).map(move |a| {
                    let mut n = s.clone();
                    n.push(a);
                    n
                })
            })
            .collect();
    }
    out
}

/// Exact next and previous conditionals for every supported prefix/suffix split.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealBst {
    pub dist: TabularDist,
    /// `Pr(x_{t+1} | prefix, suffix)`.
    pub next: BTreeMap<(Vec<usize>, Vec<usize>), Vec<f64>>,
    /// `Pr(x_{T-|suffix|} | prefix, suffix)`.
    pub prev: BTreeMap<(Vec<usize>, Vec<usize>), Vec<f64>>,
}

pub fn ideal_bst_from_dist(dist: &TabularDist) -> IdealBst {
    let n = dist.len;
    let a = dist.alphabet();
    let mut next: BTreeMap<(Vec<usize>, Vec<usize>), Vec<f64>> = BTreeMap::new();
    let mut prev: BTreeMap<(Vec<usize>, Vec<usize>), Vec<f64>> = BTreeMap::new();
    for (x, &p) in &dist.probs {
        for t in 0..n {
            for s in t + 1..=n {
                let key = (x[..t].to_vec(), x[s..].to_vec());
                next.entry(key.clone()).or_insert_with(|| vec![0.0; a])[x[t]] += p;
                prev.entry(key).or_insert_with(|| vec![0.0; a])[x[s - 1]] += p;
            }
        }
    }
    for table in [&mut next, &mut prev] {
        for row in table.values_mut() {
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
    }
    IdealBst { dist: dist.clone(), next, prev }
}

impl IdealBst {
    pub fn next_prob(&self, prefix: &[usize], suffix: &[usize]) -> Option<&[f64]> {
        self.next.get(&(prefix.to_vec(), suffix.to_vec())).map(Vec::as_slice)
    }

    pub fn prev_prob(&self, prefix: &[usize], suffix: &[usize]) -> Option<&[f64]> {
        self.prev.get(&(prefix.to_vec(), suffix.to_vec())).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decomposition {
    /// `(completion, product of previous-head factors, exact conditional)`.
    pub rows: Vec<(Vec<usize>, f64, f64)>,
    pub max_abs_error: f64,
}

impl Decomposition {
    pub fn holds(&self) -> bool {
        self.max_abs_error <= TOLERANCE
    }
}

/// Samples the completion of `prefix` backwards with the previous head:
/// `T_p(x_T | f_t, B(∅)) * T_p(x_{T-1} | f_t, B(x_T)) * ... * T_p(x_{t+1} | f_t, B(x_{t+2:T}))`,
/// evaluated exactly for every completion and compared with `Pr(x_{t+1:T} | prefix)`.
pub fn belief_decompose(ib: &IdealBst, prefix: &[usize]) -> Result<Decomposition, OracleError> {
    let exact = ib.dist.completions(prefix)?;
    let rest = ib.dist.len - prefix.len();
    let mut rows = Vec::new();
    let mut max_err: f64 = 0.0;
    for c in all_sequences(ib.dist.alphabet(), rest) {
        let mut prod = 1.0;
        for m in (0..rest).rev() {
            match ib.prev_prob(prefix, &c[m + 1..]) {
                Some(dist) => prod *= dist[c[m]],
                None => {
                    prod = 0.0;
                    break;
                }
            }
            if prod == 0.0 {
                break;
            }
        }
        let e = exact.get(&c).copied().unwrap_or(0.0);
        max_err = max_err.max((prod - e).abs());
        rows.push((c, prod, e));
    }
    Ok(Decomposition { rows, max_abs_error: max_err })
}

/// Prefix encodings plus optional output heads keyed by encoding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncodingTable {
    pub encodings: BTreeMap<Vec<usize>, Vec<i64>>,
    /// `heads[j]` maps an encoding to a distribution over `x_{t+j+1}`.
    pub heads: Vec<BTreeMap<Vec<i64>, Vec<f64>>>,
}

impl EncodingTable {
    /// Each supported prefix gets its own one-element vector.
    pub fn injective(dist: &TabularDist) -> Self {
        let encodings = dist.supported_prefixes().into_iter().enumerate().map(|(i, p)| (p, vec![i as i64])).collect();
        EncodingTable { encodings, heads: Vec::new() }
    }

    pub fn constant(dist: &TabularDist) -> Self {
        let encodings = dist.supported_prefixes().into_iter().map(|p| (p, vec![0])).collect();
        EncodingTable { encodings, heads: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Verdict {
    BeliefState,
    /// Two same-length prefixes share an encoding but not their futures.
    NotBeliefState { witness: (Vec<usize>, Vec<usize>) },
}

fn same_distribution(a: &BTreeMap<Vec<usize>, f64>, b: &BTreeMap<Vec<usize>, f64>) -> bool {
    let keys: std::collections::BTreeSet<&Vec<usize>> = a.keys().chain(b.keys()).collect();
    keys.into_iter().all(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs() <= TOLERANCE)
}

/// An encoding is a belief state iff equal encodings of same-length supported
/// prefixes always come with equal completion distributions.
pub fn verify_belief_state(enc: &EncodingTable, dist: &TabularDist) -> Result<Verdict, OracleError> {
    let prefixes = dist.supported_prefixes();
    let mut seen: BTreeMap<(usize, Vec<i64>), (Vec<usize>, BTreeMap<Vec<usize>, f64>)> = BTreeMap::new();
    for p in prefixes {
        let e = enc.encodings.get(&p).ok_or_else(|| OracleError::MissingEncoding(p.clone()))?;
        let completions = dist.completions(&p)?;
        match seen.get(&(p.len(), e.clone())) {
            Some((q, other)) => {
                if !same_distribution(other, &completions) {
                    return Ok(Verdict::NotBeliefState { witness: (q.clone(), p) });
                }
            }
            None => {
                seen.insert((p.len(), e.clone()), (p, completions));
            }
        }
    }
    Ok(Verdict::BeliefState)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unnormalized() {
        let r = TabularDist::new(vec!['a', 'b'], 1, vec![(vec![0], 0.5), (vec![1], 0.4)]);
        assert!(matches!(r, Err(OracleError::NotNormalized(_))));
        let r = TabularDist::new(vec!['a'], 1, vec![(vec![0, 0], 1.0)]);
        assert!(matches!(r, Err(OracleError::BadSequence(_))));
    }

    #[test]
    fn ideal_conditionals_on_aca_bcb() {
        let d = TabularDist::uniform(&["ACA", "BCB"]).unwrap();
        let ib = ideal_bst_from_dist(&d);
        let (a, c) = (d.parse("A"), d.parse("C"));
        assert_eq!(ib.next_prob(&a, &a).unwrap()[c[0]], 1.0);
        assert_eq!(ib.prev_prob(&[], &d.parse("CA")).unwrap()[a[0]], 1.0);
    }

    #[test]
    fn single_sequence_is_deterministic() {
        let d = TabularDist::uniform(&["XYZ"]).unwrap();
        let ib = ideal_bst_from_dist(&d);
        for row in ib.next.values().chain(ib.prev.values()) {
            assert!(row.iter().all(|&p| p == 0.0 || p == 1.0));
        }
    }

    #[test]
    fn unsupported_prefix_is_an_error() {
        let d = TabularDist::uniform(&["ACA", "BCB"]).unwrap();
        let ib = ideal_bst_from_dist(&d);
        assert!(matches!(belief_decompose(&ib, &d.parse("C")), Err(OracleError::UnsupportedPrefix(_))));
    }
}
