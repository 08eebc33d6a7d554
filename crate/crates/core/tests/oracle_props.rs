use std::collections::BTreeMap;

use bst_core::oracle::{
    all_sequences, belief_decompose, counterexample_multitoken, counterexample_next, ideal_bst_from_dist,
    verify_belief_state, EncodingTable, TabularDist, Verdict, TOLERANCE,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dist_strategy() -> impl Strategy<Value = TabularDist> {
    (any::<u64>(), 2usize..=4, 1usize..=5).prop_map(|(seed, a, len)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TabularDist::random(&mut rng, a, len)
    })
}

/// `Pr(x_{t+1:T} = c | x_{1:t} = prefix)` by direct summation.
fn conditional(d: &TabularDist, prefix: &[usize], c: &[usize]) -> f64 {
    let z: f64 = d.probs.iter().filter(|(x, _)| x.starts_with(prefix)).map(|(_, p)| p).sum();
    let full: Vec<usize> = prefix.iter().chain(c).copied().collect();
    d.probs.get(&full).copied().unwrap_or(0.0) / z
}

/// `Pr(x_m = v | x_{1:t} = prefix, x_{m+1:T} = suffix)` with `m = T - |suffix|`.
fn prev_conditional(d: &TabularDist, prefix: &[usize], suffix: &[usize], v: usize) -> Option<f64> {
    let matches = |x: &Vec<usize>| x.starts_with(prefix) && x.ends_with(suffix);
    let z: f64 = d.probs.iter().filter(|(x, _)| matches(x)).map(|(_, p)| p).sum();
    if z == 0.0 {
        return None;
    }
    let m = d.len - suffix.len() - 1;
    let num: f64 = d.probs.iter().filter(|(x, _)| matches(x) && x[m] == v).map(|(_, p)| p).sum();
    Some(num / z)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn decomposition_matches_exact_conditionals(d in dist_strategy()) {
        let ib = ideal_bst_from_dist(&d);
        for p in d.supported_prefixes() {
            let dec = belief_decompose(&ib, &p).unwrap();
            prop_assert!(dec.holds(), "prefix {:?} error {}", p, dec.max_abs_error);
            prop_assert_eq!(dec.rows.len(), d.alphabet().pow((d.len - p.len()) as u32));
            for (c, product, exact) in &dec.rows {
                let truth = conditional(&d, &p, c);
                prop_assert!((exact - truth).abs() <= TOLERANCE);
                prop_assert!((product - truth).abs() <= TOLERANCE);
            }
        }
    }

    #[test]
    fn previous_head_is_the_exact_conditional(d in dist_strategy()) {
        let ib = ideal_bst_from_dist(&d);
        for ((prefix, suffix), row) in &ib.prev {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= TOLERANCE);
            for (v, &q) in row.iter().enumerate() {
                let truth = prev_conditional(&d, prefix, suffix, v).unwrap();
                prop_assert!((q - truth).abs() <= TOLERANCE);
            }
        }
    }

    #[test]
    fn injective_encodings_are_belief_states(d in dist_strategy()) {
        prop_assert_eq!(verify_belief_state(&EncodingTable::injective(&d), &d).unwrap(), Verdict::BeliefState);
    }

    #[test]
    fn constant_encoding_verdict_matches_brute_force(d in dist_strategy()) {
        let prefixes = d.supported_prefixes();
        let futures = |p: &Vec<usize>| -> Vec<f64> {
            all_sequences(d.alphabet(), d.len - p.len()).iter().map(|c| conditional(&d, p, c)).collect()
        };
        let mut by_len: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut expected = true;
        for p in &prefixes {
            let f = futures(p);
            match by_len.get(&p.len()) {
                Some(g) => expected &= g.iter().zip(&f).all(|(a, b)| (a - b).abs() <= TOLERANCE),
                None => {
                    by_len.insert(p.len(), f);
                }
            }
        }
        let got = verify_belief_state(&EncodingTable::constant(&d), &d).unwrap();
        prop_assert_eq!(got == Verdict::BeliefState, expected);
        if let Verdict::NotBeliefState { witness: (a, b) } = got {
            prop_assert_eq!(a.len(), b.len());
            prop_assert_ne!(futures(&a), futures(&b));
        }
    }
}

#[test]
fn next_token_counterexample_tables() {
    let r = counterexample_next();
    let d = &r.dist;
    // Pr(x1) is uniform over {A, B}; x2 = C always; x3 copies x1.
    assert_eq!(d.completions(&[]).unwrap().len(), 2);
    for w in ["ACA", "BCB"] {
        assert!((d.probs[&d.parse(w)] - 0.5).abs() <= TOLERANCE);
    }
    assert!(r.heads_match);
    assert_eq!(r.per_token_bits(), [1.0, 0.0, 0.0]);
    assert_eq!(r.witness_text(), Some(("A".to_string(), "B".to_string())));
    let ib = ideal_bst_from_dist(d);
    for p in ["A", "B"] {
        let dec = belief_decompose(&ib, &d.parse(p)).unwrap();
        assert!(dec.holds());
    }
}

#[test]
fn multi_token_counterexample_tables() {
    let r = counterexample_multitoken();
    let d = &r.dist;
    let c = d.completions(&d.parse("D")).unwrap();
    let rendered: BTreeMap<String, f64> = c.iter().map(|(k, v)| (d.render(k), *v)).collect();
    assert_eq!(rendered, BTreeMap::from([("AA".to_string(), 0.5), ("BB".to_string(), 0.5)]));
    let c = d.completions(&d.parse("S")).unwrap();
    let rendered: BTreeMap<String, f64> = c.iter().map(|(k, v)| (d.render(k), *v)).collect();
    assert_eq!(rendered, BTreeMap::from([("AB".to_string(), 0.5), ("BA".to_string(), 0.5)]));
    assert!(r.heads_match);
    assert_eq!(r.witness_text(), Some(("D".to_string(), "S".to_string())));
}

#[test]
fn malformed_distributions_are_rejected() {
    assert!(TabularDist::new(vec!['A', 'B'], 1, vec![(vec![0], 0.7)]).is_err());
    assert!(TabularDist::new(vec!['A', 'B'], 1, vec![(vec![0], 1.5), (vec![1], -0.5)]).is_err());
    assert!(TabularDist::new(vec!['A', 'B'], 2, vec![(vec![0], 1.0)]).is_err());
    let d = TabularDist::uniform(&["AB", "BA"]).unwrap();
    assert!(d.completions(&d.parse("AA")[..2]).is_err());
}
