use std::time::Instant;

use bst_core::stargraph::{
    bfs_path, detokenize, fim_prompt, fim_tokens, generate_graph, is_valid, make_baseline_example,
    multi_token_example, parity_to_stargraph, prompt_len, prompt_tokens, token_count, tokenize, BaselineKind,
    StarGraphError, Vocab,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Follows the bit rule from `±1` for `n - 1` layers and reports the sign of
/// the start that lands on `+n`.
fn walk_first_vertex(bits: &[u8]) -> i64 {
    for start in [1i64, -1] {
        let mut sign = start;
        for &b in &bits[1..] {
            if b == 1 {
                sign = -sign;
            }
        }
        if sign == 1 {
            return start;
        }
    }
    unreachable!("one of the two starts reaches +n")
}

proptest! {
    #[test]
    fn graphs_round_trip(seed in any::<u64>(), d in 2usize..5, l in 2usize..7, extra in 0usize..10) {
        let n = d * (l - 1) + 1 + extra;
        let v = Vocab::new(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = generate_graph(d, l, n, &mut rng).unwrap();
        prop_assert!(is_valid(&g));
        let x = tokenize(&g, &v);
        prop_assert_eq!(x.len(), token_count(d, l));
        let prompt = prompt_tokens(&g, &v);
        prop_assert_eq!(&x[..prompt_len(d, l)], prompt.as_slice());
        prop_assert!(x.iter().all(|&t| t < v.size()));
        prop_assert_eq!(detokenize(&x, &v).unwrap(), g.clone());
        prop_assert_eq!(bfs_path(&g.edges, g.start, g.goal).unwrap(), g.path.clone());
    }

    #[test]
    fn baseline_examples_are_well_formed(seed in any::<u64>(), l in 3usize..6) {
        let v = Vocab::new(20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = generate_graph(2, l, 20, &mut rng).unwrap();
        let plen = prompt_len(2, l);

        let fwd = make_baseline_example(BaselineKind::Forward, &g, &v, &mut rng).unwrap();
        prop_assert_eq!(&fwd.tokens[1..], &tokenize(&g, &v)[..tokenize(&g, &v).len() - 1]);

        let aug = make_baseline_example(BaselineKind::DataAug, &g, &v, &mut rng).unwrap();
        let replaced = aug.tokens[1 + plen - 2];
        prop_assert!(g.path[1..l - 1].contains(&replaced));

        let mt = multi_token_example(&g, &v);
        let targets: Vec<usize> = mt.targets.iter().flatten().copied().collect();
        prop_assert_eq!(targets, g.path.clone());
        prop_assert_eq!(mt.tokens.len(), mt.targets.len());

        for j in 2..=l {
            let f = fim_tokens(&g, &v, j);
            prop_assert_eq!(&f[plen..plen + l - j + 1], &g.path[j - 1..]);
        }
        let p = fim_prompt(&g, &v);
        prop_assert_eq!(&p[plen..], &[g.goal, v.sep_section()]);
    }
}

#[test]
fn parity_reduction_is_exhaustively_correct() {
    let started = Instant::now();
    let mut checked = 0;
    for n in 2..=10usize {
        for mask in 0u32..1 << n {
            let bits: Vec<u8> = (0..n).map(|i| (mask >> i & 1) as u8).collect();
            let inst = parity_to_stargraph(&bits).unwrap();
            assert_eq!(inst.first_vertex(), walk_first_vertex(&bits), "bits {bits:?}");
            assert_eq!(inst.first_vertex(), inst.expected_first_vertex());
            assert_eq!(*inst.path.last().unwrap(), n as i64);
            checked += 1;
        }
    }
    assert_eq!(checked, (2..=10).map(|n| 1usize << n).sum::<usize>());
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn degenerate_inputs_are_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(generate_graph(1, 5, 20, &mut rng), Err(StarGraphError::BadShape { d: 1, l: 5 }));
    assert!(matches!(generate_graph(3, 5, 12, &mut rng), Err(StarGraphError::UniverseTooSmall { .. })));
    assert_eq!(parity_to_stargraph(&[1]), Err(StarGraphError::ParityTooShort(1)));
    let g = generate_graph(2, 2, 5, &mut rng).unwrap();
    assert_eq!(
        make_baseline_example(BaselineKind::DataAug, &g, &Vocab::new(5), &mut rng),
        Err(StarGraphError::NoIntermediate(2))
    );
    assert!(detokenize(&[1, 2, 3], &Vocab::new(5)).is_err());
    assert!("teacherless".parse::<BaselineKind>().is_err());
}
