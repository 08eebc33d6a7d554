//! Training-free checks: belief-state oracles and the parity construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::oracle::{
    belief_decompose, counterexample_multitoken, counterexample_next, ideal_bst_from_dist, verify_belief_state,
    EncodingTable, TabularDist, Verdict,
};
use crate::stargraph::parity_to_stargraph;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParitySweep {
    pub max_n: usize,
    pub instances: usize,
    pub exceptions: usize,
}

/// Every bit string of length `2..=max_n`.
pub fn parity_sweep(max_n: usize) -> ParitySweep {
    let mut r = ParitySweep { max_n, instances: 0, exceptions: 0 };
    for n in 2..=max_n {
        for mask in 0u32..(1 << n) {
            let bits: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
            let ok = parity_to_stargraph(&bits).is_ok_and(|p| p.first_vertex() == p.expected_first_vertex());
            r.instances += 1;
            r.exceptions += usize::from(!ok);
        }
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecomposeSweep {
    pub cases: usize,
    pub prefixes: usize,
    pub max_abs_error: f64,
    pub injective_belief_states: usize,
}

/// Random tabular distributions with alphabet `<= 4` and length `<= 5`;
/// every supported prefix is decomposed.
pub fn decompose_sweep(cases: usize, seed: u64) -> DecomposeSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = DecomposeSweep { cases, prefixes: 0, max_abs_error: 0.0, injective_belief_states: 0 };
    for _ in 0..cases {
        let alphabet = rng.random_range(2..=4);
        let len = rng.random_range(1..=5);
        let d = TabularDist::random(&mut rng, alphabet, len);
        let ib = ideal_bst_from_dist(&d);
        for p in d.supported_prefixes() {
            let dec = belief_decompose(&ib, &p).expect("supported prefix");
            r.prefixes += 1;
            r.max_abs_error = r.max_abs_error.max(dec.max_abs_error);
        }
        if verify_belief_state(&EncodingTable::injective(&d), &d) == Ok(Verdict::BeliefState) {
            r.injective_belief_states += 1;
        }
    }
    r
}

pub fn verify_report(seed: u64) -> VerifyReport {
    let mut checks = Vec::new();

    let sweep = decompose_sweep(100, seed);
    checks.push(Check {
        name: "belief-decomposition".into(),
        pass: sweep.max_abs_error <= crate::oracle::TOLERANCE && sweep.injective_belief_states == sweep.cases,
        detail: serde_json::to_value(sweep).expect("serializable"),
    });

    for (name, r, witness) in [
        ("counterexample-next", counterexample_next(), ("A", "B")),
        ("counterexample-multitoken", counterexample_multitoken(), ("D", "S")),
    ] {
        let got = r.witness_text();
        let mut pass = r.heads_match && got == Some((witness.0.to_string(), witness.1.to_string()));
        if name == "counterexample-next" {
            pass &= r.per_token_bits() == [1.0, 0.0, 0.0];
        }
        checks.push(Check {
            name: name.into(),
            pass,
            detail: serde_json::json!({
                "heads_match": r.heads_match,
                "witness": got,
                "head_bits": r.head_bits,
            }),
        });
    }

    let parity = parity_sweep(10);
    checks.push(Check {
        name: "parity-reduction".into(),
        pass: parity.exceptions == 0,
        detail: serde_json::to_value(parity).expect("serializable"),
    });
    VerifyReport { checks }
}
