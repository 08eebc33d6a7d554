use std::collections::BTreeMap;

use serde::Serialize;

use super::{verify_belief_state, EncodingTable, OracleError, TabularDist, Verdict, TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub dist: TabularDist,
    pub table: EncodingTable,
    /// Every head entry equals the exact marginal it stands for.
    pub heads_match: bool,
    /// `head_bits[j][t]`: expected log loss in bits of head `j+1` at prefix length `t`.
    pub head_bits: Vec<Vec<f64>>,
    pub verdict: Verdict,
}

impl CounterexampleReport {
    /// Expected next-token log loss per position, in bits.
    pub fn per_token_bits(&self) -> &[f64] {
        &self.head_bits[0]
    }

    pub fn witness_text(&self) -> Option<(String, String)> {
        match &self.verdict {
            Verdict::BeliefState => None,
            Verdict::NotBeliefState { witness: (a, b) } => Some((self.dist.render(a), self.dist.render(b))),
        }
    }
}

fn point(alphabet: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; alphabet];
    v[at] = 1.0;
    v
}

fn uniform2(alphabet: usize, a: usize, b: usize) -> Vec<f64> {
    let mut v = vec![0.0; alphabet];
    v[a] = 0.5;
    v[b] = 0.5;
    v
}

/// `Pr(x_{t+j} | prefix)` with `j` counted from 1.
fn marginal(dist: &TabularDist, prefix: &[usize], j: usize) -> Result<Vec<f64>, OracleError> {
    let mut out = vec![0.0; dist.alphabet()];
    for (c, p) in dist.completions(prefix)? {
        out[c[j - 1]] += p;
    }
    Ok(out)
}

fn check_heads(dist: &TabularDist, table: &EncodingTable) -> Result<(bool, Vec<Vec<f64>>), OracleError> {
    let mut ok = true;
    let mut bits = vec![vec![0.0; dist.len]; table.heads.len()];
    for p in dist.supported_prefixes() {
        let t = p.len();
        let enc = table.encodings.get(&p).ok_or_else(|| OracleError::MissingEncoding(p.clone()))?;
        let weight = dist.mass(&p, &[]);
        for (j, head) in table.heads.iter().enumerate() {
            if t + j + 1 > dist.len {
                break;
            }
            let exact = marginal(dist, &p, j + 1)?;
            let Some(pred) = head.get(enc) else {
                ok = false;
                continue;
            };
            ok &= pred.iter().zip(&exact).all(|(a, b)| (a - b).abs() <= TOLERANCE);
            let mut loss = 0.0;
            for (s, &q) in exact.iter().enumerate() {
                if q > 0.0 {
                    loss -= q * pred[s].log2();
                }
            }
            bits[j][t] += weight * loss;
        }
    }
    for row in &mut bits {
        row.iter_mut().for_each(|v| *v += 0.0);
    }
    Ok((ok, bits))
}

fn report(dist: TabularDist, encodings: &[(&str, [i64; 2])], heads: Vec<Vec<([i64; 2], Vec<f64>)>>) -> CounterexampleReport {
    let encodings: BTreeMap<Vec<usize>, Vec<i64>> =
        encodings.iter().map(|(w, e)| (dist.parse(w), e.to_vec())).collect();
    let heads = heads.into_iter().map(|h| h.into_iter().map(|(e, d)| (e.to_vec(), d)).collect()).collect();
    let table = EncodingTable { encodings, heads };
    let (heads_match, head_bits) = check_heads(&dist, &table).expect("construction is total on its support");
    let verdict = verify_belief_state(&table, &dist).expect("construction is total on its support");
    CounterexampleReport { dist, table, heads_match, head_bits, verdict }
}

/// Uniform over `{ACA, BCB}` with an optimal next-token model whose
/// encoder merges `A` and `B`.
pub fn counterexample_next() -> CounterexampleReport {
    let dist = TabularDist::uniform(&["ACA", "BCB"]).expect("valid");
    let (a, b, c) = (0, 1, 2);
    let encodings = [("", [-1, -1]), ("A", [-1, 1]), ("B", [-1, 1]), ("AC", [1, -1]), ("BC", [1, 1])];
    let head = vec![
        ([-1, -1], uniform2(3, a, b)),
        ([-1, 1], point(3, c)),
        ([1, -1], point(3, a)),
        ([1, 1], point(3, b)),
    ];
    report(dist, &encodings, vec![head])
}

/// Uniform over `{DAA, DBB, SAB, SBA}` with an optimal multi-token model
/// whose encoder merges `D` and `S`.
pub fn counterexample_multitoken() -> CounterexampleReport {
    let dist = TabularDist::uniform(&["DAA", "DBB", "SAB", "SBA"]).expect("valid");
    let (a, b, d, s) = (0, 1, 2, 3);
    let encodings = [
        ("", [-1, -1]),
        ("D", [-1, 1]),
        ("S", [-1, 1]),
        ("DA", [1, -1]),
        ("SB", [1, -1]),
        ("DB", [1, 1]),
        ("SA", [1, 1]),
    ];
    let t1 = vec![
        ([-1, -1], uniform2(4, s, d)),
        ([-1, 1], uniform2(4, a, b)),
        ([1, -1], point(4, a)),
        ([1, 1], point(4, b)),
    ];
    let t2 = vec![([-1, -1], uniform2(4, a, b)), ([-1, 1], uniform2(4, a, b))];
    let t3 = vec![([-1, -1], uniform2(4, a, b))];
    report(dist, &encodings, vec![t1, t2, t3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_counterexample() {
        let r = counterexample_next();
        assert!(r.heads_match);
        assert_eq!(r.per_token_bits(), &[1.0, 0.0, 0.0]);
        assert_eq!(r.witness_text(), Some(("A".into(), "B".into())));
    }

    #[test]
    fn multitoken_counterexample() {
        let r = counterexample_multitoken();
        assert!(r.heads_match);
        assert_eq!(r.witness_text(), Some(("D".into(), "S".into())));
        let d = r.dist.parse("D");
        let c = r.dist.completions(&d).unwrap();
        assert_eq!(c, BTreeMap::from([(r.dist.parse("AA"), 0.5), (r.dist.parse("BB"), 0.5)]));
    }
}
