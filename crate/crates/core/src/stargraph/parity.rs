use std::collections::{HashMap, VecDeque};

use super::StarGraphError;

/// Star graph on vertices `-n..=n` whose start arm encodes the parity of
/// `bits[1..n]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityInstance {
    pub bits: Vec<u8>,
    pub n: usize,
    /// Undirected edges.
    pub edges: Vec<(i64, i64)>,
    pub target: i64,
    /// Path from the center `0` to `n` found by breadth-first search.
    pub path: Vec<i64>,
}

impl ParityInstance {
    pub fn first_vertex(&self) -> i64 {
        self.path[1]
    }

    /// Parity of the bits the construction reads, `bits[1..n]`.
    pub fn consumed_parity(&self) -> u8 {
        self.bits[1..self.n].iter().fold(0, |p, &b| p ^ (b & 1))
    }

    /// `+1` when the consumed bits have even parity, `-1` when odd.
    pub fn expected_first_vertex(&self) -> i64 {
        if self.consumed_parity() == 0 {
            1
        } else {
            -1
        }
    }
}

pub fn parity_to_stargraph(bits: &[u8]) -> Result<ParityInstance, StarGraphError> {
    let n = bits.len();
    if n < 2 {
        return Err(StarGraphError::ParityTooShort(n));
    }
    let mut edges = vec![(0, 1), (0, -1)];
    for (i, &b) in bits.iter().enumerate().take(n).skip(1) {
        let i = i as i64;
        if b & 1 == 0 {
            edges.push((i, i + 1));
            edges.push((-i, -i - 1));
        } else {
            edges.push((i, -i - 1));
            edges.push((-i, i + 1));
        }
    }
    let target = n as i64;
    let path = bfs(&edges, 0, target).ok_or_else(|| StarGraphError::Malformed("target unreachable".into()))?;
    Ok(ParityInstance { bits: bits.to_vec(), n, edges, target, path })
}

fn bfs(edges: &[(i64, i64)], from: i64, to: i64) -> Option<Vec<i64>> {
    let mut adj: HashMap<i64, Vec<i64>> = HashMap::new();
    for &(a, b) in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut parent = HashMap::from([(from, from)]);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        if u == to {
            let mut path = vec![to];
            while *path.last().unwrap() != from {
                path.push(parent[path.last().unwrap()]);
            }
            path.reverse();
            return Some(path);
        }
        for &w in &adj[&u] {
            parent.entry(w).or_insert_with(|| {
                queue.push_back(w);
                u
            });
        }
    }
    None
}
