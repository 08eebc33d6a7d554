//! Star graphs `G(d, l)`: generation, tokenization, the parity reduction,
//! baseline training transforms and path-accuracy evaluation.

mod parity;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bst::GptExample;

pub use parity::{parity_to_stargraph, ParityInstance};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StarGraphError {
    #[error("need at least {needed} node ids, universe has {n}")]
    UniverseTooSmall { needed: usize, n: usize },
    #[error("degree and arm length must both be at least 2 (got d={d}, l={l})")]
    BadShape { d: usize, l: usize },
    #[error("malformed token sequence: {0}")]
    Malformed(String),
    #[error("bit string of length {0} is too short; need at least 2")]
    ParityTooShort(usize),
    #[error("data augmentation needs an intermediate node; arm length {0} is below 3")]
    NoIntermediate(usize),
    #[error("unknown baseline kind {0:?}")]
    UnknownKind(String),
}

/// Token ids for a universe of `n_nodes` node ids.
///
/// `0` is padding, nodes are `1..=n_nodes`, followed by the edge separator,
/// the section separator and the two sentinels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_nodes: usize,
}

impl Vocab {
    pub const PAD: usize = 0;

    pub fn new(n_nodes: usize) -> Self {
        Vocab { n_nodes }
    }

    pub fn sep_edge(&self) -> usize {
        self.n_nodes + 1
    }

    pub fn sep_section(&self) -> usize {
        self.n_nodes + 2
    }

    pub fn bos(&self) -> usize {
        self.n_nodes + 3
    }

    pub fn eos(&self) -> usize {
        self.n_nodes + 4
    }

    pub fn size(&self) -> usize {
        self.n_nodes + 5
    }

    pub fn is_node(&self, t: usize) -> bool {
        (1..=self.n_nodes).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarGraph {
    pub d: usize,
    pub l: usize,
    pub n_nodes: usize,
    /// Directed edges pointing away from the start, in presentation order.
    pub edges: Vec<(usize, usize)>,
    pub start: usize,
    pub goal: usize,
    /// `start, ..., goal`, exactly `l` nodes.
    pub path: Vec<usize>,
}

impl StarGraph {
    pub fn edge_count(&self) -> usize {
        self.d * (self.l - 1)
    }
}

pub fn generate_graph<R: Rng + ?Sized>(d: usize, l: usize, n: usize, rng: &mut R) -> Result<StarGraph, StarGraphError> {
    if d < 2 || l < 2 {
        return Err(StarGraphError::BadShape { d, l });
    }
    let needed = d * (l - 1) + 1;
    if n < needed {
        return Err(StarGraphError::UniverseTooSmall { needed, n });
    }
    let nodes: Vec<usize> = rand::seq::index::sample(rng, n, needed).into_iter().map(|v| v + 1).collect();
    let start = nodes[0];
    let goal_arm = rng.random_range(0..d);
    let mut edges = Vec::with_capacity(d * (l - 1));
    let mut path = Vec::new();
    for arm in 0..d {
        let body = &nodes[1 + arm * (l - 1)..1 + (arm + 1) * (l - 1)];
        let mut prev = start;
        for &v in body {
            edges.push((prev, v));
            prev = v;
        }
        if arm == goal_arm {
            path.push(start);
            path.extend_from_slice(body);
        }
    }
    edges.shuffle(rng);
    let goal = *path.last().expect("l >= 2");
    Ok(StarGraph { d, l, n_nodes: n, edges, start, goal, path })
}

/// Number of tokens `tokenize` emits for `G(d, l)`.
pub fn token_count(d: usize, l: usize) -> usize {
    3 * d * (l - 1) + l + 4
}

/// Tokens before the path: edge list, then start and goal, with separators.
pub fn prompt_len(d: usize, l: usize) -> usize {
    3 * d * (l - 1) + 3
}

fn edge_tokens(g: &StarGraph, v: &Vocab, out: &mut Vec<usize>) {
    for (k, &(a, b)) in g.edges.iter().enumerate() {
        if k > 0 {
            out.push(v.sep_edge());
        }
        out.push(a);
        out.push(b);
    }
    out.push(v.sep_section());
}

/// `[edges | start, goal |]` with the trailing separator.
pub fn prompt_tokens(g: &StarGraph, v: &Vocab) -> Vec<usize> {
    let mut out = Vec::with_capacity(prompt_len(g.d, g.l));
    edge_tokens(g, v, &mut out);
    out.extend([g.start, g.goal, v.sep_section()]);
    out
}

pub fn tokenize(g: &StarGraph, v: &Vocab) -> Vec<usize> {
    let mut out = prompt_tokens(g, v);
    out.extend_from_slice(&g.path);
    out.push(v.eos());
    out
}

pub fn detokenize(tokens: &[usize], v: &Vocab) -> Result<StarGraph, StarGraphError> {
    let bad = |m: String| StarGraphError::Malformed(m);
    let sections: Vec<&[usize]> = tokens.split(|&t| t == v.sep_section()).collect();
    if sections.len() != 3 {
        return Err(bad(format!("expected 3 sections, found {}", sections.len())));
    }
    let mut edges = Vec::new();
    for chunk in sections[0].split(|&t| t == v.sep_edge()) {
        match chunk {
            [a, b] if v.is_node(*a) && v.is_node(*b) => edges.push((*a, *b)),
            _ => return Err(bad(format!("bad edge {chunk:?}"))),
        }
    }
    let (start, goal) = match sections[1] {
        [s, g] if v.is_node(*s) && v.is_node(*g) => (*s, *g),
        other => return Err(bad(format!("bad task spec {other:?}"))),
    };
    let path = match sections[2].split_last() {
        Some((&e, path)) if e == v.eos() => path.to_vec(),
        _ => return Err(bad("path must end with EOS".into())),
    };
    let l = path.len();
    if l < 2 || edges.len() % (l - 1) != 0 || path.iter().any(|&t| !v.is_node(t)) {
        return Err(bad(format!("path {path:?} inconsistent with {} edges", edges.len())));
    }
    let d = edges.len() / (l - 1);
    let g = StarGraph { d, l, n_nodes: v.n_nodes, edges, start, goal, path };
    if !is_valid(&g) {
        return Err(bad("not a star graph with the given path".into()));
    }
    Ok(g)
}

/// Structural check: `d` disjoint arms from `start`, and `path` is the unique
/// walk from `start` to `goal`.
pub fn is_valid(g: &StarGraph) -> bool {
    if g.d < 2 || g.l < 2 || g.edges.len() != g.edge_count() || g.path.len() != g.l {
        return false;
    }
    let mut out: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut indeg: HashMap<usize, usize> = HashMap::new();
    for &(a, b) in &g.edges {
        out.entry(a).or_default().push(b);
        *indeg.entry(b).or_default() += 1;
    }
    if out.get(&g.start).map(Vec::len) != Some(g.d) || indeg.contains_key(&g.start) {
        return false;
    }
    if indeg.values().any(|&c| c != 1) || indeg.len() != g.edge_count() {
        return false;
    }
    let mut reached_goal = 0;
    for &first in &out[&g.start] {
        let mut walk = vec![g.start, first];
        while let Some(next) = out.get(walk.last().unwrap()) {
            if next.len() != 1 {
                return false;
            }
            walk.push(next[0]);
        }
        if walk.len() != g.l {
            return false;
        }
        if walk.last() == Some(&g.goal) {
            reached_goal += 1;
            if walk != g.path {
                return false;
            }
        }
    }
    reached_goal == 1 && g.path.first() == Some(&g.start)
}

/// Shortest path by breadth-first search over the directed edges.
pub fn bfs_path(edges: &[(usize, usize)], from: usize, to: usize) -> Option<Vec<usize>> {
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(a, b) in edges {
        adj.entry(a).or_default().push(b);
    }
    let mut parent: HashMap<usize, usize> = HashMap::new();
    let mut queue = std::collections::VecDeque::from([from]);
    parent.insert(from, from);
    while let Some(u) = queue.pop_front() {
        if u == to {
            let mut path = vec![to];
            while *path.last().unwrap() != from {
                path.push(parent[path.last().unwrap()]);
            }
            path.reverse();
            return Some(path);
        }
        for &w in adj.get(&u).into_iter().flatten() {
            if let std::collections::hash_map::Entry::Vacant(e) = parent.entry(w) {
                e.insert(u);
                queue.push_back(w);
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Forward,
    DataAug,
    Fim,
    MultiToken,
}

impl std::str::FromStr for BaselineKind {
    type Err = StarGraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(BaselineKind::Forward),
            "data-aug" => Ok(BaselineKind::DataAug),
            "fim" => Ok(BaselineKind::Fim),
            "multi-token" => Ok(BaselineKind::MultiToken),
            other => Err(StarGraphError::UnknownKind(other.to_string())),
        }
    }
}

/// FIM layout `[edges | start, goal | n_j..n_l | path, EOS]` for 1-based `j`.
pub fn fim_tokens(g: &StarGraph, v: &Vocab, j: usize) -> Vec<usize> {
    let mut out = prompt_tokens(g, v);
    out.extend_from_slice(&g.path[j - 1..]);
    out.push(v.sep_section());
    out.extend_from_slice(&g.path);
    out.push(v.eos());
    out
}

/// Prompt seen by a FIM model at evaluation time: the suffix is the goal alone.
pub fn fim_prompt(g: &StarGraph, v: &Vocab) -> Vec<usize> {
    let mut out = prompt_tokens(g, v);
    out.extend([g.goal, v.sep_section()]);
    out
}

/// Training example for a forward-only baseline.
pub fn make_baseline_example<R: Rng + ?Sized>(
    kind: BaselineKind,
    g: &StarGraph,
    v: &Vocab,
    rng: &mut R,
) -> Result<GptExample, StarGraphError> {
    match kind {
        BaselineKind::Forward => Ok(GptExample::next_token(&tokenize(g, v), v.bos())),
        BaselineKind::DataAug => {
            if g.l < 3 {
                return Err(StarGraphError::NoIntermediate(g.l));
            }
            let mut x = tokenize(g, v);
            let goal_pos = prompt_len(g.d, g.l) - 2;
            x[goal_pos] = g.path[rng.random_range(1..g.l - 1)];
            Ok(GptExample::next_token(&x, v.bos()))
        }
        BaselineKind::Fim => {
            let j = rng.random_range(2..=g.l);
            Ok(GptExample::next_token(&fim_tokens(g, v, j), v.bos()))
        }
        BaselineKind::MultiToken => Ok(multi_token_example(g, v)),
    }
}

/// `[BOS, edges | start, goal |, PAD x (l-1)]`; the latent at the last prompt
/// position and at each placeholder predicts one path node.
pub fn multi_token_example(g: &StarGraph, v: &Vocab) -> GptExample {
    let prompt = prompt_tokens(g, v);
    let mut tokens = Vec::with_capacity(prompt.len() + g.l);
    tokens.push(v.bos());
    tokens.extend_from_slice(&prompt);
    tokens.extend(std::iter::repeat_n(Vocab::PAD, g.l - 1));
    let mut targets = vec![None; prompt.len()];
    targets.extend(g.path.iter().map(|&t| Some(t)));
    GptExample { tokens, targets }
}

/// Anything that proposes `l` path tokens from a prompt.
pub trait PathDecoder {
    fn decode_path(&self, g: &StarGraph, v: &Vocab) -> Vec<usize>;
}

impl<F: Fn(&StarGraph, &Vocab) -> Vec<usize>> PathDecoder for F {
    fn decode_path(&self, g: &StarGraph, v: &Vocab) -> Vec<usize> {
        self(g, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PathAccuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Decodes containing a non-node token inside the path segment.
    pub invalid: usize,
}

pub fn eval_path_accuracy<D: PathDecoder + ?Sized>(dec: &D, graphs: &[StarGraph], v: &Vocab) -> PathAccuracy {
    let mut r = PathAccuracy { total: graphs.len(), ..Default::default() };
    for g in graphs {
        let path = dec.decode_path(g, v);
        if path.iter().any(|&t| !v.is_node(t)) {
            r.invalid += 1;
            log::debug!("non-node token in decoded path {path:?}");
            continue;
        }
        if path == g.path {
            r.correct += 1;
        }
    }
    r.accuracy = if graphs.is_empty() { 0.0 } else { r.correct as f64 / graphs.len() as f64 };
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_of_small_graph() {
        let v = Vocab::new(10);
        let g = StarGraph {
            d: 2,
            l: 2,
            n_nodes: 10,
            edges: vec![(4, 7), (4, 2)],
            start: 4,
            goal: 7,
            path: vec![4, 7],
        };
        let (e, s) = (v.sep_edge(), v.sep_section());
        assert_eq!(tokenize(&g, &v), vec![4, 7, e, 4, 2, s, 4, 7, s, 4, 7, v.eos()]);
        assert_eq!(detokenize(&tokenize(&g, &v), &v).unwrap(), g);
    }

    #[test]
    fn generation_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = generate_graph(2, 5, 50, &mut rng).unwrap();
        assert_eq!(g.edges.len(), 8);
        let mut nodes: Vec<usize> = g.edges.iter().flat_map(|&(a, b)| [a, b]).collect();
        nodes.sort_unstable();
        nodes.dedup();
        assert_eq!(nodes.len(), 9);
        assert!(is_valid(&g));
        assert!(matches!(generate_graph(2, 5, 8, &mut rng), Err(StarGraphError::UniverseTooSmall { .. })));
        assert!(generate_graph(1, 5, 50, &mut rng).is_err());
    }

    #[test]
    fn malformed_sequences_rejected() {
        let v = Vocab::new(10);
        assert!(detokenize(&[1, 2, 3], &v).is_err());
        let s = v.sep_section();
        assert!(detokenize(&[1, 2, s, 1, 2, s, 1, 2], &v).is_err());
    }

    #[test]
    fn baseline_kinds_parse() {
        assert_eq!("fim".parse::<BaselineKind>().unwrap(), BaselineKind::Fim);
        assert!("nope".parse::<BaselineKind>().is_err());
    }
}
