//! Templated subject-verb-object mini-stories.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MAX_STORY_TOKENS: usize = 64;
pub const PAD: usize = 0;

const NAMES: &[&str] = &[
    "tom", "lily", "max", "sue", "ben", "mia", "sam", "zoe", "leo", "ana", "jack", "emma", "finn", "rosa", "otto", "ivy",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "fox", "frog", "bear", "fish", "duck", "ball", "kite", "box", "cake", "hat", "boat", "tree",
    "flower", "car", "book", "cup", "star", "apple", "drum", "shell", "key",
];
const ADJS: &[&str] =
    &["big", "small", "red", "blue", "happy", "sad", "old", "new", "soft", "loud", "shiny", "green", "brave", "tiny"];
const VERBS: &[&str] =
    &["saw", "found", "liked", "took", "gave", "kept", "lost", "made", "fed", "washed", "hid", "held", "drew", "chased"];
const PLACES: &[&str] = &["park", "garden", "house", "forest", "river", "school", "beach", "hill", "shop", "farm"];
const FEELINGS: &[&str] = &["happy", "sad", "tired", "proud", "scared", "glad"];
const FUNCTION: &[&str] = &[
    "once", "there", "was", "a", "named", "the", "in", "then", "and", "it", "so", "felt", "very", "end", "went", "to",
    "with", ".",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vec<String>,
    pub bos: usize,
    pub eos: usize,
    /// Token ids, each story ending with `eos`.
    pub train: Vec<Vec<usize>>,
    pub eval: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.vocab.get(t).map_or("<?>", String::as_str)).collect::<Vec<_>>().join(" ")
    }

    /// Whitespace tokenization; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, String> {
        let index: BTreeMap<&str, usize> = self.vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        text.split_whitespace().map(|w| index.get(w).copied().ok_or_else(|| format!("unknown word {w:?}"))).collect()
    }
}

fn build_vocab() -> Vec<String> {
    let mut words: Vec<String> = vec!["<pad>".into(), "<bos>".into(), "<eos>".into()];
    let mut seen: HashSet<&str> = HashSet::new();
    for list in [FUNCTION, NAMES, NOUNS, ADJS, VERBS, PLACES, FEELINGS] {
        for &w in list {
            if seen.insert(w) {
                words.push(w.to_string());
            }
        }
    }
    words
}

fn story<R: Rng + ?Sized>(rng: &mut R) -> Vec<&'static str> {
    let pick = |rng: &mut R, list: &'static [&'static str]| *list.choose(rng).expect("nonempty");
    let name = pick(rng, NAMES);
    let (adj, pet) = (pick(rng, ADJS), pick(rng, NOUNS));
    let mut s = vec!["once", "there", "was", "a", adj, pet, "named", name, "."];
    let sentences = rng.random_range(2..=4);
    let mut object = pick(rng, NOUNS);
    for k in 0..sentences {
        let verb = pick(rng, VERBS);
        match rng.random_range(0..3) {
            0 => s.extend([name, verb, "the", object, "in", "the", pick(rng, PLACES), "."]),
            1 => s.extend(["then", name, "went", "to", "the", pick(rng, PLACES), "with", "the", object, "."]),
            _ => s.extend(["the", object, "was", "very", pick(rng, ADJS), "."]),
        }
        if k + 1 < sentences && rng.random_bool(0.5) {
            object = pick(rng, NOUNS);
        }
    }
    s.extend(["so", name, "felt", pick(rng, FEELINGS), ".", "the", "end", "."]);
    s
}

/// `count` distinct stories, shuffled, with the last `eval_fraction` held out.
/// Deterministic in `seed`.
pub fn gen_synthetic_corpus(seed: u64, count: usize, eval_fraction: f64) -> Corpus {
    let vocab = build_vocab();
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let (bos, eos) = (index["<bos>"], index["<eos>"]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut stories = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while stories.len() < count.max(1) && attempts < 100 * count.max(1) {
        attempts += 1;
        let mut ids: Vec<usize> = story(&mut rng).into_iter().map(|w| index[w]).collect();
        ids.push(eos);
        if ids.len() <= MAX_STORY_TOKENS && seen.insert(ids.clone()) {
            stories.push(ids);
        }
    }
    stories.shuffle(&mut rng);
    let n_eval = ((stories.len() as f64 * eval_fraction).round() as usize).min(stories.len().saturating_sub(1));
    let eval = stories.split_off(stories.len() - n_eval);
    Corpus { vocab, bos, eos, train: stories, eval }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bounded_and_disjoint() {
        let a = gen_synthetic_corpus(7, 300, 0.1);
        assert_eq!(a, gen_synthetic_corpus(7, 300, 0.1));
        assert!(a.vocab_size() <= 512);
        assert_eq!(a.train.len() + a.eval.len(), 300);
        let train: HashSet<_> = a.train.iter().collect();
        for s in a.train.iter().chain(&a.eval) {
            assert!(s.len() <= MAX_STORY_TOKENS);
            assert!(s.iter().all(|&t| t < a.vocab_size()));
            assert_eq!(*s.last().unwrap(), a.eos);
        }
        assert!(a.eval.iter().all(|s| !train.contains(s)));
        let text = a.decode(&a.train[0]);
        assert!(text.starts_with("once there was a"));
    }
}
