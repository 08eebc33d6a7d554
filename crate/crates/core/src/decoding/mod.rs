//! Inference: autoregressive sampling with an empty suffix, goal-conditioned
//! planning with a priority queue, known-goal and previous-head scoring, and a
//! level-synchronous beam search.
//!
//! All probabilities are handled as natural-log values.

mod adapters;
mod queue;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bst::BstError;

pub use adapters::{BstDecoder, GoalConditioned, GptDecoder};
pub use queue::{Candidate, PriorityQueue};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] BstError),
    #[error("invalid decoding config: {0}")]
    InvalidConfig(String),
    #[error("goal must be non-empty")]
    EmptyGoal,
    #[error("position {0} is outside the sequence")]
    OutOfRange(usize),
}

/// A model exposing both heads given a prefix and a suffix.
pub trait BeliefModel {
    fn vocab_size(&self) -> usize;
    /// `log T_n(· | F(prefix), B(suffix))`.
    fn next_logprobs(&self, prefix: &[usize], suffix: &[usize]) -> Result<Vec<f64>, DecodeError>;
    /// `log T_p(· | F(prefix), B(suffix))`.
    fn prev_logprobs(&self, prefix: &[usize], suffix: &[usize]) -> Result<Vec<f64>, DecodeError>;
}

/// A model that only conditions on a prefix.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn next_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError>;
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SampleMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArsOutput {
    /// Prefix followed by the generated tokens.
    pub tokens: Vec<usize>,
    pub generated: usize,
    /// `max_len` tokens were produced without meeting `eos`.
    pub truncated: bool,
}

fn pick<R: Rng + ?Sized>(logp: &[f64], mode: SampleMode, rng: &mut R) -> Result<usize, DecodeError> {
    match mode {
        SampleMode::Greedy => Ok(argmax(logp)),
        SampleMode::Sample { temperature } => {
            if !(temperature > 0.0) {
                return Err(DecodeError::InvalidConfig(format!("temperature {temperature}")));
            }
            let max = logp.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let w: Vec<f64> = logp.iter().map(|&l| ((l - max) / temperature).exp()).collect();
            let dist = WeightedIndex::new(&w).map_err(|e| DecodeError::InvalidConfig(e.to_string()))?;
            Ok(dist.sample(rng))
        }
    }
}

/// Extends `prefix` with `T_n(F(prefix), B(∅))` until `eos` or `max_len` new tokens.
pub fn ars_generate<M: BeliefModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prefix: &[usize],
    max_len: usize,
    mode: SampleMode,
    eos: Option<usize>,
    rng: &mut R,
) -> Result<ArsOutput, DecodeError> {
    let mut tokens = prefix.to_vec();
    for n in 0..max_len {
        let logp = model.next_logprobs(&tokens, &[])?;
        let x = pick(&logp, mode, rng)?;
        tokens.push(x);
        if Some(x) == eos {
            return Ok(ArsOutput { tokens, generated: n + 1, truncated: false });
        }
    }
    Ok(ArsOutput { tokens, generated: max_len, truncated: eos.is_some() })
}

/// Greedy infill of `fill` tokens under `T_n(F(s), B(goal))`, goal appended.
pub fn greedy_infill<M: BeliefModel + ?Sized>(
    model: &M,
    prefix: &[usize],
    goal: &[usize],
    fill: usize,
) -> Result<Vec<usize>, DecodeError> {
    let mut s = prefix.to_vec();
    for _ in 0..fill {
        let logp = model.next_logprobs(&s, goal)?;
        s.push(argmax(&logp));
    }
    s.extend_from_slice(goal);
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    /// Horizon: the goal starts `k` positions after the prompt, so `k - 1`
    /// tokens are filled in goal-conditioned mode and `k` unconditionally.
    pub k: usize,
    /// Roll-outs (queue pops).
    pub n: usize,
    /// Unconditional scoring window.
    pub k_score: usize,
    /// Score unconditional candidates with the next head instead of the previous head.
    pub next_score: bool,
    /// Stop unconditional roll-outs at this token.
    pub eos: Option<usize>,
    /// Queue capacity; defaults to `10 * n * k` when `None`.
    pub queue_capacity: Option<usize>,
}

impl PlanConfig {
    pub fn new(k: usize, n: usize) -> Self {
        PlanConfig { k, n, k_score: k, next_score: false, eos: None, queue_capacity: None }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.k == 0 || self.n == 0 || self.k_score == 0 {
            return Err(DecodeError::InvalidConfig(format!("k={}, n={}, k'={}", self.k, self.n, self.k_score)));
        }
        Ok(())
    }

    fn capacity(&self) -> usize {
        self.queue_capacity.unwrap_or(10 * self.n * self.k).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub best: Vec<usize>,
    pub best_score: f64,
    /// Every completed roll-out with its log score, in roll-out order.
    pub candidates: Vec<(Vec<usize>, f64)>,
    pub pops: usize,
    /// The queue ran dry before `n` pops.
    pub exhausted: bool,
    /// Unconditional only: some candidate was shorter than the scoring window.
    pub short_window: bool,
}

/// Greedy roll-outs from queue pops; alternatives are pushed with priority
/// `r * T_n(x) / T_max`. Returns the finished sequences.
fn rollouts<M: BeliefModel + ?Sized>(
    model: &M,
    prefix: &[usize],
    goal: &[usize],
    target_len: usize,
    eos: Option<usize>,
    cfg: &PlanConfig,
) -> Result<(Vec<Vec<usize>>, usize, bool), DecodeError> {
    let mut q = PriorityQueue::new(cfg.capacity());
    q.push(Candidate { log_priority: 0.0, tokens: prefix.to_vec() });
    let mut done = Vec::new();
    let mut pops = 0;
    for _ in 0..cfg.n {
        let Some(Candidate { log_priority: r, tokens: mut s }) = q.pop() else {
            return Ok((done, pops, true));
        };
        pops += 1;
        while s.len() < target_len && !(eos.is_some() && s.len() > prefix.len() && s.last().copied() == eos) {
            let logp = model.next_logprobs(&s, goal)?;
            let x_max = argmax(&logp);
            for (x, &lp) in logp.iter().enumerate() {
                if x == x_max || lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut alt = s.clone();
                alt.push(x);
                let pr = r + (lp - logp[x_max]);
                assert!(pr <= r && pr <= 0.0, "queue priority must not increase");
                q.push(Candidate { log_priority: pr, tokens: alt });
            }
            s.push(x_max);
        }
        done.push(s);
    }
    Ok((done, pops, false))
}

/// Goal-conditioned planning: `n` roll-outs filling `k - 1` tokens between
/// `prefix` and `goal`, ranked by [`score_known_goal`].
pub fn plan_goal_conditioned<M: BeliefModel + ?Sized>(
    model: &M,
    prefix: &[usize],
    goal: &[usize],
    cfg: &PlanConfig,
) -> Result<PlanResult, DecodeError> {
    cfg.validate()?;
    if goal.is_empty() {
        return Err(DecodeError::EmptyGoal);
    }
    let t = prefix.len();
    let (fills, pops, exhausted) = rollouts(model, prefix, goal, t + cfg.k - 1, None, cfg)?;
    let mut candidates = Vec::with_capacity(fills.len());
    for mut s in fills {
        s.extend_from_slice(goal);
        let score = score_known_goal(model, &s, t, cfg.k)?;
        candidates.push((s, score));
    }
    finish(candidates, pops, exhausted, false)
}

fn finish(
    candidates: Vec<(Vec<usize>, f64)>,
    pops: usize,
    exhausted: bool,
    short_window: bool,
) -> Result<PlanResult, DecodeError> {
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.1 > candidates[best].1 {
            best = i;
        }
    }
    let (best_seq, best_score) = candidates.get(best).cloned().unwrap_or_default();
    Ok(PlanResult { best: best_seq, best_score, candidates, pops, exhausted, short_window })
}

/// `sum_{i=t+k}^{T} log T_n(x_i | F(x_{1:i-1}), B(x_{i+1:T}))` with 1-based `i`.
pub fn score_known_goal<M: BeliefModel + ?Sized>(
    model: &M,
    seq: &[usize],
    t: usize,
    k: usize,
) -> Result<f64, DecodeError> {
    let start = t + k - 1;
    if k == 0 || start >= seq.len() {
        return Err(DecodeError::OutOfRange(t + k));
    }
    let mut total = 0.0;
    for i in start..seq.len() {
        total += model.next_logprobs(&seq[..i], &seq[i + 1..])?[seq[i]];
    }
    Ok(total)
}

/// Log-likelihood of the last `window` tokens, each scored by the previous
/// head (or the next head) given everything before and after it.
pub fn score_suffix_window<M: BeliefModel + ?Sized>(
    model: &M,
    seq: &[usize],
    window: usize,
    next_head: bool,
) -> Result<f64, DecodeError> {
    let mut total = 0.0;
    for i in seq.len().saturating_sub(window)..seq.len() {
        let (pre, suf) = (&seq[..i], &seq[i + 1..]);
        let logp = if next_head { model.next_logprobs(pre, suf)? } else { model.prev_logprobs(pre, suf)? };
        total += logp[seq[i]];
    }
    Ok(total)
}

/// Planning with an empty goal: roll-outs of up to `k` tokens conditioned on
/// `B(∅)`, ranked by [`score_suffix_window`] over `k_score` tokens.
pub fn plan_unconditional<M: BeliefModel + ?Sized>(
    model: &M,
    prefix: &[usize],
    cfg: &PlanConfig,
) -> Result<PlanResult, DecodeError> {
    cfg.validate()?;
    let (fills, pops, exhausted) = rollouts(model, prefix, &[], prefix.len() + cfg.k, cfg.eos, cfg)?;
    let mut candidates = Vec::with_capacity(fills.len());
    let mut short = false;
    for s in fills {
        short |= s.len() < cfg.k_score;
        let score = score_suffix_window(model, &s, cfg.k_score, cfg.next_score)?;
        candidates.push((s, score));
    }
    finish(candidates, pops, exhausted, short)
}

/// Level-synchronous beam search over `steps` levels; returns up to `beams`
/// continuations of `context` with their log-probabilities, best first.
pub fn beam_search<M: NextTokenModel + ?Sized>(
    model: &M,
    context: &[usize],
    beams: usize,
    steps: usize,
) -> Result<Vec<(Vec<usize>, f64)>, DecodeError> {
    if beams == 0 || steps == 0 {
        return Err(DecodeError::InvalidConfig(format!("beams={beams}, steps={steps}")));
    }
    let mut level = PriorityQueue::new(usize::MAX);
    level.push(Candidate { log_priority: 0.0, tokens: Vec::new() });
    for _ in 0..steps {
        let mut next = PriorityQueue::new(usize::MAX);
        for _ in 0..beams {
            let Some(Candidate { log_priority: r, tokens: u }) = level.pop() else { break };
            let mut ctx = context.to_vec();
            ctx.extend_from_slice(&u);
            let logp = model.next_logprobs(&ctx)?;
            for (x, &lp) in logp.iter().enumerate() {
                let mut v = u.clone();
                v.push(x);
                next.push(Candidate { log_priority: r + lp, tokens: v });
            }
        }
        level = next;
    }
    let mut out = Vec::with_capacity(beams);
    while out.len() < beams {
        match level.pop() {
            Some(c) => out.push((c.tokens, c.log_priority)),
            None => break,
        }
    }
    Ok(out)
}
