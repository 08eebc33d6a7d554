use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pairs::{enumerate_pairs, subsample_pairs, PairBatch};
use super::{BstError, BstModel, BWD_SEGMENT, FWD_SEGMENT};
use crate::encoder::{self, EncoderInput};
use crate::numerics::{AdamWState, Float, Tape, Tensor, Var};

/// `loss = gamma * gpt + (1 - gamma) * (lambda * next + (1 - lambda) * prev)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub lambda: f64,
}

impl LossWeights {
    /// Both heads, equally weighted, no GPT term.
    pub const BALANCED: LossWeights = LossWeights { gamma: 0.0, lambda: 0.5 };

    pub fn validate(&self) -> Result<(), BstError> {
        if (0.0..=1.0).contains(&self.gamma) && (0.0..=1.0).contains(&self.lambda) {
            Ok(())
        } else {
            Err(BstError::BadWeights { gamma: self.gamma, lambda: self.lambda })
        }
    }
}

/// Objective settings for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub weights: LossWeights,
    /// When false every suffix latent is replaced by `B(∅)`.
    pub use_backward: bool,
    /// Fraction of pairs scored per sequence per step.
    pub subsample: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { weights: LossWeights::BALANCED, use_backward: true, subsample: 1.0 }
    }
}

/// Per-sequence pair sets for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub items: Vec<PairBatch>,
}

impl BatchPlan {
    pub fn full(seqs: &[Vec<usize>], vocab: usize) -> Result<Self, BstError> {
        if seqs.is_empty() {
            return Err(BstError::EmptyBatch);
        }
        let items = seqs.iter().map(|x| PairBatch::full(x, vocab)).collect::<Result<_, _>>()?;
        Ok(BatchPlan { items })
    }

    pub fn sampled<R: Rng + ?Sized>(
        seqs: &[Vec<usize>],
        vocab: usize,
        fraction: f64,
        rng: &mut R,
    ) -> Result<Self, BstError> {
        if seqs.is_empty() {
            return Err(BstError::EmptyBatch);
        }
        let items = seqs
            .iter()
            .map(|x| {
                let pairs = enumerate_pairs(x.len())?;
                PairBatch::new(x, subsample_pairs(&pairs, fraction, rng)?, vocab)
            })
            .collect::<Result<_, _>>()?;
        Ok(BatchPlan { items })
    }

    pub fn pair_count(&self) -> usize {
        self.items.iter().map(|b| b.pairs.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    /// Mean next-head cross-entropy over scored pairs, unweighted.
    pub next_loss: Option<f64>,
    /// Mean previous-head cross-entropy over scored pairs, unweighted.
    pub prev_loss: Option<f64>,
    pub gpt_loss: Option<f64>,
    /// Prefix/suffix pairs scored by the heads.
    pub head_evals: usize,
    /// Distinct trunk rows actually computed.
    pub trunk_rows: usize,
    pub attention_pairs: u64,
}

struct Latents {
    f_all: Var,
    b_all: Var,
    block: usize,
}

fn encode_batch<T: Float>(
    model: &BstModel<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    plan: &BatchPlan,
    use_backward: bool,
) -> Result<Latents, BstError> {
    let cfg = &model.config;
    let block = plan.items.iter().map(|b| b.x.len()).max().unwrap_or(0) + 1;
    let mut f_tokens = Vec::with_capacity(plan.items.len() * block);
    for b in &plan.items {
        f_tokens.push(cfg.bos);
        f_tokens.extend_from_slice(&b.x);
        f_tokens.resize(f_tokens.len() + block - b.x.len() - 1, cfg.bos);
    }
    if !use_backward {
        let f_all = model.encode_direction(tape, vars, true, &f_tokens, block)?;
        let b_empty = model.encode_direction(tape, vars, false, &[cfg.eos], 1)?;
        let b_all = tape.constant(tape.value(b_empty).clone())?;
        return Ok(Latents { f_all, b_all, block });
    }
    let mut b_tokens = Vec::with_capacity(f_tokens.len());
    for b in &plan.items {
        b_tokens.extend(encoder::reversed_input(&b.x, cfg.eos));
        b_tokens.resize(b_tokens.len() + block - b.x.len() - 1, cfg.eos);
    }
    if !cfg.shared_encoders {
        let f_all = model.encode_direction(tape, vars, true, &f_tokens, block)?;
        let b_all = model.encode_direction(tape, vars, false, &b_tokens, block)?;
        return Ok(Latents { f_all, b_all, block });
    }
    // One pass over both directions; segments tell them apart.
    let n = f_tokens.len();
    let mut tokens = f_tokens;
    tokens.extend(b_tokens);
    let mut segments = vec![FWD_SEGMENT; n];
    segments.resize(2 * n, BWD_SEGMENT);
    let out = encoder::encode_on_tape(
        tape,
        &cfg.encoder,
        &model.fwd,
        vars,
        EncoderInput { tokens: &tokens, block, segments: Some(&segments) },
    )?;
    let f_all = tape.slice(out, 0, 0, n)?;
    let b_all = tape.slice(out, 0, n, n)?;
    Ok(Latents { f_all, b_all, block })
}

fn loss_from_latents<T: Float>(
    model: &BstModel<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    lat: &Latents,
    plan: &BatchPlan,
    spec: &LossSpec,
) -> Result<(Var, StepMetrics), BstError> {
    let LossWeights { gamma, lambda } = spec.weights;
    spec.weights.validate()?;
    if gamma > 0.0 && model.head.gpt.is_none() {
        return Err(BstError::MissingGptHead(gamma));
    }
    let nseq = plan.items.len();
    let mut metrics = StepMetrics::default();
    let mut terms: Vec<Var> = Vec::new();

    if gamma < 1.0 {
        let mut combo_of: HashMap<(usize, usize), usize> = HashMap::new();
        let (mut combo_f, mut combo_b) = (Vec::new(), Vec::new());
        let mut pair_combo = Vec::with_capacity(plan.pair_count());
        let (mut next_t, mut prev_t, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for (s, item) in plan.items.iter().enumerate() {
            if item.pairs.is_empty() {
                return Err(BstError::NoPairs);
            }
            let t = item.x.len();
            let weight = T::one() / T::of_usize(nseq * item.pairs.len());
            for (k, p) in item.pairs.iter().enumerate() {
                let fr = s * lat.block + p.i;
                let br = if spec.use_backward { s * lat.block + (t + 1 - p.j) } else { 0 };
                let c = *combo_of.entry((fr, br)).or_insert_with(|| {
                    combo_f.push(fr);
                    combo_b.push(br);
                    combo_f.len() - 1
                });
                pair_combo.push(c);
                next_t.push(item.next[k]);
                prev_t.push(item.prev[k]);
                w.push(weight);
            }
        }
        let (mut next, mut prev) = model.head_logits(tape, vars, lat.f_all, lat.b_all, &combo_f, &combo_b)?;
        if combo_f.len() < pair_combo.len() {
            next = tape.gather_rows(next, &pair_combo)?;
            prev = tape.gather_rows(prev, &pair_combo)?;
        }
        let next_ce = tape.cross_entropy(next, &next_t, &w)?;
        let prev_ce = tape.cross_entropy(prev, &prev_t, &w)?;
        metrics.next_loss = Some(tape.value(next_ce).item()?.as_f64());
        metrics.prev_loss = Some(tape.value(prev_ce).item()?.as_f64());
        metrics.head_evals = pair_combo.len();
        metrics.trunk_rows = combo_f.len();
        terms.push(tape.scale(next_ce, T::of_f64((1.0 - gamma) * lambda))?);
        terms.push(tape.scale(prev_ce, T::of_f64((1.0 - gamma) * (1.0 - lambda)))?);
    }

    if let Some((gw, gb)) = model.head.gpt {
        let (mut rows, mut targets, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for (s, item) in plan.items.iter().enumerate() {
            let weight = T::one() / T::of_usize(nseq * item.x.len());
            for (i, &tok) in item.x.iter().enumerate() {
                rows.push(s * lat.block + i);
                targets.push(tok);
                w.push(weight);
            }
        }
        let f = tape.gather_rows(lat.f_all, &rows)?;
        let logits = tape.linear(f, vars[gw], vars[gb])?;
        let ce = tape.cross_entropy(logits, &targets, &w)?;
        metrics.gpt_loss = Some(tape.value(ce).item()?.as_f64());
        if gamma > 0.0 {
            terms.push(tape.scale(ce, T::of_f64(gamma))?);
        }
    }

    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    metrics.loss = tape.value(loss).item()?.as_f64();
    Ok((loss, metrics))
}

const ENCODER_PREFIXES: [&str; 3] = ["enc.", "fwd.", "bwd."];

/// Loss and metrics without gradients.
pub fn bst_loss<T: Float>(model: &BstModel<T>, plan: &BatchPlan, spec: &LossSpec) -> Result<StepMetrics, BstError> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false)?;
    let lat = encode_batch(model, &mut tape, &vars, plan, spec.use_backward)?;
    let (_, mut m) = loss_from_latents(model, &mut tape, &vars, &lat, plan, spec)?;
    m.attention_pairs = tape.stats().attention_pairs;
    Ok(m)
}

/// Gradients from a single tape holding encoders, heads and loss.
pub fn compute_grads_naive<T: Float>(
    model: &BstModel<T>,
    plan: &BatchPlan,
    spec: &LossSpec,
) -> Result<(Vec<Tensor<T>>, StepMetrics), BstError> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true)?;
    let lat = encode_batch(model, &mut tape, &vars, plan, spec.use_backward)?;
    let (loss, mut m) = loss_from_latents(model, &mut tape, &vars, &lat, plan, spec)?;
    tape.backward(loss)?;
    m.attention_pairs = tape.stats().attention_pairs;
    Ok((model.params.grads(&tape, &vars), m))
}

/// Gradients in two phases: heads against detached latents, then one
/// encoder backward pass seeded with the accumulated latent gradients.
pub fn compute_grads_two_phase<T: Float>(
    model: &BstModel<T>,
    plan: &BatchPlan,
    spec: &LossSpec,
) -> Result<(Vec<Tensor<T>>, StepMetrics), BstError> {
    let mut enc = Tape::new();
    let enc_vars = model.params.bind_prefixed(&mut enc, true, &ENCODER_PREFIXES)?;
    let lat = encode_batch(model, &mut enc, &enc_vars, plan, spec.use_backward)?;

    let mut head = Tape::new();
    let head_vars = model.params.bind_prefixed(&mut head, true, &["head."])?;
    let f_leaf = head.leaf(enc.value(lat.f_all).clone(), true)?;
    let b_leaf = head.leaf(enc.value(lat.b_all).clone(), true)?;
    let detached = Latents { f_all: f_leaf, b_all: b_leaf, block: lat.block };
    let (loss, mut m) = loss_from_latents(model, &mut head, &head_vars, &detached, plan, spec)?;
    head.backward(loss)?;

    let grad_or_zero = |tape: &Tape<T>, v: Var| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
    let gf = grad_or_zero(&head, f_leaf);
    let gb = grad_or_zero(&head, b_leaf);
    enc.backward_from(&[(lat.f_all, gf), (lat.b_all, gb)])?;
    m.attention_pairs = enc.stats().attention_pairs;

    let enc_grads = model.params.grads(&enc, &enc_vars);
    let head_grads = model.params.grads(&head, &head_vars);
    let grads = model
        .params
        .entries()
        .iter()
        .zip(enc_grads.into_iter().zip(head_grads))
        .map(|(e, (ge, gh))| if e.name.starts_with("head.") { gh } else { ge })
        .collect();
    Ok((grads, m))
}

/// One optimizer step using two-phase gradients.
pub fn train_step_two_phase<T: Float>(
    model: &mut BstModel<T>,
    plan: &BatchPlan,
    spec: &LossSpec,
    opt: &mut AdamWState<T>,
) -> Result<StepMetrics, BstError> {
    let (grads, m) = compute_grads_two_phase(model, plan, spec)?;
    let mut values = model.params.values();
    opt.step(&mut values, &grads)?;
    model.params.set_values(values)?;
    Ok(m)
}
