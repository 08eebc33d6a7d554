//! The Belief State Transformer: a forward encoder over prefixes, a backward
//! encoder over suffixes, and a shared MLP trunk with next and previous
//! token projections.

mod gpt;
mod loss;
mod pairs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, gaussian, EncoderConfig, EncoderError, EncoderInput, EncoderLayout};
use crate::numerics::{log_softmax, Float, NumericsError, ParamSet, Tape, Tensor, Var};

pub use gpt::{GptConfig, GptExample, GptMetrics, GptModel};
pub use loss::{
    bst_loss, compute_grads_naive, compute_grads_two_phase, train_step_two_phase, BatchPlan, LossSpec, LossWeights,
    StepMetrics,
};
pub use pairs::{enumerate_pairs, subsample_pairs, Pair, PairBatch};

#[derive(Debug, thiserror::Error)]
pub enum BstError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length must be at least 1")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("pair ({i}, {j}) is invalid for a sequence of length {len}")]
    InvalidPair { i: usize, j: usize, len: usize },
    #[error("label {label} is outside the vocabulary of {vocab}")]
    LabelOutOfRange { label: usize, vocab: usize },
    #[error("subsample fraction {0} is not in (0, 1]")]
    BadFraction(f64),
    #[error("no pairs to sample from")]
    NoPairs,
    #[error("loss weights out of range: gamma {gamma}, lambda {lambda}")]
    BadWeights { gamma: f64, lambda: f64 },
    #[error("model has no GPT head but gamma is {0}")]
    MissingGptHead(f64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BstConfig {
    pub encoder: EncoderConfig,
    /// One encoder for both directions, told apart by segment embeddings.
    pub shared_encoders: bool,
    pub head_hidden: usize,
    pub gpt_head: bool,
    pub bos: usize,
    pub eos: usize,
}

impl BstConfig {
    pub fn validate(&self) -> Result<(), BstError> {
        self.encoder.validate()?;
        let v = self.encoder.vocab_size;
        if self.head_hidden == 0 {
            return Err(BstError::InvalidConfig("head_hidden must be positive".into()));
        }
        if self.bos >= v || self.eos >= v {
            return Err(BstError::InvalidConfig(format!("sentinels {}/{} outside vocab {v}", self.bos, self.eos)));
        }
        Ok(())
    }

    fn forward_encoder(&self) -> EncoderConfig {
        EncoderConfig { use_segment_embeddings: self.shared_encoders, ..self.encoder.clone() }
    }

    fn backward_encoder(&self) -> EncoderConfig {
        EncoderConfig { seed: self.encoder.seed.wrapping_add(1), ..self.forward_encoder() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLayout {
    /// First trunk layer over `[f; b]`, shape `[2d, H]`.
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w_next: usize,
    pub b_next: usize,
    pub w_prev: usize,
    pub b_prev: usize,
    pub gpt: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BstModel<T> {
    pub config: BstConfig,
    pub params: ParamSet<T>,
    pub fwd: EncoderLayout,
    /// Equal to `fwd` when encoders are shared.
    pub bwd: EncoderLayout,
    pub head: HeadLayout,
}

pub(crate) const FWD_SEGMENT: usize = 0;
pub(crate) const BWD_SEGMENT: usize = 1;

impl<T: Float> BstModel<T> {
    pub fn init(config: BstConfig) -> Result<Self, BstError> {
        config.validate()?;
        let mut params = ParamSet::new();
        let (fwd, bwd) = if config.shared_encoders {
            let l = encoder::init_into(&config.forward_encoder(), &mut params, "enc.")?;
            (l.clone(), l)
        } else {
            let f = encoder::init_into(&config.forward_encoder(), &mut params, "fwd.")?;
            let b = encoder::init_into(&config.backward_encoder(), &mut params, "bwd.")?;
            (f, b)
        };
        let head = init_head(&config, &mut params);
        Ok(BstModel { config, params, fwd, bwd, head })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.encoder.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.config.encoder.d_model
    }

    /// Encoder parameters, segment table excluded.
    pub fn encoder_param_count(&self) -> usize {
        let seg = self.fwd.seg.map_or(0, |s| self.params.get(s).numel());
        if self.config.shared_encoders {
            self.params.count_prefix("enc.") - seg
        } else {
            self.params.count_prefix("fwd.") + self.params.count_prefix("bwd.")
        }
    }

    pub fn head_param_count(&self) -> usize {
        self.params.count_prefix("head.")
    }

    /// Forward latents for `[BOS] + prefix`: row `i` is `F(prefix[..i])`.
    pub fn forward_latents(&self, prefix: &[usize]) -> Result<Tensor<T>, BstError> {
        let mut tape = Tape::new();
        let vars = self.bind_encoders(&mut tape)?;
        let tokens: Vec<usize> = std::iter::once(self.config.bos).chain(prefix.iter().copied()).collect();
        let f = self.encode_direction(&mut tape, &vars, true, &tokens, tokens.len())?;
        Ok(tape.value(f).clone())
    }

    /// Backward latents: row `k` is `B(suffix[k..])`, the last row is `B(∅)`.
    pub fn backward_latents(&self, suffix: &[usize]) -> Result<Tensor<T>, BstError> {
        let mut tape = Tape::new();
        let vars = self.bind_encoders(&mut tape)?;
        let tokens = encoder::reversed_input(suffix, self.config.eos);
        let b = self.encode_direction(&mut tape, &vars, false, &tokens, tokens.len())?;
        Ok(encoder::reindex_reversed(tape.value(b)))
    }

    /// `(f_0..f_T, b_1..b_{T+1})`, each `[T+1, d]`, from one pass per encoder.
    pub fn cache_latents(&self, x: &[usize]) -> Result<(Tensor<T>, Tensor<T>), BstError> {
        if x.is_empty() {
            return Err(BstError::EmptySequence);
        }
        Ok((self.forward_latents(x)?, self.backward_latents(x)?))
    }

    /// Next and previous log-probabilities for one `(f, b)` latent pair.
    pub fn head_logprobs(&self, f: &[T], b: &[T]) -> Result<(Vec<f64>, Vec<f64>), BstError> {
        let d = self.d_model();
        let mut tape = Tape::new();
        let vars = self.params.bind_prefixed(&mut tape, false, &["head."])?;
        let fv = tape.constant(Tensor::new(vec![1, d], f.to_vec())?)?;
        let bv = tape.constant(Tensor::new(vec![1, d], b.to_vec())?)?;
        let (next, prev) = self.head_logits(&mut tape, &vars, fv, bv, &[0], &[0])?;
        Ok((log_softmax(tape.value(next).data()), log_softmax(tape.value(prev).data())))
    }

    /// `T_n(F(prefix), B(suffix))` as log-probabilities.
    pub fn next_logprobs(&self, prefix: &[usize], suffix: &[usize]) -> Result<Vec<f64>, BstError> {
        let f = self.forward_latents(prefix)?;
        let b = self.backward_latents(suffix)?;
        Ok(self.head_logprobs(f.row(prefix.len()), b.row(0))?.0)
    }

    /// `T_p(F(prefix), B(suffix))` as log-probabilities.
    pub fn prev_logprobs(&self, prefix: &[usize], suffix: &[usize]) -> Result<Vec<f64>, BstError> {
        let f = self.forward_latents(prefix)?;
        let b = self.backward_latents(suffix)?;
        Ok(self.head_logprobs(f.row(prefix.len()), b.row(0))?.1)
    }

    /// `T_GPT(F(prefix))` as log-probabilities.
    pub fn gpt_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>, BstError> {
        let (w, b) = self.head.gpt.ok_or(BstError::MissingGptHead(1.0))?;
        let f = self.forward_latents(prefix)?;
        let d = self.d_model();
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::new(vec![1, d], f.row(prefix.len()).to_vec())?)?;
        let wv = tape.constant(self.params.get(w).clone())?;
        let bv = tape.constant(self.params.get(b).clone())?;
        let logits = tape.linear(fv, wv, bv)?;
        Ok(log_softmax(tape.value(logits).data()))
    }

    pub(crate) fn bind_encoders(&self, tape: &mut Tape<T>) -> Result<Vec<Var>, BstError> {
        let prefixes: &[&str] = if self.config.shared_encoders { &["enc."] } else { &["fwd.", "bwd."] };
        Ok(self.params.bind_prefixed(tape, false, prefixes)?)
    }

    /// Encodes packed rows in one direction. Inputs already carry their sentinel.
    pub(crate) fn encode_direction(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        forward: bool,
        tokens: &[usize],
        block: usize,
    ) -> Result<Var, BstError> {
        let layout = if forward { &self.fwd } else { &self.bwd };
        let seg_id = if forward { FWD_SEGMENT } else { BWD_SEGMENT };
        let segments = self.config.shared_encoders.then(|| vec![seg_id; tokens.len()]);
        let cfg = &self.config.encoder;
        Ok(encoder::encode_on_tape(
            tape,
            cfg,
            layout,
            vars,
            EncoderInput { tokens, block, segments: segments.as_deref() },
        )?)
    }

    /// Trunk and both projections on gathered `(f, b)` rows.
    pub(crate) fn head_logits(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        f_all: Var,
        b_all: Var,
        f_idx: &[usize],
        b_idx: &[usize],
    ) -> Result<(Var, Var), BstError> {
        let d = self.d_model();
        let h = &self.head;
        let w_f = tape.slice(vars[h.w1], 0, 0, d)?;
        let w_b = tape.slice(vars[h.w1], 0, d, d)?;
        let u = tape.linear(f_all, w_f, vars[h.b1])?;
        let v = tape.matmul(b_all, w_b)?;
        let gu = tape.gather_rows(u, f_idx)?;
        let gv = tape.gather_rows(v, b_idx)?;
        let pre = tape.add(gu, gv)?;
        let h1 = tape.relu(pre)?;
        let h2 = tape.linear(h1, vars[h.w2], vars[h.b2])?;
        let h2 = tape.relu(h2)?;
        let next = tape.linear(h2, vars[h.w_next], vars[h.b_next])?;
        let prev = tape.linear(h2, vars[h.w_prev], vars[h.b_prev])?;
        Ok((next, prev))
    }
}

fn init_head<T: Float>(config: &BstConfig, params: &mut ParamSet<T>) -> HeadLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed.wrapping_add(2));
    let d = config.encoder.d_model;
    let h = config.head_hidden;
    let v = config.encoder.vocab_size;
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let w1 = params.push("head.w1", gaussian(&mut rng, &[2 * d, h], he(2 * d)), true);
    let b1 = params.push("head.b1", Tensor::zeros(&[h]), false);
    let w2 = params.push("head.w2", gaussian(&mut rng, &[h, h], he(h)), true);
    let b2 = params.push("head.b2", Tensor::zeros(&[h]), false);
    let w_next = params.push("head.next.w", gaussian(&mut rng, &[h, v], encoder::INIT_STD), true);
    let b_next = params.push("head.next.b", Tensor::zeros(&[v]), false);
    let w_prev = params.push("head.prev.w", gaussian(&mut rng, &[h, v], encoder::INIT_STD), true);
    let b_prev = params.push("head.prev.b", Tensor::zeros(&[v]), false);
    let gpt = config.gpt_head.then(|| {
        let w = params.push("head.gpt.w", gaussian(&mut rng, &[d, v], encoder::INIT_STD), true);
        let b = params.push("head.gpt.b", Tensor::zeros(&[v]), false);
        (w, b)
    });
    HeadLayout { w1, b1, w2, b2, w_next, b_next, w_prev, b_prev, gpt }
}
