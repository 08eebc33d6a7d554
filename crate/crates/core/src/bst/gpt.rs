use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BstError;
use crate::encoder::{self, gaussian, EncoderConfig, EncoderInput, EncoderLayout};
use crate::numerics::{log_softmax, AdamWState, Float, NumericsError, ParamSet, Tape, Tensor, Var};

/// Forward-only transformer: one causal encoder and a vocabulary projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptConfig {
    pub encoder: EncoderConfig,
    pub bos: usize,
}

/// Encoder input (sentinel first) with an optional target per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptExample {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl GptExample {
    /// Teacher-forced next-token example over all of `x`.
    pub fn next_token(x: &[usize], bos: usize) -> Self {
        let tokens = std::iter::once(bos).chain(x[..x.len().saturating_sub(1)].iter().copied()).collect();
        GptExample { tokens, targets: x.iter().map(|&t| Some(t)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GptMetrics {
    pub loss: f64,
    pub targets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptModel<T> {
    pub config: GptConfig,
    pub params: ParamSet<T>,
    pub enc: EncoderLayout,
    pub w_out: usize,
    pub b_out: usize,
}

impl<T: Float> GptModel<T> {
    pub fn init(config: GptConfig) -> Result<Self, BstError> {
        if config.bos >= config.encoder.vocab_size {
            return Err(BstError::InvalidConfig(format!("bos {} outside vocab", config.bos)));
        }
        let mut params = ParamSet::new();
        let enc = encoder::init_into(&config.encoder, &mut params, "enc.")?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed.wrapping_add(2));
        let (d, v) = (config.encoder.d_model, config.encoder.vocab_size);
        let w_out = params.push("lm.w", gaussian(&mut rng, &[d, v], encoder::INIT_STD), true);
        let b_out = params.push("lm.b", Tensor::zeros(&[v]), false);
        Ok(GptModel { config, params, enc, w_out, b_out })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.encoder.vocab_size
    }

    fn logits(&self, tape: &mut Tape<T>, vars: &[Var], tokens: &[usize], block: usize) -> Result<Var, BstError> {
        let lat = encoder::encode_on_tape(
            tape,
            &self.config.encoder,
            &self.enc,
            vars,
            EncoderInput { tokens, block, segments: None },
        )?;
        Ok(tape.linear(lat, vars[self.w_out], vars[self.b_out])?)
    }

    fn loss_graph(&self, tape: &mut Tape<T>, vars: &[Var], batch: &[GptExample]) -> Result<(Var, GptMetrics), BstError> {
        if batch.is_empty() {
            return Err(BstError::EmptyBatch);
        }
        let block = batch.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(batch.len() * block);
        let (mut rows, mut targets, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for (s, ex) in batch.iter().enumerate() {
            if ex.targets.len() != ex.tokens.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "gpt_loss",
                    detail: format!("{} targets for {} tokens", ex.targets.len(), ex.tokens.len()),
                }
                .into());
            }
            let n = ex.targets.iter().flatten().count();
            if n == 0 {
                return Err(BstError::NoPairs);
            }
            let weight = T::one() / T::of_usize(batch.len() * n);
            for (p, t) in ex.targets.iter().enumerate() {
                if let Some(t) = *t {
                    rows.push(s * block + p);
                    targets.push(t);
                    w.push(weight);
                }
            }
            tokens.extend_from_slice(&ex.tokens);
            tokens.resize((s + 1) * block, self.config.bos);
        }
        let logits = self.logits(tape, vars, &tokens, block)?;
        let picked = tape.gather_rows(logits, &rows)?;
        let loss = tape.cross_entropy(picked, &targets, &w)?;
        let value = tape.value(loss).item()?.as_f64();
        Ok((loss, GptMetrics { loss: value, targets: targets.len() }))
    }

    pub fn loss(&self, batch: &[GptExample]) -> Result<GptMetrics, BstError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false)?;
        Ok(self.loss_graph(&mut tape, &vars, batch)?.1)
    }

    pub fn compute_grads(&self, batch: &[GptExample]) -> Result<(Vec<Tensor<T>>, GptMetrics), BstError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, true)?;
        let (loss, m) = self.loss_graph(&mut tape, &vars, batch)?;
        tape.backward(loss)?;
        Ok((self.params.grads(&tape, &vars), m))
    }

    pub fn train_step(&mut self, batch: &[GptExample], opt: &mut AdamWState<T>) -> Result<GptMetrics, BstError> {
        let (grads, m) = self.compute_grads(batch)?;
        let mut values = self.params.values();
        opt.step(&mut values, &grads)?;
        self.params.set_values(values)?;
        Ok(m)
    }

    /// Final-layer hidden states for `[BOS] + prefix`: row `i` has read `prefix[..i]`.
    pub fn latents(&self, prefix: &[usize]) -> Result<Tensor<T>, BstError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false)?;
        let tokens: Vec<usize> = std::iter::once(self.config.bos).chain(prefix.iter().copied()).collect();
        let lat = encoder::encode_on_tape(
            &mut tape,
            &self.config.encoder,
            &self.enc,
            &vars,
            EncoderInput { tokens: &tokens, block: tokens.len(), segments: None },
        )?;
        Ok(tape.value(lat).clone())
    }

    /// Log-probabilities at every position of `tokens` (sentinel first).
    pub fn logprobs_all(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, BstError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false)?;
        let logits = self.logits(&mut tape, &vars, tokens, tokens.len())?;
        let lv = tape.value(logits);
        Ok((0..tokens.len()).map(|r| log_softmax(lv.row(r))).collect())
    }

    /// Next-token log-probabilities after `[BOS] + prefix`.
    pub fn next_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>, BstError> {
        let tokens: Vec<usize> = std::iter::once(self.config.bos).chain(prefix.iter().copied()).collect();
        let mut all = self.logprobs_all(&tokens)?;
        Ok(all.pop().expect("at least the sentinel"))
    }
}
