//! GPT-style causal encoder producing one latent per input position.
//!
//! The same weights serve both reading directions: the forward encoder sees
//! `[BOS] + prefix`, the backward encoder sees `[EOS] + reversed suffix`.
//! Position (and, when enabled, segment) embeddings are added at the input of
//! every block. Blocks are pre-norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{Float, NumericsError, ParamSet, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, position: usize, vocab: usize },
    #[error("input of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("segment ids given but the encoder has no segment table")]
    NoSegmentTable,
    #[error("segment id {0} is not 0 or 1")]
    BadSegment(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_factor: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub use_segment_embeddings: bool,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.mlp_factor == 0 {
            return bad("mlp_factor must be at least 1");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive");
        }
        Ok(())
    }

    /// Closed-form parameter count, segment table excluded.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let h = self.mlp_factor * d;
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        self.vocab_size * d + self.max_positions * d + self.n_layers * block + 2 * d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Indices of one encoder's tensors inside a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayout {
    pub tok: usize,
    pub pos: usize,
    pub seg: Option<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
}

pub(crate) fn gaussian<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product::<usize>();
    let data = (0..n).map(|_| T::of_f64(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Appends freshly initialized encoder tensors to `params` under `prefix`.
pub fn init_into<T: Float>(
    config: &EncoderConfig,
    params: &mut ParamSet<T>,
    prefix: &str,
) -> Result<EncoderLayout, EncoderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let h = config.mlp_factor * d;
    let mut w = |params: &mut ParamSet<T>, name: &str, shape: &[usize]| {
        params.push(format!("{prefix}{name}"), gaussian(&mut rng, shape, INIT_STD), true)
    };
    let tok = w(params, "tok", &[config.vocab_size, d]);
    let pos = w(params, "pos", &[config.max_positions, d]);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let n = |s: &str| format!("{prefix}h{l}.{s}");
        let ln1_g = params.push(n("ln1.g"), Tensor::full(&[d], T::one()), false);
        let ln1_b = params.push(n("ln1.b"), Tensor::zeros(&[d]), false);
        let w_qkv = w(params, &format!("h{l}.attn.w_qkv"), &[d, 3 * d]);
        let b_qkv = params.push(n("attn.b_qkv"), Tensor::zeros(&[3 * d]), false);
        let w_o = w(params, &format!("h{l}.attn.w_o"), &[d, d]);
        let b_o = params.push(n("attn.b_o"), Tensor::zeros(&[d]), false);
        let ln2_g = params.push(n("ln2.g"), Tensor::full(&[d], T::one()), false);
        let ln2_b = params.push(n("ln2.b"), Tensor::zeros(&[d]), false);
        let w_fc = w(params, &format!("h{l}.mlp.w_fc"), &[d, h]);
        let b_fc = params.push(n("mlp.b_fc"), Tensor::zeros(&[h]), false);
        let w_proj = w(params, &format!("h{l}.mlp.w_proj"), &[h, d]);
        let b_proj = params.push(n("mlp.b_proj"), Tensor::zeros(&[d]), false);
        blocks.push(BlockLayout { ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj });
    }
    let lnf_g = params.push(format!("{prefix}lnf.g"), Tensor::full(&[d], T::one()), false);
    let lnf_b = params.push(format!("{prefix}lnf.b"), Tensor::zeros(&[d]), false);
    let seg = config.use_segment_embeddings.then(|| w(params, "seg", &[2, d]));
    Ok(EncoderLayout { tok, pos, seg, blocks, lnf_g, lnf_b })
}

/// A batch of right-padded token rows, each `block` long.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub tokens: &'a [usize],
    pub block: usize,
    pub segments: Option<&'a [usize]>,
}

/// Records the encoder on `tape` and returns latents `[rows, d_model]`.
///
/// `vars` are the bound tensors of the whole [`ParamSet`] the layout indexes.
pub fn encode_on_tape<T: Float>(
    tape: &mut Tape<T>,
    config: &EncoderConfig,
    layout: &EncoderLayout,
    vars: &[Var],
    input: EncoderInput<'_>,
) -> Result<Var, EncoderError> {
    let EncoderInput { tokens, block, segments } = input;
    if block == 0 || tokens.len() % block != 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "encode",
            detail: format!("{} tokens in blocks of {block}", tokens.len()),
        }
        .into());
    }
    if block > config.max_positions {
        return Err(EncoderError::TooLong { len: block, max: config.max_positions });
    }
    if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= config.vocab_size) {
        return Err(EncoderError::TokenOutOfRange { token, position: position % block, vocab: config.vocab_size });
    }
    let positions: Vec<usize> = (0..tokens.len()).map(|r| r % block).collect();
    let mut inject = tape.embedding(vars[layout.pos], &positions)?;
    match (segments, layout.seg) {
        (None, _) => {}
        (Some(_), None) => return Err(EncoderError::NoSegmentTable),
        (Some(seg), Some(table)) => {
            if seg.len() != tokens.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "encode",
                    detail: format!("{} segment ids for {} tokens", seg.len(), tokens.len()),
                }
                .into());
            }
            if let Some(&s) = seg.iter().find(|&&s| s > 1) {
                return Err(EncoderError::BadSegment(s));
            }
            let s = tape.embedding(vars[table], seg)?;
            inject = tape.add(inject, s)?;
        }
    }
    let mut h = tape.embedding(vars[layout.tok], tokens)?;
    for b in &layout.blocks {
        let x = tape.add(h, inject)?;
        let n1 = tape.layer_norm(x, vars[b.ln1_g], vars[b.ln1_b])?;
        let qkv = tape.linear(n1, vars[b.w_qkv], vars[b.b_qkv])?;
        let att = tape.causal_attention(qkv, config.n_heads, block)?;
        let att = tape.linear(att, vars[b.w_o], vars[b.b_o])?;
        let x = tape.add(x, att)?;
        let n2 = tape.layer_norm(x, vars[b.ln2_g], vars[b.ln2_b])?;
        let m = tape.linear(n2, vars[b.w_fc], vars[b.b_fc])?;
        let m = tape.gelu(m)?;
        let m = tape.linear(m, vars[b.w_proj], vars[b.b_proj])?;
        h = tape.add(x, m)?;
    }
    Ok(tape.layer_norm(h, vars[layout.lnf_g], vars[layout.lnf_b])?)
}

/// A standalone encoder with its own parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
    pub layout: EncoderLayout,
}

impl<T: Float> Encoder<T> {
    pub fn init(config: EncoderConfig) -> Result<Self, EncoderError> {
        let mut params = ParamSet::new();
        let layout = init_into(&config, &mut params, "")?;
        Ok(Encoder { config, params, layout })
    }

    /// Parameter count excluding the segment table.
    pub fn param_count(&self) -> usize {
        self.params.count() - self.layout.seg.map_or(0, |s| self.params.get(s).numel())
    }

    /// Latents for one sequence whose first token is the sentinel.
    pub fn encode(&self, tokens: &[usize], segments: Option<&[usize]>) -> Result<Tensor<T>, EncoderError> {
        if tokens.is_empty() {
            return Err(NumericsError::ShapeMismatch { op: "encode", detail: "empty input".into() }.into());
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false)?;
        let out = encode_on_tape(
            &mut tape,
            &self.config,
            &self.layout,
            &vars,
            EncoderInput { tokens, block: tokens.len(), segments },
        )?;
        Ok(tape.value(out).clone())
    }

    /// Backward latents for `suffix`: row `k` is the encoding of `suffix[k..]`,
    /// and the final row (`k = suffix.len()`) is the sentinel-only encoding.
    pub fn reverse_encode(
        &self,
        suffix: &[usize],
        sentinel: usize,
        segments: Option<&[usize]>,
    ) -> Result<Tensor<T>, EncoderError> {
        let input = reversed_input(suffix, sentinel);
        let latents = self.encode(&input, segments)?;
        Ok(reindex_reversed(&latents))
    }
}

/// `[sentinel] + reversed(suffix)`.
pub fn reversed_input(suffix: &[usize], sentinel: usize) -> Vec<usize> {
    std::iter::once(sentinel).chain(suffix.iter().rev().copied()).collect()
}

/// Flips the row order of encoded `[sentinel] + reversed(suffix)` so row `k`
/// aligns with suffix start `k`.
pub fn reindex_reversed<T: Float>(latents: &Tensor<T>) -> Tensor<T> {
    let (rows, d) = latents.as_matrix_dims();
    let mut out = Vec::with_capacity(rows * d);
    for r in (0..rows).rev() {
        out.extend_from_slice(latents.row(r));
    }
    Tensor::new(vec![rows, d], out).expect("same size")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seg: bool) -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            mlp_factor: 1,
            vocab_size: 11,
            max_positions: 12,
            use_segment_embeddings: seg,
            seed: 7,
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg(false);
        c.n_heads = 3;
        assert!(matches!(Encoder::<f64>::init(c), Err(EncoderError::InvalidConfig(_))));
        let mut c = cfg(false);
        c.vocab_size = 1;
        assert!(Encoder::<f64>::init(c).is_err());
        let mut c = cfg(false);
        c.n_layers = 0;
        assert!(Encoder::<f64>::init(c).is_err());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let c = EncoderConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            mlp_factor: 1,
            vocab_size: 64,
            max_positions: 40,
            use_segment_embeddings: false,
            seed: 0,
        };
        let enc = Encoder::<f64>::init(c.clone()).unwrap();
        // tok 64*64 + pos 40*64 + per block (ln 128, qkv 64*192+192, out 64*64+64,
        // ln 128, fc 64*64+64, proj 64*64+64) + final ln 128.
        let block = 128 + (12288 + 192) + (4096 + 64) + 128 + (4096 + 64) + (4096 + 64);
        assert_eq!(enc.param_count(), 4096 + 2560 + 2 * block + 128);
        assert_eq!(enc.param_count(), c.param_count());
        assert_eq!(enc.params.count(), c.param_count());
    }

    #[test]
    fn errors_for_bad_tokens_and_length() {
        let enc = Encoder::<f64>::init(cfg(false)).unwrap();
        assert!(matches!(enc.encode(&[0, 11], None), Err(EncoderError::TokenOutOfRange { token: 11, .. })));
        let long: Vec<usize> = vec![1; 13];
        assert!(matches!(enc.encode(&long, None), Err(EncoderError::TooLong { len: 13, max: 12 })));
        assert!(matches!(enc.encode(&[1, 2], Some(&[0, 0])), Err(EncoderError::NoSegmentTable)));
    }

    #[test]
    fn sentinel_only_gives_one_latent() {
        let enc = Encoder::<f64>::init(cfg(false)).unwrap();
        let out = enc.encode(&[10], None).unwrap();
        assert_eq!(out.shape(), &[1, 16]);
        let b = enc.reverse_encode(&[], 10, None).unwrap();
        assert_eq!(b, out);
    }

    #[test]
    fn reverse_encode_reindexes() {
        let enc = Encoder::<f64>::init(cfg(false)).unwrap();
        let suffix = [3, 1, 4, 1, 5];
        let b = enc.reverse_encode(&suffix, 10, None).unwrap();
        for k in 0..=suffix.len() {
            let direct = enc.encode(&reversed_input(&suffix[k..], 10), None).unwrap();
            assert_eq!(b.row(k), direct.row(direct.shape()[0] - 1), "k={k}");
        }
    }
}
