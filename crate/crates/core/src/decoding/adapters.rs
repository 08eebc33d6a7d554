use std::cell::RefCell;
use std::collections::HashMap;

use super::{BeliefModel, DecodeError, NextTokenModel};
use crate::bst::{BstModel, GptModel};
use crate::numerics::Float;

/// Decoding view of a [`BstModel`] that caches backward latents per suffix,
/// so `B(∅)` and a fixed goal are each encoded once.
#[derive(Debug)]
pub struct BstDecoder<'a, T> {
    pub model: &'a BstModel<T>,
    suffix_cache: RefCell<HashMap<Vec<usize>, Vec<T>>>,
}

impl<'a, T: Float> BstDecoder<'a, T> {
    pub fn new(model: &'a BstModel<T>) -> Self {
        BstDecoder { model, suffix_cache: RefCell::new(HashMap::new()) }
    }

    fn suffix_latent(&self, suffix: &[usize]) -> Result<Vec<T>, DecodeError> {
        if let Some(b) = self.suffix_cache.borrow().get(suffix) {
            return Ok(b.clone());
        }
        let b = self.model.backward_latents(suffix)?.row(0).to_vec();
        let mut cache = self.suffix_cache.borrow_mut();
        if cache.len() > 4096 {
            cache.clear();
        }
        cache.insert(suffix.to_vec(), b.clone());
        Ok(b)
    }

    fn heads(&self, prefix: &[usize], suffix: &[usize]) -> Result<(Vec<f64>, Vec<f64>), DecodeError> {
        let f = self.model.forward_latents(prefix)?;
        let b = self.suffix_latent(suffix)?;
        Ok(self.model.head_logprobs(f.row(prefix.len()), &b)?)
    }
}

impl<T: Float> BeliefModel for BstDecoder<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn next_logprobs(&self, prefix: &[usize], suffix: &[usize]) -> Result<Vec<f64>, DecodeError> {
        Ok(self.heads(prefix, suffix)?.0)
    }

    fn prev_logprobs(&self, prefix: &[usize], suffix: &[usize]) -> Result<Vec<f64>, DecodeError> {
        Ok(self.heads(prefix, suffix)?.1)
    }
}

/// Empty-suffix next-token view, as used for autoregressive sampling.
impl<T: Float> NextTokenModel for BstDecoder<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn next_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError> {
        BeliefModel::next_logprobs(self, prefix, &[])
    }
}

/// Next-token view of a belief model with a fixed suffix.
#[derive(Debug)]
pub struct GoalConditioned<'a, M: ?Sized> {
    pub model: &'a M,
    pub goal: Vec<usize>,
}

impl<M: BeliefModel + ?Sized> NextTokenModel for GoalConditioned<'_, M> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn next_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError> {
        self.model.next_logprobs(prefix, &self.goal)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GptDecoder<'a, T> {
    pub model: &'a GptModel<T>,
}

impl<T: Float> NextTokenModel for GptDecoder<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn next_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>, DecodeError> {
        Ok(self.model.next_logprobs(prefix)?)
    }
}
