use super::float::Float;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// One named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether AdamW applies weight decay to this tensor.
    pub decay: bool,
}

/// Ordered collection of named parameters. Indices are stable once pushed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> usize {
        self.entries.push(ParamEntry { name: name.into(), value, decay });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Scalar count over entries whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.value.numel()).sum()
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.decay).collect()
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Overwrites every value; shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<(), NumericsError> {
        if values.len() != self.entries.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "set_values",
                detail: format!("{} values for {} params", values.len(), self.entries.len()),
            });
        }
        for (e, v) in self.entries.iter().zip(&values) {
            if e.value.shape() != v.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "set_values",
                    detail: format!("{}: {:?} vs {:?}", e.name, e.value.shape(), v.shape()),
                });
            }
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v;
        }
        Ok(())
    }

    /// Records every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Vec<Var>, NumericsError> {
        self.entries.iter().map(|e| tape.leaf(e.value.clone(), trainable)).collect()
    }

    /// Like [`ParamSet::bind`] but only records entries whose name starts with
    /// one of `prefixes`; other slots hold a shared placeholder scalar.
    pub fn bind_prefixed(
        &self,
        tape: &mut Tape<T>,
        trainable: bool,
        prefixes: &[&str],
    ) -> Result<Vec<Var>, NumericsError> {
        let dummy = tape.constant(Tensor::scalar(T::zero()))?;
        self.entries
            .iter()
            .map(|e| {
                if prefixes.iter().any(|p| e.name.starts_with(p)) {
                    tape.leaf(e.value.clone(), trainable)
                } else {
                    Ok(dummy)
                }
            })
            .collect()
    }

    /// Gradients of bound parameters, zeros where none reached.
    pub fn grads(&self, tape: &Tape<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(vars)
            .map(|(e, &v)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(e.value.shape())))
            .collect()
    }
}
