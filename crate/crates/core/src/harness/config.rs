use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bst::{BstConfig, LossSpec, LossWeights};
use crate::encoder::EncoderConfig;
use crate::numerics::AdamWConfig;
use crate::stargraph::{prompt_len, token_count, BaselineKind};

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Stargraph,
    SyntheticCorpus,
    OracleVerify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Bst,
    BstImproved,
    Forward,
    DataAug,
    Fim,
    MultiToken,
    BstWoPrev,
    BstWoBackward,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Bst,
        ModelKind::BstImproved,
        ModelKind::Forward,
        ModelKind::DataAug,
        ModelKind::Fim,
        ModelKind::MultiToken,
        ModelKind::BstWoPrev,
        ModelKind::BstWoBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bst => "bst",
            ModelKind::BstImproved => "bst-improved",
            ModelKind::Forward => "forward",
            ModelKind::DataAug => "data-aug",
            ModelKind::Fim => "fim",
            ModelKind::MultiToken => "multi-token",
            ModelKind::BstWoPrev => "bst-wo-prev",
            ModelKind::BstWoBackward => "bst-wo-backward",
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            ModelKind::Forward => Some(BaselineKind::Forward),
            ModelKind::DataAug => Some(BaselineKind::DataAug),
            ModelKind::Fim => Some(BaselineKind::Fim),
            ModelKind::MultiToken => Some(BaselineKind::MultiToken),
            _ => None,
        }
    }

    pub fn is_bst(self) -> bool {
        self.baseline().is_none()
    }

    /// Objective implied by the kind, before config overrides.
    pub fn default_loss(self) -> LossSpec {
        match self {
            ModelKind::BstWoPrev => LossSpec { weights: LossWeights { gamma: 0.0, lambda: 1.0 }, ..LossSpec::default() },
            ModelKind::BstWoBackward => LossSpec { use_backward: false, ..LossSpec::default() },
            ModelKind::BstImproved => {
                LossSpec { weights: LossWeights { gamma: 0.9, lambda: 0.0 }, use_backward: true, subsample: 0.02 }
            }
            _ => LossSpec::default(),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown model kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_factor: usize,
    /// Hidden width of the BST output head.
    pub head_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StarGraphData {
    pub degree: usize,
    pub path_len: usize,
    pub n_nodes: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusData {
    pub count: usize,
    pub eval_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub batch_size: usize,
    /// Passes over the training set; ignored when `max_steps` is set.
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub optimizer: AdamWConfig,
    /// Optional override of the kind's loss weights.
    pub loss: Option<LossWeights>,
    /// Optional override of the kind's pair subsample fraction.
    pub subsample: Option<f64>,
    /// Optional override of encoder sharing.
    pub shared_encoders: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model_kind: ModelKind,
    pub model: ModelSpec,
    pub train: TrainSpec,
    #[serde(default)]
    pub stargraph: Option<StarGraphData>,
    #[serde(default)]
    pub corpus: Option<CorpusData>,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_every: u64,
}

fn invalid(path: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::InvalidConfig { path: path.to_string(), message: msg.into() }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| invalid(&e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let m = &self.model;
        if m.n_layers == 0 || m.d_model == 0 || m.n_heads == 0 || m.mlp_factor == 0 || m.head_hidden == 0 {
            return Err(invalid("model", "all sizes must be positive"));
        }
        if m.d_model % m.n_heads != 0 {
            return Err(invalid("model.n_heads", format!("{} does not divide d_model {}", m.n_heads, m.d_model)));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be positive"));
        }
        if t.epochs == 0 && t.max_steps.is_none() {
            return Err(invalid("train.epochs", "must be positive unless max_steps is set"));
        }
        t.optimizer.validate().map_err(|e| invalid("train.optimizer", e.to_string()))?;
        if let Some(w) = t.loss {
            w.validate().map_err(|e| invalid("train.loss", e.to_string()))?;
        }
        if let Some(s) = t.subsample {
            if !(s > 0.0 && s <= 1.0) {
                return Err(invalid("train.subsample", format!("{s} not in (0, 1]")));
            }
        }
        match self.task {
            Task::Stargraph => {
                let Some(g) = &self.stargraph else {
                    return Err(invalid("stargraph", "required for the stargraph task"));
                };
                if g.degree < 2 || g.path_len < 2 {
                    return Err(invalid("stargraph", "degree and path_len must be at least 2"));
                }
                if g.n_nodes < g.degree * (g.path_len - 1) + 1 {
                    return Err(invalid("stargraph.n_nodes", "too few nodes for the graph shape"));
                }
                if g.n_train == 0 || g.n_eval == 0 {
                    return Err(invalid("stargraph", "n_train and n_eval must be positive"));
                }
                if self.model_kind == ModelKind::BstImproved {
                    return Err(invalid("model_kind", "bst-improved runs on the synthetic corpus"));
                }
            }
            Task::SyntheticCorpus => {
                let Some(c) = &self.corpus else {
                    return Err(invalid("corpus", "required for the synthetic-corpus task"));
                };
                if c.count < 2 || !(c.eval_fraction > 0.0 && c.eval_fraction < 1.0) {
                    return Err(invalid("corpus", "need count >= 2 and eval_fraction in (0, 1)"));
                }
                if !matches!(self.model_kind, ModelKind::BstImproved | ModelKind::Forward) {
                    return Err(invalid("model_kind", "corpus runs support bst-improved and forward"));
                }
            }
            Task::OracleVerify => {}
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        let mut spec = self.model_kind.default_loss();
        if let Some(w) = self.train.loss {
            spec.weights = w;
        }
        if let Some(s) = self.train.subsample {
            spec.subsample = s;
        }
        spec
    }

    pub fn shared_encoders(&self) -> bool {
        self.train.shared_encoders.unwrap_or(self.model_kind == ModelKind::BstImproved)
    }

    /// Longest encoder input the task can produce, sentinel included.
    pub fn max_positions(&self) -> usize {
        match (&self.task, &self.stargraph) {
            (Task::Stargraph, Some(g)) => {
                let (d, l) = (g.degree, g.path_len);
                token_count(d, l).max(prompt_len(d, l) + 2 * l + 2) + 1
            }
            _ => super::corpus::MAX_STORY_TOKENS + 1,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            mlp_factor: m.mlp_factor,
            vocab_size,
            max_positions: self.max_positions(),
            use_segment_embeddings: false,
            seed: self.seed,
        }
    }

    pub fn bst_config(&self, vocab_size: usize, bos: usize, eos: usize) -> BstConfig {
        BstConfig {
            encoder: self.encoder_config(vocab_size),
            shared_encoders: self.shared_encoders(),
            head_hidden: self.model.head_hidden,
            gpt_head: self.loss_spec().weights.gamma > 0.0,
            bos,
            eos,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> ExperimentConfig {
        ExperimentConfig {
            task: Task::Stargraph,
            model_kind: ModelKind::Bst,
            model: ModelSpec { n_layers: 1, d_model: 16, n_heads: 2, mlp_factor: 1, head_hidden: 16 },
            train: TrainSpec {
                batch_size: 4,
                epochs: 1,
                max_steps: Some(3),
                optimizer: AdamWConfig::default(),
                loss: None,
                subsample: None,
                shared_encoders: None,
            },
            stargraph: Some(StarGraphData { degree: 2, path_len: 3, n_nodes: 10, n_train: 8, n_eval: 4 }),
            corpus: None,
            seed: 1,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }

    #[test]
    fn json_round_trip() {
        let c = sample();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn errors_carry_paths() {
        let mut v: serde_json::Value = serde_json::from_str(&sample().to_json()).unwrap();
        v["model"]["d_model"] = serde_json::json!("wide");
        let e = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(e.to_string().contains("model.d_model"), "{e}");

        let mut c = sample();
        c.model.n_heads = 3;
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("model.n_heads"), "{e}");
    }

    #[test]
    fn kinds_parse_and_wire_losses() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!(!ModelKind::BstWoBackward.default_loss().use_backward);
        assert_eq!(ModelKind::BstWoPrev.default_loss().weights.lambda, 1.0);
        assert_eq!(ModelKind::BstImproved.default_loss().subsample, 0.02);
    }
}
