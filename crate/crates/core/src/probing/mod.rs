//! MLP probes on frozen encoder states.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bst::{BstError, BstModel, GptModel};
use crate::encoder::{gaussian, INIT_STD};
use crate::numerics::{AdamWConfig, AdamWState, Float, NumericsError, Tape, Tensor};
use crate::stargraph::{tokenize, StarGraph, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("anchor {anchor} outside a sequence of {len} tokens")]
    AnchorOutOfRange { anchor: usize, len: usize },
    #[error("targets have a single class")]
    SingleClass,
    #[error("{latents} latents but {targets} targets")]
    LengthMismatch { latents: usize, targets: usize },
    #[error("model {model} has {found} checkpoints; need at least {needed}")]
    MissingCheckpoints { model: String, found: usize, needed: usize },
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] BstError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// Token `offset` steps after the anchor.
    Future,
    /// Edge-list token at a fixed sequence position.
    Graph,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetKind::Future => "future",
            TargetKind::Graph => "graph",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub val_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    /// Offsets after the anchor for future-token targets.
    pub offsets: Vec<usize>,
    /// Sequence positions for graph-description targets.
    pub graph_positions: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 128,
            val_fraction: 0.2,
            epochs: 60,
            batch_size: 64,
            lr: 3e-3,
            seeds: vec![0, 1, 2, 3, 4],
            offsets: vec![1, 2, 3, 4],
            graph_positions: vec![0, 1],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 || self.seeds.is_empty() {
            return Err(ProbeError::InvalidConfig("hidden, epochs, batch size and seeds must be nonzero".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(ProbeError::InvalidConfig(format!("val fraction {}", self.val_fraction)));
        }
        Ok(())
    }

    pub fn probe_param_count(&self, d: usize, classes: usize) -> usize {
        d * self.hidden + self.hidden + self.hidden * classes + classes
    }
}

/// Anything that exposes causal forward states: row `i` has read `x[..i]`.
pub trait LatentSource {
    fn d_model(&self) -> usize;
    fn latents(&self, x: &[usize]) -> Result<Vec<Vec<f64>>, ProbeError>;
}

fn rows<T: Float>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|r| t.row(r).iter().map(|v| v.as_f64()).collect()).collect()
}

impl<T: Float> LatentSource for BstModel<T> {
    fn d_model(&self) -> usize {
        BstModel::d_model(self)
    }

    fn latents(&self, x: &[usize]) -> Result<Vec<Vec<f64>>, ProbeError> {
        Ok(rows(&self.forward_latents(x)?))
    }
}

impl<T: Float> LatentSource for GptModel<T> {
    fn d_model(&self) -> usize {
        self.config.encoder.d_model
    }

    fn latents(&self, x: &[usize]) -> Result<Vec<Vec<f64>>, ProbeError> {
        Ok(rows(&GptModel::latents(self, x)?))
    }
}

/// Latents at the anchor with labels for every requested target.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub latents: Vec<Vec<f64>>,
    pub targets: BTreeMap<(TargetKind, usize), Vec<usize>>,
}

/// Sequence index of the first path token.
pub fn path_anchor(g: &StarGraph) -> usize {
    crate::stargraph::prompt_len(g.d, g.l)
}

/// Collects the state that has just read `x[anchor]`, i.e. the first path
/// token, and labels `x[anchor + offset]` and `x[position]`.
pub fn collect_latents<S: LatentSource + ?Sized>(
    model: &S,
    graphs: &[StarGraph],
    v: &Vocab,
    cfg: &ProbeConfig,
) -> Result<ProbeData, ProbeError> {
    let mut data = ProbeData { latents: Vec::with_capacity(graphs.len()), targets: BTreeMap::new() };
    for g in graphs {
        let x = tokenize(g, v);
        let anchor = path_anchor(g);
        let far = cfg.offsets.iter().map(|o| anchor + o).chain(cfg.graph_positions.iter().copied()).max().unwrap_or(anchor);
        if far >= x.len() {
            return Err(ProbeError::AnchorOutOfRange { anchor: far, len: x.len() });
        }
        let lat = model.latents(&x[..=anchor])?;
        data.latents.push(lat[anchor + 1].clone());
        for &o in &cfg.offsets {
            data.targets.entry((TargetKind::Future, o)).or_default().push(x[anchor + o]);
        }
        for &p in &cfg.graph_positions {
            data.targets.entry((TargetKind::Graph, p)).or_default().push(x[p]);
        }
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Majority-class rate on the held-out split.
    pub chance: f64,
    pub params: usize,
}

/// Trains a two-layer ReLU probe on an 80/20 split (by `cfg.val_fraction`)
/// and reports held-out accuracy.
pub fn train_probe(latents: &[Vec<f64>], targets: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult, ProbeError> {
    cfg.validate()?;
    if latents.len() != targets.len() {
        return Err(ProbeError::LengthMismatch { latents: latents.len(), targets: targets.len() });
    }
    let mut classes: Vec<usize> = targets.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(ProbeError::SingleClass);
    }
    let k = classes.len();
    let label = |t: usize| classes.binary_search(&t).expect("collected above");
    let d = latents[0].len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((latents.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, latents.len() - 1);
    let (val, train) = order.split_at(n_val);

    let mut params: Vec<Tensor<f64>> = vec![
        gaussian(&mut rng, &[d, cfg.hidden], (2.0 / d as f64).sqrt()),
        Tensor::zeros(&[cfg.hidden]),
        gaussian(&mut rng, &[cfg.hidden, k], INIT_STD),
        Tensor::zeros(&[k]),
    ];
    let mut opt = AdamWState::new(
        AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() },
        &params,
        vec![true, false, true, false],
    )?;
    let batch = |idx: &[usize]| -> Tensor<f64> {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&latents[i]);
        }
        Tensor::new(vec![idx.len(), d], data).expect("rectangular latents")
    };

    let mut train = train.to_vec();
    for _ in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(batch(chunk))?;
            let vars = params.iter().map(|p| tape.param(p.clone())).collect::<Result<Vec<_>, _>>()?;
            let h = tape.linear(x, vars[0], vars[1])?;
            let h = tape.relu(h)?;
            let logits = tape.linear(h, vars[2], vars[3])?;
            let y: Vec<usize> = chunk.iter().map(|&i| label(targets[i])).collect();
            let loss = tape.cross_entropy_mean(logits, &y)?;
            tape.backward(loss)?;
            let grads: Vec<Tensor<f64>> =
                vars.iter().map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))).collect();
            opt.step(&mut params, &grads)?;
        }
    }

    let mut tape = Tape::new();
    let x = tape.constant(batch(val))?;
    let vars = params.iter().map(|p| tape.constant(p.clone())).collect::<Result<Vec<_>, _>>()?;
    let h = tape.linear(x, vars[0], vars[1])?;
    let h = tape.relu(h)?;
    let logits = tape.linear(h, vars[2], vars[3])?;
    let lv = tape.value(logits);
    let mut correct = 0;
    let mut counts = vec![0usize; k];
    for (r, &i) in val.iter().enumerate() {
        let row = lv.row(r);
        let pred = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        let y = label(targets[i]);
        correct += usize::from(pred == y);
        counts[y] += 1;
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / val.len() as f64,
        chance: *counts.iter().max().unwrap() as f64 / val.len() as f64,
        params: cfg.probe_param_count(d, k),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub model: String,
    pub checkpoint_step: u64,
    pub target_kind: TargetKind,
    pub offset: usize,
    pub accuracy: f64,
    pub chance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub const CSV_HEADER: &'static str = "model,checkpoint_step,target_kind,offset,accuracy,chance";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{:.6},{:.6}", r.model, r.checkpoint_step, r.target_kind, r.offset, r.accuracy, r.chance)?;
        }
        Ok(())
    }

    pub fn accuracy(&self, model: &str, step: Option<u64>, kind: TargetKind, offset: usize) -> Option<f64> {
        let matching = self.rows.iter().filter(|r| r.model == model && r.target_kind == kind && r.offset == offset);
        match step {
            Some(s) => matching.filter(|r| r.checkpoint_step == s).map(|r| r.accuracy).next(),
            None => matching.max_by_key(|r| r.checkpoint_step).map(|r| r.accuracy),
        }
    }
}

/// Probes one model state on every configured target, averaging over seeds.
pub fn probe_model<S: LatentSource + ?Sized>(
    name: &str,
    step: u64,
    model: &S,
    graphs: &[StarGraph],
    v: &Vocab,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeRow>, ProbeError> {
    let data = collect_latents(model, graphs, v, cfg)?;
    let mut out = Vec::new();
    for (&(kind, offset), targets) in &data.targets {
        let (mut acc, mut chance) = (0.0, 0.0);
        for &seed in &cfg.seeds {
            let r = train_probe(&data.latents, targets, cfg, seed)?;
            acc += r.accuracy;
            chance += r.chance;
        }
        let n = cfg.seeds.len() as f64;
        out.push(ProbeRow { model: name.to_string(), checkpoint_step: step, target_kind: kind, offset, accuracy: acc / n, chance: chance / n });
    }
    Ok(out)
}

pub struct ProbeCheckpoint<'a> {
    pub model: String,
    pub step: u64,
    pub source: &'a dyn LatentSource,
}

pub const MIN_CHECKPOINTS: usize = 3;

/// Probe accuracies across training checkpoints for each model.
pub fn probe_schedule_report(
    checkpoints: &[ProbeCheckpoint<'_>],
    graphs: &[StarGraph],
    v: &Vocab,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, ProbeError> {
    let mut per_model: BTreeMap<&str, usize> = BTreeMap::new();
    for c in checkpoints {
        *per_model.entry(&c.model).or_default() += 1;
    }
    if let Some((m, &n)) = per_model.iter().find(|(_, &n)| n < MIN_CHECKPOINTS) {
        return Err(ProbeError::MissingCheckpoints { model: m.to_string(), found: n, needed: MIN_CHECKPOINTS });
    }
    if checkpoints.is_empty() {
        return Err(ProbeError::MissingCheckpoints { model: String::new(), found: 0, needed: MIN_CHECKPOINTS });
    }
    let mut report = ProbeReport::default();
    for c in checkpoints {
        report.rows.extend(probe_model(&c.model, c.step, c.source, graphs, v, cfg)?);
    }
    Ok(report)
}
