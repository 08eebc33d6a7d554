use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
use super::config::{ExperimentConfig, ModelKind, Task};
use super::corpus::{gen_synthetic_corpus, Corpus};
use super::dataset::{graph_record, stargraph_split, write_jsonl, Record, StarGraphSplit};
use super::metrics::{MetricsLog, MetricsRow};
use super::{HarnessError, RunLock};
use crate::bst::{
    bst_loss, train_step_two_phase, BatchPlan, BstModel, GptConfig, GptExample, GptModel, LossSpec, LossWeights,
};
use crate::decoding::{argmax, BeliefModel, BstDecoder};
use crate::numerics::{AdamWState, ParamSet};
use crate::stargraph::{
    eval_path_accuracy, fim_prompt, make_baseline_example, multi_token_example, prompt_tokens, tokenize, BaselineKind,
    PathAccuracy, StarGraph, Vocab,
};

/// A model under training; runs use 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub enum Trainee {
    Bst(BstModel<f32>),
    Gpt(GptModel<f32>),
}

impl Trainee {
    pub fn init(cfg: &ExperimentConfig, vocab_size: usize, bos: usize, eos: usize) -> Result<Self, HarnessError> {
        Ok(if cfg.model_kind.is_bst() {
            Trainee::Bst(BstModel::init(cfg.bst_config(vocab_size, bos, eos))?)
        } else {
            Trainee::Gpt(GptModel::init(GptConfig { encoder: cfg.encoder_config(vocab_size), bos })?)
        })
    }

    pub fn params(&self) -> &ParamSet<f32> {
        match self {
            Trainee::Bst(m) => &m.params,
            Trainee::Gpt(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        match self {
            Trainee::Bst(m) => &mut m.params,
            Trainee::Gpt(m) => &mut m.params,
        }
    }

    pub fn encoder_param_count(&self) -> usize {
        match self {
            Trainee::Bst(m) => m.encoder_param_count(),
            Trainee::Gpt(m) => m.params.count_prefix("enc."),
        }
    }

    fn load_params(&mut self, tensors: Vec<(String, crate::numerics::Tensor<f32>)>) -> Result<(), HarnessError> {
        let params = self.params_mut();
        if tensors.len() != params.len() {
            return Err(super::CheckpointError::Mismatch(format!("{} tensors for {} parameters", tensors.len(), params.len()))
                .into());
        }
        let mut values = Vec::with_capacity(tensors.len());
        for (e, (name, t)) in params.entries().iter().zip(tensors) {
            if e.name != name || e.value.shape() != t.shape() {
                return Err(super::CheckpointError::Mismatch(format!("parameter {} vs stored {name}", e.name)).into());
            }
            values.push(t);
        }
        params.set_values(values)?;
        Ok(())
    }
}

/// Task data shared by every model kind under one config.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskData {
    Graphs(StarGraphSplit),
    Stories(Corpus),
}

impl TaskData {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        match cfg.task {
            Task::Stargraph => {
                let data = cfg.stargraph.as_ref().expect("validated");
                Ok(TaskData::Graphs(stargraph_split(data, cfg.seed)?))
            }
            Task::SyntheticCorpus => {
                let c = cfg.corpus.as_ref().expect("validated");
                Ok(TaskData::Stories(gen_synthetic_corpus(cfg.seed, c.count, c.eval_fraction)))
            }
            Task::OracleVerify => Err(HarnessError::InvalidConfig {
                path: "task".into(),
                message: "oracle-verify has no training data".into(),
            }),
        }
    }

    pub fn train_len(&self) -> usize {
        match self {
            TaskData::Graphs(s) => s.train.len(),
            TaskData::Stories(c) => c.train.len(),
        }
    }

    /// `(vocab size, bos, eos)`.
    pub fn vocab(&self) -> (usize, usize, usize) {
        match self {
            TaskData::Graphs(s) => (s.vocab.size(), s.vocab.bos(), s.vocab.eos()),
            TaskData::Stories(c) => (c.vocab_size(), c.bos, c.eos),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: bool,
    /// Stop before this step without a final checkpoint, as if killed.
    pub stop_at: Option<u64>,
    /// Write the dataset JSONL files into the output directory.
    pub write_datasets: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions { out_dir: out_dir.into(), resume: false, stop_at: None, write_datasets: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model_kind: ModelKind,
    pub task: Task,
    pub steps: u64,
    pub completed: bool,
    pub last: Option<MetricsRow>,
    pub eval: Option<PathAccuracy>,
    pub eval_next_loss: Option<f64>,
    pub encoder_params: usize,
    pub total_params: usize,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const LATEST_CHECKPOINT: &str = "latest.bst";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:08}.bst"))
}

/// Checkpoints saved under `out_dir`, sorted by step.
pub fn list_checkpoints(out_dir: &Path) -> Result<Vec<(u64, PathBuf)>, HarnessError> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let step = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("step_"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            out.push((step, p));
        }
    }
    out.sort();
    Ok(out)
}

pub fn steps_per_epoch(n_train: usize, batch: usize) -> u64 {
    n_train.div_ceil(batch) as u64
}

pub fn total_steps(cfg: &ExperimentConfig, n_train: usize) -> u64 {
    cfg.train.max_steps.unwrap_or(cfg.train.epochs as u64 * steps_per_epoch(n_train, cfg.train.batch_size))
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch + 1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Greedy path decode for a star-graph model of the given kind.
pub fn decode_path(tr: &Trainee, kind: ModelKind, g: &StarGraph, v: &Vocab) -> Result<Vec<usize>, HarnessError> {
    match (tr, kind.baseline()) {
        (Trainee::Bst(m), _) => {
            let dec = BstDecoder::new(m);
            let mut p = prompt_tokens(g, v);
            let mut out = Vec::with_capacity(g.l);
            for _ in 0..g.l {
                let t = argmax(&BeliefModel::next_logprobs(&dec, &p, &[])?);
                out.push(t);
                p.push(t);
            }
            Ok(out)
        }
        (Trainee::Gpt(m), Some(BaselineKind::MultiToken)) => {
            let ex = multi_token_example(g, v);
            let lp = m.logprobs_all(&ex.tokens)?;
            Ok(lp[lp.len() - g.l..].iter().map(|row| argmax(row)).collect())
        }
        (Trainee::Gpt(m), b) => {
            let mut p = if b == Some(BaselineKind::Fim) { fim_prompt(g, v) } else { prompt_tokens(g, v) };
            let mut out = Vec::with_capacity(g.l);
            for _ in 0..g.l {
                let t = argmax(&m.next_logprobs(&p)?);
                out.push(t);
                p.push(t);
            }
            Ok(out)
        }
    }
}

pub fn eval_stargraph(tr: &Trainee, kind: ModelKind, graphs: &[StarGraph], v: &Vocab) -> Result<PathAccuracy, HarnessError> {
    let err = std::cell::RefCell::new(None);
    let acc = eval_path_accuracy(
        &|g: &StarGraph, v: &Vocab| match decode_path(tr, kind, g, v) {
            Ok(p) => p,
            Err(e) => {
                err.borrow_mut().get_or_insert(e);
                Vec::new()
            }
        },
        graphs,
        v,
    );
    match err.into_inner() {
        Some(e) => Err(e),
        None => Ok(acc),
    }
}

/// Mean per-story next-token loss on held-out stories; BST models report
/// their GPT head.
pub fn eval_corpus_loss(tr: &Trainee, stories: &[Vec<usize>], bos: usize) -> Result<f64, HarnessError> {
    let mut total = 0.0;
    for chunk in stories.chunks(32) {
        let l = match tr {
            Trainee::Gpt(m) => {
                let ex: Vec<GptExample> = chunk.iter().map(|x| GptExample::next_token(x, bos)).collect();
                m.loss(&ex)?.loss
            }
            Trainee::Bst(m) if m.head.gpt.is_some() => {
                let plan = BatchPlan::full(chunk, m.vocab_size())?;
                let spec = LossSpec { weights: LossWeights { gamma: 1.0, lambda: 0.5 }, use_backward: false, subsample: 1.0 };
                bst_loss(m, &plan, &spec)?.gpt_loss.expect("gpt head present")
            }
            Trainee::Bst(_) => {
                return Err(HarnessError::InvalidConfig {
                    path: "model_kind".into(),
                    message: "corpus evaluation needs a GPT head".into(),
                })
            }
        };
        total += l * chunk.len() as f64;
    }
    Ok(total / stories.len().max(1) as f64)
}

struct State {
    trainee: Trainee,
    opt: AdamWState<f32>,
    rng: ChaCha8Rng,
    step: u64,
}

fn fresh_state(cfg: &ExperimentConfig, data: &TaskData) -> Result<State, HarnessError> {
    let (v, bos, eos) = data.vocab();
    let trainee = Trainee::init(cfg, v, bos, eos)?;
    let p = trainee.params();
    let mut mask = p.decay_mask();
    if !cfg.loss_spec().use_backward {
        for (m, e) in mask.iter_mut().zip(p.entries()) {
            *m &= !e.name.starts_with("bwd.");
        }
    }
    let opt = AdamWState::new(cfg.train.optimizer, &p.values(), mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    Ok(State { trainee, opt, rng, step: 0 })
}

pub fn load_state_into(cfg: &ExperimentConfig, data: &TaskData, path: &Path) -> Result<(Trainee, Checkpoint<f32>), HarnessError> {
    let ck: Checkpoint<f32> = load_checkpoint(path)?;
    let (v, bos, eos) = data.vocab();
    let mut trainee = Trainee::init(cfg, v, bos, eos)?;
    trainee.load_params(ck.tensors.clone())?;
    Ok((trainee, ck))
}

fn resume_state(cfg: &ExperimentConfig, data: &TaskData, out_dir: &Path) -> Result<State, HarnessError> {
    let path = out_dir.join(LATEST_CHECKPOINT);
    if !path.exists() {
        return Err(HarnessError::Resume(format!("no checkpoint at {}", path.display())));
    }
    let (trainee, ck) = load_state_into(cfg, data, &path)?;
    let stored = ExperimentConfig::from_json(&ck.config_json)?;
    if &stored != cfg {
        return Err(HarnessError::Resume("checkpoint was written under a different config".into()));
    }
    let opt = ck.optimizer.ok_or_else(|| HarnessError::Resume("checkpoint has no optimizer state".into()))?;
    Ok(State { trainee, opt, rng: ck.rng.restore(), step: ck.step })
}

fn write_checkpoint(cfg: &ExperimentConfig, st: &State, out_dir: &Path) -> Result<(), HarnessError> {
    let ck = Checkpoint {
        config_json: cfg.to_json(),
        step: st.step,
        rng: RngState::capture(&st.rng),
        tensors: st.trainee.params().entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect(),
        optimizer: Some(st.opt.clone()),
    };
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))?;
    let path = checkpoint_path(out_dir, st.step);
    save_checkpoint(&ck, &path).map_err(|e| match e {
        super::CheckpointError::Io(io) => HarnessError::from_io(io, &path),
        other => other.into(),
    })?;
    fs::copy(&path, out_dir.join(LATEST_CHECKPOINT)).map_err(|e| HarnessError::from_io(e, &path))?;
    Ok(())
}

fn train_step(cfg: &ExperimentConfig, spec: &LossSpec, data: &TaskData, st: &mut State, batch: &[usize]) -> Result<MetricsRow, HarnessError> {
    let mut row = MetricsRow::default();
    match (&mut st.trainee, data) {
        (Trainee::Bst(m), _) => {
            let seqs: Vec<Vec<usize>> = match data {
                TaskData::Graphs(s) => batch.iter().map(|&i| tokenize(&s.train[i], &s.vocab)).collect(),
                TaskData::Stories(c) => batch.iter().map(|&i| c.train[i].clone()).collect(),
            };
            let plan = BatchPlan::sampled(&seqs, m.vocab_size(), spec.subsample, &mut st.rng)?;
            let sm = train_step_two_phase(m, &plan, spec, &mut st.opt)?;
            row.loss = sm.loss;
            row.next_loss = sm.next_loss;
            row.prev_loss = sm.prev_loss;
            row.gpt_loss = sm.gpt_loss;
            row.pairs_per_sec = sm.head_evals as f64;
        }
        (Trainee::Gpt(m), TaskData::Graphs(s)) => {
            let kind = cfg.model_kind.baseline().expect("gpt trainee has a baseline kind");
            let ex = batch
                .iter()
                .map(|&i| make_baseline_example(kind, &s.train[i], &s.vocab, &mut st.rng))
                .collect::<Result<Vec<_>, _>>()?;
            let gm = m.train_step(&ex, &mut st.opt)?;
            row.loss = gm.loss;
            row.gpt_loss = Some(gm.loss);
            row.pairs_per_sec = gm.targets as f64;
        }
        (Trainee::Gpt(m), TaskData::Stories(c)) => {
            let ex: Vec<GptExample> = batch.iter().map(|&i| GptExample::next_token(&c.train[i], c.bos)).collect();
            let gm = m.train_step(&ex, &mut st.opt)?;
            row.loss = gm.loss;
            row.gpt_loss = Some(gm.loss);
            row.pairs_per_sec = gm.targets as f64;
        }
    }
    Ok(row)
}

fn evaluate(cfg: &ExperimentConfig, tr: &Trainee, data: &TaskData, row: &mut MetricsRow) -> Result<Option<PathAccuracy>, HarnessError> {
    match data {
        TaskData::Graphs(s) => {
            let acc = eval_stargraph(tr, cfg.model_kind, &s.eval, &s.vocab)?;
            row.eval_accuracy = Some(acc.accuracy);
            Ok(Some(acc))
        }
        TaskData::Stories(c) => {
            row.eval_next_loss = Some(eval_corpus_loss(tr, &c.eval, c.bos)?);
            Ok(None)
        }
    }
}

fn write_data_files(data: &TaskData, out_dir: &Path) -> Result<(), HarnessError> {
    let dir = out_dir.join("data");
    fs::create_dir_all(&dir)?;
    match data {
        TaskData::Graphs(s) => {
            let rec = |gs: &[StarGraph]| gs.iter().map(|g| graph_record(g, &s.vocab)).collect::<Vec<_>>();
            write_jsonl(&dir.join("train.jsonl"), &rec(&s.train))?;
            write_jsonl(&dir.join("eval.jsonl"), &rec(&s.eval))?;
        }
        TaskData::Stories(c) => {
            let rec = |xs: &[Vec<usize>]| {
                xs.iter().map(|x| Record { tokens: x.clone(), meta: serde_json::json!({ "text": c.decode(x) }) }).collect::<Vec<_>>()
            };
            write_jsonl(&dir.join("train.jsonl"), &rec(&c.train))?;
            write_jsonl(&dir.join("eval.jsonl"), &rec(&c.eval))?;
            fs::write(dir.join("vocab.json"), serde_json::to_string(&c.vocab)?)?;
        }
    }
    Ok(())
}

/// Trains `cfg` into `opts.out_dir`, writing metrics, checkpoints and a
/// final summary. Deterministic in the config.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&opts.out_dir)?;
    let data = TaskData::build(cfg)?;
    fs::write(opts.out_dir.join("config.json"), cfg.to_json())?;
    if opts.write_datasets {
        write_data_files(&data, &opts.out_dir)?;
    }
    let spec = cfg.loss_spec();
    let mut st = if opts.resume { resume_state(cfg, &data, &opts.out_dir)? } else { fresh_state(cfg, &data)? };
    let mut log = MetricsLog::open(&opts.out_dir, opts.resume.then_some(st.step)).map_err(|e| HarnessError::from_io(e, &opts.out_dir))?;
    let n = data.train_len();
    let spe = steps_per_epoch(n, cfg.train.batch_size);
    let total = total_steps(cfg, n);
    let t0 = Instant::now();
    let mut order = (u64::MAX, Vec::new());
    let mut last = None;
    let mut eval = None;
    log::info!("{} on {:?}: {} steps from step {}", cfg.model_kind.name(), cfg.task, total, st.step);

    while st.step < total {
        if opts.stop_at == Some(st.step) {
            break;
        }
        let epoch = st.step / spe;
        if order.0 != epoch {
            order = (epoch, epoch_order(cfg.seed, epoch, n));
        }
        let k = (st.step % spe) as usize * cfg.train.batch_size;
        let batch = order.1[k..(k + cfg.train.batch_size).min(n)].to_vec();
        let ts = Instant::now();
        let mut row = train_step(cfg, &spec, &data, &mut st, &batch)?;
        st.step += 1;
        row.step = st.step;
        row.epoch = epoch;
        row.pairs_per_sec /= ts.elapsed().as_secs_f64().max(1e-9);
        let at_end = st.step == total;
        if at_end || (cfg.eval_every > 0 && st.step % cfg.eval_every == 0) {
            eval = evaluate(cfg, &st.trainee, &data, &mut row)?;
            log::info!("step {} loss {:.4} eval {:?} {:?}", st.step, row.loss, row.eval_accuracy, row.eval_next_loss);
        }
        row.wall_clock_s = t0.elapsed().as_secs_f64();
        log.append(&row).map_err(|e| HarnessError::from_io(e, &log.path))?;
        if at_end || (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0) {
            write_checkpoint(cfg, &st, &opts.out_dir)?;
        }
        last = Some(row);
    }

    let completed = st.step == total;
    if completed && last.is_none() {
        let mut row = MetricsRow { step: st.step, ..Default::default() };
        eval = evaluate(cfg, &st.trainee, &data, &mut row)?;
        last = Some(row);
    }
    let summary = RunSummary {
        model_kind: cfg.model_kind,
        task: cfg.task,
        steps: st.step,
        completed,
        eval_next_loss: last.as_ref().and_then(|r| r.eval_next_loss),
        last,
        eval,
        encoder_params: st.trainee.encoder_param_count(),
        total_params: st.trainee.params().count(),
    };
    if completed {
        fs::write(opts.out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

pub fn read_summary(out_dir: &Path) -> Result<RunSummary, HarnessError> {
    Ok(serde_json::from_str(&fs::read_to_string(out_dir.join(SUMMARY_FILE))?)?)
}
