use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bst_core::bst::{bst_loss, BatchPlan, BstConfig, BstModel, LossSpec};
use bst_core::decoding::{ars_generate, plan_goal_conditioned, BstDecoder, PlanConfig, SampleMode};
use bst_core::encoder::EncoderConfig;
use bst_core::harness::run::{
    decode_path, eval_corpus_loss, eval_stargraph, list_checkpoints, load_state_into, TaskData, LATEST_CHECKPOINT,
};
use bst_core::harness::verify::verify_report;
use bst_core::harness::{run, ExperimentConfig, ModelKind, RunOptions, Trainee};
use bst_core::probing::{probe_schedule_report, LatentSource, ProbeCheckpoint, ProbeConfig};
use bst_core::stargraph::{prompt_tokens, token_count};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "bst", about = "Belief State Transformer laboratory")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model described by --config into --out-dir.
    Train {
        #[arg(long)]
        model_kind: Option<ModelKind>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write the datasets as JSONL.
        #[arg(long)]
        write_data: bool,
    },
    /// Evaluate a run's latest (or given) checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Autoregressive sampling with the empty suffix.
    Generate {
        /// Space-separated words (corpus runs) or token ids.
        #[arg(long, default_value = "")]
        prompt: String,
        /// Eval graph index for star-graph runs.
        #[arg(long, default_value_t = 0)]
        graph: usize,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
        /// 0 means greedy.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Goal-conditioned planning between a prefix and a goal.
    Plan {
        #[arg(long)]
        prefix: String,
        #[arg(long)]
        goal: String,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
    /// Probe the checkpoints of one or more runs.
    Probe {
        /// Run directories to compare; defaults to --out-dir.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        graphs: usize,
        /// CSV output path; stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Exact oracle and parity checks.
    Verify,
    /// Head-evaluation and attention counters plus step throughput.
    Bench {
        #[arg(long, default_value_t = 2)]
        degree: usize,
        #[arg(long, default_value_t = 5)]
        path_len: usize,
        #[arg(long, default_value_t = 256)]
        head_hidden: usize,
        #[arg(long, default_value_t = 4)]
        reps: usize,
    },
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out_dir.as_deref().context("--out-dir is required")
}

/// The run's config, from --config or the run directory.
fn run_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = match (&cli.config, &cli.out_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("config.json"),
        _ => bail!("need --config or --out-dir"),
    };
    let mut cfg = ExperimentConfig::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_run(cfg: &ExperimentConfig, dir: &Path, checkpoint: Option<&Path>) -> Result<(TaskData, Trainee)> {
    let data = TaskData::build(cfg)?;
    let path = checkpoint.map_or_else(|| dir.join(LATEST_CHECKPOINT), Path::to_path_buf);
    let (trainee, _) = load_state_into(cfg, &data, &path).with_context(|| format!("loading {}", path.display()))?;
    Ok((data, trainee))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn parse_tokens(data: &TaskData, text: &str) -> Result<Vec<usize>> {
    match data {
        TaskData::Stories(c) => c.encode(text).map_err(anyhow::Error::msg),
        TaskData::Graphs(_) => text.split_whitespace().map(|t| t.parse().context("token ids expected")).collect(),
    }
}

fn render(data: &TaskData, tokens: &[usize]) -> String {
    match data {
        TaskData::Stories(c) => c.decode(tokens),
        TaskData::Graphs(_) => tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Train { model_kind, max_steps, epochs, write_data } => {
            let mut cfg = run_config(&cli)?;
            if let Some(k) = model_kind {
                cfg.model_kind = *k;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = *max_steps;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            cfg.validate()?;
            let mut opts = RunOptions::new(out_dir(&cli)?);
            opts.resume = cli.resume;
            opts.write_datasets = *write_data;
            print_json(&run(&cfg, &opts)?)?;
        }
        Cmd::Eval { checkpoint } => {
            let dir = out_dir(&cli)?;
            let cfg = run_config(&cli)?;
            let (data, tr) = load_run(&cfg, dir, checkpoint.as_deref())?;
            match &data {
                TaskData::Graphs(s) => print_json(&eval_stargraph(&tr, cfg.model_kind, &s.eval, &s.vocab)?)?,
                TaskData::Stories(c) => {
                    print_json(&serde_json::json!({ "eval_next_loss": eval_corpus_loss(&tr, &c.eval, c.bos)? }))?
                }
            }
        }
        Cmd::Generate { prompt, graph, max_len, temperature } => {
            let dir = out_dir(&cli)?;
            let cfg = run_config(&cli)?;
            let (data, tr) = load_run(&cfg, dir, None)?;
            if let TaskData::Graphs(s) = &data {
                let g = s.eval.get(*graph).context("graph index out of range")?;
                let path = decode_path(&tr, cfg.model_kind, g, &s.vocab)?;
                print_json(&serde_json::json!({ "prompt": prompt_tokens(g, &s.vocab), "decoded": path, "truth": g.path }))?;
                return Ok(());
            }
            let Trainee::Bst(m) = &tr else { bail!("generate on the corpus needs a BST run") };
            let (_, _, eos) = data.vocab();
            let mode = if *temperature > 0.0 { SampleMode::Sample { temperature: *temperature } } else { SampleMode::Greedy };
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(cfg.seed));
            let out = ars_generate(&BstDecoder::new(m), &parse_tokens(&data, prompt)?, *max_len, mode, Some(eos), &mut rng)?;
            print_json(&serde_json::json!({ "text": render(&data, &out.tokens), "generated": out.generated }))?;
        }
        Cmd::Plan { prefix, goal, k, n } => {
            let dir = out_dir(&cli)?;
            let cfg = run_config(&cli)?;
            let (data, tr) = load_run(&cfg, dir, None)?;
            let Trainee::Bst(m) = &tr else { bail!("planning needs a BST run") };
            let r = plan_goal_conditioned(&BstDecoder::new(m), &parse_tokens(&data, prefix)?, &parse_tokens(&data, goal)?, &PlanConfig::new(*k, *n))?;
            let candidates: Vec<_> =
                r.candidates.iter().map(|(s, score)| serde_json::json!({ "text": render(&data, s), "log_score": score })).collect();
            print_json(&serde_json::json!({ "best": render(&data, &r.best), "best_score": r.best_score, "candidates": candidates }))?;
        }
        Cmd::Probe { runs, graphs, csv } => {
            let runs: Vec<PathBuf> = if runs.is_empty() { vec![out_dir(&cli)?.to_path_buf()] } else { runs.clone() };
            let mut models: Vec<(String, u64, Trainee)> = Vec::new();
            let mut eval = None;
            for dir in &runs {
                let cfg = ExperimentConfig::load(&dir.join("config.json"))?;
                let data = TaskData::build(&cfg)?;
                for (step, path) in list_checkpoints(dir)? {
                    let (tr, _) = load_state_into(&cfg, &data, &path)?;
                    models.push((cfg.model_kind.name().to_string(), step, tr));
                }
                if let TaskData::Graphs(s) = data {
                    eval.get_or_insert(s);
                }
            }
            let split = eval.context("probing needs star-graph runs")?;
            let sources: Vec<ProbeCheckpoint<'_>> = models
                .iter()
                .map(|(name, step, tr)| ProbeCheckpoint {
                    model: name.clone(),
                    step: *step,
                    source: match tr {
                        Trainee::Bst(m) => m as &dyn LatentSource,
                        Trainee::Gpt(m) => m as &dyn LatentSource,
                    },
                })
                .collect();
            let n = (*graphs).min(split.eval.len());
            let report = probe_schedule_report(&sources, &split.eval[..n], &split.vocab, &ProbeConfig::default())?;
            match csv {
                Some(p) => report.write_csv(fs::File::create(p)?)?,
                None => report.write_csv(std::io::stdout().lock())?,
            }
        }
        Cmd::Verify => {
            let report = verify_report(cli.seed.unwrap_or(0));
            print_json(&report)?;
            if !report.all_pass() {
                bail!("verification failed");
            }
        }
        Cmd::Bench { degree, path_len, head_hidden, reps } => {
            let t = token_count(*degree, *path_len);
            let v = degree * (path_len - 1) + 1 + 4;
            let cfg = BstConfig {
                encoder: EncoderConfig {
                    n_layers: 2,
                    d_model: 128,
                    n_heads: 4,
                    mlp_factor: 1,
                    vocab_size: v.max(8),
                    max_positions: t + 1,
                    use_segment_embeddings: false,
                    seed: cli.seed.unwrap_or(0),
                },
                shared_encoders: false,
                head_hidden: *head_hidden,
                gpt_head: false,
                bos: v.max(8) - 2,
                eos: v.max(8) - 1,
            };
            let model = BstModel::<f32>::init(cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let x: Vec<usize> = (0..t).map(|i| 1 + i % (v.max(8) - 3)).collect();
            let mut rows = Vec::new();
            for fraction in [1.0, 0.25, 0.02] {
                let plan = BatchPlan::sampled(std::slice::from_ref(&x), model.vocab_size(), fraction, &mut rng)?;
                let spec = LossSpec { subsample: fraction, ..LossSpec::default() };
                let started = Instant::now();
                let mut m = bst_loss(&model, &plan, &spec)?;
                for _ in 1..*reps {
                    m = bst_loss(&model, &plan, &spec)?;
                }
                let secs = started.elapsed().as_secs_f64() / *reps as f64;
                rows.push(serde_json::json!({
                    "seq_len": t,
                    "fraction": fraction,
                    "head_evals": m.head_evals,
                    "all_pairs": t * (t + 1) / 2,
                    "trunk_rows": m.trunk_rows,
                    "attention_pairs": m.attention_pairs,
                    "seconds_per_loss": secs,
                }));
            }
            print_json(&rows)?;
        }
    }
    Ok(())
}
