use std::fs;
use std::path::Path;

use bst_core::harness::checkpoint::{FORMAT_VERSION, MAGIC};
use bst_core::harness::dataset::{graph_record, read_jsonl, stargraph_split, write_jsonl};
use bst_core::harness::run::{list_checkpoints, load_state_into, read_summary, TaskData, LATEST_CHECKPOINT};
use bst_core::harness::{
    gen_synthetic_corpus, load_checkpoint, read_metrics, run, save_checkpoint, Checkpoint, CheckpointError,
    CorpusData, ExperimentConfig, HarnessError, MetricsRow, ModelKind, ModelSpec, RngState, RunLock, RunOptions,
    StarGraphData, Task, TrainSpec, Trainee,
};
use bst_core::numerics::{AdamWConfig, AdamWState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(kind: ModelKind) -> ExperimentConfig {
    ExperimentConfig {
        task: Task::Stargraph,
        model_kind: kind,
        model: ModelSpec { n_layers: 1, d_model: 16, n_heads: 2, mlp_factor: 1, head_hidden: 16 },
        train: TrainSpec {
            batch_size: 4,
            epochs: 1,
            max_steps: Some(200),
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            loss: None,
            subsample: Some(0.5),
            shared_encoders: None,
        },
        stargraph: Some(StarGraphData { degree: 2, path_len: 3, n_nodes: 10, n_train: 40, n_eval: 8 }),
        corpus: None,
        seed: 7,
        checkpoint_every: 50,
        eval_every: 100,
    }
}

fn sample_checkpoint(with_opt: bool) -> Checkpoint<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let _: u64 = rng.random();
    let tensors = vec![
        ("fwd.tok".to_string(), Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]).unwrap()),
        ("head.b".to_string(), Tensor::new(vec![4], vec![0.5, 0.25, -1.0, 8.0]).unwrap()),
    ];
    let optimizer = with_opt.then(|| {
        let values: Vec<Tensor<f32>> = tensors.iter().map(|t| t.1.clone()).collect();
        let mut opt = AdamWState::new(AdamWConfig::default(), &values, vec![true, false]).unwrap();
        let mut v = values.clone();
        opt.step(&mut v, &values).unwrap();
        opt
    });
    Checkpoint { config_json: "{\"k\":1}".into(), step: 42, rng: RngState::capture(&rng), tensors, optimizer }
}

/// Metrics rows without the wall-clock dependent columns.
fn stable(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    rows.iter().map(|r| MetricsRow { wall_clock_s: 0.0, pairs_per_sec: 0.0, ..r.clone() }).collect()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for with_opt in [false, true] {
        let ck = sample_checkpoint(with_opt);
        let path = dir.path().join("a.bst");
        save_checkpoint(&ck, &path).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let mut a = ck.rng.restore();
        let mut b = back.rng.restore();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
        save_checkpoint(&back, &dir.path().join("b.bst")).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("b.bst")).unwrap());
    }
}

#[test]
fn checkpoint_corruption_is_classified() {
    let bytes = sample_checkpoint(false).to_bytes();
    assert_eq!(&bytes[..4], &MAGIC);

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(CheckpointError::BadMagic(_))));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bad),
        Err(CheckpointError::VersionMismatch { found, .. }) if found == FORMAT_VERSION + 1
    ));

    let err = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(&err, CheckpointError::Truncated(what) if what.contains("head.b")), "{err}");

    let with_opt = sample_checkpoint(true).to_bytes();
    let err = Checkpoint::<f32>::from_bytes(&with_opt[..with_opt.len() - 1]).unwrap_err();
    assert!(matches!(&err, CheckpointError::Truncated(what) if what.contains("adam.v.head.b")), "{err}");

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::<f32>::from_bytes(&long), Err(CheckpointError::TrailingBytes(1))));

    assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(CheckpointError::DtypeMismatch { .. })));
}

#[test]
fn config_errors_name_their_path() {
    let cfg = tiny(ModelKind::Bst);
    let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
    v["train"]["optimizer"]["lr"] = serde_json::json!(-1.0);
    match ExperimentConfig::from_json(&v.to_string()) {
        Err(HarnessError::InvalidConfig { path, .. }) => assert_eq!(path, "train.optimizer"),
        other => panic!("{other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
    v["stargraph"]["colour"] = serde_json::json!(1);
    match ExperimentConfig::from_json(&v.to_string()) {
        Err(HarnessError::InvalidConfig { path, .. }) => assert_eq!(path, "stargraph.colour"),
        other => panic!("{other:?}"),
    }
    let mut c = cfg.clone();
    c.task = Task::SyntheticCorpus;
    c.corpus = Some(CorpusData { count: 10, eval_fraction: 0.2 });
    assert!(c.validate().is_err(), "bst is not a corpus model");
}

#[test]
fn reruns_are_bit_identical_and_resume_matches() {
    let cfg = tiny(ModelKind::Bst);
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = run(&cfg, &RunOptions::new(dirs[0].path())).unwrap();
    let b = run(&cfg, &RunOptions::new(dirs[1].path())).unwrap();
    assert!(a.completed && a.steps == 200);
    assert_eq!(a.last.as_ref().map(|r| r.loss), b.last.as_ref().map(|r| r.loss));
    assert_eq!(a.eval, b.eval);
    let metrics = |d: &Path| stable(&read_metrics(&d.join("metrics.csv")).unwrap());
    assert_eq!(metrics(dirs[0].path()), metrics(dirs[1].path()));

    let mut killed = RunOptions::new(dirs[2].path());
    killed.stop_at = Some(130);
    let partial = run(&cfg, &killed).unwrap();
    assert!(!partial.completed);
    assert!(read_summary(dirs[2].path()).is_err());
    let mut resumed = RunOptions::new(dirs[2].path());
    resumed.resume = true;
    let c = run(&cfg, &resumed).unwrap();
    assert_eq!(a.last.as_ref().map(|r| r.loss), c.last.as_ref().map(|r| r.loss));
    assert_eq!(a.eval, c.eval);
    assert_eq!(metrics(dirs[0].path()), metrics(dirs[2].path()));

    let ck_a = fs::read(dirs[0].path().join(LATEST_CHECKPOINT)).unwrap();
    let ck_c = fs::read(dirs[2].path().join(LATEST_CHECKPOINT)).unwrap();
    assert_eq!(ck_a, ck_c);
    let steps: Vec<u64> = list_checkpoints(dirs[0].path()).unwrap().into_iter().map(|c| c.0).collect();
    assert_eq!(steps, vec![50, 100, 150, 200]);
}

#[test]
fn resume_rejects_a_different_config() {
    let cfg = tiny(ModelKind::Forward);
    let dir = tempfile::tempdir().unwrap();
    let mut opts = RunOptions::new(dir.path());
    opts.stop_at = Some(60);
    run(&cfg, &opts).unwrap();
    let mut other = cfg.clone();
    other.seed += 1;
    opts.stop_at = None;
    opts.resume = true;
    assert!(matches!(run(&other, &opts), Err(HarnessError::Resume(_))));
}

#[test]
fn output_directories_are_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let lock = RunLock::acquire(dir.path()).unwrap();
    let mut cfg = tiny(ModelKind::Forward);
    cfg.train.max_steps = Some(2);
    assert!(matches!(run(&cfg, &RunOptions::new(dir.path())), Err(HarnessError::Locked(_))));
    drop(lock);
    assert!(run(&cfg, &RunOptions::new(dir.path())).unwrap().completed);
    assert!(!dir.path().join(RunLock::FILE).exists());
}

#[test]
fn ablation_without_backward_logs_prev_loss_with_constant_suffix() {
    let mut cfg = tiny(ModelKind::BstWoBackward);
    cfg.train.max_steps = Some(20);
    cfg.checkpoint_every = 0;
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, &RunOptions::new(dir.path())).unwrap();
    let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert!(rows.iter().all(|r| r.prev_loss.is_some() && r.next_loss.is_some()));

    let data = TaskData::build(&cfg).unwrap();
    let (trained, _) = load_state_into(&cfg, &data, &dir.path().join(LATEST_CHECKPOINT)).unwrap();
    let fresh = Trainee::init(&cfg, 15, 13, 14).unwrap();
    for (e, (p, q)) in trained.params().entries().iter().zip(trained.params().values().iter().zip(fresh.params().values())) {
        if e.name.starts_with("bwd.") {
            assert_eq!(p, &q, "{} moved", e.name);
        }
    }
}

#[test]
fn datasets_are_deterministic_and_round_trip() {
    let data = StarGraphData { degree: 2, path_len: 5, n_nodes: 20, n_train: 30, n_eval: 10 };
    let a = stargraph_split(&data, 1).unwrap();
    assert_eq!(a.train, stargraph_split(&data, 1).unwrap().train);
    assert_ne!(a.train, stargraph_split(&data, 2).unwrap().train);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval.jsonl");
    let records: Vec<_> = a.eval.iter().map(|g| graph_record(g, &a.vocab)).collect();
    write_jsonl(&path, &records).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), records);
    let line = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert!(v["tokens"].is_array() && v["meta"].is_object());
}

#[test]
fn synthetic_corpus_contract() {
    let a = gen_synthetic_corpus(5, 400, 0.2);
    let b = gen_synthetic_corpus(5, 400, 0.2);
    assert_eq!(a.train, b.train);
    assert_eq!(a.eval, b.eval);
    assert_eq!(a.train.len() + a.eval.len(), 400);
    assert!(a.vocab_size() <= 512);
    for s in a.train.iter().chain(&a.eval) {
        assert!(s.len() <= 64);
        assert!(s.iter().all(|&t| t < a.vocab_size()));
        assert_eq!(*s.last().unwrap(), a.eos);
        assert!(!a.train.contains(s) || !a.eval.contains(s));
    }
    let text = a.decode(&a.eval[0]);
    assert_eq!(a.encode(&text).unwrap(), a.eval[0]);
}
