use bst_core::bst::{
    bst_loss, compute_grads_naive, compute_grads_two_phase, BatchPlan, BstConfig, BstModel, GptConfig, GptExample,
    GptModel, LossSpec, LossWeights,
};
use bst_core::encoder::EncoderConfig;
use bst_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 7;

fn encoder(seed: u64, d: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: layers,
        d_model: d,
        n_heads: 2,
        mlp_factor: 2,
        vocab_size: VOCAB,
        max_positions: 10,
        use_segment_embeddings: false,
        seed,
    }
}

fn tiny_bst(seed: u64, shared: bool, gpt_head: bool) -> BstModel<f64> {
    let mut enc = encoder(seed, 8, 1);
    enc.use_segment_embeddings = shared;
    BstModel::init(BstConfig { encoder: enc, shared_encoders: shared, head_hidden: 8, gpt_head, bos: 5, eos: 6 })
        .unwrap()
}

fn max_rel_diff(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let scale = a.iter().flat_map(|t| t.data()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let diff = a
        .iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0f64, f64::max);
    diff / scale
}

#[test]
fn two_phase_matches_single_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let shared = case % 3 == 0;
        let gamma = [0.0, 0.3, 0.9][case as usize % 3];
        let model = tiny_bst(case, shared, gamma > 0.0);
        let batch: Vec<Vec<usize>> = (0..rng.random_range(1..=3))
            .map(|_| (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..5)).collect())
            .collect();
        let fraction = if case % 2 == 0 { 1.0 } else { 0.5 };
        let plan = BatchPlan::sampled(&batch, VOCAB, fraction, &mut rng).unwrap();
        let spec = LossSpec {
            weights: LossWeights { gamma, lambda: rng.random_range(0.0..=1.0) },
            use_backward: case % 5 != 4,
            subsample: fraction,
        };
        let (naive, m1) = compute_grads_naive(&model, &plan, &spec).unwrap();
        let (split, m2) = compute_grads_two_phase(&model, &plan, &spec).unwrap();
        assert!((m1.loss - m2.loss).abs() < 1e-12);
        assert_eq!(m1.head_evals, m2.head_evals);
        worst = worst.max(max_rel_diff(&naive, &split));
    }
    assert!(worst < 1e-6, "two-phase relative error {worst:e}");
}

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over every parameter.
fn fd_worst<F>(values: Vec<Tensor<f64>>, analytic: &[Tensor<f64>], loss: F) -> f64
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let h = 1e-5;
    let mut probe = values;
    let mut worst = 0.0f64;
    for k in 0..probe.len() {
        for j in 0..probe[k].numel() {
            let orig = probe[k].data()[j];
            probe[k].data_mut()[j] = orig + h;
            let up = loss(&probe);
            probe[k].data_mut()[j] = orig - h;
            let down = loss(&probe);
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn bst_full_model_finite_differences() {
    for (shared, gpt_head) in [(false, false), (true, true)] {
        let model = tiny_bst(3, shared, gpt_head);
        let plan = BatchPlan::full(&[vec![1, 3]], VOCAB).unwrap();
        let spec = LossSpec {
            weights: LossWeights { gamma: if gpt_head { 0.4 } else { 0.0 }, lambda: 0.7 },
            ..LossSpec::default()
        };
        let (grads, _) = compute_grads_naive(&model, &plan, &spec).unwrap();
        let worst = fd_worst(model.params.values(), &grads, |vals| {
            let mut m = model.clone();
            m.params.set_values(vals.to_vec()).unwrap();
            bst_loss(&m, &plan, &spec).unwrap().loss
        });
        assert!(worst < 1e-4, "shared={shared} worst {worst:e}");
    }
}

#[test]
fn gpt_full_model_finite_differences() {
    let model = GptModel::<f64>::init(GptConfig { encoder: encoder(5, 8, 2), bos: 5 }).unwrap();
    let batch = [GptExample::next_token(&[2, 4], 5)];
    let (grads, _) = model.compute_grads(&batch).unwrap();
    let worst = fd_worst(model.params.values(), &grads, |vals| {
        let mut m = model.clone();
        m.params.set_values(vals.to_vec()).unwrap();
        m.loss(&batch).unwrap().loss
    });
    assert!(worst < 1e-4, "worst {worst:e}");
}

#[test]
fn without_backward_encoder_gradients_skip_it() {
    let model = tiny_bst(2, false, false);
    let plan = BatchPlan::full(&[vec![1, 2, 3]], VOCAB).unwrap();
    let spec = LossSpec { use_backward: false, ..LossSpec::default() };
    let (grads, m) = compute_grads_two_phase(&model, &plan, &spec).unwrap();
    assert!(m.prev_loss.is_some());
    for (e, g) in model.params.entries().iter().zip(&grads) {
        if e.name.starts_with("bwd.") {
            assert!(g.data().iter().all(|&v| v == 0.0), "{} has gradient", e.name);
        }
    }
}
