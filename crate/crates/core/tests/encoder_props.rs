use bst_core::bst::{BstConfig, BstModel};
use bst_core::encoder::{Encoder, EncoderConfig};
use proptest::prelude::*;

fn config(segments: bool, seed: u64) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 4,
        mlp_factor: 2,
        vocab_size: 9,
        max_positions: 12,
        use_segment_embeddings: segments,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn later_tokens_do_not_change_earlier_rows(seed in 0u64..1000,
                                               x in prop::collection::vec(0usize..9, 2..12),
                                               cut in 1usize..11, fill in 0usize..9) {
        let cut = cut.min(x.len() - 1);
        let enc = Encoder::<f64>::init(config(false, seed)).unwrap();
        let mut y = x.clone();
        for t in &mut y[cut..] {
            *t = (*t + fill + 1) % 9;
        }
        let a = enc.encode(&x, None).unwrap();
        let b = enc.encode(&y, None).unwrap();
        for r in 0..cut {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn reverse_encoding_rows_follow_suffix_starts(seed in 0u64..1000, s in prop::collection::vec(0usize..8, 0..8)) {
        let enc = Encoder::<f64>::init(config(false, seed)).unwrap();
        let rev = enc.reverse_encode(&s, 8, None).unwrap();
        for k in 0..=s.len() {
            let alone = enc.reverse_encode(&s[k..], 8, None).unwrap();
            for (p, q) in rev.row(k).iter().zip(alone.row(0)) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn segments_distinguish_identical_inputs() {
    let enc = Encoder::<f64>::init(config(true, 3)).unwrap();
    let x = [1, 2, 3];
    let a = enc.encode(&x, Some(&[0, 0, 0])).unwrap();
    let b = enc.encode(&x, Some(&[1, 1, 1])).unwrap();
    assert_ne!(a.row(2), b.row(2));
    assert!(enc.encode(&x, Some(&[0, 2, 0])).is_err());
    assert!(Encoder::<f64>::init(config(false, 3)).unwrap().encode(&x, Some(&[0, 0, 0])).is_err());
}

#[test]
fn inputs_are_validated() {
    let enc = Encoder::<f64>::init(config(false, 0)).unwrap();
    assert!(enc.encode(&[9], None).is_err());
    assert!(enc.encode(&[1; 13], None).is_err());
    assert!(enc.encode(&[], None).is_err());
    let mut bad = config(false, 0);
    bad.n_heads = 5;
    assert!(Encoder::<f64>::init(bad).is_err());
}

#[test]
fn shared_encoders_halve_the_encoder_parameters() {
    let make = |shared| {
        let mut enc = config(shared, 1);
        enc.use_segment_embeddings = shared;
        BstModel::<f32>::init(BstConfig { encoder: enc, shared_encoders: shared, head_hidden: 8, gpt_head: true, bos: 7, eos: 8 })
            .unwrap()
    };
    let (separate, shared) = (make(false), make(true));
    assert_eq!(2 * shared.encoder_param_count(), separate.encoder_param_count());
    assert_eq!(shared.head_param_count(), separate.head_param_count());
}
