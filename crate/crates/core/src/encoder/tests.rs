use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tensor;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        ffn_dim: 12,
        vocab_size: 30,
        max_len: 10,
    }
}

fn setup(config: &EncoderConfig, seed: u64) -> (Tape, EncoderVars) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_encoder_params(config, &mut rng).unwrap();
    let mut tape = Tape::new();
    let reg = params.register(&mut tape).unwrap();
    let vars = EncoderVars::from_registered(&reg, config).unwrap();
    (tape, vars)
}

fn identity_attention(tape: &mut Tape, d: usize) -> AttentionVars {
    AttentionVars {
        wq: tape.constant(Tensor::eye(d)),
        wk: tape.constant(Tensor::eye(d)),
        wv: tape.constant(Tensor::eye(d)),
        wo: tape.constant(Tensor::eye(d)),
    }
}

#[test]
fn one_key_attention_returns_the_value() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap());
    let attn = identity_attention(&mut tape, 3);
    let out = multi_head_attention(&mut tape, x, x, x, &attn, 1, None).unwrap();
    assert_eq!(tape.value(out).data(), &[0.3, -1.2, 2.0]);
}

#[test]
fn all_masked_keys_are_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2], vec![1.0, 1.0]]).unwrap());
    let attn = identity_attention(&mut tape, 2);
    let r = multi_head_attention(&mut tape, x, x, x, &attn, 1, Some(&[false, false]));
    assert!(matches!(r, Err(Error::AllMasked)));
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap());
    let k = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2, 0.0]]).unwrap());
    let attn = identity_attention(&mut tape, 2);
    assert!(multi_head_attention(&mut tape, q, k, k, &attn, 1, None).is_err());
    assert!(multi_head_attention(&mut tape, q, q, q, &attn, 3, None).is_err());
}

#[test]
fn two_token_attention_golden() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
    let attn = identity_attention(&mut tape, 2);
    let out = multi_head_attention(&mut tape, x, x, x, &attn, 1, None).unwrap();
    let expected = [0.6697615493266569, 0.6604769013466862, 0.055807219207169745, 1.8883855615856606];
    for (a, b) in tape.value(out).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn masked_keys_get_zero_weight() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.5]]).unwrap());
    let k1 = tape.constant(Tensor::from_rows(&[vec![0.2, 0.1], vec![9.0, 9.0]]).unwrap());
    let k2 = tape.constant(Tensor::from_rows(&[vec![0.2, 0.1], vec![-4.0, 3.0]]).unwrap());
    let attn = identity_attention(&mut tape, 2);
    let a = multi_head_attention(&mut tape, q, k1, k1, &attn, 1, Some(&[true, false])).unwrap();
    let b = multi_head_attention(&mut tape, q, k2, k2, &attn, 1, Some(&[true, false])).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    assert_eq!(tape.value(a).data(), &[0.2, 0.1]);
}

#[test]
fn zero_transform_leaves_residual_stream_untouched() {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = init_encoder_params(&config, &mut rng).unwrap();
    for (name, t) in params.iter_mut() {
        if !name.starts_with("emb.") && !name.contains("gain") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut tape = Tape::new();
    let vars = EncoderVars::from_registered(&params.register(&mut tape).unwrap(), &config).unwrap();
    let h = encode_single(&mut tape, &[3, 4, 5, 6], &config, &vars).unwrap();
    for l in 0..config.num_layers {
        assert_eq!(tape.value(h.attn_residuals[l]), tape.value(h.layers[l]));
    }
}

#[test]
fn padding_content_does_not_leak() {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = init_encoder_params(&config, &mut rng).unwrap();
    let run = |params: &ModelParams, tokens: &[usize]| {
        let mut tape = Tape::new();
        let vars = EncoderVars::from_registered(&params.register(&mut tape).unwrap(), &config).unwrap();
        let h = encode_single(&mut tape, tokens, &config, &vars).unwrap();
        let last = tape.value(h.last()).clone();
        (0..3).flat_map(|i| last.row(i).to_vec()).collect::<Vec<_>>()
    };
    let base = run(&params, &[7, 8, 9, PAD, PAD]);
    let mut altered = params.clone();
    let d = config.d_model;
    altered.get_mut("emb.tok").unwrap().data_mut()[..d].iter_mut().for_each(|v| *v += 3.0);
    let pos = altered.get_mut("emb.pos").unwrap().data_mut();
    for c in 0..d {
        pos.swap(3 * d + c, 4 * d + c);
    }
    assert_eq!(base, run(&altered, &[7, 8, 9, PAD, PAD]));
}

#[test]
fn token_errors() {
    let config = small_config();
    let (mut tape, vars) = setup(&config, 3);
    assert!(matches!(
        encode_single(&mut tape, &[1, 30], &config, &vars),
        Err(Error::OutOfVocab { token: 30, .. })
    ));
    assert!(matches!(
        encode_single(&mut tape, &[1; 11], &config, &vars),
        Err(Error::TooLong { .. })
    ));
}

#[test]
fn encoder_snapshot() {
    let config = small_config();
    let (mut tape, vars) = setup(&config, 42);
    let h = encode_single(&mut tape, &[5, 1, 17, 2], &config, &vars).unwrap();
    let last = tape.value(h.last());
    let sum: f64 = last.data().iter().map(|v| v * v).sum();
    let probe = [last.get(0, 0), last.get(1, 3), last.get(3, 7)];
    let expected_probe = [SNAPSHOT[0], SNAPSHOT[1], SNAPSHOT[2]];
    for (a, b) in probe.iter().zip(expected_probe) {
        assert!((a - b).abs() < 1e-12, "{probe:?}");
    }
    assert!((sum - SNAPSHOT[3]).abs() < 1e-10, "{sum}");
}

/// Recorded from this implementation once the gradient suite passed.
const SNAPSHOT: [f64; 4] = [0.625587922604357, 0.35240357251203036, -0.9125897442144737, 31.99974978557212];

fn mix_config(layer: Option<usize>) -> MixupConfig {
    MixupConfig {
        mix_layer: layer,
        ..MixupConfig::default()
    }
}

#[test]
fn no_mix_layer_is_two_single_passes() {
    let config = small_config();
    let (src, tgt) = ([3usize, 4, 5], [11usize, 12, 13, 14]);
    let (mut tape, vars) = setup(&config, 5);
    let pair = encode_pair(&mut tape, &src, &tgt, &config, &vars, &mix_config(None), Gate::Constant(0.3)).unwrap();
    let (mut tape2, vars2) = setup(&config, 5);
    let s = encode_single(&mut tape2, &src, &config, &vars2).unwrap();
    let t = encode_single(&mut tape2, &tgt, &config, &vars2).unwrap();
    assert!(pair.lambda.is_none());
    for l in 0..=config.num_layers {
        assert_eq!(tape.value(pair.source.layers[l]), tape2.value(s.layers[l]));
        assert_eq!(tape.value(pair.target.layers[l]), tape2.value(t.layers[l]));
    }
}

#[test]
fn zero_ratio_reproduces_single_stream_target() {
    let config = small_config();
    let (src, tgt) = ([3usize, 4, 5], [11usize, 12, 13, 14]);
    for layer in 1..=config.num_layers {
        let (mut tape, vars) = setup(&config, 6);
        let pair =
            encode_pair(&mut tape, &src, &tgt, &config, &vars, &mix_config(Some(layer)), Gate::Constant(0.0)).unwrap();
        let single = encode_single(&mut tape, &tgt, &config, &vars).unwrap();
        let s_single = encode_single(&mut tape, &src, &config, &vars).unwrap();
        for l in 0..=config.num_layers {
            assert_eq!(tape.value(pair.target.layers[l]), tape.value(single.layers[l]));
            assert_eq!(tape.value(pair.source.layers[l]), tape.value(s_single.layers[l]));
        }
    }
}

#[test]
fn learned_gate_stays_inside_bounds_and_shares_weights() {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (mut tape, vars) = setup(&config, rng.random());
        let w = tape.param("mix.w", Tensor::scalar(rng.random_range(-2.0..2.0))).unwrap();
        let b = tape.param("mix.b", Tensor::scalar(rng.random_range(-2.0..2.0))).unwrap();
        let mix = mix_config(Some(1));
        let pair = encode_pair(&mut tape, &[2, 3, 4], &[12, 13, 14, 15], &config, &vars, &mix, Gate::Learned { w, b })
            .unwrap();
        let lambda = tape.scalar(pair.lambda.unwrap());
        assert!(lambda > 0.0 && lambda < mix.lambda0, "{lambda}");
        assert_eq!(pair.cross_attention_params.unwrap(), vars.layers[0].attn);
    }
}

#[test]
fn mixing_sends_gradient_into_the_source() {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = init_encoder_params(&config, &mut rng).unwrap();
    let src = [2usize, 3, 4];
    let tgt = [20usize, 21, 22, 23];
    let grad_on_source_rows = |gate_value: f64| {
        let mut tape = Tape::new();
        let vars = EncoderVars::from_registered(&params.register(&mut tape).unwrap(), &config).unwrap();
        let pair =
            encode_pair(&mut tape, &src, &tgt, &config, &vars, &mix_config(Some(1)), Gate::Constant(gate_value)).unwrap();
        let rep = sequence_representation(&mut tape, &pair.target).unwrap();
        let sq = tape.square(rep);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        let emb = &g["emb.tok"];
        src.iter().flat_map(|&t| emb.row(t).to_vec()).map(f64::abs).sum::<f64>()
    };
    assert!(grad_on_source_rows(0.25) > 0.0);
    assert_eq!(grad_on_source_rows(0.0), 0.0);
}

#[test]
fn bad_mix_layer_is_rejected() {
    let config = small_config();
    let (mut tape, vars) = setup(&config, 9);
    assert!(encode_pair(&mut tape, &[1], &[2], &config, &vars, &mix_config(Some(3)), Gate::Constant(0.1)).is_err());
}

fn states_from(tape: &mut Tape, rows: &[Vec<f64>], mask: Vec<bool>) -> HiddenStates {
    let v = tape.constant(Tensor::from_rows(rows).unwrap());
    HiddenStates {
        layers: vec![v],
        attn_residuals: vec![],
        mask,
    }
}

#[test]
fn pooling() {
    let mut tape = Tape::new();
    let r = vec![1.5, -2.0, 0.25];
    let one = states_from(&mut tape, std::slice::from_ref(&r), vec![true]);
    let v = sequence_representation(&mut tape, &one).unwrap();
    assert_eq!(tape.value(v).data(), r.as_slice());

    let two = states_from(&mut tape, &[r.clone(), r.clone()], vec![true, true]);
    let v = sequence_representation(&mut tape, &two).unwrap();
    assert_eq!(tape.value(v).data(), r.as_slice());

    let s = vec![0.5, 4.0, -1.0];
    let base = states_from(&mut tape, &[r.clone(), s.clone()], vec![true, true]);
    let doubled = states_from(&mut tape, &[r.clone(), s.clone(), r.clone(), s.clone()], vec![true; 4]);
    let a = sequence_representation(&mut tape, &base).unwrap();
    let b = sequence_representation(&mut tape, &doubled).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-15);

    let masked = states_from(&mut tape, &[r.clone(), s], vec![true, false]);
    let v = sequence_representation(&mut tape, &masked).unwrap();
    assert_eq!(tape.value(v).data(), r.as_slice());

    let none = states_from(&mut tape, &[r], vec![false]);
    assert!(matches!(sequence_representation(&mut tape, &none), Err(Error::AllMasked)));
}

#[test]
fn config_validation() {
    assert!(EncoderConfig::default().validate().is_ok());
    let bad = EncoderConfig {
        num_heads: 5,
        ..EncoderConfig::default()
    };
    assert!(bad.validate().is_err());
    assert_eq!(EncoderConfig::default().head_dim(), 8);
}
