use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::layers::cross_entropy_sum;
use super::*;
use crate::codec::{EOS, SEP};

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        max_title: 8,
        max_abstract: 8,
        max_target: 12,
    }
}

fn tiny(seed: u64) -> ModelParams {
    ModelParams::init(tiny_config(16), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn example(seed: u64) -> TrainingExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tok = || rng.random_range(4..16u32);
    let doc = Document::new(vec![tok(), tok()], vec![tok(), tok(), tok()]);
    let (a, b, c, d) = (tok(), tok(), tok(), tok());
    TrainingExample {
        doc,
        episodes: vec![
            Episode {
                context: vec![],
                target: vec![BOS, a, b, SEP, c, EOS],
            },
            Episode {
                context: vec![vec![a, b], vec![c]],
                target: vec![BOS, d, EOS],
            },
        ],
    }
}

#[test]
fn embedding_shapes_and_segments() {
    let p = tiny(1);
    let both = embed_and_position(&p, &Document::new(vec![4, 5], vec![6, 7, 8])).unwrap();
    assert_eq!(both.dim(), (5, 8));
    let title_only = embed_and_position(&p, &Document::new(vec![4, 5], vec![])).unwrap();
    assert_eq!(title_only, both.slice(s![..2, ..]));
    let other_abstract = embed_and_position(&p, &Document::new(vec![4, 5], vec![9, 9, 9])).unwrap();
    assert_eq!(other_abstract.slice(s![..2, ..]), both.slice(s![..2, ..]));
    let other_title = embed_and_position(&p, &Document::new(vec![10, 11], vec![6, 7, 8])).unwrap();
    assert_eq!(other_title.slice(s![2.., ..]), both.slice(s![2.., ..]));

    let mut zeroed = p.clone();
    zeroed.pe_title.fill(0.0);
    zeroed.pe_abstract.fill(0.0);
    let raw = embed_and_position(&zeroed, &Document::new(vec![4], vec![6])).unwrap();
    let scale = (8f64).sqrt();
    assert_eq!(raw.row(0), &p.weights.embedding.row(4) * scale);
    assert_eq!(raw.row(1), &p.weights.embedding.row(6) * scale);

    let long = Document::new(vec![4; 9], vec![]);
    assert!(matches!(embed_and_position(&p, &long), Err(ModelError::SequenceTooLong { .. })));
}

#[test]
fn encoder_identity_and_determinism() {
    let mut cfg = tiny_config(16);
    cfg.encoder_layers = 0;
    let p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let input = embed_and_position(&p, &Document::new(vec![4, 5], vec![6])).unwrap();
    assert_eq!(encode(&p, &input).unwrap().states, input);

    let p = tiny(3);
    let one = embed_and_position(&p, &Document::new(vec![4], vec![])).unwrap();
    assert_eq!(encode(&p, &one).unwrap().states.dim(), (1, 8));
    let input = embed_and_position(&p, &Document::new(vec![4, 5], vec![6])).unwrap();
    let a = encode(&p, &input).unwrap();
    let b = encode(&p, &input).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fusion_rows() {
    let mut p = tiny(5);
    let m = encode_document(&p, &Document::new(vec![4, 5], vec![6, 7, 8])).unwrap();
    assert_eq!(fuse_context(&p, &m, &[]), m);

    let fused = fuse_context(&p, &m, &[vec![4, 5], vec![9]]);
    assert_eq!(fused.states.dim(), (7, 8));
    assert_eq!(fused.text(), m.states);
    assert!(fused.fused().iter().all(|&x| x == 0.0));

    p.weights.gate = 0.5;
    let opened = fuse_context(&p, &m, &[vec![4, 5], vec![9]]);
    assert!(opened.fused().iter().any(|&x| x != 0.0));
    assert_eq!(opened.text(), m.states);
}

#[test]
fn adapter_is_neutral_at_init() {
    for seed in 0..5 {
        let p = tiny(seed);
        let m = encode_document(&p, &Document::new(vec![4, 5], vec![6, 7])).unwrap();
        let fused = fuse_context(&p, &m, &[vec![10, 11], vec![12]]);
        for prefix in [vec![BOS], vec![BOS, 7, 8]] {
            assert_eq!(decode_step(&p, &m, &prefix).unwrap(), decode_step(&p, &fused, &prefix).unwrap());
        }
    }
}

#[test]
fn decode_step_shape_and_errors() {
    let p = tiny(7);
    let m = encode_document(&p, &Document::new(vec![4], vec![5, 6])).unwrap();
    let logits = decode_step(&p, &m, &[BOS]).unwrap();
    assert_eq!(logits.len(), 16);
    assert_eq!(logits, decode_step(&p, &m, &[BOS]).unwrap());
    assert_eq!(decode_step(&p, &m, &[]), Err(ModelError::EmptyPrefix));
    assert_eq!(decode_step(&p, &m, &[5]), Err(ModelError::MissingBos));
    assert_eq!(decode_step(&p, &m, &[BOS, 99]), Err(ModelError::TokenOutOfRange(99)));
}

fn hand_layer_norm(x: [f64; 2]) -> [f64; 2] {
    let mean = (x[0] + x[1]) / 2.0;
    let var = ((x[0] - mean).powi(2) + (x[1] - mean).powi(2)) / 2.0;
    let r = 1.0 / (var + layers::LN_EPS).sqrt();
    [(x[0] - mean) * r, (x[1] - mean) * r]
}

#[test]
fn hand_traced_single_layer() {
    let cfg = ModelConfig {
        vocab_size: 3,
        d_model: 2,
        heads: 1,
        d_ff: 2,
        encoder_layers: 0,
        decoder_layers: 1,
        max_title: 2,
        max_abstract: 2,
        max_target: 4,
    };
    let mut p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let eye: Array2<f64> = Array2::eye(2);
    let w = &mut p.weights;
    w.embedding = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    for l in &mut w.decoder {
        for a in [&mut l.self_attn, &mut l.cross_attn] {
            a.wq = eye.clone();
            a.wk = eye.clone();
            a.wv = eye.clone();
            a.wo = eye.clone();
        }
        l.ffn.w1.fill(0.0);
        l.ffn.w2.fill(0.0);
    }
    p.pe_target.fill(0.0);
    let memory = EncodedMemory {
        states: array![[1.0, 0.0]],
        text_rows: 1,
        source_mask: vec![true],
    };
    let logits = decode_step(&p, &memory, &[BOS]).unwrap();

    // x = sqrt(2) e_bos; self-attention over one position returns its value;
    // cross-attention over one memory row returns that row; ffn is zero.
    let s2 = 2f64.sqrt();
    let x = [s2, 0.0];
    let a = hand_layer_norm(x);
    let h1 = [x[0] + a[0], x[1] + a[1]];
    let h2 = [h1[0] + 1.0, h1[1]];
    let out = hand_layer_norm(h2);
    let expected = [out[0], out[1], out[0] + out[1]];
    for (got, want) in logits.iter().zip(expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn weights_are_tied() {
    let mut p = tiny(2);
    p.weights.embedding[[5, 3]] = 42.0;
    assert_eq!(p.output_projection()[[5, 3]], 42.0);
    let m = encode_document(&p, &Document::new(vec![4], vec![])).unwrap();
    let dec = StepDecoder::new(&p, &m);
    let hidden = dec.hidden(&[BOS]).unwrap();
    let logits = dec.step(&[BOS]).unwrap();
    let manual = hidden.row(0).dot(&p.weights.embedding.row(5));
    assert!((logits[5] - manual).abs() < 1e-12);
}

fn independent_ce(logits: &[f64], target: u32) -> f64 {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    -(logits[target as usize] - max - z.ln())
}

#[test]
fn loss_limits() {
    let mut p = tiny(4);
    p.weights.embedding.fill(0.0);
    let loss = training_loss(&p, &[example(1)]).unwrap();
    assert!((loss - 16f64.ln()).abs() < 1e-12);

    let mut logits = Array2::zeros((1, 16));
    logits[[0, 7]] = 20.0;
    assert!(cross_entropy_sum(&logits, &[7]).0 < 0.01);
    assert_eq!(training_loss(&p, &[]), Err(ModelError::EmptyBatch));
}

#[test]
fn loss_matches_scalar_oracle() {
    let p = tiny(9);
    let ex = example(4);
    let memory = encode_document(&p, &ex.doc).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for ep in &ex.episodes {
        let m = fuse_context(&p, &memory, &ep.context);
        for i in 1..ep.target.len() {
            let logits = decode_step(&p, &m, &ep.target[..i]).unwrap();
            total += independent_ce(&logits, ep.target[i]);
            n += 1;
        }
    }
    let loss = training_loss(&p, std::slice::from_ref(&ex)).unwrap();
    assert!((loss - total / n as f64).abs() < 1e-9);
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn numeric_grad(p: &ModelParams, batch: &[TrainingExample], index: usize) -> f64 {
    let h = 1e-4;
    let flat = p.weights.to_flat();
    let mut q = p.clone();
    let mut plus = flat.clone();
    plus[index] += h;
    q.weights.set_flat(&plus);
    let lp = training_loss(&q, batch).unwrap();
    let mut minus = flat;
    minus[index] -= h;
    q.weights.set_flat(&minus);
    let lm = training_loss(&q, batch).unwrap();
    (lp - lm) / (2.0 * h)
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..3 {
        let mut p = tiny(seed);
        if seed > 0 {
            p.weights.gate = 0.4;
        }
        let batch = vec![example(seed), example(seed + 10)];
        let (_, g) = gradient(&p, &batch).unwrap();
        let analytic = g.to_flat();
        let n = analytic.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut indices: Vec<usize> = (0..12).map(|_| rng.random_range(0..n)).collect();
        indices.push(n - 1);
        for i in indices {
            let num = numeric_grad(&p, &batch, i);
            let err = relative_error(analytic[i], num);
            assert!(err < 1e-4, "{}: analytic {} numeric {num}", p.weights.scalar_name(i).unwrap(), analytic[i]);
        }
    }
}

#[test]
fn gate_gradient_is_live_at_zero() {
    let p = tiny(11);
    assert_eq!(p.weights.gate, 0.0);
    let batch = vec![example(3)];
    let (_, g) = gradient(&p, &batch).unwrap();
    assert!(g.gate.abs() > 1e-8);
    let num = numeric_grad(&p, &batch, p.weights.num_scalars() - 1);
    assert!(relative_error(g.gate, num) < 1e-4);
}

#[test]
fn padding_only_batch_has_zero_gradient() {
    let p = tiny(6);
    let ex = TrainingExample {
        doc: Document::new(vec![4, 5], vec![6]),
        episodes: vec![Episode {
            context: vec![],
            target: vec![BOS],
        }],
    };
    let (loss, g) = gradient(&p, &[ex]).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(g.l2_norm(), 0.0);
}

#[test]
fn checkpoint_round_trip() {
    let mut p = tiny(8);
    p.weights.gate = 0.25;
    let ck = Checkpoint::from_params(&p, "abc");
    let back = Checkpoint::from_json(&ck.to_json()).unwrap();
    assert_eq!(back.vocab_hash, "abc");
    assert_eq!(back.to_params().unwrap(), p);
    let w1 = back.tensors.iter().find(|t| t.name == "encoder.0.ffn.w1").unwrap();
    assert_eq!(w1.shape, vec![8, 16]);

    let mut broken = ck.clone();
    broken.tensors.pop();
    assert!(broken.to_params().is_err());
}
