use mpgat_core::autodiff::{Tape, Tensor, Var};
use mpgat_core::graph::{Direction, IntersectionGraph};
use mpgat_core::model::layers::{
    distill_q, mgat_attention, mgat_layer, pgat_attention_matrix, pgat_propagate,
    project_multivariate, propagation_states, tcn_forward,
};
use mpgat_core::model::{mpgat_forward, pgat_block, AttentionMasks, ModelConfig, Mpgat, MpgatParams};
use mpgat_core::MpgatError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn leaf(tape: &mut Tape, rng: &mut ChaCha8Rng, shape: &[usize]) -> Var {
    let t = random(rng, shape);
    tape.leaf(&t)
}

fn zeros(tape: &mut Tape, shape: &[usize]) -> Var {
    tape.leaf(&Tensor::zeros(shape.to_vec()))
}

fn small_config(n: usize) -> ModelConfig {
    ModelConfig {
        n_nodes: n,
        d_latent: 4,
        d_residual: 4,
        d_skip: 6,
        d_end: 8,
        t_out: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn projection_is_linear_and_bias_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let w = leaf(&mut tape, &mut rng, &[4, 5]);
    let zero = zeros(&mut tape, &[2, 4, 3, 6]);
    let out = project_multivariate(&mut tape, zero, w).unwrap();
    assert_eq!(tape.shape(out), &[2, 3, 6, 4, 5]);
    assert!(tape.value(out).iter().all(|&v| v == 0.0));

    let x = random(&mut rng, &[2, 4, 3, 6]);
    let x2 = Tensor::new(x.shape().to_vec(), x.values().iter().map(|v| 2.0 * v).collect()).unwrap();
    let (xv, x2v) = (tape.leaf(&x), tape.leaf(&x2));
    let a = project_multivariate(&mut tape, xv, w).unwrap();
    let b = project_multivariate(&mut tape, x2v, w).unwrap();
    for (p, q) in tape.value(a).iter().zip(tape.value(b)) {
        assert!((2.0 * p - q).abs() < 1e-12);
    }
    // entry [b, n, t, f, d] = x[b, f, n, t] · w[f, d]
    let v = tape.value(a);
    let (bi, ni, ti, fi, di) = (1, 2, 4, 3, 1);
    let idx = (((bi * 3 + ni) * 6 + ti) * 4 + fi) * 5 + di;
    let want = x.at(&[bi, fi, ni, ti]) * tape.value(w)[fi * 5 + di];
    assert!((v[idx] - want).abs() < 1e-15);
}

#[test]
fn mgat_attention_uniform_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let h = leaf(&mut tape, &mut rng, &[5, 4, 3]);
    let w0 = zeros(&mut tape, &[6]);
    let a = mgat_attention(&mut tape, h, w0, 0.2).unwrap();
    assert!(tape.value(a).iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let row: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let same = tape.constant([1, 4, 3], row.repeat(4)).unwrap();
    let w = leaf(&mut tape, &mut rng, &[6]);
    let a = mgat_attention(&mut tape, same, w, 0.2).unwrap();
    assert!(tape.value(a).iter().all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn mgat_attention_hand_example() {
    // F = 2, D′ = 1, H = [1], [2], w_c = [1, 0]: each row scores only its own
    // half, so both entries of a row tie
    let mut tape = Tape::new();
    let h = tape.constant([1, 2, 1], vec![1.0, 2.0]).unwrap();
    let w = tape.constant([2], vec![1.0, 0.0]).unwrap();
    let a = mgat_attention(&mut tape, h, w, 0.2).unwrap();
    assert_eq!(tape.value(a), &[0.5, 0.5, 0.5, 0.5]);

    // w_c = [0, 1] scores the partner: row i is softmax(LeakyReLU([H_1, H_2]))
    let w = tape.constant([2], vec![0.0, 1.0]).unwrap();
    let a = mgat_attention(&mut tape, h, w, 0.2).unwrap();
    let p = 1.0 / (1.0 + 1f64.exp());
    let want = [p, 1.0 - p, p, 1.0 - p];
    for (got, w) in tape.value(a).iter().zip(want) {
        assert!((got - w).abs() < 1e-15);
    }
}

#[test]
fn mgat_layer_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let h = leaf(&mut tape, &mut rng, &[6, 1, 4]);
    let w = leaf(&mut tape, &mut rng, &[8]);
    let out = mgat_layer(&mut tape, h, w, 0.2).unwrap();
    let relu: Vec<f64> = tape.value(h).iter().map(|v| v.max(0.0)).collect();
    assert_eq!(tape.value(out), relu.as_slice());

    let h = leaf(&mut tape, &mut rng, &[6, 4, 4]);
    let out = mgat_layer(&mut tape, h, w, 0.2).unwrap();
    assert_eq!(tape.shape(out), &[6, 4, 4]);
    assert!(tape.value(out).iter().all(|&v| v >= 0.0));
}

#[test]
fn distill_reads_only_the_count_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = random(&mut rng, &[7, 4, 3]);
    let mut tape = Tape::new();
    let w = leaf(&mut tape, &mut rng, &[3, 5]);
    let hv = tape.leaf(&h);
    let a = distill_q(&mut tape, hv, w).unwrap();
    assert_eq!(tape.shape(a), &[7, 5]);
    let mut h2 = h.clone();
    for p in 0..7 {
        for f in 1..4 {
            for d in 0..3 {
                h2.values_mut()[(p * 4 + f) * 3 + d] = 99.0;
            }
        }
    }
    let h2v = tape.leaf(&h2);
    let b = distill_q(&mut tape, h2v, w).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    let z = zeros(&mut tape, &[7, 4, 3]);
    let c = distill_q(&mut tape, z, w).unwrap();
    assert!(tape.value(c).iter().all(|&v| v == 0.0));
}

#[test]
fn tcn_is_bounded_causal_and_zero_without_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = random(&mut rng, &[3, 12, 4]);
    let mut tape = Tape::new();
    let f = leaf(&mut tape, &mut rng, &[4, 4, 2]);
    let g = leaf(&mut tape, &mut rng, &[4, 4, 2]);
    for d in [1, 2] {
        let vv = tape.leaf(&v);
        let out = tcn_forward(&mut tape, vv, f, g, d).unwrap();
        assert!(tape.value(out).iter().all(|&x| x > -1.0 && x < 1.0));

        let t_cut = 6;
        let mut v2 = v.clone();
        for r in 0..3 {
            for t in t_cut..12 {
                for c in 0..4 {
                    v2.values_mut()[(r * 12 + t) * 4 + c] += 5.0;
                }
            }
        }
        let vv2 = tape.leaf(&v2);
        let out2 = tcn_forward(&mut tape, vv2, f, g, d).unwrap();
        for r in 0..3 {
            for t in 0..t_cut {
                for c in 0..4 {
                    let i = (r * 12 + t) * 4 + c;
                    assert_eq!(tape.value(out)[i], tape.value(out2)[i]);
                }
            }
        }
    }
    let vv = tape.leaf(&v);
    let zf = zeros(&mut tape, &[4, 4, 2]);
    let out = tcn_forward(&mut tape, vv, zf, g, 1).unwrap();
    assert!(tape.value(out).iter().all(|&x| x == 0.0));
}

#[test]
fn pgat_attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let v = leaf(&mut tape, &mut rng, &[1, 3, 5, 4]);
    let w0 = zeros(&mut tape, &[8]);
    let a = pgat_attention_matrix(&mut tape, v, None, w0, 0.2).unwrap();
    assert!(tape.value(a).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

    let w = leaf(&mut tape, &mut rng, &[8]);
    let empty = IntersectionGraph::new(3, vec![], None).unwrap();
    let masks = AttentionMasks::from_graph(&empty);
    let a = pgat_attention_matrix(&mut tape, v, Some(&masks.forward), w, 0.2).unwrap();
    assert_eq!(tape.value(a), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    let path = IntersectionGraph::path(3);
    let masks = AttentionMasks::from_graph(&path);
    let a = pgat_attention_matrix(&mut tape, v, masks.for_direction(Direction::Forward), w, 0.2).unwrap();
    let a = tape.value(a);
    assert_eq!(&a[0..3], &[1.0, 0.0, 0.0]);
    let support = |row: &[f64]| row.iter().filter(|&&p| p > 0.0).count();
    assert_eq!(support(&a[3..6]), 2);
    assert_eq!(a[5], 0.0);
    assert_eq!(support(&a[6..9]), 2);
    assert_eq!(a[6], 0.0);
    for row in a.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn propagation_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let v = leaf(&mut tape, &mut rng, &[2, 4, 3, 2]);
    let a_raw = leaf(&mut tape, &mut rng, &[2, 4, 4]);
    let a = tape.softmax_lastdim(a_raw).unwrap();

    for st in propagation_states(&mut tape, v, a, 0.0, 2).unwrap() {
        assert_eq!(tape.value(st), tape.value(v));
    }

    let eye: Vec<f64> = (0..2 * 16).map(|i| if (i % 16) % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let eye = tape.constant([2, 4, 4], eye).unwrap();
    for st in propagation_states(&mut tape, v, eye, 1.0, 3).unwrap() {
        assert_eq!(tape.value(st), tape.value(v));
    }

    let per_channel: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut constant = Vec::new();
    for _b in 0..2 {
        for _n in 0..4 {
            constant.extend_from_slice(&per_channel);
        }
    }
    let c = tape.constant([2, 4, 3, 2], constant).unwrap();
    for st in propagation_states(&mut tape, c, a, 0.37, 4).unwrap() {
        for (x, y) in tape.value(st).iter().zip(tape.value(c)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    // β = 0: the mixer sees U + 1 stacked copies of the input
    let mixer = leaf(&mut tape, &mut rng, &[6, 2]);
    let out = pgat_propagate(&mut tape, v, a, 0.0, 2, mixer).unwrap();
    let stacked = tape.concat(&[v, v, v], 3).unwrap();
    let flat = tape.reshape(stacked, [24, 6]).unwrap();
    let want = tape.matmul(flat, mixer).unwrap();
    assert_eq!(tape.value(out), tape.value(want));
}

fn block_inputs(seed: u64, n: usize) -> (Tape, Var, Vec<mpgat_core::model::BranchWeights<Var>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let v = leaf(&mut tape, &mut rng, &[1, n, 5, 3]);
    let branches = (0..3)
        .map(|_| mpgat_core::model::BranchWeights {
            attention: leaf(&mut tape, &mut rng, &[6]),
            mixer: leaf(&mut tape, &mut rng, &[9, 3]),
        })
        .collect();
    (tape, v, branches)
}

#[test]
fn pgat_block_zero_mixers_and_single_node() {
    let cfg = small_config(4);
    let (mut tape, v, mut branches) = block_inputs(8, 4);
    let masks = AttentionMasks::from_graph(&IntersectionGraph::path(4));
    for br in &mut branches {
        br.mixer = zeros(&mut tape, &[9, 3]);
    }
    let out = pgat_block(&mut tape, v, &masks, &branches, &cfg).unwrap();
    assert!(tape.value(out).iter().all(|&x| x == 0.0));

    let cfg1 = small_config(1);
    let (mut tape, v, branches) = block_inputs(9, 1);
    let masks = AttentionMasks::from_graph(&IntersectionGraph::path(1));
    let out = pgat_block(&mut tape, v, &masks, &branches, &cfg1).unwrap();
    // one node: A = [1], so every branch is Δ(V ‖ V ‖ V)
    let stacked = tape.concat(&[v, v, v], 3).unwrap();
    let flat = tape.reshape(stacked, [5, 9]).unwrap();
    let mut total = vec![0.0; 15];
    for br in &branches {
        let m = tape.matmul(flat, br.mixer).unwrap();
        total.iter_mut().zip(tape.value(m)).for_each(|(t, x)| *t += x);
    }
    for (a, b) in tape.value(out).iter().zip(&total) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pgat_block_is_permutation_equivariant() {
    let cfg = small_config(5);
    let graph = IntersectionGraph::new(5, vec![(0, 1), (1, 2), (2, 3), (1, 4), (4, 3)], None).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let (mut tape, v, branches) = block_inputs(10, 5);
    let out = pgat_block(&mut tape, v, &AttentionMasks::from_graph(&graph), &branches, &cfg).unwrap();

    // node i moves to row perm[i]
    let (t, c) = (5, 3);
    let src = tape.value(v).to_vec();
    let mut moved = vec![0.0; src.len()];
    for i in 0..5 {
        moved[perm[i] * t * c..(perm[i] + 1) * t * c].copy_from_slice(&src[i * t * c..(i + 1) * t * c]);
    }
    let vp = tape.constant([1, 5, t, c], moved).unwrap();
    let pmasks = AttentionMasks::from_graph(&graph.permuted(&perm).unwrap());
    let outp = pgat_block(&mut tape, vp, &pmasks, &branches, &cfg).unwrap();
    for i in 0..5 {
        let a = &tape.value(out)[i * t * c..(i + 1) * t * c];
        let b = &tape.value(outp)[perm[i] * t * c..(perm[i] + 1) * t * c];
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_shape_and_batch_independence() {
    let cfg = small_config(3);
    let model = Mpgat::new(cfg.clone(), 3).unwrap();
    let masks = AttentionMasks::from_graph(&IntersectionGraph::path(3));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let one = random(&mut rng, &[1, 4, 3, 12]);
    let y1 = model.predict(&masks, &one).unwrap();
    assert_eq!(y1.shape(), &[1, 3, 3]);
    let doubled = Tensor::new([2, 4, 3, 12], one.values().repeat(2)).unwrap();
    let y2 = model.predict(&masks, &doubled).unwrap();
    assert_eq!(&y2.values()[..9], y1.values());
    assert_eq!(&y2.values()[9..], y1.values());

    let wrong = random(&mut rng, &[1, 4, 3, 11]);
    assert!(matches!(model.predict(&masks, &wrong), Err(MpgatError::Dimension(_))));
}

#[test]
fn non_finite_activation_names_the_block() {
    let cfg = small_config(3);
    let mut model = Mpgat::new(cfg, 3).unwrap();
    model.params.blocks[2].residual.values_mut()[0] = f64::NAN;
    let masks = AttentionMasks::from_graph(&IntersectionGraph::path(3));
    let x = Tensor::new([1, 4, 3, 12], vec![0.5; 144]).unwrap();
    match model.predict(&masks, &x) {
        Err(MpgatError::NonFinite(place)) => assert!(place.contains("block 2"), "{place}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    assert_eq!(ModelConfig::default().receptive_field(), 13);
    assert!(ModelConfig::default().validate().is_ok());
    let bad = [
        ModelConfig { beta: 1.5, ..ModelConfig::default() },
        ModelConfig { n_features: 3, ..ModelConfig::default() },
        ModelConfig { t_in: 14, ..ModelConfig::default() },
        ModelConfig { n_blocks: 0, ..ModelConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(MpgatError::Config(_))), "{cfg:?}");
    }
}

#[test]
fn forward_gradient_flows_to_every_group() {
    let cfg = small_config(3);
    let mut params = MpgatParams::init(&cfg, 21);
    let masks = AttentionMasks::from_graph(&IntersectionGraph::path(3));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[2, 4, 3, 12]);
    let mut tape = Tape::new();
    let w = params.leaves(&mut tape);
    let xv = tape.leaf(&x);
    let y = mpgat_forward(&mut tape, &cfg, &w, &masks, xv).unwrap();
    let loss = tape.mean(y);
    tape.backward(loss).unwrap();
    params.accumulate_grads(&tape, &w).unwrap();
    for (name, t) in params.named_tensors() {
        let g = t.grad().unwrap();
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
        // the last block's spatial output and residual feed nothing
        let dead = name.starts_with("blocks.7.")
            && !(name.ends_with("filter") || name.ends_with("gate") || name.ends_with("skip"));
        if !dead {
            assert!(g.iter().any(|v| *v != 0.0), "{name} has no gradient");
        }
    }
}
