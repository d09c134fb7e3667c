//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! straight to stderr (bypassing the test harness capture) so the verdicts
//! show up in a plain `cargo test` log.
//!
//! Criteria 6 and 7 train real models and take several minutes each on one
//! core. Criterion 8 needs the released dataset: point `MPGAT_REAL_DATA` at
//! its CSV (and optionally `MPGAT_REAL_GRAPH` at a graph JSON).

mod common;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::io::Write;
use std::time::Instant;

use common::*;
use mpgat_core::autodiff::{gradient_check, Tape, Tensor};
use mpgat_core::features::{
    build_samples, daily_feature, ingest_csv, moving_average, prepare, synth_generate, PreparedData,
    SplitRatios, SynthConfig, MA_LONG, MA_SHORT,
};
use mpgat_core::graph::{load_graph, Direction, IntersectionGraph, DEFAULT_SIX_INTERSECTION_GRAPH};
use mpgat_core::model::layers::{mgat_attention, pgat_attention_matrix, propagation_states};
use mpgat_core::model::{mpgat_forward, AttentionMasks, ModelConfig, Mpgat, MpgatParams};
use mpgat_core::train::{
    evaluate, exact_p_value, mae_loss, mean_std, multi_run, train, train_and_evaluate, wilcoxon_rank_sum,
    Persistence, RunReport, TrainConfig, TrainedModel, REPORT_HORIZONS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(criterion: u32, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion}: {word}  {detail}");
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> IntersectionGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(0.35) {
                edges.push((i, j));
            }
        }
    }
    IntersectionGraph::new(n, edges, None).unwrap()
}

#[test]
fn criterion_1_gradient_fidelity() {
    let started = Instant::now();
    let cfg = ModelConfig {
        n_nodes: 3,
        d_latent: 8,
        d_residual: 8,
        d_skip: 8,
        d_end: 8,
        t_out: 3,
        ..ModelConfig::default()
    };
    let params = MpgatParams::init(&cfg, 5);
    let masks = AttentionMasks::from_graph(&IntersectionGraph::path(3));
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x = random_tensor(&mut rng, &[2, 4, 3, 12], 1.5);
    let target = random_tensor(&mut rng, &[2, 3, 3], 2.0);

    let mut worst = (String::new(), 0.0f64);
    let mut failures = Vec::new();
    for (idx, (name, tensor)) in params.named_tensors().into_iter().enumerate() {
        let loss = |tape: &mut Tape, p| {
            let mut w = params.leaves(tape);
            *w.iter_mut()[idx] = p;
            let xv = tape.leaf(&x);
            let y = mpgat_forward(tape, &cfg, &w, &masks, xv)?;
            let t = tape.leaf(&target);
            mae_loss(tape, y, t)
        };
        let err = gradient_check(loss, tensor, 1e-6).unwrap();
        if err >= 1e-4 {
            failures.push(format!("{name}={err:.2e}"));
        }
        if err >= worst.1 {
            worst = (name, err);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    let worst = if worst.1 > 0.0 {
        format!("worst {} at {:.2e}", worst.0, worst.1)
    } else {
        "every coordinate within the absolute noise floor".to_string()
    };
    verdict(
        1,
        pass,
        &format!(
            "{} groups, {worst} (< 1e-4), {secs:.1}s (< 60s) {}",
            params.named_tensors().len(),
            failures.join(" ")
        ),
    );
    assert!(pass, "{failures:?} in {secs:.1}s");
}

#[test]
fn criterion_2_attention_and_significance_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst_row: f64 = 0.0;
    let mut leaked = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(1..=7);
        let b = rng.random_range(1..=2);
        let (t, c) = (rng.random_range(1..=4), rng.random_range(1..=5));
        let scale = if rng.random_bool(0.2) { 30.0 } else { 2.0 };
        let mut tape = Tape::new();

        let f = rng.random_range(1..=4);
        let h = tape.leaf(&random_tensor(&mut rng, &[b * n * t, f, c], scale));
        let wc = tape.leaf(&random_tensor(&mut rng, &[2 * c], scale));
        let a = mgat_attention(&mut tape, h, wc, 0.2).unwrap();
        for row in tape.value(a).chunks(f) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }

        let graph = random_graph(&mut rng, n);
        let masks = AttentionMasks::from_graph(&graph);
        let direction = Direction::ALL[rng.random_range(0..3)];
        let adj = graph.adjacency(direction);
        let v = tape.leaf(&random_tensor(&mut rng, &[b, n, t, c], scale));
        let wp = tape.leaf(&random_tensor(&mut rng, &[2 * c], scale));
        let a = pgat_attention_matrix(&mut tape, v, masks.for_direction(direction), wp, 0.2).unwrap();
        for (r, row) in tape.value(a).chunks(n).enumerate() {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            let i = r % n;
            for (j, &p) in row.iter().enumerate() {
                if !adj.allows(i, j) && p != 0.0 {
                    leaked += 1;
                }
            }
        }
    }

    let mut asymmetric = 0usize;
    for k in 0..1000 {
        let (n, m) = (rng.random_range(2..=20), rng.random_range(2..=20));
        let a = random_sample(&mut rng, n, k % 3 == 0);
        let b = random_sample(&mut rng, m, k % 3 == 0);
        let ab = wilcoxon_rank_sum(&a, &b, 0.05);
        let ba = wilcoxon_rank_sum(&b, &a, 0.05);
        if ab.h != -ba.h || ab.p_value != ba.p_value {
            asymmetric += 1;
        }
    }

    let pass = worst_row <= 1e-10 && leaked == 0 && asymmetric == 0;
    verdict(
        2,
        pass,
        &format!(
            "max |row sum - 1| {worst_row:.1e} (<= 1e-10), {leaked} non-neighbor leaks, {asymmetric}/1000 asymmetric rank-sum pairs"
        ),
    );
    assert!(pass);
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_3_propagation_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (b, n) = (rng.random_range(1..=3), rng.random_range(1..=6));
        let (t, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let steps = rng.random_range(1..=4);
        let mut tape = Tape::new();
        let v = tape.leaf(&random_tensor(&mut rng, &[b, n, t, c], 5.0));
        let raw = tape.leaf(&random_tensor(&mut rng, &[b, n, n], 3.0));
        let a = tape.softmax_lastdim(raw).unwrap();

        for st in propagation_states(&mut tape, v, a, 0.0, steps).unwrap() {
            worst = worst.max(max_abs_diff(tape.value(st), tape.value(v)));
        }

        // self-loop-only mask: the attention matrix is the identity
        let isolated = AttentionMasks::from_graph(&IntersectionGraph::new(n, vec![], None).unwrap());
        let wp = tape.leaf(&random_tensor(&mut rng, &[2 * c], 3.0));
        let eye = pgat_attention_matrix(&mut tape, v, Some(&isolated.forward), wp, 0.2).unwrap();
        for st in propagation_states(&mut tape, v, eye, 1.0, steps).unwrap() {
            worst = worst.max(max_abs_diff(tape.value(st), tape.value(v)));
        }

        let per_channel: Vec<f64> = (0..t * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let constant: Vec<f64> = per_channel.iter().copied().cycle().take(b * n * t * c).collect();
        let cv = tape.constant([b, n, t, c], constant).unwrap();
        let beta = rng.random_range(0.0..=1.0);
        for st in propagation_states(&mut tape, cv, a, beta, steps).unwrap() {
            worst = worst.max(max_abs_diff(tape.value(st), tape.value(cv)));
        }
    }
    let pass = worst <= 1e-12;
    verdict(3, pass, &format!("200 instances x 3 identities, max deviation {worst:.1e} (<= 1e-12)"));
    assert!(pass);
}

#[test]
fn criterion_4_receptive_field() {
    let default = ModelConfig::default();
    let structural = default.receptive_field();

    // a window longer than the receptive field exposes the cut-off
    let t_in = 16;
    let cfg = ModelConfig {
        n_nodes: 3,
        t_in,
        t_out: 2,
        d_latent: 4,
        d_residual: 4,
        d_skip: 4,
        d_end: 4,
        ..ModelConfig::default()
    };
    let mut params = MpgatParams::init(&cfg, 3);
    // with zero attention vectors the node attention no longer reads the
    // time-mean summary, so only the temporal path links steps
    for blk in &mut params.blocks {
        for br in &mut blk.branches {
            br.attention.values_mut().fill(0.0);
        }
    }
    let model = Mpgat { config: cfg.clone(), params };
    let masks = AttentionMasks::from_graph(&IntersectionGraph::path(3));
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let x = random_tensor(&mut rng, &[1, 4, 3, t_in], 1.0);
    let base = model.predict(&masks, &x).unwrap();

    let mut reached = Vec::new();
    for step in 0..t_in {
        let mut bumped = x.clone();
        for f in 0..4 {
            for node in 0..3 {
                bumped.values_mut()[(f * 3 + node) * t_in + step] += 0.5;
            }
        }
        let y = model.predict(&masks, &bumped).unwrap();
        if max_abs_diff(y.values(), base.values()) > 0.0 {
            reached.push(step);
        }
    }
    let measured = t_in - reached.first().copied().unwrap_or(t_in);
    let contiguous = reached.iter().copied().eq(t_in - measured..t_in);
    let pass = structural == 13 && structural >= default.t_in && measured == structural && contiguous;
    verdict(
        4,
        pass,
        &format!("structural {structural} (>= T_in {}), perturbation reaches the last {measured} of {t_in} steps", default.t_in),
    );
    assert!(pass);
}

#[test]
fn criterion_5_rank_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=8 {
        for m in 1..=8 {
            for k in 0..200 {
                let a = random_sample(&mut rng, n, k % 2 == 1);
                let b = random_sample(&mut rng, m, k % 2 == 1);
                worst = worst.max((exact_p_value(&a, &b) - brute_force_p_value(&a, &b)).abs());
                cases += 1;
            }
        }
    }
    let p = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 0.05).p_value;
    let pass = worst <= 1e-12 && p == 0.1;
    verdict(5, pass, &format!("{cases} instances, max |p - brute force| {worst:.1e} (<= 1e-12); [1,2,3] vs [4,5,6] p = {p}"));
    assert!(pass);
}

/// Synthetic 6-node, 60-day diurnal dataset (peak ratio 200, noise 0.1).
fn synthetic() -> (PreparedData, IntersectionGraph) {
    let cfg = SynthConfig::default();
    assert_eq!((cfg.n_nodes, cfg.days, cfg.peak_ratio), (6, 60, 200.0));
    let (series, graph) = synth_generate(&cfg).unwrap();
    (prepare(&series, 12, 12, SplitRatios::default()).unwrap(), graph)
}

fn scaled_model(n_nodes: usize, n_features: usize, width: usize) -> ModelConfig {
    ModelConfig {
        n_nodes,
        n_features,
        d_latent: 8,
        d_residual: width,
        d_skip: 2 * width,
        d_end: 4 * width,
        ..ModelConfig::default()
    }
}

const TEST_SAMPLES: usize = 2000;

#[test]
fn criterion_6_synthetic_learnability() {
    let started = Instant::now();
    let (data, graph) = synthetic();
    let masks = AttentionMasks::from_graph(&graph);
    let test = &data.test[..TEST_SAMPLES.min(data.test.len())];
    let tc = TrainConfig {
        lr: 0.002,
        batch_size: 32,
        max_epochs: 25,
        patience: 25,
        seed: 0,
        max_batches_per_epoch: Some(150),
        max_val_samples: Some(500),
        ..TrainConfig::default()
    };
    let model = Mpgat::new(scaled_model(6, 4, 16), 0).unwrap();
    let (_, report) = train_and_evaluate(model, &masks, &data.normalizer, (&data.train, &data.val, test), &tc, &[1]).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let ours = report.mape.get(1).unwrap();
    let baseline = evaluate(&Persistence, test, &[1]).unwrap().get(1).unwrap();
    let gain = 1.0 - ours / baseline;

    // determinism: two short runs from the same seed agree bit for bit
    let short = TrainConfig { max_epochs: 1, patience: 1, max_batches_per_epoch: Some(4), max_val_samples: Some(50), ..tc.clone() };
    let run = || {
        let mut tm = TrainedModel::new(Mpgat::new(scaled_model(6, 4, 16), 0).unwrap(), masks.clone(), data.normalizer.clone());
        let h = train(&mut tm, &data.train, &data.val, &short).unwrap();
        (h.batch_losses, tm.model)
    };
    let deterministic = run() == run();

    let pass = gain >= 0.10 && secs <= 600.0 && deterministic;
    verdict(
        6,
        pass,
        &format!(
            "h1 MAPE {ours:.4} vs persistence {baseline:.4}, {:.1}% better (>= 10%), {secs:.0}s (<= 600s), deterministic {deterministic}",
            100.0 * gain
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_multivariate_ablation() {
    let (data, graph) = synthetic();
    let masks = AttentionMasks::from_graph(&graph);
    let test = &data.test[..TEST_SAMPLES.min(data.test.len())];
    let runs = |n_features: usize| -> Vec<RunReport> {
        let outcome = multi_run(5, 0, 1, |seed| {
            let tc = TrainConfig {
                lr: 0.003,
                batch_size: 32,
                max_epochs: 10,
                patience: 10,
                seed,
                max_batches_per_epoch: Some(40),
                max_val_samples: Some(500),
                ..TrainConfig::default()
            };
            let model = Mpgat::new(scaled_model(6, n_features, 8), seed)?;
            let splits = (&data.train[..], &data.val[..], test);
            train_and_evaluate(model, &masks, &data.normalizer, splits, &tc, &[1]).map(|(_, r)| r)
        })
        .unwrap();
        outcome.reports
    };
    let h1 = |reports: &[RunReport]| -> Vec<f64> { reports.iter().map(|r| r.mape.get(1).unwrap()).collect() };
    let multi = h1(&runs(4));
    let uni = h1(&runs(1));
    let (m_mean, m_std) = mean_std(&multi);
    let (u_mean, u_std) = mean_std(&uni);
    let test = wilcoxon_rank_sum(&multi, &uni, 0.05);
    let pass = multi.len() == 5 && uni.len() == 5 && m_mean <= u_mean;
    verdict(
        7,
        pass,
        &format!(
            "5 seeds, h1 MAPE multivariate {m_mean:.4}±{m_std:.4} vs univariate {u_mean:.4}±{u_std:.4}; rank-sum p = {:.4}, h = {}",
            test.p_value, test.h
        ),
    );
    assert!(pass);
}

/// Recorded, never failed: the released dataset is not shipped.
#[test]
fn criterion_8_real_data_smoke() {
    let Some(path) = std::env::var_os("MPGAT_REAL_DATA") else {
        verdict(8, false, "not run: set MPGAT_REAL_DATA to the released CSV (recorded, not enforced)");
        return;
    };
    let graph = match std::env::var_os("MPGAT_REAL_GRAPH") {
        Some(g) => load_graph(g).unwrap(),
        None => IntersectionGraph::from_json(DEFAULT_SIX_INTERSECTION_GRAPH).unwrap(),
    };
    let series = ingest_csv(&path, None).unwrap();
    let data = prepare(&series, 12, 12, SplitRatios::default()).unwrap();
    let masks = AttentionMasks::from_graph(&graph);
    let tc = TrainConfig {
        lr: 0.002,
        batch_size: 32,
        max_epochs: 25,
        patience: 10,
        seed: 0,
        max_batches_per_epoch: Some(150),
        max_val_samples: Some(1000),
        ..TrainConfig::default()
    };
    let model = Mpgat::new(scaled_model(graph.n(), 4, 16), 0).unwrap();
    let splits = (&data.train[..], &data.val[..], &data.test[..]);
    let (_, report) = train_and_evaluate(model, &masks, &data.normalizer, splits, &tc, &REPORT_HORIZONS).unwrap();
    let h1 = report.mape.get(1).unwrap();
    verdict(
        8,
        h1 <= 0.20,
        &format!("h1 test MAPE {h1:.4} (ceiling 0.20), gap to 0.1511 is {:+.4} (recorded, not enforced)", h1 - 0.1511),
    );
}

#[test]
fn criterion_9_pipeline_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(49);
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for _ in 0..100 {
        let case = random_case(&mut rng);
        let s = &case.series;
        let cols: Vec<Vec<f64>> = (0..s.n_nodes()).map(|i| s.column(i)).collect();

        for window in [1, MA_SHORT, MA_LONG, rng.random_range(2..30)] {
            let ma = moving_average(s, window).unwrap();
            for (node, col) in cols.iter().enumerate() {
                for (t, want) in naive_moving_average(col, window).into_iter().enumerate() {
                    checked += 1;
                    let ok = match want {
                        Some(v) => ma.is_valid(t) && ma.get(t, node) == v,
                        None => !ma.is_valid(t),
                    };
                    mismatches += usize::from(!ok);
                }
            }
        }

        for t0 in 0..s.n_steps() {
            let got = daily_feature(s, t0, case.t_in).ok();
            let want: Option<Vec<Vec<f64>>> =
                cols.iter().map(|c| naive_daily(c, s.steps_per_day(), t0, case.t_in)).collect();
            checked += 1;
            let ok = match (got, want) {
                (Some(block), Some(want)) => want
                    .iter()
                    .enumerate()
                    .all(|(node, w)| (0..case.t_in).all(|i| block[i * s.n_nodes() + node] == w[i])),
                (None, None) => true,
                _ => false,
            };
            mismatches += usize::from(!ok);
        }

        let oracle = naive_samples(s, case.t_in, case.t_out);
        checked += 1;
        let ok = match build_samples(s, case.t_in, case.t_out) {
            Ok(samples) => {
                samples.len() == oracle.len()
                    && samples.iter().zip(&oracle).all(|(smp, (t0, x, y))| {
                        smp.t0 == *t0 && smp.x.values() == x.as_slice() && smp.y.values() == y.as_slice()
                    })
            }
            Err(_) => oracle.is_empty(),
        };
        mismatches += usize::from(!ok);
    }
    let pass = mismatches == 0;
    verdict(9, pass, &format!("100 random series, {checked} element checks, {mismatches} mismatches"));
    assert!(pass);
}
