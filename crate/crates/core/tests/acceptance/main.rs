//! Acceptance suite: runs every criterion at its stated tolerance and
//! prints one pass/fail line per criterion.
//!
//! Run with: cargo test --test acceptance -- --nocapture
//! The training sweep behind the directional criteria takes tens of
//! minutes on a multi-core machine; everything else is fast.

mod sweep;

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clsum_core::corpus::{generate_corpus, CorpusSizes, GenParams, Vocabulary};
use clsum_core::decode::DecodeConfig;
use clsum_core::eval::{bws_score, fleiss_kappa, rouge_l, rouge_n, BwsTally, KappaTable};
use clsum_core::harness::decode_corpus;
use clsum_core::model::{ForwardMode, ModelConfig, Seq2SeqModel};
use clsum_core::tensor::{Reduction, Tape, TensorId};
use clsum_core::train::{loss_mclas, train, TrainConfig, TrainState, TrainTask, TrainingMode};

pub struct Outcome {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

pub fn record(results: &mut Vec<Outcome>, id: usize, name: &'static str, pass: bool, detail: String) {
    println!(
        "criterion {:2} [{}] {:<28} {}",
        id,
        if pass { "PASS" } else { "FAIL" },
        name,
        detail
    );
    results.push(Outcome { id, name, pass, detail });
}

// ── criterion 1: finite-difference gradient checks ──────────────────

fn finite_diff(f: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut grads = Vec::new();
    for p in 0..inputs.len() {
        let mut g = vec![0.0; inputs[p].len()];
        for i in 0..inputs[p].len() {
            let mut plus = inputs.to_vec();
            plus[p][i] += h;
            let mut minus = inputs.to_vec();
            minus[p][i] -= h;
            g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Scalar readout mixing every output entry through fixed random
/// weights (a plain sum would zero out softmax gradients).
fn weighted_sum(tape: &mut Tape, id: TensorId, w: &[f64]) -> TensorId {
    let shape = tape.shape(id).to_vec();
    assert_eq!(shape.len(), 2, "weighted readout expects rank 2");
    let wt = tape.constant(w.to_vec(), shape).unwrap();
    let t = tape.transpose(id).unwrap();
    let m = tape.matmul(wt, t).unwrap();
    tape.sum_all(m)
}

fn criterion_gradients(results: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_260_810);
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();

    let mut check = |name: &str,
                     builder: &dyn Fn(&mut Tape, &[Vec<f64>]) -> (TensorId, Vec<TensorId>),
                     inputs: Vec<Vec<f64>>| {
        let f = |vals: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let (out, _) = builder(&mut tape, vals);
            tape.values(out)[0]
        };
        let fd = finite_diff(&f, &inputs, 1e-5);
        let mut tape = Tape::new();
        let (out, leaves) = builder(&mut tape, &inputs);
        tape.backward(out);
        for (leaf, fd_grad) in leaves.iter().zip(fd.iter()) {
            let got = tape.grad(*leaf).expect("leaf gradient present");
            let err = max_rel_err(got, fd_grad);
            if err > worst {
                worst = err;
            }
            if err >= 1e-4 {
                failures.push(format!("{name}: rel err {err:.2e}"));
            }
        }
    };

    for trial in 0..5usize {
        let m = 2 + trial % 3;
        let k = 3 + trial % 2;
        let n = 2 + (trial + 1) % 3;
        let d = 4 + 2 * (trial % 2);
        let rv = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };

        let w = rv(&mut rng, m * n);
        let a0 = rv(&mut rng, m * k);
        let b0 = rv(&mut rng, k * n);
        {
            let w = w.clone();
            check(
                "matmul",
                &move |tape, vals| {
                    let a = tape.leaf(vals[0].clone(), vec![m, k], true).unwrap();
                    let b = tape.leaf(vals[1].clone(), vec![k, n], true).unwrap();
                    let c = tape.matmul(a, b).unwrap();
                    let s = weighted_sum(tape, c, &w);
                    (s, vec![a, b])
                },
                vec![a0, b0],
            );
        }

        let x0 = rv(&mut rng, m * d);
        let w2 = rv(&mut rng, m * d);
        {
            let w2 = w2.clone();
            check(
                "softmax",
                &move |tape, vals| {
                    let x = tape.leaf(vals[0].clone(), vec![m, d], true).unwrap();
                    let s = tape.softmax(x, 1).unwrap();
                    let out = weighted_sum(tape, s, &w2);
                    (out, vec![x])
                },
                vec![x0],
            );
        }

        let x0 = rv(&mut rng, m * d);
        let g0 = rv(&mut rng, d);
        let b0 = rv(&mut rng, d);
        let w3 = rv(&mut rng, m * d);
        {
            let w3 = w3.clone();
            check(
                "layer_norm",
                &move |tape, vals| {
                    let x = tape.leaf(vals[0].clone(), vec![m, d], true).unwrap();
                    let g = tape.leaf(vals[1].clone(), vec![d], true).unwrap();
                    let b = tape.leaf(vals[2].clone(), vec![d], true).unwrap();
                    let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
                    let out = weighted_sum(tape, y, &w3);
                    (out, vec![x, g, b])
                },
                vec![x0, g0, b0],
            );
        }

        let v = 6 + trial;
        let t = 3 + trial % 2;
        let logits0 = rv(&mut rng, t * v);
        let targets: Vec<usize> = (0..t).map(|i| (i * 2 + trial) % v).collect();
        let mut ignore = vec![false; t];
        ignore[trial % t] = trial % 2 == 0;
        {
            let targets = targets.clone();
            let ignore = ignore.clone();
            check(
                "cross_entropy",
                &move |tape, vals| {
                    let l = tape.leaf(vals[0].clone(), vec![t, v], true).unwrap();
                    let loss = tape
                        .cross_entropy(l, &targets, &ignore, Reduction::Mean)
                        .unwrap();
                    (loss, vec![l])
                },
                vec![logits0],
            );
        }

        // relu away from the kink, bias add, slice/concat, scale
        let x0: Vec<f64> = (0..m * d)
            .map(|_| {
                let v: f64 = rng.gen_range(0.15..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let bias0: Vec<f64> = vec![0.01; d]; // keep the kink away from inputs
        let w4 = rv(&mut rng, m * d);
        {
            let w4 = w4.clone();
            check(
                "relu_add_row_slice_concat",
                &move |tape, vals| {
                    let x = tape.leaf(vals[0].clone(), vec![m, d], true).unwrap();
                    let b = tape.leaf(vals[1].clone(), vec![d], true).unwrap();
                    let xb = tape.add_row(x, b).unwrap();
                    let r = tape.relu(xb);
                    let left = tape.slice_cols(r, 0, d / 2).unwrap();
                    let right = tape.slice_cols(r, d / 2, d - d / 2).unwrap();
                    let swapped = tape.concat_cols(&[right, left]).unwrap();
                    let sc = tape.scale(swapped, 1.5);
                    let out = weighted_sum(tape, sc, &w4);
                    (out, vec![x, b])
                },
                vec![x0, bias0],
            );
        }

        let table0 = rv(&mut rng, v * d);
        let ids: Vec<usize> = (0..t + 1).map(|i| (i * 3 + trial) % v).collect();
        let w5 = rv(&mut rng, (t + 1) * d);
        {
            let ids = ids.clone();
            let w5 = w5.clone();
            check(
                "embedding",
                &move |tape, vals| {
                    let table = tape.leaf(vals[0].clone(), vec![v, d], true).unwrap();
                    let e = tape.embedding(table, &ids).unwrap();
                    let out = weighted_sum(tape, e, &w5);
                    (out, vec![table])
                },
                vec![table0],
            );
        }

        // dropout with a replayed mask (same seed on every evaluation)
        let x0 = rv(&mut rng, m * d);
        let w6 = rv(&mut rng, m * d);
        let mask_seed = 1000 + trial as u64;
        {
            let w6 = w6.clone();
            check(
                "dropout",
                &move |tape, vals| {
                    let x = tape.leaf(vals[0].clone(), vec![m, d], true).unwrap();
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    let dr = tape.dropout(x, 0.3, &mut mask_rng);
                    let out = weighted_sum(tape, dr, &w6);
                    (out, vec![x])
                },
                vec![x0],
            );
        }
    }

    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed.as_secs() < 60;
    record(
        results,
        1,
        "gradient correctness",
        pass,
        format!(
            "max rel err {:.2e} over 7 op chains x 5 shapes, {:.1}s{}",
            worst,
            elapsed.as_secs_f64(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {failures:?}")
            }
        ),
    );
}

// ── criterion 2: loss decomposition identity ────────────────────────

fn criterion_decomposition(results: &mut Vec<Outcome>) {
    let vocab = Vocabulary::new(40);
    let model = Seq2SeqModel::new(
        ModelConfig {
            layers_enc: 1,
            layers_dec: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size: vocab.size(),
            dropout_p: 0.1,
            max_positions: 128,
        },
        1,
        99,
    )
    .unwrap();
    let sizes = CorpusSizes { mono_pretrain: 0, parallel_pool: 100, valid: 0, test: 0 };
    let splits = generate_corpus(&vocab, 271_828, &sizes, &GenParams::default()).unwrap();
    let mut worst: f64 = 0.0;
    for ex in &splits.pool {
        let (total, a, b) = loss_mclas(&model, &vocab, std::slice::from_ref(ex)).unwrap();
        worst = worst.max((total - (a + b)).abs());
    }
    record(
        results,
        2,
        "loss decomposition identity",
        worst < 1e-9,
        format!("max |total - (span_a + span_b)| = {worst:.2e} over 100 examples"),
    );
}

// ── criterion 3: two-path decoding identity ─────────────────────────

fn criterion_two_path(results: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(314_159);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let vocab_size = 24 + (case % 4) * 8;
        let config = ModelConfig {
            layers_enc: 1 + case % 2,
            layers_dec: 1 + (case + 1) % 2,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size,
            dropout_p: 0.1,
            max_positions: 64,
        };
        let model = Seq2SeqModel::new(config, 1, case as u64).unwrap();
        let doc_len = rng.gen_range(3..8);
        let doc: Vec<usize> = (0..doc_len).map(|_| rng.gen_range(5..vocab_size)).collect();
        let prefix_len = rng.gen_range(2..7);
        let mut prefix = vec![1usize];
        prefix.extend((1..prefix_len).map(|_| rng.gen_range(5..vocab_size)));

        let memory = model.encode(&doc).unwrap();
        let mut tape = Tape::new();
        let mut binding = model.binding(false);
        let mut mode = ForwardMode::Eval;
        let mem_id = tape
            .constant(memory.values.clone(), memory.shape.clone())
            .unwrap();
        let (logits_id, _) = model
            .decode_bound(&mut tape, &mut binding, mem_id, &prefix, 1, &mut mode, false)
            .unwrap();
        let full = tape.values(logits_id).to_vec();

        for t in 1..=prefix.len() {
            let (step, _) = model.decode_step(&memory, &prefix[..t], 1, false).unwrap();
            let row = &full[(t - 1) * vocab_size..t * vocab_size];
            for (a, b) in row.iter().zip(step.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    record(
        results,
        3,
        "two-path decoding identity",
        worst < 1e-9,
        format!("max |teacher-forced - incremental| logit gap = {worst:.2e} over 20 cases"),
    );
}

// ── criterion 9: metric oracles ─────────────────────────────────────

fn criterion_metric_oracles(results: &mut Vec<Outcome>) {
    let mut ok = true;
    let mut notes = Vec::new();

    fn lcs_oracle(a: &[usize], b: &[usize]) -> usize {
        let (n, m) = (a.len(), b.len());
        let mut dp = vec![vec![0usize; m + 1]; n + 1];
        for i in 1..=n {
            for j in 1..=m {
                dp[i][j] = if a[i - 1] == b[j - 1] {
                    dp[i - 1][j - 1] + 1
                } else {
                    dp[i - 1][j].max(dp[i][j - 1])
                };
            }
        }
        dp[n][m]
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1729);
    let mut lcs_exact = true;
    for _ in 0..100 {
        let la = rng.gen_range(1..15);
        let lb = rng.gen_range(1..15);
        let a: Vec<usize> = (0..la).map(|_| rng.gen_range(0..7)).collect();
        let b: Vec<usize> = (0..lb).map(|_| rng.gen_range(0..7)).collect();
        let got = rouge_l(&a, &b);
        let lcs = lcs_oracle(&a, &b) as f64;
        if got.p != lcs / a.len() as f64 || got.r != lcs / b.len() as f64 {
            lcs_exact = false;
        }
    }
    ok &= lcs_exact;
    notes.push(format!("rouge_l DP oracle exact on 100 pairs: {lcs_exact}"));

    let c = rouge_n(&[7, 7, 8], &[7, 8], 1);
    let clip_ok = (c.p - 2.0 / 3.0).abs() < 1e-12 && c.r == 1.0 && (c.f1 - 0.8).abs() < 1e-12;
    ok &= clip_ok;
    notes.push(format!("rouge_n clipping P=2/3 R=1 F1=0.8: {clip_ok}"));

    let perfect = KappaTable { counts: vec![vec![3, 0], vec![0, 3]], raters: 3 };
    let k1 = fleiss_kappa(&perfect).unwrap().kappa;
    let mixed = KappaTable {
        counts: vec![vec![2, 1], vec![1, 2], vec![3, 0], vec![0, 3]],
        raters: 3,
    };
    let k2 = fleiss_kappa(&mixed).unwrap().kappa;
    let direct = {
        let counts = [[2.0_f64, 1.0], [1.0, 2.0], [3.0, 0.0], [0.0, 3.0]];
        let (r, n) = (3.0, 4.0);
        let p_bar = counts
            .iter()
            .map(|row| (row.iter().map(|c| c * c).sum::<f64>() - r) / (r * (r - 1.0)))
            .sum::<f64>()
            / n;
        let pe: f64 = (0..2)
            .map(|j| {
                let col: f64 = counts.iter().map(|row| row[j]).sum();
                (col / (n * r)).powi(2)
            })
            .sum();
        (p_bar - pe) / (1.0 - pe)
    };
    let kappa_ok = (k1 - 1.0).abs() < 1e-9 && (k2 - direct).abs() < 1e-9;
    ok &= kappa_ok;
    notes.push(format!("fleiss kappa direct-formula match: {kappa_ok}"));

    let b1 = bws_score(&BwsTally { best: 6, worst: 2, total: 20 }).unwrap();
    let b2 = bws_score(&BwsTally { best: 20, worst: 0, total: 20 }).unwrap();
    let b3 = bws_score(&BwsTally { best: 0, worst: 20, total: 20 }).unwrap();
    let bws_ok = (b1 - 0.2).abs() < 1e-12 && b2 == 1.0 && b3 == -1.0;
    ok &= bws_ok;
    notes.push(format!("bws (6-2)/20 = 0.2 and extremes: {bws_ok}"));

    record(results, 9, "metric oracles", ok, notes.join("; "));
}

// ── criterion 11: determinism ───────────────────────────────────────

fn criterion_determinism(results: &mut Vec<Outcome>) {
    let vocab = Vocabulary::new(24);
    let sizes = CorpusSizes { mono_pretrain: 200, parallel_pool: 60, valid: 0, test: 40 };
    let splits = generate_corpus(&vocab, 8, &sizes, &GenParams::default()).unwrap();
    let config = ModelConfig {
        layers_enc: 1,
        layers_dec: 1,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab.size(),
        dropout_p: 0.1,
        max_positions: 64,
    };
    let tc = TrainConfig {
        batch_size: 8,
        max_steps: 100,
        eval_every: 0,
        patience: 0,
        seed: 21,
        ..TrainConfig::desk()
    };
    let run = || {
        let model = Seq2SeqModel::new(config.clone(), 1, 77).unwrap();
        let mut state = TrainState::new(model, &tc);
        let report = train(&mut state, &vocab, TrainTask::Mono, &splits.mono, &[], &tc).unwrap();
        let losses: Vec<u64> = report.history.iter().map(|h| h.loss.to_bits()).collect();
        (losses, state.model)
    };
    let (l1, m1) = run();
    let (l2, m2) = run();
    let losses_ok = l1.len() == 100 && l1 == l2;

    let dcfg = DecodeConfig::default();
    let d1 = decode_corpus(&m1, &vocab, &splits.test, TrainingMode::Mclas, &dcfg, 4).unwrap();
    let d2 = decode_corpus(&m2, &vocab, &splits.test, TrainingMode::Mclas, &dcfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    clsum_core::decode::write_decodes(&d1, &p1).unwrap();
    clsum_core::decode::write_decodes(&d2, &p2).unwrap();
    let decode_ok = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    record(
        results,
        11,
        "determinism",
        losses_ok && decode_ok,
        format!(
            "100 training losses bit-identical: {losses_ok}; decode files byte-identical across worker counts: {decode_ok}"
        ),
    );
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    criterion_gradients(&mut results);
    criterion_decomposition(&mut results);
    criterion_two_path(&mut results);
    sweep::run(&mut results);
    criterion_metric_oracles(&mut results);
    criterion_determinism(&mut results);

    results.sort_by_key(|r| r.id);
    println!("\n== acceptance summary ==");
    for r in &results {
        println!(
            "criterion {:2} [{}] {}",
            r.id,
            if r.pass { "PASS" } else { "FAIL" },
            r.name
        );
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("criterion {} ({}): {}", r.id, r.name, r.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
