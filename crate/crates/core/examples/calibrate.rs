//! Scratch calibration harness: times one pretrain + finetune + decode
//! cycle and prints the scores the acceptance sweep will gate on.
//! Run: cargo run --example calibrate -p clsum-core [mono pool pre_steps ft_lr ft_steps]

use std::time::Instant;

use clsum_core::corpus::*;
use clsum_core::decode::*;
use clsum_core::eval::*;
use clsum_core::model::*;
use clsum_core::probe::*;
use clsum_core::train::*;

fn decode_all(
    model: &Seq2SeqModel,
    vocab: &Vocabulary,
    test: &[Example],
    mode: TrainingMode,
    cfg: &DecodeConfig,
) -> Vec<DecodeRecord> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let chunk = test.len().div_ceil(workers);
    let mut records: Vec<Option<DecodeRecord>> = vec![None; test.len()];
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for (w, docs) in test.chunks(chunk).enumerate() {
            let base = w * chunk;
            handles.push(s.spawn(move || {
                docs.iter()
                    .enumerate()
                    .map(|(i, ex)| {
                        let out = beam_search(model, vocab, &ex.doc, mode, cfg).unwrap();
                        DecodeRecord {
                            doc_id: base + i,
                            sum_a: out.sum_a,
                            sum_b: out.sum_b,
                            score: out.score,
                            truncated: out.truncated,
                        }
                    })
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for r in h.join().unwrap() {
                let id = r.doc_id;
                records[id] = Some(r);
            }
        }
    });
    records.into_iter().map(|r| r.unwrap()).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mono_n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8000);
    let pool_n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10000);
    let pre_steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1600);
    let ft_lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let ft_steps: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lang_size: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(96);

    let vocab = Vocabulary::new(lang_size);
    let gen = GenParams::default();
    let sizes = CorpusSizes {
        mono_pretrain: mono_n,
        parallel_pool: pool_n,
        valid: 200,
        test: 300,
    };
    let splits = generate_corpus(&vocab, 1, &sizes, &gen).unwrap();

    let model_cfg = ModelConfig::desk(vocab.size());
    let model = Seq2SeqModel::new(model_cfg.clone(), 1, 42).unwrap();

    let pre_cfg = TrainConfig {
        max_steps: pre_steps,
        eval_every: 200,
        patience: 0,
        seed: 42,
        ..TrainConfig::desk()
    };
    let t0 = Instant::now();
    let (pretrained, report) =
        pretrain_monolingual(model, &vocab, &splits.mono, &splits.valid, &pre_cfg).unwrap();
    println!(
        "pretrain: {:?}, steps {}, best val/token {:.4} (0.5 ln V = {:.3})",
        t0.elapsed(),
        report.steps,
        report.best_val_per_token,
        0.5 * (vocab.size() as f64).ln()
    );

    let decode_cfg = DecodeConfig { max_len: 4 * (2 * gen.n_max + 1), ..DecodeConfig::default() };
    let test = &splits.test;
    let t0 = Instant::now();
    let mut f1 = 0.0;
    let mono_recs: Vec<(usize, Vec<usize>)> = {
        let mut v = Vec::new();
        for (i, ex) in test.iter().enumerate() {
            let r = beam_decode_sequence(&pretrained, &vocab, &ex.doc, 1, DecodeTask::Monolingual, &decode_cfg).unwrap();
            let sum_a: Vec<usize> = r.tokens.iter().copied().filter(|&t| vocab.is_a(t)).collect();
            v.push((i, sum_a));
        }
        v
    };
    for (i, sa) in &mono_recs {
        f1 += rouge_n(sa, &test[*i].sum_a, 1).f1;
    }
    println!(
        "pretrained mono R1 F1: {:.4} ({:?})",
        f1 / test.len() as f64,
        t0.elapsed()
    );

    for scen in [ScenarioName::Minimum, ScenarioName::Medium] {
        for mode in [TrainingMode::Mclas, TrainingMode::Ncls, TrainingMode::NclsMs] {
            let spec = ScenarioSpec::named(scen, 7);
            let subset = scenario_subset(&splits.pool, &spec).unwrap();
            let ft_cfg = TrainConfig {
                batch_size: 8,
                base_lr_enc: ft_lr,
                base_lr_dec: ft_lr,
                warmup_enc: 60,
                warmup_dec: 30,
                max_steps: ft_steps,
                eval_every: 40,
                patience: 12,
                seed: 42,
                ..TrainConfig::desk()
            };
            let t0 = Instant::now();
            let (tuned, rep) = finetune(&pretrained, mode, &vocab, &subset, &splits.valid, &ft_cfg).unwrap();
            let tt = t0.elapsed();
            let t0 = Instant::now();
            let records = decode_all(&tuned, &vocab, test, mode, &decode_cfg);
            let dt = t0.elapsed();
            let report = evaluate_run(&records, test).unwrap();
            println!(
                "{:8} {:8} | {:3} ex | train {:5.1}s decode {:5.1}s | steps {:4} val {:.3} | R1 {:.4} R2 {:.4} RL {:.4} | len {:.2}/{:.2} | mono R1 {}",
                mode.as_str(),
                scen.as_str(),
                subset.len(),
                tt.as_secs_f64(),
                dt.as_secs_f64(),
                rep.steps,
                rep.best_val_per_token,
                report.rouge1.f1,
                report.rouge2.f1,
                report.rouge_l.f1,
                report.len_gen,
                report.len_gold,
                report.mono.as_ref().map(|m| format!("{:.4}", m.rouge1.f1)).unwrap_or("-".into()),
            );
            if mode == TrainingMode::Mclas && scen == ScenarioName::Medium {
                // probe viability check on a fixed-layout probe set
                let probe_gen = GenParams { doc_len: 12..=12, salient_count: 3..=3, ..gen.clone() };
                let probe_sizes = CorpusSizes { mono_pretrain: 0, parallel_pool: 16, valid: 0, test: 0 };
                let probe_set = generate_corpus(&vocab, 99, &probe_sizes, &probe_gen).unwrap().pool;
                let rep = probe_model(&tuned, &vocab, &probe_set, probe_gen.repeat, &ProbeThresholds::default()).unwrap();
                for h in &rep.heads {
                    println!(
                        "  probe {:?} l{} h{} labels {:?} stats {:?}",
                        h.kind, h.layer, h.head, h.labels, h.stats
                    );
                }
            }
        }
    }
}
