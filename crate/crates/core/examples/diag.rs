//! Diagnostic for the unified-decoder minimum-scenario behavior:
//! where does the probability mass sit right after the separator?
//! Run: cargo run --example diag -p clsum-core [lang ft_steps ft_lr patience]

use clsum_core::corpus::*;
use clsum_core::decode::*;
use clsum_core::model::*;
use clsum_core::train::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lang: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let ft_steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(800);
    let ft_lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let patience: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(12);

    let vocab = Vocabulary::new(lang);
    let gen = GenParams::default();
    let sizes = CorpusSizes { mono_pretrain: 8000, parallel_pool: 10000, valid: 200, test: 100 };
    let splits = generate_corpus(&vocab, 1, &sizes, &gen).unwrap();

    let model = Seq2SeqModel::new(ModelConfig::desk(vocab.size()), 1, 42).unwrap();
    let pre_cfg = TrainConfig { max_steps: 1600, eval_every: 200, patience: 0, seed: 42, ..TrainConfig::desk() };
    let (pretrained, _) = pretrain_monolingual(model, &vocab, &splits.mono, &splits.valid, &pre_cfg).unwrap();

    let subset = scenario_subset(&splits.pool, &ScenarioSpec::named(ScenarioName::Minimum, 7)).unwrap();
    let ft_cfg = TrainConfig {
        batch_size: 8,
        base_lr_enc: ft_lr,
        base_lr_dec: ft_lr,
        warmup_enc: 60,
        warmup_dec: 30,
        max_steps: ft_steps,
        eval_every: 40,
        patience,
        seed: 42,
        ..TrainConfig::desk()
    };
    let (tuned, rep) = finetune(&pretrained, TrainingMode::Mclas, &vocab, &subset, &splits.valid, &ft_cfg).unwrap();
    println!("finetune steps {} best val {:.4}", rep.steps, rep.best_val_per_token);
    for (s, v) in &rep.validation {
        println!("  val @{s}: {v:.4}");
    }
    // span parts on validation set
    let (total, a, b) = loss_mclas(&tuned, &vocab, &splits.valid).unwrap();
    println!("valid loss per-example sums: total {total:.3} span_a {a:.3} span_b {b:.3}");

    // teacher-forced probability mass right after the separator
    let mut p_eos_tf = 0.0;
    let mut p_gold_tf = 0.0;
    for ex in &splits.valid[..50] {
        let t = build_concat_target(&ex.sum_a, ex.sum_b.as_ref().unwrap(), &vocab).unwrap();
        let memory = tuned.encode(&ex.doc).unwrap();
        let prefix = &t.tokens[..t.lsep_index + 1]; // up to and including LSEP
        let (logits, _) = tuned.decode_step(&memory, prefix, 1, false).unwrap();
        let probs = softmax(&logits);
        p_eos_tf += probs[vocab.eos];
        if let Some(&first_b) = ex.sum_b.as_ref().unwrap().first() {
            p_gold_tf += probs[first_b];
        }
    }
    println!("teacher-forced after LSEP: mean p(eos) {:.4} mean p(gold first B) {:.4}", p_eos_tf / 50.0, p_gold_tf / 50.0);

    // generated-prefix probability mass after the separator
    let decode_cfg = DecodeConfig { max_len: 4 * (2 * gen.n_max + 1), ..DecodeConfig::default() };
    let mut p_eos_gen = 0.0;
    let mut n_gen = 0usize;
    let mut empties = 0usize;
    for ex in &splits.test {
        let out = beam_search(&tuned, &vocab, &ex.doc, TrainingMode::Mclas, &decode_cfg).unwrap();
        if out.sum_b.is_empty() {
            empties += 1;
        }
        // greedy phase A then inspect the post-separator distribution
        let memory = tuned.encode(&ex.doc).unwrap();
        let mut tokens = vec![vocab.bos];
        for _ in 0..16 {
            let (logits, _) = tuned.decode_step(&memory, &tokens, 1, false).unwrap();
            let allowed = vocab_mask(&vocab, Phase::A, DecodeTask::Concatenated);
            let scores = masked_log_softmax(&logits, &allowed);
            let tok = scores
                .iter()
                .enumerate()
                .filter(|(_, s)| s.is_finite())
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            tokens.push(tok);
            if tok == vocab.lsep {
                break;
            }
        }
        if *tokens.last().unwrap() == vocab.lsep {
            let (logits, _) = tuned.decode_step(&memory, &tokens, 1, false).unwrap();
            let probs = softmax(&logits);
            p_eos_gen += probs[vocab.eos];
            n_gen += 1;
        }
    }
    println!(
        "generated prefix after LSEP: mean p(eos) {:.4} over {n_gen} docs; {empties}/{} empty beam outputs",
        p_eos_gen / n_gen.max(1) as f64,
        splits.test.len()
    );
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}
