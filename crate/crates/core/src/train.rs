//! Training objectives and the pretrain-then-finetune scheme.
//!
//! Three modes share one trainer: the direct cross-lingual objective
//! (NCLS, one decoder on the cross-lingual summary), the two-decoder
//! multi-task objective (NCLS+MS), and the unified-decoder objective
//! (MCLAS) trained on the concatenated target
//! `[BOS] S^A [LSEP] S^B [EOS]`. Losses are per-example sums averaged
//! over the batch, with two Adam optimizers on separate warmup
//! schedules for the encoder and decoder parameter groups.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, Vocabulary};
use crate::model::{ForwardMode, ModelError, Seq2SeqModel, TapeBinding};
use crate::optim::{adam_step, AdamParam, OptimizerState};
use crate::tensor::{Reduction, Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure at step {step}: {msg}")]
    Numeric { step: u64, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Ncls,
    NclsMs,
    Mclas,
}

impl TrainingMode {
    pub fn decoder_count(self) -> usize {
        match self {
            TrainingMode::NclsMs => 2,
            _ => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ncls" => Some(TrainingMode::Ncls),
            "ncls_ms" => Some(TrainingMode::NclsMs),
            "mclas" => Some(TrainingMode::Mclas),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Ncls => "ncls",
            TrainingMode::NclsMs => "ncls_ms",
            TrainingMode::Mclas => "mclas",
        }
    }
}

/// What the decoder is asked to produce. Monolingual pretraining is the
/// `Mono` task; finetuning maps a [`TrainingMode`] onto the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTask {
    Mono,
    Ncls,
    NclsMs,
    Mclas,
}

impl From<TrainingMode> for TrainTask {
    fn from(mode: TrainingMode) -> Self {
        match mode {
            TrainingMode::Ncls => TrainTask::Ncls,
            TrainingMode::NclsMs => TrainTask::NclsMs,
            TrainingMode::Mclas => TrainTask::Mclas,
        }
    }
}

impl TrainTask {
    fn decoder_count(self) -> usize {
        match self {
            TrainTask::NclsMs => 2,
            _ => 1,
        }
    }
}

/// The concatenated generation target with span bookkeeping. Spans
/// index prediction positions: position `t` predicts `tokens[t + 1]`,
/// so span_a covers the monolingual tokens plus the separator and
/// span_b the cross-lingual tokens plus the end token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcatTarget {
    pub tokens: Vec<usize>,
    pub span_a: Range<usize>,
    pub span_b: Range<usize>,
    pub lsep_index: usize,
}

pub fn build_concat_target(
    sum_a: &[usize],
    sum_b: &[usize],
    vocab: &Vocabulary,
) -> Result<ConcatTarget, TrainError> {
    for (&t, lang) in sum_a.iter().map(|t| (t, 'A')).chain(sum_b.iter().map(|t| (t, 'B'))) {
        if t == vocab.lsep {
            return Err(TrainError::Data("separator token inside a summary segment".into()));
        }
        let ok = match lang {
            'A' => vocab.is_a(t),
            _ => vocab.is_b(t),
        };
        if !ok {
            return Err(TrainError::Data(format!(
                "token id {t} outside language {lang} range"
            )));
        }
    }
    let n = sum_a.len();
    let np = sum_b.len();
    let mut tokens = Vec::with_capacity(n + np + 3);
    tokens.push(vocab.bos);
    tokens.extend_from_slice(sum_a);
    tokens.push(vocab.lsep);
    tokens.extend_from_slice(sum_b);
    tokens.push(vocab.eos);
    Ok(ConcatTarget {
        span_a: 0..n + 1,
        span_b: n + 1..n + np + 2,
        lsep_index: n + 1,
        tokens,
    })
}

fn wrap(tokens: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(vocab.bos);
    out.extend_from_slice(tokens);
    out.push(vocab.eos);
    out
}

fn require_sum_b<'e>(ex: &'e Example) -> Result<&'e [usize], TrainError> {
    ex.sum_b
        .as_deref()
        .ok_or_else(|| TrainError::Data("example is missing sum_b".into()))
}

/// Per-example loss nodes on a shared tape. `total` carries the
/// gradient; the parts are separate read-outs of the same logits.
pub struct ExampleLoss {
    pub total: TensorId,
    pub part_a: Option<TensorId>,
    pub part_b: Option<TensorId>,
    /// Prediction positions contributing to `total`.
    pub token_count: usize,
}

/// Builds encoder + decoder(s) + loss for one example on `tape`.
/// Per-example reduction is a sum over prediction positions.
pub fn example_loss_on_tape(
    model: &Seq2SeqModel,
    tape: &mut Tape,
    binding: &mut TapeBinding,
    vocab: &Vocabulary,
    task: TrainTask,
    ex: &Example,
    mode: &mut ForwardMode<'_>,
) -> Result<ExampleLoss, TrainError> {
    if model.decoder_count != task.decoder_count() {
        return Err(TrainError::Config(format!(
            "task needs {} decoder(s), model has {}",
            task.decoder_count(),
            model.decoder_count
        )));
    }
    let memory = model.encode_bound(tape, binding, &ex.doc, mode)?;

    let teacher = |tape: &mut Tape,
                   binding: &mut TapeBinding,
                   mode: &mut ForwardMode<'_>,
                   target: &[usize],
                   which: usize|
     -> Result<(TensorId, usize), TrainError> {
        let prefix = &target[..target.len() - 1];
        let (logits, _) = model.decode_bound(tape, binding, memory, prefix, which, mode, false)?;
        let predictions = &target[1..];
        let ignore = vec![false; predictions.len()];
        let loss = tape.cross_entropy(logits, predictions, &ignore, Reduction::Sum)?;
        Ok((loss, predictions.len()))
    };

    match task {
        TrainTask::Mono => {
            let target = wrap(&ex.sum_a, vocab);
            let (loss, count) = teacher(tape, binding, mode, &target, 1)?;
            Ok(ExampleLoss { total: loss, part_a: None, part_b: None, token_count: count })
        }
        TrainTask::Ncls => {
            let target = wrap(require_sum_b(ex)?, vocab);
            let (loss, count) = teacher(tape, binding, mode, &target, 1)?;
            Ok(ExampleLoss { total: loss, part_a: None, part_b: None, token_count: count })
        }
        TrainTask::NclsMs => {
            let target_a = wrap(&ex.sum_a, vocab);
            let target_b = wrap(require_sum_b(ex)?, vocab);
            let (loss_a, count_a) = teacher(tape, binding, mode, &target_a, 1)?;
            let (loss_b, count_b) = teacher(tape, binding, mode, &target_b, 2)?;
            let total = tape.sum_list(&[loss_a, loss_b])?;
            Ok(ExampleLoss {
                total,
                part_a: Some(loss_a),
                part_b: Some(loss_b),
                token_count: count_a + count_b,
            })
        }
        TrainTask::Mclas => {
            let target = build_concat_target(&ex.sum_a, require_sum_b(ex)?, vocab)?;
            let prefix = &target.tokens[..target.tokens.len() - 1];
            let (logits, _) = model.decode_bound(tape, binding, memory, prefix, 1, mode, false)?;
            let predictions = &target.tokens[1..];
            let none = vec![false; predictions.len()];
            let total = tape.cross_entropy(logits, predictions, &none, Reduction::Sum)?;
            let mut mask_a = vec![true; predictions.len()];
            for i in target.span_a.clone() {
                mask_a[i] = false;
            }
            let mut mask_b = vec![true; predictions.len()];
            for i in target.span_b.clone() {
                mask_b[i] = false;
            }
            let part_a = tape.cross_entropy(logits, predictions, &mask_a, Reduction::Sum)?;
            let part_b = tape.cross_entropy(logits, predictions, &mask_b, Reduction::Sum)?;
            Ok(ExampleLoss {
                total,
                part_a: Some(part_a),
                part_b: Some(part_b),
                token_count: predictions.len(),
            })
        }
    }
}

fn batch_losses(
    model: &Seq2SeqModel,
    vocab: &Vocabulary,
    task: TrainTask,
    batch: &[Example],
) -> Result<Vec<(f64, Option<f64>, Option<f64>)>, TrainError> {
    let mut tape = Tape::new();
    let mut binding = model.binding(false);
    let mut mode = ForwardMode::Eval;
    batch
        .iter()
        .map(|ex| {
            let l = example_loss_on_tape(model, &mut tape, &mut binding, vocab, task, ex, &mut mode)?;
            Ok((
                tape.values(l.total)[0],
                l.part_a.map(|id| tape.values(id)[0]),
                l.part_b.map(|id| tape.values(id)[0]),
            ))
        })
        .collect()
}

/// Batch-mean (over examples) of per-example summed NLL of `sum_b`.
pub fn loss_ncls(model: &Seq2SeqModel, vocab: &Vocabulary, batch: &[Example]) -> Result<f64, TrainError> {
    let per = batch_losses(model, vocab, TrainTask::Ncls, batch)?;
    Ok(mean(per.iter().map(|p| p.0)))
}

/// Two-decoder multi-task loss: (total, monolingual part, cross part),
/// each a batch mean of per-example sums.
pub fn loss_ncls_ms(
    model: &Seq2SeqModel,
    vocab: &Vocabulary,
    batch: &[Example],
) -> Result<(f64, f64, f64), TrainError> {
    let per = batch_losses(model, vocab, TrainTask::NclsMs, batch)?;
    Ok((
        mean(per.iter().map(|p| p.0)),
        mean(per.iter().map(|p| p.1.unwrap())),
        mean(per.iter().map(|p| p.2.unwrap())),
    ))
}

/// Unified-decoder loss over the concatenated target: (total, span_a
/// part, span_b part), batch means of per-example sums. The parts
/// partition the prediction positions of the same forward pass.
pub fn loss_mclas(
    model: &Seq2SeqModel,
    vocab: &Vocabulary,
    batch: &[Example],
) -> Result<(f64, f64, f64), TrainError> {
    let per = batch_losses(model, vocab, TrainTask::Mclas, batch)?;
    Ok((
        mean(per.iter().map(|p| p.0)),
        mean(per.iter().map(|p| p.1.unwrap())),
        mean(per.iter().map(|p| p.2.unwrap())),
    ))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    pub base_lr_enc: f64,
    pub base_lr_dec: f64,
    pub warmup_enc: u64,
    pub warmup_dec: u64,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Evaluations without validation improvement before stopping;
    /// 0 disables early stopping.
    pub patience: u64,
    pub dropout_p: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            grad_accum: 1,
            base_lr_enc: 0.05,
            base_lr_dec: 0.05,
            warmup_enc: 200,
            warmup_dec: 100,
            max_steps: 2000,
            eval_every: 100,
            patience: 5,
            dropout_p: 0.1,
            seed: 0,
        }
    }

    /// Full-scale values the desk defaults stand in for.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 16,
            grad_accum: 5,
            base_lr_enc: 0.005,
            base_lr_dec: 0.2,
            warmup_enc: 10_000,
            warmup_dec: 5_000,
            max_steps: 200_000,
            eval_every: 2_000,
            patience: 10,
            dropout_p: 0.1,
            seed: 0,
        }
    }
}

/// One training-log record (append-only in the run log).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr_enc: f64,
    pub lr_dec: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_a_part: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_b_part: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub history: Vec<LossRecord>,
    pub validation: Vec<(u64, f64)>,
    pub best_val_per_token: f64,
    pub stopped_early: bool,
}

/// Mutable training state: model, two optimizers, counters, rng.
pub struct TrainState {
    pub model: Seq2SeqModel,
    pub opt_enc: OptimizerState,
    pub opt_dec: OptimizerState,
    pub step: u64,
    enc_group: Vec<usize>,
    dec_group: Vec<usize>,
    rng: ChaCha8Rng,
}

fn is_encoder_param(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("enc.")
}

impl TrainState {
    pub fn new(model: Seq2SeqModel, config: &TrainConfig) -> Self {
        let mut opt_enc = OptimizerState::new(config.base_lr_enc, config.warmup_enc);
        let mut opt_dec = OptimizerState::new(config.base_lr_dec, config.warmup_dec);
        let mut enc_group = Vec::new();
        let mut dec_group = Vec::new();
        for i in 0..model.params.len() {
            let numel = model.params.tensor(i).numel();
            if is_encoder_param(model.params.name(i)) {
                opt_enc.register(numel);
                enc_group.push(i);
            } else {
                opt_dec.register(numel);
                dec_group.push(i);
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        TrainState {
            model,
            opt_enc,
            opt_dec,
            step: 0,
            enc_group,
            dec_group,
            rng,
        }
    }

    /// One optimizer step over accumulated gradients covering
    /// `example_count` examples (mean-of-sums scaling applied here).
    fn flush(&mut self, example_count: usize) -> Result<(f64, f64), TrainError> {
        if !self.model.params.grads_finite() {
            return Err(TrainError::Numeric {
                step: self.step,
                msg: "non-finite gradient before optimizer step".into(),
            });
        }
        self.model.params.scale_grads(1.0 / example_count as f64);
        let lr_enc = self.opt_enc.next_lr();
        let lr_dec = self.opt_dec.next_lr();
        for (group, opt, lr) in [
            (&self.enc_group, &mut self.opt_enc, lr_enc),
            (&self.dec_group, &mut self.opt_dec, lr_dec),
        ] {
            let mut pairs = self.model.params.grad_params(group);
            let mut adam_params: Vec<AdamParam<'_>> = pairs
                .iter_mut()
                .map(|(values, grad)| AdamParam { values, grad })
                .collect();
            adam_step(&mut adam_params, opt, lr)?;
        }
        self.model.params.zero_grads();
        self.step += 1;
        Ok((lr_enc, lr_dec))
    }
}

/// Per-token validation loss on the raw (tapeless) path.
pub fn eval_per_token_loss(
    model: &Seq2SeqModel,
    vocab: &Vocabulary,
    task: TrainTask,
    examples: &[Example],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let memory = model.encode(&ex.doc)?;
        let mut add_target = |target: &[usize], which: usize| -> Result<(), TrainError> {
            let prefix = &target[..target.len() - 1];
            let (logits, _) = model.decode_full_raw(&memory, prefix, which, false)?;
            let v = model.config.vocab_size;
            for (t, &gold) in target[1..].iter().enumerate() {
                let row = &logits[t * v..(t + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[gold];
                count += 1;
            }
            Ok(())
        };
        match task {
            TrainTask::Mono => add_target(&wrap(&ex.sum_a, vocab), 1)?,
            TrainTask::Ncls => add_target(&wrap(require_sum_b(ex)?, vocab), 1)?,
            TrainTask::NclsMs => {
                add_target(&wrap(&ex.sum_a, vocab), 1)?;
                add_target(&wrap(require_sum_b(ex)?, vocab), 2)?;
            }
            TrainTask::Mclas => {
                let target = build_concat_target(&ex.sum_a, require_sum_b(ex)?, vocab)?;
                add_target(&target.tokens, 1)?;
            }
        }
    }
    if count == 0 {
        return Err(TrainError::Data("no prediction positions in validation set".into()));
    }
    Ok(total / count as f64)
}

/// Runs the training loop, checkpointing (in memory) the parameters
/// with the best validation per-token loss and restoring them at the
/// end. Bit-reproducible for a fixed config.
pub fn train(
    state: &mut TrainState,
    vocab: &Vocabulary,
    task: TrainTask,
    train_set: &[Example],
    valid_set: &[Example],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Data("training split is empty".into()));
    }
    if state.model.decoder_count != task.decoder_count() {
        return Err(TrainError::Config(format!(
            "task needs {} decoder(s), model has {}",
            task.decoder_count(),
            state.model.decoder_count
        )));
    }

    let mut history = Vec::new();
    let mut validation = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Vec<Vec<f64>>> = None;
    let mut evals_since_best = 0u64;
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len(); // trigger a shuffle on first use

    'outer: while state.step < config.max_steps {
        // accumulate `grad_accum` micro-batches, then step
        let mut flush_examples = 0usize;
        let mut flush_loss = 0.0;
        let mut flush_a = 0.0;
        let mut flush_b = 0.0;
        let mut has_parts = false;
        for _ in 0..config.grad_accum {
            let mut batch = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut state.rng);
                    cursor = 0;
                }
                batch.push(&train_set[order[cursor]]);
                cursor += 1;
            }

            let mut tape = Tape::new();
            let mut binding = state.model.binding(true);
            let mut totals = Vec::with_capacity(batch.len());
            {
                let mut mode = ForwardMode::Train {
                    dropout_p: config.dropout_p,
                    rng: &mut state.rng,
                };
                for ex in &batch {
                    let l = example_loss_on_tape(
                        &state.model,
                        &mut tape,
                        &mut binding,
                        vocab,
                        task,
                        ex,
                        &mut mode,
                    )?;
                    flush_loss += tape.values(l.total)[0];
                    if let (Some(a), Some(b)) = (l.part_a, l.part_b) {
                        flush_a += tape.values(a)[0];
                        flush_b += tape.values(b)[0];
                        has_parts = true;
                    }
                    totals.push(l.total);
                }
            }
            let micro_sum = tape.sum_list(&totals)?;
            let loss_val = tape.values(micro_sum)[0];
            if !loss_val.is_finite() {
                return Err(TrainError::Numeric {
                    step: state.step,
                    msg: format!("loss {loss_val} on a micro-batch of {}", batch.len()),
                });
            }
            tape.backward(micro_sum);
            binding.accumulate_grads(&tape, &mut state.model.params);
            flush_examples += batch.len();
        }

        let (lr_enc, lr_dec) = state.flush(flush_examples)?;
        let n = flush_examples as f64;
        history.push(LossRecord {
            step: state.step,
            lr_enc,
            lr_dec,
            loss: flush_loss / n,
            loss_a_part: has_parts.then_some(flush_a / n),
            loss_b_part: has_parts.then_some(flush_b / n),
        });

        if !valid_set.is_empty() && config.eval_every > 0 && state.step % config.eval_every == 0 {
            let val = eval_per_token_loss(&state.model, vocab, task, valid_set)?;
            validation.push((state.step, val));
            if val < best_val {
                best_val = val;
                best_params = Some(
                    (0..state.model.params.len())
                        .map(|i| state.model.params.tensor(i).values.clone())
                        .collect(),
                );
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if config.patience > 0 && evals_since_best >= config.patience {
                    stopped_early = true;
                    break 'outer;
                }
            }
        }
    }

    // final validation point so short runs still checkpoint something
    if !valid_set.is_empty() {
        let val = eval_per_token_loss(&state.model, vocab, task, valid_set)?;
        validation.push((state.step, val));
        if val < best_val {
            best_val = val;
            best_params = None; // current parameters are the best
        }
    }
    if let Some(best) = best_params {
        for (i, values) in best.into_iter().enumerate() {
            state.model.params.tensor_mut(i).values = values;
        }
    }

    Ok(TrainReport {
        steps: state.step,
        history,
        validation,
        best_val_per_token: if best_val.is_finite() { best_val } else { f64::NAN },
        stopped_early,
    })
}

/// Monolingual pretraining: single-decoder model on `[BOS] S^A [EOS]`.
pub fn pretrain_monolingual(
    model: Seq2SeqModel,
    vocab: &Vocabulary,
    mono: &[Example],
    valid: &[Example],
    config: &TrainConfig,
) -> Result<(Seq2SeqModel, TrainReport), TrainError> {
    let mut state = TrainState::new(model, config);
    let report = train(&mut state, vocab, TrainTask::Mono, mono, valid, config)?;
    Ok((state.model, report))
}

/// Builds the finetune starting point from the pretrained monolingual
/// model: single-decoder modes clone it wholesale; the two-decoder
/// baseline copies the encoder and duplicates the pretrained decoder
/// into both of its decoders.
pub fn init_finetune_model(
    pretrained: &Seq2SeqModel,
    mode: TrainingMode,
    seed: u64,
) -> Result<Seq2SeqModel, TrainError> {
    use crate::model::CopyPart;
    match mode {
        TrainingMode::Ncls | TrainingMode::Mclas => {
            let mut model = Seq2SeqModel::new(pretrained.config.clone(), 1, seed)?;
            model.copy_parameters_from(pretrained, CopyPart::Encoder)?;
            model.copy_parameters_from(pretrained, CopyPart::Decoder)?;
            let b = pretrained.params.get("dec.out_bias").expect("decoder bias exists");
            let idx = model.params.index_of("dec.out_bias").expect("decoder bias exists");
            model.params.tensor_mut(idx).values.copy_from_slice(&b.values);
            Ok(model)
        }
        TrainingMode::NclsMs => {
            let mut model = Seq2SeqModel::new(pretrained.config.clone(), 2, seed)?;
            model.copy_parameters_from(pretrained, CopyPart::Encoder)?;
            model.copy_parameters_from(pretrained, CopyPart::DecoderToBoth)?;
            Ok(model)
        }
    }
}

/// Finetunes from a pretrained monolingual model on a parallel split.
pub fn finetune(
    pretrained: &Seq2SeqModel,
    mode: TrainingMode,
    vocab: &Vocabulary,
    parallel: &[Example],
    valid: &[Example],
    config: &TrainConfig,
) -> Result<(Seq2SeqModel, TrainReport), TrainError> {
    if parallel.is_empty() {
        return Err(TrainError::Data("scenario split is empty".into()));
    }
    let model = init_finetune_model(pretrained, mode, config.seed ^ 0x5eed)?;
    let mut state = TrainState::new(model, config);
    let report = train(&mut state, vocab, mode.into(), parallel, valid, config)?;
    Ok((state.model, report))
}
