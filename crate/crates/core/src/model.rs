//! Mini encoder-decoder Transformer with attention-weight capture.
//!
//! Two forward paths exist on purpose:
//! - a tape path (`bind` / `encode_bound` / `decode_bound`) used for
//!   training, which records every op for reverse-mode gradients;
//! - a raw path (`encode`, `decode_step`) used for inference, which is a
//!   plain `f64` evaluation of the same math with no tape overhead.
//!
//! The two are held together by the teacher-forced vs. incremental
//! identity tests: full-sequence logits from the tape path must equal
//! step-by-step logits from the raw path.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{matmul_raw, softmax_raw, Tape, Tensor, TensorError, TensorId};

const MASK_NEG: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter {name}: shape mismatch, expected {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

/// Architecture hyperparameters. Desk-scale defaults are deliberately
/// tiny; everything is configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            layers_enc: 2,
            layers_dec: 2,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size,
            dropout_p: 0.1,
            max_positions: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::Config(format!("d_model {} must be even", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!(
                "dropout_p {} outside [0,1)",
                self.dropout_p
            )));
        }
        if self.layers_enc == 0 || self.layers_dec == 0 || self.heads == 0 || self.vocab_size == 0 {
            return Err(ModelError::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

/// Standard sine/cosine interleave: even dims carry sin, odd dims cos.
pub fn sinusoidal_positions(max_positions: usize, d_model: usize) -> Result<Tensor, ModelError> {
    if d_model % 2 != 0 {
        return Err(ModelError::Config(format!(
            "sinusoidal positions need even d_model, got {}",
            d_model
        )));
    }
    let mut values = vec![0.0; max_positions * d_model];
    for pos in 0..max_positions {
        for i in 0..d_model / 2 {
            let rate = 1.0 / 10_000_f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 * rate;
            values[pos * d_model + 2 * i] = angle.sin();
            values[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![max_positions, d_model], values).expect("shape computed from inputs"))
}

/// Named parameter collection. Registration order is fixed and doubles
/// as the iteration order everywhere (optimizers, checkpoints), which
/// keeps trajectories bit-reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> usize {
        debug_assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let idx = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.tensors
            .iter()
            .flat_map(|t| t.grad.iter().flatten())
            .all(|g| g.is_finite())
    }

    /// Disjoint (values, grad) borrows for an ascending index group, in
    /// group order. Used to feed one optimizer group.
    pub fn grad_params(&mut self, group: &[usize]) -> Vec<(&mut Vec<f64>, &[f64])> {
        debug_assert!(group.windows(2).all(|w| w[0] < w[1]), "group must be ascending");
        let mut out = Vec::with_capacity(group.len());
        let mut rest: &mut [Tensor] = &mut self.tensors;
        let mut consumed = 0usize;
        for &idx in group {
            let (_, tail) = rest.split_at_mut(idx - consumed);
            let (t, tail) = tail.split_first_mut().expect("index within store");
            out.push((
                &mut t.values,
                t.grad.as_deref().expect("parameters always carry grad buffers"),
            ));
            rest = tail;
            consumed = idx + 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    SelfAttn,
    EncDec,
}

/// Captured attention weights for one head.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub kind: AttentionKind,
    /// Row-stochastic matrix, query positions x key positions.
    pub weights: Tensor,
}

/// Tape-side capture handle: the softmax node of one head.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTap {
    pub layer: usize,
    pub head: usize,
    pub kind: AttentionKind,
    pub probs: TensorId,
}

/// Lazily inserts parameters as tape leaves, one leaf per parameter per
/// tape, so a whole batch shares the same leaves.
pub struct TapeBinding {
    ids: Vec<Option<TensorId>>,
    trainable: bool,
}

impl TapeBinding {
    fn get(&mut self, tape: &mut Tape, store: &ParamStore, idx: usize) -> TensorId {
        if let Some(id) = self.ids[idx] {
            return id;
        }
        let t = store.tensor(idx);
        let id = tape
            .leaf(t.values.clone(), t.shape.clone(), self.trainable)
            .expect("parameter tensors are internally consistent");
        self.ids[idx] = Some(id);
        id
    }

    /// Accumulates tape gradients of every bound leaf back into the
    /// store's grad buffers.
    pub fn accumulate_grads(&self, tape: &Tape, store: &mut ParamStore) {
        for (idx, id) in self.ids.iter().enumerate() {
            if let Some(id) = id {
                if let Some(g) = tape.grad(*id) {
                    let dst = store
                        .tensor_mut(idx)
                        .grad
                        .as_mut()
                        .expect("parameters always carry grad buffers");
                    for (d, s) in dst.iter_mut().zip(g.iter()) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Dropout configuration for one forward pass.
pub enum ForwardMode<'r> {
    Eval,
    Train { dropout_p: f64, rng: &'r mut ChaCha8Rng },
}

impl ForwardMode<'_> {
    fn apply(&mut self, tape: &mut Tape, x: TensorId) -> TensorId {
        match self {
            ForwardMode::Eval => x,
            ForwardMode::Train { dropout_p, rng } => tape.dropout(x, *dropout_p, rng),
        }
    }
}

/// Encoder-decoder Transformer over a shared tied embedding matrix.
/// `decoder_count == 2` only for the two-decoder multi-task baseline.
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub decoder_count: usize,
    pub params: ParamStore,
    positions: Tensor,
}

fn dec_prefix(which_decoder: usize) -> &'static str {
    if which_decoder == 2 {
        "dec2"
    } else {
        "dec"
    }
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, decoder_count: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if decoder_count != 1 && decoder_count != 2 {
            return Err(ModelError::Config(format!(
                "decoder_count must be 1 or 2, got {decoder_count}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let d = config.d_model;
        let v = config.vocab_size;

        let embed_bound = (3.0 / d as f64).sqrt();
        params.insert("embed.tok", rand_uniform(&mut rng, vec![v, d], embed_bound));

        for layer in 0..config.layers_enc {
            insert_attn_block(&mut params, &mut rng, &format!("enc.{layer}.attn"), d);
            insert_ln(&mut params, &format!("enc.{layer}.ln1"), d);
            insert_ln(&mut params, &format!("enc.{layer}.ln2"), d);
            insert_ffn(&mut params, &mut rng, &format!("enc.{layer}.ffn"), d, config.d_ff);
        }
        insert_ln(&mut params, "enc.final_ln", d);

        for dec in 1..=decoder_count {
            let p = dec_prefix(dec);
            for layer in 0..config.layers_dec {
                insert_attn_block(&mut params, &mut rng, &format!("{p}.{layer}.self_attn"), d);
                insert_attn_block(&mut params, &mut rng, &format!("{p}.{layer}.cross_attn"), d);
                insert_ln(&mut params, &format!("{p}.{layer}.ln1"), d);
                insert_ln(&mut params, &format!("{p}.{layer}.ln2"), d);
                insert_ln(&mut params, &format!("{p}.{layer}.ln3"), d);
                insert_ffn(&mut params, &mut rng, &format!("{p}.{layer}.ffn"), d, config.d_ff);
            }
            insert_ln(&mut params, &format!("{p}.final_ln"), d);
            params.insert(&format!("{p}.out_bias"), Tensor::zeros(vec![v]));
        }

        let positions = sinusoidal_positions(config.max_positions, d)?;
        Ok(Seq2SeqModel {
            config,
            decoder_count,
            params,
            positions,
        })
    }

    fn idx(&self, name: &str) -> usize {
        self.params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn values(&self, name: &str) -> &[f64] {
        &self.params.tensor(self.idx(name)).values
    }

    pub fn binding(&self, trainable: bool) -> TapeBinding {
        TapeBinding {
            ids: vec![None; self.params.len()],
            trainable,
        }
    }

    fn check_tokens(&self, tokens: &[usize], what: &str) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Config(format!("{what}: empty token sequence")));
        }
        if tokens.len() > self.config.max_positions {
            return Err(ModelError::Config(format!(
                "{what}: length {} exceeds max_positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::Config(format!(
                "{what}: token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_decoder(&self, which_decoder: usize) -> Result<(), ModelError> {
        if which_decoder == 0 || which_decoder > self.decoder_count {
            return Err(ModelError::Config(format!(
                "decoder {which_decoder} requested on a {}-decoder model",
                self.decoder_count
            )));
        }
        Ok(())
    }

    // ── tape path (training) ────────────────────────────────────────

    fn embed_bound(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        tokens: &[usize],
        mode: &mut ForwardMode<'_>,
    ) -> Result<TensorId, ModelError> {
        let d = self.config.d_model;
        let table = binding.get(tape, &self.params, self.idx("embed.tok"));
        let emb = tape.embedding(table, tokens)?;
        let scaled = tape.scale(emb, (d as f64).sqrt());
        let pos_rows: Vec<f64> = tokens
            .iter()
            .enumerate()
            .flat_map(|(i, _)| self.positions.values[i * d..(i + 1) * d].to_vec())
            .collect();
        let pos = tape.constant(pos_rows, vec![tokens.len(), d])?;
        let x = tape.add(scaled, pos)?;
        Ok(mode.apply(tape, x))
    }

    #[allow(clippy::too_many_arguments)]
    fn mha_bound(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        prefix: &str,
        layer: usize,
        kind: AttentionKind,
        q_in: TensorId,
        kv_in: TensorId,
        mask: Option<TensorId>,
        taps: Option<&mut Vec<AttentionTap>>,
    ) -> Result<TensorId, ModelError> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let wq = binding.get(tape, &self.params, self.idx(&format!("{prefix}.wq")));
        let bq = binding.get(tape, &self.params, self.idx(&format!("{prefix}.bq")));
        let wk = binding.get(tape, &self.params, self.idx(&format!("{prefix}.wk")));
        let bk = binding.get(tape, &self.params, self.idx(&format!("{prefix}.bk")));
        let wv = binding.get(tape, &self.params, self.idx(&format!("{prefix}.wv")));
        let bv = binding.get(tape, &self.params, self.idx(&format!("{prefix}.bv")));
        let wo = binding.get(tape, &self.params, self.idx(&format!("{prefix}.wo")));
        let bo = binding.get(tape, &self.params, self.idx(&format!("{prefix}.bo")));

        let qm = tape.matmul(q_in, wq)?;
        let q = tape.add_row(qm, bq)?;
        let km = tape.matmul(kv_in, wk)?;
        let k = tape.add_row(km, bk)?;
        let vm = tape.matmul(kv_in, wv)?;
        let v = tape.add_row(vm, bv)?;

        let mut ctxs = Vec::with_capacity(heads);
        let mut local_taps = Vec::new();
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = match mask {
                Some(m) => tape.add(scaled, m)?,
                None => scaled,
            };
            let probs = tape.softmax(masked, 1)?;
            local_taps.push(AttentionTap { layer, head: h, kind, probs });
            ctxs.push(tape.matmul(probs, vh)?);
        }
        if let Some(taps) = taps {
            taps.extend(local_taps);
        }
        let ctx = tape.concat_cols(&ctxs)?;
        let om = tape.matmul(ctx, wo)?;
        Ok(tape.add_row(om, bo)?)
    }

    fn ln_bound(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        name: &str,
        x: TensorId,
    ) -> Result<TensorId, ModelError> {
        let gain = binding.get(tape, &self.params, self.idx(&format!("{name}.gain")));
        let bias = binding.get(tape, &self.params, self.idx(&format!("{name}.bias")));
        Ok(tape.layer_norm(x, gain, bias, 1e-6)?)
    }

    fn ffn_bound(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        name: &str,
        x: TensorId,
    ) -> Result<TensorId, ModelError> {
        let w1 = binding.get(tape, &self.params, self.idx(&format!("{name}.w1")));
        let b1 = binding.get(tape, &self.params, self.idx(&format!("{name}.b1")));
        let w2 = binding.get(tape, &self.params, self.idx(&format!("{name}.w2")));
        let b2 = binding.get(tape, &self.params, self.idx(&format!("{name}.b2")));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        Ok(tape.add_row(h, b2)?)
    }

    /// Encoder forward on a tape; returns the memory node [src_len x d].
    pub fn encode_bound(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        tokens: &[usize],
        mode: &mut ForwardMode<'_>,
    ) -> Result<TensorId, ModelError> {
        self.check_tokens(tokens, "encode")?;
        let mut x = self.embed_bound(tape, binding, tokens, mode)?;
        for layer in 0..self.config.layers_enc {
            let normed = self.ln_bound(tape, binding, &format!("enc.{layer}.ln1"), x)?;
            let attn = self.mha_bound(
                tape,
                binding,
                &format!("enc.{layer}.attn"),
                layer,
                AttentionKind::SelfAttn,
                normed,
                normed,
                None,
                None,
            )?;
            let attn = mode.apply(tape, attn);
            x = tape.add(x, attn)?;
            let normed = self.ln_bound(tape, binding, &format!("enc.{layer}.ln2"), x)?;
            let ff = self.ffn_bound(tape, binding, &format!("enc.{layer}.ffn"), normed)?;
            let ff = mode.apply(tape, ff);
            x = tape.add(x, ff)?;
        }
        self.ln_bound(tape, binding, "enc.final_ln", x)
    }

    /// Teacher-forced decoder forward on a tape over the whole prefix;
    /// returns logits [prefix_len x V] and, when `capture`, one tap per
    /// (layer, head, kind).
    #[allow(clippy::too_many_arguments)]
    pub fn decode_bound(
        &self,
        tape: &mut Tape,
        binding: &mut TapeBinding,
        memory: TensorId,
        prefix: &[usize],
        which_decoder: usize,
        mode: &mut ForwardMode<'_>,
        capture: bool,
    ) -> Result<(TensorId, Vec<AttentionTap>), ModelError> {
        self.check_decoder(which_decoder)?;
        self.check_tokens(prefix, "decode")?;
        let p = dec_prefix(which_decoder);
        let t = prefix.len();

        let mut taps = Vec::new();
        let mut x = self.embed_bound(tape, binding, prefix, mode)?;
        let mask = tape.constant(causal_mask(t), vec![t, t])?;
        for layer in 0..self.config.layers_dec {
            let normed = self.ln_bound(tape, binding, &format!("{p}.{layer}.ln1"), x)?;
            let self_attn = self.mha_bound(
                tape,
                binding,
                &format!("{p}.{layer}.self_attn"),
                layer,
                AttentionKind::SelfAttn,
                normed,
                normed,
                Some(mask),
                capture.then_some(&mut taps),
            )?;
            let self_attn = mode.apply(tape, self_attn);
            x = tape.add(x, self_attn)?;

            let normed = self.ln_bound(tape, binding, &format!("{p}.{layer}.ln2"), x)?;
            let cross = self.mha_bound(
                tape,
                binding,
                &format!("{p}.{layer}.cross_attn"),
                layer,
                AttentionKind::EncDec,
                normed,
                memory,
                None,
                capture.then_some(&mut taps),
            )?;
            let cross = mode.apply(tape, cross);
            x = tape.add(x, cross)?;

            let normed = self.ln_bound(tape, binding, &format!("{p}.{layer}.ln3"), x)?;
            let ff = self.ffn_bound(tape, binding, &format!("{p}.{layer}.ffn"), normed)?;
            let ff = mode.apply(tape, ff);
            x = tape.add(x, ff)?;
        }
        let h = self.ln_bound(tape, binding, &format!("{p}.final_ln"), x)?;
        let table = binding.get(tape, &self.params, self.idx("embed.tok"));
        let et = tape.transpose(table)?;
        let proj = tape.matmul(h, et)?;
        let bias = binding.get(tape, &self.params, self.idx(&format!("{p}.out_bias")));
        let logits = tape.add_row(proj, bias)?;
        Ok((logits, taps))
    }

    // ── raw path (inference) ────────────────────────────────────────

    /// Eval-mode encoder forward; deterministic given parameters and
    /// input. Errors on overlong input rather than truncating.
    pub fn encode(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        self.check_tokens(tokens, "encode")?;
        let d = self.config.d_model;
        let mut x = self.embed_raw(tokens);
        for layer in 0..self.config.layers_enc {
            let normed = self.ln_raw(&format!("enc.{layer}.ln1"), &x, tokens.len());
            let (attn, _) = self.mha_raw(
                &format!("enc.{layer}.attn"),
                &normed,
                tokens.len(),
                &normed,
                tokens.len(),
                false,
                None,
            );
            add_in_place(&mut x, &attn);
            let normed = self.ln_raw(&format!("enc.{layer}.ln2"), &x, tokens.len());
            let ff = self.ffn_raw(&format!("enc.{layer}.ffn"), &normed, tokens.len());
            add_in_place(&mut x, &ff);
        }
        let out = self.ln_raw("enc.final_ln", &x, tokens.len());
        Ok(Tensor::new(vec![tokens.len(), d], out).expect("shape by construction"))
    }

    /// Next-token logits for a prefix, plus (when `capture`) the final
    /// query position's attention row for every head.
    pub fn decode_step(
        &self,
        memory: &Tensor,
        prefix: &[usize],
        which_decoder: usize,
        capture: bool,
    ) -> Result<(Vec<f64>, Vec<AttentionRecord>), ModelError> {
        let (logits, records) = self.decode_full_raw(memory, prefix, which_decoder, capture)?;
        let v = self.config.vocab_size;
        let t = prefix.len();
        let last = logits[(t - 1) * v..t * v].to_vec();
        let last_rows = records
            .into_iter()
            .map(|r| {
                let klen = r.weights.shape[1];
                let row = r.weights.values[(t - 1) * klen..t * klen].to_vec();
                AttentionRecord {
                    layer: r.layer,
                    head: r.head,
                    kind: r.kind,
                    weights: Tensor::new(vec![1, klen], row).expect("row slice"),
                }
            })
            .collect();
        Ok((last, last_rows))
    }

    /// Eval-mode teacher-forced decoder over the full prefix on the raw
    /// path; returns logits [T x V] and full attention matrices.
    pub fn decode_full_raw(
        &self,
        memory: &Tensor,
        prefix: &[usize],
        which_decoder: usize,
        capture: bool,
    ) -> Result<(Vec<f64>, Vec<AttentionRecord>), ModelError> {
        self.check_decoder(which_decoder)?;
        self.check_tokens(prefix, "decode")?;
        if memory.shape.len() != 2 || memory.shape[1] != self.config.d_model {
            return Err(ModelError::Config(format!(
                "memory shape {:?} does not match d_model {}",
                memory.shape, self.config.d_model
            )));
        }
        let p = dec_prefix(which_decoder);
        let t = prefix.len();
        let m = memory.shape[0];
        let d = self.config.d_model;
        let v = self.config.vocab_size;

        let mut records = Vec::new();
        let mut x = self.embed_raw(prefix);
        for layer in 0..self.config.layers_dec {
            let normed = self.ln_raw(&format!("{p}.{layer}.ln1"), &x, t);
            let (attn, probs) = self.mha_raw(
                &format!("{p}.{layer}.self_attn"),
                &normed,
                t,
                &normed,
                t,
                true,
                capture.then_some(()),
            );
            if capture {
                for (h, w) in probs.into_iter().enumerate() {
                    records.push(AttentionRecord {
                        layer,
                        head: h,
                        kind: AttentionKind::SelfAttn,
                        weights: Tensor::new(vec![t, t], w).expect("probs shape"),
                    });
                }
            }
            add_in_place(&mut x, &attn);

            let normed = self.ln_raw(&format!("{p}.{layer}.ln2"), &x, t);
            let (cross, probs) = self.mha_raw(
                &format!("{p}.{layer}.cross_attn"),
                &normed,
                t,
                &memory.values,
                m,
                false,
                capture.then_some(()),
            );
            if capture {
                for (h, w) in probs.into_iter().enumerate() {
                    records.push(AttentionRecord {
                        layer,
                        head: h,
                        kind: AttentionKind::EncDec,
                        weights: Tensor::new(vec![t, m], w).expect("probs shape"),
                    });
                }
            }
            add_in_place(&mut x, &cross);

            let normed = self.ln_raw(&format!("{p}.{layer}.ln3"), &x, t);
            let ff = self.ffn_raw(&format!("{p}.{layer}.ffn"), &normed, t);
            add_in_place(&mut x, &ff);
        }
        let h = self.ln_raw(&format!("{p}.final_ln"), &x, t);
        // logits = H · Eᵀ + bias, streamed against the embedding table
        let table = self.values("embed.tok");
        let bias = self.values(&format!("{p}.out_bias"));
        let mut logits = vec![0.0; t * v];
        for row in 0..t {
            let hrow = &h[row * d..(row + 1) * d];
            let out = &mut logits[row * v..(row + 1) * v];
            out.copy_from_slice(bias);
            for (tok, chunk) in table.chunks_exact(d).enumerate() {
                let mut s = 0.0;
                for j in 0..d {
                    s += hrow[j] * chunk[j];
                }
                out[tok] += s;
            }
        }
        Ok((logits, records))
    }

    fn embed_raw(&self, tokens: &[usize]) -> Vec<f64> {
        let d = self.config.d_model;
        let table = self.values("embed.tok");
        let scale = (d as f64).sqrt();
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (i, &tok) in tokens.iter().enumerate() {
            let emb = &table[tok * d..(tok + 1) * d];
            let pos = &self.positions.values[i * d..(i + 1) * d];
            for j in 0..d {
                x.push(emb[j] * scale + pos[j]);
            }
        }
        x
    }

    fn ln_raw(&self, name: &str, x: &[f64], rows: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let gain = self.values(&format!("{name}.gain"));
        let bias = self.values(&format!("{name}.bias"));
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-6).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * gain[j] + bias[j];
            }
        }
        out
    }

    fn ffn_raw(&self, name: &str, x: &[f64], rows: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let dff = self.config.d_ff;
        let w1 = self.values(&format!("{name}.w1"));
        let b1 = self.values(&format!("{name}.b1"));
        let w2 = self.values(&format!("{name}.w2"));
        let b2 = self.values(&format!("{name}.b2"));
        let mut h = matmul_raw(x, w1, rows, d, dff);
        for r in 0..rows {
            for j in 0..dff {
                let cell = &mut h[r * dff + j];
                *cell = (*cell + b1[j]).max(0.0);
            }
        }
        let mut out = matmul_raw(&h, w2, rows, dff, d);
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] += b2[j];
            }
        }
        out
    }

    /// Returns (output [ql x d], per-head probability matrices when
    /// capture is requested).
    fn mha_raw(
        &self,
        prefix: &str,
        q_in: &[f64],
        ql: usize,
        kv_in: &[f64],
        kl: usize,
        causal: bool,
        capture: Option<()>,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let q = linear_raw(q_in, ql, d, self.values(&format!("{prefix}.wq")), self.values(&format!("{prefix}.bq")), d);
        let k = linear_raw(kv_in, kl, d, self.values(&format!("{prefix}.wk")), self.values(&format!("{prefix}.bk")), d);
        let v = linear_raw(kv_in, kl, d, self.values(&format!("{prefix}.wv")), self.values(&format!("{prefix}.bv")), d);

        let mut ctx = vec![0.0; ql * d];
        let mut all_probs = Vec::new();
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..heads {
            let off = h * dh;
            let mut scores = vec![0.0; ql * kl];
            for i in 0..ql {
                for j in 0..kl {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i * d + off + c] * k[j * d + off + c];
                    }
                    scores[i * kl + j] = s * scale + if causal && j > i { MASK_NEG } else { 0.0 };
                }
            }
            let probs = softmax_raw(&scores, &[ql, kl], 1);
            for i in 0..ql {
                for j in 0..kl {
                    let w = probs[i * kl + j];
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        ctx[i * d + off + c] += w * v[j * d + off + c];
                    }
                }
            }
            if capture.is_some() {
                all_probs.push(probs);
            }
        }
        let out = linear_raw(&ctx, ql, d, self.values(&format!("{prefix}.wo")), self.values(&format!("{prefix}.bo")), d);
        (out, all_probs)
    }

    // ── parameter transfer ──────────────────────────────────────────

    /// Copies parameter values by name prefix. `Encoder` covers the
    /// shared embedding and the encoder stack; `Decoder` the primary
    /// decoder; `DecoderToBoth` duplicates the source's primary decoder
    /// into both decoders of a two-decoder target.
    pub fn copy_parameters_from(
        &mut self,
        source: &Seq2SeqModel,
        part: CopyPart,
    ) -> Result<(), ModelError> {
        let pairs: Vec<(String, String)> = match part {
            CopyPart::Encoder => source
                .params
                .names()
                .filter(|n| n.starts_with("embed.") || n.starts_with("enc."))
                .map(|n| (n.to_string(), n.to_string()))
                .collect(),
            CopyPart::Decoder => source
                .params
                .names()
                .filter(|n| n.starts_with("dec."))
                .map(|n| (n.to_string(), n.to_string()))
                .collect(),
            CopyPart::DecoderToBoth => {
                if self.decoder_count != 2 {
                    return Err(ModelError::Config(
                        "decoder→both requires a two-decoder target".into(),
                    ));
                }
                source
                    .params
                    .names()
                    .filter(|n| n.starts_with("dec."))
                    .flat_map(|n| {
                        let twin = format!("dec2.{}", &n["dec.".len()..]);
                        [(n.to_string(), n.to_string()), (n.to_string(), twin)]
                    })
                    .collect()
            }
        };
        for (src_name, dst_name) in pairs {
            let src = source
                .params
                .get(&src_name)
                .ok_or_else(|| ModelError::UnknownParam(src_name.clone()))?;
            let dst_idx = self
                .params
                .index_of(&dst_name)
                .ok_or_else(|| ModelError::UnknownParam(dst_name.clone()))?;
            let dst = self.params.tensor_mut(dst_idx);
            if dst.shape != src.shape {
                return Err(ModelError::ParamShape {
                    name: dst_name,
                    expected: dst.shape.clone(),
                    got: src.shape.clone(),
                });
            }
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyPart {
    Encoder,
    Decoder,
    DecoderToBoth,
}

fn causal_mask(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            m[i * t + j] = MASK_NEG;
        }
    }
    m
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y.iter()) {
        *a += b;
    }
}

fn linear_raw(x: &[f64], rows: usize, d_in: usize, w: &[f64], b: &[f64], d_out: usize) -> Vec<f64> {
    let mut out = matmul_raw(x, w, rows, d_in, d_out);
    for r in 0..rows {
        for j in 0..d_out {
            out[r * d_out + j] += b[j];
        }
    }
    out
}

fn rand_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let values: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, values).expect("shape/product consistent")
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rand_uniform(rng, vec![fan_in, fan_out], bound)
}

fn insert_attn_block(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(&format!("{prefix}.{w}"), xavier(rng, d, d));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        params.insert(&format!("{prefix}.{b}"), Tensor::zeros(vec![d]));
    }
}

fn insert_ln(params: &mut ParamStore, name: &str, d: usize) {
    params.insert(&format!("{name}.gain"), Tensor::new(vec![d], vec![1.0; d]).unwrap());
    params.insert(&format!("{name}.bias"), Tensor::zeros(vec![d]));
}

fn insert_ffn(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, d_ff: usize) {
    params.insert(&format!("{prefix}.w1"), xavier(rng, d, d_ff));
    params.insert(&format!("{prefix}.b1"), Tensor::zeros(vec![d_ff]));
    params.insert(&format!("{prefix}.w2"), xavier(rng, d_ff, d));
    params.insert(&format!("{prefix}.b2"), Tensor::zeros(vec![d]));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            layers_enc: 2,
            layers_dec: 2,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: vocab,
            dropout_p: 0.1,
            max_positions: 64,
        }
    }

    #[test]
    fn sinusoidal_position_zero_alternates() {
        let pe = sinusoidal_positions(4, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe.values[2 * i], 0.0);
            assert_eq!(pe.values[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn sinusoidal_entries_bounded() {
        let pe = sinusoidal_positions(50, 16).unwrap();
        assert!(pe.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sinusoidal_first_pair_is_sin_cos_of_position() {
        let pe = sinusoidal_positions(3, 8).unwrap();
        assert!((pe.values[8] - 1.0_f64.sin()).abs() < 1e-12);
        assert!((pe.values[9] - 1.0_f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_rejects_odd_dim() {
        assert!(sinusoidal_positions(4, 7).is_err());
    }

    #[test]
    fn encode_single_token_shape() {
        let model = Seq2SeqModel::new(tiny_config(20), 1, 0).unwrap();
        let mem = model.encode(&[1]).unwrap();
        assert_eq!(mem.shape, vec![1, 16]);
    }

    #[test]
    fn encode_is_position_sensitive() {
        let model = Seq2SeqModel::new(tiny_config(20), 1, 1).unwrap();
        let a = model.encode(&[5, 6, 7]).unwrap();
        let b = model.encode(&[6, 5, 7]).unwrap();
        let diff: f64 = a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6, "permuting tokens should change the memory");
    }

    #[test]
    fn encode_is_deterministic_in_eval_mode() {
        let model = Seq2SeqModel::new(tiny_config(20), 1, 2).unwrap();
        let a = model.encode(&[3, 4, 5, 6]).unwrap();
        let b = model.encode(&[3, 4, 5, 6]).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn encode_rejects_overlong_input() {
        let mut cfg = tiny_config(20);
        cfg.max_positions = 4;
        let model = Seq2SeqModel::new(cfg, 1, 0).unwrap();
        assert!(model.encode(&[1; 5]).is_err());
    }

    #[test]
    fn decode_step_rejects_second_decoder_on_single_decoder_model() {
        let model = Seq2SeqModel::new(tiny_config(20), 1, 0).unwrap();
        let mem = model.encode(&[5, 6]).unwrap();
        let err = model.decode_step(&mem, &[1], 2, false).unwrap_err();
        assert!(matches!(err, ModelError::Config(_)));
    }

    #[test]
    fn causality_later_prefix_edits_do_not_change_earlier_logits() {
        let model = Seq2SeqModel::new(tiny_config(20), 1, 3).unwrap();
        let mem = model.encode(&[5, 6, 7]).unwrap();
        let (l1, _) = model.decode_full_raw(&mem, &[1, 8, 9, 10], 1, false).unwrap();
        let (l2, _) = model.decode_full_raw(&mem, &[1, 8, 12, 13], 1, false).unwrap();
        let v = model.config.vocab_size;
        // logits at positions 0 and 1 depend only on prefix[..=1]
        assert_eq!(&l1[..2 * v], &l2[..2 * v]);
        assert_ne!(&l1[2 * v..3 * v], &l2[2 * v..3 * v]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = Seq2SeqModel::new(tiny_config(20), 1, 4).unwrap();
        let mem = model.encode(&[5, 6, 7, 8]).unwrap();
        let (_, records) = model.decode_step(&mem, &[1, 9, 10], 1, true).unwrap();
        assert!(!records.is_empty());
        for rec in &records {
            let sum: f64 = rec.weights.values.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
        }
    }

    #[test]
    fn teacher_forced_equals_incremental_two_path() {
        let model = Seq2SeqModel::new(tiny_config(24), 1, 5).unwrap();
        let mem = model.encode(&[5, 9, 14, 6]).unwrap();
        let prefix = [1usize, 7, 8, 9, 10];
        let v = model.config.vocab_size;

        // path 1: tape teacher-forced over the whole prefix
        let mut tape = Tape::new();
        let mut binding = model.binding(false);
        let mut mode = ForwardMode::Eval;
        let mem_id = tape.constant(mem.values.clone(), mem.shape.clone()).unwrap();
        let (logits_id, _) = model
            .decode_bound(&mut tape, &mut binding, mem_id, &prefix, 1, &mut mode, false)
            .unwrap();
        let full = tape.values(logits_id).to_vec();

        // path 2: incremental raw decode steps
        for t in 1..=prefix.len() {
            let (step, _) = model.decode_step(&mem, &prefix[..t], 1, false).unwrap();
            let row = &full[(t - 1) * v..t * v];
            for (a, b) in row.iter().zip(step.iter()) {
                assert!((a - b).abs() < 1e-9, "mismatch at t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn no_segmentation_embedding_in_parameter_names() {
        let model = Seq2SeqModel::new(tiny_config(20), 2, 0).unwrap();
        assert!(model.params.names().all(|n| !n.contains("seg")));
    }

    #[test]
    fn copy_encoder_then_decoder_reproduces_source_forward() {
        let source = Seq2SeqModel::new(tiny_config(24), 1, 7).unwrap();
        let mut target = Seq2SeqModel::new(tiny_config(24), 1, 99).unwrap();
        target.copy_parameters_from(&source, CopyPart::Encoder).unwrap();
        target.copy_parameters_from(&source, CopyPart::Decoder).unwrap();
        for name in source.params.names() {
            let a = source.params.get(name).unwrap();
            let b = target.params.get(name).unwrap();
            assert_eq!(a.values, b.values, "parameter {name} differs after copy");
        }
        let mem_s = source.encode(&[5, 6, 7]).unwrap();
        let mem_t = target.encode(&[5, 6, 7]).unwrap();
        assert_eq!(mem_s.values, mem_t.values);
        let (ls, _) = source.decode_step(&mem_s, &[1, 8], 1, false).unwrap();
        let (lt, _) = target.decode_step(&mem_t, &[1, 8], 1, false).unwrap();
        for (a, b) in ls.iter().zip(lt.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_to_both_duplicates_and_leaves_encoder_alone() {
        let source = Seq2SeqModel::new(tiny_config(24), 1, 7).unwrap();
        let mut target = Seq2SeqModel::new(tiny_config(24), 2, 8).unwrap();
        let enc_before: Vec<f64> = target.params.get("enc.0.attn.wq").unwrap().values.clone();
        target.copy_parameters_from(&source, CopyPart::DecoderToBoth).unwrap();
        assert_eq!(target.params.get("enc.0.attn.wq").unwrap().values, enc_before);
        let d1 = target.params.get("dec.0.self_attn.wq").unwrap();
        let d2 = target.params.get("dec2.0.self_attn.wq").unwrap();
        let src = source.params.get("dec.0.self_attn.wq").unwrap();
        assert_eq!(d1.values, src.values);
        assert_eq!(d2.values, src.values);
    }

    #[test]
    fn decoder_to_both_rejects_single_decoder_target() {
        let source = Seq2SeqModel::new(tiny_config(24), 1, 7).unwrap();
        let mut target = Seq2SeqModel::new(tiny_config(24), 1, 8).unwrap();
        assert!(target
            .copy_parameters_from(&source, CopyPart::DecoderToBoth)
            .is_err());
    }

    #[test]
    fn copy_shape_mismatch_names_parameter() {
        let source = Seq2SeqModel::new(tiny_config(24), 1, 7).unwrap();
        let mut bigger = tiny_config(24);
        bigger.d_ff = 48;
        let mut target = Seq2SeqModel::new(bigger, 1, 8).unwrap();
        let err = target
            .copy_parameters_from(&source, CopyPart::Decoder)
            .unwrap_err();
        match err {
            ModelError::ParamShape { name, .. } => assert!(name.contains("ffn")),
            other => panic!("expected ParamShape, got {other:?}"),
        }
    }

    #[test]
    fn tape_and_raw_encoders_agree() {
        let model = Seq2SeqModel::new(tiny_config(24), 1, 11).unwrap();
        let tokens = [5usize, 6, 9, 2];
        let raw = model.encode(&tokens).unwrap();
        let mut tape = Tape::new();
        let mut binding = model.binding(false);
        let mut mode = ForwardMode::Eval;
        let id = model
            .encode_bound(&mut tape, &mut binding, &tokens, &mut mode)
            .unwrap();
        for (a, b) in raw.values.iter().zip(tape.values(id).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
