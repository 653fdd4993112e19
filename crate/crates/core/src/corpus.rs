//! Synthetic two-language summarization corpus.
//!
//! Language A and language B content tokens live in disjoint id ranges
//! related by a fixed-offset bijection, so translation ground truth is
//! known exactly. A document is a shuffled bag in which "salient" tokens
//! appear at least `repeat` times and distractors fewer; the monolingual
//! summary is the salient tokens in first-occurrence order and the
//! cross-lingual summary is its element-wise translation.

use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &str = "clsumcorpus";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Validation { line: usize, msg: String },
    #[error("token id {id} outside language {lang} range")]
    OutOfRange { id: usize, lang: char },
    #[error("infeasible generation parameters: {0}")]
    Infeasible(String),
    #[error("scenario subset is empty: {0}")]
    EmptyScenario(String),
}

/// Token-id layout: five specials, then the A content range, then the
/// B content range of equal size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub lsep: usize,
    pub unk: usize,
    pub a_start: usize,
    pub lang_size: usize,
}

impl Vocabulary {
    pub fn new(lang_size: usize) -> Self {
        Vocabulary {
            pad: 0,
            bos: 1,
            eos: 2,
            lsep: 3,
            unk: 4,
            a_start: 5,
            lang_size,
        }
    }

    pub fn size(&self) -> usize {
        self.a_start + 2 * self.lang_size
    }

    pub fn b_start(&self) -> usize {
        self.a_start + self.lang_size
    }

    pub fn a_range(&self) -> std::ops::Range<usize> {
        self.a_start..self.b_start()
    }

    pub fn b_range(&self) -> std::ops::Range<usize> {
        self.b_start()..self.size()
    }

    pub fn is_a(&self, id: usize) -> bool {
        self.a_range().contains(&id)
    }

    pub fn is_b(&self, id: usize) -> bool {
        self.b_range().contains(&id)
    }

    /// Fixed-offset bijection from A content ids to B content ids.
    pub fn translate(&self, id: usize) -> Result<usize, CorpusError> {
        if !self.is_a(id) {
            return Err(CorpusError::OutOfRange { id, lang: 'A' });
        }
        Ok(id + self.lang_size)
    }

    /// Inverse of [`translate`](Self::translate).
    pub fn untranslate(&self, id: usize) -> Result<usize, CorpusError> {
        if !self.is_b(id) {
            return Err(CorpusError::OutOfRange { id, lang: 'B' });
        }
        Ok(id - self.lang_size)
    }
}

pub fn translate_tokens(vocab: &Vocabulary, tokens_a: &[usize]) -> Result<Vec<usize>, CorpusError> {
    tokens_a.iter().map(|&t| vocab.translate(t)).collect()
}

pub fn untranslate_tokens(vocab: &Vocabulary, tokens_b: &[usize]) -> Result<Vec<usize>, CorpusError> {
    tokens_b.iter().map(|&t| vocab.untranslate(t)).collect()
}

/// One corpus item. `sum_b` is absent in monolingual-only splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub doc: Vec<usize>,
    pub sum_a: Vec<usize>,
    pub sum_b: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub doc_len: RangeInclusive<usize>,
    pub salient_count: RangeInclusive<usize>,
    /// A token is salient iff it appears at least this many times.
    pub repeat: usize,
    /// Cap on summary length (first-occurrence order).
    pub n_max: usize,
    /// Length-imbalance knob: extra random B tokens appended to sum_b.
    /// Breaks the exact bijection; keep at 0..=0 for aligned corpora.
    pub b_extra: RangeInclusive<usize>,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            doc_len: 12..=18,
            salient_count: 2..=4,
            repeat: 2,
            n_max: 6,
            b_extra: 0..=0,
        }
    }
}

/// Generates one document/summary/translation triple. The document
/// contains each salient token exactly `repeat` times and each
/// distractor exactly once (so the r-threshold rule labels it exactly).
pub fn generate_example(
    rng: &mut ChaCha8Rng,
    vocab: &Vocabulary,
    params: &GenParams,
) -> Result<Example, CorpusError> {
    if params.repeat < 2 {
        return Err(CorpusError::Infeasible("repeat must be at least 2".into()));
    }
    if params.doc_len.is_empty() || params.salient_count.is_empty() {
        return Err(CorpusError::Infeasible("empty parameter range".into()));
    }
    let salient_n = rng.gen_range(params.salient_count.clone());
    let doc_len = rng.gen_range(params.doc_len.clone());
    let salient_tokens = salient_n * params.repeat;
    if salient_tokens > doc_len {
        return Err(CorpusError::Infeasible(format!(
            "{salient_n} salient tokens x repeat {} exceed doc length {doc_len}",
            params.repeat
        )));
    }
    let distract_n = doc_len - salient_tokens;
    if salient_n + distract_n > vocab.lang_size {
        return Err(CorpusError::Infeasible(format!(
            "{salient_n} salient + {distract_n} distinct distractors exceed language size {}",
            vocab.lang_size
        )));
    }

    let mut candidates: Vec<usize> = vocab.a_range().collect();
    candidates.shuffle(rng);
    let salient: Vec<usize> = candidates[..salient_n].to_vec();
    let distractors: Vec<usize> = candidates[salient_n..salient_n + distract_n].to_vec();

    let mut doc = Vec::with_capacity(doc_len);
    for &s in &salient {
        for _ in 0..params.repeat {
            doc.push(s);
        }
    }
    doc.extend_from_slice(&distractors);
    doc.shuffle(rng);

    let sum_a = label_summary(&doc, params.repeat, params.n_max);
    let mut sum_b = translate_tokens(vocab, &sum_a)?;
    let extra = rng.gen_range(params.b_extra.clone());
    for _ in 0..extra {
        sum_b.push(rng.gen_range(vocab.b_range()));
    }
    Ok(Example { doc, sum_a, sum_b: Some(sum_b) })
}

/// Document positions holding salient tokens (those occurring at least
/// `repeat` times) — the ground truth for encoder-decoder probing.
pub fn salient_positions(doc: &[usize], repeat: usize) -> Vec<usize> {
    (0..doc.len())
        .filter(|&i| doc.iter().filter(|&&t| t == doc[i]).count() >= repeat)
        .collect()
}

/// The labeling rule: tokens occurring at least `repeat` times, in
/// first-occurrence order, capped at `n_max`.
pub fn label_summary(doc: &[usize], repeat: usize, n_max: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &tok) in doc.iter().enumerate() {
        if doc[..i].contains(&tok) {
            continue; // not the first occurrence
        }
        let count = doc.iter().filter(|&&t| t == tok).count();
        if count >= repeat {
            out.push(tok);
            if out.len() == n_max {
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioName {
    Minimum,
    Medium,
    Maximum,
    Full,
}

impl ScenarioName {
    pub fn default_fraction(self) -> f64 {
        match self {
            ScenarioName::Minimum => 0.003,
            ScenarioName::Medium => 0.015,
            ScenarioName::Maximum => 0.030,
            ScenarioName::Full => 1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "minimum" => Some(ScenarioName::Minimum),
            "medium" => Some(ScenarioName::Medium),
            "maximum" => Some(ScenarioName::Maximum),
            "full" => Some(ScenarioName::Full),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Minimum => "minimum",
            ScenarioName::Medium => "medium",
            ScenarioName::Maximum => "maximum",
            ScenarioName::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub parallel_fraction: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn named(name: ScenarioName, seed: u64) -> Self {
        ScenarioSpec {
            name,
            parallel_fraction: name.default_fraction(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub mono_pretrain: usize,
    pub parallel_pool: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub vocab: Vocabulary,
    /// Monolingual pretraining split; `sum_b` stripped.
    pub mono: Vec<Example>,
    /// Pool the low-resource scenario subsets are drawn from.
    pub pool: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Deterministic function of (seed, sizes, params): each split draws
/// from its own seeded stream so split sizes do not perturb each other.
pub fn generate_corpus(
    vocab: &Vocabulary,
    seed: u64,
    sizes: &CorpusSizes,
    params: &GenParams,
) -> Result<CorpusSplits, CorpusError> {
    let gen_split = |stream: u64, count: usize| -> Result<Vec<Example>, CorpusError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (0..count).map(|_| generate_example(&mut rng, vocab, params)).collect()
    };
    let mut mono = gen_split(1, sizes.mono_pretrain)?;
    for ex in &mut mono {
        ex.sum_b = None;
    }
    Ok(CorpusSplits {
        vocab: *vocab,
        mono,
        pool: gen_split(2, sizes.parallel_pool)?,
        valid: gen_split(3, sizes.valid)?,
        test: gen_split(4, sizes.test)?,
    })
}

/// First ceil(fraction * pool) items of one seeded shuffle of the pool.
/// The shuffle depends only on the seed, so subsets at growing fractions
/// are nested.
pub fn scenario_subset(pool: &[Example], spec: &ScenarioSpec) -> Result<Vec<Example>, CorpusError> {
    let take = (spec.parallel_fraction * pool.len() as f64).ceil() as usize;
    if take == 0 {
        return Err(CorpusError::EmptyScenario(format!(
            "fraction {} of a pool of {} selects nothing; enlarge the pool",
            spec.parallel_fraction,
            pool.len()
        )));
    }
    let take = take.min(pool.len());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    Ok(order[..take].iter().map(|&i| pool[i].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Mono,
    Parallel,
}

fn push_field(out: &mut String, name: &str, tokens: &[usize]) {
    out.push_str(name);
    out.push('=');
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{t}");
    }
}

/// One record per line, tab-separated named fields in fixed order
/// (doc, sum_a, sum_b), ids space-separated. The single header line
/// declares the vocabulary ranges and the split kind.
pub fn write_corpus(
    examples: &[Example],
    vocab: &Vocabulary,
    kind: SplitKind,
    path: &Path,
) -> Result<(), CorpusError> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{MAGIC} v1 kind={} pad={} bos={} eos={} lsep={} unk={} a={}..{} b={}..{}",
        match kind {
            SplitKind::Mono => "mono",
            SplitKind::Parallel => "parallel",
        },
        vocab.pad,
        vocab.bos,
        vocab.eos,
        vocab.lsep,
        vocab.unk,
        vocab.a_start,
        vocab.b_start(),
        vocab.b_start(),
        vocab.size(),
    );
    for (i, ex) in examples.iter().enumerate() {
        if kind == SplitKind::Parallel && ex.sum_b.is_none() {
            return Err(CorpusError::Validation {
                line: i + 2,
                msg: "parallel split requires sum_b".into(),
            });
        }
        push_field(&mut out, "doc", &ex.doc);
        out.push('\t');
        push_field(&mut out, "sum_a", &ex.sum_a);
        if let Some(sum_b) = &ex.sum_b {
            out.push('\t');
            push_field(&mut out, "sum_b", sum_b);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_corpus(path: &Path) -> Result<(Vocabulary, SplitKind, Vec<Example>), CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(CorpusError::Parse { line: 1, msg: "empty file".into() })?;
    let (vocab, kind) = parse_header(header)?;

    let mut examples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let mut doc = None;
        let mut sum_a = None;
        let mut sum_b = None;
        for field in line.split('\t') {
            let (name, rest) = field.split_once('=').ok_or(CorpusError::Parse {
                line: lineno,
                msg: format!("field without '=': {field}"),
            })?;
            let ids = parse_ids(rest, lineno)?;
            match name {
                "doc" => doc = Some(ids),
                "sum_a" => sum_a = Some(ids),
                "sum_b" => sum_b = Some(ids),
                other => {
                    return Err(CorpusError::Parse {
                        line: lineno,
                        msg: format!("unknown field {other}"),
                    })
                }
            }
        }
        let doc = doc.ok_or(CorpusError::Validation {
            line: lineno,
            msg: "missing field doc".into(),
        })?;
        let sum_a = sum_a.ok_or(CorpusError::Validation {
            line: lineno,
            msg: "missing field sum_a".into(),
        })?;
        if kind == SplitKind::Parallel && sum_b.is_none() {
            return Err(CorpusError::Validation {
                line: lineno,
                msg: "missing field sum_b in parallel split".into(),
            });
        }
        for &id in doc.iter().chain(sum_a.iter()) {
            if !vocab.is_a(id) {
                return Err(CorpusError::Validation {
                    line: lineno,
                    msg: format!("id {id} outside declared A range"),
                });
            }
        }
        if let Some(sb) = &sum_b {
            for &id in sb {
                if !vocab.is_b(id) {
                    return Err(CorpusError::Validation {
                        line: lineno,
                        msg: format!("id {id} outside declared B range"),
                    });
                }
            }
        }
        examples.push(Example { doc, sum_a, sum_b });
    }
    Ok((vocab, kind, examples))
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<usize>, CorpusError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|t| {
            t.parse().map_err(|_| CorpusError::Parse {
                line,
                msg: format!("bad token id {t}"),
            })
        })
        .collect()
}

fn parse_header(header: &str) -> Result<(Vocabulary, SplitKind), CorpusError> {
    let err = |msg: &str| CorpusError::Parse { line: 1, msg: msg.to_string() };
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(err("bad magic"));
    }
    if parts.next() != Some("v1") {
        return Err(err("unsupported version"));
    }
    let mut kind = None;
    let mut kv = std::collections::HashMap::new();
    for part in parts {
        let (k, v) = part.split_once('=').ok_or_else(|| err("bad header field"))?;
        if k == "kind" {
            kind = Some(match v {
                "mono" => SplitKind::Mono,
                "parallel" => SplitKind::Parallel,
                _ => return Err(err("bad kind")),
            });
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<usize, CorpusError> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or(CorpusError::Parse { line: 1, msg: format!("missing header field {k}") })
    };
    let a_spec = kv.get("a").ok_or_else(|| err("missing a range"))?;
    let (a_start, a_end) = a_spec
        .split_once("..")
        .and_then(|(s, e)| Some((s.parse().ok()?, e.parse::<usize>().ok()?)))
        .ok_or_else(|| err("bad a range"))?;
    let vocab = Vocabulary {
        pad: get("pad")?,
        bos: get("bos")?,
        eos: get("eos")?,
        lsep: get("lsep")?,
        unk: get("unk")?,
        a_start,
        lang_size: a_end - a_start,
    };
    Ok((vocab, kind.ok_or_else(|| err("missing kind"))?))
}
