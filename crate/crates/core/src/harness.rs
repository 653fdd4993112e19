//! Run configuration and pipeline orchestration shared by the CLI and
//! the acceptance suite.
//!
//! Every command writes a manifest carrying the fully resolved
//! [`RunConfig`] next to its artifacts, so any run is replayable from
//! its manifest alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::corpus::{
    generate_corpus, read_corpus, scenario_subset, write_corpus, CorpusError, CorpusSizes, Example,
    GenParams, ScenarioSpec, SplitKind, Vocabulary,
};
use crate::decode::{beam_search, write_decodes, DecodeConfig, DecodeError, DecodeRecord};
use crate::eval::{evaluate_run, EvalError, RunReport};
use crate::model::{ModelConfig, ModelError, Seq2SeqModel};
use crate::probe::{
    emit_heatmap, heatmap_file_name, probe_model, summarize_heads, write_probe_summary, ProbeError,
    ProbeThresholds,
};
use crate::train::{
    finetune, pretrain_monolingual, TrainConfig, TrainError, TrainReport, TrainingMode,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Fully resolved experiment configuration. Defaults are the
/// desk-scale preset; `paper` swaps in the full-scale training values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: String,
    /// Content tokens per language; vocabulary size resolves to
    /// `5 + 2 * lang_size`.
    pub lang_size: usize,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub decode: DecodeConfig,
    pub gen: GenParams,
    pub sizes: CorpusSizes,
    pub probe: ProbeThresholds,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        let lang_size = 96;
        let gen = GenParams::default();
        RunConfig {
            preset: "desk".into(),
            lang_size,
            model: ModelConfig::desk(5 + 2 * lang_size),
            pretrain: TrainConfig {
                max_steps: 3000,
                eval_every: 250,
                patience: 4,
                ..TrainConfig::desk()
            },
            finetune: TrainConfig {
                batch_size: 8,
                base_lr_enc: 0.02,
                base_lr_dec: 0.02,
                warmup_enc: 60,
                warmup_dec: 30,
                max_steps: 300,
                eval_every: 20,
                patience: 8,
                ..TrainConfig::desk()
            },
            decode: DecodeConfig {
                max_len: 4 * (2 * gen.n_max + 1),
                ..DecodeConfig::default()
            },
            gen,
            sizes: CorpusSizes {
                mono_pretrain: 20_000,
                parallel_pool: 10_000,
                valid: 400,
                test: 1000,
            },
            probe: ProbeThresholds::default(),
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            preset: "paper".into(),
            pretrain: TrainConfig::paper(),
            finetune: TrainConfig::paper(),
            ..RunConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(RunConfig::desk()),
            "paper" => Some(RunConfig::paper()),
            _ => None,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.lang_size)
    }

    /// Ties derived fields together (vocab size, training seeds).
    pub fn resolve(&mut self) {
        self.model.vocab_size = self.vocabulary().size();
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.pretrain.dropout_p = self.model.dropout_p;
        self.finetune.dropout_p = self.model.dropout_p;
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Invalid(format!("bad config {}: {e}", path.display())))?;
        cfg.resolve();
        Ok(cfg)
    }
}

/// Manifest written next to every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<TrainingMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSpec>,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            mode: None,
            scenario: None,
            seed: config.seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest is serializable");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Invalid(format!("bad manifest {}: {e}", path.display())))
    }
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_log(history: &TrainReport, path: &Path) -> Result<(), HarnessError> {
    let mut out = String::new();
    for rec in &history.history {
        out.push_str(&serde_json::to_string(rec).expect("record is serializable"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Generates corpus files (mono/pool/valid/test) plus a manifest.
pub fn cmd_gen_corpus(config: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    ensure_dir(out_dir)?;
    let vocab = config.vocabulary();
    let splits = generate_corpus(&vocab, config.seed, &config.sizes, &config.gen)?;
    let mut manifest = RunManifest::new("gen-corpus", config);
    let mut paths = Vec::new();
    for (name, examples, kind) in [
        ("mono", &splits.mono, SplitKind::Mono),
        ("pool", &splits.pool, SplitKind::Parallel),
        ("valid", &splits.valid, SplitKind::Parallel),
        ("test", &splits.test, SplitKind::Parallel),
    ] {
        let path = out_dir.join(format!("{name}.txt"));
        write_corpus(examples, &vocab, kind, &path)?;
        manifest
            .outputs
            .insert(name.to_string(), path.display().to_string());
        paths.push(path);
    }
    manifest.write(out_dir)?;
    Ok(paths)
}

pub struct LoadedCorpus {
    pub vocab: Vocabulary,
    pub mono: Vec<Example>,
    pub pool: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn load_corpus(dir: &Path) -> Result<LoadedCorpus, HarnessError> {
    let (vocab, _, mono) = read_corpus(&dir.join("mono.txt"))?;
    let (_, _, pool) = read_corpus(&dir.join("pool.txt"))?;
    let (_, _, valid) = read_corpus(&dir.join("valid.txt"))?;
    let (_, _, test) = read_corpus(&dir.join("test.txt"))?;
    Ok(LoadedCorpus { vocab, mono, pool, valid, test })
}

/// Monolingual pretraining stage; writes checkpoint, log, manifest.
pub fn cmd_pretrain(
    config: &RunConfig,
    corpus_dir: &Path,
    out_dir: &Path,
) -> Result<PathBuf, HarnessError> {
    ensure_dir(out_dir)?;
    let corpus = load_corpus(corpus_dir)?;
    let model = Seq2SeqModel::new(config.model.clone(), 1, config.seed)?;
    let (model, report) =
        pretrain_monolingual(model, &corpus.vocab, &corpus.mono, &corpus.valid, &config.pretrain)?;
    let ckpt = out_dir.join("model.ckpt");
    checkpoint::save_model(&model, &ckpt)?;
    write_log(&report, &out_dir.join("train.log.jsonl"))?;
    let mut manifest = RunManifest::new("pretrain", config);
    manifest
        .inputs
        .insert("corpus".into(), corpus_dir.display().to_string());
    manifest
        .outputs
        .insert("checkpoint".into(), ckpt.display().to_string());
    manifest.write(out_dir)?;
    Ok(ckpt)
}

/// Finetuning stage for one (mode, scenario, seed); initialization
/// comes from the pretrained checkpoint per-mode.
pub fn cmd_finetune(
    config: &RunConfig,
    mode: TrainingMode,
    scenario: &ScenarioSpec,
    init_ckpt: &Path,
    corpus_dir: &Path,
    out_dir: &Path,
) -> Result<PathBuf, HarnessError> {
    ensure_dir(out_dir)?;
    let corpus = load_corpus(corpus_dir)?;
    let pretrained = checkpoint::load_model(init_ckpt)?;
    let subset = scenario_subset(&corpus.pool, scenario)?;
    let (model, report) = finetune(
        &pretrained,
        mode,
        &corpus.vocab,
        &subset,
        &corpus.valid,
        &config.finetune,
    )?;
    let ckpt = out_dir.join("model.ckpt");
    checkpoint::save_model(&model, &ckpt)?;
    write_log(&report, &out_dir.join("train.log.jsonl"))?;
    let mut manifest = RunManifest::new("finetune", config);
    manifest.mode = Some(mode);
    manifest.scenario = Some(*scenario);
    manifest
        .inputs
        .insert("corpus".into(), corpus_dir.display().to_string());
    manifest
        .inputs
        .insert("init".into(), init_ckpt.display().to_string());
    manifest
        .outputs
        .insert("checkpoint".into(), ckpt.display().to_string());
    manifest.write(out_dir)?;
    Ok(ckpt)
}

/// Beam-decodes a corpus concurrently (decoding is read-only over a
/// frozen model); records come back in document order regardless of
/// scheduling.
pub fn decode_corpus(
    model: &Seq2SeqModel,
    vocab: &Vocabulary,
    examples: &[Example],
    mode: TrainingMode,
    config: &DecodeConfig,
    workers: usize,
) -> Result<Vec<DecodeRecord>, HarnessError> {
    let workers = workers.max(1);
    let chunk = examples.len().div_ceil(workers).max(1);
    let mut records: Vec<Option<DecodeRecord>> = vec![None; examples.len()];
    let mut first_err: Option<DecodeError> = None;
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for (w, docs) in examples.chunks(chunk).enumerate() {
            let base = w * chunk;
            handles.push(s.spawn(move || {
                docs.iter()
                    .enumerate()
                    .map(|(i, ex)| {
                        beam_search(model, vocab, &ex.doc, mode, config).map(|out| DecodeRecord {
                            doc_id: base + i,
                            sum_a: out.sum_a,
                            sum_b: out.sum_b,
                            score: out.score,
                            truncated: out.truncated,
                        })
                    })
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for r in h.join().expect("decode worker panicked") {
                match r {
                    Ok(rec) => {
                        let id = rec.doc_id;
                        records[id] = Some(rec);
                    }
                    Err(e) => {
                        if first_err.is_none() {
                            first_err = Some(e);
                        }
                    }
                }
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e.into());
    }
    Ok(records.into_iter().map(|r| r.expect("all ids covered")).collect())
}

/// Decodes a corpus file with a checkpointed model and writes records.
pub fn cmd_decode(
    config: &RunConfig,
    ckpt: &Path,
    corpus_file: &Path,
    mode: TrainingMode,
    limit: Option<usize>,
    out_file: &Path,
) -> Result<Vec<DecodeRecord>, HarnessError> {
    let model = checkpoint::load_model(ckpt)?;
    let (vocab, _, examples) = read_corpus(corpus_file)?;
    let examples = match limit {
        Some(n) => &examples[..n.min(examples.len())],
        None => &examples[..],
    };
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let records = decode_corpus(&model, &vocab, examples, mode, &config.decode, workers)?;
    write_decodes(&records, out_file).map_err(io_err(out_file))?;
    Ok(records)
}

/// Scores decodes against references and writes a report.
pub fn cmd_eval(
    decodes_file: &Path,
    refs_file: &Path,
    out_file: &Path,
) -> Result<RunReport, HarnessError> {
    let records = crate::decode::read_decodes(decodes_file).map_err(io_err(decodes_file))?;
    let (_, _, refs) = read_corpus(refs_file)?;
    let report = evaluate_run(&records, &refs)?;
    crate::eval::write_report(&report, out_file).map_err(io_err(out_file))?;
    Ok(report)
}

/// Collects attention, classifies heads, and renders one heatmap per
/// head plus a JSON summary.
pub fn cmd_probe(
    config: &RunConfig,
    ckpt: &Path,
    out_dir: &Path,
) -> Result<PathBuf, HarnessError> {
    ensure_dir(out_dir)?;
    let model = checkpoint::load_model(ckpt)?;
    let vocab = config.vocabulary();
    let probe_set = probe_examples(config)?;
    let report = probe_model(&model, &vocab, &probe_set, config.gen.repeat, &config.probe)?;
    for map in &report.maps {
        emit_heatmap(map, &out_dir.join(heatmap_file_name(map)))?;
    }
    let summary = summarize_heads(&report.heads);
    let path = out_dir.join("heads.json");
    write_probe_summary(&summary, &path)?;
    let mut manifest = RunManifest::new("probe", config);
    manifest
        .inputs
        .insert("checkpoint".into(), ckpt.display().to_string());
    manifest
        .outputs
        .insert("summary".into(), path.display().to_string());
    manifest.write(out_dir)?;
    Ok(path)
}

/// Fixed-layout probe set derived from the run config (position-wise
/// averaging needs identical shapes).
pub fn probe_examples(config: &RunConfig) -> Result<Vec<Example>, HarnessError> {
    let doc_len = *config.gen.doc_len.end();
    let salient = *config.gen.salient_count.end().min(&config.gen.n_max);
    let gen = GenParams {
        doc_len: doc_len..=doc_len,
        salient_count: salient..=salient,
        ..config.gen.clone()
    };
    let sizes = CorpusSizes { mono_pretrain: 0, parallel_pool: 32, valid: 0, test: 0 };
    let vocab = config.vocabulary();
    Ok(generate_corpus(&vocab, config.seed ^ PROBE_SEED_SALT, &sizes, &gen)?.pool)
}

const PROBE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// One evaluated run feeding the comparison grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareEntry {
    pub mode: TrainingMode,
    pub scenario: String,
    pub seed: u64,
    pub report: RunReport,
}

/// Seed-aggregated cell of a comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub mean: f64,
    /// Max minus min across seeds.
    pub spread: f64,
    pub seeds: usize,
}

fn cell(values: &[f64]) -> CellStat {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    CellStat { mean, spread: max - min, seeds: n }
}

/// Systems-by-scenarios tables of seed means with per-cell spread.
/// Cells without runs are simply absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rouge1_f1: BTreeMap<String, BTreeMap<String, CellStat>>,
    pub rouge2_f1: BTreeMap<String, BTreeMap<String, CellStat>>,
    pub rouge_l_f1: BTreeMap<String, BTreeMap<String, CellStat>>,
    pub len_delta: BTreeMap<String, BTreeMap<String, CellStat>>,
    pub mono_rouge1_f1: BTreeMap<String, BTreeMap<String, CellStat>>,
}

pub fn compare(entries: &[CompareEntry]) -> ComparisonReport {
    let mut grouped: BTreeMap<(String, String), Vec<&CompareEntry>> = BTreeMap::new();
    for e in entries {
        grouped
            .entry((e.scenario.clone(), e.mode.as_str().to_string()))
            .or_default()
            .push(e);
    }
    let mut report = ComparisonReport {
        rouge1_f1: BTreeMap::new(),
        rouge2_f1: BTreeMap::new(),
        rouge_l_f1: BTreeMap::new(),
        len_delta: BTreeMap::new(),
        mono_rouge1_f1: BTreeMap::new(),
    };
    for ((scenario, mode), group) in grouped {
        let put = |table: &mut BTreeMap<String, BTreeMap<String, CellStat>>, values: Vec<f64>| {
            if !values.is_empty() {
                table
                    .entry(scenario.clone())
                    .or_default()
                    .insert(mode.clone(), cell(&values));
            }
        };
        put(&mut report.rouge1_f1, group.iter().map(|e| e.report.rouge1.f1).collect());
        put(&mut report.rouge2_f1, group.iter().map(|e| e.report.rouge2.f1).collect());
        put(&mut report.rouge_l_f1, group.iter().map(|e| e.report.rouge_l.f1).collect());
        put(&mut report.len_delta, group.iter().map(|e| e.report.len_delta).collect());
        put(
            &mut report.mono_rouge1_f1,
            group
                .iter()
                .filter_map(|e| e.report.mono.as_ref().map(|m| m.rouge1.f1))
                .collect(),
        );
    }
    report
}

/// Plain-text rendering of one comparison table.
pub fn render_table(
    title: &str,
    table: &BTreeMap<String, BTreeMap<String, CellStat>>,
) -> String {
    let mut out = format!("## {title}\n");
    let mut modes: Vec<&String> = table.values().flat_map(|m| m.keys()).collect();
    modes.sort();
    modes.dedup();
    out.push_str(&format!("{:<10}", "scenario"));
    for m in &modes {
        out.push_str(&format!("{:>22}", m));
    }
    out.push('\n');
    for (scenario, row) in table {
        out.push_str(&format!("{scenario:<10}"));
        for m in &modes {
            match row.get(m.as_str()) {
                Some(c) => out.push_str(&format!(
                    "{:>22}",
                    format!("{:.4} (±{:.4}, n={})", c.mean, c.spread / 2.0, c.seeds)
                )),
                None => out.push_str(&format!("{:>22}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

/// Scans run directories (each holding manifest.json + report.json)
/// and assembles the comparison.
pub fn cmd_compare(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ComparisonReport, HarnessError> {
    ensure_dir(out_dir)?;
    let mut entries = Vec::new();
    for dir in run_dirs {
        let manifest = RunManifest::read(&dir.join("manifest.json"))?;
        let report_path = dir.join("report.json");
        if !report_path.exists() {
            return Err(HarnessError::Invalid(format!(
                "run {} has no report.json (evaluate it first)",
                dir.display()
            )));
        }
        let report = crate::eval::read_report(&report_path).map_err(io_err(&report_path))?;
        let mode = manifest.mode.ok_or_else(|| {
            HarnessError::Invalid(format!("run {} manifest lacks a mode", dir.display()))
        })?;
        let scenario = manifest
            .scenario
            .map(|s| s.name.as_str().to_string())
            .unwrap_or_else(|| "unknown".into());
        entries.push(CompareEntry { mode, scenario, seed: manifest.seed, report });
    }
    let report = compare(&entries);
    let json_path = out_dir.join("comparison.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&report).expect("comparison is serializable") + "\n",
    )
    .map_err(io_err(&json_path))?;
    let text = [
        render_table("cross-lingual rouge1 f1", &report.rouge1_f1),
        render_table("cross-lingual rouge2 f1", &report.rouge2_f1),
        render_table("cross-lingual rougeL f1", &report.rouge_l_f1),
        render_table("length delta (generated - gold)", &report.len_delta),
        render_table("monolingual rouge1 f1", &report.mono_rouge1_f1),
    ]
    .join("\n");
    let txt_path = out_dir.join("comparison.txt");
    std::fs::write(&txt_path, text).map_err(io_err(&txt_path))?;
    Ok(report)
}
