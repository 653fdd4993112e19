//! Command-line harness: corpus generation, two-stage training,
//! decoding, evaluation, attention probing, and comparison reports.
//!
//! Configuration precedence is file < environment < flags; the fully
//! resolved configuration is printed at startup and serialized into
//! every manifest. Exit codes: 0 success, 1 runtime failure, 2 usage
//! error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use clsum_core::corpus::{ScenarioName, ScenarioSpec};
use clsum_core::eval::{bws_score, fleiss_kappa, BwsTally, KappaTable};
use clsum_core::harness::{
    cmd_compare, cmd_decode, cmd_eval, cmd_finetune, cmd_gen_corpus, cmd_pretrain, cmd_probe,
    RunConfig,
};
use clsum_core::train::TrainingMode;

#[derive(Parser)]
#[command(name = "clsum", version, about = "Desk-scale cross-lingual summarization lab")]
struct Cli {
    /// JSON configuration file (lowest precedence)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration preset: desk | paper
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output root; defaults to $CLSUM_OUT, then ./runs
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override (threads through corpus, init, and training)
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct TrainOverrides {
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    lr_enc: Option<f64>,
    #[arg(long)]
    lr_dec: Option<f64>,
    #[arg(long)]
    warmup_enc: Option<u64>,
    #[arg(long)]
    warmup_dec: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    patience: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut clsum_core::train::TrainConfig) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(max_steps);
        set!(batch_size);
        set!(grad_accum);
        set!(eval_every);
        set!(patience);
        if let Some(v) = self.lr_enc {
            cfg.base_lr_enc = v;
        }
        if let Some(v) = self.lr_dec {
            cfg.base_lr_dec = v;
        }
        if let Some(v) = self.warmup_enc {
            cfg.warmup_enc = v;
        }
        if let Some(v) = self.warmup_dec {
            cfg.warmup_dec = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout_p = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-language corpus splits
    GenCorpus {
        /// Content tokens per language
        #[arg(long)]
        lang_size: Option<usize>,
        #[arg(long)]
        mono: Option<usize>,
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long)]
        valid: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        doc_len_min: Option<usize>,
        #[arg(long)]
        doc_len_max: Option<usize>,
        #[arg(long)]
        salient_min: Option<usize>,
        #[arg(long)]
        salient_max: Option<usize>,
        /// Saliency threshold: a token is summary-worthy iff it occurs
        /// at least this many times
        #[arg(long)]
        repeat: Option<usize>,
        #[arg(long)]
        n_max: Option<usize>,
        /// Length-imbalance knob: up to this many extra random B-side
        /// tokens appended to each cross-lingual summary
        #[arg(long)]
        b_extra: Option<usize>,
        /// Output directory (default {out}/corpus)
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Pretrain (monolingual) or finetune (parallel scenario subset)
    Train {
        /// pretrain | finetune
        #[arg(long)]
        stage: String,
        /// Corpus directory from gen-corpus
        #[arg(long)]
        corpus: PathBuf,
        /// Pretrained checkpoint (finetune only)
        #[arg(long)]
        init: Option<PathBuf>,
        /// ncls | ncls_ms | mclas (finetune only)
        #[arg(long)]
        mode: Option<String>,
        /// minimum | medium | maximum | full (finetune only)
        #[arg(long)]
        scenario: Option<String>,
        /// Override the scenario's parallel fraction
        #[arg(long)]
        fraction: Option<f64>,
        /// Seed of the scenario subset shuffle (defaults to --seed)
        #[arg(long)]
        scenario_seed: Option<u64>,
        /// Run directory (default {out}/{stage}[-mode-scenario]-s{seed})
        #[arg(long)]
        dir: Option<PathBuf>,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Beam-decode a corpus file with a trained checkpoint
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus file (e.g. corpus/test.txt)
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mode: String,
        /// Decode only the first N documents
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        no_trigram_block: bool,
        #[arg(long)]
        no_language_constraint: bool,
        /// Output file (default {out}/decodes.jsonl)
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Score decodes against references
    Eval {
        #[arg(long)]
        decodes: PathBuf,
        /// Reference corpus file
        #[arg(long)]
        refs: PathBuf,
        /// Optional best-worst tallies (JSON map system -> tally)
        #[arg(long)]
        bws: Option<PathBuf>,
        /// Optional rater agreement table (JSON counts + raters)
        #[arg(long)]
        kappa: Option<PathBuf>,
        /// Output file (default next to decodes as report.json)
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Collect decoder attention, classify heads, render heatmaps
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory (default {out}/probe)
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Assemble systems-by-scenarios comparison tables from run dirs
    Compare {
        /// Run directories, each holding manifest.json and report.json
        runs: Vec<PathBuf>,
        /// Output directory (default {out}/compare)
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    // precedence: file < environment < flags
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => match std::env::var("CLSUM_PRESET") {
            Ok(p) => RunConfig::preset(&p)
                .ok_or_else(|| anyhow!("unknown preset {p} (from CLSUM_PRESET)"))?,
            Err(_) => RunConfig::desk(),
        },
    };
    if let Some(preset) = &cli.preset {
        cfg = RunConfig::preset(preset).ok_or_else(|| anyhow!("unknown preset {preset}"))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.resolve();
    Ok(cfg)
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("CLSUM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_mode(s: &str) -> Result<TrainingMode> {
    TrainingMode::parse(s).ok_or_else(|| anyhow!("unknown mode {s} (ncls | ncls_ms | mclas)"))
}

fn run(cli: Cli) -> Result<()> {
    let mut config = resolve_config(&cli)?;
    let root = out_root(&cli);

    match &cli.command {
        Command::GenCorpus {
            lang_size,
            mono,
            pool,
            valid,
            test,
            doc_len_min,
            doc_len_max,
            salient_min,
            salient_max,
            repeat,
            n_max,
            b_extra,
            dir,
        } => {
            if let Some(v) = lang_size {
                config.lang_size = *v;
            }
            if let Some(v) = mono {
                config.sizes.mono_pretrain = *v;
            }
            if let Some(v) = pool {
                config.sizes.parallel_pool = *v;
            }
            if let Some(v) = valid {
                config.sizes.valid = *v;
            }
            if let Some(v) = test {
                config.sizes.test = *v;
            }
            let dl = config.gen.doc_len.clone();
            config.gen.doc_len =
                doc_len_min.unwrap_or(*dl.start())..=doc_len_max.unwrap_or(*dl.end());
            let sc = config.gen.salient_count.clone();
            config.gen.salient_count =
                salient_min.unwrap_or(*sc.start())..=salient_max.unwrap_or(*sc.end());
            if let Some(v) = repeat {
                config.gen.repeat = *v;
            }
            if let Some(v) = n_max {
                config.gen.n_max = *v;
            }
            if let Some(v) = b_extra {
                config.gen.b_extra = 0..=*v;
            }
            config.resolve();
            print_config(&config);
            let dir = dir.clone().unwrap_or_else(|| root.join("corpus"));
            let paths = cmd_gen_corpus(&config, &dir)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Train {
            stage,
            corpus,
            init,
            mode,
            scenario,
            fraction,
            scenario_seed,
            dir,
            train,
        } => match stage.as_str() {
            "pretrain" => {
                train.apply(&mut config.pretrain);
                print_config(&config);
                let dir = dir
                    .clone()
                    .unwrap_or_else(|| root.join(format!("pretrain-s{}", config.seed)));
                let ckpt = cmd_pretrain(&config, corpus, &dir)?;
                println!("wrote {}", ckpt.display());
            }
            "finetune" => {
                let init = init
                    .as_ref()
                    .ok_or_else(|| usage("finetune requires --init <pretrained checkpoint>"))?;
                let mode = parse_mode(
                    mode.as_deref()
                        .ok_or_else(|| usage("finetune requires --mode"))?,
                )?;
                let name = scenario.as_deref().unwrap_or("minimum");
                let scen_name =
                    ScenarioName::parse(name).ok_or_else(|| anyhow!("unknown scenario {name}"))?;
                let mut spec = ScenarioSpec::named(scen_name, scenario_seed.unwrap_or(config.seed));
                if let Some(f) = fraction {
                    spec.parallel_fraction = *f;
                }
                train.apply(&mut config.finetune);
                print_config(&config);
                let dir = dir.clone().unwrap_or_else(|| {
                    root.join(format!("{}-{}-s{}", mode.as_str(), name, config.seed))
                });
                let ckpt = cmd_finetune(&config, mode, &spec, init, corpus, &dir)?;
                println!("wrote {}", ckpt.display());
            }
            other => return Err(usage(&format!("unknown stage {other} (pretrain | finetune)"))),
        },
        Command::Decode {
            ckpt,
            corpus,
            mode,
            limit,
            beam,
            alpha,
            max_len,
            no_trigram_block,
            no_language_constraint,
            out_file,
        } => {
            let mode = parse_mode(mode)?;
            if let Some(v) = beam {
                config.decode.beam_size = *v;
            }
            if let Some(v) = alpha {
                config.decode.length_penalty_alpha = *v;
            }
            if let Some(v) = max_len {
                config.decode.max_len = *v;
            }
            if *no_trigram_block {
                config.decode.trigram_block = false;
            }
            if *no_language_constraint {
                config.decode.language_constraint = false;
            }
            print_config(&config);
            let out_file = out_file.clone().unwrap_or_else(|| root.join("decodes.jsonl"));
            if let Some(parent) = out_file.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let records = cmd_decode(&config, ckpt, corpus, mode, *limit, &out_file)?;
            println!("wrote {} records to {}", records.len(), out_file.display());
        }
        Command::Eval { decodes, refs, bws, kappa, out_file } => {
            let out_file = out_file
                .clone()
                .unwrap_or_else(|| decodes.with_file_name("report.json"));
            let mut report = cmd_eval(decodes, refs, &out_file)?;
            if let Some(path) = bws {
                let tallies: BTreeMap<String, BwsTally> = read_json(path)?;
                let mut scores = BTreeMap::new();
                for (system, tally) in &tallies {
                    scores.insert(system.clone(), bws_score(tally)?);
                }
                report.bws = Some(scores);
            }
            if let Some(path) = kappa {
                let table: KappaTable = read_json(path)?;
                report.kappa = Some(fleiss_kappa(&table)?);
            }
            if bws.is_some() || kappa.is_some() {
                clsum_core::eval::write_report(&report, &out_file)?;
            }
            println!(
                "rouge1 f1 {:.4}  rouge2 f1 {:.4}  rougeL f1 {:.4}  ({} examples) -> {}",
                report.rouge1.f1,
                report.rouge2.f1,
                report.rouge_l.f1,
                report.examples,
                out_file.display()
            );
        }
        Command::Probe { ckpt, dir } => {
            print_config(&config);
            let dir = dir.clone().unwrap_or_else(|| root.join("probe"));
            let summary = cmd_probe(&config, ckpt, &dir)?;
            println!("wrote {}", summary.display());
        }
        Command::Compare { runs, dir } => {
            if runs.is_empty() {
                return Err(usage("compare needs at least one run directory"));
            }
            let dir = dir.clone().unwrap_or_else(|| root.join("compare"));
            cmd_compare(runs, &dir)?;
            let txt = dir.join("comparison.txt");
            print!("{}", std::fs::read_to_string(&txt)?);
            println!("wrote {}", txt.display());
        }
    }
    Ok(())
}

fn print_config(config: &RunConfig) {
    println!(
        "resolved config: {}",
        serde_json::to_string(config).expect("config is serializable")
    );
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

struct UsageError(String);

impl std::fmt::Debug for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl std::error::Error for UsageError {}

fn usage(msg: &str) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
