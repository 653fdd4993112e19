//! Parameter checkpoints: a versioned text container with an embedded
//! model-config header. Values are stored as IEEE-754 bit patterns in
//! hex, so a save/load round trip is bit-exact regardless of locale,
//! formatting, or endianness.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelConfig, ModelError, Seq2SeqModel};

const MAGIC: &str = "clsumckpt";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_model(model: &Seq2SeqModel, path: &Path) -> Result<(), CheckpointError> {
    let mut out = String::new();
    out.push_str(&format!("{MAGIC} v{VERSION}\n"));
    let config = serde_json::to_string(&model.config).expect("config is serializable");
    out.push_str(&format!("config {config}\n"));
    out.push_str(&format!("decoders {}\n", model.decoder_count));
    out.push_str(&format!("params {}\n", model.params.len()));
    for i in 0..model.params.len() {
        let t = model.params.tensor(i);
        out.push_str(&format!("param {} {}", model.params.name(i), t.shape.len()));
        for d in &t.shape {
            out.push_str(&format!(" {d}"));
        }
        for v in &t.values {
            out.push_str(&format!(" {:016x}", v.to_bits()));
        }
        out.push('\n');
    }
    out.push_str("end\n");
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Seq2SeqModel, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();

    let (n, header) = next_line(&mut lines)?;
    let mut it = header.split_whitespace();
    if it.next() != Some(MAGIC) {
        return Err(CheckpointError::Parse { line: n, msg: "bad magic".into() });
    }
    let ver: u32 = it
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse().ok())
        .ok_or(CheckpointError::Parse { line: n, msg: "missing version".into() })?;
    if ver != VERSION {
        return Err(CheckpointError::Version(ver));
    }

    let (n, cfg_line) = next_line(&mut lines)?;
    let config: ModelConfig = cfg_line
        .strip_prefix("config ")
        .ok_or(CheckpointError::Parse { line: n, msg: "expected config".into() })
        .and_then(|json| {
            serde_json::from_str(json).map_err(|e| CheckpointError::Parse {
                line: n,
                msg: format!("bad config json: {e}"),
            })
        })?;

    let (n, dec_line) = next_line(&mut lines)?;
    let decoder_count: usize = dec_line
        .strip_prefix("decoders ")
        .and_then(|v| v.parse().ok())
        .ok_or(CheckpointError::Parse { line: n, msg: "expected decoders".into() })?;

    let (n, count_line) = next_line(&mut lines)?;
    let param_count: usize = count_line
        .strip_prefix("params ")
        .and_then(|v| v.parse().ok())
        .ok_or(CheckpointError::Parse { line: n, msg: "expected params".into() })?;

    // seed is irrelevant: every parameter is overwritten below
    let mut model = Seq2SeqModel::new(config, decoder_count, 0)?;
    let mut seen = 0usize;
    for _ in 0..param_count {
        let (n, line) = next_line(&mut lines)?;
        let mut tok = line.split_whitespace();
        if tok.next() != Some("param") {
            return Err(CheckpointError::Parse { line: n, msg: "expected param record".into() });
        }
        let name = tok
            .next()
            .ok_or(CheckpointError::Parse { line: n, msg: "missing name".into() })?;
        let ndims: usize = parse_tok(&mut tok, n, "rank")?;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(parse_tok(&mut tok, n, "dim")?);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let hex = tok
                .next()
                .ok_or(CheckpointError::Parse { line: n, msg: "missing value".into() })?;
            let bits = u64::from_str_radix(hex, 16).map_err(|e| CheckpointError::Parse {
                line: n,
                msg: format!("bad value {hex}: {e}"),
            })?;
            values.push(f64::from_bits(bits));
        }
        if tok.next().is_some() {
            return Err(CheckpointError::Parse { line: n, msg: "trailing values".into() });
        }
        let idx = model
            .params
            .index_of(name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unexpected parameter {name}")))?;
        let t = model.params.tensor_mut(idx);
        if t.shape != shape {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {name}: shape {:?} in file, {:?} in model",
                shape, t.shape
            )));
        }
        t.values = values;
        seen += 1;
    }
    if seen != model.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{seen} parameters in file, model has {}",
            model.params.len()
        )));
    }
    let (n, end) = next_line(&mut lines)?;
    if end != "end" {
        return Err(CheckpointError::Parse { line: n, msg: "expected end".into() });
    }
    Ok(model)
}

fn next_line<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
) -> Result<(usize, &'a str), CheckpointError> {
    lines
        .next()
        .map(|(i, l)| (i + 1, l))
        .ok_or(CheckpointError::Parse { line: 0, msg: "unexpected end of file".into() })
}

fn parse_tok<'a>(
    tok: &mut impl Iterator<Item = &'a str>,
    line: usize,
    what: &str,
) -> Result<usize, CheckpointError> {
    tok.next()
        .and_then(|v| v.parse().ok())
        .ok_or(CheckpointError::Parse { line, msg: format!("missing {what}") })
}
