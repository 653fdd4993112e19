//! Evaluation metrics: ROUGE-1/2/L over token ids, length statistics,
//! best-worst-scaling score arithmetic, and Fleiss' kappa.
//!
//! ROUGE works directly on integer token ids (the corpus is synthetic,
//! so there is no stemming or stopword machinery), and corpus scores
//! are means of per-example scores.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Example;
use crate::decode::DecodeRecord;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty tally (no comparison items)")]
    EmptyTally,
    #[error("degenerate agreement table: {0}")]
    DegenerateTable(String),
    #[error("kappa table row {row} sums to {got}, expected {expected} raters")]
    BadRow { row: usize, got: usize, expected: usize },
    #[error("decode/reference id mismatch; missing ids: {0:?}")]
    IdMismatch(Vec<usize>),
    #[error("reference {0} lacks a cross-lingual summary")]
    MissingReference(usize),
}

/// Precision / recall / F1 for one ROUGE variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeComponent {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

impl RougeComponent {
    fn from_pr(p: f64, r: f64) -> Self {
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        RougeComponent { p, r, f1 }
    }

    pub fn zero() -> Self {
        RougeComponent { p: 0.0, r: 0.0, f1: 0.0 }
    }
}

/// Clipped n-gram overlap. Sequences shorter than `n` contribute zero.
pub fn rouge_n(candidate: &[usize], reference: &[usize], n: usize) -> RougeComponent {
    assert!(n >= 1, "rouge_n needs n >= 1");
    if candidate.len() < n || reference.len() < n {
        return RougeComponent::zero();
    }
    fn count(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
        let mut m: HashMap<&[usize], usize> = HashMap::new();
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
        m
    }
    let cand = count(candidate, n);
    let refr = count(reference, n);
    let overlap: usize = refr
        .iter()
        .map(|(gram, &rc)| cand.get(gram).map_or(0, |&cc| cc.min(rc)))
        .sum();
    let cand_total = candidate.len() - n + 1;
    let ref_total = reference.len() - n + 1;
    RougeComponent::from_pr(overlap as f64 / cand_total as f64, overlap as f64 / ref_total as f64)
}

/// Longest-common-subsequence ROUGE (two-row dynamic program).
pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> RougeComponent {
    if candidate.is_empty() || reference.is_empty() {
        return RougeComponent::zero();
    }
    let lcs = lcs_len(candidate, reference) as f64;
    RougeComponent::from_pr(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let m = b.len();
    let mut prev = vec![0usize; m + 1];
    let mut curr = vec![0usize; m + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// All three ROUGE variants for one candidate/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub rouge1: RougeComponent,
    pub rouge2: RougeComponent,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeComponent,
}

pub fn rouge_all(candidate: &[usize], reference: &[usize]) -> RougeScore {
    RougeScore {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
    }
}

/// Best-worst-scaling counts for one system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BwsTally {
    pub best: usize,
    pub worst: usize,
    pub total: usize,
}

/// (times best - times worst) / total, in [-1, 1].
pub fn bws_score(tally: &BwsTally) -> Result<f64, EvalError> {
    if tally.total == 0 {
        return Err(EvalError::EmptyTally);
    }
    Ok((tally.best as f64 - tally.worst as f64) / tally.total as f64)
}

/// Items x categories count matrix with a fixed rater count per item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KappaTable {
    pub counts: Vec<Vec<usize>>,
    pub raters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    /// Mean per-item observed agreement (the "overall agreement").
    pub agreement: f64,
}

/// Fleiss' kappa with category-marginal chance agreement.
pub fn fleiss_kappa(table: &KappaTable) -> Result<KappaResult, EvalError> {
    let n = table.counts.len();
    let r = table.raters;
    if n == 0 || r < 2 {
        return Err(EvalError::DegenerateTable(format!("{n} items, {r} raters")));
    }
    let k = table.counts[0].len();
    for (i, row) in table.counts.iter().enumerate() {
        let sum: usize = row.iter().sum();
        if row.len() != k || sum != r {
            return Err(EvalError::BadRow { row: i, got: sum, expected: r });
        }
    }
    let rf = r as f64;
    let nf = n as f64;
    let p_bar = table
        .counts
        .iter()
        .map(|row| {
            let sq: usize = row.iter().map(|&c| c * c).sum();
            (sq as f64 - rf) / (rf * (rf - 1.0))
        })
        .sum::<f64>()
        / nf;
    let mut pe = 0.0;
    for j in 0..k {
        let col: usize = table.counts.iter().map(|row| row[j]).sum();
        let pj = col as f64 / (nf * rf);
        pe += pj * pj;
    }
    if (1.0 - pe).abs() < 1e-15 {
        return Err(EvalError::DegenerateTable(
            "all ratings in a single category; chance agreement is 1".into(),
        ));
    }
    Ok(KappaResult {
        kappa: (p_bar - pe) / (1.0 - pe),
        agreement: p_bar,
    })
}

/// Mean generated / gold lengths (content tokens only) and their gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub len_gen: f64,
    pub len_gold: f64,
    pub delta: f64,
}

fn length_stats(gen: &[usize], gold: &[usize]) -> LengthStats {
    let g = mean_len(gen);
    let o = mean_len(gold);
    LengthStats { len_gen: g, len_gold: o, delta: g - o }
}

fn mean_len(lens: &[usize]) -> f64 {
    if lens.is_empty() {
        0.0
    } else {
        lens.iter().sum::<usize>() as f64 / lens.len() as f64
    }
}

/// Monolingual-retention section of a report, present only when the
/// decodes carry monolingual outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonoSection {
    pub rouge1: RougeComponent,
    pub rouge2: RougeComponent,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeComponent,
    pub length: LengthStats,
}

/// Machine-diffable evaluation report with fixed field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub examples: usize,
    pub rouge1: RougeComponent,
    pub rouge2: RougeComponent,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeComponent,
    pub len_gen: f64,
    pub len_gold: f64,
    pub len_delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mono: Option<MonoSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bws: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<KappaResult>,
    /// Reserved; no contextual-embedding scorer exists at desk scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bertscore: Option<f64>,
    pub truncated: usize,
}

fn mean_component(parts: &[RougeComponent]) -> RougeComponent {
    if parts.is_empty() {
        return RougeComponent::zero();
    }
    let n = parts.len() as f64;
    RougeComponent {
        p: parts.iter().map(|c| c.p).sum::<f64>() / n,
        r: parts.iter().map(|c| c.r).sum::<f64>() / n,
        f1: parts.iter().map(|c| c.f1).sum::<f64>() / n,
    }
}

/// Scores one run's decodes against references (indexed by doc_id).
/// Corpus scores are per-example means; the monolingual section is
/// present only when every decode carries a `sum_a`.
pub fn evaluate_run(decodes: &[DecodeRecord], references: &[Example]) -> Result<RunReport, EvalError> {
    let missing: Vec<usize> = decodes
        .iter()
        .map(|d| d.doc_id)
        .filter(|&id| id >= references.len())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::IdMismatch(missing));
    }

    let mut r1 = Vec::new();
    let mut r2 = Vec::new();
    let mut rl = Vec::new();
    let mut gen_lens = Vec::new();
    let mut gold_lens = Vec::new();
    let mut truncated = 0usize;

    let has_mono = !decodes.is_empty() && decodes.iter().all(|d| d.sum_a.is_some());
    let mut m1 = Vec::new();
    let mut m2 = Vec::new();
    let mut ml = Vec::new();
    let mut mono_gen = Vec::new();
    let mut mono_gold = Vec::new();

    for d in decodes {
        let ex = &references[d.doc_id];
        let gold_b = ex
            .sum_b
            .as_deref()
            .ok_or(EvalError::MissingReference(d.doc_id))?;
        let score = rouge_all(&d.sum_b, gold_b);
        r1.push(score.rouge1);
        r2.push(score.rouge2);
        rl.push(score.rouge_l);
        gen_lens.push(d.sum_b.len());
        gold_lens.push(gold_b.len());
        if d.truncated {
            truncated += 1;
        }
        if has_mono {
            let sum_a = d.sum_a.as_deref().expect("checked above");
            let score = rouge_all(sum_a, &ex.sum_a);
            m1.push(score.rouge1);
            m2.push(score.rouge2);
            ml.push(score.rouge_l);
            mono_gen.push(sum_a.len());
            mono_gold.push(ex.sum_a.len());
        }
    }

    let length = length_stats(&gen_lens, &gold_lens);
    Ok(RunReport {
        examples: decodes.len(),
        rouge1: mean_component(&r1),
        rouge2: mean_component(&r2),
        rouge_l: mean_component(&rl),
        len_gen: length.len_gen,
        len_gold: length.len_gold,
        len_delta: length.delta,
        mono: has_mono.then(|| MonoSection {
            rouge1: mean_component(&m1),
            rouge2: mean_component(&m2),
            rouge_l: mean_component(&ml),
            length: length_stats(&mono_gen, &mono_gold),
        }),
        bws: None,
        kappa: None,
        bertscore: None,
        truncated,
    })
}

pub fn write_report(report: &RunReport, path: &std::path::Path) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report is serializable");
    std::fs::write(path, text + "\n")
}

pub fn read_report(path: &std::path::Path) -> std::io::Result<RunReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
