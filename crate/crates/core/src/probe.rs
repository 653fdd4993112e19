//! Attention-head probing for the unified-decoder model.
//!
//! Decoder attention is collected under teacher forcing on a probe set
//! of identically-shaped examples, then every head is classified by
//! fixed thresholds over interpretable statistics:
//!
//! - self-attention: translation heads (phase-B queries hit the aligned
//!   phase-A position), local heads (mass on a short preceding window),
//!   self heads (diagonal mass);
//! - encoder-decoder attention: summarization heads (mass on salient
//!   document positions in both phases) and translation heads (salient
//!   in phase A, near-uniform in phase B).
//!
//! Heatmaps are deterministic grayscale SVGs, one per head, with token
//! labels and a separator gridline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{salient_positions, Example, Vocabulary};
use crate::model::{AttentionKind, ModelError, Seq2SeqModel};
use crate::tensor::Tensor;
use crate::train::{build_concat_target, TrainError};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("probe set error: {0}")]
    ProbeSet(String),
    #[error("classification error: {0}")]
    Classify(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Shape of one probe example's concatenated target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeLayout {
    pub doc_len: usize,
    pub sum_a_len: usize,
    pub sum_b_len: usize,
}

impl ProbeLayout {
    pub fn of(ex: &Example) -> Result<Self, ProbeError> {
        let sum_b = ex
            .sum_b
            .as_ref()
            .ok_or_else(|| ProbeError::ProbeSet("probe example lacks sum_b".into()))?;
        Ok(ProbeLayout {
            doc_len: ex.doc.len(),
            sum_a_len: ex.sum_a.len(),
            sum_b_len: sum_b.len(),
        })
    }

    /// Decoder input rows: `[BOS] S^A [LSEP] S^B` (the end token is
    /// never an input).
    pub fn rows(&self) -> usize {
        self.sum_a_len + self.sum_b_len + 2
    }

    /// Input row holding the separator token.
    pub fn lsep_row(&self) -> usize {
        self.sum_a_len + 1
    }

    /// Rows whose input token is a B-content token `y^B_k`; paired with
    /// the row of the aligned `y^A_k` (the synthetic bijection aligns
    /// position k to position k).
    pub fn bijection_alignment(&self) -> Vec<(usize, usize)> {
        let n = self.sum_a_len.min(self.sum_b_len);
        (1..=n).map(|k| (self.lsep_row() + k, k)).collect()
    }

    /// Query rows generating phase A tokens (`y^A_1..y^A_n` and the
    /// separator).
    pub fn phase_a_rows(&self) -> std::ops::Range<usize> {
        0..self.lsep_row()
    }

    /// Query rows generating phase B tokens and the end token.
    pub fn phase_b_rows(&self) -> std::ops::Range<usize> {
        self.lsep_row()..self.rows()
    }
}

/// Averaged attention of one head over a probe set, plus axis labels
/// for rendering.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub kind: AttentionKind,
    pub layer: usize,
    pub head: usize,
    /// Row-stochastic, query positions x key positions.
    pub weights: Tensor,
    pub labels_q: Vec<String>,
    pub labels_k: Vec<String>,
    /// Separator gridline index on each axis, when that axis spans the
    /// concatenated target.
    pub lsep_q: Option<usize>,
    pub lsep_k: Option<usize>,
}

fn target_labels(layout: &ProbeLayout) -> Vec<String> {
    let mut labels = vec!["bos".to_string()];
    for i in 1..=layout.sum_a_len {
        labels.push(format!("a{i}"));
    }
    labels.push("lsep".to_string());
    for i in 1..=layout.sum_b_len {
        labels.push(format!("b{i}"));
    }
    labels
}

fn doc_labels(layout: &ProbeLayout) -> Vec<String> {
    (0..layout.doc_len).map(|i| format!("d{i}")).collect()
}

/// Teacher-forced attention collection over a fixed-layout probe set;
/// weights are averaged position-wise. Heterogeneous layouts are an
/// error (variable-length probing would need bucketing).
pub fn collect_attention(
    model: &Seq2SeqModel,
    vocab: &Vocabulary,
    probe_examples: &[Example],
) -> Result<Vec<AttentionMap>, ProbeError> {
    if probe_examples.is_empty() {
        return Err(ProbeError::ProbeSet("empty probe set".into()));
    }
    if model.decoder_count != 1 {
        return Err(ProbeError::ProbeSet(
            "attention probing expects the unified single-decoder model".into(),
        ));
    }
    let layout = ProbeLayout::of(&probe_examples[0])?;
    for ex in probe_examples {
        if ProbeLayout::of(ex)? != layout {
            return Err(ProbeError::ProbeSet(
                "heterogeneous probe layouts; fix doc and summary lengths".into(),
            ));
        }
    }

    let mut sums: Option<Vec<AttentionMap>> = None;
    for ex in probe_examples {
        let target = build_concat_target(&ex.sum_a, ex.sum_b.as_ref().expect("checked"), vocab)?;
        let memory = model.encode(&ex.doc)?;
        let prefix = &target.tokens[..target.tokens.len() - 1];
        let (_, records) = model.decode_full_raw(&memory, prefix, 1, true)?;
        match &mut sums {
            None => {
                sums = Some(
                    records
                        .into_iter()
                        .map(|r| {
                            let (labels_k, lsep_k) = match r.kind {
                                AttentionKind::SelfAttn => {
                                    (target_labels(&layout), Some(layout.lsep_row()))
                                }
                                AttentionKind::EncDec => (doc_labels(&layout), None),
                            };
                            AttentionMap {
                                kind: r.kind,
                                layer: r.layer,
                                head: r.head,
                                weights: r.weights,
                                labels_q: target_labels(&layout),
                                labels_k,
                                lsep_q: Some(layout.lsep_row()),
                                lsep_k,
                            }
                        })
                        .collect(),
                );
            }
            Some(maps) => {
                for (map, r) in maps.iter_mut().zip(records.into_iter()) {
                    debug_assert!(map.kind == r.kind && map.layer == r.layer && map.head == r.head);
                    for (acc, w) in map.weights.values.iter_mut().zip(r.weights.values.iter()) {
                        *acc += w;
                    }
                }
            }
        }
    }
    let mut maps = sums.expect("probe set is non-empty");
    let scale = 1.0 / probe_examples.len() as f64;
    for map in &mut maps {
        map.weights.values.iter_mut().for_each(|w| *w *= scale);
    }
    Ok(maps)
}

/// Classification thresholds; the defaults operationalize the verbal
/// head taxonomy and are configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeThresholds {
    /// Aligned-argmax hit rate for self-attention translation heads.
    pub tau_translation: f64,
    /// Mean mass on the preceding window for local heads.
    pub tau_local: f64,
    /// Preceding-window width.
    pub window: usize,
    /// Mean diagonal mass for self heads.
    pub tau_self: f64,
    /// Mean salient-document mass for summarization heads.
    pub tau_salient: f64,
    /// Fraction of maximum entropy counting phase-B attention as
    /// diffuse.
    pub tau_entropy: f64,
    /// Alignment tolerance in key positions (absorbs the one-step
    /// shift between attending and predicting).
    pub align_tolerance: usize,
}

impl Default for ProbeThresholds {
    fn default() -> Self {
        ProbeThresholds {
            tau_translation: 0.5,
            tau_local: 0.5,
            window: 3,
            tau_self: 0.5,
            tau_salient: 0.5,
            tau_entropy: 0.9,
            align_tolerance: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLabel {
    Translation,
    Local,
    SelfFocus,
    Summarization,
}

/// Per-head statistics; which fields are present depends on the
/// attention kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_hit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locality_mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub self_mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub salient_mass_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub salient_mass_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_b_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadClassification {
    pub layer: usize,
    pub head: usize,
    pub kind: AttentionKind,
    /// Possibly multiple labels; heads may satisfy several criteria.
    pub labels: Vec<HeadLabel>,
    pub stats: HeadStats,
}

fn row(map: &AttentionMap, q: usize) -> &[f64] {
    let k = map.weights.shape[1];
    &map.weights.values[q * k..(q + 1) * k]
}

/// Statistics for a self-attention map given ground-truth alignment
/// pairs (query row of `y^B_k`, key row of the aligned `y^A_k`).
pub fn self_head_stats(
    map: &AttentionMap,
    alignment: &[(usize, usize)],
    window: usize,
    tolerance: usize,
) -> Result<HeadStats, ProbeError> {
    if alignment.is_empty() {
        return Err(ProbeError::Classify("no phase-B rows to align".into()));
    }
    let rows = map.weights.shape[0];
    let mut hits = 0usize;
    for &(q, a_pos) in alignment {
        let r = row(map, q);
        let argmax = r
            .iter()
            .enumerate()
            .max_by(|(_, x), (_, y)| x.partial_cmp(y).expect("weights are finite"))
            .map(|(i, _)| i)
            .expect("non-empty row");
        if argmax.abs_diff(a_pos) <= tolerance {
            hits += 1;
        }
    }
    let mut locality = 0.0;
    let mut locality_rows = 0usize;
    let mut diag = 0.0;
    for q in 0..rows {
        let r = row(map, q);
        diag += r[q];
        if q >= 1 {
            let lo = q.saturating_sub(window);
            locality += r[lo..q].iter().sum::<f64>();
            locality_rows += 1;
        }
    }
    Ok(HeadStats {
        alignment_hit_rate: Some(hits as f64 / alignment.len() as f64),
        locality_mass: Some(if locality_rows > 0 { locality / locality_rows as f64 } else { 0.0 }),
        self_mass: Some(diag / rows as f64),
        ..HeadStats::default()
    })
}

/// Self-attention taxonomy: translation / local / self; multiple
/// labels are allowed.
pub fn classify_self_head(
    map: &AttentionMap,
    alignment: &[(usize, usize)],
    th: &ProbeThresholds,
) -> Result<HeadClassification, ProbeError> {
    let stats = self_head_stats(map, alignment, th.window, th.align_tolerance)?;
    let mut labels = Vec::new();
    if stats.alignment_hit_rate.unwrap() >= th.tau_translation {
        labels.push(HeadLabel::Translation);
    }
    if stats.locality_mass.unwrap() >= th.tau_local {
        labels.push(HeadLabel::Local);
    }
    if stats.self_mass.unwrap() >= th.tau_self {
        labels.push(HeadLabel::SelfFocus);
    }
    Ok(HeadClassification {
        layer: map.layer,
        head: map.head,
        kind: map.kind,
        labels,
        stats,
    })
}

fn entropy_fraction(r: &[f64]) -> f64 {
    let k = r.len();
    if k <= 1 {
        return 1.0;
    }
    let h: f64 = r
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum();
    h / (k as f64).ln()
}

/// Statistics for an encoder-decoder map given ground-truth salient
/// document positions and the phase row split.
pub fn encdec_head_stats(
    map: &AttentionMap,
    salient: &[usize],
    layout: &ProbeLayout,
) -> Result<HeadStats, ProbeError> {
    if salient.is_empty() {
        return Err(ProbeError::Classify("empty salient position set".into()));
    }
    let mass = |rows: std::ops::Range<usize>| -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for q in rows {
            let r = row(map, q);
            total += salient.iter().map(|&p| r[p]).sum::<f64>();
            count += 1;
        }
        total / count as f64
    };
    let entropy_b = {
        let rows = layout.phase_b_rows();
        let mut total = 0.0;
        let mut count = 0usize;
        for q in rows {
            total += entropy_fraction(row(map, q));
            count += 1;
        }
        total / count as f64
    };
    Ok(HeadStats {
        salient_mass_a: Some(mass(layout.phase_a_rows())),
        salient_mass_b: Some(mass(layout.phase_b_rows())),
        entropy_b_fraction: Some(entropy_b),
        ..HeadStats::default()
    })
}

/// Encoder-decoder taxonomy: summarization heads stay on salient
/// positions in both phases; translation heads stay salient in phase A
/// and go diffuse in phase B.
pub fn classify_encdec_head(
    map: &AttentionMap,
    salient: &[usize],
    layout: &ProbeLayout,
    th: &ProbeThresholds,
) -> Result<HeadClassification, ProbeError> {
    let stats = encdec_head_stats(map, salient, layout)?;
    let mut labels = Vec::new();
    if stats.salient_mass_a.unwrap() >= th.tau_salient
        && stats.salient_mass_b.unwrap() >= th.tau_salient
    {
        labels.push(HeadLabel::Summarization);
    }
    if stats.salient_mass_a.unwrap() >= th.tau_salient
        && stats.entropy_b_fraction.unwrap() >= th.tau_entropy
    {
        labels.push(HeadLabel::Translation);
    }
    Ok(HeadClassification {
        layer: map.layer,
        head: map.head,
        kind: map.kind,
        labels,
        stats,
    })
}

/// Full probe over a model: per-example statistics averaged across the
/// probe set, thresholded once; averaged maps kept for rendering.
#[derive(Debug)]
pub struct ProbeReport {
    pub maps: Vec<AttentionMap>,
    pub heads: Vec<HeadClassification>,
    pub layout: ProbeLayout,
}

/// Classification summary written next to the heatmaps.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub heads: Vec<HeadClassification>,
    /// Per-kind label percentages (may sum past 100: labels overlap).
    pub label_percentages: BTreeMap<String, f64>,
}

pub fn probe_model(
    model: &Seq2SeqModel,
    vocab: &Vocabulary,
    probe_examples: &[Example],
    repeat: usize,
    th: &ProbeThresholds,
) -> Result<ProbeReport, ProbeError> {
    let maps = collect_attention(model, vocab, probe_examples)?;
    let layout = ProbeLayout::of(&probe_examples[0])?;
    let alignment = layout.bijection_alignment();

    // average per-example statistics, then threshold once
    let mut acc: Vec<HeadStats> = vec![HeadStats::default(); maps.len()];
    for ex in probe_examples {
        let single = collect_attention(model, vocab, std::slice::from_ref(ex))?;
        let salient = salient_positions(&ex.doc, repeat);
        for (slot, map) in single.iter().enumerate() {
            let s = match map.kind {
                AttentionKind::SelfAttn => {
                    self_head_stats(map, &alignment, th.window, th.align_tolerance)?
                }
                AttentionKind::EncDec => encdec_head_stats(map, &salient, &layout)?,
            };
            add_stats(&mut acc[slot], &s);
        }
    }
    let scale = 1.0 / probe_examples.len() as f64;
    let mut heads = Vec::with_capacity(maps.len());
    for (map, mut stats) in maps.iter().zip(acc.into_iter()) {
        scale_stats(&mut stats, scale);
        let mut labels = Vec::new();
        match map.kind {
            AttentionKind::SelfAttn => {
                if stats.alignment_hit_rate.unwrap_or(0.0) >= th.tau_translation {
                    labels.push(HeadLabel::Translation);
                }
                if stats.locality_mass.unwrap_or(0.0) >= th.tau_local {
                    labels.push(HeadLabel::Local);
                }
                if stats.self_mass.unwrap_or(0.0) >= th.tau_self {
                    labels.push(HeadLabel::SelfFocus);
                }
            }
            AttentionKind::EncDec => {
                let a = stats.salient_mass_a.unwrap_or(0.0);
                let b = stats.salient_mass_b.unwrap_or(0.0);
                let h = stats.entropy_b_fraction.unwrap_or(0.0);
                if a >= th.tau_salient && b >= th.tau_salient {
                    labels.push(HeadLabel::Summarization);
                }
                if a >= th.tau_salient && h >= th.tau_entropy {
                    labels.push(HeadLabel::Translation);
                }
            }
        }
        heads.push(HeadClassification {
            layer: map.layer,
            head: map.head,
            kind: map.kind,
            labels,
            stats,
        });
    }
    Ok(ProbeReport { maps, heads, layout })
}

fn add_stats(acc: &mut HeadStats, s: &HeadStats) {
    fn add(a: &mut Option<f64>, b: Option<f64>) {
        if let Some(v) = b {
            *a = Some(a.unwrap_or(0.0) + v);
        }
    }
    add(&mut acc.alignment_hit_rate, s.alignment_hit_rate);
    add(&mut acc.locality_mass, s.locality_mass);
    add(&mut acc.self_mass, s.self_mass);
    add(&mut acc.salient_mass_a, s.salient_mass_a);
    add(&mut acc.salient_mass_b, s.salient_mass_b);
    add(&mut acc.entropy_b_fraction, s.entropy_b_fraction);
}

fn scale_stats(s: &mut HeadStats, f: f64) {
    for v in [
        &mut s.alignment_hit_rate,
        &mut s.locality_mass,
        &mut s.self_mass,
        &mut s.salient_mass_a,
        &mut s.salient_mass_b,
        &mut s.entropy_b_fraction,
    ] {
        if let Some(x) = v {
            *x *= f;
        }
    }
}

pub fn summarize_heads(heads: &[HeadClassification]) -> ProbeSummary {
    let mut label_percentages = BTreeMap::new();
    for kind in [AttentionKind::SelfAttn, AttentionKind::EncDec] {
        let of_kind: Vec<_> = heads.iter().filter(|h| h.kind == kind).collect();
        if of_kind.is_empty() {
            continue;
        }
        let kind_name = match kind {
            AttentionKind::SelfAttn => "self",
            AttentionKind::EncDec => "encdec",
        };
        for label in [
            HeadLabel::Translation,
            HeadLabel::Local,
            HeadLabel::SelfFocus,
            HeadLabel::Summarization,
        ] {
            let n = of_kind.iter().filter(|h| h.labels.contains(&label)).count();
            if n > 0 || label_applies(kind, label) {
                let key = format!("{kind_name}.{}", label_name(label));
                label_percentages.insert(key, 100.0 * n as f64 / of_kind.len() as f64);
            }
        }
    }
    ProbeSummary {
        heads: heads.to_vec(),
        label_percentages,
    }
}

fn label_applies(kind: AttentionKind, label: HeadLabel) -> bool {
    match kind {
        AttentionKind::SelfAttn => {
            matches!(label, HeadLabel::Translation | HeadLabel::Local | HeadLabel::SelfFocus)
        }
        AttentionKind::EncDec => {
            matches!(label, HeadLabel::Translation | HeadLabel::Summarization)
        }
    }
}

fn label_name(label: HeadLabel) -> &'static str {
    match label {
        HeadLabel::Translation => "translation",
        HeadLabel::Local => "local",
        HeadLabel::SelfFocus => "self",
        HeadLabel::Summarization => "summarization",
    }
}

pub fn heatmap_file_name(map: &AttentionMap) -> String {
    let kind = match map.kind {
        AttentionKind::SelfAttn => "self",
        AttentionKind::EncDec => "encdec",
    };
    format!("l{}-h{}-{}.svg", map.layer, map.head, kind)
}

const CELL: usize = 16;
const MARGIN: usize = 42;

/// Deterministic grayscale SVG: darker cells carry more weight, axes
/// are labeled, and a gridline marks the separator position.
pub fn emit_heatmap(map: &AttentionMap, path: &Path) -> Result<(), ProbeError> {
    let svg = render_heatmap(map);
    std::fs::write(path, svg).map_err(|source| ProbeError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn render_heatmap(map: &AttentionMap) -> String {
    let (rows, cols) = (map.weights.shape[0], map.weights.shape[1]);
    let width = MARGIN + cols * CELL + 4;
    let height = MARGIN + rows * CELL + 4;
    let max_w = map
        .weights
        .values
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"monospace\" font-size=\"9\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");
    for q in 0..rows {
        for k in 0..cols {
            let w = map.weights.values[q * cols + k];
            let gray = if max_w > 0.0 {
                255 - (255.0 * w / max_w).round() as u8
            } else {
                255
            };
            let (x, y) = (MARGIN + k * CELL, MARGIN + q * CELL);
            out.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"#{gray:02x}{gray:02x}{gray:02x}\" data-q=\"{q}\" data-k=\"{k}\"/>\n",
            ));
        }
    }
    for (k, label) in map.labels_k.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
            MARGIN + k * CELL + CELL / 2,
            MARGIN - 6
        ));
    }
    for (q, label) in map.labels_q.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{label}</text>\n",
            MARGIN - 6,
            MARGIN + q * CELL + CELL / 2 + 3
        ));
    }
    if let Some(lsep) = map.lsep_q {
        let y = MARGIN + lsep * CELL;
        out.push_str(&format!(
            "<line x1=\"{MARGIN}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#cc0000\" stroke-width=\"1\"/>\n",
            MARGIN + cols * CELL
        ));
    }
    if let Some(lsep) = map.lsep_k {
        let x = MARGIN + lsep * CELL;
        out.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{MARGIN}\" x2=\"{x}\" y2=\"{}\" stroke=\"#cc0000\" stroke-width=\"1\"/>\n",
            MARGIN + rows * CELL
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Grayscale levels per cell, parsed back out of a rendered SVG (the
/// post-render scan used by tests).
pub fn scan_heatmap_cells(svg: &str) -> Vec<(usize, usize, u8)> {
    let mut cells = Vec::new();
    for line in svg.lines() {
        if !line.contains("data-q") {
            continue;
        }
        let gray = line
            .split("fill=\"#")
            .nth(1)
            .and_then(|s| u8::from_str_radix(&s[..2], 16).ok());
        let q = field(line, "data-q");
        let k = field(line, "data-k");
        if let (Some(gray), Some(q), Some(k)) = (gray, q, k) {
            cells.push((q, k, gray));
        }
    }
    cells
}

fn field(line: &str, name: &str) -> Option<usize> {
    line.split(&format!("{name}=\""))
        .nth(1)
        .and_then(|s| s.split('"').next())
        .and_then(|s| s.parse().ok())
}

pub fn write_probe_summary(summary: &ProbeSummary, path: &Path) -> Result<(), ProbeError> {
    let text = serde_json::to_string_pretty(summary).expect("summary is serializable");
    std::fs::write(path, text + "\n").map_err(|source| ProbeError::Io {
        path: path.display().to_string(),
        source,
    })
}
