//! Offline head-specific sparsity determination: score every candidate
//! configuration by the attention mass its simulated selection retains,
//! keep the candidates above the threshold, and choose the sparsest.
//!
//! The result is a per-(layer, head) configuration table that is written
//! once per model and reused for every run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionInputs, TokenIndexSet};
use crate::error::{Result, TcaError};
use crate::selection::{
    select_with_scores, token_importance, BlockPartition, RedundancyIndex,
};
use crate::sparsity::{CandidateSet, SparsityConfig};
use crate::tensor::{dot, softmax_into, Tensor2D};

/// How many query rows to process per pass when accumulating column sums;
/// caps the score-matrix working set at O(QUERY_CHUNK * L).
const QUERY_CHUNK: usize = 1024;

/// One calibration input for one head.
#[derive(Debug, Clone)]
pub struct CalibrationSample {
    pub inputs: AttentionInputs,
    pub label: String,
}

impl CalibrationSample {
    pub fn new(inputs: AttentionInputs, label: impl Into<String>) -> Self {
        CalibrationSample {
            inputs,
            label: label.into(),
        }
    }
}

/// Knobs shared by every head during calibration.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationParams {
    pub block: usize,
    pub window: usize,
    pub tau: f64,
    pub alpha: f64,
    pub index: RedundancyIndex,
}

impl CalibrationParams {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(TcaError::invalid(
                "tau",
                format!("must lie in [0, 1], got {}", self.tau),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TcaError::invalid(
                "alpha",
                format!("must lie in [0, 1], got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

/// Per-candidate outcome recorded during calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    /// 1-based index into the candidate sweep.
    pub candidate_index: usize,
    /// Aggregated attention mass retained by the candidate's selection
    /// (minimum over samples when several are given).
    pub aggregated_score: f64,
    /// Tokens the candidate keeps (maximum over samples).
    pub kept_count: usize,
    pub valid: bool,
}

/// Full record of one head's calibration.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub records: Vec<CandidateRecord>,
    pub chosen_index: usize,
    /// Set when no candidate reached the threshold and the densest one was
    /// used instead.
    pub fallback: bool,
}

/// Aggregated attention score of a kept set over a causal row-stochastic
/// score matrix: the sum over kept columns of the column's mean attention,
/// where the mean divides by the column's causal support `L - k`.
pub fn aggregated_score(scores: &Tensor2D, kept: &TokenIndexSet) -> Result<f64> {
    let len = scores.rows();
    if scores.cols() != len {
        return Err(TcaError::ShapeMismatch {
            op: "aggregated_score",
            left_rows: len,
            left_cols: scores.cols(),
            right_rows: len,
            right_cols: len,
        });
    }
    let mut colsum = vec![0.0; len];
    for i in 0..len {
        for (j, &p) in scores.row(i).iter().enumerate() {
            colsum[j] += p;
        }
    }
    Ok(kept
        .iter()
        .map(|k| colsum[k] / (len - k) as f64)
        .sum())
}

/// Column sums of the causal score matrix, computed in row chunks so the
/// full L x L matrix is never materialized.
pub fn causal_column_sums(inp: &AttentionInputs) -> Result<Vec<f64>> {
    let len = inp.len();
    let scale = inp.scale();
    let mut colsum = vec![0.0; len];
    let mut logits = vec![0.0; len];
    let mut probs = vec![0.0; len];
    for start in (0..len).step_by(QUERY_CHUNK) {
        let end = (start + QUERY_CHUNK).min(len);
        for i in start..end {
            let q_row = inp.q().row(i);
            let visible = i + 1;
            for (j, l) in logits[..visible].iter_mut().enumerate() {
                *l = dot(q_row, inp.k().row(j)) * scale;
            }
            softmax_into(&logits[..visible], &mut probs[..visible])?;
            for (c, &p) in colsum[..visible].iter_mut().zip(&probs[..visible]) {
                *c += p;
            }
        }
    }
    Ok(colsum)
}

fn score_from_colsums(colsum: &[f64], kept: &TokenIndexSet) -> f64 {
    let len = colsum.len();
    kept.iter().map(|k| colsum[k] / (len - k) as f64).sum()
}

/// Calibrates one head from one sample.
pub fn calibrate_head(
    sample: &CalibrationSample,
    candidates: &CandidateSet,
    params: &CalibrationParams,
) -> Result<(SparsityConfig, CalibrationReport)> {
    calibrate_head_multi(std::slice::from_ref(sample), candidates, params)
}

/// Calibrates one head from several samples. A candidate is valid only if
/// it clears the threshold on every sample; the recorded score is the
/// worst over samples and the kept count the largest.
pub fn calibrate_head_multi(
    samples: &[CalibrationSample],
    candidates: &CandidateSet,
    params: &CalibrationParams,
) -> Result<(SparsityConfig, CalibrationReport)> {
    params.validate()?;
    if samples.is_empty() {
        return Err(TcaError::invalid("samples", "need at least one sample"));
    }
    if candidates.is_empty() {
        return Err(TcaError::invalid("candidates", "candidate set is empty"));
    }
    for sample in samples {
        let len = sample.inputs.len();
        if len < 2 * params.block {
            return Err(TcaError::invalid(
                "samples",
                format!(
                    "sample `{}` has length {len}, need at least 2 blocks ({})",
                    sample.label,
                    2 * params.block
                ),
            ));
        }
        if BlockPartition::new(len, params.block, params.window)?.num_blocks() < 2 {
            log::warn!(
                "sample `{}`: fewer than two full blocks outside the window; selection is near-trivial",
                sample.label
            );
        }
    }

    let mut records: Vec<CandidateRecord> = (1..=candidates.len())
        .map(|candidate_index| CandidateRecord {
            candidate_index,
            aggregated_score: f64::INFINITY,
            kept_count: 0,
            valid: true,
        })
        .collect();

    for sample in samples {
        let inp = &sample.inputs;
        let colsum = causal_column_sums(inp)?;
        let part = BlockPartition::new(inp.len(), params.block, params.window)?;
        let scores = token_importance(inp)?;
        for (slot, cfg) in records.iter_mut().zip(candidates.iter()) {
            let kept = if part.num_blocks() == 0 {
                TokenIndexSet::from_range(0..inp.len())
            } else {
                select_with_scores(&scores, &part, cfg, params.alpha, params.index)?.kept()
            };
            let a = score_from_colsums(&colsum, &kept);
            slot.aggregated_score = slot.aggregated_score.min(a);
            slot.kept_count = slot.kept_count.max(kept.len());
            slot.valid = slot.valid && a >= params.tau;
        }
    }

    let chosen = records
        .iter()
        .filter(|r| r.valid)
        .min_by(|a, b| {
            a.kept_count
                .cmp(&b.kept_count)
                .then(a.candidate_index.cmp(&b.candidate_index))
        })
        .cloned();
    let (chosen, fallback) = match chosen {
        Some(r) => (r, false),
        // never fail silently: fall back to the densest candidate
        None => (records.last().expect("nonempty").clone(), true),
    };
    if fallback {
        log::warn!(
            "no candidate reached tau = {}; falling back to the densest (index {})",
            params.tau,
            chosen.candidate_index
        );
    }
    let config = candidates
        .get(chosen.candidate_index)
        .expect("chosen index is in range")
        .clone();
    let chosen_index = chosen.candidate_index;
    Ok((
        config,
        CalibrationReport {
            records,
            chosen_index,
            fallback,
        },
    ))
}

/// Calibration inputs for one head position in the model.
#[derive(Debug, Clone)]
pub struct HeadSamples {
    pub layer: usize,
    pub head: usize,
    pub samples: Vec<CalibrationSample>,
}

/// Chosen configuration for one head plus the evidence behind it.
#[derive(Debug, Clone)]
pub struct HeadEntry {
    pub layer: usize,
    pub head: usize,
    pub chosen: SparsityConfig,
    pub aggregated_score: f64,
    pub kept_count: usize,
    pub candidate_index: usize,
    pub fallback: bool,
}

/// Run-wide calibration settings, echoed into the table file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableMetadata {
    pub block: usize,
    pub window: usize,
    pub tau: f64,
    pub sigma: f64,
    pub candidates: usize,
    pub alpha: f64,
    pub index: RedundancyIndex,
    pub seed: u64,
    pub created_at: String,
}

/// Per-head configuration table, the artifact of offline calibration.
#[derive(Debug, Clone)]
pub struct HeadConfigTable {
    metadata: TableMetadata,
    entries: Vec<HeadEntry>, // sorted by (layer, head)
}

pub const TABLE_FORMAT_VERSION: u32 = 1;

impl HeadConfigTable {
    pub fn new(metadata: TableMetadata, mut entries: Vec<HeadEntry>) -> Result<Self> {
        entries.sort_by_key(|e| (e.layer, e.head));
        if entries.windows(2).any(|w| {
            w[0].layer == w[1].layer && w[0].head == w[1].head
        }) {
            return Err(TcaError::invalid("entries", "duplicate (layer, head) entry"));
        }
        Ok(HeadConfigTable { metadata, entries })
    }

    pub fn metadata(&self) -> &TableMetadata {
        &self.metadata
    }

    pub fn entries(&self) -> &[HeadEntry] {
        &self.entries
    }

    pub fn lookup(&self, layer: usize, head: usize) -> Result<&HeadEntry> {
        self.entries
            .binary_search_by_key(&(layer, head), |e| (e.layer, e.head))
            .map(|i| &self.entries[i])
            .map_err(|_| TcaError::MissingHeadEntry { layer, head })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let doc = TableDoc::from(self);
        toml::to_string_pretty(&doc).map_err(|e| TcaError::MalformedTable {
            path: "<memory>".into(),
            message: e.to_string(),
        })
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let doc: TableDoc = toml::from_str(text).map_err(|e| TcaError::MalformedTable {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        if doc.format_version != TABLE_FORMAT_VERSION {
            return Err(TcaError::UnsupportedVersion {
                path: origin.to_path_buf(),
                found: doc.format_version,
                expected: TABLE_FORMAT_VERSION,
            });
        }
        let entries = doc
            .head
            .into_iter()
            .map(|h| {
                // non-fallback entries must actually clear the threshold
                if !h.fallback && h.aggregated_score < doc.metadata.tau {
                    return Err(TcaError::MalformedTable {
                        path: origin.to_path_buf(),
                        message: format!(
                            "layer {} head {}: score {} below tau {} without a fallback flag",
                            h.layer, h.head, h.aggregated_score, doc.metadata.tau
                        ),
                    });
                }
                let chosen = SparsityConfig::from_parts(
                    h.config.block_size,
                    h.config.mu,
                    h.config.sigma,
                    h.config.probabilities,
                )?;
                Ok(HeadEntry {
                    layer: h.layer,
                    head: h.head,
                    chosen,
                    aggregated_score: h.aggregated_score,
                    kept_count: h.kept_count,
                    candidate_index: h.candidate_index,
                    fallback: h.fallback,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        HeadConfigTable::new(doc.metadata, entries)
    }

    /// Writes the table atomically: a temp file in the target directory,
    /// then a rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_toml_string()?;
        crate::workload::write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TcaError::io(path, e))?;
        HeadConfigTable::from_toml_str(&text, path)
    }
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    format_version: u32,
    metadata: TableMetadata,
    #[serde(default)]
    head: Vec<HeadDoc>,
}

#[derive(Serialize, Deserialize)]
struct HeadDoc {
    layer: usize,
    head: usize,
    candidate_index: usize,
    aggregated_score: f64,
    kept_count: usize,
    fallback: bool,
    config: ConfigDoc,
}

#[derive(Serialize, Deserialize)]
struct ConfigDoc {
    block_size: usize,
    mu: f64,
    sigma: f64,
    retain_counts: Vec<usize>,
    probabilities: Vec<f64>,
}

impl From<&HeadConfigTable> for TableDoc {
    fn from(table: &HeadConfigTable) -> Self {
        TableDoc {
            format_version: TABLE_FORMAT_VERSION,
            metadata: table.metadata.clone(),
            head: table
                .entries
                .iter()
                .map(|e| HeadDoc {
                    layer: e.layer,
                    head: e.head,
                    candidate_index: e.candidate_index,
                    aggregated_score: e.aggregated_score,
                    kept_count: e.kept_count,
                    fallback: e.fallback,
                    config: ConfigDoc {
                        block_size: e.chosen.block_size(),
                        mu: e.chosen.mu(),
                        sigma: e.chosen.sigma(),
                        retain_counts: e.chosen.retain_counts().to_vec(),
                        probabilities: e.chosen.probabilities().to_vec(),
                    },
                })
                .collect(),
        }
    }
}

/// Timestamp for table metadata. Honors `SOURCE_DATE_EPOCH` so repeated
/// calibrations of the same inputs can produce byte-identical tables.
pub fn table_timestamp() -> String {
    let epoch = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse::<i64>().ok());
    let when = match epoch {
        Some(secs) => chrono::DateTime::from_timestamp(secs, 0).unwrap_or_else(chrono::Utc::now),
        None => chrono::Utc::now(),
    };
    when.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Calibrates every head and assembles the table. Heads are independent;
/// with `jobs > 1` they run on a local thread pool and the results are
/// reduced in input order, so the table does not depend on completion
/// order.
pub fn calibrate_model(
    heads: &[HeadSamples],
    candidates: &CandidateSet,
    params: &CalibrationParams,
    metadata: TableMetadata,
    jobs: usize,
) -> Result<HeadConfigTable> {
    if heads.is_empty() {
        return Err(TcaError::invalid("heads", "no heads to calibrate"));
    }
    let run = |hs: &HeadSamples| -> Result<HeadEntry> {
        let (chosen, report) = calibrate_head_multi(&hs.samples, candidates, params)?;
        let record = &report.records[report.chosen_index - 1];
        Ok(HeadEntry {
            layer: hs.layer,
            head: hs.head,
            chosen,
            aggregated_score: record.aggregated_score,
            kept_count: record.kept_count,
            candidate_index: report.chosen_index,
            fallback: report.fallback,
        })
    };
    let entries = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| TcaError::invalid("jobs", e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            heads.par_iter().map(run).collect::<Result<Vec<_>>>()
        })?
    } else {
        heads.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    HeadConfigTable::new(metadata, entries)
}
