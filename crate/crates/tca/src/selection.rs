//! Online core-context selection: last-query importance scores, block
//! redundancy (HHI or entropy flavored), rank-to-budget assignment through
//! the ladder built from a sparsity configuration, and per-block top-k
//! token selection.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionInputs, TokenIndexSet};
use crate::error::{Result, TcaError};
use crate::sparsity::SparsityConfig;
use crate::tensor::{dot, softmax_into};

/// Partition of `[0, len)` into full blocks, an undivided tail, and the
/// local window of the most recent `window` tokens. Blocks cover
/// `[0, num_blocks * block)`; everything from there on is kept
/// unconditionally, so the global and local subsets cannot overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    len: usize,
    block: usize,
    window: usize,
    num_blocks: usize,
}

impl BlockPartition {
    pub fn new(len: usize, block: usize, window: usize) -> Result<Self> {
        if len == 0 {
            return Err(TcaError::invalid("len", "sequence length must be positive"));
        }
        if block == 0 {
            return Err(TcaError::invalid("block", "block size must be positive"));
        }
        if window == 0 {
            return Err(TcaError::invalid("window", "window size must be positive"));
        }
        let num_blocks = if len > window { (len - window) / block } else { 0 };
        Ok(BlockPartition {
            len,
            block,
            window,
            num_blocks,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_span(&self, j: usize) -> std::ops::Range<usize> {
        debug_assert!(j < self.num_blocks);
        j * self.block..(j + 1) * self.block
    }

    /// Tokens after the last full block and before the local window.
    pub fn tail_span(&self) -> std::ops::Range<usize> {
        self.num_blocks * self.block..self.local_span().start
    }

    /// The most recent `window` tokens (the whole sequence when it is
    /// shorter than the window).
    pub fn local_span(&self) -> std::ops::Range<usize> {
        self.len.saturating_sub(self.window)..self.len
    }
}

/// Token-level importance from the last query: softmax(Q_last K^T / sqrt(d)).
/// The last token sees the whole sequence under causality, so no mask is
/// needed.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    scores: Vec<f64>,
}

impl ImportanceScores {
    pub fn from_raw(scores: Vec<f64>) -> Result<Self> {
        let total: f64 = scores.iter().sum();
        if scores.iter().any(|&s| s < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(TcaError::contract(format!(
                "importance scores must be a probability vector, sum = {total}"
            )));
        }
        Ok(ImportanceScores { scores })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn token_importance(inp: &AttentionInputs) -> Result<ImportanceScores> {
    let len = inp.len();
    let q_last = inp.q().row(len - 1);
    let scale = inp.scale();
    let logits: Vec<f64> = (0..len)
        .map(|j| dot(q_last, inp.k().row(j)) * scale)
        .collect();
    let mut scores = vec![0.0; len];
    softmax_into(&logits, &mut scores)?;
    Ok(ImportanceScores { scores })
}

/// Concentration index used in the redundancy metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RedundancyIndex {
    /// 1 - sum(s_i^2) / (sum s_i)^2, a dispersion variant of the
    /// Herfindahl-Hirschman index.
    Hhi,
    /// Entropy of the within-block distribution, normalized by log(b) so it
    /// shares the [0, 1] range with the HHI term.
    Entropy,
}

impl std::str::FromStr for RedundancyIndex {
    type Err = TcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hhi" => Ok(RedundancyIndex::Hhi),
            "entropy" => Ok(RedundancyIndex::Entropy),
            other => Err(TcaError::invalid(
                "index",
                format!("unknown redundancy index `{other}`, expected hhi or entropy"),
            )),
        }
    }
}

impl std::fmt::Display for RedundancyIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RedundancyIndex::Hhi => f.write_str("hhi"),
            RedundancyIndex::Entropy => f.write_str("entropy"),
        }
    }
}

/// Per-block redundancy score:
/// `h_j = (1 - alpha) * mass_j + alpha * concentration_j`, where `mass_j`
/// is the block's total importance and the concentration term is in
/// [0, 1]. Zero-mass blocks get concentration 0 so they rank lowest.
pub fn block_redundancy(
    scores: &ImportanceScores,
    part: &BlockPartition,
    alpha: f64,
    index: RedundancyIndex,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TcaError::invalid(
            "alpha",
            format!("must lie in [0, 1], got {alpha}"),
        ));
    }
    if scores.len() != part.len() {
        return Err(TcaError::contract(format!(
            "importance length {} does not match partition length {}",
            scores.len(),
            part.len()
        )));
    }
    let s = scores.as_slice();
    let b = part.block_size() as f64;
    let mut h = Vec::with_capacity(part.num_blocks());
    for j in 0..part.num_blocks() {
        let blk = &s[part.block_span(j)];
        let total: f64 = blk.iter().sum();
        let spread = match index {
            RedundancyIndex::Hhi => {
                let sumsq: f64 = blk.iter().map(|x| x * x).sum();
                if total > 0.0 && total * total > 0.0 {
                    // clamp to the analytic range [0, 1 - 1/b] to absorb rounding
                    (1.0 - sumsq / (total * total)).clamp(0.0, 1.0 - 1.0 / b)
                } else {
                    0.0
                }
            }
            RedundancyIndex::Entropy => {
                if total > 0.0 {
                    let mut ent = 0.0;
                    for &x in blk {
                        if x > 0.0 {
                            let q = x / total;
                            ent -= q * q.ln();
                        }
                    }
                    (ent / b.ln()).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            }
        };
        h.push((1.0 - alpha) * total + alpha * spread);
    }
    Ok(h)
}

/// Ranks blocks by redundancy score: higher `h` receives a higher rank,
/// and among equal scores the lower block index takes the higher rank.
/// Returns a permutation of `0..h.len()`.
pub fn rank_blocks(h: &[f64]) -> Vec<usize> {
    let m = h.len();
    let mut order: Vec<usize> = (0..m).collect();
    // ascending score; ties put the higher index first (lower rank)
    order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(b.cmp(&a)));
    let mut ranks = vec![0; m];
    for (pos, &j) in order.iter().enumerate() {
        ranks[j] = pos;
    }
    ranks
}

/// Per-block budgets assigned by rank through the sorted ladder built from
/// a configuration: `floor(m * p_k)` copies of each retain count `k` in
/// ascending order, padded with the block size when the floors fall short
/// of `m` slots. Higher rank indexes later in the ladder, hence a larger
/// budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetAssignment {
    budgets: Vec<usize>,
    ladder: Vec<usize>,
}

impl BudgetAssignment {
    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn ladder(&self) -> &[usize] {
        &self.ladder
    }

    pub fn total(&self) -> usize {
        self.budgets.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.budgets.is_empty()
    }
}

pub fn budget_assignment(
    ranks: &[usize],
    cfg: &SparsityConfig,
    num_blocks: usize,
) -> Result<BudgetAssignment> {
    if ranks.len() != num_blocks {
        return Err(TcaError::contract(format!(
            "rank vector length {} does not match block count {num_blocks}",
            ranks.len()
        )));
    }
    let mut seen = vec![false; num_blocks];
    for &r in ranks {
        if r >= num_blocks || seen[r] {
            return Err(TcaError::contract("ranks must form a permutation".to_string()));
        }
        seen[r] = true;
    }
    let mut ladder = Vec::with_capacity(num_blocks);
    for (&k, &p) in cfg.retain_counts().iter().zip(cfg.probabilities()) {
        let copies = (num_blocks as f64 * p).floor() as usize;
        ladder.extend(std::iter::repeat_n(k, copies));
    }
    ladder.truncate(num_blocks);
    while ladder.len() < num_blocks {
        ladder.push(cfg.block_size());
    }
    let budgets = ranks.iter().map(|&r| ladder[r]).collect();
    Ok(BudgetAssignment { budgets, ladder })
}

/// Outcome of online selection: the global token set chosen from the full
/// blocks, the unconditionally kept local set (window plus undivided
/// tail), the budget assignment, and the block redundancy scores.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    global: TokenIndexSet,
    local: TokenIndexSet,
    budgets: BudgetAssignment,
    redundancy: Vec<f64>,
}

impl SelectionResult {
    pub fn global(&self) -> &TokenIndexSet {
        &self.global
    }

    pub fn local(&self) -> &TokenIndexSet {
        &self.local
    }

    pub fn budgets(&self) -> &BudgetAssignment {
        &self.budgets
    }

    pub fn redundancy(&self) -> &[f64] {
        &self.redundancy
    }

    /// Global and local sets merged; the full kept set for attention.
    pub fn kept(&self) -> TokenIndexSet {
        self.global.union(&self.local)
    }

    pub fn kept_count(&self) -> usize {
        self.global.len() + self.local.len()
    }
}

/// Top-`t_j` tokens per full block by importance score, ties resolved
/// toward the lower index. Returns the global set; the local set is the
/// partition's tail plus window.
pub fn select_tokens(
    scores: &ImportanceScores,
    part: &BlockPartition,
    budgets: &BudgetAssignment,
) -> Result<SelectionResult> {
    if budgets.budgets().len() != part.num_blocks() {
        return Err(TcaError::contract(format!(
            "budget count {} does not match block count {}",
            budgets.budgets().len(),
            part.num_blocks()
        )));
    }
    let s = scores.as_slice();
    let mut global = Vec::new();
    let mut scratch: Vec<usize> = Vec::with_capacity(part.block_size());
    for j in 0..part.num_blocks() {
        let span = part.block_span(j);
        scratch.clear();
        scratch.extend(span);
        scratch.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let take = budgets.budgets()[j].min(part.block_size());
        let mut chosen: Vec<usize> = scratch[..take].to_vec();
        chosen.sort_unstable();
        global.extend(chosen);
    }
    let local_start = part.tail_span().start;
    Ok(SelectionResult {
        global: TokenIndexSet::new(global, part.len())?,
        local: TokenIndexSet::from_range(local_start..part.len()),
        budgets: budgets.clone(),
        redundancy: Vec::new(),
    })
}

/// The full online pipeline for one head: importance, redundancy, ranking,
/// budgets, selection. Sequences no longer than the window degenerate to
/// an all-local selection with no global tokens.
pub fn select_core_context(
    inp: &AttentionInputs,
    cfg: &SparsityConfig,
    window: usize,
    alpha: f64,
    index: RedundancyIndex,
) -> Result<SelectionResult> {
    let part = BlockPartition::new(inp.len(), cfg.block_size(), window)?;
    if part.num_blocks() == 0 {
        return Ok(SelectionResult {
            global: TokenIndexSet::empty(),
            local: TokenIndexSet::from_range(0..inp.len()),
            budgets: BudgetAssignment {
                budgets: Vec::new(),
                ladder: Vec::new(),
            },
            redundancy: Vec::new(),
        });
    }
    let scores = token_importance(inp)?;
    select_with_scores(&scores, &part, cfg, alpha, index)
}

/// Selection pipeline over precomputed importance scores; lets callers
/// evaluating many configurations reuse the scores.
pub fn select_with_scores(
    scores: &ImportanceScores,
    part: &BlockPartition,
    cfg: &SparsityConfig,
    alpha: f64,
    index: RedundancyIndex,
) -> Result<SelectionResult> {
    if cfg.block_size() != part.block_size() {
        return Err(TcaError::contract(format!(
            "configuration block size {} does not match partition block size {}",
            cfg.block_size(),
            part.block_size()
        )));
    }
    let h = block_redundancy(scores, part, alpha, index)?;
    let ranks = rank_blocks(&h);
    let budgets = budget_assignment(&ranks, cfg, part.num_blocks())?;
    let mut sel = select_tokens(scores, part, &budgets)?;
    sel.redundancy = h;
    Ok(sel)
}
