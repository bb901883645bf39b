//! The sparse attention engine: prefill over the fused global+local token
//! subsets, autoregressive decoding against a compressed KV cache with
//! block eviction, flattened multi-head buffers, and an end-to-end session
//! driver.

use std::collections::VecDeque;

use rand_core::SeedableRng;
use serde::Serialize;

use crate::attention::{AttentionInputs, TokenIndexSet};
use crate::calibrate::HeadConfigTable;
use crate::error::{Result, TcaError};
use crate::selection::{select_core_context, RedundancyIndex, SelectionResult};
use crate::sparsity::SparsityConfig;
use crate::tensor::{dot, softmax_into, Tensor2D};
use crate::workload::gaussian_row;

/// Engine knobs shared by prefill and decode. The block size comes from
/// the sparsity configuration.
#[derive(Debug, Clone, Copy)]
pub struct EngineParams {
    pub window: usize,
    pub alpha: f64,
    pub index: RedundancyIndex,
}

/// Prefill result: the L x d_h attention output, the selection that
/// produced it, a cache seeded with the kept tokens, and the FLOP
/// bookkeeping.
#[derive(Debug)]
pub struct PrefillOutput {
    pub attention: Tensor2D,
    pub selection: SelectionResult,
    pub cache: KvCache,
    /// Fused-tile attention FLOPs: 4 * d_h per (query, fused token) pair,
    /// counting masked lanes the way a dense kernel would process them.
    /// The self-token fallback lane for queries outside the kept set is
    /// excluded from this tile count.
    pub attention_flops: u64,
    /// Importance scoring and redundancy-metric FLOPs: 2 L d_h + 8 L.
    pub overhead_flops: u64,
}

impl PrefillOutput {
    /// The kept set a given query row actually attended over: the fused
    /// global+local set plus the query itself.
    pub fn kept_for_query(&self, query_row: usize) -> TokenIndexSet {
        self.selection.kept().inserted(query_row)
    }
}

/// Sparse prefill (the fused-subset attention). Every query row attends
/// causally over the selected global tokens, the local window and tail,
/// and always over itself.
pub fn prefill(
    inp: &AttentionInputs,
    cfg: &SparsityConfig,
    params: &EngineParams,
) -> Result<PrefillOutput> {
    let len = inp.len();
    let dim = inp.head_dim();
    let selection = select_core_context(inp, cfg, params.window, params.alpha, params.index)?;
    let kept = selection.kept();
    let kept_slice = kept.as_slice();
    let scale = inp.scale();

    let mut out = vec![0.0; len * dim];
    let mut logits: Vec<f64> = Vec::with_capacity(kept_slice.len() + 1);
    let mut weights: Vec<f64> = Vec::with_capacity(kept_slice.len() + 1);
    let mut attention_flops = 0u64;

    for i in 0..len {
        let q_row = inp.q().row(i);
        // visible prefix of the sorted kept set, then the self token
        let cut = kept_slice.partition_point(|&j| j <= i);
        let visible = &kept_slice[..cut];
        let self_extra = visible.last() != Some(&i);
        logits.clear();
        for &j in visible {
            logits.push(dot(q_row, inp.k().row(j)) * scale);
        }
        if self_extra {
            logits.push(dot(q_row, inp.k().row(i)) * scale);
        }
        debug_assert!(!logits.is_empty(), "query {i} lost its self token");
        weights.resize(logits.len(), 0.0);
        softmax_into(&logits, &mut weights)?;

        let out_row = &mut out[i * dim..(i + 1) * dim];
        for (idx, &j) in visible.iter().enumerate() {
            let w = weights[idx];
            let v_row = inp.v().row(j);
            for (o, &v) in out_row.iter_mut().zip(v_row) {
                *o += w * v;
            }
        }
        if self_extra {
            let w = weights[visible.len()];
            let v_row = inp.v().row(i);
            for (o, &v) in out_row.iter_mut().zip(v_row) {
                *o += w * v;
            }
        }
        attention_flops += 4 * dim as u64 * kept_slice.len() as u64;
    }

    // the pure-local path never scores or ranks anything
    let overhead_flops = if selection.budgets().is_empty() {
        0
    } else {
        2 * (len * dim) as u64 + 8 * len as u64
    };
    let cache = KvCache::from_prefill(inp, &kept, cfg, params.window);
    Ok(PrefillOutput {
        attention: Tensor2D::new(len, dim, out)?,
        selection,
        cache,
        attention_flops,
        overhead_flops,
    })
}

#[derive(Debug, Clone)]
struct CacheEntry {
    position: usize,
    key: Vec<f64>,
    value: Vec<f64>,
}

/// Decoding-stage KV cache. Three disjoint regions, each sorted by
/// position:
///
/// - `retained`: tokens kept for good — the prefill selection plus the
///   survivors of each block flush;
/// - `window_extra`: tokens discarded at a flush but still inside the
///   sliding window `[pos - w + 1, pos]`, attendable until they age out;
/// - `staging`: the newest tokens of the block currently being filled.
///
/// Once `staging` reaches the block size, its tokens are scored against
/// the current query, the top `decode_budget` move to `retained`, and the
/// rest become `window_extra`.
#[derive(Debug, Clone)]
pub struct KvCache {
    head_dim: usize,
    block_size: usize,
    window: usize,
    decode_budget: usize,
    retained: Vec<CacheEntry>,
    window_extra: VecDeque<CacheEntry>,
    staging: Vec<CacheEntry>,
    next_position: usize,
    decode_flops: u64,
}

impl KvCache {
    fn from_prefill(
        inp: &AttentionInputs,
        kept: &TokenIndexSet,
        cfg: &SparsityConfig,
        window: usize,
    ) -> KvCache {
        let retained = kept
            .iter()
            .map(|j| CacheEntry {
                position: j,
                key: inp.k().row(j).to_vec(),
                value: inp.v().row(j).to_vec(),
            })
            .collect();
        KvCache {
            head_dim: inp.head_dim(),
            block_size: cfg.block_size(),
            window,
            decode_budget: cfg.decode_budget(),
            retained,
            window_extra: VecDeque::new(),
            staging: Vec::new(),
            next_position: inp.len(),
            decode_flops: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn decode_budget(&self) -> usize {
        self.decode_budget
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn staging_len(&self) -> usize {
        self.staging.len()
    }

    pub fn retained_len(&self) -> usize {
        self.retained.len()
    }

    /// Number of attendable cached tokens.
    pub fn len(&self) -> usize {
        self.retained.len() + self.window_extra.len() + self.staging.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decode_flops(&self) -> u64 {
        self.decode_flops
    }

    /// All attendable positions, ascending.
    pub fn positions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .retained
            .iter()
            .chain(self.window_extra.iter())
            .chain(self.staging.iter())
            .map(|e| e.position)
            .collect();
        out.sort_unstable();
        out
    }

    /// Positions that a query at `position` would attend over, not
    /// counting the new token itself: the cache as it will look after
    /// aging out entries that have left the window.
    pub fn attendable_for(&self, position: usize) -> Vec<usize> {
        let cutoff = (position + 1).saturating_sub(self.window);
        let mut out: Vec<usize> = self
            .retained
            .iter()
            .map(|e| e.position)
            .chain(
                self.window_extra
                    .iter()
                    .map(|e| e.position)
                    .filter(|&p| p >= cutoff),
            )
            .chain(self.staging.iter().map(|e| e.position))
            .collect();
        out.sort_unstable();
        out
    }

    fn prune(&mut self, position: usize) {
        let cutoff = (position + 1).saturating_sub(self.window);
        while self
            .window_extra
            .front()
            .is_some_and(|e| e.position < cutoff)
        {
            self.window_extra.pop_front();
        }
    }

    /// One decode step: attends the new query over the cache plus the new
    /// token, then stages the new (key, value). A completed block is
    /// scored against this query and compressed to the decode budget.
    pub fn decode_step(
        &mut self,
        q_new: &[f64],
        k_new: &[f64],
        v_new: &[f64],
        position: usize,
    ) -> Result<Vec<f64>> {
        if position != self.next_position {
            return Err(TcaError::contract(format!(
                "decode position {position} out of order, expected {}",
                self.next_position
            )));
        }
        let d = self.head_dim;
        if q_new.len() != d || k_new.len() != d || v_new.len() != d {
            return Err(TcaError::contract(format!(
                "decode vectors must have head dimension {d}"
            )));
        }
        self.prune(position);

        let scale = 1.0 / (d as f64).sqrt();
        // merge the three sorted regions by position, new token last
        let mut order: Vec<&CacheEntry> = self
            .retained
            .iter()
            .chain(self.window_extra.iter())
            .chain(self.staging.iter())
            .collect();
        order.sort_by_key(|e| e.position);

        let mut logits: Vec<f64> = order
            .iter()
            .map(|e| dot(q_new, &e.key) * scale)
            .collect();
        logits.push(dot(q_new, k_new) * scale);
        let mut weights = vec![0.0; logits.len()];
        softmax_into(&logits, &mut weights)?;
        let mut out = vec![0.0; d];
        for (e, &w) in order.iter().zip(&weights) {
            for (o, &v) in out.iter_mut().zip(&e.value) {
                *o += w * v;
            }
        }
        let w_new = weights[weights.len() - 1];
        for (o, &v) in out.iter_mut().zip(v_new) {
            *o += w_new * v;
        }
        self.decode_flops += 4 * d as u64 * logits.len() as u64;

        self.staging.push(CacheEntry {
            position,
            key: k_new.to_vec(),
            value: v_new.to_vec(),
        });
        if self.staging.len() == self.block_size {
            self.flush(q_new, scale);
            self.prune(position);
        }
        self.next_position = position + 1;
        Ok(out)
    }

    /// Compress the completed staging block: keep the `decode_budget`
    /// tokens scoring highest against the query that completed the block
    /// (ties to the lower position), demote the rest to window lifetime.
    fn flush(&mut self, q_new: &[f64], scale: f64) {
        let budget = self.decode_budget.min(self.staging.len());
        let scores: Vec<f64> = self
            .staging
            .iter()
            .map(|e| dot(q_new, &e.key) * scale)
            .collect();
        let mut idx: Vec<usize> = (0..self.staging.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut keep_flags = vec![false; self.staging.len()];
        for &i in &idx[..budget] {
            keep_flags[i] = true;
        }
        for (entry, keep) in self.staging.drain(..).zip(keep_flags) {
            if keep {
                self.retained.push(entry);
            } else {
                self.window_extra.push_back(entry);
            }
        }
        self.decode_flops += (2 * self.head_dim as u64 + 8) * self.block_size as u64;
    }
}

/// Flattened per-head retained K/V buffers with offsets, so variable
/// per-head token counts live in one contiguous allocation.
#[derive(Debug, Clone)]
pub struct HeadBufferLayout {
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    offsets: Vec<usize>,
    counts: Vec<usize>,
    positions: Vec<usize>,
}

impl HeadBufferLayout {
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total_tokens(&self) -> usize {
        self.positions.len()
    }

    /// Original positions of one head's gathered tokens, ascending.
    pub fn head_positions(&self, head: usize) -> &[usize] {
        let start = self.offsets[head];
        &self.positions[start..start + self.counts[head]]
    }

    pub fn head_keys(&self, head: usize) -> &[f64] {
        let start = self.offsets[head] * self.head_dim;
        &self.keys[start..start + self.counts[head] * self.head_dim]
    }

    pub fn head_values(&self, head: usize) -> &[f64] {
        let start = self.offsets[head] * self.head_dim;
        &self.values[start..start + self.counts[head] * self.head_dim]
    }
}

/// Gathers each head's kept tokens into one contiguous K buffer and one
/// contiguous V buffer, with per-head offsets and counts. Gather order is
/// ascending original position within each head.
pub fn build_head_buffers(
    heads: &[(&SelectionResult, &Tensor2D, &Tensor2D)],
) -> Result<HeadBufferLayout> {
    if heads.is_empty() {
        return Err(TcaError::invalid("heads", "no heads to gather"));
    }
    let head_dim = heads[0].1.cols();
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut offsets = Vec::with_capacity(heads.len());
    let mut counts = Vec::with_capacity(heads.len());
    let mut positions = Vec::new();
    for (selection, k, v) in heads {
        if k.cols() != head_dim || v.cols() != head_dim || k.rows() != v.rows() {
            return Err(TcaError::ShapeMismatch {
                op: "build_head_buffers",
                left_rows: k.rows(),
                left_cols: k.cols(),
                right_rows: v.rows(),
                right_cols: v.cols(),
            });
        }
        let kept = selection.kept();
        offsets.push(positions.len());
        counts.push(kept.len());
        for j in kept.iter() {
            keys.extend_from_slice(k.row(j));
            values.extend_from_slice(v.row(j));
            positions.push(j);
        }
    }
    Ok(HeadBufferLayout {
        head_dim,
        keys,
        values,
        offsets,
        counts,
        positions,
    })
}

/// One head's inputs for a session.
#[derive(Debug, Clone)]
pub struct HeadSpec {
    pub layer: usize,
    pub head: usize,
    pub inputs: AttentionInputs,
}

/// One line of the session trace: the cache state after a step, plus the
/// oracle comparison when enabled. Step 0 is the prefill; its gamma and
/// L1 error are the worst over all prefill queries.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub cache_size: usize,
    pub retained_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1_error: Option<f64>,
}

/// Per-head totals for the run report.
#[derive(Debug, Clone, Serialize)]
pub struct HeadRunSummary {
    pub layer: usize,
    pub head: usize,
    pub prefill_kept: usize,
    pub retained_fraction: f64,
    pub attention_flops: u64,
    pub overhead_flops: u64,
    pub decode_flops: u64,
    pub final_cache_size: usize,
}

/// Everything a session produces. The decode outputs are kept in memory
/// for callers that want them; only the records are serialized.
#[derive(Debug)]
pub struct SessionOutcome {
    pub records: Vec<StepRecord>,
    pub heads: Vec<HeadRunSummary>,
    /// outputs[h][g] is head h's output vector at decode step g+1
    pub outputs: Vec<Vec<Vec<f64>>>,
}

impl SessionOutcome {
    /// Line-delimited records, one JSON object per line.
    pub fn trace_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| TcaError::MalformedTable {
                path: "<trace>".into(),
                message: e.to_string(),
            })?;
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }
}

fn derive_stream_seed(seed: u64, layer: usize, head: usize) -> u64 {
    // splitmix64 over a layer/head tag so per-head streams are independent
    let mut z = seed
        ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (head as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct HeadRun {
    records: Vec<StepRecord>,
    summary: HeadRunSummary,
    outputs: Vec<Vec<f64>>,
}

/// Runs prefill plus `steps` decode steps for every head, generating the
/// decode-time Q/K/V from a seeded per-head stream. Heads are independent
/// and run on up to `jobs` workers; results are reduced in input order, so
/// the outcome never depends on completion order. Records come out sorted
/// by (step, layer, head).
pub fn run_session(
    heads: &[HeadSpec],
    table: &HeadConfigTable,
    steps: usize,
    seed: crate::tensor::Seed,
    with_oracle: bool,
    jobs: usize,
) -> Result<SessionOutcome> {
    if heads.is_empty() {
        return Err(TcaError::invalid("heads", "no heads to run"));
    }
    let run = |spec: &HeadSpec| run_head(spec, table, steps, seed, with_oracle);
    let head_runs = if jobs > 1 {
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

    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let mut all_outputs = Vec::new();
    for hr in head_runs {
        records.extend(hr.records);
        summaries.push(hr.summary);
        all_outputs.push(hr.outputs);
    }
    records.sort_by_key(|r| (r.step, r.layer, r.head));
    Ok(SessionOutcome {
        records,
        heads: summaries,
        outputs: all_outputs,
    })
}

fn run_head(
    spec: &HeadSpec,
    table: &HeadConfigTable,
    steps: usize,
    seed: crate::tensor::Seed,
    with_oracle: bool,
) -> Result<HeadRun> {
    let meta = table.metadata();
    let params = EngineParams {
        window: meta.window,
        alpha: meta.alpha,
        index: meta.index,
    };
    let mut records = Vec::new();
    {
        let entry = table.lookup(spec.layer, spec.head)?;
        let inp = &spec.inputs;
        let len = inp.len();
        let dim = inp.head_dim();
        let pf = prefill(inp, &entry.chosen, &params)?;
        let kept = pf.selection.kept();

        let (mut prefill_gamma, mut prefill_l1) = (None, None);
        if with_oracle {
            let scores = crate::attention::full_attention_scores(inp, true)?;
            let full = crate::tensor::matmul(&scores, inp.v())?;
            let mut worst_gamma = 0.0f64;
            let mut worst_l1 = 0.0f64;
            for i in 0..len {
                let kept_i = kept.inserted(i);
                let gamma = crate::attention::gamma_mass(&scores, &kept_i, i)?;
                let l1 = crate::tensor::l1_distance(full.row(i), pf.attention.row(i));
                worst_gamma = worst_gamma.max(gamma);
                worst_l1 = worst_l1.max(l1);
            }
            prefill_gamma = Some(worst_gamma);
            prefill_l1 = Some(worst_l1);
        }

        let mut cache = pf.cache;
        records.push(StepRecord {
            step: 0,
            layer: spec.layer,
            head: spec.head,
            position: len - 1,
            cache_size: cache.len(),
            retained_fraction: cache.len() as f64 / len as f64,
            gamma: prefill_gamma,
            l1_error: prefill_l1,
        });

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_stream_seed(
            seed.0, spec.layer, spec.head,
        ));

        // full history for the oracle path
        let mut hist_k: Vec<Vec<f64>> = Vec::new();
        let mut hist_v: Vec<Vec<f64>> = Vec::new();
        if with_oracle {
            for j in 0..len {
                hist_k.push(inp.k().row(j).to_vec());
                hist_v.push(inp.v().row(j).to_vec());
            }
        }

        let mut outputs = Vec::with_capacity(steps);
        for g in 1..=steps {
            let position = len - 1 + g;
            let q = gaussian_row(&mut rng, dim);
            let k = gaussian_row(&mut rng, dim);
            let v = gaussian_row(&mut rng, dim);
            let attendable = if with_oracle {
                Some(cache.attendable_for(position))
            } else {
                None
            };
            let out = cache.decode_step(&q, &k, &v, position)?;

            let (mut gamma, mut l1) = (None, None);
            if let Some(attendable) = attendable {
                hist_k.push(k.clone());
                hist_v.push(v.clone());
                let scale = 1.0 / (dim as f64).sqrt();
                let logits: Vec<f64> =
                    hist_k.iter().map(|kj| dot(&q, kj) * scale).collect();
                let mut probs = vec![0.0; logits.len()];
                softmax_into(&logits, &mut probs)?;
                let mut kept_mass = probs[position]; // the new token itself
                for &p in &attendable {
                    kept_mass += probs[p];
                }
                let mut full_out = vec![0.0; dim];
                for (vj, &w) in hist_v.iter().zip(&probs) {
                    for (o, &x) in full_out.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
                gamma = Some(1.0 - kept_mass);
                l1 = Some(crate::tensor::l1_distance(&full_out, &out));
            }

            records.push(StepRecord {
                step: g,
                layer: spec.layer,
                head: spec.head,
                position,
                cache_size: cache.len(),
                retained_fraction: cache.len() as f64 / (len + g) as f64,
                gamma,
                l1_error: l1,
            });
            outputs.push(out);
        }

        let summary = HeadRunSummary {
            layer: spec.layer,
            head: spec.head,
            prefill_kept: kept.len(),
            retained_fraction: kept.len() as f64 / len as f64,
            attention_flops: pf.attention_flops,
            overhead_flops: pf.overhead_flops,
            decode_flops: cache.decode_flops(),
            final_cache_size: cache.len(),
        };
        Ok(HeadRun {
            records,
            summary,
            outputs,
        })
    }
}
