//! Exact reference attention and the quantities the error analysis needs:
//! the full probability matrix, restricted (masked) attention over a kept
//! token set, and the dropped probability mass per query.
//!
//! These are the oracles the sparse engine is checked against, so they
//! stay deliberately simple: O(L^2) materialization is fine at desk scale.

use crate::error::{Result, TcaError};
use crate::tensor::{dot, matmul, softmax_into, softmax_rows, Tensor2D};

/// One attention head's dense inputs: Q, K, V all of shape L x d_h.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
}

impl AttentionInputs {
    pub fn new(q: Tensor2D, k: Tensor2D, v: Tensor2D) -> Result<Self> {
        let same = q.rows() == k.rows()
            && k.rows() == v.rows()
            && q.cols() == k.cols()
            && k.cols() == v.cols();
        if !same {
            return Err(TcaError::ShapeMismatch {
                op: "AttentionInputs::new",
                left_rows: q.rows(),
                left_cols: q.cols(),
                right_rows: k.rows(),
                right_cols: k.cols(),
            });
        }
        Ok(AttentionInputs { q, k, v })
    }

    /// Sequence length L.
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects zero-sized tensors
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    /// 1 / sqrt(d_h), the logit scale.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn q(&self) -> &Tensor2D {
        &self.q
    }

    pub fn k(&self) -> &Tensor2D {
        &self.k
    }

    pub fn v(&self) -> &Tensor2D {
        &self.v
    }
}

/// Sorted set of unique token indices in `[0, len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIndexSet {
    indices: Vec<usize>,
}

impl TokenIndexSet {
    /// Builds a set from arbitrary indices, sorting and rejecting
    /// duplicates or out-of-bounds entries.
    pub fn new(mut indices: Vec<usize>, len: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(TcaError::invalid("indices", "duplicate token index"));
        }
        if indices.last().is_some_and(|&last| last >= len) {
            return Err(TcaError::invalid(
                "indices",
                format!("index out of range for sequence length {len}"),
            ));
        }
        Ok(TokenIndexSet { indices })
    }

    pub fn from_range(range: std::ops::Range<usize>) -> Self {
        TokenIndexSet {
            indices: range.collect(),
        }
    }

    pub fn empty() -> Self {
        TokenIndexSet { indices: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    /// Union of two sets (both stay sorted and unique).
    pub fn union(&self, other: &TokenIndexSet) -> TokenIndexSet {
        let mut merged = Vec::with_capacity(self.len() + other.len());
        let (mut a, mut b) = (0, 0);
        while a < self.indices.len() || b < other.indices.len() {
            match (self.indices.get(a), other.indices.get(b)) {
                (Some(&x), Some(&y)) if x == y => {
                    merged.push(x);
                    a += 1;
                    b += 1;
                }
                (Some(&x), Some(&y)) if x < y => {
                    merged.push(x);
                    a += 1;
                }
                (Some(_), Some(&y)) => {
                    merged.push(y);
                    b += 1;
                }
                (Some(&x), None) => {
                    merged.push(x);
                    a += 1;
                }
                (None, Some(&y)) => {
                    merged.push(y);
                    b += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        TokenIndexSet { indices: merged }
    }

    /// The set plus one extra index (no-op when already present).
    pub fn inserted(&self, index: usize) -> TokenIndexSet {
        if self.contains(index) {
            return self.clone();
        }
        let pos = self.indices.partition_point(|&x| x < index);
        let mut indices = self.indices.clone();
        indices.insert(pos, index);
        TokenIndexSet { indices }
    }

    /// Complement within `[0, len)`.
    pub fn complement(&self, len: usize) -> TokenIndexSet {
        let mut indices = Vec::with_capacity(len - self.len());
        let mut next = self.indices.iter().peekable();
        for i in 0..len {
            if next.peek().is_some_and(|&&x| x == i) {
                next.next();
            } else {
                indices.push(i);
            }
        }
        TokenIndexSet { indices }
    }
}

/// Full causal (or bidirectional) attention output, L x d_h.
pub fn full_attention(inp: &AttentionInputs, causal: bool) -> Result<Tensor2D> {
    let scores = full_attention_scores(inp, causal)?;
    matmul(&scores, inp.v())
}

/// The L x L row-stochastic probability matrix softmax(Q K^T / sqrt(d_h)).
pub fn full_attention_scores(inp: &AttentionInputs, causal: bool) -> Result<Tensor2D> {
    let raw = matmul(inp.q(), &inp.k().transpose())?;
    softmax_rows(&raw.scale(inp.scale())?, causal)
}

/// Attention output for one query restricted to `kept` keys/values,
/// renormalized over the kept (and, under `causal`, visible) subset.
///
/// Equivalent to zeroing the unselected rows of K and V and re-running the
/// softmax over the surviving entries; the renormalized form avoids
/// materializing zeroed matrices.
pub fn masked_attention(
    inp: &AttentionInputs,
    kept: &TokenIndexSet,
    query_row: usize,
    causal: bool,
) -> Result<Vec<f64>> {
    let len = inp.len();
    if query_row >= len {
        return Err(TcaError::invalid(
            "query_row",
            format!("query {query_row} out of range for length {len}"),
        ));
    }
    if kept.as_slice().last().is_some_and(|&j| j >= len) {
        return Err(TcaError::invalid(
            "kept",
            format!("kept index out of range for length {len}"),
        ));
    }
    let visible: Vec<usize> = if causal {
        kept.iter().take_while(|&j| j <= query_row).collect()
    } else {
        kept.iter().collect()
    };
    if visible.is_empty() {
        return Err(TcaError::contract(format!(
            "query {query_row}: kept set has no causally visible token"
        )));
    }
    let q_row = inp.q().row(query_row);
    let scale = inp.scale();
    let logits: Vec<f64> = visible
        .iter()
        .map(|&j| dot(q_row, inp.k().row(j)) * scale)
        .collect();
    let mut weights = vec![0.0; logits.len()];
    softmax_into(&logits, &mut weights)?;

    let d = inp.head_dim();
    let mut out = vec![0.0; d];
    for (&j, &w) in visible.iter().zip(&weights) {
        let v_row = inp.v().row(j);
        for (o, &v) in out.iter_mut().zip(v_row) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Probability mass the full softmax puts on tokens outside `kept` for one
/// query row. Causally masked entries carry zero mass, so the causal and
/// mask-free readings coincide on causal score matrices.
pub fn gamma_mass(scores: &Tensor2D, kept: &TokenIndexSet, query_row: usize) -> Result<f64> {
    if query_row >= scores.rows() {
        return Err(TcaError::invalid(
            "query_row",
            format!("query {query_row} out of range for {} rows", scores.rows()),
        ));
    }
    let row = scores.row(query_row);
    let mut kept_iter = kept.iter().peekable();
    let mut gamma = 0.0;
    for (j, &p) in row.iter().enumerate() {
        if kept_iter.peek().is_some_and(|&k| k == j) {
            kept_iter.next();
        } else {
            gamma += p;
        }
    }
    Ok(gamma)
}

/// Restricted softmax distribution materialized over the full length:
/// renormalized on the visible kept set, exactly zero elsewhere. Returns
/// the distribution together with the visible kept indices.
pub(crate) fn restricted_distribution(
    inp: &AttentionInputs,
    kept: &TokenIndexSet,
    query_row: usize,
    causal: bool,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if kept.as_slice().last().is_some_and(|&j| j >= inp.len()) {
        return Err(TcaError::invalid(
            "kept",
            format!("kept index out of range for length {}", inp.len()),
        ));
    }
    let visible: Vec<usize> = if causal {
        kept.iter().take_while(|&j| j <= query_row).collect()
    } else {
        kept.iter().collect()
    };
    if visible.is_empty() {
        return Err(TcaError::contract(format!(
            "query {query_row}: kept set has no causally visible token"
        )));
    }
    let q_row = inp.q().row(query_row);
    let scale = inp.scale();
    let logits: Vec<f64> = visible
        .iter()
        .map(|&j| dot(q_row, inp.k().row(j)) * scale)
        .collect();
    let mut weights = vec![0.0; logits.len()];
    softmax_into(&logits, &mut weights)?;
    let mut dist = vec![0.0; inp.len()];
    for (&j, &w) in visible.iter().zip(&weights) {
        dist[j] = w;
    }
    Ok((dist, visible))
}
