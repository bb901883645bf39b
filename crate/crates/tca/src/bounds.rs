//! Numerical verification of the sparse-attention approximation-error
//! bound: per-query dropped mass, measured L1 output error, the loose
//! (2 gamma) and tight (gamma (2 - gamma)) bound forms against the maximum
//! absolute value entry, the value-error term, and the softmax-distance
//! identity, all materialized so they can be checked rather than assumed.

use serde::Serialize;

use crate::attention::{
    full_attention_scores, gamma_mass, masked_attention, restricted_distribution, AttentionInputs,
    TokenIndexSet,
};
use crate::calibrate::{CalibrationParams, HeadConfigTable, HeadSamples};
use crate::error::{Result, TcaError};
use crate::selection::select_core_context;
use crate::tensor::{l1_distance, matmul, Tensor2D};

pub const BOUND_SLACK: f64 = 1e-9;

/// Maximum absolute entry of the value matrix.
pub fn v_infinity(v: &Tensor2D) -> f64 {
    v.max_abs()
}

/// One query's worth of bound evidence.
#[derive(Debug, Clone, Serialize)]
pub struct QueryBound {
    pub query: usize,
    /// Full-softmax probability mass on tokens outside the kept set.
    pub gamma: f64,
    /// Measured L1 distance between the full and restricted outputs.
    pub l1_error: f64,
    /// 2 gamma |V|_inf.
    pub loose_bound: f64,
    /// gamma (2 - gamma) |V|_inf.
    pub tight_bound: f64,
    /// L1 distance between the two ways of computing the restricted
    /// output: renormalized over the kept set versus full-length weights
    /// against a value matrix with unselected rows zeroed. Identically 0.
    pub term2: f64,
    /// Measured L1 distance between the full and restricted softmax
    /// distributions, materialized over all positions.
    pub softmax_l1: f64,
    pub holds_loose: bool,
    pub holds_tight: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundSummary {
    pub queries: usize,
    pub max_gamma: f64,
    /// Largest signed excess of the measured error over the tight bound;
    /// non-positive when the tight bound held everywhere.
    pub max_violation: f64,
    pub v_inf: f64,
    /// Largest |softmax_l1 - gamma (2 - gamma)| over all queries.
    pub max_identity_gap: f64,
    pub tight_violations: usize,
    pub loose_violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub per_query: Vec<QueryBound>,
    pub summary: BoundSummary,
}

impl BoundReport {
    pub fn any_tight_violation(&self) -> bool {
        self.summary.tight_violations > 0
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| TcaError::MalformedTable {
            path: "<report>".into(),
            message: e.to_string(),
        })
    }

    /// Flat table, one row per query, for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "query,gamma,l1_error,loose_bound,tight_bound,term2,softmax_l1,holds_loose,holds_tight\n",
        );
        for q in &self.per_query {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                q.query,
                q.gamma,
                q.l1_error,
                q.loose_bound,
                q.tight_bound,
                q.term2,
                q.softmax_l1,
                q.holds_loose,
                q.holds_tight
            ));
        }
        out
    }
}

/// Checks the error bound for each (query, kept set) pair against the full
/// attention oracle. The kept set must have at least one causally visible
/// token per query.
pub fn verify_bounds(
    inp: &AttentionInputs,
    kept_per_query: &[(usize, TokenIndexSet)],
    causal: bool,
) -> Result<BoundReport> {
    let scores = full_attention_scores(inp, causal)?;
    let full = matmul(&scores, inp.v())?;
    let v_inf = v_infinity(inp.v());
    let dim = inp.head_dim();

    let mut per_query = Vec::with_capacity(kept_per_query.len());
    let mut max_gamma = 0.0f64;
    let mut max_violation = f64::NEG_INFINITY;
    let mut max_identity_gap = 0.0f64;
    let mut tight_violations = 0;
    let mut loose_violations = 0;

    for (query, kept) in kept_per_query {
        let query = *query;
        let gamma = gamma_mass(&scores, kept, query)?;
        let approx = masked_attention(inp, kept, query, causal)?;
        let l1_error = l1_distance(full.row(query), &approx);
        let loose_bound = 2.0 * gamma * v_inf;
        let tight_bound = gamma * (2.0 - gamma) * v_inf;

        // restricted distribution over the full length; the value-error
        // term pairs it with a zeroed value matrix
        let (dist, visible) = restricted_distribution(inp, kept, query, causal)?;
        let softmax_l1 = l1_distance(scores.row(query), &dist);
        let mut zeroed_route = vec![0.0; dim];
        for &j in &visible {
            let w = dist[j];
            for (o, &v) in zeroed_route.iter_mut().zip(inp.v().row(j)) {
                *o += w * v;
            }
        }
        let term2 = l1_distance(&zeroed_route, &approx);

        let holds_tight = l1_error <= tight_bound + BOUND_SLACK;
        let holds_loose = l1_error <= loose_bound + BOUND_SLACK;
        if !holds_tight {
            tight_violations += 1;
        }
        if !holds_loose {
            loose_violations += 1;
        }
        max_gamma = max_gamma.max(gamma);
        max_violation = max_violation.max(l1_error - tight_bound);
        max_identity_gap = max_identity_gap.max((softmax_l1 - gamma * (2.0 - gamma)).abs());

        per_query.push(QueryBound {
            query,
            gamma,
            l1_error,
            loose_bound,
            tight_bound,
            term2,
            softmax_l1,
            holds_loose,
            holds_tight,
        });
    }

    Ok(BoundReport {
        summary: BoundSummary {
            queries: per_query.len(),
            max_gamma,
            max_violation: if per_query.is_empty() {
                0.0
            } else {
                max_violation
            },
            v_inf,
            max_identity_gap,
            tight_violations,
            loose_violations,
        },
        per_query,
    })
}

/// Per-head audit record: how often the per-query dropped mass stayed
/// within `1 - tau` on the calibration data.
#[derive(Debug, Clone, Serialize)]
pub struct HeadGammaAudit {
    pub layer: usize,
    pub head: usize,
    pub queries: usize,
    /// Fraction of queries with gamma <= 1 - tau.
    pub within_fraction: f64,
    pub gamma_mean: f64,
    pub gamma_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaTauAudit {
    pub tau: f64,
    pub heads: Vec<HeadGammaAudit>,
}

/// Empirical audit of the relation between the calibration threshold and
/// the per-query dropped mass. The threshold constrains an aggregated
/// column-mass score, which does not pointwise bound every query's gamma,
/// so this reports measurements rather than asserting an invariant.
pub fn gamma_vs_tau_audit(
    table: &HeadConfigTable,
    heads: &[HeadSamples],
    params: &CalibrationParams,
) -> Result<GammaTauAudit> {
    let mut audits = Vec::with_capacity(heads.len());
    for hs in heads {
        let entry = table.lookup(hs.layer, hs.head)?;
        let mut queries = 0usize;
        let mut within = 0usize;
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for sample in &hs.samples {
            let inp = &sample.inputs;
            let sel = select_core_context(
                inp,
                &entry.chosen,
                params.window,
                params.alpha,
                params.index,
            )?;
            let kept = sel.kept();
            let scores = full_attention_scores(inp, true)?;
            for i in 0..inp.len() {
                let gamma = gamma_mass(&scores, &kept.inserted(i), i)?;
                queries += 1;
                if gamma <= 1.0 - params.tau {
                    within += 1;
                }
                sum += gamma;
                max = max.max(gamma);
            }
        }
        audits.push(HeadGammaAudit {
            layer: hs.layer,
            head: hs.head,
            queries,
            within_fraction: within as f64 / queries.max(1) as f64,
            gamma_mean: sum / queries.max(1) as f64,
            gamma_max: max,
        });
    }
    Ok(GammaTauAudit {
        tau: params.tau,
        heads: audits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_tensor, Distribution, Seed};

    fn seeded_inputs(len: usize, dim: usize, seed: u64) -> AttentionInputs {
        let q = random_tensor(len, dim, Seed(seed), Distribution::Gaussian).unwrap();
        let k = random_tensor(len, dim, Seed(seed + 1), Distribution::Gaussian).unwrap();
        let v = random_tensor(len, dim, Seed(seed + 2), Distribution::Gaussian).unwrap();
        AttentionInputs::new(q, k, v).unwrap()
    }

    #[test]
    fn v_infinity_cases() {
        assert_eq!(v_infinity(&Tensor2D::zeros(2, 3).unwrap()), 0.0);
        let t = Tensor2D::new(1, 2, vec![-3.0, 2.0]).unwrap();
        assert_eq!(v_infinity(&t), 3.0);
        let t = random_tensor(7, 5, Seed(9), Distribution::Gaussian).unwrap();
        let want = t.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert_eq!(v_infinity(&t), want);
    }

    #[test]
    fn keeping_everything_gives_zero_error_and_bounds() {
        let inp = seeded_inputs(12, 4, 70);
        let all = TokenIndexSet::from_range(0..12);
        let pairs: Vec<(usize, TokenIndexSet)> =
            (0..12).map(|i| (i, all.clone())).collect();
        let report = verify_bounds(&inp, &pairs, true).unwrap();
        for q in &report.per_query {
            assert!(q.gamma.abs() < 1e-12);
            assert!(q.l1_error < 1e-12);
            assert!(q.tight_bound < 1e-12);
            assert!(q.holds_tight);
        }
        assert_eq!(report.summary.tight_violations, 0);
    }

    #[test]
    fn constant_values_show_bound_slack() {
        // with all value rows equal, dropping a token changes nothing in
        // the output even though the bound is positive
        let len = 8;
        let q = random_tensor(len, 3, Seed(1), Distribution::Gaussian).unwrap();
        let k = random_tensor(len, 3, Seed(2), Distribution::Gaussian).unwrap();
        let v = Tensor2D::new(len, 3, vec![1.0; len * 3]).unwrap();
        let inp = AttentionInputs::new(q, k, v).unwrap();
        let kept = TokenIndexSet::from_range(0..len - 1); // drop the last token
        let query = len - 1;
        let report = verify_bounds(&inp, &[(query, kept)], true).unwrap();
        let rec = &report.per_query[0];
        assert!(rec.gamma > 0.0);
        assert!(rec.l1_error < 1e-12);
        let p = rec.gamma;
        assert!((rec.tight_bound - p * (2.0 - p)).abs() < 1e-12);
    }

    #[test]
    fn value_error_term_is_identically_zero() {
        let inp = seeded_inputs(24, 6, 80);
        let kept = TokenIndexSet::new(vec![0, 2, 3, 8, 13, 17, 21], 24).unwrap();
        let pairs: Vec<(usize, TokenIndexSet)> =
            (4..24).map(|i| (i, kept.clone())).collect();
        let report = verify_bounds(&inp, &pairs, true).unwrap();
        for q in &report.per_query {
            assert!(q.term2 <= 1e-12, "query {}: term2 {}", q.query, q.term2);
        }
    }

    #[test]
    fn measured_softmax_distance_is_twice_gamma() {
        // the two distributions differ by exactly 2 gamma in L1: gamma of
        // mass leaves the dropped tokens and gamma spreads over the kept
        let inp = seeded_inputs(32, 4, 90);
        let kept = TokenIndexSet::new((0..32).step_by(3).collect(), 32).unwrap();
        let pairs: Vec<(usize, TokenIndexSet)> = (0..32).map(|i| (i, kept.clone())).collect();
        let report = verify_bounds(&inp, &pairs, true).unwrap();
        for q in &report.per_query {
            assert!(
                (q.softmax_l1 - 2.0 * q.gamma).abs() < 1e-12,
                "query {}: softmax_l1 {} vs 2 gamma {}",
                q.query,
                q.softmax_l1,
                2.0 * q.gamma
            );
        }
    }

    #[test]
    fn gamma_shrinks_as_kept_grows() {
        let inp = seeded_inputs(20, 4, 95);
        let scores = full_attention_scores(&inp, true).unwrap();
        let small = TokenIndexSet::new(vec![0, 5, 10], 20).unwrap();
        let grown = TokenIndexSet::new(vec![0, 3, 5, 10, 15], 20).unwrap();
        let g_small = gamma_mass(&scores, &small, 19).unwrap();
        let g_grown = gamma_mass(&scores, &grown, 19).unwrap();
        assert!(g_grown <= g_small + 1e-15);
    }

    #[test]
    fn error_bounded_by_distance_times_max_row_l1() {
        // Hoelder with the maximum row L1 norm of V is the inequality that
        // holds unconditionally; check it across random kept sets
        let inp = seeded_inputs(48, 8, 99);
        let max_row_l1 = (0..48)
            .map(|j| inp.v().row(j).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        let mut pairs = Vec::new();
        for t in 0..50 {
            let kept: Vec<usize> = (0..48).filter(|i| (i * 7 + t) % 3 != 0).collect();
            pairs.push((47, TokenIndexSet::new(kept, 48).unwrap()));
        }
        let report = verify_bounds(&inp, &pairs, true).unwrap();
        for q in &report.per_query {
            assert!(q.l1_error <= q.softmax_l1 * max_row_l1 + 1e-9);
        }
    }

    #[test]
    fn audit_dense_table_has_zero_gamma() {
        use crate::calibrate::{CalibrationSample, HeadEntry, TableMetadata};
        use crate::selection::RedundancyIndex;
        use crate::sparsity::SparsityConfig;

        let inp = seeded_inputs(64, 4, 110);
        let entry = HeadEntry {
            layer: 0,
            head: 0,
            chosen: SparsityConfig::point_mass(8, 8).unwrap(),
            aggregated_score: 1.0,
            kept_count: 64,
            candidate_index: 1,
            fallback: false,
        };
        let metadata = TableMetadata {
            block: 8,
            window: 16,
            tau: 0.9,
            sigma: 1.0,
            candidates: 1,
            alpha: 0.5,
            index: RedundancyIndex::Hhi,
            seed: 0,
            created_at: "2026-01-01T00:00:00Z".to_string(),
        };
        let table = HeadConfigTable::new(metadata, vec![entry]).unwrap();
        let heads = vec![HeadSamples {
            layer: 0,
            head: 0,
            samples: vec![CalibrationSample::new(inp, "dense")],
        }];
        let params = CalibrationParams {
            block: 8,
            window: 16,
            tau: 0.9,
            alpha: 0.5,
            index: RedundancyIndex::Hhi,
        };
        let audit = gamma_vs_tau_audit(&table, &heads, &params).unwrap();
        assert_eq!(audit.heads[0].within_fraction, 1.0);
        assert!(audit.heads[0].gamma_max < 1e-12);

        // tau = 0 makes the condition vacuous: 1 - tau = 1 >= gamma always
        let params0 = CalibrationParams { tau: 0.0, ..params };
        let audit0 = gamma_vs_tau_audit(&table, &heads, &params0).unwrap();
        assert_eq!(audit0.heads[0].within_fraction, 1.0);
    }

    #[test]
    fn audit_reports_measured_fractions_for_sparse_heads() {
        use crate::calibrate::{
            calibrate_head, CalibrationSample, HeadEntry, TableMetadata,
        };
        use crate::selection::RedundancyIndex;
        use crate::sparsity::CandidateSet;
        use crate::workload::{generate_pattern, PatternFamily, PatternSpec};

        let spec =
            PatternSpec::new(PatternFamily::AttentionSink, 256, 8, Seed(17), 0.9).unwrap();
        let sample = CalibrationSample::new(generate_pattern(&spec).unwrap(), "sink");
        let params = CalibrationParams {
            block: 16,
            window: 32,
            tau: 0.9,
            alpha: 0.5,
            index: RedundancyIndex::Hhi,
        };
        let candidates = CandidateSet::generate(16, 8, 1.0).unwrap();
        let (chosen, report) = calibrate_head(&sample, &candidates, &params).unwrap();
        let record = &report.records[report.chosen_index - 1];
        let entry = HeadEntry {
            layer: 0,
            head: 0,
            chosen,
            aggregated_score: record.aggregated_score,
            kept_count: record.kept_count,
            candidate_index: report.chosen_index,
            fallback: report.fallback,
        };
        let metadata = TableMetadata {
            block: 16,
            window: 32,
            tau: 0.9,
            sigma: 1.0,
            candidates: 8,
            alpha: 0.5,
            index: RedundancyIndex::Hhi,
            seed: 0,
            created_at: "2026-01-01T00:00:00Z".to_string(),
        };
        let table = HeadConfigTable::new(metadata, vec![entry]).unwrap();
        let heads = vec![HeadSamples {
            layer: 0,
            head: 0,
            samples: vec![sample],
        }];
        let audit = gamma_vs_tau_audit(&table, &heads, &params).unwrap();
        let h = &audit.heads[0];
        assert_eq!(h.queries, 256);
        assert!(h.within_fraction > 0.0 && h.within_fraction <= 1.0);
        assert!(h.gamma_max <= 1.0 + 1e-12);
        assert!(h.gamma_mean <= h.gamma_max);
    }
}
