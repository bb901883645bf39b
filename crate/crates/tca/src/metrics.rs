//! Analytic FLOP and KV-byte accounting, and run-report emission.
//!
//! Wall-clock numbers depend on kernels and hardware; the deployed proxy
//! is a FLOP model (2 FLOPs per multiply-accumulate) plus exact KV byte
//! counts at 4 bytes per stored scalar.

use std::path::Path;

use serde::Serialize;

use crate::error::{Result, TcaError};
use crate::workload::write_atomic;

/// Cost of one attention layer under the tile model: every query row is
/// charged for the full fused token set, mirroring how a dense kernel
/// processes masked lanes.
#[derive(Debug, Clone, Serialize)]
pub struct CostModel {
    pub len: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub block: usize,
    /// heads * 4 L^2 d: Q K^T plus the value combination.
    pub full_flops: u64,
    /// sum over heads of 4 L (retained + window) d.
    pub sparse_flops: u64,
    /// heads * (2 L d + 8 L): importance scoring plus the per-token
    /// redundancy work (sums, squares, mix, compare).
    pub overhead_flops: u64,
    pub kv_bytes_full: u64,
    pub kv_bytes_sparse: u64,
    /// (retained + window) / L averaged over heads; equals the KV byte
    /// ratio exactly.
    pub retained_fraction: f64,
}

impl CostModel {
    /// sparse / full FLOP ratio including selection overhead.
    pub fn flop_ratio(&self) -> f64 {
        (self.sparse_flops + self.overhead_flops) as f64 / self.full_flops as f64
    }

    pub fn kv_ratio(&self) -> f64 {
        self.kv_bytes_sparse as f64 / self.kv_bytes_full as f64
    }
}

pub fn cost_model(
    len: usize,
    head_dim: usize,
    heads: usize,
    retained_per_head: &[usize],
    window: usize,
    block: usize,
) -> Result<CostModel> {
    if len == 0 || head_dim == 0 || heads == 0 {
        return Err(TcaError::invalid("dimensions", "must be positive"));
    }
    if retained_per_head.len() != heads {
        return Err(TcaError::invalid(
            "retained",
            format!(
                "need one retained count per head ({heads}), got {}",
                retained_per_head.len()
            ),
        ));
    }
    let mut kept_total = 0u64;
    for &r in retained_per_head {
        let kept = r + window;
        if kept == 0 || kept > len {
            return Err(TcaError::invalid(
                "retained",
                format!("retained + window = {kept} must lie in [1, {len}]"),
            ));
        }
        kept_total += kept as u64;
    }
    let l = len as u64;
    let d = head_dim as u64;
    let h = heads as u64;
    let full_flops = h * 4 * l * l * d;
    let sparse_flops = 4 * l * d * kept_total;
    let overhead_flops = h * (2 * l * d + 8 * l);
    let kv_bytes_full = h * l * d * 4 * 2;
    let kv_bytes_sparse = kept_total * d * 4 * 2;
    Ok(CostModel {
        len,
        head_dim,
        heads,
        window,
        block,
        full_flops,
        sparse_flops,
        overhead_flops,
        kv_bytes_full,
        kv_bytes_sparse,
        retained_fraction: kept_total as f64 / (h * l) as f64,
    })
}

/// Echo of the flags a run was invoked with.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub qkv: Vec<String>,
    pub table: String,
    pub decode_steps: usize,
    pub seed: u64,
    pub oracle: bool,
    pub block: usize,
    pub window: usize,
    pub alpha: f64,
    pub index: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunBounds {
    pub max_gamma: f64,
    pub max_l1_error: f64,
}

/// End-to-end run report. Wall-clock timings are logged, not serialized,
/// so reports from identical inputs are byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub heads: Vec<crate::engine::HeadRunSummary>,
    pub cost: CostModel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<RunBounds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = TcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(TcaError::invalid(
                "format",
                format!("unknown report format `{other}`, expected text, csv, or json"),
            )),
        }
    }
}

impl RunReport {
    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => serde_json::to_string_pretty(self)
                .map(|mut s| {
                    s.push('\n');
                    s
                })
                .map_err(|e| TcaError::MalformedTable {
                    path: "<report>".into(),
                    message: e.to_string(),
                }),
            ReportFormat::Text => Ok(self.render_text()),
            ReportFormat::Csv => Ok(self.render_csv()),
        }
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# tca run report\n");
        out.push_str("# flop counts model a dense kernel over the fused token set;\n");
        out.push_str("# wall-clock speedups are hardware-specific and not asserted\n\n");
        out.push_str(&format!("table:        {}\n", self.config.table));
        out.push_str(&format!("decode_steps: {}\n", self.config.decode_steps));
        out.push_str(&format!("seed:         {}\n", self.config.seed));
        out.push_str(&format!(
            "block/window: {}/{}\n",
            self.config.block, self.config.window
        ));
        out.push_str(&format!(
            "alpha/index:  {}/{}\n\n",
            self.config.alpha, self.config.index
        ));
        for h in &self.heads {
            out.push_str(&format!(
                "head L{}H{}: kept {} (fraction {:.6}), attention_flops {}, overhead_flops {}, decode_flops {}, final_cache {}\n",
                h.layer,
                h.head,
                h.prefill_kept,
                h.retained_fraction,
                h.attention_flops,
                h.overhead_flops,
                h.decode_flops,
                h.final_cache_size
            ));
        }
        out.push_str(&format!(
            "\ncost: full_flops {}, sparse_flops {}, overhead_flops {}, flop_ratio {:.6}\n",
            self.cost.full_flops,
            self.cost.sparse_flops,
            self.cost.overhead_flops,
            self.cost.flop_ratio()
        ));
        out.push_str(&format!(
            "kv: full {} bytes, sparse {} bytes, retained_fraction {:.6}\n",
            self.cost.kv_bytes_full, self.cost.kv_bytes_sparse, self.cost.retained_fraction
        ));
        if let Some(b) = &self.bounds {
            out.push_str(&format!(
                "bounds: max_gamma {:.6}, max_l1_error {:.6e}\n",
            b.max_gamma, b.max_l1_error
            ));
        }
        out
    }

    /// CSV rows of `section,layer,head,key,value`; header sections use
    /// empty layer/head columns.
    fn render_csv(&self) -> String {
        let mut out = String::from("section,layer,head,key,value\n");
        let mut push = |section: &str, layer: String, head: String, key: &str, value: String| {
            out.push_str(&format!("{section},{layer},{head},{key},{value}\n"));
        };
        push("config", String::new(), String::new(), "decode_steps", self.config.decode_steps.to_string());
        push("config", String::new(), String::new(), "seed", self.config.seed.to_string());
        push("config", String::new(), String::new(), "block", self.config.block.to_string());
        push("config", String::new(), String::new(), "window", self.config.window.to_string());
        push("config", String::new(), String::new(), "alpha", self.config.alpha.to_string());
        push("config", String::new(), String::new(), "index", self.config.index.clone());
        for h in &self.heads {
            let (l, hd) = (h.layer.to_string(), h.head.to_string());
            push("head", l.clone(), hd.clone(), "prefill_kept", h.prefill_kept.to_string());
            push("head", l.clone(), hd.clone(), "retained_fraction", h.retained_fraction.to_string());
            push("head", l.clone(), hd.clone(), "attention_flops", h.attention_flops.to_string());
            push("head", l.clone(), hd.clone(), "overhead_flops", h.overhead_flops.to_string());
            push("head", l.clone(), hd.clone(), "decode_flops", h.decode_flops.to_string());
            push("head", l, hd, "final_cache_size", h.final_cache_size.to_string());
        }
        push("cost", String::new(), String::new(), "full_flops", self.cost.full_flops.to_string());
        push("cost", String::new(), String::new(), "sparse_flops", self.cost.sparse_flops.to_string());
        push("cost", String::new(), String::new(), "overhead_flops", self.cost.overhead_flops.to_string());
        push("cost", String::new(), String::new(), "flop_ratio", self.cost.flop_ratio().to_string());
        push("cost", String::new(), String::new(), "kv_bytes_full", self.cost.kv_bytes_full.to_string());
        push("cost", String::new(), String::new(), "kv_bytes_sparse", self.cost.kv_bytes_sparse.to_string());
        push("cost", String::new(), String::new(), "retained_fraction", self.cost.retained_fraction.to_string());
        if let Some(b) = &self.bounds {
            push("bounds", String::new(), String::new(), "max_gamma", b.max_gamma.to_string());
            push("bounds", String::new(), String::new(), "max_l1_error", b.max_l1_error.to_string());
        }
        out
    }
}

/// Writes a rendered report atomically.
pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = report.render(format)?;
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_cost_equals_full() {
        let m = cost_model(1024, 64, 2, &[1024 - 128, 1024 - 128], 128, 32).unwrap();
        assert_eq!(m.sparse_flops, m.full_flops);
        assert_eq!(m.kv_bytes_sparse, m.kv_bytes_full);
        assert_eq!(m.retained_fraction, 1.0);
    }

    #[test]
    fn ratio_matches_arithmetic() {
        let m = cost_model(8192, 64, 1, &[512], 1024, 128).unwrap();
        let expected = (512.0 + 1024.0) / 8192.0;
        assert!((m.sparse_flops as f64 / m.full_flops as f64 - expected).abs() < 1e-12);
        assert!((m.kv_ratio() - m.retained_fraction).abs() < 1e-15);
        // overhead stays under one percent of the sparse ratio here
        assert!((m.flop_ratio() - expected).abs() <= 0.01 * expected);
    }

    #[test]
    fn oversized_retained_is_rejected() {
        assert!(cost_model(128, 8, 1, &[100], 64, 16).is_err());
    }

    #[test]
    fn report_rendering_is_deterministic() {
        let cost = cost_model(256, 8, 1, &[32], 64, 16).unwrap();
        let report = RunReport {
            config: RunConfig {
                qkv: vec!["w".to_string()],
                table: "t.toml".to_string(),
                decode_steps: 4,
                seed: 1,
                oracle: false,
                block: 16,
                window: 64,
                alpha: 0.5,
                index: "hhi".to_string(),
            },
            heads: vec![],
            cost,
            bounds: None,
        };
        for format in [ReportFormat::Text, ReportFormat::Csv, ReportFormat::Json] {
            assert_eq!(report.render(format).unwrap(), report.render(format).unwrap());
        }
        // empty bound summary: section omitted, output still renders
        assert!(!report.render(ReportFormat::Text).unwrap().contains("bounds:"));
    }
}
