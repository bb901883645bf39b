//! Command-line front end: generate synthetic workloads, calibrate
//! per-head sparsity tables, run prefill+decode sessions, verify the
//! approximation-error bounds, and print the analytic cost table.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use tca::attention::{AttentionInputs, TokenIndexSet};
use tca::bounds::{verify_bounds, BoundReport};
use tca::calibrate::{
    calibrate_model, table_timestamp, CalibrationParams, CalibrationSample, HeadConfigTable,
    HeadSamples, TableMetadata,
};
use tca::engine::{run_session, HeadSpec};
use tca::error::{Result, TcaError};
use tca::metrics::{cost_model, emit_report, ReportFormat, RunBounds, RunConfig, RunReport};
use tca::selection::RedundancyIndex;
use tca::sparsity::CandidateSet;
use tca::tensor::{random_tensor, Distribution, Seed};
use tca::workload::{generate_pattern, read_qkv, write_atomic, write_qkv, PatternFamily, PatternSpec};

#[derive(Parser)]
#[command(
    name = "tca",
    version,
    about = "Context-adaptive sparse attention: calibration, selection, decoding, and bound verification",
    after_help = "Environment:\n  TCA_LOG_LEVEL    error | warn | info | debug (default: warn)\n\nAll randomness flows from explicit --seed flags; repeated invocations with\nidentical flags and files produce byte-identical outputs."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Q/K/V workload with a named attention pattern
    Gen(GenArgs),
    /// Calibrate per-head sparsity configurations and write the table
    Calibrate(CalibrateArgs),
    /// Run prefill plus decoding against a calibrated table
    Run(RunArgs),
    /// Check the approximation-error bounds; exits 3 on any tight-bound violation
    Verify(VerifyArgs),
    /// Print the analytic FLOP/KV cost table across sequence lengths
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// uniform | bipolar | terminal-bias | attention-sink | sparse-activation
    #[arg(long)]
    family: String,
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Template dominance in (0, 1]; noise scales with 1 - intensity
    #[arg(long, default_value_t = 0.9)]
    intensity: f64,
    /// Output prefix; writes PREFIX.q.tcat, PREFIX.k.tcat, PREFIX.v.tcat
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Q/K/V prefix for one head; repeat the flag for more heads. Within
    /// one flag, comma-separate prefixes to calibrate that head on
    /// several samples.
    #[arg(long, required = true)]
    qkv: Vec<String>,
    #[arg(long, default_value_t = 128)]
    block: usize,
    #[arg(long, default_value_t = 4096)]
    window: usize,
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 14)]
    candidates: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// hhi | entropy
    #[arg(long, default_value = "hhi")]
    index: String,
    /// Provenance echo stored in the table metadata
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Q/K/V prefix for one head; repeat for more heads (head i reads the
    /// i-th prefix and uses table entry layer 0, head i)
    #[arg(long, required = true)]
    qkv: Vec<String>,
    #[arg(long)]
    table: PathBuf,
    #[arg(long, default_value_t = 0)]
    decode_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also compute per-step dropped mass and L1 error against the exact
    /// full-attention oracle
    #[arg(long, default_value_t = false)]
    oracle: bool,
    /// Session trace output (line-delimited records)
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// text | csv (rows of section,layer,head,key,value) | json
    #[arg(long, default_value = "text")]
    format: String,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, required = true)]
    qkv: Vec<String>,
    #[arg(long)]
    table: PathBuf,
    /// Extra randomized (instance, kept-set) pairs to check on top of the
    /// engine's own selections
    #[arg(long, default_value_t = 0)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix; writes PREFIX.json and PREFIX.csv (one row per
    /// query: query,gamma,l1_error,loose_bound,tight_bound,term2,
    /// softmax_l1,holds_loose,holds_tight)
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    length: Vec<usize>,
    /// Use the built-in length sweep 2K..128K
    #[arg(long, default_value_t = false)]
    sweep: bool,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    retained: usize,
    #[arg(long, default_value_t = 4096)]
    window: usize,
    #[arg(long, default_value_t = 128)]
    block: usize,
    /// text | csv
    #[arg(long, default_value = "text")]
    format: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("TCA_LOG_LEVEL", "warn"),
    )
    .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Writes to stdout, treating a closed pipe as a normal early exit.
fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().write_all(text.as_bytes()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(TcaError::io("<stdout>", e)),
    }
}

fn exit_code_for(e: &TcaError) -> u8 {
    match e {
        TcaError::InvalidParameter { .. }
        | TcaError::MissingHeadEntry { .. }
        | TcaError::MalformedTable { .. } => 2,
        TcaError::Io { .. }
        | TcaError::BadMagic { .. }
        | TcaError::UnsupportedVersion { .. }
        | TcaError::TruncatedPayload { .. }
        | TcaError::DimOverflow { .. }
        | TcaError::UnsupportedRank { .. } => 4,
        TcaError::ShapeMismatch { .. } | TcaError::Contract(_) | TcaError::NonFinite { .. } => 3,
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let family: PatternFamily = args.family.parse()?;
    let spec = PatternSpec::new(family, args.length, args.dim, Seed(args.seed), args.intensity)?;
    let inputs = generate_pattern(&spec)?;
    write_qkv(&args.out, &inputs)?;
    log::info!(
        "wrote {family} workload (L={}, d={}) to {}.{{q,k,v}}.tcat",
        args.length,
        args.dim,
        args.out
    );
    Ok(ExitCode::SUCCESS)
}

fn load_head_samples(qkv: &[String]) -> Result<Vec<HeadSamples>> {
    qkv.iter()
        .enumerate()
        .map(|(head, group)| {
            let samples = group
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|prefix| Ok(CalibrationSample::new(read_qkv(prefix)?, prefix)))
                .collect::<Result<Vec<_>>>()?;
            if samples.is_empty() {
                return Err(TcaError::invalid("qkv", "empty prefix group"));
            }
            Ok(HeadSamples {
                layer: 0,
                head,
                samples,
            })
        })
        .collect()
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<ExitCode> {
    let started = Instant::now();
    let index: RedundancyIndex = args.index.parse()?;
    let heads = load_head_samples(&args.qkv)?;
    let candidates = CandidateSet::generate(args.block, args.candidates, args.sigma)?;
    let params = CalibrationParams {
        block: args.block,
        window: args.window,
        tau: args.tau,
        alpha: args.alpha,
        index,
    };
    let metadata = TableMetadata {
        block: args.block,
        window: args.window,
        tau: args.tau,
        sigma: args.sigma,
        candidates: args.candidates,
        alpha: args.alpha,
        index,
        seed: args.seed,
        created_at: table_timestamp(),
    };
    let table = calibrate_model(&heads, &candidates, &params, metadata, args.jobs.max(1))?;
    table.write(&args.out)?;
    for e in table.entries() {
        log::info!(
            "layer {} head {}: candidate {} (score {:.4}, kept {}{})",
            e.layer,
            e.head,
            e.candidate_index,
            e.aggregated_score,
            e.kept_count,
            if e.fallback { ", FALLBACK" } else { "" }
        );
    }
    log::info!(
        "calibrated {} head(s) in {:.2?} -> {}",
        table.entries().len(),
        started.elapsed(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let started = Instant::now();
    let format: ReportFormat = args.format.parse()?;
    let table = HeadConfigTable::read(&args.table)?;
    let heads: Vec<HeadSpec> = args
        .qkv
        .iter()
        .enumerate()
        .map(|(head, prefix)| {
            Ok(HeadSpec {
                layer: 0,
                head,
                inputs: read_qkv(prefix)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    if heads.iter().any(|h| {
        h.inputs.len() != heads[0].inputs.len() || h.inputs.head_dim() != heads[0].inputs.head_dim()
    }) {
        return Err(TcaError::invalid(
            "qkv",
            "all heads in one run must share the same sequence length and head dimension",
        ));
    }

    let outcome = run_session(
        &heads,
        &table,
        args.decode_steps,
        Seed(args.seed),
        args.oracle,
        args.jobs.max(1),
    )?;

    if let Some(trace_path) = &args.trace {
        write_atomic(trace_path, outcome.trace_lines()?.as_bytes())?;
        log::info!("trace -> {}", trace_path.display());
    }

    let meta = table.metadata();
    let min_len = heads[0].inputs.len();
    let window_eff = meta.window.min(min_len);
    let retained: Vec<usize> = outcome
        .heads
        .iter()
        .map(|h| h.prefill_kept.saturating_sub(window_eff))
        .collect();
    let cost = cost_model(
        min_len,
        heads[0].inputs.head_dim(),
        heads.len(),
        &retained,
        window_eff,
        meta.block,
    )?;

    let bounds = if args.oracle {
        let max_gamma = outcome
            .records
            .iter()
            .filter_map(|r| r.gamma)
            .fold(0.0f64, f64::max);
        let max_l1 = outcome
            .records
            .iter()
            .filter_map(|r| r.l1_error)
            .fold(0.0f64, f64::max);
        Some(RunBounds {
            max_gamma,
            max_l1_error: max_l1,
        })
    } else {
        None
    };

    let report = RunReport {
        config: RunConfig {
            qkv: args.qkv.clone(),
            table: args.table.display().to_string(),
            decode_steps: args.decode_steps,
            seed: args.seed,
            oracle: args.oracle,
            block: meta.block,
            window: meta.window,
            alpha: meta.alpha,
            index: meta.index.to_string(),
        },
        heads: outcome.heads.clone(),
        cost,
        bounds,
    };
    match &args.report {
        Some(path) => {
            emit_report(&report, format, path)?;
            log::info!("report -> {}", path.display());
        }
        None => print_stdout(&report.render(format)?)?,
    }
    log::info!("session finished in {:.2?}", started.elapsed());
    Ok(ExitCode::SUCCESS)
}

fn write_bound_report(report: &BoundReport, prefix: &str) -> Result<()> {
    write_atomic(
        &PathBuf::from(format!("{prefix}.json")),
        report.to_json()?.as_bytes(),
    )?;
    write_atomic(
        &PathBuf::from(format!("{prefix}.csv")),
        report.to_csv().as_bytes(),
    )
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let table = HeadConfigTable::read(&args.table)?;
    let meta = table.metadata();
    let params = tca::engine::EngineParams {
        window: meta.window,
        alpha: meta.alpha,
        index: meta.index,
    };

    let mut merged_queries = Vec::new();
    let mut reports = Vec::new();
    for (head, prefix) in args.qkv.iter().enumerate() {
        let inputs = read_qkv(prefix)?;
        let entry = table.lookup(0, head)?;
        let pf = tca::engine::prefill(&inputs, &entry.chosen, &params)?;
        let pairs: Vec<(usize, TokenIndexSet)> = (0..inputs.len())
            .map(|i| (i, pf.kept_for_query(i)))
            .collect();
        let report = verify_bounds(&inputs, &pairs, true)?;
        log::info!(
            "head {head} ({prefix}): {} queries, max_gamma {:.4}, tight violations {}",
            report.summary.queries,
            report.summary.max_gamma,
            report.summary.tight_violations
        );
        merged_queries.push(report.summary.tight_violations);
        reports.push(report);
    }

    // extra randomized instances over fresh inputs with random kept sets
    if args.instances > 0 {
        let first = read_qkv(&args.qkv[0])?;
        let (len, dim) = (first.len(), first.head_dim());
        let mut violations = 0;
        for t in 0..args.instances {
            let base = args.seed.wrapping_add(t as u64).wrapping_mul(3);
            let q = random_tensor(len, dim, Seed(base), Distribution::Gaussian)?;
            let k = random_tensor(len, dim, Seed(base + 1), Distribution::Gaussian)?;
            let v = random_tensor(len, dim, Seed(base + 2), Distribution::Gaussian)?;
            let inp = AttentionInputs::new(q, k, v)?;
            let kept = random_kept_set(len, base + 3);
            let report = verify_bounds(&inp, &[(len - 1, kept)], true)?;
            violations += report.summary.tight_violations;
            reports.push(report);
        }
        log::info!(
            "randomized sweep: {} instances, {} tight violations",
            args.instances,
            violations
        );
        merged_queries.push(violations);
    }

    let merged = merge_reports(reports);
    print_stdout(&format!(
        "queries {}, max_gamma {:.6}, v_inf {:.6}, tight violations {}, loose violations {}, max identity gap {:.3e}\n",
        merged.summary.queries,
        merged.summary.max_gamma,
        merged.summary.v_inf,
        merged.summary.tight_violations,
        merged.summary.loose_violations,
        merged.summary.max_identity_gap
    ))?;
    if let Some(prefix) = &args.out {
        write_bound_report(&merged, prefix)?;
        log::info!("bound report -> {prefix}.{{json,csv}}");
    }
    if merged.any_tight_violation() {
        eprintln!(
            "error: tight bound violated on {} of {} queries",
            merged.summary.tight_violations, merged.summary.queries
        );
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn random_kept_set(len: usize, seed: u64) -> TokenIndexSet {
    use rand_core::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let lo = (len / 8).max(1);
    let hi = (7 * len / 8).max(lo + 1);
    let size = lo + (rng.next_u64() as usize) % (hi - lo);
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..size {
        let j = i + (rng.next_u64() as usize) % (len - i);
        pool.swap(i, j);
    }
    pool.truncate(size);
    TokenIndexSet::new(pool, len).expect("indices are in range")
}

fn merge_reports(reports: Vec<BoundReport>) -> BoundReport {
    let mut per_query = Vec::new();
    let mut queries = 0;
    let mut max_gamma = 0.0f64;
    let mut max_violation = f64::NEG_INFINITY;
    let mut v_inf = 0.0f64;
    let mut max_identity_gap = 0.0f64;
    let mut tight = 0;
    let mut loose = 0;
    for r in reports {
        queries += r.summary.queries;
        max_gamma = max_gamma.max(r.summary.max_gamma);
        max_violation = max_violation.max(r.summary.max_violation);
        v_inf = v_inf.max(r.summary.v_inf);
        max_identity_gap = max_identity_gap.max(r.summary.max_identity_gap);
        tight += r.summary.tight_violations;
        loose += r.summary.loose_violations;
        per_query.extend(r.per_query);
    }
    BoundReport {
        per_query,
        summary: tca::bounds::BoundSummary {
            queries,
            max_gamma,
            max_violation: if queries == 0 { 0.0 } else { max_violation },
            v_inf,
            max_identity_gap,
            tight_violations: tight,
            loose_violations: loose,
        },
    }
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let mut lengths = args.length.clone();
    if args.sweep {
        lengths.extend([2048usize, 4096, 8192, 16384, 32768, 65536, 131072]);
    }
    if lengths.is_empty() {
        return Err(TcaError::invalid(
            "length",
            "give at least one --length or use --sweep",
        ));
    }
    lengths.sort_unstable();
    lengths.dedup();

    let csv = match args.format.as_str() {
        "text" => false,
        "csv" => true,
        other => {
            return Err(TcaError::invalid(
                "format",
                format!("unknown format `{other}`, expected text or csv"),
            ))
        }
    };
    let mut out = String::new();
    if csv {
        out.push_str("length,dim,heads,retained,window,full_flops,sparse_flops,overhead_flops,flop_ratio,kv_bytes_full,kv_bytes_sparse,retained_fraction\n");
    } else {
        out.push_str(&format!(
            "{:>8} {:>5} {:>5} {:>8} {:>8} {:>16} {:>16} {:>14} {:>10} {:>14}\n",
            "length", "dim", "heads", "retained", "window", "full_flops", "sparse_flops",
            "overhead", "ratio", "kv_fraction"
        ));
    }
    for len in lengths {
        let window = args.window.min(len);
        let retained = args.retained.min(len - window);
        let per_head = vec![retained; args.heads];
        let m = cost_model(len, args.dim, args.heads, &per_head, window, args.block)?;
        if csv {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                len,
                args.dim,
                args.heads,
                retained,
                window,
                m.full_flops,
                m.sparse_flops,
                m.overhead_flops,
                m.flop_ratio(),
                m.kv_bytes_full,
                m.kv_bytes_sparse,
                m.retained_fraction
            ));
        } else {
            out.push_str(&format!(
                "{:>8} {:>5} {:>5} {:>8} {:>8} {:>16} {:>16} {:>14} {:>10.6} {:>14.6}\n",
                len,
                args.dim,
                args.heads,
                retained,
                window,
                m.full_flops,
                m.sparse_flops,
                m.overhead_flops,
                m.flop_ratio(),
                m.retained_fraction
            ));
        }
    }
    print_stdout(&out)?;
    Ok(ExitCode::SUCCESS)
}
