use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ditplan::bucket::{check_token_balance, BalanceReport};
use ditplan::config::{OffloadMode, PlannerConfig};
use ditplan::infer::{
    composite_speedup, dit_parallel_latency, plan_cache, plan_temporal_windows, plan_vae_tiles,
    CacheMode, CacheSchedule, DitLatency, TilePlan, WindowPlan,
};
use ditplan::memory::{ActShape, ChunkTable, MIB};
use ditplan::recompute::{
    brute_force_recompute, plan_recompute, RecomputePlan, MAX_EXHAUSTIVE_CHUNKS,
};
use ditplan::report::{self, exit_code, Format, PlanReport};
use ditplan::{PlanError, Result};

#[derive(Parser)]
#[command(
    name = "ditplan",
    version,
    about = "Memory, parallelism and schedule planner for video DiT training and inference"
)]
struct Cli {
    /// JSON config; the built-in reference scenario when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
    /// Reserved. Planning is deterministic.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Json,
    Table,
    Csv,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Json => Format::Json,
            OutFormat::Table => Format::Table,
            OutFormat::Csv => Format::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Plan(PlanCommand),
    #[command(subcommand)]
    Buckets(BucketsCommand),
    /// Step estimate of the configured strategy for each stage.
    Simulate {
        #[arg(long)]
        stage: Option<String>,
    },
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Search parallel, recompute and offload strategies for every workload.
    Train(TrainArgs),
    /// Diffusion-cache schedule and multi-device DiT latency.
    Infer(InferArgs),
    /// Pick chunks to recompute for a per-layer memory saving.
    Recompute(RecomputeArgs),
    /// Sliding temporal windows over a long latent.
    Windows {
        #[arg(long)]
        n_prime: u64,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        stride: u64,
    },
    /// VAE tile layout, blend weights and parallel speedup.
    VaeTiles {
        #[arg(long, value_parser = parse_triple)]
        latent: [u64; 3],
        #[arg(long, value_parser = parse_triple)]
        tile: [u64; 3],
        #[arg(long, value_parser = parse_triple, default_value = "0,0,0")]
        overlap: [u64; 3],
        #[arg(long, default_value_t = 1)]
        devices: u64,
    },
}

#[derive(Subcommand)]
enum BucketsCommand {
    /// Token balance across the configured buckets.
    Check {
        #[arg(long, default_value_t = report::BUCKET_TOLERANCE)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OffloadArg {
    Auto,
    Off,
    OptimizerOnly,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    offload: Option<OffloadArg>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum CacheArg {
    Dit,
    Attn,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long, default_value_t = 50)]
    steps: u64,
    #[arg(long, default_value_t = 10)]
    warmup: u64,
    #[arg(long, default_value_t = 3)]
    interval: u64,
    #[arg(long, value_enum, default_value_t = CacheArg::Dit)]
    mode: CacheArg,
    /// Relative cost of a cached step; the mode's default when omitted.
    #[arg(long)]
    cached_fraction: Option<f64>,
    /// Single-device latency of one video, for the parallel estimate.
    #[arg(long, default_value_t = 1000.0)]
    single_device_ms: f64,
    #[arg(long, default_value_t = 1)]
    tp: u64,
    #[arg(long, default_value_t = 1)]
    nodes: u64,
    #[arg(long, default_value_t = 0.85)]
    tp_efficiency: f64,
}

#[derive(Args)]
struct RecomputeArgs {
    /// Required saving per layer, MiB.
    #[arg(long)]
    required_mb: f64,
    /// JSON chunk table overriding the config's.
    #[arg(long)]
    chunk_table: Option<PathBuf>,
    #[arg(long)]
    batch: Option<u64>,
    #[arg(long)]
    seq: Option<u64>,
    #[arg(long)]
    tp: Option<u64>,
    #[arg(long, default_value_t = 1)]
    cp: u64,
}

fn parse_triple(s: &str) -> std::result::Result<[u64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected T,H,W but got `{s}`"));
    }
    let mut out = [0u64; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("`{p}`: {e}"))?;
    }
    Ok(out)
}

fn load_config(path: Option<&Path>) -> Result<PlannerConfig> {
    match path {
        Some(p) => PlannerConfig::from_path(p),
        None => Ok(PlannerConfig::reference()),
    }
}

fn write_out(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Renders a non-report result: JSON for `json`, otherwise the given rows
/// as CSV or as an aligned table.
fn render_value<T: Serialize>(
    value: &T,
    format: Format,
    header: &[&str],
    rows: Vec<Vec<String>>,
) -> Result<String> {
    match format {
        Format::Json => report::to_fixed_json(value),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let err = |e: csv::Error| PlanError::Io(e.to_string());
            w.write_record(header).map_err(err)?;
            for row in &rows {
                w.write_record(row).map_err(err)?;
            }
            let bytes = w.into_inner().map_err(|e| PlanError::Io(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| PlanError::Io(e.to_string()))
        }
        Format::Table => {
            let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for row in &rows {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.len());
                }
            }
            let mut out = String::new();
            let line = |out: &mut String, cells: Vec<&str>| {
                let padded: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect();
                writeln!(out, "{}", padded.join("  ").trim_end()).unwrap();
            };
            line(&mut out, header.to_vec());
            for row in &rows {
                line(&mut out, row.iter().map(String::as_str).collect());
            }
            Ok(out)
        }
    }
}

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

#[derive(Serialize)]
struct InferReport {
    cache: CacheSchedule,
    parallel: DitLatency,
    /// Cache speedup times DiT parallel speedup.
    composite_speedup: f64,
}

fn cmd_infer(args: &InferArgs, format: Format) -> Result<String> {
    let mode = match args.mode {
        CacheArg::Dit => CacheMode::DitLayerCache,
        CacheArg::Attn => CacheMode::AttentionCache,
    };
    let fraction = args
        .cached_fraction
        .unwrap_or(mode.default_cached_fraction());
    let cache = plan_cache(args.steps, args.warmup, args.interval, fraction, mode)?;
    let parallel = dit_parallel_latency(
        args.single_device_ms,
        args.tp,
        args.nodes,
        args.tp_efficiency,
    );
    let composite = composite_speedup(&[cache.speedup, parallel.speedup]);
    let rows = cache
        .per_step_full
        .iter()
        .enumerate()
        .map(|(i, &full)| {
            vec![
                i.to_string(),
                if full { "full" } else { "cached" }.to_string(),
                f3(if full { 1.0 } else { fraction }),
            ]
        })
        .collect();
    let report = InferReport {
        cache,
        parallel,
        composite_speedup: composite,
    };
    render_value(&report, format, &["step", "kind", "cost"], rows)
}

#[derive(Serialize)]
struct RankedChunk {
    name: String,
    mib: f64,
    latency_ms: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct RecomputeReport {
    shape: ActShape,
    required_mib: f64,
    ranking: Vec<RankedChunk>,
    plan: RecomputePlan,
    /// Exhaustive optimum, when the table is small enough.
    optimum: Option<RecomputePlan>,
}

fn cmd_recompute(args: &RecomputeArgs, config: &PlannerConfig, format: Format) -> Result<String> {
    let table = match &args.chunk_table {
        Some(p) => ChunkTable::from_json_str(&std::fs::read_to_string(p)?)?,
        None => config.chunk_table(),
    };
    table.check()?;
    if args.required_mb.is_nan() || args.required_mb < 0.0 {
        return Err(PlanError::Config(
            "--required-mb must be non-negative".into(),
        ));
    }
    let r = table.reference;
    let shape = ActShape::new(
        args.batch.unwrap_or(r.batch as u64),
        args.seq.unwrap_or(r.seq as u64),
        config.model.hidden_size,
        config.model.num_heads,
        args.tp.unwrap_or(r.tp as u64),
    )
    .with_cp(args.cp);
    let costs = table.evaluate(&shape);
    let required = (args.required_mb * MIB).round() as u64;
    let plan = plan_recompute(&costs, required);
    let optimum = if costs.iter().filter(|c| c.recomputable).count() <= MAX_EXHAUSTIVE_CHUNKS {
        Some(brute_force_recompute(&costs, required)?)
    } else {
        None
    };
    let ranking: Vec<RankedChunk> = ditplan::recompute::rank_by_ratio(&costs)
        .into_iter()
        .map(|c| RankedChunk {
            name: c.name.clone(),
            mib: c.mib(),
            latency_ms: c.latency_ms,
            ratio: c.mib() / c.latency_ms,
        })
        .collect();
    let rows = ranking
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                f3(c.mib),
                f3(c.latency_ms),
                f3(c.ratio),
                plan.contains(&c.name).to_string(),
            ]
        })
        .collect();
    let report = RecomputeReport {
        shape,
        required_mib: args.required_mb,
        ranking,
        plan,
        optimum,
    };
    render_value(
        &report,
        format,
        &["chunk", "mib", "latency_ms", "ratio", "selected"],
        rows,
    )
}

fn cmd_windows(n_prime: u64, n: u64, stride: u64, format: Format) -> Result<String> {
    let plan: WindowPlan = plan_temporal_windows(n_prime, n, stride)?;
    let rows = plan
        .ranges
        .iter()
        .enumerate()
        .map(|(k, (a, b))| vec![k.to_string(), a.to_string(), b.to_string()])
        .collect();
    render_value(&plan, format, &["clip", "start", "end"], rows)
}

fn cmd_vae(
    latent: [u64; 3],
    tile: [u64; 3],
    overlap: [u64; 3],
    devices: u64,
    format: Format,
) -> Result<String> {
    let plan: TilePlan = plan_vae_tiles(latent, tile, overlap, devices)?;
    let rows = plan
        .tiles
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut row = vec![i.to_string(), (i as u64 % devices).to_string()];
            row.extend(t.start.iter().map(u64::to_string));
            row.extend(t.size.iter().map(u64::to_string));
            row
        })
        .collect();
    render_value(
        &plan,
        format,
        &[
            "tile", "device", "t0", "h0", "w0", "t_len", "h_len", "w_len",
        ],
        rows,
    )
}

fn cmd_buckets(config: &PlannerConfig, tolerance: f64, format: Format) -> Result<String> {
    let mut buckets = config.buckets.clone();
    if buckets.is_empty() {
        buckets = config
            .stages
            .iter()
            .flat_map(|s| s.buckets().map(|(_, b)| *b))
            .collect();
    }
    let report: BalanceReport =
        check_token_balance(&buckets, tolerance, &config.vae, &config.model)?;
    let rows = report
        .entries
        .iter()
        .map(|e| {
            vec![
                e.bucket.to_string(),
                e.aligned.to_string(),
                e.tokens.to_string(),
                e.tokens_batch.to_string(),
            ]
        })
        .collect();
    render_value(
        &report,
        format,
        &["bucket", "aligned", "tokens", "tokens_batch"],
        rows,
    )
}

fn emit_report(report: &PlanReport, format: Format, out: Option<&Path>) -> Result<u8> {
    report::emit(report, format, out)?;
    Ok(if report.has_infeasible_workload() {
        3
    } else {
        0
    })
}

fn run(cli: Cli) -> Result<u8> {
    let format: Format = cli.format.into();
    let out = cli.out.as_deref();
    let mut config = load_config(cli.config.as_deref())?;
    let text = match cli.command {
        Command::Plan(PlanCommand::Train(args)) => {
            if let Some(mode) = args.offload {
                config.planner.offload = match mode {
                    OffloadArg::Auto => OffloadMode::Auto,
                    OffloadArg::Off => OffloadMode::Off,
                    OffloadArg::OptimizerOnly => OffloadMode::OptimizerOnly,
                };
            }
            let report = report::run_train_plan(&config, args.threads)?;
            return emit_report(&report, format, out);
        }
        Command::Simulate { stage } => {
            let report = report::run_simulate(&config, stage.as_deref())?;
            return emit_report(&report, format, out);
        }
        Command::Plan(PlanCommand::Infer(args)) => cmd_infer(&args, format)?,
        Command::Plan(PlanCommand::Recompute(args)) => cmd_recompute(&args, &config, format)?,
        Command::Plan(PlanCommand::Windows { n_prime, n, stride }) => {
            cmd_windows(n_prime, n, stride, format)?
        }
        Command::Plan(PlanCommand::VaeTiles {
            latent,
            tile,
            overlap,
            devices,
        }) => cmd_vae(latent, tile, overlap, devices, format)?,
        Command::Buckets(BucketsCommand::Check { tolerance }) => {
            cmd_buckets(&config, tolerance, format)?
        }
    };
    write_out(&text, out)?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
