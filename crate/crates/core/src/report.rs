//! Plan-search driver and report emission.
//!
//! `run_train_plan` walks every workload (configured buckets and stage
//! buckets), enumerates parallel splits, balances offload and recompute
//! over the CP ladder of each TP degree, estimates the step and ranks the
//! feasible results. Output is independent of the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::bucket::VaeSpec;
use crate::bucket::{check_token_balance, token_count, Bucket};
use crate::comm::{enumerate_parallel_configs, RejectedConfig};
use crate::config::{OverlapConfig, ParallelConfig, PlannerConfig, PlannerKnobs, Violation};
use crate::error::{PlanError, Result};
use crate::memory::{ChunkTable, MemoryBreakdown};
use crate::offload::{
    balance_strategies, plan_candidate, CombinedPlan, OffloadPlan, PlanContext, Workload,
};
use crate::recompute::RecomputePlan;
use crate::sim::{estimate_step, StepEstimate, StepInputs};

/// Relative token deviation tolerated between configured buckets.
pub const BUCKET_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarningKind {
    BucketImbalance,
    CpGating,
    FittedInput,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Warning {
    pub kind: WarningKind,
    pub workload: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputEcho {
    pub config: PlannerConfig,
    /// Inputs whose values were fitted to reference measurements.
    pub fitted: Vec<String>,
    /// Sections left at their built-in defaults.
    pub defaulted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedPlan {
    pub parallel: ParallelConfig,
    pub recompute: RecomputePlan,
    pub offload: OffloadPlan,
    pub memory: MemoryBreakdown,
    pub estimate: StepEstimate,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfeasiblePlan {
    pub parallel: ParallelConfig,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadReport {
    pub name: String,
    pub bucket: Bucket,
    pub tokens: u64,
    /// Feasible plans, fastest first.
    pub ranked: Vec<RankedPlan>,
    pub infeasible: Vec<InfeasiblePlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport {
    pub input: InputEcho,
    pub workloads: Vec<WorkloadReport>,
    pub warnings: Vec<Warning>,
}

impl PlanReport {
    pub fn plan_count(&self) -> usize {
        self.workloads
            .iter()
            .map(|w| w.ranked.len() + w.infeasible.len())
            .sum()
    }

    /// True when some workload has no feasible plan.
    pub fn has_infeasible_workload(&self) -> bool {
        self.workloads.iter().any(|w| w.ranked.is_empty())
    }
}

struct WorkloadSpec {
    name: String,
    bucket: Bucket,
    global_batch: u64,
}

fn workloads(config: &PlannerConfig, only_stage: Option<&str>) -> Result<Vec<WorkloadSpec>> {
    let mut out = Vec::new();
    if only_stage.is_none() {
        // the configured strategy fixes the global batch of plain buckets
        let (dp, ga) = config
            .parallel
            .map_or((config.cluster.total_devices(), 1), |p| {
                (p.dp, p.grad_accum)
            });
        for b in &config.buckets {
            out.push(WorkloadSpec {
                name: format!("bucket:{b}"),
                bucket: *b,
                global_batch: b.batch * dp * ga,
            });
        }
    }
    for stage in &config.stages {
        if only_stage.is_some_and(|s| s != stage.name) {
            continue;
        }
        for (kind, b) in stage.buckets() {
            out.push(WorkloadSpec {
                name: format!("{}/{kind}", stage.name),
                bucket: *b,
                global_batch: stage.global_batch,
            });
        }
    }
    if let Some(stage) = only_stage {
        if out.is_empty() {
            return Err(PlanError::Config(format!("unknown stage `{stage}`")));
        }
    }
    Ok(out)
}

fn grad_accum(spec: &WorkloadSpec, par: &ParallelConfig) -> u64 {
    spec.global_batch
        .div_ceil(spec.bucket.batch * par.dp)
        .max(1)
}

fn echo(config: &PlannerConfig) -> InputEcho {
    let mut fitted = Vec::new();
    if config.model.fitted {
        fitted.push("model".to_string());
    }
    if config.chunks.is_none() {
        fitted.push("chunks".to_string());
    }
    let mut defaulted = Vec::new();
    if config.planner == PlannerKnobs::default() {
        defaulted.push("planner".to_string());
    }
    if config.overlap == OverlapConfig::default() {
        defaulted.push("overlap".to_string());
    }
    if config.vae == VaeSpec::default() {
        defaulted.push("vae".to_string());
    }
    if config.chunks.is_none() {
        defaulted.push("chunks".to_string());
    }
    InputEcho {
        config: config.clone(),
        fitted,
        defaulted,
    }
}

fn reject_violations(violations: Vec<Violation>) -> Result<()> {
    if violations.is_empty() {
        return Ok(());
    }
    let text: Vec<String> = violations
        .iter()
        .map(|v| format!("{}: {}", v.field, v.message))
        .collect();
    Err(PlanError::Config(text.join("; ")))
}

fn ranked(
    ctx: &PlanContext<'_>,
    plan: CombinedPlan,
    work: Workload,
) -> std::result::Result<RankedPlan, InfeasiblePlan> {
    if !plan.feasible {
        return Err(InfeasiblePlan {
            parallel: plan.parallel,
            diagnostics: plan.diagnostics,
        });
    }
    let inputs = StepInputs {
        arch: ctx.arch,
        cluster: ctx.cluster,
        par: &plan.parallel,
        batch: work.batch,
        seq: work.seq,
        recompute: &plan.recompute,
        offload: &plan.offload,
        comm: &plan.comm,
        memory: &plan.memory,
        efficiency: ctx.knobs.efficiency,
    };
    match estimate_step(&inputs) {
        Ok(estimate) => Ok(RankedPlan {
            parallel: plan.parallel,
            recompute: plan.recompute,
            offload: plan.offload,
            memory: plan.memory,
            estimate,
            diagnostics: plan.diagnostics,
        }),
        Err(err) => {
            let mut diagnostics = plan.diagnostics;
            diagnostics.push(err.to_string());
            Err(InfeasiblePlan {
                parallel: plan.parallel,
                diagnostics,
            })
        }
    }
}

fn sort_workload(report: &mut WorkloadReport) {
    report.ranked.sort_by(|a, b| {
        a.estimate
            .step_time_ms
            .total_cmp(&b.estimate.step_time_ms)
            .then(a.parallel.cmp(&b.parallel))
    });
    report.infeasible.sort_by_key(|a| a.parallel);
}

fn train_workload(
    ctx: &PlanContext<'_>,
    spec: &WorkloadSpec,
    config: &PlannerConfig,
) -> Result<(WorkloadReport, Vec<Warning>)> {
    let shape = token_count(&spec.bucket, &config.vae, ctx.arch)?;
    let work = Workload {
        batch: spec.bucket.batch,
        seq: shape.tokens,
    };
    let enumeration = enumerate_parallel_configs(&ctx.comm(), work.batch, work.seq, 1);

    let mut report = WorkloadReport {
        name: spec.name.clone(),
        bucket: spec.bucket,
        tokens: shape.tokens,
        ranked: Vec::new(),
        infeasible: Vec::new(),
    };
    let mut warnings = Vec::new();
    for rejected in &enumeration.rejected {
        let rejected = RejectedConfig {
            config: rejected
                .config
                .with_grad_accum(grad_accum(spec, &rejected.config)),
            reason: rejected.reason.clone(),
        };
        warnings.push(Warning {
            kind: WarningKind::CpGating,
            workload: Some(spec.name.clone()),
            message: format!("{}: {}", rejected.config, rejected.reason),
        });
        report.infeasible.push(InfeasiblePlan {
            parallel: rejected.config,
            diagnostics: vec![rejected.reason.clone()],
        });
    }

    // one CP ladder per TP degree, smallest CP first
    let mut ladders: BTreeMap<u64, Vec<ParallelConfig>> = BTreeMap::new();
    for cand in &enumeration.candidates {
        let par = cand.config;
        let par = par.with_grad_accum(grad_accum(spec, &par));
        ladders.entry(par.tp).or_default().push(par);
    }
    for ladder in ladders.values_mut() {
        ladder.sort_by_key(|p| p.cp);
        if let Some(plan) = balance_strategies(ctx, work, ladder) {
            match ranked(ctx, plan, work) {
                Ok(r) => report.ranked.push(r),
                Err(i) => report.infeasible.push(i),
            }
        }
    }
    sort_workload(&mut report);
    if report.ranked.is_empty() {
        warnings.push(Warning {
            kind: WarningKind::Infeasible,
            workload: Some(spec.name.clone()),
            message: format!("no feasible plan for {} tokens per sample", shape.tokens),
        });
    }
    Ok((report, warnings))
}

fn with_pool<T: Send>(threads: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PlanError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

fn common_warnings(config: &PlannerConfig, echo: &InputEcho) -> Result<Vec<Warning>> {
    let mut warnings = Vec::new();
    for item in &echo.fitted {
        warnings.push(Warning {
            kind: WarningKind::FittedInput,
            workload: None,
            message: format!("`{item}` uses values fitted to the reference activation table"),
        });
    }
    if config.buckets.len() > 1 {
        let balance = check_token_balance(
            &config.buckets,
            BUCKET_TOLERANCE,
            &config.vae,
            &config.model,
        )?;
        for pair in &balance.flagged {
            warnings.push(Warning {
                kind: WarningKind::BucketImbalance,
                workload: None,
                message: format!(
                    "buckets {} and {} differ by {:.3} in tokens per micro-batch",
                    balance.entries[pair.first].bucket,
                    balance.entries[pair.second].bucket,
                    pair.deviation
                ),
            });
        }
    }
    Ok(warnings)
}

fn assemble(
    echo: InputEcho,
    results: Vec<Result<(WorkloadReport, Vec<Warning>)>>,
    mut warnings: Vec<Warning>,
) -> Result<PlanReport> {
    let mut workloads = Vec::new();
    for result in results {
        let (report, w) = result?;
        workloads.push(report);
        warnings.extend(w);
    }
    Ok(PlanReport {
        input: echo,
        workloads,
        warnings,
    })
}

/// Full search over parallel splits for every workload.
pub fn run_train_plan(config: &PlannerConfig, threads: usize) -> Result<PlanReport> {
    reject_violations(config.violations())?;
    let table: ChunkTable = config.chunk_table();
    table.check()?;
    let ctx = PlanContext {
        arch: &config.model,
        cluster: &config.cluster,
        dtypes: &config.dtypes,
        table: &table,
        knobs: &config.planner,
        overlap: &config.overlap,
    };
    let specs = workloads(config, None)?;
    let echo = echo(config);
    let warnings = common_warnings(config, &echo)?;
    let results = with_pool(threads, || {
        specs
            .par_iter()
            .map(|spec| train_workload(&ctx, spec, config))
            .collect::<Vec<_>>()
    })?;
    assemble(echo, results, warnings)
}

/// Evaluates the configured fixed strategy on every stage workload, or on
/// one named stage.
pub fn run_simulate(config: &PlannerConfig, stage: Option<&str>) -> Result<PlanReport> {
    reject_violations(config.violations())?;
    let fixed = config
        .parallel
        .ok_or_else(|| PlanError::Config("`parallel` is required for simulate".into()))?;
    let table = config.chunk_table();
    table.check()?;
    let ctx = PlanContext {
        arch: &config.model,
        cluster: &config.cluster,
        dtypes: &config.dtypes,
        table: &table,
        knobs: &config.planner,
        overlap: &config.overlap,
    };
    let echo = echo(config);
    let warnings = common_warnings(config, &echo)?;
    let results = workloads(config, stage)?
        .iter()
        .map(|spec| {
            let shape = token_count(&spec.bucket, &config.vae, &config.model)?;
            let work = Workload {
                batch: spec.bucket.batch,
                seq: shape.tokens,
            };
            let par = fixed.with_grad_accum(grad_accum(spec, &fixed));
            let mut report = WorkloadReport {
                name: spec.name.clone(),
                bucket: spec.bucket,
                tokens: shape.tokens,
                ranked: Vec::new(),
                infeasible: Vec::new(),
            };
            let mut warnings = Vec::new();
            match ranked(&ctx, plan_candidate(&ctx, &par, work), work) {
                Ok(r) => report.ranked.push(r),
                Err(i) => {
                    warnings.push(Warning {
                        kind: WarningKind::Infeasible,
                        workload: Some(spec.name.clone()),
                        message: format!(
                            "{par} is infeasible for {} tokens per sample",
                            shape.tokens
                        ),
                    });
                    report.infeasible.push(i);
                }
            }
            Ok((report, warnings))
        })
        .collect();
    assemble(echo, results, warnings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Table,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            other => Err(PlanError::Config(format!("unknown format `{other}`"))),
        }
    }
}

/// Pretty JSON with every float printed to three decimals.
pub fn to_fixed_json<T: Serialize>(value: &T) -> Result<String> {
    let value = serde_json::to_value(value).map_err(|e| PlanError::Config(e.to_string()))?;
    let mut out = String::new();
    write_value(&mut out, &value, 0);
    out.push('\n');
    Ok(out)
}

fn write_value(out: &mut String, value: &Value, depth: usize) {
    let pad = |out: &mut String, d: usize| out.extend(std::iter::repeat_n("  ", d));
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => write!(out, "{u}").unwrap(),
            (None, Some(i), _) => write!(out, "{i}").unwrap(),
            (_, _, Some(f)) => write!(out, "{}", fixed3(f)).unwrap(),
            _ => out.push_str("null"),
        },
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, depth + 1);
                write_value(out, item, depth + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            out.push_str("{\n");
            for (i, (k, v)) in map.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(out, v, depth + 1);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push('}');
        }
    }
}

/// Three decimals, with negative zero folded into zero.
fn fixed3(f: f64) -> String {
    let s = format!("{f:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Chunk names may contain `+`, so lists are joined with `|`.
const LIST_SEP: &str = " | ";

const CSV_HEADER: [&str; 16] = [
    "workload",
    "tokens",
    "parallel",
    "feasible",
    "rank",
    "recompute",
    "activation_offload",
    "optimizer_offloaded",
    "peak_mem_gb",
    "t_compute_ms",
    "t_recompute_ms",
    "t_exposed_comm_ms",
    "t_exposed_offload_ms",
    "step_time_ms",
    "mfu",
    "diagnostics",
];

pub fn to_csv(report: &PlanReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| PlanError::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for wl in &report.workloads {
        for (rank, p) in wl.ranked.iter().enumerate() {
            let e = &p.estimate;
            w.write_record([
                wl.name.clone(),
                wl.tokens.to_string(),
                p.parallel.to_string(),
                "true".into(),
                (rank + 1).to_string(),
                p.recompute.selected.join(LIST_SEP),
                p.offload.activation_offload_set.join(LIST_SEP),
                p.offload.optimizer_offloaded.to_string(),
                fixed3(p.memory.total / 1e9),
                fixed3(e.t_compute_ms),
                fixed3(e.t_recompute_ms),
                fixed3(e.t_exposed_comm_ms),
                fixed3(e.t_exposed_offload_ms),
                fixed3(e.step_time_ms),
                fixed3(e.mfu),
                p.diagnostics.join("; "),
            ])
            .map_err(csv_err)?;
        }
        for p in &wl.infeasible {
            let mut row = vec![
                wl.name.clone(),
                wl.tokens.to_string(),
                p.parallel.to_string(),
                "false".into(),
            ];
            row.extend(std::iter::repeat_n(String::new(), 11));
            row.push(p.diagnostics.join("; "));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| PlanError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| PlanError::Io(e.to_string()))
}

pub fn to_table(report: &PlanReport) -> String {
    let mut out = String::new();
    for wl in &report.workloads {
        writeln!(out, "{} ({} tokens/sample)", wl.name, wl.tokens).unwrap();
        writeln!(
            out,
            "  {:<4} {:<18} {:>12} {:>10} {:>8}  strategy",
            "rank", "parallel", "step_ms", "peak_gb", "mfu"
        )
        .unwrap();
        for (i, p) in wl.ranked.iter().enumerate() {
            let mut parts = Vec::new();
            if !p.recompute.selected.is_empty() {
                parts.push(format!("recompute {}", p.recompute.selected.join(LIST_SEP)));
            }
            if !p.offload.activation_offload_set.is_empty() {
                parts.push(format!(
                    "offload {}",
                    p.offload.activation_offload_set.join(LIST_SEP)
                ));
            }
            if p.offload.optimizer_offloaded {
                parts.push("optimizer on host".to_string());
            }
            let strategy = parts.join("; ");
            writeln!(
                out,
                "  {:<4} {:<18} {:>12} {:>10} {:>8}  {}",
                i + 1,
                p.parallel.to_string(),
                fixed3(p.estimate.step_time_ms),
                fixed3(p.memory.total / 1e9),
                fixed3(p.estimate.mfu),
                if strategy.is_empty() { "-" } else { &strategy }
            )
            .unwrap();
        }
        for p in &wl.infeasible {
            writeln!(
                out,
                "  {:<4} {:<18} infeasible: {}",
                "-",
                p.parallel.to_string(),
                p.diagnostics.join("; ")
            )
            .unwrap();
        }
    }
    if !report.warnings.is_empty() {
        writeln!(out, "warnings:").unwrap();
        for w in &report.warnings {
            match &w.workload {
                Some(name) => writeln!(out, "  [{name}] {}", w.message).unwrap(),
                None => writeln!(out, "  {}", w.message).unwrap(),
            }
        }
    }
    out
}

pub fn render(report: &PlanReport, format: Format) -> Result<String> {
    match format {
        Format::Json => to_fixed_json(report),
        Format::Csv => to_csv(report),
        Format::Table => Ok(to_table(report)),
    }
}

/// Writes the rendered report to `path`, or to stdout when `path` is None.
pub fn emit(report: &PlanReport, format: Format, path: Option<&Path>) -> Result<()> {
    let text = render(report, format)?;
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Process exit code for an error: 2 config, 3 infeasible, 4 I/O.
pub fn exit_code(err: &PlanError) -> i32 {
    match err {
        PlanError::Io(_) => 4,
        PlanError::Overflow { .. } => 3,
        _ => 2,
    }
}
