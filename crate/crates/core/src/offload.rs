//! Host offload of optimizer states and activations, and the combined
//! memory strategy (offload, then recompute, then more CP) for one
//! candidate parallel configuration.

use std::cmp::Ordering;

use serde::Serialize;

use crate::comm::{cp_gate_and_comm, CommContext, CommPlan, DpWindows};
use crate::config::{
    ClusterSpec, DTypePolicy, ModelArch, OffloadMode, OverlapConfig, ParallelConfig, PlannerKnobs,
};
use crate::memory::{model_states_bytes, ActShape, ChunkCost, ChunkTable, MemoryBreakdown, MIB};
use crate::recompute::{plan_recompute, RecomputePlan};
use crate::sim::layer_forward_ms;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OffloadPlan {
    pub optimizer_offloaded: bool,
    /// D2H plus H2D, once per optimizer step.
    pub optimizer_transfer_ms: f64,
    pub optimizer_exposed_ms: f64,
    pub activation_offload_set: Vec<String>,
    pub activation_bytes_per_layer: u64,
    /// One direction, one layer.
    pub activation_transfer_ms_per_layer: f64,
    pub activation_exposed_ms_per_microstep: f64,
    /// Per-device PCIe bandwidth after the host write cap, bytes/s.
    pub effective_pcie_bw: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OptimizerOffload {
    pub d2h_ms: f64,
    pub h2d_ms: f64,
    pub transfer_ms: f64,
    pub exposed_ms: f64,
}

/// Optimizer states leave the device after the update and return for the
/// next one. D2H hides behind the first forward micro-step, H2D behind the
/// last backward micro-step.
pub fn plan_optimizer_offload(
    opt_bytes_per_rank: f64,
    pcie_bw: f64,
    first_fwd_window_ms: f64,
    last_bwd_window_ms: f64,
) -> OptimizerOffload {
    let one_way = opt_bytes_per_rank / pcie_bw * 1e3;
    OptimizerOffload {
        d2h_ms: one_way,
        h2d_ms: one_way,
        transfer_ms: 2.0 * one_way,
        exposed_ms: (one_way - first_fwd_window_ms).max(0.0)
            + (one_way - last_bwd_window_ms).max(0.0),
    }
}

/// Per-device host link bandwidth when `concurrent_devices` transfer at
/// once: devices in one NUMA domain share its DDR write bandwidth.
pub fn effective_pcie_bw(cluster: &ClusterSpec, concurrent_devices: u64) -> f64 {
    let sharing = concurrent_devices.clamp(1, cluster.devices_per_numa.max(1));
    cluster
        .pcie_bw_per_device
        .min(cluster.host_write_bw_per_numa / sharing as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ActivationOffload {
    pub selected: Vec<String>,
    pub bytes_per_layer: u64,
    pub transfer_ms_per_layer: f64,
    /// Forward plus backward, one layer.
    pub exposed_ms_per_layer: f64,
    pub feasible: bool,
}

/// Attention-class chunks first (their recompute is the most expensive to
/// avoid), then by size, then by name.
fn offload_order(a: &&ChunkCost, b: &&ChunkCost) -> Ordering {
    b.attention
        .cmp(&a.attention)
        .then(b.bytes.cmp(&a.bytes))
        .then_with(|| a.name.cmp(&b.name))
}

fn activation_offload(
    picked: &[&ChunkCost],
    block_compute_ms: f64,
    bw: f64,
    feasible: bool,
) -> ActivationOffload {
    let bytes: u64 = picked.iter().map(|c| c.bytes).sum();
    let transfer = bytes as f64 / bw * 1e3;
    ActivationOffload {
        selected: picked.iter().map(|c| c.name.clone()).collect(),
        bytes_per_layer: bytes,
        transfer_ms_per_layer: transfer,
        exposed_ms_per_layer: 2.0 * (transfer - block_compute_ms).max(0.0),
        feasible,
    }
}

/// Offloads chunks in [`offload_order`] until `deficit_bytes` per layer is
/// covered. D2H of one block overlaps the next block's forward; H2D
/// mirrors it in backward.
pub fn plan_activation_offload(
    chunks: &[ChunkCost],
    block_compute_ms: f64,
    effective_bw: f64,
    deficit_bytes: u64,
) -> ActivationOffload {
    let mut pool: Vec<&ChunkCost> = chunks.iter().filter(|c| c.offloadable).collect();
    pool.sort_by(offload_order);
    let mut picked = Vec::new();
    let mut covered = 0u64;
    for chunk in pool {
        if covered >= deficit_bytes {
            break;
        }
        covered += chunk.bytes;
        picked.push(chunk);
    }
    activation_offload(
        &picked,
        block_compute_ms,
        effective_bw,
        covered >= deficit_bytes,
    )
}

/// Like [`plan_activation_offload`] but only takes chunks whose cumulative
/// transfer still hides completely behind one block's forward compute and
/// whose host footprint fits.
fn overlapped_activation_offload(
    chunks: &[&ChunkCost],
    block_compute_ms: f64,
    effective_bw: f64,
    deficit_bytes: u64,
    host_budget_per_layer: f64,
) -> ActivationOffload {
    let mut pool: Vec<&ChunkCost> = chunks.to_vec();
    pool.sort_by(offload_order);
    let mut picked = Vec::new();
    let mut covered = 0u64;
    for chunk in pool {
        if covered >= deficit_bytes {
            break;
        }
        let bytes = covered + chunk.bytes;
        let transfer = bytes as f64 / effective_bw * 1e3;
        if transfer <= block_compute_ms && bytes as f64 <= host_budget_per_layer {
            covered = bytes;
            picked.push(chunk);
        }
    }
    activation_offload(
        &picked,
        block_compute_ms,
        effective_bw,
        covered >= deficit_bytes,
    )
}

/// Micro-batch shape being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Workload {
    pub batch: u64,
    /// Tokens per sample.
    pub seq: u64,
}

/// Read-only inputs of every strategy evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub arch: &'a ModelArch,
    pub cluster: &'a ClusterSpec,
    pub dtypes: &'a DTypePolicy,
    pub table: &'a ChunkTable,
    pub knobs: &'a PlannerKnobs,
    pub overlap: &'a OverlapConfig,
}

impl<'a> PlanContext<'a> {
    pub fn comm(&self) -> CommContext<'a> {
        CommContext {
            arch: self.arch,
            cluster: self.cluster,
            dtypes: self.dtypes,
            overlap: self.overlap,
            collective_latency_ms: self.knobs.collective_latency_ms,
        }
    }

    pub fn shape(&self, par: &ParallelConfig, work: Workload) -> ActShape {
        ActShape::new(
            work.batch,
            work.seq,
            self.arch.hidden_size,
            self.arch.num_heads,
            par.tp,
        )
        .with_cp(par.cp)
    }
}

/// Recompute, offload and parallel choice for one workload, with the memory
/// it leaves on the device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CombinedPlan {
    pub parallel: ParallelConfig,
    pub recompute: RecomputePlan,
    pub offload: OffloadPlan,
    pub comm: CommPlan,
    pub memory: MemoryBreakdown,
    /// Activation bytes per layer that had to be removed before any strategy.
    pub deficit_per_layer: u64,
    pub feasible: bool,
    pub diagnostics: Vec<String>,
}

impl CombinedPlan {
    fn rejected(parallel: ParallelConfig, reason: String) -> Self {
        Self {
            parallel,
            recompute: RecomputePlan::default(),
            offload: OffloadPlan::default(),
            comm: CommPlan::default(),
            memory: MemoryBreakdown::default(),
            deficit_per_layer: 0,
            feasible: false,
            diagnostics: vec![reason],
        }
    }
}

/// Evaluates a single candidate: offload whatever hides behind compute,
/// recompute the rest of the deficit.
pub fn plan_candidate(ctx: &PlanContext<'_>, par: &ParallelConfig, work: Workload) -> CombinedPlan {
    let gate = cp_gate_and_comm(
        work.seq,
        work.batch,
        ctx.arch.hidden_size,
        par.cp,
        ctx.dtypes.act_bytes,
        ctx.cluster.inter_node_bw,
        ctx.knobs.collective_latency_ms,
    );
    if let Some(reason) = gate.violation {
        return CombinedPlan::rejected(*par, reason);
    }

    let layers = ctx.arch.num_layers;
    let costs = ctx.table.evaluate(&ctx.shape(par, work));
    let full_layer: u64 = costs.iter().map(|c| c.bytes).sum();
    let states = model_states_bytes(ctx.arch.params(), ctx.dtypes, par);
    let block_ms = layer_forward_ms(
        ctx.arch,
        ctx.cluster,
        par,
        work.batch,
        work.seq,
        ctx.knobs.efficiency,
    );
    let windows = DpWindows {
        first_forward_ms: layers as f64 * block_ms,
        last_backward_ms: 2.0 * layers as f64 * block_ms,
    };
    let bw = effective_pcie_bw(ctx.cluster, ctx.cluster.devices_per_node);
    let device_mem = ctx.cluster.device_mem;
    let mut diagnostics = Vec::new();

    let everything_on_device = states.model_states() + (layers + 1) as f64 * full_layer as f64;
    let opt_offload = plan_optimizer_offload(
        states.optimizer(),
        bw,
        windows.first_forward_ms,
        windows.last_backward_ms,
    );
    let offload_optimizer = match ctx.knobs.offload {
        OffloadMode::Off => false,
        OffloadMode::OptimizerOnly => true,
        OffloadMode::Auto => everything_on_device > device_mem && opt_offload.exposed_ms == 0.0,
    };

    let resident = MemoryBreakdown {
        master: if offload_optimizer {
            0.0
        } else {
            states.master
        },
        moments: if offload_optimizer {
            0.0
        } else {
            states.moments
        },
        ema: if offload_optimizer { 0.0 } else { states.ema },
        ..states
    };
    // one layer's full activations are live while it is recomputed
    let budget = device_mem - resident.model_states() - full_layer as f64;
    let allowance = if layers == 0 {
        f64::INFINITY
    } else {
        budget / layers as f64
    };
    let deficit = if budget < 0.0 {
        full_layer
    } else {
        (full_layer as f64 - allowance).max(0.0).ceil() as u64
    };

    let mut offload = OffloadPlan {
        optimizer_offloaded: offload_optimizer,
        effective_pcie_bw: bw,
        ..OffloadPlan::default()
    };
    if offload_optimizer {
        offload.optimizer_transfer_ms = opt_offload.transfer_ms;
        offload.optimizer_exposed_ms = opt_offload.exposed_ms;
    }

    let threshold = (ctx.knobs.offload_threshold_mib * MIB) as u64;
    let act_offload = if ctx.knobs.offload.allows_activations() && deficit > 0 && layers > 0 {
        let eligible: Vec<&ChunkCost> = costs
            .iter()
            .filter(|c| c.offloadable && c.bytes >= threshold)
            .collect();
        let host_per_layer =
            ctx.cluster.host_mem / ctx.cluster.devices_per_node as f64 / layers as f64;
        overlapped_activation_offload(&eligible, block_ms, bw, deficit, host_per_layer)
    } else {
        ActivationOffload {
            feasible: deficit == 0,
            ..ActivationOffload::default()
        }
    };
    offload.activation_offload_set = act_offload.selected.clone();
    offload.activation_bytes_per_layer = act_offload.bytes_per_layer;
    offload.activation_transfer_ms_per_layer = act_offload.transfer_ms_per_layer;
    offload.activation_exposed_ms_per_microstep = layers as f64 * act_offload.exposed_ms_per_layer;

    let remaining = deficit.saturating_sub(act_offload.bytes_per_layer);
    let leftover: Vec<ChunkCost> = costs
        .iter()
        .filter(|c| !act_offload.selected.contains(&c.name))
        .cloned()
        .collect();
    let recompute = plan_recompute(&leftover, remaining);

    let kept = full_layer
        - act_offload.bytes_per_layer
        - recompute
            .bytes_saved_per_layer
            .min(full_layer - act_offload.bytes_per_layer);
    let act_peak = (layers as f64 * kept as f64) + full_layer as f64;
    let memory = resident.with_activations(act_peak);
    let update_phase = states.model_states();

    let mut feasible = true;
    if budget < 0.0 {
        feasible = false;
        diagnostics.push(format!(
            "{par}: model states and working set need {:.3} GB of {:.3} GB",
            (resident.model_states() + full_layer as f64) / 1e9,
            device_mem / 1e9
        ));
    } else if !recompute.feasible {
        feasible = false;
        diagnostics.push(format!(
            "{par}: activation deficit of {:.3} MiB per layer cannot be covered",
            remaining as f64 / MIB
        ));
    }
    if memory.total > device_mem {
        feasible = false;
        diagnostics.push(format!(
            "{par}: projected peak {:.3} GB exceeds device memory {:.3} GB",
            memory.total / 1e9,
            device_mem / 1e9
        ));
    }
    if update_phase > device_mem {
        feasible = false;
        diagnostics.push(format!(
            "{par}: optimizer update needs {:.3} GB of {:.3} GB",
            update_phase / 1e9,
            device_mem / 1e9
        ));
    }

    CombinedPlan {
        parallel: *par,
        recompute,
        offload,
        comm: ctx.comm().plan(par, work.batch, work.seq, windows),
        memory,
        deficit_per_layer: deficit,
        feasible,
        diagnostics,
    }
}

/// Tries the candidates in order (callers pass increasing CP degree) and
/// returns the first feasible combination. Diagnostics of rejected and
/// infeasible attempts are carried on the result.
pub fn balance_strategies(
    ctx: &PlanContext<'_>,
    work: Workload,
    candidates: &[ParallelConfig],
) -> Option<CombinedPlan> {
    let mut diagnostics = Vec::new();
    let mut last = None;
    for par in candidates {
        let mut plan = plan_candidate(ctx, par, work);
        if plan.feasible {
            diagnostics.append(&mut plan.diagnostics);
            plan.diagnostics = diagnostics;
            return Some(plan);
        }
        diagnostics.extend(plan.diagnostics.iter().cloned());
        last = Some(plan);
    }
    last.map(|mut plan| {
        plan.diagnostics = diagnostics;
        plan
    })
}
