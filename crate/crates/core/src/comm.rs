//! Communication cost model for TP-SP, CP and ZeRO-DP, candidate strategy
//! enumeration, and the audit of parameters that need explicit gradient
//! synchronization inside the TP group.
//!
//! Collectives follow the ring volume model: a collective over `k` ranks
//! moves `(k - 1) / k` of the payload through each link.

use serde::Serialize;

use crate::config::{
    AdaLnMode, ClusterSpec, DTypePolicy, ModelArch, OverlapConfig, ParallelConfig,
};

/// CP is only worth enabling above this many tokens per sequence.
pub const CP_TOKEN_THRESHOLD: u64 = 200_000;

fn ring_factor(k: u64) -> f64 {
    (k as f64 - 1.0) / k as f64
}

fn ms(bytes: f64, bw: f64) -> f64 {
    bytes / bw * 1e3
}

/// Raw and exposed time of one communication class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CommTime {
    pub raw_ms: f64,
    pub exposed_ms: f64,
}

/// Forward TP-SP traffic of one layer: one all-gather and one
/// reduce-scatter of the full `B·S·H` activation, partly hidden by the fused
/// matmul pipeline.
#[allow(clippy::too_many_arguments)]
pub fn tp_sp_layer_comm(
    batch: u64,
    seq: f64,
    hidden: u64,
    tp: u64,
    act_bytes: u8,
    intra_bw: f64,
    overlap_fraction: f64,
    collective_latency_ms: f64,
) -> CommTime {
    if tp <= 1 {
        return CommTime::default();
    }
    let volume = 2.0 * batch as f64 * seq * hidden as f64 * act_bytes as f64 * ring_factor(tp);
    let raw_ms = ms(volume, intra_bw) + 2.0 * collective_latency_ms;
    CommTime {
        raw_ms,
        exposed_ms: raw_ms * (1.0 - overlap_fraction.clamp(0.0, 1.0)),
    }
}

/// Outcome of the CP gate for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CpGate {
    pub enabled: bool,
    /// Forward all-to-all time per layer.
    pub time_ms: f64,
    pub violation: Option<String>,
}

impl CpGate {
    pub fn rejected(&self) -> bool {
        self.violation.is_some()
    }
}

/// CP is admitted only for sequences above [`CP_TOKEN_THRESHOLD`]. Below it
/// a request for `cp > 1` is rejected rather than silently downgraded.
#[allow(clippy::too_many_arguments)]
pub fn cp_gate_and_comm(
    seq_tokens: u64,
    batch: u64,
    hidden: u64,
    cp: u64,
    act_bytes: u8,
    inter_bw: f64,
    collective_latency_ms: f64,
) -> CpGate {
    if cp <= 1 {
        return CpGate {
            enabled: false,
            time_ms: 0.0,
            violation: None,
        };
    }
    if seq_tokens <= CP_TOKEN_THRESHOLD {
        return CpGate {
            enabled: false,
            time_ms: 0.0,
            violation: Some(format!(
                "cp={cp} rejected: {seq_tokens} tokens is below 200k threshold"
            )),
        };
    }
    let volume =
        2.0 * batch as f64 * seq_tokens as f64 * hidden as f64 * act_bytes as f64 * ring_factor(cp);
    CpGate {
        enabled: true,
        time_ms: ms(volume, inter_bw) + 2.0 * collective_latency_ms,
        violation: None,
    }
}

/// Compute windows the DP collectives can hide behind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DpWindows {
    pub first_forward_ms: f64,
    pub last_backward_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DpComm {
    pub allgather_ms: f64,
    pub reduce_scatter_ms: f64,
    pub raw_ms: f64,
    pub exposed_ms: f64,
}

/// Once per optimizer step: a parameter all-gather hidden behind the first
/// forward micro-step and a gradient reduce-scatter hidden behind the last
/// backward micro-step.
pub fn dp_comm(
    params: f64,
    dtypes: &DTypePolicy,
    tp: u64,
    dp: u64,
    windows: DpWindows,
    inter_bw: f64,
    collective_latency_ms: f64,
) -> DpComm {
    if dp <= 1 {
        return DpComm::default();
    }
    let shard = params / tp as f64;
    let allgather_ms = ms(
        shard * dtypes.param_bytes as f64 * ring_factor(dp),
        inter_bw,
    ) + collective_latency_ms;
    let reduce_scatter_ms =
        ms(shard * dtypes.grad_bytes as f64 * ring_factor(dp), inter_bw) + collective_latency_ms;
    DpComm {
        allgather_ms,
        reduce_scatter_ms,
        raw_ms: allgather_ms + reduce_scatter_ms,
        exposed_ms: (allgather_ms - windows.first_forward_ms).max(0.0)
            + (reduce_scatter_ms - windows.last_backward_ms).max(0.0),
    }
}

/// Communication of one candidate, per layer and per step.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CommPlan {
    /// Forward TP-SP time per layer (backward mirrors it).
    pub tp_sp_time_ms: f64,
    pub cp_time_ms: f64,
    pub dp: DpComm,
    pub tp_sp_overlap: f64,
    pub cp_overlap: f64,
    /// Forward plus backward, all layers.
    pub exposed_time_per_microstep_ms: f64,
    pub exposed_time_per_step_ms: f64,
    pub raw_time_per_step_ms: f64,
}

/// Inputs shared by every comm estimate of a workload.
#[derive(Debug, Clone, Copy)]
pub struct CommContext<'a> {
    pub arch: &'a ModelArch,
    pub cluster: &'a ClusterSpec,
    pub dtypes: &'a DTypePolicy,
    pub overlap: &'a OverlapConfig,
    pub collective_latency_ms: f64,
}

impl CommContext<'_> {
    /// Builds the plan for one candidate. CP is assumed to have passed its
    /// gate already.
    pub fn plan(&self, par: &ParallelConfig, batch: u64, seq: u64, windows: DpWindows) -> CommPlan {
        let layers = self.arch.num_layers as f64;
        let tp = tp_sp_layer_comm(
            batch,
            seq as f64 / par.cp as f64,
            self.arch.hidden_size,
            par.tp,
            self.dtypes.act_bytes,
            self.cluster.intra_node_bw,
            self.overlap.tp_sp,
            self.collective_latency_ms,
        );
        let cp_ms = if par.cp > 1 {
            let volume = 2.0
                * batch as f64
                * seq as f64
                * self.arch.hidden_size as f64
                * self.dtypes.act_bytes as f64
                * ring_factor(par.cp);
            ms(volume, self.cluster.inter_node_bw) + 2.0 * self.collective_latency_ms
        } else {
            0.0
        };
        let cp_exposed = cp_ms * (1.0 - self.overlap.cp.clamp(0.0, 1.0));
        let dp = dp_comm(
            self.arch.params(),
            self.dtypes,
            par.tp,
            par.dp,
            windows,
            self.cluster.inter_node_bw,
            self.collective_latency_ms,
        );
        let per_micro = 2.0 * layers * (tp.exposed_ms + cp_exposed);
        let raw_micro = 2.0 * layers * (tp.raw_ms + cp_ms);
        CommPlan {
            tp_sp_time_ms: tp.raw_ms,
            cp_time_ms: cp_ms,
            dp,
            tp_sp_overlap: self.overlap.tp_sp,
            cp_overlap: self.overlap.cp,
            exposed_time_per_microstep_ms: per_micro,
            exposed_time_per_step_ms: per_micro * par.grad_accum as f64 + dp.exposed_ms,
            raw_time_per_step_ms: raw_micro * par.grad_accum as f64 + dp.raw_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedConfig {
    pub config: ParallelConfig,
    /// Exposed communication per micro-step plus the raw DP traffic; used
    /// only to order candidates.
    pub exposed_comm_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedConfig {
    pub config: ParallelConfig,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Enumeration {
    pub candidates: Vec<RankedConfig>,
    pub rejected: Vec<RejectedConfig>,
}

/// All `(tp, cp, dp)` splits of the cluster with TP inside a node and CP
/// restricted by the token gate, ordered by CP degree (smallest first), then
/// by estimated exposed communication.
pub fn enumerate_parallel_configs(
    ctx: &CommContext<'_>,
    batch: u64,
    seq: u64,
    grad_accum: u64,
) -> Enumeration {
    let total = ctx.cluster.total_devices();
    let mut out = Enumeration::default();
    let tps = (1..=ctx.cluster.devices_per_node)
        .filter(|tp| ctx.cluster.devices_per_node.is_multiple_of(*tp))
        .filter(|tp| {
            ctx.arch.hidden_size.is_multiple_of(*tp) && ctx.arch.num_heads.is_multiple_of(*tp)
        });
    for tp in tps {
        let mut cp = 1;
        while tp * cp <= total {
            if total.is_multiple_of(tp * cp) {
                let config =
                    ParallelConfig::new(tp, cp, total / (tp * cp)).with_grad_accum(grad_accum);
                let gate = cp_gate_and_comm(
                    seq,
                    batch,
                    ctx.arch.hidden_size,
                    cp,
                    ctx.dtypes.act_bytes,
                    ctx.cluster.inter_node_bw,
                    ctx.collective_latency_ms,
                );
                if let Some(reason) = gate.violation {
                    out.rejected.push(RejectedConfig { config, reason });
                } else {
                    let plan = ctx.plan(&config, batch, seq, DpWindows::default());
                    out.candidates.push(RankedConfig {
                        config,
                        exposed_comm_ms: plan.exposed_time_per_microstep_ms + plan.dp.raw_ms,
                    });
                }
            }
            cp *= 2;
        }
    }
    out.candidates.sort_by(|a, b| {
        a.config
            .cp
            .cmp(&b.config.cp)
            .then(a.exposed_comm_ms.total_cmp(&b.exposed_comm_ms))
            .then(a.config.cmp(&b.config))
    });
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyncAuditEntry {
    pub layer: String,
    pub partitioned: bool,
    pub needs_explicit_grad_sync: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SyncAuditReport {
    pub entries: Vec<SyncAuditEntry>,
}

impl SyncAuditReport {
    pub fn flagged(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|e| e.needs_explicit_grad_sync)
            .map(|e| e.layer.as_str())
    }
}

/// Transformer-stack parameters and whether TP partitions them. The
/// unpartitioned ones (norms) are kept consistent by sequence parallelism.
fn stack_layers(arch: &ModelArch) -> Vec<(&'static str, bool)> {
    let mut layers = vec![
        ("qkv_linear", true),
        ("out_linear", true),
        ("ffn_linear1", true),
        ("ffn_linear2", true),
        ("layernorm", false),
        ("qk_norm", false),
    ];
    if arch.adaln_mode == AdaLnMode::PerBlockDedicated {
        layers.push(("adaln_linear", true));
    }
    layers
}

/// Lists which parameters need an explicit all-reduce of their gradients
/// across the TP group: exactly the unpartitioned layers outside the
/// transformer stack.
pub fn sync_audit(arch: &ModelArch, par: &ParallelConfig) -> SyncAuditReport {
    if par.tp < 2 {
        return SyncAuditReport::default();
    }
    let mut entries: Vec<SyncAuditEntry> = stack_layers(arch)
        .into_iter()
        .map(|(layer, partitioned)| SyncAuditEntry {
            layer: layer.to_string(),
            partitioned,
            needs_explicit_grad_sync: false,
        })
        .collect();
    entries.extend(
        arch.extra_unpartitioned_layers
            .iter()
            .map(|layer| SyncAuditEntry {
                layer: layer.clone(),
                partitioned: false,
                needs_explicit_grad_sync: true,
            }),
    );
    SyncAuditReport { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tp_one_is_free() {
        assert_eq!(
            tp_sp_layer_comm(1, 115_200.0, 3072, 1, 2, 200e9, 0.0, 0.02),
            CommTime::default()
        );
    }

    #[test]
    fn tp_eight_reference_layer() {
        let t = tp_sp_layer_comm(1, 115_200.0, 3072, 8, 2, 200e9, 0.0, 0.0);
        let volume: f64 = 2.0 * 707_788_800.0 * 7.0 / 8.0;
        assert!((volume - 1.2386e9).abs() < 1e5);
        assert!((t.raw_ms - volume / 200e9 * 1e3).abs() < 1e-9);
        assert!((t.raw_ms - 6.19).abs() < 0.01);
        assert_eq!(t.exposed_ms, t.raw_ms);

        let with_latency = tp_sp_layer_comm(1, 115_200.0, 3072, 8, 2, 200e9, 0.0, 0.02);
        assert!((with_latency.raw_ms - t.raw_ms - 0.04).abs() < 1e-9);
    }

    #[test]
    fn full_overlap_hides_everything() {
        let t = tp_sp_layer_comm(1, 115_200.0, 3072, 8, 2, 200e9, 1.0, 0.02);
        assert!(t.raw_ms > 0.0);
        assert_eq!(t.exposed_ms, 0.0);
    }

    #[test]
    fn cp_gate() {
        let low = cp_gate_and_comm(115_200, 1, 3072, 2, 2, 50e9, 0.0);
        assert!(low.rejected());
        assert!(low
            .violation
            .as_deref()
            .unwrap()
            .contains("below 200k threshold"));

        let high = cp_gate_and_comm(230_400, 1, 3072, 2, 2, 50e9, 0.0);
        assert!(high.enabled);
        let expected = 2.0 * 230_400.0 * 3072.0 * 2.0 * 0.5 / 50e9 * 1e3;
        assert!((high.time_ms - expected).abs() < 1e-9);

        let off = cp_gate_and_comm(230_400, 1, 3072, 1, 2, 50e9, 0.02);
        assert!(!off.enabled && !off.rejected());
        assert_eq!(off.time_ms, 0.0);
    }

    #[test]
    fn dp_reference_step() {
        let none = dp_comm(
            13.4e9,
            &DTypePolicy::default(),
            8,
            1,
            DpWindows::default(),
            50e9,
            0.02,
        );
        assert_eq!(none, DpComm::default());

        let d = dp_comm(
            13.4e9,
            &DTypePolicy::default(),
            8,
            16,
            DpWindows::default(),
            50e9,
            0.0,
        );
        let expected = 2.0 * 1.675e9 * 2.0 * 15.0 / 16.0 / 50e9 * 1e3;
        assert!((d.raw_ms - expected).abs() < 1e-6);
        assert!((d.raw_ms - 125.6).abs() < 0.1);
        assert_eq!(d.exposed_ms, d.raw_ms);

        let hidden = dp_comm(
            13.4e9,
            &DTypePolicy::default(),
            8,
            16,
            DpWindows {
                first_forward_ms: 100.0,
                last_backward_ms: 100.0,
            },
            50e9,
            0.0,
        );
        assert_eq!(hidden.exposed_ms, 0.0);
    }

    fn ctx_parts(nodes: u64) -> (ModelArch, ClusterSpec, DTypePolicy, OverlapConfig) {
        (
            ModelArch::reference_fit(),
            ClusterSpec::reference(nodes),
            DTypePolicy::default(),
            OverlapConfig::default(),
        )
    }

    #[test]
    fn short_sequences_enumerate_cp_one_only() {
        let (arch, cluster, dtypes, overlap) = ctx_parts(2);
        let ctx = CommContext {
            arch: &arch,
            cluster: &cluster,
            dtypes: &dtypes,
            overlap: &overlap,
            collective_latency_ms: 0.02,
        };
        let e = enumerate_parallel_configs(&ctx, 1, 115_200, 1);
        assert!(!e.candidates.is_empty());
        assert!(e.candidates.iter().all(|c| c.config.cp == 1));
        assert!(e.candidates.iter().all(|c| c.config.devices_used() == 16));
        assert!(!e.rejected.is_empty());
        assert!(e.rejected.iter().all(|r| r.config.cp > 1));
    }

    #[test]
    fn long_sequences_admit_cp() {
        let (arch, cluster, dtypes, overlap) = ctx_parts(4);
        let ctx = CommContext {
            arch: &arch,
            cluster: &cluster,
            dtypes: &dtypes,
            overlap: &overlap,
            collective_latency_ms: 0.02,
        };
        let e = enumerate_parallel_configs(&ctx, 1, 230_400, 1);
        let cps: std::collections::BTreeSet<u64> =
            e.candidates.iter().map(|c| c.config.cp).collect();
        assert!(cps.contains(&1) && cps.contains(&2));
        assert!(e.rejected.is_empty());
        assert_eq!(e.candidates[0].config.cp, 1);
        // lower cp always ranks first
        assert!(e
            .candidates
            .windows(2)
            .all(|w| w[0].config.cp <= w[1].config.cp));
    }

    #[test]
    fn single_device() {
        let arch = ModelArch::reference_fit();
        let cluster = ClusterSpec {
            devices_per_node: 1,
            devices_per_numa: 1,
            ..ClusterSpec::reference(1)
        };
        let (dtypes, overlap) = (DTypePolicy::default(), OverlapConfig::default());
        let ctx = CommContext {
            arch: &arch,
            cluster: &cluster,
            dtypes: &dtypes,
            overlap: &overlap,
            collective_latency_ms: 0.02,
        };
        let e = enumerate_parallel_configs(&ctx, 1, 230_400, 1);
        assert_eq!(e.candidates.len(), 1);
        let c = e.candidates[0].config;
        assert_eq!((c.tp, c.cp, c.dp), (1, 1, 1));
        assert_eq!(e.candidates[0].exposed_comm_ms, 0.0);
    }

    #[test]
    fn audit_flags_external_layers() {
        let arch = ModelArch::reference_fit();
        let report = sync_audit(&arch, &ParallelConfig::new(8, 1, 1));
        let flagged: Vec<_> = report.flagged().collect();
        assert_eq!(flagged, ["patchify", "final_proj"]);
        for e in &report.entries {
            assert_eq!(
                e.needs_explicit_grad_sync,
                !e.partitioned && arch.extra_unpartitioned_layers.contains(&e.layer)
            );
        }
        assert!(sync_audit(&arch, &ParallelConfig::new(1, 1, 8))
            .entries
            .is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn exposed_non_increasing_in_overlap(a in 0.0f64..1.0, b in 0.0f64..1.0, tp in 2u64..9) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                let x = tp_sp_layer_comm(1, 50_000.0, 3072, tp, 2, 200e9, lo, 0.02);
                let y = tp_sp_layer_comm(1, 50_000.0, 3072, tp, 2, 200e9, hi, 0.02);
                prop_assert!(y.exposed_ms <= x.exposed_ms + 1e-12);
                prop_assert!(x.exposed_ms <= x.raw_ms + 1e-12);
            }

            #[test]
            fn ring_scaling(k in 2u64..64) {
                let t = tp_sp_layer_comm(1, 1000.0, 1024, k, 2, 1e9, 0.0, 0.0);
                let base = tp_sp_layer_comm(1, 1000.0, 1024, 2, 2, 1e9, 0.0, 0.0);
                let expected = base.raw_ms * ((k - 1) as f64 / k as f64) / 0.5;
                prop_assert!((t.raw_ms - expected).abs() < 1e-9);
            }
        }
    }
}
