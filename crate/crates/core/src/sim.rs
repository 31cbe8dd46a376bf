//! Analytical step-time, memory and MFU estimates.

use serde::Serialize;

use crate::comm::CommPlan;
use crate::config::{ClusterSpec, ModelArch, ParallelConfig};
use crate::error::{PlanError, Result};
use crate::memory::MemoryBreakdown;
use crate::offload::OffloadPlan;
use crate::recompute::RecomputePlan;

/// Forward FLOPs of one micro-batch. Backward costs twice as much.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    /// Score and value matmuls, all layers.
    pub attention: f64,
    /// Token-wise dense matmuls, all layers.
    pub linear: f64,
    /// Patchify, projection, and per-sample modulation.
    pub head: f64,
    pub total: f64,
}

/// Forward FLOPs of one transformer layer. AdaLN modulation runs once per
/// sample on the conditioning vector, not per token.
pub fn layer_flops(arch: &ModelArch, batch: u64, seq: u64) -> (f64, f64) {
    let (b, s, h) = (batch as f64, seq as f64, arch.hidden_size as f64);
    let attention = 4.0 * b * s * s * h;
    let dense_params = (4.0 + 2.0 * arch.ffn_multiplier) * h * h;
    (attention, 2.0 * b * s * dense_params)
}

pub fn flops_per_microstep(arch: &ModelArch, batch: u64, seq: u64) -> FlopsBreakdown {
    let (attn, linear) = layer_flops(arch, batch, seq);
    let layers = arch.num_layers as f64;
    let (b, s, h) = (batch as f64, seq as f64, arch.hidden_size as f64);
    let patch_in = (arch.in_channels * arch.patch_volume()) as f64;
    let adaln_per_sample = match arch.adaln_mode {
        crate::config::AdaLnMode::PerBlockDedicated => layers,
        crate::config::AdaLnMode::SharedWeights => 1.0,
    } * 2.0
        * 6.0
        * h
        * h;
    let head = if seq == 0 {
        0.0
    } else {
        2.0 * b * s * 2.0 * patch_in * h + b * adaln_per_sample
    };
    FlopsBreakdown {
        attention: layers * attn,
        linear: layers * linear,
        head,
        total: layers * (attn + linear) + head,
    }
}

/// Per-rank forward compute time of one layer at the given efficiency.
pub fn layer_forward_ms(
    arch: &ModelArch,
    cluster: &ClusterSpec,
    par: &ParallelConfig,
    batch: u64,
    seq: u64,
    efficiency: f64,
) -> f64 {
    let (attn, linear) = layer_flops(arch, batch, seq);
    (attn + linear) / (efficiency * cluster.peak_flops_per_device * (par.tp * par.cp) as f64) * 1e3
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepEstimate {
    /// Model FLOPs of one optimizer step across all replicas.
    pub flops_per_step: f64,
    pub t_compute_ms: f64,
    pub t_recompute_ms: f64,
    pub t_exposed_comm_ms: f64,
    pub t_exposed_offload_ms: f64,
    pub step_time_ms: f64,
    pub peak_mem: f64,
    pub mfu: f64,
}

/// Everything one estimate is composed from.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub arch: &'a ModelArch,
    pub cluster: &'a ClusterSpec,
    pub par: &'a ParallelConfig,
    pub batch: u64,
    pub seq: u64,
    pub recompute: &'a RecomputePlan,
    pub offload: &'a OffloadPlan,
    pub comm: &'a CommPlan,
    pub memory: &'a MemoryBreakdown,
    pub efficiency: f64,
}

/// Composes compute, recompute, exposed communication and exposed offload
/// into a step time. MFU counts forward plus backward model FLOPs only;
/// recomputation is overhead.
pub fn estimate_step(inputs: &StepInputs<'_>) -> Result<StepEstimate> {
    let StepInputs {
        arch,
        cluster,
        par,
        batch,
        seq,
        recompute,
        offload,
        comm,
        memory,
        efficiency,
    } = *inputs;
    if memory.total > cluster.device_mem {
        return Err(PlanError::Overflow {
            needed: memory.total.ceil() as u64,
            available: cluster.device_mem as u64,
        });
    }
    if let Some(both) = recompute
        .selected
        .iter()
        .find(|n| offload.activation_offload_set.contains(n))
    {
        return Err(PlanError::Config(format!(
            "chunk `{both}` is both recomputed and offloaded"
        )));
    }

    let fwd = flops_per_microstep(arch, batch, seq).total;
    let accum = par.grad_accum as f64;
    let ranks_per_replica = (par.tp * par.cp) as f64;
    let t_compute_ms =
        accum * 3.0 * fwd / (efficiency * cluster.peak_flops_per_device * ranks_per_replica) * 1e3;
    let t_recompute_ms = accum * recompute.latency_added_per_layer_ms * arch.num_layers as f64;
    let t_exposed_comm_ms = comm.exposed_time_per_step_ms;
    let t_exposed_offload_ms =
        offload.optimizer_exposed_ms + accum * offload.activation_exposed_ms_per_microstep;
    let step_time_ms = t_compute_ms + t_recompute_ms + t_exposed_comm_ms + t_exposed_offload_ms;

    let flops_per_step = 3.0 * fwd * accum * par.dp as f64;
    let mfu = if step_time_ms > 0.0 {
        flops_per_step
            / (step_time_ms * 1e-3 * cluster.peak_flops_per_device * par.devices_used() as f64)
    } else {
        0.0
    };
    Ok(StepEstimate {
        flops_per_step,
        t_compute_ms,
        t_recompute_ms,
        t_exposed_comm_ms,
        t_exposed_offload_ms,
        step_time_ms,
        peak_mem: memory.total,
        mfu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AdaLnMode, DTypePolicy};
    use crate::memory::{model_states_bytes, ActShape, ChunkTable};

    fn one_layer() -> ModelArch {
        ModelArch {
            num_layers: 1,
            ..ModelArch::reference_fit()
        }
    }

    #[test]
    fn attention_dominates_long_sequences() {
        let (attn, linear) = layer_flops(&one_layer(), 1, 115_200);
        assert!((attn - 4.0 * 115_200f64.powi(2) * 3072.0).abs() < 1.0);
        assert!((attn - 1.63e14).abs() / 1.63e14 < 0.01);
        assert!((linear - 2.0 * 115_200.0 * 12.0 * 3072f64.powi(2)).abs() < 1.0);
        assert!((linear - 2.6e13).abs() / 2.6e13 < 0.01);
        assert!(attn > 6.0 * linear);
    }

    #[test]
    fn doubling_sequence() {
        let a = one_layer();
        let (a1, l1) = layer_flops(&a, 1, 10_000);
        let (a2, l2) = layer_flops(&a, 1, 20_000);
        assert!((a2 / a1 - 4.0).abs() < 1e-12);
        assert!((l2 / l1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_has_no_flops() {
        assert_eq!(
            flops_per_microstep(&ModelArch::reference_fit(), 1, 0).total,
            0.0
        );
    }

    #[test]
    fn shared_adaln_costs_less() {
        let shared = ModelArch {
            adaln_mode: AdaLnMode::SharedWeights,
            ..ModelArch::reference_fit()
        };
        let a = flops_per_microstep(&ModelArch::reference_fit(), 1, 1000).head;
        let b = flops_per_microstep(&shared, 1, 1000).head;
        assert!(b < a);
    }

    struct Fixture {
        arch: ModelArch,
        cluster: ClusterSpec,
        par: ParallelConfig,
        recompute: RecomputePlan,
        offload: OffloadPlan,
        comm: CommPlan,
        memory: MemoryBreakdown,
    }

    impl Fixture {
        fn new() -> Self {
            let arch = ModelArch::reference_fit();
            let par = ParallelConfig::new(8, 1, 2).with_grad_accum(4);
            let memory = model_states_bytes(arch.params(), &DTypePolicy::default(), &par)
                .with_activations(1e9);
            Self {
                arch,
                cluster: ClusterSpec::reference(2),
                par,
                recompute: RecomputePlan::default(),
                offload: OffloadPlan::default(),
                comm: CommPlan::default(),
                memory,
            }
        }

        fn inputs(&self, efficiency: f64) -> StepInputs<'_> {
            StepInputs {
                arch: &self.arch,
                cluster: &self.cluster,
                par: &self.par,
                batch: 1,
                seq: 115_200,
                recompute: &self.recompute,
                offload: &self.offload,
                comm: &self.comm,
                memory: &self.memory,
                efficiency,
            }
        }
    }

    #[test]
    fn identity_mfu_is_one() {
        let f = Fixture::new();
        let est = estimate_step(&f.inputs(1.0)).unwrap();
        assert_eq!(est.mfu, 1.0);
        assert_eq!(est.step_time_ms, est.t_compute_ms);
    }

    #[test]
    fn exposed_comm_equal_to_compute_halves_mfu() {
        let mut f = Fixture::new();
        let compute = estimate_step(&f.inputs(1.0)).unwrap().t_compute_ms;
        f.comm.exposed_time_per_step_ms = compute;
        let est = estimate_step(&f.inputs(1.0)).unwrap();
        assert!((est.mfu - 0.5).abs() < 1e-12);
    }

    #[test]
    fn step_time_is_sum_of_parts() {
        let mut f = Fixture::new();
        f.comm.exposed_time_per_step_ms = 12.0;
        f.offload.optimizer_exposed_ms = 3.0;
        f.offload.activation_exposed_ms_per_microstep = 1.5;
        let costs = ChunkTable::reference().evaluate(&ActShape::new(1, 115_200, 3072, 24, 8));
        f.recompute =
            RecomputePlan::from_selection(&costs, &["GeLU", "LayerNorm+Scale/Shift"]).unwrap();
        let est = estimate_step(&f.inputs(0.5)).unwrap();
        assert!((est.t_recompute_ms - 4.0 * 54.0 * 1.22).abs() < 1e-9);
        assert_eq!(est.t_exposed_offload_ms, 3.0 + 4.0 * 1.5);
        let sum = est.t_compute_ms
            + est.t_recompute_ms
            + est.t_exposed_comm_ms
            + est.t_exposed_offload_ms;
        assert!((est.step_time_ms - sum).abs() < 1e-9);
        assert!(est.mfu > 0.0 && est.mfu < 0.5);
    }

    #[test]
    fn overflow_names_the_gap() {
        let mut f = Fixture::new();
        f.memory = f.memory.with_activations(f.cluster.device_mem);
        match estimate_step(&f.inputs(0.5)) {
            Err(PlanError::Overflow { needed, available }) => assert!(needed > available),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn recompute_and_offload_must_be_disjoint() {
        let mut f = Fixture::new();
        let costs = ChunkTable::reference().evaluate(&ActShape::new(1, 115_200, 3072, 24, 8));
        f.recompute = RecomputePlan::from_selection(&costs, &["GeLU"]).unwrap();
        f.offload.activation_offload_set = vec!["GeLU".into()];
        assert!(matches!(
            estimate_step(&f.inputs(0.5)),
            Err(PlanError::Config(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mfu_dimensionally_consistent(scale in 0.1f64..10.0) {
                let mut f = Fixture::new();
                f.comm.exposed_time_per_step_ms = 1000.0;
                let base = estimate_step(&f.inputs(0.5)).unwrap();
                f.cluster.peak_flops_per_device *= scale;
                f.comm.exposed_time_per_step_ms /= scale;
                let scaled = estimate_step(&f.inputs(0.5)).unwrap();
                prop_assert!((base.mfu - scaled.mfu).abs() < 1e-9);
            }

            #[test]
            fn step_time_monotone_in_seq(s in 1u64..200_000, ds in 1u64..50_000) {
                let f = Fixture::new();
                let mut a = f.inputs(0.5);
                a.seq = s;
                let mut b = f.inputs(0.5);
                b.seq = s + ds;
                prop_assert!(estimate_step(&b).unwrap().step_time_ms >= estimate_step(&a).unwrap().step_time_ms);
            }
        }
    }
}
