//! Per-rank memory accounting.
//!
//! Model states are sized from the parameter count, data-type policy and
//! the TP / ZeRO partitioning. Activations are sized per fused chunk of a
//! transformer block from byte formulas of the form
//! `(a·B·S·H + b·B·A·S) / TP`, where the coefficients already include the
//! element width. [`ActivationTimeline`] and [`peak_memory`] model how
//! allocation lifetimes, including delayed releases, set the peak.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::{DTypePolicy, ParallelConfig, ZeroStage};
use crate::error::{PlanError, Result};

pub const MIB: f64 = 1_048_576.0;

fn default_true() -> bool {
    true
}

/// One fused operation of a transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkSpec {
    pub name: String,
    /// Bytes per `B·S·H` element retained for backward.
    pub coeff_bsh: f64,
    /// Bytes per `B·A·S` element retained for backward.
    #[serde(default)]
    pub coeff_bas: f64,
    /// Profiled forward latency at the table's reference shape.
    pub fwd_latency_ms: f64,
    #[serde(default = "default_true")]
    pub recomputable: bool,
    #[serde(default = "default_true")]
    pub offloadable: bool,
    /// Attention-class chunks scale quadratically with sequence length.
    #[serde(default)]
    pub attention: bool,
}

impl ChunkSpec {
    pub fn new(name: &str, coeff_bsh: f64, coeff_bas: f64, fwd_latency_ms: f64) -> Self {
        Self {
            name: name.to_string(),
            coeff_bsh,
            coeff_bas,
            fwd_latency_ms,
            recomputable: true,
            offloadable: true,
            attention: false,
        }
    }

    fn attention(mut self) -> Self {
        self.attention = true;
        self
    }
}

/// Shape at which the chunk latencies were profiled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceShape {
    pub batch: f64,
    pub seq: f64,
    pub tp: f64,
}

impl Default for ReferenceShape {
    fn default() -> Self {
        Self {
            batch: 1.0,
            seq: 115_200.0,
            tp: 8.0,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ChunkTableRepr {
    Bare(Vec<ChunkSpec>),
    Full {
        #[serde(default)]
        reference: ReferenceShape,
        chunks: Vec<ChunkSpec>,
    },
}

/// Chunk cost table plus its profiling shape. Accepts either a bare JSON
/// array of chunks or `{"reference": {...}, "chunks": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ChunkTableRepr")]
pub struct ChunkTable {
    pub reference: ReferenceShape,
    pub chunks: Vec<ChunkSpec>,
}

impl From<ChunkTableRepr> for ChunkTable {
    fn from(repr: ChunkTableRepr) -> Self {
        match repr {
            ChunkTableRepr::Bare(chunks) => Self {
                reference: ReferenceShape::default(),
                chunks,
            },
            ChunkTableRepr::Full { reference, chunks } => Self { reference, chunks },
        }
    }
}

impl ChunkTable {
    /// Reference block profile for a 125-frame 720x1280 clip
    /// (115,200 tokens, B=1, tp=8).
    pub fn reference() -> Self {
        Self {
            reference: ReferenceShape::default(),
            chunks: vec![
                ChunkSpec::new("Flash Attention", 2.0, 64.0, 127.5).attention(),
                ChunkSpec::new("Out_Linear + ReduceScatter", 2.0, 0.0, 13.4),
                ChunkSpec::new("FFN_Linear2 + ReduceScatter", 2.0, 0.0, 8.9),
                ChunkSpec::new("AllGather + FFN_Linear1", 8.0, 0.0, 8.6),
                ChunkSpec::new("AllGather + QKV_Linear", 6.0, 0.0, 7.7),
                ChunkSpec::new("Fused QKNorm", 4.0, 0.0, 1.9),
                ChunkSpec::new("Gate", 2.0, 0.0, 0.36),
                ChunkSpec::new("LayerNorm+Scale/Shift", 4.0, 0.0, 0.58),
                ChunkSpec::new("GeLU", 8.0, 0.0, 0.64),
            ],
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let table: ChunkTable =
            serde_path_to_error::deserialize(de).map_err(|err| PlanError::Schema {
                path: err.path().to_string(),
                message: err.into_inner().to_string(),
            })?;
        table.check()?;
        Ok(table)
    }

    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.chunks {
            if !seen.insert(c.name.as_str()) {
                return Err(PlanError::Config(format!("duplicate chunk `{}`", c.name)));
            }
            if c.coeff_bsh < 0.0 || c.coeff_bas < 0.0 {
                return Err(PlanError::Config(format!(
                    "chunk `{}` has a negative coefficient",
                    c.name
                )));
            }
            if c.fwd_latency_ms.is_nan() || c.fwd_latency_ms <= 0.0 {
                return Err(PlanError::Config(format!(
                    "chunk `{}` needs a positive latency",
                    c.name
                )));
            }
        }
        Ok(())
    }

    /// Latency multiplier relative to the profiling shape: quadratic in
    /// sequence for attention, linear otherwise, linear in batch, inverse in
    /// the number of ranks sharing the work.
    pub fn latency_scale(&self, chunk: &ChunkSpec, shape: &ActShape) -> f64 {
        let r = &self.reference;
        let seq = shape.seq as f64 / r.seq;
        let seq_term = if chunk.attention { seq * seq } else { seq };
        (shape.batch as f64 / r.batch) * seq_term * r.tp / (shape.tp * shape.cp) as f64
    }

    /// Retained bytes and scaled latency of every chunk at `shape`.
    pub fn evaluate(&self, shape: &ActShape) -> Vec<ChunkCost> {
        self.chunks
            .iter()
            .map(|c| ChunkCost {
                name: c.name.clone(),
                bytes: chunk_retained_bytes(c, shape),
                latency_ms: c.fwd_latency_ms * self.latency_scale(c, shape),
                recomputable: c.recomputable,
                offloadable: c.offloadable,
                attention: c.attention,
            })
            .collect()
    }
}

/// Activation geometry seen by one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActShape {
    pub batch: u64,
    /// Full sequence length of one sample.
    pub seq: u64,
    pub hidden: u64,
    pub heads: u64,
    pub tp: u64,
    /// Context-parallel degree; each rank holds `seq / cp` tokens.
    pub cp: u64,
}

impl ActShape {
    pub fn new(batch: u64, seq: u64, hidden: u64, heads: u64, tp: u64) -> Self {
        Self {
            batch,
            seq,
            hidden,
            heads,
            tp,
            cp: 1,
        }
    }

    pub fn with_cp(mut self, cp: u64) -> Self {
        self.cp = cp;
        self
    }

    pub fn local_seq(&self) -> f64 {
        self.seq as f64 / self.cp as f64
    }
}

/// A chunk evaluated at a concrete shape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkCost {
    pub name: String,
    pub bytes: u64,
    pub latency_ms: f64,
    pub recomputable: bool,
    pub offloadable: bool,
    pub attention: bool,
}

impl ChunkCost {
    pub fn mib(&self) -> f64 {
        self.bytes as f64 / MIB
    }
}

/// `(coeff_bsh·B·S·H + coeff_bas·B·A·S) / tp`, rounded to the nearest byte.
/// `S` is the per-rank sequence when context parallelism is on.
pub fn chunk_retained_bytes(chunk: &ChunkSpec, shape: &ActShape) -> u64 {
    let b = shape.batch as f64;
    let s = shape.local_seq();
    let per_tp = chunk.coeff_bsh * b * s * shape.hidden as f64
        + chunk.coeff_bas * b * shape.heads as f64 * s;
    (per_tp / shape.tp as f64).round() as u64
}

/// Per-rank memory, bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MemoryBreakdown {
    pub params: f64,
    pub grads: f64,
    pub master: f64,
    pub moments: f64,
    pub ema: f64,
    pub activations_peak: f64,
    pub total: f64,
}

impl MemoryBreakdown {
    pub fn optimizer(&self) -> f64 {
        self.master + self.moments + self.ema
    }

    pub fn model_states(&self) -> f64 {
        self.params + self.grads + self.optimizer()
    }

    pub fn with_activations(mut self, bytes: f64) -> Self {
        self.activations_peak = bytes;
        self.total = self.model_states() + bytes;
        self
    }
}

/// Model states per rank. Parameters and gradients are split by TP only;
/// the optimizer block (master, moments, EMA) is also split across DP when
/// optimizer partitioning is on.
pub fn model_states_bytes(
    params: f64,
    dtypes: &DTypePolicy,
    par: &ParallelConfig,
) -> MemoryBreakdown {
    let tp = par.tp as f64;
    let opt_div = match par.zero_stage {
        ZeroStage::OptimizerPartitioned => tp * par.dp as f64,
        ZeroStage::None => tp,
    };
    MemoryBreakdown {
        params: params * dtypes.param_bytes as f64 / tp,
        grads: params * dtypes.grad_bytes as f64 / tp,
        master: params * dtypes.master_bytes as f64 / opt_div,
        moments: params * 2.0 * dtypes.moment_bytes as f64 / opt_div,
        ema: params * dtypes.ema_bytes as f64 / opt_div,
        activations_peak: 0.0,
        total: 0.0,
    }
    .with_activations(0.0)
}

/// Bytes retained by one layer when the chunks in `recompute` are dropped.
pub fn activation_per_layer(
    chunks: &[ChunkSpec],
    shape: &ActShape,
    recompute: &BTreeSet<String>,
) -> Result<u64> {
    if let Some(unknown) = recompute
        .iter()
        .find(|name| !chunks.iter().any(|c| &c.name == *name))
    {
        return Err(PlanError::UnknownChunk(unknown.clone()));
    }
    Ok(chunks
        .iter()
        .filter(|c| !recompute.contains(&c.name))
        .map(|c| chunk_retained_bytes(c, shape))
        .sum())
}

/// Why a release happened later than the tensor's last real use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayedRelease {
    /// A view shares storage with a tensor that is still referenced.
    SharedStorage,
    /// Inputs of a concat/stack/all-gather are kept after the merge.
    MergedRedundant,
}

/// Release annotation: the tensor is actually dead right after `after`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyRelease {
    pub reason: DelayedRelease,
    /// Time index of the last true consumer.
    pub after: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Alloc { bytes: u64 },
    Free { early: Option<EarlyRelease> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemEvent {
    pub time: u64,
    pub tensor: String,
    pub kind: EventKind,
}

/// Ordered allocation and release events of one pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationTimeline {
    pub events: Vec<MemEvent>,
}

impl ActivationTimeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(mut self, time: u64, tensor: &str, bytes: u64) -> Self {
        self.events.push(MemEvent {
            time,
            tensor: tensor.to_string(),
            kind: EventKind::Alloc { bytes },
        });
        self
    }

    pub fn free(mut self, time: u64, tensor: &str) -> Self {
        self.events.push(MemEvent {
            time,
            tensor: tensor.to_string(),
            kind: EventKind::Free { early: None },
        });
        self
    }

    /// A release that happens at `time` but could happen right after `after`.
    pub fn free_delayed(
        mut self,
        time: u64,
        tensor: &str,
        reason: DelayedRelease,
        after: u64,
    ) -> Self {
        self.events.push(MemEvent {
            time,
            tensor: tensor.to_string(),
            kind: EventKind::Free {
                early: Some(EarlyRelease { reason, after }),
            },
        });
        self
    }

    /// Signed byte deltas in sweep order. With `optimized`, annotated frees
    /// are moved to just after their last consumer; frees are only ever
    /// moved earlier, and never before their allocation.
    fn sweep_order(&self, optimized: bool) -> Result<Vec<i128>> {
        let mut live: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        let mut keyed: Vec<((u64, u8, usize), i128)> = Vec::with_capacity(self.events.len());
        let mut last_time = 0;
        for (seq, ev) in self.events.iter().enumerate() {
            if ev.time < last_time {
                return Err(PlanError::MalformedTimeline(format!(
                    "event {seq} at time {} precedes time {last_time}",
                    ev.time
                )));
            }
            last_time = ev.time;
            match ev.kind {
                EventKind::Alloc { bytes } => {
                    if live.insert(&ev.tensor, (ev.time, bytes)).is_some() {
                        return Err(PlanError::MalformedTimeline(format!(
                            "`{}` allocated twice",
                            ev.tensor
                        )));
                    }
                    keyed.push(((ev.time, 0, seq), bytes as i128));
                }
                EventKind::Free { early } => {
                    let (alloc_time, bytes) = live.remove(ev.tensor.as_str()).ok_or_else(|| {
                        PlanError::MalformedTimeline(format!(
                            "free of `{}` before alloc",
                            ev.tensor
                        ))
                    })?;
                    let key = match early {
                        Some(hint) if hint.after < alloc_time => {
                            return Err(PlanError::MalformedTimeline(format!(
                                "`{}` released before it was allocated",
                                ev.tensor
                            )))
                        }
                        Some(hint) if optimized && hint.after < ev.time => (hint.after, 1, seq),
                        _ => (ev.time, 0, seq),
                    };
                    keyed.push((key, -(bytes as i128)));
                }
            }
        }
        if let Some(name) = live.keys().next() {
            return Err(PlanError::MalformedTimeline(format!(
                "`{name}` is never freed"
            )));
        }
        keyed.sort_by_key(|(key, _)| *key);
        Ok(keyed.into_iter().map(|(_, d)| d).collect())
    }
}

/// Maximum live bytes over the timeline.
pub fn peak_memory(timeline: &ActivationTimeline, lifecycle_optimized: bool) -> Result<u64> {
    let mut live: i128 = 0;
    let mut peak: i128 = 0;
    for delta in timeline.sweep_order(lifecycle_optimized)? {
        live += delta;
        peak = peak.max(live);
    }
    Ok(peak as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_table_shape() -> ActShape {
        ActShape::new(1, 115_200, 3072, 24, 8)
    }

    fn chunk(name: &str) -> ChunkSpec {
        ChunkTable::reference()
            .chunks
            .into_iter()
            .find(|c| c.name == name)
            .unwrap()
    }

    #[test]
    fn flash_attention_retained() {
        let bytes = chunk_retained_bytes(&chunk("Flash Attention"), &reference_table_shape());
        assert_eq!(bytes, 110_592_000);
        assert!((bytes as f64 / MIB - 105.47).abs() < 0.01);
    }

    #[test]
    fn gelu_retained() {
        let bytes = chunk_retained_bytes(&chunk("GeLU"), &reference_table_shape());
        assert_eq!(bytes, 353_894_400);
        assert_eq!(bytes as f64 / MIB, 337.5);
    }

    #[test]
    fn zero_batch_retains_nothing() {
        let shape = ActShape::new(0, 115_200, 3072, 24, 8);
        for c in ChunkTable::reference().chunks {
            assert_eq!(chunk_retained_bytes(&c, &shape), 0);
        }
    }

    #[test]
    fn context_parallel_splits_sequence() {
        let c = chunk("GeLU");
        let full = chunk_retained_bytes(&c, &ActShape::new(1, 230_400, 3072, 24, 8));
        let split = chunk_retained_bytes(&c, &ActShape::new(1, 230_400, 3072, 24, 8).with_cp(2));
        assert_eq!(full, 2 * split);
    }

    #[test]
    fn model_states_single_rank() {
        let m = model_states_bytes(
            13.4e9,
            &DTypePolicy::default(),
            &ParallelConfig::new(1, 1, 1).with_zero(ZeroStage::None),
        );
        assert!((m.total - 268e9).abs() < 1.0);
        assert_eq!(m.total, m.model_states());
    }

    #[test]
    fn model_states_partitioned() {
        let m = model_states_bytes(
            13.4e9,
            &DTypePolicy::default(),
            &ParallelConfig::new(8, 1, 16),
        );
        assert!((m.params - 3.35e9).abs() < 1.0);
        assert!((m.grads - 3.35e9).abs() < 1.0);
        assert!((m.optimizer() - 1.675e9).abs() < 1.0);
        let unpartitioned = model_states_bytes(
            13.4e9,
            &DTypePolicy::default(),
            &ParallelConfig::new(8, 1, 16).with_zero(ZeroStage::None),
        );
        assert!((unpartitioned.optimizer() - 16.0 * 1.675e9).abs() < 1.0);
    }

    #[test]
    fn model_states_zero_params() {
        let m = model_states_bytes(0.0, &DTypePolicy::default(), &ParallelConfig::new(8, 1, 16));
        assert_eq!(m, MemoryBreakdown::default());
    }

    #[test]
    fn per_layer_activation_totals() {
        let table = ChunkTable::reference();
        let shape = reference_table_shape();
        let none = activation_per_layer(&table.chunks, &shape, &BTreeSet::new()).unwrap();
        // printed column sums to 1620 MB with each row within 2 MB
        assert!((none as f64 / MIB - 1620.0).abs() <= 18.0);
        assert!((none as f64 / MIB - 1624.22).abs() < 0.01);

        let all: BTreeSet<String> = table.chunks.iter().map(|c| c.name.clone()).collect();
        assert_eq!(
            activation_per_layer(&table.chunks, &shape, &all).unwrap(),
            0
        );

        let gelu = BTreeSet::from(["GeLU".to_string()]);
        let without = activation_per_layer(&table.chunks, &shape, &gelu).unwrap();
        assert_eq!(none - without, 353_894_400);
    }

    #[test]
    fn unknown_chunk_in_recompute_set() {
        let table = ChunkTable::reference();
        let set = BTreeSet::from(["Softmax".to_string()]);
        assert_eq!(
            activation_per_layer(&table.chunks, &reference_table_shape(), &set),
            Err(PlanError::UnknownChunk("Softmax".into()))
        );
    }

    #[test]
    fn chunk_table_json_forms() {
        let bare = r#"[{"name": "GeLU", "coeff_bsh": 8, "coeff_bas": 0, "fwd_latency_ms": 0.64}]"#;
        let t = ChunkTable::from_json_str(bare).unwrap();
        assert_eq!(t.reference, ReferenceShape::default());
        assert_eq!(t.chunks[0].name, "GeLU");
        assert!(t.chunks[0].recomputable);

        let full = r#"{"reference": {"batch": 2, "seq": 1000, "tp": 4},
                       "chunks": [{"name": "x", "coeff_bsh": 1, "fwd_latency_ms": 1}]}"#;
        let t = ChunkTable::from_json_str(full).unwrap();
        assert_eq!(t.reference.tp, 4.0);

        let dup = r#"[{"name": "a", "coeff_bsh": 1, "fwd_latency_ms": 1},
                      {"name": "a", "coeff_bsh": 1, "fwd_latency_ms": 1}]"#;
        assert!(ChunkTable::from_json_str(dup).is_err());
        let zero = r#"[{"name": "a", "coeff_bsh": 1, "fwd_latency_ms": 0}]"#;
        assert!(ChunkTable::from_json_str(zero).is_err());
    }

    #[test]
    fn latency_scaling_at_reference_is_identity() {
        let table = ChunkTable::reference();
        for cost in table.evaluate(&reference_table_shape()) {
            let spec = chunk(&cost.name);
            assert_eq!(cost.latency_ms, spec.fwd_latency_ms);
        }
        let doubled = table.evaluate(&ActShape::new(1, 230_400, 3072, 24, 8));
        assert!((doubled[0].latency_ms - 4.0 * 127.5).abs() < 1e-9);
        assert!((doubled[8].latency_ms - 2.0 * 0.64).abs() < 1e-12);
    }

    #[test]
    fn simple_sweep() {
        let t = ActivationTimeline::new()
            .alloc(0, "a", 100)
            .alloc(1, "b", 50)
            .free(2, "a")
            .free(3, "b");
        assert_eq!(peak_memory(&t, false).unwrap(), 150);
        assert_eq!(peak_memory(&t, true).unwrap(), 150);
    }

    #[test]
    fn empty_timeline() {
        assert_eq!(peak_memory(&ActivationTimeline::new(), false).unwrap(), 0);
    }

    /// QKV is produced as one fused buffer whose release is held back until
    /// the MLP input is released, although attention is its last consumer.
    fn qkv_retention(delayed: bool) -> ActivationTimeline {
        let t = ActivationTimeline::new()
            .alloc(0, "ln_out", 40)
            .alloc(1, "qkv", 120)
            .free(1, "ln_out")
            .alloc(2, "attn_out", 40);
        let t = if delayed { t } else { t.free(2, "qkv") };
        let t = t.alloc(3, "mlp_in", 160);
        let t = if delayed {
            t.free(4, "mlp_in").free(4, "qkv")
        } else {
            t.free(4, "mlp_in")
        };
        t.free(5, "attn_out")
    }

    #[test]
    fn qkv_shared_storage_pattern() {
        let delayed = qkv_retention(true);
        let prompt = qkv_retention(false);
        assert_eq!(peak_memory(&delayed, false).unwrap(), 120 + 40 + 160);
        assert_eq!(peak_memory(&prompt, false).unwrap(), 40 + 160);

        // Annotate the delayed release: attention at t=2 is the last reader.
        let mut annotated = delayed.clone();
        let pos = annotated
            .events
            .iter()
            .position(|e| e.tensor == "qkv" && matches!(e.kind, EventKind::Free { .. }))
            .unwrap();
        annotated.events[pos].kind = EventKind::Free {
            early: Some(EarlyRelease {
                reason: DelayedRelease::SharedStorage,
                after: 2,
            }),
        };
        let unopt = peak_memory(&annotated, false).unwrap();
        let opt = peak_memory(&annotated, true).unwrap();
        assert_eq!(unopt, 320);
        assert_eq!(opt, 200);
        assert!(opt < unopt);
    }

    #[test]
    fn malformed_timelines() {
        let t = ActivationTimeline::new().free(0, "a");
        assert!(matches!(
            peak_memory(&t, false),
            Err(PlanError::MalformedTimeline(_))
        ));
        let t = ActivationTimeline::new().alloc(0, "a", 1);
        assert!(matches!(
            peak_memory(&t, false),
            Err(PlanError::MalformedTimeline(_))
        ));
        let t = ActivationTimeline::new().alloc(0, "a", 1).alloc(1, "a", 1);
        assert!(matches!(
            peak_memory(&t, false),
            Err(PlanError::MalformedTimeline(_))
        ));
        let t = ActivationTimeline::new().alloc(3, "a", 1).free(2, "a");
        assert!(matches!(
            peak_memory(&t, false),
            Err(PlanError::MalformedTimeline(_))
        ));
        let t = ActivationTimeline::new().alloc(3, "a", 1).free_delayed(
            5,
            "a",
            DelayedRelease::MergedRedundant,
            1,
        );
        assert!(matches!(
            peak_memory(&t, true),
            Err(PlanError::MalformedTimeline(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn retained_bytes_linear_in_batch_and_seq(b in 1u64..8, s in 1u64..4000, k in 2u64..5) {
                for c in ChunkTable::reference().chunks {
                    let base = chunk_retained_bytes(&c, &ActShape::new(b, s, 3072, 24, 1));
                    let kb = chunk_retained_bytes(&c, &ActShape::new(k * b, s, 3072, 24, 1));
                    let ks = chunk_retained_bytes(&c, &ActShape::new(b, k * s, 3072, 24, 1));
                    prop_assert_eq!(kb, k * base);
                    prop_assert_eq!(ks, k * base);
                }
            }
        }
    }
}
