//! Static inputs: model architecture, cluster hardware, data-type policy,
//! parallel strategy and training stages, plus the JSON config document
//! that bundles them.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bucket::{Bucket, VaeSpec};
use crate::error::{PlanError, Result};
use crate::memory::ChunkTable;

/// How the AdaLN modulation parameters are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaLnMode {
    /// One modulation module shared by every block.
    SharedWeights,
    /// A dedicated Linear + SiLU per transformer block.
    PerBlockDedicated,
}

fn default_ffn_multiplier() -> f64 {
    4.0
}

fn default_patch_t() -> u64 {
    1
}

fn default_patch_hw() -> u64 {
    2
}

fn default_in_channels() -> u64 {
    16
}

fn default_extra_layers() -> Vec<String> {
    vec!["patchify".to_string(), "final_proj".to_string()]
}

/// Shape of the diffusion transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub hidden_size: u64,
    pub num_heads: u64,
    pub num_layers: u64,
    #[serde(default = "default_ffn_multiplier")]
    pub ffn_multiplier: f64,
    pub adaln_mode: AdaLnMode,
    #[serde(default = "default_patch_t")]
    pub patch_t: u64,
    #[serde(default = "default_patch_hw")]
    pub patch_h: u64,
    #[serde(default = "default_patch_hw")]
    pub patch_w: u64,
    /// Supplied parameter count. Overrides the estimate wherever model
    /// states are sized.
    #[serde(default)]
    pub param_count: Option<f64>,
    /// Latent channels entering patchify.
    #[serde(default = "default_in_channels")]
    pub in_channels: u64,
    /// Layers living outside the transformer stack.
    #[serde(default = "default_extra_layers")]
    pub extra_unpartitioned_layers: Vec<String>,
    /// Marks dimensions that were inferred rather than published.
    #[serde(default)]
    pub fitted: bool,
}

impl ModelArch {
    /// H=3072, A=24 reproduce the per-layer activation table at seqlen
    /// 115,200 with tp=8. The layer count 54 is also inferred: it is the
    /// depth at which dedicated AdaLN adds just over 3B parameters.
    pub fn reference_fit() -> Self {
        Self {
            hidden_size: 3072,
            num_heads: 24,
            num_layers: 54,
            ffn_multiplier: 4.0,
            adaln_mode: AdaLnMode::PerBlockDedicated,
            patch_t: 1,
            patch_h: 2,
            patch_w: 2,
            param_count: Some(13.4e9),
            in_channels: 16,
            extra_unpartitioned_layers: default_extra_layers(),
            fitted: true,
        }
    }

    pub fn patch_volume(&self) -> u64 {
        self.patch_t * self.patch_h * self.patch_w
    }

    /// Parameter count used for model-state sizing.
    pub fn params(&self) -> f64 {
        self.param_count
            .unwrap_or_else(|| estimate_param_count(self).total)
    }
}

/// Hardware description of the training cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_nodes: u64,
    pub devices_per_node: u64,
    /// Bytes.
    pub device_mem: f64,
    /// FLOP/s.
    pub peak_flops_per_device: f64,
    /// Bytes/s.
    pub intra_node_bw: f64,
    pub inter_node_bw: f64,
    pub pcie_bw_per_device: f64,
    pub host_write_bw_per_numa: f64,
    pub devices_per_numa: u64,
    /// Host memory per node, bytes.
    pub host_mem: f64,
}

impl ClusterSpec {
    /// 64 GiB accelerators at 320 TFLOP/s, eight per node. Chosen so that
    /// the reference attention latency corresponds to about half of peak.
    pub fn reference(num_nodes: u64) -> Self {
        Self {
            num_nodes,
            devices_per_node: 8,
            device_mem: 64.0 * (1u64 << 30) as f64,
            peak_flops_per_device: 320e12,
            intra_node_bw: 200e9,
            inter_node_bw: 50e9,
            pcie_bw_per_device: 25e9,
            host_write_bw_per_numa: 80e9,
            devices_per_numa: 4,
            host_mem: 2.0 * (1u64 << 40) as f64,
        }
    }

    pub fn total_devices(&self) -> u64 {
        self.num_nodes * self.devices_per_node
    }
}

fn default_2() -> u8 {
    2
}

fn default_4() -> u8 {
    4
}

/// Bytes per element for every class of training state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DTypePolicy {
    #[serde(default = "default_2")]
    pub param_bytes: u8,
    #[serde(default = "default_2")]
    pub grad_bytes: u8,
    #[serde(default = "default_4")]
    pub master_bytes: u8,
    #[serde(default = "default_4")]
    pub moment_bytes: u8,
    #[serde(default = "default_4")]
    pub ema_bytes: u8,
    #[serde(default = "default_2")]
    pub act_bytes: u8,
}

impl Default for DTypePolicy {
    fn default() -> Self {
        Self {
            param_bytes: 2,
            grad_bytes: 2,
            master_bytes: 4,
            moment_bytes: 4,
            ema_bytes: 4,
            act_bytes: 2,
        }
    }
}

impl DTypePolicy {
    /// Master weights, two AdamW moments and the EMA copy.
    pub fn optimizer_bytes_per_param(&self) -> u64 {
        self.master_bytes as u64 + 2 * self.moment_bytes as u64 + self.ema_bytes as u64
    }

    fn fields(&self) -> [(&'static str, u8); 6] {
        [
            ("param_bytes", self.param_bytes),
            ("grad_bytes", self.grad_bytes),
            ("master_bytes", self.master_bytes),
            ("moment_bytes", self.moment_bytes),
            ("ema_bytes", self.ema_bytes),
            ("act_bytes", self.act_bytes),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroStage {
    None,
    OptimizerPartitioned,
}

fn default_one() -> u64 {
    1
}

fn default_zero() -> ZeroStage {
    ZeroStage::OptimizerPartitioned
}

/// A candidate parallel strategy: TP-SP inside the node, optional CP,
/// ZeRO data parallel outermost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    pub tp: u64,
    #[serde(default = "default_one")]
    pub cp: u64,
    #[serde(default = "default_one")]
    pub dp: u64,
    #[serde(default = "default_zero")]
    pub zero_stage: ZeroStage,
    #[serde(default = "default_one")]
    pub grad_accum: u64,
}

impl ParallelConfig {
    pub fn new(tp: u64, cp: u64, dp: u64) -> Self {
        Self {
            tp,
            cp,
            dp,
            zero_stage: ZeroStage::OptimizerPartitioned,
            grad_accum: 1,
        }
    }

    pub fn with_grad_accum(mut self, grad_accum: u64) -> Self {
        self.grad_accum = grad_accum;
        self
    }

    pub fn with_zero(mut self, zero_stage: ZeroStage) -> Self {
        self.zero_stage = zero_stage;
        self
    }

    pub fn devices_used(&self) -> u64 {
        self.tp * self.cp * self.dp
    }
}

impl fmt::Display for ParallelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tp{}-cp{}-dp{}-ga{}",
            self.tp, self.cp, self.dp, self.grad_accum
        )
    }
}

/// One row of a multi-stage training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageScenario {
    pub name: String,
    #[serde(default)]
    pub image_bucket: Option<Bucket>,
    #[serde(default)]
    pub video_bucket: Option<Bucket>,
    pub global_batch: u64,
    #[serde(default)]
    pub step_count: u64,
    #[serde(default)]
    pub learning_rate: f64,
}

impl StageScenario {
    fn row(
        name: &str,
        image: Option<(u64, u64, u64)>,
        video: Option<(u64, u64, u64)>,
        global_batch: u64,
        step_count: u64,
        learning_rate: f64,
    ) -> Self {
        let bucket = |(f, h, w): (u64, u64, u64)| Bucket::new(1, f, h, w);
        Self {
            name: name.to_string(),
            image_bucket: image.map(bucket),
            video_bucket: video.map(bucket),
            global_batch,
            step_count,
            learning_rate,
        }
    }

    /// The published multi-stage schedule, one micro-batch sample per bucket.
    pub fn table1() -> Vec<StageScenario> {
        vec![
            Self::row(
                "stage1-t2i-320",
                Some((1, 320, 320)),
                None,
                4096,
                100_000,
                1e-4,
            ),
            Self::row(
                "stage1-t2i-640",
                Some((1, 640, 640)),
                None,
                2048,
                100_000,
                1e-4,
            ),
            Self::row(
                "stage2-t2v-29",
                None,
                Some((29, 320, 320)),
                1024,
                100_000,
                1e-4,
            ),
            Self::row(
                "stage2-t2v-61",
                None,
                Some((61, 320, 320)),
                1024,
                100_000,
                1e-4,
            ),
            Self::row(
                "stage3-joint-640",
                Some((1, 640, 640)),
                Some((61, 640, 640)),
                1024,
                100_000,
                1e-4,
            ),
            Self::row(
                "stage3-joint-125x640",
                Some((1, 960, 960)),
                Some((125, 640, 640)),
                512,
                10_000,
                4e-5,
            ),
            Self::row(
                "stage3-joint-125x960",
                Some((1, 960, 960)),
                Some((125, 960, 960)),
                256,
                10_000,
                4e-5,
            ),
            Self::row(
                "sft-960",
                Some((1, 960, 960)),
                Some((125, 960, 960)),
                128,
                1_000,
                1e-5,
            ),
            Self::row(
                "sft-1440",
                Some((1, 1440, 1440)),
                Some((125, 960, 960)),
                128,
                1_000,
                1e-5,
            ),
        ]
    }

    pub fn buckets(&self) -> impl Iterator<Item = (&'static str, &Bucket)> {
        self.image_bucket
            .iter()
            .map(|b| ("image", b))
            .chain(self.video_bucket.iter().map(|b| ("video", b)))
    }
}

/// A single validation finding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks model, cluster and strategy for consistency. An empty list means
/// the combination is valid. Violations come out in a fixed order.
pub fn validate(arch: &ModelArch, cluster: &ClusterSpec, par: &ParallelConfig) -> Vec<Violation> {
    let mut out = Vec::new();

    if arch.hidden_size == 0 {
        out.push(Violation::new("model.hidden_size", "must be positive"));
    }
    if arch.num_heads == 0 {
        out.push(Violation::new("model.num_heads", "must be positive"));
    } else if !arch.hidden_size.is_multiple_of(arch.num_heads) {
        out.push(Violation::new(
            "model.num_heads",
            "num_heads does not divide H",
        ));
    }
    if par.tp == 0 {
        out.push(Violation::new("parallel.tp", "must be at least 1"));
    } else if !arch.hidden_size.is_multiple_of(par.tp) {
        out.push(Violation::new("parallel.tp", "tp does not divide H"));
    }
    if matches!(arch.param_count, Some(p) if p.is_nan() || p <= 0.0) {
        out.push(Violation::new("model.param_count", "must be positive"));
    }
    for (name, v) in [
        ("model.patch_t", arch.patch_t),
        ("model.patch_h", arch.patch_h),
        ("model.patch_w", arch.patch_w),
    ] {
        if v == 0 {
            out.push(Violation::new(name, "patch dims must be at least 1"));
        }
    }
    if arch.ffn_multiplier.is_nan() || arch.ffn_multiplier <= 0.0 {
        out.push(Violation::new("model.ffn_multiplier", "must be positive"));
    }

    for (name, v) in [
        ("cluster.num_nodes", cluster.num_nodes as f64),
        ("cluster.devices_per_node", cluster.devices_per_node as f64),
        ("cluster.device_mem", cluster.device_mem),
        (
            "cluster.peak_flops_per_device",
            cluster.peak_flops_per_device,
        ),
        ("cluster.intra_node_bw", cluster.intra_node_bw),
        ("cluster.inter_node_bw", cluster.inter_node_bw),
        ("cluster.pcie_bw_per_device", cluster.pcie_bw_per_device),
        (
            "cluster.host_write_bw_per_numa",
            cluster.host_write_bw_per_numa,
        ),
        ("cluster.devices_per_numa", cluster.devices_per_numa as f64),
        ("cluster.host_mem", cluster.host_mem),
    ] {
        if v.is_nan() || v <= 0.0 {
            out.push(Violation::new(name, "must be positive"));
        }
    }
    if cluster.devices_per_numa > cluster.devices_per_node {
        out.push(Violation::new(
            "cluster.devices_per_numa",
            "exceeds devices_per_node",
        ));
    }

    if par.tp > cluster.devices_per_node {
        out.push(Violation::new("parallel.tp", "tp exceeds devices_per_node"));
    }
    if par.cp == 0 || par.dp == 0 {
        out.push(Violation::new("parallel", "cp and dp must be at least 1"));
    }
    if par.grad_accum == 0 {
        out.push(Violation::new("parallel.grad_accum", "must be at least 1"));
    }
    if par.devices_used() > cluster.total_devices() {
        out.push(Violation::new(
            "parallel",
            format!(
                "device overcommit: tp*cp*dp = {} on a {}-device cluster",
                par.devices_used(),
                cluster.total_devices()
            ),
        ));
    }
    out
}

/// Checks a data-type policy: every width must be 1, 2, 4 or 8 bytes.
pub fn validate_dtypes(dtypes: &DTypePolicy) -> Vec<Violation> {
    dtypes
        .fields()
        .into_iter()
        .filter(|(_, v)| ![1, 2, 4, 8].contains(v))
        .map(|(name, _)| Violation::new(format!("dtypes.{name}"), "must be one of 1, 2, 4, 8"))
        .collect()
}

/// Analytical parameter count with the AdaLN share broken out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamEstimate {
    /// Attention and FFN weights of one block.
    pub per_layer_dense: f64,
    pub adaln_subtotal: f64,
    /// Patchify, final projection and conditioning embedding.
    pub embed_head: f64,
    pub total: f64,
}

pub fn estimate_param_count(arch: &ModelArch) -> ParamEstimate {
    let h = arch.hidden_size as f64;
    let layers = arch.num_layers as f64;
    let h2 = h * h;
    let per_layer_dense = 4.0 * h2 + 2.0 * arch.ffn_multiplier * h2;
    let adaln_module = 6.0 * h2;
    let adaln_subtotal = match arch.adaln_mode {
        AdaLnMode::PerBlockDedicated => layers * adaln_module,
        AdaLnMode::SharedWeights => adaln_module,
    };
    let patch_in = (arch.in_channels * arch.patch_volume()) as f64;
    // patchify (w + b), final projection (w + b), timestep MLP
    let embed_head = (patch_in * h + h) + (h * patch_in + patch_in) + 2.0 * h2;
    ParamEstimate {
        per_layer_dense,
        adaln_subtotal,
        embed_head,
        total: layers * per_layer_dense + adaln_subtotal + embed_head,
    }
}

fn default_efficiency() -> f64 {
    0.5
}

fn default_collective_latency() -> f64 {
    0.02
}

fn default_offload_threshold() -> f64 {
    64.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OffloadMode {
    #[default]
    Auto,
    Off,
    OptimizerOnly,
}

impl OffloadMode {
    pub fn allows_activations(self) -> bool {
        self == OffloadMode::Auto
    }
}

/// Tunables of the planner that are assumptions rather than hardware facts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerKnobs {
    /// Achieved / peak FLOP/s of the compute kernels.
    #[serde(default = "default_efficiency")]
    pub efficiency: f64,
    /// Fixed latency charged per collective, ms.
    #[serde(default = "default_collective_latency")]
    pub collective_latency_ms: f64,
    /// Minimum tensor size eligible for activation offload, MiB.
    #[serde(default = "default_offload_threshold")]
    pub offload_threshold_mib: f64,
    #[serde(default)]
    pub offload: OffloadMode,
}

impl Default for PlannerKnobs {
    fn default() -> Self {
        Self {
            efficiency: default_efficiency(),
            collective_latency_ms: default_collective_latency(),
            offload_threshold_mib: default_offload_threshold(),
            offload: OffloadMode::Auto,
        }
    }
}

fn default_tp_overlap() -> f64 {
    0.8
}

/// Fraction of each communication class hidden behind compute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapConfig {
    /// Fused matmul + all-gather/reduce-scatter pipelining.
    #[serde(default = "default_tp_overlap")]
    pub tp_sp: f64,
    /// All-to-all around attention sits on the critical path.
    #[serde(default)]
    pub cp: f64,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        Self {
            tp_sp: default_tp_overlap(),
            cp: 0.0,
        }
    }
}

/// The full JSON config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub model: ModelArch,
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub dtypes: DTypePolicy,
    /// Fixed strategy for `simulate`; `plan train` enumerates instead.
    #[serde(default)]
    pub parallel: Option<ParallelConfig>,
    #[serde(default)]
    pub stages: Vec<StageScenario>,
    #[serde(default)]
    pub buckets: Vec<Bucket>,
    #[serde(default)]
    pub vae: VaeSpec,
    #[serde(default)]
    pub overlap: OverlapConfig,
    #[serde(default)]
    pub planner: PlannerKnobs,
    /// Chunk table override; the built-in reference table is used otherwise.
    #[serde(default)]
    pub chunks: Option<ChunkTable>,
}

impl PlannerConfig {
    /// The shipped reference scenario: fitted model, two reference nodes,
    /// the 125-frame 720p bucket and the full stage schedule.
    pub fn reference() -> Self {
        Self {
            model: ModelArch::reference_fit(),
            cluster: ClusterSpec::reference(2),
            dtypes: DTypePolicy::default(),
            parallel: Some(ParallelConfig::new(8, 1, 2).with_grad_accum(4)),
            stages: StageScenario::table1(),
            buckets: vec![Bucket::new(1, 125, 720, 1280)],
            vae: VaeSpec::default(),
            overlap: OverlapConfig::default(),
            planner: PlannerKnobs::default(),
            chunks: None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|err| {
            let path = err.path().to_string();
            PlanError::Schema {
                path,
                message: err.into_inner().to_string(),
            }
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn chunk_table(&self) -> ChunkTable {
        self.chunks
            .clone()
            .unwrap_or_else(ChunkTable::reference)
    }

    /// Structural checks that do not depend on a particular strategy.
    pub fn violations(&self) -> Vec<Violation> {
        let par = self
            .parallel
            .unwrap_or_else(|| ParallelConfig::new(1, 1, 1));
        let mut out = validate(&self.model, &self.cluster, &par);
        out.extend(validate_dtypes(&self.dtypes));
        if !(self.planner.efficiency > 0.0 && self.planner.efficiency <= 1.0) {
            out.push(Violation::new("planner.efficiency", "must lie in (0, 1]"));
        }
        for (name, v) in [
            ("overlap.tp_sp", self.overlap.tp_sp),
            ("overlap.cp", self.overlap.cp),
        ] {
            if !(0.0..=1.0).contains(&v) {
                out.push(Violation::new(name, "must lie in [0, 1]"));
            }
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.image_bucket.is_none() && stage.video_bucket.is_none() {
                out.push(Violation::new(
                    format!("stages[{i}]"),
                    "at least one bucket is required",
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(h: u64, a: u64) -> ModelArch {
        ModelArch {
            hidden_size: h,
            num_heads: a,
            ..ModelArch::reference_fit()
        }
    }

    #[test]
    fn divisible_tp_is_valid() {
        let v = validate(
            &arch(3072, 24),
            &ClusterSpec::reference(2),
            &ParallelConfig::new(8, 1, 2),
        );
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn tp_seven_does_not_divide_hidden() {
        let v = validate(
            &arch(3072, 24),
            &ClusterSpec::reference(2),
            &ParallelConfig::new(7, 1, 1),
        );
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "tp does not divide H");
    }

    #[test]
    fn overcommit_is_reported() {
        let v = validate(
            &arch(3072, 24),
            &ClusterSpec::reference(4),
            &ParallelConfig::new(8, 1, 8),
        );
        assert_eq!(v.len(), 1);
        assert!(v[0].message.starts_with("device overcommit"));
    }

    #[test]
    fn validation_is_order_stable() {
        let mut cluster = ClusterSpec::reference(1);
        cluster.device_mem = 0.0;
        cluster.devices_per_numa = 16;
        let a = arch(3000, 7);
        let par = ParallelConfig::new(16, 1, 2);
        let first = validate(&a, &cluster, &par);
        assert_eq!(first, validate(&a, &cluster, &par));
        let fields: Vec<_> = first.iter().map(|v| v.field.as_str()).collect();
        assert_eq!(
            fields,
            [
                "model.num_heads",
                "parallel.tp",
                "cluster.device_mem",
                "cluster.devices_per_numa",
                "parallel.tp",
                "parallel"
            ]
        );
    }

    #[test]
    fn dtype_widths() {
        assert!(validate_dtypes(&DTypePolicy::default()).is_empty());
        let bad = DTypePolicy {
            moment_bytes: 3,
            ..Default::default()
        };
        let v = validate_dtypes(&bad);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "dtypes.moment_bytes");
    }

    #[test]
    fn adaln_subtotal_exceeds_three_billion() {
        let est = estimate_param_count(&ModelArch::reference_fit());
        assert_eq!(est.adaln_subtotal, 54.0 * 6.0 * 3072.0 * 3072.0);
        assert!(est.adaln_subtotal > 3.0e9 && est.adaln_subtotal < 3.1e9);
    }

    #[test]
    fn shared_adaln_is_one_module() {
        let a = ModelArch {
            adaln_mode: AdaLnMode::SharedWeights,
            ..ModelArch::reference_fit()
        };
        assert_eq!(
            estimate_param_count(&a).adaln_subtotal,
            6.0 * 3072.0 * 3072.0
        );
    }

    #[test]
    fn empty_stack_leaves_embedding_terms() {
        let a = ModelArch {
            num_layers: 0,
            adaln_mode: AdaLnMode::PerBlockDedicated,
            ..ModelArch::reference_fit()
        };
        let est = estimate_param_count(&a);
        assert_eq!(est.adaln_subtotal, 0.0);
        assert_eq!(est.total, est.embed_head);
        assert!(est.total > 0.0);
    }

    #[test]
    fn supplied_param_count_wins() {
        assert_eq!(ModelArch::reference_fit().params(), 13.4e9);
        let a = ModelArch {
            param_count: None,
            ..ModelArch::reference_fit()
        };
        assert_eq!(a.params(), estimate_param_count(&a).total);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let mut doc = serde_json::to_value(PlannerConfig::reference()).unwrap();
        doc["cluster"]["warp_drive"] = serde_json::json!(1);
        let err = PlannerConfig::from_json_str(&doc.to_string()).unwrap_err();
        match err {
            PlanError::Schema { path, message } => {
                assert_eq!(path, "cluster.warp_drive");
                assert!(message.contains("warp_drive"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut doc = serde_json::to_value(PlannerConfig::reference()).unwrap();
        doc["telemetry"] = serde_json::json!({});
        assert!(matches!(
            PlannerConfig::from_json_str(&doc.to_string()),
            Err(PlanError::Schema { .. })
        ));
    }

    #[test]
    fn reference_config_round_trips_and_validates() {
        let cfg = PlannerConfig::reference();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PlannerConfig::from_json_str(&text).unwrap(), cfg);
        assert!(cfg.violations().is_empty(), "{:?}", cfg.violations());
    }

    #[test]
    fn stage_without_bucket_is_flagged() {
        let mut cfg = PlannerConfig::reference();
        cfg.stages[0].image_bucket = None;
        let v = cfg.violations();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "stages[0]");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn param_estimate_is_monotone(
                h in 1u64..64, l in 0u64..64, f in 1.0f64..8.0, dl in 1u64..4, dh in 1u64..4, df in 0.1f64..2.0
            ) {
                let base = ModelArch {
                    hidden_size: h * 64,
                    num_layers: l,
                    ffn_multiplier: f,
                    param_count: None,
                    ..ModelArch::reference_fit()
                };
                let total = estimate_param_count(&base).total;
                let more_layers = ModelArch { num_layers: l + dl, ..base.clone() };
                let wider = ModelArch { hidden_size: (h + dh) * 64, ..base.clone() };
                let fatter = ModelArch { ffn_multiplier: f + df, ..base.clone() };
                prop_assert!(estimate_param_count(&more_layers).total > total);
                prop_assert!(estimate_param_count(&wider).total > total);
                prop_assert!(estimate_param_count(&fatter).total >= total);
            }
        }
    }
}
