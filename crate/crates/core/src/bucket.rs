//! Bucketed dataset geometry: VAE latent shapes, token counts after
//! patchify, sample-to-bucket assignment and token-balance checks.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::ModelArch;
use crate::error::{PlanError, Result};

/// A `{batch, frames, height, width}` shape class. Serialized as a
/// four-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u64; 4]", into = "[u64; 4]")]
pub struct Bucket {
    pub batch: u64,
    pub frames: u64,
    pub height: u64,
    pub width: u64,
}

impl Bucket {
    pub const fn new(batch: u64, frames: u64, height: u64, width: u64) -> Self {
        Self {
            batch,
            frames,
            height,
            width,
        }
    }

    /// Same bucket with height and width snapped to the nearest multiple of
    /// `align`.
    pub fn aligned(&self, align: u64) -> Self {
        Self {
            height: round_to_multiple(self.height, align),
            width: round_to_multiple(self.width, align),
            ..*self
        }
    }
}

impl TryFrom<[u64; 4]> for Bucket {
    type Error = String;

    fn try_from([batch, frames, height, width]: [u64; 4]) -> std::result::Result<Self, String> {
        if batch == 0 || frames == 0 || height == 0 || width == 0 {
            return Err(format!(
                "bucket [{batch}, {frames}, {height}, {width}] has a zero dimension"
            ));
        }
        Ok(Bucket::new(batch, frames, height, width))
    }
}

impl From<Bucket> for [u64; 4] {
    fn from(b: Bucket) -> Self {
        [b.batch, b.frames, b.height, b.width]
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.frames, self.height, self.width
        )
    }
}

/// Nearest multiple of `align`, halves rounding up, never below `align`.
pub fn round_to_multiple(value: u64, align: u64) -> u64 {
    if align <= 1 {
        return value;
    }
    (((value + align / 2) / align) * align).max(align)
}

fn default_temporal_ratio() -> u64 {
    4
}

fn default_spatial_ratio() -> u64 {
    8
}

fn default_latent_channels() -> u64 {
    16
}

/// Compression of the causal 3D VAE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSpec {
    #[serde(default = "default_temporal_ratio")]
    pub temporal_ratio: u64,
    #[serde(default = "default_spatial_ratio")]
    pub spatial_ratio: u64,
    #[serde(default = "default_latent_channels")]
    pub latent_channels: u64,
}

impl Default for VaeSpec {
    fn default() -> Self {
        Self {
            temporal_ratio: 4,
            spatial_ratio: 8,
            latent_channels: 16,
        }
    }
}

/// Latent grid of one sample and the resulting token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatentShape {
    pub t_lat: u64,
    pub h_lat: u64,
    pub w_lat: u64,
    /// Tokens per sample after patchify (0 until patchified).
    pub tokens: u64,
    /// `batch * tokens`.
    pub tokens_batch: u64,
}

impl LatentShape {
    fn patchify(mut self, arch: &ModelArch, batch: u64) -> Self {
        self.tokens = self.t_lat.div_ceil(arch.patch_t)
            * self.h_lat.div_ceil(arch.patch_h)
            * self.w_lat.div_ceil(arch.patch_w);
        self.tokens_batch = batch * self.tokens;
        self
    }
}

/// Maps a pixel-space clip to its latent grid. The leading frame is kept
/// and the remaining frames are compressed by the temporal ratio.
pub fn latent_shape(frames: u64, height: u64, width: u64, vae: &VaeSpec) -> Result<LatentShape> {
    if vae.temporal_ratio == 0 || vae.spatial_ratio == 0 {
        return Err(PlanError::Config("vae ratios must be at least 1".into()));
    }
    if frames == 0 || !(frames - 1).is_multiple_of(vae.temporal_ratio) {
        return Err(PlanError::Dimension {
            axis: "frames",
            value: frames,
            ratio: vae.temporal_ratio,
        });
    }
    for (axis, value) in [("height", height), ("width", width)] {
        if value == 0 || value % vae.spatial_ratio != 0 {
            return Err(PlanError::Dimension {
                axis,
                value,
                ratio: vae.spatial_ratio,
            });
        }
    }
    Ok(LatentShape {
        t_lat: 1 + (frames - 1) / vae.temporal_ratio,
        h_lat: height / vae.spatial_ratio,
        w_lat: width / vae.spatial_ratio,
        tokens: 0,
        tokens_batch: 0,
    })
}

/// Latent shape of a bucket with patchified token counts filled in.
pub fn token_count(bucket: &Bucket, vae: &VaeSpec, arch: &ModelArch) -> Result<LatentShape> {
    Ok(latent_shape(bucket.frames, bucket.height, bucket.width, vae)?.patchify(arch, bucket.batch))
}

/// What must happen to a sample to fit its bucket. Purely descriptive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Transform {
    pub temporal_crop_to: u64,
    pub resize_to: (u64, u64),
}

impl Transform {
    pub fn is_identity(&self, frames: u64, height: u64, width: u64) -> bool {
        self.temporal_crop_to == frames && self.resize_to == (height, width)
    }
}

/// Picks the longest bucket frame length not exceeding the sample (so a
/// random temporal crop is possible), then the bucket at that length whose
/// area is closest to the sample's. Ties go to the earlier bucket.
pub fn assign_bucket(sample: (u64, u64, u64), buckets: &[Bucket]) -> Result<(Bucket, Transform)> {
    let (frames, height, width) = sample;
    if buckets.is_empty() {
        return Err(PlanError::Config("bucket list is empty".into()));
    }
    let target_frames = buckets
        .iter()
        .map(|b| b.frames)
        .filter(|&f| f <= frames)
        .max()
        .ok_or_else(|| PlanError::SampleTooShort {
            frames,
            shortest: buckets.iter().map(|b| b.frames).min().unwrap_or(0),
        })?;
    let area = height as i128 * width as i128;
    let chosen = buckets
        .iter()
        .filter(|b| b.frames == target_frames)
        .min_by_key(|b| (b.height as i128 * b.width as i128 - area).abs())
        .copied()
        .expect("at least one bucket has the target frame length");
    let transform = Transform {
        temporal_crop_to: chosen.frames,
        resize_to: (chosen.height, chosen.width),
    };
    Ok((chosen, transform))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketTokens {
    pub bucket: Bucket,
    /// Bucket after snapping height/width to the patch grid.
    pub aligned: Bucket,
    pub tokens: u64,
    pub tokens_batch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImbalancedPair {
    pub first: usize,
    pub second: usize,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub tolerance: f64,
    pub entries: Vec<BucketTokens>,
    /// Largest `|a - b| / max(a, b)` over all bucket pairs.
    pub max_deviation: f64,
    pub flagged: Vec<ImbalancedPair>,
}

impl BalanceReport {
    pub fn balanced(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Alignment that keeps a pixel dimension divisible through both the VAE
/// and patchify.
pub fn spatial_alignment(vae: &VaeSpec, arch: &ModelArch) -> u64 {
    vae.spatial_ratio * arch.patch_h.max(arch.patch_w)
}

/// Compares per-bucket token loads. Buckets whose pixel dims are off the
/// patch grid are snapped to it first.
pub fn check_token_balance(
    buckets: &[Bucket],
    tolerance: f64,
    vae: &VaeSpec,
    arch: &ModelArch,
) -> Result<BalanceReport> {
    let align = spatial_alignment(vae, arch);
    let entries = buckets
        .iter()
        .map(|b| {
            let aligned = b.aligned(align);
            let shape = token_count(&aligned, vae, arch)?;
            Ok(BucketTokens {
                bucket: *b,
                aligned,
                tokens: shape.tokens,
                tokens_batch: shape.tokens_batch,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut max_deviation: f64 = 0.0;
    let mut flagged = Vec::new();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let a = entries[i].tokens_batch as f64;
            let b = entries[j].tokens_batch as f64;
            let deviation = (a - b).abs() / a.max(b);
            max_deviation = max_deviation.max(deviation);
            if deviation > tolerance {
                flagged.push(ImbalancedPair {
                    first: i,
                    second: j,
                    deviation,
                });
            }
        }
    }
    Ok(BalanceReport {
        tolerance,
        entries,
        max_deviation,
        flagged,
    })
}
