//! Inference-side schedules: diffusion step caching, VAE tiling, multi-device
//! DiT latency and sliding temporal windows.

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheMode {
    /// Rear transformer layers reuse their cached output offsets.
    DitLayerCache,
    /// Attention outputs are reused; everything else is recomputed.
    AttentionCache,
}

impl CacheMode {
    /// Relative cost of a cached step.
    pub fn default_cached_fraction(self) -> f64 {
        match self {
            CacheMode::DitLayerCache => 0.25,
            CacheMode::AttentionCache => 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheSchedule {
    pub total_steps: u64,
    pub warmup: u64,
    pub interval: u64,
    pub mode: CacheMode,
    pub cached_cost_fraction: f64,
    pub per_step_full: Vec<bool>,
    pub full_steps: u64,
    pub cached_steps: u64,
    /// Sum of per-step costs in units of one full step.
    pub cost: f64,
    pub speedup: f64,
}

/// The first `warmup` steps run in full. After that every `interval`-th
/// step, starting with the first post-warmup step, refreshes the cache.
pub fn plan_cache(
    total_steps: u64,
    warmup: u64,
    interval: u64,
    cached_cost_fraction: f64,
    mode: CacheMode,
) -> Result<CacheSchedule> {
    if !(cached_cost_fraction > 0.0 && cached_cost_fraction <= 1.0) {
        return Err(PlanError::Config(format!(
            "cached_cost_fraction must be in (0, 1], got {cached_cost_fraction}"
        )));
    }
    if interval == 0 {
        return Err(PlanError::Config(
            "cache interval must be at least 1".into(),
        ));
    }
    if warmup > total_steps {
        return Err(PlanError::Config(format!(
            "warmup {warmup} exceeds total_steps {total_steps}"
        )));
    }
    let per_step_full: Vec<bool> = (0..total_steps)
        .map(|i| i < warmup || (i - warmup).is_multiple_of(interval))
        .collect();
    let full_steps = per_step_full.iter().filter(|&&f| f).count() as u64;
    let cached_steps = total_steps - full_steps;
    let cost = full_steps as f64 + cached_steps as f64 * cached_cost_fraction;
    let speedup = if total_steps == 0 {
        1.0
    } else {
        total_steps as f64 / cost
    };
    Ok(CacheSchedule {
        total_steps,
        warmup,
        interval,
        mode,
        cached_cost_fraction,
        per_step_full,
        full_steps,
        cached_steps,
        cost,
        speedup,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Tile {
    /// (t, h, w).
    pub start: [u64; 3],
    pub size: [u64; 3],
}

impl Tile {
    pub fn contains(&self, pos: [u64; 3]) -> bool {
        (0..3).all(|a| pos[a] >= self.start[a] && pos[a] < self.start[a] + self.size[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TilePlan {
    pub latent: [u64; 3],
    pub tile: [u64; 3],
    pub overlap: [u64; 3],
    /// Tile starts along each axis; the grid is their Cartesian product.
    pub axis_starts: [Vec<u64>; 3],
    pub tiles: Vec<Tile>,
    pub devices: u64,
    /// Ceiling of tiles over devices.
    pub waves: u64,
    pub speedup: f64,
}

/// Starts along one axis with stride `size - overlap`; the last tile is
/// pulled back to end exactly at `len`.
fn axis_starts(len: u64, size: u64, overlap: u64) -> Vec<u64> {
    if size >= len {
        return vec![0];
    }
    let stride = size - overlap;
    let span = len - size;
    let count = span.div_ceil(stride) + 1;
    (0..count).map(|k| (k * stride).min(span)).collect()
}

/// Unnormalized weight of a tile at `p`: linear ramps over the overlap at
/// each edge shared with a neighbour, 1 elsewhere.
fn ramp(p: u64, start: u64, size: u64, overlap: u64, first: bool, last: bool) -> f64 {
    let mut w = 1.0f64;
    if overlap == 0 {
        return w;
    }
    let off = p - start;
    if !first && off < overlap {
        w = w.min((off + 1) as f64 / (overlap + 1) as f64);
    }
    let from_end = start + size - 1 - p;
    if !last && from_end < overlap {
        w = w.min((from_end + 1) as f64 / (overlap + 1) as f64);
    }
    w
}

impl TilePlan {
    fn axis_len(&self, axis: usize) -> u64 {
        self.tile[axis].min(self.latent[axis])
    }

    /// Normalized weights of every tile covering `p` on one axis, as
    /// `(index into axis_starts, weight)`.
    pub fn axis_weights(&self, axis: usize, p: u64) -> Vec<(usize, f64)> {
        let starts = &self.axis_starts[axis];
        let size = self.axis_len(axis);
        let raw: Vec<(usize, f64)> = starts
            .iter()
            .enumerate()
            .filter(|(_, &s)| p >= s && p < s + size)
            .map(|(i, &s)| {
                (
                    i,
                    ramp(
                        p,
                        s,
                        size,
                        self.overlap[axis],
                        i == 0,
                        i + 1 == starts.len(),
                    ),
                )
            })
            .collect();
        let sum: f64 = raw.iter().map(|(_, w)| w).sum();
        raw.into_iter().map(|(i, w)| (i, w / sum)).collect()
    }

    /// Blend weights of every tile covering `pos`, as `(tile index, weight)`.
    /// The weights sum to 1.
    pub fn weights(&self, pos: [u64; 3]) -> Vec<(usize, f64)> {
        let [wt, wh, ww] = [0, 1, 2].map(|a| self.axis_weights(a, pos[a]));
        let (nh, nw) = (self.axis_starts[1].len(), self.axis_starts[2].len());
        let mut out = Vec::with_capacity(wt.len() * wh.len() * ww.len());
        for &(it, a) in &wt {
            for &(ih, b) in &wh {
                for &(iw, c) in &ww {
                    out.push(((it * nh + ih) * nw + iw, a * b * c));
                }
            }
        }
        out
    }
}

pub fn plan_vae_tiles(
    latent: [u64; 3],
    tile: [u64; 3],
    overlap: [u64; 3],
    devices: u64,
) -> Result<TilePlan> {
    for a in 0..3 {
        if latent[a] == 0 || tile[a] == 0 {
            return Err(PlanError::Config(
                "latent and tile sizes must be positive".into(),
            ));
        }
        if overlap[a] >= tile[a] {
            return Err(PlanError::Config(format!(
                "overlap {} must be smaller than tile {} on axis {a}",
                overlap[a], tile[a]
            )));
        }
    }
    if devices == 0 {
        return Err(PlanError::Config("devices must be at least 1".into()));
    }
    let axis_starts = [0, 1, 2].map(|a| axis_starts(latent[a], tile[a], overlap[a]));
    let size = [0, 1, 2].map(|a| tile[a].min(latent[a]));
    let mut tiles = Vec::new();
    for &t in &axis_starts[0] {
        for &h in &axis_starts[1] {
            for &w in &axis_starts[2] {
                tiles.push(Tile {
                    start: [t, h, w],
                    size,
                });
            }
        }
    }
    let waves = (tiles.len() as u64).div_ceil(devices);
    Ok(TilePlan {
        latent,
        tile,
        overlap,
        axis_starts,
        speedup: tiles.len() as f64 / waves as f64,
        tiles,
        devices,
        waves,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DitLatency {
    pub latency_ms: f64,
    /// Videos per second across all nodes.
    pub throughput: f64,
    pub speedup: f64,
}

/// TP-SP inside a node, data parallel across nodes. Efficiency applies only
/// when the work is actually split.
pub fn dit_parallel_latency(
    single_device_ms: f64,
    tp: u64,
    nodes: u64,
    tp_efficiency: f64,
) -> DitLatency {
    let tp = tp.max(1);
    let eff = if tp > 1 { tp_efficiency } else { 1.0 };
    let latency_ms = single_device_ms / (tp as f64 * eff);
    DitLatency {
        latency_ms,
        throughput: nodes.max(1) as f64 * 1e3 / latency_ms,
        speedup: single_device_ms / latency_ms,
    }
}

/// Independent speedups composed multiplicatively.
pub fn composite_speedup(factors: &[f64]) -> f64 {
    factors.iter().product()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowPlan {
    pub n_prime: u64,
    pub n: u64,
    pub stride: u64,
    pub clips: u64,
    /// Half-open `[start, end)` latent ranges.
    pub ranges: Vec<(u64, u64)>,
    /// Number of clips covering each latent index.
    pub multiplicity: Vec<u64>,
}

pub fn plan_temporal_windows(n_prime: u64, n: u64, stride: u64) -> Result<WindowPlan> {
    if n == 0 || stride == 0 {
        return Err(PlanError::Config(
            "window and stride must be at least 1".into(),
        ));
    }
    if n > n_prime {
        return Err(PlanError::Config(format!(
            "window {n} exceeds latent length {n_prime}"
        )));
    }
    if stride > n {
        return Err(PlanError::Gap { stride, window: n });
    }
    let span = n_prime - n;
    let clips = span.div_ceil(stride) + 1;
    let ranges: Vec<(u64, u64)> = (0..clips)
        .map(|k| {
            let start = (k * stride).min(span);
            (start, start + n)
        })
        .collect();
    let mut multiplicity = vec![0u64; n_prime as usize];
    for &(a, b) in &ranges {
        for m in &mut multiplicity[a as usize..b as usize] {
            *m += 1;
        }
    }
    Ok(WindowPlan {
        n_prime,
        n,
        stride,
        clips,
        ranges,
        multiplicity,
    })
}

impl WindowPlan {
    /// Merges per-clip latents into the long latent: each index takes the
    /// mean of the clips covering it. `clips[k][j]` is index `j` of clip `k`.
    pub fn average(&self, clips: &[Vec<f64>]) -> Result<Vec<f64>> {
        if clips.len() as u64 != self.clips || clips.iter().any(|c| c.len() as u64 != self.n) {
            return Err(PlanError::Config(format!(
                "expected {} clips of length {}",
                self.clips, self.n
            )));
        }
        let mut out = vec![0.0; self.n_prime as usize];
        for (clip, &(start, _)) in clips.iter().zip(&self.ranges) {
            for (j, v) in clip.iter().enumerate() {
                let i = start as usize + j;
                out[i] += v / self.multiplicity[i] as f64;
            }
        }
        Ok(out)
    }
}
