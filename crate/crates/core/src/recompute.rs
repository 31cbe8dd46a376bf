//! Selective recomputation: which chunks of a block to drop in forward and
//! recompute in backward so that a per-layer savings target is met at the
//! least added latency.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{PlanError, Result};
use crate::memory::{chunk_retained_bytes, ActShape, ChunkCost, ChunkSpec, MIB};

/// Largest chunk set [`brute_force_recompute`] will enumerate.
pub const MAX_EXHAUSTIVE_CHUNKS: usize = 20;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RecomputePlan {
    /// Chunk names in the order they were selected.
    pub selected: Vec<String>,
    pub bytes_saved_per_layer: u64,
    pub latency_added_per_layer_ms: f64,
    pub feasible: bool,
}

impl RecomputePlan {
    /// Plan for an explicit selection, in the given order.
    pub fn from_selection(costs: &[ChunkCost], names: &[&str]) -> Result<Self> {
        let picked = names
            .iter()
            .map(|n| {
                costs
                    .iter()
                    .find(|c| c.name == *n)
                    .ok_or_else(|| PlanError::UnknownChunk(n.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_costs(&picked, true))
    }

    fn from_costs(picked: &[&ChunkCost], feasible: bool) -> Self {
        Self {
            selected: picked.iter().map(|c| c.name.clone()).collect(),
            bytes_saved_per_layer: picked.iter().map(|c| c.bytes).sum(),
            // `+ 0.0` turns the empty sum's -0.0 into 0.0
            latency_added_per_layer_ms: picked.iter().map(|c| c.latency_ms).sum::<f64>() + 0.0,
            feasible,
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.selected.iter().any(|n| n == name)
    }
}

/// Retained MiB saved per millisecond of forward latency.
pub fn memory_latency_ratio(chunk: &ChunkSpec, shape: &ActShape) -> f64 {
    chunk_retained_bytes(chunk, shape) as f64 / MIB / chunk.fwd_latency_ms
}

fn ratio(cost: &ChunkCost) -> f64 {
    cost.bytes as f64 / cost.latency_ms
}

/// Chunks sorted by descending memory-latency ratio, ties by lower latency
/// then name.
pub fn rank_by_ratio(costs: &[ChunkCost]) -> Vec<&ChunkCost> {
    let mut ranked: Vec<&ChunkCost> = costs.iter().collect();
    ranked.sort_by(|a, b| {
        ratio(b)
            .partial_cmp(&ratio(a))
            .unwrap_or(Ordering::Equal)
            .then(
                a.latency_ms
                    .partial_cmp(&b.latency_ms)
                    .unwrap_or(Ordering::Equal),
            )
            .then_with(|| a.name.cmp(&b.name))
    });
    ranked
}

/// Greedy selection under a per-layer savings target.
///
/// Each round takes the candidate with the best ratio of *useful* savings,
/// `min(bytes, remaining) / latency`, so while the remaining target is
/// larger than every chunk this is plain descending-ratio order. Once the
/// target is met, chunks that have become redundant are dropped, most
/// expensive first. Non-recomputable chunks are never considered.
pub fn plan_recompute(costs: &[ChunkCost], required_bytes: u64) -> RecomputePlan {
    let mut pool: Vec<&ChunkCost> = costs.iter().filter(|c| c.recomputable).collect();
    let mut picked: Vec<&ChunkCost> = Vec::new();
    let mut saved: u64 = 0;

    while saved < required_bytes && !pool.is_empty() {
        let remaining = (required_bytes - saved) as f64;
        let useful = |c: &ChunkCost| (c.bytes as f64).min(remaining) / c.latency_ms;
        let best = (0..pool.len())
            .min_by(|&i, &j| {
                let (a, b) = (pool[i], pool[j]);
                useful(b)
                    .partial_cmp(&useful(a))
                    .unwrap_or(Ordering::Equal)
                    .then(
                        a.latency_ms
                            .partial_cmp(&b.latency_ms)
                            .unwrap_or(Ordering::Equal),
                    )
                    .then_with(|| a.name.cmp(&b.name))
            })
            .expect("pool is not empty");
        let chunk = pool.remove(best);
        saved += chunk.bytes;
        picked.push(chunk);
    }

    if saved < required_bytes {
        return RecomputePlan::from_costs(&picked, false);
    }

    let mut by_cost: Vec<&ChunkCost> = picked.clone();
    by_cost.sort_by(|a, b| {
        b.latency_ms
            .partial_cmp(&a.latency_ms)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });
    for chunk in by_cost {
        if saved - chunk.bytes >= required_bytes {
            saved -= chunk.bytes;
            picked.retain(|c| c.name != chunk.name);
        }
    }
    RecomputePlan::from_costs(&picked, true)
}

/// Exhaustive optimum: the feasible subset with the least added latency,
/// ties broken by fewer chunks, then by the lexicographically smallest
/// sorted name list. Intended as a reference for small tables.
pub fn brute_force_recompute(costs: &[ChunkCost], required_bytes: u64) -> Result<RecomputePlan> {
    let pool: Vec<&ChunkCost> = costs.iter().filter(|c| c.recomputable).collect();
    if pool.len() > MAX_EXHAUSTIVE_CHUNKS {
        return Err(PlanError::TooManyChunks {
            got: pool.len(),
            max: MAX_EXHAUSTIVE_CHUNKS,
        });
    }

    let names_of = |mask: u32| {
        let mut names: Vec<&str> = (0..pool.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| pool[i].name.as_str())
            .collect();
        names.sort_unstable();
        names
    };

    let mut best: Option<(f64, u32, u32)> = None;
    for mask in 0u32..(1u32 << pool.len()) {
        let (mut bytes, mut latency) = (0u64, 0.0f64);
        for (i, c) in pool.iter().enumerate() {
            if mask & (1 << i) != 0 {
                bytes += c.bytes;
                latency += c.latency_ms;
            }
        }
        if bytes < required_bytes {
            continue;
        }
        let count = mask.count_ones();
        let better = match best {
            None => true,
            Some((best_latency, best_count, best_mask)) => {
                if (latency - best_latency).abs() > 1e-9 {
                    latency < best_latency
                } else if count != best_count {
                    count < best_count
                } else {
                    names_of(mask) < names_of(best_mask)
                }
            }
        };
        if better {
            best = Some((latency, count, mask));
        }
    }

    Ok(match best {
        Some((_, _, mask)) => {
            let picked: Vec<&ChunkCost> = (0..pool.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| pool[i])
                .collect();
            RecomputePlan::from_costs(&picked, true)
        }
        None => RecomputePlan::from_costs(&pool, false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::ChunkTable;

    fn reference_costs() -> Vec<ChunkCost> {
        ChunkTable::reference().evaluate(&ActShape::new(1, 115_200, 3072, 24, 8))
    }

    fn mib(v: f64) -> u64 {
        (v * MIB).round() as u64
    }

    fn cost(name: &str, bytes: u64, latency_ms: f64) -> ChunkCost {
        ChunkCost {
            name: name.into(),
            bytes,
            latency_ms,
            recomputable: true,
            offloadable: true,
            attention: false,
        }
    }

    #[test]
    fn ratio_examples() {
        let table = ChunkTable::reference();
        let shape = ActShape::new(1, 115_200, 3072, 24, 8);
        let gelu = table.chunks.iter().find(|c| c.name == "GeLU").unwrap();
        assert!((memory_latency_ratio(gelu, &shape) - 527.34).abs() < 0.01);
        let fa = &table.chunks[0];
        assert!((memory_latency_ratio(fa, &shape) - 0.827).abs() < 0.001);
        let empty = ChunkSpec::new("noop", 0.0, 0.0, 1.0);
        assert_eq!(memory_latency_ratio(&empty, &shape), 0.0);
    }

    #[test]
    fn ranking_follows_ratio_column() {
        let costs = reference_costs();
        let names: Vec<_> = rank_by_ratio(&costs)
            .iter()
            .map(|c| c.name.as_str())
            .collect();
        assert_eq!(
            names,
            [
                "GeLU",
                "LayerNorm+Scale/Shift",
                "Gate",
                "Fused QKNorm",
                "AllGather + FFN_Linear1",
                "AllGather + QKV_Linear",
                "FFN_Linear2 + ReduceScatter",
                "Out_Linear + ReduceScatter",
                "Flash Attention",
            ]
        );
    }

    #[test]
    fn four_hundred_mib() {
        let costs = reference_costs();
        let plan = plan_recompute(&costs, mib(400.0));
        assert!(plan.feasible);
        assert_eq!(plan.selected, ["GeLU", "Gate"]);
        assert!((plan.latency_added_per_layer_ms - 1.00).abs() < 1e-9);
        let oracle = brute_force_recompute(&costs, mib(400.0)).unwrap();
        assert!((oracle.latency_added_per_layer_ms - 1.00).abs() < 1e-9);
    }

    #[test]
    fn five_hundred_mib_takes_the_two_best_ratios() {
        let plan = plan_recompute(&reference_costs(), mib(500.0));
        assert_eq!(plan.selected, ["GeLU", "LayerNorm+Scale/Shift"]);
        assert!((plan.latency_added_per_layer_ms - 1.22).abs() < 1e-9);
        assert_eq!(plan.bytes_saved_per_layer, mib(506.25));
    }

    #[test]
    fn nothing_required() {
        let plan = plan_recompute(&reference_costs(), 0);
        assert!(plan.feasible);
        assert!(plan.selected.is_empty());
        assert_eq!(plan.latency_added_per_layer_ms, 0.0);
        let oracle = brute_force_recompute(&reference_costs(), 0).unwrap();
        assert!(oracle.selected.is_empty());
    }

    #[test]
    fn exhaustion_is_infeasible() {
        let costs = reference_costs();
        let total: u64 = costs.iter().map(|c| c.bytes).sum();
        let plan = plan_recompute(&costs, total + 1);
        assert!(!plan.feasible);
        assert_eq!(plan.selected.len(), costs.len());
        let oracle = brute_force_recompute(&costs, total + 1).unwrap();
        assert!(!oracle.feasible);
    }

    #[test]
    fn dominance_picks_cheaper() {
        let costs = [cost("slow", 10, 2.0), cost("fast", 10, 1.0)];
        assert_eq!(
            brute_force_recompute(&costs, 10).unwrap().selected,
            ["fast"]
        );
        assert_eq!(plan_recompute(&costs, 10).selected, ["fast"]);
    }

    #[test]
    fn oracle_ties_prefer_fewer_then_names() {
        let costs = [
            cost("b", 10, 1.0),
            cost("a", 10, 1.0),
            cost("c", 5, 0.5),
            cost("d", 5, 0.5),
        ];
        // {a} and {b} and {c,d} all cost 1.0 ms
        assert_eq!(brute_force_recompute(&costs, 10).unwrap().selected, ["a"]);
    }

    #[test]
    fn non_recomputable_chunks_are_skipped() {
        let mut costs = reference_costs();
        costs
            .iter_mut()
            .find(|c| c.name == "GeLU")
            .unwrap()
            .recomputable = false;
        let plan = plan_recompute(&costs, mib(300.0));
        assert!(!plan.contains("GeLU"));
        assert!(!brute_force_recompute(&costs, mib(300.0))
            .unwrap()
            .contains("GeLU"));
    }

    #[test]
    fn oracle_size_limit() {
        let costs: Vec<_> = (0..21).map(|i| cost(&format!("c{i}"), 1, 1.0)).collect();
        assert_eq!(
            brute_force_recompute(&costs, 1),
            Err(PlanError::TooManyChunks { got: 21, max: 20 })
        );
    }

    #[test]
    fn explicit_selection() {
        let costs = reference_costs();
        let plan =
            RecomputePlan::from_selection(&costs, &["GeLU", "LayerNorm+Scale/Shift"]).unwrap();
        assert!((plan.latency_added_per_layer_ms - 1.22).abs() < 1e-12);
        assert!(RecomputePlan::from_selection(&costs, &["nope"]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn costs_strategy() -> impl Strategy<Value = Vec<ChunkCost>> {
            proptest::collection::vec((1u64..1000, 1u32..1000), 1..9).prop_map(|v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (b, l))| cost(&format!("c{i}"), b, l as f64 / 10.0))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn greedy_feasible_iff_oracle_feasible(costs in costs_strategy(), frac in 0.0f64..1.2) {
                let total: u64 = costs.iter().map(|c| c.bytes).sum();
                let required = (total as f64 * frac) as u64;
                let greedy = plan_recompute(&costs, required);
                let oracle = brute_force_recompute(&costs, required).unwrap();
                prop_assert_eq!(greedy.feasible, oracle.feasible);
                if oracle.feasible {
                    prop_assert!(greedy.bytes_saved_per_layer >= required);
                    prop_assert!(greedy.latency_added_per_layer_ms + 1e-9 >= oracle.latency_added_per_layer_ms);
                }
                let lat: f64 = greedy.selected.iter()
                    .map(|n| costs.iter().find(|c| &c.name == n).unwrap().latency_ms)
                    .sum();
                prop_assert!((lat - greedy.latency_added_per_layer_ms).abs() < 1e-9);
            }
        }
    }
}
