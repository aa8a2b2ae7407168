//! Shared fixtures for the benchmarks.

use icube_core::cascade::{build_dataset, CascadeParams, CascadeRecord, SeedPool};
use icube_core::netgen::{generate, paper_ratio_preset};
use icube_core::HeteroGraph;

/// A generated network at `scale` of the reference sizes.
pub fn network(scale: f64, seed: u64) -> HeteroGraph {
    let mut cfg = paper_ratio_preset(scale);
    cfg.seed = seed;
    generate(&cfg).expect("preset generates")
}

/// `per_size` cascades for each initial size in `0..=max_size`.
pub fn cascades(g: &HeteroGraph, per_size: usize, max_size: usize, seed: u64) -> Vec<CascadeRecord> {
    build_dataset(g, per_size, 0..=max_size, SeedPool::All, &CascadeParams::default(), seed).expect("dataset builds")
}
