//! Ground-truth cascade oracles, dataset construction and the independent
//! cascade baseline.
//!
//! The dependency oracle evaluates all failure rules synchronously, round by
//! round, until nothing changes. Every rule is monotone in the failed set, so
//! the result is the least fixed point above the seed set.

use std::collections::VecDeque;
use std::ops::RangeInclusive;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FailedSet, HeteroGraph, LayerKind, RelationKind};
use crate::rng;

pub const DEPENDENCY_MODEL: &str = "dependency";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeParams {
    /// A node fails when strictly more than this fraction of its intra-layer
    /// neighbours have failed.
    pub intra_threshold: f64,
    /// AOI fails when all electric suppliers fail or more than half of its base stations fail.
    pub supplier_rule: bool,
    /// Own-layer anchor connectivity plus cross-layer supply dependencies.
    pub mutual_percolation: bool,
    /// Grid adequacy: once more than this fraction of electric nodes has
    /// failed, the remaining grid cannot balance load and every electric node
    /// fails. `None` disables the rule.
    #[serde(default)]
    pub grid_reserve: Option<f64>,
    pub max_rounds: usize,
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self {
            intra_threshold: 0.5,
            supplier_rule: true,
            mutual_percolation: true,
            grid_reserve: Some(0.04),
            max_rounds: 10_000,
        }
    }
}

impl CascadeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.intra_threshold) {
            return Err(Error::config("intra_threshold must lie in [0, 1]"));
        }
        if let Some(r) = self.grid_reserve {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config("grid_reserve must lie in [0, 1]"));
            }
        }
        if self.max_rounds == 0 {
            return Err(Error::config("max_rounds must be at least 1"));
        }
        Ok(())
    }
}

/// One labelled case: seed failures and the failures they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeRecord {
    pub case_id: u64,
    pub seed: u64,
    pub model: String,
    pub initial_failed: FailedSet,
    pub final_failed: FailedSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Reusable per-graph state for the dependency oracle.
pub struct DependencyOracle<'g> {
    graph: &'g HeteroGraph,
    params: CascadeParams,
    /// Node was connected to an anchor of its layer in the intact network.
    anchored: Vec<bool>,
    layers_with_anchors: Vec<LayerKind>,
}

impl<'g> DependencyOracle<'g> {
    pub fn new(graph: &'g HeteroGraph, params: &CascadeParams) -> Result<Self> {
        params.validate()?;
        let layers_with_anchors: Vec<LayerKind> = LayerKind::ALL
            .into_iter()
            .filter(|&l| l != LayerKind::Aoi && graph.layer_nodes(l).iter().any(|&v| graph.node(v).is_anchor()))
            .collect();
        let mut oracle = Self { graph, params: params.clone(), anchored: vec![false; graph.n()], layers_with_anchors };
        oracle.anchored = oracle.anchor_reach(&vec![false; graph.n()]);
        Ok(oracle)
    }

    pub fn graph(&self) -> &HeteroGraph {
        self.graph
    }

    /// Nodes reachable from a surviving anchor through surviving nodes of the same layer.
    fn anchor_reach(&self, failed: &[bool]) -> Vec<bool> {
        let g = self.graph;
        let mut reached = vec![false; g.n()];
        let mut queue = VecDeque::new();
        for &layer in &self.layers_with_anchors {
            for &v in g.layer_nodes(layer) {
                if g.node(v).is_anchor() && !failed[v] {
                    reached[v] = true;
                    queue.push_back(v);
                }
            }
        }
        while let Some(u) = queue.pop_front() {
            for &w in g.intra_neighbors(u) {
                if !reached[w] && !failed[w] {
                    reached[w] = true;
                    queue.push_back(w);
                }
            }
        }
        reached
    }

    fn all_failed(failed: &[bool], suppliers: &[usize]) -> bool {
        !suppliers.is_empty() && suppliers.iter().all(|&s| failed[s])
    }

    fn fails(&self, v: usize, failed: &[bool], reach: Option<&[bool]>) -> bool {
        let g = self.graph;
        let p = &self.params;
        let intra = g.intra_neighbors(v);
        if !intra.is_empty() {
            let down = intra.iter().filter(|&&u| failed[u]).count();
            if down as f64 > p.intra_threshold * intra.len() as f64 {
                return true;
            }
        }
        let layer = g.layer(v);
        if p.supplier_rule && layer == LayerKind::Aoi {
            if Self::all_failed(failed, g.neighbors_by(v, RelationKind::ElecAoi)) {
                return true;
            }
            let stations = g.neighbors_by(v, RelationKind::ComAoi);
            let down = stations.iter().filter(|&&s| failed[s]).count();
            if 2 * down > stations.len() {
                return true;
            }
        }
        if let Some(reach) = reach {
            if self.anchored[v] && !reach[v] {
                return true;
            }
            let depends_on = match layer {
                LayerKind::Electric | LayerKind::Communication => g.neighbors_by(v, RelationKind::ElecCom),
                LayerKind::Road => g.neighbors_by(v, RelationKind::ElecRoad),
                LayerKind::Aoi => &[],
            };
            if Self::all_failed(failed, depends_on) {
                return true;
            }
        }
        false
    }

    fn grid_collapsed(&self, failed: &[bool]) -> bool {
        let Some(reserve) = self.params.grid_reserve else { return false };
        let elec = self.graph.layer_nodes(LayerKind::Electric);
        let down = elec.iter().filter(|&&v| failed[v]).count();
        !elec.is_empty() && down as f64 > reserve * elec.len() as f64
    }

    /// Runs the cascade from `initial` to its fixed point.
    pub fn run(&self, initial: &FailedSet) -> Result<FailedSet> {
        let g = self.graph;
        if let Some(m) = initial.max_id() {
            if m >= g.n() {
                return Err(Error::contract(format!("initial failure {m} outside graph of {} nodes", g.n())));
            }
        }
        let mut failed = initial.mask(g.n());
        for _ in 0..self.params.max_rounds {
            let reach = self.params.mutual_percolation.then(|| self.anchor_reach(&failed));
            let blackout = self.grid_collapsed(&failed);
            let newly: Vec<usize> = (0..g.n())
                .filter(|&v| {
                    !failed[v]
                        && ((blackout && g.layer(v) == LayerKind::Electric)
                            || self.fails(v, &failed, reach.as_deref()))
                })
                .collect();
            if newly.is_empty() {
                return Ok(FailedSet::from_mask(&failed));
            }
            for v in newly {
                failed[v] = true;
            }
        }
        Err(Error::NotConverged { rounds: self.params.max_rounds, partial: FailedSet::from_mask(&failed) })
    }
}

/// Final failed set induced by `initial` under the dependency rules.
pub fn dependency_cascade(g: &HeteroGraph, initial: &FailedSet, params: &CascadeParams) -> Result<FailedSet> {
    DependencyOracle::new(g, params)?.run(initial)
}

/// Per-relation activation probabilities for the independent cascade model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationProbs(pub [f64; 8]);

impl RelationProbs {
    pub fn uniform(p: f64) -> Self {
        Self([p; 8])
    }

    pub fn get(&self, rel: RelationKind) -> f64 {
        self.0[rel.index()]
    }
}

/// Independent cascade: each newly failed node gets one chance to fail each
/// neighbour, succeeding with the relation's probability.
pub fn icm_predict(g: &HeteroGraph, initial: &FailedSet, probs: &RelationProbs, seed: u64) -> Result<FailedSet> {
    if probs.0.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::contract("activation probabilities must lie in [0, 1]"));
    }
    let mut rng = rng::rng(seed);
    let mut failed = initial.mask(g.n());
    let mut frontier: Vec<usize> = initial.iter().collect();
    let rels = g.relations_present();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &u in &frontier {
            for &rel in &rels {
                let p = probs.get(rel);
                for &v in g.neighbors_by(u, rel) {
                    if !failed[v] && rng.gen::<f64>() < p {
                        failed[v] = true;
                        next.push(v);
                    }
                }
            }
        }
        frontier = next;
    }
    Ok(FailedSet::from_mask(&failed))
}

/// Fits each relation's probability as the fraction of edges from a failed
/// node to a node outside `D` whose far end also failed, pooled over records.
/// Relations never observed get probability 0.
pub fn calibrate_icm(g: &HeteroGraph, records: &[CascadeRecord]) -> RelationProbs {
    let mut hit = [0u64; 8];
    let mut seen = [0u64; 8];
    for r in records {
        for e in g.edges() {
            for (u, v) in [(e.src, e.dst), (e.dst, e.src)] {
                if r.final_failed.contains(u) && !r.initial_failed.contains(v) {
                    seen[e.rel.index()] += 1;
                    hit[e.rel.index()] += u64::from(r.final_failed.contains(v));
                }
            }
        }
    }
    RelationProbs(std::array::from_fn(|i| if seen[i] == 0 { 0.0 } else { hit[i] as f64 / seen[i] as f64 }))
}

/// Monte Carlo failure frequency of every node over `runs` independent
/// cascades. Runs use seeds `seed, seed + 1, ...`.
pub fn icm_scores(g: &HeteroGraph, initial: &FailedSet, probs: &RelationProbs, runs: usize, seed: u64) -> Result<Vec<f64>> {
    if runs == 0 {
        return Err(Error::config("ICM scoring needs at least one run"));
    }
    let mut counts = vec![0u32; g.n()];
    for k in 0..runs as u64 {
        for v in icm_predict(g, initial, probs, seed.wrapping_add(k))?.iter() {
            counts[v] += 1;
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / runs as f64).collect())
}

/// Which nodes initial failures are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedPool {
    #[default]
    All,
    Layer(LayerKind),
}

impl SeedPool {
    pub fn members(&self, g: &HeteroGraph) -> Vec<usize> {
        match self {
            SeedPool::All => (0..g.n()).collect(),
            SeedPool::Layer(l) => g.layer_nodes(*l).to_vec(),
        }
    }
}

/// Draws `count` initial failures uniformly without replacement from `pool`.
pub fn sample_initial(pool: &[usize], count: usize, seed: u64) -> FailedSet {
    let mut rng = rng::rng(seed);
    index::sample(&mut rng, pool.len(), count).into_iter().map(|i| pool[i]).collect()
}

/// For each size in `sizes`, `count_per_size` records with uniformly drawn
/// initial failures. Case ids run size-major from 0.
pub fn build_dataset(
    g: &HeteroGraph,
    count_per_size: usize,
    sizes: RangeInclusive<usize>,
    pool: SeedPool,
    params: &CascadeParams,
    seed: u64,
) -> Result<Vec<CascadeRecord>> {
    if sizes.is_empty() {
        return Err(Error::config("size range is empty"));
    }
    let members = pool.members(g);
    if *sizes.end() > members.len() {
        return Err(Error::config(format!(
            "cannot draw {} initial failures from a pool of {} nodes",
            sizes.end(),
            members.len()
        )));
    }
    let oracle = DependencyOracle::new(g, params)?;
    let jobs: Vec<(u64, usize)> = sizes
        .flat_map(|size| std::iter::repeat(size).take(count_per_size))
        .enumerate()
        .map(|(i, size)| (i as u64, size))
        .collect();
    jobs.par_iter()
        .map(|&(case_id, size)| {
            let case_seed = rng::case_stream(seed, case_id);
            let initial = sample_initial(&members, size, case_seed);
            let final_failed = oracle.run(&initial)?;
            Ok(CascadeRecord {
                case_id,
                seed: case_seed,
                model: DEPENDENCY_MODEL.to_string(),
                initial_failed: initial,
                final_failed,
                config_hash: None,
            })
        })
        .collect()
}

/// Mean final-failure fraction per initial-failure count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCurve {
    pub sizes: Vec<usize>,
    pub mean_fraction: Vec<f64>,
    pub transition: usize,
}

/// Index `i` maximising `curve[i + 1] - curve[i]`; ties go to the lowest index.
pub fn transition_index(curve: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, w) in curve.windows(2).enumerate() {
        let d = w[1] - w[0];
        if d > best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Ratio of the largest forward difference to the median forward difference.
pub fn transition_sharpness(curve: &[f64]) -> f64 {
    let mut diffs: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).collect();
    if diffs.is_empty() {
        return 0.0;
    }
    diffs.sort_by(f64::total_cmp);
    let max = *diffs.last().unwrap();
    let mid = diffs.len() / 2;
    let median = if diffs.len() % 2 == 0 { 0.5 * (diffs[mid - 1] + diffs[mid]) } else { diffs[mid] };
    if median <= 0.0 {
        if max > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        max / median
    }
}

/// Sweeps initial-failure counts `0..=max_seed_size`, averaging `reps` cascades each.
pub fn phase_sweep(
    g: &HeteroGraph,
    params: &CascadeParams,
    max_seed_size: usize,
    reps: usize,
    pool: SeedPool,
    seed: u64,
) -> Result<PhaseCurve> {
    if reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    let records = build_dataset(g, reps, 0..=max_seed_size, pool, params, seed)?;
    let n = g.n() as f64;
    let mut mean_fraction = vec![0.0; max_seed_size + 1];
    for r in &records {
        mean_fraction[r.initial_failed.len()] += r.final_failed.len() as f64 / n;
    }
    for f in &mut mean_fraction {
        *f /= reps as f64;
    }
    let transition = transition_index(&mean_fraction);
    Ok(PhaseCurve { sizes: (0..=max_seed_size).collect(), mean_fraction, transition })
}

/// Writes records as JSON lines.
pub fn write_records(records: &[CascadeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_records(text: &str) -> Result<Vec<CascadeRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| {
                let mut err = crate::graph::json_error(&e);
                if let Error::Parse { location, .. } = &mut err {
                    location.line = i + 1;
                }
                err
            })
        })
        .collect()
}
