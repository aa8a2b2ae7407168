//! Deterministic synthetic interdependent-network generator.
//!
//! Every node gets a random position in the unit square; the positions drive
//! intra-layer wiring (electric and road) and nearest-supplier coupling, then
//! are discarded.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, HeteroGraph, LayerKind, NodeRecord, RelationKind};
use crate::rng::{self, Rng};

/// Electric layer: a spanning backbone over the top (generator) tier; every
/// lower-tier node is fed from its two nearest higher-tier nodes, then
/// nearest-neighbour shortcuts are added up to `edges`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectricParams {
    /// Fraction of electric nodes in the top (generator) tier.
    pub top_fraction: f64,
    /// Fraction in the middle (substation) tier.
    pub mid_fraction: f64,
    /// Target intra-layer edge count. The dual-fed backbone alone may exceed it.
    pub edges: usize,
}

/// Road layer: Euclidean spanning tree plus shortest degree-bounded links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadParams {
    pub edges: usize,
    pub max_degree: usize,
    /// Fraction of highest-degree junctions marked as anchors.
    pub anchor_fraction: f64,
}

/// Communication layer: preferential attachment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComParams {
    /// Links added per new node; the initial `m + 1` core clique are anchors.
    pub m: usize,
}

/// Expected coupling edges per target node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingDensities {
    /// Electric suppliers per road node.
    pub elec_road: f64,
    /// Electric suppliers per communication node.
    pub elec_com: f64,
    /// Electric suppliers per AOI.
    pub elec_aoi: f64,
    /// Base stations per AOI.
    pub com_aoi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_elec: usize,
    pub n_road: usize,
    pub n_com: usize,
    pub n_aoi: usize,
    pub electric: ElectricParams,
    pub road: RoadParams,
    pub com: ComParams,
    pub coupling: CouplingDensities,
    #[serde(default)]
    pub seed: u64,
}

// Synthetic network sizes and edge counts.
const N_ELEC: f64 = 10_227.0;
const N_ROAD: f64 = 4_825.0;
const N_COM: f64 = 20_229.0;
const E_ELEC: f64 = 7_799.0;
const E_ROAD: f64 = 20_352.0;
const E_COM: f64 = 44_282.0;
const E_ELEC_ROAD: f64 = 7_799.0;
const E_ELEC_COM: f64 = 20_352.0;
const E_ELEC_AOI: f64 = 21_569.0;
const E_COM_AOI: f64 = 37_279.0;
// Not published; chosen so each AOI has two electric suppliers on average.
const N_AOI: f64 = 10_785.0;

fn scaled(value: f64, scale: f64) -> usize {
    ((value * scale).round() as usize).max(1)
}

/// Configuration reproducing the synthetic dataset's size and coupling ratios at `scale`.
pub fn paper_ratio_preset(scale: f64) -> GenConfig {
    let n_elec = scaled(N_ELEC, scale);
    let n_road = scaled(N_ROAD, scale);
    let n_com = scaled(N_COM, scale);
    let n_aoi = scaled(N_AOI, scale);
    let density = |edges: f64, targets: usize| scaled(edges, scale) as f64 / targets as f64;
    GenConfig {
        n_elec,
        n_road,
        n_com,
        n_aoi,
        electric: ElectricParams { top_fraction: 0.02, mid_fraction: 0.2, edges: scaled(E_ELEC, scale) },
        road: RoadParams { edges: scaled(E_ROAD, scale), max_degree: 12, anchor_fraction: 0.05 },
        com: ComParams { m: (E_COM / N_COM).round() as usize },
        coupling: CouplingDensities {
            elec_road: density(E_ELEC_ROAD, n_road),
            elec_com: density(E_ELEC_COM, n_com),
            elec_aoi: density(E_ELEC_AOI, n_aoi),
            com_aoi: density(E_COM_AOI, n_aoi),
        },
        seed: 0,
    }
}

impl GenConfig {
    pub fn total_nodes(&self) -> usize {
        self.n_elec + self.n_road + self.n_com + self.n_aoi
    }

    /// Exact number of coupling edges the generator emits for `rel`.
    pub fn coupling_edge_target(&self, rel: RelationKind) -> usize {
        match rel {
            RelationKind::ElecRoad => (self.coupling.elec_road * self.n_road as f64).round() as usize,
            RelationKind::ElecCom => (self.coupling.elec_com * self.n_com as f64).round() as usize,
            RelationKind::ElecAoi => (self.coupling.elec_aoi * self.n_aoi as f64).round() as usize,
            RelationKind::ComAoi => (self.coupling.com_aoi * self.n_aoi as f64).round() as usize,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("n_elec", self.n_elec), ("n_road", self.n_road), ("n_com", self.n_com), ("n_aoi", self.n_aoi)] {
            if n == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        let e = &self.electric;
        if !(0.0..=1.0).contains(&e.top_fraction) || !(0.0..=1.0).contains(&e.mid_fraction) || e.top_fraction + e.mid_fraction > 1.0 {
            return Err(Error::config("electric tier fractions must lie in [0, 1] and sum to at most 1"));
        }
        if !(0.0..=1.0).contains(&self.road.anchor_fraction) {
            return Err(Error::config("road.anchor_fraction must lie in [0, 1]"));
        }
        if self.road.max_degree < 2 {
            return Err(Error::config("road.max_degree must be at least 2"));
        }
        if self.com.m == 0 {
            return Err(Error::config("com.m must be at least 1"));
        }
        let c = &self.coupling;
        for (name, d) in [("elec_road", c.elec_road), ("elec_com", c.elec_com), ("elec_aoi", c.elec_aoi), ("com_aoi", c.com_aoi)] {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::config(format!("coupling.{name} must be a non-negative number")));
            }
        }
        for (rel, suppliers) in [(RelationKind::ElecAoi, self.n_elec), (RelationKind::ComAoi, self.n_com)] {
            if self.coupling_edge_target(rel) < self.n_aoi {
                return Err(Error::config(format!(
                    "{rel} density yields {} edges for {} AOIs; every AOI needs at least one supplier",
                    self.coupling_edge_target(rel),
                    self.n_aoi
                )));
            }
            let per_target = self.coupling_edge_target(rel).div_ceil(self.n_aoi);
            if per_target > suppliers {
                return Err(Error::config(format!("{rel} asks for {per_target} suppliers per AOI but only {suppliers} exist")));
            }
        }
        for (rel, targets, suppliers) in [(RelationKind::ElecRoad, self.n_road, self.n_elec), (RelationKind::ElecCom, self.n_com, self.n_elec)] {
            if self.coupling_edge_target(rel).div_ceil(targets) > suppliers {
                return Err(Error::config(format!("{rel} density exceeds the number of electric nodes")));
            }
        }
        Ok(())
    }
}

type Point = (f64, f64);

fn dist2(a: Point, b: Point) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Generates the coupled graph. Pure function of the config.
pub fn generate(cfg: &GenConfig) -> Result<HeteroGraph> {
    cfg.validate()?;
    let mut rng = rng::rng(cfg.seed);

    let elec0 = 0;
    let road0 = elec0 + cfg.n_elec;
    let com0 = road0 + cfg.n_road;
    let aoi0 = com0 + cfg.n_com;
    let n = aoi0 + cfg.n_aoi;
    let pos: Vec<Point> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();

    let mut nodes: Vec<NodeRecord> = Vec::with_capacity(n);
    let mut edges: Vec<Edge> = Vec::new();

    // Electric
    let n_top = ((cfg.electric.top_fraction * cfg.n_elec as f64).round() as usize).clamp(1, cfg.n_elec);
    let n_mid = ((cfg.electric.mid_fraction * cfg.n_elec as f64).round() as usize).min(cfg.n_elec - n_top);
    for i in 0..cfg.n_elec {
        let tier = if i < n_top { 0 } else if i < n_top + n_mid { 1 } else { 2 };
        nodes.push(NodeRecord::new(elec0 + i, LayerKind::Electric).with_tier(tier));
    }
    let elec_pos = &pos[elec0..road0];
    let mut elec_pairs = spanning_tree(&elec_pos[..n_top]);
    for i in n_top..cfg.n_elec {
        let parents = if i < n_top + n_mid { 0..n_top } else { 0..n_top + n_mid };
        let parent = nearest(elec_pos[i], parents.clone().map(|j| (j, elec_pos[j])));
        elec_pairs.push((parent, i));
        // Dual feed, so a single failure never islands a node.
        if n_top > 1 {
            let second = nearest(elec_pos[i], parents.filter(|&j| j != parent).map(|j| (j, elec_pos[j])));
            elec_pairs.push((second, i));
        }
    }
    let elec_target = cfg.electric.edges.max(cfg.n_elec - 1);
    add_shortcuts(elec_pos, &mut elec_pairs, elec_target, usize::MAX);
    edges.extend(elec_pairs.into_iter().map(|(a, b)| Edge::new(elec0 + a, elec0 + b, RelationKind::ElecElec)));

    // Road
    let road_pos = &pos[road0..com0];
    let mut road_pairs = spanning_tree(road_pos);
    add_shortcuts(road_pos, &mut road_pairs, cfg.road.edges.max(cfg.n_road - 1), cfg.road.max_degree);
    let mut degree = vec![0usize; cfg.n_road];
    for &(a, b) in &road_pairs {
        degree[a] += 1;
        degree[b] += 1;
    }
    let n_anchor = ((cfg.road.anchor_fraction * cfg.n_road as f64).round() as usize).clamp(1, cfg.n_road);
    let mut by_degree: Vec<usize> = (0..cfg.n_road).collect();
    by_degree.sort_by_key(|&i| (std::cmp::Reverse(degree[i]), i));
    let mut road_anchor = vec![false; cfg.n_road];
    for &i in &by_degree[..n_anchor] {
        road_anchor[i] = true;
    }
    for (i, &anchor) in road_anchor.iter().enumerate() {
        nodes.push(NodeRecord::new(road0 + i, LayerKind::Road).with_tier(if anchor { 0 } else { 1 }));
    }
    edges.extend(road_pairs.into_iter().map(|(a, b)| Edge::new(road0 + a, road0 + b, RelationKind::RoadRoad)));

    // Communication
    let m = cfg.com.m;
    let core = (m + 1).min(cfg.n_com);
    for i in 0..cfg.n_com {
        nodes.push(NodeRecord::new(com0 + i, LayerKind::Communication).with_tier(if i < core { 0 } else { 1 }));
    }
    for (a, b) in preferential_attachment(cfg.n_com, m, &mut rng) {
        edges.push(Edge::new(com0 + a, com0 + b, RelationKind::ComCom));
    }

    // AOI
    for i in 0..cfg.n_aoi {
        nodes.push(NodeRecord::new(aoi0 + i, LayerKind::Aoi));
    }

    // Coupling
    let ranges = [
        (RelationKind::ElecRoad, elec0..road0, road0..com0),
        (RelationKind::ElecCom, elec0..road0, com0..aoi0),
        (RelationKind::ElecAoi, elec0..road0, aoi0..n),
        (RelationKind::ComAoi, com0..aoi0, aoi0..n),
    ];
    for (rel, suppliers, targets) in ranges {
        let count = cfg.coupling_edge_target(rel);
        let min_one = matches!(rel, RelationKind::ElecAoi | RelationKind::ComAoi);
        let sup: Vec<usize> = suppliers.collect();
        let tgt: Vec<usize> = targets.collect();
        for (s, t) in couple(&pos, &sup, &tgt, count, min_one, &mut rng) {
            edges.push(Edge::new(s, t, rel));
        }
    }

    HeteroGraph::new(nodes, edges)
}

fn nearest(p: Point, candidates: impl Iterator<Item = (usize, Point)>) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (j, q) in candidates {
        let d = dist2(p, q);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Euclidean minimum spanning tree (Prim, dense).
fn spanning_tree(pos: &[Point]) -> Vec<(usize, usize)> {
    let n = pos.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![(f64::INFINITY, 0usize); n];
    let mut pairs = Vec::with_capacity(n - 1);
    in_tree[0] = true;
    for j in 1..n {
        best[j] = (dist2(pos[0], pos[j]), 0);
    }
    for _ in 1..n {
        let (next, _) = (0..n)
            .filter(|&j| !in_tree[j])
            .map(|j| (j, best[j].0))
            .fold((usize::MAX, f64::INFINITY), |acc, (j, d)| if d < acc.1 { (j, d) } else { acc });
        in_tree[next] = true;
        let parent = best[next].1;
        pairs.push((parent.min(next), parent.max(next)));
        for j in 0..n {
            if !in_tree[j] {
                let d = dist2(pos[next], pos[j]);
                if d < best[j].0 {
                    best[j] = (d, next);
                }
            }
        }
    }
    pairs
}

/// Adds the shortest missing links among each node's nearest neighbours until
/// `target` edges exist, respecting `max_degree`.
fn add_shortcuts(pos: &[Point], pairs: &mut Vec<(usize, usize)>, target: usize, max_degree: usize) {
    let n = pos.len();
    if pairs.len() >= target || n < 3 {
        return;
    }
    let mut existing: std::collections::HashSet<(usize, usize)> = pairs.iter().copied().collect();
    let mut degree = vec![0usize; n];
    for &(a, b) in pairs.iter() {
        degree[a] += 1;
        degree[b] += 1;
    }
    let need = target - pairs.len();
    let k = (2 * need / n + 4).min(n - 1);
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        let mut near: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist2(pos[i], pos[j]), j)).collect();
        let kk = k.min(near.len());
        near.select_nth_unstable_by(kk - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in &near[..kk] {
            if i < j {
                candidates.push((d, i, j));
            } else {
                candidates.push((d, j, i));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    candidates.dedup_by(|a, b| a.1 == b.1 && a.2 == b.2);
    for (_, a, b) in candidates {
        if pairs.len() >= target {
            break;
        }
        if degree[a] >= max_degree || degree[b] >= max_degree || !existing.insert((a, b)) {
            continue;
        }
        degree[a] += 1;
        degree[b] += 1;
        pairs.push((a, b));
    }
}

/// Preferential attachment starting from an `(m + 1)`-clique core.
fn preferential_attachment(n: usize, m: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let core = (m + 1).min(n);
    let mut pairs = Vec::new();
    let mut endpoints: Vec<usize> = Vec::new();
    for a in 0..core {
        for b in a + 1..core {
            pairs.push((a, b));
            endpoints.push(a);
            endpoints.push(b);
        }
    }
    if core == 1 && n > 1 {
        endpoints.push(0);
    }
    for v in core..n {
        let mut chosen: Vec<usize> = Vec::with_capacity(m);
        let want = m.min(v);
        while chosen.len() < want {
            let u = endpoints[rng.gen_range(0..endpoints.len())];
            if !chosen.contains(&u) {
                chosen.push(u);
            }
        }
        chosen.sort_unstable();
        for u in chosen {
            pairs.push((u, v));
            endpoints.push(u);
            endpoints.push(v);
        }
    }
    pairs
}

/// Nearest-available-supplier matching. Each target receives `floor(d)` or
/// `floor(d) + 1` suppliers so the total equals `count`; supplier load is
/// capped at 1.5x the mean where possible.
fn couple(
    pos: &[Point],
    suppliers: &[usize],
    targets: &[usize],
    count: usize,
    min_one: bool,
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    if count == 0 || suppliers.is_empty() || targets.is_empty() {
        return Vec::new();
    }
    let base = count / targets.len();
    let extra = count % targets.len();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.shuffle(rng);
    let mut demand = vec![base; targets.len()];
    for &t in &order[..extra] {
        demand[t] += 1;
    }
    if min_one {
        debug_assert!(demand.iter().all(|&d| d >= 1));
    }
    let capacity = ((1.5 * count as f64 / suppliers.len() as f64).ceil() as usize).max(1);
    let mut load = vec![0usize; suppliers.len()];
    let mut out = Vec::with_capacity(count);
    order.shuffle(rng);
    let mut dists = vec![0.0; suppliers.len()];
    for &t in &order {
        let tp = pos[targets[t]];
        for (d, &s) in dists.iter_mut().zip(suppliers) {
            *d = dist2(tp, pos[s]);
        }
        let mut picked: Vec<usize> = Vec::with_capacity(demand[t]);
        for _ in 0..demand[t].min(suppliers.len()) {
            let pick = |respect_cap: bool| {
                (0..suppliers.len())
                    .filter(|j| !picked.contains(j) && (!respect_cap || load[*j] < capacity))
                    .min_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)))
            };
            let j = pick(true).or_else(|| pick(false)).expect("demand bounded by supplier count");
            load[j] += 1;
            picked.push(j);
        }
        for j in picked {
            out.push((suppliers[j], targets[t]));
        }
    }
    out
}
