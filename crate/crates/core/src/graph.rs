//! Heterogeneous interdependent-infrastructure graph.
//!
//! Nodes carry a layer (electric, road, communication, AOI), a binary state and
//! an optional tier annotation. Edges are typed by [`RelationKind`], stored once
//! and exposed symmetrically through per-relation CSR adjacency.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};

/// Sentinel for nodes that cannot be reached from any source.
pub const UNREACHABLE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "electric")]
    Electric,
    #[serde(rename = "road")]
    Road,
    #[serde(rename = "com")]
    Communication,
    #[serde(rename = "aoi")]
    Aoi,
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [
        LayerKind::Electric,
        LayerKind::Road,
        LayerKind::Communication,
        LayerKind::Aoi,
    ];

    /// Stable integer code used for serialization and indexing.
    pub fn code(self) -> usize {
        match self {
            LayerKind::Electric => 0,
            LayerKind::Road => 1,
            LayerKind::Communication => 2,
            LayerKind::Aoi => 3,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Electric => "electric",
            LayerKind::Road => "road",
            LayerKind::Communication => "com",
            LayerKind::Aoi => "aoi",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "electric" | "elec" => Ok(LayerKind::Electric),
            "road" => Ok(LayerKind::Road),
            "com" | "communication" => Ok(LayerKind::Communication),
            "aoi" => Ok(LayerKind::Aoi),
            other => Err(Error::config(format!("unknown layer `{other}`"))),
        }
    }
}

/// Edge type. Each relation fixes its (source layer, target layer) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationKind {
    #[serde(rename = "elec-elec")]
    ElecElec,
    #[serde(rename = "road-road")]
    RoadRoad,
    #[serde(rename = "com-com")]
    ComCom,
    #[serde(rename = "elec-road")]
    ElecRoad,
    #[serde(rename = "elec-com")]
    ElecCom,
    #[serde(rename = "elec-aoi")]
    ElecAoi,
    #[serde(rename = "com-aoi")]
    ComAoi,
    #[serde(rename = "aoi-aoi")]
    AoiAoi,
}

impl RelationKind {
    pub const ALL: [RelationKind; 8] = [
        RelationKind::ElecElec,
        RelationKind::RoadRoad,
        RelationKind::ComCom,
        RelationKind::ElecRoad,
        RelationKind::ElecCom,
        RelationKind::ElecAoi,
        RelationKind::ComAoi,
        RelationKind::AoiAoi,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn endpoints(self) -> (LayerKind, LayerKind) {
        use LayerKind::*;
        match self {
            RelationKind::ElecElec => (Electric, Electric),
            RelationKind::RoadRoad => (Road, Road),
            RelationKind::ComCom => (Communication, Communication),
            RelationKind::ElecRoad => (Electric, Road),
            RelationKind::ElecCom => (Electric, Communication),
            RelationKind::ElecAoi => (Electric, Aoi),
            RelationKind::ComAoi => (Communication, Aoi),
            RelationKind::AoiAoi => (Aoi, Aoi),
        }
    }

    pub fn is_intra(self) -> bool {
        let (a, b) = self.endpoints();
        a == b
    }

    /// The intra-layer relation of `layer`.
    pub fn intra(layer: LayerKind) -> RelationKind {
        match layer {
            LayerKind::Electric => RelationKind::ElecElec,
            LayerKind::Road => RelationKind::RoadRoad,
            LayerKind::Communication => RelationKind::ComCom,
            LayerKind::Aoi => RelationKind::AoiAoi,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::ElecElec => "elec-elec",
            RelationKind::RoadRoad => "road-road",
            RelationKind::ComCom => "com-com",
            RelationKind::ElecRoad => "elec-road",
            RelationKind::ElecCom => "elec-com",
            RelationKind::ElecAoi => "elec-aoi",
            RelationKind::ComAoi => "com-aoi",
            RelationKind::AoiAoi => "aoi-aoi",
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Operational state of a node: 0 = failed, 1 = normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeState {
    Failed,
    Normal,
}

impl NodeState {
    pub fn bit(self) -> u8 {
        match self {
            NodeState::Failed => 0,
            NodeState::Normal => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub id: usize,
    pub layer: LayerKind,
    pub state: NodeState,
    /// Hierarchy level inside the layer; tier 0 marks anchor nodes
    /// (generators, core switches, arterial junctions).
    pub tier: Option<u8>,
}

impl NodeRecord {
    pub fn new(id: usize, layer: LayerKind) -> Self {
        Self { id, layer, state: NodeState::Normal, tier: None }
    }

    pub fn with_tier(mut self, tier: u8) -> Self {
        self.tier = Some(tier);
        self
    }

    pub fn is_anchor(&self) -> bool {
        self.tier == Some(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rel: RelationKind,
}

impl Edge {
    pub fn new(src: usize, dst: usize, rel: RelationKind) -> Self {
        Self { src, dst, rel }
    }
}

/// Sorted, duplicate-free set of node ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FailedSet(Vec<usize>);

impl FailedSet {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self(mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn insert(&mut self, id: usize) -> bool {
        match self.0.binary_search(&id) {
            Ok(_) => false,
            Err(pos) => {
                self.0.insert(pos, id);
                true
            }
        }
    }

    pub fn is_subset(&self, other: &FailedSet) -> bool {
        self.0.iter().all(|&id| other.contains(id))
    }

    pub fn union(&self, other: &FailedSet) -> FailedSet {
        self.iter().chain(other.iter()).collect()
    }

    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for id in self.iter().filter(|&id| id < n) {
            mask[id] = true;
        }
        mask
    }

    pub fn max_id(&self) -> Option<usize> {
        self.0.last().copied()
    }

    /// Map global ids into a subgraph's local ids, dropping ids outside it.
    pub fn restrict(&self, sub: &Subgraph) -> FailedSet {
        self.iter().filter_map(|id| sub.local_of(id)).collect()
    }
}

impl FromIterator<usize> for FailedSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut ids: Vec<usize> = iter.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        Self(ids)
    }
}

impl From<Vec<usize>> for FailedSet {
    fn from(ids: Vec<usize>) -> Self {
        ids.into_iter().collect()
    }
}

/// Compressed adjacency: neighbours of `i` are `targets[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Csr {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Csr {
    /// Builds symmetric adjacency from undirected pairs.
    fn symmetric(n: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Self {
        let mut directed: Vec<(usize, usize)> = Vec::new();
        for (a, b) in pairs {
            directed.push((a, b));
            directed.push((b, a));
        }
        directed.sort_unstable();
        let mut offsets = vec![0usize; n + 1];
        for &(a, _) in &directed {
            offsets[a + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let targets = directed.into_iter().map(|(_, b)| b).collect();
        Self { offsets, targets }
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn n(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn nnz(&self) -> usize {
        self.targets.len()
    }
}

/// The coupled infrastructure network. Immutable after construction.
#[derive(Debug, Clone)]
pub struct HeteroGraph {
    nodes: Vec<NodeRecord>,
    edges: Vec<Edge>,
    by_relation: Vec<Csr>,
    all: Csr,
    layer_nodes: [Vec<usize>; 4],
    meta: BTreeMap<String, serde_json::Value>,
}

impl PartialEq for HeteroGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl HeteroGraph {
    /// Validates and indexes a node/edge list.
    ///
    /// Intra-layer edges are stored with `src < dst`; coupling edges must run
    /// from the relation's source layer to its target layer.
    pub fn new(nodes: Vec<NodeRecord>, edges: Vec<Edge>) -> Result<Self> {
        let n = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Validation(format!(
                    "node ids must be contiguous: position {i} holds id {}",
                    node.id
                )));
            }
        }
        let mut canonical = Vec::with_capacity(edges.len());
        for e in edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::Validation(format!(
                    "edge ({}, {}, {}) references a node outside 0..{n}",
                    e.src, e.dst, e.rel
                )));
            }
            if e.src == e.dst {
                return Err(Error::Validation(format!(
                    "self-loop edge ({}, {}, {})",
                    e.src, e.dst, e.rel
                )));
            }
            let (want_src, want_dst) = e.rel.endpoints();
            let (ls, ld) = (nodes[e.src].layer, nodes[e.dst].layer);
            if ls != want_src || ld != want_dst {
                return Err(Error::Validation(format!(
                    "edge ({}, {}, {}) joins {ls} -> {ld} but the relation requires {want_src} -> {want_dst}",
                    e.src, e.dst, e.rel
                )));
            }
            let e = if e.rel.is_intra() && e.src > e.dst { Edge::new(e.dst, e.src, e.rel) } else { e };
            canonical.push(e);
        }
        canonical.sort_unstable_by_key(|e| (e.rel, e.src, e.dst));
        if let Some(w) = canonical.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!(
                "duplicate edge ({}, {}, {})",
                w[0].src, w[0].dst, w[0].rel
            )));
        }

        let by_relation = RelationKind::ALL
            .iter()
            .map(|&rel| {
                Csr::symmetric(n, canonical.iter().filter(|e| e.rel == rel).map(|e| (e.src, e.dst)))
            })
            .collect();
        let all = Csr::symmetric(n, canonical.iter().map(|e| (e.src, e.dst)));
        let mut layer_nodes: [Vec<usize>; 4] = Default::default();
        for node in &nodes {
            layer_nodes[node.layer.code()].push(node.id);
        }
        Ok(Self { nodes, edges: canonical, by_relation, all, layer_nodes, meta: BTreeMap::new() })
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &NodeRecord {
        &self.nodes[id]
    }

    pub fn layer(&self, id: usize) -> LayerKind {
        self.nodes[id].layer
    }

    /// Edges in canonical `(rel, src, dst)` order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self, rel: RelationKind) -> usize {
        self.by_relation[rel.index()].nnz() / 2
    }

    /// Relations with at least one edge.
    pub fn relations_present(&self) -> Vec<RelationKind> {
        RelationKind::ALL.iter().copied().filter(|&r| self.edge_count(r) > 0).collect()
    }

    pub fn adjacency(&self, rel: RelationKind) -> &Csr {
        &self.by_relation[rel.index()]
    }

    /// Union adjacency over every relation.
    pub fn union_adjacency(&self) -> &Csr {
        &self.all
    }

    pub fn neighbors(&self, id: usize) -> &[usize] {
        self.all.neighbors(id)
    }

    pub fn neighbors_by(&self, id: usize, rel: RelationKind) -> &[usize] {
        self.by_relation[rel.index()].neighbors(id)
    }

    pub fn intra_neighbors(&self, id: usize) -> &[usize] {
        self.neighbors_by(id, RelationKind::intra(self.layer(id)))
    }

    pub fn layer_nodes(&self, layer: LayerKind) -> &[usize] {
        &self.layer_nodes[layer.code()]
    }

    pub fn meta(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: serde_json::Value) {
        self.meta.insert(key.into(), value);
    }

    /// Subgraph induced by one layer's nodes and its intra-layer edges.
    pub fn layer_subgraph(&self, layer: LayerKind) -> Subgraph {
        let global_ids = self.layer_nodes(layer).to_vec();
        let mut local = vec![usize::MAX; self.n()];
        for (i, &g) in global_ids.iter().enumerate() {
            local[g] = i;
        }
        let nodes = global_ids
            .iter()
            .enumerate()
            .map(|(i, &g)| NodeRecord { id: i, ..self.nodes[g].clone() })
            .collect();
        let rel = RelationKind::intra(layer);
        let edges = self
            .edges
            .iter()
            .filter(|e| e.rel == rel)
            .map(|e| Edge::new(local[e.src], local[e.dst], rel))
            .collect();
        let graph = HeteroGraph::new(nodes, edges).expect("induced subgraph of a valid graph is valid");
        Subgraph { graph, global_ids, local }
    }

    /// Breadth-first hop distances from the nearest source over all relations.
    pub fn multi_source_distance(&self, sources: &FailedSet) -> Result<Vec<usize>> {
        if sources.is_empty() {
            return Err(Error::contract("multi_source_distance needs at least one source"));
        }
        self.check_ids(sources)?;
        let mut dist = vec![UNREACHABLE; self.n()];
        let mut queue = VecDeque::new();
        for s in sources.iter() {
            dist[s] = 0;
            queue.push_back(s);
        }
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u) {
                if dist[v] == UNREACHABLE {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        Ok(dist)
    }

    /// Multi-source distances with unreachable nodes capped at `N`.
    pub fn capped_distance(&self, sources: &FailedSet) -> Result<Vec<usize>> {
        let n = self.n();
        Ok(self
            .multi_source_distance(sources)?
            .into_iter()
            .map(|d| if d == UNREACHABLE { n } else { d })
            .collect())
    }

    /// Per-node sum of capped distances to every member of `sources`:
    /// `out[n] = sum_{i in D} L_{ni}`.
    pub fn summed_source_distance(&self, sources: &FailedSet) -> Result<Vec<f64>> {
        if sources.is_empty() {
            return Err(Error::contract("summed_source_distance needs at least one source"));
        }
        self.check_ids(sources)?;
        let mut total = vec![0.0; self.n()];
        for s in sources.iter() {
            let single: FailedSet = std::iter::once(s).collect();
            for (t, d) in total.iter_mut().zip(self.capped_distance(&single)?) {
                *t += d as f64;
            }
        }
        Ok(total)
    }

    /// `s_G = (1/|V|) * sum_{i in D} sum_{n in V} L_{ni}` with unreachable pairs capped at `N`.
    pub fn mean_initial_distance(&self, initial: &FailedSet) -> Result<f64> {
        let summed = self.summed_source_distance(initial)?;
        Ok(summed.iter().sum::<f64>() / self.n() as f64)
    }

    /// Connected components of the graph with `removed` deleted, each sorted,
    /// ordered by their smallest member.
    pub fn components(&self, removed: &FailedSet) -> Vec<Vec<usize>> {
        let n = self.n();
        let gone = removed.mask(n);
        let mut uf = UnionFind::new(n);
        for e in &self.edges {
            if !gone[e.src] && !gone[e.dst] {
                uf.union(e.src, e.dst);
            }
        }
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut first_of_root = vec![usize::MAX; n];
        let mut order = Vec::new();
        for v in (0..n).filter(|&v| !gone[v]) {
            let r = uf.find(v);
            if first_of_root[r] == usize::MAX {
                first_of_root[r] = v;
                order.push(r);
            }
            by_root.entry(r).or_default().push(v);
        }
        order.into_iter().map(|r| by_root.remove(&r).unwrap_or_default()).collect()
    }

    /// Pairwise connectivity `sigma = sum_i eps_i (eps_i - 1) / 2` over components.
    pub fn connectivity(&self, removed: &FailedSet) -> u64 {
        self.components(removed)
            .iter()
            .map(|c| {
                let s = c.len() as u64;
                s * s.saturating_sub(1) / 2
            })
            .sum()
    }

    fn check_ids(&self, set: &FailedSet) -> Result<()> {
        match set.max_id() {
            Some(m) if m >= self.n() => {
                Err(Error::contract(format!("node id {m} outside graph of {} nodes", self.n())))
            }
            _ => Ok(()),
        }
    }

    /// Parses the JSON graph document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDoc = serde_json::from_str(text).map_err(|e| json_error(&e))?;
        if doc.version != 1 {
            return Err(Error::Validation(format!("unsupported graph version {}", doc.version)));
        }
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for (pos, nd) in doc.nodes.into_iter().enumerate() {
            let state = match nd.state {
                0 => NodeState::Failed,
                1 => NodeState::Normal,
                s => {
                    return Err(Error::Validation(format!(
                        "node at position {pos} has state {s}; expected 0 or 1"
                    )))
                }
            };
            nodes.push(NodeRecord { id: nd.id, layer: nd.layer, state, tier: nd.tier });
        }
        let edges = doc.edges.into_iter().map(|e| Edge::new(e.src, e.dst, e.rel)).collect();
        let mut g = HeteroGraph::new(nodes, edges)?;
        g.meta = doc.meta;
        Ok(g)
    }

    /// Canonical JSON: nodes by id, edges by `(rel, src, dst)`.
    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            version: 1,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc { id: n.id, layer: n.layer, state: n.state.bit(), tier: n.tier })
                .collect(),
            edges: self.edges.iter().map(|e| EdgeDoc { src: e.src, dst: e.dst, rel: e.rel }).collect(),
            meta: self.meta.clone(),
        };
        serde_json::to_string(&doc).expect("graph document serializes")
    }
}

/// Parses a graph document from raw bytes.
pub fn load_graph(document: &[u8]) -> Result<HeteroGraph> {
    let text = std::str::from_utf8(document).map_err(|e| Error::Parse {
        location: Location { line: 0, column: e.valid_up_to(), field: None },
        message: "document is not valid UTF-8".into(),
    })?;
    HeteroGraph::from_json(text)
}

pub fn save_graph(graph: &HeteroGraph) -> Vec<u8> {
    graph.to_json().into_bytes()
}

pub(crate) fn json_error(e: &serde_json::Error) -> Error {
    let message = e.to_string();
    let field = message
        .split('`')
        .nth(1)
        .filter(|_| message.contains("field") || message.contains("variant"))
        .map(str::to_string);
    Error::Parse { location: Location { line: e.line(), column: e.column(), field }, message }
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    version: u32,
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: usize,
    layer: LayerKind,
    state: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tier: Option<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    src: usize,
    dst: usize,
    rel: RelationKind,
}

/// A layer-induced subgraph with id maps back to the parent graph.
#[derive(Debug, Clone)]
pub struct Subgraph {
    pub graph: HeteroGraph,
    pub global_ids: Vec<usize>,
    local: Vec<usize>,
}

impl Subgraph {
    pub fn local_of(&self, global: usize) -> Option<usize> {
        self.local.get(global).copied().filter(|&l| l != usize::MAX)
    }

    pub fn global_of(&self, local: usize) -> usize {
        self.global_ids[local]
    }
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}
