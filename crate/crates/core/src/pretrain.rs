//! The three pre-training tasks and the per-scope embeddings they produce.
//!
//! * Link prediction learns a free embedding per node with a margin loss.
//! * Global pooling trains a DiffPool stack to regress `s_G`; its hard cluster
//!   assignments turn per-node distance sums into cluster offsets.
//! * Initial enhancement trains a GMNN pair (`q_θ`, `p_φ`) on the initial
//!   failure states; the hidden layer of `q_θ` is the embedding.
//!
//! Link-prediction embeddings are fixed per scope. The other two depend on the
//! initial failed set and are recomputed for every case.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Checkpoint, ParamStore, SparseAdj, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gnn::{binary_adjacency, gcn_adjacency, hard_assignments, Activation, Dense, DiffPoolStack, GcnLayer};
use crate::graph::{FailedSet, HeteroGraph, LayerKind};
use crate::rng::{self, Rng};

/// The coupled graph or one layer-induced subgraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Coupled,
    Layer(LayerKind),
}

impl Scope {
    pub const ALL: [Scope; 5] = [
        Scope::Coupled,
        Scope::Layer(LayerKind::Electric),
        Scope::Layer(LayerKind::Road),
        Scope::Layer(LayerKind::Communication),
        Scope::Layer(LayerKind::Aoi),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Coupled => "coupled",
            Scope::Layer(l) => l.as_str(),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scope's graph with id maps to the coupled graph.
#[derive(Debug, Clone)]
pub struct ScopeView {
    pub scope: Scope,
    pub graph: HeteroGraph,
    pub global_ids: Vec<usize>,
    local: Vec<usize>,
}

impl ScopeView {
    pub fn new(g: &HeteroGraph, scope: Scope) -> Self {
        match scope {
            Scope::Coupled => Self { scope, graph: g.clone(), global_ids: (0..g.n()).collect(), local: (0..g.n()).collect() },
            Scope::Layer(layer) => {
                let sub = g.layer_subgraph(layer);
                let local = (0..g.n()).map(|v| sub.local_of(v).unwrap_or(usize::MAX)).collect();
                Self { scope, graph: sub.graph, global_ids: sub.global_ids, local }
            }
        }
    }

    pub fn n(&self) -> usize {
        self.global_ids.len()
    }

    pub fn local_of(&self, global: usize) -> Option<usize> {
        self.local.get(global).copied().filter(|&l| l != usize::MAX)
    }

    /// `D ∩ scope` in local ids.
    pub fn restrict(&self, d: &FailedSet) -> FailedSet {
        d.iter().filter_map(|v| self.local_of(v)).collect()
    }
}

// ---------------------------------------------------------------------------
// Link prediction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LpConfig {
    pub margin: f64,
    pub l2: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dim: usize,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self { margin: 1.0, l2: 1e-4, negatives: 1, epochs: 200, lr: 1e-2, dim: 32 }
    }
}

impl LpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || self.l2 < 0.0 || self.negatives == 0 || self.dim == 0 {
            return Err(Error::config("link prediction needs margin > 0, l2 >= 0, negatives >= 1, dim >= 1"));
        }
        Ok(())
    }
}

/// Inner product of endpoint rows for each edge.
pub fn lp_score(e: &Tensor, edges: &[(usize, usize)]) -> Result<Vec<f64>> {
    edges
        .iter()
        .map(|&(i, j)| {
            if i >= e.rows() || j >= e.rows() {
                return Err(Error::contract(format!("edge ({i}, {j}) outside {} embedding rows", e.rows())));
            }
            Ok(e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).sum())
        })
        .collect()
}

fn score_on_tape(tape: &mut Tape, e: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let src = Arc::new(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let dst = Arc::new(pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let a = tape.gather_rows(e, src)?;
    let b = tape.gather_rows(e, dst)?;
    let ab = tape.mul(a, b)?;
    Ok(tape.row_sum(ab))
}

/// `mean(max(0, M − S_p + S_n)) + λ‖E‖²`. `neg` holds `k` negatives per
/// positive, grouped by positive; the mean runs over all pairs, which equals
/// averaging per positive first.
pub fn lp_loss(tape: &mut Tape, e: Var, pos: &[(usize, usize)], neg: &[(usize, usize)], margin: f64, l2: f64) -> Result<Var> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract("lp_loss needs positive and negative edges"));
    }
    if neg.len() % pos.len() != 0 {
        return Err(Error::contract(format!("{} negatives do not pair with {} positives", neg.len(), pos.len())));
    }
    let k = neg.len() / pos.len();
    let paired: Vec<(usize, usize)> = pos.iter().flat_map(|&p| std::iter::repeat(p).take(k)).collect();
    let sp = score_on_tape(tape, e, &paired)?;
    let sn = score_on_tape(tape, e, neg)?;
    let gap = tape.sub(sn, sp)?;
    let hinge = tape.add_scalar(gap, margin);
    let hinge = tape.relu(hinge);
    let loss = tape.reduce_mean(hinge)?;
    if l2 == 0.0 {
        return Ok(loss);
    }
    let sq = tape.square(e);
    let norm = tape.sum(sq);
    let reg = tape.scalar_mul(norm, l2);
    tape.add(loss, reg)
}

fn sample_negatives(n: usize, count: usize, edges: &HashSet<(usize, usize)>, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut pair = (rng.gen_range(0..n), rng.gen_range(0..n));
        for _ in 0..100 {
            let key = (pair.0.min(pair.1), pair.0.max(pair.1));
            if pair.0 != pair.1 && !edges.contains(&key) {
                break;
            }
            pair = (rng.gen_range(0..n), rng.gen_range(0..n));
        }
        out.push(pair);
    }
    out
}

#[derive(Debug, Clone)]
pub struct LpResult {
    pub embedding: Tensor,
    /// Training loss before each epoch's update.
    pub losses: Vec<f64>,
}

/// Trains a free embedding on all edges of `g`. Negatives are redrawn every
/// epoch from non-adjacent, distinct pairs.
pub fn train_lp(g: &HeteroGraph, cfg: &LpConfig, seed: u64) -> Result<LpResult> {
    cfg.validate()?;
    if g.n() == 0 {
        return Err(Error::config("link prediction on an empty graph"));
    }
    let pos: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.src, e.dst)).collect();
    if pos.is_empty() {
        return Err(Error::config("link prediction needs at least one edge"));
    }
    let edge_set: HashSet<(usize, usize)> = pos.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let mut rng = rng::rng(seed);
    let mut store = ParamStore::new();
    let id = store.add(
        "emb",
        Tensor::from_vec(g.n(), cfg.dim, (0..g.n() * cfg.dim).map(|_| rng.gen_range(-0.1..0.1)).collect())?,
    )?;
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let neg = sample_negatives(g.n(), pos.len() * cfg.negatives, &edge_set, &mut rng);
        let mut tape = Tape::new();
        let e = tape.param(&store, id);
        let loss = lp_loss(&mut tape, e, &pos, &neg, cfg.margin, cfg.l2)?;
        losses.push(tape.value(loss).item());
        store.zero_grad();
        tape.backward(loss)?.accumulate(&tape, &mut store);
        adam.step(&mut store)?;
    }
    let neg = sample_negatives(g.n(), pos.len() * cfg.negatives, &edge_set, &mut rng);
    let mut tape = Tape::new();
    let e = tape.param(&store, id);
    let loss = lp_loss(&mut tape, e, &pos, &neg, cfg.margin, cfg.l2)?;
    losses.push(tape.value(loss).item());
    Ok(LpResult { embedding: store.value(id).clone(), losses })
}

// ---------------------------------------------------------------------------
// Global pooling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    /// Cluster counts `b_1 > b_2 > …`; the stack has `clusters.len() + 1` levels.
    pub clusters: Vec<usize>,
    pub hidden: usize,
    /// Optimiser steps, each on a minibatch of cases.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Cases sampled from the training data.
    pub max_cases: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self { clusters: vec![16, 4], hidden: 16, epochs: 200, batch: 8, lr: 1e-2, max_cases: 256 }
    }
}

impl GpConfig {
    pub fn levels(&self) -> usize {
        self.clusters.len() + 1
    }
}

/// Column 0: initial state bit (0 failed, 1 normal). Column 1: hop distance
/// to the nearest initial failure, capped at `N`.
pub fn build_gd_features(g: &HeteroGraph, d: &FailedSet) -> Result<Tensor> {
    let dist = g.capped_distance(d)?;
    let mut t = Tensor::zeros(g.n(), 2);
    for (v, &dv) in dist.iter().enumerate() {
        t.set(v, 0, if d.contains(v) { 0.0 } else { 1.0 });
        t.set(v, 1, dv as f64);
    }
    Ok(t)
}

/// Network input: distances are log-compressed.
fn gp_input(features: Tensor) -> Tensor {
    let mut t = features;
    for r in 0..t.rows() {
        let d = t.get(r, 1);
        t.set(r, 1, d.ln_1p());
    }
    t
}

/// Mean of `values` over each level's cluster, minus the global mean.
/// `assignments[l][n]` is node `n`'s cluster after `l + 1` poolings.
pub fn cluster_offsets(values: &[f64], assignments: &[Vec<usize>]) -> Tensor {
    let n = values.len();
    let global = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
    let mut out = Tensor::zeros(n, assignments.len());
    for (l, assign) in assignments.iter().enumerate() {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (v, &c) in assign.iter().enumerate() {
            let e = sums.entry(c).or_default();
            e.0 += values[v];
            e.1 += 1;
        }
        for (v, c) in assign.iter().enumerate() {
            let (s, k) = sums[c];
            out.set(v, l, s / k as f64 - global);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub cfg: GpConfig,
    pub store: ParamStore,
    pub stack: DiffPoolStack,
    /// Standardisation of the `s_G` target.
    pub target_mean: f64,
    pub target_sd: f64,
    /// RMSE (standardised units) over the training sample before and after training.
    pub initial_rmse: f64,
    pub final_rmse: f64,
}

struct PoolGraph {
    prop: Arc<SparseAdj>,
    raw: Arc<SparseAdj>,
}

impl PoolGraph {
    fn new(g: &HeteroGraph) -> Self {
        Self { prop: gcn_adjacency(g), raw: binary_adjacency(g) }
    }
}

impl GpModel {
    fn init(cfg: &GpConfig, seed: u64) -> Result<Self> {
        if cfg.clusters.is_empty() {
            return Err(Error::config("global pooling needs L >= 2 levels"));
        }
        let mut rng = rng::rng(seed);
        let mut store = ParamStore::new();
        let stack = DiffPoolStack::new(&mut store, "diffpool", 2, cfg.hidden, &cfg.clusters, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), store, stack, target_mean: 0.0, target_sd: 1.0, initial_rmse: 0.0, final_rmse: 0.0 })
    }

    fn forward(&self, tape: &mut Tape, pg: &PoolGraph, g: &HeteroGraph, d: &FailedSet) -> Result<(Var, Vec<Var>)> {
        let x = tape.constant(gp_input(build_gd_features(g, d)?));
        let out = self.stack.forward(tape, &self.store, &pg.prop, &pg.raw, x)?;
        Ok((out.prediction, out.assignments))
    }

    /// Predicted `s_G` in original units.
    pub fn predict(&self, g: &HeteroGraph, d: &FailedSet) -> Result<f64> {
        let mut tape = Tape::new();
        let (p, _) = self.forward(&mut tape, &PoolGraph::new(g), g, d)?;
        Ok(tape.value(p).item() * self.target_sd + self.target_mean)
    }

    /// Soft assignment matrices of every pooling for case `d`.
    pub fn assignments(&self, g: &HeteroGraph, d: &FailedSet) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let (_, s) = self.forward(&mut tape, &PoolGraph::new(g), g, d)?;
        Ok(s.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    fn rmse(&self, pg: &PoolGraph, g: &HeteroGraph, cases: &[FailedSet], targets: &[f64]) -> Result<f64> {
        let mut sq = 0.0;
        for (d, &t) in cases.iter().zip(targets) {
            let mut tape = Tape::new();
            let (p, _) = self.forward(&mut tape, pg, g, d)?;
            sq += (tape.value(p).item() - t).powi(2);
        }
        Ok((sq / cases.len() as f64).sqrt())
    }

    pub fn write(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_store(prefix, &self.store);
        ck.tensors.insert(
            format!("{prefix}.target"),
            Tensor::from_vec(1, 4, vec![self.target_mean, self.target_sd, self.initial_rmse, self.final_rmse])
                .expect("fixed shape"),
        );
    }

    pub fn read(cfg: &GpConfig, ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut m = Self::init(cfg, 0)?;
        ck.load_store(prefix, &mut m.store)?;
        let t = ck
            .tensors
            .get(&format!("{prefix}.target"))
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks `{prefix}.target`")))?;
        if t.len() != 4 {
            return Err(Error::Validation(format!("`{prefix}.target` must hold 4 values")));
        }
        let v = t.data();
        (m.target_mean, m.target_sd, m.initial_rmse, m.final_rmse) = (v[0], v[1], v[2], v[3]);
        Ok(m)
    }
}

fn sample_cases(cases: &[FailedSet], max: usize, rng: &mut Rng) -> Vec<FailedSet> {
    let mut usable: Vec<FailedSet> = cases.iter().filter(|d| !d.is_empty()).cloned().collect();
    if usable.len() > max {
        usable.shuffle(rng);
        usable.truncate(max);
    }
    usable
}

/// Trains the DiffPool stack to regress the standardised `s_G` of each case.
pub fn train_gp(g: &HeteroGraph, cases: &[FailedSet], cfg: &GpConfig, seed: u64) -> Result<GpModel> {
    let mut model = GpModel::init(cfg, seed)?;
    let mut rng = rng::rng(rng::substream(seed, "gp-cases"));
    let sample = sample_cases(cases, cfg.max_cases, &mut rng);
    if sample.is_empty() {
        return Err(Error::config("global pooling needs at least one case with initial failures"));
    }
    let raw: Vec<f64> = sample.iter().map(|d| g.mean_initial_distance(d)).collect::<Result<_>>()?;
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let var = raw.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / raw.len() as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    (model.target_mean, model.target_sd) = (mean, sd);
    let targets: Vec<f64> = raw.iter().map(|t| (t - mean) / sd).collect();

    let pg = PoolGraph::new(g);
    model.initial_rmse = model.rmse(&pg, g, &sample, &targets)?;
    let mut adam = Adam::new(cfg.lr);
    let batch = cfg.batch.clamp(1, sample.len());
    let mut order: Vec<usize> = (0..sample.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.epochs {
        // cosine decay; the RMSE gradient keeps unit size near the optimum
        let progress = step as f64 / cfg.epochs as f64;
        adam.lr = cfg.lr * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut tape = Tape::new();
        let mut preds = Vec::with_capacity(batch);
        let mut ys = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let k = order[cursor];
            cursor += 1;
            preds.push(model.forward(&mut tape, &pg, g, &sample[k])?.0);
            ys.push(targets[k]);
        }
        let p = tape.concat_rows(&preds)?;
        let y = tape.constant(Tensor::column(ys));
        let diff = tape.sub(p, y)?;
        let sq = tape.square(diff);
        let mse = tape.reduce_mean(sq)?;
        let loss = tape.sqrt(mse)?;
        model.store.zero_grad();
        tape.backward(loss)?.accumulate(&tape, &mut model.store);
        adam.step(&mut model.store)?;
    }
    model.final_rmse = model.rmse(&pg, g, &sample, &targets)?;
    Ok(model)
}

/// `E_gp[n, l] = s_n^l − s_G`: the level-`l` cluster mean of
/// `Σ_{i∈D} L_{ni}` minus its global mean. Zero when `D` is empty.
pub fn gp_embedding(model: &GpModel, g: &HeteroGraph, d: &FailedSet) -> Result<Tensor> {
    let width = model.stack.depth() - 1;
    if d.is_empty() {
        return Ok(Tensor::zeros(g.n(), width));
    }
    let s = model.assignments(g, d)?;
    let assign = hard_assignments(&s)?;
    let values = g.summed_source_distance(d)?;
    Ok(cluster_offsets(&values, &assign))
}

// ---------------------------------------------------------------------------
// Initial enhancement (GMNN)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IeConfig {
    pub dim: usize,
    pub em_rounds: usize,
    /// Total optimiser steps, split between the supervised warm-up and the
    /// M and E phases of each round.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub max_cases: usize,
    /// Nodes at capped distance ≥ this fraction of the case's maximum are
    /// labelled normal.
    pub negative_fraction: f64,
    /// Weight of unlabelled nodes relative to labelled ones.
    pub unlabeled_weight: f64,
}

impl Default for IeConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            em_rounds: 3,
            epochs: 200,
            batch: 8,
            lr: 1e-2,
            max_cases: 128,
            negative_fraction: 0.75,
            unlabeled_weight: 0.2,
        }
    }
}

/// Labelled nodes of one case: failures and far-away normal anchors.
#[derive(Debug, Clone)]
struct IeCase {
    state: Tensor,
    /// 1 for failed, 0 for normal, `None` when unlabelled.
    labels: Vec<Option<f64>>,
    neighbors: Arc<SparseAdj>,
}

fn ie_case(g: &HeteroGraph, d: &FailedSet, neighbors: &Arc<SparseAdj>, fraction: f64) -> Result<IeCase> {
    let state = Tensor::column((0..g.n()).map(|v| if d.contains(v) { 0.0 } else { 1.0 }).collect());
    let mut labels = vec![None; g.n()];
    if !d.is_empty() {
        let dist = g.capped_distance(d)?;
        let max = dist.iter().copied().max().unwrap_or(0) as f64;
        for (v, &dv) in dist.iter().enumerate() {
            if d.contains(v) {
                labels[v] = Some(1.0);
            } else if max > 0.0 && dv as f64 >= fraction * max {
                labels[v] = Some(0.0);
            }
        }
    }
    Ok(IeCase { state, labels, neighbors: Arc::clone(neighbors) })
}

#[derive(Debug, Clone)]
pub struct IeModel {
    pub cfg: IeConfig,
    pub store: ParamStore,
    pub q: [GcnLayer; 3],
    pub p: [Dense; 2],
    /// Mean labelled log-likelihood of `q_θ` after warm-up and after each EM round.
    pub labeled_ll: Vec<f64>,
}

struct QOut {
    hidden: Var,
    logits: Var,
}

impl IeModel {
    fn init(cfg: &IeConfig, seed: u64) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::config("initial enhancement needs dim >= 1"));
        }
        let mut rng = rng::rng(seed);
        let mut store = ParamStore::new();
        let q = [
            GcnLayer::new(&mut store, "q.0", 1, cfg.dim, Activation::Relu, &mut rng)?,
            GcnLayer::new(&mut store, "q.1", cfg.dim, cfg.dim, Activation::Relu, &mut rng)?,
            GcnLayer::new(&mut store, "q.2", cfg.dim, 1, Activation::Identity, &mut rng)?,
        ];
        let p = [
            Dense::new(&mut store, "p.0", 2, cfg.dim, Activation::Relu, &mut rng)?,
            Dense::new(&mut store, "p.1", cfg.dim, 1, Activation::Identity, &mut rng)?,
        ];
        Ok(Self { cfg: cfg.clone(), store, q, p, labeled_ll: Vec::new() })
    }

    fn q_forward(&self, tape: &mut Tape, adj: &Arc<SparseAdj>, state: &Tensor) -> Result<QOut> {
        let x = tape.constant(state.clone());
        let h = self.q[0].forward(tape, &self.store, adj, x)?;
        let hidden = self.q[1].forward(tape, &self.store, adj, h)?;
        let logits = self.q[2].forward(tape, &self.store, adj, hidden)?;
        Ok(QOut { hidden, logits })
    }

    fn p_forward(&self, tape: &mut Tape, case: &IeCase, beliefs: &[f64]) -> Result<Var> {
        // neighbour labels: gold where labelled, q's belief elsewhere
        let y: Vec<f64> = case.labels.iter().zip(beliefs).map(|(l, &b)| l.unwrap_or(b)).collect();
        let nb = case.neighbors.matmul(&Tensor::column(y))?;
        let x = tape.constant(Tensor::hcat(&[&case.state, &nb])?);
        let h = self.p[0].forward(tape, &self.store, x)?;
        self.p[1].forward(tape, &self.store, h)
    }

    fn beliefs(&self, adj: &Arc<SparseAdj>, case: &IeCase) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.q_forward(&mut tape, adj, &case.state)?;
        Ok(tape.value(out.logits).data().iter().map(|&z| sigmoid(z)).collect())
    }

    fn p_beliefs(&self, case: &IeCase, q_beliefs: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let z = self.p_forward(&mut tape, case, q_beliefs)?;
        Ok(tape.value(z).data().iter().map(|&z| sigmoid(z)).collect())
    }

    /// Mean log-likelihood of the labels under `q_θ` over all labelled nodes.
    fn labeled_log_likelihood(&self, adj: &Arc<SparseAdj>, cases: &[IeCase]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for case in cases {
            let b = self.beliefs(adj, case)?;
            for (l, &p) in case.labels.iter().zip(&b) {
                if let Some(y) = l {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    total += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                    count += 1;
                }
            }
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Failure belief of `q_θ` per node.
    pub fn failure_beliefs(&self, g: &HeteroGraph, d: &FailedSet) -> Result<Vec<f64>> {
        let adj = gcn_adjacency(g);
        let case = ie_case(g, d, &adj, self.cfg.negative_fraction)?;
        self.beliefs(&adj, &case)
    }

    pub fn write(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_store(prefix, &self.store);
        ck.tensors.insert(format!("{prefix}.labeled_ll"), Tensor::column(self.labeled_ll.clone()));
    }

    pub fn read(cfg: &IeConfig, ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut m = Self::init(cfg, 0)?;
        ck.load_store(prefix, &mut m.store)?;
        if let Some(t) = ck.tensors.get(&format!("{prefix}.labeled_ll")) {
            m.labeled_ll = t.data().to_vec();
        }
        Ok(m)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-node targets and weights. Labelled nodes are class-balanced within
/// the case; unlabelled nodes take `soft` targets at `unlabeled_weight`.
fn targets_and_weights(case: &IeCase, soft: Option<&[f64]>, unlabeled_weight: f64) -> (Tensor, Tensor) {
    let pos = case.labels.iter().filter(|l| **l == Some(1.0)).count();
    let neg = case.labels.iter().filter(|l| **l == Some(0.0)).count();
    let wp = if pos > 0 && neg > 0 { neg as f64 / pos as f64 } else { 1.0 };
    let n = case.labels.len();
    let mut t = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for (v, l) in case.labels.iter().enumerate() {
        match (l, soft) {
            (Some(y), _) => {
                t.push(*y);
                w.push(if *y == 1.0 { wp } else { 1.0 });
            }
            (None, Some(s)) => {
                t.push(s[v]);
                w.push(unlabeled_weight);
            }
            (None, None) => {
                t.push(0.0);
                w.push(0.0);
            }
        }
    }
    (Tensor::column(t), Tensor::column(w))
}

enum Phase {
    Supervised,
    TrainP,
    TrainQ,
}

fn ie_phase(model: &mut IeModel, adj: &Arc<SparseAdj>, cases: &[IeCase], phase: Phase, steps: usize, adam: &mut Adam, rng: &mut Rng) -> Result<()> {
    let batch = model.cfg.batch.clamp(1, cases.len());
    let uw = model.cfg.unlabeled_weight;
    for _ in 0..steps {
        let picks: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..cases.len())).collect();
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch);
        let mut total_weight = 0.0;
        for &k in &picks {
            let case = &cases[k];
            let (logits, t, w) = match phase {
                Phase::Supervised => {
                    let (t, w) = targets_and_weights(case, None, uw);
                    (model.q_forward(&mut tape, adj, &case.state)?.logits, t, w)
                }
                Phase::TrainP => {
                    let qb = model.beliefs(adj, case)?;
                    let (t, w) = targets_and_weights(case, Some(&qb), uw);
                    (model.p_forward(&mut tape, case, &qb)?, t, w)
                }
                Phase::TrainQ => {
                    let qb = model.beliefs(adj, case)?;
                    let pb = model.p_beliefs(case, &qb)?;
                    let (t, w) = targets_and_weights(case, Some(&pb), uw);
                    (model.q_forward(&mut tape, adj, &case.state)?.logits, t, w)
                }
            };
            total_weight += w.sum();
            losses.push(tape.bce_with_logits(logits, Arc::new(t), Arc::new(w))?);
        }
        if total_weight == 0.0 {
            continue;
        }
        let all = tape.concat_rows(&losses)?;
        let sum = tape.sum(all);
        let loss = tape.scalar_mul(sum, 1.0 / total_weight);
        model.store.zero_grad();
        tape.backward(loss)?.accumulate(&tape, &mut model.store);
        // p and q share one store
        model.store.fill_missing_grads();
        adam.step(&mut model.store)?;
    }
    Ok(())
}

/// Trains `q_θ` and `p_φ` over many cases with shared parameters:
/// supervised warm-up of `q_θ`, then `em_rounds` of M-step (fit `p_φ` to
/// gold labels and `q_θ` beliefs) and E-step (fit `q_θ` to gold labels and
/// `p_φ` beliefs).
pub fn train_ie(g: &HeteroGraph, cases: &[FailedSet], cfg: &IeConfig, seed: u64) -> Result<IeModel> {
    let mut model = IeModel::init(cfg, seed)?;
    let mut rng = rng::rng(rng::substream(seed, "ie-cases"));
    let adj = gcn_adjacency(g);
    let mean_adj = Arc::new(SparseAdj::mean(g.n(), |i| g.neighbors(i).to_vec())?);
    let sample = sample_cases(cases, cfg.max_cases, &mut rng);
    let prepared: Vec<IeCase> =
        sample.iter().map(|d| ie_case(g, d, &mean_adj, cfg.negative_fraction)).collect::<Result<_>>()?;
    if !prepared.iter().any(|c| c.labels.iter().any(Option::is_some)) {
        return Err(Error::config("initial enhancement needs labelled nodes"));
    }
    let chunk = cfg.epochs / (cfg.em_rounds + 1);
    let mut q_adam = Adam::new(cfg.lr);
    let mut p_adam = Adam::new(cfg.lr);
    ie_phase(&mut model, &adj, &prepared, Phase::Supervised, chunk, &mut q_adam, &mut rng)?;
    model.labeled_ll.push(model.labeled_log_likelihood(&adj, &prepared)?);
    for _ in 0..cfg.em_rounds {
        ie_phase(&mut model, &adj, &prepared, Phase::TrainP, chunk / 2, &mut p_adam, &mut rng)?;
        ie_phase(&mut model, &adj, &prepared, Phase::TrainQ, chunk - chunk / 2, &mut q_adam, &mut rng)?;
        model.labeled_ll.push(model.labeled_log_likelihood(&adj, &prepared)?);
    }
    Ok(model)
}

/// Hidden representation of `q_θ` for case `d`.
pub fn ie_embedding(model: &IeModel, g: &HeteroGraph, d: &FailedSet) -> Result<Tensor> {
    let adj = gcn_adjacency(g);
    let state = Tensor::column((0..g.n()).map(|v| if d.contains(v) { 0.0 } else { 1.0 }).collect());
    let mut tape = Tape::new();
    let out = model.q_forward(&mut tape, &adj, &state)?;
    Ok(tape.value(out.hidden).clone())
}

// ---------------------------------------------------------------------------
// All scopes

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lp: LpConfig,
    pub gp: GpConfig,
    pub ie: IeConfig,
}

/// The three embeddings of one scope for one case, rows in local scope order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub scope: Scope,
    pub lp: Tensor,
    pub gp: Tensor,
    pub ie: Tensor,
}

impl EmbeddingSet {
    pub fn width(&self) -> usize {
        self.lp.cols() + self.gp.cols() + self.ie.cols()
    }

    /// `Concat(E_lp, E_gp, E_ie)`.
    pub fn concat(&self) -> Tensor {
        Tensor::hcat(&[&self.lp, &self.gp, &self.ie]).expect("row counts agree")
    }
}

/// Trained pre-training artefacts for one scope.
#[derive(Debug, Clone)]
pub struct ScopeModels {
    pub view: ScopeView,
    pub lp: Tensor,
    pub gp: Option<GpModel>,
    pub ie: Option<IeModel>,
}

impl ScopeModels {
    pub fn scope(&self) -> Scope {
        self.view.scope
    }

    /// Embeddings for the case with initial failures `d` (global ids).
    pub fn embeddings(&self, cfg: &PretrainConfig, d: &FailedSet) -> Result<EmbeddingSet> {
        let local = self.view.restrict(d);
        let g = &self.view.graph;
        let gp = match &self.gp {
            Some(m) => gp_embedding(m, g, &local)?,
            None => Tensor::zeros(g.n(), cfg.gp.levels() - 1),
        };
        let ie = match &self.ie {
            Some(m) => ie_embedding(m, g, &local)?,
            None => Tensor::zeros(g.n(), cfg.ie.dim),
        };
        Ok(EmbeddingSet { scope: self.scope(), lp: self.lp.clone(), gp, ie })
    }
}

/// Pre-training results for the coupled scope and every non-empty layer.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub cfg: PretrainConfig,
    pub scopes: Vec<ScopeModels>,
}

impl Pretrained {
    pub fn scope(&self, scope: Scope) -> Option<&ScopeModels> {
        self.scopes.iter().find(|s| s.scope() == scope)
    }

    /// Embeddings of every scope for one case.
    pub fn embeddings(&self, d: &FailedSet) -> Result<Vec<EmbeddingSet>> {
        self.scopes.iter().map(|s| s.embeddings(&self.cfg, d)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for s in &self.scopes {
            let scope = s.scope();
            ck.tensors.insert(format!("emb.{scope}.lp"), s.lp.clone());
            if let Some(gp) = &s.gp {
                gp.write(&mut ck, &format!("pretrain.{scope}.gp"));
            }
            if let Some(ie) = &s.ie {
                ie.write(&mut ck, &format!("pretrain.{scope}.ie"));
            }
        }
        ck
    }

    pub fn from_checkpoint(g: &HeteroGraph, cfg: &PretrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut scopes = Vec::new();
        for scope in Scope::ALL {
            let Some(lp) = ck.tensors.get(&format!("emb.{scope}.lp")) else { continue };
            let view = ScopeView::new(g, scope);
            if lp.rows() != view.n() {
                return Err(Error::Validation(format!("emb.{scope}.lp has {} rows, scope has {} nodes", lp.rows(), view.n())));
            }
            let gp_prefix = format!("pretrain.{scope}.gp");
            let gp = if ck.tensors.contains_key(&format!("{gp_prefix}.target")) {
                Some(GpModel::read(&cfg.gp, ck, &gp_prefix)?)
            } else {
                None
            };
            let ie_prefix = format!("pretrain.{scope}.ie");
            let ie = if ck.tensors.keys().any(|k| k.starts_with(&format!("{ie_prefix}."))) {
                Some(IeModel::read(&cfg.ie, ck, &ie_prefix)?)
            } else {
                None
            };
            scopes.push(ScopeModels { view, lp: lp.clone(), gp, ie });
        }
        Ok(Self { cfg: cfg.clone(), scopes })
    }
}

fn pretrain_scope(view: ScopeView, cases: &[FailedSet], cfg: &PretrainConfig, seed: u64) -> Result<ScopeModels> {
    let scope = view.scope;
    let g = &view.graph;
    let lp = if g.edges().is_empty() {
        log::warn!("scope {scope} has no edges; its link-prediction embedding is zero");
        Tensor::zeros(g.n(), cfg.lp.dim)
    } else {
        train_lp(g, &cfg.lp, rng::substream(seed, &format!("lp.{scope}")))?.embedding
    };
    let local: Vec<FailedSet> = cases.iter().map(|d| view.restrict(d)).collect();
    let gp = if local.iter().any(|d| !d.is_empty()) {
        Some(train_gp(g, &local, &cfg.gp, rng::substream(seed, &format!("gp.{scope}")))?)
    } else {
        log::warn!("no case has initial failures in scope {scope}; its pooling embedding is zero");
        None
    };
    let ie = match train_ie(g, &local, &cfg.ie, rng::substream(seed, &format!("ie.{scope}"))) {
        Ok(m) => Some(m),
        Err(Error::Config(msg)) => {
            log::warn!("scope {scope}: {msg}; its enhancement embedding is zero");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(ScopeModels { view, lp, gp, ie })
}

/// Runs all three tasks on the coupled graph and on every non-empty layer.
/// `cases` are the initial failed sets of the training records.
pub fn run_all_pretraining(g: &HeteroGraph, cases: &[FailedSet], cfg: &PretrainConfig, seed: u64) -> Result<Pretrained> {
    let views: Vec<ScopeView> = Scope::ALL
        .into_iter()
        .map(|s| ScopeView::new(g, s))
        .filter(|v| {
            if v.n() == 0 {
                log::warn!("layer {} has no nodes; scope skipped", v.scope);
            }
            v.n() > 0
        })
        .collect();
    let scopes = views.into_par_iter().map(|v| pretrain_scope(v, cases, cfg, seed)).collect::<Result<Vec<_>>>()?;
    Ok(Pretrained { cfg: cfg.clone(), scopes })
}
