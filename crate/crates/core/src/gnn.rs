//! Graph neural layers: graph convolution, relational graph convolution and
//! DiffPool coarsening.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, SparseAdj, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, RelationKind};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// Symmetric-normalised propagation matrix over all relations of `g`.
pub fn gcn_adjacency(g: &HeteroGraph) -> Arc<SparseAdj> {
    Arc::new(SparseAdj::gcn(g.n(), |i| g.neighbors(i).to_vec()).expect("graph adjacency is valid"))
}

/// Binary adjacency over all relations of `g`.
pub fn binary_adjacency(g: &HeteroGraph) -> Arc<SparseAdj> {
    let rows = (0..g.n()).map(|i| g.neighbors(i).iter().map(|&j| (j, 1.0)).collect()).collect();
    Arc::new(SparseAdj::from_rows(g.n(), rows, vec![1.0; g.n()]).expect("graph adjacency is valid"))
}

/// Mean-normalised adjacency per relation present in `g`, `c_{i,r} = |N_i^r|`.
pub type RelationAdj = BTreeMap<RelationKind, Arc<SparseAdj>>;

pub fn relation_adjacency(g: &HeteroGraph) -> RelationAdj {
    g.relations_present()
        .into_iter()
        .map(|rel| {
            let adj = SparseAdj::mean(g.n(), |i| g.neighbors_by(i, rel).to_vec()).expect("graph adjacency is valid");
            (rel, Arc::new(adj))
        })
        .collect()
}

/// Fully connected layer, `act(X W + b)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
}

impl Dense {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, act: Activation, rng: &mut Rng) -> Result<Self> {
        Ok(Self { w: store.glorot(format!("{prefix}.W"), d_in, d_out, rng)?, b: store.zeros(format!("{prefix}.b"), 1, d_out)?, act })
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.value(self.w).cols()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w)?;
        let h = tape.add_row(h, b)?;
        Ok(activate(tape, h, self.act))
    }
}

/// Graph convolution, `act(Â X W + b)` with `Â = D^-1/2 (A + I) D^-1/2`.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, act: Activation, rng: &mut Rng) -> Result<Self> {
        let d = Dense::new(store, prefix, d_in, d_out, act, rng)?;
        Ok(Self { w: d.w, b: d.b, act })
    }

    /// `adj` must already be normalised, e.g. by [`gcn_adjacency`].
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, adj: &Arc<SparseAdj>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let [_, d_in] = tape.shape(x);
        let d_out = store.value(self.w).cols();
        let h = if d_out < d_in {
            let xw = tape.matmul(x, w)?;
            tape.sparse_matmul(adj, xw)?
        } else {
            let ax = tape.sparse_matmul(adj, x)?;
            tape.matmul(ax, w)?
        };
        let h = tape.add_row(h, b)?;
        Ok(activate(tape, h, self.act))
    }

    /// Same rule over a dense, already normalised propagation matrix.
    pub fn forward_dense(&self, tape: &mut Tape, store: &ParamStore, a_hat: Var, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        let h = tape.matmul(a_hat, xw)?;
        let h = tape.add_row(h, b)?;
        Ok(activate(tape, h, self.act))
    }
}

/// `D^-1/2 (A + I) D^-1/2` for a dense, symmetric, non-negative `A` on the tape.
pub fn normalize_dense(tape: &mut Tape, a: Var) -> Result<Var> {
    let [n, m] = tape.shape(a);
    if n != m {
        return Err(Error::contract(format!("adjacency must be square, got [{n}, {m}]")));
    }
    let eye = tape.constant(Tensor::eye(n));
    let a1 = tape.add(a, eye)?;
    let deg = tape.row_sum(a1);
    let s = tape.sqrt(deg)?;
    let half = tape.div_col(a1, s)?;
    let t = tape.transpose(half);
    tape.div_col(t, s)
}

/// Relational graph convolution:
/// `act(Σ_r Σ_{j∈N_i^r} W_r h_j / c_{i,r} + W_0 h_i + b)`.
#[derive(Debug, Clone)]
pub struct RgcnLayer {
    pub relations: BTreeMap<RelationKind, ParamId>,
    pub w0: ParamId,
    pub b: Option<ParamId>,
    pub act: Activation,
}

impl RgcnLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        relations: &[RelationKind],
        d_in: usize,
        d_out: usize,
        act: Activation,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut ws = BTreeMap::new();
        for &rel in relations {
            ws.insert(rel, store.glorot(format!("{prefix}.{rel}.W"), d_in, d_out, rng)?);
        }
        let w0 = store.glorot(format!("{prefix}.self.W"), d_in, d_out, rng)?;
        let b = if bias { Some(store.zeros(format!("{prefix}.b"), 1, d_out)?) } else { None };
        Ok(Self { relations: ws, w0, b, act })
    }

    /// Evaluated as one product `[h | A_1 h | … | A_R h] · [W_0; W_1; …; W_R]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, adj: &RelationAdj, h: Var) -> Result<Var> {
        let mut parts = vec![h];
        let mut weights = vec![tape.param(store, self.w0)];
        for (rel, a) in adj {
            let Some(&wid) = self.relations.get(rel) else {
                return Err(Error::contract(format!("no weight for relation {rel}")));
            };
            parts.push(tape.sparse_matmul(a, h)?);
            weights.push(tape.param(store, wid));
        }
        let x = tape.concat_cols(&parts)?;
        let w = tape.concat_rows(&weights)?;
        let mut acc = tape.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = tape.param(store, b);
            acc = tape.add_row(acc, b)?;
        }
        Ok(activate(tape, acc, self.act))
    }
}

/// One DiffPool level: an embedding GCN (Z) and an assignment GCN (S).
#[derive(Debug, Clone)]
pub struct DiffPoolLevel {
    pub embed: GcnLayer,
    pub pool: GcnLayer,
    pub clusters: usize,
}

/// Graph fed to a DiffPool level.
#[derive(Debug, Clone, Copy)]
pub enum LevelInput<'a> {
    /// The original graph: normalised propagation matrix and raw adjacency.
    Sparse { propagate: &'a Arc<SparseAdj>, raw: &'a Arc<SparseAdj> },
    /// A coarsened weighted adjacency on the tape.
    Dense(Var),
}

/// Output of one level: coarsened features, adjacency and the soft assignment.
#[derive(Debug, Clone, Copy)]
pub struct PoolOutput {
    pub x: Var,
    pub a: Var,
    pub s: Var,
}

impl DiffPoolLevel {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_hidden: usize, clusters: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            embed: GcnLayer::new(store, &format!("{prefix}.embed"), d_in, d_hidden, Activation::Relu, rng)?,
            pool: GcnLayer::new(store, &format!("{prefix}.pool"), d_in, clusters, Activation::Identity, rng)?,
            clusters,
        })
    }

    /// `Z = GCN_embed(A, X)`, `S = softmax(GCN_pool(A, X))`, then `X' = SᵀZ`, `A' = SᵀAS`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: LevelInput<'_>, x: Var) -> Result<PoolOutput> {
        match input {
            LevelInput::Sparse { propagate, raw } => {
                let z = self.embed.forward(tape, store, propagate, x)?;
                let logits = self.pool.forward(tape, store, propagate, x)?;
                let s = tape.row_softmax(logits);
                let (x, a) = coarsen_sparse(tape, raw, z, s)?;
                Ok(PoolOutput { x, a, s })
            }
            LevelInput::Dense(a) => diffpool_step(self, tape, store, a, x),
        }
    }
}

fn check_symmetric(t: &Tensor) -> Result<()> {
    let n = t.rows();
    if t.cols() != n {
        return Err(Error::contract(format!("adjacency must be square, got {:?}", t.shape())));
    }
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (t.get(i, j), t.get(j, i));
            if (x - y).abs() > 1e-9 * x.abs().max(y.abs()).max(1.0) {
                return Err(Error::contract(format!("adjacency is not symmetric at ({i}, {j})")));
            }
            if x < 0.0 {
                return Err(Error::contract(format!("adjacency has a negative entry at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// One dense DiffPool level over a symmetric non-negative adjacency `a`.
pub fn diffpool_step(level: &DiffPoolLevel, tape: &mut Tape, store: &ParamStore, a: Var, x: Var) -> Result<PoolOutput> {
    check_symmetric(tape.value(a))?;
    let a_hat = normalize_dense(tape, a)?;
    let z = level.embed.forward_dense(tape, store, a_hat, x)?;
    let logits = level.pool.forward_dense(tape, store, a_hat, x)?;
    let s = tape.row_softmax(logits);
    let (x, a) = coarsen_dense(tape, a, z, s)?;
    Ok(PoolOutput { x, a, s })
}

/// `X' = SᵀZ`, `A' = SᵀAS` for a dense adjacency on the tape.
pub fn coarsen_dense(tape: &mut Tape, a: Var, z: Var, s: Var) -> Result<(Var, Var)> {
    let st = tape.transpose(s);
    let x = tape.matmul(st, z)?;
    let as_ = tape.matmul(a, s)?;
    let a = tape.matmul(st, as_)?;
    Ok((x, a))
}

/// `X' = SᵀZ`, `A' = SᵀAS` for a sparse constant adjacency.
pub fn coarsen_sparse(tape: &mut Tape, a: &Arc<SparseAdj>, z: Var, s: Var) -> Result<(Var, Var)> {
    let st = tape.transpose(s);
    let x = tape.matmul(st, z)?;
    let as_ = tape.sparse_matmul(a, s)?;
    let a = tape.matmul(st, as_)?;
    Ok((x, a))
}

/// Products `S⁽⁰⁾`, `S⁽⁰⁾S⁽¹⁾`, … mapping original nodes to clusters at each level.
pub fn compose_assignments(levels: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out: Vec<Tensor> = Vec::with_capacity(levels.len());
    for s in levels {
        let next = match out.last() {
            Some(prev) => prev.matmul(s)?,
            None => s.clone(),
        };
        out.push(next);
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Cluster of node `n` after `l` poolings (`1 ≤ l ≤ levels.len()`), by
/// argmax of the composed soft assignment. Ties go to the lowest cluster id.
pub fn hard_assignment(levels: &[Tensor], n: usize, l: usize) -> Result<usize> {
    if l == 0 || l > levels.len() {
        return Err(Error::contract(format!("level {l} outside 1..={}", levels.len())));
    }
    let composed = compose_assignments(&levels[..l])?;
    let m = composed.last().expect("l >= 1");
    if n >= m.rows() {
        return Err(Error::contract(format!("node {n} outside {} rows", m.rows())));
    }
    Ok(argmax(m.row(n)))
}

/// Hard assignments of every node at every level, `result[l-1][n]`.
pub fn hard_assignments(levels: &[Tensor]) -> Result<Vec<Vec<usize>>> {
    Ok(compose_assignments(levels)?.iter().map(|m| (0..m.rows()).map(|n| argmax(m.row(n))).collect()).collect())
}

/// DiffPool hierarchy ending in a scalar graph readout.
///
/// With `L` levels there are `L − 1` poolings; the last level embeds the
/// coarsest graph, averages its cluster features and maps them to a scalar.
#[derive(Debug, Clone)]
pub struct DiffPoolStack {
    pub levels: Vec<DiffPoolLevel>,
    pub last: GcnLayer,
    pub readout: Dense,
}

/// Forward result of a [`DiffPoolStack`].
#[derive(Debug, Clone)]
pub struct StackOutput {
    pub prediction: Var,
    pub assignments: Vec<Var>,
}

impl DiffPoolStack {
    /// `clusters` lists `b_1 > b_2 > …`; its length is `L − 1`.
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, clusters: &[usize], rng: &mut Rng) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::config("DiffPool needs at least two levels"));
        }
        if clusters.windows(2).any(|w| w[1] >= w[0]) || clusters.contains(&0) {
            return Err(Error::config(format!("cluster counts must be positive and strictly decreasing, got {clusters:?}")));
        }
        let mut levels = Vec::with_capacity(clusters.len());
        let mut d = d_in;
        for (l, &b) in clusters.iter().enumerate() {
            levels.push(DiffPoolLevel::new(store, &format!("{prefix}.{l}"), d, hidden, b, rng)?);
            d = hidden;
        }
        let last = GcnLayer::new(store, &format!("{prefix}.{}.embed", clusters.len()), hidden, hidden, Activation::Relu, rng)?;
        let readout = Dense::new(store, &format!("{prefix}.readout"), hidden, 1, Activation::Identity, rng)?;
        Ok(Self { levels, last, readout })
    }

    pub fn depth(&self) -> usize {
        self.levels.len() + 1
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        propagate: &Arc<SparseAdj>,
        raw: &Arc<SparseAdj>,
        x: Var,
    ) -> Result<StackOutput> {
        let mut assignments = Vec::with_capacity(self.levels.len());
        let mut out = self.levels[0].forward(tape, store, LevelInput::Sparse { propagate, raw }, x)?;
        assignments.push(out.s);
        for level in &self.levels[1..] {
            out = level.forward(tape, store, LevelInput::Dense(out.a), out.x)?;
            assignments.push(out.s);
        }
        let a_hat = normalize_dense(tape, out.a)?;
        let h = self.last.forward_dense(tape, store, a_hat, out.x)?;
        let pooled = tape.col_mean(h)?;
        let prediction = self.readout.forward(tape, store, pooled)?;
        Ok(StackOutput { prediction, assignments })
    }
}
