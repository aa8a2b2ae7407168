//! Acceptance checks. Prints one PASS/FAIL line per criterion and always
//! exits 0; `ACCEPTANCE_ONLY=1,3` restricts the run to listed criteria.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use icube_cli::pipeline::ICM;
use icube_cli::split::split;
use icube_cli::{ExperimentConfig, MetricsFile, Workspace};
use icube_core::autodiff::gradcheck::{check_inputs, check_params, CheckOptions, GradReport};
use icube_core::autodiff::{ParamStore, SparseAdj, Tape, Tensor, Var};
use icube_core::cascade::{build_dataset, dependency_cascade, icm_predict, CascadeParams, RelationProbs, SeedPool};
use icube_core::gnn::{
    diffpool_step, gcn_adjacency, binary_adjacency, normalize_dense, relation_adjacency, Activation, Dense, DiffPoolLevel,
    DiffPoolStack, GcnLayer, RgcnLayer,
};
use icube_core::metrics::{anc, aoi_yield, auc, prf1, volume_rmse};
use icube_core::model::{case_features, Ablation, GraphContext, I3Config, I3Model};
use icube_core::netgen::{generate, paper_ratio_preset};
use icube_core::pretrain::{lp_loss, run_all_pretraining, GpConfig, IeConfig, LpConfig, PretrainConfig};
use icube_core::rng::{self, Rng};
use icube_core::{Edge, FailedSet, HeteroGraph, LayerKind, NodeRecord, RelationKind};
use rand::Rng as _;

type Outcome = Result<String, String>;

const ORACLE_TOL: f64 = 1e-10;
const PRIMITIVE_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;
const SEEDS: u64 = 5;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(rows: usize, cols: usize, r: &mut Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore, r: &mut Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let [a, b] = store.value(id).shape();
        *store.value_mut(id) = random(a, b, r);
    }
}

// ---------- random heterogeneous graphs ----------

fn relation_between(a: LayerKind, b: LayerKind) -> Option<(RelationKind, bool)> {
    RelationKind::ALL.iter().find_map(|&rel| {
        let (x, y) = rel.endpoints();
        if (x, y) == (a, b) {
            Some((rel, false))
        } else if (y, x) == (a, b) {
            Some((rel, true))
        } else {
            None
        }
    })
}

/// Up to `max_n` nodes with random layers and roughly `density · n` edges.
/// Every AOI gets a base station when any communication node exists.
fn random_graph(r: &mut Rng, max_n: usize, density: f64) -> HeteroGraph {
    let n = r.gen_range(2..=max_n);
    let layers: Vec<LayerKind> = (0..n).map(|_| LayerKind::from_code(r.gen_range(0..4)).unwrap()).collect();
    let nodes = (0..n).map(|i| NodeRecord::new(i, layers[i])).collect();
    let mut seen = BTreeSet::new();
    let mut edges = Vec::new();
    let mut push = |u: usize, v: usize, edges: &mut Vec<Edge>| {
        if u == v {
            return;
        }
        if let Some((rel, swap)) = relation_between(layers[u], layers[v]) {
            let (s, d) = if swap { (v, u) } else { (u, v) };
            let key = if rel.is_intra() { (rel, s.min(d), s.max(d)) } else { (rel, s, d) };
            if seen.insert(key) {
                edges.push(Edge::new(key.1, key.2, rel));
            }
        }
    };
    for _ in 0..(density * n as f64) as usize {
        let (u, v) = (r.gen_range(0..n), r.gen_range(0..n));
        push(u, v, &mut edges);
    }
    let com: Vec<usize> = (0..n).filter(|&i| layers[i] == LayerKind::Communication).collect();
    if !com.is_empty() {
        for a in (0..n).filter(|&i| layers[i] == LayerKind::Aoi) {
            push(com[r.gen_range(0..com.len())], a, &mut edges);
        }
    }
    HeteroGraph::new(nodes, edges).unwrap()
}

fn random_set(r: &mut Rng, n: usize, p: f64) -> FailedSet {
    (0..n).filter(|_| r.gen_bool(p)).collect()
}

// ---------- criterion 1: formula oracles ----------

/// All-pairs hop distances by Floyd-Warshall; `None` when unreachable.
fn floyd(g: &HeteroGraph) -> Vec<Vec<Option<u64>>> {
    let n = g.n();
    let mut d = vec![vec![None; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for e in g.edges() {
        d[e.src][e.dst] = Some(1);
        d[e.dst][e.src] = Some(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                    if d[i][j].map_or(true, |c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

/// Connected pairs among survivors, by transitive closure.
fn connected_pairs(g: &HeteroGraph, removed: &FailedSet) -> u64 {
    let n = g.n();
    let alive: Vec<bool> = (0..n).map(|v| !removed.contains(v)).collect();
    let mut reach = vec![vec![false; n]; n];
    for e in g.edges() {
        if alive[e.src] && alive[e.dst] {
            reach[e.src][e.dst] = true;
            reach[e.dst][e.src] = true;
        }
    }
    for k in (0..n).filter(|&k| alive[k]) {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            if alive[i] && alive[j] && reach[i][j] {
                count += 1;
            }
        }
    }
    count
}

fn oracle_yield(g: &HeteroGraph, failed: &FailedSet) -> Option<f64> {
    let aois: Vec<usize> = (0..g.n()).filter(|&v| g.layer(v) == LayerKind::Aoi).collect();
    if aois.is_empty() {
        return None;
    }
    let mut served = 0;
    for &a in &aois {
        let stations: Vec<usize> = g
            .edges()
            .iter()
            .filter(|e| e.rel == RelationKind::ComAoi && (e.src == a || e.dst == a))
            .map(|e| if e.src == a { e.dst } else { e.src })
            .collect();
        if stations.is_empty() {
            return None;
        }
        let down = stations.iter().filter(|&&s| failed.contains(s)).count() as f64;
        if down <= stations.len() as f64 / 2.0 {
            served += 1;
        }
    }
    Some(served as f64 / aois.len() as f64)
}

fn rel_close(x: f64, y: f64) -> bool {
    x == y || (x - y).abs() <= ORACLE_TOL * x.abs().max(y.abs())
}

type Dense2 = Vec<Vec<f64>>;

fn to_rows(t: &Tensor) -> Dense2 {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &Dense2, b: &Dense2) -> Dense2 {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    (0..n).map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect()).collect()
}

fn tr(a: &Dense2) -> Dense2 {
    let m = a.first().map_or(0, Vec::len);
    (0..m).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn plus_bias(a: Dense2, b: &Tensor) -> Dense2 {
    a.into_iter().map(|row| row.iter().enumerate().map(|(j, x)| x + b.get(0, j)).collect()).collect()
}

/// Largest entry error relative to the largest oracle magnitude.
fn norm_rel_error(got: &Tensor, want: &Dense2) -> f64 {
    let scale = want.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let mut err = 0.0f64;
    for (i, row) in want.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            err = err.max((got.get(i, j) - w).abs());
        }
    }
    if got.shape() != [want.len(), want.first().map_or(0, Vec::len)] {
        return f64::INFINITY;
    }
    err / scale
}

fn oracle_diffpool(a: &Dense2, x: &Dense2, level: &DiffPoolLevel, store: &ParamStore) -> (Dense2, Dense2, Dense2) {
    let n = a.len();
    let mut a1 = a.clone();
    for (i, row) in a1.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let deg: Vec<f64> = a1.iter().map(|row| row.iter().sum()).collect();
    let a_hat: Dense2 = (0..n).map(|i| (0..n).map(|j| a1[i][j] / (deg[i] * deg[j]).sqrt()).collect()).collect();
    let gcn = |layer: &GcnLayer| plus_bias(mm(&a_hat, &mm(x, &to_rows(store.value(layer.w)))), store.value(layer.b));
    let z: Dense2 = gcn(&level.embed).into_iter().map(|row| row.into_iter().map(|v| v.max(0.0)).collect()).collect();
    let s: Dense2 = gcn(&level.pool)
        .into_iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = e.iter().sum();
            e.into_iter().map(|v| v / total).collect()
        })
        .collect();
    let st = tr(&s);
    (mm(&st, &z), mm(&st, &mm(a, &s)), s)
}

fn oracle_rgcn(g: &HeteroGraph, h: &Dense2, layer: &RgcnLayer, store: &ParamStore) -> Dense2 {
    let own = mm(h, &to_rows(store.value(layer.w0)));
    let mut out = plus_bias(own, store.value(layer.b.unwrap()));
    for (&rel, &wid) in &layer.relations {
        let hw = mm(h, &to_rows(store.value(wid)));
        for (i, row) in out.iter_mut().enumerate() {
            let nbrs: Vec<usize> = g
                .edges()
                .iter()
                .filter(|e| e.rel == rel && (e.src == i || e.dst == i))
                .map(|e| if e.src == i { e.dst } else { e.src })
                .collect();
            for &j in &nbrs {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += hw[j][c] / nbrs.len() as f64;
                }
            }
        }
    }
    out.into_iter().map(|row| row.into_iter().map(f64::tanh).collect()).collect()
}

fn criterion_1() -> Outcome {
    const INSTANCES: usize = 120;
    let mut r = rng::rng(0xacce_0001);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut note = |name: &'static str, ok: bool, failures: &mut Vec<String>| {
        *counts.entry(name).or_default() += 1;
        if !ok && failures.len() < 5 {
            failures.push(name.to_string());
        }
    };

    let mut graph_cases = 0;
    while graph_cases < INSTANCES {
        let g = random_graph(&mut r, 64, 1.5);
        let f = random_set(&mut r, g.n(), 0.3);
        graph_cases += 1;
        let dist = floyd(&g);
        let d = if f.is_empty() { FailedSet::from(vec![0]) } else { f.clone() };
        let want: u64 = d.iter().map(|i| (0..g.n()).map(|v| dist[i][v].unwrap_or(g.n() as u64)).sum::<u64>()).sum();
        let got = g.mean_initial_distance(&d).unwrap();
        note("mean_initial_distance", got == want as f64 / g.n() as f64, &mut failures);

        let (sigma0, sigma) = (connected_pairs(&g, &FailedSet::new()), connected_pairs(&g, &f));
        note("connectivity", g.connectivity(&f) == sigma && g.connectivity(&FailedSet::new()) == sigma0, &mut failures);
        match anc(&g, &f) {
            Ok(a) => note("anc", sigma0 > 0 && rel_close(a, sigma as f64 / sigma0 as f64), &mut failures),
            Err(_) => note("anc", sigma0 == 0, &mut failures),
        }
        match (aoi_yield(&g, &f), oracle_yield(&g, &f)) {
            (Ok(y), Some(w)) => note("yield", rel_close(y, w), &mut failures),
            (Err(_), None) => note("yield", true, &mut failures),
            _ => note("yield", false, &mut failures),
        }
    }

    for _ in 0..INSTANCES {
        let u = r.gen_range(1..=64);
        let (p_pred, p_truth) = (r.gen_range(0.0..0.6), r.gen_range(0.0..0.6));
        let pred = random_set(&mut r, u, p_pred);
        let truth = random_set(&mut r, u, p_truth);
        let (ps, ts): (HashSet<usize>, HashSet<usize>) = (pred.iter().collect(), truth.iter().collect());
        let tp = ps.intersection(&ts).count() as f64;
        let (fp, fn_) = (ps.len() as f64 - tp, ts.len() as f64 - tp);
        let (wp, wr, wf) = if tp + fp + fn_ == 0.0 {
            (1.0, 1.0, 1.0)
        } else {
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rc = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
            (p, rc, f)
        };
        let got = prf1(&pred, &truth, u).unwrap();
        note("prf1", rel_close(got.precision, wp) && rel_close(got.recall, wr) && rel_close(got.f1, wf), &mut failures);

        let n = r.gen_range(2..=64);
        let scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0.0..1.0f64) * 8.0).round() / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs += 1.0;
                wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
        note("auc", rel_close(auc(&scores, &labels).unwrap(), wins / pairs), &mut failures);

        let m = r.gen_range(1..=64);
        let a: Vec<f64> = (0..m).map(|_| r.gen_range(0.0..50.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| r.gen_range(0.0..50.0)).collect();
        let mut sq = 0.0;
        for k in (0..m).rev() {
            sq += (a[k] - b[k]) * (a[k] - b[k]);
        }
        note("rmse", rel_close(volume_rmse(&a, &b).unwrap(), (sq / m as f64).sqrt()), &mut failures);
    }

    for _ in 0..INSTANCES {
        let n = r.gen_range(2..=24);
        let (d_in, hidden, clusters) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..=n.min(5)));
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..i {
                if r.gen_bool(0.3) {
                    let w = r.gen_range(0.1..2.0);
                    a[i][j] = w;
                    a[j][i] = w;
                }
            }
        }
        let x = to_rows(&random(n, d_in, &mut r));
        let mut store = ParamStore::new();
        let level = DiffPoolLevel::new(&mut store, "dp", d_in, hidden, clusters, &mut r).unwrap();
        randomize(&mut store, &mut r);
        let mut tape = Tape::new();
        let av = tape.input(Tensor::from_rows(&a).unwrap());
        let xv = tape.input(Tensor::from_rows(&x).unwrap());
        let out = diffpool_step(&level, &mut tape, &store, av, xv).unwrap();
        let (wx, wa, ws) = oracle_diffpool(&a, &x, &level, &store);
        let e = norm_rel_error(tape.value(out.x), &wx)
            .max(norm_rel_error(tape.value(out.a), &wa))
            .max(norm_rel_error(tape.value(out.s), &ws));
        worst = worst.max(e);
        note("diffpool_step", e <= ORACLE_TOL, &mut failures);
    }

    let mut rgcn_cases = 0;
    while rgcn_cases < INSTANCES {
        let g = random_graph(&mut r, 64, 2.0);
        let rels = g.relations_present();
        rgcn_cases += 1;
        let (d_in, d_out) = (r.gen_range(1..5), r.gen_range(1..5));
        let mut store = ParamStore::new();
        let layer = RgcnLayer::new(&mut store, "rgcn", &rels, d_in, d_out, Activation::Tanh, true, &mut r).unwrap();
        randomize(&mut store, &mut r);
        let h = random(g.n(), d_in, &mut r);
        let mut tape = Tape::new();
        let hv = tape.input(h.clone());
        let y = layer.forward(&mut tape, &store, &relation_adjacency(&g), hv).unwrap();
        let e = norm_rel_error(tape.value(y), &oracle_rgcn(&g, &to_rows(&h), &layer, &store));
        worst = worst.max(e);
        note("rgcn_forward", e <= ORACLE_TOL, &mut failures);
    }

    let summary = counts.iter().map(|(k, v)| format!("{k} {v}")).collect::<Vec<_>>().join(", ");
    ensure(
        failures.is_empty() && counts.values().all(|&c| c >= 100),
        format!("instances: {summary}; worst layer error {worst:.1e}; mismatches {failures:?}"),
    )
}

// ---------- criterion 2: gradient suite ----------

fn contract(tape: &mut Tape, v: Var, w_seed: u64) -> icube_core::Result<Var> {
    let [rows, cols] = tape.shape(v);
    let w = tape.input(random(rows, cols, &mut rng::rng(w_seed)));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn random_sparse(n: usize, m: usize, r: &mut Rng) -> Arc<SparseAdj> {
    let rows = (0..n)
        .map(|_| {
            let cols: Vec<usize> = (0..m).filter(|_| r.gen_bool(0.4)).collect();
            cols.into_iter().map(|j| (j, r.gen_range(0.1..1.0))).collect()
        })
        .collect();
    let norm = (0..n).map(|_| r.gen_range(0.5..3.0)).collect();
    Arc::new(SparseAdj::from_rows(m, rows, norm).unwrap())
}

#[derive(Default)]
struct GradTally {
    worst: BTreeMap<String, f64>,
    count: BTreeMap<String, usize>,
    failed: BTreeSet<String>,
}

impl GradTally {
    fn record(&mut self, name: &str, report: icube_core::Result<GradReport>, tol: f64) {
        *self.count.entry(name.to_string()).or_default() += 1;
        match report {
            Ok(rep) => {
                let w = self.worst.entry(name.to_string()).or_default();
                *w = w.max(rep.max_error);
                if !rep.passes(tol) || rep.checked == 0 {
                    self.failed.insert(name.to_string());
                }
            }
            Err(_) => {
                self.failed.insert(name.to_string());
            }
        }
    }
}

fn primitive_checks(t: &mut GradTally, r: &mut Rng) {
    let opts = CheckOptions { abs_floor: 1e-9, ..CheckOptions::default() };
    let w_seed: u64 = r.gen();
    let c = move |tape: &mut Tape, v: Var| contract(tape, v, w_seed);
    let (a, b, k) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> icube_core::Result<Var>| {
        t.record(name, check_inputs(&inputs, opts, f), PRIMITIVE_TOL);
    };
    run("matmul", vec![random(a, b, r), random(b, k, r)], &|tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        c(tp, y)
    });
    let adj = random_sparse(a, b, r);
    run("sparse_matmul", vec![random(b, k, r)], &|tp, v| {
        let y = tp.sparse_matmul(&adj, v[0])?;
        c(tp, y)
    });
    run("add", vec![random(a, b, r), random(a, b, r)], &|tp, v| {
        let y = tp.add(v[0], v[1])?;
        c(tp, y)
    });
    run("sub", vec![random(a, b, r), random(a, b, r)], &|tp, v| {
        let y = tp.sub(v[0], v[1])?;
        c(tp, y)
    });
    run("mul", vec![random(a, b, r), random(a, b, r)], &|tp, v| {
        let y = tp.mul(v[0], v[1])?;
        c(tp, y)
    });
    run("add_row", vec![random(a, b, r), random(1, b, r)], &|tp, v| {
        let y = tp.add_row(v[0], v[1])?;
        c(tp, y)
    });
    run("mul_col", vec![random(a, b, r), random(a, 1, r)], &|tp, v| {
        let y = tp.mul_col(v[0], v[1])?;
        c(tp, y)
    });
    let denom = random(a, 1, r).map(|x| x.abs() + 0.5);
    run("div_col", vec![random(a, b, r), denom], &|tp, v| {
        let y = tp.div_col(v[0], v[1])?;
        c(tp, y)
    });
    let s = r.gen_range(-2.0..2.0);
    run("scalar_mul", vec![random(a, b, r)], &|tp, v| {
        let y = tp.scalar_mul(v[0], s);
        c(tp, y)
    });
    run("add_scalar", vec![random(a, b, r)], &|tp, v| {
        let y = tp.add_scalar(v[0], s);
        c(tp, y)
    });
    let off_kink = random(a, b, r).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 });
    run("relu", vec![off_kink], &|tp, v| {
        let y = tp.relu(v[0]);
        c(tp, y)
    });
    run("sigmoid", vec![random(a, b, r).map(|x| 3.0 * x)], &|tp, v| {
        let y = tp.sigmoid(v[0]);
        c(tp, y)
    });
    run("tanh", vec![random(a, b, r)], &|tp, v| {
        let y = tp.tanh(v[0]);
        c(tp, y)
    });
    run("square", vec![random(a, b, r)], &|tp, v| {
        let y = tp.square(v[0]);
        c(tp, y)
    });
    run("sqrt", vec![random(a, b, r).map(|x| x.abs() + 0.2)], &|tp, v| {
        let y = tp.sqrt(v[0])?;
        c(tp, y)
    });
    run("row_softmax", vec![random(a, b, r).map(|x| 2.0 * x)], &|tp, v| {
        let y = tp.row_softmax(v[0]);
        c(tp, y)
    });
    run("concat_cols", vec![random(a, b, r), random(a, k, r)], &|tp, v| {
        let y = tp.concat_cols(&[v[0], v[1]])?;
        c(tp, y)
    });
    run("concat_rows", vec![random(a, b, r), random(k, b, r)], &|tp, v| {
        let y = tp.concat_rows(&[v[0], v[1]])?;
        c(tp, y)
    });
    let idx: Arc<Vec<usize>> = Arc::new((0..k + 2).map(|_| r.gen_range(0..a)).collect());
    run("gather_rows", vec![random(a, b, r)], &|tp, v| {
        let y = tp.gather_rows(v[0], Arc::clone(&idx))?;
        c(tp, y)
    });
    run("transpose", vec![random(a, b, r)], &|tp, v| {
        let y = tp.transpose(v[0]);
        c(tp, y)
    });
    run("sum", vec![random(a, b, r)], &|tp, v| {
        let y = tp.sum(v[0]);
        Ok(tp.square(y))
    });
    run("reduce_mean", vec![random(a, b, r)], &|tp, v| {
        let y = tp.reduce_mean(v[0])?;
        Ok(tp.square(y))
    });
    run("row_sum", vec![random(a, b, r)], &|tp, v| {
        let y = tp.row_sum(v[0]);
        c(tp, y)
    });
    run("col_mean", vec![random(a, b, r)], &|tp, v| {
        let y = tp.col_mean(v[0])?;
        c(tp, y)
    });
    let targets = Arc::new(random(a, b, r).map(|x| (x + 1.0) / 2.0));
    let weights = Arc::new(random(a, b, r).map(|x| x.abs() + 0.1));
    run("bce_with_logits", vec![random(a, b, r).map(|x| 4.0 * x)], &|tp, v| {
        tp.bce_with_logits(v[0], Arc::clone(&targets), Arc::clone(&weights))
    });
}

fn layer_checks(t: &mut GradTally, r: &mut Rng) {
    let opts = CheckOptions { abs_floor: 1e-9, ..CheckOptions::default() };
    let g = loop {
        let g = random_graph(r, 12, 2.0);
        if g.n() >= 4 && !g.edges().is_empty() {
            break g;
        }
    };
    let n = g.n();
    let w_seed: u64 = r.gen();
    let (prop, raw, rel) = (gcn_adjacency(&g), binary_adjacency(&g), relation_adjacency(&g));
    let x = random(n, 3, r);

    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "dense", 3, 4, Activation::Tanh, r).unwrap();
    randomize(&mut store, r);
    let rep = check_params(&mut store, opts, |tp, s| {
        let xv = tp.input(x.clone());
        let y = dense.forward(tp, s, xv)?;
        contract(tp, y, w_seed)
    });
    t.record("dense", rep, PRIMITIVE_TOL);

    let mut store = ParamStore::new();
    let gcn = GcnLayer::new(&mut store, "gcn", 3, 4, Activation::Sigmoid, r).unwrap();
    randomize(&mut store, r);
    let rep = check_params(&mut store, opts, |tp, s| {
        let xv = tp.input(x.clone());
        let y = gcn.forward(tp, s, &prop, xv)?;
        contract(tp, y, w_seed)
    });
    t.record("gcn", rep, PRIMITIVE_TOL);

    let a_sym = {
        let m = random(n, n, r).map(f64::abs);
        m.zip_map(&m.transpose(), |p, q| p + q)
    };
    let rep = check_inputs(&[a_sym.clone(), x.clone()], opts, |tp, v| {
        let a_hat = normalize_dense(tp, v[0])?;
        let y = tp.matmul(a_hat, v[1])?;
        contract(tp, y, w_seed)
    });
    t.record("normalize_dense", rep, PRIMITIVE_TOL);

    let mut store = ParamStore::new();
    let rgcn = RgcnLayer::new(&mut store, "rgcn", &g.relations_present(), 3, 2, Activation::Tanh, true, r).unwrap();
    randomize(&mut store, r);
    let rep = check_params(&mut store, opts, |tp, s| {
        let xv = tp.input(x.clone());
        let y = rgcn.forward(tp, s, &rel, xv)?;
        contract(tp, y, w_seed)
    });
    t.record("rgcn", rep, PRIMITIVE_TOL);

    let mut store = ParamStore::new();
    let level = DiffPoolLevel::new(&mut store, "dp", 3, 4, 2, r).unwrap();
    randomize(&mut store, r);
    let rep = check_params(&mut store, opts, |tp, s| {
        let av = tp.input(a_sym.clone());
        let xv = tp.input(x.clone());
        let out = diffpool_step(&level, tp, s, av, xv)?;
        let p = contract(tp, out.x, w_seed)?;
        let q = contract(tp, out.a, w_seed ^ 1)?;
        tp.add(p, q)
    });
    t.record("diffpool_step", rep, PRIMITIVE_TOL);

    let mut store = ParamStore::new();
    let stack = DiffPoolStack::new(&mut store, "stack", 3, 4, &[3, 2], r).unwrap();
    randomize(&mut store, r);
    let rep = check_params(&mut store, opts, |tp, s| {
        let xv = tp.input(x.clone());
        let out = stack.forward(tp, s, &prop, &raw, xv)?;
        Ok(tp.square(out.prediction))
    });
    t.record("diffpool_stack", rep, PRIMITIVE_TOL);

    let pos: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.src, e.dst)).collect();
    let neg: Vec<(usize, usize)> = (0..pos.len()).map(|_| (r.gen_range(0..n), r.gen_range(0..n))).collect();
    let rep = check_inputs(&[random(n, 3, r)], opts, |tp, v| lp_loss(tp, v[0], &pos, &neg, 1.0, 1e-3));
    t.record("lp_loss", rep, PRIMITIVE_TOL);
}

fn end_to_end_checks(t: &mut GradTally) {
    let mut gen = paper_ratio_preset(1.0 / 400.0);
    gen.seed = 41;
    let g = generate(&gen).unwrap();
    let params = CascadeParams::default();
    let records = build_dataset(&g, 2, 1..=10, SeedPool::All, &params, 41).unwrap();
    let cfg = PretrainConfig {
        lp: LpConfig { dim: 3, epochs: 10, ..LpConfig::default() },
        gp: GpConfig { clusters: vec![3, 2], hidden: 3, epochs: 5, batch: 2, lr: 1e-2, max_cases: 8 },
        ie: IeConfig { dim: 3, em_rounds: 1, epochs: 5, batch: 2, max_cases: 8, ..IeConfig::default() },
    };
    let cases: Vec<FailedSet> = records.iter().map(|r| r.initial_failed.clone()).collect();
    let pre = run_all_pretraining(&g, &cases, &cfg, 41).unwrap();
    let ctx = GraphContext::new(&g, &pre).unwrap();
    let opts = CheckOptions { step: 1e-6, max_entries: 6, abs_floor: 1e-9 };
    for (i, rec) in records.iter().enumerate() {
        let ablation = if i % 4 == 3 { Ablation::NoRgcn } else { Ablation::Full };
        let model_cfg = I3Config { hidden: 4, ..I3Config::default() }.with_ablation(ablation);
        let mut m = I3Model::new(&model_cfg, &g, &pre, i as u64).unwrap();
        let mut r = rng::rng(1000 + i as u64);
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.value_mut(id).data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.3..0.3));
        }
        let feats = case_features(&pre, &rec.initial_failed).unwrap();
        let mut store = std::mem::take(&mut m.store);
        let rep = check_params(&mut store, opts, |tape, s| {
            let mut probe = m.clone();
            probe.store = s.clone();
            probe.case_loss(tape, &ctx, &feats, &rec.final_failed)
        });
        t.record("i3_loss", rep, END_TO_END_TOL);
    }
}

fn criterion_2() -> Outcome {
    let mut t = GradTally::default();
    let mut r = rng::rng(0xacce_0002);
    for _ in 0..20 {
        primitive_checks(&mut t, &mut r);
        layer_checks(&mut t, &mut r);
    }
    end_to_end_checks(&mut t);
    let min_count = t.count.values().copied().min().unwrap_or(0);
    let worst_prim = t.worst.iter().filter(|(k, _)| *k != "i3_loss").map(|(_, v)| *v).fold(0.0, f64::max);
    ensure(
        t.failed.is_empty() && min_count >= 20,
        format!(
            "{} checks over {} functions (min {min_count} instances each); worst primitive/layer rel error {worst_prim:.1e}, end-to-end {:.1e}; failing {:?}",
            t.count.values().sum::<usize>(),
            t.count.len(),
            t.worst.get("i3_loss").copied().unwrap_or(f64::NAN),
            t.failed
        ),
    )
}

// ---------- criterion 3: cascade oracle ----------

fn criterion_3() -> Outcome {
    let params = CascadeParams::default();
    let mut r = rng::rng(0xacce_0003);
    let graphs: Vec<HeteroGraph> = (0..4)
        .map(|k| {
            let mut gen = paper_ratio_preset(if k % 2 == 0 { 1.0 / 400.0 } else { 1.0 / 120.0 });
            gen.seed = 300 + k;
            generate(&gen).unwrap()
        })
        .collect();
    let mut bad = 0;
    for case in 0..200 {
        let g = &graphs[case % graphs.len()];
        let size = r.gen_range(0..=20);
        let d: FailedSet = (0..size).map(|_| r.gen_range(0..g.n())).collect();
        let extra: FailedSet = (0..r.gen_range(1..=10)).map(|_| r.gen_range(0..g.n())).collect();
        let bigger = d.union(&extra);
        let f = dependency_cascade(g, &d, &params).unwrap();
        let f_big = dependency_cascade(g, &bigger, &params).unwrap();
        let again = dependency_cascade(g, &f, &params).unwrap();
        if again != f || !d.is_subset(&f) || !f.is_subset(&f_big) {
            bad += 1;
        }
    }
    let path = HeteroGraph::new(
        (0..3).map(|i| NodeRecord::new(i, LayerKind::Road)).collect(),
        vec![Edge::new(0, 1, RelationKind::RoadRoad), Edge::new(1, 2, RelationKind::RoadRoad)],
    )
    .unwrap();
    let probs = RelationProbs::uniform(0.5);
    let start = FailedSet::from(vec![0]);
    const TRIALS: u64 = 100_000;
    let total: usize = (0..TRIALS).map(|s| icm_predict(&path, &start, &probs, s).unwrap().len()).sum();
    let mean = total as f64 / TRIALS as f64;
    ensure(
        bad == 0 && (mean - 1.75).abs() <= 0.02,
        format!("200 cases, {bad} violate idempotence or monotonicity; ICM path mean {mean:.4} (1.75 +/- 0.02)"),
    )
}

// ---------- criterion 4: phase transition ----------

fn phase_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = seed;
    cfg.netgen = paper_ratio_preset(1.0 / 40.0);
    let pool = SeedPool::Layer(LayerKind::Electric);
    cfg.dataset.count_per_size = 15;
    cfg.dataset.pool = pool;
    cfg.split.train = 1.0;
    cfg.split.val = 0.0;
    cfg.split.test = 0.0;
    cfg.sweep.reps = 10;
    cfg.sweep.pool = pool;
    cfg.model.epochs = 15;
    cfg
}

fn criterion_4() -> Outcome {
    let mut lines = Vec::new();
    let mut hits = 0;
    for seed in 0..SEEDS {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ws = Workspace::new(phase_config(seed), dir.path()).map_err(|e| e.to_string())?;
        let run = || -> icube_cli::Result<_> {
            ws.netgen()?;
            ws.simulate()?;
            ws.pretrain()?;
            ws.train(Ablation::Full)?;
            ws.sweep_phase(None)
        };
        let s = run().map_err(|e| e.to_string())?;
        let ok = s.truth_sharpness >= 3.0 && s.truth_transition.abs_diff(s.predicted_transition) <= 2;
        hits += ok as usize;
        lines.push(format!(
            "seed {seed}: truth {} predicted {} sharpness {:.1}",
            s.truth_transition, s.predicted_transition, s.truth_sharpness
        ));
    }
    ensure(hits >= 4, format!("{hits}/5 seeds within +/-2 with sharpness >= 3 [{}]", lines.join("; ")))
}

// ---------- criteria 5 and 6: desk-scale comparisons ----------

struct DeskRun {
    _dir: tempfile::TempDir,
    ws: Workspace,
    metrics: BTreeMap<String, MetricsFile>,
}

impl DeskRun {
    fn variant(&mut self, ablation: Ablation) -> icube_cli::Result<&MetricsFile> {
        let name = ablation.as_str().to_string();
        if !self.metrics.contains_key(&name) {
            self.ws.train(ablation)?;
            self.ws.predict(ablation)?;
            let m = self.ws.evaluate(&name)?;
            self.metrics.insert(name.clone(), m);
        }
        Ok(&self.metrics[&name])
    }
}

fn desk_run(seed: u64) -> icube_cli::Result<DeskRun> {
    let dir = tempfile::tempdir().map_err(|e| icube_cli::CliError::io("temp dir", e))?;
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = seed;
    let ws = Workspace::new(cfg, dir.path())?;
    ws.netgen()?;
    ws.simulate()?;
    ws.pretrain()?;
    ws.predict_icm()?;
    let icm = ws.evaluate(ICM)?;
    let mut metrics = BTreeMap::new();
    metrics.insert(ICM.to_string(), icm);
    Ok(DeskRun { _dir: dir, ws, metrics })
}

fn auc_of(m: &MetricsFile) -> f64 {
    m.report.overall.auc.unwrap_or(f64::NAN)
}

fn criterion_5(runs: &mut Vec<DeskRun>) -> Outcome {
    let mut hits = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let mut run = desk_run(seed).map_err(|e| e.to_string())?;
        let n = run.ws.load_graph().map_err(|e| e.to_string())?.n();
        let icm_metrics = run.metrics[ICM].clone();
        let full = auc_of(run.variant(Ablation::Full).map_err(|e| e.to_string())?);
        let plain = auc_of(run.variant(Ablation::NoRgcn).map_err(|e| e.to_string())?);
        let icm = auc_of(&icm_metrics);
        let s = &icm_metrics.split;
        let records = s.train + s.val + s.test;
        let ok = full > plain && plain > icm && full - icm >= 0.10 && records >= 1000;
        hits += ok as usize;
        lines.push(format!("seed {seed} (N={n}, {records} records): full {full:.3} no_rgcn {plain:.3} icm {icm:.3}"));
        runs.push(run);
    }
    ensure(hits >= 4, format!("{hits}/5 seeds ordered with margin >= 0.10 [{}]", lines.join("; ")))
}

fn criterion_6(runs: &mut Vec<DeskRun>) -> Outcome {
    if runs.is_empty() {
        for seed in 0..SEEDS {
            runs.push(desk_run(seed).map_err(|e| e.to_string())?);
        }
    }
    let ablations = [Ablation::NoLp, Ablation::NoGp, Ablation::NoIe, Ablation::NoRgcn];
    let mut wins: BTreeMap<&str, usize> = BTreeMap::new();
    let mut lines = Vec::new();
    for (seed, run) in runs.iter_mut().enumerate() {
        let full = run.variant(Ablation::Full).map_err(|e| e.to_string())?.report.overall.f1;
        let mut parts = vec![format!("full {full:.3}")];
        for &ab in &ablations {
            let f1 = run.variant(ab).map_err(|e| e.to_string())?.report.overall.f1;
            *wins.entry(ab.as_str()).or_default() += (full >= f1) as usize;
            parts.push(format!("{} {f1:.3}", ab.as_str()));
        }
        lines.push(format!("seed {seed}: {}", parts.join(" ")));
    }
    let summary = wins.iter().map(|(k, v)| format!("{k} {v}/5")).collect::<Vec<_>>().join(", ");
    ensure(
        ablations.iter().all(|ab| wins.get(ab.as_str()).copied().unwrap_or(0) >= 3),
        format!("full F1 >= ablation in: {summary} [{}]", lines.join("; ")),
    )
}

// ---------- criterion 7: dataset construction ----------

fn criterion_7() -> Outcome {
    let mut gen = paper_ratio_preset(1.0 / 58.0);
    gen.seed = 7;
    let g = generate(&gen).map_err(|e| e.to_string())?;
    let records =
        build_dataset(&g, 100, 0..=20, SeedPool::All, &CascadeParams::default(), 7).map_err(|e| e.to_string())?;
    let mut per_size = BTreeMap::new();
    for r in &records {
        *per_size.entry(r.initial_failed.len()).or_insert(0) += 1;
    }
    let s = split(&records, [0.6, 0.2, 0.2], 7).map_err(|e| e.to_string())?;
    let balanced = per_size.len() == 21 && per_size.values().all(|&c| c == 100);
    ensure(
        records.len() == 2100 && balanced && s.sizes() == (1260, 420, 420),
        format!("{} records over {} sizes; split {:?}", records.len(), per_size.len(), s.sizes()),
    )
}

// ---------- criterion 8: reproducibility ----------

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ws = Workspace::new(ExperimentConfig::tiny(), dir.path()).map_err(|e| e.to_string())?;
        ws.run_all(&Ablation::ALL).map_err(|e| e.to_string())?;
        trees.push(files(dir.path()));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let metrics = a.keys().filter(|k| k.contains("metrics-")).count();
    let checkpoints = a.keys().filter(|k| k.starts_with("checkpoints")).count();
    ensure(
        a.len() == b.len() && differing.is_empty() && metrics > 0 && checkpoints > 0,
        format!("{} artifacts ({metrics} metrics, {checkpoints} checkpoints) compared; differing {differing:?}", a.len()),
    )
}

// ---------- driver ----------

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut desk_runs: Vec<DeskRun> = Vec::new();
    let limits: [Option<u64>; 8] = [Some(30), Some(60), None, Some(600), Some(900), None, None, None];
    let names = [
        "formula oracles",
        "gradient suite",
        "cascade oracle properties",
        "phase transition",
        "desk-scale AUC ordering",
        "ablation F1",
        "dataset construction",
        "reproducibility",
    ];
    let mut passed = 0;
    let mut ran = 0;
    for id in 1..=8usize {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(&mut desk_runs),
            6 => criterion_6(&mut desk_runs),
            7 => criterion_7(),
            _ => criterion_8(),
        }))
        .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(p))));
        let elapsed = t0.elapsed();
        let result = match (result, limits[id - 1]) {
            (Ok(d), Some(limit)) if elapsed > Duration::from_secs(limit) => {
                Err(format!("{d}; runtime {:.1}s exceeds {limit}s", elapsed.as_secs_f64()))
            }
            (r, _) => r,
        };
        let (tag, detail) = match result {
            Ok(d) => {
                passed += 1;
                ("PASS", d)
            }
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id} {tag} ({:.1}s) {}: {detail}", elapsed.as_secs_f64(), names[id - 1]);
    }
    println!("acceptance: {passed}/{ran} criteria passed");
}
