//! Scores for predicted cascades: node classification, volume error and the
//! functional metrics (road connectivity, AOI yield, electric power).

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FailedSet, HeteroGraph, LayerKind, RelationKind};

/// Node-level confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// Precision, recall and F1. Both sets empty scores (1, 1, 1); any other
    /// empty denominator scores 0.
    pub fn prf1(&self) -> Prf1 {
        if self.tp + self.fp + self.fn_ == 0 {
            return Prf1 { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf1 { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_universe(set: &FailedSet, universe: usize) -> Result<()> {
    match set.max_id() {
        Some(m) if m >= universe => Err(Error::contract(format!("node {m} outside a universe of {universe}"))),
        _ => Ok(()),
    }
}

pub fn prf1(predicted: &FailedSet, truth: &FailedSet, universe: usize) -> Result<Prf1> {
    check_universe(predicted, universe)?;
    check_universe(truth, universe)?;
    let tp = predicted.iter().filter(|&v| truth.contains(v)).count() as u64;
    let fp = predicted.len() as u64 - tp;
    let fn_ = truth.len() as u64 - tp;
    Ok(Confusion { tp, fp, fn_, tn: universe as u64 - tp - fp - fn_ }.prf1())
}

/// Rank-based ROC AUC (Mann-Whitney U), ties share their mean rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("AUC scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `sqrt(mean((pred - truth)^2))` over per-case failure counts.
pub fn volume_rmse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::contract(format!("{} predictions for {} cases", predicted.len(), truth.len())));
    }
    if predicted.is_empty() {
        return Err(Error::UndefinedMetric("RMSE of no cases".into()));
    }
    let mse = predicted.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / predicted.len() as f64;
    Ok(mse.sqrt())
}

/// `σ(G ∖ F) / σ(G)` where `σ` counts connected node pairs.
pub fn anc(g: &HeteroGraph, failed: &FailedSet) -> Result<f64> {
    let base = g.connectivity(&FailedSet::new());
    if base == 0 {
        return Err(Error::UndefinedMetric("graph has no connected pairs".into()));
    }
    Ok(g.connectivity(failed) as f64 / base as f64)
}

/// [`anc`] of the road layer, with `F` given in coupled-graph ids.
pub fn road_anc(g: &HeteroGraph, failed: &FailedSet) -> Result<f64> {
    let road = g.layer_subgraph(LayerKind::Road);
    anc(&road.graph, &failed.restrict(&road))
}

/// Fraction of AOIs still served: an AOI fails only when more than half of
/// its base stations are in `failed`.
pub fn aoi_yield(g: &HeteroGraph, failed: &FailedSet) -> Result<f64> {
    let aois = g.layer_nodes(LayerKind::Aoi);
    if aois.is_empty() {
        return Err(Error::UndefinedMetric("graph has no AOI nodes".into()));
    }
    let mut served = 0usize;
    for &a in aois {
        let stations = g.neighbors_by(a, RelationKind::ComAoi);
        if stations.is_empty() {
            return Err(Error::contract(format!("AOI {a} has no base station")));
        }
        let down = stations.iter().filter(|&&s| failed.contains(s)).count();
        if 2 * down <= stations.len() {
            served += 1;
        }
    }
    Ok(served as f64 / aois.len() as f64)
}

/// Nominal output of an electric node: 5 for generators (tier 0), 1 otherwise.
pub fn nominal_power(tier: Option<u8>) -> f64 {
    if tier == Some(0) {
        5.0
    } else {
        1.0
    }
}

/// Nominal power of surviving electric nodes still connected, through
/// surviving electric lines, to a surviving generator.
pub fn total_power(g: &HeteroGraph, failed: &FailedSet) -> f64 {
    let mut reached = vec![false; g.n()];
    let mut queue: VecDeque<usize> = g
        .layer_nodes(LayerKind::Electric)
        .iter()
        .copied()
        .filter(|&v| g.node(v).is_anchor() && !failed.contains(v))
        .collect();
    for &v in &queue {
        reached[v] = true;
    }
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors_by(u, RelationKind::ElecElec) {
            if !reached[v] && !failed.contains(v) {
                reached[v] = true;
                queue.push_back(v);
            }
        }
    }
    g.layer_nodes(LayerKind::Electric).iter().filter(|&&v| reached[v]).map(|&v| nominal_power(g.node(v).tier)).sum()
}

/// One evaluated case: scores for every node and the thresholded prediction.
#[derive(Debug, Clone)]
pub struct ScoredCase {
    pub initial: FailedSet,
    pub truth: FailedSet,
    pub scores: Vec<f64>,
    pub predicted: FailedSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    /// `None` when the scored nodes hold a single class.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub nodes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: usize,
    #[serde(flatten)]
    pub overall: ClassScores,
    pub volume_rmse: f64,
    pub per_layer: BTreeMap<LayerKind, ClassScores>,
}

#[derive(Default)]
struct Pool {
    confusion: Confusion,
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl Pool {
    fn finish(self) -> Result<ClassScores> {
        let auc = match auc(&self.scores, &self.labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let p = self.confusion.prf1();
        Ok(ClassScores { auc, precision: p.precision, recall: p.recall, f1: p.f1, nodes: self.scores.len() as u64 })
    }
}

/// Pools node-level scores over all cases. Initial failures are excluded:
/// they are known inputs, not predictions. Volume RMSE compares `|D'|`.
pub fn evaluate(g: &HeteroGraph, cases: &[ScoredCase]) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::UndefinedMetric("no cases to evaluate".into()));
    }
    let mut overall = Pool::default();
    let mut layers: BTreeMap<LayerKind, Pool> = BTreeMap::new();
    for c in cases {
        if c.scores.len() != g.n() {
            return Err(Error::contract(format!("{} scores for {} nodes", c.scores.len(), g.n())));
        }
        check_universe(&c.truth, g.n())?;
        check_universe(&c.predicted, g.n())?;
        for v in (0..g.n()).filter(|&v| !c.initial.contains(v)) {
            let (p, t) = (c.predicted.contains(v), c.truth.contains(v));
            for pool in [&mut overall, layers.entry(g.layer(v)).or_default()] {
                pool.confusion.add(p, t);
                pool.scores.push(c.scores[v]);
                pool.labels.push(t);
            }
        }
    }
    let pred: Vec<f64> = cases.iter().map(|c| c.predicted.len() as f64).collect();
    let truth: Vec<f64> = cases.iter().map(|c| c.truth.len() as f64).collect();
    Ok(MetricsReport {
        cases: cases.len(),
        overall: overall.finish()?,
        volume_rmse: volume_rmse(&pred, &truth)?,
        per_layer: layers.into_iter().map(|(l, p)| Ok((l, p.finish()?))).collect::<Result<_>>()?,
    })
}

/// One row of the initial-size versus final-size table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub case_id: u64,
    pub initial: usize,
    pub truth: usize,
    pub predicted: usize,
}

/// Joins truth and predictions by case id, in truth order.
pub fn heatmap_export(truth: &[(u64, &FailedSet, &FailedSet)], predicted: &[(u64, &FailedSet)]) -> Result<Vec<HeatmapRow>> {
    let by_id: BTreeMap<u64, &FailedSet> = predicted.iter().map(|&(id, f)| (id, f)).collect();
    if by_id.len() != predicted.len() {
        return Err(Error::contract("duplicate case id among predictions"));
    }
    if truth.len() != predicted.len() {
        return Err(Error::contract(format!("{} truth cases but {} predictions", truth.len(), predicted.len())));
    }
    truth
        .iter()
        .map(|&(id, initial, fin)| {
            let p = by_id.get(&id).ok_or_else(|| Error::contract(format!("no prediction for case {id}")))?;
            Ok(HeatmapRow { case_id: id, initial: initial.len(), truth: fin.len(), predicted: p.len() })
        })
        .collect()
}

/// Counts of `(initial size, predicted size / bin_width)` cells.
pub fn heatmap_bins(rows: &[HeatmapRow], bin_width: usize) -> BTreeMap<(usize, usize), usize> {
    let w = bin_width.max(1);
    let mut out = BTreeMap::new();
    for r in rows {
        *out.entry((r.initial, r.predicted / w)).or_insert(0) += 1;
    }
    out
}
