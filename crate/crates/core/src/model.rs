//! The cascade predictor: two pre-trained encoders, per-layer fusion,
//! relational propagation and two decoders feeding a relational output layer.
//!
//! Every node gets a coupled-graph encoding and an encoding from its own
//! layer's subgraph. Their concatenation is propagated over the typed
//! relations, decoded twice, and mapped to one failure logit per node.
//! Initial failures are clamped to probability 1.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Checkpoint, ParamStore, SparseAdj, Tape, Tensor, Var};
use crate::cascade::CascadeRecord;
use crate::error::{Error, Result};
use crate::gnn::{gcn_adjacency, relation_adjacency, Activation, Dense, GcnLayer, RelationAdj, RgcnLayer};
use crate::graph::{FailedSet, HeteroGraph};
use crate::pretrain::{Pretrained, Scope};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct I3Config {
    pub hidden: usize,
    pub use_lp: bool,
    pub use_gp: bool,
    pub use_ie: bool,
    /// Relational propagation and output; plain GCN layers when false.
    pub use_rgcn: bool,
    pub epochs: usize,
    /// Cases per optimiser step.
    pub batch: usize,
    pub lr: f64,
    pub threshold: f64,
}

impl Default for I3Config {
    fn default() -> Self {
        Self {
            hidden: 64,
            use_lp: true,
            use_gp: true,
            use_ie: true,
            use_rgcn: true,
            epochs: 30,
            batch: 8,
            lr: 5e-3,
            threshold: 0.5,
        }
    }
}

impl I3Config {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch == 0 {
            return Err(Error::config("hidden width and batch size must be positive"));
        }
        if !(self.use_lp || self.use_gp || self.use_ie) {
            return Err(Error::config("at least one pre-trained embedding must be enabled"));
        }
        check_threshold(self.threshold)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::Full => {}
            Ablation::NoLp => self.use_lp = false,
            Ablation::NoGp => self.use_gp = false,
            Ablation::NoIe => self.use_ie = false,
            Ablation::NoRgcn => self.use_rgcn = false,
        }
        self
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("threshold {t} outside [0, 1]")));
    }
    Ok(())
}

/// Model variants that drop one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoLp,
    NoGp,
    NoIe,
    NoRgcn,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoLp, Ablation::NoGp, Ablation::NoIe, Ablation::NoRgcn];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoLp => "no_lp",
            Ablation::NoGp => "no_gp",
            Ablation::NoIe => "no_ie",
            Ablation::NoRgcn => "no_rgcn",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation `{s}`; expected one of full, no_lp, no_gp, no_ie, no_rgcn")))
    }
}

/// Case-dependent embeddings of every scope, in the order of `Pretrained::scopes`.
#[derive(Debug, Clone)]
pub struct CaseFeatures {
    pub initial: FailedSet,
    pub gp: Vec<Tensor>,
    pub ie: Vec<Tensor>,
}

pub fn case_features(pre: &Pretrained, d: &FailedSet) -> Result<CaseFeatures> {
    let sets = pre.embeddings(d)?;
    Ok(CaseFeatures {
        initial: d.clone(),
        gp: sets.iter().map(|s| s.gp.clone()).collect(),
        ie: sets.iter().map(|s| s.ie.clone()).collect(),
    })
}

/// Graph structure shared by every forward pass.
#[derive(Debug, Clone)]
pub struct GraphContext {
    scopes: Vec<Scope>,
    /// Propagation matrix per scope.
    adj: Vec<Arc<SparseAdj>>,
    lp: Vec<Tensor>,
    relations: RelationAdj,
    coupled: Arc<SparseAdj>,
    /// Row of node `v` in the layer encodings stacked in scope order.
    stacked_row: Arc<Vec<usize>>,
    n: usize,
}

impl GraphContext {
    pub fn new(g: &HeteroGraph, pre: &Pretrained) -> Result<Self> {
        if pre.scopes.first().map(|s| s.scope()) != Some(Scope::Coupled) {
            return Err(Error::contract("pre-training results lack the coupled scope"));
        }
        if pre.scopes[0].view.n() != g.n() {
            return Err(Error::contract("pre-training results belong to a different graph"));
        }
        let mut stacked_row = vec![usize::MAX; g.n()];
        let mut offset = 0;
        for s in &pre.scopes[1..] {
            for (local, &global) in s.view.global_ids.iter().enumerate() {
                stacked_row[global] = offset + local;
            }
            offset += s.view.n();
        }
        if let Some(v) = stacked_row.iter().position(|&r| r == usize::MAX) {
            return Err(Error::contract(format!("node {v} is missing from its layer scope")));
        }
        Ok(Self {
            scopes: pre.scopes.iter().map(|s| s.scope()).collect(),
            adj: pre.scopes.iter().map(|s| gcn_adjacency(&s.view.graph)).collect(),
            lp: pre.scopes.iter().map(|s| s.lp.clone()).collect(),
            relations: relation_adjacency(g),
            coupled: gcn_adjacency(g),
            stacked_row: Arc::new(stacked_row),
            n: g.n(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Row `n` is `Concat(coupled[n], layer_parts[layer(n)][local(n)])`, with the
/// layer parts stacked in scope order.
pub fn fuse(tape: &mut Tape, coupled: Var, layer_parts: &[Var], stacked_row: &Arc<Vec<usize>>) -> Result<Var> {
    let stacked = tape.concat_rows(layer_parts)?;
    let single = tape.gather_rows(stacked, Arc::clone(stacked_row))?;
    tape.concat_cols(&[coupled, single])
}

#[derive(Debug, Clone)]
enum Propagation {
    Relational(RgcnLayer),
    Plain(GcnLayer),
}

impl Propagation {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, ctx: &GraphContext, x: Var) -> Result<Var> {
        match self {
            Propagation::Relational(l) => l.forward(tape, store, &ctx.relations, x),
            Propagation::Plain(l) => l.forward(tape, store, &ctx.coupled, x),
        }
    }
}

/// Training history: mean loss per epoch plus full-pass losses before and after.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub initial_loss: f64,
    pub epoch_loss: Vec<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct I3Model {
    pub cfg: I3Config,
    pub store: ParamStore,
    encoders: Vec<[GcnLayer; 2]>,
    propagation: Vec<Propagation>,
    dec_cp: Dense,
    dec_sg: Dense,
    output: Propagation,
    /// Divides each scope's `E_gp` so its training-set RMS is 1.
    pub gp_scale: Vec<f64>,
}

/// Node failure probabilities for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: u64,
    pub probabilities: Vec<f64>,
    pub failed: FailedSet,
}

impl I3Model {
    pub fn new(cfg: &I3Config, g: &HeteroGraph, pre: &Pretrained, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::rng(seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let mut encoders = Vec::new();
        for s in &pre.scopes {
            let d_in = input_width(cfg, pre, s.scope());
            let name = s.scope().as_str();
            encoders.push([
                GcnLayer::new(&mut store, &format!("i3.enc.{name}.0"), d_in, h, Activation::Relu, &mut rng)?,
                GcnLayer::new(&mut store, &format!("i3.enc.{name}.1"), h, h, Activation::Relu, &mut rng)?,
            ]);
        }
        let rels = g.relations_present();
        let mut layer = |store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, act: Activation| -> Result<Propagation> {
            Ok(if cfg.use_rgcn {
                Propagation::Relational(RgcnLayer::new(store, name, &rels, d_in, d_out, act, true, &mut rng)?)
            } else {
                Propagation::Plain(GcnLayer::new(store, name, d_in, d_out, act, &mut rng)?)
            })
        };
        let propagation = vec![
            layer(&mut store, "i3.prop.0", 2 * h, h, Activation::Relu)?,
            layer(&mut store, "i3.prop.1", h, h, Activation::Relu)?,
        ];
        let output = layer(&mut store, "i3.out", 2 * h, 1, Activation::Identity)?;
        let mut rng = rng::rng(rng::substream(seed, "decoders"));
        let dec_cp = Dense::new(&mut store, "i3.dec.coupled", h, h, Activation::Relu, &mut rng)?;
        let dec_sg = Dense::new(&mut store, "i3.dec.single", h, h, Activation::Relu, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), store, encoders, propagation, dec_cp, dec_sg, output, gp_scale: vec![1.0; pre.scopes.len()] })
    }

    fn scope_input(&self, ctx: &GraphContext, feats: &CaseFeatures, k: usize) -> Result<Tensor> {
        let mut parts: Vec<Tensor> = Vec::with_capacity(3);
        if self.cfg.use_lp {
            parts.push(ctx.lp[k].clone());
        }
        if self.cfg.use_gp {
            parts.push(feats.gp[k].map(|x| x / self.gp_scale[k]));
        }
        if self.cfg.use_ie {
            parts.push(feats.ie[k].clone());
        }
        Tensor::hcat(&parts.iter().collect::<Vec<_>>())
    }

    /// Coupled and per-layer encodings, each row-aligned with its scope's ids.
    pub fn encode(&self, tape: &mut Tape, ctx: &GraphContext, feats: &CaseFeatures) -> Result<Vec<Var>> {
        if feats.gp.len() != ctx.scopes.len() || feats.ie.len() != ctx.scopes.len() {
            return Err(Error::contract("case features do not match the scopes"));
        }
        let mut out = Vec::with_capacity(ctx.scopes.len());
        for (k, enc) in self.encoders.iter().enumerate() {
            let input = self.scope_input(ctx, feats, k)?;
            let expected = self.store.value(enc[0].w).rows();
            if input.cols() != expected {
                return Err(Error::contract(format!(
                    "scope {} has {} input columns, encoder expects {expected}",
                    ctx.scopes[k],
                    input.cols()
                )));
            }
            let x = tape.constant(input);
            let h = enc[0].forward(tape, &self.store, &ctx.adj[k], x)?;
            out.push(enc[1].forward(tape, &self.store, &ctx.adj[k], h)?);
        }
        Ok(out)
    }

    /// Per-node failure logits (`N × 1`).
    pub fn logits(&self, tape: &mut Tape, ctx: &GraphContext, feats: &CaseFeatures) -> Result<Var> {
        let enc = self.encode(tape, ctx, feats)?;
        let mut h = fuse(tape, enc[0], &enc[1..], &ctx.stacked_row)?;
        for p in &self.propagation {
            h = p.forward(tape, &self.store, ctx, h)?;
        }
        let a = self.dec_cp.forward(tape, &self.store, h)?;
        let b = self.dec_sg.forward(tape, &self.store, h)?;
        let d = tape.concat_cols(&[a, b])?;
        self.output.forward(tape, &self.store, ctx, d)
    }

    /// Sigmoid probabilities with initial failures clamped to 1.
    pub fn probabilities(&self, ctx: &GraphContext, feats: &CaseFeatures) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, ctx, feats)?;
        let mut p: Vec<f64> = tape.value(z).data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        for v in feats.initial.iter() {
            p[v] = 1.0;
        }
        Ok(p)
    }

    pub fn infer_cascade(&self, ctx: &GraphContext, feats: &CaseFeatures, case_id: u64, threshold: f64) -> Result<Prediction> {
        check_threshold(threshold)?;
        let probabilities = self.probabilities(ctx, feats)?;
        let failed = threshold_failures(&probabilities, &feats.initial, threshold);
        Ok(Prediction { case_id, probabilities, failed })
    }

    /// Class-weighted cross-entropy of one case, normalised by its total weight.
    pub fn case_loss(&self, tape: &mut Tape, ctx: &GraphContext, feats: &CaseFeatures, final_failed: &FailedSet) -> Result<Var> {
        let z = self.logits(tape, ctx, feats)?;
        let (t, w) = loss_targets(ctx.n, &feats.initial, final_failed);
        let total = w.sum();
        let l = tape.bce_with_logits(z, Arc::new(t), Arc::new(w))?;
        Ok(if total > 0.0 { tape.scalar_mul(l, 1.0 / total) } else { l })
    }

    fn mean_loss(&self, ctx: &GraphContext, feats: &[CaseFeatures], labels: &[&FailedSet]) -> Result<f64> {
        let mut sum = 0.0;
        for (f, y) in feats.iter().zip(labels) {
            let mut tape = Tape::new();
            let l = self.case_loss(&mut tape, ctx, f, y)?;
            sum += tape.value(l).item();
        }
        Ok(sum / feats.len() as f64)
    }

    /// Sets `gp_scale` from the RMS of each scope's `E_gp` over `feats`.
    pub fn fit_gp_scale(&mut self, feats: &[CaseFeatures]) {
        for k in 0..self.gp_scale.len() {
            let (mut sq, mut n) = (0.0, 0usize);
            for f in feats {
                sq += f.gp[k].sq_norm();
                n += f.gp[k].len();
            }
            let rms = if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
            self.gp_scale[k] = if rms > 1e-12 { rms } else { 1.0 };
        }
    }

    /// Adam over shuffled minibatches of training cases.
    pub fn train(&mut self, ctx: &GraphContext, feats: &[CaseFeatures], records: &[CascadeRecord], seed: u64) -> Result<TrainingCurve> {
        if feats.is_empty() || feats.len() != records.len() {
            return Err(Error::config("training needs a non-empty split with features for every record"));
        }
        self.fit_gp_scale(feats);
        let labels: Vec<&FailedSet> = records.iter().map(|r| &r.final_failed).collect();
        let mut curve = TrainingCurve { initial_loss: self.mean_loss(ctx, feats, &labels)?, ..Default::default() };
        let mut rng = rng::rng(rng::substream(seed, "i3-train"));
        let mut adam = Adam::new(self.cfg.lr);
        let mut order: Vec<usize> = (0..feats.len()).collect();
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_sum = 0.0;
            for chunk in order.chunks(self.cfg.batch) {
                let mut tape = Tape::new();
                let mut losses = Vec::with_capacity(chunk.len());
                for &k in chunk {
                    losses.push(self.case_loss(&mut tape, ctx, &feats[k], labels[k])?);
                }
                let all = tape.concat_rows(&losses)?;
                let sum = tape.sum(all);
                let loss = tape.scalar_mul(sum, 1.0 / chunk.len() as f64);
                epoch_sum += tape.value(sum).item();
                self.store.zero_grad();
                tape.backward(loss)?.accumulate(&tape, &mut self.store);
                adam.step(&mut self.store)?;
            }
            curve.epoch_loss.push(epoch_sum / feats.len() as f64);
        }
        curve.final_loss = self.mean_loss(ctx, feats, &labels)?;
        Ok(curve)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.insert_store("i3", &self.store);
        ck.tensors.insert("i3.gp_scale".into(), Tensor::column(self.gp_scale.clone()));
        ck.meta.insert("i3.config".into(), serde_json::to_string(&self.cfg).expect("config serialises"));
        ck
    }

    /// Rebuilds the model from `ck`. The architecture comes from the stored
    /// config and the shapes of `g` and `pre`.
    pub fn from_checkpoint(ck: &Checkpoint, g: &HeteroGraph, pre: &Pretrained) -> Result<Self> {
        let text = ck.meta.get("i3.config").ok_or_else(|| Error::Validation("checkpoint lacks the model config".into()))?;
        let cfg: I3Config = serde_json::from_str(text).map_err(|e| Error::Validation(format!("model config: {e}")))?;
        let mut m = Self::new(&cfg, g, pre, 0)?;
        ck.load_store("i3", &mut m.store)?;
        let scale = ck.tensors.get("i3.gp_scale").ok_or_else(|| Error::Validation("checkpoint lacks i3.gp_scale".into()))?;
        if scale.len() != m.gp_scale.len() {
            return Err(Error::Validation("i3.gp_scale does not match the scopes".into()));
        }
        m.gp_scale = scale.data().to_vec();
        Ok(m)
    }
}

/// Encoder input width for a scope under `cfg`.
pub fn input_width(cfg: &I3Config, pre: &Pretrained, scope: Scope) -> usize {
    let Some(s) = pre.scope(scope) else { return 0 };
    let mut w = 0;
    if cfg.use_lp {
        w += s.lp.cols();
    }
    if cfg.use_gp {
        w += pre.cfg.gp.levels() - 1;
    }
    if cfg.use_ie {
        w += pre.cfg.ie.dim;
    }
    w
}

/// `{n : p_n ≥ threshold} ∪ D`.
pub fn threshold_failures(probabilities: &[f64], initial: &FailedSet, threshold: f64) -> FailedSet {
    probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(v, _)| v)
        .chain(initial.iter())
        .collect()
}

/// Targets are `D'` membership. Initial failures get weight 0 (they are
/// clamped); failed nodes get `#normal / #failed` among the rest.
pub fn loss_targets(n: usize, initial: &FailedSet, final_failed: &FailedSet) -> (Tensor, Tensor) {
    let pos = final_failed.iter().filter(|&v| !initial.contains(v)).count();
    let neg = n - initial.len() - pos;
    let wp = if pos > 0 && neg > 0 { neg as f64 / pos as f64 } else { 1.0 };
    let mut t = vec![0.0; n];
    let mut w = vec![1.0; n];
    for v in final_failed.iter() {
        t[v] = 1.0;
        w[v] = wp;
    }
    for v in initial.iter() {
        w[v] = 0.0;
    }
    (Tensor::column(t), Tensor::column(w))
}

/// Weighted mean binary cross-entropy on probabilities, `Σ w ℓ / Σ w`.
pub fn weighted_bce(probabilities: &[f64], targets: &[f64], weights: &[f64]) -> f64 {
    let eps = 1e-15;
    let (mut num, mut den) = (0.0, 0.0);
    for ((&p, &t), &w) in probabilities.iter().zip(targets).zip(weights) {
        let p = p.clamp(eps, 1.0 - eps);
        num -= w * (t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        den += w;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}
