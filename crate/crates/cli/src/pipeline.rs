//! The experiment stages. Each stage reads the artifacts of the ones before
//! it from the output directory and writes its own next to them.

use std::fs;
use std::path::{Path, PathBuf};

use icube_core::autodiff::Checkpoint;
use icube_core::cascade::{
    build_dataset, calibrate_icm, icm_scores, read_records, transition_index, transition_sharpness, write_records,
    CascadeRecord, SeedPool,
};
use icube_core::metrics::{evaluate, heatmap_export, road_anc, aoi_yield, total_power, MetricsReport, ScoredCase};
use icube_core::model::{case_features, threshold_failures, Ablation, CaseFeatures, GraphContext, I3Model, Prediction};
use icube_core::netgen::generate;
use icube_core::pretrain::{run_all_pretraining, Pretrained};
use icube_core::{rng, FailedSet, HeteroGraph, LayerKind};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::split::{split, Split};

/// Name under which the independent cascade baseline is stored.
pub const ICM: &str = "icm";

/// A config bound to an output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Contents of `metrics-{name}.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub split: SplitSizes,
    pub report: MetricsReport,
}

/// One row of `phase.csv`. Survivability columns describe the true cascades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub size: usize,
    pub truth_fraction: f64,
    pub predicted_fraction: f64,
    pub road_anc: f64,
    pub aoi_yield: f64,
    pub power_fraction: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub config_hash: String,
    pub seed: u64,
    pub pool: SeedPool,
    pub truth_transition: usize,
    pub predicted_transition: usize,
    pub truth_sharpness: f64,
    pub rows: Vec<PhaseRow>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    write(path, ck.to_json()?)
}

fn read(path: &Path, command: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(CliError::MissingArtifact { artifact: path.to_path_buf(), command });
    }
    fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self { cfg, out: out.into(), hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// Seed of a named stage.
    pub fn stream(&self, name: &str) -> u64 {
        rng::substream(self.cfg.seed, name)
    }

    pub fn graph_path(&self) -> PathBuf {
        self.out.join(&self.cfg.paths.graph)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out.join(&self.cfg.paths.dataset)
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.out.join(&self.cfg.paths.checkpoints).join(format!("{name}.json"))
    }

    pub fn output_path(&self, file: &str) -> PathBuf {
        self.out.join(&self.cfg.paths.outputs).join(file)
    }

    fn check_hash(&self, found: Option<&str>, artifact: &Path) -> Result<()> {
        match found {
            Some(h) if h != self.hash => Err(CliError::Validation(format!(
                "{} was produced under config {h}, not {}",
                artifact.display(),
                self.hash
            ))),
            _ => Ok(()),
        }
    }

    pub fn netgen(&self) -> Result<HeteroGraph> {
        let mut gen = self.cfg.netgen.clone();
        gen.seed = self.stream("netgen");
        let mut g = generate(&gen)?;
        g.set_meta("config_hash", self.hash.clone().into());
        g.set_meta("seed", self.cfg.seed.into());
        write(&self.graph_path(), g.to_json())?;
        info!("netgen: {} nodes, {} edges", g.n(), g.edges().len());
        Ok(g)
    }

    pub fn load_graph(&self) -> Result<HeteroGraph> {
        let path = self.graph_path();
        let g = HeteroGraph::from_json(&read(&path, "netgen")?)?;
        self.check_hash(g.meta().get("config_hash").and_then(|v| v.as_str()), &path)?;
        Ok(g)
    }

    pub fn simulate(&self) -> Result<Vec<CascadeRecord>> {
        let g = self.load_graph()?;
        let d = &self.cfg.dataset;
        let mut records =
            build_dataset(&g, d.count_per_size, d.min_size..=d.max_size, d.pool, &self.cfg.cascade, self.stream("simulate"))?;
        for r in &mut records {
            r.config_hash = Some(self.hash.clone());
        }
        write(&self.dataset_path(), write_records(&records))?;
        info!("simulate: {} records", records.len());
        Ok(records)
    }

    pub fn load_dataset(&self) -> Result<Vec<CascadeRecord>> {
        let path = self.dataset_path();
        let records = read_records(&read(&path, "simulate")?)?;
        for r in &records {
            self.check_hash(r.config_hash.as_deref(), &path)?;
        }
        Ok(records)
    }

    pub fn split(&self, records: &[CascadeRecord]) -> Result<Split> {
        split(records, self.cfg.split.fractions(), self.stream("split"))
    }

    fn part(records: &[CascadeRecord], idx: &[usize]) -> Vec<CascadeRecord> {
        idx.iter().map(|&i| records[i].clone()).collect()
    }

    /// Pre-trains on the initial failures of the training split only.
    pub fn pretrain(&self) -> Result<Pretrained> {
        let g = self.load_graph()?;
        let records = self.load_dataset()?;
        let s = self.split(&records)?;
        let cases: Vec<FailedSet> = s.train.iter().map(|&i| records[i].initial_failed.clone()).collect();
        let pre = run_all_pretraining(&g, &cases, &self.cfg.pretrain, self.stream("pretrain"))?;
        let mut ck = pre.to_checkpoint();
        ck.meta.insert("config_hash".into(), self.hash.clone());
        save(&ck, &self.checkpoint_path("pretrain"))?;
        info!("pretrain: {} scopes", pre.scopes.len());
        Ok(pre)
    }

    fn load_checkpoint(&self, name: &str, command: &'static str) -> Result<Checkpoint> {
        let path = self.checkpoint_path(name);
        if !path.exists() {
            return Err(CliError::MissingArtifact { artifact: path, command });
        }
        let ck = Checkpoint::load(&path)?;
        self.check_hash(ck.meta.get("config_hash").map(String::as_str), &path)?;
        Ok(ck)
    }

    pub fn load_pretrained(&self, g: &HeteroGraph) -> Result<Pretrained> {
        let ck = self.load_checkpoint("pretrain", "pretrain")?;
        Ok(Pretrained::from_checkpoint(g, &self.cfg.pretrain, &ck)?)
    }

    fn features(pre: &Pretrained, records: &[CascadeRecord]) -> Result<Vec<CaseFeatures>> {
        Ok(records.par_iter().map(|r| case_features(pre, &r.initial_failed)).collect::<icube_core::Result<_>>()?)
    }

    pub fn train(&self, ablation: Ablation) -> Result<I3Model> {
        let g = self.load_graph()?;
        let pre = self.load_pretrained(&g)?;
        let records = self.load_dataset()?;
        let train = Self::part(&records, &self.split(&records)?.train);
        let feats = Self::features(&pre, &train)?;
        let ctx = GraphContext::new(&g, &pre)?;
        let cfg = self.cfg.model.clone().with_ablation(ablation);
        let seed = self.stream(&format!("model-{}", ablation.as_str()));
        let mut model = I3Model::new(&cfg, &g, &pre, seed)?;
        let curve = model.train(&ctx, &feats, &train, seed)?;
        let mut ck = model.to_checkpoint();
        ck.meta.insert("config_hash".into(), self.hash.clone());
        save(&ck, &self.checkpoint_path(&format!("model-{}", ablation.as_str())))?;
        write(&self.output_path(&format!("curve-{}.json", ablation.as_str())), to_json(&curve))?;
        info!("train {}: loss {:.4} -> {:.4}", ablation.as_str(), curve.initial_loss, curve.final_loss);
        Ok(model)
    }

    pub fn load_model(&self, ablation: Ablation, g: &HeteroGraph, pre: &Pretrained) -> Result<I3Model> {
        let ck = self.load_checkpoint(&format!("model-{}", ablation.as_str()), "train")?;
        Ok(I3Model::from_checkpoint(&ck, g, pre)?)
    }

    fn write_predictions(&self, name: &str, preds: &[Prediction]) -> Result<()> {
        let mut text = String::new();
        for p in preds {
            text.push_str(&serde_json::to_string(p).expect("prediction serializes"));
            text.push('\n');
        }
        write(&self.output_path(&format!("predictions-{name}.jsonl")), text)
    }

    /// Predicts every test case with a trained model.
    pub fn predict(&self, ablation: Ablation) -> Result<Vec<Prediction>> {
        let g = self.load_graph()?;
        let pre = self.load_pretrained(&g)?;
        let model = self.load_model(ablation, &g, &pre)?;
        let records = self.load_dataset()?;
        let test = Self::part(&records, &self.split(&records)?.test);
        let ctx = GraphContext::new(&g, &pre)?;
        let threshold = self.cfg.model.threshold;
        let preds = test
            .par_iter()
            .map(|r| {
                let f = case_features(&pre, &r.initial_failed)?;
                model.infer_cascade(&ctx, &f, r.case_id, threshold)
            })
            .collect::<icube_core::Result<Vec<_>>>()?;
        self.write_predictions(ablation.as_str(), &preds)?;
        Ok(preds)
    }

    /// Independent cascade baseline: probabilities fitted on the training
    /// split, scores from Monte Carlo failure frequencies.
    pub fn predict_icm(&self) -> Result<Vec<Prediction>> {
        let g = self.load_graph()?;
        let records = self.load_dataset()?;
        let s = self.split(&records)?;
        let probs = calibrate_icm(&g, &Self::part(&records, &s.train));
        let seed = self.stream(ICM);
        let threshold = self.cfg.model.threshold;
        let preds = s
            .test
            .par_iter()
            .map(|&i| {
                let r = &records[i];
                let scores = icm_scores(&g, &r.initial_failed, &probs, self.cfg.baseline.runs, rng::case_stream(seed, r.case_id))?;
                let failed = threshold_failures(&scores, &r.initial_failed, threshold);
                Ok(Prediction { case_id: r.case_id, probabilities: scores, failed })
            })
            .collect::<icube_core::Result<Vec<_>>>()?;
        self.write_predictions(ICM, &preds)?;
        Ok(preds)
    }

    pub fn load_predictions(&self, name: &str) -> Result<Vec<Prediction>> {
        let path = self.output_path(&format!("predictions-{name}.jsonl"));
        read(&path, "predict")?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| CliError::Validation(format!("{}: {e}", path.display()))))
            .collect()
    }

    /// Test records paired with the predictions of `name`, in test order.
    fn joined(&self, name: &str) -> Result<(HeteroGraph, Split, Vec<(CascadeRecord, Prediction)>)> {
        let g = self.load_graph()?;
        let records = self.load_dataset()?;
        let s = self.split(&records)?;
        let mut preds: std::collections::BTreeMap<u64, Prediction> =
            self.load_predictions(name)?.into_iter().map(|p| (p.case_id, p)).collect();
        let pairs = s
            .test
            .iter()
            .map(|&i| {
                let r = records[i].clone();
                let p = preds
                    .remove(&r.case_id)
                    .ok_or_else(|| CliError::Validation(format!("predictions-{name} lacks test case {}", r.case_id)))?;
                Ok((r, p))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((g, s, pairs))
    }

    pub fn evaluate(&self, name: &str) -> Result<MetricsFile> {
        let (g, s, pairs) = self.joined(name)?;
        let cases: Vec<ScoredCase> = pairs
            .into_iter()
            .map(|(r, p)| ScoredCase { initial: r.initial_failed, truth: r.final_failed, scores: p.probabilities, predicted: p.failed })
            .collect();
        let (train, val, test) = s.sizes();
        let file = MetricsFile {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            model: name.to_string(),
            split: SplitSizes { train, val, test },
            report: evaluate(&g, &cases)?,
        };
        write(&self.output_path(&format!("metrics-{name}.json")), to_json(&file))?;
        info!("evaluate {name}: auc {:?} f1 {:.4}", file.report.overall.auc, file.report.overall.f1);
        Ok(file)
    }

    /// Sweeps initial-failure counts, comparing true cascades with the
    /// predictions of the full model on the same initial sets.
    pub fn sweep_phase(&self, layer: Option<LayerKind>) -> Result<PhaseSummary> {
        let g = self.load_graph()?;
        let pre = self.load_pretrained(&g)?;
        let model = self.load_model(Ablation::Full, &g, &pre)?;
        let ctx = GraphContext::new(&g, &pre)?;
        let sw = &self.cfg.sweep;
        let pool = layer.map(SeedPool::Layer).unwrap_or(sw.pool);
        let records = build_dataset(&g, sw.reps, 0..=sw.max_seed_size, pool, &self.cfg.cascade, self.stream("sweep"))?;
        let predicted: Vec<FailedSet> = records
            .par_iter()
            .map(|r| {
                let f = case_features(&pre, &r.initial_failed)?;
                Ok(model.infer_cascade(&ctx, &f, r.case_id, self.cfg.model.threshold)?.failed)
            })
            .collect::<Result<_>>()?;
        let n = g.n() as f64;
        let full_power = total_power(&g, &FailedSet::new());
        let mut rows = Vec::new();
        for size in 0..=sw.max_seed_size {
            let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].initial_failed.len() == size).collect();
            let truth = || idx.iter().map(|&i| &records[i].final_failed);
            let or_one = |r: icube_core::Result<f64>| r.unwrap_or(1.0);
            rows.push(PhaseRow {
                size,
                truth_fraction: mean(truth().map(|f| f.len() as f64 / n)),
                predicted_fraction: mean(idx.iter().map(|&i| predicted[i].len() as f64 / n)),
                road_anc: mean(truth().map(|f| or_one(road_anc(&g, f)))),
                aoi_yield: mean(truth().map(|f| or_one(aoi_yield(&g, f)))),
                power_fraction: mean(truth().map(|f| if full_power > 0.0 { total_power(&g, f) / full_power } else { 1.0 })),
                seed: self.cfg.seed,
                config_hash: self.hash.clone(),
            });
        }
        let truth_curve: Vec<f64> = rows.iter().map(|r| r.truth_fraction).collect();
        let pred_curve: Vec<f64> = rows.iter().map(|r| r.predicted_fraction).collect();
        let summary = PhaseSummary {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            pool,
            truth_transition: transition_index(&truth_curve),
            predicted_transition: transition_index(&pred_curve),
            truth_sharpness: transition_sharpness(&truth_curve),
            rows,
        };
        let mut csv = csv::Writer::from_writer(Vec::new());
        for row in &summary.rows {
            csv.serialize(row).map_err(|e| CliError::Runtime(format!("phase.csv: {e}")))?;
        }
        let bytes = csv.into_inner().map_err(|e| CliError::Runtime(format!("phase.csv: {e}")))?;
        write(&self.output_path("phase.csv"), bytes)?;
        write(&self.output_path("phase.json"), to_json(&summary))?;
        info!("sweep: truth transition {} predicted {}", summary.truth_transition, summary.predicted_transition);
        Ok(summary)
    }

    pub fn export_heatmap(&self, name: &str) -> Result<PathBuf> {
        let (_, _, pairs) = self.joined(name)?;
        let truth: Vec<(u64, &FailedSet, &FailedSet)> =
            pairs.iter().map(|(r, _)| (r.case_id, &r.initial_failed, &r.final_failed)).collect();
        let pred: Vec<(u64, &FailedSet)> = pairs.iter().map(|(_, p)| (p.case_id, &p.failed)).collect();
        let rows = heatmap_export(&truth, &pred)?;
        let mut csv = csv::Writer::from_writer(Vec::new());
        for row in &rows {
            csv.serialize(row).map_err(|e| CliError::Runtime(format!("heatmap: {e}")))?;
        }
        let bytes = csv.into_inner().map_err(|e| CliError::Runtime(format!("heatmap: {e}")))?;
        let path = self.output_path(&format!("heatmap-{name}.csv"));
        write(&path, bytes)?;
        Ok(path)
    }

    /// Every stage in order, for the given model variants.
    pub fn run_all(&self, ablations: &[Ablation]) -> Result<Vec<MetricsFile>> {
        self.netgen()?;
        self.simulate()?;
        self.pretrain()?;
        let mut metrics = Vec::new();
        for &ab in ablations {
            self.train(ab)?;
            self.predict(ab)?;
            metrics.push(self.evaluate(ab.as_str())?);
            self.export_heatmap(ab.as_str())?;
        }
        self.predict_icm()?;
        metrics.push(self.evaluate(ICM)?);
        if ablations.contains(&Ablation::Full) {
            self.sweep_phase(None)?;
        }
        Ok(metrics)
    }
}
