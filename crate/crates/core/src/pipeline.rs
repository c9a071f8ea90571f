//! In-memory composition of the stages: labeling, representation, graph, split, models.

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_predict_graph, BaselineConfig};
use crate::ehr::{label_cohort, represent_cohort, CodeKind, CohortExclusion, EmbeddingStore, HfCodeSet, PatientRecord, RawPatient, Representation};
use crate::error::{Error, Result};
use crate::gnn::{GnnModel, LayerKind, ModelConfig};
use crate::graph::{build_knn_graph, select_k_by_distortion, split_nodes, KSelection, SimilarityGraph, Split, SplitSpec};
use crate::metrics::{evaluate, MetricReport};
use crate::train::{mean_std, train_seeds, LossConfig, SeedResult, TrainConfig};

/// How the KNN neighbourhood size is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KChoice {
    Fixed(usize),
    /// Elbow of the k-means distortion curve over `min..=max`.
    Select { min: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: LayerKind,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            kind: LayerKind::Gt,
            hidden: 64,
            layers: 2,
            heads: 1,
        }
    }
}

impl ArchSpec {
    pub fn model_config(&self, in_dim: usize, seed: u64, threshold: f64) -> ModelConfig {
        let mut cfg = ModelConfig::standard(self.kind, in_dim, self.hidden, self.layers, self.heads, seed);
        cfg.threshold = threshold;
        cfg
    }

    pub fn build(&self, in_dim: usize, seed: u64, threshold: f64) -> Result<GnnModel> {
        GnnModel::new(self.model_config(in_dim, seed, threshold))
    }
}

/// Everything derived from a raw cohort up to the split graph.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub records: Vec<PatientRecord>,
    pub excluded: Vec<CohortExclusion>,
    pub representation: Representation,
    pub k_selection: Option<KSelection>,
    pub graph: SimilarityGraph,
}

pub fn prepare(
    patients: &[RawPatient],
    store: &EmbeddingStore,
    hf: &HfCodeSet,
    kinds: &[CodeKind],
    k: &KChoice,
    split: &SplitSpec,
) -> Result<Prepared> {
    if kinds.is_empty() {
        return Err(Error::invalid("kinds", "at least one code kind is required"));
    }
    let cohort = label_cohort(patients, hf);
    let representation = represent_cohort(&cohort.records, store, kinds);
    if representation.vectors.is_empty() {
        return Err(Error::invalid("cohort", "no representable patients"));
    }
    let (k_value, k_selection) = match *k {
        KChoice::Fixed(k) => (k, None),
        KChoice::Select { min, max } => {
            let rows: Vec<&[f64]> = representation.vectors.iter().map(|v| v.features.as_slice()).collect();
            let sel = select_k_by_distortion(&crate::autodiff::Tensor::from_rows(&rows)?, min..=max, split.seed)?;
            if let Some(w) = &sel.warning {
                log::warn!("{w}");
            }
            (sel.chosen, Some(sel))
        }
    };
    let graph = build_knn_graph(&representation.vectors, k_value)?;
    let graph = split_nodes(&graph, split)?;
    Ok(Prepared {
        records: cohort.records,
        excluded: cohort.excluded,
        representation,
        k_selection,
        graph,
    })
}

/// Mean and standard deviation of test metrics over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub f1: (f64, f64),
    pub auroc: (f64, f64),
    pub auprc: (f64, f64),
    pub accuracy: (f64, f64),
    pub balanced_accuracy: (f64, f64),
    pub precision: (f64, f64),
    pub recall: (f64, f64),
}

pub fn summarise(results: &[SeedResult]) -> SeedSummary {
    let pick = |f: fn(&MetricReport) -> f64| mean_std(&results.iter().map(|r| f(&r.test)).collect::<Vec<_>>());
    SeedSummary {
        f1: pick(|m| m.f1),
        auroc: pick(|m| m.auroc),
        auprc: pick(|m| m.auprc),
        accuracy: pick(|m| m.accuracy),
        balanced_accuracy: pick(|m| m.balanced_accuracy),
        precision: pick(|m| m.precision),
        recall: pick(|m| m.recall),
    }
}

/// Trains the architecture for three seeds and returns per-seed results and models.
pub fn train_gnn(
    graph: &SimilarityGraph,
    arch: &ArchSpec,
    loss: &LossConfig,
    train: &TrainConfig,
) -> Result<Vec<(SeedResult, GnnModel)>> {
    let d = graph.dim();
    train_seeds(|seed| arch.build(d, seed, train.threshold), graph, loss, train)
}

/// Test-mask report of a baseline.
pub fn run_baseline(graph: &SimilarityGraph, cfg: &BaselineConfig) -> Result<(Vec<f64>, MetricReport)> {
    let probs = fit_predict_graph(cfg, graph)?;
    let report = evaluate(&probs, graph.labels(), &graph.mask(Split::Test)?, 0.5)?;
    Ok((probs, report))
}
