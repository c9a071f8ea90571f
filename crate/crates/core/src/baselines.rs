//! Non-graph baselines over the same node features and masks.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, BatchNormMode, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gnn::{ForwardPass, GraphIndex, NodeModel};
use crate::graph::{SimilarityGraph, Split};
use crate::train::{train_model, LossConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    LogReg,
    KnnClf,
    Mlp,
    /// Always predicts the training majority class.
    Majority,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::LogReg, BaselineKind::KnnClf, BaselineKind::Mlp, BaselineKind::Majority];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::LogReg => "logreg",
            BaselineKind::KnnClf => "knn",
            BaselineKind::Mlp => "mlp",
            BaselineKind::Majority => "majority",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logreg" | "lr" => Ok(BaselineKind::LogReg),
            "knn" | "knnclf" => Ok(BaselineKind::KnnClf),
            "mlp" => Ok(BaselineKind::Mlp),
            "majority" => Ok(BaselineKind::Majority),
            other => Err(Error::invalid("baseline", format!("unknown baseline {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Neighbours for the KNN classifier.
    pub k: usize,
    /// Hidden widths of the MLP.
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Early-stopping patience (MLP only).
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> Self {
        let (lr, epochs, weight_decay) = match kind {
            BaselineKind::LogReg => (0.1, 1000, 0.0),
            _ => (1e-3, 500, 5e-4),
        };
        BaselineConfig {
            kind,
            k: 5,
            hidden: vec![64, 32],
            lr,
            epochs,
            weight_decay,
            patience: 30,
            seed: 0,
            loss: LossConfig::bce(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BaselineKind::KnnClf if self.k == 0 => Err(Error::invalid("k", "must be positive")),
            BaselineKind::LogReg | BaselineKind::Mlp if !(self.lr > 0.0) || self.epochs == 0 => {
                Err(Error::invalid("baseline", "lr and epochs must be positive"))
            }
            BaselineKind::Mlp if self.hidden.contains(&0) => Err(Error::invalid("hidden", "widths must be positive")),
            _ => Ok(()),
        }
    }
}

fn check_inputs(features: &Tensor, labels: &[u8], splits: &[Split]) -> Result<Vec<usize>> {
    let n = features.rows();
    if labels.len() != n || splits.len() != n {
        return Err(Error::shape(
            "fit_predict",
            format!("{n} rows, {} labels, {} split entries", labels.len(), splits.len()),
        ));
    }
    let train: Vec<usize> = (0..n).filter(|&i| splits[i] == Split::Train).collect();
    for class in [0u8, 1] {
        if !train.iter().any(|&i| labels[i] == class) {
            return Err(Error::invalid("baseline", format!("training mask has no nodes of class {class}")));
        }
    }
    Ok(train)
}

/// Fits on the train mask and returns a probability for every node.
pub fn fit_predict(cfg: &BaselineConfig, features: &Tensor, labels: &[u8], splits: &[Split]) -> Result<Vec<f64>> {
    cfg.validate()?;
    let train = check_inputs(features, labels, splits)?;
    match cfg.kind {
        BaselineKind::LogReg => {
            let model = LogisticRegression::fit(features, labels, &train, cfg.lr, cfg.epochs, cfg.weight_decay)?;
            Ok(model.predict(features))
        }
        BaselineKind::KnnClf => knn_scores(features, labels, &train, cfg.k),
        BaselineKind::Mlp => {
            let graph = edgeless_graph(features, labels, splits)?;
            let model = Mlp::new(features.cols(), &cfg.hidden, cfg.seed)?;
            let tc = TrainConfig {
                epochs: cfg.epochs,
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                patience: cfg.patience,
                seed: cfg.seed,
                threshold: 0.5,
            };
            let out = train_model(&model, &graph, &cfg.loss, &tc)?;
            let (p, _) = out.model.probabilities(features, &GraphIndex::new(&graph))?;
            Ok(p)
        }
        BaselineKind::Majority => {
            let pos = train.iter().filter(|&&i| labels[i] == 1).count();
            let p = if 2 * pos > train.len() { 1.0 } else { 0.0 };
            Ok(vec![p; features.rows()])
        }
    }
}

pub fn fit_predict_graph(cfg: &BaselineConfig, graph: &SimilarityGraph) -> Result<Vec<f64>> {
    let splits = graph
        .splits()
        .ok_or_else(|| Error::invalid("graph", "graph has no train/val/test masks"))?;
    fit_predict(cfg, graph.features(), graph.labels(), splits)
}

fn edgeless_graph(features: &Tensor, labels: &[u8], splits: &[Split]) -> Result<SimilarityGraph> {
    let n = features.rows();
    let mut g = SimilarityGraph::from_edges((0..n).map(|i| i.to_string()).collect(), features.clone(), labels.to_vec(), 1, &[])?;
    g.set_splits(splits.to_vec(), 0)?;
    Ok(g)
}

/// Logistic regression on train-standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LogisticRegression {
    pub fn zeros(dim: usize) -> Self {
        LogisticRegression {
            weights: vec![0.0; dim],
            bias: 0.0,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Full-batch gradient descent on mean BCE, from zero weights.
    pub fn fit(features: &Tensor, labels: &[u8], train: &[usize], lr: f64, epochs: usize, l2: f64) -> Result<Self> {
        let d = features.cols();
        let m = train.len() as f64;
        let mut model = LogisticRegression::zeros(d);
        for j in 0..d {
            let col: Vec<f64> = train.iter().map(|&i| features.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / m;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
            model.mean[j] = mean;
            model.scale[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        let x: Vec<Vec<f64>> = train.iter().map(|&i| model.standardise(features.row(i))).collect();
        let y: Vec<f64> = train.iter().map(|&i| f64::from(labels[i])).collect();
        let mut gw = vec![0.0; d];
        for _ in 0..epochs {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (xi, &yi) in x.iter().zip(&y) {
                let r = sigmoid(model.logit_std(xi)) - yi;
                gb += r;
                for (g, &v) in gw.iter_mut().zip(xi) {
                    *g += r * v;
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= lr * (g / m + l2 * *w);
            }
            model.bias -= lr * gb / m;
        }
        if model.weights.iter().any(|w| !w.is_finite()) || !model.bias.is_finite() {
            return Err(Error::NumericInstability {
                layer: 0,
                detail: "logistic regression weights diverged".into(),
            });
        }
        Ok(model)
    }

    fn standardise(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    fn logit_std(&self, x: &[f64]) -> f64 {
        self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, features: &Tensor) -> Vec<f64> {
        (0..features.rows())
            .map(|i| sigmoid(self.logit_std(&self.standardise(features.row(i)))))
            .collect()
    }
}

/// Fraction of positive labels among the `k` most cosine-similar training nodes
/// (a training node never counts itself). Ties go to the lower index.
pub fn knn_scores(features: &Tensor, labels: &[u8], train: &[usize], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > train.len() {
        return Err(Error::invalid(
            "k",
            format!("k={k} but the training mask has {} nodes", train.len()),
        ));
    }
    let n = features.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| features.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::invalid("features", format!("row {i} is a zero vector")));
    }
    let is_train = {
        let mut t = vec![false; n];
        train.iter().for_each(|&i| t[i] = true);
        t
    };
    let mut out = Vec::with_capacity(n);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for q in 0..n {
        let kk = if is_train[q] { k.min(train.len() - 1) } else { k };
        if kk == 0 {
            return Err(Error::invalid("k", "training mask too small for leave-one-out scoring"));
        }
        best.clear();
        for &t in train {
            if t == q {
                continue;
            }
            let dot: f64 = features.row(q).iter().zip(features.row(t)).map(|(a, b)| a * b).sum();
            let s = dot / (norms[q] * norms[t]);
            if best.len() < kk || s > best[best.len() - 1].0 {
                let pos = best.partition_point(|&(b, _)| b >= s);
                best.insert(pos, (s, t));
                best.truncate(kk);
            }
        }
        let positives = best.iter().filter(|&&(_, t)| labels[t] == 1).count();
        out.push(positives as f64 / kk as f64);
    }
    Ok(out)
}

/// Feed-forward network: linear, batch norm and ReLU per hidden layer, then a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<Tensor>,
    bn_stats: Vec<RunningStats>,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if in_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("hidden", "widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![in_dim];
        widths.extend_from_slice(hidden);
        let mut params = Vec::new();
        let mut xavier = |r: usize, c: usize| {
            let a = (6.0 / (r + c) as f64).sqrt();
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-a..a)).collect()).expect("shape")
        };
        for w in widths.windows(2) {
            params.push(xavier(w[0], w[1]));
            params.push(Tensor::zeros(1, w[1]));
            params.push(Tensor::filled(1, w[1], 1.0));
            params.push(Tensor::zeros(1, w[1]));
        }
        params.push(xavier(*widths.last().expect("non-empty"), 1));
        params.push(Tensor::zeros(1, 1));
        let bn_stats = hidden.iter().map(|&h| RunningStats::new(h)).collect();
        Ok(Mlp { widths, params, bn_stats })
    }
}

impl NodeModel for Mlp {
    fn describe(&self) -> String {
        format!("mlp {:?}", &self.widths[1..])
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn threshold(&self) -> f64 {
        0.5
    }

    fn set_bn_stats(&mut self, stats: Vec<RunningStats>) {
        self.bn_stats = stats;
    }

    fn forward(&self, tape: &mut Tape, features: &Tensor, _index: &GraphIndex, training: bool) -> Result<ForwardPass> {
        if features.cols() != self.widths[0] {
            return Err(Error::shape(
                "mlp",
                format!("{} feature columns, expected {}", features.cols(), self.widths[0]),
            ));
        }
        let vars: Vec<Var> = self.params.iter().map(|t| tape.param(t.clone())).collect();
        let mut bn_stats = self.bn_stats.clone();
        let mode = if training {
            BatchNormMode::Train { momentum: crate::gnn::BN_MOMENTUM }
        } else {
            BatchNormMode::Eval
        };
        let mut h = tape.constant(features.clone());
        for (l, chunk) in vars[..vars.len() - 2].chunks(4).enumerate() {
            let z = tape.matmul(h, chunk[0])?;
            let z = tape.add_row(z, chunk[1])?;
            let z = tape.batchnorm_1d(z, chunk[2], chunk[3], crate::gnn::BN_EPS, mode, &mut bn_stats[l])?;
            if !tape.value(z).is_finite() {
                return Err(Error::NumericInstability {
                    layer: l,
                    detail: "non-finite activations".into(),
                });
            }
            h = tape.relu(z);
        }
        let z = tape.matmul(h, vars[vars.len() - 2])?;
        let logits = tape.add_row(z, vars[vars.len() - 1])?;
        Ok(ForwardPass {
            logits,
            params: vars,
            bn_stats,
            attention: None,
        })
    }
}
