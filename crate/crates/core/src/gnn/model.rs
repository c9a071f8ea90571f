use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{gat_layer, gt_layer, sage_layer, GatParams, GtParams, SageParams};
use super::{Activation, AttentionDump, GraphIndex, LayerKind, ModelConfig};
use crate::autodiff::{BatchNormMode, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Result of recording a forward pass on a tape.
pub struct ForwardPass {
    /// `n x 1` logits.
    pub logits: Var,
    /// Tape handles of the parameters, in the order of [`NodeModel::params`].
    pub params: Vec<Var>,
    /// Batch-norm running statistics after this pass.
    pub bn_stats: Vec<RunningStats>,
    /// Coefficients of the last attention layer, `edges x heads`.
    pub attention: Option<Var>,
}

/// A trainable per-node binary classifier.
pub trait NodeModel: Clone {
    fn describe(&self) -> String;
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];
    fn threshold(&self) -> f64;
    fn forward(&self, tape: &mut Tape, features: &Tensor, index: &GraphIndex, training: bool) -> Result<ForwardPass>;
    fn set_bn_stats(&mut self, stats: Vec<RunningStats>);

    /// Evaluation-mode probabilities.
    fn probabilities(&self, features: &Tensor, index: &GraphIndex) -> Result<(Vec<f64>, Option<Tensor>)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, features, index, false)?;
        let probs = tape.value(pass.logits).data().iter().map(|&z| crate::autodiff::sigmoid(z)).collect();
        Ok((probs, pass.attention.map(|a| tape.value(a).clone())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub attention: Option<AttentionDump>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    bn_stats: Vec<RunningStats>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Parameter names and shapes for one configuration, in storage order.
fn layout(config: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let mut out = Vec::new();
    for (i, l) in config.layers.iter().enumerate() {
        let p = |s: &str| format!("layer{i}.{s}");
        let (d_in, d_out, h) = (l.in_dim, l.out_dim, l.heads);
        match l.kind {
            LayerKind::Sage => {
                out.push((p("weight"), 2 * d_in, d_out, Init::Xavier));
                out.push((p("bias"), 1, d_out, Init::Zero));
            }
            LayerKind::Gat => {
                out.push((p("weight"), d_in, d_out, Init::Xavier));
                out.push((p("att_src"), d_out, h, Init::Xavier));
                out.push((p("att_dst"), d_out, h, Init::Xavier));
                out.push((p("bias"), 1, d_out, Init::Zero));
            }
            LayerKind::Gt => {
                for w in ["w_q", "w_k", "w_v"] {
                    out.push((p(w), d_in, d_out, Init::Xavier));
                }
                out.push((p("w_o"), d_out, d_out, Init::Xavier));
                out.push((p("b_o"), 1, d_out, Init::Zero));
                out.push((p("w_r"), d_in, d_out, Init::Xavier));
            }
        }
        if l.use_batchnorm {
            out.push((p("bn.gamma"), 1, d_out, Init::One));
            out.push((p("bn.beta"), 1, d_out, Init::Zero));
        }
    }
    let last = config.layers.last().map_or(0, |l| l.out_dim);
    out.push(("head.weight".into(), last, 1, Init::Xavier));
    out.push(("head.bias".into(), 1, 1, Init::Zero));
    out
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Zero,
    One,
}

impl GnnModel {
    /// Fresh model with Xavier-uniform weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, r, c, init) in layout(&config) {
            names.push(name);
            params.push(match init {
                Init::Xavier => xavier(&mut rng, r, c),
                Init::Zero => Tensor::zeros(r, c),
                Init::One => Tensor::filled(r, c, 1.0),
            });
        }
        let bn_stats = config
            .layers
            .iter()
            .filter(|l| l.use_batchnorm)
            .map(|l| RunningStats::new(l.out_dim))
            .collect();
        Ok(GnnModel {
            config,
            names,
            params,
            bn_stats,
        })
    }

    /// Rebuilds a model from stored tensors, checking every shape against the config.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>, bn_stats: Vec<RunningStats>) -> Result<Self> {
        config.validate()?;
        let spec = layout(&config);
        if spec.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for a model with {}",
                params.len(),
                spec.len()
            )));
        }
        for ((name, r, c, _), t) in spec.iter().zip(&params) {
            if t.shape() != (*r, *c) {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected ({r}, {c})",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("{name}: non-finite values")));
            }
        }
        let bn_dims: Vec<usize> = config
            .layers
            .iter()
            .filter(|l| l.use_batchnorm)
            .map(|l| l.out_dim)
            .collect();
        if bn_dims.len() != bn_stats.len()
            || bn_dims
                .iter()
                .zip(&bn_stats)
                .any(|(&d, s)| s.mean.len() != d || s.var.len() != d)
        {
            return Err(Error::Checkpoint("batch-norm statistics do not match the layers".into()));
        }
        Ok(GnnModel {
            names: spec.into_iter().map(|s| s.0).collect(),
            config,
            params,
            bn_stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn bn_stats(&self) -> &[RunningStats] {
        &self.bn_stats
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|t| t.data().len()).sum()
    }

    pub fn set_threshold(&mut self, threshold: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::invalid("threshold", "must lie in [0, 1]"));
        }
        self.config.threshold = threshold;
        Ok(())
    }

    /// Evaluation-mode probabilities for every node plus the last attention layer's
    /// coefficients (GAT or GT).
    pub fn predict(&self, graph: &SimilarityGraph) -> Result<Prediction> {
        let index = GraphIndex::new(graph);
        self.predict_with(graph.features(), &index)
    }

    pub fn predict_with(&self, features: &Tensor, index: &GraphIndex) -> Result<Prediction> {
        let (probabilities, attention) = self.probabilities(features, index)?;
        let attention = attention.map(|weights| AttentionDump {
            source: index.att_src.to_vec(),
            target: index.att_tgt.to_vec(),
            weights,
        });
        Ok(Prediction {
            probabilities,
            attention,
        })
    }
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Elu => tape.elu(x, 1.0),
        Activation::None => x,
    }
}

fn check_finite(tape: &Tape, v: Var, layer: usize) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NumericInstability {
            layer,
            detail: "non-finite activations".into(),
        })
    }
}

impl NodeModel for GnnModel {
    fn describe(&self) -> String {
        let l = &self.config.layers[0];
        format!(
            "{} x{} hidden={} heads={}",
            l.kind.as_str(),
            self.config.layers.len(),
            l.out_dim,
            l.heads
        )
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn threshold(&self) -> f64 {
        self.config.threshold
    }

    fn set_bn_stats(&mut self, stats: Vec<RunningStats>) {
        self.bn_stats = stats;
    }

    fn forward(&self, tape: &mut Tape, features: &Tensor, index: &GraphIndex, training: bool) -> Result<ForwardPass> {
        let first = &self.config.layers[0];
        if features.cols() != first.in_dim {
            return Err(Error::shape(
                "forward",
                format!("{} feature columns, first layer expects {}", features.cols(), first.in_dim),
            ));
        }
        let vars: Vec<Var> = self.params.iter().map(|t| tape.param(t.clone())).collect();
        let mut next = vars.iter().copied();
        let mut take = || next.next().expect("layout");
        let mut bn_stats = self.bn_stats.clone();
        let mut bn_slot = 0;
        let mut attention = None;
        let mut h = tape.constant(features.clone());

        for (i, l) in self.config.layers.iter().enumerate() {
            let z = match l.kind {
                LayerKind::Sage => {
                    let p = SageParams {
                        weight: take(),
                        bias: take(),
                    };
                    sage_layer(tape, h, index, &p)?
                }
                LayerKind::Gat => {
                    let p = GatParams {
                        weight: take(),
                        att_src: take(),
                        att_dst: take(),
                        bias: take(),
                        heads: l.heads,
                    };
                    let (z, a) = gat_layer(tape, h, index, &p)?;
                    attention = Some(a);
                    z
                }
                LayerKind::Gt => {
                    let p = GtParams {
                        w_q: take(),
                        w_k: take(),
                        w_v: take(),
                        w_o: take(),
                        b_o: take(),
                        w_r: take(),
                        heads: l.heads,
                    };
                    let (z, a) = gt_layer(tape, h, index, &p)?;
                    attention = Some(a);
                    z
                }
            };
            check_finite(tape, z, i)?;
            let z = if l.use_batchnorm {
                let (gamma, beta) = (take(), take());
                let mode = if training {
                    BatchNormMode::Train {
                        momentum: BN_MOMENTUM,
                    }
                } else {
                    BatchNormMode::Eval
                };
                let out = tape.batchnorm_1d(z, gamma, beta, BN_EPS, mode, &mut bn_stats[bn_slot])?;
                bn_slot += 1;
                check_finite(tape, out, i)?;
                out
            } else {
                z
            };
            h = activate(tape, z, l.activation);
        }
        let (w, b) = (take(), take());
        let z = tape.matmul(h, w)?;
        let logits = tape.add_row(z, b)?;
        check_finite(tape, logits, self.config.layers.len())?;
        Ok(ForwardPass {
            logits,
            params: vars,
            bn_stats,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::LayerConfig;

    fn ring(n: usize, d: usize) -> SimilarityGraph {
        let edges: Vec<_> = (0..n).map(|v| (v, (v + 1) % n, 1.0)).collect();
        let feats = (0..n * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        SimilarityGraph::from_edges(
            (0..n).map(|i| i.to_string()).collect(),
            Tensor::from_vec(n, d, feats).unwrap(),
            (0..n).map(|i| (i % 3 == 0) as u8).collect(),
            1,
            &edges,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_predicts_half() {
        for kind in [LayerKind::Sage, LayerKind::Gat, LayerKind::Gt] {
            let cfg = ModelConfig::standard(kind, 3, 4, 2, 2, 0);
            let mut m = GnnModel::new(cfg).unwrap();
            m.params_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
            let p = m.predict(&ring(6, 3)).unwrap();
            assert!(p.probabilities.iter().all(|&x| x == 0.5));
            assert_eq!(p.attention.is_some(), kind != LayerKind::Sage);
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = ModelConfig::standard(LayerKind::Gt, 3, 8, 2, 2, 42);
        assert_eq!(GnnModel::new(cfg.clone()).unwrap(), GnnModel::new(cfg.clone()).unwrap());
        let other = GnnModel::new(ModelConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(GnnModel::new(ModelConfig::standard(LayerKind::Gt, 3, 8, 2, 2, 42)).unwrap(), other);
    }

    #[test]
    fn feature_width_mismatch_errors() {
        let m = GnnModel::new(ModelConfig::standard(LayerKind::Sage, 5, 4, 1, 1, 0)).unwrap();
        assert!(matches!(m.predict(&ring(4, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn nan_weights_report_layer() {
        let cfg = ModelConfig {
            layers: vec![
                LayerConfig {
                    kind: LayerKind::Sage,
                    in_dim: 3,
                    out_dim: 4,
                    heads: 1,
                    activation: Activation::Relu,
                    use_batchnorm: false,
                };
                1
            ],
            threshold: 0.5,
            seed: 0,
        };
        let mut m = GnnModel::new(cfg).unwrap();
        m.params_mut()[0].data_mut()[0] = f64::NAN;
        match m.predict(&ring(4, 3)) {
            Err(Error::NumericInstability { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let m = GnnModel::new(ModelConfig::standard(LayerKind::Gat, 3, 4, 2, 2, 7)).unwrap();
        let g = ring(6, 3);
        let idx = GraphIndex::new(&g);
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, g.features(), &idx, true).unwrap();
        assert_eq!(pass.bn_stats.len(), 2);
        assert_ne!(pass.bn_stats[0], RunningStats::new(4));
        assert_eq!(pass.params.len(), m.params().len());
    }
}
