//! GraphSAGE, GAT and graph-transformer layers for transductive node classification.

mod checkpoint;
mod layers;
mod model;

use std::io::Write;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layers::{gat_layer, gt_layer, sage_layer, GatParams, GtParams, SageParams};
pub use model::{ForwardPass, GnnModel, NodeModel, Prediction};
pub(crate) use model::{BN_EPS, BN_MOMENTUM};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Sage,
    Gat,
    Gt,
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sage" | "graphsage" => Ok(LayerKind::Sage),
            "gat" => Ok(LayerKind::Gat),
            "gt" | "transformer" => Ok(LayerKind::Gt),
            other => Err(Error::invalid("arch", format!("unknown architecture {other:?}"))),
        }
    }
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Sage => "sage",
            LayerKind::Gat => "gat",
            LayerKind::Gt => "gt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub activation: Activation,
    pub use_batchnorm: bool,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.heads == 0 {
            return Err(Error::invalid("layer", "dimensions and heads must be positive"));
        }
        if self.kind != LayerKind::Sage && !self.out_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                "layer",
                format!("out_dim {} not divisible by {} heads", self.out_dim, self.heads),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: Vec<LayerConfig>,
    pub threshold: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// `depth` layers of one kind with `hidden` units, batch norm and ReLU.
    pub fn standard(kind: LayerKind, in_dim: usize, hidden: usize, depth: usize, heads: usize, seed: u64) -> Self {
        let layers = (0..depth)
            .map(|i| LayerConfig {
                kind,
                in_dim: if i == 0 { in_dim } else { hidden },
                out_dim: hidden,
                heads: if kind == LayerKind::Sage { 1 } else { heads },
                activation: Activation::Relu,
                use_batchnorm: true,
            })
            .collect();
        ModelConfig {
            layers,
            threshold: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model", "at least one layer is required"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            if i > 0 && self.layers[i - 1].out_dim != l.in_dim {
                return Err(Error::invalid(
                    "model",
                    format!(
                        "layer {i} expects {} inputs, previous layer gives {}",
                        l.in_dim,
                        self.layers[i - 1].out_dim
                    ),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Edge index lists for message passing, grouped by target node.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    n: usize,
    /// Neighbour edges `source -> target`, no self-loops.
    pub(crate) nbr_src: Rc<[usize]>,
    pub(crate) nbr_tgt: Rc<[usize]>,
    /// `1 / degree`, or 0 for isolated nodes.
    pub(crate) inv_deg: Rc<[f64]>,
    /// Attention edges: each node's neighbours plus itself, sources ascending.
    pub(crate) att_src: Rc<[usize]>,
    pub(crate) att_tgt: Rc<[usize]>,
}

impl GraphIndex {
    pub fn new(graph: &SimilarityGraph) -> Self {
        let n = graph.n();
        let (mut nbr_src, mut nbr_tgt) = (Vec::new(), Vec::new());
        let (mut att_src, mut att_tgt) = (Vec::new(), Vec::new());
        let mut inv_deg = Vec::with_capacity(n);
        for v in 0..n {
            let nb = graph.neighbors(v);
            inv_deg.push(if nb.is_empty() { 0.0 } else { 1.0 / nb.len() as f64 });
            let mut self_done = false;
            for &u in nb {
                nbr_src.push(u);
                nbr_tgt.push(v);
                if !self_done && u > v {
                    att_src.push(v);
                    att_tgt.push(v);
                    self_done = true;
                }
                att_src.push(u);
                att_tgt.push(v);
            }
            if !self_done {
                att_src.push(v);
                att_tgt.push(v);
            }
        }
        GraphIndex {
            n,
            nbr_src: nbr_src.into(),
            nbr_tgt: nbr_tgt.into(),
            inv_deg: inv_deg.into(),
            att_src: att_src.into(),
            att_tgt: att_tgt.into(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn attention_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.att_src.iter().copied().zip(self.att_tgt.iter().copied())
    }
}

/// Attention coefficients of one graph-transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// `edges x heads`
    pub weights: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub source: usize,
    pub target: usize,
    pub head: usize,
    pub weight: f64,
}

impl AttentionDump {
    pub fn heads(&self) -> usize {
        self.weights.cols()
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = AttentionEntry> + '_ {
        (0..self.len()).flat_map(move |e| {
            (0..self.heads()).map(move |h| AttentionEntry {
                source: self.source[e],
                target: self.target[e],
                head: h,
                weight: self.weights.get(e, h),
            })
        })
    }

    /// Head-averaged weight per edge.
    pub fn mean_weights(&self) -> Vec<f64> {
        let h = self.heads() as f64;
        (0..self.len())
            .map(|e| self.weights.row(e).iter().sum::<f64>() / h)
            .collect()
    }

    /// Sum of incoming weights per `(target, head)`, for every target present.
    pub fn target_sums(&self, n: usize) -> Vec<Vec<f64>> {
        let mut sums = vec![vec![0.0; self.heads()]; n];
        for e in 0..self.len() {
            for (h, s) in sums[self.target[e]].iter_mut().enumerate() {
                *s += self.weights.get(e, h);
            }
        }
        sums
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "source,target,head,weight")?;
        for e in self.entries() {
            writeln!(w, "{},{},{},{}", e.source, e.target, e.head, e.weight)?;
        }
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<AttentionDump> {
        let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let err = |r: String| Error::Parse {
                file: "attention.csv".into(),
                line: i + 1,
                reason: r,
            };
            let f: Vec<&str> = line.split(',').collect();
            let [s, t, h, w] = f[..] else {
                return Err(err("expected source,target,head,weight".into()));
            };
            let us = |x: &str| x.parse::<usize>().map_err(|e| err(e.to_string()));
            rows.push((us(s)?, us(t)?, us(h)?, w.parse::<f64>().map_err(|e| err(e.to_string()))?));
        }
        let heads = rows.iter().map(|r| r.2 + 1).max().unwrap_or(1);
        if !rows.len().is_multiple_of(heads) {
            return Err(Error::invalid("attention", "rows do not cover every head"));
        }
        let edges = rows.len() / heads;
        let mut weights = Tensor::zeros(edges, heads);
        let (mut source, mut target) = (Vec::with_capacity(edges), Vec::with_capacity(edges));
        for (e, chunk) in rows.chunks(heads).enumerate() {
            source.push(chunk[0].0);
            target.push(chunk[0].1);
            for (h, r) in chunk.iter().enumerate() {
                if r.0 != chunk[0].0 || r.1 != chunk[0].1 || r.2 != h {
                    return Err(Error::invalid("attention", format!("edge {e} rows out of order")));
                }
                weights.set(e, h, r.3);
            }
        }
        Ok(AttentionDump {
            source,
            target,
            weights,
        })
    }
}
