mod common;

use std::collections::HashMap;

use patient_gnn::autodiff::{RunningStats, Tensor};
use patient_gnn::gnn::{Activation, GnnModel, LayerConfig, LayerKind, ModelConfig};
use patient_gnn::graph::SimilarityGraph;
use proptest::prelude::*;

use common::{permutation, random_graph};

fn single_layer(kind: LayerKind, in_dim: usize, out: usize, heads: usize, seed: u64) -> GnnModel {
    let cfg = ModelConfig {
        layers: vec![LayerConfig {
            kind,
            in_dim,
            out_dim: out,
            heads,
            activation: Activation::None,
            use_batchnorm: false,
        }],
        threshold: 0.5,
        seed,
    };
    let mut m = GnnModel::new(cfg).unwrap();
    // biases start at zero; give them values so the oracle sees them
    let names = m.param_names().to_vec();
    for (name, t) in names.iter().zip(patient_gnn::gnn::NodeModel::params_mut(&mut m)) {
        if name.ends_with("bias") || name.ends_with("b_o") {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = 0.1 * (i as f64 + 1.0) - 0.2;
            }
        }
    }
    m
}

fn param<'a>(m: &'a GnnModel, name: &str) -> &'a Tensor {
    let i = m.param_names().iter().position(|n| n == name).unwrap();
    &patient_gnn::gnn::NodeModel::params(m)[i]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Neighbourhood plus self, ascending.
fn attention_set(g: &SimilarityGraph, v: usize) -> Vec<usize> {
    let mut s: Vec<usize> = g.neighbors(v).to_vec();
    s.push(v);
    s.sort_unstable();
    s
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Dense recomputation of a single attention layer followed by the linear head.
/// Returns probabilities and `(source, target, head) -> weight`.
fn dense_oracle(kind: LayerKind, m: &GnnModel, g: &SimilarityGraph, heads: usize) -> (Vec<f64>, HashMap<(usize, usize, usize), f64>) {
    let x = g.features();
    let n = g.n();
    let proj = |w: &Tensor| x.matmul(w).unwrap();
    let out_dim = param(m, "head.weight").rows();
    let d = out_dim / heads;
    let mut att = HashMap::new();
    let mut h_out = Tensor::zeros(n, out_dim);
    match kind {
        LayerKind::Gat => {
            let wh = proj(param(m, "layer0.weight"));
            let (a_s, a_d) = (param(m, "layer0.att_src"), param(m, "layer0.att_dst"));
            let bias = param(m, "layer0.bias");
            for v in 0..n {
                let nb = attention_set(g, v);
                for h in 0..heads {
                    let sl = h * d..(h + 1) * d;
                    let score = |u: usize| {
                        let s: f64 = sl.clone().map(|i| a_s.get(i, h) * wh.get(u, i) + a_d.get(i, h) * wh.get(v, i)).sum();
                        if s > 0.0 { s } else { 0.2 * s }
                    };
                    let alpha = softmax(&nb.iter().map(|&u| score(u)).collect::<Vec<_>>());
                    for (&u, &a) in nb.iter().zip(&alpha) {
                        att.insert((u, v, h), a);
                        for i in sl.clone() {
                            h_out.row_mut(v)[i] += a * wh.get(u, i);
                        }
                    }
                }
                for i in 0..out_dim {
                    h_out.row_mut(v)[i] += bias.get(0, i);
                }
            }
        }
        LayerKind::Gt => {
            let q = proj(param(m, "layer0.w_q"));
            let k = proj(param(m, "layer0.w_k"));
            let val = proj(param(m, "layer0.w_v"));
            let res = proj(param(m, "layer0.w_r"));
            let (w_o, b_o) = (param(m, "layer0.w_o"), param(m, "layer0.b_o"));
            let mut agg = Tensor::zeros(n, out_dim);
            for v in 0..n {
                let nb = attention_set(g, v);
                for h in 0..heads {
                    let sl = h * d..(h + 1) * d;
                    let scores: Vec<f64> = nb
                        .iter()
                        .map(|&u| dot(&q.row(v)[sl.clone()], &k.row(u)[sl.clone()]) / (d as f64).sqrt())
                        .collect();
                    for (&u, &a) in nb.iter().zip(&softmax(&scores)) {
                        att.insert((u, v, h), a);
                        for i in sl.clone() {
                            agg.row_mut(v)[i] += a * val.get(u, i);
                        }
                    }
                }
            }
            let o = agg.matmul(w_o).unwrap();
            for v in 0..n {
                for i in 0..out_dim {
                    h_out.set(v, i, o.get(v, i) + res.get(v, i) + b_o.get(0, i));
                }
            }
        }
        LayerKind::Sage => unreachable!(),
    }
    let (hw, hb) = (param(m, "head.weight"), param(m, "head.bias"));
    let probs = (0..n).map(|v| sigmoid(dot(h_out.row(v), hw.data()) + hb.item())).collect();
    (probs, att)
}

#[test]
fn gat_and_gt_match_dense_oracle() {
    for (seed, heads) in [(1u64, 1usize), (2, 2), (3, 3)] {
        let g = random_graph(seed, 11, 4, 0.3);
        for kind in [LayerKind::Gat, LayerKind::Gt] {
            let m = single_layer(kind, 4, 6, heads, seed);
            let pred = m.predict(&g).unwrap();
            let (probs, att) = dense_oracle(kind, &m, &g, heads);
            for (a, b) in pred.probabilities.iter().zip(&probs) {
                assert!((a - b).abs() < 1e-12, "{kind:?}: {a} vs {b}");
            }
            let dump = pred.attention.unwrap();
            assert_eq!(dump.len() * dump.heads(), att.len());
            for e in dump.entries() {
                let want = att[&(e.source, e.target, e.head)];
                assert!((e.weight - want).abs() < 1e-12, "{kind:?} attention {e:?} vs {want}");
            }
        }
    }
}

#[test]
fn sage_matches_dense_mean_aggregation() {
    let g = random_graph(5, 10, 3, 0.3);
    let m = single_layer(LayerKind::Sage, 3, 5, 1, 9);
    let w = param(&m, "layer0.weight");
    let b = param(&m, "layer0.bias");
    let (hw, hb) = (param(&m, "head.weight"), param(&m, "head.bias"));
    let pred = m.predict(&g).unwrap();
    assert!(pred.attention.is_none());
    for v in 0..g.n() {
        let nb = g.neighbors(v);
        let mut cat = g.features().row(v).to_vec();
        for j in 0..3 {
            let mean = if nb.is_empty() { 0.0 } else { nb.iter().map(|&u| g.features().get(u, j)).sum::<f64>() / nb.len() as f64 };
            cat.push(mean);
        }
        let h: Vec<f64> = (0..5).map(|o| (0..6).map(|i| cat[i] * w.get(i, o)).sum::<f64>() + b.get(0, o)).collect();
        let p = sigmoid(dot(&h, hw.data()) + hb.item());
        assert!((pred.probabilities[v] - p).abs() < 1e-12);
    }
}

fn arch() -> impl Strategy<Value = (LayerKind, usize)> {
    prop_oneof![
        Just((LayerKind::Sage, 1)),
        Just((LayerKind::Gat, 1)),
        Just((LayerKind::Gat, 2)),
        Just((LayerKind::Gt, 1)),
        Just((LayerKind::Gt, 2)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Relabelling nodes permutes outputs and attention the same way.
    #[test]
    fn permutation_equivariance(seed in 0u64..10_000, n in 6usize..16, (kind, heads) in arch(), p in 0.1f64..0.5) {
        let g = random_graph(seed, n, 3, p);
        let mut m = GnnModel::new(ModelConfig::standard(kind, 3, 4, 2, heads, seed)).unwrap();
        // non-trivial running statistics for the eval-mode batch norm
        patient_gnn::gnn::NodeModel::set_bn_stats(&mut m, vec![
            RunningStats { mean: vec![0.1, -0.2, 0.3, 0.0], var: vec![0.5, 1.5, 2.0, 1.0] },
            RunningStats { mean: vec![0.0, 0.2, -0.1, 0.4], var: vec![1.0, 0.7, 1.2, 0.9] },
        ]);
        let perm = permutation(seed ^ 0xabc, n);
        let gp = g.permuted(&perm).unwrap();
        let a = m.predict(&g).unwrap();
        let b = m.predict(&gp).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            prop_assert!((b.probabilities[new] - a.probabilities[old]).abs() < 1e-12);
        }
        match (a.attention, b.attention) {
            (None, None) => {}
            (Some(da), Some(db)) => {
                let map: HashMap<(usize, usize, usize), f64> =
                    da.entries().map(|e| ((e.source, e.target, e.head), e.weight)).collect();
                prop_assert_eq!(map.len(), db.len() * db.heads());
                for e in db.entries() {
                    let w = map[&(perm[e.source], perm[e.target], e.head)];
                    prop_assert!((e.weight - w).abs() < 1e-12);
                }
            }
            _ => prop_assert!(false, "attention presence differs"),
        }
    }

    /// Attention over each target's neighbourhood and self sums to one per head.
    #[test]
    fn attention_is_normalised(seed in 0u64..10_000, n in 6usize..20, heads in 1usize..4, gat in any::<bool>()) {
        let g = random_graph(seed, n, 3, 0.25);
        let kind = if gat { LayerKind::Gat } else { LayerKind::Gt };
        let m = GnnModel::new(ModelConfig::standard(kind, 3, 6, 2, heads, seed)).unwrap();
        let dump = m.predict(&g).unwrap().attention.unwrap();
        for (v, sums) in dump.target_sums(n).iter().enumerate() {
            prop_assert_eq!(sums.len(), heads);
            for s in sums {
                prop_assert!((s - 1.0).abs() < 1e-9, "node {} sum {}", v, s);
            }
        }
        prop_assert!(dump.entries().all(|e| e.weight > 0.0 && e.weight <= 1.0));
    }

    /// Probabilities lie strictly inside (0, 1) and do not depend on node ids.
    #[test]
    fn outputs_are_probabilities(seed in 0u64..10_000, (kind, heads) in arch()) {
        let g = random_graph(seed, 12, 3, 0.3);
        let m = GnnModel::new(ModelConfig::standard(kind, 3, 4, 2, heads, seed)).unwrap();
        let p = m.predict(&g).unwrap().probabilities;
        prop_assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
