//! Message-passing layers. Each returns the pre-activation node matrix.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::GraphIndex;

pub struct SageParams {
    /// `(2 * in) x out`, applied to `[h_v || mean_{u in N(v)} h_u]`.
    pub weight: Var,
    pub bias: Var,
}

pub struct GatParams {
    pub weight: Var,
    /// `out x heads`; only the rows of each head's slice are used.
    pub att_src: Var,
    pub att_dst: Var,
    pub bias: Var,
    pub heads: usize,
}

pub struct GtParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    /// Residual projection of the layer input.
    pub w_r: Var,
    pub heads: usize,
}

/// `out x heads` indicator: entry `(i, h)` is 1 when feature `i` belongs to head `h`.
fn head_blocks(out: usize, heads: usize) -> Result<(Tensor, Tensor)> {
    if heads == 0 || !out.is_multiple_of(heads) {
        return Err(Error::invalid("heads", format!("{heads} heads do not divide width {out}")));
    }
    let d = out / heads;
    let mut b = Tensor::zeros(out, heads);
    for i in 0..out {
        b.set(i, i / d, 1.0);
    }
    let bt = b.transpose();
    Ok((b, bt))
}

fn check_nodes(tape: &Tape, h: Var, index: &GraphIndex, op: &'static str) -> Result<()> {
    if tape.shape(h).0 != index.n() {
        return Err(Error::shape(
            op,
            format!("{} feature rows for {} nodes", tape.shape(h).0, index.n()),
        ));
    }
    Ok(())
}

/// Mean aggregation over neighbours concatenated with the node's own features.
/// Isolated nodes aggregate a zero vector.
pub fn sage_layer(tape: &mut Tape, h: Var, index: &GraphIndex, p: &SageParams) -> Result<Var> {
    check_nodes(tape, h, index, "sage_layer")?;
    let msgs = tape.row_gather(h, index.nbr_src.clone())?;
    let agg = tape.segment_sum(msgs, index.nbr_tgt.clone(), index.n())?;
    let mean = tape.scale_rows(agg, index.inv_deg.clone())?;
    let cat = tape.concat_cols(h, mean)?;
    let z = tape.matmul(cat, p.weight)?;
    tape.add_row(z, p.bias)
}

/// Additive attention over neighbours and self, softmax per target and head.
/// Returns the output and the `edges x heads` coefficients.
pub fn gat_layer(tape: &mut Tape, h: Var, index: &GraphIndex, p: &GatParams) -> Result<(Var, Var)> {
    check_nodes(tape, h, index, "gat_layer")?;
    let wh = tape.matmul(h, p.weight)?;
    let out = tape.shape(wh).1;
    let (b, bt) = head_blocks(out, p.heads)?;
    let b = tape.constant(b);
    let bt = tape.constant(bt);
    let a_src = tape.mul(p.att_src, b)?;
    let a_dst = tape.mul(p.att_dst, b)?;
    let s_src = tape.matmul(wh, a_src)?;
    let s_dst = tape.matmul(wh, a_dst)?;
    let e_src = tape.row_gather(s_src, index.att_src.clone())?;
    let e_dst = tape.row_gather(s_dst, index.att_tgt.clone())?;
    let logits = tape.add(e_src, e_dst)?;
    let logits = tape.leaky_relu(logits, 0.2);
    let alpha = tape.softmax_by_segment(logits, index.att_tgt.clone(), index.n())?;
    let expanded = tape.matmul(alpha, bt)?;
    let values = tape.row_gather(wh, index.att_src.clone())?;
    let msgs = tape.mul(values, expanded)?;
    let agg = tape.segment_sum(msgs, index.att_tgt.clone(), index.n())?;
    Ok((tape.add_row(agg, p.bias)?, alpha))
}

/// Scaled dot-product attention restricted to graph edges (plus self), with a
/// linear residual from the layer input. Returns the output and the coefficients.
pub fn gt_layer(tape: &mut Tape, h: Var, index: &GraphIndex, p: &GtParams) -> Result<(Var, Var)> {
    check_nodes(tape, h, index, "gt_layer")?;
    let q = tape.matmul(h, p.w_q)?;
    let k = tape.matmul(h, p.w_k)?;
    let v = tape.matmul(h, p.w_v)?;
    let out = tape.shape(q).1;
    let (b, bt) = head_blocks(out, p.heads)?;
    let d_head = (out / p.heads) as f64;
    let b = tape.constant(b);
    let bt = tape.constant(bt);

    let qt = tape.row_gather(q, index.att_tgt.clone())?;
    let ks = tape.row_gather(k, index.att_src.clone())?;
    let prod = tape.mul(qt, ks)?;
    let scores = tape.matmul(prod, b)?;
    let scores = tape.mul_scalar(scores, 1.0 / d_head.sqrt());
    let alpha = tape.softmax_by_segment(scores, index.att_tgt.clone(), index.n())?;
    let expanded = tape.matmul(alpha, bt)?;
    let vs = tape.row_gather(v, index.att_src.clone())?;
    let msgs = tape.mul(vs, expanded)?;
    let agg = tape.segment_sum(msgs, index.att_tgt.clone(), index.n())?;
    let o = tape.matmul(agg, p.w_o)?;
    let r = tape.matmul(h, p.w_r)?;
    let sum = tape.add(o, r)?;
    Ok((tape.add_row(sum, p.b_o)?, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::graph::SimilarityGraph;

    fn path_graph(n: usize) -> GraphIndex {
        let edges: Vec<_> = (0..n - 1).map(|v| (v, v + 1, 1.0)).collect();
        let g = SimilarityGraph::from_edges(
            (0..n).map(|i| i.to_string()).collect(),
            Tensor::zeros(n, 1),
            vec![0; n],
            1,
            &edges,
        )
        .unwrap();
        GraphIndex::new(&g)
    }

    fn rand_tensor(r: usize, c: usize, salt: u64) -> Tensor {
        let data = (0..r * c)
            .map(|i| (((i as u64 + 1) * 2654435761 + salt * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn sage_averages_neighbours() {
        let idx = path_graph(3);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::column(vec![1.0, 2.0, 4.0]));
        // weight picks the neighbour mean only
        let weight = tape.constant(Tensor::column(vec![0.0, 1.0]));
        let bias = tape.constant(Tensor::zeros(1, 1));
        let out = sage_layer(&mut tape, h, &idx, &SageParams { weight, bias }).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.5, 2.0]);
    }

    #[test]
    fn gt_attention_sums_to_one_per_head() {
        let idx = path_graph(5);
        let mut tape = Tape::new();
        let h = tape.constant(rand_tensor(5, 3, 1));
        let mut vars = Vec::new();
        for (i, (r, c)) in [(3, 4), (3, 4), (3, 4), (4, 4), (1, 4), (3, 4)]
            .into_iter()
            .enumerate()
        {
            vars.push(tape.param(rand_tensor(r, c, i as u64 + 2)));
        }
        let p = GtParams {
            w_q: vars[0],
            w_k: vars[1],
            w_v: vars[2],
            w_o: vars[3],
            b_o: vars[4],
            w_r: vars[5],
            heads: 2,
        };
        let (_, alpha) = gt_layer(&mut tape, h, &idx, &p).unwrap();
        let a = tape.value(alpha);
        let mut sums = vec![[0.0; 2]; 5];
        for (e, &t) in idx.att_tgt.iter().enumerate() {
            sums[t][0] += a.get(e, 0);
            sums[t][1] += a.get(e, 1);
        }
        for s in sums {
            assert!((s[0] - 1.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let idx = path_graph(4);
        let x = rand_tensor(4, 2, 9);
        let proj = rand_tensor(4, 1, 11);

        let sage = check_gradients(&[x.clone(), rand_tensor(4, 4, 3), rand_tensor(1, 4, 4)], |t, v| {
            let out = sage_layer(t, v[0], &idx, &SageParams { weight: v[1], bias: v[2] })?;
            let p = t.constant(proj.clone());
            let s = t.matmul(out, p)?;
            let s = t.elu(s, 1.0);
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(sage.passed(), "{sage:?}");

        let gat = check_gradients(
            &[x.clone(), rand_tensor(2, 4, 5), rand_tensor(4, 2, 6), rand_tensor(4, 2, 7), rand_tensor(1, 4, 8)],
            |t, v| {
                let p = GatParams { weight: v[1], att_src: v[2], att_dst: v[3], bias: v[4], heads: 2 };
                let (out, _) = gat_layer(t, v[0], &idx, &p)?;
                let pr = t.constant(proj.clone());
                let s = t.matmul(out, pr)?;
                let s = t.elu(s, 1.0);
                Ok(t.sum(s))
            },
        )
        .unwrap();
        assert!(gat.passed(), "{gat:?}");

        let shapes = [(2, 4), (2, 4), (2, 4), (4, 4), (1, 4), (2, 4)];
        let mut inputs = vec![x];
        inputs.extend(shapes.iter().enumerate().map(|(i, &(r, c))| rand_tensor(r, c, 20 + i as u64)));
        let gt = check_gradients(&inputs, |t, v| {
            let p = GtParams {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                w_o: v[4],
                b_o: v[5],
                w_r: v[6],
                heads: 2,
            };
            let (out, _) = gt_layer(t, v[0], &idx, &p)?;
            let pr = t.constant(proj.clone());
            let s = t.matmul(out, pr)?;
            let s = t.elu(s, 1.0);
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(gt.passed(), "{gt:?}");
    }
}
