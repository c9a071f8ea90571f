use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics for batch normalisation in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Normalise with batch statistics and fold them into the running stats.
    Train { momentum: f64 },
    /// Normalise with the running stats.
    Eval,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    Transpose(Var),
    RowGather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    ScaleRows(Var, Rc<[f64]>),
    ConcatCols(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    SegmentSoftmax(Var, Rc<[usize]>),
    MeanRows(Var),
    Sum(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward computations so that gradients can be pulled back in reverse order.
///
/// Nodes are appended in evaluation order, which is already a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that takes part in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let rs = self.shape(row);
        if rs != (1, c) {
            return Err(Error::shape(
                "add_row",
                format!("{r}x{c} + {}x{}", rs.0, rs.1),
            ));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::MulScalar(a, s), &[a])
    }

    /// Elementwise `x^p`. Inputs must be non-negative unless `p` is an integer.
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        self.push(value, Op::PowScalar(a, p), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    /// Selects rows of `a` by index; indices may repeat.
    pub fn row_gather(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.shape();
        let mut value = Tensor::zeros(index.len(), c);
        for (o, &i) in index.iter().enumerate() {
            if i >= r {
                return Err(Error::shape(
                    "row_gather",
                    format!("index {i} out of range for {r} rows"),
                ));
            }
            value.row_mut(o).copy_from_slice(src.row(i));
        }
        Ok(self.push(value, Op::RowGather(a, index), &[a]))
    }

    /// Sums rows of `a` into `n_segments` output rows; row `i` goes to `segment[i]`.
    pub fn segment_sum(&mut self, a: Var, segment: Rc<[usize]>, n_segments: usize) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.shape();
        if segment.len() != r {
            return Err(Error::shape(
                "segment_sum",
                format!("{} segment ids for {r} rows", segment.len()),
            ));
        }
        let mut value = Tensor::zeros(n_segments, c);
        for (i, &s) in segment.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::shape(
                    "segment_sum",
                    format!("segment id {s} >= {n_segments}"),
                ));
            }
            for (o, x) in value.row_mut(s).iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        Ok(self.push(value, Op::SegmentSum(a, segment), &[a]))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Rc<[f64]>) -> Result<Var> {
        let (r, _) = self.shape(a);
        if factors.len() != r {
            return Err(Error::shape(
                "scale_rows",
                format!("{} factors for {r} rows", factors.len()),
            ));
        }
        let mut value = self.value(a).clone();
        for (i, f) in factors.iter().enumerate() {
            for x in value.row_mut(i) {
                *x *= f;
            }
        }
        Ok(self.push(value, Op::ScaleRows(a, factors), &[a]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::shape(
                "concat_cols",
                format!("{ra}x{ca} | {rb}x{cb}"),
            ));
        }
        let mut value = Tensor::zeros(ra, ca + cb);
        for i in 0..ra {
            let row = value.row_mut(i);
            row[..ca].copy_from_slice(self.nodes[a.0].value.row(i));
            row[ca..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { alpha * x.exp_m1() });
        self.push(value, Op::Elu(a, alpha), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi), &[a])
    }

    /// Softmax over the rows that share a segment id, independently per column.
    pub fn softmax_by_segment(
        &mut self,
        a: Var,
        segment: Rc<[usize]>,
        n_segments: usize,
    ) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.shape();
        if segment.len() != r {
            return Err(Error::shape(
                "softmax_by_segment",
                format!("{} segment ids for {r} rows", segment.len()),
            ));
        }
        if let Some(&s) = segment.iter().find(|&&s| s >= n_segments) {
            return Err(Error::shape(
                "softmax_by_segment",
                format!("segment id {s} >= {n_segments}"),
            ));
        }
        let mut max = Tensor::filled(n_segments, c, f64::NEG_INFINITY);
        for (i, &s) in segment.iter().enumerate() {
            for (m, &x) in max.row_mut(s).iter_mut().zip(src.row(i)) {
                *m = m.max(x);
            }
        }
        let mut value = Tensor::zeros(r, c);
        let mut denom = Tensor::zeros(n_segments, c);
        for (i, &s) in segment.iter().enumerate() {
            for j in 0..c {
                let e = (src.get(i, j) - max.get(s, j)).exp();
                value.set(i, j, e);
                denom.row_mut(s)[j] += e;
            }
        }
        for (i, &s) in segment.iter().enumerate() {
            for j in 0..c {
                let v = value.get(i, j) / denom.get(s, j);
                value.set(i, j, v);
            }
        }
        Ok(self.push(value, Op::SegmentSoftmax(a, segment), &[a]))
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = src.shape();
        let mut value = Tensor::zeros(1, c);
        for i in 0..r {
            for (o, x) in value.data_mut().iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        let n = r.max(1) as f64;
        value.data_mut().iter_mut().for_each(|x| *x /= n);
        self.push(value, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Batch normalisation over rows (one feature per column).
    ///
    /// `gamma` and `beta` are `1 x cols`. In training mode the biased batch variance
    /// normalises and the unbiased one feeds the running estimate.
    pub fn batchnorm_1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BatchNormMode,
        stats: &mut RunningStats,
    ) -> Result<Var> {
        let (n, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::shape(
                "batchnorm_1d",
                format!(
                    "input {n}x{c}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(
                "batchnorm_1d",
                format!("running stats for {} features, input has {c}", stats.mean.len()),
            ));
        }
        let src = self.value(x);
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Train { momentum } => {
                if n < 2 {
                    return Err(Error::shape(
                        "batchnorm_1d",
                        format!("training mode needs at least 2 rows, got {n}"),
                    ));
                }
                let mut mean = vec![0.0; c];
                for i in 0..n {
                    for (m, v) in mean.iter_mut().zip(src.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for i in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(src.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased = n as f64 / (n as f64 - 1.0);
                for j in 0..c {
                    var[j] /= n as f64;
                    stats.mean[j] = (1.0 - momentum) * stats.mean[j] + momentum * mean[j];
                    stats.var[j] = (1.0 - momentum) * stats.var[j] + momentum * var[j] * unbiased;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(n, c);
        for i in 0..n {
            for j in 0..c {
                xhat.set(i, j, (src.get(i, j) - mean[j]) * inv_std[j]);
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut value = xhat.clone();
        for i in 0..n {
            for (j, y) in value.row_mut(i).iter_mut().enumerate() {
                *y = *y * g[j] + b[j];
            }
        }
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Reverse-mode sweep from a `1 x 1` loss. Gradients accumulate on fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::shape("backward", format!("loss must be 1x1, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.pull_back(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn pull_back(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut send = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, gemm(g, false, val(*b), true));
                }
                if wants(*b) {
                    send(*b, gemm(val(*a), true, g, false));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                if wants(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    send(*row, gr);
                }
            }
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MulScalar(a, s) => send(*a, g.map(|x| x * s)),
            Op::PowScalar(a, p) => {
                let p = *p;
                let d = val(*a).map(|x| if p == 0.0 { 0.0 } else { p * x.powf(p - 1.0) });
                send(*a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::RowGather(a, index) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (o, &i) in index.iter().enumerate() {
                    for (t, x) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                        *t += x;
                    }
                }
                send(*a, ga);
            }
            Op::SegmentSum(a, segment) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (i, &s) in segment.iter().enumerate() {
                    ga.row_mut(i).copy_from_slice(g.row(s));
                }
                send(*a, ga);
            }
            Op::ScaleRows(a, factors) => {
                let mut ga = g.clone();
                for (i, f) in factors.iter().enumerate() {
                    ga.row_mut(i).iter_mut().for_each(|x| *x *= f);
                }
                send(*a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let mut ga = Tensor::zeros(g.rows(), ca);
                let mut gb = Tensor::zeros(g.rows(), cb);
                for i in 0..g.rows() {
                    ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Relu(a) => {
                send(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                send(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { s * x }));
            }
            Op::Elu(a, alpha) => {
                let al = *alpha;
                send(
                    *a,
                    g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { x * al * y.exp() }),
                );
            }
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |x, s| x * s * (1.0 - s))),
            Op::Log(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Exp(a) => send(*a, g.zip_map(out, |x, e| x * e)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *a,
                    g.zip_map(val(*a), |x, y| if y < lo || y > hi { 0.0 } else { x }),
                );
            }
            Op::SegmentSoftmax(a, segment) => {
                let c = out.cols();
                let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = Tensor::zeros(n_seg, c);
                for (i, &s) in segment.iter().enumerate() {
                    for j in 0..c {
                        dot.row_mut(s)[j] += g.get(i, j) * out.get(i, j);
                    }
                }
                let mut ga = Tensor::zeros(out.rows(), c);
                for (i, &s) in segment.iter().enumerate() {
                    for j in 0..c {
                        ga.set(i, j, out.get(i, j) * (g.get(i, j) - dot.get(s, j)));
                    }
                }
                send(*a, ga);
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let n = r.max(1) as f64;
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for (t, x) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *t = x / n;
                    }
                }
                send(*a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Tensor::filled(r, c, g.item()));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c) = xhat.shape();
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        dgamma[j] += g.get(i, j) * xhat.get(i, j);
                        dbeta[j] += g.get(i, j);
                    }
                }
                if wants(*x) {
                    let mut gx = Tensor::zeros(n, c);
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..c {
                            let gy = g.get(i, j) * gam[j];
                            let v = if *batch_stats {
                                // dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)
                                let mean_g = dbeta[j] * gam[j] / nf;
                                let mean_gx = dgamma[j] * gam[j] / nf;
                                inv_std[j] * (gy - mean_g - xhat.get(i, j) * mean_gx)
                            } else {
                                inv_std[j] * gy
                            };
                            gx.set(i, j, v);
                        }
                    }
                    send(*x, gx);
                }
                if wants(*gamma) {
                    send(*gamma, Tensor::from_vec(1, c, dgamma).expect("shape"));
                }
                if wants(*beta) {
                    send(*beta, Tensor::from_vec(1, c, dbeta).expect("shape"));
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
