//! Losses, AdamW and the masked full-graph training loop.

use std::io::Write;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gnn::{GraphIndex, NodeModel};
use crate::graph::{SimilarityGraph, Split};
use crate::metrics::{auprc, auroc, confusion, evaluate, threshold_metrics, MetricReport};

pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Wbce,
    Focal,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Wbce => "wbce",
            LossKind::Focal => "focal",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bce" => Ok(LossKind::Bce),
            "wbce" => Ok(LossKind::Wbce),
            "focal" | "fl" => Ok(LossKind::Focal),
            other => Err(Error::invalid("loss", format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the positive term for WBCE; `None` means #neg/#pos on the train mask.
    pub pos_weight: Option<f64>,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Focal,
            pos_weight: None,
            alpha: 0.75,
            gamma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn bce() -> Self {
        LossConfig {
            kind: LossKind::Bce,
            ..Default::default()
        }
    }

    pub fn wbce(pos_weight: Option<f64>) -> Self {
        LossConfig {
            kind: LossKind::Wbce,
            pos_weight,
            ..Default::default()
        }
    }

    pub fn focal(alpha: f64, gamma: f64) -> Self {
        LossConfig {
            kind: LossKind::Focal,
            pos_weight: None,
            alpha,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::Wbce => {
                if let Some(w) = self.pos_weight {
                    if !(w > 0.0 && w.is_finite()) {
                        return Err(Error::invalid("pos_weight", "must be positive"));
                    }
                }
            }
            LossKind::Focal => {
                if !(self.alpha > 0.0 && self.alpha < 1.0) {
                    return Err(Error::invalid("alpha", "must lie in (0, 1)"));
                }
                if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
                    return Err(Error::invalid("gamma", "must be >= 0"));
                }
            }
            LossKind::Bce => {}
        }
        Ok(())
    }

    /// Fills in the WBCE default weight from the masked labels.
    pub fn resolved(&self, labels: &[u8], mask: &[bool]) -> Result<LossConfig> {
        self.validate()?;
        let mut out = self.clone();
        if self.kind == LossKind::Wbce && self.pos_weight.is_none() {
            let pos = labels.iter().zip(mask).filter(|(&y, &m)| m && y == 1).count();
            let neg = labels.iter().zip(mask).filter(|(&y, &m)| m && y == 0).count();
            if pos == 0 {
                return Err(Error::invalid("pos_weight", "no positive nodes in the training mask"));
            }
            out.pos_weight = Some(neg.max(1) as f64 / pos as f64);
        }
        Ok(out)
    }
}

fn masked_rows(labels: &[u8], mask: &[bool], n: usize) -> Result<Vec<usize>> {
    if labels.len() != n || mask.len() != n {
        return Err(Error::shape(
            "loss",
            format!("{n} predictions, {} labels, {} mask entries", labels.len(), mask.len()),
        ));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        Err(Error::EmptyMask("loss"))
    } else {
        Ok(rows)
    }
}

/// Per-node loss of one prediction; `p` is clamped first.
pub fn pointwise_loss(p: f64, y: u8, cfg: &LossConfig) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = y == 1;
    match cfg.kind {
        LossKind::Bce => -if pos { p.ln() } else { (1.0 - p).ln() },
        LossKind::Wbce => -if pos { cfg.pos_weight.unwrap_or(1.0) * p.ln() } else { (1.0 - p).ln() },
        LossKind::Focal => {
            let (pt, at) = if pos { (p, cfg.alpha) } else { (1.0 - p, 1.0 - cfg.alpha) };
            -at * (1.0 - pt).powf(cfg.gamma) * pt.ln()
        }
    }
}

/// Mean loss over the masked nodes.
pub fn loss(probabilities: &[f64], labels: &[u8], mask: &[bool], cfg: &LossConfig) -> Result<f64> {
    let rows = masked_rows(labels, mask, probabilities.len())?;
    let cfg = cfg.resolved(labels, mask)?;
    let total: f64 = rows
        .iter()
        .map(|&i| pointwise_loss(probabilities[i], labels[i], &cfg))
        .sum();
    Ok(total / rows.len() as f64)
}

/// Records the masked loss of `n x 1` logits on the tape. Only masked rows enter
/// the graph, so unmasked nodes contribute no gradient through the loss terms.
pub fn loss_on_tape(tape: &mut Tape, logits: Var, labels: &[u8], mask: &[bool], cfg: &LossConfig) -> Result<Var> {
    let (n, c) = tape.shape(logits);
    if c != 1 {
        return Err(Error::shape("loss", format!("logits have {c} columns")));
    }
    let rows = masked_rows(labels, mask, n)?;
    let cfg = cfg.resolved(labels, mask)?;
    let m = rows.len();
    let y: Vec<f64> = rows.iter().map(|&i| f64::from(labels[i])).collect();
    let z = tape.row_gather(logits, Rc::from(rows))?;
    let p = tape.sigmoid(z);
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let neg_p = tape.mul_scalar(p, -1.0);
    let q = tape.add_scalar(neg_p, 1.0);

    let per_node = match cfg.kind {
        LossKind::Bce | LossKind::Wbce => {
            let w = cfg.pos_weight.filter(|_| cfg.kind == LossKind::Wbce).unwrap_or(1.0);
            let wy = tape.constant(Tensor::column(y.iter().map(|&t| w * t).collect()));
            let ny = tape.constant(Tensor::column(y.iter().map(|&t| 1.0 - t).collect()));
            let lp = tape.log(p);
            let lq = tape.log(q);
            let a = tape.mul(wy, lp)?;
            let b = tape.mul(ny, lq)?;
            tape.add(a, b)?
        }
        LossKind::Focal => {
            let yv = tape.constant(Tensor::column(y.clone()));
            let ny = tape.constant(Tensor::column(y.iter().map(|&t| 1.0 - t).collect()));
            let a = tape.mul(yv, p)?;
            let b = tape.mul(ny, q)?;
            let pt = tape.add(a, b)?;
            let neg_pt = tape.mul_scalar(pt, -1.0);
            let one_minus = tape.add_scalar(neg_pt, 1.0);
            let modulator = tape.pow_scalar(one_minus, cfg.gamma);
            let at = tape.constant(Tensor::column(
                y.iter().map(|&t| if t == 1.0 { cfg.alpha } else { 1.0 - cfg.alpha }).collect(),
            ));
            let lpt = tape.log(pt);
            let weighted = tape.mul(at, modulator)?;
            tape.mul(weighted, lpt)?
        }
    };
    let s = tape.sum(per_node);
    Ok(tape.mul_scalar(s, -1.0 / m as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} state slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((x, &gi), (mi, vi)) in it {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= cfg.lr * cfg.weight_decay * *x;
            *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without validation-F1 improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr: 1e-3,
            weight_decay: 5e-4,
            patience: 30,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if self.patience >= self.epochs {
            return Err(Error::invalid("patience", "must be smaller than epochs"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_auroc: f64,
    pub val_auprc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_f1 >= r.val_f1 => Some(b),
                _ => Some(r),
            })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_f1,val_auroc,val_auprc")?;
        for r in &self.epochs {
            writeln!(w, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_f1, r.val_auroc, r.val_auprc)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Parameters from the best validation-F1 epoch.
    pub model: M,
    pub history: History,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

/// Full-batch training on the train mask with early stopping on validation F1.
pub fn train_model<M: NodeModel>(
    model: &M,
    graph: &SimilarityGraph,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    let index = GraphIndex::new(graph);
    let labels = graph.labels();
    let train_mask = graph.mask(Split::Train)?;
    let val_mask = graph.mask(Split::Val)?;
    let loss_cfg = loss_cfg.resolved(labels, &train_mask)?;
    let features = graph.features();
    let adam = cfg.adam();

    let mut model = model.clone();
    let mut state = AdamState::new(model.params());
    let mut history = History::default();
    let mut best: Option<(f64, usize, M)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, features, &index, true)?;
        let loss = loss_on_tape(&mut tape, pass.logits, labels, &train_mask, &loss_cfg)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: loss_value,
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = pass
            .params
            .iter()
            .zip(model.params())
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
            .collect();
        drop(tape);
        adam_step(model.params_mut(), &grads, &mut state, &adam)?;
        model.set_bn_stats(pass.bn_stats);

        let (probs, _) = model.probabilities(features, &index)?;
        let cm = confusion(&probs, labels, &val_mask, cfg.threshold)?;
        let val_f1 = threshold_metrics(&cm).f1;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_value,
            val_f1,
            val_auroc: auroc(&probs, labels, &val_mask).unwrap_or(f64::NAN),
            val_auprc: auprc(&probs, labels, &val_mask).unwrap_or(f64::NAN),
        });
        log::debug!("epoch {epoch}: loss {loss_value:.5} val_f1 {val_f1:.4}");

        if best.as_ref().is_none_or(|b| val_f1 > b.0) {
            best = Some((val_f1, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_f1, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub test: MetricReport,
    pub history: History,
}

pub const SEEDS_PER_RUN: u64 = 3;

/// Trains one model per seed `s, s+1, s+2` on the same split and scores the test mask.
/// `make_model` builds a freshly initialised model from a seed. Seeds run on their
/// own threads; each owns its tape, so results do not depend on scheduling.
pub fn train_seeds<M, F>(
    make_model: F,
    graph: &SimilarityGraph,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<Vec<(SeedResult, M)>>
where
    M: NodeModel + Send,
    F: Fn(u64) -> Result<M> + Sync,
{
    let test_mask = graph.mask(Split::Test)?;
    let one = |seed: u64| -> Result<(SeedResult, M)> {
        let index = GraphIndex::new(graph);
        let model = make_model(seed)?;
        let run = TrainConfig { seed, ..cfg.clone() };
        let out = train_model(&model, graph, loss_cfg, &run)?;
        let (probs, _) = out.model.probabilities(graph.features(), &index)?;
        let test = evaluate(&probs, graph.labels(), &test_mask, out.model.threshold())?;
        log::info!("{} seed {seed}: best epoch {} test f1 {:.4}", out.model.describe(), out.best_epoch, test.f1);
        Ok((
            SeedResult {
                seed,
                best_epoch: out.best_epoch,
                best_val_f1: out.best_val_f1,
                test,
                history: out.history,
            },
            out.model,
        ))
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..SEEDS_PER_RUN)
            .map(|i| {
                let one = &one;
                s.spawn(move || one(cfg.seed + i))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// One summary row per seed: `seed,best_epoch,best_val_f1,test_f1,...`.
pub fn write_seed_summary<W: Write>(mut w: W, results: &[SeedResult]) -> std::io::Result<()> {
    writeln!(
        w,
        "seed,best_epoch,best_val_f1,test_f1,test_accuracy,test_balanced_accuracy,test_precision,test_recall,test_auroc,test_auprc"
    )?;
    for r in results {
        let t = &r.test;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.seed, r.best_epoch, r.best_val_f1, t.f1, t.accuracy, t.balanced_accuracy, t.precision, t.recall, t.auroc, t.auprc
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let all = [true];
        let bce = loss(&[0.5], &[1], &all, &LossConfig::bce()).unwrap();
        assert!((bce - 2f64.ln()).abs() < 1e-12);
        let fl = loss(&[0.5], &[1], &all, &LossConfig::focal(0.75, 1.0)).unwrap();
        assert!((fl - 0.75 * 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!((fl - 0.2599).abs() < 1e-4);
        assert!(matches!(loss(&[0.5], &[1], &[false], &LossConfig::bce()), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn focal_half_alpha_no_gamma_is_half_bce() {
        for (p, y) in [(0.1, 0), (0.9, 1), (0.3, 1), (1e-15, 1), (1.0, 0)] {
            let f = pointwise_loss(p, y, &LossConfig::focal(0.5, 0.0));
            let b = pointwise_loss(p, y, &LossConfig::bce());
            assert!((f - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_loss_matches_direct_formula() {
        let logits = [-2.0, 0.3, 1.7, -0.1, 4.0];
        let labels = [0, 1, 1, 0, 0];
        let mask = [true, true, false, true, true];
        let probs: Vec<f64> = logits.iter().map(|&z| crate::autodiff::sigmoid(z)).collect();
        for cfg in [LossConfig::bce(), LossConfig::wbce(None), LossConfig::wbce(Some(2.5)), LossConfig::focal(0.75, 1.0), LossConfig::focal(0.3, 2.5)] {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::column(logits.to_vec()));
            let l = loss_on_tape(&mut tape, z, &labels, &mask, &cfg).unwrap();
            let direct = loss(&probs, &labels, &mask, &cfg).unwrap();
            assert!((tape.value(l).item() - direct).abs() < 1e-12, "{cfg:?}");
        }
    }

    #[test]
    fn wbce_default_weight() {
        let cfg = LossConfig::wbce(None).resolved(&[1, 0, 0, 0, 1], &[true, true, true, true, false]).unwrap();
        assert_eq!(cfg.pos_weight, Some(3.0));
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, &cfg).unwrap();
        assert!((p[0].item() - 0.9).abs() < 1e-6);

        let mut q = vec![Tensor::filled(2, 2, 3.0)];
        let mut s = AdamState::new(&q);
        adam_step(&mut q, &[Tensor::zeros(2, 2)], &mut s, &cfg).unwrap();
        assert_eq!(q[0], Tensor::filled(2, 2, 3.0));

        let mut a = vec![Tensor::scalar(0.5), Tensor::scalar(0.5)];
        let mut s = AdamState::new(&a);
        let g = [Tensor::scalar(-0.2), Tensor::scalar(-0.2)];
        adam_step(&mut a, &g, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(a[0], a[1]);
    }

    #[test]
    fn patience_must_be_below_epochs() {
        let cfg = TrainConfig {
            epochs: 10,
            patience: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn history_best_is_first_max() {
        let rec = |epoch, val_f1| EpochRecord {
            epoch,
            train_loss: 1.0,
            val_f1,
            val_auroc: 0.5,
            val_auprc: 0.5,
        };
        let h = History {
            epochs: vec![rec(1, 0.2), rec(2, 0.6), rec(3, 0.6), rec(4, 0.1)],
        };
        assert_eq!(h.best().unwrap().epoch, 2);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epoch,train_loss,val_f1,val_auroc,val_auprc\n1,1,0.2,0.5,0.5\n"));
    }
}
