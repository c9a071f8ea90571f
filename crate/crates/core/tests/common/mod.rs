#![allow(dead_code)]

use std::collections::BTreeMap;

use patient_gnn::autodiff::{Tape, Tensor};
use patient_gnn::ehr::{CodeKind, MedicalCode, RawPatient, Visit};
use patient_gnn::gnn::{GnnModel, GraphIndex, NodeModel};
use patient_gnn::graph::{cosine_similarity, SimilarityGraph, Split};
use patient_gnn::train::{loss_on_tape, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Erdős–Rényi graph with Gaussian-ish features, both labels present and a random
/// split that leaves every mask non-empty.
pub fn random_graph(seed: u64, n: usize, dim: usize, p_edge: f64) -> SimilarityGraph {
    assert!(n >= 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let features = Tensor::from_vec(n, dim, data).unwrap();
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    labels[0] = 0;
    labels[1] = 1;
    labels[2] = 0;
    labels[3] = 1;
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p_edge) {
                edges.push((u, v, rng.random_range(0.0..1.0)));
            }
        }
    }
    let ids = (0..n).map(|i| format!("P{i:03}")).collect();
    let mut g = SimilarityGraph::from_edges(ids, features, labels, 3, &edges).unwrap();
    let mut splits: Vec<Split> = (0..n)
        .map(|_| match rng.random_range(0..5) {
            0 => Split::Val,
            1 => Split::Test,
            _ => Split::Train,
        })
        .collect();
    splits[0] = Split::Train;
    splits[1] = Split::Train;
    splits[2] = Split::Val;
    splits[3] = Split::Test;
    splits[4] = Split::Test;
    splits[5] = Split::Val;
    g.set_splits(splits, seed).unwrap();
    g
}

/// Random permutation of `0..n`.
pub fn permutation(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Mann-Whitney U / (P N) with ties counted as one half.
pub fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut u, mut p, mut n) = (0.0, 0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        p += 1.0;
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 0 {
                u += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    for &l in labels {
        if l == 0 {
            n += 1.0;
        }
    }
    u / (p * n)
}

/// Area under the interpolated PR curve by enumerating every threshold: each
/// distinct score contributes its recall gain times the best precision reachable
/// at that recall or beyond.
pub fn enumerated_auprc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
            let predicted = scores.iter().filter(|&&s| s >= t).count() as f64;
            (tp / pos, tp / predicted)
        })
        .collect();
    let mut area = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &points {
        let best = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        area += (r - prev) * best;
        prev = r;
    }
    area
}

/// O(n^2) reference: every node keeps its k most similar others, ties to the lower
/// index, and the selections are merged without direction.
pub fn brute_force_knn(rows: &[Vec<f64>], k: usize) -> BTreeMap<(usize, usize), f64> {
    let n = rows.len();
    let mut edges = BTreeMap::new();
    for i in 0..n {
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (cosine_similarity(&rows[i], &rows[j]).unwrap(), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(s, j) in sims.iter().take(k) {
            edges.insert((i.min(j), i.max(j)), s);
        }
    }
    edges
}

const STEP: f64 = 1e-5;

/// Worst relative error between backprop and central differences over every
/// parameter entry, ignoring entries whose absolute error is below 1e-7.
pub fn full_model_error(model: &GnnModel, g: &SimilarityGraph, loss: &LossConfig) -> f64 {
    let index = GraphIndex::new(g);
    let mask = g.mask(Split::Train).unwrap();
    let eval = |params: &[Tensor]| -> f64 {
        let m = GnnModel::from_parts(model.config().clone(), params.to_vec(), model.bn_stats().to_vec()).unwrap();
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, g.features(), &index, true).unwrap();
        let l = loss_on_tape(&mut tape, pass.logits, g.labels(), &mask, loss).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, g.features(), &index, true).unwrap();
    let l = loss_on_tape(&mut tape, pass.logits, g.labels(), &mask, loss).unwrap();
    tape.backward(l).unwrap();

    let mut work = model.params().to_vec();
    let mut worst = 0.0f64;
    for (k, var) in pass.params.iter().enumerate() {
        let analytic = tape.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(work[k].rows(), work[k].cols()));
        for e in 0..work[k].data().len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + STEP;
            let up = eval(&work);
            work[k].data_mut()[e] = orig - STEP;
            let down = eval(&work);
            work[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            if abs > 1e-7 {
                worst = worst.max(abs / a.abs().max(numeric.abs()));
            }
        }
    }
    worst
}

/// Moves zero-initialised biases and unit gammas off their defaults.
pub fn perturbed(model: GnnModel, seed: u64) -> GnnModel {
    let mut m = model;
    for (j, t) in m.params_mut().iter_mut().enumerate() {
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x += 0.05 * (((seed as usize + 3 * i + 7 * j) % 11) as f64 - 5.0) / 5.0;
        }
    }
    m
}

/// Random cohort where some visits carry HF diagnosis codes at random positions.
pub fn cohort_with_injected_hf(seed: u64, n: usize) -> Vec<RawPatient> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|p| {
            let visits = (0..rng.random_range(0..8))
                .map(|v| {
                    let mut codes = vec![
                        MedicalCode::new(CodeKind::Diagnosis, format!("{}", 250 + rng.random_range(0..40))).unwrap(),
                        MedicalCode::new(CodeKind::Prescription, format!("{:011}", rng.random_range(0..50))).unwrap(),
                    ];
                    if rng.random_bool(0.15) {
                        let hf = ["428", "4280", "42821", "4289"][rng.random_range(0..4)];
                        codes.push(MedicalCode::new(CodeKind::Diagnosis, hf).unwrap());
                    }
                    if rng.random_bool(0.1) {
                        // a procedure code that merely starts with 428 is not HF
                        codes.push(MedicalCode::new(CodeKind::Procedure, "4281").unwrap());
                    }
                    Visit::new(format!("V{p}-{v}"), 10 * v as u32, codes)
                })
                .collect();
            RawPatient { patient_id: format!("P{p}"), visits }
        })
        .collect()
}
