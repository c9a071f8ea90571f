//! One PASS/FAIL line per acceptance criterion, written straight to stderr so it
//! shows up without `--nocapture`. The test fails if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::rc::Rc;
use std::time::{Duration, Instant};

use common::{brute_force_knn, cohort_with_injected_hf, enumerated_auprc, full_model_error, mann_whitney, perturbed};
use patient_gnn::autodiff::{check_gradients, BatchNormMode, RunningStats, Tape, Tensor, Var};
use patient_gnn::baselines::{BaselineConfig, BaselineKind};
use patient_gnn::ehr::{label_cohort, CodeKind, HfCodeSet};
use patient_gnn::gnn::{GnnModel, LayerKind, ModelConfig};
use patient_gnn::graph::{build_knn_graph_from, split_nodes, SimilarityGraph, Split, SplitSpec};
use patient_gnn::metrics::{auprc, auroc};
use patient_gnn::pipeline::{prepare, run_baseline, summarise, train_gnn, ArchSpec, KChoice};
use patient_gnn::synth::{generate, SynthConfig};
use patient_gnn::train::{pointwise_loss, LossConfig, TrainConfig, PROB_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_patient-gnn");

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn signed(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(r, c, data).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = signed(&mut rng, 4, 3);
    let b = signed(&mut rng, 3, 5);
    let c = signed(&mut rng, 4, 3);
    let row = signed(&mut rng, 1, 3);
    let gamma = signed(&mut rng, 1, 3);
    let beta = signed(&mut rng, 1, 3);
    let pos = Tensor::from_vec(4, 3, (0..12).map(|_| rng.random_range(0.2..1.5)).collect()).unwrap();
    let weights = signed(&mut rng, 4, 5);
    let idx: Rc<[usize]> = Rc::from(vec![3, 0, 0, 2, 1, 3]);
    let seg: Rc<[usize]> = Rc::from(vec![1, 0, 1, 2]);
    let factors: Rc<[f64]> = Rc::from(vec![0.5, 2.0, 0.0, -1.0]);

    type Prim = Box<dyn Fn(&mut Tape, &[Var]) -> patient_gnn::Result<Var>>;
    let (i2, s2, s3, f2) = (idx.clone(), seg.clone(), seg.clone(), factors.clone());
    let prims: Vec<(&str, Vec<Tensor>, Prim)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![a.clone(), c.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), c.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), c.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("add_scalar", vec![a.clone()], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("mul_scalar", vec![a.clone()], Box::new(|t, v| Ok(t.mul_scalar(v[0], -1.7)))),
        ("pow_scalar", vec![pos.clone()], Box::new(|t, v| Ok(t.pow_scalar(v[0], 1.5)))),
        ("transpose", vec![a.clone()], Box::new(|t, v| Ok(t.transpose(v[0])))),
        ("row_gather", vec![a.clone()], Box::new(move |t, v| t.row_gather(v[0], i2.clone()))),
        ("segment_sum", vec![a.clone()], Box::new(move |t, v| t.segment_sum(v[0], s2.clone(), 3))),
        ("scale_rows", vec![a.clone()], Box::new(move |t, v| t.scale_rows(v[0], f2.clone()))),
        ("concat_cols", vec![a.clone(), c.clone()], Box::new(|t, v| t.concat_cols(v[0], v[1]))),
        ("relu", vec![a.clone()], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("leaky_relu", vec![a.clone()], Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2)))),
        ("elu", vec![a.clone()], Box::new(|t, v| Ok(t.elu(v[0], 1.0)))),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("log", vec![pos.clone()], Box::new(|t, v| Ok(t.log(v[0])))),
        ("exp", vec![a.clone()], Box::new(|t, v| Ok(t.exp(v[0])))),
        ("clamp", vec![a.clone()], Box::new(|t, v| Ok(t.clamp(v[0], -0.5, 0.5)))),
        ("softmax_by_segment", vec![a.clone()], Box::new(move |t, v| t.softmax_by_segment(v[0], s3.clone(), 3))),
        ("mean_rows", vec![a.clone()], Box::new(|t, v| Ok(t.mean_rows(v[0])))),
        ("sum", vec![a.clone()], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("batchnorm_train", vec![a.clone(), gamma.clone(), beta.clone()], Box::new(|t, v| batchnorm(t, v, BatchNormMode::Train { momentum: 0.1 }))),
        ("batchnorm_eval", vec![a.clone(), gamma.clone(), beta.clone()], Box::new(|t, v| batchnorm(t, v, BatchNormMode::Eval))),
    ];
    let (mut worst, mut worst_abs) = (0.0f64, 0.0f64);
    for (name, inputs, f) in &prims {
        let report = check_gradients(inputs, |t, v| {
            let out = f(t, v)?;
            // fixed random weights give every output entry its own upstream gradient
            let (r, c) = t.shape(out);
            let w = t.constant(if (r, c) == (4, 5) { weights.clone() } else { signed(&mut ChaCha8Rng::seed_from_u64(99), r, c) });
            let prod = t.mul(out, w)?;
            Ok(t.sum(prod))
        })
        .map_err(|e| format!("{name}: {e}"))?;
        ensure(report.passed(), format!("{name}: rel err {:e}", report.max_rel_err))?;
        worst = worst.max(report.max_rel_err);
        worst_abs = worst_abs.max(report.max_abs_err);
    }

    let losses = [LossConfig::bce(), LossConfig::wbce(Some(2.5)), LossConfig::focal(0.75, 1.0)];
    for seed in 0..2u64 {
        let g = common::random_graph(seed, 10, 3, 0.3);
        for (kind, heads) in [(LayerKind::Sage, 1), (LayerKind::Gat, 2), (LayerKind::Gt, 1), (LayerKind::Gt, 2)] {
            let model = perturbed(GnnModel::new(ModelConfig::standard(kind, 3, 4, 2, heads, seed)).unwrap(), seed);
            for loss in &losses {
                let err = full_model_error(&model, &g, loss);
                ensure(err < 1e-4, format!("{kind:?} heads={heads} {:?}: rel err {err:e}", loss.kind))?;
                worst = worst.max(err);
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} primitives (max abs err {worst_abs:.1e}) and 4 architectures, worst rel err {worst:.1e} above the abs floor, {:.1?}",
        prims.len(),
        elapsed
    ))
}

fn batchnorm(t: &mut Tape, v: &[Var], mode: BatchNormMode) -> patient_gnn::Result<Var> {
    let mut stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
    t.batchnorm_1d(v[0], v[1], v[2], 1e-5, mode, &mut stats)
}

/// Trained GT models shared by criteria 2 and 8.
struct Trained {
    graph: SimilarityGraph,
    models: Vec<GnnModel>,
    f1: f64,
    lr_f1: f64,
    majority_f1: f64,
    elapsed: Duration,
}

fn train_default_cohort() -> Result<Trained, String> {
    let start = Instant::now();
    let synth = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let prep = prepare(&synth.patients, &synth.embeddings, &HfCodeSet::default(), &CodeKind::ALL, &KChoice::Fixed(3), &SplitSpec::default())
        .map_err(|e| e.to_string())?;
    let graph = prep.graph;
    let tc = TrainConfig { lr: 0.01, patience: 50, ..TrainConfig::default() };
    let results = train_gnn(&graph, &ArchSpec::default(), &LossConfig::focal(0.75, 1.0), &tc).map_err(|e| e.to_string())?;
    let f1 = summarise(&results.iter().map(|r| r.0.clone()).collect::<Vec<_>>()).f1.0;
    let (_, lr) = run_baseline(&graph, &BaselineConfig::new(BaselineKind::LogReg)).map_err(|e| e.to_string())?;
    let (_, maj) = run_baseline(&graph, &BaselineConfig::new(BaselineKind::Majority)).map_err(|e| e.to_string())?;
    Ok(Trained {
        graph,
        models: results.into_iter().map(|r| r.1).collect(),
        f1,
        lr_f1: lr.f1,
        majority_f1: maj.f1,
        elapsed: start.elapsed(),
    })
}

fn criterion_2(trained: &Result<Trained, String>) -> Outcome {
    let t = trained.as_ref().map_err(|e| e.clone())?;
    // the default single-head models plus a two-head model trained on the same graph
    let mut models: Vec<GnnModel> = t.models.clone();
    let arch = ArchSpec { heads: 2, hidden: 16, ..ArchSpec::default() };
    let tc = TrainConfig { epochs: 30, lr: 0.01, patience: 0, ..TrainConfig::default() };
    let two_head = train_gnn(&t.graph, &arch, &LossConfig::focal(0.75, 1.0), &tc).map_err(|e| e.to_string())?;
    models.push(two_head.into_iter().next().unwrap().1);
    let test = t.graph.nodes_in(Split::Test).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for m in &models {
        let dump = m.predict(&t.graph).map_err(|e| e.to_string())?.attention.ok_or("GT produced no attention")?;
        let sums = dump.target_sums(t.graph.n());
        for &v in &test {
            for s in &sums[v] {
                worst = worst.max((s - 1.0).abs());
                checked += 1;
            }
        }
    }
    ensure(worst <= 1e-9, format!("max |sum - 1| = {worst:e}"))?;
    Ok(format!("{} trained GTs, {checked} (target, head) sums on test nodes, max |sum - 1| = {worst:.1e}", models.len()))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draw = |n: usize| -> (Vec<f64>, Vec<u8>) {
        let s = (0..n)
            .map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..1.0) } else { f64::from(rng.random_range(0u8..5)) / 4.0 })
            .collect();
        let mut l: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        l[0] = 1;
        l[1] = 0;
        (s, l)
    };
    let (mut roc_worst, mut pr_worst) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let (s, l) = draw(2 + i % 199);
        let mask = vec![true; s.len()];
        roc_worst = roc_worst.max((auroc(&s, &l, &mask).map_err(|e| e.to_string())? - mann_whitney(&s, &l)).abs());
    }
    for i in 0..1000 {
        let (s, l) = draw(2 + i % 19);
        let mask = vec![true; s.len()];
        pr_worst = pr_worst.max((auprc(&s, &l, &mask).map_err(|e| e.to_string())? - enumerated_auprc(&s, &l)).abs());
    }
    ensure(roc_worst < 1e-9, format!("AUROC off by {roc_worst:e}"))?;
    ensure(pr_worst < 1e-12, format!("AUPRC off by {pr_worst:e}"))?;
    Ok(format!("AUROC max err {roc_worst:.1e} over 1000 sets, AUPRC max err {pr_worst:.1e} over 1000 sets with n <= 20"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = 0;
    for trial in 0..30 {
        let n = rng.random_range(5..=200);
        let d = rng.random_range(1..8);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| loop {
                // small integer grid on some trials so that similarity ties occur
                let v: Vec<f64> =
                    (0..d).map(|_| if trial % 3 == 0 { f64::from(rng.random_range(-2i8..3)) } else { rng.random_range(-1.0..1.0) }).collect();
                if v.iter().any(|x| *x != 0.0) {
                    break v;
                }
            })
            .collect();
        for k in 1..=3 {
            let g = build_knn_graph_from(
                (0..n).map(|i| i.to_string()).collect(),
                Tensor::from_rows(&rows).unwrap(),
                vec![0; n],
                k,
            )
            .map_err(|e| e.to_string())?;
            let got: BTreeMap<(usize, usize), f64> = g.edges().map(|(u, v, s)| ((u, v), s)).collect();
            ensure(got == brute_force_knn(&rows, k), format!("mismatch at n={n} d={d} k={k}"))?;
            cases += 1;
        }
    }
    let synth = generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let prep = prepare(&synth.patients, &synth.embeddings, &HfCodeSet::default(), &CodeKind::ALL, &KChoice::Fixed(3), &SplitSpec::default())
        .map_err(|e| e.to_string())?;
    let (n, e) = (prep.graph.n(), prep.graph.num_edges());
    ensure(n == 4760, format!("{n} nodes"))?;
    ensure((7140..=14280).contains(&e), format!("{e} edges outside [7140, 14280]"))?;
    Ok(format!("{cases} random graphs equal brute force; n=4760 k=3 gives {e} edges"))
}

fn criterion_5() -> Outcome {
    let n = 4760;
    let mut labels = vec![0u8; n];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut placed = 0;
    while placed < 1062 {
        let i = rng.random_range(0..n);
        if labels[i] == 0 {
            labels[i] = 1;
            placed += 1;
        }
    }
    let g = SimilarityGraph::from_edges((0..n).map(|i| i.to_string()).collect(), Tensor::zeros(n, 1), labels, 1, &[]).map_err(|e| e.to_string())?;
    let s = split_nodes(&g, &SplitSpec::default()).map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    let mut positives = Vec::new();
    for (split, frac) in Split::ALL.iter().zip([0.6, 0.2, 0.2]) {
        let nodes = s.nodes_in(*split).map_err(|e| e.to_string())?;
        let p = nodes.iter().filter(|&&v| s.labels()[v] == 1).count();
        ensure((p as f64 - 1062.0 * frac).abs() <= 1.0, format!("{split:?} has {p} positives, target {}", 1062.0 * frac))?;
        sizes.push(nodes.len());
        positives.push(p);
    }
    ensure(sizes == [2856, 952, 952], format!("sizes {sizes:?}"))?;
    Ok(format!(
        "sizes {sizes:?}, positives {positives:?} vs proportional 637.2/212.4/212.4"
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut min_loss = f64::INFINITY;
    for i in 0..10_000 {
        // include the exact endpoints, which exercise the clamp
        let p: f64 = match i {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..=1.0),
        };
        let y = u8::from(rng.random_bool(0.5));
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let bce = if y == 1 { -pc.ln() } else { -(1.0 - pc).ln() };
        worst = worst.max((pointwise_loss(p, y, &LossConfig::focal(0.5, 0.0)) - 0.5 * bce).abs());
        let alpha = rng.random_range(0.0..=1.0);
        let gamma = rng.random_range(0.0..5.0);
        let w = rng.random_range(0.01..20.0);
        for cfg in [LossConfig::bce(), LossConfig::wbce(Some(w)), LossConfig::focal(alpha, gamma)] {
            let l = pointwise_loss(p, y, &cfg);
            ensure(l.is_finite(), format!("{:?} not finite at p={p}", cfg.kind))?;
            min_loss = min_loss.min(l);
        }
    }
    ensure(worst < 1e-12, format!("focal vs half BCE off by {worst:e}"))?;
    ensure(min_loss >= 0.0, format!("negative loss {min_loss}"))?;
    Ok(format!("10000 pairs, max |focal - 0.5 BCE| = {worst:.1e}, min loss {min_loss:.1e}"))
}

fn criterion_7() -> Outcome {
    let hf = HfCodeSet::default();
    let (mut positives, mut visits) = (0, 0);
    for seed in 0..200 {
        let raw = cohort_with_injected_hf(seed, 50);
        let cohort = label_cohort(&raw, &hf);
        for r in cohort.records.iter().filter(|r| r.label.is_positive()) {
            positives += 1;
            let original = raw.iter().find(|p| p.patient_id == r.patient_id).ok_or("unknown patient")?;
            let first = original.visits.iter().position(|v| hf.visit_has_hf(v)).ok_or("positive without HF visit")?;
            let cutoff = original.visits[first].ordinal;
            for v in &r.visits {
                visits += 1;
                ensure(v.ordinal < cutoff && !hf.visit_has_hf(v), format!("{} keeps visit {} at or after HF", r.patient_id, v.visit_id))?;
            }
        }
    }
    ensure(positives > 0, "no positives generated")?;
    Ok(format!("{positives} positive patients, {visits} retained visits scanned, none at or after the first HF visit"))
}

fn criterion_8(trained: &Result<Trained, String>) -> Outcome {
    let t = trained.as_ref().map_err(|e| e.clone())?;
    let detail = format!(
        "GT focal mean test F1 {:.4}, LR {:.4}, majority {:.4}, {:.0?}",
        t.f1, t.lr_f1, t.majority_f1, t.elapsed
    );
    ensure(t.f1 >= 0.60, format!("F1 below floor: {detail}"))?;
    ensure(t.f1 > t.majority_f1 && t.f1 > t.lr_f1, format!("not above baselines: {detail}"))?;
    ensure(t.elapsed < Duration::from_secs(600), format!("too slow: {detail}"))?;
    Ok(detail)
}

fn cli(args: &[&str]) -> Result<PathBuf, String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(PathBuf::from(String::from_utf8_lossy(&out.stdout).trim()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn criterion_9(tmp: &Path) -> Outcome {
    let synth = cli(&["synth", "--patients", "1500", "--out", p(&tmp.join("synth9"))])?;
    let abl = cli(&[
        "ablate",
        "--cohort",
        p(&synth.join("cohort.jsonl")),
        "--embeddings",
        p(&synth.join("embeddings.tsv")),
        "--drop",
        "diagnosis",
        "--drop",
        "procedure",
        "--drop",
        "prescription",
        "--lr",
        "0.01",
        "--patience",
        "50",
        "--out",
        p(&tmp.join("ablate9")),
    ])?;
    let rows: Value = serde_json::from_str(&fs::read_to_string(abl.join("ablation.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let drop = |name: &str| -> Result<f64, String> {
        rows.as_array()
            .and_then(|r| r.iter().find(|x| x["setting"] == name))
            .and_then(|x| x["f1_drop"].as_f64())
            .ok_or_else(|| format!("no row {name}"))
    };
    let (dx, px, rx) = (drop("drop-diagnosis")?, drop("drop-procedure")?, drop("drop-prescription")?);
    let detail = format!("F1 drop: prescription {rx:.4}, diagnosis {dx:.4}, procedure {px:.4}");
    ensure(rx > dx && rx > px, detail.clone())?;
    Ok(detail)
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn criterion_10(tmp: &Path) -> Outcome {
    let mut dirs = Vec::new();
    for name in ["run_a", "run_b"] {
        dirs.push(cli(&[
            "run",
            "--patients",
            "800",
            "--with-baselines",
            "--lr",
            "0.01",
            "--patience",
            "50",
            "--out",
            p(&tmp.join(name)),
        ])?);
    }
    let (a, b) = (read_tree(&dirs[0]), read_tree(&dirs[1]));
    ensure(a.keys().eq(b.keys()), "different file sets")?;
    for (name, bytes) in &a {
        if name == "manifest.json" {
            let strip = |raw: &[u8]| -> Value {
                let mut v: Value = serde_json::from_slice(raw).unwrap();
                let m = v.as_object_mut().unwrap();
                m.remove("started_unix");
                m.remove("finished_unix");
                v
            };
            ensure(strip(bytes) == strip(&b[name]), "manifests differ beyond timestamps")?;
        } else {
            ensure(*bytes == b[name], format!("{name} differs"))?;
        }
    }
    Ok(format!("{} artifacts byte-identical, manifests equal modulo timestamps", a.len()))
}

fn report(n: usize, name: &str, outcome: &Outcome) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // bypasses the test harness's output capture
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {tag} {name}: {detail}");
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let trained = catch_unwind(train_default_cohort).unwrap_or_else(|_| Err("training panicked".into()));
    let outcomes: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", guarded(criterion_1)),
        ("attention normalization", guarded(|| criterion_2(&trained))),
        ("metric oracles", guarded(criterion_3)),
        ("KNN graph equivalence", guarded(criterion_4)),
        ("split fidelity", guarded(criterion_5)),
        ("loss reductions", guarded(criterion_6)),
        ("leakage guard", guarded(criterion_7)),
        ("end-to-end learning", guarded(|| criterion_8(&trained))),
        ("ablation ordering", guarded(|| criterion_9(tmp.path()))),
        ("determinism", guarded(|| criterion_10(tmp.path()))),
    ];
    for (i, (name, o)) in outcomes.iter().enumerate() {
        report(i + 1, name, o);
    }
    let failed: Vec<usize> = outcomes.iter().enumerate().filter(|(_, o)| o.1.is_err()).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
