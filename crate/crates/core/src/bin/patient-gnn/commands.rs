use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use patient_gnn::autodiff::Tensor;
use patient_gnn::baselines::{BaselineConfig, BaselineKind};
use patient_gnn::ehr::{label_cohort, load_embeddings, parse_vectors, read_cohort, represent_cohort, write_vectors, CodeKind, HfCodeSet, PatientRecord};
use patient_gnn::gnn::{load_checkpoint, save_checkpoint, GnnModel, NodeModel, Prediction};
use patient_gnn::graph::{build_knn_graph, degree_stats, read_graph, select_k_by_distortion, split_nodes, write_graph, KSelection, SimilarityGraph, Split, SplitSpec};
use patient_gnn::interpret::{assign_groups, attention_summary, code_frequency, instance_report, pick_instances, GroupAssignment};
use patient_gnn::metrics::{evaluate, pr_curve, roc_curve, write_curve, MetricReport};
use patient_gnn::pipeline::{prepare, run_baseline, summarise, train_gnn, ArchSpec, KChoice, SeedSummary};
use patient_gnn::synth::{generate, SynthCohort, SynthConfig};
use patient_gnn::train::{mean_std, write_seed_summary, LossConfig, LossKind, SeedResult, TrainConfig, SEEDS_PER_RUN};
use patient_gnn::{Error, Result};
use serde::Serialize;

use crate::manifest::{RunDir, RunSpec};
use crate::*;

type Seeds = BTreeMap<String, u64>;

fn seeds<const N: usize>(pairs: [(&str, u64); N]) -> Seeds {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn train_seeds_of(t: &TrainOpts) -> [(&'static str, u64); 3] {
    [("train_seed_0", t.train_seed), ("train_seed_1", t.train_seed + 1), ("train_seed_2", t.train_seed + 2)]
}

pub fn dispatch(cli: &Cli) -> Result<PathBuf> {
    let config = serde_json::to_value(&cli.command)?;
    let open = |command: &str, seeds: Seeds, inputs: Vec<PathBuf>| {
        RunDir::create(RunSpec {
            command,
            config: config.clone(),
            seeds,
            inputs,
            root: &cli.out_root,
            out: cli.out.as_deref(),
            force: cli.force,
        })
    };
    match &cli.command {
        Command::Synth(a) => {
            let mut run = open("synth", seeds([("synth_seed", a.synth.seed)]), vec![])?;
            synth(&mut run, &a.synth)?;
            run.finish()
        }
        Command::Represent(a) => {
            let mut run = open("represent", Seeds::new(), vec![a.cohort.clone(), a.embeddings.clone()])?;
            let records = labeled_records(&a.cohort, &a.hf)?;
            let store = load_embeddings(&a.embeddings)?;
            let rep = represent_cohort(&records, &store, &a.kinds);
            if rep.vectors.is_empty() {
                return Err(Error::invalid("cohort", "no representable patients"));
            }
            run.write_with("vectors.tsv", |w| write_vectors(&rep.vectors, w))?;
            run.write_json("coverage.json", &rep.coverage)?;
            run.finish()
        }
        Command::Graph(a) => {
            let mut run = open("graph", seeds([("kselect_seed", a.kselect_seed)]), vec![a.vectors.clone()])?;
            let text = std::fs::read_to_string(&a.vectors).map_err(|e| Error::Io { path: a.vectors.clone(), source: e })?;
            let vectors = parse_vectors(text.as_bytes(), &a.vectors.display().to_string())?;
            let k = match a.k.select_k {
                None => a.k.k,
                Some(r) => {
                    let rows: Vec<&[f64]> = vectors.iter().map(|v| v.features.as_slice()).collect();
                    let sel = select_k_by_distortion(&Tensor::from_rows(&rows)?, r.min..=r.max, a.kselect_seed)?;
                    write_kselect(&mut run, &sel)?;
                    sel.chosen
                }
            };
            let graph = build_knn_graph(&vectors, k)?;
            run.write_with("graph.txt", |w| write_graph(&graph, w))?;
            run.finish()
        }
        Command::Split(a) => {
            let mut run = open("split", seeds([("split_seed", a.split.split_seed)]), vec![a.graph.clone()])?;
            let graph = split_nodes(&read_graph(&a.graph)?, &split_spec(&a.split)?)?;
            run.write_with("graph.txt", |w| write_graph(&graph, w))?;
            run.write_json("split_counts.json", &split_counts(&graph)?)?;
            run.finish()
        }
        Command::Train(a) => {
            let mut run = open("train", seeds(train_seeds_of(&a.train)), vec![a.graph.clone()])?;
            let graph = read_graph(&a.graph)?;
            train_and_record(&mut run, &graph, &a.model, &a.loss, &a.train)?;
            run.finish()
        }
        Command::Evaluate(a) => {
            let mut run = open("evaluate", Seeds::new(), vec![a.graph.clone(), a.checkpoint.clone()])?;
            let graph = read_graph(&a.graph)?;
            let mut model = load_checkpoint(&a.checkpoint)?;
            if let Some(t) = a.threshold {
                model.set_threshold(t)?;
            }
            let pred = model.predict(&graph)?;
            let mask = graph.mask(parse_split(&a.split)?)?;
            let report = evaluate(&pred.probabilities, graph.labels(), &mask, model.threshold())?;
            run.write_json("metrics.json", &report)?;
            write_predictions(&mut run, &graph, &pred.probabilities, model.threshold())?;
            run.finish()
        }
        Command::Benchmark(a) => {
            let mut run = open("benchmark", seeds(train_seeds_of(&a.train)), vec![a.graph.clone()])?;
            let graph = read_graph(&a.graph)?;
            benchmark(&mut run, &graph, a)?;
            run.finish()
        }
        Command::Ablate(a) => {
            let s = seeds(train_seeds_of(&a.train));
            let mut s = s;
            s.insert("split_seed".into(), a.split.split_seed);
            let mut run = open("ablate", s, vec![a.cohort.clone(), a.embeddings.clone()])?;
            ablate(&mut run, a)?;
            run.finish()
        }
        Command::Interpret(a) => {
            let inputs = vec![a.graph.clone(), a.checkpoint.clone(), a.cohort.clone()];
            let mut run = open("interpret", seeds([("instance_seed", a.interpret.instance_seed)]), inputs)?;
            let graph = read_graph(&a.graph)?;
            let model = load_checkpoint(&a.checkpoint)?;
            let records = labeled_records(&a.cohort, &a.hf)?;
            let pred = model.predict(&graph)?;
            write_predictions(&mut run, &graph, &pred.probabilities, model.threshold())?;
            interpret(&mut run, &graph, &model, &pred, &records, &a.interpret)?;
            run.finish()
        }
        Command::ExportCurves(a) => {
            let mut run = open("export-curves", Seeds::new(), vec![a.graph.clone(), a.checkpoint.clone()])?;
            let graph = read_graph(&a.graph)?;
            let model = load_checkpoint(&a.checkpoint)?;
            let pred = model.predict(&graph)?;
            write_curves(&mut run, &graph, &pred.probabilities, parse_split(&a.split)?)?;
            run.finish()
        }
        Command::Run(a) => {
            let mut s = seeds(train_seeds_of(&a.train));
            s.insert("synth_seed".into(), a.synth.seed);
            s.insert("split_seed".into(), a.split.split_seed);
            s.insert("instance_seed".into(), a.interpret.instance_seed);
            let mut run = open("run", s, vec![])?;
            full_run(&mut run, a)?;
            run.finish()
        }
    }
}

fn synth_config(o: &SynthOpts) -> Result<SynthConfig> {
    let kind_signal: [f64; 3] = o
        .kind_signal
        .as_slice()
        .try_into()
        .map_err(|_| Error::invalid("kind_signal", "needs exactly three weights"))?;
    let cfg = SynthConfig {
        seed: o.seed,
        n_patients: o.patients,
        positive_rate: o.positive_rate,
        embed_dim: o.embed_dim,
        signal_strength: o.signal,
        kind_signal,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn synth(run: &mut RunDir, o: &SynthOpts) -> Result<SynthCohort> {
    let cohort = generate(&synth_config(o)?)?;
    cohort.write_to(run.dir())?;
    for name in ["cohort.jsonl", "embeddings.tsv", "truth.csv"] {
        run.output(name);
    }
    Ok(cohort)
}

fn hf_codes(o: &HfOpts) -> Result<HfCodeSet> {
    HfCodeSet::new(o.hf_prefix.iter().cloned())
}

fn labeled_records(cohort: &Path, hf: &HfOpts) -> Result<Vec<PatientRecord>> {
    let labeled = label_cohort(&read_cohort(cohort)?, &hf_codes(hf)?);
    for x in &labeled.excluded {
        log::info!("excluded {x}");
    }
    Ok(labeled.records)
}

fn write_kselect(run: &mut RunDir, sel: &KSelection) -> Result<()> {
    run.write_with("kselect.csv", |w| {
        writeln!(w, "k,distortion")?;
        for (k, d) in &sel.curve {
            writeln!(w, "{k},{d}")?;
        }
        Ok(())
    })?;
    if let Some(msg) = &sel.warning {
        log::warn!("{msg}");
    }
    run.write_json("kselect.json", sel)
}

fn split_spec(o: &SplitOpts) -> Result<SplitSpec> {
    let [a, b, c] = o.fractions[..] else {
        return Err(Error::invalid("fractions", "needs exactly three fractions"));
    };
    let spec = SplitSpec {
        fractions: (a, b, c),
        seed: o.split_seed,
        stratified: !o.unstratified,
    };
    spec.validate()?;
    Ok(spec)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" | "validation" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::invalid("split", format!("unknown mask {other:?}; use train, val or test"))),
    }
}

#[derive(Serialize)]
struct MaskCount {
    nodes: usize,
    positives: usize,
}

fn split_counts(graph: &SimilarityGraph) -> Result<BTreeMap<&'static str, MaskCount>> {
    let mut out = BTreeMap::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        let nodes = graph.nodes_in(s)?;
        let positives = nodes.iter().filter(|&&v| graph.labels()[v] == 1).count();
        out.insert(s.as_str(), MaskCount { nodes: nodes.len(), positives });
    }
    Ok(out)
}

fn arch(o: &ModelOpts) -> ArchSpec {
    ArchSpec {
        kind: o.arch,
        hidden: o.hidden,
        layers: o.layers,
        heads: o.heads,
    }
}

fn loss_config(o: &LossOpts) -> Result<LossConfig> {
    let cfg = match o.loss {
        LossKind::Bce => LossConfig::bce(),
        LossKind::Wbce => LossConfig::wbce(o.pos_weight),
        LossKind::Focal => LossConfig::focal(o.alpha, o.gamma),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(o: &TrainOpts) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        epochs: o.epochs,
        lr: o.lr,
        weight_decay: o.weight_decay,
        patience: o.patience,
        seed: o.train_seed,
        threshold: o.threshold,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    arch: &'a ArchSpec,
    loss: &'a LossConfig,
    train: &'a TrainConfig,
    /// Seed whose model has the highest validation F1 (first on ties).
    best_seed: u64,
    summary: SeedSummary,
    seeds: Vec<SeedBrief>,
}

#[derive(Serialize)]
struct SeedBrief {
    seed: u64,
    best_epoch: usize,
    best_val_f1: f64,
    test: MetricReport,
}

/// Trains three seeds and writes per-seed histories and checkpoints. Returns the
/// model with the best validation F1.
fn train_and_record(
    run: &mut RunDir,
    graph: &SimilarityGraph,
    model: &ModelOpts,
    loss: &LossOpts,
    train: &TrainOpts,
) -> Result<(Vec<SeedResult>, GnnModel)> {
    let arch = arch(model);
    let (loss_cfg, train_cfg) = (loss_config(loss)?, train_config(train)?);
    arch.model_config(graph.dim(), train.train_seed, train.threshold).validate()?;
    let trained = train_gnn(graph, &arch, &loss_cfg, &train_cfg)?;
    for (r, m) in &trained {
        run.write_with(&format!("history_seed{}.csv", r.seed), |w| r.history.write_csv(w))?;
        save_checkpoint(m, &run.output(&format!("model_seed{}.ckpt", r.seed)))?;
    }
    let results: Vec<SeedResult> = trained.iter().map(|(r, _)| r.clone()).collect();
    run.write_with("seeds.csv", |w| write_seed_summary(w, &results))?;
    let best = (1..trained.len()).fold(0, |b, i| if trained[i].0.best_val_f1 > trained[b].0.best_val_f1 { i } else { b });
    run.write_json(
        "train_summary.json",
        &TrainSummary {
            arch: &arch,
            loss: &loss_cfg,
            train: &train_cfg,
            best_seed: trained[best].0.seed,
            summary: summarise(&results),
            seeds: results
                .iter()
                .map(|r| SeedBrief { seed: r.seed, best_epoch: r.best_epoch, best_val_f1: r.best_val_f1, test: r.test.clone() })
                .collect(),
        },
    )?;
    let model = trained.into_iter().nth(best).expect("three seeds").1;
    Ok((results, model))
}

fn write_predictions(run: &mut RunDir, graph: &SimilarityGraph, probs: &[f64], threshold: f64) -> Result<()> {
    let splits = graph.splits();
    run.write_with("predictions.csv", |w| {
        writeln!(w, "node,patient_id,label,split,probability,predicted")?;
        for v in 0..graph.n() {
            let split = splits.map_or("-", |s| s[v].as_str());
            let predicted = u8::from(probs[v] >= threshold);
            writeln!(w, "{v},{},{},{split},{},{predicted}", graph.ids()[v], graph.labels()[v], probs[v])?;
        }
        Ok(())
    })
}

fn write_curves(run: &mut RunDir, graph: &SimilarityGraph, probs: &[f64], split: Split) -> Result<()> {
    let mask = graph.mask(split)?;
    let roc = roc_curve(probs, graph.labels(), &mask)?;
    let pr = pr_curve(probs, graph.labels(), &mask)?;
    run.write_with("roc.csv", |w| write_curve(w, "threshold,fpr,tpr", &roc))?;
    run.write_with("pr.csv", |w| write_curve(w, "threshold,recall,precision", &pr))
}

#[derive(Serialize)]
struct BenchRow {
    model: String,
    runs: usize,
    f1: (f64, f64),
    auroc: (f64, f64),
    auprc: (f64, f64),
    accuracy: (f64, f64),
    balanced_accuracy: (f64, f64),
    precision: (f64, f64),
    recall: (f64, f64),
}

impl BenchRow {
    fn new(model: String, reports: &[MetricReport]) -> Self {
        let pick = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
        BenchRow {
            model,
            runs: reports.len(),
            f1: pick(|m| m.f1),
            auroc: pick(|m| m.auroc),
            auprc: pick(|m| m.auprc),
            accuracy: pick(|m| m.accuracy),
            balanced_accuracy: pick(|m| m.balanced_accuracy),
            precision: pick(|m| m.precision),
            recall: pick(|m| m.recall),
        }
    }
}

fn benchmark_rows(
    graph: &SimilarityGraph,
    kinds: &[BaselineKind],
    knn_k: usize,
    loss: &LossOpts,
    train: &TrainOpts,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        let mut cfg = BaselineConfig::new(kind);
        cfg.k = knn_k;
        if kind == BaselineKind::Mlp {
            // same budget and loss as the GNN
            cfg.lr = train.lr;
            cfg.epochs = train.epochs;
            cfg.weight_decay = train.weight_decay;
            cfg.patience = train.patience;
            cfg.loss = loss_config(loss)?;
        }
        let runs = if kind == BaselineKind::Mlp { SEEDS_PER_RUN } else { 1 };
        let mut reports = Vec::new();
        for i in 0..runs {
            cfg.seed = train.train_seed + i;
            reports.push(run_baseline(graph, &cfg)?.1);
        }
        rows.push(BenchRow::new(kind.as_str().to_string(), &reports));
    }
    Ok(rows)
}

fn write_bench(run: &mut RunDir, rows: &[BenchRow]) -> Result<()> {
    run.write_with("benchmark.csv", |w| {
        writeln!(
            w,
            "model,runs,f1_mean,f1_std,auroc_mean,auroc_std,auprc_mean,auprc_std,accuracy_mean,balanced_accuracy_mean,precision_mean,recall_mean"
        )?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.model, r.runs, r.f1.0, r.f1.1, r.auroc.0, r.auroc.1, r.auprc.0, r.auprc.1, r.accuracy.0, r.balanced_accuracy.0, r.precision.0, r.recall.0
            )?;
        }
        Ok(())
    })?;
    run.write_json("benchmark.json", &rows)
}

fn benchmark(run: &mut RunDir, graph: &SimilarityGraph, a: &BenchmarkArgs) -> Result<()> {
    let (results, _) = train_and_record(run, graph, &a.model, &a.loss, &a.train)?;
    let reports: Vec<MetricReport> = results.iter().map(|r| r.test.clone()).collect();
    let mut rows = vec![BenchRow::new(format!("{}-{}", a.model.arch.as_str(), a.loss.loss.as_str()), &reports)];
    rows.extend(benchmark_rows(graph, &a.baselines, a.knn_k, &a.loss, &a.train)?);
    write_bench(run, &rows)
}

#[derive(Serialize)]
struct AblationRow {
    setting: String,
    kinds: Vec<CodeKind>,
    nodes: usize,
    edges: usize,
    f1: (f64, f64),
    auroc: (f64, f64),
    auprc: (f64, f64),
    /// Full-model mean F1 minus this setting's mean F1.
    f1_drop: f64,
}

fn ablate(run: &mut RunDir, a: &AblateArgs) -> Result<()> {
    let patients = read_cohort(&a.cohort)?;
    let store = load_embeddings(&a.embeddings)?;
    let hf = hf_codes(&a.hf)?;
    let k = match a.k.select_k {
        None => KChoice::Fixed(a.k.k),
        Some(r) => KChoice::Select { min: r.min, max: r.max },
    };
    let spec = split_spec(&a.split)?;
    let (arch, loss, train) = (arch(&a.model), loss_config(&a.loss)?, train_config(&a.train)?);

    let mut settings = vec![("all".to_string(), CodeKind::ALL.to_vec())];
    for d in &a.drop {
        settings.push((format!("drop-{d}"), CodeKind::ALL.iter().copied().filter(|k| k != d).collect()));
    }
    for o in &a.only {
        settings.push((format!("only-{o}"), vec![*o]));
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    for (setting, kinds) in settings {
        log::info!("ablation setting {setting}");
        let prep = prepare(&patients, &store, &hf, &kinds, &k, &spec)?;
        let results: Vec<SeedResult> = train_gnn(&prep.graph, &arch, &loss, &train)?.into_iter().map(|(r, _)| r).collect();
        let s = summarise(&results);
        let base = rows.first().map_or(s.f1.0, |r| r.f1.0);
        rows.push(AblationRow {
            setting,
            kinds,
            nodes: prep.graph.n(),
            edges: prep.graph.num_edges(),
            f1: s.f1,
            auroc: s.auroc,
            auprc: s.auprc,
            f1_drop: base - s.f1.0,
        });
    }
    run.write_with("ablation.csv", |w| {
        writeln!(w, "setting,kinds,nodes,edges,f1_mean,f1_std,auroc_mean,auroc_std,auprc_mean,auprc_std,f1_drop")?;
        for r in &rows {
            let kinds: Vec<&str> = r.kinds.iter().map(|k| k.as_str()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.setting, kinds.join("+"), r.nodes, r.edges, r.f1.0, r.f1.1, r.auroc.0, r.auroc.1, r.auprc.0, r.auprc.1, r.f1_drop
            )?;
        }
        Ok(())
    })?;
    run.write_json("ablation.json", &rows)
}

fn interpret(
    run: &mut RunDir,
    graph: &SimilarityGraph,
    model: &GnnModel,
    pred: &Prediction,
    records: &[PatientRecord],
    o: &InterpretOpts,
) -> Result<()> {
    let groups: GroupAssignment = assign_groups(graph, &pred.probabilities, model.threshold())?;
    run.write_with("groups.csv", |w| {
        writeln!(w, "node,patient_id,group,probability")?;
        for (&v, g) in &groups.groups {
            writeln!(w, "{v},{},{g},{}", graph.ids()[v], pred.probabilities[v])?;
        }
        Ok(())
    })?;
    let degrees = degree_stats(graph, groups.groups.iter().map(|(&v, &g)| (v, g)))?;
    run.write_json("degree_stats.json", &degrees)?;
    if let Some(dump) = &pred.attention {
        run.write_with("attention.csv", |w| dump.write_csv(w))?;
        run.write_json("attention_summary.json", &attention_summary(dump, &groups, graph.labels())?)?;
    }
    let freq = code_frequency(graph, records, &groups, o.top_n)?;
    run.write_with("code_frequency.csv", |w| freq.write_csv(w))?;
    for (group, center) in pick_instances(&groups, o.instance_seed) {
        let report = instance_report(graph, records, center, o.hops, &pred.probabilities, &groups, pred.attention.as_ref(), o.top_codes)?;
        run.write_json(&format!("dossier_{group}.json"), &report)?;
        run.write_with(&format!("neighborhood_{group}.dot"), |w| report.neighborhood.write_dot(w))?;
    }
    Ok(())
}

fn full_run(run: &mut RunDir, a: &RunArgs) -> Result<()> {
    let cohort = synth(run, &a.synth)?;
    let hf = hf_codes(&a.hf)?;
    let k = match a.k.select_k {
        None => KChoice::Fixed(a.k.k),
        Some(r) => KChoice::Select { min: r.min, max: r.max },
    };
    let prep = prepare(&cohort.patients, &cohort.embeddings, &hf, &a.kinds, &k, &split_spec(&a.split)?)?;
    run.write_with("vectors.tsv", |w| write_vectors(&prep.representation.vectors, w))?;
    run.write_json("coverage.json", &prep.representation.coverage)?;
    if let Some(sel) = &prep.k_selection {
        write_kselect(run, sel)?;
    }
    run.write_with("graph.txt", |w| write_graph(&prep.graph, w))?;
    run.write_json("split_counts.json", &split_counts(&prep.graph)?)?;

    let (results, model) = train_and_record(run, &prep.graph, &a.model, &a.loss, &a.train)?;
    let pred = model.predict(&prep.graph)?;
    let report = evaluate(&pred.probabilities, prep.graph.labels(), &prep.graph.mask(Split::Test)?, model.threshold())?;
    run.write_json("metrics.json", &report)?;
    write_predictions(run, &prep.graph, &pred.probabilities, model.threshold())?;
    write_curves(run, &prep.graph, &pred.probabilities, Split::Test)?;
    if a.with_baselines {
        let reports: Vec<MetricReport> = results.iter().map(|r| r.test.clone()).collect();
        let mut rows = vec![BenchRow::new(format!("{}-{}", a.model.arch.as_str(), a.loss.loss.as_str()), &reports)];
        rows.extend(benchmark_rows(&prep.graph, &BaselineKind::ALL, 5, &a.loss, &a.train)?);
        write_bench(run, &rows)?;
    }
    interpret(run, &prep.graph, &model, &pred, &prep.records, &a.interpret)
}
