//! Text formats for graphs.
//!
//! Graph file layout:
//!
//! ```text
//! n d k seed
//! <id> <label> <mask> f_1 ... f_d        (n node lines)
//! <u> <v> <similarity>                   (one line per undirected edge, u < v)
//! ```
//!
//! `mask` is `train`, `val`, `test`, or `-` for an unsplit graph. Floats are written
//! in shortest round-trip form, so reading a written graph gives back the same graph.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{SimilarityGraph, Split};
use crate::autodiff::Tensor;
use crate::ehr::write_floats;
use crate::error::{Error, Result};
use crate::metrics::Outcome;

pub fn write_graph<W: Write>(graph: &SimilarityGraph, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{} {} {} {}", graph.n(), graph.dim(), graph.k(), graph.split_seed())?;
    for v in 0..graph.n() {
        let mask = graph.splits().map_or("-", |s| s[v].as_str());
        write!(w, "{} {} {}", graph.ids()[v], graph.labels()[v], mask)?;
        if graph.dim() > 0 {
            write!(w, " ")?;
            write_floats(&mut w, graph.features().row(v), ' ')?;
        }
        writeln!(w)?;
    }
    for (u, v, s) in graph.edges() {
        writeln!(w, "{u} {v} {s}")?;
    }
    Ok(())
}

pub fn parse_graph<R: BufRead>(reader: R, source: &str) -> Result<SimilarityGraph> {
    let mut lines = reader.lines().enumerate();
    let err = |line: usize, reason: String| Error::Parse {
        file: source.to_string(),
        line,
        reason,
    };
    let mut next = |what: &str| -> Result<Option<(usize, String)>> {
        match lines.next() {
            Some((i, l)) => Ok(Some((i + 1, l.map_err(|e| Error::io(source, e))?))),
            None if what.is_empty() => Ok(None),
            None => Err(err(0, format!("unexpected end of file, expected {what}"))),
        }
    };
    let (ln, header) = next("header")?.expect("header");
    let nums: Vec<u64> = header
        .split_whitespace()
        .map(|t| t.parse::<u64>().map_err(|e| err(ln, format!("bad header field {t:?}: {e}"))))
        .collect::<Result<_>>()?;
    let [n, d, k, seed] = nums[..] else {
        return Err(err(ln, "header must be `n d k seed`".into()));
    };
    let (n, d, k) = (n as usize, d as usize, k as usize);

    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    let mut masks: Vec<Option<Split>> = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, line) = next("node line")?.expect("node");
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 + d {
            return Err(err(ln, format!("{} fields, expected {}", toks.len(), 3 + d)));
        }
        ids.push(toks[0].to_string());
        labels.push(match toks[1] {
            "0" => 0,
            "1" => 1,
            t => return Err(err(ln, format!("bad label {t:?}"))),
        });
        masks.push(match toks[2] {
            "-" => None,
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            t => return Err(err(ln, format!("bad mask {t:?}"))),
        });
        for t in &toks[3..] {
            data.push(t.parse::<f64>().map_err(|e| err(ln, format!("bad float {t:?}: {e}")))?);
        }
    }
    let mut edges = Vec::new();
    while let Some((ln, line)) = next("")? {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let [u, v, s] = toks[..] else {
            return Err(err(ln, "edge line must be `u v similarity`".into()));
        };
        let node = |t: &str| t.parse::<usize>().map_err(|e| err(ln, format!("bad node {t:?}: {e}")));
        let sim = s.parse::<f64>().map_err(|e| err(ln, format!("bad similarity {s:?}: {e}")))?;
        edges.push((node(u)?, node(v)?, sim));
    }
    let features = Tensor::from_vec(n, d, data)?;
    let mut graph = SimilarityGraph::from_edges(ids, features, labels, k, &edges)?;
    let assigned = masks.iter().filter(|m| m.is_some()).count();
    if assigned == n && n > 0 {
        graph.set_splits(masks.into_iter().map(|m| m.expect("assigned")).collect(), seed)?;
    } else if assigned != 0 {
        return Err(err(0, "either every node or no node must carry a mask".into()));
    }
    Ok(graph)
}

pub fn read_graph(path: &Path) -> Result<SimilarityGraph> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_graph(BufReader::new(f), &path.display().to_string())
}

/// Node annotation for DOT export.
#[derive(Clone, Debug)]
pub struct DotNode {
    pub node: usize,
    pub label: u8,
    pub group: Option<Outcome>,
    pub probability: Option<f64>,
    pub highlight: bool,
}

fn group_color(group: Option<Outcome>) -> &'static str {
    match group {
        Some(Outcome::TP) => "#2ca02c",
        Some(Outcome::TN) => "#1f77b4",
        Some(Outcome::FP) => "#ff7f0e",
        Some(Outcome::FN) => "#9467bd",
        None => "#c7c7c7",
    }
}

/// Writes an undirected DOT graph; edges carry an optional weight shown as a label.
pub fn write_dot<W: Write>(
    mut w: W,
    name: &str,
    nodes: &[DotNode],
    edges: &[(usize, usize, Option<f64>)],
) -> std::io::Result<()> {
    writeln!(w, "graph \"{name}\" {{")?;
    writeln!(w, "  node [style=filled, shape=circle];")?;
    for n in nodes {
        write!(
            w,
            "  n{} [label=\"{}\", class={}, fillcolor=\"{}\"",
            n.node,
            n.node,
            n.label,
            group_color(n.group)
        )?;
        if let Some(g) = n.group {
            write!(w, ", group=\"{g}\"")?;
        }
        if let Some(p) = n.probability {
            write!(w, ", probability={p:.4}")?;
        }
        if n.highlight {
            write!(w, ", color=\"red\", penwidth=3")?;
        }
        writeln!(w, "];")?;
    }
    for &(u, v, weight) in edges {
        match weight {
            Some(x) => writeln!(w, "  n{u} -- n{v} [label=\"{x:.3}\", weight={x}];")?,
            None => writeln!(w, "  n{u} -- n{v};")?,
        }
    }
    writeln!(w, "}}")
}

pub fn save_graph(graph: &SimilarityGraph, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_graph(graph, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
