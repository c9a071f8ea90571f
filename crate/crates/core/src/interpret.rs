//! Interpretability over a trained model: outcome groups, attention statistics,
//! code-frequency profiles, neighbourhoods and per-patient dossiers.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{CodeKind, PatientRecord};
use crate::error::{Error, Result};
use crate::gnn::{AttentionDump, AttentionEntry};
use crate::graph::{write_dot, DotNode, SimilarityGraph, Split};
use crate::metrics::{ConfusionMatrix, Outcome};

pub const HISTOGRAM_BINS: usize = 20;

/// Outcome group of every test-mask node.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub threshold: f64,
    pub groups: BTreeMap<usize, Outcome>,
}

impl GroupAssignment {
    pub fn group_of(&self, node: usize) -> Option<Outcome> {
        self.groups.get(&node).copied()
    }

    pub fn members(&self, group: Outcome) -> Vec<usize> {
        self.groups
            .iter()
            .filter(|(_, &g)| g == group)
            .map(|(&v, _)| v)
            .collect()
    }

    pub fn confusion(&self) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for g in self.groups.values() {
            match g {
                Outcome::TP => cm.tp += 1,
                Outcome::TN => cm.tn += 1,
                Outcome::FP => cm.fp += 1,
                Outcome::FN => cm.fn_ += 1,
            }
        }
        cm
    }
}

pub fn assign_groups(graph: &SimilarityGraph, probabilities: &[f64], threshold: f64) -> Result<GroupAssignment> {
    if probabilities.len() != graph.n() {
        return Err(Error::shape(
            "assign_groups",
            format!("{} probabilities for {} nodes", probabilities.len(), graph.n()),
        ));
    }
    let test = graph.nodes_in(Split::Test)?;
    if test.is_empty() {
        return Err(Error::EmptyMask("test"));
    }
    let groups = test
        .into_iter()
        .map(|v| (v, Outcome::of(probabilities[v] >= threshold, graph.labels()[v])))
        .collect();
    Ok(GroupAssignment { threshold, groups })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAttention {
    pub group: Outcome,
    pub nodes: usize,
    /// Incoming attention entries, self-loops included.
    pub edges: usize,
    /// Head-averaged weights binned over `[0, 1]`.
    pub histogram: Vec<usize>,
    /// Mean weight a node gives to positive / negative neighbours (self excluded).
    pub mean_to_positive: Option<f64>,
    pub mean_to_negative: Option<f64>,
    pub mean_self: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub groups: Vec<GroupAttention>,
    pub notes: Vec<String>,
}

fn bin(w: f64) -> usize {
    ((w.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per-group histograms of incoming attention and mean weight by neighbour label.
pub fn attention_summary(dump: &AttentionDump, groups: &GroupAssignment, labels: &[u8]) -> Result<AttentionSummary> {
    let weights = dump.mean_weights();
    let mut incoming: HashMap<usize, Vec<usize>> = HashMap::new();
    for (e, &t) in dump.target.iter().enumerate() {
        incoming.entry(t).or_default().push(e);
    }
    for &v in groups.groups.keys() {
        if !incoming.contains_key(&v) {
            return Err(Error::invalid("attention", format!("dump has no entries for test node {v}")));
        }
    }
    let mut out = Vec::new();
    let mut notes = Vec::new();
    for group in Outcome::ALL {
        let members = groups.members(group);
        let edges: Vec<usize> = members.iter().flat_map(|v| incoming[v].iter().copied()).collect();
        if edges.is_empty() {
            notes.push(format!("group {group} has no attention edges; omitted"));
            continue;
        }
        let mut histogram = vec![0; HISTOGRAM_BINS];
        let (mut to_pos, mut to_neg, mut to_self) = (Vec::new(), Vec::new(), Vec::new());
        for &e in &edges {
            let w = weights[e];
            histogram[bin(w)] += 1;
            let s = dump.source[e];
            if s == dump.target[e] {
                to_self.push(w);
            } else if labels.get(s).copied() == Some(1) {
                to_pos.push(w);
            } else {
                to_neg.push(w);
            }
        }
        out.push(GroupAttention {
            group,
            nodes: members.len(),
            edges: edges.len(),
            histogram,
            mean_to_positive: mean(&to_pos),
            mean_to_negative: mean(&to_neg),
            mean_self: mean(&to_self),
        });
    }
    Ok(AttentionSummary { groups: out, notes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub code: String,
    pub kind: CodeKind,
    /// Fraction of each group's patients with the code, in `Outcome::ALL` order.
    pub frequency: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub group_sizes: [usize; 4],
    pub rows: Vec<FrequencyRow>,
    pub notes: Vec<String>,
}

impl FrequencyTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "code,kind,TP,TN,FP,FN")?;
        for r in &self.rows {
            let f = r.frequency;
            writeln!(w, "{},{},{},{},{},{}", r.code, r.kind.as_str(), f[0], f[1], f[2], f[3])?;
        }
        Ok(())
    }
}

fn records_by_id(records: &[PatientRecord]) -> HashMap<&str, &PatientRecord> {
    records.iter().map(|r| (r.patient_id.as_str(), r)).collect()
}

fn record_of<'a>(graph: &SimilarityGraph, by_id: &HashMap<&str, &'a PatientRecord>, v: usize) -> Result<&'a PatientRecord> {
    by_id
        .get(graph.ids()[v].as_str())
        .copied()
        .ok_or_else(|| Error::invalid("records", format!("no record for patient {}", graph.ids()[v])))
}

/// Share of each group's patients having each code; the `top_n` codes by maximum
/// share across groups, grouped by code kind.
pub fn code_frequency(
    graph: &SimilarityGraph,
    records: &[PatientRecord],
    groups: &GroupAssignment,
    top_n: usize,
) -> Result<FrequencyTable> {
    let by_id = records_by_id(records);
    let mut counts: BTreeMap<(CodeKind, String), [usize; 4]> = BTreeMap::new();
    let mut sizes = [0usize; 4];
    for (&v, &g) in &groups.groups {
        let gi = Outcome::ALL.iter().position(|&o| o == g).expect("group");
        sizes[gi] += 1;
        for code in record_of(graph, &by_id, v)?.distinct_codes() {
            counts.entry((code.kind(), code.value().to_string())).or_insert([0; 4])[gi] += 1;
        }
    }
    let mut notes = Vec::new();
    for (i, &s) in sizes.iter().enumerate() {
        if s == 0 {
            notes.push(format!("group {} is empty; its column is zero", Outcome::ALL[i]));
        }
    }
    let mut rows: Vec<FrequencyRow> = counts
        .into_iter()
        .map(|((kind, code), c)| FrequencyRow {
            code,
            kind,
            frequency: [0, 1, 2, 3].map(|i| if sizes[i] == 0 { 0.0 } else { c[i] as f64 / sizes[i] as f64 }),
        })
        .collect();
    let peak = |r: &FrequencyRow| r.frequency.iter().copied().fold(0.0, f64::max);
    rows.sort_by(|a, b| peak(b).total_cmp(&peak(a)).then_with(|| a.code.cmp(&b.code)));
    rows.truncate(top_n);
    rows.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then_with(|| peak(b).total_cmp(&peak(a)))
            .then_with(|| a.code.cmp(&b.code))
    });
    Ok(FrequencyTable {
        group_sizes: sizes,
        rows,
        notes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodNode {
    pub node: usize,
    pub patient_id: String,
    pub hop: usize,
    pub label: u8,
    pub group: Option<Outcome>,
    pub probability: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub center: usize,
    pub hops: usize,
    /// Sorted by node index.
    pub nodes: Vec<NeighborhoodNode>,
    /// Induced edges `(u, v, similarity)` with `u < v`.
    pub edges: Vec<(usize, usize, f64)>,
    /// Final-layer attention on edges incident to the center.
    pub attention: Vec<AttentionEntry>,
}

/// Breadth-first neighbourhood of `center` up to `hops` (1 or 2).
pub fn extract_neighborhood(
    graph: &SimilarityGraph,
    center: usize,
    hops: usize,
    groups: Option<&GroupAssignment>,
    probabilities: Option<&[f64]>,
    dump: Option<&AttentionDump>,
) -> Result<Neighborhood> {
    if center >= graph.n() {
        return Err(Error::UnknownNode { node: center, n: graph.n() });
    }
    if !(1..=2).contains(&hops) {
        return Err(Error::invalid("hops", "must be 1 or 2"));
    }
    let mut dist: BTreeMap<usize, usize> = BTreeMap::new();
    dist.insert(center, 0);
    let mut queue = VecDeque::from([center]);
    while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        if d == hops {
            continue;
        }
        for &u in graph.neighbors(v) {
            if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(u) {
                e.insert(d + 1);
                queue.push_back(u);
            }
        }
    }
    let nodes = dist
        .iter()
        .map(|(&v, &hop)| NeighborhoodNode {
            node: v,
            patient_id: graph.ids()[v].clone(),
            hop,
            label: graph.labels()[v],
            group: groups.and_then(|g| g.group_of(v)),
            probability: probabilities.map(|p| p[v]),
        })
        .collect();
    let mut edges = Vec::new();
    for &v in dist.keys() {
        for (&u, &w) in graph.neighbors(v).iter().zip(graph.neighbor_weights(v)) {
            if v < u && dist.contains_key(&u) {
                edges.push((v, u, w));
            }
        }
    }
    edges.sort_by_key(|a| (a.0, a.1));
    let attention = dump.map_or_else(Vec::new, |d| {
        d.entries()
            .filter(|e| e.target == center || e.source == center)
            .collect()
    });
    Ok(Neighborhood {
        center,
        hops,
        nodes,
        edges,
        attention,
    })
}

impl Neighborhood {
    /// DOT export; edges into the center carry the head-averaged attention weight.
    pub fn write_dot<W: Write>(&self, w: W) -> std::io::Result<()> {
        let dot_nodes: Vec<DotNode> = self
            .nodes
            .iter()
            .map(|n| DotNode {
                node: n.node,
                label: n.label,
                group: n.group,
                probability: n.probability,
                highlight: n.node == self.center,
            })
            .collect();
        let mut into_center: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for e in self.attention.iter().filter(|e| e.target == self.center) {
            let slot = into_center.entry(e.source).or_insert((0.0, 0));
            slot.0 += e.weight;
            slot.1 += 1;
        }
        let edges: Vec<(usize, usize, Option<f64>)> = self
            .edges
            .iter()
            .map(|&(u, v, _)| {
                let other = if u == self.center {
                    Some(v)
                } else if v == self.center {
                    Some(u)
                } else {
                    None
                };
                let att = other.and_then(|o| into_center.get(&o)).map(|&(s, c)| s / c as f64);
                (u, v, att)
            })
            .collect();
        write_dot(w, &format!("neighborhood_{}", self.center), &dot_nodes, &edges)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeCount {
    pub code: String,
    pub kind: CodeKind,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub patient_id: String,
    pub node: usize,
    pub label: u8,
    pub group: Outcome,
    pub probability: f64,
    pub threshold: f64,
    pub neighborhood: Neighborhood,
    /// Center's codes by number of visits containing them.
    pub center_codes: Vec<CodeCount>,
    /// Codes by number of neighbours (excluding the center) having them.
    pub neighbor_codes: Vec<CodeCount>,
    pub neighbor_label_counts: [usize; 2],
}

fn top_counts(counts: BTreeMap<(CodeKind, String), usize>, top: usize) -> Vec<CodeCount> {
    let mut v: Vec<CodeCount> = counts
        .into_iter()
        .map(|((kind, code), count)| CodeCount { code, kind, count })
        .collect();
    v.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.code.cmp(&b.code)));
    v.truncate(top);
    v
}

/// Dossier combining a test node's neighbourhood, attention, prediction and codes.
#[allow(clippy::too_many_arguments)]
pub fn instance_report(
    graph: &SimilarityGraph,
    records: &[PatientRecord],
    center: usize,
    hops: usize,
    probabilities: &[f64],
    groups: &GroupAssignment,
    dump: Option<&AttentionDump>,
    top_codes: usize,
) -> Result<InstanceReport> {
    let neighborhood = extract_neighborhood(graph, center, hops, Some(groups), Some(probabilities), dump)?;
    let group = groups
        .group_of(center)
        .ok_or_else(|| Error::invalid("center", format!("node {center} is not in the test mask")))?;
    let by_id = records_by_id(records);
    let mut center_counts = BTreeMap::new();
    for visit in &record_of(graph, &by_id, center)?.visits {
        for c in &visit.codes {
            *center_counts.entry((c.kind(), c.value().to_string())).or_insert(0) += 1;
        }
    }
    let mut neighbor_counts = BTreeMap::new();
    let mut label_counts = [0, 0];
    for n in neighborhood.nodes.iter().filter(|n| n.node != center) {
        label_counts[usize::from(n.label)] += 1;
        let codes: BTreeSet<_> = record_of(graph, &by_id, n.node)?
            .distinct_codes()
            .into_iter()
            .map(|c| (c.kind(), c.value().to_string()))
            .collect();
        for key in codes {
            *neighbor_counts.entry(key).or_insert(0) += 1;
        }
    }
    Ok(InstanceReport {
        patient_id: graph.ids()[center].clone(),
        node: center,
        label: graph.labels()[center],
        group,
        probability: probabilities[center],
        threshold: groups.threshold,
        neighborhood,
        center_codes: top_counts(center_counts, top_codes),
        neighbor_codes: top_counts(neighbor_counts, top_codes),
        neighbor_label_counts: label_counts,
    })
}

/// One seeded random test node per non-empty group.
pub fn pick_instances(groups: &GroupAssignment, seed: u64) -> Vec<(Outcome, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Outcome::ALL
        .iter()
        .filter_map(|&g| groups.members(g).choose(&mut rng).map(|&v| (g, v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::ehr::{Label, MedicalCode, Visit};

    fn star() -> SimilarityGraph {
        let edges: Vec<_> = (1..5).map(|v| (0, v, 0.5)).collect();
        let mut g = SimilarityGraph::from_edges(
            (0..6).map(|i| format!("P{i}")).collect(),
            Tensor::zeros(6, 1),
            vec![1, 1, 0, 0, 1, 0],
            1,
            &edges,
        )
        .unwrap();
        g.set_splits(vec![Split::Test; 6], 0).unwrap();
        g
    }

    fn uniform_dump(g: &SimilarityGraph) -> AttentionDump {
        let idx = crate::gnn::GraphIndex::new(g);
        let edges: Vec<(usize, usize)> = idx.attention_edges().collect();
        let weights = edges
            .iter()
            .map(|&(_, t)| 1.0 / (g.degree(t) + 1) as f64)
            .collect();
        AttentionDump {
            source: edges.iter().map(|e| e.0).collect(),
            target: edges.iter().map(|e| e.1).collect(),
            weights: Tensor::column(weights),
        }
    }

    #[test]
    fn groups_match_confusion() {
        let g = star();
        let probs = [0.9, 0.2, 0.7, 0.1, 0.6, 0.4];
        let a = assign_groups(&g, &probs, 0.5).unwrap();
        let mask = vec![true; 6];
        let cm = crate::metrics::confusion(&probs, g.labels(), &mask, 0.5).unwrap();
        assert_eq!(a.confusion(), cm);
    }

    #[test]
    fn uniform_attention_means() {
        let g = star();
        let a = assign_groups(&g, &[0.9, 0.9, 0.1, 0.1, 0.9, 0.1], 0.5).unwrap();
        let s = attention_summary(&uniform_dump(&g), &a, g.labels()).unwrap();
        let tp = s.groups.iter().find(|x| x.group == Outcome::TP).unwrap();
        // TP = {0, 1, 4}: center has 5 entries of 0.2, leaves 2 entries of 0.5 each
        assert_eq!(tp.edges, 9);
        assert_eq!(tp.histogram[4], 5);
        assert_eq!(tp.histogram[10], 4);
        assert_eq!(tp.mean_self, Some((0.2 + 0.5 + 0.5) / 3.0));
        assert!(s.notes.iter().any(|n| n.contains("FP")));
    }

    #[test]
    fn neighborhood_of_star() {
        let g = star();
        let n = extract_neighborhood(&g, 0, 1, None, None, None).unwrap();
        assert_eq!(n.nodes.iter().map(|x| x.node).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let iso = extract_neighborhood(&g, 5, 2, None, None, None).unwrap();
        assert_eq!(iso.nodes.len(), 1);
        assert!(iso.edges.is_empty());
        assert!(matches!(extract_neighborhood(&g, 9, 1, None, None, None), Err(Error::UnknownNode { .. })));
        let two = extract_neighborhood(&g, 1, 2, None, None, Some(&uniform_dump(&g))).unwrap();
        assert_eq!(two.nodes.len(), 5);
        assert_eq!(two.nodes[2].hop, 2);
        let mut buf = Vec::new();
        two.write_dot(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("n0 -- n1 [label=\"0.500\""));
    }

    fn record(id: &str, codes: &[&str]) -> PatientRecord {
        let codes: Vec<MedicalCode> = codes.iter().map(|c| MedicalCode::new(CodeKind::Diagnosis, *c).unwrap()).collect();
        PatientRecord {
            patient_id: id.into(),
            visits: vec![Visit::new(format!("{id}-0"), 0, codes)],
            label: Label::Negative,
        }
    }

    #[test]
    fn frequency_and_dossier() {
        let g = star();
        let probs = [0.9, 0.9, 0.1, 0.1, 0.9, 0.1];
        let a = assign_groups(&g, &probs, 0.5).unwrap();
        let records: Vec<_> = (0..6)
            .map(|i| {
                if [0, 1, 4].contains(&i) {
                    record(&format!("P{i}"), &["X1", "X2"])
                } else {
                    record(&format!("P{i}"), &["X2"])
                }
            })
            .collect();
        let t = code_frequency(&g, &records, &a, 50).unwrap();
        assert_eq!(t.rows[0].code, "X1");
        assert_eq!(t.rows[0].frequency, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.rows[1].frequency, [1.0, 1.0, 0.0, 0.0]);
        assert!(!t.rows.iter().any(|r| r.code == "X3"));

        let d = instance_report(&g, &records, 0, 1, &probs, &a, None, 5).unwrap();
        assert_eq!(d.group, Outcome::TP);
        assert!(d.probability >= d.threshold);
        assert_eq!(d.neighborhood, extract_neighborhood(&g, 0, 1, Some(&a), Some(&probs), None).unwrap());
        assert_eq!(d.neighbor_label_counts, [2, 2]);
        let picks = pick_instances(&a, 3);
        assert_eq!(picks.len(), 2);
    }
}
