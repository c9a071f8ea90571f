use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SimilarityGraph;
use crate::error::{Error, Result};
use crate::metrics::Outcome;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDegreeStats {
    pub group: Outcome,
    pub nodes: usize,
    pub mean_degree: f64,
    pub median_degree: f64,
    pub max_degree: usize,
    /// Mean over the group's non-isolated nodes of their mean edge similarity.
    pub mean_neighbor_similarity: Option<f64>,
    /// degree -> node count
    pub degree_histogram: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub groups: Vec<GroupDegreeStats>,
    pub notes: Vec<String>,
}

/// Degree and neighbour-similarity summary per classification group.
pub fn degree_stats<I>(graph: &SimilarityGraph, assignment: I) -> Result<DegreeStats>
where
    I: IntoIterator<Item = (usize, Outcome)>,
{
    let mut members: BTreeMap<Outcome, Vec<usize>> = BTreeMap::new();
    for (node, group) in assignment {
        if node >= graph.n() {
            return Err(Error::UnknownNode { node, n: graph.n() });
        }
        members.entry(group).or_default().push(node);
    }
    let mut groups = Vec::new();
    let mut notes = Vec::new();
    for group in Outcome::ALL {
        let Some(nodes) = members.get(&group).filter(|m| !m.is_empty()) else {
            notes.push(format!("group {group} is empty; omitted"));
            continue;
        };
        let mut degrees: Vec<usize> = nodes.iter().map(|&v| graph.degree(v)).collect();
        degrees.sort_unstable();
        let mut histogram = BTreeMap::new();
        for &d in &degrees {
            *histogram.entry(d).or_insert(0) += 1;
        }
        let m = degrees.len();
        let median = if m % 2 == 1 {
            degrees[m / 2] as f64
        } else {
            (degrees[m / 2 - 1] + degrees[m / 2]) as f64 / 2.0
        };
        let sims: Vec<f64> = nodes
            .iter()
            .filter(|&&v| graph.degree(v) > 0)
            .map(|&v| {
                let w = graph.neighbor_weights(v);
                w.iter().sum::<f64>() / w.len() as f64
            })
            .collect();
        groups.push(GroupDegreeStats {
            group,
            nodes: m,
            mean_degree: degrees.iter().sum::<usize>() as f64 / m as f64,
            median_degree: median,
            max_degree: *degrees.last().expect("non-empty"),
            mean_neighbor_similarity: (!sims.is_empty())
                .then(|| sims.iter().sum::<f64>() / sims.len() as f64),
            degree_histogram: histogram,
        });
    }
    Ok(DegreeStats { groups, notes })
}
