//! Patient similarity graph: cosine KNN construction, K selection, stratified
//! transductive splits, descriptive statistics and file formats.

mod io;
mod knn;
mod kselect;
mod split;
mod stats;

pub use io::{parse_graph, read_graph, save_graph, write_dot, write_graph, DotNode};
pub use knn::{build_knn_graph, build_knn_graph_from, cosine_similarity};
pub use kselect::{select_k_by_distortion, KSelection};
pub use split::{split_nodes, SplitSpec};
pub use stats::{degree_stats, DegreeStats, GroupDegreeStats};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Undirected patient graph in compressed-row form.
///
/// Every undirected edge `{u, v}` appears in both `u`'s and `v`'s neighbour lists,
/// which are sorted and free of self-loops and duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    ids: Vec<String>,
    features: Tensor,
    labels: Vec<u8>,
    k: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
    splits: Option<Vec<Split>>,
    split_seed: u64,
}

impl SimilarityGraph {
    /// Assembles a graph from an undirected edge list. Edges may be given in either
    /// orientation; duplicates and self-loops are rejected.
    pub fn from_edges(
        ids: Vec<String>,
        features: Tensor,
        labels: Vec<u8>,
        k: usize,
        edges: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let n = ids.len();
        if features.rows() != n || labels.len() != n {
            return Err(Error::invalid(
                "graph",
                format!(
                    "{n} ids, {} feature rows, {} labels",
                    features.rows(),
                    labels.len()
                ),
            ));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("graph", "labels must be 0 or 1"));
        }
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(Error::UnknownNode { node: u.max(v), n });
            }
            if u == v {
                return Err(Error::invalid("graph", format!("self-loop on node {u}")));
            }
            adj[u].push((v, w));
            adj[v].push((u, w));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::with_capacity(2 * edges.len());
        let mut weights = Vec::with_capacity(2 * edges.len());
        offsets.push(0);
        for (u, list) in adj.iter_mut().enumerate() {
            list.sort_by_key(|&(v, _)| v);
            if list.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::invalid("graph", format!("duplicate edge at node {u}")));
            }
            for &(v, w) in list.iter() {
                neighbors.push(v);
                weights.push(w);
            }
            offsets.push(neighbors.len());
        }
        Ok(SimilarityGraph {
            ids,
            features,
            labels,
            k,
            offsets,
            neighbors,
            weights,
            splits: None,
            split_seed: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    /// Edge similarities aligned with [`SimilarityGraph::neighbors`].
    pub fn neighbor_weights(&self, v: usize) -> &[f64] {
        &self.weights[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Undirected edges as `(u, v, similarity)` with `u < v`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .zip(self.neighbor_weights(u))
                .filter(move |(&v, _)| v > u)
                .map(move |(&v, &w)| (u, v, w))
        })
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn splits(&self) -> Option<&[Split]> {
        self.splits.as_deref()
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed
    }

    pub fn set_splits(&mut self, splits: Vec<Split>, seed: u64) -> Result<()> {
        if splits.len() != self.n() {
            return Err(Error::invalid(
                "splits",
                format!("{} assignments for {} nodes", splits.len(), self.n()),
            ));
        }
        self.splits = Some(splits);
        self.split_seed = seed;
        Ok(())
    }

    /// Boolean mask for one split; errors when the graph has not been split.
    pub fn mask(&self, split: Split) -> Result<Vec<bool>> {
        let s = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::invalid("graph", "graph has no train/val/test split"))?;
        Ok(s.iter().map(|&x| x == split).collect())
    }

    pub fn nodes_in(&self, split: Split) -> Result<Vec<usize>> {
        let s = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::invalid("graph", "graph has no train/val/test split"))?;
        Ok((0..self.n()).filter(|&i| s[i] == split).collect())
    }

    /// Same graph with nodes renumbered: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<SimilarityGraph> {
        let n = self.n();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("perm", "not a permutation of the nodes"));
        }
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut rows = Vec::with_capacity(n);
        for &old in perm {
            rows.push(self.features.row(old).to_vec());
        }
        let features = if n == 0 {
            Tensor::zeros(0, self.dim())
        } else {
            Tensor::from_rows(&rows)?
        };
        let edges: Vec<_> = self
            .edges()
            .map(|(u, v, w)| (inverse[u], inverse[v], w))
            .collect();
        let mut g = SimilarityGraph::from_edges(
            perm.iter().map(|&o| self.ids[o].clone()).collect(),
            features,
            perm.iter().map(|&o| self.labels[o]).collect(),
            self.k,
            &edges,
        )?;
        if let Some(s) = &self.splits {
            g.set_splits(perm.iter().map(|&o| s[o]).collect(), self.split_seed)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path4() -> SimilarityGraph {
        SimilarityGraph::from_edges(
            (0..4).map(|i| format!("n{i}")).collect(),
            Tensor::zeros(4, 2),
            vec![0, 1, 0, 1],
            1,
            &[(1, 0, 0.5), (1, 2, 0.25), (2, 3, 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn csr_layout_is_symmetric_and_sorted() {
        let g = path4();
        assert_eq!(g.num_edges(), 3);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbor_weights(1), &[0.5, 0.25]);
        assert!(g.has_edge(3, 2) && g.has_edge(2, 3));
        let e: Vec<_> = g.edges().collect();
        assert_eq!(e, vec![(0, 1, 0.5), (1, 2, 0.25), (2, 3, 1.0)]);
    }

    #[test]
    fn rejects_self_loops_and_duplicates() {
        let mk = |edges: &[(usize, usize, f64)]| {
            SimilarityGraph::from_edges(
                vec!["a".into(), "b".into()],
                Tensor::zeros(2, 1),
                vec![0, 1],
                1,
                edges,
            )
        };
        assert!(mk(&[(0, 0, 1.0)]).is_err());
        assert!(mk(&[(0, 1, 1.0), (1, 0, 1.0)]).is_err());
        assert!(mk(&[(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn permutation_relabels_edges() {
        let g = path4();
        let p = g.permuted(&[3, 2, 1, 0]).unwrap();
        assert_eq!(p.ids()[0], "n3");
        assert!(p.has_edge(0, 1) && p.has_edge(2, 3) && p.has_edge(1, 2));
        assert_eq!(p.labels(), &[1, 0, 1, 0]);
    }
}
