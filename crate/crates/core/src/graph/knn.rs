use super::SimilarityGraph;
use crate::autodiff::Tensor;
use crate::ehr::PatientVector;
use crate::error::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn cosine_from_parts(ab: f64, aa: f64, bb: f64) -> f64 {
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

/// Cosine similarity; undefined (an error) for zero vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::invalid("cosine_similarity", "zero vector"));
    }
    Ok(cosine_from_parts(dot(a, b), aa, bb))
}

/// Builds the KNN graph over patient vectors; see [`build_knn_graph_from`].
pub fn build_knn_graph(vectors: &[PatientVector], k: usize) -> Result<SimilarityGraph> {
    let ids = vectors.iter().map(|v| v.patient_id.clone()).collect();
    let labels = vectors.iter().map(|v| v.label.bit()).collect();
    let rows: Vec<&[f64]> = vectors.iter().map(|v| v.features.as_slice()).collect();
    let features = if rows.is_empty() {
        Tensor::zeros(0, 0)
    } else {
        Tensor::from_rows(&rows)?
    };
    build_knn_graph_from(ids, features, labels, k)
}

/// Each node selects its `k` most cosine-similar other nodes (ties go to the lower
/// index); the directed selections are merged into one undirected edge set.
///
/// Similarities are evaluated one row at a time, so memory stays `O(n)` beyond the
/// feature matrix.
pub fn build_knn_graph_from(
    ids: Vec<String>,
    features: Tensor,
    labels: Vec<u8>,
    k: usize,
) -> Result<SimilarityGraph> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::invalid("k", "must be positive"));
    }
    if k >= n {
        return Err(Error::invalid("k", format!("k = {k} needs at least {} nodes, got {n}", k + 1)));
    }
    let sq: Vec<f64> = (0..n).map(|i| dot(features.row(i), features.row(i))).collect();
    if let Some(i) = sq.iter().position(|&s| s == 0.0) {
        return Err(Error::invalid("vectors", format!("node {i} has a zero feature vector")));
    }
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(n * k);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for i in 0..n {
        best.clear();
        let a = features.row(i);
        for j in (0..n).filter(|&j| j != i) {
            let s = cosine_from_parts(dot(a, features.row(j)), sq[i], sq[j]);
            // j increases monotonically, so an equal similarity never displaces
            if best.len() < k || s > best[best.len() - 1].0 {
                let pos = best.partition_point(|&(bs, _)| bs >= s);
                best.insert(pos, (s, j));
                best.truncate(k);
            }
        }
        for &(s, j) in &best {
            edges.push((i.min(j), i.max(j), s));
        }
    }
    edges.sort_by_key(|x| (x.0, x.1));
    edges.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);
    SimilarityGraph::from_edges(ids, features, labels, k, &edges)
}
