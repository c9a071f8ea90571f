use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SimilarityGraph, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Train, validation and test fractions.
    pub fractions: (f64, f64, f64),
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: (0.6, 0.2, 0.2),
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.fractions;
        if [a, b, c].iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::invalid("fractions", "each fraction must lie in (0, 1)"));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("fractions", format!("sum to {}, not 1", a + b + c)));
        }
        Ok(())
    }
}

/// Hamilton apportionment of `total` items by `weights`; ties favour earlier slots.
fn apportion(total: usize, weights: [f64; 3]) -> [usize; 3] {
    let sum: f64 = weights.iter().sum();
    let exact = weights.map(|w| total as f64 * w / sum);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = total - counts.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Assigns every node to train/val/test.
///
/// Mask sizes are apportioned from the node count; when stratified, each mask's
/// positives are apportioned in proportion to its size, so every mask's positive
/// count lies within one node of the global prevalence.
pub fn split_nodes(graph: &SimilarityGraph, spec: &SplitSpec) -> Result<SimilarityGraph> {
    spec.validate()?;
    let n = graph.n();
    let (a, b, c) = spec.fractions;
    let sizes = apportion(n, [a, b, c]);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut assignment = vec![Split::Train; n];

    let mut place = |nodes: &mut Vec<usize>, counts: [usize; 3], rng: &mut ChaCha8Rng| {
        nodes.shuffle(rng);
        let mut it = nodes.iter();
        for (split, count) in Split::ALL.iter().zip(counts) {
            for &v in it.by_ref().take(count) {
                assignment[v] = *split;
            }
        }
    };

    if spec.stratified {
        let mut pos: Vec<usize> = (0..n).filter(|&i| graph.labels()[i] == 1).collect();
        let mut neg: Vec<usize> = (0..n).filter(|&i| graph.labels()[i] == 0).collect();
        let pos_counts = apportion(pos.len(), sizes.map(|s| s as f64));
        let neg_counts = [0, 1, 2].map(|i| sizes[i] - pos_counts[i]);
        for (name, counts) in [("positive", pos_counts), ("negative", neg_counts)] {
            if counts[0] == 0 {
                return Err(Error::invalid(
                    "split",
                    format!("too few {name} nodes to place one in the training mask"),
                ));
            }
        }
        place(&mut pos, pos_counts, &mut rng);
        place(&mut neg, neg_counts, &mut rng);
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        place(&mut all, sizes, &mut rng);
    }

    let mut out = graph.clone();
    out.set_splits(assignment, spec.seed)?;
    Ok(out)
}
