use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAX_ITER: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub chosen: usize,
    /// `(k, distortion)` for every k in the range, ascending.
    pub curve: Vec<(usize, f64)>,
    pub warning: Option<String>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn distortion(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| nearest(p, centroids).1).sum()
}

/// Lloyd iterations; neither step can increase the distortion. Empty clusters keep
/// their previous centroid.
fn lloyd(points: &[Vec<f64>], centroids: &mut [Vec<f64>]) {
    let d = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, centroids);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((centroid, sum), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            if count > 0 {
                *centroid = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
    }
}

/// k-means++ seeding.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            centroids.push(points[rng.random_range(0..points.len())].clone());
            continue;
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = points.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

/// Runs k-means on the row-normalised features for each k and picks the elbow as
/// the k with the largest second difference of the distortion curve.
///
/// Each k starts from the previous solution plus the point farthest from its
/// centroid, so the curve is non-increasing in k.
pub fn select_k_by_distortion(
    features: &Tensor,
    k_range: RangeInclusive<usize>,
    seed: u64,
) -> Result<KSelection> {
    let (k_min, k_max) = (*k_range.start(), *k_range.end());
    if k_min == 0 || k_min > k_max {
        return Err(Error::invalid("k_range", "must be a non-empty range of positive k"));
    }
    let points: Vec<Vec<f64>> = (0..features.rows())
        .map(|i| {
            let row = features.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|x| x / norm).collect()
            } else {
                row.to_vec()
            }
        })
        .collect();
    if points.len() < k_max {
        return Err(Error::invalid(
            "k_range",
            format!("{} points cannot support {k_max} centroids", points.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&points, k_min, &mut rng);
    let mut curve = Vec::new();
    for k in k_range {
        if k > k_min {
            let far = points
                .iter()
                .map(|p| nearest(p, &centroids).1)
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc })
                .0;
            centroids.push(points[far].clone());
        }
        lloyd(&points, &mut centroids);
        curve.push((k, distortion(&points, &centroids)));
    }

    let scale = curve.iter().map(|c| c.1).fold(0.0, f64::max);
    if scale <= 1e-12 {
        let warning = "all points coincide; distortion is zero for every k".to_string();
        log::warn!("{warning}");
        return Ok(KSelection {
            chosen: k_min,
            curve,
            warning: Some(warning),
        });
    }
    let mut chosen = k_min;
    let mut best = f64::NEG_INFINITY;
    for w in curve.windows(3) {
        let second = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if second > best {
            best = second;
            chosen = w[1].0;
        }
    }
    Ok(KSelection {
        chosen,
        curve,
        warning: None,
    })
}
