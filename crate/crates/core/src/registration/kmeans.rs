//! Seeded Lloyd k-means on 2D translation vectors and the anchor choice
//! built on it.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 2,
            iterations: 20,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<[f64; 2]>,
    pub assignments: Vec<usize>,
}

fn d2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> usize {
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate().skip(1) {
        if d2(p, *c) < d2(p, centroids[best]) {
            best = i;
        }
    }
    best
}

/// Lloyd iterations from a farthest-point initialization whose first
/// center is drawn with `seed`. Empty clusters keep their last centroid.
pub fn kmeans(points: &[[f64; 2]], k: usize, iterations: usize, seed: u64) -> Clustering {
    let k = k.clamp(1, points.len().max(1));
    if points.is_empty() {
        return Clustering {
            centroids: Vec::new(),
            assignments: Vec::new(),
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    while centroids.len() < k {
        let mut far = (0, -1.0);
        for (i, p) in points.iter().enumerate() {
            let d = centroids
                .iter()
                .map(|c| d2(*p, *c))
                .fold(f64::INFINITY, f64::min);
            if d > far.1 {
                far = (i, d);
            }
        }
        centroids.push(points[far.0]);
    }
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(*p, &centroids)).collect();
    for _ in 0..iterations {
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            sums[a][2] += 1.0;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(*p, &centroids)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Clustering {
        centroids,
        assignments,
    }
}

impl Clustering {
    /// The most populated cluster; ties go to the smaller within-cluster
    /// variance, then the lower index.
    pub fn dominant(&self, points: &[[f64; 2]]) -> usize {
        let k = self.centroids.len();
        let mut count = vec![0usize; k];
        let mut spread = vec![0.0; k];
        for (p, &a) in points.iter().zip(&self.assignments) {
            count[a] += 1;
            spread[a] += d2(*p, self.centroids[a]);
        }
        let var = |i: usize| {
            if count[i] == 0 {
                f64::INFINITY
            } else {
                spread[i] / count[i] as f64
            }
        };
        (0..k)
            .min_by(|&a, &b| {
                count[b]
                    .cmp(&count[a])
                    .then(var(a).total_cmp(&var(b)))
                    .then(a.cmp(&b))
            })
            .unwrap_or(0)
    }
}

/// Centroid of the dominant translation cluster. Entries that are `None`
/// (views that never produced a transform) are ignored.
pub fn dominant_centroid(
    translations: &[Option<[f64; 2]>],
    cfg: &KMeansConfig,
) -> Option<[f64; 2]> {
    let points: Vec<[f64; 2]> = translations.iter().flatten().copied().collect();
    if points.is_empty() {
        return None;
    }
    // k-means needs at least one point more than clusters to be informative
    let k = cfg.k.min(points.len().saturating_sub(1)).max(1);
    let clustering = kmeans(&points, k, cfg.iterations, cfg.seed);
    Some(clustering.centroids[clustering.dominant(&points)])
}

/// Picks the unused view whose translation is nearest the dominant cluster
/// centroid, returning it with that distance. Views without a translation
/// are only chosen once every view with one is used, lowest index first.
pub fn select_next_anchor(
    translations: &[Option<[f64; 2]>],
    used: &BTreeSet<usize>,
    cfg: &KMeansConfig,
) -> Result<(usize, f64)> {
    let centroid = dominant_centroid(translations, cfg);
    let mut best: Option<(usize, f64)> = None;
    if let Some(mu) = centroid {
        for (i, t) in translations.iter().enumerate() {
            let Some(t) = t else { continue };
            if used.contains(&i) {
                continue;
            }
            let d = d2(*t, mu).sqrt();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
    }
    if let Some(b) = best {
        return Ok(b);
    }
    (0..translations.len())
        .find(|i| !used.contains(i))
        .map(|i| (i, f64::INFINITY))
        .ok_or(Error::ExhaustedAnchors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn some(v: &[[f64; 2]]) -> Vec<Option<[f64; 2]>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn three_points_pick_dominant_pair() {
        // exhaustive oracle: of the three 2-way partitions of three points,
        // {(0,0),(1,1)} | {(50,50)} has the least within-cluster scatter
        let pts = [[0.0, 0.0], [1.0, 1.0], [50.0, 50.0]];
        let partitions: [[usize; 3]; 3] = [[0, 0, 1], [0, 1, 0], [1, 0, 0]];
        let sse = |p: &[usize; 3]| {
            (0..2)
                .map(|c| {
                    let m: Vec<_> = (0..3).filter(|&i| p[i] == c).map(|i| pts[i]).collect();
                    let cx = m.iter().map(|q| q[0]).sum::<f64>() / m.len() as f64;
                    let cy = m.iter().map(|q| q[1]).sum::<f64>() / m.len() as f64;
                    m.iter().map(|q| d2(*q, [cx, cy])).sum::<f64>()
                })
                .sum::<f64>()
        };
        let best = partitions
            .iter()
            .min_by(|a, b| sse(a).total_cmp(&sse(b)))
            .unwrap();
        assert_eq!(best, &[0, 0, 1]);

        let mu = dominant_centroid(&some(&pts), &KMeansConfig::default()).unwrap();
        assert_eq!(mu, [0.5, 0.5]);
        let (idx, d) =
            select_next_anchor(&some(&pts), &BTreeSet::new(), &KMeansConfig::default()).unwrap();
        assert_eq!(idx, 0);
        assert!((d - 0.5f64.hypot(0.5)).abs() < 1e-12);
    }

    #[test]
    fn single_candidate() {
        let t = some(&[[3.0, 4.0]]);
        assert_eq!(
            select_next_anchor(&t, &BTreeSet::new(), &Default::default())
                .unwrap()
                .0,
            0
        );
    }

    #[test]
    fn all_used_is_exhausted() {
        let t = some(&[[0.0, 0.0], [1.0, 0.0]]);
        let used: BTreeSet<usize> = [0, 1].into();
        assert!(matches!(
            select_next_anchor(&t, &used, &Default::default()),
            Err(Error::ExhaustedAnchors)
        ));
    }

    #[test]
    fn views_without_translation_come_last() {
        let t = vec![Some([0.0, 0.0]), None, Some([2.0, 0.0])];
        let used: BTreeSet<usize> = [0].into();
        assert_eq!(
            select_next_anchor(&t, &used, &Default::default())
                .unwrap()
                .0,
            2
        );
        let used: BTreeSet<usize> = [0, 2].into();
        assert_eq!(
            select_next_anchor(&t, &used, &Default::default())
                .unwrap()
                .0,
            1
        );
    }

    #[test]
    fn clustering_is_seed_deterministic() {
        let pts: Vec<[f64; 2]> = (0..30)
            .map(|i| [(i * 7 % 13) as f64, (i * 5 % 11) as f64])
            .collect();
        assert_eq!(kmeans(&pts, 3, 20, 1), kmeans(&pts, 3, 20, 1));
    }

    #[test]
    fn dominance_tie_prefers_tighter_cluster() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [100.0, 0.0], [100.0, 10.0]];
        let c = kmeans(&pts, 2, 20, 0);
        let dom = c.dominant(&pts);
        assert!(c.centroids[dom][0] < 50.0);
    }
}
