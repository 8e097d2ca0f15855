use super::detect::Keypoint;

/// Index pair into the two keypoint lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest and second-nearest squared distances from `q` into `set`.
fn two_nearest(q: &[f64], set: &[Keypoint]) -> Option<(usize, f64, f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (i, k) in set.iter().enumerate() {
        let d = sq_dist(q, &k.descriptor);
        if d < best.1 {
            second = best.1;
            best = (i, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1, second))
}

/// Mutual nearest neighbours under Euclidean descriptor distance whose
/// nearest/second-nearest distance ratio is below `ratio` in both
/// directions.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Vec<Correspondence> {
    let r2 = ratio * ratio;
    let back: Vec<Option<(usize, f64, f64)>> =
        b.iter().map(|k| two_nearest(&k.descriptor, a)).collect();
    let mut out = Vec::new();
    for (i, ka) in a.iter().enumerate() {
        let Some((j, d, second)) = two_nearest(&ka.descriptor, b) else {
            continue;
        };
        let Some((back_i, _, back_second)) = back[j] else {
            continue;
        };
        if back_i != i {
            continue;
        }
        let passes = |second: f64| second.is_infinite() || d < r2 * second;
        if passes(second) && passes(back_second) {
            out.push(Correspondence {
                a: i,
                b: j,
                distance: d.sqrt(),
            });
        }
    }
    out
}
