//! Robust transform estimation: RANSAC over minimal samples, then least
//! squares on the consensus set.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::geometry::{
    decompose, validate, DecomposedTransform, Homography, ValidationResult, ValidationThresholds,
};

/// A matched point: `moving` in the moving image, `anchor` in the anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPair {
    pub moving: [f64; 2],
    pub anchor: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_inliers: usize,
    pub min_correspondences: usize,
    /// Fit a full 8-DOF homography instead of a 6-DOF affine.
    pub full_homography: bool,
    /// Least-squares refit / re-score rounds after sampling.
    pub refine_rounds: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            inlier_threshold_px: 3.0,
            min_inliers: 12,
            min_correspondences: 4,
            full_homography: false,
            refine_rounds: 3,
            seed: 0x0005_EED0_FA11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationOutcome {
    /// Maps moving-image coordinates into anchor coordinates.
    #[serde(with = "crate::io::homography_serde")]
    pub homography: Homography,
    pub decomposition: DecomposedTransform,
    pub validation: ValidationResult,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    pub valid: bool,
}

impl RegistrationOutcome {
    pub(crate) fn from_model(
        homography: Homography,
        inlier_count: usize,
        total: usize,
        thresholds: &ValidationThresholds,
    ) -> Result<Self> {
        let decomposition = decompose(&homography)
            .map_err(|e| Error::registration(Stage::Estimate, e.to_string()))?;
        let validation = validate(&decomposition, thresholds);
        Ok(Self {
            homography,
            decomposition,
            valid: validation.valid,
            validation,
            inlier_count,
            inlier_ratio: if total == 0 {
                0.0
            } else {
                inlier_count as f64 / total as f64
            },
        })
    }
}

fn reprojection_error(h: &Homography, p: &PointPair) -> f64 {
    let (x, y) = h.apply(p.moving[0], p.moving[1]);
    let e = (x - p.anchor[0]).hypot(y - p.anchor[1]);
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Exact affine through three pairs.
fn affine_from_three(s: [&PointPair; 3]) -> Option<Homography> {
    let a = Matrix3::from_fn(|r, c| match c {
        0 => s[r].moving[0],
        1 => s[r].moving[1],
        _ => 1.0,
    });
    // reject near-collinear samples: |det| is twice the triangle area
    if a.determinant().abs() < 1.0 {
        return None;
    }
    let lu = a.lu();
    let row0 = lu.solve(&Vector3::new(
        s[0].anchor[0],
        s[1].anchor[0],
        s[2].anchor[0],
    ))?;
    let row1 = lu.solve(&Vector3::new(
        s[0].anchor[1],
        s[1].anchor[1],
        s[2].anchor[1],
    ))?;
    Homography::affine(row0[0], row0[1], row1[0], row1[1], row0[2], row1[2]).ok()
}

/// Least-squares affine over `pairs` (centered normal equations).
pub(crate) fn fit_affine(pairs: &[PointPair]) -> Option<Homography> {
    if pairs.len() < 3 {
        return None;
    }
    let n = pairs.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for p in pairs {
        mx += p.moving[0];
        my += p.moving[1];
    }
    mx /= n;
    my /= n;
    let mut ata = Matrix3::zeros();
    let mut bu = Vector3::zeros();
    let mut bv = Vector3::zeros();
    for p in pairs {
        let row = Vector3::new(p.moving[0] - mx, p.moving[1] - my, 1.0);
        ata += row * row.transpose();
        bu += row * p.anchor[0];
        bv += row * p.anchor[1];
    }
    let chol = ata.cholesky()?;
    let u = chol.solve(&bu);
    let v = chol.solve(&bv);
    // undo the centering: x' = a (x - mx) + b (y - my) + c
    let tx = u[2] - u[0] * mx - u[1] * my;
    let ty = v[2] - v[0] * mx - v[1] * my;
    Homography::affine(u[0], u[1], v[0], v[1], tx, ty).ok()
}

fn normalizer(points: impl Iterator<Item = [f64; 2]> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (cx, cy) = points
        .clone()
        .fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
    let (cx, cy) = (cx / n, cy / n);
    let mean_dist = points.map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized DLT over four or more pairs.
pub(crate) fn fit_homography(pairs: &[PointPair]) -> Option<Homography> {
    if pairs.len() < 4 {
        return None;
    }
    let tm = normalizer(pairs.iter().map(|p| p.moving));
    let ta = normalizer(pairs.iter().map(|p| p.anchor));
    let mut a = DMatrix::<f64>::zeros(2 * pairs.len(), 9);
    for (i, p) in pairs.iter().enumerate() {
        let m = tm * Vector3::new(p.moving[0], p.moving[1], 1.0);
        let q = ta * Vector3::new(p.anchor[0], p.anchor[1], 1.0);
        let (x, y, u, v) = (m[0], m[1], q[0], q[1]);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let ata = a.transpose() * &a;
    let eig = SymmetricEigen::new(ata);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let full = ta.try_inverse()? * hn * tm;
    Homography::new(full).ok()
}

fn fit(pairs: &[PointPair], full: bool) -> Option<Homography> {
    if full {
        fit_homography(pairs)
    } else {
        fit_affine(pairs)
    }
}

fn score(h: &Homography, pairs: &[PointPair], thr: f64) -> (usize, f64) {
    pairs.iter().fold((0, 0.0), |(n, err), p| {
        let e = reprojection_error(h, p);
        if e <= thr {
            (n + 1, err + e)
        } else {
            (n, err)
        }
    })
}

fn inliers(h: &Homography, pairs: &[PointPair], thr: f64) -> Vec<PointPair> {
    pairs
        .iter()
        .filter(|p| reprojection_error(h, p) <= thr)
        .copied()
        .collect()
}

/// Fits the moving→anchor transform to `pairs` and attaches the
/// decomposition and plausibility verdict.
pub fn estimate_transform(
    pairs: &[PointPair],
    cfg: &RansacConfig,
    thresholds: &ValidationThresholds,
) -> Result<RegistrationOutcome> {
    let needed = cfg
        .min_correspondences
        .max(if cfg.full_homography { 4 } else { 3 });
    if pairs.len() < needed {
        return Err(Error::registration(
            Stage::Estimate,
            format!("{} correspondences, need {needed}", pairs.len()),
        ));
    }
    let sample_size = if cfg.full_homography { 4 } else { 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Homography, usize, f64)> = None;
    let mut idx = [0usize; 4];
    for _ in 0..cfg.iterations {
        for k in 0..sample_size {
            loop {
                let cand = rng.random_range(0..pairs.len());
                if !idx[..k].contains(&cand) {
                    idx[k] = cand;
                    break;
                }
            }
        }
        let model = if cfg.full_homography {
            fit_homography(&[pairs[idx[0]], pairs[idx[1]], pairs[idx[2]], pairs[idx[3]]])
        } else {
            affine_from_three([&pairs[idx[0]], &pairs[idx[1]], &pairs[idx[2]]])
        };
        let Some(model) = model else { continue };
        let (n, err) = score(&model, pairs, cfg.inlier_threshold_px);
        let better = match &best {
            None => true,
            Some((_, bn, berr)) => n > *bn || (n == *bn && err < *berr),
        };
        if better {
            best = Some((model, n, err));
        }
    }
    let Some((mut model, mut count, _)) = best else {
        return Err(Error::registration(
            Stage::Estimate,
            "every sample was degenerate",
        ));
    };
    if count < cfg.min_inliers {
        return Err(Error::registration(
            Stage::Estimate,
            format!("best model has {count} inliers, need {}", cfg.min_inliers),
        ));
    }

    let mut set = inliers(&model, pairs, cfg.inlier_threshold_px);
    for _ in 0..cfg.refine_rounds {
        let Some(refit) = fit(&set, cfg.full_homography) else {
            break;
        };
        let next = inliers(&refit, pairs, cfg.inlier_threshold_px);
        if next.len() < cfg.min_inliers {
            break;
        }
        let unchanged = next == set;
        model = refit;
        count = next.len();
        set = next;
        if unchanged {
            break;
        }
    }
    RegistrationOutcome::from_model(model, count, pairs.len(), thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(20.0..480.0), rng.random_range(20.0..480.0)])
            .collect()
    }

    fn pairs_under(h: &Homography, pts: &[[f64; 2]]) -> Vec<PointPair> {
        pts.iter()
            .map(|&p| {
                let (u, v) = h.apply(p[0], p[1]);
                PointPair {
                    moving: p,
                    anchor: [u, v],
                }
            })
            .collect()
    }

    #[test]
    fn planted_translation_recovered() {
        let h = Homography::translation(12.0, -7.0);
        let pairs = pairs_under(&h, &grid_points(60, 1));
        let out =
            estimate_transform(&pairs, &RansacConfig::default(), &Default::default()).unwrap();
        assert!((out.decomposition.tx - 12.0).abs() < 1e-6);
        assert!((out.decomposition.ty + 7.0).abs() < 1e-6);
        assert_eq!(out.inlier_count, 60);
        assert!(out.valid);
    }

    #[test]
    fn planted_similarity_with_outliers() {
        let h = Homography::similarity_about((256.0, 256.0), 5.0, 1.1, 1.1, (3.0, -4.0)).unwrap();
        let pts = grid_points(140, 2);
        let mut pairs = pairs_under(&h, &pts[..98]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in &pts[98..] {
            pairs.push(PointPair {
                moving: *p,
                anchor: [rng.random_range(0.0..512.0), rng.random_range(0.0..512.0)],
            });
        }
        let out =
            estimate_transform(&pairs, &RansacConfig::default(), &Default::default()).unwrap();
        assert!((out.decomposition.sx - 1.1).abs() < 0.01);
        assert!((out.decomposition.sy - 1.1).abs() < 0.01);
        assert!((out.decomposition.theta - 5.0).abs() < 0.5);
        assert!(out.inlier_count >= 98);
    }

    #[test]
    fn too_few_correspondences() {
        let pairs = pairs_under(&Homography::identity(), &grid_points(3, 3));
        let err = estimate_transform(&pairs, &RansacConfig::default(), &Default::default());
        assert!(matches!(
            err,
            Err(Error::Registration {
                stage: Stage::Estimate,
                ..
            })
        ));
    }

    #[test]
    fn full_homography_fit_recovers_perspective() {
        let h = Homography::from_rows([[1.02, 0.01, 5.0], [-0.02, 0.98, -3.0], [1e-5, -2e-5, 1.0]])
            .unwrap();
        let pairs = pairs_under(&h, &grid_points(50, 4));
        let cfg = RansacConfig {
            full_homography: true,
            ..Default::default()
        };
        let out = estimate_transform(&pairs, &cfg, &Default::default()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((out.homography.get(r, c) - h.get(r, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn seeded_ransac_is_deterministic() {
        let h = Homography::similarity_about((100.0, 100.0), 2.0, 1.0, 1.0, (1.0, 1.0)).unwrap();
        let mut pairs = pairs_under(&h, &grid_points(40, 5));
        pairs.extend(pairs_under(
            &Homography::translation(50.0, 0.0),
            &grid_points(20, 6),
        ));
        let a = estimate_transform(&pairs, &RansacConfig::default(), &Default::default()).unwrap();
        let b = estimate_transform(&pairs, &RansacConfig::default(), &Default::default()).unwrap();
        assert_eq!(a, b);
    }
}
