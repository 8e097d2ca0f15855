use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::detect::{
    detect_keypoints, extract_vesselness, DetectorConfig, Keypoint, VesselnessMap,
};
use super::kmeans::{dominant_centroid, select_next_anchor, KMeansConfig};
use super::matching::match_descriptors;
use super::ransac::{estimate_transform, PointPair, RansacConfig, RegistrationOutcome};
use crate::error::{Error, Result, Stage};
use crate::geometry::{Homography, ValidationThresholds};
use crate::subject::{to_common_space, SubjectBag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub detector: DetectorConfig,
    pub ransac: RansacConfig,
    pub validation: ValidationThresholds,
    pub kmeans: KMeansConfig,
    pub match_ratio: f64,
    pub initial_anchor: usize,
    /// After a fully valid trial, also try the next-best anchor and keep
    /// whichever configuration sits closer to its dominant cluster.
    pub extra_trial: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            ransac: RansacConfig::default(),
            validation: ValidationThresholds::default(),
            kmeans: KMeansConfig::default(),
            match_ratio: 0.8,
            initial_anchor: 0,
            extra_trial: true,
        }
    }
}

impl RegistrationConfig {
    pub fn check(&self) -> Result<()> {
        self.validation.check()?;
        if !(self.match_ratio > 0.0 && self.match_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "match_ratio {} not in (0, 1]",
                self.match_ratio
            )));
        }
        if self.kmeans.k == 0 {
            return Err(Error::Config("kmeans.k must be positive".into()));
        }
        Ok(())
    }
}

/// Per-view result of one anchor trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum PairResult {
    Anchor,
    Registered(RegistrationOutcome),
    Failed { stage: Stage, reason: String },
}

impl PairResult {
    pub fn is_valid(&self) -> bool {
        match self {
            PairResult::Anchor => true,
            PairResult::Registered(o) => o.valid,
            PairResult::Failed { .. } => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagRegistration {
    pub anchor_index: usize,
    /// One entry per view, in bag order.
    pub outcomes: Vec<PairResult>,
    /// Anchors in the order they were tried.
    pub used_anchors: Vec<usize>,
    /// Distance from the anchor to the dominant translation centroid.
    pub cluster_distance: f64,
    pub success: bool,
    pub trials: usize,
}

impl BagRegistration {
    /// View → anchor transform, if the view registered.
    pub fn transform(&self, view: usize) -> Option<Homography> {
        match self.outcomes.get(view)? {
            PairResult::Anchor => Some(Homography::identity()),
            PairResult::Registered(o) => Some(o.homography),
            PairResult::Failed { .. } => None,
        }
    }

    pub fn translations(&self) -> Vec<Option<[f64; 2]>> {
        translations(&self.outcomes)
    }
}

fn translations(outcomes: &[PairResult]) -> Vec<Option<[f64; 2]>> {
    outcomes
        .iter()
        .map(|o| match o {
            PairResult::Anchor => Some([0.0, 0.0]),
            PairResult::Registered(r) => Some([r.decomposition.tx, r.decomposition.ty]),
            PairResult::Failed { .. } => None,
        })
        .collect()
}

fn pair_seed(base: u64, anchor: usize, moving: usize) -> u64 {
    let key = ((anchor as u64) << 32) | moving as u64;
    base ^ key.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn register_keypoints(
    moving: &[Keypoint],
    anchor: &[Keypoint],
    cfg: &RegistrationConfig,
    seed: u64,
) -> Result<RegistrationOutcome> {
    if moving.is_empty() || anchor.is_empty() {
        return Err(Error::registration(Stage::Detect, "no keypoints"));
    }
    let matches = match_descriptors(moving, anchor, cfg.match_ratio);
    if matches.len() < cfg.ransac.min_correspondences {
        return Err(Error::registration(
            Stage::Match,
            format!(
                "{} matches, need {}",
                matches.len(),
                cfg.ransac.min_correspondences
            ),
        ));
    }
    let pairs: Vec<PointPair> = matches
        .iter()
        .map(|c| PointPair {
            moving: [moving[c.a].x, moving[c.a].y],
            anchor: [anchor[c.b].x, anchor[c.b].y],
        })
        .collect();
    let ransac = RansacConfig { seed, ..cfg.ransac };
    estimate_transform(&pairs, &ransac, &cfg.validation)
}

/// Detect → match → estimate → validate for one pair; the returned
/// transform maps `moving` into `anchor`.
pub fn register_pair(
    moving: &VesselnessMap,
    anchor: &VesselnessMap,
    cfg: &RegistrationConfig,
) -> Result<RegistrationOutcome> {
    let detect = |v| {
        detect_keypoints(v, &cfg.detector)
            .map_err(|e| Error::registration(Stage::Detect, e.to_string()))
    };
    let km = detect(moving)?;
    let ka = detect(anchor)?;
    register_keypoints(&km, &ka, cfg, cfg.ransac.seed)
}

struct Trial {
    anchor: usize,
    outcomes: Vec<PairResult>,
}

impl Trial {
    fn all_valid(&self) -> bool {
        self.outcomes.iter().all(PairResult::is_valid)
    }

    fn cluster_distance(&self, cfg: &KMeansConfig) -> f64 {
        dominant_centroid(&translations(&self.outcomes), cfg)
            .map(|mu| mu[0].hypot(mu[1]))
            .unwrap_or(f64::INFINITY)
    }
}

fn run_trial(
    keypoints: &[Result<Vec<Keypoint>, String>],
    anchor: usize,
    cfg: &RegistrationConfig,
) -> Trial {
    let outcomes = (0..keypoints.len())
        .map(|i| {
            if i == anchor {
                return PairResult::Anchor;
            }
            let (km, ka) = match (&keypoints[i], &keypoints[anchor]) {
                (Ok(km), Ok(ka)) => (km, ka),
                (Err(e), _) | (_, Err(e)) => {
                    return PairResult::Failed {
                        stage: Stage::Detect,
                        reason: e.clone(),
                    }
                }
            };
            match register_keypoints(km, ka, cfg, pair_seed(cfg.ransac.seed, anchor, i)) {
                Ok(o) => PairResult::Registered(o),
                Err(Error::Registration { stage, reason }) => PairResult::Failed { stage, reason },
                Err(e) => PairResult::Failed {
                    stage: Stage::Estimate,
                    reason: e.to_string(),
                },
            }
        })
        .collect();
    Trial { anchor, outcomes }
}

/// Multi-trial registration of every view onto a common anchor, switching
/// anchors by translation clustering whenever a trial has an invalid pair.
/// A bag on which every anchor fails is reported with `success == false`.
pub fn register_views(
    views: &[VesselnessMap],
    cfg: &RegistrationConfig,
) -> Result<BagRegistration> {
    if views.len() < 2 {
        return Err(Error::Argument(format!(
            "bag needs at least 2 views, got {}",
            views.len()
        )));
    }
    if cfg.initial_anchor >= views.len() {
        return Err(Error::Argument(format!(
            "initial anchor {} out of range for {} views",
            cfg.initial_anchor,
            views.len()
        )));
    }
    let keypoints: Vec<Result<Vec<Keypoint>, String>> = views
        .iter()
        .map(|v| detect_keypoints(v, &cfg.detector).map_err(|e| e.to_string()))
        .collect();

    let mut used = BTreeSet::new();
    let mut order = Vec::new();
    let mut anchor = cfg.initial_anchor;
    loop {
        used.insert(anchor);
        order.push(anchor);
        let trial = run_trial(&keypoints, anchor, cfg);
        if trial.all_valid() {
            let mut chosen = trial;
            let mut distance = chosen.cluster_distance(&cfg.kmeans);
            if cfg.extra_trial {
                if let Ok((next, _)) =
                    select_next_anchor(&translations(&chosen.outcomes), &used, &cfg.kmeans)
                {
                    used.insert(next);
                    order.push(next);
                    let second = run_trial(&keypoints, next, cfg);
                    let d2 = second.cluster_distance(&cfg.kmeans);
                    if second.all_valid() && d2 < distance {
                        chosen = second;
                        distance = d2;
                    }
                }
            }
            return Ok(BagRegistration {
                anchor_index: chosen.anchor,
                outcomes: chosen.outcomes,
                trials: order.len(),
                used_anchors: order,
                cluster_distance: distance,
                success: true,
            });
        }
        match select_next_anchor(&translations(&trial.outcomes), &used, &cfg.kmeans) {
            Ok((next, _)) => anchor = next,
            Err(Error::ExhaustedAnchors) => {
                let distance = trial.cluster_distance(&cfg.kmeans);
                return Ok(BagRegistration {
                    anchor_index: trial.anchor,
                    outcomes: trial.outcomes,
                    trials: order.len(),
                    used_anchors: order,
                    cluster_distance: distance,
                    success: false,
                });
            }
            Err(e) => return Err(e),
        }
    }
}

/// Registers every view of a bag in the working space.
pub fn register_bag(bag: &SubjectBag, cfg: &RegistrationConfig) -> Result<BagRegistration> {
    let maps = bag
        .views
        .iter()
        .map(|v| {
            let common = to_common_space(&v.prediction()?, v.kind)?;
            extract_vesselness(&common.probs)
        })
        .collect::<Result<Vec<_>>>()?;
    register_views(&maps, cfg)
}
