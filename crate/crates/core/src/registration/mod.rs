//! Pairwise and subject-level registration from vessel probability maps.
//!
//! A pair is registered by Harris keypoints on the vesselness map, mutual
//! nearest-neighbour descriptor matching with a ratio test, and RANSAC.
//! Subject bags are registered onto one anchor; when any pair fails
//! validation the anchor is switched to the unused view nearest the
//! dominant cluster of the failed trial's translations.

mod bag;
mod detect;
mod kmeans;
mod matching;
mod ransac;

pub use bag::{
    register_bag, register_pair, register_views, BagRegistration, PairResult, RegistrationConfig,
};
pub use detect::{
    detect_keypoints, extract_vesselness, harris_response, DetectorConfig, Keypoint, VesselnessMap,
};
pub use kmeans::{dominant_centroid, kmeans, select_next_anchor, Clustering, KMeansConfig};
pub use matching::{match_descriptors, Correspondence};
pub use ransac::{estimate_transform, PointPair, RansacConfig, RegistrationOutcome};
