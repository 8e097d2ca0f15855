//! Subject bags: one subject's views across acquisition domains, and their
//! placement in the shared 512×512 working space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_offset, resize_coordinate, resize_raw, Homography};
use crate::integration::ensemble_average;
use crate::map::{Class, ProbabilityMap, NUM_CLASSES};

/// Side of the square working space all views are brought into.
pub const COMMON_SIZE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKind {
    /// 6 mm macula-centered scan; occupies the central part of the working space.
    Macula6,
    /// 12 mm macula-centered scan; spans the whole working space.
    Macula12,
    /// 6 mm optic-disc-centered scan.
    Disc6,
    /// Wide-field auxiliary modality predicting a subset of classes.
    Auxiliary,
}

impl ScanKind {
    pub fn name(self) -> &'static str {
        match self {
            ScanKind::Macula6 => "macula6",
            ScanKind::Macula12 => "macula12",
            ScanKind::Disc6 => "disc6",
            ScanKind::Auxiliary => "auxiliary",
        }
    }

    /// Whether the scan is zero-padded (true) or resized (false) into the
    /// working space.
    pub fn is_padded(self) -> bool {
        matches!(self, ScanKind::Macula6 | ScanKind::Disc6)
    }

    pub fn is_macula_centered(self) -> bool {
        matches!(self, ScanKind::Macula6 | ScanKind::Macula12)
    }

    pub fn is_octa(self) -> bool {
        self != ScanKind::Auxiliary
    }
}

impl std::str::FromStr for ScanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macula6" => Ok(ScanKind::Macula6),
            "macula12" => Ok(ScanKind::Macula12),
            "disc6" => Ok(ScanKind::Disc6),
            "auxiliary" => Ok(ScanKind::Auxiliary),
            other => Err(Error::Argument(format!("unknown scan kind {other:?}"))),
        }
    }
}

/// One acquisition of a subject.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub domain: String,
    pub kind: ScanKind,
    pub probs: ProbabilityMap,
    /// Predictions of model replicas; when present their mean replaces `probs`.
    pub replicas: Vec<ProbabilityMap>,
    /// For maps whose channels are not the five-class layout: the class each
    /// channel feeds (`None` feeds background).
    pub class_map: Option<Vec<Option<Class>>>,
}

impl View {
    pub fn new(domain: impl Into<String>, kind: ScanKind, probs: ProbabilityMap) -> Self {
        Self {
            domain: domain.into(),
            kind,
            probs,
            replicas: Vec::new(),
            class_map: None,
        }
    }

    /// The view's prediction in the five-class layout.
    pub fn prediction(&self) -> Result<ProbabilityMap> {
        let raw = if self.replicas.is_empty() {
            self.probs.clone()
        } else {
            ensemble_average(&self.replicas)?
        };
        match &self.class_map {
            None => {
                raw.require_channels(NUM_CLASSES)?;
                Ok(raw)
            }
            Some(map) => lift_classes(&raw, map),
        }
    }
}

/// Redistributes a map with its own channel set into the five-class layout.
pub fn lift_classes(raw: &ProbabilityMap, class_map: &[Option<Class>]) -> Result<ProbabilityMap> {
    raw.require_channels(class_map.len())?;
    let mut out = ProbabilityMap::zeros(raw.height(), raw.width(), NUM_CLASSES);
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut(NUM_CLASSES)
        .zip(raw.pixels())
    {
        for (v, cls) in src.iter().zip(class_map) {
            dst[cls.unwrap_or(Class::Background).index()] += v;
        }
        dst.iter_mut().for_each(|v| *v = v.min(1.0));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBag {
    pub subject_id: String,
    pub views: Vec<View>,
}

impl SubjectBag {
    pub fn indices_of(&self, kind: ScanKind) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| self.views[i].kind == kind)
            .collect()
    }
}

/// A map in the working space with the fraction of each pixel's footprint
/// that the original acquisition actually covers.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonMap {
    pub probs: ProbabilityMap,
    pub coverage: Vec<f64>,
}

/// Native pixel → working-space coordinates for a square scan of side `n`.
pub fn native_to_common(kind: ScanKind, n: usize) -> Result<Homography> {
    if kind.is_padded() {
        if n > COMMON_SIZE {
            return Err(Error::Argument(format!(
                "{} scan of side {n} exceeds the {COMMON_SIZE} working space",
                kind.name()
            )));
        }
        let o = center_offset(n, COMMON_SIZE) as f64;
        Ok(Homography::translation(o, o))
    } else {
        let s = COMMON_SIZE as f64 / n as f64;
        let o = resize_coordinate(0.0, n, COMMON_SIZE);
        Homography::affine(s, 0.0, 0.0, s, o, o)
    }
}

/// Places a square map into the 512×512 working space: padded kinds are
/// centered with zeros (odd remainders at bottom/right), the rest are
/// bilinearly resized.
pub fn to_common_space(map: &ProbabilityMap, kind: ScanKind) -> Result<CommonMap> {
    let (h, w) = map.dims();
    if h != w {
        return Err(Error::Argument(format!("scan must be square, got {h}x{w}")));
    }
    let c = map.channels();
    if kind.is_padded() {
        if h > COMMON_SIZE {
            return Err(Error::Argument(format!(
                "scan side {h} exceeds {COMMON_SIZE}"
            )));
        }
        let o = center_offset(h, COMMON_SIZE);
        let mut probs = ProbabilityMap::zeros(COMMON_SIZE, COMMON_SIZE, c);
        let mut coverage = vec![0.0; COMMON_SIZE * COMMON_SIZE];
        for y in 0..h {
            for x in 0..w {
                probs
                    .pixel_mut(y + o, x + o)
                    .copy_from_slice(map.pixel(y, x));
                coverage[(y + o) * COMMON_SIZE + x + o] = 1.0;
            }
        }
        Ok(CommonMap { probs, coverage })
    } else {
        let data = resize_raw(map.data(), h, w, c, COMMON_SIZE, COMMON_SIZE)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Ok(CommonMap {
            probs: ProbabilityMap::from_raw(COMMON_SIZE, COMMON_SIZE, c, data),
            coverage: vec![1.0; COMMON_SIZE * COMMON_SIZE],
        })
    }
}
