use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{argmax, Class, LabelMap, ProbabilityMap, NUM_CLASSES};
use crate::subject::ScanKind;

/// FAZ threshold for pixels whose distance to the image center is below
/// `upper × d_c`; `upper = None` closes the list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FazBand {
    pub upper: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub tau_artery: f64,
    pub tau_vein: f64,
    pub tau_capillary: f64,
    pub faz_bands: Vec<FazBand>,
    /// Confidence cut of the masked loss.
    pub tau_conf: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            tau_artery: 0.5,
            tau_vein: 0.5,
            tau_capillary: 0.0,
            faz_bands: vec![
                FazBand {
                    upper: Some(0.4),
                    threshold: 0.2,
                },
                FazBand {
                    upper: Some(0.5),
                    threshold: 0.7,
                },
                FazBand {
                    upper: None,
                    threshold: 0.95,
                },
            ],
            tau_conf: 0.8,
        }
    }
}

impl ThresholdConfig {
    pub fn check(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![
            self.tau_artery,
            self.tau_vein,
            self.tau_capillary,
            self.tau_conf,
        ]
        .into_iter()
        .all(unit)
            || !self.faz_bands.iter().all(|b| unit(b.threshold))
        {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        let bounds: Vec<f64> = self
            .faz_bands
            .iter()
            .map(|b| b.upper.unwrap_or(f64::INFINITY))
            .collect();
        if bounds.is_empty()
            || bounds.windows(2).any(|w| w[0] >= w[1])
            || bounds[bounds.len() - 1] != f64::INFINITY
        {
            return Err(Error::Config(
                "FAZ bands must be sorted and end unbounded".into(),
            ));
        }
        Ok(())
    }

    /// Threshold a pixel of class `c` must reach; `None` means no threshold.
    fn class_threshold(&self, c: Class, y: usize, x: usize, dims: (usize, usize)) -> Option<f64> {
        match c {
            Class::Background => None,
            Class::Capillary => (self.tau_capillary > 0.0).then_some(self.tau_capillary),
            Class::Artery => Some(self.tau_artery),
            Class::Vein => Some(self.tau_vein),
            Class::Faz => Some(faz_threshold_at(y, x, dims, &self.faz_bands)),
        }
    }
}

/// `d_c = sqrt((H² + W²) / 4)`, half the image diagonal.
pub fn center_distance_scale(dims: (usize, usize)) -> f64 {
    let (h, w) = (dims.0 as f64, dims.1 as f64);
    ((h * h + w * w) / 4.0).sqrt()
}

/// Threshold of the band containing `d(pixel) / d_c`, with `d` measured to
/// the image center.
pub fn faz_threshold_at(y: usize, x: usize, dims: (usize, usize), bands: &[FazBand]) -> f64 {
    let cy = (dims.0 as f64 - 1.0) / 2.0;
    let cx = (dims.1 as f64 - 1.0) / 2.0;
    let d = (y as f64 - cy).hypot(x as f64 - cx);
    faz_threshold_for_ratio(d / center_distance_scale(dims), bands)
}

pub fn faz_threshold_for_ratio(ratio: f64, bands: &[FazBand]) -> f64 {
    bands
        .iter()
        .find(|b| b.upper.is_none_or(|u| ratio < u))
        .or(bands.last())
        .map(|b| b.threshold)
        .unwrap_or(1.0)
}

/// Hard label from teacher probabilities: the argmax class when it reaches
/// its threshold, background otherwise. On disc scans FAZ winners become
/// background.
pub fn generate_pseudo_label(
    probs: &ProbabilityMap,
    kind: ScanKind,
    cfg: &ThresholdConfig,
) -> Result<LabelMap> {
    probs.require_channels(NUM_CLASSES)?;
    let dims = probs.dims();
    let mut out = LabelMap::filled(dims.0, dims.1, Class::Background);
    for y in 0..dims.0 {
        for x in 0..dims.1 {
            let p = probs.pixel(y, x);
            let c = Class::from_index(argmax(p)).expect("five channels");
            if c == Class::Faz && kind == ScanKind::Disc6 {
                continue;
            }
            let pass = cfg
                .class_threshold(c, y, x, dims)
                .is_none_or(|t| p[c.index()] >= t);
            if pass {
                out.set(y, x, c);
            }
        }
    }
    Ok(out)
}
