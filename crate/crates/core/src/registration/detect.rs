//! Vesselness extraction and Harris keypoints with normalized-patch
//! descriptors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{Class, ProbabilityMap, NUM_CLASSES};

/// Per-pixel vessel evidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselnessMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl VesselnessMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Argument("vesselness buffer size mismatch".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("vesselness outside [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// `p_C + p_A + p_V`, clamped to `[0, 1]`.
pub fn extract_vesselness(map: &ProbabilityMap) -> Result<VesselnessMap> {
    map.require_channels(NUM_CLASSES)?;
    let values = map
        .pixels()
        .map(|p| {
            (p[Class::Capillary.index()] + p[Class::Artery.index()] + p[Class::Vein.index()])
                .clamp(0.0, 1.0)
        })
        .collect();
    Ok(VesselnessMap {
        height: map.height(),
        width: map.width(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Gaussian pre-smoothing of the vesselness map.
    pub smooth_sigma: f64,
    /// Gaussian integration window of the structure tensor.
    pub window_sigma: f64,
    pub harris_k: f64,
    pub nms_radius: usize,
    pub max_keypoints: usize,
    /// Responses below this fraction of the strongest one are dropped.
    pub rel_threshold: f64,
    /// Side of the square descriptor patch.
    pub patch_size: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            smooth_sigma: 2.0,
            window_sigma: 1.5,
            harris_k: 0.04,
            nms_radius: 4,
            max_keypoints: 500,
            rel_threshold: 0.01,
            patch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
    /// Mean-subtracted, unit-norm patch.
    pub descriptor: Vec<f64>,
}

pub const MIN_DETECT_SIZE: usize = 32;

pub fn detect_keypoints(v: &VesselnessMap, cfg: &DetectorConfig) -> Result<Vec<Keypoint>> {
    let (h, w) = (v.height, v.width);
    if h < MIN_DETECT_SIZE || w < MIN_DETECT_SIZE {
        return Err(Error::Argument(format!(
            "keypoint detection needs at least {MIN_DETECT_SIZE}x{MIN_DETECT_SIZE}, got {h}x{w}"
        )));
    }
    let smooth = gaussian_blur(&v.values, h, w, cfg.smooth_sigma);
    let response = harris_response(&smooth, h, w, cfg);
    let max_r = response.iter().cloned().fold(0.0, f64::max);
    if max_r <= 1e-12 {
        return Ok(Vec::new());
    }
    let floor = (cfg.rel_threshold * max_r).max(1e-12);

    // the descriptor patch is sampled at ±(patch/2 - 0.5) around a subpixel
    // location that may sit half a pixel off the integer peak
    let margin = cfg.patch_size / 2 + 1;
    let r = cfg.nms_radius as i64;
    let mut peaks = Vec::new();
    for y in margin..h.saturating_sub(margin) {
        for x in margin..w.saturating_sub(margin) {
            let val = response[y * w + x];
            if val < floor {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let other = response[yy as usize * w + xx as usize];
                    // strict on one side so plateaus keep exactly one peak
                    let later = (dy, dx) > (0, 0);
                    if other > val || (!later && other == val) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                peaks.push((val, y, x));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));

    let mut keypoints = Vec::with_capacity(cfg.max_keypoints.min(peaks.len()));
    for (val, y, x) in peaks {
        if keypoints.len() >= cfg.max_keypoints {
            break;
        }
        let (sx, sy) = subpixel(&response, w, x, y);
        if let Some(descriptor) = describe(&smooth, h, w, sx, sy, cfg.patch_size) {
            keypoints.push(Keypoint {
                x: sx,
                y: sy,
                response: val,
                descriptor,
            });
        }
    }
    Ok(keypoints)
}

/// Harris corner measure `det(M) - k tr(M)^2` of the Gaussian-weighted
/// structure tensor.
pub fn harris_response(img: &[f64], h: usize, w: usize, cfg: &DetectorConfig) -> Vec<f64> {
    let at = |y: i64, x: i64| {
        img[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize]
    };
    let mut ixx = vec![0.0; h * w];
    let mut iyy = vec![0.0; h * w];
    let mut ixy = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = 0.5 * (at(y, x + 1) - at(y, x - 1));
            let gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
            let i = y as usize * w + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let sxx = gaussian_blur(&ixx, h, w, cfg.window_sigma);
    let syy = gaussian_blur(&iyy, h, w, cfg.window_sigma);
    let sxy = gaussian_blur(&ixy, h, w, cfg.window_sigma);
    (0..h * w)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - cfg.harris_k * tr * tr
        })
        .collect()
}

fn subpixel(resp: &[f64], w: usize, x: usize, y: usize) -> (f64, f64) {
    let c = resp[y * w + x];
    let offset = |m: f64, p: f64| {
        let denom = m - 2.0 * c + p;
        if denom < 0.0 {
            (0.5 * (m - p) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    let dx = offset(resp[y * w + x - 1], resp[y * w + x + 1]);
    let dy = offset(resp[(y - 1) * w + x], resp[(y + 1) * w + x]);
    (x as f64 + dx, y as f64 + dy)
}

fn describe(img: &[f64], h: usize, w: usize, cx: f64, cy: f64, size: usize) -> Option<Vec<f64>> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut patch = Vec::with_capacity(size * size);
    let mut tmp = [0.0];
    for j in 0..size {
        for i in 0..size {
            let x = cx - half + i as f64;
            let y = cy - half + j as f64;
            crate::geometry::sample_bilinear(img, h, w, 1, x, y, &mut tmp);
            patch.push(tmp[0]);
        }
    }
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    patch.iter_mut().for_each(|v| *v -= mean);
    let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    patch.iter_mut().for_each(|v| *v /= norm);
    Some(patch)
}

/// Separable Gaussian blur with replicated borders. `sigma <= 0` copies.
pub(crate) fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cross(size: usize, cy: usize, cx: usize) -> VesselnessMap {
        let mut values = vec![0.0; size * size];
        for d in -1i64..=1 {
            values[cy * size + (cx as i64 + d) as usize] = 1.0;
            values[(cy as i64 + d) as usize * size + cx] = 1.0;
        }
        VesselnessMap::new(size, size, values).unwrap()
    }

    #[test]
    fn vesselness_sums_vessel_channels() {
        let map = ProbabilityMap::new(
            1,
            3,
            5,
            vec![
                1.0, 0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, 0.0, //
                0.2, 0.3, 0.25, 0.25, 0.0,
            ],
        )
        .unwrap();
        let v = extract_vesselness(&map).unwrap();
        assert_eq!(v.values[0], 0.0);
        assert_eq!(v.values[1], 1.0);
        assert!((v.values[2] - 0.8).abs() < 1e-15);
        let bad = ProbabilityMap::zeros(2, 2, 3);
        assert!(matches!(
            extract_vesselness(&bad),
            Err(Error::Layout { .. })
        ));
    }

    #[test]
    fn zero_map_has_no_keypoints() {
        let v = VesselnessMap::new(40, 40, vec![0.0; 1600]).unwrap();
        assert!(detect_keypoints(&v, &DetectorConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn small_image_rejected() {
        let v = VesselnessMap::new(31, 40, vec![0.0; 31 * 40]).unwrap();
        assert!(detect_keypoints(&v, &DetectorConfig::default()).is_err());
    }

    #[test]
    fn cross_detected_near_center() {
        let v = cross(48, 20, 27);
        let kps = detect_keypoints(&v, &DetectorConfig::default()).unwrap();
        assert!(!kps.is_empty());
        // oracle: exhaustive scan of the response map for its global maximum
        let cfg = DetectorConfig::default();
        let smooth = gaussian_blur(&v.values, 48, 48, cfg.smooth_sigma);
        let resp = harris_response(&smooth, 48, 48, &cfg);
        let (best, _) =
            resp.iter().enumerate().fold(
                (0, f64::MIN),
                |acc, (i, &r)| if r > acc.1 { (i, r) } else { acc },
            );
        let (by, bx) = (best / 48, best % 48);
        assert!((by as f64 - 20.0).abs() <= 2.0 && (bx as f64 - 27.0).abs() <= 2.0);
        assert!(kps.iter().any(|k| (k.x - 27.0).hypot(k.y - 20.0) <= 2.0));
        for k in &kps {
            let n: f64 = k.descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(k.descriptor.len(), 256);
        }
    }

    #[test]
    fn detection_commutes_with_quarter_turn() {
        let n = 64;
        let mut values = vec![0.0; n * n];
        // an L, a T and a dot give well-separated, distinct corners
        for i in 10..30 {
            values[12 * n + i] = 1.0;
            values[i * n + 10] = 1.0;
        }
        for i in 36..56 {
            values[40 * n + i] = 1.0;
        }
        for i in 40..54 {
            values[i * n + 46] = 1.0;
        }
        values[22 * n + 44] = 1.0;
        let v = VesselnessMap::new(n, n, values.clone()).unwrap();
        // rotated (x, y) -> (n - 1 - y, x)
        let mut rot = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                rot[x * n + (n - 1 - y)] = values[y * n + x];
            }
        }
        let vr = VesselnessMap::new(n, n, rot).unwrap();
        let cfg = DetectorConfig::default();
        let a = detect_keypoints(&v, &cfg).unwrap();
        let b = detect_keypoints(&vr, &cfg).unwrap();
        assert!(!a.is_empty());
        for k in &a {
            let (ex, ey) = (n as f64 - 1.0 - k.y, k.x);
            assert!(
                b.iter().any(|q| (q.x - ex).hypot(q.y - ey) <= 2.0),
                "no rotated partner for ({}, {})",
                k.x,
                k.y
            );
        }
    }
}
