//! Planar homographies: decomposition into translation / scale / rotation /
//! shear / perspective, plausibility validation, inversion and
//! inverse-mapping bilinear warps of probability maps.
//!
//! Pixel coordinates are `(x, y) = (column, row)` with pixel centers on the
//! integer grid.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::ProbabilityMap;

const SINGULAR_EPS: f64 = 1e-12;

/// A 3×3 planar homography normalized so that `m[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Normalizes by `m33` and checks invertibility.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let h33 = m[(2, 2)];
        if !h33.is_finite() || h33.abs() <= SINGULAR_EPS {
            return Err(Error::Singular(format!("h33 = {h33:e}")));
        }
        let m = m / h33;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("non-finite entry".into()));
        }
        let det = m.determinant();
        if det.abs() <= SINGULAR_EPS {
            return Err(Error::Singular(format!("|det| = {:e}", det.abs())));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    /// `[a11 a12 tx; a21 a22 ty; 0 0 1]`.
    pub fn affine(a11: f64, a12: f64, a21: f64, a22: f64, tx: f64, ty: f64) -> Result<Self> {
        Self::new(Matrix3::new(a11, a12, tx, a21, a22, ty, 0.0, 0.0, 1.0))
    }

    /// Rotation by `theta_deg` and scaling by `(sx, sy)` about `center`,
    /// followed by a translation.
    pub fn similarity_about(
        center: (f64, f64),
        theta_deg: f64,
        sx: f64,
        sy: f64,
        shift: (f64, f64),
    ) -> Result<Self> {
        let (s, c) = theta_deg.to_radians().sin_cos();
        let a = Matrix3::new(c * sx, -s * sy, 0.0, s * sx, c * sy, 0.0, 0.0, 0.0, 1.0);
        let to = Matrix3::new(
            1.0,
            0.0,
            center.0 + shift.0,
            0.0,
            1.0,
            center.1 + shift.1,
            0.0,
            0.0,
            1.0,
        );
        let from = Matrix3::new(1.0, 0.0, -center.0, 0.0, 1.0, -center.1, 0.0, 0.0, 1.0);
        Self::new(to * a * from)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[(r, c)]
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::new(self.0 * other.0)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.0 * Vector3::new(x, y, 1.0);
        if p[2].abs() < 1e-15 {
            return (f64::NAN, f64::NAN);
        }
        (p[0] / p[2], p[1] / p[2])
    }

    pub fn is_affine(&self) -> bool {
        self.0[(2, 0)] == 0.0 && self.0[(2, 1)] == 0.0
    }

    /// Nine little-endian `f64`, row-major.
    pub fn to_le_bytes(&self) -> [u8; 72] {
        let mut out = [0u8; 72];
        for (i, v) in self.rows().iter().flatten().enumerate() {
            out[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 72 {
            return Err(Error::Argument(format!(
                "homography needs 72 bytes, got {}",
                bytes.len()
            )));
        }
        let mut rows = [[0.0; 3]; 3];
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            rows[i / 3][i % 3] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Self::from_rows(rows)
    }
}

/// Interpretable components of a homography.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecomposedTransform {
    pub tx: f64,
    pub ty: f64,
    pub sx: f64,
    pub sy: f64,
    /// Degrees.
    pub theta: f64,
    pub shear: f64,
    pub perspective: f64,
}

impl DecomposedTransform {
    /// Rebuilds the affine part. The second column of the normalized matrix
    /// is the unit vector at `acos(shear)` counter-clockwise from the first,
    /// so orientation-reversing inputs do not round-trip.
    pub fn recompose_affine(&self) -> Result<Homography> {
        let (s, c) = self.theta.to_radians().sin_cos();
        let g = self.shear;
        let ortho = (1.0 - g * g).max(0.0).sqrt();
        let r2 = (g * c - ortho * s, g * s + ortho * c);
        Homography::affine(
            c * self.sx,
            r2.0 * self.sy,
            s * self.sx,
            r2.1 * self.sy,
            self.tx,
            self.ty,
        )
    }
}

pub fn decompose(h: &Homography) -> Result<DecomposedTransform> {
    let m = h.matrix();
    let (a11, a12, a21, a22) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let sx = a11.hypot(a21);
    let sy = a12.hypot(a22);
    if sx < SINGULAR_EPS || sy < SINGULAR_EPS {
        return Err(Error::Singular(format!(
            "degenerate linear part, column norms {sx:e}, {sy:e}"
        )));
    }
    let (r11, r21) = (a11 / sx, a21 / sx);
    Ok(DecomposedTransform {
        tx: m[(0, 2)],
        ty: m[(1, 2)],
        sx,
        sy,
        theta: r21.atan2(r11).to_degrees(),
        shear: (a11 * a12 + a21 * a22) / (sx * sy),
        perspective: m[(2, 0)].hypot(m[(2, 1)]),
    })
}

/// Plausibility limits for a decomposed transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationThresholds {
    pub scale_min: f64,
    pub scale_max: f64,
    pub rot_max_deg: f64,
    pub shear_max: f64,
    pub persp_max: f64,
    /// `None` leaves translation unrestricted.
    pub translation_max: Option<f64>,
}

impl Default for ValidationThresholds {
    fn default() -> Self {
        Self {
            scale_min: 0.5,
            scale_max: 2.0,
            rot_max_deg: 15.0,
            shear_max: 0.5,
            persp_max: 0.01,
            translation_max: None,
        }
    }
}

impl ValidationThresholds {
    pub fn check(&self) -> Result<()> {
        let ok = 0.0 < self.scale_min
            && self.scale_min < self.scale_max
            && self.rot_max_deg > 0.0
            && self.shear_max > 0.0
            && self.persp_max > 0.0
            && self.translation_max.is_none_or(|t| t >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid validation thresholds {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Scale,
    Rotation,
    Shear,
    Perspective,
    Translation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub component: Component,
    pub value: f64,
    /// The bound that was crossed.
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn violates(&self, component: Component) -> bool {
        self.violations.iter().any(|v| v.component == component)
    }
}

pub fn validate(d: &DecomposedTransform, t: &ValidationThresholds) -> ValidationResult {
    let mut violations = Vec::new();
    let mut push = |component, value: f64, limit| {
        violations.push(Violation {
            component,
            value,
            limit,
        })
    };

    for s in [d.sx, d.sy] {
        // NaN fails both comparisons and must still be reported
        if !(s >= t.scale_min) {
            push(Component::Scale, s, t.scale_min);
        } else if !(s <= t.scale_max) {
            push(Component::Scale, s, t.scale_max);
        }
    }
    if !(d.theta.abs() <= t.rot_max_deg) {
        push(Component::Rotation, d.theta, t.rot_max_deg);
    }
    if !(d.shear.abs() <= t.shear_max) {
        push(Component::Shear, d.shear, t.shear_max);
    }
    if !(d.perspective <= t.persp_max) {
        push(Component::Perspective, d.perspective, t.persp_max);
    }
    if let Some(max) = t.translation_max {
        for v in [d.tx, d.ty] {
            if !(v.abs() <= max) {
                push(Component::Translation, v, max);
            }
        }
    }
    ValidationResult {
        valid: violations.is_empty(),
        violations,
    }
}

pub fn invert(h: &Homography) -> Result<Homography> {
    let inv =
        h.0.try_inverse()
            .ok_or_else(|| Error::Singular("matrix not invertible".into()))?;
    Homography::new(inv)
}

/// Bilinear sample of an interleaved buffer at `(x, y)`. Taps outside the
/// grid contribute zero. Writes into `out` and returns the summed weight of
/// in-bounds taps (1 when the whole footprint is inside).
pub(crate) fn sample_bilinear(
    src: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    x: f64,
    y: f64,
    out: &mut [f64],
) -> f64 {
    out.iter_mut().for_each(|v| *v = 0.0);
    if !x.is_finite() || !y.is_finite() {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut coverage = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        let yy = y0 + dy;
        if wy == 0.0 || yy < 0 || yy >= height as i64 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let xx = x0 + dx;
            if wx == 0.0 || xx < 0 || xx >= width as i64 {
                continue;
            }
            let w = wx * wy;
            let base = (yy as usize * width + xx as usize) * channels;
            for (o, s) in out.iter_mut().zip(&src[base..base + channels]) {
                *o += w * s;
            }
            coverage += w;
        }
    }
    coverage
}

/// Inverse-mapping warp of a raw interleaved buffer: output pixel `p` takes
/// the source value at `h⁻¹(p)`.
pub(crate) fn warp_raw(
    src: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    h: &Homography,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "output dims must be positive, got {out_h}x{out_w}"
        )));
    }
    let inv = invert(h)?;
    let mut out = vec![0.0; out_h * out_w * channels];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let base = (y * out_w + x) * channels;
            sample_bilinear(
                src,
                height,
                width,
                channels,
                sx,
                sy,
                &mut out[base..base + channels],
            );
        }
    }
    Ok(out)
}

/// Resamples `map` into an `out_h × out_w` canvas through `h`. Samples
/// falling outside the source contribute zeros.
pub fn warp(
    map: &ProbabilityMap,
    h: &Homography,
    out_h: usize,
    out_w: usize,
) -> Result<ProbabilityMap> {
    let data = warp_raw(
        map.data(),
        map.height(),
        map.width(),
        map.channels(),
        h,
        out_h,
        out_w,
    )?;
    // convex combinations of values in [0, 1] and zero stay in range up to rounding
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(ProbabilityMap::from_raw(out_h, out_w, map.channels(), data))
}

/// Bilinear resize with pixel-center alignment and clamp-to-edge sampling.
pub(crate) fn resize_raw(
    src: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let sy = height as f64 / out_h as f64;
    let sx = width as f64 / out_w as f64;
    let mut out = vec![0.0; out_h * out_w * channels];
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let base = (y * out_w + x) * channels;
            sample_bilinear(
                src,
                height,
                width,
                channels,
                fx,
                fy,
                &mut out[base..base + channels],
            );
        }
    }
    out
}

/// Maps a pixel of a `from`-sized square onto the matching point of a
/// `to`-sized square under [`resize_raw`]'s alignment.
pub fn resize_coordinate(v: f64, from: usize, to: usize) -> f64 {
    (v + 0.5) * to as f64 / from as f64 - 0.5
}

pub fn resize(map: &ProbabilityMap, out_h: usize, out_w: usize) -> Result<ProbabilityMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument("resize to empty canvas".into()));
    }
    if map.dims() == (out_h, out_w) {
        return Ok(map.clone());
    }
    let data = resize_raw(
        map.data(),
        map.height(),
        map.width(),
        map.channels(),
        out_h,
        out_w,
    );
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(ProbabilityMap::from_raw(out_h, out_w, map.channels(), data))
}

/// Offsets `(top, left)` placing an `inner` square centered in `outer`; odd
/// remainders go to the bottom/right.
pub fn center_offset(inner: usize, outer: usize) -> usize {
    (outer - inner) / 2
}
