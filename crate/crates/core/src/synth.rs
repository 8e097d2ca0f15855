//! Synthetic subjects with known ground truth and planted transforms.
//!
//! A subject is a vessel tree drawn once in the shared working space (the
//! "world"), a central FAZ disk with a capillary ring, and a few capillary
//! squiggles. Each view samples the world through its planted transform,
//! which maps the view's working-space coordinates into world coordinates.
//! A view registered onto anchor `a` should therefore recover roughly
//! `P_a⁻¹ ∘ P_v`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::map::{Class, Image, LabelMap, ProbabilityMap, NUM_CLASSES};
use crate::subject::{native_to_common, ScanKind, SubjectBag, View, COMMON_SIZE};

/// Extra world margin around the working space, in working-space pixels.
const WORLD_MARGIN: f64 = 64.0;
/// World raster samples per working-space pixel.
const WORLD_SCALE: f64 = 2.0;
const SUPERSAMPLE: usize = 4;

/// Model input channels: flow intensity and artery/vein contrast.
pub const INPUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    /// Standard deviation of per-channel Gaussian noise.
    pub noise: f64,
    /// Number of discs in which vessel evidence drops to background.
    pub dropout: usize,
    pub dropout_radius: f64,
    /// Number of discs in which artery and vein probabilities trade places.
    pub swap: usize,
    pub swap_radius: f64,
    /// Flattening strength; probabilities are raised to `1 / (1 + contrast)`.
    pub contrast: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self {
            noise: 0.0,
            dropout: 0,
            dropout_radius: 12.0,
            swap: 0,
            swap_radius: 16.0,
            contrast: 0.0,
        }
    }

    /// Every strength multiplied by `level`.
    pub fn scaled(&self, level: f64) -> Self {
        Self {
            noise: self.noise * level,
            dropout: (self.dropout as f64 * level).round() as usize,
            dropout_radius: self.dropout_radius,
            swap: (self.swap as f64 * level).round() as usize,
            swap_radius: self.swap_radius,
            contrast: self.contrast * level,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub kind: ScanKind,
    pub domain: String,
    #[serde(default)]
    pub corruption: CorruptionSpec,
}

/// Intensity model of one acquisition domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub flow_gain: f64,
    pub flow_offset: f64,
    pub av_gain: f64,
    pub av_offset: f64,
    pub noise: f64,
}

impl DomainStyle {
    pub const SOURCE: DomainStyle = DomainStyle {
        flow_gain: 1.0,
        flow_offset: 0.0,
        av_gain: 1.0,
        av_offset: 0.0,
        noise: 0.05,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformRange {
    pub rot_deg: f64,
    pub scale: f64,
    pub shift: f64,
}

impl Default for TransformRange {
    fn default() -> Self {
        Self {
            rot_deg: 3.0,
            scale: 0.03,
            shift: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VesselConfig {
    pub trees: usize,
    pub depth: usize,
    pub trunk_length: f64,
    pub length_decay: f64,
    pub branch_angle_deg: f64,
    pub trunk_width: f64,
    pub min_width: f64,
    pub capillary_squiggles: usize,
}

impl Default for VesselConfig {
    fn default() -> Self {
        Self {
            trees: 8,
            depth: 4,
            trunk_length: 110.0,
            length_decay: 0.72,
            branch_angle_deg: 32.0,
            trunk_width: 6.0,
            min_width: 2.0,
            capillary_squiggles: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Native side of every view except macula12.
    pub canvas: usize,
    /// Native side of macula12 views.
    pub wide_canvas: usize,
    pub views: Vec<ViewSpec>,
    pub transforms: TransformRange,
    pub vessels: VesselConfig,
    pub faz_radius: f64,
    /// Optic disc center in working-space coordinates.
    pub disc_center: [f64; 2],
    pub disc_radius: f64,
    /// Vessels narrower than this are invisible to the auxiliary modality.
    pub aux_min_width: f64,
    pub styles: BTreeMap<String, DomainStyle>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let noisy = CorruptionSpec {
            noise: 0.12,
            dropout: 6,
            dropout_radius: 12.0,
            swap: 6,
            swap_radius: 16.0,
            contrast: 0.3,
        };
        let view = |kind, domain: &str, corruption| ViewSpec {
            kind,
            domain: domain.into(),
            corruption,
        };
        let styles = [
            ("D1", 1.15, -0.05, 0.7, -0.1, 0.05),
            ("D2", 1.0, 0.05, 0.7, 0.1, 0.05),
            ("D3", 0.85, 0.05, 0.7, -0.1, 0.05),
            ("D4", 1.0, 0.05, 0.85, -0.1, 0.05),
            ("D5", 1.0, -0.05, 0.7, -0.1, 0.05),
        ]
        .into_iter()
        .map(|(d, flow_gain, flow_offset, av_gain, av_offset, noise)| {
            (
                d.to_string(),
                DomainStyle {
                    flow_gain,
                    flow_offset,
                    av_gain,
                    av_offset,
                    noise,
                },
            )
        })
        .collect();
        Self {
            canvas: 256,
            wide_canvas: 512,
            views: vec![
                view(ScanKind::Macula6, "D1", noisy),
                view(ScanKind::Macula6, "D2", noisy),
                view(ScanKind::Macula6, "D3", noisy),
                view(ScanKind::Disc6, "D4", noisy),
                view(ScanKind::Macula12, "D5", noisy),
                view(ScanKind::Auxiliary, "CFP", noisy.scaled(0.5)),
            ],
            transforms: TransformRange::default(),
            vessels: VesselConfig::default(),
            faz_radius: 18.0,
            disc_center: [416.0, 256.0],
            disc_radius: 24.0,
            aux_min_width: 2.2,
            styles,
        }
    }
}

impl SynthConfig {
    /// `views` uncorrupted macula6 views.
    pub fn clean_macula(views: usize) -> Self {
        Self {
            views: (0..views)
                .map(|i| ViewSpec {
                    kind: ScanKind::Macula6,
                    domain: format!("D{}", i % 3 + 1),
                    corruption: CorruptionSpec::none(),
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        for side in [self.canvas, self.wide_canvas] {
            if !(64..=COMMON_SIZE).contains(&side) {
                return Err(Error::Config(format!(
                    "synth canvas {side} not in [64, {COMMON_SIZE}]"
                )));
            }
        }
        if self.views.is_empty() {
            return Err(Error::Config("synth needs at least one view".into()));
        }
        let t = &self.transforms;
        if t.rot_deg < 0.0 || !(0.0..0.5).contains(&t.scale) || t.shift < 0.0 {
            return Err(Error::Config("bad planted transform ranges".into()));
        }
        Ok(())
    }

    pub fn native_side(&self, kind: ScanKind) -> usize {
        if kind == ScanKind::Macula12 {
            self.wide_canvas
        } else {
            self.canvas
        }
    }

    fn style(&self, domain: &str) -> DomainStyle {
        self.styles
            .get(domain)
            .copied()
            .unwrap_or(DomainStyle::SOURCE)
    }
}

/// One generated subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSubject {
    pub bag: SubjectBag,
    /// Ground truth per view in native coordinates. Auxiliary truth only
    /// uses background, artery and vein.
    pub truth: Vec<LabelMap>,
    /// Model inputs per view; `None` for the auxiliary modality.
    pub images: Vec<Option<Image>>,
    /// View working space → world working space.
    pub planted: Vec<Homography>,
}

struct World {
    side: usize,
    labels: Vec<u8>,
    widths: Vec<f32>,
}

impl World {
    fn new() -> Self {
        let side = ((COMMON_SIZE as f64 + 2.0 * WORLD_MARGIN) * WORLD_SCALE) as usize;
        Self {
            side,
            labels: vec![Class::Background as u8; side * side],
            widths: vec![0.0; side * side],
        }
    }

    fn to_raster(v: f64) -> f64 {
        (v + WORLD_MARGIN) * WORLD_SCALE
    }

    fn from_raster(i: usize) -> f64 {
        (i as f64 + 0.5) / WORLD_SCALE - WORLD_MARGIN
    }

    fn sample(&self, x: f64, y: f64) -> (u8, f32) {
        let (rx, ry) = (Self::to_raster(x).floor(), Self::to_raster(y).floor());
        if rx < 0.0 || ry < 0.0 || rx >= self.side as f64 || ry >= self.side as f64 {
            return (Class::Background as u8, 0.0);
        }
        let i = ry as usize * self.side + rx as usize;
        (self.labels[i], self.widths[i])
    }

    /// Paints every raster cell within `width / 2` of segment `ab`.
    fn stroke(&mut self, a: [f64; 2], b: [f64; 2], width: f64, class: Class) {
        let r = width / 2.0;
        let lo = |u: f64, v: f64| (Self::to_raster(u.min(v) - r).floor().max(0.0)) as usize;
        let hi = |u: f64, v: f64| {
            (Self::to_raster(u.max(v) + r).ceil().max(0.0) as usize).min(self.side)
        };
        let (d0, d1) = (b[0] - a[0], b[1] - a[1]);
        let len2 = d0 * d0 + d1 * d1;
        for ry in lo(a[1], b[1])..hi(a[1], b[1]) {
            let py = Self::from_raster(ry);
            for rx in lo(a[0], b[0])..hi(a[0], b[0]) {
                let px = Self::from_raster(rx);
                let t = if len2 > 0.0 {
                    (((px - a[0]) * d0 + (py - a[1]) * d1) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (a[0] + t * d0 - px, a[1] + t * d1 - py);
                if qx * qx + qy * qy <= r * r {
                    let i = ry * self.side + rx;
                    self.labels[i] = class as u8;
                    self.widths[i] = width as f32;
                }
            }
        }
    }

    fn disk(&mut self, center: [f64; 2], r0: f64, r1: f64, class: Class, only_background: bool) {
        let lo = |v: f64| Self::to_raster(v - r1).floor().max(0.0) as usize;
        let hi = |v: f64| (Self::to_raster(v + r1).ceil().max(0.0) as usize).min(self.side);
        for ry in lo(center[1])..hi(center[1]) {
            for rx in lo(center[0])..hi(center[0]) {
                let d =
                    (Self::from_raster(rx) - center[0]).hypot(Self::from_raster(ry) - center[1]);
                let i = ry * self.side + rx;
                if d >= r0
                    && d < r1
                    && (!only_background || self.labels[i] == Class::Background as u8)
                {
                    self.labels[i] = class as u8;
                    self.widths[i] = 0.0;
                }
            }
        }
    }
}

/// Jagged polyline from `a` to `b` by recursive midpoint displacement.
fn displaced(
    a: [f64; 2],
    b: [f64; 2],
    levels: usize,
    amp: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 2]> {
    let mut pts = vec![a, b];
    let mut amp = amp;
    for _ in 0..levels {
        let mut next = Vec::with_capacity(pts.len() * 2);
        for w in pts.windows(2) {
            let (p, q) = (w[0], w[1]);
            let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
            let len = dx.hypot(dy).max(1e-9);
            let off = rng.random_range(-amp..=amp);
            next.push(p);
            next.push([
                (p[0] + q[0]) / 2.0 - dy / len * off,
                (p[1] + q[1]) / 2.0 + dx / len * off,
            ]);
        }
        next.push(*pts.last().unwrap());
        pts = next;
        amp /= 2.0;
    }
    pts
}

struct TreeParams<'a> {
    cfg: &'a VesselConfig,
    fovea: [f64; 2],
    keep_out: f64,
}

#[allow(clippy::too_many_arguments)]
fn grow(
    world: &mut World,
    rng: &mut ChaCha8Rng,
    p: &TreeParams,
    start: [f64; 2],
    angle: f64,
    length: f64,
    width: f64,
    depth: usize,
    class: Class,
) {
    let end = [
        start[0] + length * angle.cos(),
        start[1] + length * angle.sin(),
    ];
    let path = displaced(start, end, 3, 0.12 * length, rng);
    let mut reached = end;
    for w in path.windows(2) {
        if (w[1][0] - p.fovea[0]).hypot(w[1][1] - p.fovea[1]) < p.keep_out {
            return;
        }
        world.stroke(w[0], w[1], width, class);
        reached = w[1];
    }
    if depth == 0 {
        return;
    }
    let spread = p.cfg.branch_angle_deg.to_radians();
    let child_width = (width * 0.75).max(p.cfg.min_width);
    for sign in [-1.0, 1.0] {
        let a = angle + sign * (spread + rng.random_range(-0.3..=0.3) * spread);
        let l = length * p.cfg.length_decay * rng.random_range(0.85..=1.15);
        grow(world, rng, p, reached, a, l, child_width, depth - 1, class);
    }
}

fn build_world(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> World {
    let mut world = World::new();
    let c = (COMMON_SIZE as f64 - 1.0) / 2.0;
    let fovea = [c, c];

    // capillary texture: ring around the FAZ, short squiggles, the disc head
    world.disk(
        fovea,
        cfg.faz_radius,
        cfg.faz_radius + 6.0,
        Class::Capillary,
        false,
    );
    for _ in 0..cfg.vessels.capillary_squiggles {
        let r = rng.random_range(cfg.faz_radius + 12.0..120.0);
        let t = rng.random_range(0.0..2.0 * PI);
        let a = [fovea[0] + r * t.cos(), fovea[1] + r * t.sin()];
        let dir = rng.random_range(0.0..2.0 * PI);
        let len = rng.random_range(12.0..28.0);
        let b = [a[0] + len * dir.cos(), a[1] + len * dir.sin()];
        let path = displaced(a, b, 2, 0.25 * len, rng);
        for w in path.windows(2) {
            world.stroke(w[0], w[1], 1.5, Class::Capillary);
        }
    }
    world.disk(
        cfg.disc_center,
        0.0,
        cfg.disc_radius,
        Class::Capillary,
        false,
    );

    let params = TreeParams {
        cfg: &cfg.vessels,
        fovea,
        keep_out: cfg.faz_radius + 10.0,
    };
    let n = cfg.vessels.trees.max(1);
    let phase = rng.random_range(0.0..2.0 * PI);
    for i in 0..n {
        let angle = phase + 2.0 * PI * i as f64 / n as f64 + rng.random_range(-0.2..=0.2);
        let class = if i % 2 == 0 {
            Class::Artery
        } else {
            Class::Vein
        };
        let len = cfg.vessels.trunk_length * rng.random_range(0.85..=1.15);
        grow(
            &mut world,
            rng,
            &params,
            cfg.disc_center,
            angle,
            len,
            cfg.vessels.trunk_width,
            cfg.vessels.depth,
            class,
        );
    }
    world.disk(fovea, 0.0, cfg.faz_radius, Class::Faz, false);
    world
}

fn planted_transform(
    cfg: &SynthConfig,
    kind: ScanKind,
    rng: &mut ChaCha8Rng,
) -> Result<Homography> {
    let t = &cfg.transforms;
    let c = (COMMON_SIZE as f64 - 1.0) / 2.0;
    let mut u = |r: f64| {
        if r > 0.0 {
            rng.random_range(-r..=r)
        } else {
            0.0
        }
    };
    let theta = u(t.rot_deg);
    let s = 1.0 + u(t.scale);
    let mut shift = (u(t.shift), u(t.shift));
    if kind == ScanKind::Disc6 {
        shift.0 += cfg.disc_center[0] - c;
        shift.1 += cfg.disc_center[1] - c;
    }
    Homography::similarity_about((c, c), theta, s, s, shift)
}

const FLOW_LEVEL: [f64; NUM_CLASSES] = [0.3, 0.55, 0.95, 0.8, 0.0];

/// Per-pixel class fractions of a view and its nearest-sampled truth.
fn sample_view(
    world: &World,
    n: usize,
    to_world: &Homography,
    aux_min_width: Option<f64>,
) -> (Vec<f64>, LabelMap) {
    let mut fractions = vec![0.0; n * n * NUM_CLASSES];
    let mut truth = vec![0u8; n * n];
    let visible = |(label, width): (u8, f32)| -> usize {
        match aux_min_width {
            Some(min) => match Class::from_index(label as usize) {
                Some(Class::Artery | Class::Vein) if width as f64 >= min => label as usize,
                _ => Class::Background as usize,
            },
            None => label as usize,
        }
    };
    let inv_ss = 1.0 / SUPERSAMPLE as f64;
    let weight = inv_ss * inv_ss;
    for y in 0..n {
        for x in 0..n {
            let base = (y * n + x) * NUM_CLASSES;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let qx = x as f64 + (sx as f64 + 0.5) * inv_ss - 0.5;
                    let qy = y as f64 + (sy as f64 + 0.5) * inv_ss - 0.5;
                    let (wx, wy) = to_world.apply(qx, qy);
                    fractions[base + visible(world.sample(wx, wy))] += weight;
                }
            }
            let (wx, wy) = to_world.apply(x as f64, y as f64);
            truth[y * n + x] = visible(world.sample(wx, wy)) as u8;
        }
    }
    (fractions, LabelMap::from_raw(n, n, truth))
}

/// `[1 2 1]ᵀ[1 2 1] / 16` blur per channel with replicated borders, then
/// renormalization.
fn soften(fractions: &[f64], n: usize) -> Vec<f64> {
    let k = [0.25, 0.5, 0.25];
    let mut out = vec![0.0; fractions.len()];
    for y in 0..n {
        for x in 0..n {
            let o = (y * n + x) * NUM_CLASSES;
            for (dy, ky) in k.iter().enumerate() {
                let yy = (y + dy).saturating_sub(1).min(n - 1);
                for (dx, kx) in k.iter().enumerate() {
                    let xx = (x + dx).saturating_sub(1).min(n - 1);
                    let s = (yy * n + xx) * NUM_CLASSES;
                    for c in 0..NUM_CLASSES {
                        out[o + c] += ky * kx * fractions[s + c];
                    }
                }
            }
            let sum: f64 = out[o..o + NUM_CLASSES].iter().sum();
            out[o..o + NUM_CLASSES].iter_mut().for_each(|v| *v /= sum);
        }
    }
    out
}

fn render_image(fractions: &[f64], n: usize, style: &DomainStyle, rng: &mut ChaCha8Rng) -> Image {
    let noise = Normal::new(0.0, style.noise.max(0.0)).expect("finite noise level");
    let mut data = Vec::with_capacity(n * n * INPUT_CHANNELS);
    for px in fractions.chunks_exact(NUM_CLASSES) {
        let flow: f64 = px.iter().zip(FLOW_LEVEL).map(|(f, l)| f * l).sum();
        let av = px[Class::Artery.index()] - px[Class::Vein.index()];
        data.push(style.flow_gain * flow + style.flow_offset + noise.sample(rng));
        data.push(style.av_gain * av + style.av_offset + noise.sample(rng));
    }
    Image {
        height: n,
        width: n,
        channels: INPUT_CHANNELS,
        data,
    }
}

fn normalize_pixel(px: &mut [f64]) {
    let sum: f64 = px.iter().sum();
    if sum > 0.0 {
        px.iter_mut().for_each(|v| *v = (*v / sum).clamp(0.0, 1.0));
    } else {
        px.iter_mut().for_each(|v| *v = 0.0);
        px[0] = 1.0;
    }
}

fn for_disc(h: usize, w: usize, cx: f64, cy: f64, r: f64, mut f: impl FnMut(usize, usize)) {
    let (y0, y1) = (
        (cy - r).max(0.0) as usize,
        ((cy + r).ceil().max(0.0) as usize).min(h),
    );
    let (x0, x1) = (
        (cx - r).max(0.0) as usize,
        ((cx + r).ceil().max(0.0) as usize).min(w),
    );
    for y in y0..y1 {
        for x in x0..x1 {
            if (x as f64 - cx).hypot(y as f64 - cy) <= r {
                f(y, x);
            }
        }
    }
}

/// Degrades a probability map: vessel dropout discs, artery/vein swap
/// discs, contrast flattening, then additive per-channel Gaussian noise. A spec with every
/// strength at zero returns the map unchanged.
pub fn corrupt_view(
    map: &ProbabilityMap,
    spec: &CorruptionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ProbabilityMap> {
    if spec.noise < 0.0 || spec.contrast < 0.0 || spec.dropout_radius < 0.0 {
        return Err(Error::Argument(
            "corruption strengths must be nonnegative".into(),
        ));
    }
    let (h, w, c) = (map.height(), map.width(), map.channels());
    let mut out = map.clone();
    let vessel: Vec<usize> = [Class::Capillary, Class::Artery, Class::Vein]
        .iter()
        .map(|c| c.index())
        .filter(|&i| i < c)
        .collect();
    let (a, v) = (Class::Artery.index(), Class::Vein.index());
    let discs = |count: usize, radius: f64, rng: &mut ChaCha8Rng| -> Vec<(f64, f64, f64)> {
        (0..count)
            .map(|_| {
                (
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.0..h as f64),
                    radius,
                )
            })
            .collect()
    };
    let dropout = discs(spec.dropout, spec.dropout_radius, rng);
    let swaps = if c > v {
        discs(spec.swap, spec.swap_radius, rng)
    } else {
        Vec::new()
    };
    for (cx, cy, r) in dropout {
        for_disc(h, w, cx, cy, r, |y, x| {
            let px = out.pixel_mut(y, x);
            for &k in &vessel {
                px[0] += px[k] * 0.9;
                px[k] *= 0.1;
            }
        });
    }
    for (cx, cy, r) in swaps {
        for_disc(h, w, cx, cy, r, |y, x| out.pixel_mut(y, x).swap(a, v));
    }
    if spec.contrast > 0.0 {
        let e = 1.0 / (1.0 + spec.contrast);
        for px in out.data_mut().chunks_exact_mut(c) {
            px.iter_mut().for_each(|v| *v = v.powf(e));
            normalize_pixel(px);
        }
    }
    if spec.noise > 0.0 {
        let noise = Normal::new(0.0, spec.noise).expect("finite noise level");
        for px in out.data_mut().chunks_exact_mut(c) {
            px.iter_mut()
                .for_each(|v| *v = (*v + noise.sample(rng)).max(0.0));
            normalize_pixel(px);
        }
    }
    Ok(out)
}

fn subject_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates one subject. Image intensities follow each view's domain
/// style unless `style_override` is given.
pub fn generate_subject_styled(
    cfg: &SynthConfig,
    seed: u64,
    style_override: Option<DomainStyle>,
) -> Result<SyntheticSubject> {
    cfg.check()?;
    let mut rng = subject_rng(seed, 0);
    let world = build_world(cfg, &mut rng);

    let mut views = Vec::new();
    let mut truth = Vec::new();
    let mut images = Vec::new();
    let mut planted = Vec::new();
    for (i, spec) in cfg.views.iter().enumerate() {
        let mut rng = subject_rng(seed, 1 + i as u64);
        let n = cfg.native_side(spec.kind);
        let p = planted_transform(cfg, spec.kind, &mut rng)?;
        let to_world = p.compose(&native_to_common(spec.kind, n)?)?;
        let aux = spec.kind == ScanKind::Auxiliary;
        let (fractions, labels) =
            sample_view(&world, n, &to_world, aux.then_some(cfg.aux_min_width));
        let mut soft = soften(&fractions, n);
        if spec.kind == ScanKind::Disc6 {
            for px in soft.chunks_exact_mut(NUM_CLASSES) {
                px[Class::Faz.index()] = 0.0;
                normalize_pixel(px);
            }
        }
        let mut view = if aux {
            let data: Vec<f64> = soft
                .chunks_exact(NUM_CLASSES)
                .flat_map(|px| {
                    let (a, v) = (px[Class::Artery.index()], px[Class::Vein.index()]);
                    [(1.0 - a - v).clamp(0.0, 1.0), a, v]
                })
                .collect();
            let probs = corrupt_view(
                &ProbabilityMap::new(n, n, 3, data)?,
                &spec.corruption,
                &mut rng,
            )?;
            let mut v = View::new(spec.domain.clone(), spec.kind, probs);
            v.class_map = Some(vec![None, Some(Class::Artery), Some(Class::Vein)]);
            v
        } else {
            let probs = corrupt_view(
                &ProbabilityMap::new(n, n, NUM_CLASSES, soft)?,
                &spec.corruption,
                &mut rng,
            )?;
            View::new(spec.domain.clone(), spec.kind, probs)
        };
        if spec.kind == ScanKind::Disc6 && !view.probs.data().is_empty() {
            // noise can reintroduce FAZ mass
            let mut data = view.probs.clone().into_data();
            for px in data.chunks_exact_mut(NUM_CLASSES) {
                px[Class::Faz.index()] = 0.0;
                normalize_pixel(px);
            }
            view.probs = ProbabilityMap::new(n, n, NUM_CLASSES, data)?;
        }
        let image = (!aux).then(|| {
            let style = style_override.unwrap_or_else(|| cfg.style(&spec.domain));
            render_image(&fractions, n, &style, &mut rng)
        });
        views.push(view);
        truth.push(labels);
        images.push(image);
        planted.push(p);
    }
    Ok(SyntheticSubject {
        bag: SubjectBag {
            subject_id: format!("s{seed:06}"),
            views,
        },
        truth,
        images,
        planted,
    })
}

pub fn generate_subject(cfg: &SynthConfig, seed: u64) -> Result<SyntheticSubject> {
    generate_subject_styled(cfg, seed, None)
}

/// Source-domain training pairs (image, truth) for every non-auxiliary view
/// of `subjects` generated subjects.
pub fn source_domain_samples(
    cfg: &SynthConfig,
    seed: u64,
    subjects: usize,
) -> Result<Vec<(Image, LabelMap)>> {
    let mut out = Vec::new();
    for s in 0..subjects {
        let subject =
            generate_subject_styled(cfg, seed.wrapping_add(s as u64), Some(DomainStyle::SOURCE))?;
        for (img, truth) in subject.images.into_iter().zip(subject.truth) {
            if let Some(img) = img {
                out.push((img, truth));
            }
        }
    }
    Ok(out)
}
