//! Region-wise fusion of registered predictions into integrated labels.
//!
//! Two registrations are involved. The first aligns the macula-centered
//! scans; their predictions are averaged inside the central macula window.
//! The second aligns that fused macula map with the wide-field scans, and
//! the disc and remaining regions are averaged over the scans trusted
//! there. The merged map is finally pulled back into each view's own
//! coordinates, where it replaces only the artery and vein channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_offset, sample_bilinear, warp_raw, Homography};
use crate::map::{argmax, Class, LabelMap, ProbabilityMap, NUM_CLASSES};
use crate::registration::{
    extract_vesselness, register_views, BagRegistration, PairResult, RegistrationConfig,
};
use crate::subject::{
    native_to_common, to_common_space, CommonMap, ScanKind, SubjectBag, COMMON_SIZE,
};

const FULL_COVERAGE: f64 = 1.0 - 1e-9;

/// Channelwise mean of model replicas.
pub fn ensemble_average(replicas: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = replicas
        .first()
        .ok_or_else(|| Error::Argument("ensemble needs at least one replica".into()))?;
    let dims = (first.height(), first.width(), first.channels());
    if let Some(bad) = replicas
        .iter()
        .find(|r| (r.height(), r.width(), r.channels()) != dims)
    {
        return Err(Error::Argument(format!(
            "replica dims {}x{}x{} differ from {}x{}x{}",
            bad.height(),
            bad.width(),
            bad.channels(),
            dims.0,
            dims.1,
            dims.2
        )));
    }
    let n = replicas.len() as f64;
    let mut out = first.clone();
    for r in &replicas[1..] {
        for (o, v) in out.data_mut().iter_mut().zip(r.data()) {
            *o += v;
        }
    }
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v / n).clamp(0.0, 1.0));
    Ok(out)
}

/// Mean written as `v₀ + Σ(vᵢ − v₀)/n`, which returns `v₀` bit-for-bit when
/// all inputs agree.
fn mean_into(out: &mut [f64], vectors: &[&[f64]]) {
    let n = vectors.len() as f64;
    let first = vectors[0];
    for (c, o) in out.iter_mut().enumerate() {
        let spread: f64 = vectors[1..].iter().map(|v| v[c] - first[c]).sum();
        *o = (first[c] + spread / n).clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Macula,
    Disc,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    pub height: usize,
    pub width: usize,
    pub regions: Vec<Region>,
    pub disc_center: Option<(f64, f64)>,
    pub disc_radius: f64,
}

impl RegionPartition {
    pub fn region(&self, y: usize, x: usize) -> Region {
        self.regions[y * self.width + x]
    }

    pub fn mask(&self, region: Region) -> Vec<bool> {
        self.regions.iter().map(|&r| r == region).collect()
    }
}

/// Half-open pixel bounds of the central square window.
pub fn macula_window(side: usize, window: usize) -> std::ops::Range<usize> {
    let window = window.min(side);
    let o = center_offset(window, side);
    o..o + window
}

/// Macula = central `macula_size` window; disc = pixels within
/// `disc_radius` of `disc_center` outside the macula; other = the rest.
pub fn build_partition(
    dims: (usize, usize),
    macula_size: usize,
    disc_center: Option<(f64, f64)>,
    disc_radius: f64,
) -> Result<RegionPartition> {
    let (h, w) = dims;
    if let Some((cx, cy)) = disc_center {
        if !(0.0..w as f64).contains(&cx) || !(0.0..h as f64).contains(&cy) {
            return Err(Error::Argument(format!(
                "disc center ({cx}, {cy}) outside {h}x{w} canvas"
            )));
        }
    }
    let rows = macula_window(h, macula_size);
    let cols = macula_window(w, macula_size);
    let mut regions = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let r = if rows.contains(&y) && cols.contains(&x) {
                Region::Macula
            } else if disc_center
                .is_some_and(|(cx, cy)| (x as f64 - cx).hypot(y as f64 - cy) <= disc_radius)
            {
                Region::Disc
            } else {
                Region::Other
            };
            regions.push(r);
        }
    }
    Ok(RegionPartition {
        height: h,
        width: w,
        regions,
        disc_center,
        disc_radius,
    })
}

/// Which scans a region trusts and which classes trigger averaging there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRule {
    pub kinds: Vec<ScanKind>,
    pub fused_classes: Vec<Class>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationPolicy {
    pub macula: RegionRule,
    pub disc: RegionRule,
    pub other: RegionRule,
    /// Channels written back into each view's own prediction.
    pub back_transform_classes: Vec<Class>,
    pub macula_size: usize,
    pub disc_radius: f64,
}

impl Default for IntegrationPolicy {
    fn default() -> Self {
        Self {
            macula: RegionRule {
                kinds: vec![ScanKind::Macula6, ScanKind::Macula12],
                fused_classes: vec![Class::Artery, Class::Vein, Class::Faz],
            },
            disc: RegionRule {
                kinds: vec![ScanKind::Disc6, ScanKind::Auxiliary],
                fused_classes: vec![Class::Artery, Class::Vein],
            },
            other: RegionRule {
                kinds: vec![ScanKind::Macula12, ScanKind::Auxiliary],
                fused_classes: vec![Class::Artery, Class::Vein],
            },
            back_transform_classes: vec![Class::Artery, Class::Vein],
            macula_size: 256,
            disc_radius: 96.0,
        }
    }
}

impl IntegrationPolicy {
    pub fn check(&self) -> Result<()> {
        for (name, rule) in [
            ("macula", &self.macula),
            ("disc", &self.disc),
            ("other", &self.other),
        ] {
            if rule.kinds.is_empty() {
                return Err(Error::Config(format!("{name} region selects no scans")));
            }
        }
        if self.macula_size == 0 || self.macula_size > COMMON_SIZE || self.disc_radius < 0.0 {
            return Err(Error::Config("bad integration geometry".into()));
        }
        Ok(())
    }
}

/// A fused map and the pixels where averaging actually happened.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMap {
    pub probs: ProbabilityMap,
    pub fused: Vec<bool>,
}

/// Averages the selected maps over `region` at every pixel where at least
/// one of them predicts (argmax) a class in `fused_classes`. Other region
/// pixels copy `fallback`. Views only participate where they fully cover
/// the pixel. Pixels outside `region` are left at zero.
pub fn fuse_region(
    maps: &[CommonMap],
    selected: &[usize],
    region: &[bool],
    fused_classes: &[Class],
    fallback: usize,
) -> Result<FusedMap> {
    if selected.is_empty() {
        return Err(Error::Policy("no views selected for region".into()));
    }
    let base = &maps[fallback].probs;
    let (h, w, c) = (base.height(), base.width(), base.channels());
    if let Some(&bad) = selected.iter().find(|&&j| maps[j].probs.dims() != (h, w)) {
        return Err(Error::Argument(format!(
            "map {bad} not in the common space"
        )));
    }
    let fused_idx: Vec<usize> = fused_classes.iter().map(|c| c.index()).collect();
    let mut probs = ProbabilityMap::zeros(h, w, c);
    let mut fused = vec![false; h * w];
    let mut vectors: Vec<&[f64]> = Vec::with_capacity(selected.len());
    for i in (0..h * w).filter(|&i| region[i]) {
        let (y, x) = (i / w, i % w);
        vectors.clear();
        let mut any_fused = false;
        for &j in selected {
            if maps[j].coverage[i] < FULL_COVERAGE {
                continue;
            }
            let v = maps[j].probs.pixel(y, x);
            any_fused |= fused_idx.contains(&argmax(v));
            vectors.push(v);
        }
        let out = probs.pixel_mut(y, x);
        if any_fused {
            mean_into(out, &vectors);
            fused[i] = true;
        } else {
            out.copy_from_slice(base.pixel(y, x));
        }
    }
    Ok(FusedMap { probs, fused })
}

/// A member of the second registration: the fused macula map or a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Member {
    FusedMacula,
    View(usize),
}

/// A registration together with what its entries refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRegistration {
    pub members: Vec<Member>,
    pub registration: BagRegistration,
}

impl StageRegistration {
    fn position(&self, m: Member) -> Option<usize> {
        self.members.iter().position(|&x| x == m)
    }

    pub fn transform_of(&self, m: Member) -> Option<Homography> {
        self.registration.transform(self.position(m)?)
    }
}

/// Soft and hard integrated label of one view, in its own coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedLabel {
    pub soft: ProbabilityMap,
    pub hard: LabelMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationManifest {
    pub subject_id: String,
    pub macula_views: Vec<usize>,
    pub disc_views: Vec<usize>,
    pub other_views: Vec<usize>,
    pub disc_center: Option<[f64; 2]>,
    pub fallbacks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectIntegration {
    pub labels: Vec<IntegratedLabel>,
    pub manifest: IntegrationManifest,
}

/// Views whose kind the macula rule trusts, in bag order.
pub fn macula_members(bag: &SubjectBag, policy: &IntegrationPolicy) -> Vec<usize> {
    (0..bag.views.len())
        .filter(|&i| policy.macula.kinds.contains(&bag.views[i].kind))
        .collect()
}

/// The fused macula map followed by every view the disc or other rule trusts.
pub fn second_stage_members(bag: &SubjectBag, policy: &IntegrationPolicy) -> Vec<Member> {
    let mut members = vec![Member::FusedMacula];
    for (i, v) in bag.views.iter().enumerate() {
        if policy.disc.kinds.contains(&v.kind) || policy.other.kinds.contains(&v.kind) {
            members.push(Member::View(i));
        }
    }
    members
}

fn common_maps(bag: &SubjectBag) -> Result<Vec<CommonMap>> {
    bag.views
        .iter()
        .map(|v| to_common_space(&v.prediction()?, v.kind))
        .collect()
}

/// Warps probabilities plus a per-pixel scalar layer through `h`.
fn warp_layered(
    probs: &ProbabilityMap,
    layer: &[f64],
    h: &Homography,
) -> Result<(ProbabilityMap, Vec<f64>)> {
    let c = probs.channels();
    let packed = pack(probs, layer);
    let out = warp_raw(
        &packed,
        probs.height(),
        probs.width(),
        c + 1,
        h,
        COMMON_SIZE,
        COMMON_SIZE,
    )?;
    let mut data = Vec::with_capacity(COMMON_SIZE * COMMON_SIZE * c);
    let mut extra = Vec::with_capacity(COMMON_SIZE * COMMON_SIZE);
    for px in out.chunks_exact(c + 1) {
        data.extend(px[..c].iter().map(|v| v.clamp(0.0, 1.0)));
        extra.push(px[c]);
    }
    Ok((
        ProbabilityMap::from_raw(COMMON_SIZE, COMMON_SIZE, c, data),
        extra,
    ))
}

fn pack(probs: &ProbabilityMap, layer: &[f64]) -> Vec<f64> {
    let c = probs.channels();
    let mut packed = Vec::with_capacity(layer.len() * (c + 1));
    for (px, &l) in probs.pixels().zip(layer) {
        packed.extend_from_slice(px);
        packed.push(l);
    }
    packed
}

fn warp_common(map: &CommonMap, h: &Homography) -> Result<CommonMap> {
    let (probs, coverage) = warp_layered(&map.probs, &map.coverage, h)?;
    Ok(CommonMap { probs, coverage })
}

fn registered_members(
    stage: &StageRegistration,
    bag_maps: &[CommonMap],
    fused: Option<&CommonMap>,
) -> Result<Vec<(Member, CommonMap)>> {
    let mut out = Vec::new();
    for (k, &m) in stage.members.iter().enumerate() {
        let Some(h) = stage.registration.transform(k) else {
            continue;
        };
        let src = match m {
            Member::View(i) => &bag_maps[i],
            Member::FusedMacula => match fused {
                Some(f) => f,
                None => continue,
            },
        };
        out.push((m, warp_common(src, &h)?));
    }
    Ok(out)
}

fn bool_layer(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Macula-window fusion in the first registration's anchor frame.
pub fn fuse_macula(
    bag: &SubjectBag,
    reg1: &StageRegistration,
    policy: &IntegrationPolicy,
) -> Result<FusedMap> {
    let maps = common_maps(bag)?;
    fuse_macula_with(&maps, reg1, policy)
}

fn fuse_macula_with(
    maps: &[CommonMap],
    reg1: &StageRegistration,
    policy: &IntegrationPolicy,
) -> Result<FusedMap> {
    let warped = registered_members(reg1, maps, None)?;
    let anchor = reg1.members[reg1.registration.anchor_index];
    let selected: Vec<usize> = (0..warped.len()).collect();
    let fallback = warped.iter().position(|(m, _)| *m == anchor).unwrap_or(0);
    let partition = build_partition((COMMON_SIZE, COMMON_SIZE), policy.macula_size, None, 0.0)?;
    let region = partition.mask(Region::Macula);
    let maps: Vec<CommonMap> = warped.into_iter().map(|(_, m)| m).collect();
    fuse_region(
        &maps,
        &selected,
        &region,
        &policy.macula.fused_classes,
        fallback,
    )
}

fn fused_as_common(f: &FusedMap, window: usize) -> CommonMap {
    let rows = macula_window(COMMON_SIZE, window);
    let coverage = (0..COMMON_SIZE * COMMON_SIZE)
        .map(|i| {
            let (y, x) = (i / COMMON_SIZE, i % COMMON_SIZE);
            if rows.contains(&y) && rows.contains(&x) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    CommonMap {
        probs: f.probs.clone(),
        coverage,
    }
}

/// Vesselness of the fused macula map, the first member of the second
/// registration.
pub fn fused_macula_vesselness(f: &FusedMap) -> Result<crate::registration::VesselnessMap> {
    extract_vesselness(&f.probs)
}

/// Fuses the bag per `policy` and pulls the result back into every view.
pub fn integrate_subject(
    bag: &SubjectBag,
    reg1: &StageRegistration,
    reg2: Option<&StageRegistration>,
    policy: &IntegrationPolicy,
) -> Result<SubjectIntegration> {
    if bag.indices_of(ScanKind::Macula6).is_empty() {
        return Err(Error::Policy(format!(
            "subject {} has no macula6 view",
            bag.subject_id
        )));
    }
    if !reg1.registration.success || reg2.is_some_and(|r| !r.registration.success) {
        return Err(Error::Policy(
            "integration needs successful registrations".into(),
        ));
    }
    let maps = common_maps(bag)?;
    let macula = fuse_macula_with(&maps, reg1, policy)?;
    let mut fallbacks = Vec::new();
    let mut manifest = IntegrationManifest {
        subject_id: bag.subject_id.clone(),
        macula_views: reg1
            .members
            .iter()
            .filter_map(|m| match m {
                Member::View(i) => Some(*i),
                Member::FusedMacula => None,
            })
            .collect(),
        disc_views: Vec::new(),
        other_views: Vec::new(),
        disc_center: None,
        fallbacks: Vec::new(),
    };

    // merged map in the second stage's anchor frame, with the fused mask
    let merged: Option<(ProbabilityMap, Vec<f64>)> = match reg2 {
        None => {
            fallbacks.push(
                "no second-stage registration: disc and other regions keep view predictions".into(),
            );
            None
        }
        Some(reg2) => {
            let fused_common = fused_as_common(&macula, policy.macula_size);
            let warped = registered_members(reg2, &maps, Some(&fused_common))?;
            let anchor = reg2.members[reg2.registration.anchor_index];

            let disc_member = warped.iter().find_map(|(m, _)| match m {
                Member::View(i) if bag.views[*i].kind == ScanKind::Disc6 => Some(*m),
                _ => None,
            });
            let disc_center = match disc_member {
                Some(m) => {
                    let h = reg2
                        .transform_of(m)
                        .expect("registered member has a transform");
                    let c = (COMMON_SIZE as f64 - 1.0) / 2.0;
                    let (x, y) = h.apply(c, c);
                    let inside = (0.0..COMMON_SIZE as f64).contains(&x)
                        && (0.0..COMMON_SIZE as f64).contains(&y);
                    if inside {
                        Some((x, y))
                    } else {
                        fallbacks.push(format!("disc center ({x:.1}, {y:.1}) outside the canvas"));
                        None
                    }
                }
                None => {
                    fallbacks.push("disc: no disc6 view".into());
                    None
                }
            };
            manifest.disc_center = disc_center.map(|(x, y)| [x, y]);
            let partition = build_partition(
                (COMMON_SIZE, COMMON_SIZE),
                policy.macula_size,
                disc_center,
                policy.disc_radius,
            )?;

            let mut probs = ProbabilityMap::zeros(COMMON_SIZE, COMMON_SIZE, NUM_CLASSES);
            let mut mask = vec![0.0; COMMON_SIZE * COMMON_SIZE];

            // macula window: the fused macula map carried into this frame
            if let Some(h) = reg2.transform_of(Member::FusedMacula) {
                let (mp, mm) = warp_layered(&macula.probs, &bool_layer(&macula.fused), &h)?;
                for (i, r) in partition.regions.iter().enumerate() {
                    if *r == Region::Macula {
                        let (y, x) = (i / COMMON_SIZE, i % COMMON_SIZE);
                        probs.pixel_mut(y, x).copy_from_slice(mp.pixel(y, x));
                        mask[i] = mm[i];
                    }
                }
            }

            let member_maps: Vec<CommonMap> = warped.iter().map(|(_, m)| m.clone()).collect();
            for (region, rule) in [(Region::Disc, &policy.disc), (Region::Other, &policy.other)] {
                let selected: Vec<usize> = warped
                    .iter()
                    .enumerate()
                    .filter_map(|(k, (m, _))| match m {
                        Member::View(i) if rule.kinds.contains(&bag.views[*i].kind) => Some(k),
                        _ => None,
                    })
                    .collect();
                let views: Vec<usize> = selected
                    .iter()
                    .filter_map(|&k| match warped[k].0 {
                        Member::View(i) => Some(i),
                        Member::FusedMacula => None,
                    })
                    .collect();
                match region {
                    Region::Disc => manifest.disc_views = views,
                    _ => manifest.other_views = views,
                }
                if selected.is_empty() {
                    fallbacks.push(format!("{region:?}: no trusted scan available"));
                    continue;
                }
                let fallback = selected
                    .iter()
                    .copied()
                    .find(|&k| warped[k].0 == anchor)
                    .unwrap_or(selected[0]);
                let fused = fuse_region(
                    &member_maps,
                    &selected,
                    &partition.mask(region),
                    &rule.fused_classes,
                    fallback,
                )?;
                for (i, r) in partition.regions.iter().enumerate() {
                    if *r == region {
                        let (y, x) = (i / COMMON_SIZE, i % COMMON_SIZE);
                        probs
                            .pixel_mut(y, x)
                            .copy_from_slice(fused.probs.pixel(y, x));
                        mask[i] = if fused.fused[i] { 1.0 } else { 0.0 };
                    }
                }
            }
            Some((probs, mask))
        }
    };

    let macula_packed = pack(&macula.probs, &bool_layer(&macula.fused));
    let merged_packed = merged.as_ref().map(|(p, m)| pack(p, m));
    let window = macula_window(COMMON_SIZE, policy.macula_size);
    let back: Vec<usize> = policy
        .back_transform_classes
        .iter()
        .map(|c| c.index())
        .collect();

    let mut labels = Vec::with_capacity(bag.views.len());
    for (i, view) in bag.views.iter().enumerate() {
        let pred = view.prediction()?;
        let n = pred.height();
        let to_common = native_to_common(view.kind, n)?;
        let h1 = reg1.transform_of(Member::View(i));
        let h2 = reg2.and_then(|r| {
            r.transform_of(Member::View(i)).or_else(|| {
                let f = r.transform_of(Member::FusedMacula)?;
                f.compose(h1.as_ref()?).ok()
            })
        });
        // resized scans cover several working-space pixels per native pixel;
        // average over the footprint
        let scale = to_common.get(0, 0).abs().max(1.0);
        let taps = scale.round() as usize;
        let offsets: Vec<f64> = (0..taps)
            .map(|k| (k as f64 + 0.5) / taps as f64 - 0.5)
            .collect();
        let mut soft = pred.clone();
        let mut sample = [0.0; NUM_CLASSES + 1];
        let mut acc = [0.0; NUM_CLASSES + 1];
        for y in 0..n {
            for x in 0..pred.width() {
                let mut hits = 0usize;
                acc.iter_mut().for_each(|v| *v = 0.0);
                for &oy in &offsets {
                    for &ox in &offsets {
                        let (cx, cy) = to_common.apply(x as f64 + ox, y as f64 + oy);
                        if revert_sample(
                            &ReversionSources {
                                h1: h1.as_ref(),
                                h2: h2.as_ref(),
                                macula: &macula_packed,
                                merged: merged_packed.as_deref(),
                                window: &window,
                            },
                            cx,
                            cy,
                            &mut sample,
                        ) {
                            hits += 1;
                            acc.iter_mut().zip(&sample).for_each(|(a, s)| *a += s);
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                if hits > 1 {
                    acc.iter_mut().for_each(|a| *a /= hits as f64);
                }
                if acc[NUM_CLASSES] > 0.5 {
                    write_back(soft.pixel_mut(y, x), &acc[..NUM_CLASSES], &back);
                }
            }
        }
        let hard = soft.argmax();
        labels.push(IntegratedLabel { soft, hard });
    }
    manifest.fallbacks = fallbacks;
    Ok(SubjectIntegration { labels, manifest })
}

struct ReversionSources<'a> {
    h1: Option<&'a Homography>,
    h2: Option<&'a Homography>,
    macula: &'a [f64],
    merged: Option<&'a [f64]>,
    window: &'a std::ops::Range<usize>,
}

/// Samples the fused maps at working-space point `(cx, cy)` of a view: the
/// macula fusion when the point lands in its window, else the merged
/// second-stage map. Returns false when neither applies.
fn revert_sample(src: &ReversionSources, cx: f64, cy: f64, out: &mut [f64]) -> bool {
    let w = src.window;
    if let Some(h1) = src.h1 {
        let (ax, ay) = h1.apply(cx, cy);
        let (rx, ry) = (ax.round(), ay.round());
        let inside = |v: f64| v >= w.start as f64 && v < w.end as f64;
        if inside(rx) && inside(ry) {
            sample_bilinear(
                src.macula,
                COMMON_SIZE,
                COMMON_SIZE,
                NUM_CLASSES + 1,
                ax,
                ay,
                out,
            );
            return true;
        }
    }
    if let (Some(h2), Some(buf)) = (src.h2, src.merged) {
        let (ax, ay) = h2.apply(cx, cy);
        sample_bilinear(buf, COMMON_SIZE, COMMON_SIZE, NUM_CLASSES + 1, ax, ay, out);
        return true;
    }
    false
}

/// Overwrites `classes` of `pixel` with the fused values and rescales the
/// remaining channels so the pixel sums to one.
fn write_back(pixel: &mut [f64], fused: &[f64], classes: &[usize]) {
    let mass: f64 = fused.iter().sum();
    if mass < 0.5 {
        return;
    }
    // partial footprints at region borders carry less than unit mass
    let scale = if (mass - 1.0).abs() > 1e-6 {
        1.0 / mass
    } else {
        1.0
    };
    let mut written = 0.0;
    for &c in classes {
        pixel[c] = (fused[c] * scale).clamp(0.0, 1.0);
        written += pixel[c];
    }
    if written > 1.0 {
        for &c in classes {
            pixel[c] /= written;
        }
        written = 1.0;
    }
    let rest: f64 = (0..pixel.len())
        .filter(|c| !classes.contains(c))
        .map(|c| pixel[c])
        .sum();
    let target = 1.0 - written;
    if rest > 0.0 {
        let k = target / rest;
        for c in (0..pixel.len()).filter(|c| !classes.contains(c)) {
            pixel[c] = (pixel[c] * k).clamp(0.0, 1.0);
        }
    } else {
        pixel[Class::Background.index()] = target.max(0.0);
    }
}

/// Both registrations plus integration for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedSubject {
    pub subject_id: String,
    pub stage1: Option<StageRegistration>,
    pub stage2: Option<StageRegistration>,
    pub integration: Option<SubjectIntegration>,
    /// Why the subject could not be integrated, if it could not.
    pub failure: Option<String>,
}

impl GroundedSubject {
    pub fn is_success(&self) -> bool {
        self.integration.is_some()
    }
}

fn register_members(
    maps: Vec<crate::registration::VesselnessMap>,
    cfg: &RegistrationConfig,
) -> Result<BagRegistration> {
    if maps.len() == 1 {
        return Ok(BagRegistration {
            anchor_index: 0,
            outcomes: vec![PairResult::Anchor],
            used_anchors: vec![0],
            cluster_distance: 0.0,
            success: true,
            trials: 1,
        });
    }
    let cfg = RegistrationConfig {
        initial_anchor: cfg.initial_anchor.min(maps.len() - 1),
        ..*cfg
    };
    register_views(&maps, &cfg)
}

/// Runs the macula registration, macula fusion, second registration and
/// integration. Registration failures are reported in the result rather
/// than as errors.
pub fn ground_and_integrate(
    bag: &SubjectBag,
    cfg: &RegistrationConfig,
    policy: &IntegrationPolicy,
) -> Result<GroundedSubject> {
    let maps = common_maps(bag)?;
    let members1 = macula_members(bag, policy);
    if members1.is_empty() {
        return Err(Error::Policy(format!(
            "subject {} has no macula-centered view",
            bag.subject_id
        )));
    }
    let mut out = GroundedSubject {
        subject_id: bag.subject_id.clone(),
        stage1: None,
        stage2: None,
        integration: None,
        failure: None,
    };
    let ves1 = members1
        .iter()
        .map(|&i| extract_vesselness(&maps[i].probs))
        .collect::<Result<Vec<_>>>()?;
    let reg1 = StageRegistration {
        members: members1.into_iter().map(Member::View).collect(),
        registration: register_members(ves1, cfg)?,
    };
    let ok1 = reg1.registration.success;
    out.stage1 = Some(reg1);
    if !ok1 {
        out.failure = Some("macula registration failed on every anchor".into());
        return Ok(out);
    }
    let reg1 = out.stage1.as_ref().unwrap();

    let members2 = second_stage_members(bag, policy);
    if members2.len() >= 2 {
        let fused = fuse_macula_with(&maps, reg1, policy)?;
        let ves2 = members2
            .iter()
            .map(|m| match m {
                Member::FusedMacula => extract_vesselness(&fused.probs),
                Member::View(i) => extract_vesselness(&maps[*i].probs),
            })
            .collect::<Result<Vec<_>>>()?;
        let reg2 = StageRegistration {
            members: members2,
            registration: register_members(ves2, cfg)?,
        };
        let ok2 = reg2.registration.success;
        out.stage2 = Some(reg2);
        if !ok2 {
            out.failure = Some("wide-field registration failed on every anchor".into());
            return Ok(out);
        }
    }
    out.integration = Some(integrate_subject(
        bag,
        out.stage1.as_ref().unwrap(),
        out.stage2.as_ref(),
        policy,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ProbabilityMap {
        let mut data = Vec::with_capacity(h * w * NUM_CLASSES);
        for _ in 0..h * w {
            let raw: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|v| v / s));
        }
        ProbabilityMap::new(h, w, NUM_CLASSES, data).unwrap()
    }

    fn full(map: ProbabilityMap) -> CommonMap {
        let n = map.height() * map.width();
        CommonMap {
            probs: map,
            coverage: vec![1.0; n],
        }
    }

    #[test]
    fn ensemble_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_map(&mut rng, 4, 4);
        assert_eq!(ensemble_average(std::slice::from_ref(&a)).unwrap(), a);

        let p = ProbabilityMap::new(1, 1, 5, vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let q = ProbabilityMap::new(1, 1, 5, vec![0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            ensemble_average(&[p, q]).unwrap().data(),
            &[0.5, 0.5, 0.0, 0.0, 0.0]
        );

        let maps: Vec<_> = (0..3).map(|_| random_map(&mut rng, 6, 5)).collect();
        let mean = ensemble_average(&maps).unwrap();
        for i in 0..mean.data().len() {
            let brute = (maps[0].data()[i] + maps[1].data()[i] + maps[2].data()[i]) / 3.0;
            assert!((mean.data()[i] - brute).abs() <= 1e-12);
        }
        let odd = random_map(&mut rng, 6, 4);
        assert!(ensemble_average(&[maps[0].clone(), odd]).is_err());
        assert!(ensemble_average(&[]).is_err());
    }

    #[test]
    fn partition_examples() {
        let p = build_partition((512, 512), 256, Some((430.0, 256.0)), 60.0).unwrap();
        assert_eq!(p.region(256, 256), Region::Macula);
        assert_eq!(p.region(256, 430), Region::Disc);
        assert_eq!(p.region(0, 0), Region::Other);
        // the disc disk overlaps the window; the window wins
        assert_eq!(p.region(256, 380), Region::Macula);
        assert_eq!(p.region(256, 384), Region::Disc);
        assert!(build_partition((512, 512), 256, Some((600.0, 10.0)), 10.0).is_err());
    }

    #[test]
    fn fuse_single_view_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = full(random_map(&mut rng, 8, 8));
        let region = vec![true; 64];
        let out = fuse_region(
            std::slice::from_ref(&m),
            &[0],
            &region,
            &[Class::Artery, Class::Vein],
            0,
        )
        .unwrap();
        assert_eq!(out.probs, m.probs);
    }

    #[test]
    fn fuse_two_artery_values() {
        let a = ProbabilityMap::new(1, 1, 5, vec![0.1, 0.05, 0.8, 0.05, 0.0]).unwrap();
        let b = ProbabilityMap::new(1, 1, 5, vec![0.2, 0.1, 0.6, 0.1, 0.0]).unwrap();
        let out = fuse_region(&[full(a), full(b)], &[0, 1], &[true], &[Class::Artery], 0).unwrap();
        assert!((out.probs.data()[2] - 0.7).abs() < 1e-15);
        assert!(out.fused[0]);
    }

    #[test]
    fn fuse_requires_selection() {
        let m = full(ProbabilityMap::zeros(2, 2, 5));
        assert!(matches!(
            fuse_region(&[m], &[], &[true; 4], &[Class::Artery], 0),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn fuse_skips_uncovered_views() {
        let a = ProbabilityMap::new(1, 1, 5, vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let b = ProbabilityMap::new(1, 1, 5, vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let maps = [
            full(a.clone()),
            CommonMap {
                probs: b,
                coverage: vec![0.5],
            },
        ];
        let out = fuse_region(&maps, &[0, 1], &[true], &[Class::Artery], 0).unwrap();
        assert_eq!(out.probs, a);
    }

    #[test]
    fn mean_of_equal_vectors_is_exact() {
        let v = [0.1, 0.2, 0.30000000000000004, 0.15, 0.25];
        let mut out = [0.0; 5];
        mean_into(&mut out, &[&v, &v, &v]);
        assert_eq!(out, v);
    }

    #[test]
    fn write_back_renormalizes_untouched_channels() {
        let mut px = [0.4, 0.2, 0.2, 0.1, 0.1];
        write_back(&mut px, &[0.2, 0.1, 0.5, 0.2, 0.0], &[2, 3]);
        assert_eq!(px[2], 0.5);
        assert_eq!(px[3], 0.2);
        assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // untouched channels keep their 4:2:1 proportions
        assert!((px[0] / px[1] - 2.0).abs() < 1e-12);
        assert!((px[1] / px[4] - 2.0).abs() < 1e-12);

        let mut px = [0.0, 0.0, 0.6, 0.4, 0.0];
        write_back(&mut px, &[0.5, 0.0, 0.3, 0.2, 0.0], &[2, 3]);
        assert!((px[0] - 0.5).abs() < 1e-12);
    }
}
