//! Segmentation metrics: Dice, average symmetric surface distance, the
//! disc-scan FAZ score, and grouped mean ± std reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{Class, LabelMap, NUM_CLASSES};
use crate::subject::ScanKind;

fn same_dims(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Argument(format!(
            "label maps {}x{} and {}x{} differ",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `2|P ∩ T| / (|P| + |T|)` for one class; 1 when both are empty.
pub fn dice(pred: &LabelMap, truth: &LabelMap, class: Class) -> Result<f64> {
    same_dims(pred, truth)?;
    let c = class as u8;
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        p += (a == c) as usize;
        t += (b == c) as usize;
        inter += (a == c && b == c) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Mask pixels with a 4-neighbour outside the mask. Pixels beyond the image
/// edge count as outside.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && mask[y as usize * width + x as usize]
    };
    let mut out = vec![false; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas).
/// Infinite entries are not sites.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: isize = -1;
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel.
pub fn squared_distance_transform(set: &[bool], height: usize, width: usize) -> Vec<f64> {
    let n = height.max(width);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut col_in = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    let mut grid: Vec<f64> = set
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    for x in 0..width {
        for y in 0..height {
            col_in[y] = grid[y * width + x];
        }
        edt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; width];
    for y in 0..height {
        edt_1d(
            &grid[y * width..(y + 1) * width],
            &mut row_out,
            &mut v,
            &mut z,
        );
        grid[y * width..(y + 1) * width].copy_from_slice(&row_out);
    }
    grid
}

/// Mean distance from each boundary pixel of either mask to the other
/// mask's boundary. `None` when either mask is empty.
pub fn assd(pred: &LabelMap, truth: &LabelMap, class: Class) -> Result<Option<f64>> {
    same_dims(pred, truth)?;
    let (h, w) = (pred.height(), pred.width());
    let bp = boundary(&pred.mask(class), h, w);
    let bt = boundary(&truth.mask(class), h, w);
    let (np, nt) = (
        bp.iter().filter(|&&b| b).count(),
        bt.iter().filter(|&&b| b).count(),
    );
    if np == 0 || nt == 0 {
        return Ok(None);
    }
    let dt = squared_distance_transform(&bt, h, w);
    let dp = squared_distance_transform(&bp, h, w);
    let mut total = 0.0;
    for i in (0..h * w).filter(|&i| bp[i]) {
        total += dt[i].sqrt();
    }
    for i in (0..h * w).filter(|&i| bt[i]) {
        total += dp[i].sqrt();
    }
    Ok(Some(total / (np + nt) as f64))
}

/// 100 when a disc-scan prediction has no FAZ pixel, else 0.
pub fn faz_disc_score(pred: &LabelMap, kind: ScanKind) -> Result<f64> {
    if kind != ScanKind::Disc6 {
        return Err(Error::Argument(format!(
            "FAZ disc score applies to disc6 scans, not {}",
            kind.name()
        )));
    }
    Ok(if pred.count(Class::Faz) == 0 {
        100.0
    } else {
        0.0
    })
}

/// Scores of one prediction against its truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub subject: String,
    pub domain: String,
    pub kind: ScanKind,
    pub method: String,
    /// Dice in percent per class, indexed by class id.
    pub dice: [f64; NUM_CLASSES],
    /// ASSD in pixels per class; `None` when undefined.
    pub assd: [Option<f64>; NUM_CLASSES],
    pub faz_disc: Option<f64>,
}

pub fn score_image(
    pred: &LabelMap,
    truth: &LabelMap,
    subject: &str,
    domain: &str,
    kind: ScanKind,
    method: &str,
) -> Result<ImageScore> {
    let mut dice_pc = [0.0; NUM_CLASSES];
    let mut assd_px = [None; NUM_CLASSES];
    for c in Class::ALL {
        dice_pc[c.index()] = 100.0 * dice(pred, truth, c)?;
        assd_px[c.index()] = assd(pred, truth, c)?;
    }
    Ok(ImageScore {
        subject: subject.into(),
        domain: domain.into(),
        kind,
        method: method.into(),
        dice: dice_pc,
        assd: assd_px,
        faz_disc: (kind == ScanKind::Disc6)
            .then(|| faz_disc_score(pred, kind))
            .transpose()?,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        // offset from the first value keeps constant inputs exact
        let mean = values[0] + values.iter().map(|v| v - values[0]).sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

/// One (method, domain, class) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: String,
    /// A domain tag or `"All"`.
    pub domain: String,
    pub class: Class,
    pub dice: Option<Stat>,
    pub assd: Option<Stat>,
    /// Images whose ASSD was undefined for this class.
    pub assd_missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub method: String,
    pub baseline: String,
    pub domain: String,
    pub class: Class,
    pub dice: Option<f64>,
    pub assd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub groups: Vec<GroupSummary>,
    /// FAZ disc score per method over disc scans.
    pub faz_disc: BTreeMap<String, Stat>,
    pub deltas: Vec<Delta>,
}

impl EvalReport {
    pub fn group(&self, method: &str, domain: &str, class: Class) -> Option<&GroupSummary> {
        self.groups
            .iter()
            .find(|g| g.method == method && g.domain == domain && g.class == class)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

/// Groups scores by method and by domain (plus an `"All"` group per
/// method), and reports deltas of every method against `baseline`.
pub fn aggregate(scores: &[ImageScore], baseline: Option<&str>) -> EvalReport {
    let mut methods: Vec<&str> = scores.iter().map(|s| s.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let mut groups = Vec::new();
    let mut faz_disc = BTreeMap::new();
    for &m in &methods {
        let of_method: Vec<&ImageScore> = scores.iter().filter(|s| s.method == m).collect();
        let mut domains: Vec<&str> = of_method.iter().map(|s| s.domain.as_str()).collect();
        domains.sort_unstable();
        domains.dedup();
        domains.push("All");
        for d in domains {
            let members: Vec<&&ImageScore> = of_method
                .iter()
                .filter(|s| d == "All" || s.domain == d)
                .collect();
            for c in Class::ALL {
                let dice: Vec<f64> = members.iter().map(|s| s.dice[c.index()]).collect();
                let assd: Vec<f64> = members.iter().filter_map(|s| s.assd[c.index()]).collect();
                groups.push(GroupSummary {
                    method: m.into(),
                    domain: d.into(),
                    class: c,
                    dice: Stat::of(&dice),
                    assd: Stat::of(&assd),
                    assd_missing: members.len() - assd.len(),
                });
            }
        }
        let disc: Vec<f64> = of_method.iter().filter_map(|s| s.faz_disc).collect();
        if let Some(st) = Stat::of(&disc) {
            faz_disc.insert(m.to_string(), st);
        }
    }
    let mut deltas = Vec::new();
    if let Some(base) = baseline {
        for g in groups.iter().filter(|g| g.method != base) {
            let Some(b) = groups
                .iter()
                .find(|b| b.method == base && b.domain == g.domain && b.class == g.class)
            else {
                continue;
            };
            let diff = |x: Option<Stat>, y: Option<Stat>| Some(x?.mean - y?.mean);
            deltas.push(Delta {
                method: g.method.clone(),
                baseline: base.into(),
                domain: g.domain.clone(),
                class: g.class,
                dice: diff(g.dice, b.dice),
                assd: diff(g.assd, b.assd),
            });
        }
    }
    EvalReport {
        groups,
        faz_disc,
        deltas,
    }
}

/// Per-image scores as CSV; undefined ASSD cells are left empty.
pub fn write_scores_csv(scores: &[ImageScore], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "subject".to_string(),
        "domain".into(),
        "kind".into(),
        "method".into(),
    ];
    for c in Class::ALL {
        header.push(format!("dice_{}", c.name()));
    }
    for c in Class::ALL {
        header.push(format!("assd_{}", c.name()));
    }
    header.push("faz_disc".into());
    w.write_record(&header)?;
    for s in scores {
        let mut row = vec![
            s.subject.clone(),
            s.domain.clone(),
            s.kind.name().into(),
            s.method.clone(),
        ];
        row.extend(s.dice.iter().map(|d| format!("{d:.6}")));
        row.extend(
            s.assd
                .iter()
                .map(|a| a.map(|v| format!("{v:.6}")).unwrap_or_default()),
        );
        row.push(s.faz_disc.map(|v| format!("{v}")).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: usize, w: usize, cells: &[(usize, usize)]) -> LabelMap {
        let mut l = LabelMap::filled(h, w, Class::Background);
        for &(y, x) in cells {
            l.set(y, x, Class::Artery);
        }
        l
    }

    #[test]
    fn dice_cases() {
        let a = block(4, 4, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        let b = block(4, 4, &[(1, 2), (1, 3), (2, 2), (2, 3)]);
        assert_eq!(dice(&a, &a, Class::Artery).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, Class::Artery).unwrap(), 0.5);
        let c = block(4, 4, &[(3, 3)]);
        assert_eq!(dice(&a, &c, Class::Artery).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, Class::Vein).unwrap(), 1.0);
    }

    #[test]
    fn assd_cases() {
        let a = block(6, 6, &[(2, 2)]);
        let b = block(6, 6, &[(2, 3)]);
        assert_eq!(assd(&a, &a, Class::Artery).unwrap(), Some(0.0));
        assert_eq!(assd(&a, &b, Class::Artery).unwrap(), Some(1.0));
        let empty = block(6, 6, &[]);
        assert_eq!(assd(&empty, &a, Class::Artery).unwrap(), None);
    }

    #[test]
    fn boundary_of_filled_square_is_its_ring() {
        let mask: Vec<bool> = (0..25)
            .map(|i| (1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5)))
            .collect();
        let b = boundary(&mask, 5, 5);
        assert_eq!(b.iter().filter(|&&v| v).count(), 8);
        assert!(!b[2 * 5 + 2]);
    }

    #[test]
    fn distance_transform_small_case() {
        let mut set = vec![false; 12];
        set[0] = true;
        let d = squared_distance_transform(&set, 3, 4);
        assert_eq!(d[2 * 4 + 3], 13.0);
        assert_eq!(
            squared_distance_transform(&[false; 4], 2, 2)[0],
            f64::INFINITY
        );
    }

    #[test]
    fn faz_score_convention() {
        let mut l = LabelMap::filled(3, 3, Class::Background);
        assert_eq!(faz_disc_score(&l, ScanKind::Disc6).unwrap(), 100.0);
        l.set(1, 1, Class::Faz);
        assert_eq!(faz_disc_score(&l, ScanKind::Disc6).unwrap(), 0.0);
        assert!(faz_disc_score(&l, ScanKind::Macula6).is_err());
    }

    #[test]
    fn identical_reports_have_zero_spread() {
        let a = block(4, 4, &[(1, 1)]);
        let s = score_image(&a, &a, "s", "D1", ScanKind::Macula6, "m").unwrap();
        let r = aggregate(&[s.clone(), s.clone(), s], None);
        for g in &r.groups {
            assert_eq!(g.dice.unwrap().std, 0.0);
        }
    }

    #[test]
    fn deltas_against_baseline() {
        let t = block(4, 4, &[(1, 1), (1, 2)]);
        let p = block(4, 4, &[(1, 1)]);
        let good = score_image(&t, &t, "s", "D1", ScanKind::Macula6, "adapted").unwrap();
        let bad = score_image(&p, &t, "s", "D1", ScanKind::Macula6, "source").unwrap();
        let r = aggregate(&[good, bad], Some("source"));
        let d = r
            .deltas
            .iter()
            .find(|d| d.domain == "All" && d.class == Class::Artery)
            .unwrap();
        assert!((d.dice.unwrap() - (100.0 - 200.0 / 3.0)).abs() < 1e-9);
    }
}
