#![allow(dead_code)]

use mvadapt::map::{Image, LabelMap, ProbabilityMap, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Softmax of Gaussian logits with spread `temp`, one distribution per pixel.
pub fn random_probs(h: usize, w: usize, temp: f64, rng: &mut ChaCha8Rng) -> ProbabilityMap {
    let mut data = Vec::with_capacity(h * w * NUM_CLASSES);
    for _ in 0..h * w {
        let z: Vec<f64> = (0..NUM_CLASSES)
            .map(|_| temp * (rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    ProbabilityMap::new(h, w, NUM_CLASSES, data).unwrap()
}

pub fn random_labels(h: usize, w: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    LabelMap::new(
        h,
        w,
        (0..h * w)
            .map(|_| rng.random_range(0..NUM_CLASSES as u8))
            .collect(),
    )
    .unwrap()
}

/// Labels drawn as blobs: a few random discs of random classes on background.
pub fn blob_labels(h: usize, w: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let mut data = vec![0u8; h * w];
    for _ in 0..rng.random_range(1..5) {
        let c = rng.random_range(1..NUM_CLASSES as u8);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let r = rng.random_range(1.0..(h.min(w) as f64 / 2.0).max(1.5));
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - cy).hypot(x as f64 - cx) <= r {
                    data[y * w + x] = c;
                }
            }
        }
    }
    LabelMap::new(h, w, data).unwrap()
}

pub fn random_image(h: usize, w: usize, channels: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(
        h,
        w,
        channels,
        (0..h * w * channels).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

/// Boundary pixels by explicit neighbour checks; out-of-image is outside.
pub fn brute_boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let inside = |y: i64, x: i64| {
        y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[y as usize * w + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !inside(y, x) {
                continue;
            }
            let n = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)];
            if n.iter().any(|&(a, b)| !inside(a, b)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

pub fn brute_dice(p: &LabelMap, t: &LabelMap, c: u8) -> f64 {
    let mut inter = 0usize;
    let mut np = 0usize;
    let mut nt = 0usize;
    for i in 0..p.data().len() {
        if p.data()[i] == c {
            np += 1;
        }
        if t.data()[i] == c {
            nt += 1;
        }
        if p.data()[i] == c && t.data()[i] == c {
            inter += 1;
        }
    }
    if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    }
}

/// All-pairs symmetric surface distance.
pub fn brute_assd(p: &LabelMap, t: &LabelMap, c: u8) -> Option<f64> {
    let (h, w) = (p.height(), p.width());
    let mp: Vec<bool> = p.data().iter().map(|&v| v == c).collect();
    let mt: Vec<bool> = t.data().iter().map(|&v| v == c).collect();
    let bp = brute_boundary(&mp, h, w);
    let bt = brute_boundary(&mt, h, w);
    if bp.is_empty() || bt.is_empty() {
        return None;
    }
    let nearest = |a: &(usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|b| {
                let dy = a.0 as f64 - b.0 as f64;
                let dx = a.1 as f64 - b.1 as f64;
                (dy * dy + dx * dx).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let total: f64 = bp.iter().map(|a| nearest(a, &bt)).sum::<f64>()
        + bt.iter().map(|a| nearest(a, &bp)).sum::<f64>();
    Some(total / (bp.len() + bt.len()) as f64)
}
