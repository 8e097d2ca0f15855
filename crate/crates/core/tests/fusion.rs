mod common;

use common::{random_probs, rng};
use mvadapt::integration::fuse_region;
use mvadapt::map::{argmax, Class, ProbabilityMap};
use mvadapt::subject::CommonMap;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

const AV: [Class; 2] = [Class::Artery, Class::Vein];

fn maps(n: usize, h: usize, w: usize, seed: u64) -> Vec<CommonMap> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let probs: ProbabilityMap = random_probs(h, w, 3.0, &mut r);
            let coverage = (0..h * w)
                .map(|_| if r.random::<f64>() < 0.15 { 0.5 } else { 1.0 })
                .collect();
            CommonMap { probs, coverage }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_order_does_not_matter(seed in 0u64..10_000, n in 2usize..6) {
        let m = maps(n, 6, 7, seed);
        let region = vec![true; 42];
        let mut sel: Vec<usize> = (0..n).collect();
        let a = fuse_region(&m, &sel, &region, &AV, 0).unwrap();
        sel.shuffle(&mut rng(seed ^ 0xabc));
        let b = fuse_region(&m, &sel, &region, &AV, 0).unwrap();
        prop_assert_eq!(&a.fused, &b.fused);
        for (x, y) in a.probs.data().iter().zip(b.probs.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn fused_pixels_are_convex_combinations(seed in 0u64..10_000, n in 1usize..6) {
        let m = maps(n, 5, 5, seed);
        let region: Vec<bool> = (0..25).map(|i| i % 7 != 3).collect();
        let sel: Vec<usize> = (0..n).collect();
        let f = fuse_region(&m, &sel, &region, &AV, 0).unwrap();
        for (i, &inside) in region.iter().enumerate() {
            let (y, x) = (i / 5, i % 5);
            let out = f.probs.pixel(y, x);
            if !inside {
                prop_assert!(out.iter().all(|&v| v == 0.0));
                continue;
            }
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (c, &o) in out.iter().enumerate() {
                let vals = sel.iter().map(|&j| m[j].probs.pixel(y, x)[c]);
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn agreeing_views_fuse_to_themselves() {
    let m = maps(1, 8, 8, 5);
    let copies = vec![m[0].clone(), m[0].clone(), m[0].clone()];
    let region = vec![true; 64];
    let f = fuse_region(&copies, &[0, 1, 2], &region, &AV, 0).unwrap();
    assert_eq!(f.probs, m[0].probs);
}

#[test]
fn background_only_pixels_copy_the_fallback() {
    let bg = ProbabilityMap::new(1, 1, 5, vec![0.6, 0.1, 0.1, 0.1, 0.1]).unwrap();
    let other = ProbabilityMap::new(1, 1, 5, vec![0.2, 0.5, 0.1, 0.1, 0.1]).unwrap();
    let m = vec![
        CommonMap {
            probs: bg.clone(),
            coverage: vec![1.0],
        },
        CommonMap {
            probs: other.clone(),
            coverage: vec![1.0],
        },
    ];
    let f = fuse_region(&m, &[0, 1], &[true], &AV, 1).unwrap();
    assert!(!f.fused[0]);
    assert_eq!(f.probs, other);
    assert_eq!(argmax(f.probs.pixel(0, 0)), Class::Capillary.index());
    assert!(fuse_region(&m, &[], &[true], &AV, 0).is_err());
}
