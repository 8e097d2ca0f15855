mod common;

use common::{random_image, random_labels, random_probs, rng};
use mvadapt::adaptation::augment::{add_noise, scale_contrast};
use mvadapt::adaptation::loss::{ce_loss_weighted, dice_loss_masked, seg_loss_masked, DICE_EPS};
use mvadapt::adaptation::pseudolabel::faz_threshold_for_ratio;
use mvadapt::adaptation::{
    augment_strong, augment_weak, ce_loss, dice_loss, ema_update, generate_pseudo_label,
    pixel_class_balance_weights, AugmentConfig, ThresholdConfig, TinyModel,
};
use mvadapt::map::{argmax, Class, Image, LabelMap, ProbabilityMap, NUM_CLASSES};
use mvadapt::subject::ScanKind;
use proptest::prelude::*;
use rand::Rng;

fn oracle_dice(p: &ProbabilityMap, y: &LabelMap, w: &[f64; 5]) -> f64 {
    let mut total = 0.0;
    for c in 0..NUM_CLASSES {
        let mut inter = 0.0;
        let mut sp = 0.0;
        let mut sy = 0.0;
        for (i, px) in p.pixels().enumerate() {
            let yc = if y.data()[i] as usize == c { 1.0 } else { 0.0 };
            inter += px[c] * yc;
            sp += px[c];
            sy += yc;
        }
        total += w[c] * (1.0 - (2.0 * inter + DICE_EPS) / (sp + sy + DICE_EPS));
    }
    total / w.iter().sum::<f64>()
}

fn oracle_ce(p: &ProbabilityMap, y: &LabelMap, w: &[f64; 5]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, px) in p.pixels().enumerate() {
        let c = y.data()[i] as usize;
        num += -w[c] * px[c].ln();
        den += w[c];
    }
    num / den
}

/// Central differences of `f` over every entry of `p`, renormalization not
/// applied: the losses are defined for any positive inputs.
fn numeric_grad(p: &ProbabilityMap, f: impl Fn(&ProbabilityMap) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut data = p.data().to_vec();
    let (ht, wd, ch) = (p.height(), p.width(), p.channels());
    (0..data.len())
        .map(|i| {
            let v = data[i];
            data[i] = v + h;
            let up = f(&ProbabilityMap::new(ht, wd, ch, data.clone()).unwrap());
            data[i] = v - h;
            let down = f(&ProbabilityMap::new(ht, wd, ch, data.clone()).unwrap());
            data[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

#[test]
fn losses_match_oracles() {
    let mut r = rng(11);
    for _ in 0..50 {
        let p = random_probs(9, 7, 2.0, &mut r);
        let y = random_labels(9, 7, &mut r);
        let w: [f64; 5] = std::array::from_fn(|_| r.random_range(0.1..2.0));
        assert!((dice_loss(&p, &y, &w).unwrap() - oracle_dice(&p, &y, &w)).abs() < 1e-12);
        assert!((ce_loss(&p, &y, None, &w).unwrap() - oracle_ce(&p, &y, &w)).abs() < 1e-12);
    }
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let y = random_labels(6, 6, &mut rng(3));
    let p = ProbabilityMap::one_hot(&y, 5);
    let w = [1.0; 5];
    assert!(dice_loss(&p, &y, &w).unwrap().abs() < 1e-12);
    assert_eq!(ce_loss(&p, &y, None, &w).unwrap(), 0.0);
}

#[test]
fn balance_weights_have_unit_mean() {
    let y = LabelMap::new(1, 6, vec![0, 0, 0, 0, 2, 3]).unwrap();
    let w = pixel_class_balance_weights(&y);
    assert_eq!(w[1], 0.0);
    assert_eq!(w[4], 0.0);
    assert!((w[0] + w[2] + w[3] - 3.0).abs() < 1e-12);
    assert!((w[2] / w[0] - 4.0).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = rng(21);
    for _ in 0..20 {
        let p = random_probs(4, 5, 2.0, &mut r);
        let y = random_labels(4, 5, &mut r);
        let w: [f64; 5] = std::array::from_fn(|_| r.random_range(0.1..2.0));
        let mask: Vec<bool> = (0..20).map(|_| r.random::<f64>() < 0.6).collect();

        let mut g = vec![0.0; p.data().len()];
        dice_loss_masked(&p, &y, &w, Some(&mask), Some((&mut g, 1.0))).unwrap();
        let n = numeric_grad(&p, |q| {
            dice_loss_masked(q, &y, &w, Some(&mask), None).unwrap()
        });
        assert!(rel_err(&g, &n) <= 1e-6, "dice {}", rel_err(&g, &n));

        let pw: Vec<f64> = mask.iter().map(|&m| m as u8 as f64).collect();
        let mut g = vec![0.0; p.data().len()];
        ce_loss_weighted(&p, &y, Some(&pw), &w, Some((&mut g, 1.0))).unwrap();
        let n = numeric_grad(&p, |q| {
            ce_loss_weighted(q, &y, Some(&pw), &w, None).unwrap()
        });
        assert!(rel_err(&g, &n) <= 1e-6, "ce {}", rel_err(&g, &n));

        let mut g = vec![0.0; p.data().len()];
        seg_loss_masked(&p, &y, &w, 0.7, Some(&mask), Some((&mut g, 0.3))).unwrap();
        let n = numeric_grad(&p, |q| {
            0.3 * seg_loss_masked(q, &y, &w, 0.7, Some(&mask), None).unwrap()
        });
        assert!(rel_err(&g, &n) <= 1e-6, "seg {}", rel_err(&g, &n));
    }
}

#[test]
fn augmentation_noise_variance() {
    let cfg = AugmentConfig::default();
    let flat = Image::new(10, 10, 1, vec![0.5; 100]).unwrap();
    let mut r = rng(5);
    let var_of = |imgs: &[Image]| {
        let n: usize = imgs.iter().map(|i| i.data.len()).sum();
        imgs.iter()
            .flat_map(|i| i.data.iter())
            .map(|v| (v - 0.5) * (v - 0.5))
            .sum::<f64>()
            / n as f64
    };
    let weak: Vec<Image> = (0..10_000)
        .map(|_| augment_weak(&flat, &cfg, &mut r))
        .collect();
    let strong: Vec<Image> = (0..10_000)
        .map(|_| augment_strong(&flat, &cfg, &mut r))
        .collect();
    let expected_strong =
        cfg.strong_sigmas.iter().map(|s| s * s).sum::<f64>() / cfg.strong_sigmas.len() as f64;
    let (vw, vs) = (var_of(&weak), var_of(&strong));
    assert!(
        (vw / (cfg.weak_sigma * cfg.weak_sigma) - 1.0).abs() <= 0.05,
        "weak {vw}"
    );
    assert!((vs / expected_strong - 1.0).abs() <= 0.05, "strong {vs}");
}

#[test]
fn contrast_keeps_channel_means() {
    let img = random_image(10, 12, 2, &mut rng(8));
    let out = scale_contrast(&img, 1.17);
    for ch in 0..2 {
        let mean = |i: &Image| i.data.iter().skip(ch).step_by(2).sum::<f64>() / 120.0;
        assert!((mean(&img) - mean(&out)).abs() < 1e-12);
    }
    assert_eq!(scale_contrast(&img, 1.0), img);
    assert_eq!(add_noise(&img, 0.0, &mut rng(1)), img);
}

#[test]
fn faz_band_edges() {
    let bands = ThresholdConfig::default().faz_bands;
    assert_eq!(faz_threshold_for_ratio(0.0, &bands), 0.2);
    assert_eq!(faz_threshold_for_ratio(0.3999, &bands), 0.2);
    assert_eq!(faz_threshold_for_ratio(0.4, &bands), 0.7);
    assert_eq!(faz_threshold_for_ratio(0.4999, &bands), 0.7);
    assert_eq!(faz_threshold_for_ratio(0.5, &bands), 0.95);
    assert_eq!(faz_threshold_for_ratio(3.0, &bands), 0.95);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pseudo_labels_agree_with_argmax(seed in 0u64..100_000, h in 1usize..24, w in 1usize..24) {
        let p = random_probs(h, w, 4.0, &mut rng(seed));
        let cfg = ThresholdConfig::default();
        for kind in [ScanKind::Macula6, ScanKind::Disc6, ScanKind::Macula12] {
            let l = generate_pseudo_label(&p, kind, &cfg).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let c = l.get(y, x);
                    if c != Class::Background as u8 {
                        prop_assert_eq!(c as usize, argmax(p.pixel(y, x)));
                    }
                    if kind == ScanKind::Disc6 {
                        prop_assert_ne!(c, Class::Faz as u8);
                    }
                }
            }
        }
    }

    #[test]
    fn ema_moves_teacher_towards_student(seed in 0u64..10_000, alpha in 0.0..1.0f64) {
        let s = TinyModel::seeded(2, 3, seed, 1.0).unwrap();
        let t0 = TinyModel::seeded(2, 3, seed + 1, 1.0).unwrap();
        let mut t = t0.clone();
        ema_update(&mut t, &s, alpha);
        let dist = |a: &TinyModel, b: &TinyModel| {
            a.weights.iter().chain(&a.bias).zip(b.weights.iter().chain(&b.bias))
                .map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let before = dist(&t0, &s);
        let after = dist(&t, &s);
        prop_assert!((after - alpha * before).abs() <= 1e-12 * before.max(1.0));
    }
}
