use mvadapt::geometry::{
    decompose, invert, validate, warp, DecomposedTransform, Homography, ValidationThresholds,
};
use mvadapt::map::ProbabilityMap;
use nalgebra::Matrix3;
use proptest::prelude::*;

fn affine_params() -> impl Strategy<Value = DecomposedTransform> {
    (
        -50.0..50.0f64,
        -50.0..50.0f64,
        0.5..2.0f64,
        0.5..2.0f64,
        -15.0..15.0f64,
        -0.5..0.5f64,
    )
        .prop_map(|(tx, ty, sx, sy, theta, shear)| DecomposedTransform {
            tx,
            ty,
            sx,
            sy,
            theta,
            shear,
            perspective: 0.0,
        })
}

fn smooth_map(n: usize, phase: f64) -> ProbabilityMap {
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 / 40.0, y as f64 / 40.0);
            let z = [
                (fx + phase).sin(),
                (fy - phase).cos(),
                (fx + fy).sin() * 0.5,
            ];
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.iter().map(|v| v / s));
        }
    }
    ProbabilityMap::new(n, n, 3, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decomposition_round_trips(d in affine_params()) {
        let h = d.recompose_affine().unwrap();
        let back = decompose(&h).unwrap();
        for (a, b) in [
            (d.tx, back.tx), (d.ty, back.ty), (d.sx, back.sx), (d.sy, back.sy),
            (d.theta, back.theta), (d.shear, back.shear),
        ] {
            prop_assert!((a - b).abs() <= 1e-9, "{d:?} vs {back:?}");
        }
        prop_assert_eq!(back.perspective, 0.0);
    }

    #[test]
    fn double_inverse_is_identity(d in affine_params(), p in (-1e-3..1e-3f64, -1e-3..1e-3f64)) {
        let mut m = *d.recompose_affine().unwrap().matrix();
        m[(2, 0)] = p.0;
        m[(2, 1)] = p.1;
        let h = Homography::new(m).unwrap();
        let back = invert(&invert(&h).unwrap()).unwrap();
        let scale = m.amax();
        prop_assert!((back.matrix() - h.matrix()).amax() <= 1e-10 * scale);
        let id = h.compose(&invert(&h).unwrap()).unwrap();
        prop_assert!((id.matrix() - Matrix3::identity()).amax() <= 1e-10 * scale);
    }

    #[test]
    fn validation_is_monotone_in_thresholds(d in affine_params(), slack in 0.0..1.0f64) {
        let strict = ValidationThresholds {
            scale_min: 0.8,
            scale_max: 1.25,
            rot_max_deg: 5.0,
            shear_max: 0.2,
            persp_max: 0.001,
            translation_max: Some(20.0),
        };
        let loose = ValidationThresholds {
            scale_min: strict.scale_min * (1.0 - 0.5 * slack),
            scale_max: strict.scale_max * (1.0 + slack),
            rot_max_deg: strict.rot_max_deg + 10.0 * slack,
            shear_max: strict.shear_max + slack,
            persp_max: strict.persp_max * (1.0 + slack),
            translation_max: Some(20.0 + 50.0 * slack),
        };
        let a = validate(&d, &strict);
        let b = validate(&d, &loose);
        prop_assert!(b.violations.len() <= a.violations.len());
        prop_assert!(!a.valid || b.valid);
        for v in &b.violations {
            prop_assert!(a.violates(v.component));
        }
    }

    #[test]
    fn warp_stays_in_unit_range(d in affine_params(), phase in 0.0..6.0f64) {
        let m = smooth_map(24, phase);
        let out = warp(&m, &d.recompose_affine().unwrap(), 20, 28).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for p in out.pixels() {
            prop_assert!(p.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn identity_warp_is_exact() {
    let m = smooth_map(17, 0.3);
    assert_eq!(warp(&m, &Homography::identity(), 17, 17).unwrap(), m);
}

#[test]
fn integer_translation_shifts_pixels() {
    let m = smooth_map(16, 1.0);
    let out = warp(&m, &Homography::translation(3.0, -2.0), 16, 16).unwrap();
    for y in 0..14 {
        for x in 3..16 {
            assert_eq!(out.pixel(y, x), m.pixel(y + 2, x - 3));
        }
    }
    assert!(out.pixel(0, 0).iter().all(|&v| v == 0.0));
}
