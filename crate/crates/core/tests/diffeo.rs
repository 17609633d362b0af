use atlasforge::data::band_limited_field;
use atlasforge::diffeo::{
    compose, integrate_euler, integrate_ss, interior_max_abs_diff, interior_mean_norm, invert, jacobian_determinants,
    warp, warp_nearest, DeformationField, DEFAULT_STEPS, INTERIOR_MARGIN,
};
use atlasforge::{ImageGrid, VectorField};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn interior(h: usize, w: usize, m: usize) -> impl Iterator<Item = (usize, usize)> {
    (m..h - m).flat_map(move |y| (m..w - m).map(move |x| (y, x)))
}

fn translation(h: usize, w: usize, dx: f64, dy: f64) -> DeformationField {
    DeformationField::from_displacement(VectorField::constant(h, w, dx, dy))
}

#[test]
fn euler_oracle_is_converged_at_1024_steps() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let v = band_limited_field(32, 32, 3.0, &mut rng);
        let a = integrate_euler(&v, 512).unwrap();
        let b = integrate_euler(&v, 1024).unwrap();
        let d = interior_max_abs_diff(a.displacement(), b.displacement(), INTERIOR_MARGIN).unwrap();
        assert!(d < 1e-3, "seed {seed}: {d}");
    }
}

#[test]
fn inverse_consistency_both_orders() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let v = band_limited_field(32, 32, 3.0, &mut rng);
        let fwd = integrate_ss(&v, DEFAULT_STEPS).unwrap();
        let back = invert(&v, DEFAULT_STEPS).unwrap();
        for id in [compose(&fwd, &back).unwrap(), compose(&back, &fwd).unwrap()] {
            let m = interior_mean_norm(id.displacement(), INTERIOR_MARGIN);
            assert!(m < 0.1, "seed {seed}: {m}");
        }
    }
}

#[test]
fn label_warp_keeps_label_set() {
    let labels: Vec<u32> = (0..16 * 16).map(|p| ((p % 16) / 6) as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let phi = integrate_ss(&band_limited_field(16, 16, 2.0, &mut rng), DEFAULT_STEPS).unwrap();
    let out = warp_nearest(&labels, (16, 16), &phi).unwrap();
    assert!(out.iter().all(|l| *l <= 2));
    assert_eq!(
        warp_nearest(&labels, (16, 16), &DeformationField::identity(16, 16)).unwrap(),
        labels
    );
    assert!(warp_nearest(&labels, (15, 16), &phi).unwrap_err().is_validation());
}

#[test]
fn mismatched_dims_are_rejected() {
    let a = DeformationField::identity(8, 8);
    let b = DeformationField::identity(8, 9);
    assert!(compose(&a, &b).unwrap_err().is_validation());
    assert!(warp(&ImageGrid::zeros(9, 8), &a).unwrap_err().is_validation());
    assert!(integrate_ss(&VectorField::zeros(4, 4), 0).is_err());
}

#[test]
fn smooth_fields_integrate_without_folding() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let phi = integrate_ss(&band_limited_field(32, 32, 3.0, &mut rng), DEFAULT_STEPS).unwrap();
        let dets = jacobian_determinants(&phi).unwrap();
        assert!(dets.data().iter().all(|&d| d > 0.0), "seed {seed}");
    }
}

proptest! {
    #[test]
    fn constant_velocity_translates(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let v = VectorField::constant(32, 32, a, b);
        let phi = integrate_ss(&v, DEFAULT_STEPS).unwrap();
        let inv = invert(&v, DEFAULT_STEPS).unwrap();
        for (y, x) in interior(32, 32, 8) {
            let (dx, dy) = phi.displacement().get(y, x);
            prop_assert!((dx - a).abs() < 1e-5 && (dy - b).abs() < 1e-5);
            let (ix, iy) = inv.displacement().get(y, x);
            prop_assert!((ix + a).abs() < 1e-5 && (iy + b).abs() < 1e-5);
        }
    }

    #[test]
    fn identity_is_neutral_for_composition(seed in 0u64..500, amp in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = integrate_ss(&band_limited_field(12, 12, amp, &mut rng), DEFAULT_STEPS).unwrap();
        let id = DeformationField::identity(12, 12);
        prop_assert_eq!(&compose(&id, &phi).unwrap(), &phi);
        prop_assert_eq!(&compose(&phi, &id).unwrap(), &phi);
    }

    #[test]
    fn identity_warp_is_exact(data in prop::collection::vec(0.0f64..1.0, 7 * 9)) {
        let im = ImageGrid::new(7, 9, data).unwrap();
        prop_assert_eq!(warp(&im, &DeformationField::identity(7, 9)).unwrap(), im);
    }

    #[test]
    fn integer_translations_add(a in -2i32..=2, b in -2i32..=2, c in -2i32..=2, d in -2i32..=2) {
        let p = translation(16, 16, a as f64, b as f64);
        let q = translation(16, 16, c as f64, d as f64);
        let pq = compose(&p, &q).unwrap();
        for (y, x) in interior(16, 16, 5) {
            prop_assert_eq!(pq.displacement().get(y, x), ((a + c) as f64, (b + d) as f64));
        }
    }

    #[test]
    fn bilinear_reproduces_ramps(s in -1.0f64..1.0, t in -1.0f64..1.0, gx in -1.0f64..1.0, gy in -1.0f64..1.0) {
        let ramp = ImageGrid::from_fn(12, 12, |y, x| gx * x as f64 + gy * y as f64);
        let out = warp(&ramp, &translation(12, 12, s, t)).unwrap();
        for (y, x) in interior(12, 12, 2) {
            let expected = gx * (x as f64 + s) + gy * (y as f64 + t);
            prop_assert!((out.get(y, x) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_scaling_jacobian(k in -0.3f64..0.3) {
        let (cy, cx) = (7.5, 7.5);
        let u = VectorField::from_fn(16, 16, |y, x| (k * (x as f64 - cx), k * (y as f64 - cy)));
        let dets = jacobian_determinants(&DeformationField::from_displacement(u)).unwrap();
        for (y, x) in interior(16, 16, 1) {
            prop_assert!((dets.get(y, x) - (1.0 + k) * (1.0 + k)).abs() < 1e-6);
        }
    }
}
