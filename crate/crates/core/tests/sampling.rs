use cardiomm::physics::{Geometry, KSpaceVolume};
use cardiomm::sampling::{
    apply_mask, effective_af, gen_radial, gen_random, gen_uniform, rle_decode, rle_encode, Acs, MaskSpec, Pattern,
    UndersamplingText,
};
use ndarray::Array3;
use num_complex::Complex64;
use proptest::prelude::*;
use std::collections::HashSet;

#[test]
fn uniform_af_is_exact_by_count() {
    let m = gen_uniform(240, 200, 8.0, 20, 0).unwrap();
    assert_eq!(m.pattern_samples(), 30 * 200);
    assert_eq!(effective_af(&m).unwrap(), 8.0);
}

#[test]
fn full_mask_has_unit_af_and_acs_only_mask_fails() {
    let m = gen_uniform(32, 32, 1.0, 0, 0).unwrap();
    assert!(m.grid.iter().all(|&v| v));
    assert_eq!(effective_af(&m).unwrap(), 1.0);
    let only = gen_uniform(32, 32, 4.0, 32, 40 % 32).unwrap();
    assert!(only.grid.iter().all(|&v| v));
}

#[test]
fn random_af_uses_the_nearest_whole_line_count() {
    for af in [4.0, 8.0, 16.0, 24.0] {
        let m = gen_random(256, 246, af, 20, 3).unwrap();
        let lines = m.pattern_samples() / 246;
        assert_eq!(m.pattern_samples() % 246, 0);
        assert_eq!(lines, (256.0 / af).round() as usize);
        let e = effective_af(&m).unwrap();
        // No other whole line count lands closer to the nominal AF.
        for alt in [lines - 1, lines + 1] {
            assert!((256.0 / alt as f64 - af).abs() >= (e - af).abs());
        }
        if af < 24.0 {
            assert!(((e - af) / af).abs() <= 0.02, "af {af}: {e}");
        }
    }
}

#[test]
fn random_masks_are_seeded() {
    assert_eq!(gen_random(128, 64, 8.0, 12, 5).unwrap(), gen_random(128, 64, 8.0, 12, 5).unwrap());
    for s in 0..10 {
        let a = gen_random(128, 64, 8.0, 12, 2 * s).unwrap();
        let b = gen_random(128, 64, 8.0, 12, 2 * s + 1).unwrap();
        assert_ne!(a.grid, b.grid, "seed pair {s}");
    }
}

#[test]
fn radial_af_within_ten_percent() {
    for af in [8.0, 16.0, 24.0] {
        let m = gen_radial(256, 246, af, (20, 20)).unwrap();
        let e = effective_af(&m).unwrap();
        assert!(((e - af) / af).abs() <= 0.10, "af {af}: {e}");
        let ((y0, y1), (x0, x1)) = m.acs.bounds(256, 246);
        assert_eq!((y1 - y0, x1 - x0), (20, 20));
        assert!(m.grid.slice(ndarray::s![y0..y1, x0..x1]).iter().all(|&v| v));
    }
}

#[test]
fn dense_radial_fills_the_center() {
    let m = gen_radial(64, 64, 1.2, (0, 0)).unwrap();
    let c = m.grid.slice(ndarray::s![24..40, 24..40]);
    let frac = c.iter().filter(|&&v| v).count() as f64 / c.len() as f64;
    assert!(frac > 0.97, "{frac}");
}

fn volume() -> KSpaceVolume {
    let data = Array3::from_shape_fn((3, 16, 12), |(c, y, x)| Complex64::new(1.0 + c as f64, (y * 12 + x) as f64));
    KSpaceVolume::new(data, Geometry::default(), "t").unwrap()
}

#[test]
fn apply_mask_examples() {
    let k = volume();
    let full = gen_uniform(16, 12, 1.0, 0, 0).unwrap();
    assert_eq!(apply_mask(&k, &full).unwrap().data, k.data);
    let mut zero = full.clone();
    zero.grid.fill(false);
    assert!(apply_mask(&k, &zero).unwrap().data.iter().all(|v| v.norm() == 0.0));
    let r = gen_random(16, 12, 4.0, 2, 9).unwrap();
    let out = apply_mask(&k, &r).unwrap();
    for ((c, y, x), v) in out.data.indexed_iter() {
        if r.grid[[y, x]] {
            assert_eq!(*v, k.data[[c, y, x]]);
        } else {
            assert_eq!(v.norm(), 0.0);
        }
    }
    assert!(apply_mask(&k, &gen_uniform(16, 10, 2.0, 0, 0).unwrap()).is_err());
}

#[test]
fn undersampling_text_is_injective_on_the_grid() {
    let afs = [4.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0, 24.0, 4.5];
    let mut seen = HashSet::new();
    for p in Pattern::ALL {
        for af in afs {
            let t = UndersamplingText::new(p, af);
            assert_eq!(t, UndersamplingText::new(p, af));
            assert!(seen.insert(t.as_str().to_string()), "{}", t.as_str());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn acs_is_always_sampled_and_masks_are_deterministic(
        ny in 24usize..96, nx in 24usize..96, af in 2.0f64..12.0, acs in 0usize..16, seed in any::<u64>(), p in 0usize..3,
    ) {
        let spec = MaskSpec { pattern: Pattern::ALL[p], af, acs, seed };
        let m = spec.generate(ny, nx).unwrap();
        prop_assert_eq!(&m, &spec.generate(ny, nx).unwrap());
        let region = m.acs.region(ny, nx);
        prop_assert!(region.iter().zip(m.grid.iter()).all(|(&a, &g)| !a || g));
        let decoded = rle_decode(&rle_encode(&m.grid), ny, nx).unwrap();
        prop_assert_eq!(decoded, m.grid.clone());
    }

    #[test]
    fn uniform_af_is_ny_over_line_count(ny in 8usize..300, af in 1.0f64..24.0, offset in 0usize..4) {
        let offset = offset.min(ny - 1);
        let m = gen_uniform(ny, 4, af, 0, offset).unwrap();
        let lines = (0..ny).filter(|&y| m.base[[y, 0]]).count();
        let step = af.round() as usize;
        prop_assert_eq!(lines, (ny - offset).div_ceil(step));
        prop_assert_eq!(effective_af(&m).unwrap(), ny as f64 / lines as f64);
    }
}

#[test]
fn acs_variants_report_their_area() {
    assert_eq!(Acs::Lines(20).area(240, 100), 2000);
    assert_eq!(Acs::Block { h: 20, w: 20 }.area(256, 246), 400);
}
