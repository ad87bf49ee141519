mod support;

use hemoseg::data::augment::{augment, flip, rotate_image, rotate_mask, AugmentPolicy};
use hemoseg::data::dataset::{load_dataset, write_dataset};
use hemoseg::data::intensity::{hu_window, hu_window_default, zscore_normalize};
use hemoseg::data::phantom::{generate_phantom, rasterize, Ellipsoid, PhantomSpec};
use hemoseg::data::rvol::{self, AnyVolume, HEADER_LEN};
use hemoseg::data::{SegMask, Volume, VolumeImage};
use hemoseg::{Error, FormatError};
use hemoseg_oracles::ellipsoid_volume;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn centroid(m: &SegMask) -> [f64; 3] {
    let [d, h, w] = m.shape();
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if m.get(z, y, x) == 1 {
                    acc[0] += z as f64;
                    acc[1] += y as f64;
                    acc[2] += x as f64;
                    n += 1.0;
                }
            }
        }
    }
    acc.map(|a| a / n)
}

#[test]
fn window_examples() {
    let v = Volume::new([1, 1, 4], [1.0; 3], vec![-5.0, 40.0, 85.0, 1000.0]).unwrap();
    assert_eq!(hu_window_default(&v).data(), &[0.0, 0.5, 1.0, 1.0]);
}

#[test]
fn phantom_mask_matches_analytic_volume() {
    let spec = PhantomSpec { lesion_count: (1, 1), spacing: [1.0; 3], shape: [48, 48, 48], semi_axes_mm: (6.0, 9.0), seed: 17, ..PhantomSpec::default() };
    let p = generate_phantom(&spec).unwrap();
    let e = p.lesions[0];
    let [a, b, c] = e.semi_axes_mm;
    let analytic = ellipsoid_volume(a, b, c) / 1000.0;
    let counted = p.mask.count() as f64 / 1000.0;
    assert!((counted - analytic).abs() / analytic < 0.02, "{counted} vs {analytic}");
    assert!((e.volume_ml() - analytic).abs() < 1e-12);
}

#[test]
fn phantoms_are_reproducible_and_distinct() {
    let a = support::phantoms(5, 3);
    assert_eq!(a, support::phantoms(5, 3));
    assert_ne!(a[0].mask, a[1].mask);
    assert_ne!(a[0], support::phantoms(6, 1)[0]);
    let empty = generate_phantom(&PhantomSpec { lesion_count: (0, 0), ..PhantomSpec::default() }).unwrap();
    assert_eq!(empty.mask.count(), 0);
    assert!(empty.lesions.is_empty());
}

#[test]
fn lesion_voxels_are_brighter_than_brain() {
    for case in support::phantoms(8, 4) {
        for (v, &m) in case.image.data().iter().zip(case.mask.data()) {
            if m == 1 {
                assert!(*v >= 40.0, "lesion voxel at {v} HU");
            }
        }
        assert!(case.mask.count() > 0);
    }
}

#[test]
fn rasterized_grid_ellipsoid_within_two_percent() {
    let e = Ellipsoid { center_mm: [20.0, 25.0, 25.0], semi_axes_mm: [8.0, 12.0, 10.0], angle: 0.4 };
    let m = rasterize([40, 50, 50], [1.0; 3], &e).unwrap();
    let want = ellipsoid_volume(8.0, 12.0, 10.0);
    assert!((m.count() as f64 - want).abs() / want < 0.02);
}

#[test]
fn rotation_roughly_preserves_mask_volume() {
    let e = Ellipsoid { center_mm: [4.5, 32.0, 32.0], semi_axes_mm: [3.0, 14.0, 8.0], angle: 0.0 };
    let m = rasterize([8, 64, 64], [1.0; 3], &e).unwrap();
    for deg in [-30.0f64, -12.0, 7.5, 30.0] {
        let r = rotate_mask(&m, deg.to_radians());
        let rel = (r.count() as f64 - m.count() as f64).abs() / m.count() as f64;
        assert!(rel <= 0.05, "{deg} deg changed volume by {rel}");
    }
}

#[test]
fn flipping_mirrors_the_centroid() {
    let m = support::solitary_phantoms(3, 1).remove(0).mask;
    let [_, h, w] = m.shape();
    let c = centroid(&m);
    let fh = centroid(&flip(&m, 1));
    let fw = centroid(&flip(&m, 2));
    assert!((fh[1] - (h as f64 - 1.0 - c[1])).abs() < 1e-9);
    assert!((fw[2] - (w as f64 - 1.0 - c[2])).abs() < 1e-9);
    assert!((fh[0] - c[0]).abs() < 1e-9 && (fh[2] - c[2]).abs() < 1e-9);
}

#[test]
fn disabled_policy_is_identity_without_crop() {
    let case = support::phantoms(1, 1).remove(0);
    let img = hu_window_default(&case.image);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (i, m) = augment(&img, &case.mask, &mut rng, &AugmentPolicy::none(None)).unwrap();
    assert_eq!(i, img);
    assert_eq!(m, case.mask);
}

#[test]
fn augmentation_is_reproducible_per_seed() {
    let case = support::phantoms(2, 1).remove(0);
    let img = hu_window_default(&case.image);
    let policy = AugmentPolicy::standard(Some([8, 32, 32]));
    let run = |s| augment(&img, &case.mask, &mut ChaCha8Rng::seed_from_u64(s), &policy).unwrap();
    assert_eq!(run(4), run(4));
    let (i, m) = run(4);
    assert_eq!(i.shape(), [8, 32, 32]);
    assert_eq!(m.shape(), [8, 32, 32]);
    m.check_binary().unwrap();
}

#[test]
fn mismatched_shapes_are_rejected() {
    let img: VolumeImage = Volume::filled([2, 4, 4], [1.0; 3], 0.0).unwrap();
    let mask: SegMask = Volume::filled([2, 4, 5], [1.0; 3], 0).unwrap();
    assert!(augment(&img, &mask, &mut ChaCha8Rng::seed_from_u64(0), &AugmentPolicy::none(None)).is_err());
}

#[test]
fn rvol_byte_counts_and_errors() {
    let img: VolumeImage = Volume::new([2, 3, 4], [2.5, 0.5, 0.5], (0..24).map(|i| i as f32 * 0.25).collect()).unwrap();
    let bytes = rvol::encode_image(&img);
    assert_eq!(bytes.len(), HEADER_LEN + 24 * 4);
    let mask: SegMask = img.map(|v| u8::from(v > 2.0));
    assert_eq!(rvol::encode_mask(&mask).len(), HEADER_LEN + 24);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.rvol");
    rvol::write_mask(&p, &mask).unwrap();
    assert!(matches!(rvol::read_image(&p), Err(Error::Format(FormatError::DtypeMismatch { .. }))));
    assert_eq!(rvol::read_any(&p).unwrap(), AnyVolume::U8(mask));
    assert!(matches!(rvol::decode(&bytes[..HEADER_LEN + 5]), Err(Error::Format(FormatError::Truncated { .. }))));
    assert!(matches!(rvol::read_image(dir.path().join("missing.rvol")), Err(Error::Io(_))));
}

#[test]
fn dataset_round_trip() {
    let cases = support::phantoms(12, 3);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &cases).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), cases);
    let empty = tempfile::tempdir().unwrap();
    assert!(load_dataset(empty.path()).unwrap().is_empty());
    assert!(load_dataset(&empty.path().join("absent")).is_err());
}

proptest! {
    #[test]
    fn window_is_monotone_and_bounded(mut hu in prop::collection::vec(-2000.0f32..3000.0, 2..64), width in 1.0f64..400.0, level in -100.0f64..200.0) {
        hu.sort_by(f32::total_cmp);
        let n = hu.len();
        let v = Volume::new([1, 1, n], [1.0; 3], hu).unwrap();
        let w = hu_window(&v, width, level);
        for pair in w.data().windows(2) {
            prop_assert!(pair[0] <= pair[1]);
        }
        prop_assert!(w.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn zscore_moments_and_affine_invariance(values in prop::collection::vec(-50.0f32..50.0, 8..64), scale in 0.5f32..4.0, shift in -20.0f32..20.0) {
        let n = values.len();
        let spread = values.iter().cloned().fold(f32::MIN, f32::max) - values.iter().cloned().fold(f32::MAX, f32::min);
        prop_assume!(spread > 1.0);
        let v = Volume::new([1, 1, n], [1.0; 3], values).unwrap();
        let z = zscore_normalize(&v);
        let mean = z.data().iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = z.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-4);
        let moved = zscore_normalize(&v.map(|x| x * scale + shift));
        for (a, b) in z.data().iter().zip(moved.data()) {
            prop_assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn flips_are_involutions(d in 1usize..4, h in 1usize..6, w in 1usize..6, seed in 0u64..100) {
        let data: Vec<f32> = (0..d * h * w).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f32).collect();
        let v = Volume::new([d, h, w], [1.0; 3], data).unwrap();
        for axis in 0..3 {
            prop_assert_eq!(&flip(&flip(&v, axis), axis), &v);
        }
    }

    #[test]
    fn augmentation_keeps_masks_binary(seed in 0u64..1000) {
        let case = &support::phantoms(seed % 4, 1)[0];
        let img = hu_window_default(&case.image);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, m) = augment(&img, &case.mask, &mut rng, &AugmentPolicy::standard(None)).unwrap();
        prop_assert_eq!(i.shape(), img.shape());
        prop_assert!(m.check_binary().is_ok());
        prop_assert!(i.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rvol_round_trips(d in 1usize..4, h in 1usize..5, w in 1usize..5, s in 0.1f64..5.0, vals in prop::collection::vec(-1e4f32..1e4, 80)) {
        let n = d * h * w;
        let img = Volume::new([d, h, w], [s, s * 0.5, s * 2.0], vals[..n].to_vec()).unwrap();
        match rvol::decode(&rvol::encode_image(&img)).unwrap() {
            AnyVolume::F32(back) => prop_assert_eq!(back, img.clone()),
            AnyVolume::U8(_) => prop_assert!(false, "dtype changed"),
        }
        let mask = img.map(|v| u8::from(v > 0.0));
        prop_assert_eq!(rvol::decode(&rvol::encode_mask(&mask)).unwrap(), AnyVolume::U8(mask));
    }

    #[test]
    fn rotation_moves_image_and_mask_together(seed in 0u64..50, deg in -30.0f64..30.0) {
        let case = &support::solitary_phantoms(seed, 1)[0];
        let img = case.mask.map(f32::from);
        let ri = rotate_image(&img, deg.to_radians());
        let rm = rotate_mask(&case.mask, deg.to_radians());
        let agree = ri.data().iter().zip(rm.data()).filter(|(a, &b)| (**a >= 0.5) == (b == 1)).count();
        prop_assert!(agree as f64 >= 0.99 * rm.len() as f64);
    }
}
