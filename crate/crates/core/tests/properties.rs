//! Property tests for the invariants of each module.

use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereofuse::calib::{compute_rectifying_transforms, CameraIntrinsics, StereoRig};
use stereofuse::detect::{filter_by_threshold, rescale_box, scale_box, BoundingBox, Detection};
use stereofuse::disparity::{compute_disparity_map, disparity_naive_oracle, sad_cost, DisparityParams};
use stereofuse::fusion::collect_box_stats;
use stereofuse::ldm::{apply_homography, build_ldm_homography, in_bounds, LdmObject, LdmParams};
use stereofuse::reproject::{ground_distance, pixel_to_world, RectifiedParams, WorldPoint};
use stereofuse::{DisparityMap, GrayImage};

fn noise(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(w, h, |_, _| rng.gen())
}

fn raw_rig(rot: Rotation3<f64>, t: Vector3<f64>) -> StereoRig {
    StereoRig::new(
        CameraIntrinsics::ideal(520.0, 318.0, 241.0),
        CameraIntrinsics {
            fx: 512.0,
            fy: 515.0,
            cx: 322.0,
            cy: 238.0,
            dist: [0.0; 5],
        },
        *rot.matrix(),
        t,
        None,
        None,
        false,
    )
    .unwrap()
}

#[test]
fn rectified_rows_align_for_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let rot = Rotation3::from_scaled_axis(axis.normalize() * rng.gen_range(0.0..4f64.to_radians()));
        let t = Vector3::new(-rng.gen_range(0.05..0.3), rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01));
        let rig = raw_rig(rot, t);
        let rect = compute_rectifying_transforms(&rig).unwrap();
        let det = rig.rotation.determinant();
        assert!((det - 1.0).abs() < 1e-9);
        assert!((rig.rotation.transpose() * rig.rotation - Matrix3::identity()).amax() < 1e-9);
        for _ in 0..100 {
            let p = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-1.5..1.5), rng.gen_range(1.0..20.0));
            let pl = rig.left.matrix() * p;
            let pr = rig.right.matrix() * (rig.rotation * p + rig.translation);
            let rl = rect.h_left * (pl / pl.z);
            let rr = rect.h_right * (pr / pr.z);
            let dv = (rl.y / rl.z - rr.y / rr.z).abs();
            assert!(dv < 0.5, "row mismatch {dv}");
        }
    }
}

#[test]
fn disparity_is_independent_of_worker_count() {
    let (l, r) = (noise(96, 64, 1), noise(96, 64, 2));
    let p = DisparityParams::dense(5, 24);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| compute_disparity_map(&l, &r, &p).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(7));
}

#[test]
fn true_shift_has_zero_cost() {
    let base = noise(80, 30, 5);
    let k = 9;
    let left = GrayImage::from_fn(70, 30, |u, v| base.get(u, v));
    let right = GrayImage::from_fn(70, 30, |u, v| base.get(u + k, v));
    let p = DisparityParams::dense(5, 16);
    for v in 2..28 {
        for u in k + 2..68 {
            assert_eq!(sad_cost(&left, &right, u, v, k, &p).unwrap(), 0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn optimized_matches_oracle(
        w in 18usize..40, h in 6usize..40, seed in any::<u64>(),
        block in prop::sample::select(vec![1usize, 3, 5, 7]), max_d in 1usize..17,
    ) {
        prop_assume!(max_d < w);
        let (l, r) = (noise(w, h, seed), noise(w, h, seed ^ 0xABCD));
        let p = DisparityParams::dense(block, max_d);
        let fast = compute_disparity_map(&l, &r, &p).unwrap();
        prop_assert!(fast.as_raw().iter().all(|&d| d as usize <= max_d));
        prop_assert_eq!(fast, disparity_naive_oracle(&l, &r, &p).unwrap());
    }

    #[test]
    fn tiled_values_stay_in_range(seed in any::<u64>(), step in 1usize..8) {
        let (l, r) = (noise(40, 30, seed), noise(40, 30, seed + 1));
        let p = DisparityParams { block_step: step, ..DisparityParams::dense(5, 12) };
        let map = compute_disparity_map(&l, &r, &p).unwrap();
        prop_assert!(map.as_raw().iter().all(|&d| d <= 12));
    }

    #[test]
    fn threshold_filter_is_idempotent(scores in prop::collection::vec(0.0f64..=1.0, 0..20), tau in 0.0f64..=1.0) {
        let dets: Vec<Detection> = scores.iter().enumerate().map(|(i, &score)| Detection {
            label: format!("d{i}"),
            score,
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0),
            image_width: 10,
            image_height: 10,
        }).collect();
        let once = filter_by_threshold(&dets, tau);
        prop_assert!(once.iter().all(|d| d.score >= tau));
        prop_assert_eq!(filter_by_threshold(&once, tau), once.clone());
        let expected: Vec<_> = dets.iter().filter(|d| d.score >= tau).map(|d| d.label.clone()).collect();
        prop_assert_eq!(once.iter().map(|d| d.label.clone()).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn rescale_roundtrip(
        x0 in 0.0f64..100.0, y0 in 0.0f64..100.0, bw in 1.0f64..100.0, bh in 1.0f64..100.0,
        tw in 1usize..4000, th in 1usize..4000,
    ) {
        let det = Detection {
            label: "p".into(),
            score: 0.9,
            bbox: BoundingBox::new(x0, y0, x0 + bw, y0 + bh),
            image_width: 200,
            image_height: 200,
        };
        let there = scale_box(&det, tw, th).unwrap();
        let back = scale_box(&there, 200, 200).unwrap();
        let (a, b): ([f64; 4], [f64; 4]) = (det.bbox.into(), back.bbox.into());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        // Corner ratios to image dims are preserved.
        prop_assert!((there.bbox.x_max / tw as f64 - det.bbox.x_max / 200.0).abs() < 1e-12);
        let clamped = rescale_box(&det, tw, th).unwrap();
        prop_assert!(clamped.bbox.x_max <= tw as f64 && clamped.bbox.y_max <= th as f64);
    }

    #[test]
    fn zero_padding_leaves_stats_unchanged(
        seed in any::<u64>(), x0 in 0usize..20, y0 in 0usize..20, bw in 1usize..15, bh in 1usize..15,
        pad in (0usize..10, 0usize..10, 0usize..10, 0usize..10),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = DisparityMap::new(50, 50);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                if rng.gen_bool(0.6) {
                    map.set(x, y, rng.gen_range(0..64));
                }
            }
        }
        let inner = BoundingBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
        let outer = BoundingBox::new(
            x0.saturating_sub(pad.0) as f64,
            y0.saturating_sub(pad.1) as f64,
            (x0 + bw + pad.2) as f64,
            (y0 + bh + pad.3) as f64,
        );
        let a = collect_box_stats(&map, &inner).unwrap();
        let b = collect_box_stats(&map, &outer).unwrap();
        prop_assert_eq!(a.count, b.count);
        prop_assert_eq!(a.mean_d, b.mean_d);
        prop_assert_eq!(a.centroid, b.centroid);
        if a.count > 0 {
            prop_assert!(a.min_d as f64 <= a.mean_d && a.mean_d <= a.max_d as f64);
            prop_assert!(a.centroid.0 >= x0 as f64 && a.centroid.0 < (x0 + bw) as f64);
        }
    }

    #[test]
    fn reprojection_inverts_projection(
        x in -5.0f64..5.0, y in -3.0f64..3.0, z in 0.5f64..20.0,
        f in 200.0f64..1500.0, b in 0.05f64..0.5,
    ) {
        let rig = RectifiedParams { f, cx: 320.0, cy: 240.0, baseline: b };
        let (u, v, d) = (f * x / z + 320.0, f * y / z + 240.0, f * b / z);
        let p = pixel_to_world(u, v, d, &rig).unwrap();
        prop_assert!((p.x - x).abs() < 1e-6 && (p.y - y).abs() < 1e-6 && (p.z - z).abs() < 1e-6);
        let g = ground_distance(&p);
        prop_assert!((g * g - (p.x * p.x + p.z * p.z)).abs() <= 1e-9 * g * g);
    }

    #[test]
    fn ldm_map_preserves_midpoints(
        x1 in -10.0f64..10.0, z1 in -5.0f64..20.0, x2 in -10.0f64..10.0, z2 in -5.0f64..20.0,
    ) {
        let params = LdmParams::default();
        let h = build_ldm_homography(&params).unwrap();
        let (u1, v1) = apply_homography(&h, x1, z1).unwrap();
        let (u2, v2) = apply_homography(&h, x2, z2).unwrap();
        let (um, vm) = apply_homography(&h, (x1 + x2) / 2.0, (z1 + z2) / 2.0).unwrap();
        prop_assert!((um - (u1 + u2) / 2.0).abs() < 1e-9);
        prop_assert!((vm - (v1 + v2) / 2.0).abs() < 1e-9);
        let obj = LdmObject::new("p", WorldPoint::new(x1, 0.0, z1), &h, &params);
        let inside = (0.0..500.0).contains(&u1) && (0.0..600.0).contains(&v1);
        prop_assert_eq!(obj.in_view, inside);
        prop_assert_eq!(in_bounds(&params, (u1, v1)), inside);
    }
}
