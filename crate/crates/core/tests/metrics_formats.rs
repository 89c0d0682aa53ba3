mod common;

use common::*;
use geoforge::error::Error;
use geoforge::flow::{decode_gftm, encode_gftm};
use geoforge::latent::{decode_sslt, encode_sslt};
use geoforge::metrics::{chamfer, eval_report, f_score, voxel_iou, EvalReport};
use geoforge::pipeline::PipelineManifest;
use geoforge::voxel::{decode_ssvx, encode_ssvx, lod_prior, LodLevel, VoxelGrid};
use proptest::prelude::*;
use proptest::strategy::ValueTree;

fn single(n: usize, x: usize, y: usize, z: usize) -> VoxelGrid {
    let mut g = VoxelGrid::empty(n);
    g.set(x, y, z, true);
    g
}

#[test]
fn hand_counted_metrics() {
    let a = VoxelGrid::from_fn(8, |x, y, z| x < 2 && y < 2 && z < 2);
    let b = VoxelGrid::from_fn(8, |x, y, z| (1..3).contains(&x) && y < 2 && z < 2);
    assert_eq!(voxel_iou(&a, &b).unwrap(), 1.0 / 3.0);
    let far = VoxelGrid::from_fn(8, |x, _, _| x == 7);
    assert_eq!(voxel_iou(&a, &far).unwrap(), 0.0);
    assert_eq!(voxel_iou(&VoxelGrid::empty(8), &VoxelGrid::empty(8)).unwrap(), 1.0);

    let (p, q) = (single(64, 10, 10, 10), single(64, 11, 10, 10));
    assert!((chamfer(&p, &q).unwrap() - 1.0 / 64.0).abs() < 1e-15);
    assert_eq!(f_score(&p, &q, 0.05).unwrap(), 1.0);
    assert_eq!(f_score(&p, &q, 0.01).unwrap(), 0.0);
}

#[test]
fn mismatched_resolutions_name_both() {
    let err = voxel_iou(&VoxelGrid::full(8), &VoxelGrid::full(16)).unwrap_err();
    assert!(matches!(err, Error::ResolutionMismatch { left: 8, right: 16 }));
    let msg = err.to_string();
    assert!(msg.contains('8') && msg.contains("16"), "{msg}");
    assert!(matches!(chamfer(&VoxelGrid::empty(8), &VoxelGrid::full(8)), Err(Error::EmptyGrid)));
}

#[test]
fn accelerated_chamfer_matches_brute_force() {
    let mut runner = proptest::test_runner::TestRunner::new_with_rng(
        ProptestConfig::default(),
        proptest::test_runner::TestRng::from_seed(proptest::test_runner::RngAlgorithm::ChaCha, &[7; 32]),
    );
    let strat = (arb_nonempty_grid(16), arb_nonempty_grid(16));
    for _ in 0..50 {
        let (a, b) = strat.new_tree(&mut runner).unwrap().current();
        let fast = chamfer(&a, &b).unwrap();
        let slow = brute_chamfer(&a, &b);
        assert!((fast - slow).abs() <= 1e-9, "{fast} vs {slow}");
    }
}

#[test]
fn containment_makes_lod0_iou_a_volume_ratio() {
    let gt = VoxelGrid::from_fn(32, |x, y, z| (4..28).contains(&x) && (4..28).contains(&y) && (z < 8 || ((10..20).contains(&x) && z < 24)));
    let lod0 = lod_prior(&gt, LodLevel::Lod0).unwrap();
    let report = eval_report(&lod0, &gt, 0.05).unwrap();
    assert_eq!(report.iou, gt.count() as f64 / lod0.count() as f64);
    let same = eval_report(&gt, &gt, 0.05).unwrap();
    assert_eq!((same.iou, same.chamfer, same.f_score), (1.0, 0.0, 1.0));
    assert_eq!(EvalReport::from_json(&report.to_json().unwrap()).unwrap(), report);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_are_symmetric(a in arb_nonempty_grid(8), b in arb_nonempty_grid(8), tau in 0.01f64..0.5) {
        prop_assert_eq!(voxel_iou(&a, &b).unwrap(), voxel_iou(&b, &a).unwrap());
        prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(f_score(&a, &b, tau).unwrap(), f_score(&b, &a, tau).unwrap());
        prop_assert!((f_score(&a, &b, tau).unwrap() - brute_f_score(&a, &b, tau)).abs() < 1e-12);
        let iou = voxel_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert_eq!(voxel_iou(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ssvx_round_trip(g in arb_any_grid()) {
        let bytes = encode_ssvx(&g);
        let back = decode_ssvx(&bytes).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(encode_ssvx(&back), bytes);
    }

    #[test]
    fn sslt_round_trip(l in arb_latent()) {
        let bytes = encode_sslt(&l);
        let back = decode_sslt(&bytes).unwrap();
        prop_assert_eq!(&back, &l);
        prop_assert_eq!(encode_sslt(&back), bytes);
    }

    #[test]
    fn gftm_round_trip(p in arb_params()) {
        let bytes = encode_gftm(&p);
        let back = decode_gftm(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(encode_gftm(&back), bytes);
    }

    #[test]
    fn manifest_round_trip(m in arb_manifest()) {
        let text = m.to_json().unwrap();
        let back = PipelineManifest::from_json(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}
