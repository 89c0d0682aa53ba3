use std::collections::BTreeMap;

use geoforge::error::Error;
use geoforge::geo::GeoFootprint;
use geoforge::geometry::point_in_polygon;
use geoforge::latent::{
    compute_stats, cosine_interpolate, decode_sslt, encode_sslt, gaussian_noise, normalize_latent, sample_training_prior,
    LatentGrid, NormStats, Surrogate, TrainingPrior,
};
use geoforge::metrics::voxel_iou;
use geoforge::voxel::{
    decode_ssvx, encode_ssvx, frame_footprint, is_connected, lod_prior, rasterize_footprint, synth_params, synth_shape,
    LodLevel, ShapeFamily, VoxelGrid, SSVX_HEADER_LEN,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square(lat0: f64, lon0: f64, side: f64) -> Vec<(f64, f64)> {
    vec![
        (lat0, lon0),
        (lat0, lon0 + side),
        (lat0 + side, lon0 + side),
        (lat0 + side, lon0),
        (lat0, lon0),
    ]
}

fn ring_footprint() -> GeoFootprint {
    GeoFootprint {
        source_id: "relation/9".into(),
        outer_ring: square(47.37, 8.54, 0.0004),
        holes: vec![square(47.37013, 8.54011, 0.00015)],
        height_m: 12.0,
        min_height_m: 0.0,
        raw_tags: BTreeMap::new(),
    }
}

#[test]
fn ring_raster_matches_point_in_polygon_at_every_center() {
    let fp = ring_footprint();
    let n = 64;
    let grid = rasterize_footprint(&fp, n).unwrap();
    let framed = frame_footprint(&fp).unwrap();
    let center = |i: usize| (i as f64 + 0.5) / n as f64 - 0.5;
    let occupied_z: Vec<usize> = (0..n).filter(|&z| grid.slice(z).count() > 0).collect();
    assert!(!occupied_z.is_empty());
    assert_eq!(occupied_z[0], 0);
    let mut holes = 0;
    for &z in &occupied_z {
        for y in 0..n {
            for x in 0..n {
                let inside = point_in_polygon(center(x), center(y), &framed.outer, &framed.holes);
                assert_eq!(grid.get(x, y, z), inside, "({x},{y},{z})");
                if z == 0 && !inside {
                    holes += 1;
                }
            }
        }
    }
    assert!(holes > 0, "the courtyard must carve cells");
}

#[test]
fn zero_area_footprint_is_degenerate() {
    let mut fp = ring_footprint();
    fp.outer_ring = vec![(47.37, 8.54), (47.37, 8.541), (47.37, 8.542), (47.37, 8.54)];
    fp.holes.clear();
    assert!(matches!(rasterize_footprint(&fp, 32), Err(Error::DegenerateFootprint(_))));
}

/// Wide base on z in [0, k), narrow tower on z in [k, m).
fn tower_on_base(n: usize, k: usize, m: usize) -> VoxelGrid {
    VoxelGrid::from_fn(n, |x, y, z| {
        let base = (8..56).contains(&x) && (10..50).contains(&y);
        let tower = (20..36).contains(&x) && (18..40).contains(&y);
        (z < k && base) || (z >= k && z < m && tower)
    })
}

/// Volume of the two-band prior split at `h`, computed from scratch.
fn two_band_volume(gt: &VoxelGrid, h: usize) -> usize {
    let n = gt.n();
    let mut total = 0;
    for (lo, hi) in [(0, h), (h, n)] {
        let zs: Vec<usize> = (lo..hi).filter(|&z| gt.slice(z).count() > 0).collect();
        let (Some(&a), Some(&b)) = (zs.first(), zs.last()) else { continue };
        let mut area = 0;
        for y in 0..n {
            for x in 0..n {
                if (lo..hi).any(|z| gt.get(x, y, z)) {
                    area += 1;
                }
            }
        }
        total += area * (b - a + 1);
    }
    total
}

#[test]
fn lod2_split_is_the_volume_minimum() {
    let (n, k, m) = (64, 22, 51);
    let gt = tower_on_base(n, k, m);
    let volumes: Vec<usize> = (1..n).map(|h| two_band_volume(&gt, h)).collect();
    let best = volumes.iter().copied().min().unwrap();
    let first_best = 1 + volumes.iter().position(|&v| v == best).unwrap();
    assert_eq!(first_best, k);
    assert_eq!(best, gt.count());
    assert_eq!(lod_prior(&gt, LodLevel::Lod2).unwrap(), gt);
}

#[test]
fn lod1_extrudes_the_union_projection() {
    let (n, k, m) = (64, 22, 51);
    let gt = tower_on_base(n, k, m);
    let lod1 = lod_prior(&gt, LodLevel::Lod1).unwrap();
    let expected = VoxelGrid::from_fn(n, |x, y, z| z < m && (0..n).any(|zz| gt.get(x, y, zz)));
    assert_eq!(lod1, expected);
}

#[test]
fn synthetic_shapes_are_connected_and_nested() {
    for seed in 0..1000 {
        let gt = synth_shape(seed, 32);
        assert!(!gt.is_empty(), "seed {seed}");
        assert!(is_connected(&gt), "seed {seed}");
    }
    for seed in 0..100 {
        let gt = synth_shape(seed, 64);
        let lods: Vec<VoxelGrid> = LodLevel::ALL.iter().map(|&l| lod_prior(&gt, l).unwrap()).collect();
        assert!(gt.is_subset_of(&lods[2]));
        assert!(lods[2].is_subset_of(&lods[1]));
        assert!(lods[1].is_subset_of(&lods[0]));
        let ious: Vec<f64> = lods.iter().map(|l| voxel_iou(l, &gt).unwrap()).collect();
        assert!(ious[0] <= ious[1] && ious[1] <= ious[2], "seed {seed}: {ious:?}");
        // containment makes IoU a volume ratio
        assert_eq!(ious[0], gt.count() as f64 / lods[0].count() as f64);
    }
}

#[test]
fn ring_family_lod1_differs_from_lod0() {
    let seed = (0..).find(|&s| synth_params(s, 64).family == ShapeFamily::Ring).unwrap();
    let gt = synth_shape(seed, 64);
    assert_ne!(lod_prior(&gt, LodLevel::Lod1).unwrap(), lod_prior(&gt, LodLevel::Lod0).unwrap());
}

fn random_grid(rng: &mut ChaCha8Rng, n: usize, p: f64) -> VoxelGrid {
    VoxelGrid::from_fn(n, |_, _, _| rng.gen_bool(p))
}

#[test]
fn ssvx_size_round_trip_and_truncation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_grid(&mut rng, 64, 0.5);
    let bytes = encode_ssvx(&g);
    assert_eq!(decode_ssvx(&bytes).unwrap(), g);
    assert_eq!(encode_ssvx(&VoxelGrid::empty(64)).len(), SSVX_HEADER_LEN + 64 * 64 * 64 / 8);
    assert!(matches!(decode_ssvx(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
}

#[test]
fn half_populated_grids_have_calibrated_latent_spread() {
    let s = Surrogate::default_for(64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let latents: Vec<LatentGrid> = (0..100).map(|_| s.encode(&random_grid(&mut rng, 64, 0.5)).unwrap()).collect();
    let stats = compute_stats(&latents).unwrap();
    for (ch, std) in stats.std.iter().enumerate() {
        assert!((0.1..=0.3).contains(std), "channel {ch}: {std}");
    }
}

#[test]
fn cuboids_survive_the_surrogate_round_trip() {
    let s = Surrogate::default_for(64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..100 {
        let lo: Vec<usize> = (0..3).map(|_| rng.gen_range(0..24)).collect();
        let hi: Vec<usize> = lo.iter().map(|&l| l + rng.gen_range(24..=40)).collect();
        let g = VoxelGrid::from_fn(64, |x, y, z| {
            [x, y, z].iter().zip(lo.iter().zip(&hi)).all(|(v, (a, b))| (a..b).contains(&v))
        });
        let back = s.decode(&s.encode(&g).unwrap()).unwrap();
        let iou = voxel_iou(&back, &g).unwrap();
        assert!(iou >= 0.95, "cuboid {i}: {iou}");
    }
}

#[test]
fn surrogate_is_deterministic() {
    let g = synth_shape(3, 64);
    let a = Surrogate::default_for(64).unwrap().encode(&g).unwrap();
    let b = Surrogate::default_for(64).unwrap().encode(&g).unwrap();
    assert_eq!(a, b);
    let bytes = encode_sslt(&a);
    assert_eq!(encode_sslt(&decode_sslt(&bytes).unwrap()), bytes);
}

#[test]
fn two_value_corpus_stats() {
    let a = LatentGrid::from_values(1, 1, vec![0.0]).unwrap();
    let b = LatentGrid::from_values(1, 1, vec![2.0]).unwrap();
    let stats = compute_stats(&[a, b]).unwrap();
    assert_eq!(stats, NormStats { mean: vec![1.0], std: vec![1.0] });
}

#[test]
fn monte_carlo_stats_recover_generator() {
    let (d, c) = (50, 8);
    let len = d * d * d * c;
    let values: Vec<f64> = gaussian_noise(len, 21).into_iter().map(|v| 0.2 * v).collect();
    assert!(len >= 1_000_000);
    let stats = compute_stats(&[LatentGrid::from_values(d, c, values).unwrap()]).unwrap();
    for ch in 0..c {
        assert!(stats.mean[ch].abs() <= 0.01);
        assert!((stats.std[ch] - 0.2).abs() <= 0.01);
    }
}

#[test]
fn training_prior_choice_is_uniform() {
    let gt = synth_shape(1, 16);
    let mut counts = std::collections::HashMap::new();
    let draws = 100_000;
    for seed in 0..draws {
        *counts.entry(sample_training_prior(&gt, seed).unwrap()).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 4);
    for p in TrainingPrior::ALL {
        let f = counts[&p] as f64 / draws as f64;
        assert!((f - 0.25).abs() <= 0.01, "{p:?}: {f}");
    }
    assert_eq!(sample_training_prior(&gt, 5).unwrap(), sample_training_prior(&gt, 5).unwrap());
    assert!(matches!(sample_training_prior(&VoxelGrid::empty(16), 0), Err(Error::EmptyGrid)));
}

#[test]
fn pure_noise_start_is_uncorrelated_with_the_target() {
    let s = Surrogate::new(16, 4, 8, 1).unwrap();
    let gt = synth_shape(8, 16);
    let z = normalize_latent(&s.encode(&gt).unwrap(), &NormStats { mean: vec![0.0; 8], std: vec![0.2; 8] }).unwrap();
    let draws = 10_000u64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    let zv = z.values();
    let zmean = zv.iter().sum::<f64>() / zv.len() as f64;
    for seed in 0..draws {
        let start = cosine_interpolate(&z, 1.0, seed).unwrap();
        for (a, b) in start.values().iter().zip(zv) {
            sxy += a * (b - zmean);
            sxx += a * a;
            syy += (b - zmean) * (b - zmean);
        }
    }
    let corr = sxy / (sxx * syy).sqrt();
    assert!(corr.abs() < 0.01, "{corr}");
}
