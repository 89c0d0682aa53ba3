//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use geoforge::flow::FlowConfig;
use geoforge::geo::GeoBBox;
use geoforge::latent::LatentGrid;
use geoforge::pipeline::{
    BuildingRecord, Failure, FetchConfig, GenerateConfig, ManifestConfig, PipelineManifest, PriorConfig, Stage,
};
use geoforge::voxel::{LodLevel, VoxelGrid};
use proptest::prelude::*;

pub fn repo_fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn centers(g: &VoxelGrid) -> Vec<[f64; 3]> {
    g.occupied().map(|(x, y, z)| g.voxel_center(x, y, z)).collect()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Nearest-neighbour distance from every point of `from` to `to`, O(|from||to|).
fn brute_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

pub fn brute_chamfer(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
    let (pa, pb) = (centers(a), centers(b));
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    0.5 * (mean(brute_nearest(&pa, &pb)) + mean(brute_nearest(&pb, &pa)))
}

pub fn brute_f_score(a: &VoxelGrid, b: &VoxelGrid, tau: f64) -> f64 {
    let (pa, pb) = (centers(a), centers(b));
    let frac = |v: Vec<f64>| v.iter().filter(|&&d| d <= tau).count() as f64 / v.len() as f64;
    let (p, r) = (frac(brute_nearest(&pa, &pb)), frac(brute_nearest(&pb, &pa)));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Grid of resolution `n` with occupancy probability drawn per grid.
pub fn arb_grid(n: usize) -> impl Strategy<Value = VoxelGrid> {
    (0.0f64..=1.0, any::<u64>()).prop_map(move |(p, seed)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        VoxelGrid::from_fn(n, |_, _, _| rng.gen_bool(p))
    })
}

pub fn arb_nonempty_grid(n: usize) -> impl Strategy<Value = VoxelGrid> {
    arb_grid(n).prop_map(move |mut g| {
        if g.is_empty() {
            g.set(0, 0, 0, true);
        }
        g
    })
}

/// Any resolution divisible by 8, so the packed payload has no padding bits.
pub fn arb_any_grid() -> impl Strategy<Value = VoxelGrid> {
    prop_oneof![Just(8usize), Just(16), Just(24), Just(32)].prop_flat_map(arb_grid)
}

pub fn arb_latent() -> impl Strategy<Value = LatentGrid> {
    (1usize..6, 1usize..9).prop_flat_map(|(d, c)| {
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), d * d * d * c)
            .prop_map(move |v| LatentGrid::from_values(d, c, v.into_iter().map(f64::from).collect()).unwrap())
    })
}

pub fn arb_params() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()).prop_map(f64::from), 0..300)
}

fn arb_lod() -> impl Strategy<Value = LodLevel> {
    prop_oneof![Just(LodLevel::Lod0), Just(LodLevel::Lod1), Just(LodLevel::Lod2)]
}

fn arb_text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_/. -]{0,16}"
}

fn arb_building() -> impl Strategy<Value = BuildingRecord> {
    (
        arb_text(),
        arb_text(),
        prop::option::of(arb_text()),
        prop::option::of(arb_text()),
        prop::collection::btree_map(arb_lod(), arb_text(), 0..3),
        prop::option::of(arb_lod()),
        prop::collection::btree_map(arb_text(), arb_text(), 0..3),
        prop::option::of(arb_text()),
    )
        .prop_map(|(source_id, footprint, masked_image, reference, priors, generated_from, latents, generated)| {
            BuildingRecord {
                source_id,
                footprint,
                masked_image,
                refined_image: None,
                reference,
                priors,
                generated_from,
                latents,
                generated,
                eval_report: None,
            }
        })
}

fn arb_config() -> impl Strategy<Value = ManifestConfig> {
    (
        prop::option::of((any::<bool>(), arb_text(), 0u8..23)),
        prop::option::of((prop::collection::vec(arb_lod(), 0..3), 8usize..128)),
        prop::option::of((1usize..200, 0.0f64..20.0, 0.0f64..=1.0, any::<u64>())),
        prop::option::of(1e-6f64..1.0),
    )
        .prop_map(|(fetch, priorize, generate, tau)| ManifestConfig {
            fetch: fetch.map(|(offline, url, zoom)| FetchConfig {
                offline,
                overpass_url: url.clone(),
                tile_url: url,
                zoom,
                tile_size: 256,
            }),
            priorize: priorize.map(|(lods, resolution)| PriorConfig { lods, resolution }),
            generate: generate.map(|(steps, cfg_scale, lambda, seed)| GenerateConfig {
                model: "toy.gftm".into(),
                flow: FlowConfig { steps, cfg_scale, lambda, seed },
            }),
            tau,
        })
}

pub fn arb_manifest() -> impl Strategy<Value = PipelineManifest> {
    (
        (-85.0f64..0.0, 0.0f64..85.0, -180.0f64..0.0, 0.0f64..180.0),
        prop::option::of(arb_text()),
        arb_config(),
        prop::collection::vec(arb_building(), 0..4),
        prop::collection::vec((arb_text(), arb_text()), 0..3),
    )
        .prop_map(|((s, n, w, e), image, config, buildings, failures)| {
            let mut m = PipelineManifest::new(GeoBBox::new(s, n, w, e).unwrap());
            m.image = image;
            m.config = config;
            m.buildings = buildings;
            m.failures = failures
                .into_iter()
                .map(|(source_id, message)| Failure { source_id, stage: Stage::Priorize, message })
                .collect();
            m
        })
}
