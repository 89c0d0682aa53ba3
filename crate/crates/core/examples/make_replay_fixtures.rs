//! Regenerates the offline replay fixtures under `fixtures/replay`: the
//! Overpass response and synthetic satellite tiles covering the fixture
//! block, with building footprints painted as roofs.

use std::path::Path;

use geoforge::geo::{parse_buildings, GeoBBox, HeightConfig};
use geoforge::geometry::point_in_polygon;
use geoforge::pipeline::{covering_tiles, DEFAULT_ZOOM};
use geoforge::tiles::{unproject, DEFAULT_TILE_SIZE};
use image::{Rgba, RgbaImage};

pub const FIXTURE_BBOX: &str = "47.3700,8.5400,47.3713,8.5419";

fn main() -> geoforge::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/replay");
    let doc = std::fs::read_to_string(root.join("overpass.json"))?;
    let footprints = parse_buildings(&doc, &HeightConfig::default())?.footprints;
    let bbox = GeoBBox::parse_cli(FIXTURE_BBOX)?;
    let ts = DEFAULT_TILE_SIZE;
    for tile in covering_tiles(&bbox, DEFAULT_ZOOM, ts)? {
        let img = RgbaImage::from_fn(ts, ts, |px, py| {
            let gx = (tile.x * ts + px) as f64 + 0.5;
            let gy = (tile.y * ts + py) as f64 + 0.5;
            let (lat, lon) = unproject(gx / ts as f64, gy / ts as f64, tile.zoom);
            let roof = footprints
                .iter()
                .position(|f| point_in_polygon(lat, lon, &f.outer_ring, &f.holes));
            match roof {
                Some(i) => Rgba([150 + 20 * i as u8, 90 + 15 * i as u8, 80, 255]),
                // checkered ground so crops are visibly aligned
                None if ((gx as u32 / 8) + (gy as u32 / 8)).is_multiple_of(2) => Rgba([70, 110, 60, 255]),
                None => Rgba([85, 125, 70, 255]),
            }
        });
        let dir = root.join(format!("tiles/{}/{}", tile.zoom, tile.x));
        std::fs::create_dir_all(&dir)?;
        img.save(dir.join(format!("{}.png", tile.y)))?;
        println!("wrote tile {tile}");
    }
    Ok(())
}
