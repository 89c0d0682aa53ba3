//! Binary occupancy grids: footprint extrusion, LOD priors, synthetic
//! building shapes and the SSVX file format.
//!
//! Linear index is `x + n*y + n*n*z` with `z` the height axis. Grid space
//! maps onto the normalized cube `[-0.5, 0.5]^3`; voxel `i` along an axis
//! has its centre at `(i + 0.5) / n - 0.5`, so `z = 0` sits on the ground.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoFootprint;
use crate::geometry::{ring_bounds, signed_area};

pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct VoxelGrid {
    n: usize,
    words: Vec<u64>,
}

impl fmt::Debug for VoxelGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VoxelGrid {{ n: {}, occupied: {} }}", self.n, self.count())
    }
}

impl VoxelGrid {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            words: vec![0; (n * n * n).div_ceil(64)],
        }
    }

    pub fn full(n: usize) -> Self {
        let mut g = Self::empty(n);
        for i in 0..g.len() {
            g.set_linear(i, true);
        }
        g
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut g = Self::empty(n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    if f(x, y, z) {
                        g.set(x, y, z, true);
                    }
                }
            }
        }
        g
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.n * (y + self.n * z)
    }

    #[inline]
    pub fn get_linear(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set_linear(&mut self, i: usize, value: bool) {
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.get_linear(self.index(x, y, z))
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.set_linear(i, value);
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersection_count(&self, other: &VoxelGrid) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &VoxelGrid) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// True when every voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &VoxelGrid) -> bool {
        self.n == other.n && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    /// Occupied voxel coordinates in linear-index order.
    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let n = self.n;
        (0..self.len())
            .filter(move |&i| self.get_linear(i))
            .map(move |i| (i % n, (i / n) % n, i / (n * n)))
    }

    /// Centre of voxel `(x, y, z)` in the normalized frame.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let n = self.n as f64;
        [
            (x as f64 + 0.5) / n - 0.5,
            (y as f64 + 0.5) / n - 0.5,
            (z as f64 + 0.5) / n - 0.5,
        ]
    }

    pub fn slice(&self, z: usize) -> Slice {
        let mut s = Slice::empty(self.n);
        for y in 0..self.n {
            for x in 0..self.n {
                if self.get(x, y, z) {
                    s.set(x, y);
                }
            }
        }
        s
    }

    fn fill_slice(&mut self, z: usize, slice: &Slice) {
        for y in 0..self.n {
            for x in 0..self.n {
                if slice.get(x, y) {
                    self.set(x, y, z, true);
                }
            }
        }
    }

    /// Packed occupancy, bit `i` of byte `b` is linear index `8b + i`.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let mut bytes: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        bytes.truncate(self.len().div_ceil(8));
        bytes
    }

    pub fn from_packed_bytes(n: usize, bytes: &[u8]) -> Result<Self> {
        let expected = (n * n * n).div_ceil(8);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "occupancy payload has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut g = Self::empty(n);
        for (w, chunk) in g.words.iter_mut().zip(bytes.chunks(8)) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            *w = u64::from_le_bytes(buf);
        }
        // Padding bits past n^3 must stay clear so equality is bitwise.
        let len = g.len();
        if !len.is_multiple_of(64) {
            let last = g.words.len() - 1;
            g.words[last] &= (1u64 << (len % 64)) - 1;
        }
        Ok(g)
    }

    /// Inclusive `(min, max)` of occupied z levels.
    pub fn z_range(&self) -> Option<(usize, usize)> {
        let occupied: Vec<usize> = (0..self.n).filter(|&z| !self.slice(z).is_empty()).collect();
        Some((*occupied.first()?, *occupied.last()?))
    }
}

/// One horizontal `n`×`n` layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    n: usize,
    cells: Vec<bool>,
}

impl Slice {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            cells: vec![false; n * n],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[x + self.n * y]
    }

    pub fn set(&mut self, x: usize, y: usize) {
        self.cells[x + self.n * y] = true;
    }

    pub fn union_with(&mut self, other: &Slice) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a |= *b;
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }
}

/// A footprint projected into the normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramedFootprint {
    /// Outer ring as (x, y) = (east, north) in frame units.
    pub outer: Vec<(f64, f64)>,
    pub holes: Vec<Vec<(f64, f64)>>,
    /// Vertical extent in frame units, `-0.5` is the ground.
    pub z_min: f64,
    pub z_max: f64,
    pub meters_per_unit: f64,
}

const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Projects a footprint to local meters (equirectangular about its centroid)
/// and scales the longer horizontal extent onto the unit cube. Heights keep
/// the same scale and are clamped to the cube ceiling.
pub fn frame_footprint(footprint: &GeoFootprint) -> Result<FramedFootprint> {
    let (lat0, lon0) = footprint.centroid();
    let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    let cos0 = lat0.to_radians().cos();
    let to_m = |ring: &[(f64, f64)]| -> Vec<(f64, f64)> {
        ring.iter()
            .map(|&(lat, lon)| ((lon - lon0) * cos0 * k, (lat - lat0) * k))
            .collect()
    };
    let outer_m = to_m(&footprint.outer_ring);
    let holes_m: Vec<_> = footprint.holes.iter().map(|h| to_m(h)).collect();
    let area = signed_area(&outer_m).abs() - holes_m.iter().map(|h| signed_area(h).abs()).sum::<f64>();
    let (x0, y0, x1, y1) = ring_bounds(&outer_m);
    let extent = (x1 - x0).max(y1 - y0);
    if !(area > 1e-9 && extent > 0.0 && extent.is_finite()) {
        return Err(Error::DegenerateFootprint(footprint.source_id.clone()));
    }
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let to_frame = |ring: &[(f64, f64)]| -> Vec<(f64, f64)> {
        ring.iter().map(|&(x, y)| ((x - cx) / extent, (y - cy) / extent)).collect()
    };
    let mut z_max = -0.5 + footprint.height_m / extent;
    if z_max > 0.5 {
        log::warn!(
            "{}: height {} m exceeds the frame ({} m), clamped",
            footprint.source_id,
            footprint.height_m,
            extent
        );
        z_max = 0.5;
    }
    let z_min = (-0.5 + footprint.min_height_m / extent).min(z_max);
    Ok(FramedFootprint {
        outer: to_frame(&outer_m),
        holes: holes_m.iter().map(|h| to_frame(h)).collect(),
        z_min,
        z_max,
        meters_per_unit: extent,
    })
}

/// Crossings of the horizontal line `y` with every edge, in the same
/// arithmetic as [`crate::geometry::point_in_ring`].
fn row_crossings(y: f64, rings: impl Iterator<Item = impl AsRef<[(f64, f64)]>>, out: &mut Vec<f64>) {
    out.clear();
    for ring in rings {
        let ring = ring.as_ref();
        let n = ring.len();
        if n < 3 {
            continue;
        }
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = ring[i];
            let (xj, yj) = ring[j];
            if (yi > y) != (yj > y) {
                out.push(xi + (y - yi) / (yj - yi) * (xj - xi));
            }
            j = i;
        }
    }
    out.sort_by(f64::total_cmp);
}

/// Even-odd scanline fill of a framed polygon at voxel centres.
pub fn rasterize_framed(framed: &FramedFootprint, n: usize) -> Slice {
    let mut slice = Slice::empty(n);
    let mut crossings = Vec::new();
    let center = |i: usize| (i as f64 + 0.5) / n as f64 - 0.5;
    for y in 0..n {
        let yc = center(y);
        let rings = std::iter::once(&framed.outer).chain(framed.holes.iter());
        row_crossings(yc, rings, &mut crossings);
        for x in 0..n {
            let xc = center(x);
            // inside iff an odd number of crossings lie strictly right of xc
            let right = crossings.len() - crossings.partition_point(|&c| c <= xc);
            if right % 2 == 1 {
                slice.set(x, y);
            }
        }
    }
    slice
}

pub fn rasterize_footprint(footprint: &GeoFootprint, n: usize) -> Result<VoxelGrid> {
    if n < 8 {
        return Err(Error::InvalidArgument(format!("resolution {n} < 8")));
    }
    let framed = frame_footprint(footprint)?;
    let slice = rasterize_framed(&framed, n);
    let mut grid = VoxelGrid::empty(n);
    for z in 0..n {
        let zc = (z as f64 + 0.5) / n as f64 - 0.5;
        if zc >= framed.z_min && zc <= framed.z_max {
            grid.fill_slice(z, &slice);
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LodLevel {
    #[serde(rename = "lod0")]
    Lod0,
    #[serde(rename = "lod1")]
    Lod1,
    #[serde(rename = "lod2")]
    Lod2,
}

impl LodLevel {
    pub const ALL: [LodLevel; 3] = [LodLevel::Lod0, LodLevel::Lod1, LodLevel::Lod2];

    pub fn as_str(self) -> &'static str {
        match self {
            LodLevel::Lod0 => "lod0",
            LodLevel::Lod1 => "lod1",
            LodLevel::Lod2 => "lod2",
        }
    }
}

impl fmt::Display for LodLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Coarse prior of `gt` at the requested level of detail.
///
/// * LOD0: axis-aligned bounding cuboid.
/// * LOD1: union of all occupied slices, extruded over the occupied z range.
/// * LOD2: two height bands split at the `h` in `1..n` that minimizes the
///   total volume; each band is the union of its slices extruded over the
///   band's occupied z range. Ties go to the smallest `h`.
pub fn lod_prior(gt: &VoxelGrid, level: LodLevel) -> Result<VoxelGrid> {
    if gt.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let n = gt.n();
    let slices: Vec<Slice> = (0..n).map(|z| gt.slice(z)).collect();
    let occupied: Vec<bool> = slices.iter().map(|s| !s.is_empty()).collect();
    let (z0, z1) = gt.z_range().expect("non-empty");
    let mut out = VoxelGrid::empty(n);
    match level {
        LodLevel::Lod0 => {
            let (mut lo, mut hi) = ([n; 2], [0; 2]);
            for (x, y, _) in gt.occupied() {
                lo = [lo[0].min(x), lo[1].min(y)];
                hi = [hi[0].max(x), hi[1].max(y)];
            }
            for z in z0..=z1 {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        out.set(x, y, z, true);
                    }
                }
            }
        }
        LodLevel::Lod1 => {
            let mut union = Slice::empty(n);
            slices.iter().for_each(|s| union.union_with(s));
            for z in z0..=z1 {
                out.fill_slice(z, &union);
            }
        }
        LodLevel::Lod2 => {
            let split = lod2_split(&slices, &occupied);
            for (lo, hi) in [(0, split), (split, n)] {
                let Some((b0, b1)) = band_range(&occupied, lo, hi) else {
                    continue;
                };
                let mut union = Slice::empty(n);
                slices[b0..=b1].iter().for_each(|s| union.union_with(s));
                for z in b0..=b1 {
                    out.fill_slice(z, &union);
                }
            }
        }
    }
    Ok(out)
}

fn band_range(occupied: &[bool], lo: usize, hi: usize) -> Option<(usize, usize)> {
    let first = (lo..hi).find(|&z| occupied[z])?;
    let last = (lo..hi).rev().find(|&z| occupied[z])?;
    Some((first, last))
}

/// Split height for LOD2 by exhaustive search over `1..n`.
pub fn lod2_split(slices: &[Slice], occupied: &[bool]) -> usize {
    let n = slices.len();
    // below[h] = union of slices [0, h); above[h] = union of slices [h, n)
    let mut below_count = vec![0usize; n + 1];
    let mut acc = Slice::empty(n);
    for h in 1..=n {
        acc.union_with(&slices[h - 1]);
        below_count[h] = acc.count();
    }
    let mut above_count = vec![0usize; n + 1];
    let mut acc = Slice::empty(n);
    for h in (0..n).rev() {
        acc.union_with(&slices[h]);
        above_count[h] = acc.count();
    }
    let band_volume = |lo: usize, hi: usize, area: usize| {
        band_range(occupied, lo, hi).map_or(0, |(a, b)| area * (b - a + 1))
    };
    let mut best = (usize::MAX, 1);
    for h in 1..n {
        let v = band_volume(0, h, below_count[h]) + band_volume(h, n, above_count[h]);
        if v < best.0 {
            best = (v, h);
        }
    }
    best.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Rect,
    LShape,
    Ring,
}

/// Axis-aligned half-open rectangle in grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CellRect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Everything needed to rebuild a synthetic shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n: usize,
    pub family: ShapeFamily,
    /// Outer rectangle of the base.
    pub base: CellRect,
    /// Cells removed from the base: the L notch or the ring courtyard.
    pub cutout: Option<CellRect>,
    pub base_height: usize,
    pub tower: Option<TowerParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerParams {
    /// Clip rectangle intersected with the base cross-section.
    pub clip: CellRect,
    pub top: usize,
    /// Optional atrium cut through the tower.
    pub atrium: Option<CellRect>,
}

impl SynthParams {
    pub fn base_contains(&self, x: usize, y: usize) -> bool {
        self.base.contains(x, y) && !self.cutout.is_some_and(|c| c.contains(x, y))
    }

    pub fn build(&self) -> VoxelGrid {
        VoxelGrid::from_fn(self.n, |x, y, z| {
            if !self.base_contains(x, y) {
                return false;
            }
            if z < self.base_height {
                return true;
            }
            match &self.tower {
                Some(t) => {
                    z < t.top && t.clip.contains(x, y) && !t.atrium.is_some_and(|a| a.contains(x, y))
                }
                None => false,
            }
        })
    }
}

/// Deterministic building-like shape for the given seed.
pub fn synth_params(seed: u64, n: usize) -> SynthParams {
    assert!(n >= 16, "synthetic shapes need n >= 16");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let family = match rng.gen_range(0..3) {
        0 => ShapeFamily::Rect,
        1 => ShapeFamily::LShape,
        _ => ShapeFamily::Ring,
    };
    let long = rng.gen_range(3 * n / 4..=n);
    let short = rng.gen_range(n / 3..=long);
    let (wx, wy) = if rng.gen_bool(0.5) { (long, short) } else { (short, long) };
    let (bx0, by0) = ((n - wx) / 2, (n - wy) / 2);
    let base = CellRect {
        x0: bx0,
        y0: by0,
        x1: bx0 + wx,
        y1: by0 + wy,
    };
    let cutout = match family {
        ShapeFamily::Rect => None,
        ShapeFamily::LShape => {
            let cx = (wx as f64 * rng.gen_range(0.3..0.6)) as usize;
            let cy = (wy as f64 * rng.gen_range(0.3..0.6)) as usize;
            // notch in one of the four corners
            let (x0, x1) = if rng.gen_bool(0.5) { (base.x0, base.x0 + cx) } else { (base.x1 - cx, base.x1) };
            let (y0, y1) = if rng.gen_bool(0.5) { (base.y0, base.y0 + cy) } else { (base.y1 - cy, base.y1) };
            Some(CellRect { x0, y0, x1, y1 })
        }
        ShapeFamily::Ring => {
            let min_side = wx.min(wy);
            let wall = rng.gen_range((n / 10).max(2)..=(min_side / 4).max((n / 10).max(2)));
            Some(CellRect {
                x0: base.x0 + wall,
                y0: base.y0 + wall,
                x1: base.x1 - wall,
                y1: base.y1 - wall,
            })
        }
    };
    let base_height = rng.gen_range(n / 4..=3 * n / 4);
    let mut params = SynthParams {
        seed,
        n,
        family,
        base,
        cutout,
        base_height,
        tower: None,
    };
    if rng.gen_bool(0.5) && base_height + n / 8 <= n {
        let tw = ((wx as f64) * rng.gen_range(0.3..0.7)).max(2.0) as usize;
        let th = ((wy as f64) * rng.gen_range(0.3..0.7)).max(2.0) as usize;
        let tx0 = rng.gen_range(base.x0..=base.x1 - tw);
        let ty0 = rng.gen_range(base.y0..=base.y1 - th);
        let clip = CellRect {
            x0: tx0,
            y0: ty0,
            x1: tx0 + tw,
            y1: ty0 + th,
        };
        let top = rng.gen_range(base_height + n / 8..=n);
        let atrium = (rng.gen_bool(0.25) && tw >= 8 && th >= 8).then(|| CellRect {
            x0: tx0 + tw / 3,
            y0: ty0 + th / 3,
            x1: tx0 + tw - tw / 3,
            y1: ty0 + th - th / 3,
        });
        let has_cells = (clip.y0..clip.y1).any(|y| {
            (clip.x0..clip.x1)
                .any(|x| params.base_contains(x, y) && !atrium.is_some_and(|a| a.contains(x, y)))
        });
        if has_cells {
            params.tower = Some(TowerParams { clip, top, atrium });
        }
    }
    log::debug!("synth shape {seed}: {params:?}");
    params
}

pub fn synth_shape(seed: u64, n: usize) -> VoxelGrid {
    synth_params(seed, n).build()
}

pub const SSVX_MAGIC: &[u8; 4] = b"SSVX";
pub const SSVX_VERSION: u32 = 1;
pub const SSVX_HEADER_LEN: usize = 16;

pub fn encode_ssvx(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(SSVX_HEADER_LEN + grid.len().div_ceil(8));
    out.extend_from_slice(SSVX_MAGIC);
    out.extend_from_slice(&SSVX_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.n() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&grid.to_packed_bytes());
    out
}

pub fn decode_ssvx(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < SSVX_HEADER_LEN {
        return Err(Error::Format(format!("SSVX header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != SSVX_MAGIC {
        return Err(Error::Format("bad SSVX magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (version, n, reserved) = (word(4), word(8) as usize, word(12));
    if version != SSVX_VERSION {
        return Err(Error::Format(format!("unsupported SSVX version {version}")));
    }
    if reserved != 0 {
        return Err(Error::Format(format!("SSVX reserved field is {reserved}, expected 0")));
    }
    if n == 0 || n > 1024 {
        return Err(Error::Format(format!("SSVX resolution {n} out of range")));
    }
    VoxelGrid::from_packed_bytes(n, &bytes[SSVX_HEADER_LEN..])
}

pub fn write_ssvx(grid: &VoxelGrid, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ssvx(grid))?;
    Ok(())
}

pub fn read_ssvx(path: &Path) -> Result<VoxelGrid> {
    decode_ssvx(&std::fs::read(path)?)
}

/// 6-neighbourhood connectivity of the occupied voxels.
pub fn is_connected(grid: &VoxelGrid) -> bool {
    let total = grid.count();
    let Some(start) = (0..grid.len()).find(|&i| grid.get_linear(i)) else {
        return true;
    };
    let n = grid.n();
    let mut seen = vec![false; grid.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut visited = 0;
    while let Some(i) = stack.pop() {
        visited += 1;
        let (x, y, z) = (i % n, (i / n) % n, i / (n * n));
        let mut push = |x: usize, y: usize, z: usize| {
            let j = grid.index(x, y, z);
            if grid.get_linear(j) && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        };
        if x > 0 { push(x - 1, y, z) }
        if x + 1 < n { push(x + 1, y, z) }
        if y > 0 { push(x, y - 1, z) }
        if y + 1 < n { push(x, y + 1, z) }
        if z > 0 { push(x, y, z - 1) }
        if z + 1 < n { push(x, y, z + 1) }
    }
    visited == total
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    pub(crate) fn cuboid(n: usize, lo: [usize; 3], hi: [usize; 3]) -> VoxelGrid {
        VoxelGrid::from_fn(n, |x, y, z| {
            (lo[0]..hi[0]).contains(&x) && (lo[1]..hi[1]).contains(&y) && (lo[2]..hi[2]).contains(&z)
        })
    }

    fn tower_on_base(n: usize, k: usize, m: usize) -> VoxelGrid {
        VoxelGrid::from_fn(n, |x, y, z| {
            if z < k {
                (4..28).contains(&x) && (6..26).contains(&y)
            } else if z < m {
                (10..18).contains(&x) && (12..20).contains(&y)
            } else {
                false
            }
        })
    }

    fn square_footprint(side_deg: f64, height_m: f64) -> GeoFootprint {
        let (s, w) = (47.0, 8.0);
        let (n, e) = (s + side_deg, w + side_deg / 47f64.to_radians().cos());
        GeoFootprint {
            source_id: "way/1".into(),
            outer_ring: vec![(s, w), (s, e), (n, e), (n, w), (s, w)],
            holes: vec![],
            height_m,
            min_height_m: 0.0,
            raw_tags: BTreeMap::new(),
        }
    }

    #[test]
    fn cuboid_is_fixed_point_of_every_lod() {
        let g = cuboid(16, [2, 3, 0], [10, 12, 7]);
        for level in LodLevel::ALL {
            assert_eq!(lod_prior(&g, level).unwrap(), g, "{level}");
        }
    }

    #[test]
    fn lod2_splits_tower_on_base() {
        let (k, m) = (9, 25);
        let g = tower_on_base(32, k, m);
        let slices: Vec<_> = (0..32).map(|z| g.slice(z)).collect();
        let occ: Vec<_> = slices.iter().map(|s| !s.is_empty()).collect();
        assert_eq!(lod2_split(&slices, &occ), k);
        assert_eq!(lod_prior(&g, LodLevel::Lod2).unwrap(), g);
        // LOD1: base footprint extruded over [0, m)
        let lod1 = lod_prior(&g, LodLevel::Lod1).unwrap();
        let expected = VoxelGrid::from_fn(32, |x, y, z| z < m && (4..28).contains(&x) && (6..26).contains(&y));
        assert_eq!(lod1, expected);
    }

    #[test]
    fn empty_grid_has_no_prior() {
        assert!(matches!(lod_prior(&VoxelGrid::empty(8), LodLevel::Lod0), Err(Error::EmptyGrid)));
    }

    #[test]
    fn full_height_square_extrudes_to_full_grid() {
        // heights beyond the frame clamp to the cube ceiling
        let fp = square_footprint(0.01, 1.0e9);
        let g = rasterize_footprint(&fp, 16).unwrap();
        assert_eq!(g.count(), 16 * 16 * 16);
    }

    #[test]
    fn half_height_square() {
        let fp = square_footprint(0.001, 1.0);
        let framed = frame_footprint(&fp).unwrap();
        let h = framed.meters_per_unit / 2.0;
        let g = rasterize_footprint(&GeoFootprint { height_m: h, ..fp }, 16).unwrap();
        assert_eq!(g.count(), 16 * 16 * 8);
        assert!(g.get(0, 0, 7) && !g.get(0, 0, 8));
    }

    #[test]
    fn degenerate_footprint() {
        let mut fp = square_footprint(0.001, 10.0);
        fp.outer_ring = vec![(47.0, 8.0), (47.001, 8.0), (47.002, 8.0), (47.0, 8.0)];
        assert!(matches!(rasterize_footprint(&fp, 16), Err(Error::DegenerateFootprint(_))));
    }

    #[test]
    fn ssvx_sizes_and_errors() {
        let bytes = encode_ssvx(&VoxelGrid::empty(64));
        assert_eq!(bytes.len(), 16 + 64 * 64 * 64 / 8);
        assert!(matches!(decode_ssvx(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_ssvx(&bytes[..10]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_ssvx(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_ssvx(&bad), Err(Error::Format(_))));
        // odd resolution: ceil(n^3 / 8) payload bytes
        let g = VoxelGrid::full(5);
        let b = encode_ssvx(&g);
        assert_eq!(b.len(), 16 + 16);
        assert_eq!(decode_ssvx(&b).unwrap(), g);
    }

    #[test]
    fn packed_bit_order_is_lsb_first() {
        let mut g = VoxelGrid::empty(4);
        g.set(1, 0, 0, true); // linear 1
        g.set(0, 2, 0, true); // linear 8
        let bytes = g.to_packed_bytes();
        assert_eq!(bytes[0], 0b0000_0010);
        assert_eq!(bytes[1], 0b0000_0001);
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(synth_shape(42, 32), synth_shape(42, 32));
        assert_ne!(synth_shape(1, 32), synth_shape(2, 32));
    }

    #[test]
    fn ring_lod1_differs_from_lod0() {
        let seed = (0..).find(|&s| synth_params(s, 32).family == ShapeFamily::Ring).unwrap();
        let g = synth_shape(seed, 32);
        assert_ne!(lod_prior(&g, LodLevel::Lod1).unwrap(), lod_prior(&g, LodLevel::Lod0).unwrap());
    }

    #[test]
    fn connectivity_checker() {
        let mut g = cuboid(8, [0, 0, 0], [2, 2, 2]);
        assert!(is_connected(&g));
        g.set(5, 5, 5, true);
        assert!(!is_connected(&g));
    }
}
