//! OpenStreetMap building ingestion through the Overpass API.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::point_in_ring;
use crate::transport::{send_with_retry, HttpRequest, RetryPolicy, Transport};

/// Latitude limit of the Web Mercator projection.
pub const MERCATOR_MAX_LAT: f64 = 85.0511;

pub const DEFAULT_OVERPASS_URL: &str = "https://overpass-api.de/api/interpreter";

/// (lat, lon) in degrees.
pub type LatLon = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl GeoBBox {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Result<Self> {
        let bbox = Self {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        };
        bbox.validate()?;
        Ok(bbox)
    }

    /// Parses the CLI order `minlat,minlon,maxlat,maxlon`.
    pub fn parse_cli(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidBBox(format!("{text:?}: {e}")))?;
        match parts.as_slice() {
            &[min_lat, min_lon, max_lat, max_lon] => Self::new(min_lat, max_lat, min_lon, max_lon),
            _ => Err(Error::InvalidBBox(format!(
                "{text:?}: expected minlat,minlon,maxlat,maxlon"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.min_lat, self.max_lat, self.min_lon, self.max_lon];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBBox("non-finite coordinate".into()));
        }
        if self.min_lat >= self.max_lat {
            return Err(Error::InvalidBBox(format!(
                "min_lat {} >= max_lat {}",
                self.min_lat, self.max_lat
            )));
        }
        if self.min_lon >= self.max_lon {
            return Err(Error::InvalidBBox(format!(
                "min_lon {} >= max_lon {}",
                self.min_lon, self.max_lon
            )));
        }
        if self.min_lat < -MERCATOR_MAX_LAT || self.max_lat > MERCATOR_MAX_LAT {
            return Err(Error::InvalidBBox(format!(
                "latitude outside [-{MERCATOR_MAX_LAT}, {MERCATOR_MAX_LAT}]"
            )));
        }
        if self.min_lon < -180.0 || self.max_lon > 180.0 {
            return Err(Error::InvalidBBox("longitude outside [-180, 180]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoFootprint {
    #[serde(rename = "id")]
    pub source_id: String,
    #[serde(rename = "outer")]
    pub outer_ring: Vec<LatLon>,
    pub holes: Vec<Vec<LatLon>>,
    pub height_m: f64,
    pub min_height_m: f64,
    #[serde(rename = "tags")]
    pub raw_tags: BTreeMap<String, String>,
}

impl GeoFootprint {
    pub fn validate(&self) -> Result<()> {
        let closed = |ring: &[LatLon]| ring.len() >= 4 && ring.first() == ring.last();
        if !closed(&self.outer_ring) {
            return Err(Error::InvalidArgument(format!(
                "{}: outer ring is not closed",
                self.source_id
            )));
        }
        if let Some(hole) = self.holes.iter().find(|h| !closed(h)) {
            return Err(Error::InvalidArgument(format!(
                "{}: hole ring with {} vertices is not closed",
                self.source_id,
                hole.len()
            )));
        }
        if !(self.min_height_m >= 0.0 && self.height_m > self.min_height_m) {
            return Err(Error::InvalidArgument(format!(
                "{}: heights must satisfy 0 <= min_height_m < height_m",
                self.source_id
            )));
        }
        Ok(())
    }

    /// Vertex mean of the outer ring, excluding the closing duplicate.
    pub fn centroid(&self) -> LatLon {
        let pts = &self.outer_ring[..self.outer_ring.len().saturating_sub(1).max(1)];
        let n = pts.len() as f64;
        let (lat, lon) = pts
            .iter()
            .fold((0.0, 0.0), |(a, b), &(la, lo)| (a + la, b + lo));
        (lat / n, lon / n)
    }
}

/// Serializes footprints in the `footprints.json` layout.
pub fn footprints_to_json(footprints: &[GeoFootprint]) -> Result<String> {
    Ok(serde_json::to_string_pretty(footprints)?)
}

pub fn footprints_from_json(text: &str) -> Result<Vec<GeoFootprint>> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightConfig {
    pub meters_per_level: f64,
    pub default_height_m: f64,
}

impl Default for HeightConfig {
    fn default() -> Self {
        Self {
            meters_per_level: 3.0,
            default_height_m: 10.0,
        }
    }
}

fn parse_meters(text: &str) -> Option<f64> {
    let t = text.trim();
    let t = t.strip_suffix('m').unwrap_or(t).trim_end();
    let v: f64 = t.parse().ok()?;
    (v.is_finite() && v > 0.0).then_some(v)
}

/// Building height from `height`, else `building:levels`, else the default.
pub fn infer_height(raw_tags: &BTreeMap<String, String>, config: &HeightConfig) -> f64 {
    if let Some(h) = raw_tags.get("height").and_then(|t| parse_meters(t)) {
        return h;
    }
    if let Some(levels) = raw_tags
        .get("building:levels")
        .and_then(|t| t.trim().parse::<f64>().ok())
        .filter(|l| l.is_finite() && *l > 0.0)
    {
        let h = levels * config.meters_per_level;
        if h.is_finite() && h > 0.0 {
            return h;
        }
    }
    if config.default_height_m.is_finite() && config.default_height_m > 0.0 {
        config.default_height_m
    } else {
        HeightConfig::default().default_height_m
    }
}

fn infer_min_height(raw_tags: &BTreeMap<String, String>, height_m: f64, id: &str) -> f64 {
    match raw_tags.get("min_height").and_then(|t| parse_meters(t)) {
        Some(m) if m < height_m => m,
        Some(m) => {
            log::warn!("{id}: min_height {m} >= height {height_m}, ignoring");
            0.0
        }
        None => 0.0,
    }
}

pub fn build_overpass_query(bbox: &GeoBBox) -> Result<String> {
    bbox.validate()?;
    let b = format!(
        "({},{},{},{})",
        bbox.min_lat, bbox.min_lon, bbox.max_lat, bbox.max_lon
    );
    Ok(format!(
        "[out:json][timeout:60];\n(\n  way[\"building\"]{b};\n  relation[\"building\"]{b};\n);\nout geom;\n"
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParseWarning {
    pub element: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedBuildings {
    pub footprints: Vec<GeoFootprint>,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Deserialize)]
struct OverpassDoc {
    elements: Vec<RawElement>,
}

#[derive(Deserialize)]
struct RawElement {
    #[serde(rename = "type")]
    kind: String,
    id: i64,
    #[serde(default)]
    tags: BTreeMap<String, String>,
    #[serde(default)]
    geometry: Option<Vec<Option<RawPoint>>>,
    #[serde(default)]
    members: Vec<RawMember>,
}

#[derive(Deserialize)]
struct RawMember {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    role: String,
    #[serde(default)]
    geometry: Option<Vec<Option<RawPoint>>>,
}

#[derive(Deserialize, Clone, Copy)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

fn to_ring(points: &[Option<RawPoint>]) -> Option<Vec<LatLon>> {
    points
        .iter()
        .map(|p| p.map(|p| (p.lat, p.lon)))
        .collect::<Option<Vec<_>>>()
}

fn is_closed(ring: &[LatLon]) -> bool {
    ring.len() >= 4 && ring.first() == ring.last()
}

/// Chains open way segments into closed rings by matching endpoints.
/// Segments that never close are returned separately.
fn assemble_rings(mut segments: Vec<Vec<LatLon>>) -> (Vec<Vec<LatLon>>, usize) {
    let mut rings = Vec::new();
    let mut dangling = 0;
    segments.retain(|s| s.len() >= 2);
    while let Some(mut current) = segments.pop() {
        loop {
            if is_closed(&current) {
                rings.push(current);
                break;
            }
            let tail = *current.last().unwrap();
            let next = segments.iter().position(|s| s[0] == tail || *s.last().unwrap() == tail);
            match next {
                Some(i) => {
                    let mut seg = segments.swap_remove(i);
                    if seg[0] != tail {
                        seg.reverse();
                    }
                    current.extend_from_slice(&seg[1..]);
                }
                None => {
                    dangling += 1;
                    break;
                }
            }
        }
    }
    (rings, dangling)
}

/// Parses an Overpass JSON document (`out geom`) into building footprints.
pub fn parse_buildings(doc: &str, heights: &HeightConfig) -> Result<ParsedBuildings> {
    let doc: OverpassDoc =
        serde_json::from_str(doc).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    let mut out = ParsedBuildings::default();

    for el in &doc.elements {
        if !el.tags.contains_key("building") {
            continue;
        }
        let id = format!("{}/{}", el.kind, el.id);
        let warn = |out: &mut ParsedBuildings, message: String| {
            log::warn!("{id}: {message}");
            out.warnings.push(ParseWarning {
                element: id.clone(),
                message,
            });
        };
        match el.kind.as_str() {
            "way" => {
                let Some(geometry) = el.geometry.as_deref() else {
                    return Err(Error::MalformedResponse(format!(
                        "{id} has no geometry; the query must request `out geom`"
                    )));
                };
                let Some(ring) = to_ring(geometry) else {
                    warn(&mut out, "geometry has missing nodes, skipped".into());
                    continue;
                };
                if !is_closed(&ring) {
                    warn(&mut out, "way is not closed, skipped".into());
                    continue;
                }
                let height_m = infer_height(&el.tags, heights);
                out.footprints.push(GeoFootprint {
                    min_height_m: infer_min_height(&el.tags, height_m, &id),
                    source_id: id,
                    outer_ring: ring,
                    holes: Vec::new(),
                    height_m,
                    raw_tags: el.tags.clone(),
                });
            }
            "relation" => {
                if el.tags.get("type").map(String::as_str) != Some("multipolygon") {
                    warn(&mut out, "only multipolygon relations are supported, skipped".into());
                    continue;
                }
                let mut outers = Vec::new();
                let mut inners = Vec::new();
                for m in el.members.iter().filter(|m| m.kind == "way") {
                    let Some(ring) = m.geometry.as_deref().and_then(to_ring) else {
                        continue;
                    };
                    match m.role.as_str() {
                        "inner" => inners.push(ring),
                        _ => outers.push(ring),
                    }
                }
                let (outer_rings, open_outer) = assemble_rings(outers);
                let (inner_rings, open_inner) = assemble_rings(inners);
                if open_outer + open_inner > 0 {
                    warn(
                        &mut out,
                        format!("{} member ring(s) could not be closed", open_outer + open_inner),
                    );
                }
                if outer_rings.is_empty() {
                    warn(&mut out, "no closed outer ring, skipped".into());
                    continue;
                }
                let height_m = infer_height(&el.tags, heights);
                let min_height_m = infer_min_height(&el.tags, height_m, &id);
                let mut holes_per_outer = vec![Vec::new(); outer_rings.len()];
                for hole in inner_rings {
                    let (lat, lon) = hole[0];
                    match outer_rings.iter().position(|o| point_in_ring(lat, lon, o)) {
                        Some(i) => holes_per_outer[i].push(hole),
                        None => warn(&mut out, "inner ring outside every outer ring, dropped".into()),
                    }
                }
                let multi = outer_rings.len() > 1;
                for (i, (outer, holes)) in outer_rings.into_iter().zip(holes_per_outer).enumerate() {
                    out.footprints.push(GeoFootprint {
                        source_id: if multi { format!("{id}#{i}") } else { id.clone() },
                        outer_ring: outer,
                        holes,
                        height_m,
                        min_height_m,
                        raw_tags: el.tags.clone(),
                    });
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Queries the endpoint for buildings in `bbox` and parses the response.
pub fn fetch_buildings(
    bbox: &GeoBBox,
    endpoint: &str,
    transport: &dyn Transport,
    retry: &RetryPolicy,
    heights: &HeightConfig,
) -> Result<ParsedBuildings> {
    let query = build_overpass_query(bbox)?;
    let request = HttpRequest::post(endpoint, query.into_bytes())
        .header("Content-Type", "text/plain; charset=utf-8");
    let response = send_with_retry(transport, &request, retry)?;
    if !response.is_success() {
        return Err(Error::Network(format!(
            "{endpoint} returned HTTP {}",
            response.status
        )));
    }
    let text = std::str::from_utf8(&response.body)
        .map_err(|e| Error::MalformedResponse(format!("response is not UTF-8: {e}")))?;
    parse_buildings(text, heights)
}
