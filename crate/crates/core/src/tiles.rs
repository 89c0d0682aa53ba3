//! Slippy-map tile math, satellite tile stitching, footprint masking and the
//! image refinement provider.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::{ImageFormat, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoBBox, GeoFootprint, MERCATOR_MAX_LAT};
use crate::geometry::{point_in_polygon, ring_bounds};
use crate::transport::{send_with_retry, HttpRequest, RetryPolicy, Transport};

pub const DEFAULT_TILE_SIZE: u32 = 256;
pub const MAX_ZOOM: u8 = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileCoord {
    pub zoom: u8,
    pub x: u32,
    pub y: u32,
}

impl TileCoord {
    pub fn new(zoom: u8, x: u32, y: u32) -> Option<Self> {
        let n = 1u64 << zoom;
        (zoom <= MAX_ZOOM && (x as u64) < n && (y as u64) < n).then_some(Self { zoom, x, y })
    }
}

impl fmt::Display for TileCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.zoom, self.x, self.y)
    }
}

/// Continuous tile-space coordinates `(x, y)` of a point at `zoom`.
pub fn project(lat: f64, lon: f64, zoom: u8) -> Result<(f64, f64)> {
    if lat.is_nan() || lat.abs() > MERCATOR_MAX_LAT {
        return Err(Error::OutOfProjection {
            lat,
            limit: MERCATOR_MAX_LAT,
        });
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(Error::InvalidArgument(format!("longitude {lon} outside [-180, 180]")));
    }
    if zoom > MAX_ZOOM {
        return Err(Error::InvalidArgument(format!("zoom {zoom} > {MAX_ZOOM}")));
    }
    let n = (1u64 << zoom) as f64;
    let phi = lat.to_radians();
    let x = (lon + 180.0) / 360.0 * n;
    let y = (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / std::f64::consts::PI) / 2.0 * n;
    Ok((x, y))
}

/// Inverse of [`project`].
pub fn unproject(x: f64, y: f64, zoom: u8) -> (f64, f64) {
    let n = (1u64 << zoom) as f64;
    let lon = x / n * 360.0 - 180.0;
    let lat = (std::f64::consts::PI * (1.0 - 2.0 * y / n)).sinh().atan().to_degrees();
    (lat, lon)
}

/// Tile containing `(lat, lon)` and the fractional offset inside it.
pub fn latlon_to_tile(lat: f64, lon: f64, zoom: u8) -> Result<(TileCoord, (f64, f64))> {
    let (xf, yf) = project(lat, lon, zoom)?;
    let max = ((1u64 << zoom) - 1) as f64;
    let tx = xf.floor().clamp(0.0, max);
    let ty = yf.floor().clamp(0.0, max);
    let tile = TileCoord {
        zoom,
        x: tx as u32,
        y: ty as u32,
    };
    Ok((tile, (xf - tx, yf - ty)))
}

/// Pixel-to-geo mapping of a stitched image.
///
/// `origin_lat`/`origin_lon` locate the top-left corner of pixel (0, 0).
/// The degree-per-pixel values are exact for x and a mean over the image
/// height for y; [`GeoTransform::pixel_center`] uses the exact projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub deg_per_px_x: f64,
    pub deg_per_px_y: f64,
    pub zoom: u8,
    #[serde(default = "default_tile_size")]
    pub tile_size: u32,
}

fn default_tile_size() -> u32 {
    DEFAULT_TILE_SIZE
}

impl GeoTransform {
    /// Global pixel coordinates of the image origin at this zoom.
    pub fn origin_px(&self) -> (f64, f64) {
        let (x, y) = project(self.origin_lat, self.origin_lon, self.zoom)
            .expect("origin is inside the projection");
        let s = self.tile_size as f64;
        ((x * s).round(), (y * s).round())
    }

    /// (lat, lon) of the centre of pixel `(col, row)`.
    pub fn pixel_center(&self, col: u32, row: u32) -> (f64, f64) {
        let (ox, oy) = self.origin_px();
        let s = self.tile_size as f64;
        unproject(
            (ox + col as f64 + 0.5) / s,
            (oy + row as f64 + 0.5) / s,
            self.zoom,
        )
    }

    /// Geographic extent of a `width`×`height` image.
    pub fn extent(&self, width: u32, height: u32) -> GeoBBoxLoose {
        let (ox, oy) = self.origin_px();
        let s = self.tile_size as f64;
        let (north, west) = unproject(ox / s, oy / s, self.zoom);
        let (south, east) = unproject((ox + width as f64) / s, (oy + height as f64) / s, self.zoom);
        GeoBBoxLoose {
            south,
            west,
            north,
            east,
        }
    }
}

/// Unvalidated extent, used for intersection tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoBBoxLoose {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoImage {
    pub pixels: RgbaImage,
    pub transform: GeoTransform,
}

impl GeoImage {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.pixels.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Writes `path` as PNG and the geo transform next to it as
    /// `<stem>.geo.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.transform)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pixels = image::open(path)?.to_rgba8();
        let transform = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        Ok(Self { pixels, transform })
    }
}

pub fn sidecar_path(png: &Path) -> std::path::PathBuf {
    let stem = png.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    png.with_file_name(format!("{stem}.geo.json"))
}

/// Zoom at which the longer side of the footprint spans at least `min_px`
/// pixels, capped at `max_zoom`.
pub fn choose_zoom(footprint: &GeoFootprint, min_px: f64, max_zoom: u8, tile_size: u32) -> Result<u8> {
    let (s, w, n, e) = ring_bounds(&footprint.outer_ring);
    for zoom in 0..=max_zoom {
        let (x0, y0) = project(n, w, zoom)?;
        let (x1, y1) = project(s, e, zoom)?;
        let side = (x1 - x0).abs().max((y1 - y0).abs()) * tile_size as f64;
        if side >= min_px {
            return Ok(zoom);
        }
    }
    Ok(max_zoom)
}

#[derive(Debug, Clone)]
pub struct TileSource {
    pub url_template: String,
    pub api_key: Option<String>,
    pub tile_size: u32,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl TileSource {
    pub fn new(url_template: impl Into<String>) -> Self {
        Self {
            url_template: url_template.into(),
            api_key: None,
            tile_size: DEFAULT_TILE_SIZE,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }

    /// Fills `{z}`, `{x}`, `{y}`; the key goes into `{key}` when the template
    /// has it, otherwise it is appended as an `access_token` query parameter.
    pub fn tile_url(&self, tile: TileCoord) -> String {
        let url = self
            .url_template
            .replace("{z}", &tile.zoom.to_string())
            .replace("{x}", &tile.x.to_string())
            .replace("{y}", &tile.y.to_string());
        match &self.api_key {
            Some(key) if url.contains("{key}") => url.replace("{key}", key),
            Some(key) => {
                let sep = if url.contains('?') { '&' } else { '?' };
                format!("{url}{sep}access_token={key}")
            }
            None => url,
        }
    }
}

/// Pixel crop of `bbox` at `zoom` in global pixel coordinates:
/// `(x0, y0, x1, y1)` with exclusive upper bounds.
pub fn bbox_pixel_bounds(bbox: &GeoBBox, zoom: u8, tile_size: u32) -> Result<(i64, i64, i64, i64)> {
    bbox.validate()?;
    let s = tile_size as f64;
    let (xa, ya) = project(bbox.max_lat, bbox.min_lon, zoom)?;
    let (xb, yb) = project(bbox.min_lat, bbox.max_lon, zoom)?;
    // Snap values within 1e-6 px of an integer so exact tile bounds do not
    // spill into the neighbouring tile.
    let lo = |v: f64| (v + 1e-6).floor() as i64;
    let hi = |v: f64| (v - 1e-6).ceil() as i64;
    let (x0, y0) = (lo(xa * s), lo(ya * s));
    let (x1, y1) = (hi(xb * s).max(x0 + 1), hi(yb * s).max(y0 + 1));
    Ok((x0, y0, x1, y1))
}

/// Fetches every tile covering `bbox`, stitches them and crops to the bbox.
pub fn fetch_and_stitch(
    bbox: &GeoBBox,
    zoom: u8,
    source: &TileSource,
    transport: &dyn Transport,
) -> Result<GeoImage> {
    for p in ["{z}", "{x}", "{y}"] {
        if !source.url_template.contains(p) {
            return Err(Error::InvalidArgument(format!(
                "tile url template {:?} lacks {p}",
                source.url_template
            )));
        }
    }
    let ts = source.tile_size as i64;
    let (x0, y0, x1, y1) = bbox_pixel_bounds(bbox, zoom, source.tile_size)?;
    let (tx0, ty0) = (x0.div_euclid(ts), y0.div_euclid(ts));
    let (tx1, ty1) = ((x1 - 1).div_euclid(ts), (y1 - 1).div_euclid(ts));
    let tiles: Vec<TileCoord> = (ty0..=ty1)
        .flat_map(|ty| (tx0..=tx1).map(move |tx| (tx, ty)))
        .map(|(tx, ty)| TileCoord {
            zoom,
            x: tx as u32,
            y: ty as u32,
        })
        .collect();

    let fetched = fetch_tiles(&tiles, source, transport)?;

    let (width, height) = ((x1 - x0) as u32, (y1 - y0) as u32);
    let mut pixels = RgbaImage::new(width, height);
    for (tile, img) in tiles.iter().zip(&fetched) {
        let (gx, gy) = (tile.x as i64 * ts, tile.y as i64 * ts);
        for (px, py, p) in img.enumerate_pixels() {
            let (ox, oy) = (gx + px as i64 - x0, gy + py as i64 - y0);
            if (0..width as i64).contains(&ox) && (0..height as i64).contains(&oy) {
                pixels.put_pixel(ox as u32, oy as u32, *p);
            }
        }
    }

    let s = source.tile_size as f64;
    let (origin_lat, origin_lon) = unproject(x0 as f64 / s, y0 as f64 / s, zoom);
    let (bottom_lat, _) = unproject(x0 as f64 / s, y1 as f64 / s, zoom);
    let transform = GeoTransform {
        origin_lat,
        origin_lon,
        deg_per_px_x: 360.0 / (s * (1u64 << zoom) as f64),
        deg_per_px_y: (origin_lat - bottom_lat) / height as f64,
        zoom,
        tile_size: source.tile_size,
    };
    Ok(GeoImage { pixels, transform })
}

/// Downloads tiles with at most `max_in_flight` concurrent requests. The
/// result is ordered like `tiles` regardless of completion order.
fn fetch_tiles(tiles: &[TileCoord], source: &TileSource, transport: &dyn Transport) -> Result<Vec<RgbaImage>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RgbaImage>>>> = tiles.iter().map(|_| Mutex::new(None)).collect();
    let workers = source.max_in_flight.clamp(1, tiles.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tiles.len() {
                    break;
                }
                let result = fetch_tile(tiles[i], source, transport);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

fn fetch_tile(tile: TileCoord, source: &TileSource, transport: &dyn Transport) -> Result<RgbaImage> {
    let url = source.tile_url(tile);
    let response = send_with_retry(transport, &HttpRequest::get(&url), &source.retry)
        .map_err(|e| Error::Network(format!("tile {tile}: {e}")))?;
    if !response.is_success() {
        return Err(Error::Network(format!("tile {tile}: HTTP {}", response.status)));
    }
    let img = image::load_from_memory(&response.body)
        .map_err(|e| Error::TileDecode {
            tile,
            reason: e.to_string(),
        })?
        .to_rgba8();
    if img.width() != source.tile_size || img.height() != source.tile_size {
        return Err(Error::TileDecode {
            tile,
            reason: format!(
                "expected {0}x{0}, got {1}x{2}",
                source.tile_size,
                img.width(),
                img.height()
            ),
        });
    }
    Ok(img)
}

/// Keeps pixels whose centre is inside the footprint (even-odd, holes
/// excluded) and makes every other pixel transparent.
pub fn mask_with_footprint(image: &GeoImage, footprint: &GeoFootprint) -> Result<GeoImage> {
    let ext = image.transform.extent(image.width(), image.height());
    let (s, w, n, e) = ring_bounds(&footprint.outer_ring);
    if s > ext.north || n < ext.south || w > ext.east || e < ext.west {
        return Err(Error::FootprintOutsideImage(footprint.source_id.clone()));
    }
    let mut out = image.clone();
    for row in 0..image.height() {
        for col in 0..image.width() {
            let (lat, lon) = image.transform.pixel_center(col, row);
            if !point_in_polygon(lat, lon, &footprint.outer_ring, &footprint.holes) {
                out.pixels.get_pixel_mut(col, row)[3] = 0;
            }
        }
    }
    Ok(out)
}

/// Sub-image `[col0, col0 + width) × [row0, row0 + height)` with its
/// transform moved to the new corner.
pub fn crop(image: &GeoImage, col0: u32, row0: u32, width: u32, height: u32) -> Result<GeoImage> {
    if width == 0 || height == 0 || col0 + width > image.width() || row0 + height > image.height() {
        return Err(Error::InvalidArgument(format!(
            "crop {width}x{height}+{col0}+{row0} outside {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let t = image.transform;
    let (ox, oy) = t.origin_px();
    let s = t.tile_size as f64;
    let (origin_lat, origin_lon) = unproject((ox + col0 as f64) / s, (oy + row0 as f64) / s, t.zoom);
    let (bottom_lat, _) = unproject((ox + col0 as f64) / s, (oy + (row0 + height) as f64) / s, t.zoom);
    Ok(GeoImage {
        pixels: image::imageops::crop_imm(&image.pixels, col0, row0, width, height).to_image(),
        transform: GeoTransform {
            origin_lat,
            origin_lon,
            deg_per_px_y: (origin_lat - bottom_lat) / height as f64,
            ..t
        },
    })
}

/// Pixel window of `image` covering the footprint's bounding box, clipped to
/// the image: `(col0, row0, width, height)`.
pub fn footprint_window(image: &GeoImage, footprint: &GeoFootprint) -> Result<(u32, u32, u32, u32)> {
    let t = image.transform;
    let (s, w, n, e) = ring_bounds(&footprint.outer_ring);
    let ts = t.tile_size as f64;
    let (ox, oy) = t.origin_px();
    let (xa, ya) = project(n, w, t.zoom)?;
    let (xb, yb) = project(s, e, t.zoom)?;
    let c0 = ((xa * ts - ox).floor() as i64).max(0);
    let r0 = ((ya * ts - oy).floor() as i64).max(0);
    let c1 = ((xb * ts - ox).ceil() as i64).min(image.width() as i64);
    let r1 = ((yb * ts - oy).ceil() as i64).min(image.height() as i64);
    if c1 <= c0 || r1 <= r0 {
        return Err(Error::FootprintOutsideImage(footprint.source_id.clone()));
    }
    Ok((c0 as u32, r0 as u32, (c1 - c0) as u32, (r1 - r0) as u32))
}

/// Crop around the footprint with everything outside it transparent.
pub fn masked_crop(image: &GeoImage, footprint: &GeoFootprint) -> Result<GeoImage> {
    let (c, r, w, h) = footprint_window(image, footprint)?;
    mask_with_footprint(&crop(image, c, r, w, h)?, footprint)
}

pub const REFINE_KEY_ENV: &str = "GEOFORGE_REFINE_KEY";

pub const DEFAULT_REFINE_PROMPT: &str = "\
Input: a top-down satellite crop of a single building. Pixels outside the \
building outline are transparent. The crop may be blurry, low resolution, \
compressed or partially occluded by trees and shadows.

Desired output: the same building seen from directly above as a sharp, \
clean, evenly lit orthographic image at the same size and framing.

Operations: sharpen edges and roof structure, remove compression noise and \
haze, reduce cast shadows, restore plausible roof materials and colours.

Do not: change the building outline, move or resize the building, add new \
structures, add text or watermarks, or fill the transparent background.";

#[derive(Debug, Clone)]
pub enum RefineProvider {
    Mock,
    Remote {
        endpoint: String,
        model: String,
        api_key_env: String,
    },
}

impl RefineProvider {
    pub fn remote(endpoint: impl Into<String>) -> Self {
        Self::Remote {
            endpoint: endpoint.into(),
            model: "gpt-image-1".into(),
            api_key_env: REFINE_KEY_ENV.into(),
        }
    }
}

#[derive(Serialize)]
struct RefineRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    image: String,
    response_format: &'a str,
}

#[derive(Deserialize)]
struct RefineResponse {
    data: Vec<RefineDatum>,
}

#[derive(Deserialize)]
struct RefineDatum {
    b64_json: String,
}

/// Enhances a masked building image. The mock provider returns its input
/// unchanged; the remote provider posts a JSON body
/// `{model, prompt, image: <base64 PNG>}` and expects `{data:[{b64_json}]}`.
pub fn refine_image(
    image: &GeoImage,
    provider: &RefineProvider,
    prompt: Option<&str>,
    transport: &dyn Transport,
) -> Result<GeoImage> {
    let (endpoint, model, key_env) = match provider {
        RefineProvider::Mock => return Ok(image.clone()),
        RefineProvider::Remote {
            endpoint,
            model,
            api_key_env,
        } => (endpoint, model, api_key_env),
    };
    let key = std::env::var(key_env)
        .ok()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::MissingCredentials(key_env.clone()))?;
    let body = serde_json::to_vec(&RefineRequest {
        model,
        prompt: prompt.unwrap_or(DEFAULT_REFINE_PROMPT),
        image: BASE64.encode(image.to_png_bytes()?),
        response_format: "b64_json",
    })?;
    let request = HttpRequest::post(endpoint.as_str(), body)
        .header("Content-Type", "application/json")
        .header("Authorization", format!("Bearer {key}"));
    let response = send_with_retry(transport, &request, &RetryPolicy::default())?;
    if !response.is_success() {
        return Err(Error::Provider {
            status: response.status,
            message: String::from_utf8_lossy(&response.body).into_owned(),
        });
    }
    let parsed: RefineResponse = serde_json::from_slice(&response.body).map_err(|e| Error::Provider {
        status: response.status,
        message: format!("unexpected response body: {e}"),
    })?;
    let first = parsed.data.first().ok_or_else(|| Error::Provider {
        status: response.status,
        message: "response contained no images".into(),
    })?;
    let bytes = BASE64.decode(&first.b64_json).map_err(|e| Error::Provider {
        status: response.status,
        message: format!("invalid base64 image: {e}"),
    })?;
    let pixels = image::load_from_memory(&bytes)?.to_rgba8();
    Ok(GeoImage {
        pixels,
        transform: image.transform,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{HttpResponse, ScriptedTransport};
    use image::Rgba;

    #[test]
    fn golden_tiles() {
        let (t, off) = latlon_to_tile(0.0, 0.0, 1).unwrap();
        assert_eq!((t.x, t.y), (1, 1));
        assert_eq!(off, (0.0, 0.0));
        let (t, _) = latlon_to_tile(0.0, -180.0, 0).unwrap();
        assert_eq!((t.x, t.y, t.zoom), (0, 0, 0));
        assert!(matches!(latlon_to_tile(86.0, 0.0, 3), Err(Error::OutOfProjection { .. })));
        assert!(matches!(latlon_to_tile(-86.0, 0.0, 3), Err(Error::OutOfProjection { .. })));
    }

    #[test]
    fn antimeridian_stays_in_range() {
        let (t, off) = latlon_to_tile(10.0, 180.0, 4).unwrap();
        assert_eq!(t.x, 15);
        assert!((off.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tile_coord_bounds() {
        assert!(TileCoord::new(0, 0, 0).is_some());
        assert!(TileCoord::new(0, 1, 0).is_none());
        assert!(TileCoord::new(3, 7, 7).is_some());
        assert!(TileCoord::new(3, 8, 0).is_none());
        assert_eq!(TileCoord::new(3, 1, 2).unwrap().to_string(), "3/1/2");
    }

    #[test]
    fn url_template_and_key() {
        let mut s = TileSource::new("https://t.example/{z}/{x}/{y}.png");
        let t = TileCoord::new(5, 3, 4).unwrap();
        assert_eq!(s.tile_url(t), "https://t.example/5/3/4.png");
        s.api_key = Some("k".into());
        assert_eq!(s.tile_url(t), "https://t.example/5/3/4.png?access_token=k");
        s.url_template = "https://t.example/{z}/{x}/{y}?key={key}".into();
        assert_eq!(s.tile_url(t), "https://t.example/5/3/4?key=k");
    }

    fn blank(width: u32, height: u32) -> GeoImage {
        GeoImage {
            pixels: RgbaImage::from_pixel(width, height, Rgba([10, 20, 30, 255])),
            transform: GeoTransform {
                origin_lat: unproject(0.0, 100.0 / 256.0, 10).0,
                origin_lon: unproject(600.0 / 256.0, 0.0, 10).1,
                deg_per_px_x: 0.0,
                deg_per_px_y: 0.0,
                zoom: 10,
                tile_size: 256,
            },
        }
    }

    #[test]
    fn mock_refine_is_identity() {
        let img = blank(8, 8);
        let t = ScriptedTransport::default();
        let out = refine_image(&img, &RefineProvider::Mock, None, &t).unwrap();
        assert_eq!(out, img);
        assert_eq!(t.call_count(), 0);
    }

    #[test]
    fn remote_refine_roundtrip() {
        let img = blank(4, 4);
        let fixture = RgbaImage::from_pixel(4, 4, Rgba([200, 1, 2, 255]));
        let mut png = std::io::Cursor::new(Vec::new());
        fixture.write_to(&mut png, ImageFormat::Png).unwrap();
        let body = format!(r#"{{"data":[{{"b64_json":"{}"}}]}}"#, BASE64.encode(png.into_inner()));
        let t = ScriptedTransport::new(vec![HttpResponse::ok(body.into_bytes())]);
        let provider = RefineProvider::Remote {
            endpoint: "https://img.example/v1/edits".into(),
            model: "m".into(),
            api_key_env: "GEOFORGE_TEST_REFINE_KEY_PRESENT".into(),
        };
        std::env::set_var("GEOFORGE_TEST_REFINE_KEY_PRESENT", "secret");
        let out = refine_image(&img, &provider, Some("make it crisp"), &t).unwrap();
        assert_eq!(out.pixels, fixture);
        assert_eq!(out.transform, img.transform);
        let req = &t.requests()[0];
        assert!(req.headers.contains(&("Authorization".into(), "Bearer secret".into())));
        let sent: serde_json::Value = serde_json::from_slice(&req.body).unwrap();
        assert_eq!(sent["prompt"], "make it crisp");
    }

    #[test]
    fn remote_refine_requires_key() {
        let provider = RefineProvider::Remote {
            endpoint: "https://img.example".into(),
            model: "m".into(),
            api_key_env: "GEOFORGE_TEST_REFINE_KEY_ABSENT".into(),
        };
        let t = ScriptedTransport::default();
        let err = refine_image(&blank(2, 2), &provider, None, &t).unwrap_err();
        assert!(matches!(err, Error::MissingCredentials(_)));
        assert_eq!(t.call_count(), 0);
    }

    #[test]
    fn remote_refine_surfaces_upstream_errors() {
        let provider = RefineProvider::Remote {
            endpoint: "https://img.example".into(),
            model: "m".into(),
            api_key_env: "GEOFORGE_TEST_REFINE_KEY_ERR".into(),
        };
        std::env::set_var("GEOFORGE_TEST_REFINE_KEY_ERR", "x");
        let t = ScriptedTransport::new(vec![HttpResponse {
            status: 400,
            body: b"bad prompt".to_vec(),
        }]);
        match refine_image(&blank(2, 2), &provider, None, &t).unwrap_err() {
            Error::Provider { status, message } => {
                assert_eq!(status, 400);
                assert_eq!(message, "bad prompt");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn default_prompt_has_four_parts() {
        for head in ["Input:", "Desired output:", "Operations:", "Do not:"] {
            assert!(DEFAULT_REFINE_PROMPT.contains(head));
        }
    }
}
