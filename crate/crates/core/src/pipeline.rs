//! Manifest-driven pipeline: fetch footprints and imagery for a bounding
//! box, build per-building priors, generate geometry and evaluate it.
//!
//! Every stage reads and rewrites `manifest.json` in the output directory.
//! Paths in the manifest are relative to that directory. Per-building
//! failures are recorded and do not abort a stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ConditionVector, FlowConfig, ToyModel};
use crate::geo::{fetch_buildings, footprints_to_json, GeoBBox, GeoFootprint, HeightConfig};
use crate::latent::{normalize_latent, write_sslt};
use crate::metrics::{eval_report, EvalReport};
use crate::tiles::{
    bbox_pixel_bounds, fetch_and_stitch, masked_crop, refine_image, GeoImage, RefineProvider, TileCoord,
    TileSource,
};
use crate::transport::{DirReplayTransport, LiveTransport, RetryPolicy, Transport};
use crate::voxel::{lod_prior, rasterize_footprint, read_ssvx, write_ssvx, LodLevel};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = concat!("geoforge ", env!("CARGO_PKG_VERSION"));
pub const DEFAULT_ZOOM: u8 = 18;
/// Replay-fixture layout relative to the fixture root.
pub const OFFLINE_OVERPASS: &str = "overpass.json";
pub const OFFLINE_TILES: &str = "tiles/{z}/{x}/{y}.png";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Fetch,
    Refine,
    Priorize,
    Generate,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub source_id: String,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildingRecord {
    pub source_id: String,
    pub footprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_image: Option<String>,
    /// Full-resolution extrusion of the footprint, the evaluation reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default)]
    pub priors: BTreeMap<LodLevel, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_from: Option<LodLevel>,
    #[serde(default)]
    pub latents: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchConfig {
    pub offline: bool,
    pub overpass_url: String,
    pub tile_url: String,
    pub zoom: u8,
    pub tile_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub lods: Vec<LodLevel>,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub model: String,
    pub flow: FlowConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fetch: Option<FetchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priorize: Option<PriorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub tool_version: String,
    pub created_at: String,
    pub updated_at: String,
    pub bbox: GeoBBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub config: ManifestConfig,
    pub buildings: Vec<BuildingRecord>,
    #[serde(default)]
    pub failures: Vec<Failure>,
}

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

impl PipelineManifest {
    pub fn new(bbox: GeoBBox) -> Self {
        let t = now();
        Self {
            tool_version: TOOL_VERSION.into(),
            created_at: t.clone(),
            updated_at: t,
            bbox,
            image: None,
            config: ManifestConfig::default(),
            buildings: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFixture(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// 0 when nothing failed, 1 when some buildings failed.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }

    fn begin_stage(&mut self, stage: Stage) {
        self.failures.retain(|f| f.stage != stage);
        self.updated_at = now();
        self.tool_version = TOOL_VERSION.into();
    }

    fn fail(&mut self, source_id: &str, stage: Stage, err: &Error) {
        log::warn!("{source_id}: {stage:?} failed: {err}");
        self.failures.push(Failure {
            source_id: source_id.into(),
            stage,
            message: err.to_string(),
        });
    }
}

/// Directory name for a building id: `way/1001` becomes `way_1001`.
pub fn building_dir_name(source_id: &str) -> String {
    source_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub enum Network {
    Live {
        overpass_url: String,
        tile_source: TileSource,
    },
    /// Replay from `<root>/overpass.json` and `<root>/tiles/{z}/{x}/{y}.png`.
    Offline { root: PathBuf },
}

pub struct FetchOptions {
    pub bbox: GeoBBox,
    pub out_dir: PathBuf,
    pub zoom: u8,
    pub heights: HeightConfig,
    pub network: Network,
}

/// Tiles covering `bbox` at `zoom`, in row-major order.
pub fn covering_tiles(bbox: &GeoBBox, zoom: u8, tile_size: u32) -> Result<Vec<TileCoord>> {
    let ts = tile_size as i64;
    let (x0, y0, x1, y1) = bbox_pixel_bounds(bbox, zoom, tile_size)?;
    let mut out = Vec::new();
    for ty in y0.div_euclid(ts)..=(y1 - 1).div_euclid(ts) {
        for tx in x0.div_euclid(ts)..=(x1 - 1).div_euclid(ts) {
            out.push(TileCoord {
                zoom,
                x: tx as u32,
                y: ty as u32,
            });
        }
    }
    Ok(out)
}

fn check_offline_fixtures(root: &Path, bbox: &GeoBBox, zoom: u8, source: &TileSource) -> Result<()> {
    let transport = DirReplayTransport::new(root);
    let mut needed = vec![transport.resolve(OFFLINE_OVERPASS)];
    for tile in covering_tiles(bbox, zoom, source.tile_size)? {
        needed.push(transport.resolve(&source.tile_url(tile)));
    }
    match needed.into_iter().find(|p| !p.is_file()) {
        Some(missing) => Err(Error::MissingFixture(missing)),
        None => Ok(()),
    }
}

/// Fetches footprints and imagery, writes `footprints.json`, the stitched
/// image and one masked crop per building.
pub fn cmd_fetch(options: &FetchOptions) -> Result<PipelineManifest> {
    options.bbox.validate()?;
    match &options.network {
        Network::Live {
            overpass_url,
            tile_source,
        } => {
            let transport = LiveTransport::new(std::time::Duration::from_secs(90))?;
            fetch_with(options, overpass_url, tile_source, &transport, false)
        }
        Network::Offline { root } => {
            let mut source = TileSource::new(OFFLINE_TILES);
            source.retry = RetryPolicy::no_delay();
            check_offline_fixtures(root, &options.bbox, options.zoom, &source)?;
            let transport = DirReplayTransport::new(root);
            fetch_with(options, OFFLINE_OVERPASS, &source, &transport, true)
        }
    }
}

/// [`cmd_fetch`] over an explicit transport.
pub fn fetch_with(
    options: &FetchOptions,
    overpass_url: &str,
    tile_source: &TileSource,
    transport: &dyn Transport,
    offline: bool,
) -> Result<PipelineManifest> {
    let out = &options.out_dir;
    std::fs::create_dir_all(out)?;
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = match PipelineManifest::load(&manifest_path) {
        Ok(m) if m.bbox == options.bbox => m,
        _ => PipelineManifest::new(options.bbox),
    };
    manifest.begin_stage(Stage::Fetch);
    manifest.config.fetch = Some(FetchConfig {
        offline,
        overpass_url: overpass_url.into(),
        tile_url: tile_source.url_template.clone(),
        zoom: options.zoom,
        tile_size: tile_source.tile_size,
    });

    let parsed = fetch_buildings(&options.bbox, overpass_url, transport, &tile_source.retry, &options.heights)?;
    for w in &parsed.warnings {
        log::warn!("{}: {}", w.element, w.message);
    }
    std::fs::write(out.join("footprints.json"), footprints_to_json(&parsed.footprints)?)?;

    let image = fetch_and_stitch(&options.bbox, options.zoom, tile_source, transport)?;
    image.save(&out.join("image.png"))?;
    manifest.image = Some("image.png".into());

    let results: Vec<(BuildingRecord, Option<Error>)> = parsed
        .footprints
        .par_iter()
        .map(|fp| fetch_building(out, fp, &image))
        .collect();
    manifest.buildings.clear();
    for (record, err) in results {
        if let Some(err) = err {
            manifest.fail(&record.source_id, Stage::Fetch, &err);
        }
        manifest.buildings.push(record);
    }
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

fn fetch_building(out: &Path, fp: &GeoFootprint, image: &GeoImage) -> (BuildingRecord, Option<Error>) {
    let dir_name = building_dir_name(&fp.source_id);
    let mut record = BuildingRecord {
        source_id: fp.source_id.clone(),
        footprint: format!("buildings/{dir_name}/footprint.json"),
        ..BuildingRecord::default()
    };
    let result = (|| -> Result<()> {
        std::fs::create_dir_all(out.join("buildings").join(&dir_name))?;
        std::fs::write(out.join(&record.footprint), serde_json::to_string_pretty(fp)?)?;
        let masked = format!("buildings/{dir_name}/masked.png");
        masked_crop(image, fp)?.save(&out.join(&masked))?;
        record.masked_image = Some(masked);
        Ok(())
    })();
    (record, result.err())
}

fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Rasterizes every footprint at resolution `n` and writes one SSVX prior
/// per requested LOD plus the full-resolution reference extrusion.
pub fn cmd_priorize(manifest_path: &Path, lods: &[LodLevel], n: usize) -> Result<PipelineManifest> {
    if n < 8 {
        return Err(Error::InvalidArgument(format!("resolution {n} < 8")));
    }
    if lods.is_empty() {
        return Err(Error::InvalidArgument("no LOD requested".into()));
    }
    let dir = manifest_dir(manifest_path);
    let mut manifest = PipelineManifest::load(manifest_path)?;
    manifest.begin_stage(Stage::Priorize);
    manifest.config.priorize = Some(PriorConfig {
        lods: lods.to_vec(),
        resolution: n,
    });
    let results: Vec<Result<BuildingRecord>> = manifest
        .buildings
        .par_iter()
        .map(|b| priorize_building(&dir, b, lods, n))
        .collect();
    for (i, result) in results.into_iter().enumerate() {
        match result {
            Ok(record) => manifest.buildings[i] = record,
            Err(err) => {
                let id = manifest.buildings[i].source_id.clone();
                manifest.fail(&id, Stage::Priorize, &err);
            }
        }
    }
    manifest.save(manifest_path)?;
    Ok(manifest)
}

fn priorize_building(dir: &Path, record: &BuildingRecord, lods: &[LodLevel], n: usize) -> Result<BuildingRecord> {
    let fp: GeoFootprint = serde_json::from_str(&std::fs::read_to_string(dir.join(&record.footprint))?)?;
    fp.validate()?;
    let reference = rasterize_footprint(&fp, n)?;
    if reference.is_empty() {
        return Err(Error::DegenerateFootprint(format!(
            "{} covers no voxel centre at resolution {n}",
            fp.source_id
        )));
    }
    let base = format!("buildings/{}", building_dir_name(&record.source_id));
    let mut out = record.clone();
    let ref_path = format!("{base}/reference.ssvx");
    write_ssvx(&reference, &dir.join(&ref_path))?;
    out.reference = Some(ref_path);
    out.priors.clear();
    for &lod in lods {
        let path = format!("{base}/prior_{lod}.ssvx");
        write_ssvx(&lod_prior(&reference, lod)?, &dir.join(&path))?;
        out.priors.insert(lod, path);
    }
    Ok(out)
}

/// Runs the flow model from each building's most detailed prior and writes
/// the generated grid and the start/end latents.
pub fn cmd_generate(manifest_path: &Path, model_path: &Path, config: &FlowConfig) -> Result<PipelineManifest> {
    config.validate()?;
    let model = ToyModel::load(model_path)?;
    let dir = manifest_dir(manifest_path);
    let mut manifest = PipelineManifest::load(manifest_path)?;
    manifest.begin_stage(Stage::Generate);
    manifest.config.generate = Some(GenerateConfig {
        model: model_path.to_string_lossy().into_owned(),
        flow: *config,
    });
    let results: Vec<Option<Result<BuildingRecord>>> = manifest
        .buildings
        .par_iter()
        .map(|b| {
            let lod = b.priors.keys().next_back().copied()?;
            Some(generate_building(&dir, b, lod, &model, config))
        })
        .collect();
    for (i, result) in results.into_iter().enumerate() {
        match result {
            Some(Ok(record)) => manifest.buildings[i] = record,
            Some(Err(err)) => {
                let id = manifest.buildings[i].source_id.clone();
                manifest.fail(&id, Stage::Generate, &err);
            }
            None => {}
        }
    }
    manifest.save(manifest_path)?;
    Ok(manifest)
}

fn generate_building(
    dir: &Path,
    record: &BuildingRecord,
    lod: LodLevel,
    model: &ToyModel,
    config: &FlowConfig,
) -> Result<BuildingRecord> {
    let prior = read_ssvx(&dir.join(&record.priors[&lod]))?;
    if prior.n() != model.surrogate.n {
        return Err(Error::ResolutionMismatch {
            left: prior.n(),
            right: model.surrogate.n,
        });
    }
    // the condition stands in for the image: read it off the reference
    let cond_source = match &record.reference {
        Some(path) => read_ssvx(&dir.join(path))?,
        None => prior.clone(),
    };
    let cond = ConditionVector::infer(&cond_source)?;
    let surrogate = model.surrogate.build()?;
    let start = normalize_latent(&surrogate.encode(&prior)?, &model.stats)?;
    let generated = model.generate(Some(&prior), Some(&cond), config)?;

    let base = format!("buildings/{}", building_dir_name(&record.source_id));
    let mut out = record.clone();
    let prior_latent = format!("{base}/latent_{lod}.sslt");
    write_sslt(&start, &dir.join(&prior_latent))?;
    let generated_latent = format!("{base}/latent_generated.sslt");
    write_sslt(&surrogate.encode(&generated)?, &dir.join(&generated_latent))?;
    out.latents = BTreeMap::from([
        (lod.as_str().to_string(), prior_latent),
        ("generated".to_string(), generated_latent),
    ]);
    let path = format!("{base}/generated.ssvx");
    write_ssvx(&generated, &dir.join(&path))?;
    out.generated = Some(path);
    out.generated_from = Some(lod);
    Ok(out)
}

/// Sends every masked crop through the refinement provider and writes
/// `refined.png` next to it.
pub fn cmd_refine(
    manifest_path: &Path,
    provider: &RefineProvider,
    prompt: Option<&str>,
    transport: &dyn Transport,
) -> Result<PipelineManifest> {
    let dir = manifest_dir(manifest_path);
    let mut manifest = PipelineManifest::load(manifest_path)?;
    manifest.begin_stage(Stage::Refine);
    for i in 0..manifest.buildings.len() {
        let Some(masked) = manifest.buildings[i].masked_image.clone() else {
            continue;
        };
        let path = format!("buildings/{}/refined.png", building_dir_name(&manifest.buildings[i].source_id));
        let result = GeoImage::load(&dir.join(&masked))
            .and_then(|img| refine_image(&img, provider, prompt, transport))
            .and_then(|img| img.save(&dir.join(&path)));
        match result {
            Ok(()) => manifest.buildings[i].refined_image = Some(path),
            // credentials are missing for every building alike
            Err(err @ Error::MissingCredentials(_)) => return Err(err),
            Err(err) => {
                let id = manifest.buildings[i].source_id.clone();
                manifest.fail(&id, Stage::Refine, &err);
            }
        }
    }
    manifest.save(manifest_path)?;
    Ok(manifest)
}

/// Compares two SSVX files.
pub fn cmd_eval(pred: &Path, gt: &Path, tau: f64) -> Result<EvalReport> {
    eval_report(&read_ssvx(pred)?, &read_ssvx(gt)?, tau)
}

/// Evaluates every generated grid against its reference and writes
/// `eval.json` next to it.
pub fn cmd_eval_manifest(manifest_path: &Path, tau: f64) -> Result<PipelineManifest> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let dir = manifest_dir(manifest_path);
    let mut manifest = PipelineManifest::load(manifest_path)?;
    manifest.begin_stage(Stage::Eval);
    manifest.config.tau = Some(tau);
    let results: Vec<Option<Result<String>>> = manifest
        .buildings
        .par_iter()
        .map(|b| {
            let (generated, reference) = (b.generated.as_ref()?, b.reference.as_ref()?);
            Some((|| {
                let report = cmd_eval(&dir.join(generated), &dir.join(reference), tau)?;
                let path = format!("buildings/{}/eval.json", building_dir_name(&b.source_id));
                std::fs::write(dir.join(&path), report.to_json()? + "\n")?;
                Ok(path)
            })())
        })
        .collect();
    for (i, result) in results.into_iter().enumerate() {
        match result {
            Some(Ok(path)) => manifest.buildings[i].eval_report = Some(path),
            Some(Err(err)) => {
                let id = manifest.buildings[i].source_id.clone();
                manifest.fail(&id, Stage::Eval, &err);
            }
            None => {}
        }
    }
    manifest.save(manifest_path)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_names_are_flat() {
        assert_eq!(building_dir_name("way/1001"), "way_1001");
        assert_eq!(building_dir_name("relation/2001#1"), "relation_2001_1");
    }

    #[test]
    fn exit_code_reflects_failures() {
        let mut m = PipelineManifest::new(GeoBBox::new(0.0, 0.001, 0.0, 0.001).unwrap());
        assert_eq!(m.exit_code(), 0);
        m.fail("way/1", Stage::Priorize, &Error::DegenerateFootprint("way/1".into()));
        assert_eq!(m.exit_code(), 1);
        m.begin_stage(Stage::Priorize);
        assert_eq!(m.exit_code(), 0);
    }

    #[test]
    fn manifest_json_round_trip() {
        let mut m = PipelineManifest::new(GeoBBox::new(47.0, 47.001, 8.0, 8.001).unwrap());
        m.buildings.push(BuildingRecord {
            source_id: "way/1".into(),
            footprint: "buildings/way_1/footprint.json".into(),
            priors: BTreeMap::from([(LodLevel::Lod0, "p0.ssvx".into())]),
            ..BuildingRecord::default()
        });
        let text = m.to_json().unwrap();
        assert_eq!(PipelineManifest::from_json(&text).unwrap().to_json().unwrap(), text);
    }
}
