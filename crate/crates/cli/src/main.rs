use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use geoforge::flow::{train_toy, ConditionVector, FlowConfig, SurrogateSpec, TrainConfig};
use geoforge::geo::{GeoBBox, HeightConfig, DEFAULT_OVERPASS_URL};
use geoforge::pipeline::{
    cmd_eval, cmd_eval_manifest, cmd_fetch, cmd_generate, cmd_priorize, cmd_refine, FetchOptions, Network,
    PipelineManifest, DEFAULT_ZOOM, MANIFEST_FILE,
};
use geoforge::tiles::{refine_image, GeoImage, RefineProvider, TileSource};
use geoforge::transport::LiveTransport;
use geoforge::voxel::{read_ssvx, synth_shape, write_ssvx, LodLevel, DEFAULT_RESOLUTION};

const DEFAULT_TILE_URL: &str = "https://tile.openstreetmap.org/{z}/{x}/{y}.png";
const DEFAULT_REFINE_URL: &str = "https://api.openai.com/v1/images/edits";

#[derive(Parser)]
#[command(name = "geoforge", version, about = "Coarse 3D building priors and toy flow generation from a bounding box")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download footprints and imagery for a bounding box.
    Fetch {
        /// minlat,minlon,maxlat,maxlon
        #[arg(long, allow_hyphen_values = true)]
        bbox: String,
        #[arg(long)]
        out: PathBuf,
        /// Replay from the fixture directory instead of the network.
        #[arg(long)]
        offline: bool,
        #[arg(long, env = "GEOFORGE_FIXTURES", default_value = "fixtures/replay")]
        fixtures: PathBuf,
        #[arg(long, env = "GEOFORGE_TILE_URL", default_value = DEFAULT_TILE_URL)]
        tile_url: String,
        #[arg(long, env = "GEOFORGE_TILE_KEY", hide_env_values = true)]
        tile_key: Option<String>,
        #[arg(long, env = "GEOFORGE_OVERPASS_URL", default_value = DEFAULT_OVERPASS_URL)]
        overpass_url: String,
        #[arg(long, default_value_t = DEFAULT_ZOOM)]
        zoom: u8,
    },
    /// Build LOD priors for every building in a manifest.
    Priorize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "all")]
        lod: LodArg,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: usize,
    },
    /// Write a corpus of synthetic building grids for training.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: u64,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy flow model on a directory of SSVX grids.
    TrainToy {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate geometry for every building with priors.
    Generate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 7.5)]
        cfg: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare two grids, or every generated grid in a manifest.
    Eval {
        #[arg(long, required_unless_present = "manifest", requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["pred", "gt"])]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = geoforge::metrics::DEFAULT_TAU)]
        tau: f64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enhance masked building images.
    Refine {
        #[arg(long, required_unless_present = "manifest")]
        image: Option<PathBuf>,
        #[arg(long, conflicts_with = "image")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "mock")]
        provider: ProviderArg,
        #[arg(long, default_value = DEFAULT_REFINE_URL)]
        endpoint: String,
        /// Output path for a single image; defaults to `<stem>.refined.png`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LodArg {
    #[value(name = "0")]
    Lod0,
    #[value(name = "1")]
    Lod1,
    #[value(name = "2")]
    Lod2,
    All,
}

impl LodArg {
    fn levels(self) -> Vec<LodLevel> {
        match self {
            LodArg::Lod0 => vec![LodLevel::Lod0],
            LodArg::Lod1 => vec![LodLevel::Lod1],
            LodArg::Lod2 => vec![LodLevel::Lod2],
            LodArg::All => LodLevel::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Mock,
    Remote,
}

fn provider(arg: ProviderArg, endpoint: &str) -> RefineProvider {
    match arg {
        ProviderArg::Mock => RefineProvider::Mock,
        ProviderArg::Remote => RefineProvider::remote(endpoint),
    }
}

fn report(manifest: &PipelineManifest) -> ExitCode {
    for f in &manifest.failures {
        eprintln!("failed {} ({:?}): {}", f.source_id, f.stage, f.message);
    }
    println!(
        "{} buildings, {} failures",
        manifest.buildings.len(),
        manifest.failures.len()
    );
    ExitCode::from(manifest.exit_code() as u8)
}

fn load_corpus(dir: &Path) -> anyhow::Result<Vec<(geoforge::voxel::VoxelGrid, ConditionVector)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ssvx"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .ssvx files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let grid = read_ssvx(p).with_context(|| p.display().to_string())?;
            let cond = ConditionVector::infer(&grid).with_context(|| p.display().to_string())?;
            Ok((grid, cond))
        })
        .collect()
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Fetch {
            bbox,
            out,
            offline,
            fixtures,
            tile_url,
            tile_key,
            overpass_url,
            zoom,
        } => {
            let bbox = GeoBBox::parse_cli(&bbox)?;
            let network = if offline {
                Network::Offline { root: fixtures }
            } else {
                let mut tile_source = TileSource::new(tile_url);
                tile_source.api_key = tile_key.filter(|k| !k.is_empty());
                Network::Live {
                    overpass_url,
                    tile_source,
                }
            };
            let manifest = cmd_fetch(&FetchOptions {
                bbox,
                out_dir: out.clone(),
                zoom,
                heights: HeightConfig::default(),
                network,
            })?;
            println!("wrote {}", out.join(MANIFEST_FILE).display());
            Ok(report(&manifest))
        }
        Command::Priorize {
            manifest,
            lod,
            resolution,
        } => Ok(report(&cmd_priorize(&manifest, &lod.levels(), resolution)?)),
        Command::SynthCorpus {
            out,
            count,
            resolution,
            seed,
        } => {
            std::fs::create_dir_all(&out)?;
            for i in 0..count {
                let grid = synth_shape(seed.wrapping_add(i), resolution);
                write_ssvx(&grid, &out.join(format!("shape_{i:05}.ssvx")))?;
            }
            println!("wrote {count} grids to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainToy {
            corpus,
            epochs,
            seed,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let n = corpus[0].0.n();
            let config = TrainConfig {
                epochs,
                seed,
                ..TrainConfig::default()
            };
            let model = train_toy(&corpus, SurrogateSpec::default_for(n), &config)?;
            model.save(&out)?;
            let history = &model.loss_history;
            println!(
                "trained on {} shapes: loss {:.4} -> {:.4}; wrote {}",
                corpus.len(),
                history.first().copied().unwrap_or(f64::NAN),
                history.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate {
            manifest,
            model,
            lambda,
            steps,
            cfg,
            seed,
        } => {
            let config = FlowConfig {
                steps,
                cfg_scale: cfg,
                lambda,
                seed,
            };
            Ok(report(&cmd_generate(&manifest, &model, &config)?))
        }
        Command::Eval {
            pred,
            gt,
            manifest,
            tau,
            out,
        } => {
            if let Some(manifest) = manifest {
                return Ok(report(&cmd_eval_manifest(&manifest, tau)?));
            }
            let (pred, gt) = (pred.expect("clap enforces"), gt.expect("clap enforces"));
            let json = cmd_eval(&pred, &gt, tau)?.to_json()?;
            println!("{json}");
            if let Some(out) = out {
                std::fs::write(out, json + "\n")?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Refine {
            image,
            manifest,
            provider: provider_arg,
            endpoint,
            out,
            prompt,
        } => {
            let provider = provider(provider_arg, &endpoint);
            let transport = LiveTransport::new(std::time::Duration::from_secs(180))?;
            if let Some(manifest) = manifest {
                return Ok(report(&cmd_refine(&manifest, &provider, prompt.as_deref(), &transport)?));
            }
            let image = image.expect("clap enforces");
            let out = out.unwrap_or_else(|| {
                let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                image.with_file_name(format!("{stem}.refined.png"))
            });
            let img = GeoImage::load(&image).with_context(|| format!("loading {}", image.display()))?;
            refine_image(&img, &provider, prompt.as_deref(), &transport)?.save(&out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
