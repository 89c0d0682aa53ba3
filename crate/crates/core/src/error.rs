use std::path::PathBuf;

use thiserror::Error;

use crate::tiles::TileCoord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBBox(String),

    #[error("malformed Overpass response: {0}")]
    MalformedResponse(String),

    #[error("network error: {0}")]
    Network(String),

    #[error("latitude {lat} is outside the Web Mercator projection (|lat| <= {limit})")]
    OutOfProjection { lat: f64, limit: f64 },

    #[error("tile {tile} payload could not be decoded: {reason}")]
    TileDecode { tile: TileCoord, reason: String },

    #[error("footprint {0} does not intersect the image extent")]
    FootprintOutsideImage(String),

    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),

    #[error("image provider returned {status}: {message}")]
    Provider { status: u16, message: String },

    #[error("footprint {0} has zero area after projection")]
    DegenerateFootprint(String),

    #[error("occupancy grid is empty")]
    EmptyGrid,

    #[error("format error: {0}")]
    Format(String),

    #[error("resolution mismatch: {left} vs {right}")]
    ResolutionMismatch { left: usize, right: usize },

    #[error("channel {channel} has non-positive std {std}")]
    NonPositiveStd { channel: usize, std: f64 },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("lambda {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite state at step {0}")]
    NonFiniteState(usize),

    #[error("offline replay fixture missing: {}", .0.display())]
    MissingFixture(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
