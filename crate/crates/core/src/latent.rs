//! Latent grids: the deterministic surrogate encoder/decoder, channel-wise
//! normalization, cosine prior/noise interpolation and the training-time
//! samplers for the interpolation weight and the prior type.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{lod_prior, LodLevel, VoxelGrid};

pub const DEFAULT_LATENT_RES: usize = 16;
pub const DEFAULT_CHANNELS: usize = 8;
/// Output scale of the surrogate encoder.
pub const SURROGATE_SCALE: f64 = 0.2;
pub const SURROGATE_SEED: u64 = 0x5353_5641_4531;
/// Standard deviations below this are clamped by [`compute_stats`].
pub const MIN_STD: f64 = 1e-6;

/// `d`×`d`×`d` spatial positions with `c` channels each, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    d: usize,
    c: usize,
    values: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(d: usize, c: usize) -> Self {
        Self {
            d,
            c,
            values: vec![0.0; d * d * d * c],
        }
    }

    pub fn from_values(d: usize, c: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != d * d * d * c {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {d}^3 x {c} latent",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent values must be finite".into()));
        }
        Ok(Self { d, c, values })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn positions(&self) -> usize {
        self.d * self.d * self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Channel vector at spatial index `x + d*y + d*d*z`.
    pub fn at(&self, position: usize) -> &[f64] {
        &self.values[position * self.c..(position + 1) * self.c]
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.d == other.d && self.c == other.c
    }

    pub fn check_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}^3x{} vs {}^3x{}",
                self.d, self.c, other.d, other.c
            )))
        }
    }
}

/// Seeded stand-in for a learned sparse-structure VAE.
///
/// Each `b`×`b`×`b` block of the occupancy grid (`b = n / d`) is mapped
/// to ±1 per voxel and projected onto `c <= 8` orthonormal rows. The rows are
/// a seeded rotation of the trilinear basis `{1, x, y, z, xy, xz, yz, xyz}`
/// over block-centred coordinates, so a block cut by a single axis-aligned
/// plane decodes exactly and full or empty blocks are preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    n: usize,
    d: usize,
    c: usize,
    /// Row-major `c`×8 rotation applied to the trilinear coefficients.
    rotation: Vec<f64>,
    /// Row-major 8×`b³` orthonormal trilinear basis.
    basis: Vec<f64>,
}

impl Surrogate {
    pub fn new(n: usize, d: usize, c: usize, seed: u64) -> Result<Self> {
        if d == 0 || !n.is_multiple_of(d) || n / d < 2 {
            return Err(Error::ResolutionMismatch { left: n, right: d });
        }
        if !(1..=8).contains(&c) {
            return Err(Error::InvalidArgument(format!("surrogate supports 1..=8 channels, got {c}")));
        }
        Ok(Self {
            n,
            d,
            c,
            rotation: random_rotation8(seed)[..c * 8].to_vec(),
            basis: trilinear_basis(n / d),
        })
    }

    pub fn default_for(n: usize) -> Result<Self> {
        Self::new(n, DEFAULT_LATENT_RES, DEFAULT_CHANNELS, SURROGATE_SEED)
    }

    pub fn grid_resolution(&self) -> usize {
        self.n
    }

    pub fn latent_resolution(&self) -> usize {
        self.d
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    fn block(&self) -> usize {
        self.n / self.d
    }

    /// Full `c`×`b³` projection matrix, row-major over block-local linear
    /// indices.
    pub fn projection_matrix(&self) -> Vec<f64> {
        let m = self.block().pow(3);
        let mut p = vec![0.0; self.c * m];
        for k in 0..self.c {
            for i in 0..m {
                p[k * m + i] = (0..8).map(|j| self.rotation[k * 8 + j] * self.basis[j * m + i]).sum();
            }
        }
        p
    }

    pub fn encode(&self, grid: &VoxelGrid) -> Result<LatentGrid> {
        if grid.n() != self.n {
            return Err(Error::ResolutionMismatch {
                left: grid.n(),
                right: self.n,
            });
        }
        let (d, c, b) = (self.d, self.c, self.block());
        let m = b * b * b;
        let mut out = LatentGrid::zeros(d, c);
        let mut signs = vec![0.0f64; m];
        for bz in 0..d {
            for by in 0..d {
                for bx in 0..d {
                    for z in 0..b {
                        for y in 0..b {
                            for x in 0..b {
                                let occ = grid.get(bx * b + x, by * b + y, bz * b + z);
                                signs[x + b * (y + b * z)] = if occ { 1.0 } else { -1.0 };
                            }
                        }
                    }
                    let mut coeff = [0.0f64; 8];
                    for (j, cj) in coeff.iter_mut().enumerate() {
                        *cj = self.basis[j * m..(j + 1) * m].iter().zip(&signs).map(|(h, s)| h * s).sum();
                    }
                    let pos = bx + d * (by + d * bz);
                    for k in 0..c {
                        let dot: f64 = (0..8).map(|j| self.rotation[k * 8 + j] * coeff[j]).sum();
                        out.values[pos * c + k] = SURROGATE_SCALE * dot;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Transposed projection followed by a 0.5 threshold on the recovered
    /// occupancy `(v + 1) / 2`. Values within 1e-9 of the threshold decode as
    /// empty so exact ties do not depend on rounding.
    pub fn decode(&self, latent: &LatentGrid) -> Result<VoxelGrid> {
        if latent.d != self.d || latent.c != self.c {
            return Err(Error::ResolutionMismatch {
                left: latent.d,
                right: self.d,
            });
        }
        let (d, c, b) = (self.d, self.c, self.block());
        let m = b * b * b;
        let mut grid = VoxelGrid::empty(self.n);
        for bz in 0..d {
            for by in 0..d {
                for bx in 0..d {
                    let code = latent.at(bx + d * (by + d * bz));
                    let mut coeff = [0.0f64; 8];
                    for (j, cj) in coeff.iter_mut().enumerate() {
                        *cj = (0..c).map(|k| self.rotation[k * 8 + j] * code[k] / SURROGATE_SCALE).sum();
                    }
                    for z in 0..b {
                        for y in 0..b {
                            for x in 0..b {
                                let i = x + b * (y + b * z);
                                let v: f64 = (0..8).map(|j| coeff[j] * self.basis[j * m + i]).sum();
                                if (v + 1.0) / 2.0 > 0.5 + 1e-9 {
                                    grid.set(bx * b + x, by * b + y, bz * b + z, true);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grid)
    }
}

/// Orthonormal tensor-product basis of `{1, t}` per axis on a `b`-cube, with
/// `t` centred on the block. Row `j` uses `x` when bit 0 of `j` is set, `y`
/// for bit 1 and `z` for bit 2.
fn trilinear_basis(b: usize) -> Vec<f64> {
    let m = b * b * b;
    let centre = (b as f64 - 1.0) / 2.0;
    let mut basis = vec![0.0; 8 * m];
    for j in 0..8 {
        let row = &mut basis[j * m..(j + 1) * m];
        for z in 0..b {
            for y in 0..b {
                for x in 0..b {
                    let mut v = 1.0;
                    for (axis, coord) in [x, y, z].into_iter().enumerate() {
                        if j >> axis & 1 == 1 {
                            v *= coord as f64 - centre;
                        }
                    }
                    row[x + b * (y + b * z)] = v;
                }
            }
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    basis
}

/// Seeded 8×8 orthogonal matrix (Gram-Schmidt on Gaussian rows).
fn random_rotation8(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<[f64; 8]> = Vec::with_capacity(8);
    while rows.len() < 8 {
        let mut v = [0.0f64; 8];
        v.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let len = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if len > 1e-6 {
            v.iter_mut().for_each(|a| *a /= len);
            rows.push(v);
        }
    }
    rows.concat()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            std: vec![1.0; c],
        }
    }

    fn check(&self, latent: &LatentGrid) -> Result<()> {
        if self.mean.len() != latent.c || self.std.len() != latent.c {
            return Err(Error::ShapeMismatch(format!(
                "stats for {} channels, latent has {}",
                self.mean.len(),
                latent.c
            )));
        }
        if let Some((channel, &std)) = self.std.iter().enumerate().find(|(_, s)| s.is_nan() || **s <= 0.0) {
            return Err(Error::NonPositiveStd { channel, std });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// `(x - mean[c]) / std[c]` per channel.
pub fn normalize_latent(latent: &LatentGrid, stats: &NormStats) -> Result<LatentGrid> {
    stats.check(latent)?;
    let mut out = latent.clone();
    for (i, v) in out.values.iter_mut().enumerate() {
        let ch = i % latent.c;
        *v = (*v - stats.mean[ch]) / stats.std[ch];
    }
    Ok(out)
}

/// Inverse of [`normalize_latent`].
pub fn denormalize_latent(latent: &LatentGrid, stats: &NormStats) -> Result<LatentGrid> {
    stats.check(latent)?;
    let mut out = latent.clone();
    for (i, v) in out.values.iter_mut().enumerate() {
        let ch = i % latent.c;
        *v = *v * stats.std[ch] + stats.mean[ch];
    }
    Ok(out)
}

/// Per-channel mean and population std over every position of every latent.
pub fn compute_stats(corpus: &[LatentGrid]) -> Result<NormStats> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    let c = first.c;
    for l in corpus {
        if l.c != c {
            return Err(Error::ShapeMismatch(format!("corpus mixes {c} and {} channels", l.c)));
        }
    }
    let mut count = 0usize;
    let mut sum = vec![0.0f64; c];
    for l in corpus {
        for chunk in l.values.chunks_exact(c) {
            sum.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
        }
        count += l.positions();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; c];
    for l in corpus {
        for chunk in l.values.chunks_exact(c) {
            for k in 0..c {
                let d = chunk[k] - mean[k];
                sq[k] += d * d;
            }
        }
    }
    let std = sq
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let std = (s / count as f64).sqrt();
            if std < MIN_STD {
                log::warn!("channel {k} has std {std:e}, clamped to {MIN_STD:e}");
                MIN_STD
            } else {
                std
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// Standard-normal noise from a ChaCha20 keystream seeded by `seed`.
/// ChaCha20 is a counter-mode generator, so the stream is identical on every
/// platform for a given seed.
pub fn gaussian_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn noise_like(latent: &LatentGrid, seed: u64) -> LatentGrid {
    LatentGrid {
        d: latent.d,
        c: latent.c,
        values: gaussian_noise(latent.values.len(), seed),
    }
}

/// `cos(λπ/2)·z + sin(λπ/2)·ε` with ε drawn from `noise_seed`.
///
/// λ = 0 returns `z_norm` and λ = 1 returns ε, both bit-exact.
pub fn cosine_interpolate(z_norm: &LatentGrid, lambda: f64, noise_seed: u64) -> Result<LatentGrid> {
    let noise = noise_like(z_norm, noise_seed);
    cosine_interpolate_with(z_norm, &noise, lambda)
}

pub fn cosine_interpolate_with(z_norm: &LatentGrid, noise: &LatentGrid, lambda: f64) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    z_norm.check_shape(noise)?;
    if lambda == 0.0 {
        return Ok(z_norm.clone());
    }
    if lambda == 1.0 {
        return Ok(noise.clone());
    }
    let angle = lambda * std::f64::consts::FRAC_PI_2;
    let (s, c) = angle.sin_cos();
    let values = z_norm
        .values
        .iter()
        .zip(&noise.values)
        .map(|(z, e)| c * z + s * e)
        .collect();
    Ok(LatentGrid {
        d: z_norm.d,
        c: z_norm.c,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaParams {
    pub mu: f64,
    pub sigma: f64,
    pub inference_lambda: f64,
}

impl Default for LambdaParams {
    fn default() -> Self {
        Self {
            mu: 1.0,
            sigma: 1.0,
            inference_lambda: 0.5,
        }
    }
}

impl LambdaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.mu.is_finite() && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "logit-normal needs finite mu and sigma > 0, got ({}, {})",
                self.mu, self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.inference_lambda) {
            return Err(Error::LambdaOutOfRange(self.inference_lambda));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logit-normal draws: `sigmoid(x)` with `x ~ Normal(mu, sigma²)`, kept
/// strictly inside (0, 1).
pub struct LambdaSampler {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl LambdaSampler {
    pub fn new(params: &LambdaParams, seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(params.mu, params.sigma)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?,
        })
    }
}

impl Iterator for LambdaSampler {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let x = self.normal.sample(&mut self.rng);
        Some(sigmoid(x).clamp(f64::EPSILON, 1.0 - f64::EPSILON))
    }
}

pub fn sample_lambda(params: &LambdaParams, seed: u64) -> Result<f64> {
    Ok(LambdaSampler::new(params, seed)?.next().expect("infinite sampler"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingPrior {
    Lod(LodLevel),
    /// The start is noise alone, equivalent to λ = 1.
    PureNoise,
}

impl TrainingPrior {
    pub const ALL: [TrainingPrior; 4] = [
        TrainingPrior::Lod(LodLevel::Lod0),
        TrainingPrior::Lod(LodLevel::Lod1),
        TrainingPrior::Lod(LodLevel::Lod2),
        TrainingPrior::PureNoise,
    ];

    /// Prior grid for `gt`, `None` for pure noise.
    pub fn grid(&self, gt: &VoxelGrid) -> Result<Option<VoxelGrid>> {
        match self {
            TrainingPrior::Lod(level) => lod_prior(gt, *level).map(Some),
            TrainingPrior::PureNoise => Ok(None),
        }
    }
}

/// Uniform choice over LOD0, LOD1, LOD2 and pure noise.
pub fn sample_training_prior(gt: &VoxelGrid, seed: u64) -> Result<TrainingPrior> {
    if gt.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(TrainingPrior::ALL[rng.gen_range(0..4)])
}

pub const SSLT_MAGIC: &[u8; 4] = b"SSLT";
pub const SSLT_VERSION: u32 = 1;

/// SSLT stores `f32` values; encoding rounds each value to single precision.
pub fn encode_sslt(latent: &LatentGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + latent.values.len() * 4);
    out.extend_from_slice(SSLT_MAGIC);
    out.extend_from_slice(&SSLT_VERSION.to_le_bytes());
    out.extend_from_slice(&(latent.d as u32).to_le_bytes());
    out.extend_from_slice(&(latent.c as u32).to_le_bytes());
    for v in &latent.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_sslt(bytes: &[u8]) -> Result<LatentGrid> {
    if bytes.len() < 16 {
        return Err(Error::Format("SSLT header truncated".into()));
    }
    if &bytes[..4] != SSLT_MAGIC {
        return Err(Error::Format("bad SSLT magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (version, d, c) = (word(4), word(8) as usize, word(12) as usize);
    if version != SSLT_VERSION {
        return Err(Error::Format(format!("unsupported SSLT version {version}")));
    }
    let expected = d.checked_pow(3).and_then(|v| v.checked_mul(c)).and_then(|v| v.checked_mul(4));
    if expected != Some(bytes.len() - 16) {
        return Err(Error::Format(format!(
            "SSLT payload has {} bytes, expected {d}^3 x {c} x 4",
            bytes.len() - 16
        )));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("SSLT contains non-finite values".into()));
    }
    Ok(LatentGrid { d, c, values })
}

pub fn write_sslt(latent: &LatentGrid, path: &Path) -> Result<()> {
    std::fs::write(path, encode_sslt(latent))?;
    Ok(())
}

pub fn read_sslt(path: &Path) -> Result<LatentGrid> {
    decode_sslt(&std::fs::read(path)?)
}
