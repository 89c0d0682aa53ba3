//! Rectified-flow sampling with classifier-free guidance, plus a small
//! trainable velocity model that learns to carry interpolated prior latents
//! to ground-truth latents.
//!
//! Time runs from `t = 0` at the (interpolated) start to `t = 1` at data.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{
    compute_stats, cosine_interpolate, cosine_interpolate_with, denormalize_latent, noise_like,
    normalize_latent, sample_lambda, sample_training_prior, LambdaParams, LatentGrid, NormStats,
    Surrogate, TrainingPrior,
};
use crate::voxel::{lod_prior, LodLevel, Slice, VoxelGrid};

/// Length of the shape-family condition: `[rect, l_shape, ring, tower]`.
pub const COND_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector(pub Vec<f64>);

impl ConditionVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Shape-family descriptor read off an occupancy grid: the footprint
    /// class of its vertical projection and whether it has two distinct
    /// cross-sections.
    pub fn infer(grid: &VoxelGrid) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        let n = grid.n();
        let mut projection = Slice::empty(n);
        for z in 0..n {
            projection.union_with(&grid.slice(z));
        }
        let family = if has_enclosed_hole(&projection, n) {
            2
        } else if fills_bounding_rect(&projection, n) {
            0
        } else {
            1
        };
        let lod1 = lod_prior(grid, LodLevel::Lod1)?;
        let lod2 = lod_prior(grid, LodLevel::Lod2)?;
        let mut v = vec![0.0; COND_DIM];
        v[family] = 1.0;
        v[3] = if lod2 != lod1 { 1.0 } else { 0.0 };
        Ok(Self(v))
    }
}

fn projection_bounds(s: &Slice, n: usize) -> (usize, usize, usize, usize) {
    let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0, 0);
    for y in 0..n {
        for x in 0..n {
            if s.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0, y0, x1, y1)
}

fn fills_bounding_rect(s: &Slice, n: usize) -> bool {
    let (x0, y0, x1, y1) = projection_bounds(s, n);
    s.count() == (x1 - x0 + 1) * (y1 - y0 + 1)
}

/// True if some empty cell cannot reach the grid border through empty cells.
fn has_enclosed_hole(s: &Slice, n: usize) -> bool {
    let mut outside = vec![false; n * n];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for (x, y) in [(i, 0), (i, n - 1), (0, i), (n - 1, i)] {
            if !s.get(x, y) && !outside[x + n * y] {
                outside[x + n * y] = true;
                stack.push((x, y));
            }
        }
    }
    while let Some((x, y)) = stack.pop() {
        let mut visit = |x: usize, y: usize| {
            if !s.get(x, y) && !outside[x + n * y] {
                outside[x + n * y] = true;
                stack.push((x, y));
            }
        };
        if x > 0 { visit(x - 1, y) }
        if x + 1 < n { visit(x + 1, y) }
        if y > 0 { visit(x, y - 1) }
        if y + 1 < n { visit(x, y + 1) }
    }
    (0..n * n).any(|i| !outside[i] && !s.get(i % n, i / n))
}

pub trait VelocityModel: Send + Sync {
    fn evaluate(&self, state: &LatentGrid, t: f64, cond: Option<&ConditionVector>) -> Result<LatentGrid>;
}

/// `v ≡ 0`.
pub struct ZeroVelocity;

impl VelocityModel for ZeroVelocity {
    fn evaluate(&self, state: &LatentGrid, _t: f64, _cond: Option<&ConditionVector>) -> Result<LatentGrid> {
        Ok(LatentGrid::zeros(state.d(), state.channels()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 7.5,
            lambda: 0.5,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("cfg scale {} must be >= 0", self.cfg_scale)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::LambdaOutOfRange(self.lambda));
        }
        Ok(())
    }
}

/// `v_u + s (v_c - v_u)`; with `s = 1` only the conditional branch runs.
pub fn guided_velocity(
    model: &dyn VelocityModel,
    state: &LatentGrid,
    t: f64,
    cond: Option<&ConditionVector>,
    cfg_scale: f64,
) -> Result<LatentGrid> {
    let Some(cond) = cond else {
        return model.evaluate(state, t, None);
    };
    if cfg_scale == 1.0 {
        return model.evaluate(state, t, Some(cond));
    }
    let uncond = model.evaluate(state, t, None)?;
    let conditional = model.evaluate(state, t, Some(cond))?;
    let values = uncond
        .values()
        .iter()
        .zip(conditional.values())
        .map(|(u, c)| u + cfg_scale * (c - u))
        .collect();
    LatentGrid::from_values(state.d(), state.channels(), values)
        .map_err(|_| Error::NonFiniteState(0))
}

/// Integrates `dx/dt = v(x, t)` from `t = 0` to `t = 1` with uniform Euler
/// steps.
pub fn euler_sample(
    model: &dyn VelocityModel,
    start: &LatentGrid,
    cond: Option<&ConditionVector>,
    config: &FlowConfig,
) -> Result<LatentGrid> {
    config.validate()?;
    let dt = 1.0 / config.steps as f64;
    let mut x = start.clone();
    for step in 0..config.steps {
        let t = step as f64 * dt;
        let v = guided_velocity(model, &x, t, cond, config.cfg_scale)
            .map_err(|e| match e {
                Error::NonFiniteState(_) => Error::NonFiniteState(step),
                other => other,
            })?;
        if !v.same_shape(&x) {
            return Err(Error::ShapeMismatch(format!(
                "velocity {}^3x{} for state {}^3x{}",
                v.d(),
                v.channels(),
                x.d(),
                x.channels()
            )));
        }
        for (xi, vi) in x.values_mut().iter_mut().zip(v.values()) {
            *xi += dt * vi;
        }
        if x.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState(step));
        }
    }
    Ok(x)
}

/// Architecture of [`TinyFlow`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyFlowArch {
    /// Latent spatial resolution.
    pub d: usize,
    /// Latent channels.
    pub c: usize,
    pub cond_dim: usize,
    /// Number of piecewise-linear time knots spread evenly over [0, 1].
    pub time_knots: usize,
    /// Adds the velocity towards the decode/re-encode projection of the
    /// state as a feature.
    #[serde(default)]
    pub project: bool,
}

impl TinyFlowArch {
    pub fn new(d: usize, c: usize, time_knots: usize) -> Self {
        Self {
            d,
            c,
            cond_dim: COND_DIM,
            time_knots: time_knots.max(1),
            project: false,
        }
    }

    pub fn with_projection(mut self) -> Self {
        self.project = true;
        self
    }

    /// Width of the per-position feature vector fed to `W`.
    fn feature_len(&self) -> usize {
        self.c * if self.project { 5 } else { 4 }
    }

    fn positions(&self) -> usize {
        self.d * self.d * self.d
    }

    fn w_len(&self) -> usize {
        self.c * self.feature_len()
    }

    fn b_off(&self) -> usize {
        self.w_len()
    }

    fn t_off(&self) -> usize {
        self.b_off() + self.c
    }

    fn s_off(&self) -> usize {
        self.t_off() + self.positions() * self.c
    }

    /// Parameters per time knot.
    pub fn knot_len(&self) -> usize {
        self.s_off() + self.positions() * self.c * self.cond_dim
    }

    pub fn param_count(&self) -> usize {
        self.knot_len() * self.time_knots
    }

    /// Hat-function weights of every knot at time `t`.
    pub fn knot_weights(&self, t: f64) -> Vec<f64> {
        let k = self.time_knots;
        if k == 1 {
            return vec![1.0];
        }
        let span = (k - 1) as f64;
        (0..k)
            .map(|i| (1.0 - (t * span - i as f64).abs()).max(0.0))
            .collect()
    }
}

/// Velocity model that is linear in its parameters:
///
/// `v[p] = Σ_k φ_k(t) (W_k f(x, t)[p] + b_k + T_k[p] + Σ_j c_j S_k[p, j])`
///
/// where `f` are the per-position features of [`TinyFlow::features`], `T` a
/// per-position template and `S` per-position condition templates. `φ_k`
/// are hat functions over evenly spaced time knots.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyFlow {
    pub arch: TinyFlowArch,
    pub params: Vec<f64>,
    projector: Option<Projector>,
}

pub const PROJECTION_MIN_GAP: f64 = 0.05;

/// Maps a normalized latent onto the nearest surrogate code.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    surrogate: Surrogate,
    stats: NormStats,
}

impl Projector {
    pub fn new(surrogate: Surrogate, stats: NormStats) -> Self {
        Self { surrogate, stats }
    }

    pub fn project(&self, state: &LatentGrid) -> Result<LatentGrid> {
        let grid = self.surrogate.decode(&denormalize_latent(state, &self.stats)?)?;
        normalize_latent(&self.surrogate.encode(&grid)?, &self.stats)
    }
}

/// Box mean over the 3×3×3 neighbourhood clipped to the grid, per channel.
pub fn box_mean(latent: &LatentGrid) -> Vec<f64> {
    let (d, c) = (latent.d(), latent.channels());
    let mut cur = latent.values().to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let stride = [1, d, d * d][axis];
        for p in 0..d * d * d {
            let coord = (p / stride) % d;
            let lo = coord.saturating_sub(1);
            let hi = (coord + 1).min(d - 1);
            let count = (hi - lo + 1) as f64;
            let base = p - coord * stride;
            for ch in 0..c {
                let sum: f64 = (lo..=hi).map(|q| cur[(base + q * stride) * c + ch]).sum();
                next[p * c + ch] = sum / count;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Per-channel means over each vertical column (`d²` entries) and each
/// horizontal layer (`d` entries).
pub fn axis_means(latent: &LatentGrid) -> (Vec<f64>, Vec<f64>) {
    let (d, c) = (latent.d(), latent.channels());
    let mut col = vec![0.0; d * d * c];
    let mut layer = vec![0.0; d * c];
    for (p, v) in latent.values().chunks_exact(c).enumerate() {
        let (xy, z) = (p % (d * d), p / (d * d));
        for ch in 0..c {
            col[xy * c + ch] += v[ch] / d as f64;
            layer[z * c + ch] += v[ch] / (d * d) as f64;
        }
    }
    (col, layer)
}

impl TinyFlow {
    pub fn zeros(arch: TinyFlowArch) -> Self {
        Self {
            arch,
            params: vec![0.0; arch.param_count()],
            projector: None,
        }
    }

    /// Required when `arch.project` is set.
    pub fn set_projector(&mut self, projector: Projector) {
        self.projector = Some(projector);
    }

    /// Per-position features `[x, x̄, x_col, x_layer, u]`, `feature_len`
    /// values each. `x̄` is the 3×3×3 box mean, `x_col` the mean over the
    /// position's vertical column, `x_layer` the mean over its horizontal
    /// layer and `u = (x̂ - x) / max(1 - t, PROJECTION_MIN_GAP)` the velocity
    /// that would carry the state onto its projection by `t = 1`.
    pub fn features(&self, state: &LatentGrid, t: f64) -> Result<Vec<f64>> {
        let (c, f) = (self.arch.c, self.arch.feature_len());
        let bar = box_mean(state);
        let (col, layer) = axis_means(state);
        let d = self.arch.d;
        let hat = match (self.arch.project, &self.projector) {
            (false, _) => None,
            (true, Some(p)) => Some(p.project(state)?),
            (true, None) => return Err(Error::InvalidArgument("model needs a latent projector".into())),
        };
        let x = state.values();
        let mut out = vec![0.0; self.arch.positions() * f];
        for p in 0..self.arch.positions() {
            let row = &mut out[p * f..(p + 1) * f];
            row[..c].copy_from_slice(&x[p * c..(p + 1) * c]);
            row[c..2 * c].copy_from_slice(&bar[p * c..(p + 1) * c]);
            let (xy, z) = (p % (d * d), p / (d * d));
            row[2 * c..3 * c].copy_from_slice(&col[xy * c..(xy + 1) * c]);
            row[3 * c..4 * c].copy_from_slice(&layer[z * c..(z + 1) * c]);
            if let Some(hat) = &hat {
                let gap = (1.0 - t).max(PROJECTION_MIN_GAP);
                for i in 0..c {
                    row[4 * c + i] = (hat.values()[p * c + i] - x[p * c + i]) / gap;
                }
            }
        }
        Ok(out)
    }

    fn check_state(&self, state: &LatentGrid, cond: Option<&ConditionVector>) -> Result<()> {
        if state.d() != self.arch.d || state.channels() != self.arch.c {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}^3x{}, got {}^3x{}",
                self.arch.d,
                self.arch.c,
                state.d(),
                state.channels()
            )));
        }
        if let Some(cond) = cond {
            if cond.len() != self.arch.cond_dim {
                return Err(Error::ShapeMismatch(format!(
                    "condition has {} entries, model expects {}",
                    cond.len(),
                    self.arch.cond_dim
                )));
            }
        }
        Ok(())
    }

    /// Time-blended parameters of a single knot-sized block.
    fn blended(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let len = self.arch.knot_len();
        let weights = self.arch.knot_weights(t);
        let mut block = vec![0.0; len];
        for (k, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let src = &self.params[k * len..(k + 1) * len];
            block.iter_mut().zip(src).for_each(|(b, s)| *b += w * s);
        }
        (block, weights)
    }

    fn forward_with(&self, block: &[f64], features: &[f64], cond: Option<&ConditionVector>) -> Vec<f64> {
        let a = &self.arch;
        let (c, f, l) = (a.c, a.feature_len(), a.cond_dim);
        let w = &block[..a.w_len()];
        let b = &block[a.b_off()..a.t_off()];
        let tmpl = &block[a.t_off()..a.s_off()];
        let ctmpl = &block[a.s_off()..];
        let mut out = vec![0.0; a.positions() * c];
        for p in 0..a.positions() {
            let fp = &features[p * f..(p + 1) * f];
            for o in 0..c {
                let row = &w[o * f..(o + 1) * f];
                let mut v = b[o] + tmpl[p * c + o];
                for i in 0..f {
                    v += row[i] * fp[i];
                }
                if let Some(cond) = cond {
                    let s = &ctmpl[(p * c + o) * l..(p * c + o + 1) * l];
                    for (a, b) in cond.0.iter().zip(s) {
                        v += a * b;
                    }
                }
                out[p * c + o] = v;
            }
        }
        out
    }

    /// Squared-error loss of one sample and its gradient with respect to a
    /// single knot block evaluated at unit weight. The full gradient is
    /// `φ_k(t)` times this block for every knot `k`.
    fn sample_grad(&self, sample: &TrainSample, scale: f64) -> Result<(f64, Vec<f64>)> {
        let a = &self.arch;
        let (c, f, l) = (a.c, a.feature_len(), a.cond_dim);
        let (block, _) = self.blended(sample.t);
        let features = self.features(&sample.state, sample.t)?;
        let pred = self.forward_with(&block, &features, sample.cond.as_ref());
        let mut grad = vec![0.0; a.knot_len()];
        let mut loss = 0.0;
        for p in 0..a.positions() {
            for o in 0..c {
                let i = p * c + o;
                let r = pred[i] - sample.target[i];
                loss += r * r;
                let g = 2.0 * r * scale;
                for q in 0..f {
                    grad[o * f + q] += g * features[p * f + q];
                }
                grad[a.b_off() + o] += g;
                grad[a.t_off() + i] += g;
                if let Some(cond) = &sample.cond {
                    for j in 0..l {
                        grad[a.s_off() + i * l + j] += g * cond.0[j];
                    }
                }
            }
        }
        Ok((loss * scale, grad))
    }

    /// Mean squared error over a batch and its gradient.
    pub fn loss_and_grad(&self, batch: &[TrainSample]) -> Result<(f64, Vec<f64>)> {
        let scale = 1.0 / (batch.len() * self.arch.positions() * self.arch.c) as f64;
        let parts: Vec<(f64, Vec<f64>)> = batch.par_iter().map(|s| self.sample_grad(s, scale)).collect::<Result<_>>()?;
        let len = self.arch.knot_len();
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        // accumulate in sample order so the result is independent of threads
        for (sample, (l, g)) in batch.iter().zip(parts) {
            loss += l;
            for (k, w) in self.arch.knot_weights(sample.t).into_iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                grad[k * len..(k + 1) * len]
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a += w * b);
            }
        }
        Ok((loss, grad))
    }

    pub fn loss(&self, batch: &[TrainSample]) -> Result<f64> {
        let scale = 1.0 / (batch.len() * self.arch.positions() * self.arch.c) as f64;
        let parts: Vec<f64> = batch
            .par_iter()
            .map(|s| -> Result<f64> {
                let (block, _) = self.blended(s.t);
                let pred = self.forward_with(&block, &self.features(&s.state, s.t)?, s.cond.as_ref());
                Ok(pred.iter().zip(&s.target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() * scale)
            })
            .collect::<Result<_>>()?;
        Ok(parts.iter().sum())
    }
}

impl VelocityModel for TinyFlow {
    fn evaluate(&self, state: &LatentGrid, t: f64, cond: Option<&ConditionVector>) -> Result<LatentGrid> {
        self.check_state(state, cond)?;
        let (block, _) = self.blended(t.clamp(0.0, 1.0));
        let out = self.forward_with(&block, &self.features(state, t.clamp(0.0, 1.0))?, cond);
        LatentGrid::from_values(state.d(), state.channels(), out).map_err(|_| Error::NonFiniteState(0))
    }
}

/// One flow-matching regression example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub state: LatentGrid,
    pub t: f64,
    pub cond: Option<ConditionVector>,
    /// `x1 - x0`, flattened like the state.
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_drop: f64,
    pub time_knots: usize,
    /// Give the model the projected state as an extra feature.
    pub project: bool,
    pub lambda: LambdaParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            seed: 0,
            batch_size: 16,
            learning_rate: 0.01,
            cond_drop: 0.1,
            time_knots: 12,
            project: true,
            lambda: LambdaParams::default(),
        }
    }
}

/// A trained toy model with everything generation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub flow: TinyFlow,
    pub stats: NormStats,
    pub surrogate: SurrogateSpec,
    pub train: TrainConfig,
    /// Loss of the untrained model, then the mean batch loss of every epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub seed: u64,
}

impl SurrogateSpec {
    pub fn default_for(n: usize) -> Self {
        Self {
            n,
            d: crate::latent::DEFAULT_LATENT_RES,
            c: crate::latent::DEFAULT_CHANNELS,
            seed: crate::latent::SURROGATE_SEED,
        }
    }

    pub fn build(&self) -> Result<Surrogate> {
        Surrogate::new(self.n, self.d, self.c, self.seed)
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A corpus entry with its priors precomputed.
struct PreparedShape {
    gt: LatentGrid,
    priors: [LatentGrid; 3],
    cond: ConditionVector,
}

fn prepare_corpus(
    corpus: &[(VoxelGrid, ConditionVector)],
    surrogate: &Surrogate,
) -> Result<(Vec<PreparedShape>, NormStats)> {
    let raw: Vec<_> = corpus
        .par_iter()
        .map(|(gt, cond)| -> Result<_> {
            let gt_latent = surrogate.encode(gt)?;
            let priors = [
                surrogate.encode(&lod_prior(gt, LodLevel::Lod0)?)?,
                surrogate.encode(&lod_prior(gt, LodLevel::Lod1)?)?,
                surrogate.encode(&lod_prior(gt, LodLevel::Lod2)?)?,
            ];
            Ok(PreparedShape { gt: gt_latent, priors, cond: cond.clone() })
        })
        .collect::<Result<_>>()?;
    // statistics of the prior latents, shared by priors and targets
    let prior_latents: Vec<LatentGrid> = raw.iter().flat_map(|s| s.priors.iter().cloned()).collect();
    let stats = compute_stats(&prior_latents)?;
    Ok((raw, stats))
}

fn make_sample(
    shape: &PreparedShape,
    gt_grid: &VoxelGrid,
    seed: u64,
    config: &TrainConfig,
) -> Result<TrainSample> {
    let prior = sample_training_prior(gt_grid, mix_seed(seed, 1))?;
    let lambda = sample_lambda(&config.lambda, mix_seed(seed, 2))?;
    let noise = noise_like(&shape.gt, mix_seed(seed, 3));
    let x0 = match prior {
        TrainingPrior::PureNoise => noise,
        TrainingPrior::Lod(level) => {
            let idx = LodLevel::ALL.iter().position(|l| *l == level).unwrap();
            cosine_interpolate_with(&shape.priors[idx], &noise, lambda)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 4));
    let t: f64 = rng.gen();
    let cond = (rng.gen::<f64>() >= config.cond_drop).then(|| shape.cond.clone());
    let x1 = shape.gt.values();
    let state: Vec<f64> = x0.values().iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let target = x0.values().iter().zip(x1).map(|(a, b)| b - a).collect();
    Ok(TrainSample {
        state: LatentGrid::from_values(shape.gt.d(), shape.gt.channels(), state)?,
        t,
        cond,
        target,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Builds a deterministic batch of training samples for evaluating losses.
pub fn probe_batch(
    corpus: &[(VoxelGrid, ConditionVector)],
    model: &ToyModel,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let surrogate = model.surrogate.build()?;
    let picks: Vec<usize> = (0..count).map(|i| (mix_seed(seed, i as u64) % corpus.len() as u64) as usize).collect();
    picks
        .iter()
        .enumerate()
        .map(|(i, &idx)| {
            let (gt, cond) = &corpus[idx];
            let shape = prepare_normalized(gt, cond, &surrogate, &model.stats)?;
            make_sample(&shape, gt, mix_seed(seed ^ 0xABCD, i as u64), &model.train)
        })
        .collect()
}

fn prepare_normalized(
    gt: &VoxelGrid,
    cond: &ConditionVector,
    surrogate: &Surrogate,
    stats: &NormStats,
) -> Result<PreparedShape> {
    let norm = |g: &VoxelGrid| -> Result<LatentGrid> { normalize_latent(&surrogate.encode(g)?, stats) };
    Ok(PreparedShape {
        gt: norm(gt)?,
        priors: [
            norm(&lod_prior(gt, LodLevel::Lod0)?)?,
            norm(&lod_prior(gt, LodLevel::Lod1)?)?,
            norm(&lod_prior(gt, LodLevel::Lod2)?)?,
        ],
        cond: cond.clone(),
    })
}

/// Trains a [`TinyFlow`] with the rectified-flow objective: regress
/// `v(x_t, t, c)` onto `x1 - x0` where `x0` is the cosine interpolation of a
/// randomly chosen normalized prior latent with noise (or noise alone), `x1`
/// the normalized ground-truth latent and `x_t = (1 - t) x0 + t x1`.
pub fn train_toy(
    corpus: &[(VoxelGrid, ConditionVector)],
    surrogate_spec: SurrogateSpec,
    config: &TrainConfig,
) -> Result<ToyModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    config.lambda.validate()?;
    let surrogate = surrogate_spec.build()?;
    for (gt, cond) in corpus {
        if gt.n() != surrogate_spec.n {
            return Err(Error::ResolutionMismatch {
                left: gt.n(),
                right: surrogate_spec.n,
            });
        }
        if gt.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if cond.len() != COND_DIM {
            return Err(Error::ShapeMismatch(format!("condition of length {}", cond.len())));
        }
    }
    let (raw, stats) = prepare_corpus(corpus, &surrogate)?;
    let shapes: Vec<PreparedShape> = raw
        .into_iter()
        .map(|s| -> Result<PreparedShape> {
            let [p0, p1, p2] = &s.priors;
            Ok(PreparedShape {
                gt: normalize_latent(&s.gt, &stats)?,
                priors: [
                    normalize_latent(p0, &stats)?,
                    normalize_latent(p1, &stats)?,
                    normalize_latent(p2, &stats)?,
                ],
                cond: s.cond,
            })
        })
        .collect::<Result<_>>()?;

    let mut arch = TinyFlowArch::new(surrogate_spec.d, surrogate_spec.c, config.time_knots);
    if config.project {
        arch = arch.with_projection();
    }
    let mut flow = TinyFlow::zeros(arch);
    flow.set_projector(Projector::new(surrogate.clone(), stats.clone()));
    let mut adam = Adam::new(flow.params.len());
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5348));
    let batches_per_epoch = shapes.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch).max(1);
    let mut history = Vec::with_capacity(config.epochs + 1);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TrainSample> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let seed = mix_seed(config.seed, ((epoch * batches_per_epoch + b) * config.batch_size + i) as u64);
                    make_sample(&shapes[idx], &corpus[idx].0, seed, config)
                })
                .collect::<Result<_>>()?;
            let (loss, grad) = flow.loss_and_grad(&batch)?;
            if epoch == 0 && b == 0 {
                history.push(loss);
            }
            epoch_loss += loss;
            // cosine decay to 10% of the base rate
            let progress = step as f64 / total_steps as f64;
            let lr = config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            adam.update(&mut flow.params, &grad, lr);
            step += 1;
        }
        let mean = epoch_loss / batches_per_epoch as f64;
        log::info!("epoch {}/{}: loss {mean:.5}", epoch + 1, config.epochs);
        history.push(mean);
    }
    // parameters persist as f32; round now so a reloaded model is identical
    flow.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
    Ok(ToyModel {
        flow,
        stats,
        surrogate: surrogate_spec,
        train: *config,
        loss_history: history,
    })
}

/// Geometry generation: encode the prior, normalize, interpolate with noise
/// at `config.lambda`, integrate the flow, denormalize and decode. With no
/// prior the start is pure noise.
pub fn generate(
    model: &dyn VelocityModel,
    surrogate: &Surrogate,
    stats: &NormStats,
    prior: Option<&VoxelGrid>,
    cond: Option<&ConditionVector>,
    config: &FlowConfig,
) -> Result<VoxelGrid> {
    config.validate()?;
    let start = match prior {
        Some(grid) => {
            if grid.is_empty() {
                return Err(Error::EmptyGrid);
            }
            let z = normalize_latent(&surrogate.encode(grid)?, stats)?;
            cosine_interpolate(&z, config.lambda, config.seed)?
        }
        None => noise_like(
            &LatentGrid::zeros(surrogate.latent_resolution(), surrogate.channels()),
            config.seed,
        ),
    };
    let end = euler_sample(model, &start, cond, config)?;
    surrogate.decode(&denormalize_latent(&end, stats)?)
}

impl ToyModel {
    /// Untrained model: zero velocity and identity normalization.
    pub fn zero(surrogate: SurrogateSpec) -> Self {
        Self {
            flow: TinyFlow::zeros(TinyFlowArch::new(surrogate.d, surrogate.c, 1)),
            stats: NormStats::identity(surrogate.c),
            surrogate,
            train: TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            loss_history: Vec::new(),
        }
    }

    pub fn generate(&self, prior: Option<&VoxelGrid>, cond: Option<&ConditionVector>, config: &FlowConfig) -> Result<VoxelGrid> {
        generate(&self.flow, &self.surrogate.build()?, &self.stats, prior, cond, config)
    }

    /// Writes the GFTM parameter file and its `<path>.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, encode_gftm(&self.flow.params))?;
        let sidecar = ModelSidecar {
            format: "GFTM".into(),
            version: GFTM_VERSION,
            arch: self.flow.arch,
            surrogate: self.surrogate,
            norm_stats: self.stats.clone(),
            train: self.train,
            loss_history: self.loss_history.clone(),
        };
        std::fs::write(model_sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params = decode_gftm(&std::fs::read(path)?)?;
        let sidecar: ModelSidecar = serde_json::from_str(&std::fs::read_to_string(model_sidecar_path(path))?)?;
        if params.len() != sidecar.arch.param_count() {
            return Err(Error::Format(format!(
                "{} holds {} parameters, architecture needs {}",
                path.display(),
                params.len(),
                sidecar.arch.param_count()
            )));
        }
        let mut flow = TinyFlow::zeros(sidecar.arch);
        flow.params = params;
        flow.set_projector(Projector::new(sidecar.surrogate.build()?, sidecar.norm_stats.clone()));
        Ok(Self {
            flow,
            stats: sidecar.norm_stats,
            surrogate: sidecar.surrogate,
            train: sidecar.train,
            loss_history: sidecar.loss_history,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelSidecar {
    format: String,
    version: u32,
    arch: TinyFlowArch,
    surrogate: SurrogateSpec,
    norm_stats: NormStats,
    train: TrainConfig,
    loss_history: Vec<f64>,
}

pub fn model_sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

pub const GFTM_MAGIC: &[u8; 4] = b"GFTM";
pub const GFTM_VERSION: u32 = 1;

pub fn encode_gftm(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.len() * 4);
    out.extend_from_slice(GFTM_MAGIC);
    out.extend_from_slice(&GFTM_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    out
}

pub fn decode_gftm(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 16 {
        return Err(Error::Format("GFTM header truncated".into()));
    }
    if &bytes[..4] != GFTM_MAGIC {
        return Err(Error::Format("bad GFTM magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GFTM_VERSION {
        return Err(Error::Format(format!("unsupported GFTM version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if Some(bytes.len() as u64 - 16) != count.checked_mul(4) {
        return Err(Error::Format(format!(
            "GFTM declares {count} parameters but holds {} bytes",
            bytes.len() - 16
        )));
    }
    let params: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Format("GFTM contains non-finite parameters".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::gaussian_noise;

    struct Constant(LatentGrid);

    impl VelocityModel for Constant {
        fn evaluate(&self, _s: &LatentGrid, _t: f64, _c: Option<&ConditionVector>) -> Result<LatentGrid> {
            Ok(self.0.clone())
        }
    }

    fn rand_latent(d: usize, c: usize, seed: u64) -> LatentGrid {
        LatentGrid::from_values(d, c, gaussian_noise(d * d * d * c, seed)).unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        let start = rand_latent(4, 3, 1);
        let cfg = FlowConfig { steps: 17, ..FlowConfig::default() };
        assert_eq!(euler_sample(&ZeroVelocity, &start, None, &cfg).unwrap(), start);
    }

    #[test]
    fn constant_field_telescopes() {
        let start = rand_latent(4, 3, 1);
        let target = rand_latent(4, 3, 2);
        let diff: Vec<f64> = target.values().iter().zip(start.values()).map(|(a, b)| a - b).collect();
        let model = Constant(LatentGrid::from_values(4, 3, diff).unwrap());
        for steps in [1, 5, 50] {
            let cfg = FlowConfig { steps, ..FlowConfig::default() };
            let end = euler_sample(&model, &start, None, &cfg).unwrap();
            for (a, b) in end.values().iter().zip(target.values()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn config_validation() {
        let start = rand_latent(2, 2, 1);
        let bad = FlowConfig { steps: 0, ..FlowConfig::default() };
        assert!(euler_sample(&ZeroVelocity, &start, None, &bad).is_err());
        let bad = FlowConfig { lambda: 1.2, ..FlowConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::LambdaOutOfRange(_))));
        let bad = FlowConfig { cfg_scale: -1.0, ..FlowConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shape_mismatch_detected() {
        let model = Constant(LatentGrid::zeros(2, 2));
        let start = rand_latent(3, 2, 1);
        let err = euler_sample(&model, &start, None, &FlowConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn non_finite_state_detected() {
        let model = Constant(LatentGrid::from_values(2, 1, vec![f64::MAX; 8]).unwrap());
        let start = LatentGrid::from_values(2, 1, vec![f64::MAX; 8]).unwrap();
        let cfg = FlowConfig { steps: 1, ..FlowConfig::default() };
        assert!(matches!(euler_sample(&model, &start, None, &cfg), Err(Error::NonFiniteState(0))));
    }

    #[test]
    fn knot_weights_partition_unity() {
        let arch = TinyFlowArch::new(2, 2, 4);
        for t in [0.0, 0.1, 0.33, 0.5, 0.9, 1.0] {
            let w = arch.knot_weights(t);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().filter(|&&x| x > 0.0).count() <= 2);
        }
    }

    #[test]
    fn box_mean_of_constant_is_constant() {
        let l = LatentGrid::from_values(3, 2, vec![2.5; 54]).unwrap();
        assert!(box_mean(&l).iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn box_mean_matches_direct_sum() {
        let l = rand_latent(4, 2, 9);
        let bar = box_mean(&l);
        let d = 4i64;
        for (x, y, z) in [(0, 0, 0), (1, 2, 3), (3, 3, 1)] {
            for ch in 0..2 {
                let (mut sum, mut count) = (0.0, 0.0);
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (a, b, c) = (x + dx, y + dy, z + dz);
                            if (0..d).contains(&a) && (0..d).contains(&b) && (0..d).contains(&c) {
                                sum += l.values()[((a + d * (b + d * c)) * 2 + ch) as usize];
                                count += 1.0;
                            }
                        }
                    }
                }
                let p = (x + d * (y + d * z)) as usize;
                assert!((bar[p * 2 + ch as usize] - sum / count).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infer_condition_families() {
        use crate::voxel::{synth_params, ShapeFamily};
        for seed in 0..40 {
            let p = synth_params(seed, 32);
            let cond = ConditionVector::infer(&p.build()).unwrap();
            let family = match p.family {
                ShapeFamily::Rect => 0,
                ShapeFamily::LShape => 1,
                ShapeFamily::Ring => 2,
            };
            assert_eq!(cond.0[family], 1.0, "seed {seed}: {p:?} -> {cond:?}");
        }
    }

    #[test]
    fn gftm_errors() {
        let bytes = encode_gftm(&[1.0, -2.5]);
        assert_eq!(decode_gftm(&bytes).unwrap(), vec![1.0, -2.5]);
        assert!(matches!(decode_gftm(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[3] = 0;
        assert!(matches!(decode_gftm(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(model_sidecar_path(Path::new("/a/model.gftm")), PathBuf::from("/a/model.gftm.json"));
    }
}
