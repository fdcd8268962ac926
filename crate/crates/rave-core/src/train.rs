//! Scene fitting: content-aware initialization and Adam optimization.
//!
//! Positions are seeded where the target has structure (sampling proportional
//! to local gradient magnitude with a uniform floor), then all nine
//! differentiable parameter planes are optimized against the combined
//! L1/SSIM objective. Adam keeps per-parameter first and second moments and a
//! per-gaussian step count, so later stages can update arbitrary subsets
//! without corrupting the bias correction of untouched gaussians.

use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{quantize_in_place, QuantSpec};
use crate::error::{invalid, Error, Result};
use crate::hierarchy::AnchorHierarchy;
use crate::image::ImageBuffer;
use crate::loss::{combined_loss, LossConfig};
use crate::render::{render, render_backward, render_backward_subset, render_subset};
use crate::splat::{Gaussian2D, GaussianSet, ParamGrads, RenderConfig, GRAD_PARAMS};

/// Learning rates per attribute group.
#[derive(Debug, Clone)]
pub struct LearningRates {
    pub pos: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { pos: 0.3, log_scale: 0.01, rotation: 0.01, opacity_logit: 0.05, color: 0.01 }
    }
}

impl LearningRates {
    /// Learning rate for each of the nine parameter planes, in plane order.
    fn per_plane(&self) -> [f64; GRAD_PARAMS] {
        [
            self.pos,
            self.pos,
            self.log_scale,
            self.log_scale,
            self.rotation,
            self.opacity_logit,
            self.color,
            self.color,
            self.color,
        ]
    }
}

/// Adam optimizer state over a gaussian set.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamGrads,
    v: ParamGrads,
    /// Per-gaussian update count; bias correction uses each gaussian's own
    /// count so masked updates leave other gaussians' schedules untouched.
    step: Vec<u64>,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize, betas: (f64, f64), epsilon: f64) -> Self {
        Self {
            m: ParamGrads::zeros(n),
            v: ParamGrads::zeros(n),
            step: vec![0; n],
            beta1: betas.0,
            beta2: betas.1,
            epsilon,
        }
    }

    /// Updates every gaussian.
    pub fn step_all(&mut self, set: &mut GaussianSet, grads: &ParamGrads, lrs: &LearningRates) {
        let all: Vec<u32> = (0..set.len() as u32).collect();
        self.step_masked(set, grads, &all, lrs);
    }

    /// Updates only the gaussians named by `indices`; moments and step counts
    /// of all others are left exactly as they were.
    pub fn step_masked(
        &mut self,
        set: &mut GaussianSet,
        grads: &ParamGrads,
        indices: &[u32],
        lrs: &LearningRates,
    ) {
        let lr = lrs.per_plane();
        for &iu in indices {
            let i = iu as usize;
            self.step[i] += 1;
            let t = self.step[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            for (p, g_arr) in grads.arrays().into_iter().enumerate() {
                let g = g_arr[i];
                let m_arr = &mut self.m.arrays_mut()[p][i];
                *m_arr = self.beta1 * *m_arr + (1.0 - self.beta1) * g;
                let m = *m_arr;
                let v_arr = &mut self.v.arrays_mut()[p][i];
                *v_arr = self.beta2 * *v_arr + (1.0 - self.beta2) * g * g;
                let v = *v_arr;
                let update = lr[p] * (m / bc1) / ((v / bc2).sqrt() + self.epsilon);
                let plane = set.plane_mut(crate::splat::Plane::ALL[p]);
                plane[i] -= update;
            }
        }
    }

    pub fn steps(&self, i: usize) -> u64 {
        self.step[i]
    }
}

/// Training options.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub num_gaussians: usize,
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_gaussians: 512,
            iterations: 2000,
            learning_rates: LearningRates::default(),
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

/// A fitted scene together with the per-iteration loss trace.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub set: GaussianSet,
    pub loss_history: Vec<f64>,
}

/// Per-pixel structure weight: gradient magnitude over all channels plus a
/// uniform floor at a quarter of its mean, so flat regions still receive
/// some gaussians.
fn sample_weights(target: &ImageBuffer) -> Vec<f64> {
    let (w, h) = (target.width(), target.height());
    let mut mag = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for c in 0..3 {
                let xl = target.get(x.saturating_sub(1), y)[c];
                let xr = target.get((x + 1).min(w - 1), y)[c];
                let yl = target.get(x, y.saturating_sub(1))[c];
                let yr = target.get(x, (y + 1).min(h - 1))[c];
                let gx = (xr - xl) / if x == 0 || x == w - 1 { 1.0 } else { 2.0 };
                let gy = (yr - yl) / if y == 0 || y == h - 1 { 1.0 } else { 2.0 };
                sum += gx * gx + gy * gy;
            }
            mag[y * w + x] = sum.sqrt();
        }
    }
    let mean = mag.iter().sum::<f64>() / mag.len() as f64;
    let floor = 0.25 * mean + 1e-12;
    for v in &mut mag {
        *v += floor;
    }
    mag
}

/// Seeds a scene from the target image: positions drawn proportional to
/// structure, colors from the underlying pixels, isotropic scale
/// `sqrt(W*H/N)`, zero rotation, opacity logit zero, depth keys by sample
/// order.
pub fn init_from_image(target: &ImageBuffer, cfg: &TrainConfig) -> Result<GaussianSet> {
    if cfg.num_gaussians == 0 {
        return Err(invalid!("cannot initialize a scene with zero gaussians"));
    }
    if !target.is_finite() {
        return Err(invalid!("target image contains non-finite values"));
    }
    let (w, h) = (target.width(), target.height());
    let weights = sample_weights(target);
    let mut cum = Vec::with_capacity(weights.len());
    let mut total = 0.0;
    for v in &weights {
        total += v;
        cum.push(total);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_gaussians;
    let log_scale = 0.5 * ((w * h) as f64 / n as f64).ln();
    let mut set = GaussianSet::new(w as u32, h as u32)?;
    for i in 0..n {
        let u: f64 = rng.random_range(0.0..total);
        let pix = cum.partition_point(|&c| c <= u).min(weights.len() - 1);
        let (px, py) = (pix % w, pix / w);
        let jx: f64 = rng.random_range(0.0..1.0);
        let jy: f64 = rng.random_range(0.0..1.0);
        set.push(Gaussian2D {
            pos: [px as f64 + jx, py as f64 + jy],
            log_scale: [log_scale, log_scale],
            rotation: 0.0,
            opacity_logit: 0.0,
            color: target.get(px, py),
            depth_key: i as f64,
        });
    }
    Ok(set)
}

/// Fits a fresh scene to `target`. Returns an error if the loss or any
/// parameter becomes non-finite.
pub fn train(target: &ImageBuffer, cfg: &TrainConfig) -> Result<TrainResult> {
    let mut set = init_from_image(target, cfg)?;
    let mut adam = AdamState::new(set.len(), cfg.betas, cfg.epsilon);
    let all = all_indices(set.len());
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let rendered = render(&set, &cfg.render)?;
        let (value, upstream) = combined_loss(&rendered, target, &cfg.loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        let grads = render_backward(&set, &cfg.render, &upstream)?;
        adam.step_masked(&mut set, &grads, &all, &cfg.learning_rates);
        if !set.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        loss_history.push(value);
    }
    Ok(TrainResult { set, loss_history })
}

/// Quantization-aware fine-tuning options. The quantization spec should be
/// pinned from the full trained set so every anchor shares one grid.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub quant: QuantSpec,
    pub learning_rates: LearningRates,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub render: RenderConfig,
}

impl FinetuneConfig {
    /// Defaults around a pinned quantization: a tenth of the base training
    /// learning rates, 500 iterations.
    pub fn new(quant: QuantSpec) -> Self {
        let base = LearningRates::default();
        Self {
            iterations: 500,
            quant,
            learning_rates: LearningRates {
                pos: base.pos * 0.1,
                log_scale: base.log_scale * 0.1,
                rotation: base.rotation * 0.1,
                opacity_logit: base.opacity_logit * 0.1,
                color: base.color * 0.1,
            },
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

/// Adapts a trained scene to its quantization grid. Each iteration draws one
/// anchor level uniformly, renders that level with all parameters passed
/// through quantize-dequantize, and applies the resulting gradients straight
/// through to the latent full-precision parameters of that level only.
pub fn finetune_stochastic(
    set: &GaussianSet,
    hierarchy: &AnchorHierarchy,
    target: &ImageBuffer,
    cfg: &FinetuneConfig,
) -> Result<TrainResult> {
    if set.len() as u32 != hierarchy.total() {
        return Err(invalid!(
            "set has {} gaussians but the hierarchy was built over {}",
            set.len(),
            hierarchy.total()
        ));
    }
    let mut latent = set.clone();
    let mut adam = AdamState::new(latent.len(), cfg.betas, cfg.epsilon);
    let all = all_indices(latent.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let level = rng.random_range(1..=hierarchy.num_levels());
        let subset = hierarchy.level(level)?;
        let mut deployed = latent.clone();
        quantize_in_place(&mut deployed, &all, &cfg.quant)?;
        let rendered = render_subset(&deployed, subset, &cfg.render)?;
        let (value, upstream) = combined_loss(&rendered, target, &cfg.loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        let grads = render_backward_subset(&deployed, subset, &cfg.render, &upstream)?;
        adam.step_masked(&mut latent, &grads, subset, &cfg.learning_rates);
        if !latent.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        loss_history.push(value);
    }
    Ok(TrainResult { set: latent, loss_history })
}

pub(crate) fn all_indices(n: usize) -> Vec<u32> {
    (0..n as u32).collect()
}
