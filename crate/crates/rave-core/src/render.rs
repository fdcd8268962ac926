//! Differentiable front-to-back compositing of 2D gaussians.
//!
//! The forward pass sorts gaussians by `(depth_key, index)`, truncates each
//! gaussian's support at a Mahalanobis cutoff, and alpha-composites over a
//! background color. Rows are rendered in parallel and collected in order, so
//! output is bit-identical for any thread count. The backward pass replays
//! each pixel's contributor list and runs a reverse transmittance scan,
//! always in double precision.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::image::ImageBuffer;
use crate::splat::{
    covariance_from_params, mahalanobis_sq, sigmoid, GaussianSet, ParamGrads, Precision,
    RenderConfig, ALPHA_MAX,
};

/// Pixel grid size used to bin gaussians by bounding box.
const TILE: usize = 16;

/// Rows per parallel work unit in the backward pass. Fixed as a function of
/// image height only, so the chunk merge order (and therefore every summed
/// gradient bit) does not depend on the thread count.
fn backward_chunk_rows(height: usize) -> usize {
    (height.div_ceil(64)).max(4)
}

/// Minimal float abstraction so the forward kernel can run in either
/// precision without duplicating the compositing loop.
trait Real:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn min(self, other: Self) -> Self;
    const ZERO: Self;
    const ONE: Self;
    const HALF_NEG: Self;
    const TWO: Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn min(self, other: Self) -> Self {
                self.min(other)
            }
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const HALF_NEG: Self = -0.5;
            const TWO: Self = 2.0;
        }
    };
}
impl_real!(f32);
impl_real!(f64);

/// One gaussian with render-time quantities precomputed, in compositing order.
struct Prepared {
    /// Index into the original set.
    index: u32,
    pos: [f64; 2],
    inv: [[f64; 2]; 2],
    opacity: f64,
    /// Clamped color used for compositing.
    color: [f64; 3],
    /// Per channel, whether the clamp passes gradient through.
    color_free: [bool; 3],
    /// cos/sin of the rotation and per-axis variances, kept for the backward
    /// chain through the covariance.
    cos: f64,
    sin: f64,
    var: [f64; 2],
    /// Inclusive pixel bounding box; gaussians with no canvas overlap are
    /// dropped during preparation.
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

struct Scene {
    gaussians: Vec<Prepared>,
    /// Per tile, positions into `gaussians` (already depth sorted).
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    width: usize,
    height: usize,
    cutoff_sq: f64,
    background: [f64; 3],
}

fn check_config(cfg: &RenderConfig) -> Result<()> {
    if !cfg.cutoff_sigmas.is_finite() || cfg.cutoff_sigmas <= 0.0 {
        return Err(invalid!("cutoff must be a positive number of sigmas, got {}", cfg.cutoff_sigmas));
    }
    if cfg.background.iter().any(|c| !c.is_finite()) {
        return Err(invalid!("background color must be finite"));
    }
    Ok(())
}

fn prepare(set: &GaussianSet, indices: Option<&[u32]>, cfg: &RenderConfig) -> Result<Scene> {
    check_config(cfg)?;
    if !set.is_finite() {
        return Err(invalid!("gaussian set contains non-finite parameters"));
    }
    if let Some(idx) = indices {
        set.check_subset(idx)?;
    }
    let width = set.canvas_width() as usize;
    let height = set.canvas_height() as usize;
    let cutoff_sq = cfg.cutoff_sigmas * cfg.cutoff_sigmas;

    let mut order: Vec<u32> = match indices {
        Some(idx) => idx.to_vec(),
        None => (0..set.len() as u32).collect(),
    };
    let depth = |i: u32| set.get(i as usize).depth_key;
    order.sort_by(|&a, &b| depth(a).total_cmp(&depth(b)).then(a.cmp(&b)));

    let mut gaussians = Vec::with_capacity(order.len());
    for i in order {
        let g = set.get(i as usize);
        let cov = covariance_from_params(g.log_scale, g.rotation)?;
        // Conservative circular support bound from the largest eigenvalue.
        let tr = cov.sigma[0][0] + cov.sigma[1][1];
        let gap = cov.sigma[0][0] - cov.sigma[1][1];
        let lam_max = 0.5 * (tr + (gap * gap + 4.0 * cov.sigma[0][1] * cov.sigma[0][1]).sqrt());
        let radius = cfg.cutoff_sigmas * lam_max.sqrt();
        let x0f = (g.pos[0] - radius - 0.5).floor();
        let x1f = (g.pos[0] + radius - 0.5).ceil();
        let y0f = (g.pos[1] - radius - 0.5).floor();
        let y1f = (g.pos[1] + radius - 0.5).ceil();
        if x1f < 0.0 || y1f < 0.0 || x0f > (width - 1) as f64 || y0f > (height - 1) as f64 {
            continue;
        }
        let (sin, cos) = g.rotation.sin_cos();
        let raw = g.color;
        gaussians.push(Prepared {
            index: i,
            pos: g.pos,
            inv: cov.inverse,
            opacity: sigmoid(g.opacity_logit),
            color: [
                raw[0].clamp(0.0, 1.0),
                raw[1].clamp(0.0, 1.0),
                raw[2].clamp(0.0, 1.0),
            ],
            color_free: [
                (0.0..=1.0).contains(&raw[0]),
                (0.0..=1.0).contains(&raw[1]),
                (0.0..=1.0).contains(&raw[2]),
            ],
            cos,
            sin,
            var: [(2.0 * g.log_scale[0]).exp(), (2.0 * g.log_scale[1]).exp()],
            x0: x0f.max(0.0) as usize,
            x1: x1f.min((width - 1) as f64) as usize,
            y0: y0f.max(0.0) as usize,
            y1: y1f.min((height - 1) as f64) as usize,
        });
    }

    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (slot, p) in gaussians.iter().enumerate() {
        for ty in p.y0 / TILE..=p.y1 / TILE {
            for tx in p.x0 / TILE..=p.x1 / TILE {
                tiles[ty * tiles_x + tx].push(slot as u32);
            }
        }
    }

    Ok(Scene {
        gaussians,
        tiles,
        tiles_x,
        width,
        height,
        cutoff_sq,
        background: cfg.background,
    })
}

impl Scene {
    fn tile_list(&self, x: usize, y: usize) -> &[u32] {
        &self.tiles[(y / TILE) * self.tiles_x + x / TILE]
    }

    fn composite_pixel<T: Real>(&self, x: usize, y: usize) -> [f64; 3] {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        let cutoff = T::from_f64(self.cutoff_sq);
        let alpha_max = T::from_f64(ALPHA_MAX);
        let mut acc = [T::ZERO; 3];
        let mut t = T::ONE;
        for &slot in self.tile_list(x, y) {
            let g = &self.gaussians[slot as usize];
            if x < g.x0 || x > g.x1 || y < g.y0 || y > g.y1 {
                continue;
            }
            let dx = T::from_f64(px - g.pos[0]);
            let dy = T::from_f64(py - g.pos[1]);
            let m00 = T::from_f64(g.inv[0][0]);
            let m01 = T::from_f64(g.inv[0][1]);
            let m11 = T::from_f64(g.inv[1][1]);
            let q = dx * dx * m00 + T::TWO * dx * dy * m01 + dy * dy * m11;
            if q.to_f64() > cutoff.to_f64() {
                continue;
            }
            let gval = (T::HALF_NEG * q).exp();
            let alpha = (T::from_f64(g.opacity) * gval).min(alpha_max);
            for c in 0..3 {
                acc[c] = acc[c] + t * alpha * T::from_f64(g.color[c]);
            }
            t = t * (T::ONE - alpha);
            if t.to_f64() == 0.0 {
                break;
            }
        }
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (acc[c] + t * T::from_f64(self.background[c])).to_f64();
        }
        out
    }

    fn render<T: Real>(&self) -> Vec<[f64; 3]> {
        let rows: Vec<Vec<[f64; 3]>> = (0..self.height)
            .into_par_iter()
            .map(|y| (0..self.width).map(|x| self.composite_pixel::<T>(x, y)).collect())
            .collect();
        let mut pixels = Vec::with_capacity(self.width * self.height);
        for row in rows {
            pixels.extend(row);
        }
        pixels
    }
}

/// Renders the full set.
pub fn render(set: &GaussianSet, cfg: &RenderConfig) -> Result<ImageBuffer> {
    render_indices(set, None, cfg)
}

/// Renders only the gaussians named by `indices` (sorted, duplicate-free).
pub fn render_subset(set: &GaussianSet, indices: &[u32], cfg: &RenderConfig) -> Result<ImageBuffer> {
    render_indices(set, Some(indices), cfg)
}

fn render_indices(set: &GaussianSet, indices: Option<&[u32]>, cfg: &RenderConfig) -> Result<ImageBuffer> {
    let scene = prepare(set, indices, cfg)?;
    let pixels = match cfg.precision {
        Precision::Single => scene.render::<f32>(),
        Precision::Double => scene.render::<f64>(),
    };
    ImageBuffer::from_pixels(scene.width, scene.height, pixels)
}

/// One pixel contribution recorded during the backward replay.
struct Contrib {
    slot: u32,
    alpha: f64,
    gval: f64,
    /// Transmittance before this contributor.
    t: f64,
}

/// Gradients of a scalar loss with respect to all nine differentiable
/// parameter planes, given the loss gradient with respect to each rendered
/// pixel. Runs in double precision regardless of the forward setting.
pub fn render_backward(
    set: &GaussianSet,
    cfg: &RenderConfig,
    upstream: &ImageBuffer,
) -> Result<ParamGrads> {
    render_backward_indices(set, None, cfg, upstream)
}

/// Backward pass restricted to a rendered subset; gradient arrays still span
/// the full set, with zeros outside the subset.
pub fn render_backward_subset(
    set: &GaussianSet,
    indices: &[u32],
    cfg: &RenderConfig,
    upstream: &ImageBuffer,
) -> Result<ParamGrads> {
    render_backward_indices(set, Some(indices), cfg, upstream)
}

fn render_backward_indices(
    set: &GaussianSet,
    indices: Option<&[u32]>,
    cfg: &RenderConfig,
    upstream: &ImageBuffer,
) -> Result<ParamGrads> {
    let scene = prepare(set, indices, cfg)?;
    if upstream.width() != scene.width || upstream.height() != scene.height {
        return Err(invalid!(
            "upstream gradient is {}x{} but canvas is {}x{}",
            upstream.width(),
            upstream.height(),
            scene.width,
            scene.height
        ));
    }
    let n = set.len();
    let chunk_rows = backward_chunk_rows(scene.height);
    let row_ranges: Vec<(usize, usize)> = (0..scene.height)
        .step_by(chunk_rows)
        .map(|y0| (y0, (y0 + chunk_rows).min(scene.height)))
        .collect();

    let partials: Vec<ParamGrads> = row_ranges
        .into_par_iter()
        .map(|(y0, y1)| {
            let mut grads = ParamGrads::zeros(n);
            let mut contribs: Vec<Contrib> = Vec::new();
            for y in y0..y1 {
                for x in 0..scene.width {
                    backward_pixel(&scene, x, y, upstream.get(x, y), &mut contribs, &mut grads);
                }
            }
            grads
        })
        .collect();

    let mut grads = ParamGrads::zeros(n);
    for p in &partials {
        grads.accumulate(p);
    }
    Ok(grads)
}

fn backward_pixel(
    scene: &Scene,
    x: usize,
    y: usize,
    d_out: [f64; 3],
    contribs: &mut Vec<Contrib>,
    grads: &mut ParamGrads,
) {
    let px = x as f64 + 0.5;
    let py = y as f64 + 0.5;

    contribs.clear();
    let mut t = 1.0;
    for &slot in scene.tile_list(x, y) {
        let g = &scene.gaussians[slot as usize];
        if x < g.x0 || x > g.x1 || y < g.y0 || y > g.y1 {
            continue;
        }
        let d = [px - g.pos[0], py - g.pos[1]];
        let q = mahalanobis_sq(&g.inv, d);
        if q > scene.cutoff_sq {
            continue;
        }
        let gval = (-0.5 * q).exp();
        let alpha = (g.opacity * gval).min(ALPHA_MAX);
        contribs.push(Contrib { slot, alpha, gval, t });
        t *= 1.0 - alpha;
    }

    // Reverse transmittance scan: g_t holds dL/dT at the boundary after the
    // current contributor, seeded by the background term.
    let mut g_t = d_out[0] * scene.background[0]
        + d_out[1] * scene.background[1]
        + d_out[2] * scene.background[2];
    for con in contribs.iter().rev() {
        let g = &scene.gaussians[con.slot as usize];
        let i = g.index as usize;
        let dot_c = d_out[0] * g.color[0] + d_out[1] * g.color[1] + d_out[2] * g.color[2];

        let weight = con.t * con.alpha;
        let color_grads = [
            grads.color_r.as_mut_slice(),
            grads.color_g.as_mut_slice(),
            grads.color_b.as_mut_slice(),
        ];
        for (c, arr) in color_grads.into_iter().enumerate() {
            if g.color_free[c] {
                arr[i] += d_out[c] * weight;
            }
        }

        let d_alpha = con.t * (dot_c - g_t);
        g_t = dot_c * con.alpha + g_t * (1.0 - con.alpha);

        // The alpha clamp zeroes the opacity and shape chain when active.
        if g.opacity * con.gval >= ALPHA_MAX {
            continue;
        }

        grads.opacity_logit[i] += d_alpha * con.gval * g.opacity * (1.0 - g.opacity);

        let d_q = d_alpha * g.opacity * con.gval * -0.5;
        let d = [px - g.pos[0], py - g.pos[1]];
        let u = [
            g.inv[0][0] * d[0] + g.inv[0][1] * d[1],
            g.inv[1][0] * d[0] + g.inv[1][1] * d[1],
        ];
        grads.pos_x[i] += d_q * -2.0 * u[0];
        grads.pos_y[i] += d_q * -2.0 * u[1];

        // w = Rᵀ u rotates the whitened offset into the gaussian frame, where
        // the covariance gradient wrt each log-scale is diagonal.
        let w = [g.cos * u[0] + g.sin * u[1], -g.sin * u[0] + g.cos * u[1]];
        grads.log_scale_x[i] += -2.0 * d_q * g.var[0] * w[0] * w[0];
        grads.log_scale_y[i] += -2.0 * d_q * g.var[1] * w[1] * w[1];

        let sin2 = 2.0 * g.sin * g.cos;
        let cos2 = g.cos * g.cos - g.sin * g.sin;
        grads.rotation[i] += -d_q
            * (g.var[0] - g.var[1])
            * ((u[1] * u[1] - u[0] * u[0]) * sin2 + 2.0 * u[0] * u[1] * cos2);
    }
}
