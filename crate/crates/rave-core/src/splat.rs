//! 2D Gaussian primitives and the structure-of-arrays scene container.

use crate::error::{invalid, Result};

/// Number of attribute planes per gaussian (see [`Plane`]).
pub const PLANE_COUNT: usize = 10;

/// Number of differentiable parameters per gaussian (all planes except depth).
pub const GRAD_PARAMS: usize = 9;

/// Attribute planes in canonical serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Plane {
    PosX = 0,
    PosY = 1,
    LogScaleX = 2,
    LogScaleY = 3,
    Rotation = 4,
    OpacityLogit = 5,
    ColorR = 6,
    ColorG = 7,
    ColorB = 8,
    DepthKey = 9,
}

impl Plane {
    pub const ALL: [Plane; PLANE_COUNT] = [
        Plane::PosX,
        Plane::PosY,
        Plane::LogScaleX,
        Plane::LogScaleY,
        Plane::Rotation,
        Plane::OpacityLogit,
        Plane::ColorR,
        Plane::ColorG,
        Plane::ColorB,
        Plane::DepthKey,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One anisotropic 2D gaussian in unconstrained parameter space.
///
/// Scales live in log space and opacity as a logit; the constrained values
/// `exp(log_scale)` and `sigmoid(opacity_logit)` are produced at render time,
/// so gradient steps can never leave the valid domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    /// Center in pixel coordinates.
    pub pos: [f64; 2],
    /// Per-axis log standard deviations, pixels.
    pub log_scale: [f64; 2],
    /// Rotation of the scale frame, radians.
    pub rotation: f64,
    /// Opacity before the sigmoid.
    pub opacity_logit: f64,
    /// RGB color, clamped to [0, 1] at render time.
    pub color: [f64; 3],
    /// Compositing order key: smaller keys composite first (in front),
    /// ties broken by ascending index.
    pub depth_key: f64,
}

/// Scene container storing each attribute as a contiguous array.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    canvas_width: u32,
    canvas_height: u32,
    planes: [Vec<f64>; PLANE_COUNT],
}

impl GaussianSet {
    /// Creates an empty set for the given canvas.
    pub fn new(canvas_width: u32, canvas_height: u32) -> Result<Self> {
        if canvas_width == 0 || canvas_height == 0 {
            return Err(invalid!(
                "canvas dimensions must be positive, got {canvas_width}x{canvas_height}"
            ));
        }
        Ok(Self {
            canvas_width,
            canvas_height,
            planes: std::array::from_fn(|_| Vec::new()),
        })
    }

    pub fn from_gaussians(
        canvas_width: u32,
        canvas_height: u32,
        gaussians: impl IntoIterator<Item = Gaussian2D>,
    ) -> Result<Self> {
        let mut set = Self::new(canvas_width, canvas_height)?;
        for g in gaussians {
            set.push(g);
        }
        Ok(set)
    }

    pub fn push(&mut self, g: Gaussian2D) {
        self.planes[Plane::PosX.index()].push(g.pos[0]);
        self.planes[Plane::PosY.index()].push(g.pos[1]);
        self.planes[Plane::LogScaleX.index()].push(g.log_scale[0]);
        self.planes[Plane::LogScaleY.index()].push(g.log_scale[1]);
        self.planes[Plane::Rotation.index()].push(g.rotation);
        self.planes[Plane::OpacityLogit.index()].push(g.opacity_logit);
        self.planes[Plane::ColorR.index()].push(g.color[0]);
        self.planes[Plane::ColorG.index()].push(g.color[1]);
        self.planes[Plane::ColorB.index()].push(g.color[2]);
        self.planes[Plane::DepthKey.index()].push(g.depth_key);
    }

    pub fn len(&self) -> usize {
        self.planes[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn canvas_width(&self) -> u32 {
        self.canvas_width
    }

    pub fn canvas_height(&self) -> u32 {
        self.canvas_height
    }

    pub fn get(&self, i: usize) -> Gaussian2D {
        Gaussian2D {
            pos: [self.planes[0][i], self.planes[1][i]],
            log_scale: [self.planes[2][i], self.planes[3][i]],
            rotation: self.planes[4][i],
            opacity_logit: self.planes[5][i],
            color: [self.planes[6][i], self.planes[7][i], self.planes[8][i]],
            depth_key: self.planes[9][i],
        }
    }

    pub fn set(&mut self, i: usize, g: Gaussian2D) {
        self.planes[0][i] = g.pos[0];
        self.planes[1][i] = g.pos[1];
        self.planes[2][i] = g.log_scale[0];
        self.planes[3][i] = g.log_scale[1];
        self.planes[4][i] = g.rotation;
        self.planes[5][i] = g.opacity_logit;
        self.planes[6][i] = g.color[0];
        self.planes[7][i] = g.color[1];
        self.planes[8][i] = g.color[2];
        self.planes[9][i] = g.depth_key;
    }

    pub fn plane(&self, p: Plane) -> &[f64] {
        &self.planes[p.index()]
    }

    pub fn plane_mut(&mut self, p: Plane) -> &mut [f64] {
        &mut self.planes[p.index()]
    }

    /// Rounds every attribute through `f32`, matching model-file precision.
    ///
    /// Applied before measuring anchor rates or saving a checkpoint so that
    /// in-memory state and the state a reader will load quantize identically.
    pub fn round_to_f32(&mut self) {
        for plane in &mut self.planes {
            for v in plane.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// True when every attribute of every gaussian is finite.
    pub fn is_finite(&self) -> bool {
        self.planes.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Validates that `indices` is sorted, duplicate-free, and in range.
    pub fn check_subset(&self, indices: &[u32]) -> Result<()> {
        let n = self.len() as u32;
        let mut prev: Option<u32> = None;
        for &i in indices {
            if i >= n {
                return Err(invalid!("subset index {i} out of range for {n} gaussians"));
            }
            if let Some(p) = prev {
                if i <= p {
                    return Err(invalid!("subset indices must be strictly ascending ({p} then {i})"));
                }
            }
            prev = Some(i);
        }
        Ok(())
    }
}

/// 2x2 covariance derived from log-scales and rotation.
#[derive(Debug, Clone, Copy)]
pub struct Covariance2 {
    /// Row-major Σ = R diag(exp(2 s)) Rᵀ.
    pub sigma: [[f64; 2]; 2],
    /// Σ⁻¹, row-major.
    pub inverse: [[f64; 2]; 2],
    /// det Σ = exp(2 (s₀ + s₁)), always positive for finite inputs.
    pub det: f64,
}

/// Builds the covariance, its inverse, and determinant from raw parameters.
///
/// Σ is symmetric positive definite by construction. The inverse uses the
/// closed form adj(Σ)/det with the determinant computed as exp(2(s₀+s₁)),
/// which stays exact even when the assembled matrix entries would round.
pub fn covariance_from_params(log_scale: [f64; 2], rotation: f64) -> Result<Covariance2> {
    if !log_scale[0].is_finite() || !log_scale[1].is_finite() || !rotation.is_finite() {
        return Err(invalid!(
            "non-finite covariance parameters: log_scale=({}, {}), rotation={}",
            log_scale[0],
            log_scale[1],
            rotation
        ));
    }
    let (sin, cos) = rotation.sin_cos();
    let v0 = (2.0 * log_scale[0]).exp();
    let v1 = (2.0 * log_scale[1]).exp();
    let a = cos * cos * v0 + sin * sin * v1;
    let b = sin * cos * (v0 - v1);
    let d = sin * sin * v0 + cos * cos * v1;
    let det = (2.0 * (log_scale[0] + log_scale[1])).exp();
    if det == 0.0 || !det.is_finite() {
        return Err(invalid!("covariance determinant {det} out of range (log_scale too extreme)"));
    }
    let inv = [[d / det, -b / det], [-b / det, a / det]];
    Ok(Covariance2 { sigma: [[a, b], [b, d]], inverse: inv, det })
}

/// Evaluates the unnormalized gaussian `exp(-0.5 dᵀ Σ⁻¹ d)` at `x`.
pub fn eval_gaussian(g: &Gaussian2D, x: [f64; 2]) -> Result<f64> {
    let cov = covariance_from_params(g.log_scale, g.rotation)?;
    let d = [x[0] - g.pos[0], x[1] - g.pos[1]];
    let q = mahalanobis_sq(&cov.inverse, d);
    Ok((-0.5 * q).exp())
}

/// Squared Mahalanobis distance dᵀ M d for symmetric M.
pub(crate) fn mahalanobis_sq(m: &[[f64; 2]; 2], d: [f64; 2]) -> f64 {
    d[0] * d[0] * m[0][0] + 2.0 * d[0] * d[1] * m[0][1] + d[1] * d[1] * m[1][1]
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-parameter gradients for the nine differentiable attributes.
///
/// Arrays are indexed by gaussian and cover the full set even when only a
/// subset was rendered; untouched entries stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub pos_x: Vec<f64>,
    pub pos_y: Vec<f64>,
    pub log_scale_x: Vec<f64>,
    pub log_scale_y: Vec<f64>,
    pub rotation: Vec<f64>,
    pub opacity_logit: Vec<f64>,
    pub color_r: Vec<f64>,
    pub color_g: Vec<f64>,
    pub color_b: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            pos_x: vec![0.0; n],
            pos_y: vec![0.0; n],
            log_scale_x: vec![0.0; n],
            log_scale_y: vec![0.0; n],
            rotation: vec![0.0; n],
            opacity_logit: vec![0.0; n],
            color_r: vec![0.0; n],
            color_g: vec![0.0; n],
            color_b: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.pos_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos_x.is_empty()
    }

    pub fn arrays(&self) -> [&[f64]; GRAD_PARAMS] {
        [
            &self.pos_x,
            &self.pos_y,
            &self.log_scale_x,
            &self.log_scale_y,
            &self.rotation,
            &self.opacity_logit,
            &self.color_r,
            &self.color_g,
            &self.color_b,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<f64>; GRAD_PARAMS] {
        [
            &mut self.pos_x,
            &mut self.pos_y,
            &mut self.log_scale_x,
            &mut self.log_scale_y,
            &mut self.rotation,
            &mut self.opacity_logit,
            &mut self.color_r,
            &mut self.color_g,
            &mut self.color_b,
        ]
    }

    /// Adds `other` into `self`, used when merging per-chunk partials.
    pub fn accumulate(&mut self, other: &Self) {
        let theirs = other.arrays();
        for (mine, other_arr) in self.arrays_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(other_arr) {
                *a += b;
            }
        }
    }

    /// Euclidean norm of gaussian `i`'s nine-parameter gradient.
    pub fn norm(&self, i: usize) -> f64 {
        self.arrays()
            .iter()
            .map(|arr| arr[i] * arr[i])
            .sum::<f64>()
            .sqrt()
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|arr| arr.iter().all(|v| v.is_finite()))
    }
}

/// Arithmetic precision of the forward compositing kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

/// Rendering options.
#[derive(Debug, Clone)]
pub struct RenderConfig {
    /// Color composited under the final transmittance.
    pub background: [f64; 3],
    /// Support truncation radius, in standard deviations.
    pub cutoff_sigmas: f64,
    /// Forward kernel precision; the backward pass always runs in double.
    pub precision: Precision,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { background: [1.0, 1.0, 1.0], cutoff_sigmas: 3.0, precision: Precision::Double }
    }
}

/// Upper bound on any composited alpha; keeps transmittance positive so the
/// backward pass never divides by zero.
pub const ALPHA_MAX: f64 = 0.999;
