//! Shared helpers for integration tests: deterministic scene generation and
//! central finite differences used as the gradient oracle.

#![allow(dead_code)]

use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rave_core::{Gaussian2D, GaussianSet, ImageBuffer};

/// Central-difference step. Small enough for O(h^2) truncation error to sit
/// well under the comparison tolerance, large enough to stay above roundoff.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floored denominator, so near-zero gradient pairs do
/// not divide into noise.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite difference of `f` with respect to a scalar perturbation.
pub fn central_diff(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

/// A scene with smooth, well-separated parameters: opacities away from the
/// alpha clamp, colors away from the clamp boundaries, anisotropic scales,
/// and distinct depth keys, so the functional is differentiable at the point
/// being probed.
pub fn random_scene(seed: u64, n: usize, width: u32, height: u32) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n).map(|i| {
        let sx: f64 = rng.random_range(1.0..3.0);
        let sy: f64 = rng.random_range(1.0..3.0) * 1.37;
        Gaussian2D {
            pos: [
                rng.random_range(2.0..width as f64 - 2.0),
                rng.random_range(2.0..height as f64 - 2.0),
            ],
            log_scale: [sx.ln(), sy.ln()],
            rotation: rng.random_range(-3.0..3.0),
            opacity_logit: rng.random_range(-1.5..1.5),
            color: [
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
            ],
            depth_key: i as f64 + rng.random_range(0.0..0.5),
        }
    });
    GaussianSet::from_gaussians(width, height, gaussians).unwrap()
}

/// Smooth deterministic target with edges and texture, for loss tests.
pub fn pattern_image(width: usize, height: usize, salt: u64) -> ImageBuffer {
    ImageBuffer::from_fn(width, height, |x, y| {
        let fx = x as f64 / width as f64;
        let fy = y as f64 / height as f64;
        let hash = ((x as u64).wrapping_mul(131) ^ (y as u64).wrapping_mul(73) ^ salt)
            .wrapping_mul(0x9E3779B97F4A7C15);
        let r = (hash >> 40) as f64 / (1u64 << 24) as f64;
        let r2 = ((hash >> 16) & 0xFFFFFF) as f64 / (1u64 << 24) as f64;
        [
            (0.5 + 0.3 * (7.1 * fx + 2.3 * fy).sin() + 0.06 * r).clamp(0.02, 0.98),
            (0.45 + 0.25 * (4.0 * fy).cos() + 0.05 * r2).clamp(0.02, 0.98),
            (0.3 + 0.35 * fx + 0.15 * (9.0 * fx * fy).sin() + 0.04 * (r - r2)).clamp(0.02, 0.98),
        ]
    })
    .unwrap()
}

/// A fixed linear functional of an image: sum of pixel dot products with a
/// deterministic weight field. Differentiating it through the renderer gives
/// exactly `render_backward` with the weight field as upstream gradient.
pub fn weight_field(width: usize, height: usize) -> ImageBuffer {
    ImageBuffer::from_fn(width, height, |x, y| {
        let fx = x as f64 * 0.37;
        let fy = y as f64 * 0.23;
        [(fx + fy).sin() + 1.3, (fx - fy).cos() - 0.4, (0.5 * fx).sin() * (0.8 * fy).cos() + 0.2]
    })
    .unwrap()
}

pub fn dot_images(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(pa, pb)| pa[0] * pb[0] + pa[1] * pb[1] + pa[2] * pb[2])
        .sum()
}

/// Names for the nine differentiable parameter planes, for test diagnostics.
pub const PARAM_NAMES: [&str; 9] = [
    "pos_x",
    "pos_y",
    "log_scale_x",
    "log_scale_y",
    "rotation",
    "opacity_logit",
    "color_r",
    "color_g",
    "color_b",
];

/// Path of the committed 64x64 training fixture.
pub fn fixture_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/fixture.png")
}

/// Loads the committed training fixture.
pub fn load_fixture() -> ImageBuffer {
    rave_core::load_image(&fixture_path()).expect("committed fixture image")
}

fn hash01(x: usize, y: usize, salt: u64) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9e3779b97f4a7c15)
        ^ (y as u64).wrapping_mul(0xc2b2ae3d27d4eb4f)
        ^ salt;
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Synthesizes the training fixture: a small landscape with a graded sky, a
/// soft sun, rolling hills, a dark foreground mound, fine texture, and a
/// vignette. Smooth regions, sharp silhouettes, and grain together exercise
/// structure-aware initialization, SSIM, and the importance ranking.
pub fn synth_fixture() -> ImageBuffer {
    let n = 64usize;
    let mut img = ImageBuffer::from_fn(n, n, |x, y| {
        let fx = x as f64 / (n - 1) as f64;
        let fy = y as f64 / (n - 1) as f64;
        let horizon = 0.58 + 0.05 * (4.2 * fx).sin() + 0.02 * (9.5 * fx + 1.0).sin();
        let mut px = if fy < horizon {
            let t = (fy / horizon).powf(1.4);
            let mut sky = lerp3([0.30, 0.47, 0.80], [0.86, 0.76, 0.62], t);
            let dx = fx - 0.72;
            let dy = fy - 0.22;
            let sun = (-(dx * dx + dy * dy) / 0.012).exp();
            sky = lerp3(sky, [1.0, 0.92, 0.70], sun.min(1.0));
            sky
        } else {
            let t = (fy - horizon) / (1.0 - horizon);
            let mut ground = lerp3([0.38, 0.46, 0.20], [0.12, 0.18, 0.08], t);
            let furrow = 0.05 * (34.0 * fx + 7.0 * (3.1 * fy).sin()).sin() * (1.0 - t);
            for c in &mut ground {
                *c += furrow;
            }
            ground
        };
        let ddx = fx - 0.22;
        let ddy = fy - 0.86;
        let mound = (-(ddx * ddx * 2.2 + ddy * ddy * 9.0) / 0.02).exp();
        px = lerp3(px, [0.05, 0.06, 0.04], (2.2 * mound).min(1.0));
        let r2 = (fx - 0.5) * (fx - 0.5) + (fy - 0.5) * (fy - 0.5);
        let vignette = 1.0 - 0.30 * r2;
        [px[0] * vignette, px[1] * vignette, px[2] * vignette]
    })
    .unwrap();
    // Box-smoothed grain on top, clamped to the displayable range.
    let grain = |x: usize, y: usize| {
        let mut acc = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let sx = (x as i64 + dx).clamp(0, n as i64 - 1) as usize;
                let sy = (y as i64 + dy).clamp(0, n as i64 - 1) as usize;
                acc += hash01(sx, sy, 0x5eed);
            }
        }
        (acc / 9.0 - 0.5) * 0.06
    };
    for y in 0..n {
        for x in 0..n {
            let g = grain(x, y);
            let mut px = img.get(x, y);
            for c in &mut px {
                *c = (*c + g).clamp(0.0, 1.0);
            }
            img.set(x, y, px);
        }
    }
    img
}

/// Applies a perturbation to one parameter of one gaussian.
pub fn perturb(set: &GaussianSet, i: usize, param: usize, delta: f64) -> GaussianSet {
    let mut s = set.clone();
    let mut g = s.get(i);
    match param {
        0 => g.pos[0] += delta,
        1 => g.pos[1] += delta,
        2 => g.log_scale[0] += delta,
        3 => g.log_scale[1] += delta,
        4 => g.rotation += delta,
        5 => g.opacity_logit += delta,
        6 => g.color[0] += delta,
        7 => g.color[1] += delta,
        8 => g.color[2] += delta,
        _ => unreachable!(),
    }
    s.set(i, g);
    s
}
