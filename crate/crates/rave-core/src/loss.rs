//! Image losses and quality metrics with analytic gradients.
//!
//! The training objective is `(1 - lambda) * L1 + lambda * (1 - SSIM)`. SSIM
//! uses Gaussian-weighted windows evaluated only where the window fits
//! entirely inside the image, computed per channel and averaged. Gradients
//! with respect to the first image are exact: L1 by sign (zero at ties), SSIM
//! by differentiating the per-window statistics and scattering back through
//! the adjoint of the window convolution.

use crate::error::{invalid, Result};
use crate::image::{channel, check_pair, ImageBuffer};

/// SSIM parameters.
#[derive(Debug, Clone)]
pub struct SsimConfig {
    /// Square window side length.
    pub window: usize,
    /// Gaussian weighting sigma, pixels.
    pub sigma: f64,
    /// Luminance stabilizer, (0.01 * dynamic range)^2.
    pub c1: f64,
    /// Contrast stabilizer, (0.03 * dynamic range)^2.
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

/// Combined objective parameters.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight of the SSIM term, in [0, 1].
    pub lambda: f64,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.2, ssim: SsimConfig::default() }
    }
}

/// Mean absolute error over all pixels and channels, with its gradient with
/// respect to `a`. The subgradient at exact ties is zero.
pub fn l1_loss(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    check_pair(a, b)?;
    let n = (a.pixels().len() * 3) as f64;
    let mut total = 0.0;
    let mut grad = ImageBuffer::zeros(a.width(), a.height())?;
    for (i, (pa, pb)) in a.pixels().iter().zip(b.pixels()).enumerate() {
        let mut g = [0.0; 3];
        for c in 0..3 {
            let d = pa[c] - pb[c];
            total += d.abs();
            g[c] = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
        grad.pixels_mut()[i] = g;
    }
    Ok((total / n, grad))
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    let n = (a.pixels().len() * 3) as f64;
    let mut total = 0.0;
    for (pa, pb) in a.pixels().iter().zip(b.pixels()) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            total += d * d;
        }
    }
    Ok(total / n)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range. Identical images
/// yield `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * m.log10())
}

/// Normalized 1D Gaussian window weights.
fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let center = (window - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode 1D convolution along rows: output width shrinks by K-1.
fn conv_rows(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let vw = w - k.len() + 1;
    let mut out = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += kj * src[y * w + x + j];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Valid-mode 1D convolution along columns: output height shrinks by K-1.
fn conv_cols(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let vh = h - k.len() + 1;
    let mut out = vec![0.0; w * vh];
    for y in 0..vh {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += kj * src[(y + j) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Separable valid convolution with the same kernel on both axes.
fn conv_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let rows = conv_rows(src, w, h, k);
    conv_cols(&rows, w - k.len() + 1, h, k)
}

/// Adjoint of [`conv_rows`]: scatters window values back to full width.
fn adjoint_rows(src: &[f64], vw: usize, h: usize, k: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..vw {
            let v = src[y * vw + x];
            for (j, kj) in k.iter().enumerate() {
                out[y * w + x + j] += kj * v;
            }
        }
    }
    out
}

/// Adjoint of [`conv_cols`].
fn adjoint_cols(src: &[f64], w: usize, vh: usize, k: &[f64], h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..vh {
        for x in 0..w {
            let v = src[y * w + x];
            for (j, kj) in k.iter().enumerate() {
                out[(y + j) * w + x] += kj * v;
            }
        }
    }
    out
}

/// Adjoint of [`conv_valid`]: maps a window-space field to image space.
fn adjoint_valid(src: &[f64], vw: usize, vh: usize, k: &[f64], w: usize, h: usize) -> Vec<f64> {
    let cols = adjoint_cols(src, vw, vh, k, h);
    adjoint_rows(&cols, vw, h, k, w)
}

fn check_ssim_config(a: &ImageBuffer, cfg: &SsimConfig) -> Result<()> {
    if cfg.window == 0 {
        return Err(invalid!("SSIM window must be positive"));
    }
    if !cfg.sigma.is_finite() || cfg.sigma <= 0.0 {
        return Err(invalid!("SSIM sigma must be positive, got {}", cfg.sigma));
    }
    if a.width() < cfg.window || a.height() < cfg.window {
        return Err(invalid!(
            "image {}x{} is smaller than the {}-pixel SSIM window",
            a.width(),
            a.height(),
            cfg.window
        ));
    }
    Ok(())
}

/// Mean SSIM over valid windows and channels, with the gradient of that mean
/// with respect to `a`.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> Result<(f64, ImageBuffer)> {
    check_pair(a, b)?;
    check_ssim_config(a, cfg)?;
    let (w, h) = (a.width(), a.height());
    let k = gaussian_kernel(cfg.window, cfg.sigma);
    let vw = w - cfg.window + 1;
    let vh = h - cfg.window + 1;
    let n_windows = (vw * vh) as f64;

    let mut total = 0.0;
    let mut grad = ImageBuffer::zeros(w, h)?;
    for c in 0..3 {
        let xa = channel(a, c);
        let xb = channel(b, c);
        let xaa: Vec<f64> = xa.iter().map(|v| v * v).collect();
        let xbb: Vec<f64> = xb.iter().map(|v| v * v).collect();
        let xab: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p * q).collect();

        let mu_a = conv_valid(&xa, w, h, &k);
        let mu_b = conv_valid(&xb, w, h, &k);
        let m_aa = conv_valid(&xaa, w, h, &k);
        let m_bb = conv_valid(&xbb, w, h, &k);
        let m_ab = conv_valid(&xab, w, h, &k);

        // Per-window coefficient fields for the gradient: dS/da_j collects a
        // constant term, a term linear in b_j, and a term linear in a_j.
        let mut c_const = vec![0.0; vw * vh];
        let mut c_b = vec![0.0; vw * vh];
        let mut c_a = vec![0.0; vw * vh];
        let mut sum_s = 0.0;
        for p in 0..vw * vh {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let var_a = m_aa[p] - ma * ma;
            let var_b = m_bb[p] - mb * mb;
            let cov = m_ab[p] - ma * mb;
            let a1 = 2.0 * ma * mb + cfg.c1;
            let a2 = 2.0 * cov + cfg.c2;
            let b1 = ma * ma + mb * mb + cfg.c1;
            let b2 = var_a + var_b + cfg.c2;
            let s = (a1 * a2) / (b1 * b2);
            sum_s += s;
            c_const[p] = mb * (a2 - a1) / (b1 * b2) + s * ma * (1.0 / b2 - 1.0 / b1);
            c_b[p] = a1 / (b1 * b2);
            c_a[p] = -s / b2;
        }
        total += sum_s / n_windows;

        let g_const = adjoint_valid(&c_const, vw, vh, &k, w, h);
        let g_b = adjoint_valid(&c_b, vw, vh, &k, w, h);
        let g_a = adjoint_valid(&c_a, vw, vh, &k, w, h);
        let scale = 2.0 / (n_windows * 3.0);
        for (j, px) in grad.pixels_mut().iter_mut().enumerate() {
            px[c] = scale * (g_const[j] + xb[j] * g_b[j] + xa[j] * g_a[j]);
        }
    }
    Ok((total / 3.0, grad))
}

/// Training objective `(1 - lambda) * L1 + lambda * (1 - SSIM)` and its
/// gradient with respect to `a`.
pub fn combined_loss(a: &ImageBuffer, b: &ImageBuffer, cfg: &LossConfig) -> Result<(f64, ImageBuffer)> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(invalid!("lambda must be in [0, 1], got {}", cfg.lambda));
    }
    let (l1, g1) = l1_loss(a, b)?;
    let (s, gs) = ssim(a, b, &cfg.ssim)?;
    let value = (1.0 - cfg.lambda) * l1 + cfg.lambda * (1.0 - s);
    let mut grad = g1;
    for (gp, sp) in grad.pixels_mut().iter_mut().zip(gs.pixels()) {
        for c in 0..3 {
            gp[c] = (1.0 - cfg.lambda) * gp[c] - cfg.lambda * sp[c];
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn noise_image(w: usize, h: usize, salt: u64) -> ImageBuffer {
        // Cheap deterministic pattern with smooth and rough structure.
        ImageBuffer::from_fn(w, h, |x, y| {
            let fx = x as f64 / w as f64;
            let fy = y as f64 / h as f64;
            let hash = ((x as u64).wrapping_mul(31) ^ (y as u64).wrapping_mul(17) ^ salt)
                .wrapping_mul(0x9E3779B97F4A7C15);
            let r = (hash >> 40) as f64 / (1u64 << 24) as f64;
            [
                0.5 + 0.3 * (6.0 * fx).sin() * (4.0 * fy).cos(),
                0.4 + 0.2 * fy + 0.1 * r,
                0.6 - 0.25 * fx,
            ]
        })
        .unwrap()
    }

    #[test]
    fn identical_images_score_perfectly() {
        let a = noise_image(16, 16, 7);
        let (l1, _) = l1_loss(&a, &a).unwrap();
        let (s, sg) = ssim(&a, &a, &SsimConfig::default()).unwrap();
        let (c, _) = combined_loss(&a, &a, &LossConfig::default()).unwrap();
        assert_eq!(l1, 0.0);
        assert_relative_eq!(s, 1.0, max_relative = 1e-12);
        assert_relative_eq!(c, 0.0, epsilon = 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        // At an SSIM maximum the gradient vanishes.
        for p in sg.pixels() {
            for c in 0..3 {
                assert_relative_eq!(p[c], 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn constant_offset_images() {
        let a = ImageBuffer::filled(16, 16, [0.5; 3]).unwrap();
        let b = ImageBuffer::filled(16, 16, [0.6; 3]).unwrap();
        let (l1, g1) = l1_loss(&a, &b).unwrap();
        assert_relative_eq!(l1, 0.1, max_relative = 1e-12);
        // Every channel sits 0.1 below the target: uniform negative sign.
        let n = (16.0 * 16.0) * 3.0;
        for p in g1.pixels() {
            for c in 0..3 {
                assert_relative_eq!(p[c], -1.0 / n, max_relative = 1e-12);
            }
        }
        // Constant images: variances vanish, SSIM has the closed form
        // (2 mu_a mu_b + c1) c2 / ((mu_a^2 + mu_b^2 + c1) c2).
        let (s, _) = ssim(&a, &b, &SsimConfig::default()).unwrap();
        assert_relative_eq!(s, 0.6001 / 0.6101, max_relative = 1e-12);
        // MSE 0.01 over unit range is exactly 20 dB.
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, max_relative = 1e-12);
    }

    #[test]
    fn l1_subgradient_is_zero_at_ties() {
        let a = ImageBuffer::filled(16, 16, [0.5; 3]).unwrap();
        let mut b = a.clone();
        b.set(3, 3, [0.7, 0.5, 0.3]);
        let (_, g) = l1_loss(&a, &b).unwrap();
        assert_eq!(g.get(0, 0), [0.0; 3]);
        let p = g.get(3, 3);
        assert!(p[0] < 0.0 && p[1] == 0.0 && p[2] > 0.0);
    }

    #[test]
    fn ssim_matches_naive_windows() {
        let a = noise_image(20, 18, 1);
        let b = noise_image(20, 18, 2);
        let cfg = SsimConfig::default();
        let (fast, _) = ssim(&a, &b, &cfg).unwrap();
        assert_relative_eq!(fast, naive_ssim(&a, &b, &cfg), max_relative = 1e-10);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = noise_image(24, 24, 3);
        let b = noise_image(24, 24, 4);
        let cfg = SsimConfig::default();
        let (ab, _) = ssim(&a, &b, &cfg).unwrap();
        let (ba, _) = ssim(&b, &a, &cfg).unwrap();
        assert_relative_eq!(ab, ba, max_relative = 1e-12);
        assert!(ab < 1.0 && ab > -1.0);
    }

    #[test]
    fn rejects_undersized_images() {
        let a = ImageBuffer::filled(8, 8, [0.5; 3]).unwrap();
        assert!(ssim(&a, &a, &SsimConfig::default()).is_err());
        let b = ImageBuffer::filled(8, 9, [0.5; 3]).unwrap();
        assert!(l1_loss(&a, &b).is_err());
    }

    #[test]
    fn combined_loss_mixes_terms() {
        let a = noise_image(16, 16, 5);
        let b = noise_image(16, 16, 6);
        let (l1, _) = l1_loss(&a, &b).unwrap();
        let (s, _) = ssim(&a, &b, &SsimConfig::default()).unwrap();
        let cfg = LossConfig::default();
        let (c, _) = combined_loss(&a, &b, &cfg).unwrap();
        assert_relative_eq!(c, 0.8 * l1 + 0.2 * (1.0 - s), max_relative = 1e-12);
    }

    /// Direct per-window SSIM used as the oracle for the separable path.
    fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> f64 {
        let k = gaussian_kernel(cfg.window, cfg.sigma);
        let (w, h) = (a.width(), a.height());
        let mut total = 0.0;
        let mut count = 0.0;
        for c in 0..3 {
            for wy in 0..=h - cfg.window {
                for wx in 0..=w - cfg.window {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    let (mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0);
                    for dy in 0..cfg.window {
                        for dx in 0..cfg.window {
                            let wgt = k[dy] * k[dx];
                            let va = a.get(wx + dx, wy + dy)[c];
                            let vb = b.get(wx + dx, wy + dy)[c];
                            ma += wgt * va;
                            mb += wgt * vb;
                            maa += wgt * va * va;
                            mbb += wgt * vb * vb;
                            mab += wgt * va * vb;
                        }
                    }
                    let a1 = 2.0 * ma * mb + cfg.c1;
                    let a2 = 2.0 * (mab - ma * mb) + cfg.c2;
                    let b1 = ma * ma + mb * mb + cfg.c1;
                    let b2 = (maa - ma * ma) + (mbb - mb * mb) + cfg.c2;
                    total += a1 * a2 / (b1 * b2);
                    count += 1.0;
                }
            }
        }
        total / count
    }
}
