//! Masked L1, SSIM, and the tracking / mapping objectives.
//!
//! Every loss returns its value together with per-pixel gradients w.r.t. the
//! rendered channels, packaged as `UpstreamGrads` for the renderer backward.

use crate::error::{Error, Result};
use crate::grad::UpstreamGrads;
use crate::image_buf::{GrayImage, MaskImage, RgbImage};
use crate::render::RenderOutput;
use crate::types::Frame;

/// Balance weights of the tracking objective (color / depth L1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl TrackingWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || alpha + beta <= 0.0 {
            return Err(Error::InvalidInput(
                "tracking weights must be non-negative with positive sum".into(),
            ));
        }
        Ok(Self { alpha, beta })
    }

    /// Replica preset.
    pub fn replica() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.025,
        }
    }

    /// TUM-RGBD / ScanNet++ preset.
    pub fn tum() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
        }
    }

    /// ScanNet preset.
    pub fn scannet() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.9,
        }
    }
}

/// Balance weights of the mapping objective (color L1 / SSIM / depth L1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingWeights {
    pub rho: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl Default for MappingWeights {
    fn default() -> Self {
        Self {
            rho: 0.8,
            tau: 0.2,
            sigma: 1.0,
        }
    }
}

// L1 subgradient; f64::signum(0.0) is 1, which we do not want at a perfect fit.
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference over masked pixels; empty mask gives 0.
/// Returns the loss and d loss / d a.
pub fn masked_l1(a: &GrayImage, b: &GrayImage, mask: &MaskImage) -> Result<(f64, GrayImage)> {
    if !a.same_shape(b) || !a.same_shape(mask) {
        return Err(Error::InvalidInput("masked_l1 shape mismatch".into()));
    }
    let mut grad = GrayImage::new(a.width(), a.height(), 0.0);
    let count = mask.count_true();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    let g = grad.as_mut_slice();
    for (i, (&av, &bv)) in a.as_slice().iter().zip(b.as_slice()).enumerate() {
        if mask.as_slice()[i] {
            let d = av - bv;
            total += d.abs();
            g[i] = sign(d) * inv;
        }
    }
    Ok((total * inv, grad))
}

/// Masked L1 over an RGB image, averaged over masked pixels and channels.
pub fn masked_l1_rgb(a: &RgbImage, b: &RgbImage, mask: &MaskImage) -> Result<(f64, RgbImage)> {
    if !a.same_shape(b) || !a.same_shape(mask) {
        return Err(Error::InvalidInput("masked_l1 shape mismatch".into()));
    }
    let mut grad = RgbImage::new(a.width(), a.height(), [0.0; 3]);
    let count = mask.count_true();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / (3 * count) as f64;
    let mut total = 0.0;
    let g = grad.as_mut_slice();
    for (i, (av, bv)) in a.as_slice().iter().zip(b.as_slice()).enumerate() {
        if mask.as_slice()[i] {
            for ch in 0..3 {
                let d = av[ch] - bv[ch];
                total += d.abs();
                g[i][ch] = sign(d) * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.0001; // (0.01)^2
pub const SSIM_C2: f64 = 0.0009; // (0.03)^2

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter; output is (W-10) x (H-10).
fn filter_valid(img: &GrayImage, kernel: &[f64; SSIM_WINDOW]) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = GrayImage::new(ow, h, 0.0);
    for v in 0..h {
        for u in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * img.get(u + k, v);
            }
            tmp.set(u, v, acc);
        }
    }
    let mut out = GrayImage::new(ow, oh, 0.0);
    for v in 0..oh {
        for u in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp.get(u, v + k);
            }
            out.set(u, v, acc);
        }
    }
    out
}

/// Adjoint of `filter_valid`: scatters interior values back over the window.
fn filter_adjoint(interior: &GrayImage, kernel: &[f64; SSIM_WINDOW], w: usize, h: usize) -> GrayImage {
    let mut out = GrayImage::new(w, h, 0.0);
    for v in 0..interior.height() {
        for u in 0..interior.width() {
            let x = *interior.get(u, v);
            if x == 0.0 {
                continue;
            }
            for (kv, kvv) in kernel.iter().enumerate() {
                for (ku, kvu) in kernel.iter().enumerate() {
                    let contrib = x * kvv * kvu;
                    let s = out.get(u + ku, v + kv);
                    out.set(u + ku, v + kv, s + contrib);
                }
            }
        }
    }
    out
}

/// SSIM between two grayscale images in [0,1] with the standard 11x11
/// Gaussian window, evaluated on interior pixels (valid-mode filtering).
/// Returns (mean SSIM, d mean SSIM / d a).
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<(f64, GrayImage)> {
    if !a.same_shape(b) {
        return Err(Error::InvalidInput("ssim shape mismatch".into()));
    }
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim requires images at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let kernel = ssim_kernel();
    let mu_a = filter_valid(a, &kernel);
    let mu_b = filter_valid(b, &kernel);
    let aa = filter_valid(&a.map(|&x| x * x), &kernel);
    let bb = filter_valid(&b.map(|&x| x * x), &kernel);
    let ab = filter_valid(
        &GrayImage::from_vec(
            a.width(),
            a.height(),
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(&x, &y)| x * y)
                .collect(),
        ),
        &kernel,
    );
    let (ow, oh) = (mu_a.width(), mu_a.height());
    let n = (ow * oh) as f64;
    let mut total = 0.0;
    // Per-pixel partials of SSIM w.r.t. mu_a, var_a, cov_ab.
    let mut d_mu = GrayImage::new(ow, oh, 0.0);
    let mut d_var = GrayImage::new(ow, oh, 0.0);
    let mut d_cov = GrayImage::new(ow, oh, 0.0);
    for v in 0..oh {
        for u in 0..ow {
            let ma = *mu_a.get(u, v);
            let mb = *mu_b.get(u, v);
            let var_a = aa.get(u, v) - ma * ma;
            let var_b = bb.get(u, v) - mb * mb;
            let cov = ab.get(u, v) - ma * mb;
            let t1 = 2.0 * ma * mb + SSIM_C1;
            let t2 = 2.0 * cov + SSIM_C2;
            let d1 = ma * ma + mb * mb + SSIM_C1;
            let d2 = var_a + var_b + SSIM_C2;
            let s = (t1 * t2) / (d1 * d2);
            total += s;
            d_mu.set(u, v, s * (2.0 * mb / t1 - 2.0 * ma / d1) / n);
            d_var.set(u, v, -s / d2 / n);
            d_cov.set(u, v, s * 2.0 / t2 / n);
        }
    }
    // Chain through mu_a = G*a, var_a = G*(a^2) - mu_a^2, cov = G*(ab) - mu_a mu_b:
    // dS/da = G^T(d_mu - 2 mu_a d_var - mu_b d_cov) + 2a G^T(d_var) + b G^T(d_cov).
    let mut lin = GrayImage::new(ow, oh, 0.0);
    for v in 0..oh {
        for u in 0..ow {
            lin.set(
                u,
                v,
                d_mu.get(u, v) - 2.0 * mu_a.get(u, v) * d_var.get(u, v)
                    - mu_b.get(u, v) * d_cov.get(u, v),
            );
        }
    }
    let g_lin = filter_adjoint(&lin, &kernel, a.width(), a.height());
    let g_var = filter_adjoint(&d_var, &kernel, a.width(), a.height());
    let g_cov = filter_adjoint(&d_cov, &kernel, a.width(), a.height());
    let mut grad = GrayImage::new(a.width(), a.height(), 0.0);
    for i in 0..grad.len() {
        grad.as_mut_slice()[i] = g_lin.as_slice()[i]
            + 2.0 * a.as_slice()[i] * g_var.as_slice()[i]
            + b.as_slice()[i] * g_cov.as_slice()[i];
    }
    Ok((total / n, grad))
}

/// Tracking objective: alpha * masked color L1 + beta * masked depth L1.
/// Gradients flow to the rendered color and depth only (routed to the pose).
pub fn tracking_loss(
    frame: &Frame,
    render: &RenderOutput,
    mask: &MaskImage,
    w: &TrackingWeights,
) -> Result<(f64, UpstreamGrads)> {
    let (lc, gc) = masked_l1_rgb(&render.color, &frame.rgb, mask)?;
    let (ld, gd) = masked_l1(&render.depth, &frame.depth, mask)?;
    let mut up = UpstreamGrads::zeros(frame.width(), frame.height());
    for (i, g) in gc.as_slice().iter().enumerate() {
        up.d_color.as_mut_slice()[i] = [w.alpha * g[0], w.alpha * g[1], w.alpha * g[2]];
    }
    for (i, &g) in gd.as_slice().iter().enumerate() {
        up.d_depth.as_mut_slice()[i] = w.beta * g;
    }
    Ok((w.alpha * lc + w.beta * ld, up))
}

/// Mapping objective: rho * full-image color L1 + tau * (1 - SSIM on
/// luminance) + sigma * depth L1 masked to valid depth. Color terms are
/// unmasked; only the depth term uses the validity mask.
pub fn mapping_loss(
    frame: &Frame,
    render: &RenderOutput,
    w: &MappingWeights,
) -> Result<(f64, UpstreamGrads)> {
    let full = MaskImage::new(frame.width(), frame.height(), true);
    let (lc, gc) = masked_l1_rgb(&render.color, &frame.rgb, &full)?;
    let (s, gs) = ssim(&render.color.luminance(), &frame.rgb.luminance())?;
    let (ld, gd) = masked_l1(&render.depth, &frame.depth, &frame.valid_mask)?;
    let mut up = UpstreamGrads::zeros(frame.width(), frame.height());
    for i in 0..gc.len() {
        let g1 = gc.as_slice()[i];
        // d luminance / d channel = 1/3; SSIM enters the loss as 1 - SSIM.
        let g_ssim = -w.tau * gs.as_slice()[i] / 3.0;
        up.d_color.as_mut_slice()[i] = [
            w.rho * g1[0] + g_ssim,
            w.rho * g1[1] + g_ssim,
            w.rho * g1[2] + g_ssim,
        ];
        up.d_depth.as_mut_slice()[i] = w.sigma * gd.as_slice()[i];
    }
    Ok((w.rho * lc + w.tau * (1.0 - s) + w.sigma * ld, up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_buf::{GrayImage, MaskImage, RgbImage};

    #[test]
    fn l1_identical_is_zero() {
        let a = GrayImage::new(4, 4, 0.7);
        let mask = MaskImage::new(4, 4, true);
        let (v, g) = masked_l1(&a, &a, &mask).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn l1_constant_difference() {
        let a = GrayImage::new(4, 4, 0.6);
        let b = GrayImage::new(4, 4, 0.5);
        let mask = MaskImage::new(4, 4, true);
        let (v, _) = masked_l1(&a, &b, &mask).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn l1_empty_mask_is_vacuous() {
        let a = GrayImage::new(4, 4, 0.6);
        let b = GrayImage::new(4, 4, 0.1);
        let mask = MaskImage::new(4, 4, false);
        let (v, g) = masked_l1(&a, &b, &mask).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn l1_shape_mismatch_rejected() {
        let a = GrayImage::new(4, 4, 0.0);
        let b = GrayImage::new(3, 4, 0.0);
        let mask = MaskImage::new(4, 4, true);
        assert!(masked_l1(&a, &b, &mask).is_err());
    }

    #[test]
    fn ssim_identical_images() {
        let mut a = GrayImage::new(16, 16, 0.0);
        for (i, p) in a.as_mut_slice().iter_mut().enumerate() {
            *p = (i as f64 * 0.37).sin() * 0.4 + 0.5;
        }
        let (s, _) = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // mu_a = 0, mu_b = 1, variances 0: SSIM = C1*C2 / ((1+C1)*C2) = C1/(1+C1).
        let a = GrayImage::new(16, 16, 0.0);
        let b = GrayImage::new(16, 16, 1.0);
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        let (s, _) = ssim(&a, &b).unwrap();
        assert!((s - expected).abs() < 1e-12, "ssim {s} vs {expected}");
    }

    #[test]
    fn ssim_too_small_rejected() {
        let a = GrayImage::new(8, 8, 0.5);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_symmetry() {
        let mut a = GrayImage::new(16, 16, 0.0);
        let mut b = GrayImage::new(16, 16, 0.0);
        for i in 0..a.len() {
            a.as_mut_slice()[i] = ((i * 7) % 13) as f64 / 13.0;
            b.as_mut_slice()[i] = ((i * 5) % 11) as f64 / 11.0;
        }
        let (s1, _) = ssim(&a, &b).unwrap();
        let (s2, _) = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut a = GrayImage::new(14, 14, 0.0);
        let mut b = GrayImage::new(14, 14, 0.0);
        for i in 0..a.len() {
            a.as_mut_slice()[i] = ((i * 7) % 13) as f64 / 13.0 * 0.8 + 0.1;
            b.as_mut_slice()[i] = ((i * 5) % 11) as f64 / 11.0 * 0.8 + 0.1;
        }
        let (_, grad) = ssim(&a, &b).unwrap();
        let eps = 1e-5;
        for &i in &[0usize, 7, 60, 97, 140, 195] {
            let x0 = a.as_slice()[i];
            a.as_mut_slice()[i] = x0 + eps;
            let (sp, _) = ssim(&a, &b).unwrap();
            a.as_mut_slice()[i] = x0 - eps;
            let (sm, _) = ssim(&a, &b).unwrap();
            a.as_mut_slice()[i] = x0;
            let fd = (sp - sm) / (2.0 * eps);
            let g = grad.as_slice()[i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-3, "pixel {i}: analytic {g} fd {fd}");
        }
    }

    fn test_frame(w: usize, h: usize, color: [f64; 3], depth: f64) -> Frame {
        Frame::new(
            0,
            0.0,
            RgbImage::new(w, h, color),
            GrayImage::new(w, h, depth),
        )
        .unwrap()
    }

    #[test]
    fn tracking_loss_perfect_render_is_zero() {
        let frame = test_frame(16, 16, [0.3, 0.4, 0.5], 1.2);
        let render = RenderOutput {
            color: frame.rgb.clone(),
            depth: frame.depth.clone(),
            silhouette: GrayImage::new(16, 16, 1.0),
        };
        let mask = MaskImage::new(16, 16, true);
        let (v, _) = tracking_loss(&frame, &render, &mask, &TrackingWeights::replica()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn tracking_loss_replica_weights_arithmetic() {
        // Unit color error, zero depth error, alpha = 0.5 -> loss 0.5.
        let frame = test_frame(16, 16, [1.0, 1.0, 1.0], 1.0);
        let render = RenderOutput {
            color: RgbImage::new(16, 16, [0.0; 3]),
            depth: frame.depth.clone(),
            silhouette: GrayImage::new(16, 16, 1.0),
        };
        let mask = MaskImage::new(16, 16, true);
        let (v, _) = tracking_loss(&frame, &render, &mask, &TrackingWeights::replica()).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mapping_loss_perfect_render_is_zero() {
        let frame = test_frame(16, 16, [0.3, 0.4, 0.5], 1.2);
        let render = RenderOutput {
            color: frame.rgb.clone(),
            depth: frame.depth.clone(),
            silhouette: GrayImage::new(16, 16, 1.0),
        };
        let (v, _) = mapping_loss(&frame, &render, &MappingWeights::default()).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn weights_scale_losses_linearly() {
        let frame = test_frame(16, 16, [0.9, 0.2, 0.4], 1.5);
        let render = RenderOutput {
            color: RgbImage::new(16, 16, [0.5; 3]),
            depth: GrayImage::new(16, 16, 1.0),
            silhouette: GrayImage::new(16, 16, 1.0),
        };
        let w1 = MappingWeights::default();
        let w2 = MappingWeights {
            rho: 1.6,
            tau: 0.4,
            sigma: 2.0,
        };
        let (v1, g1) = mapping_loss(&frame, &render, &w1).unwrap();
        let (v2, g2) = mapping_loss(&frame, &render, &w2).unwrap();
        assert!((v2 - 2.0 * v1).abs() < 1e-9);
        for i in 0..g1.d_color.len() {
            for ch in 0..3 {
                assert!(
                    (g2.d_color.as_slice()[i][ch] - 2.0 * g1.d_color.as_slice()[i][ch]).abs()
                        < 1e-9
                );
            }
            assert!((g2.d_depth.as_slice()[i] - 2.0 * g1.d_depth.as_slice()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn mapping_loss_is_non_negative() {
        let frame = test_frame(16, 16, [0.1, 0.9, 0.3], 2.0);
        let render = RenderOutput::background(16, 16);
        let (v, _) = mapping_loss(&frame, &render, &MappingWeights::default()).unwrap();
        assert!(v >= 0.0);
    }

    #[test]
    fn paper_default_mapping_weights() {
        let w = MappingWeights::default();
        assert_eq!((w.rho, w.tau, w.sigma), (0.8, 0.2, 1.0));
    }
}
