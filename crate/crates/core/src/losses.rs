//! Training objectives: the blended foreground loss, the edge-bleeding
//! background loss, the panoptic loss on merged renders, and the temporal
//! opacity regularizer. Every loss returns its value together with
//! hand-written gradients ready for the rasterizer adjoint.

use crate::error::{Error, Result};
use crate::scene_io::{ImageRgb, Mask};
use nalgebra::Vector3;

pub const LAMBDA_H: f64 = 0.1;
pub const LAMBDA_OMEGA: f64 = 1.0;

/// Residual norm used by the image losses. L1 is the default; L2 is kept as
/// a config switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    L1,
    L2,
}

impl LossNorm {
    /// Returns (penalty, d penalty / d residual) for one residual.
    #[inline]
    fn eval(&self, r: f64) -> (f64, f64) {
        match self {
            LossNorm::L1 => (r.abs(), r.signum()),
            LossNorm::L2 => (r * r, 2.0 * r),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub total: f64,
    pub fg: f64,
    pub bg: f64,
    pub panoptic: f64,
    pub reg_h: f64,
    pub reg_omega: f64,
}

fn check_shapes(target: &ImageRgb, rgb: &ImageRgb) -> Result<()> {
    if target.width != rgb.width || target.height != rgb.height {
        return Err(Error::Shape(format!(
            "loss: target {}x{} vs render {}x{}",
            target.width, target.height, rgb.width, rgb.height
        )));
    }
    Ok(())
}

/// Blended foreground loss: both the masked target and the foreground render
/// are composited over the same random background color B, so the model is
/// rewarded for matching the mask with its alpha map rather than painting
/// the background.
///
/// Returns (loss, d/d rgb, d/d alpha).
pub fn foreground_loss(
    target: &ImageRgb,
    mask: &Mask,
    rgb: &ImageRgb,
    alpha: &[f64],
    bg_color: &Vector3<f64>,
    norm: LossNorm,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_shapes(target, rgb)?;
    if mask.width != target.width || mask.height != target.height || alpha.len() != mask.data.len()
    {
        return Err(Error::Shape("foreground_loss: mask/alpha shape mismatch".into()));
    }
    let n = target.width * target.height;
    let inv = 1.0 / (n * 3) as f64;
    let mut loss = 0.0;
    let mut d_rgb = vec![0.0; n * 3];
    let mut d_alpha = vec![0.0; n];
    for i in 0..n {
        let m = mask.data[i] as f64;
        let a = alpha[i];
        for ch in 0..3 {
            let b = bg_color[ch];
            let want = m * target.data[i * 3 + ch] + (1.0 - m) * b;
            let have = a * rgb.data[i * 3 + ch] + (1.0 - a) * b;
            let (p, dp) = norm.eval(have - want);
            loss += p * inv;
            d_rgb[i * 3 + ch] = dp * inv * a;
            d_alpha[i] += dp * inv * (rgb.data[i * 3 + ch] - b);
        }
    }
    Ok((loss, d_rgb, d_alpha))
}

/// Blur radius for the background target at a given image width: 9 px at a
/// 1600 px wide frame, scaled linearly, never below 1.
pub fn background_blur_radius(width: usize) -> usize {
    ((9.0 * width as f64 / 1600.0).round() as usize).max(1)
}

/// Separable Gaussian blur with sigma = radius/3 and replicated borders.
pub fn gaussian_blur(img: &ImageRgb, radius: usize) -> ImageRgb {
    let sigma = radius as f64 / 3.0;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for k in -(radius as i64)..=(radius as i64) {
        let w = (-0.5 * (k as f64 / sigma).powi(2)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in kernel.iter_mut() {
        *w /= sum;
    }
    let (width, height) = (img.width, img.height);
    let clamp_x = |x: i64| x.clamp(0, width as i64 - 1) as usize;
    let clamp_y = |y: i64| y.clamp(0, height as i64 - 1) as usize;
    let mut horiz = ImageRgb::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; 3];
            for (ki, w) in kernel.iter().enumerate() {
                let sx = clamp_x(x as i64 + ki as i64 - radius as i64);
                for ch in 0..3 {
                    acc[ch] += w * img.data[(y * width + sx) * 3 + ch];
                }
            }
            for ch in 0..3 {
                horiz.data[(y * width + x) * 3 + ch] = acc[ch];
            }
        }
    }
    let mut out = ImageRgb::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; 3];
            for (ki, w) in kernel.iter().enumerate() {
                let sy = clamp_y(y as i64 + ki as i64 - radius as i64);
                for ch in 0..3 {
                    acc[ch] += w * horiz.data[(sy * width + x) * 3 + ch];
                }
            }
            for ch in 0..3 {
                out.data[(y * width + x) * 3 + ch] = acc[ch];
            }
        }
    }
    out
}

/// Precomputed background training target: the frame with the foreground
/// masked out, and the hole filled by bleeding in blurred surroundings.
/// Masks and frames are fixed at t=0, so this is computed once per view.
pub fn background_target(target: &ImageRgb, mask: &Mask, radius: usize) -> Result<ImageRgb> {
    if mask.width != target.width || mask.height != target.height {
        return Err(Error::Shape("background_target: mask shape mismatch".into()));
    }
    let n = target.width * target.height;
    let mut color = ImageRgb::zeros(target.width, target.height);
    let mut weight = ImageRgb::zeros(target.width, target.height);
    for i in 0..n {
        let keep = 1.0 - mask.data[i] as f64;
        for ch in 0..3 {
            color.data[i * 3 + ch] = keep * target.data[i * 3 + ch];
            weight.data[i * 3 + ch] = keep;
        }
    }
    // Normalized bleed: each pass fills unfilled mask pixels with the
    // weighted average of already-filled neighbors, then the filled ring
    // becomes a source for the next pass. A plain blur of the zeroed frame
    // would leave the deep interior black and teach the background a hole.
    loop {
        let bc = gaussian_blur(&color, radius);
        let bw = gaussian_blur(&weight, radius);
        let mut progressed = false;
        for i in 0..n {
            if mask.data[i] != 0 && weight.data[i * 3] == 0.0 && bw.data[i * 3] > 1e-12 {
                for ch in 0..3 {
                    color.data[i * 3 + ch] = bc.data[i * 3 + ch] / bw.data[i * 3 + ch];
                    weight.data[i * 3 + ch] = 1.0;
                }
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(color)
}

/// Pixel loss of the background render against a precomputed target from
/// `background_target`. Returns (loss, d/d rgb).
pub fn background_loss(
    bg_target: &ImageRgb,
    rgb: &ImageRgb,
    norm: LossNorm,
) -> Result<(f64, Vec<f64>)> {
    image_l1(bg_target, rgb, norm)
}

/// Full-frame loss on the merged (foreground + background) render.
pub fn panoptic_loss(
    target: &ImageRgb,
    rgb: &ImageRgb,
    norm: LossNorm,
) -> Result<(f64, Vec<f64>)> {
    image_l1(target, rgb, norm)
}

fn image_l1(target: &ImageRgb, rgb: &ImageRgb, norm: LossNorm) -> Result<(f64, Vec<f64>)> {
    check_shapes(target, rgb)?;
    let inv = 1.0 / rgb.data.len() as f64;
    let mut loss = 0.0;
    let mut d_rgb = vec![0.0; rgb.data.len()];
    for (i, (have, want)) in rgb.data.iter().zip(target.data.iter()).enumerate() {
        let (p, dp) = norm.eval(have - want);
        loss += p * inv;
        d_rgb[i] = dp * inv;
    }
    Ok((loss, d_rgb))
}

/// Temporal opacity regularizer pushing peak opacity toward 1 and bandwidth
/// toward 0, keeping splats dense in time. Operates on realized h and raw
/// omega. Returns (loss, d/dh, d/domega).
pub fn opacity_regularizer(h: &[f64], omega: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    opacity_regularizer_with(h, omega, LAMBDA_H, LAMBDA_OMEGA)
}

/// Same regularizer with configurable weights.
pub fn opacity_regularizer_with(
    h: &[f64],
    omega: &[f64],
    lambda_h: f64,
    lambda_omega: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    assert_eq!(h.len(), omega.len());
    let n = h.len();
    if n == 0 {
        return (0.0, Vec::new(), Vec::new());
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dh = vec![0.0; n];
    let mut dw = vec![0.0; n];
    for i in 0..n {
        loss += lambda_h * (1.0 - h[i]).abs() * inv + lambda_omega * omega[i].abs() * inv;
        dh[i] = -lambda_h * (1.0 - h[i]).signum() * inv;
        dw[i] = lambda_omega * omega[i].signum() * inv;
    }
    (loss, dh, dw)
}
