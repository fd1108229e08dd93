//! Image-quality metrics (PSNR, SSIM) and the masked evaluation protocol:
//! zero out both images outside the mask, crop to the mask's bounding box,
//! then run the plain metrics.

use crate::error::{Error, Result};
use crate::scene_io::{ImageRgb, Mask};

/// Sentinel for identical images (infinite PSNR).
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "metric: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for [0,1] images, capped at 99 dB.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5), averaged over valid window positions and channels.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let mut kernel = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as i64;
    let mut sum = 0.0;
    for (i, w) in kernel.iter_mut().enumerate() {
        *w = (-0.5 * ((i as i64 - half) as f64 / SSIM_SIGMA).powi(2)).exp();
        sum += *w;
    }
    for w in kernel.iter_mut() {
        *w /= sum;
    }
    let (width, height) = (a.width, a.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for wy in 0..=(height - SSIM_WINDOW) {
            for wx in 0..=(width - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let w = kernel[ky] * kernel[kx];
                        let i = ((wy + ky) * width + wx + kx) * 3 + ch;
                        let (x, y) = (a.data[i], b.data[i]);
                        mx += w * x;
                        my += w * y;
                        xx += w * x * x;
                        yy += w * y * y;
                        xy += w * x * y;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cxy = xy - mx * my;
                let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Metrics over the foreground only: both images are blacked out outside the
/// mask and cropped to the mask bounding box (grown to the SSIM window if
/// needed) before PSNR/SSIM.
pub fn masked_metrics(a: &ImageRgb, b: &ImageRgb, mask: &Mask) -> Result<(f64, f64)> {
    check_shapes(a, b)?;
    if mask.width != a.width || mask.height != a.height {
        return Err(Error::Shape("masked_metrics: mask shape mismatch".into()));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.data[y * mask.width + x] != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::Precondition("masked_metrics: empty mask".into()));
    }
    // grow the crop so SSIM has at least one full window
    let grow = |lo: usize, hi: usize, limit: usize| -> (usize, usize) {
        let (mut lo, mut hi) = (lo, hi);
        while hi - lo + 1 < SSIM_WINDOW && (lo > 0 || hi + 1 < limit) {
            if lo > 0 {
                lo -= 1;
            }
            if hi - lo + 1 < SSIM_WINDOW && hi + 1 < limit {
                hi += 1;
            }
        }
        (lo, hi)
    };
    let (x0, x1) = grow(x0, x1, a.width);
    let (y0, y1) = grow(y0, y1, a.height);
    let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut ca = ImageRgb::zeros(cw, ch);
    let mut cb = ImageRgb::zeros(cw, ch);
    for y in 0..ch {
        for x in 0..cw {
            let src = (y + y0) * a.width + x + x0;
            if mask.data[src] != 0 {
                for c in 0..3 {
                    ca.data[(y * cw + x) * 3 + c] = a.data[src * 3 + c];
                    cb.data[(y * cw + x) * 3 + c] = b.data[src * 3 + c];
                }
            }
        }
    }
    Ok((psnr(&ca, &cb)?, ssim(&ca, &cb)?))
}
