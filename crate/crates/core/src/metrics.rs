//! Covisibility-masked PSNR and SSIM.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

pub const PSNR_CAP: f64 = 99.0;
pub(crate) const SSIM_RADIUS: usize = 3;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// SSIM of one channel over one window, with its derivatives with respect
/// to the window moments of `pred`: mean, mean of squares, mean of products.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SsimWindow {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub value: f64,
    pub d_mean: f64,
    pub d_sq: f64,
    pub d_cross: f64,
}

/// Window of radius [`SSIM_RADIUS`] around `(x, y)`, clipped to the image.
pub(crate) fn ssim_window(pred: &[Vec3], gt: &[Vec3], width: usize, height: usize, x: usize, y: usize, c: usize) -> SsimWindow {
    let x0 = x.saturating_sub(SSIM_RADIUS);
    let x1 = (x + SSIM_RADIUS).min(width - 1);
    let y0 = y.saturating_sub(SSIM_RADIUS);
    let y1 = (y + SSIM_RADIUS).min(height - 1);
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let a = pred[yy * width + xx][c];
            let b = gt[yy * width + xx][c];
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
    }
    let n = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    let (mx, my) = (sx / n, sy / n);
    let vx = sxx / n - mx * mx;
    let vy = syy / n - my * my;
    let cxy = sxy / n - mx * my;
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * cxy + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = vx + vy + SSIM_C2;
    let s = a1 * a2 / (b1 * b2);
    let ds_dmx = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
    let ds_dvx = -s / b2;
    let ds_dcxy = 2.0 * a1 / (b1 * b2);
    SsimWindow {
        x0,
        x1,
        y0,
        y1,
        value: s,
        d_mean: ds_dmx - 2.0 * mx * ds_dvx - my * ds_dcxy,
        d_sq: ds_dvx,
        d_cross: ds_dcxy,
    }
}

fn check_shapes(pred: &[Vec3], gt: &[Vec3], mask: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred {} / gt {} / mask {} pixels",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over masked pixels and all channels, capped at 99 dB.
pub fn masked_psnr(pred: &[Vec3], gt: &[Vec3], mask: &[bool]) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((a, b), m) in pred.iter().zip(gt).zip(mask) {
        if *m {
            sum += (a - b).norm_squared();
            count += 3;
        }
    }
    let mse = sum / count as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM (7×7 uniform window, averaged over channels) over the pixels
/// whose whole window lies inside the image and inside the mask. `None`
/// when no pixel qualifies.
pub fn masked_ssim(pred: &[Vec3], gt: &[Vec3], mask: &[bool], width: usize, height: usize) -> Result<Option<f64>> {
    check_shapes(pred, gt, mask)?;
    if width * height != pred.len() {
        return Err(Error::ShapeMismatch(format!("{} pixels for a {width}x{height} image", pred.len())));
    }
    // full-window pixels: 2D prefix sums over the mask
    let mut integral = vec![0usize; (width + 1) * (height + 1)];
    for y in 0..height {
        for x in 0..width {
            integral[(y + 1) * (width + 1) + x + 1] = mask[y * width + x] as usize + integral[y * (width + 1) + x + 1]
                + integral[(y + 1) * (width + 1) + x]
                - integral[y * (width + 1) + x];
        }
    }
    let r = SSIM_RADIUS;
    let side = 2 * r + 1;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in r..height.saturating_sub(r) {
        for x in r..width.saturating_sub(r) {
            let (x0, y0) = (x - r, y - r);
            let (x1, y1) = (x + r + 1, y + r + 1);
            let inside = integral[y1 * (width + 1) + x1] + integral[y0 * (width + 1) + x0]
                - integral[y0 * (width + 1) + x1]
                - integral[y1 * (width + 1) + x0];
            if inside != side * side {
                continue;
            }
            sum += (0..3).map(|c| ssim_window(pred, gt, width, height, x, y, c).value).sum::<f64>() / 3.0;
            count += 1;
        }
    }
    if count == 0 {
        warn!("no pixel has a fully covisible SSIM window; frame skipped");
        return Ok(None);
    }
    Ok(Some(sum / count as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub covisible_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub frames: Vec<FrameEval>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
}

impl EvalResult {
    /// Aggregates per-frame values; frames without a value are left out of
    /// the corresponding mean.
    pub fn from_frames(frames: Vec<FrameEval>) -> Self {
        let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        let mean_psnr = mean(frames.iter().filter_map(|f| f.psnr).collect());
        let mean_ssim = mean(frames.iter().filter_map(|f| f.ssim).collect());
        Self {
            frames,
            mean_psnr,
            mean_ssim,
        }
    }
}

/// Evaluates one frame; an empty covisibility mask yields no values.
pub fn evaluate_frame(frame: usize, pred: &[Vec3], gt: &[Vec3], mask: &[bool], width: usize, height: usize) -> Result<FrameEval> {
    let covisible = mask.iter().filter(|m| **m).count();
    let covisible_fraction = covisible as f64 / mask.len().max(1) as f64;
    if covisible == 0 {
        warn!("frame {frame}: empty covisibility mask, skipped");
        return Ok(FrameEval {
            frame,
            psnr: None,
            ssim: None,
            covisible_fraction,
        });
    }
    Ok(FrameEval {
        frame,
        psnr: Some(masked_psnr(pred, gt, mask)?),
        ssim: masked_ssim(pred, gt, mask, width, height)?,
        covisible_fraction,
    })
}
