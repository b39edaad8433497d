//! Supervision terms and their weighted total.
//!
//! Every term returns its value together with the gradient of that value
//! with respect to its direct inputs (render channels, posed means or
//! per-track transforms); callers chain these into the rest of the model.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cluster::knn;
use crate::error::{Error, Result};
use crate::gaussians::CanonicalGaussianField;
use crate::geom::{Mat3, Se3, Vec3};
use crate::metrics::ssim_window;
use crate::msdyn::{TrackBindings, TrackSet};
use crate::render::{Camera, RenderOutput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub mask: f64,
    pub depth: f64,
    pub track: f64,
    pub rigidity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            mask: 0.5,
            depth: 0.5,
            track: 2.0,
            rigidity: 1.0,
        }
    }
}

impl LossWeights {
    pub fn rgb_only() -> Self {
        Self {
            rgb: 1.0,
            mask: 0.0,
            depth: 0.0,
            track: 0.0,
            rigidity: 0.0,
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let [rgb, mask, depth, track, rigidity] = v else {
            return Err(Error::Config(format!("expected 5 loss weights, got {}", v.len())));
        };
        let w = Self {
            rgb: *rgb,
            mask: *mask,
            depth: *depth,
            track: *track,
            rigidity: *rigidity,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.rgb, self.mask, self.depth, self.track, self.rigidity]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and nonnegative: {:?}", self.as_array())))
        }
    }
}

pub const TERM_NAMES: [&str; 5] = ["rgb", "mask", "depth", "track", "rigidity"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rgb: f64,
    pub mask: f64,
    pub depth: f64,
    pub track: f64,
    pub rigidity: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 5] {
        [self.rgb, self.mask, self.depth, self.track, self.rigidity]
    }

    pub fn add_scaled(&mut self, other: &LossReport, s: f64) {
        self.rgb += other.rgb * s;
        self.mask += other.mask * s;
        self.depth += other.depth * s;
        self.track += other.track * s;
        self.rigidity += other.rigidity * s;
        self.total += other.total * s;
    }
}

pub fn total_loss(terms: [f64; 5], weights: &LossWeights) -> LossReport {
    let total = terms.iter().zip(weights.as_array()).map(|(t, w)| t * w).sum();
    LossReport {
        rgb: terms[0],
        mask: terms[1],
        depth: terms[2],
        track: terms[3],
        rigidity: terms[4],
        total,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbLossConfig {
    pub l1_weight: f64,
    pub ssim_weight: f64,
}

impl Default for RgbLossConfig {
    fn default() -> Self {
        Self {
            l1_weight: 0.8,
            ssim_weight: 0.2,
        }
    }
}

fn check_len(what: &str, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::ShapeMismatch(format!("{what}: {found} pixels, expected {expected}")));
    }
    Ok(())
}

/// `l1_weight·|r − g| + ssim_weight·(1 − SSIM)` per pixel (channel-averaged,
/// 7×7 uniform window clipped to the image), averaged over masked pixels.
/// Returns the loss and its gradient with respect to the rendered color.
pub fn rgb_loss(render: &RenderOutput, gt: &[Vec3], mask: Option<&[bool]>, cfg: &RgbLossConfig) -> Result<(f64, Vec<Vec3>)> {
    let (w, h) = (render.width, render.height);
    let n = w * h;
    check_len("ground-truth image", gt.len(), n)?;
    if let Some(m) = mask {
        check_len("rgb mask", m.len(), n)?;
    }
    let inside = |p: usize| mask.is_none_or(|m| m[p]);
    let count = (0..n).filter(|&p| inside(p)).count();
    let mut grad = vec![Vec3::zeros(); n];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / count as f64;
    let pred = &render.color;
    let mut loss = 0.0;
    for p in 0..n {
        if !inside(p) {
            continue;
        }
        let d = pred[p] - gt[p];
        loss += cfg.l1_weight * d.abs().sum() / 3.0 * scale;
        grad[p] += d.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }) * (cfg.l1_weight / 3.0 * scale);
        if cfg.ssim_weight == 0.0 {
            continue;
        }
        let (x, y) = (p % w, p / w);
        for c in 0..3 {
            let s = ssim_window(pred, gt, w, h, x, y, c);
            loss += cfg.ssim_weight * (1.0 - s.value) / 3.0 * scale;
            let up = -cfg.ssim_weight / 3.0 * scale;
            let count_w = ((s.x1 - s.x0 + 1) * (s.y1 - s.y0 + 1)) as f64;
            for yy in s.y0..=s.y1 {
                for xx in s.x0..=s.x1 {
                    let q = yy * w + xx;
                    let g = (s.d_mean + 2.0 * pred[q][c] * s.d_sq + gt[q][c] * s.d_cross) / count_w;
                    grad[q][c] += up * g;
                }
            }
        }
    }
    Ok((loss, grad))
}

pub const MASK_CLAMP: f64 = 1e-6;

/// Mean binary cross-entropy between the dynamic coverage and the
/// ground-truth dynamic mask. Returns the gradient with respect to
/// `dynamic_alpha`.
pub fn mask_loss(render: &RenderOutput, gt_dynamic: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n = render.width * render.height;
    check_len("dynamic mask", gt_dynamic.len(), n)?;
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    let inv = 1.0 / n as f64;
    for p in 0..n {
        let raw = render.dynamic_alpha[p];
        let a = raw.clamp(MASK_CLAMP, 1.0 - MASK_CLAMP);
        let inside = raw == a;
        if gt_dynamic[p] {
            loss -= a.ln() * inv;
            if inside {
                grad[p] = -inv / a;
            }
        } else {
            loss -= (1.0 - a).ln() * inv;
            if inside {
                grad[p] = inv / (1.0 - a);
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthLossConfig {
    /// Pixels with rendered alpha at or below this are ignored.
    pub min_alpha: f64,
}

impl Default for DepthLossConfig {
    fn default() -> Self {
        Self { min_alpha: 0.5 }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Pixels usable for depth alignment: ground truth available and positive,
/// rendered alpha above the threshold and rendered depth positive.
pub fn depth_valid_mask(render: &RenderOutput, gt_depth: &[f64], gt_valid: &[bool], cfg: &DepthLossConfig) -> Vec<bool> {
    (0..gt_depth.len())
        .map(|p| gt_valid[p] && gt_depth[p] > 0.0 && render.alpha[p] > cfg.min_alpha && render.depth[p] > 0.0)
        .collect()
}

/// Median-ratio scale between ground truth and rendered depth.
pub fn depth_scale(render: &RenderOutput, gt_depth: &[f64], valid: &[bool]) -> Option<f64> {
    let mut ratios: Vec<f64> = (0..gt_depth.len()).filter(|&p| valid[p]).map(|p| gt_depth[p] / render.depth[p]).collect();
    (!ratios.is_empty()).then(|| median(&mut ratios))
}

/// Mean `|s·rendered − gt|` over `valid` for a fixed scale `s`, with the
/// gradient with respect to the rendered depth.
pub fn depth_loss_fixed(render: &RenderOutput, gt_depth: &[f64], valid: &[bool], scale: f64) -> (f64, Vec<f64>) {
    let n = gt_depth.len();
    let count = valid.iter().filter(|v| **v).count();
    let mut grad = vec![0.0; n];
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for p in 0..n {
        if valid[p] {
            let d = scale * render.depth[p] - gt_depth[p];
            loss += d.abs() * inv;
            grad[p] = scale * d.signum() * inv * (d != 0.0) as u8 as f64;
        }
    }
    (loss, grad)
}

/// Scale-aligned L1 depth loss. The median scale and the valid set are
/// constants for differentiation.
pub fn depth_loss(render: &RenderOutput, gt_depth: &[f64], gt_valid: &[bool], cfg: &DepthLossConfig) -> Result<(f64, Vec<f64>)> {
    let n = render.width * render.height;
    check_len("depth", gt_depth.len(), n)?;
    check_len("depth validity", gt_valid.len(), n)?;
    let valid = depth_valid_mask(render, gt_depth, gt_valid, cfg);
    let Some(scale) = depth_scale(render, gt_depth, &valid) else {
        warn!("no valid depth pixels; depth term is zero for this frame");
        return Ok((0.0, vec![0.0; n]));
    };
    Ok(depth_loss_fixed(render, gt_depth, &valid, scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackLossConfig {
    /// Huber threshold in pixels.
    pub huber_delta: f64,
    pub depth_weight: f64,
    pub z_near: f64,
}

impl Default for TrackLossConfig {
    fn default() -> Self {
        Self {
            huber_delta: 2.0,
            depth_weight: 0.1,
            z_near: 0.01,
        }
    }
}

/// `0.5·r²/δ` for `r ≤ δ`, `r − 0.5·δ` beyond; returns value and slope.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r <= delta {
        (0.5 * r * r / delta, r / delta)
    } else {
        (r - 0.5 * delta, 1.0)
    }
}

/// Reprojection plus depth error of the bound tracks at frame `t`,
/// confidence-weighted. `transforms[b]` is the motion of binding `b` at `t`.
/// Returns the loss and its gradient with respect to each transform.
pub fn track_loss(
    transforms: &[Se3],
    bindings: &TrackBindings,
    tracks: &TrackSet,
    cam: &Camera,
    t: usize,
    cfg: &TrackLossConfig,
) -> (f64, Vec<(Mat3, Vec3)>) {
    let mut grads = vec![(Mat3::zeros(), Vec3::zeros()); bindings.len()];
    let total_conf: f64 = bindings.track_ids.iter().map(|&j| tracks.confidence(j, t)).sum();
    if total_conf <= 0.0 {
        return (0.0, grads);
    }
    let w = cam.world_to_camera.rotation_matrix();
    let mut loss = 0.0;
    for (b, &j) in bindings.track_ids.iter().enumerate() {
        let conf = tracks.confidence(j, t);
        if conf <= 0.0 {
            continue;
        }
        let obs = cam.to_camera(&tracks.position(j, t));
        let x0 = bindings.canonical[b];
        let pred = cam.to_camera(&transforms[b].transform_point(&x0));
        if pred.z <= cfg.z_near || obs.z <= cfg.z_near {
            continue;
        }
        let e = cam.project(&pred) - cam.project(&obs);
        let r = e.norm();
        let (hv, slope) = huber(r, cfg.huber_delta);
        let dz = pred.z - obs.z;
        let k = conf / total_conf;
        loss += k * (hv + cfg.depth_weight * dz.abs());
        let g_uv = if r > 0.0 { e * (slope / r) } else { e * 0.0 };
        let mut g_c = cam.projection_jacobian(&pred).transpose() * g_uv;
        g_c.z += cfg.depth_weight * if dz > 0.0 { 1.0 } else if dz < 0.0 { -1.0 } else { 0.0 };
        let g_x = w.transpose() * g_c * k;
        grads[b] = (g_x * x0.transpose(), g_x);
    }
    (loss, grads)
}

/// Directed k-nearest-neighbour edges over the dynamic Gaussians' canonical
/// means, in field indices.
pub fn rigidity_graph(field: &CanonicalGaussianField, k: usize) -> Vec<(usize, usize)> {
    let ids: Vec<usize> = (0..field.len()).filter(|&i| field.is_dynamic[i]).collect();
    if ids.len() < 2 {
        return Vec::new();
    }
    let pts: Vec<Vec3> = ids.iter().map(|&i| field.means[i]).collect();
    knn(&pts, k)
        .into_iter()
        .enumerate()
        .flat_map(|(a, nb)| nb.into_iter().map(move |b| (a, b)))
        .map(|(a, b)| (ids[a], ids[b]))
        .collect()
}

/// Mean over edges of the squared change in pairwise distance between the
/// canonical and the posed means. Returns the loss and its gradients with
/// respect to the posed means and the canonical means.
pub fn local_rigidity_loss(canonical: &[Vec3], posed: &[Vec3], edges: &[(usize, usize)]) -> (f64, Vec<Vec3>, Vec<Vec3>) {
    let mut g_posed = vec![Vec3::zeros(); posed.len()];
    let mut g_canon = vec![Vec3::zeros(); canonical.len()];
    if edges.is_empty() {
        return (0.0, g_posed, g_canon);
    }
    let inv = 1.0 / edges.len() as f64;
    let mut loss = 0.0;
    for &(i, j) in edges {
        let dt = posed[i] - posed[j];
        let d0 = canonical[i] - canonical[j];
        let (lt, l0) = (dt.norm(), d0.norm());
        let r = lt - l0;
        loss += r * r * inv;
        let k = 2.0 * r * inv;
        if lt > 0.0 {
            let g = dt * (k / lt);
            g_posed[i] += g;
            g_posed[j] -= g;
        }
        if l0 > 0.0 {
            let g = d0 * (k / l0);
            g_canon[i] -= g;
            g_canon[j] += g;
        }
    }
    (loss, g_posed, g_canon)
}
