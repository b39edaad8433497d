//! Joint optimization of the canonical Gaussians, the motion patterns and
//! the blend weights.

use std::time::Instant;

use log::{error, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::knn;
use crate::dataset::{SceneCameras, SceneDataset};
use crate::error::{Error, Result};
use crate::gaussians::{densify_and_prune, logit, pose_field, pose_field_backward, CanonicalGaussianField, DensifyOptions, FieldGrad};
use crate::geom::{exp_so3, quat_from_wxyz, quat_wxyz, Quat, Vec3};
use crate::losses::{
    depth_loss, depth_loss_fixed, depth_valid_mask, local_rigidity_loss, mask_loss, rgb_loss, rigidity_graph, total_loss, track_loss,
    DepthLossConfig, LossReport, LossWeights, RgbLossConfig, TrackLossConfig, TERM_NAMES,
};
use crate::metrics::{evaluate_frame, EvalResult};
use crate::msdyn::{bind_tracks, build_hierarchy, init_blend_weights, track_fit_rms, DynGrad, HierarchyConfig, MSDynamics, TrackBindings, TrackSet, LEVELS};
use crate::render::{rasterize, rasterize_backward, Camera, RasterConfig, RenderGrad};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub means: f64,
    /// Mean learning rate reached at the last step (exponential decay).
    pub means_final: f64,
    pub log_scales: f64,
    pub rotations: f64,
    pub colors: f64,
    pub opacity_logits: f64,
    pub pattern_translations: f64,
    pub pattern_rotations: f64,
    pub blend_logits: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            means: 1.6e-4,
            means_final: 1.6e-6,
            log_scales: 5e-3,
            rotations: 1e-3,
            colors: 2.5e-3,
            opacity_logits: 5e-2,
            pattern_translations: 1e-4,
            pattern_rotations: 1e-4,
            blend_logits: 1e-2,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            means: 0.0,
            means_final: 0.0,
            log_scales: 0.0,
            rotations: 0.0,
            colors: 0.0,
            opacity_logits: 0.0,
            pattern_translations: 0.0,
            pattern_rotations: 0.0,
            blend_logits: 0.0,
        }
    }

    fn all(&self) -> [f64; 9] {
        [
            self.means,
            self.means_final,
            self.log_scales,
            self.rotations,
            self.colors,
            self.opacity_logits,
            self.pattern_translations,
            self.pattern_rotations,
            self.blend_logits,
        ]
    }

    /// Mean learning rate at `step` of `total`.
    pub fn means_at(&self, step: u64, total: u64) -> f64 {
        if self.means <= 0.0 || self.means_final <= 0.0 || total == 0 {
            return self.means;
        }
        let f = (step as f64 / total as f64).min(1.0);
        self.means * (self.means_final / self.means).powf(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Bias-correction denominators for 1-based step `k`.
    pub fn bias(&self, k: u64) -> (f64, f64) {
        let k = k.min(i32::MAX as u64) as i32;
        (1.0 - self.beta1.powi(k), 1.0 - self.beta2.powi(k))
    }
}

/// First and second moment of one scalar parameter.
pub type Moment = (f64, f64);

/// One Adam update of a scalar.
#[inline]
pub fn adam_update(x: &mut f64, g: f64, mv: &mut Moment, lr: f64, bias: (f64, f64), hp: &AdamConfig) {
    mv.0 = hp.beta1 * mv.0 + (1.0 - hp.beta1) * g;
    mv.1 = hp.beta2 * mv.1 + (1.0 - hp.beta2) * g * g;
    *x -= lr * (mv.0 / bias.0) / ((mv.1 / bias.1).sqrt() + hp.eps);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifySchedule {
    pub enabled: bool,
    /// Densify after every `every`-th epoch ...
    pub every: usize,
    /// ... up to and including this epoch.
    pub until: usize,
    pub options: DensifyOptions,
}

impl Default for DensifySchedule {
    fn default() -> Self {
        Self {
            enabled: true,
            every: 10,
            until: 250,
            options: DensifyOptions::default(),
        }
    }
}

impl DensifySchedule {
    pub fn due(&self, epoch: usize) -> bool {
        self.enabled && self.every > 0 && epoch > 0 && epoch % self.every == 0 && epoch <= self.until
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub epochs: usize,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub seed: u64,
    pub densify: DensifySchedule,
    pub loss_weights: LossWeights,
    pub hierarchy: HierarchyConfig,
    pub raster: RasterConfig,
    pub rgb: RgbLossConfig,
    pub depth: DepthLossConfig,
    pub track: TrackLossConfig,
    pub rigidity_neighbors: usize,
    pub dynamic_target: usize,
    pub static_target: usize,
    /// Also seed static Gaussians from background that the canonical frame
    /// does not see.
    pub static_all_frames: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            seed: 0,
            densify: DensifySchedule::default(),
            loss_weights: LossWeights::default(),
            hierarchy: HierarchyConfig::default(),
            raster: RasterConfig::default(),
            rgb: RgbLossConfig::default(),
            depth: DepthLossConfig::default(),
            track: TrackLossConfig::default(),
            rigidity_neighbors: 8,
            dynamic_target: 5000,
            static_target: 10000,
            static_all_frames: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.all().iter().all(|r| r.is_finite() && *r >= 0.0) {
            return Err(Error::Config("learning rates must be finite and nonnegative".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("Adam needs β1, β2 in [0, 1) and ε > 0".into()));
        }
        self.loss_weights.validate()?;
        if !(1..=LEVELS).contains(&self.hierarchy.levels) {
            return Err(Error::Config(format!("levels must be 1, 2 or 3, got {}", self.hierarchy.levels)));
        }
        if self.hierarchy.k_primitive == 0 || self.hierarchy.k_grain == 0 || self.hierarchy.top_b == 0 {
            return Err(Error::Config("cluster counts and top_b must be positive".into()));
        }
        if self.dynamic_target == 0 || self.static_target == 0 {
            return Err(Error::Config("Gaussian count targets must be positive".into()));
        }
        Ok(())
    }
}

/// Per-frame supervision in compute types.
#[derive(Clone, Debug)]
pub struct FrameTarget {
    pub camera: Camera,
    pub rgb: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub depth_valid: Vec<bool>,
    pub dynamic: Vec<bool>,
}

/// A dataset converted once for training.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub frames: Vec<FrameTarget>,
    pub tracks: TrackSet,
    pub canonical_frame: usize,
    pub scene: SceneCameras,
}

impl TrainingData {
    pub fn new(ds: &SceneDataset) -> Result<Self> {
        ds.validate()?;
        let frames = (0..ds.frames())
            .map(|t| {
                let depth = ds.depth(t);
                Ok(FrameTarget {
                    camera: ds.camera(t)?,
                    rgb: ds.rgb(t),
                    depth_valid: depth.iter().map(|d| d.is_finite() && *d > 0.0).collect(),
                    depth,
                    dynamic: ds.dynamic_mask(t),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            frames,
            tracks: ds.track_set()?,
            canonical_frame: ds.canonical_frame,
            scene: ds.scene_cameras(),
        })
    }
}

/// Loss of one frame and gradients of every trainable parameter.
#[derive(Clone, Debug)]
pub struct FrameObjective {
    pub report: LossReport,
    pub field: FieldGrad,
    pub dynamics: DynGrad,
    pub mean2d_grad_norm: Vec<f64>,
}

/// Forward and backward pass of the full objective at frame `t`. With
/// `pinned_depth_scale` the depth term uses that scale and the valid set of
/// the current render instead of re-estimating the median scale.
#[allow(clippy::too_many_arguments)]
pub fn frame_objective(
    field: &CanonicalGaussianField,
    dynamics: &MSDynamics,
    bindings: &TrackBindings,
    edges: &[(usize, usize)],
    tracks: &TrackSet,
    target: &FrameTarget,
    t: usize,
    cfg: &OptimConfig,
    pinned_depth_scale: Option<f64>,
) -> Result<FrameObjective> {
    let lw = &cfg.loss_weights;
    let cam = &target.camera;
    let transforms = dynamics.evaluate(t);
    let posed = pose_field(field, &transforms)?;
    let render = rasterize(&posed, cam, &cfg.raster);

    let (l_rgb, g_rgb) = rgb_loss(&render, &target.rgb, None, &cfg.rgb)?;
    let (l_mask, g_mask) = mask_loss(&render, &target.dynamic)?;
    let (l_depth, g_depth) = match pinned_depth_scale {
        Some(s) => {
            let valid = depth_valid_mask(&render, &target.depth, &target.depth_valid, &cfg.depth);
            depth_loss_fixed(&render, &target.depth, &valid, s)
        }
        None => depth_loss(&render, &target.depth, &target.depth_valid, &cfg.depth)?,
    };
    let track_tf = dynamics.evaluate_with(&bindings.weights, t);
    let (l_track, g_track) = track_loss(&track_tf, bindings, tracks, cam, t, &cfg.track);
    let (l_rig, g_rig_posed, g_rig_canon) = local_rigidity_loss(&field.means, &posed.means, edges);
    let report = total_loss([l_rgb, l_mask, l_depth, l_track, l_rig], lw);

    let upstream = RenderGrad {
        color: g_rgb.iter().map(|g| g * lw.rgb).collect(),
        depth: g_depth.iter().map(|g| g * lw.depth).collect(),
        alpha: vec![0.0; cam.pixels()],
        dynamic_alpha: g_mask.iter().map(|g| g * lw.mask).collect(),
    };
    let mut back = rasterize_backward(&posed, cam, &cfg.raster, &upstream);
    for (g, r) in back.posed.means.iter_mut().zip(&g_rig_posed) {
        *g += r * lw.rigidity;
    }
    let mut field_grad = FieldGrad::zeros(field.len());
    let tf_grads = pose_field_backward(field, &transforms, &back.posed, &mut field_grad);
    for (g, r) in field_grad.means.iter_mut().zip(&g_rig_canon) {
        *g += r * lw.rigidity;
    }
    let mut dyn_grad = DynGrad::zeros(&dynamics.levels, &dynamics.weights);
    dynamics.evaluate_backward(&dynamics.weights, t, &tf_grads, &mut dyn_grad);
    if lw.track != 0.0 && !bindings.is_empty() {
        let scaled: Vec<_> = g_track.iter().map(|(r, tr)| (r * lw.track, tr * lw.track)).collect();
        let mut tg = DynGrad::zeros(&dynamics.levels, &bindings.weights);
        dynamics.evaluate_backward(&bindings.weights, t, &scaled, &mut tg);
        dyn_grad.add_patterns(&tg);
    }
    Ok(FrameObjective {
        report,
        field: field_grad,
        dynamics: dyn_grad,
        mean2d_grad_norm: back.mean2d_grad_norm,
    })
}

const FIELD_SLOTS: usize = 14;

/// Trainable state plus optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub field: CanonicalGaussianField,
    pub dynamics: MSDynamics,
    pub bindings: TrackBindings,
    pub edges: Vec<(usize, usize)>,
    pub epoch: usize,
    pub step: u64,
    pub scene_extent: f64,
    field_moments: Vec<Moment>,
    logit_moments: [Vec<Vec<Moment>>; LEVELS],
    /// `[level][(pattern · T + t) · 6 + c]`, translation then rotation.
    pattern_moments: [Vec<Moment>; LEVELS],
    pattern_steps: Vec<u64>,
    grad_accum: Vec<f64>,
    grad_count: Vec<u32>,
    rng: ChaCha8Rng,
}

impl TrainState {
    fn new(field: CanonicalGaussianField, dynamics: MSDynamics, bindings: TrackBindings, cfg: &OptimConfig, scene_extent: f64) -> Self {
        let n = field.len();
        let frames = dynamics.frames;
        let logit_moments = std::array::from_fn(|l| dynamics.weights.levels[l].logits.iter().map(|z| vec![(0.0, 0.0); z.len()]).collect());
        let pattern_moments = std::array::from_fn(|l| vec![(0.0, 0.0); dynamics.levels[l].len() * frames * 6]);
        let edges = rigidity_graph(&field, cfg.rigidity_neighbors);
        Self {
            field,
            dynamics,
            bindings,
            edges,
            epoch: 0,
            step: 0,
            scene_extent,
            field_moments: vec![(0.0, 0.0); n * FIELD_SLOTS],
            logit_moments,
            pattern_moments,
            pattern_steps: vec![0; frames],
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0971_u64),
        }
    }

    pub fn gaussian_count(&self) -> usize {
        self.field.len()
    }

    /// Applies a densification outcome's parent map to every per-Gaussian
    /// array.
    fn remap(&mut self, field: CanonicalGaussianField, parent: &[usize], cfg: &OptimConfig) {
        self.field = field;
        self.dynamics.weights = self.dynamics.weights.remap(parent);
        self.field_moments = parent
            .iter()
            .flat_map(|&p| self.field_moments[p * FIELD_SLOTS..(p + 1) * FIELD_SLOTS].iter().copied())
            .collect();
        for l in 0..LEVELS {
            self.logit_moments[l] = parent.iter().map(|&p| self.logit_moments[l][p].clone()).collect();
        }
        self.grad_accum = vec![0.0; parent.len()];
        self.grad_count = vec![0; parent.len()];
        self.edges = rigidity_graph(&self.field, cfg.rigidity_neighbors);
    }

    fn apply(&mut self, t: usize, grad: &FrameObjective, cfg: &OptimConfig, total_steps: u64) {
        self.step += 1;
        let hp = &cfg.adam;
        let lr = &cfg.lr;
        let bias = hp.bias(self.step);
        let lr_means = lr.means_at(self.step - 1, total_steps);
        let f = &mut self.field;
        let g = &grad.field;
        for i in 0..f.len() {
            let m = &mut self.field_moments[i * FIELD_SLOTS..(i + 1) * FIELD_SLOTS];
            for c in 0..3 {
                adam_update(&mut f.means[i][c], g.means[i][c], &mut m[c], lr_means, bias, hp);
                adam_update(&mut f.log_scales[i][c], g.log_scales[i][c], &mut m[3 + c], lr.log_scales, bias, hp);
                adam_update(&mut f.colors[i][c], g.colors[i][c], &mut m[10 + c], lr.colors, bias, hp);
            }
            if lr.rotations > 0.0 {
                let mut q = quat_wxyz(&f.rotations[i]);
                for c in 0..4 {
                    adam_update(&mut q[c], g.rotations[i][c], &mut m[6 + c], lr.rotations, bias, hp);
                }
                f.rotations[i] = quat_from_wxyz(q[0], q[1], q[2], q[3]);
            }
            adam_update(&mut f.opacity_logits[i], g.opacity_logits[i], &mut m[13], lr.opacity_logits, bias, hp);
        }
        for l in 0..LEVELS {
            let logits = &mut self.dynamics.weights.levels[l].logits;
            for (i, z) in logits.iter_mut().enumerate() {
                for (c, v) in z.iter_mut().enumerate() {
                    adam_update(v, grad.dynamics.logits[l][i][c], &mut self.logit_moments[l][i][c], lr.blend_logits, bias, hp);
                }
            }
        }
        if t == self.dynamics.canonical_frame {
            return;
        }
        self.pattern_steps[t] += 1;
        let pbias = hp.bias(self.pattern_steps[t]);
        let frames = self.dynamics.frames;
        for l in 0..LEVELS {
            for k in 0..self.dynamics.levels[l].len() {
                let base = (k * frames + t) * 6;
                let mv = &mut self.pattern_moments[l][base..base + 6];
                let p = &mut self.dynamics.levels[l].patterns[k][t];
                let (gt, gr) = (grad.dynamics.translations[l][k], grad.dynamics.rotations[l][k]);
                for c in 0..3 {
                    adam_update(&mut p.translation[c], gt[c], &mut mv[c], lr.pattern_translations, pbias, hp);
                }
                let mut delta = Vec3::zeros();
                for c in 0..3 {
                    adam_update(&mut delta[c], gr[c], &mut mv[3 + c], lr.pattern_rotations, pbias, hp);
                }
                if delta != Vec3::zeros() {
                    p.rotation = Quat::new_normalize(*(exp_so3(&delta) * p.rotation).quaternion());
                }
            }
        }
    }

    fn parameters_finite(&self) -> bool {
        self.field.is_finite()
            && self.dynamics.weights.levels.iter().all(|l| l.logits.iter().flatten().all(|z| z.is_finite()))
            && self.dynamics.levels.iter().all(|l| {
                l.patterns
                    .iter()
                    .flatten()
                    .all(|p| p.translation.iter().all(|x| x.is_finite()) && p.rotation.coords.iter().all(|x| x.is_finite()))
            })
    }
}

/// Pixel positions of a regular grid with spacing `stride` (pixels) whose
/// cell falls inside `keep`.
pub fn grid_samples(width: usize, height: usize, stride: f64, keep: impl Fn(usize) -> bool) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut v = 0.5 * stride;
    while v < height as f64 {
        let mut u = 0.5 * stride;
        while u < width as f64 {
            if keep(v as usize * width + u as usize) {
                out.push((u, v));
            }
            u += stride;
        }
        v += stride;
    }
    out
}

/// Grid spacing that yields about `target` samples over `pixels` pixels.
pub fn stride_for_target(pixels: usize, target: usize) -> f64 {
    (pixels as f64 / target.max(1) as f64).sqrt()
}

fn color_logit(c: &Vec3) -> Vec3 {
    c.map(|v| logit(v.clamp(0.02, 0.98)))
}

/// Seeds the canonical field from depth, builds the motion hierarchy and
/// initial blend weights, and binds the tracks.
pub fn initialize(data: &TrainingData, cfg: &OptimConfig) -> Result<TrainState> {
    cfg.validate()?;
    if data.frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t0 = data.canonical_frame;
    let frame = &data.frames[t0];
    let cam = &frame.camera;
    let (w, h) = (cam.width, cam.height);
    let usable = |f: &FrameTarget, p: usize| f.depth_valid[p];

    let dyn_pixels = (0..w * h).filter(|&p| frame.dynamic[p] && usable(frame, p)).count();
    if dyn_pixels == 0 {
        return Err(Error::NoDynamicPixels { frame: t0 });
    }
    let static_pixels = (0..w * h).filter(|&p| !frame.dynamic[p] && usable(frame, p)).count();

    let mut points: Vec<(Vec3, Vec3, bool)> = Vec::new();

    let dstride = stride_for_target(dyn_pixels, cfg.dynamic_target);
    for (u, v) in grid_samples(w, h, dstride, |p| frame.dynamic[p] && usable(frame, p)) {
        let p = v as usize * w + u as usize;
        points.push((cam.unproject(u, v, frame.depth[p]), frame.rgb[p], true));
    }

    if static_pixels > 0 {
        let sstride = stride_for_target(static_pixels, cfg.static_target);
        let order: Vec<usize> = std::iter::once(t0)
            .chain((0..data.frames.len()).filter(|&t| t != t0 && cfg.static_all_frames))
            .collect();
        for t in order {
            let f = &data.frames[t];
            let covered = if t == t0 { vec![false; w * h] } else { static_coverage(&points, f) };
            for (u, v) in grid_samples(w, h, sstride, |p| !f.dynamic[p] && usable(f, p) && !covered[p]) {
                let p = v as usize * w + u as usize;
                points.push((f.camera.unproject(u, v, f.depth[p]), f.rgb[p], false));
            }
        }
    }

    let mut field = CanonicalGaussianField::default();
    let positions: Vec<Vec3> = points.iter().map(|p| p.0).collect();
    let neighbors = knn(&positions, 3);
    for (i, (x, c, dynamic)) in points.iter().enumerate() {
        let nb = &neighbors[i];
        let mean_d = if nb.is_empty() { 0.01 } else { nb.iter().map(|&j| (positions[j] - x).norm()).sum::<f64>() / nb.len() as f64 };
        let s = mean_d.max(1e-4).ln();
        field.push(*x, Vec3::repeat(s), Quat::identity(), color_logit(c), logit(0.1), *dynamic);
    }

    let instances: Vec<u32> = (0..field.len())
        .map(|i| {
            if !field.is_dynamic[i] {
                return 0;
            }
            nearest_track_instance(&data.tracks, t0, &field.means[i])
        })
        .collect();

    let tracks = &data.tracks;
    let levels = build_hierarchy(tracks, t0, &cfg.hierarchy, cfg.seed)?;
    let (weights, stats) = init_blend_weights(&field.means, &field.is_dynamic, &instances, &levels, tracks, t0, &cfg.hierarchy);
    if stats.reassigned > 0 {
        info!("{} Gaussians attached to the nearest object", stats.reassigned);
    }
    let dynamics = MSDynamics {
        levels,
        weights,
        canonical_frame: t0,
        frames: data.frames.len(),
    };
    let bindings = bind_tracks(&dynamics, tracks, &cfg.hierarchy);
    let mut depths: Vec<f64> = (0..w * h).filter(|&p| usable(frame, p)).map(|p| frame.depth[p]).collect();
    let extent = crate::losses::median(&mut depths);
    info!(
        "initialized {} Gaussians ({} dynamic), {} bound tracks, level sizes {:?}",
        field.len(),
        field.dynamic_count(),
        bindings.len(),
        dynamics.levels.iter().map(|l| l.len()).collect::<Vec<_>>()
    );
    Ok(TrainState::new(field, dynamics, bindings, cfg, extent))
}

/// Pixels of `f` already explained by a static seed: some seed projects
/// into the pixel or one of its 4-neighbours at a depth within 2% of the
/// observed one.
fn static_coverage(points: &[(Vec3, Vec3, bool)], f: &FrameTarget) -> Vec<bool> {
    let cam = &f.camera;
    let (w, h) = (cam.width as i64, cam.height as i64);
    let mut hit = vec![false; cam.pixels()];
    for (x, _, dynamic) in points {
        if *dynamic {
            continue;
        }
        let c = cam.to_camera(x);
        if c.z <= 0.0 {
            continue;
        }
        let uv = cam.project(&c);
        let (px, py) = (uv.x.floor() as i64, uv.y.floor() as i64);
        if px < 0 || py < 0 || px >= w || py >= h {
            continue;
        }
        let p = (py * w + px) as usize;
        if (f.depth[p] - c.z).abs() <= 0.02 * c.z {
            hit[p] = true;
        }
    }
    let mut out = hit.clone();
    for y in 0..h {
        for x in 0..w {
            if hit[(y * w + x) as usize] {
                for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w && ny < h {
                        out[(ny * w + nx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Instance of the dynamic track closest to `x` at the canonical frame.
fn nearest_track_instance(tracks: &TrackSet, t0: usize, x: &Vec3) -> u32 {
    let mut best = (f64::INFINITY, 0);
    for j in 0..tracks.len() {
        if tracks.instance(j) == 0 || !tracks.is_visible(j, t0) {
            continue;
        }
        let d = (tracks.position(j, t0) - x).norm_squared();
        if d < best.0 {
            best = (d, tracks.instance(j));
        }
    }
    best.1
}

fn nonfinite(epoch: usize, frame: usize, report: &LossReport, n: usize) -> Option<Error> {
    let terms = report.terms();
    let bad = TERM_NAMES.iter().zip(terms).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n).or((!report.total.is_finite()).then_some("total"))?;
    let detail = format!("terms {:?}, {} Gaussians", terms, n);
    error!("non-finite {bad} loss at epoch {epoch}, frame {frame}: {detail}");
    Some(Error::NonFiniteLoss {
        epoch,
        frame,
        term: bad.to_string(),
        detail,
    })
}

/// One optimization step on frame `t`.
pub fn train_step(state: &mut TrainState, data: &TrainingData, t: usize, cfg: &OptimConfig) -> Result<LossReport> {
    let obj = frame_objective(&state.field, &state.dynamics, &state.bindings, &state.edges, &data.tracks, &data.frames[t], t, cfg, None)?;
    if let Some(e) = nonfinite(state.epoch, t, &obj.report, state.field.len()) {
        return Err(e);
    }
    if !obj.field.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: state.epoch,
            frame: t,
            term: "gradient".into(),
            detail: format!("non-finite Gaussian gradient with loss {:?}", obj.report.terms()),
        });
    }
    for (i, g) in obj.mean2d_grad_norm.iter().enumerate() {
        if *g > 0.0 {
            state.grad_accum[i] += g;
            state.grad_count[i] += 1;
        }
    }
    let total = (cfg.epochs.max(1) * data.frames.len()) as u64;
    state.apply(t, &obj, cfg, total);
    Ok(obj.report)
}

/// One pass over all frames in a seeded random order, followed by
/// densification when scheduled. Returns the mean loss over the epoch.
pub fn train_epoch(state: &mut TrainState, data: &TrainingData, cfg: &OptimConfig) -> Result<LossReport> {
    let n = data.frames.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut state.rng);
    let mut mean = LossReport::default();
    for t in order {
        let r = train_step(state, data, t, cfg)?;
        mean.add_scaled(&r, 1.0 / n as f64);
    }
    state.epoch += 1;
    if !state.parameters_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: state.epoch,
            frame: 0,
            term: "parameters".into(),
            detail: "a parameter became non-finite".into(),
        });
    }
    if cfg.densify.due(state.epoch) {
        let avg: Vec<f64> = state
            .grad_accum
            .iter()
            .zip(&state.grad_count)
            .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
            .collect();
        let mut opts = cfg.densify.options.clone();
        opts.scene_extent = state.scene_extent;
        let out = densify_and_prune(&state.field, &avg, &opts, &mut state.rng)?;
        info!("epoch {}: densify cloned {} split {} pruned {} -> {}", state.epoch, out.cloned, out.split, out.pruned, out.field.len());
        let parent = out.parent.clone();
        state.remap(out.field, &parent, cfg);
    }
    Ok(mean)
}

/// Mean loss over all frames without updating anything.
pub fn evaluate_loss(state: &TrainState, data: &TrainingData, cfg: &OptimConfig) -> Result<LossReport> {
    let n = data.frames.len();
    let mut mean = LossReport::default();
    for t in 0..n {
        let obj = frame_objective(&state.field, &state.dynamics, &state.bindings, &state.edges, &data.tracks, &data.frames[t], t, cfg, None)?;
        mean.add_scaled(&obj.report, 1.0 / n as f64);
    }
    Ok(mean)
}

/// Renders the held-out views (view `t` at time `t`) and scores them on
/// their covisibility masks.
pub fn evaluate_heldout(field: &CanonicalGaussianField, dynamics: &MSDynamics, ds: &SceneDataset, raster: &RasterConfig) -> Result<Option<EvalResult>> {
    let Some(eval) = &ds.eval else {
        return Ok(None);
    };
    let intr = ds.intrinsics;
    let mut frames = Vec::with_capacity(eval.views.len());
    for v in 0..eval.views.len() {
        let t = v.min(dynamics.frames.saturating_sub(1));
        let cam = intr.camera(&eval.views.cameras[v])?;
        let posed = pose_field(field, &dynamics.evaluate(t))?;
        let out = rasterize(&posed, &cam, raster);
        let gt = crate::dataset::rgb_to_f64(&eval.views.rgb[v]);
        let mask: Vec<bool> = eval.covis[v].iter().map(|c| *c > 0).collect();
        frames.push(evaluate_frame(v, &out.color, &gt, &mask, intr.width, intr.height)?);
    }
    Ok(Some(EvalResult::from_frames(frames)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
    pub gaussians: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub history: Vec<EpochLog>,
    pub track_rms: f64,
    pub seconds: f64,
}

impl FitOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,rgb,mask,depth,track,rigidity,total,gaussians,seconds\n");
        for e in &self.history {
            let l = &e.loss;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.3}\n",
                e.epoch, l.rgb, l.mask, l.depth, l.track, l.rigidity, l.total, e.gaussians, e.seconds
            ));
        }
        s
    }
}

/// Initializes and trains for `cfg.epochs` epochs, reporting each epoch to
/// `progress`.
pub fn fit(data: &TrainingData, cfg: &OptimConfig, mut progress: impl FnMut(&EpochLog)) -> Result<FitOutcome> {
    let start = Instant::now();
    let mut state = initialize(data, cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let loss = train_epoch(&mut state, data, cfg)?;
        let log = EpochLog {
            epoch: state.epoch,
            loss,
            gaussians: state.field.len(),
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&log);
        history.push(log);
    }
    let track_rms = track_fit_rms(&state.dynamics, &state.bindings, &data.tracks);
    Ok(FitOutcome {
        state,
        history,
        track_rms,
        seconds: start.elapsed().as_secs_f64(),
    })
}
