//! Synthetic scenes with exact depth, instance masks, 3D tracks and a fixed
//! held-out camera.
//!
//! World coordinates follow the camera convention (x right, y down, z
//! forward). Objects sit near the origin in front of a textured backdrop
//! plane; the training camera sweeps along x at z ≈ −2.2 while looking at the
//! origin.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{camera_matrix, rgb_from_f64, EvalViews, Intrinsics, RawTracks, SceneDataset, ViewSet};
use crate::error::{Error, Result};
use crate::gaussians::{logit, pose_field, CanonicalGaussianField};
use crate::geom::{Quat, Se3, Vec3};
use crate::msdyn::select_canonical_frame;
use crate::render::{rasterize, Camera, RasterConfig, RenderOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Rigid,
    Articulated,
    Deformable,
}

impl FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid" => Ok(Self::Rigid),
            "articulated" => Ok(Self::Articulated),
            "deformable" => Ok(Self::Deformable),
            _ => Err(Error::Config(format!("unknown scene kind `{s}` (rigid, articulated, deformable)"))),
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rigid => "rigid",
            Self::Articulated => "articulated",
            Self::Deformable => "deformable",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Scales every object motion; 0 freezes the objects.
    pub amplitude: f64,
    /// Half-width of the training camera's sweep along x, in meters.
    pub camera_sweep: f64,
    pub camera_distance: f64,
    /// Position of the fixed evaluation camera, looking at the origin.
    pub eval_position: [f64; 3],
    pub track_count: usize,
    /// Relative standard deviation of multiplicative depth noise.
    pub noise_depth: f64,
    /// Standard deviation of track jitter in pixels.
    pub noise_track: f64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind) -> Self {
        Self {
            kind,
            frames: 24,
            width: 64,
            height: 64,
            seed: 0,
            amplitude: 1.0,
            camera_sweep: 0.3,
            camera_distance: 2.2,
            eval_position: [1.0, -0.5, -1.8],
            track_count: 256,
            noise_depth: 0.0,
            noise_track: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config(format!("resolution must be at least 32x32, got {}x{}", self.width, self.height)));
        }
        if !(self.amplitude.is_finite() && self.camera_sweep.is_finite() && self.noise_depth >= 0.0 && self.noise_track >= 0.0) {
            return Err(Error::Config("motion and noise parameters must be finite and nonnegative".into()));
        }
        if self.camera_distance <= 0.5 {
            return Err(Error::Config("camera distance must exceed 0.5 m".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            width: self.width,
            height: self.height,
            fx: 0.9 * self.width as f64,
            fy: 0.9 * self.width as f64,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }

    fn phase(&self, t: usize) -> f64 {
        t as f64 / (self.frames - 1) as f64
    }
}

/// World-to-camera pose of a camera at `position` looking at `target`.
pub fn look_at(position: Vec3, target: Vec3) -> Se3 {
    let z = (target - position).normalize();
    let x = Vec3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let r = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Se3::from_rt(&r, -(r * position))
}

pub fn training_pose(spec: &SceneSpec, t: usize) -> Se3 {
    let x = spec.camera_sweep * (2.0 * spec.phase(t) - 1.0);
    look_at(Vec3::new(x, 0.0, -spec.camera_distance), Vec3::zeros())
}

pub fn eval_pose(spec: &SceneSpec) -> Se3 {
    look_at(Vec3::from(spec.eval_position), Vec3::zeros())
}

/// Rotation by `angle` about `axis` through `center`, followed by a shift.
fn about(center: Vec3, axis: Vec3, angle: f64, shift: Vec3) -> Se3 {
    Se3::from_translation(center + shift) * Se3::from_axis_angle(axis, angle, Vec3::zeros()) * Se3::from_translation(-center)
}

/// Which analytic motion drives a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Static,
    Rigid(usize),
    Body,
    Flap,
    Warped,
}

pub const HINGE_POINT: [f64; 3] = [0.15, 0.0, 0.0];

/// Ground truth scene and its analytic motion.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub spec: SceneSpec,
    pub field: CanonicalGaussianField,
    pub parts: Vec<Part>,
    pub instance_of: Vec<u32>,
    /// Gaussians whose means are the emitted tracks, drawn from the
    /// camera-facing half of each object.
    pub track_gaussians: Vec<usize>,
}

impl GroundTruth {
    /// Rigid motion of object `k` (rigid scenes), the articulated body, or
    /// the rigid component of the deformable object.
    pub fn object_motion(&self, part: Part, t: usize) -> Se3 {
        let a = self.spec.amplitude;
        let s = self.spec.phase(t);
        match part {
            Part::Static => Se3::identity(),
            Part::Rigid(0) => about(rigid_centers()[0], Vec3::y(), a * 0.5 * s, Vec3::new(0.2, -0.1, 0.0) * (a * s)),
            Part::Rigid(_) => about(
                rigid_centers()[1],
                Vec3::new(1.0, 1.0, 0.0),
                -a * 0.4 * s,
                Vec3::new(-0.1 * s, 0.15 * (PI * s).sin(), -0.1 * s) * a,
            ),
            Part::Body | Part::Flap => about(Vec3::new(-0.15, 0.0, 0.0), Vec3::z(), a * 0.15 * s, Vec3::new(0.1, -0.05, 0.0) * (a * s)),
            Part::Warped => about(Vec3::zeros(), Vec3::y(), a * 0.3 * s, Vec3::new(0.1, 0.0, 0.0) * (a * s)),
        }
    }

    pub fn hinge_angle(&self, t: usize) -> f64 {
        self.spec.amplitude * 0.9 * (PI * self.spec.phase(t)).sin()
    }

    /// Hinge axis at frame `t` as (point, unit direction).
    pub fn hinge_axis(&self, t: usize) -> (Vec3, Vec3) {
        let body = self.object_motion(Part::Body, t);
        (body.transform_point(&Vec3::from(HINGE_POINT)), body.rotation * Vec3::y())
    }

    /// Warp displacement of a canonical point in the object frame.
    pub fn warp(&self, p: &Vec3, t: usize) -> Vec3 {
        let a = self.spec.amplitude * 0.09 * (PI * self.spec.phase(t)).sin();
        let k = 2.0 * PI / 0.8;
        Vec3::new((k * p.y).sin(), 0.6 * (k * p.x + 0.5).sin(), 0.5 * (k * p.x).cos() * (k * p.y).sin()) * a
    }

    /// Motion of Gaussian `i` at frame `t`.
    pub fn transform(&self, i: usize, t: usize) -> Se3 {
        let part = self.parts[i];
        match part {
            Part::Flap => {
                let hinge = about(Vec3::from(HINGE_POINT), Vec3::y(), self.hinge_angle(t), Vec3::zeros());
                self.object_motion(Part::Body, t) * hinge
            }
            Part::Warped => self.object_motion(part, t) * Se3::from_translation(self.warp(&self.field.means[i], t)),
            _ => self.object_motion(part, t),
        }
    }

    pub fn transforms(&self, t: usize) -> Vec<Se3> {
        (0..self.field.len()).map(|i| self.transform(i, t)).collect()
    }

    pub fn instance_count(&self) -> u32 {
        self.instance_of.iter().copied().max().unwrap_or(0)
    }
}

fn rigid_centers() -> [Vec3; 2] {
    [Vec3::new(-0.45, 0.0, 0.0), Vec3::new(0.45, 0.05, 0.1)]
}

fn textured(p: &Vec3, base: Vec3, phase: f64, freq: f64) -> Vec3 {
    Vec3::new(
        base.x + 0.25 * (freq * p.x + phase).sin(),
        base.y + 0.25 * (freq * p.y + 1.3 * phase).sin(),
        base.z + 0.25 * (freq * (p.x + p.z) + 0.7 * phase).cos(),
    )
    .map(|v| v.clamp(0.02, 0.98))
}

fn color_logit(c: Vec3) -> Vec3 {
    c.map(logit)
}

/// Gaussians on an ellipsoid surface, evenly spread by a Fibonacci lattice.
fn add_ellipsoid(
    field: &mut CanonicalGaussianField,
    parts: &mut Vec<Part>,
    instances: &mut Vec<u32>,
    center: Vec3,
    radii: Vec3,
    spacing: f64,
    part: Part,
    instance: u32,
    base: Vec3,
    phase: f64,
    keep: impl Fn(&Vec3) -> bool,
) {
    let area = 4.0 * PI * ((radii.x * radii.y).powf(1.6) + (radii.x * radii.z).powf(1.6) + (radii.y * radii.z).powf(1.6)).powf(1.0 / 1.6) / 3.0;
    let n = (area / (spacing * spacing)).ceil() as usize;
    let golden = PI * (3.0 - 5f64.sqrt());
    for k in 0..n {
        let y = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let th = golden * k as f64;
        let dir = Vec3::new(r * th.cos(), y, r * th.sin());
        let p = center + dir.component_mul(&radii);
        if !keep(&p) {
            continue;
        }
        let normal = dir.component_div(&radii).normalize();
        let rot = Quat::rotation_between(&Vec3::z(), &normal).unwrap_or_else(|| Quat::from_axis_angle(&Vec3::x_axis(), PI));
        let s = (spacing * 0.7).ln();
        field.push(
            p,
            Vec3::new(s, s, (spacing * 0.25).ln()),
            rot,
            color_logit(textured(&p, base, phase, 9.0)),
            logit(0.95),
            true,
        );
        parts.push(part);
        instances.push(instance);
    }
}

fn add_backdrop(field: &mut CanonicalGaussianField, parts: &mut Vec<Part>, instances: &mut Vec<u32>, phase: f64) {
    let spacing: f64 = 0.08;
    let half: f64 = 2.2;
    let n = (2.0 * half / spacing).round() as usize + 1;
    let s = (spacing * 0.65).ln();
    for a in 0..n {
        for b in 0..n {
            let p = Vec3::new(-half + a as f64 * spacing, -half + b as f64 * spacing, 0.8);
            let c = textured(&p, Vec3::new(0.45, 0.5, 0.55), phase, 2.5);
            field.push(p, Vec3::new(s, s, (0.004f64).ln()), Quat::identity(), color_logit(c), logit(0.99), false);
            parts.push(Part::Static);
            instances.push(0);
        }
    }
}

/// Builds the ground-truth Gaussian scene for a spec.
pub fn ground_truth(spec: &SceneSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut field = CanonicalGaussianField::default();
    let mut parts = Vec::new();
    let mut inst = Vec::new();
    add_backdrop(&mut field, &mut parts, &mut inst, phase);
    let spacing = 0.035;
    match spec.kind {
        SceneKind::Rigid => {
            let c = rigid_centers();
            add_ellipsoid(&mut field, &mut parts, &mut inst, c[0], Vec3::new(0.3, 0.26, 0.26), spacing, Part::Rigid(0), 1, Vec3::new(0.75, 0.35, 0.3), phase, |_| true);
            add_ellipsoid(&mut field, &mut parts, &mut inst, c[1], Vec3::new(0.26, 0.3, 0.26), spacing, Part::Rigid(1), 2, Vec3::new(0.3, 0.65, 0.4), phase + 1.0, |_| true);
        }
        SceneKind::Articulated => {
            add_ellipsoid(&mut field, &mut parts, &mut inst, Vec3::new(-0.15, 0.0, 0.0), Vec3::new(0.3, 0.24, 0.22), spacing, Part::Body, 1, Vec3::new(0.7, 0.45, 0.3), phase, |p| p.x < HINGE_POINT[0]);
            add_ellipsoid(&mut field, &mut parts, &mut inst, Vec3::new(0.42, 0.0, 0.0), Vec3::new(0.27, 0.2, 0.06), spacing, Part::Flap, 1, Vec3::new(0.35, 0.4, 0.75), phase + 2.0, |_| true);
        }
        SceneKind::Deformable => {
            add_ellipsoid(&mut field, &mut parts, &mut inst, Vec3::zeros(), Vec3::new(0.45, 0.35, 0.3), spacing, Part::Warped, 1, Vec3::new(0.6, 0.5, 0.35), phase, |_| true);
        }
    }
    let mut depth_sum = std::collections::HashMap::<u32, (f64, usize)>::new();
    for i in 0..field.len() {
        let e = depth_sum.entry(inst[i]).or_default();
        e.0 += field.means[i].z;
        e.1 += 1;
    }
    let objects: Vec<usize> = (0..field.len())
        .filter(|&i| {
            let (sum, n) = depth_sum[&inst[i]];
            field.is_dynamic[i] && field.means[i].z < sum / n as f64
        })
        .collect();
    let m = spec.track_count.min(objects.len());
    let mut picked: Vec<usize> = sample(&mut rng, objects.len(), m).into_iter().map(|k| objects[k]).collect();
    picked.sort_unstable();
    Ok(GroundTruth {
        spec: spec.clone(),
        field,
        parts,
        instance_of: inst,
        track_gaussians: picked,
    })
}

/// Renders the true scene at frame `t` from `pose`, plus per-pixel instance
/// labels (an instance owns a pixel when its coverage is at least 0.5).
pub fn render_truth(gt: &GroundTruth, pose: &Se3, t: usize) -> Result<(RenderOutput, Vec<u8>)> {
    let intr = gt.spec.intrinsics();
    let cam = Camera::new(intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height, *pose)?;
    let cfg = RasterConfig::default();
    let mut posed = pose_field(&gt.field, &gt.transforms(t))?;
    let out = rasterize(&posed, &cam, &cfg);
    let mut labels = vec![0u8; cam.pixels()];
    let mut best = vec![0.5f64; cam.pixels()];
    for k in 1..=gt.instance_count() {
        for (d, i) in posed.is_dynamic.iter_mut().zip(&gt.instance_of) {
            *d = *i == k;
        }
        let cov = rasterize(&posed, &cam, &cfg).dynamic_alpha;
        for p in 0..cam.pixels() {
            if cov[p] >= best[p] {
                best[p] = cov[p];
                labels[p] = k as u8;
            }
        }
    }
    Ok((out, labels))
}

/// Whether a world point is seen by a view: in front, inside the image and
/// within `tol` (relative) of the rendered depth at its pixel.
fn visible_in(cam: &Camera, depth: &[f64], p: &Vec3, tol: f64) -> bool {
    let c = cam.to_camera(p);
    if c.z <= 0.01 {
        return false;
    }
    let uv = cam.project(&c);
    if !(uv.x >= 0.0 && uv.y >= 0.0 && uv.x < cam.width as f64 && uv.y < cam.height as f64) {
        return false;
    }
    let d = depth[uv.y as usize * cam.width + uv.x as usize];
    (d - c.z).abs() <= tol * c.z
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: SceneDataset,
    pub truth: GroundTruth,
}

/// Generates the full dataset for a spec.
pub fn generate(spec: &SceneSpec) -> Result<Generated> {
    let truth = ground_truth(spec)?;
    let intr = spec.intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_DA7A);
    let t_count = spec.frames;

    let mut train = ViewSet::default();
    let mut depths = Vec::with_capacity(t_count);
    let mut cams = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let pose = training_pose(spec, t);
        let (out, labels) = render_truth(&truth, &pose, t)?;
        train.cameras.push(camera_matrix(&pose));
        train.rgb.push(rgb_from_f64(&out.color));
        train.masks.push(labels);
        cams.push(intr.camera(&camera_matrix(&pose))?);
        depths.push(out.depth);
    }

    let m = truth.track_gaussians.len();
    let mut tracks = RawTracks {
        count: m,
        frames: t_count,
        ..Default::default()
    };
    for &g in &truth.track_gaussians {
        let x0 = truth.field.means[g];
        for t in 0..t_count {
            let mut x = truth.transform(g, t).transform_point(&x0);
            let vis = visible_in(&cams[t], &depths[t], &x, 0.01);
            let mut conf = if vis { 1.0 } else { 0.0 };
            if vis && spec.noise_track > 0.0 {
                let j: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let cam = &cams[t];
                let c = cam.to_camera(&x);
                let shifted = c + Vec3::new(j[0] * spec.noise_track * c.z / cam.fx, j[1] * spec.noise_track * c.z / cam.fy, 0.0);
                x = cam.world_to_camera.inverse().transform_point(&shifted);
                conf = (-(j[0] * j[0] + j[1] * j[1]) / 2.0).exp();
            }
            tracks.positions.push([x.x as f32, x.y as f32, x.z as f32]);
            tracks.confidence.push(conf as f32);
            tracks.visible.push(vis);
        }
    }

    for d in &depths {
        let noisy: Vec<f32> = d
            .iter()
            .map(|v| {
                let n: f64 = if spec.noise_depth > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                (v * (1.0 + spec.noise_depth * n)) as f32
            })
            .collect();
        train.depth.push(noisy);
    }

    let epose = eval_pose(spec);
    let ecam = intr.camera(&camera_matrix(&epose))?;
    let mut eval = EvalViews::default();
    for t in 0..t_count {
        let (out, labels) = render_truth(&truth, &epose, t)?;
        let covis: Vec<u8> = (0..ecam.pixels())
            .map(|p| {
                if out.alpha[p] <= 0.5 {
                    return 0;
                }
                let (u, v) = ((p % ecam.width) as f64 + 0.5, (p / ecam.width) as f64 + 0.5);
                let x = ecam.unproject(u, v, out.depth[p]);
                let seen = if labels[p] > 0 {
                    visible_in(&cams[t], &depths[t], &x, 0.01)
                } else {
                    (0..t_count).any(|s| visible_in(&cams[s], &depths[s], &x, 0.01))
                };
                seen as u8
            })
            .collect();
        eval.views.cameras.push(camera_matrix(&epose));
        eval.views.rgb.push(rgb_from_f64(&out.color));
        eval.views.depth.push(out.depth.iter().map(|d| *d as f32).collect());
        eval.views.masks.push(labels);
        eval.covis.push(covis);
    }

    let mut dataset = SceneDataset {
        intrinsics: intr,
        canonical_frame: 0,
        train,
        tracks,
        eval: Some(eval),
    };
    dataset.canonical_frame = select_canonical_frame(&dataset.track_set()?)?;
    Ok(Generated { dataset, truth })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checked_samples: usize,
    pub violations: Vec<String>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Re-checks the internal consistency of a dataset: visible tracks project
/// inside the image, depth at track pixels agrees with track depth within
/// 2%, and each instance's mask covers at least 95% of its visible track
/// samples.
pub fn verify_dataset(dataset: &SceneDataset) -> Result<VerifyReport> {
    dataset.validate()?;
    let mut report = VerifyReport::default();
    let tr = &dataset.tracks;
    let instances = dataset.track_instances()?;
    let (w, h) = (dataset.intrinsics.width, dataset.intrinsics.height);
    let mut covered = std::collections::BTreeMap::<u32, (usize, usize)>::new();
    for t in 0..dataset.frames() {
        let cam = dataset.camera(t)?;
        let (mut outside, mut depth_bad) = (0usize, 0usize);
        for j in 0..tr.count {
            let k = j * tr.frames + t;
            if !tr.visible[k] {
                continue;
            }
            report.checked_samples += 1;
            let p = tr.positions[k];
            let c = cam.to_camera(&Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
            let uv = cam.project(&c);
            if !(c.z > 0.0 && uv.x >= 0.0 && uv.y >= 0.0 && uv.x < w as f64 && uv.y < h as f64) {
                outside += 1;
                continue;
            }
            let pix = uv.y as usize * w + uv.x as usize;
            let d = dataset.train.depth[t][pix] as f64;
            if !d.is_finite() || (d - c.z).abs() > 0.02 * c.z {
                depth_bad += 1;
            }
            let e = covered.entry(instances[j]).or_default();
            e.0 += 1;
            if instances[j] > 0 && dataset.train.masks[t][pix] as u32 == instances[j] {
                e.1 += 1;
            }
        }
        if outside > 0 {
            report.violations.push(format!("frame {t}: {outside} visible track(s) project outside the image"));
        }
        if depth_bad > 0 {
            report.violations.push(format!("frame {t}: depth differs from track depth by more than 2% at {depth_bad} track pixel(s)"));
        }
    }
    for (inst, (total, hit)) in covered {
        if inst == 0 {
            report.violations.push(format!("{total} visible track sample(s) fall on no dynamic instance"));
        } else if (hit as f64) < 0.95 * total as f64 {
            report.violations.push(format!("instance {inst}: mask covers {hit} of {total} visible track samples (< 95%)"));
        }
    }
    Ok(report)
}
