//! Shared fixtures: random toy scenes, a finite-difference checker for the
//! full training objective, and a per-pixel reference compositor.

#![allow(dead_code)]

use msdyn_core::gaussians::{sigmoid, CanonicalGaussianField, PosedGaussianField};
use msdyn_core::geom::{exp_so3, quat_from_wxyz, quat_wxyz, Mat3, Quat, Se3, Vec3};
use msdyn_core::losses::{rigidity_graph, LossWeights};
use msdyn_core::msdyn::{BlendWeights, MSDynamics, MotionLevel, TrackBindings, TrackSet, LEVELS};
use msdyn_core::optim::{frame_objective, FrameTarget, OptimConfig};
use msdyn_core::render::{Camera, RasterConfig, RenderOutput};
use nalgebra::{Matrix2, Vector2};
use rand::Rng;

pub fn toy_camera(rng: &mut impl Rng, width: usize, height: usize) -> Camera {
    let pose = Se3::from_axis_angle(
        Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        rng.random_range(-0.1..0.1),
        Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0),
    );
    let f = width as f64 * 1.2;
    Camera::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height, pose).unwrap()
}

fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Quat {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Se3::from_axis_angle(axis, rng.random_range(-max_angle..max_angle), Vec3::zeros()).rotation
}

/// Random Gaussians in front of a camera near the origin looking along +z.
pub fn toy_field(rng: &mut impl Rng, n: usize) -> CanonicalGaussianField {
    let mut f = CanonicalGaussianField::default();
    for i in 0..n {
        let z = rng.random_range(2.0..4.0);
        f.push(
            Vec3::new(rng.random_range(-0.35..0.35) * z, rng.random_range(-0.35..0.35) * z, z),
            Vec3::new(rng.random_range(-2.0..-0.8), rng.random_range(-2.0..-0.8), rng.random_range(-2.0..-0.8)),
            random_rotation(rng, 3.0),
            Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            rng.random_range(-1.0..2.0),
            i % 3 != 2,
        );
    }
    f
}

pub fn posed_toy_field(rng: &mut impl Rng, n: usize) -> PosedGaussianField {
    let f = toy_field(rng, n);
    PosedGaussianField {
        means: f.means.clone(),
        covariances: (0..n).map(|i| f.covariance(i)).collect(),
        colors: f.colors.iter().map(|c| c.map(sigmoid)).collect(),
        opacities: (0..n).map(|i| f.opacity(i)).collect(),
        is_dynamic: f.is_dynamic.clone(),
    }
}

fn random_se3(rng: &mut impl Rng, angle: f64, shift: f64) -> Se3 {
    Se3::new(
        random_rotation(rng, angle),
        Vec3::new(rng.random_range(-shift..shift), rng.random_range(-shift..shift), rng.random_range(-shift..shift)),
    )
}

/// Three levels with `[2, 3, 3]` patterns over `frames` frames; identity at
/// frame 0.
fn toy_levels(rng: &mut impl Rng, frames: usize) -> [MotionLevel; LEVELS] {
    let sizes = [2, 3, 3];
    let scale = [0.15, 0.06, 0.03];
    std::array::from_fn(|l| {
        let patterns = (0..sizes[l])
            .map(|_| {
                (0..frames)
                    .map(|t| if t == 0 { Se3::identity() } else { random_se3(rng, 3.0 * scale[l], scale[l]) })
                    .collect()
            })
            .collect();
        MotionLevel {
            level: l as u8 + 1,
            patterns,
            parent_of: (0..sizes[l]).map(|k| (l > 0).then(|| k % sizes[l - 1])).collect(),
            members: vec![Vec::new(); sizes[l]],
            instance_of: vec![1; sizes[l]],
        }
    })
}

/// Random candidate lists (1 to 3 per level) and logits for `n` items;
/// items where `active` is false get none.
fn toy_weights(rng: &mut impl Rng, active: &[bool], levels: &[MotionLevel; LEVELS]) -> BlendWeights {
    let mut w = BlendWeights::with_len(active.len());
    for (i, a) in active.iter().enumerate() {
        if !a {
            continue;
        }
        for l in 0..LEVELS {
            let k = levels[l].len();
            let c = rng.random_range(1..=k.min(3));
            let mut cands: Vec<usize> = (0..k).collect();
            for j in 0..c {
                let s = rng.random_range(j..k);
                cands.swap(j, s);
            }
            cands.truncate(c);
            w.levels[l].logits[i] = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            w.levels[l].candidates[i] = cands;
        }
    }
    w
}

pub struct ToyScene {
    pub field: CanonicalGaussianField,
    pub dynamics: MSDynamics,
    pub bindings: TrackBindings,
    pub tracks: TrackSet,
    pub edges: Vec<(usize, usize)>,
    pub target: FrameTarget,
    pub t: usize,
}

/// A random scene with every loss term active: up to five Gaussians on an
/// 8×8 image, three motion levels, and two bound tracks.
pub fn toy_scene(rng: &mut impl Rng) -> ToyScene {
    let (w, h) = (8, 8);
    let n = rng.random_range(3..=5);
    let frames = 3;
    let t = rng.random_range(1..frames);
    let field = toy_field(rng, n);
    let levels = toy_levels(rng, frames);
    let weights = toy_weights(rng, &field.is_dynamic, &levels);
    let dynamics = MSDynamics {
        levels,
        weights,
        canonical_frame: 0,
        frames,
    };
    let nt = 2;
    let canonical: Vec<Vec3> = (0..nt).map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(2.5..3.5))).collect();
    let bweights = toy_weights(rng, &vec![true; nt], &dynamics.levels);
    let mut positions = Vec::new();
    for c in &canonical {
        for _ in 0..frames {
            positions.push(c + Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
        }
    }
    let conf: Vec<f64> = (0..nt * frames).map(|_| rng.random_range(0.3..1.0)).collect();
    let tracks = TrackSet::new(frames, positions, vec![true; nt * frames], conf, vec![1; nt]).unwrap();
    let bindings = TrackBindings {
        track_ids: (0..nt).collect(),
        canonical,
        weights: bweights,
    };
    let edges = rigidity_graph(&field, 2);
    let camera = toy_camera(rng, w, h);
    let target = FrameTarget {
        camera,
        rgb: (0..w * h).map(|_| Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))).collect(),
        depth: (0..w * h).map(|_| rng.random_range(2.0..4.0)).collect(),
        depth_valid: (0..w * h).map(|_| rng.random_bool(0.9)).collect(),
        dynamic: (0..w * h).map(|_| rng.random_bool(0.5)).collect(),
    };
    ToyScene {
        field,
        dynamics,
        bindings,
        tracks,
        edges,
        target,
        t,
    }
}

/// Configuration for gradient checks: depth validity must not flip under
/// tiny perturbations, so the alpha threshold is disabled.
pub fn check_config(weights: LossWeights) -> OptimConfig {
    let mut cfg = OptimConfig {
        loss_weights: weights,
        ..OptimConfig::default()
    };
    cfg.depth.min_alpha = 0.0;
    cfg
}

pub const DEPTH_SCALE: f64 = 1.1;

fn objective(s: &ToyScene, field: &CanonicalGaussianField, dynamics: &MSDynamics, cfg: &OptimConfig) -> f64 {
    frame_objective(field, dynamics, &s.bindings, &s.edges, &s.tracks, &s.target, s.t, cfg, Some(DEPTH_SCALE))
        .unwrap()
        .report
        .total
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
}

impl GradCheck {
    fn add(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            return;
        }
        self.checked += 1;
        self.worst = self.worst.max((analytic - numeric).abs() / scale);
    }

    pub fn merge(&mut self, o: GradCheck) {
        self.checked += o.checked;
        self.worst = self.worst.max(o.worst);
    }
}

/// Central differences of the total objective against every analytic
/// gradient component: canonical Gaussian parameters, blend logits and the
/// motion patterns at the scene's frame.
pub fn check_scene(s: &ToyScene, cfg: &OptimConfig) -> GradCheck {
    let h = 1e-6;
    let obj = frame_objective(&s.field, &s.dynamics, &s.bindings, &s.edges, &s.tracks, &s.target, s.t, cfg, Some(DEPTH_SCALE)).unwrap();
    let mut out = GradCheck::default();
    let d = &s.dynamics;
    let fd = |perturb: &dyn Fn(&mut CanonicalGaussianField, &mut MSDynamics, f64)| {
        let (mut fa, mut da) = (s.field.clone(), d.clone());
        perturb(&mut fa, &mut da, h);
        let (mut fb, mut db) = (s.field.clone(), d.clone());
        perturb(&mut fb, &mut db, -h);
        (objective(s, &fa, &da, cfg) - objective(s, &fb, &db, cfg)) / (2.0 * h)
    };
    for i in 0..s.field.len() {
        for c in 0..3 {
            out.add(obj.field.means[i][c], fd(&|f, _, e| f.means[i][c] += e));
            out.add(obj.field.log_scales[i][c], fd(&|f, _, e| f.log_scales[i][c] += e));
            out.add(obj.field.colors[i][c], fd(&|f, _, e| f.colors[i][c] += e));
        }
        for c in 0..4 {
            out.add(
                obj.field.rotations[i][c],
                fd(&|f, _, e| {
                    let mut q = quat_wxyz(&f.rotations[i]);
                    q[c] += e;
                    f.rotations[i] = quat_from_wxyz(q[0], q[1], q[2], q[3]);
                }),
            );
        }
        out.add(obj.field.opacity_logits[i], fd(&|f, _, e| f.opacity_logits[i] += e));
        for l in 0..LEVELS {
            for c in 0..d.weights.levels[l].logits[i].len() {
                out.add(obj.dynamics.logits[l][i][c], fd(&|_, m, e| m.weights.levels[l].logits[i][c] += e));
            }
        }
    }
    let t = s.t;
    for l in 0..LEVELS {
        for k in 0..d.levels[l].len() {
            for c in 0..3 {
                out.add(obj.dynamics.translations[l][k][c], fd(&|_, m, e| m.levels[l].patterns[k][t].translation[c] += e));
                out.add(
                    obj.dynamics.rotations[l][k][c],
                    fd(&|_, m, e| {
                        let mut delta = Vec3::zeros();
                        delta[c] = e;
                        let p = &mut m.levels[l].patterns[k][t];
                        p.rotation = exp_so3(&delta) * p.rotation;
                    }),
                );
            }
        }
    }
    out
}

/// Independent per-pixel compositor: projects every Gaussian for every
/// pixel, keeps those whose footprint box covers the pixel, sorts them by
/// depth then index and alpha-blends front to back.
pub fn reference_render(field: &PosedGaussianField, cam: &Camera, cfg: &RasterConfig) -> RenderOutput {
    let w_rot = cam.world_to_camera.rotation_matrix();
    struct Item {
        z: f64,
        index: usize,
        mean: Vector2<f64>,
        cov: Matrix2<f64>,
    }
    let mut items = Vec::new();
    for i in 0..field.len() {
        let c = cam.world_to_camera.rotation_matrix() * field.means[i] + cam.world_to_camera.translation;
        if c.z <= cfg.z_near {
            continue;
        }
        let (fx, fy) = (cam.fx, cam.fy);
        let j = nalgebra::Matrix2x3::new(fx / c.z, 0.0, -fx * c.x / (c.z * c.z), 0.0, fy / c.z, -fy * c.y / (c.z * c.z));
        let sigma_cam: Mat3 = w_rot * field.covariances[i] * w_rot.transpose();
        let raw = j * sigma_cam * j.transpose();
        let (a, b, d) = (raw[(0, 0)], 0.5 * (raw[(0, 1)] + raw[(1, 0)]), raw[(1, 1)]);
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        let (l1, l2) = (mid + rad, mid - rad);
        let cov = if l2 >= cfg.eigen_floor {
            Matrix2::new(a, b, b, d)
        } else {
            let v1 = if b.abs() > 1e-300 { Vector2::new(l1 - d, b).normalize() } else if a >= d { Vector2::new(1.0, 0.0) } else { Vector2::new(0.0, 1.0) };
            let v2 = Vector2::new(-v1.y, v1.x);
            let (f1, f2) = (l1.max(cfg.eigen_floor), l2.max(cfg.eigen_floor));
            v1 * v1.transpose() * f1 + v2 * v2.transpose() * f2
        };
        items.push(Item {
            z: c.z,
            index: i,
            mean: Vector2::new(fx * c.x / c.z + cam.cx, fy * c.y / c.z + cam.cy),
            cov,
        });
    }
    items.sort_by(|p, q| p.z.total_cmp(&q.z).then(p.index.cmp(&q.index)));
    let mut out = RenderOutput::zeros(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let p = y * cam.width + x;
            let mut trans = 1.0;
            let (mut color, mut dsum, mut alpha, mut dyn_alpha) = (Vec3::zeros(), 0.0, 0.0, 0.0);
            for it in &items {
                let rx = cfg.footprint_sigmas * it.cov[(0, 0)].sqrt();
                let ry = cfg.footprint_sigmas * it.cov[(1, 1)].sqrt();
                if (px.x - it.mean.x).abs() > rx || (px.y - it.mean.y).abs() > ry {
                    continue;
                }
                let Some(inv) = it.cov.try_inverse() else { continue };
                let dlt = px - it.mean;
                let e = (-0.5 * dlt.dot(&(inv * dlt))).max(cfg.min_exponent);
                let sigma = (field.opacities[it.index] * e.exp()).min(cfg.alpha_cap);
                let wgt = sigma * trans;
                color += field.colors[it.index] * wgt;
                dsum += it.z * wgt;
                alpha += wgt;
                if field.is_dynamic[it.index] {
                    dyn_alpha += wgt;
                }
                trans *= 1.0 - sigma;
                if trans < cfg.min_transmittance {
                    break;
                }
            }
            out.color[p] = color;
            out.alpha[p] = alpha;
            out.depth[p] = dsum / alpha.max(cfg.depth_eps);
            out.dynamic_alpha[p] = dyn_alpha;
        }
    }
    out
}

/// Largest absolute difference over every channel of two renders.
pub fn render_diff(a: &RenderOutput, b: &RenderOutput) -> f64 {
    let mut m: f64 = 0.0;
    for p in 0..a.alpha.len() {
        m = m.max((a.color[p] - b.color[p]).amax());
        m = m.max((a.depth[p] - b.depth[p]).abs());
        m = m.max((a.alpha[p] - b.alpha[p]).abs());
        m = m.max((a.dynamic_alpha[p] - b.dynamic_alpha[p]).abs());
    }
    m
}
