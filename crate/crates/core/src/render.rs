//! CPU splatting rasterizer with an analytic backward pass.
//!
//! Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`. Gaussians
//! are sorted once per image by camera depth (ties by index), and every
//! pixel composites the Gaussians whose screen-space footprint box covers it,
//! front to back.

use nalgebra::{Matrix2, Matrix2x3, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{PosedGaussianField, PosedGrad};
use crate::geom::{Mat3, Se3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Se3,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, world_to_camera: Se3) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "invalid camera: fx={fx} fy={fy} size={width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
        })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.world_to_camera.transform_point(p)
    }

    /// Pixel coordinates of a camera-space point.
    pub fn project(&self, c: &Vec3) -> Vector2<f64> {
        Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy)
    }

    /// Jacobian of [`Camera::project`] at a camera-space point.
    pub fn projection_jacobian(&self, c: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / c.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * c.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * c.y * iz * iz,
        )
    }

    /// World point seen at pixel coordinates `(u, v)` with camera depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let c = Vec3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        self.world_to_camera.inverse().transform_point(&c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub z_near: f64,
    /// Minimum eigenvalue of every screen-space covariance, in px².
    pub eigen_floor: f64,
    pub alpha_cap: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    pub min_exponent: f64,
    /// Footprint half-extent in standard deviations.
    pub footprint_sigmas: f64,
    pub depth_eps: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            z_near: 0.01,
            eigen_floor: 0.05,
            alpha_cap: 0.999,
            min_transmittance: 1e-4,
            min_exponent: -12.0,
            footprint_sigmas: 3.0,
            depth_eps: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

fn floor_eigenvalues(m: &Matrix2<f64>, floor: f64) -> Matrix2<f64> {
    let e = SymmetricEigen::new(*m);
    if e.eigenvalues.iter().all(|l| *l >= floor) {
        return *m;
    }
    let l = e.eigenvalues.map(|l| l.max(floor));
    e.eigenvectors * Matrix2::from_diagonal(&l) * e.eigenvectors.transpose()
}

/// Backward of `floor_eigenvalues` for a symmetric upstream gradient.
fn floor_eigenvalues_backward(m: &Matrix2<f64>, floor: f64, g: &Matrix2<f64>) -> Matrix2<f64> {
    let e = SymmetricEigen::new(*m);
    if e.eigenvalues.iter().all(|l| *l >= floor) {
        return *g;
    }
    let lam = e.eigenvalues;
    let f = lam.map(|l| l.max(floor));
    let df = lam.map(|l| if l >= floor { 1.0 } else { 0.0 });
    let v = e.eigenvectors;
    let gv = v.transpose() * g * v;
    let mut k = Matrix2::zeros();
    for i in 0..2 {
        for j in 0..2 {
            let d = lam[i] - lam[j];
            k[(i, j)] = if i == j || d.abs() < 1e-12 { df[i] } else { (f[i] - f[j]) / d };
        }
    }
    v * gv.component_mul(&k) * v.transpose()
}

/// EWA projection of one Gaussian. Returns `None` when the center is not in
/// front of the near plane.
pub fn project_gaussian(mean: &Vec3, cov: &Mat3, cam: &Camera, cfg: &RasterConfig) -> Option<Projected> {
    let c = cam.to_camera(mean);
    if c.z <= cfg.z_near {
        return None;
    }
    let w = cam.world_to_camera.rotation_matrix();
    let j = cam.projection_jacobian(&c);
    let raw = j * (w * cov * w.transpose()) * j.transpose();
    let raw = (raw + raw.transpose()) * 0.5;
    Some(Projected {
        mean2d: cam.project(&c),
        cov2d: floor_eigenvalues(&raw, cfg.eigen_floor),
        depth: c.z,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub dynamic_alpha: Vec<f64>,
}

impl RenderOutput {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![Vec3::zeros(); n],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
            dynamic_alpha: vec![0.0; n],
        }
    }
}

/// Upstream gradients, one entry per pixel for each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrad {
    pub color: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub dynamic_alpha: Vec<f64>,
}

impl RenderGrad {
    pub fn zeros(pixels: usize) -> Self {
        Self {
            color: vec![Vec3::zeros(); pixels],
            depth: vec![0.0; pixels],
            alpha: vec![0.0; pixels],
            dynamic_alpha: vec![0.0; pixels],
        }
    }
}

struct Splat {
    index: usize,
    cam_point: Vec3,
    mean2d: Vector2<f64>,
    raw_cov: Matrix2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
}

/// Sorted splats plus, for every pixel, the splats covering it in order.
struct Prepared {
    splats: Vec<Splat>,
    offsets: Vec<usize>,
    entries: Vec<u32>,
}

fn prepare(field: &PosedGaussianField, cam: &Camera, cfg: &RasterConfig) -> Prepared {
    let w = cam.world_to_camera.rotation_matrix();
    let (width, height) = (cam.width as i64, cam.height as i64);
    let mut splats = Vec::new();
    let mut boxes = Vec::new();
    for i in 0..field.len() {
        let c = cam.to_camera(&field.means[i]);
        if c.z <= cfg.z_near {
            continue;
        }
        let j = cam.projection_jacobian(&c);
        let raw = j * (w * field.covariances[i] * w.transpose()) * j.transpose();
        let raw = (raw + raw.transpose()) * 0.5;
        let cov = floor_eigenvalues(&raw, cfg.eigen_floor);
        let Some(conic) = cov.try_inverse() else { continue };
        let m = cam.project(&c);
        let rx = cfg.footprint_sigmas * cov[(0, 0)].sqrt();
        let ry = cfg.footprint_sigmas * cov[(1, 1)].sqrt();
        let x0 = ((m.x - rx - 0.5).ceil() as i64).max(0);
        let x1 = ((m.x + rx - 0.5).floor() as i64).min(width - 1);
        let y0 = ((m.y - ry - 0.5).ceil() as i64).max(0);
        let y1 = ((m.y + ry - 0.5).floor() as i64).min(height - 1);
        if x0 > x1 || y0 > y1 || !m.iter().all(|v| v.is_finite()) {
            continue;
        }
        splats.push(Splat {
            index: i,
            cam_point: c,
            mean2d: m,
            raw_cov: raw,
            conic,
            opacity: field.opacities[i],
        });
        boxes.push((x0 as usize, x1 as usize, y0 as usize, y1 as usize));
    }
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .cam_point
            .z
            .total_cmp(&splats[b].cam_point.z)
            .then(splats[a].index.cmp(&splats[b].index))
    });
    let mut sorted_boxes = Vec::with_capacity(order.len());
    let mut slots: Vec<Option<Splat>> = splats.into_iter().map(Some).collect();
    let splats: Vec<Splat> = order
        .iter()
        .map(|&o| {
            sorted_boxes.push(boxes[o]);
            slots[o].take().expect("each splat taken once")
        })
        .collect();

    let pixels = cam.pixels();
    let mut counts = vec![0usize; pixels + 1];
    for &(x0, x1, y0, y1) in &sorted_boxes {
        for y in y0..=y1 {
            for x in x0..=x1 {
                counts[y * cam.width + x + 1] += 1;
            }
        }
    }
    for p in 0..pixels {
        counts[p + 1] += counts[p];
    }
    let offsets = counts.clone();
    let mut fill = counts;
    let mut entries = vec![0u32; offsets[pixels]];
    for (s, &(x0, x1, y0, y1)) in sorted_boxes.iter().enumerate() {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = y * cam.width + x;
                entries[fill[p]] = s as u32;
                fill[p] += 1;
            }
        }
    }
    Prepared { splats, offsets, entries }
}

/// One composited Gaussian at one pixel.
#[derive(Clone, Copy)]
struct Contribution {
    splat: usize,
    sigma: f64,
    transmittance: f64,
    /// Pixel offset from the projected mean.
    offset: Vector2<f64>,
    capped: bool,
    clamped: bool,
}

#[derive(Default)]
struct PixelResult {
    color: Vec3,
    depth_sum: f64,
    alpha: f64,
    dynamic_alpha: f64,
}

fn composite_pixel(
    prep: &Prepared,
    field: &PosedGaussianField,
    cfg: &RasterConfig,
    p: usize,
    px: Vector2<f64>,
    contribs: &mut Vec<Contribution>,
) -> PixelResult {
    contribs.clear();
    let mut out = PixelResult::default();
    let mut t = 1.0;
    for &s in &prep.entries[prep.offsets[p]..prep.offsets[p + 1]] {
        let sp = &prep.splats[s as usize];
        let d = px - sp.mean2d;
        let power = -0.5 * d.dot(&(sp.conic * d));
        let clamped = power < cfg.min_exponent;
        let raw = sp.opacity * power.max(cfg.min_exponent).exp();
        let capped = raw > cfg.alpha_cap;
        let sigma = raw.min(cfg.alpha_cap);
        let w = sigma * t;
        let i = sp.index;
        out.color += field.colors[i] * w;
        out.depth_sum += sp.cam_point.z * w;
        out.alpha += w;
        if field.is_dynamic[i] {
            out.dynamic_alpha += w;
        }
        contribs.push(Contribution {
            splat: s as usize,
            sigma,
            transmittance: t,
            offset: d,
            capped,
            clamped,
        });
        t *= 1.0 - sigma;
        if t < cfg.min_transmittance {
            break;
        }
    }
    out
}

fn pixel_center(cam: &Camera, p: usize) -> Vector2<f64> {
    Vector2::new((p % cam.width) as f64 + 0.5, (p / cam.width) as f64 + 0.5)
}

pub fn rasterize(field: &PosedGaussianField, cam: &Camera, cfg: &RasterConfig) -> RenderOutput {
    let prep = prepare(field, cam, cfg);
    let mut out = RenderOutput::zeros(cam.width, cam.height);
    let mut contribs = Vec::new();
    for p in 0..cam.pixels() {
        let r = composite_pixel(&prep, field, cfg, p, pixel_center(cam, p), &mut contribs);
        out.color[p] = r.color;
        out.alpha[p] = r.alpha;
        out.depth[p] = r.depth_sum / r.alpha.max(cfg.depth_eps);
        out.dynamic_alpha[p] = r.dynamic_alpha;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterBackward {
    pub posed: PosedGrad,
    /// Norm of each Gaussian's screen-space mean gradient in normalized
    /// device coordinates, zero for Gaussians that were not drawn.
    pub mean2d_grad_norm: Vec<f64>,
}

/// Gradients of `<upstream, rasterize(field, cam)>` with respect to the
/// posed means, covariances, activated colors and activated opacities.
pub fn rasterize_backward(field: &PosedGaussianField, cam: &Camera, cfg: &RasterConfig, upstream: &RenderGrad) -> RasterBackward {
    let prep = prepare(field, cam, cfg);
    let n = field.len();
    let mut posed = PosedGrad::zeros(n);
    let ns = prep.splats.len();
    let mut g_mean2d = vec![Vector2::zeros(); ns];
    let mut g_conic = vec![Matrix2::zeros(); ns];
    let mut g_depth = vec![0.0; ns];
    let mut contribs = Vec::new();

    for p in 0..cam.pixels() {
        let (gc, gd, ga, gdyn) = (upstream.color[p], upstream.depth[p], upstream.alpha[p], upstream.dynamic_alpha[p]);
        if gc.iter().all(|v| *v == 0.0) && gd == 0.0 && ga == 0.0 && gdyn == 0.0 {
            continue;
        }
        let r = composite_pixel(&prep, field, cfg, p, pixel_center(cam, p), &mut contribs);
        let denom = r.alpha.max(cfg.depth_eps);
        let g_zsum = gd / denom;
        let g_one = ga - if r.alpha > cfg.depth_eps { gd * r.depth_sum / (r.alpha * r.alpha) } else { 0.0 };

        let mut suffix = 0.0;
        for c in contribs.iter().rev() {
            let sp = &prep.splats[c.splat];
            let i = sp.index;
            let w = c.sigma * c.transmittance;
            let dyn_f = if field.is_dynamic[i] { gdyn } else { 0.0 };
            let s = gc.dot(&field.colors[i]) + g_zsum * sp.cam_point.z + g_one + dyn_f;
            posed.colors[i] += gc * w;
            g_depth[c.splat] += g_zsum * w;
            let g_sigma = c.transmittance * s - suffix / (1.0 - c.sigma);
            suffix += w * s;
            if c.capped {
                continue;
            }
            let gauss = c.sigma / sp.opacity.max(f64::MIN_POSITIVE);
            posed.opacities[i] += g_sigma * gauss;
            if c.clamped {
                continue;
            }
            let g_power = g_sigma * c.sigma;
            let qd = sp.conic * c.offset;
            // power = -0.5 dᵀ Q d with d = pixel - mean
            g_mean2d[c.splat] += qd * g_power;
            g_conic[c.splat] -= c.offset * c.offset.transpose() * (0.5 * g_power);
        }
    }

    let w = cam.world_to_camera.rotation_matrix();
    let mut norms = vec![0.0; n];
    for (s, sp) in prep.splats.iter().enumerate() {
        let i = sp.index;
        let c = sp.cam_point;
        let gm = g_mean2d[s];
        norms[i] = Vector2::new(gm.x * 0.5 * cam.width as f64, gm.y * 0.5 * cam.height as f64).norm();

        let q = sp.conic;
        let g_cov2d = -(q.transpose() * g_conic[s] * q.transpose());
        let g_cov2d = (g_cov2d + g_cov2d.transpose()) * 0.5;
        let g_raw = floor_eigenvalues_backward(&sp.raw_cov, cfg.eigen_floor, &g_cov2d);
        let j = cam.projection_jacobian(&c);
        let cov_cam = w * field.covariances[i] * w.transpose();
        let g_cov_cam = j.transpose() * g_raw * j;
        posed.covariances[i] += w.transpose() * g_cov_cam * w;
        let g_j = g_raw * j * cov_cam * 2.0;

        let iz = 1.0 / c.z;
        let (fx, fy) = (cam.fx, cam.fy);
        let mut g_c = Vec3::new(
            gm.x * fx * iz,
            gm.y * fy * iz,
            -gm.x * fx * c.x * iz * iz - gm.y * fy * c.y * iz * iz + g_depth[s],
        );
        g_c.x += g_j[(0, 2)] * (-fx * iz * iz);
        g_c.y += g_j[(1, 2)] * (-fy * iz * iz);
        g_c.z += g_j[(0, 0)] * (-fx * iz * iz)
            + g_j[(0, 2)] * (2.0 * fx * c.x * iz * iz * iz)
            + g_j[(1, 1)] * (-fy * iz * iz)
            + g_j[(1, 2)] * (2.0 * fy * c.y * iz * iz * iz);
        posed.means[i] += w.transpose() * g_c;
    }
    RasterBackward {
        posed,
        mean2d_grad_norm: norms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::PosedGaussianField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(w: usize, h: usize, f: f64) -> Camera {
        Camera::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h, Se3::identity()).unwrap()
    }

    fn field(items: &[(Vec3, f64, Vec3, f64, bool)]) -> PosedGaussianField {
        PosedGaussianField {
            means: items.iter().map(|g| g.0).collect(),
            covariances: items.iter().map(|g| Mat3::identity() * g.1).collect(),
            colors: items.iter().map(|g| g.2).collect(),
            opacities: items.iter().map(|g| g.3).collect(),
            is_dynamic: items.iter().map(|g| g.4).collect(),
        }
    }

    #[test]
    fn projection_examples() {
        let c = Camera::new(100.0, 100.0, 50.0, 50.0, 100, 100, Se3::identity()).unwrap();
        let cfg = RasterConfig::default();
        let p = project_gaussian(&Vec3::new(0.0, 0.0, 1.0), &Mat3::identity(), &c, &cfg).unwrap();
        // J = diag(fx/z, fy/z) in the xy block; the z row contributes x/z² = 0
        assert!((p.cov2d - Matrix2::identity() * 1e4).norm() < 1e-9);
        let p = project_gaussian(&Vec3::new(0.0, 0.0, 2.0), &(Mat3::identity() * 1e-4), &c, &cfg).unwrap();
        assert_eq!(p.mean2d, Vector2::new(50.0, 50.0));
        assert_eq!(p.depth, 2.0);
        assert!(project_gaussian(&Vec3::new(0.0, 0.0, -1.0), &Mat3::identity(), &c, &cfg).is_none());
        // tiny covariances are floored
        let p = project_gaussian(&Vec3::new(0.3, 0.0, 2.0), &(Mat3::identity() * 1e-12), &c, &cfg).unwrap();
        let e = SymmetricEigen::new(p.cov2d);
        assert!(e.eigenvalues.iter().all(|l| (*l - 0.05).abs() < 1e-12));
    }

    #[test]
    fn off_axis_jacobian_matches_symbolic_oracle() {
        let c = Camera::new(80.0, 90.0, 10.0, 12.0, 20, 20, Se3::identity()).unwrap();
        let m = Vec3::new(0.2, -0.1, 1.5);
        let cov = Mat3::new(0.02, 0.003, 0.0, 0.003, 0.01, 0.001, 0.0, 0.001, 0.03);
        let p = project_gaussian(&m, &cov, &c, &RasterConfig::default()).unwrap();
        let (x, y, z) = (m.x, m.y, m.z);
        let j = Matrix2x3::new(80.0 / z, 0.0, -80.0 * x / (z * z), 0.0, 90.0 / z, -90.0 * y / (z * z));
        assert!((p.cov2d - j * cov * j.transpose()).norm() < 1e-9);
    }

    #[test]
    fn empty_and_single_opaque() {
        let c = cam(8, 8, 8.0);
        let cfg = RasterConfig::default();
        let out = rasterize(&PosedGaussianField::default(), &c, &cfg);
        assert!(out.color.iter().all(|v| *v == Vec3::zeros()));
        assert!(out.alpha.iter().all(|v| *v == 0.0));
        let f = field(&[(Vec3::new(0.0, 0.0, 1.0), 4.0, Vec3::new(1.0, 0.0, 0.0), 1.0, true)]);
        let out = rasterize(&f, &c, &cfg);
        let p = 4 * 8 + 4;
        assert!((out.color[p] - Vec3::new(0.999, 0.0, 0.0)).norm() < 1e-3);
        assert!((out.alpha[p] - 0.999).abs() < 1e-3);
        assert!((out.depth[p] - 1.0).abs() < 1e-12);
        assert_eq!(out.dynamic_alpha[p], out.alpha[p]);
    }

    #[test]
    fn two_layer_compositing() {
        let c = cam(8, 8, 8.0);
        let cfg = RasterConfig::default();
        // pixel (4, 4) sits exactly on both projected centers
        let f = field(&[
            (Vec3::new(0.125, 0.125, 2.0), 0.5, Vec3::new(0.0, 1.0, 0.0), 0.6, false),
            (Vec3::new(0.0625, 0.0625, 1.0), 0.5, Vec3::new(1.0, 0.0, 0.0), 0.6, true),
        ]);
        let out = rasterize(&f, &c, &cfg);
        let p = 4 * 8 + 4;
        let want = Vec3::new(0.6, 0.4 * 0.6, 0.0);
        assert!((out.color[p] - want).norm() < 1e-12, "{:?}", out.color[p]);
        assert!((out.dynamic_alpha[p] - 0.6).abs() < 1e-12);
        assert!((out.alpha[p] - 0.84).abs() < 1e-12);
        assert!((out.depth[p] - (0.6 * 1.0 + 0.24 * 2.0) / 0.84).abs() < 1e-12);
    }

    #[test]
    fn color_gradient_equals_sigma_for_single_gaussian() {
        let c = cam(8, 8, 8.0);
        let cfg = RasterConfig::default();
        let f = field(&[(Vec3::new(0.05, -0.02, 1.0), 0.01, Vec3::new(0.3, 0.5, 0.7), 0.7, false)]);
        let p = 3 * 8 + 5;
        let mut g = RenderGrad::zeros(64);
        g.color[p] = Vec3::new(1.0, 0.0, 0.0);
        let b = rasterize_backward(&f, &c, &cfg, &g);
        let out = rasterize(&f, &c, &cfg);
        assert!((b.posed.colors[0].x - out.alpha[p]).abs() < 1e-15);
        let zero = rasterize_backward(&f, &c, &cfg, &RenderGrad::zeros(64));
        assert!(zero.posed.means[0] == Vec3::zeros() && zero.posed.opacities[0] == 0.0);
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> PosedGaussianField {
        let mut f = PosedGaussianField::default();
        for _ in 0..n {
            let m = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(1.0..2.0));
            let a = Mat3::from_fn(|_, _| rng.random_range(-0.12..0.12));
            f.means.push(m);
            f.covariances.push(a * a.transpose() + Mat3::identity() * 0.004);
            f.colors.push(Vec3::from_fn(|_, _| rng.random_range(0.0..1.0)));
            f.opacities.push(rng.random_range(0.2..0.9));
            f.is_dynamic.push(rng.random_bool(0.5));
        }
        f
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = RasterConfig::default();
        let c = Camera::new(9.0, 8.5, 4.1, 3.9, 8, 8, Se3::from_axis_angle(Vec3::new(0.1, 1.0, 0.0), 0.05, Vec3::new(0.02, 0.0, 0.1))).unwrap();
        for _ in 0..5 {
            let f = random_scene(&mut rng, 5);
            let mut up = RenderGrad::zeros(64);
            for p in 0..64 {
                up.color[p] = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                up.depth[p] = rng.random_range(-1.0..1.0);
                up.alpha[p] = rng.random_range(-1.0..1.0);
                up.dynamic_alpha[p] = rng.random_range(-1.0..1.0);
            }
            let loss = |f: &PosedGaussianField| {
                let o = rasterize(f, &c, &cfg);
                (0..64)
                    .map(|p| o.color[p].dot(&up.color[p]) + o.depth[p] * up.depth[p] + o.alpha[p] * up.alpha[p] + o.dynamic_alpha[p] * up.dynamic_alpha[p])
                    .sum::<f64>()
            };
            let b = rasterize_backward(&f, &c, &cfg, &up);
            let h = 1e-6;
            let check = |a: f64, n: f64, what: &str| {
                assert!((a - n).abs() <= 1e-4 * (1.0 + n.abs().max(a.abs())), "{what}: analytic {a} numeric {n}");
            };
            for i in 0..f.len() {
                for k in 0..3 {
                    let mut p = f.clone();
                    p.means[i][k] += h;
                    let mut m = f.clone();
                    m.means[i][k] -= h;
                    check(b.posed.means[i][k], (loss(&p) - loss(&m)) / (2.0 * h), "mean");
                    let mut p = f.clone();
                    p.colors[i][k] += h;
                    let mut m = f.clone();
                    m.colors[i][k] -= h;
                    check(b.posed.colors[i][k], (loss(&p) - loss(&m)) / (2.0 * h), "color");
                }
                for r in 0..3 {
                    for s in r..3 {
                        let mut p = f.clone();
                        let mut m = f.clone();
                        p.covariances[i][(r, s)] += h;
                        m.covariances[i][(r, s)] -= h;
                        if r != s {
                            p.covariances[i][(s, r)] += h;
                            m.covariances[i][(s, r)] -= h;
                        }
                        let g = &b.posed.covariances[i];
                        let a = if r == s { g[(r, s)] } else { g[(r, s)] + g[(s, r)] };
                        check(a, (loss(&p) - loss(&m)) / (2.0 * h), "cov");
                    }
                }
                let mut p = f.clone();
                p.opacities[i] += h;
                let mut m = f.clone();
                m.opacities[i] -= h;
                check(b.posed.opacities[i], (loss(&p) - loss(&m)) / (2.0 * h), "opacity");
            }
        }
    }

    #[test]
    fn eigen_floor_backward_matches_finite_differences() {
        let m = Matrix2::new(0.03, 0.01, 0.01, 2.0);
        let g = Matrix2::new(0.7, -0.2, -0.2, 0.4);
        let a = floor_eigenvalues_backward(&m, 0.05, &g);
        let h = 1e-7;
        for (r, s) in [(0, 0), (1, 1), (0, 1)] {
            let mut p = m;
            let mut q = m;
            p[(r, s)] += h;
            q[(r, s)] -= h;
            if r != s {
                p[(s, r)] += h;
                q[(s, r)] -= h;
            }
            let n = ((floor_eigenvalues(&p, 0.05) - floor_eigenvalues(&q, 0.05)).component_mul(&g).sum()) / (2.0 * h);
            let an = if r == s { a[(r, s)] } else { a[(r, s)] + a[(s, r)] };
            assert!((an - n).abs() < 1e-6, "{an} vs {n}");
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let c = cam(16, 16, 16.0);
        let cfg = RasterConfig::default();
        for _ in 0..10 {
            let f = random_scene(&mut rng, 10);
            let a = rasterize(&f, &c, &cfg);
            let b = rasterize(&f, &c, &cfg);
            assert_eq!(a, b);
            for p in 0..256 {
                assert!((0.0..=1.0).contains(&a.alpha[p]));
                assert!(a.dynamic_alpha[p] <= a.alpha[p] + 1e-6);
            }
        }
    }
}
