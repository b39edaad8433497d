//! Canonical Gaussian field, posing under per-Gaussian rigid transforms and
//! adaptive density control.

use nalgebra::Vector4;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{quat_matrix_backward, quat_to_matrix, Mat3, Quat, Se3, Vec3};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Gaussian parameters at the canonical frame.
///
/// `colors` hold pre-sigmoid RGB values and `opacity_logits` pre-sigmoid
/// opacities; both are activated when the field is posed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CanonicalGaussianField {
    pub means: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub colors: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    pub is_dynamic: Vec<bool>,
}

impl CanonicalGaussianField {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, mean: Vec3, log_scale: Vec3, rotation: Quat, color: Vec3, opacity_logit: f64, dynamic: bool) {
        self.means.push(mean);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.colors.push(color);
        self.opacity_logits.push(opacity_logit);
        self.is_dynamic.push(dynamic);
    }

    pub fn dynamic_count(&self) -> usize {
        self.is_dynamic.iter().filter(|d| **d).count()
    }

    pub fn covariance(&self, i: usize) -> Mat3 {
        assemble_covariance(&self.log_scales[i], &self.rotations[i])
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotations.iter().all(|q| q.coords.iter().all(|x| x.is_finite()))
            && self.colors.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logits.iter().all(|x| x.is_finite())
    }

    /// Copies Gaussian `i` of `self` to the end of `out`.
    fn copy_into(&self, i: usize, out: &mut CanonicalGaussianField) {
        out.push(
            self.means[i],
            self.log_scales[i],
            self.rotations[i],
            self.colors[i],
            self.opacity_logits[i],
            self.is_dynamic[i],
        );
    }
}

/// `R diag(exp(2 s)) Rᵀ`.
pub fn assemble_covariance(log_scale: &Vec3, rotation: &Quat) -> Mat3 {
    let r = quat_to_matrix(rotation);
    let s2 = log_scale.map(|s| (2.0 * s).exp());
    r * Mat3::from_diagonal(&s2) * r.transpose()
}

/// Gradient of [`assemble_covariance`]: returns `(dL/dlog_scale, dL/dq)`.
pub fn assemble_covariance_backward(log_scale: &Vec3, rotation: &Quat, g_cov: &Mat3) -> (Vec3, Vector4<f64>) {
    let r = quat_to_matrix(rotation);
    let s = log_scale.map(f64::exp);
    let m = r * Mat3::from_diagonal(&s);
    let g_sym = g_cov + g_cov.transpose();
    let g_m = g_sym * m;
    // M = R S
    let g_r = g_m * Mat3::from_diagonal(&s);
    let mut g_log = Vec3::zeros();
    for i in 0..3 {
        let g_si: f64 = (0..3).map(|row| r[(row, i)] * g_m[(row, i)]).sum();
        g_log[i] = g_si * s[i];
    }
    (g_log, quat_matrix_backward(rotation, &g_r))
}

/// The field at one time step, with activated colors and opacities.
#[derive(Clone, Debug, Default)]
pub struct PosedGaussianField {
    pub means: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    pub colors: Vec<Vec3>,
    pub opacities: Vec<f64>,
    pub is_dynamic: Vec<bool>,
}

impl PosedGaussianField {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Applies `μ_t = R μ + t`, `Σ_t = R Σ Rᵀ`. Static Gaussians must be given
/// the identity; appearance is activated and copied unchanged.
pub fn pose_field(field: &CanonicalGaussianField, transforms: &[Se3]) -> Result<PosedGaussianField> {
    if transforms.len() != field.len() {
        return Err(Error::CountMismatch {
            what: "per-Gaussian transforms",
            expected: field.len(),
            found: transforms.len(),
        });
    }
    let n = field.len();
    let mut out = PosedGaussianField {
        means: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        is_dynamic: field.is_dynamic.clone(),
    };
    for (i, tf) in transforms.iter().enumerate() {
        let r = tf.rotation_matrix();
        out.means.push(r * field.means[i] + tf.translation);
        out.covariances.push(r * field.covariance(i) * r.transpose());
        out.colors.push(field.colors[i].map(sigmoid));
        out.opacities.push(field.opacity(i));
    }
    Ok(out)
}

/// Gradients with respect to a [`PosedGaussianField`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PosedGrad {
    pub means: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    pub colors: Vec<Vec3>,
    pub opacities: Vec<f64>,
}

impl PosedGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vec3::zeros(); n],
            covariances: vec![Mat3::zeros(); n],
            colors: vec![Vec3::zeros(); n],
            opacities: vec![0.0; n],
        }
    }
}

/// Gradients with respect to canonical field parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldGrad {
    pub means: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    pub rotations: Vec<Vector4<f64>>,
    pub colors: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
}

impl FieldGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vec3::zeros(); n],
            log_scales: vec![Vec3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            colors: vec![Vec3::zeros(); n],
            opacity_logits: vec![0.0; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotations.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.colors.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logits.iter().all(|x| x.is_finite())
    }
}

/// Gradient of one per-Gaussian rigid transform: `(dL/dR, dL/dt)`.
pub type TransformGrad = (Mat3, Vec3);

/// Backward pass of [`pose_field`]. Canonical gradients are accumulated into
/// `field_grad`; the returned vector holds the transform gradients.
pub fn pose_field_backward(
    field: &CanonicalGaussianField,
    transforms: &[Se3],
    grad: &PosedGrad,
    field_grad: &mut FieldGrad,
) -> Vec<TransformGrad> {
    let mut out = Vec::with_capacity(field.len());
    for (i, tf) in transforms.iter().enumerate() {
        let r = tf.rotation_matrix();
        let mu0 = field.means[i];
        let cov0 = field.covariance(i);
        let g_mu = grad.means[i];
        let g_cov = grad.covariances[i];

        field_grad.means[i] += r.transpose() * g_mu;
        let g_cov0 = r.transpose() * g_cov * r;
        let (g_log, g_q) = assemble_covariance_backward(&field.log_scales[i], &field.rotations[i], &g_cov0);
        field_grad.log_scales[i] += g_log;
        field_grad.rotations[i] += g_q;

        let c = field.colors[i].map(sigmoid);
        field_grad.colors[i] += grad.colors[i].component_mul(&c.map(|s| s * (1.0 - s)));
        let a = field.opacity(i);
        field_grad.opacity_logits[i] += grad.opacities[i] * a * (1.0 - a);

        let g_r = g_mu * mu0.transpose() + (g_cov + g_cov.transpose()) * r * cov0;
        out.push((g_r, g_mu));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyOptions {
    /// Mean screen-space positional gradient above which a Gaussian is densified.
    pub grad_threshold: f64,
    /// Gaussians whose activated opacity falls below this are removed.
    pub prune_opacity: f64,
    /// Largest scale (fraction of `scene_extent`) still treated as small, i.e. cloned.
    pub percent_dense: f64,
    pub scene_extent: f64,
    pub split_divisor: f64,
}

impl Default for DensifyOptions {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            percent_dense: 0.01,
            scene_extent: 1.0,
            split_divisor: 1.6,
        }
    }
}

/// Result of [`densify_and_prune`]. `parent[i]` is the index in the input
/// field that Gaussian `i` of the output descends from (itself if untouched).
#[derive(Clone, Debug)]
pub struct DensifyOutcome {
    pub field: CanonicalGaussianField,
    pub parent: Vec<usize>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small high-gradient Gaussians, splits large ones into two children
/// with scales divided by `split_divisor`, then prunes transparent Gaussians.
pub fn densify_and_prune<R: Rng>(
    field: &CanonicalGaussianField,
    grad_accum: &[f64],
    opts: &DensifyOptions,
    rng: &mut R,
) -> Result<DensifyOutcome> {
    if grad_accum.len() != field.len() {
        return Err(Error::CountMismatch {
            what: "densification gradient accumulator",
            expected: field.len(),
            found: grad_accum.len(),
        });
    }
    let small = opts.percent_dense * opts.scene_extent;
    let shrink = opts.split_divisor.ln();

    let mut out = CanonicalGaussianField::default();
    let mut parent = Vec::with_capacity(field.len());
    let mut appended = CanonicalGaussianField::default();
    let mut appended_parent = Vec::new();
    let (mut cloned, mut split) = (0, 0);

    for i in 0..field.len() {
        let hot = grad_accum[i] > opts.grad_threshold;
        let max_scale = field.log_scales[i].max().exp();
        if hot && max_scale > small {
            split += 1;
            let r = quat_to_matrix(&field.rotations[i]);
            let s = field.log_scales[i].map(f64::exp);
            for _ in 0..2 {
                let n = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                let mut child = field.clone_one(i);
                child.means[0] = field.means[i] + r * s.component_mul(&n);
                child.log_scales[0] = field.log_scales[i].add_scalar(-shrink);
                child.copy_into(0, &mut appended);
                appended_parent.push(i);
            }
        } else {
            field.copy_into(i, &mut out);
            parent.push(i);
            if hot {
                cloned += 1;
                field.copy_into(i, &mut appended);
                appended_parent.push(i);
            }
        }
    }
    for j in 0..appended.len() {
        appended.copy_into(j, &mut out);
        parent.push(appended_parent[j]);
    }

    let keep: Vec<usize> = (0..out.len())
        .filter(|&i| out.opacity(i) >= opts.prune_opacity)
        .collect();
    if keep.is_empty() {
        return Err(Error::DegenerateField);
    }
    let pruned = out.len() - keep.len();
    let mut kept = CanonicalGaussianField::default();
    let mut kept_parent = Vec::with_capacity(keep.len());
    for i in keep {
        out.copy_into(i, &mut kept);
        kept_parent.push(parent[i]);
    }
    Ok(DensifyOutcome {
        field: kept,
        parent: kept_parent,
        cloned,
        split,
        pruned,
    })
}

impl CanonicalGaussianField {
    fn clone_one(&self, i: usize) -> CanonicalGaussianField {
        let mut f = CanonicalGaussianField::default();
        self.copy_into(i, &mut f);
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::quat_from_wxyz;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut impl Rng, n: usize) -> CanonicalGaussianField {
        let mut f = CanonicalGaussianField::default();
        for _ in 0..n {
            f.push(
                Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                Vec3::from_fn(|_, _| rng.random_range(-2.0..0.0)),
                quat_from_wxyz(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
                rng.random_range(-3.0..3.0),
                rng.random_bool(0.5),
            );
        }
        f
    }

    fn random_transforms(rng: &mut impl Rng, n: usize) -> Vec<Se3> {
        (0..n)
            .map(|_| {
                Se3::from_axis_angle(
                    Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                    rng.random_range(-3.0..3.0),
                    Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect()
    }

    #[test]
    fn covariance_examples() {
        let id = assemble_covariance(&Vec3::zeros(), &Quat::identity());
        assert!((id - Mat3::identity()).norm() < 1e-15);
        let c = assemble_covariance(&Vec3::new(2f64.ln(), 0.0, 0.0), &Quat::identity());
        assert!((c - Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0))).norm() < 1e-12);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field(&mut rng, 50);
        for i in 0..f.len() {
            let c = f.covariance(i);
            assert!((c - c.transpose()).norm() < 1e-14);
            let mut eig: Vec<f64> = c.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = f.log_scales[i].iter().map(|s| (2.0 * s).exp()).collect();
            eig.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                assert!(*a >= -1e-12);
                assert!((a - b).abs() < 1e-12 * b.max(1.0));
            }
        }
    }

    #[test]
    fn pose_identity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(&mut rng, 10);
        let posed = pose_field(&f, &vec![Se3::identity(); 10]).unwrap();
        for i in 0..10 {
            assert_eq!(posed.means[i], f.means[i]);
            assert!((posed.covariances[i] - f.covariance(i)).norm() < 1e-15);
        }
        let t = Vec3::new(0.3, -1.0, 2.0);
        let posed = pose_field(&f, &vec![Se3::from_translation(t); 10]).unwrap();
        for i in 0..10 {
            assert!((posed.means[i] - f.means[i] - t).norm() < 1e-15);
            assert!((posed.covariances[i] - f.covariance(i)).norm() < 1e-15);
        }
        assert!(pose_field(&f, &[Se3::identity()]).is_err());
    }

    #[test]
    fn pose_quarter_turn_swaps_axes() {
        let mut f = CanonicalGaussianField::default();
        let (a, b, c) = (4.0f64, 1.0f64, 0.25f64);
        f.push(
            Vec3::zeros(),
            Vec3::new(a.sqrt().ln(), b.sqrt().ln(), c.sqrt().ln()),
            Quat::identity(),
            Vec3::zeros(),
            0.0,
            true,
        );
        let rz = Se3::from_axis_angle(Vec3::z(), std::f64::consts::FRAC_PI_2, Vec3::zeros());
        let posed = pose_field(&f, &[rz]).unwrap();
        // direct product oracle
        let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let oracle = r * Mat3::from_diagonal(&Vec3::new(a, b, c)) * r.transpose();
        assert!((posed.covariances[0] - oracle).norm() < 1e-12);
        assert!((posed.covariances[0] - Mat3::from_diagonal(&Vec3::new(b, a, c))).norm() < 1e-12);
    }

    #[test]
    fn pose_preserves_determinant_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(&mut rng, 40);
        let tfs = random_transforms(&mut rng, 40);
        let posed = pose_field(&f, &tfs).unwrap();
        let mut vol0 = 0.0;
        let mut vol1 = 0.0;
        for i in 0..40 {
            let d0 = f.covariance(i).determinant();
            let d1 = posed.covariances[i].determinant();
            assert!((d1 - d0).abs() <= 1e-9 * d0.abs());
            vol0 += f.opacity(i) * d0.sqrt();
            vol1 += posed.opacities[i] * d1.sqrt();
            let back = tfs[i].inverse();
            let mu = back.transform_point(&posed.means[i]);
            let rb = back.rotation_matrix();
            let cov = rb * posed.covariances[i] * rb.transpose();
            assert!((mu - f.means[i]).norm() < 1e-9);
            assert!((cov - f.covariance(i)).norm() < 1e-9);
        }
        assert!((vol0 - vol1).abs() < 1e-9 * vol0);
    }

    #[test]
    fn pose_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_field(&mut rng, 3);
        let tfs = random_transforms(&mut rng, 3);
        let mut g = PosedGrad::zeros(3);
        for i in 0..3 {
            g.means[i] = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            g.covariances[i] = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            g.colors[i] = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            g.opacities[i] = rng.random_range(-1.0..1.0);
        }
        let loss = |f: &CanonicalGaussianField, tfs: &[Se3]| -> f64 {
            let p = pose_field(f, tfs).unwrap();
            (0..3)
                .map(|i| {
                    p.means[i].dot(&g.means[i])
                        + p.covariances[i].component_mul(&g.covariances[i]).sum()
                        + p.colors[i].dot(&g.colors[i])
                        + p.opacities[i] * g.opacities[i]
                })
                .sum()
        };
        let mut fg = FieldGrad::zeros(3);
        let tg = pose_field_backward(&f, &tfs, &g, &mut fg);
        let h = 1e-6;
        let check = |a: f64, fd: f64| assert!((a - fd).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {fd}");
        for i in 0..3 {
            for k in 0..3 {
                let mut fp = f.clone();
                fp.means[i][k] += h;
                let mut fm = f.clone();
                fm.means[i][k] -= h;
                check(fg.means[i][k], (loss(&fp, &tfs) - loss(&fm, &tfs)) / (2.0 * h));
                let mut fp = f.clone();
                fp.log_scales[i][k] += h;
                let mut fm = f.clone();
                fm.log_scales[i][k] -= h;
                check(fg.log_scales[i][k], (loss(&fp, &tfs) - loss(&fm, &tfs)) / (2.0 * h));
                let mut tp = tfs.clone();
                tp[i].translation[k] += h;
                let mut tm = tfs.clone();
                tm[i].translation[k] -= h;
                check(tg[i].1[k], (loss(&f, &tp) - loss(&f, &tm)) / (2.0 * h));
            }
            for a in 0..4 {
                let perturb = |d: f64| {
                    let mut q = crate::geom::quat_wxyz(&f.rotations[i]);
                    q[a] += d;
                    let mut ff = f.clone();
                    ff.rotations[i] = quat_from_wxyz(q[0], q[1], q[2], q[3]);
                    ff
                };
                check(fg.rotations[i][a], (loss(&perturb(h), &tfs) - loss(&perturb(-h), &tfs)) / (2.0 * h));
            }
            // rotation gradient checked through a left perturbation exp(δ) R
            for k in 0..3 {
                let mut d = Vec3::zeros();
                d[k] = h;
                let mut tp = tfs.clone();
                tp[i].rotation = crate::geom::exp_so3(&d) * tp[i].rotation;
                let mut tm = tfs.clone();
                tm[i].rotation = crate::geom::exp_so3(&-d) * tm[i].rotation;
                let fd = (loss(&f, &tp) - loss(&f, &tm)) / (2.0 * h);
                let r = tfs[i].rotation_matrix();
                let analytic = crate::geom::vee_antisym(&(tg[i].0 * r.transpose()))[k];
                check(analytic, fd);
            }
        }
    }

    #[test]
    fn densify_noop_when_quiet() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f = random_field(&mut rng, 20);
        f.opacity_logits.iter_mut().for_each(|o| *o = 1.0);
        let out = densify_and_prune(&f, &[0.0; 20], &DensifyOptions::default(), &mut rng).unwrap();
        assert_eq!(out.field, f);
        assert_eq!(out.parent, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn densify_prunes_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = random_field(&mut rng, 3);
        f.opacity_logits = vec![1.0, logit(0.001), 1.0];
        let out = densify_and_prune(&f, &[0.0; 3], &DensifyOptions::default(), &mut rng).unwrap();
        assert_eq!(out.field.len(), 2);
        assert_eq!(out.parent, vec![0, 2]);
        assert_eq!(out.pruned, 1);
        f.opacity_logits = vec![logit(0.001); 3];
        assert!(matches!(
            densify_and_prune(&f, &[0.0; 3], &DensifyOptions::default(), &mut rng),
            Err(Error::DegenerateField)
        ));
    }

    #[test]
    fn densify_splits_large_and_clones_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut f = CanonicalGaussianField::default();
        f.push(Vec3::zeros(), Vec3::new(-1.0, -1.5, -2.0), Quat::identity(), Vec3::zeros(), 2.0, true);
        f.push(Vec3::x(), Vec3::repeat(-8.0), Quat::identity(), Vec3::zeros(), 2.0, false);
        let opts = DensifyOptions::default();
        let out = densify_and_prune(&f, &[1.0, 0.0], &opts, &mut rng).unwrap();
        assert_eq!(out.field.len(), 3);
        assert_eq!(out.split, 1);
        assert_eq!(out.parent, vec![1, 0, 0]);
        for c in 1..3 {
            let want = f.log_scales[0].add_scalar(-(1.6f64).ln());
            assert_eq!(out.field.log_scales[c], want);
            assert!(out.field.is_dynamic[c]);
        }
        let out = densify_and_prune(&f, &[0.0, 1.0], &opts, &mut rng).unwrap();
        assert_eq!(out.field.len(), 3);
        assert_eq!(out.cloned, 1);
        assert_eq!(out.parent, vec![0, 1, 1]);
        assert!(out.field.is_finite());
    }
}
